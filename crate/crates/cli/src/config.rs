use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use artiqc_core::artsim::mix_seed;
use artiqc_core::encoder::EncoderConfig;
use artiqc_core::flow::FlowTrainConfig;
use artiqc_core::qc::Aggregation;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    pub corrupt_fraction: f64,
    /// Lowest severity applied to a corrupted volume.
    pub min_severity: f64,
    /// Severities at or above this are labeled high, below it medium.
    pub high_severity: f64,
    pub dims: [usize; 3],
    pub id_prefix: String,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            count: 200,
            corrupt_fraction: 0.15,
            min_severity: 0.5,
            high_severity: 0.75,
            dims: [64, 64, 32],
            id_prefix: "vol".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSeeds {
    pub simulate: Option<u64>,
    pub encoder: Option<u64>,
    pub flow: Option<u64>,
}

/// Where each artifact lives. Relative paths resolve against the output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    /// Dataset scored by `score`; the reference split when absent.
    pub eval_data: Option<PathBuf>,
    pub encoder_checkpoint: PathBuf,
    pub flow_checkpoint: PathBuf,
    pub flow_sidecar: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            eval_data: None,
            encoder_checkpoint: "encoder.mqcp".into(),
            flow_checkpoint: "flow.mqcp".into(),
            flow_sidecar: "flow.json".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: StageSeeds,
    pub out: PathBuf,
    pub image_size: (usize, usize),
    pub encoder: EncoderConfig,
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    pub flow: FlowTrainConfig,
    pub slice_count: usize,
    pub aggregation: Aggregation,
    pub tau: f64,
    pub simulate: SimulateConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: StageSeeds::default(),
            out: "run".into(),
            image_size: (64, 64),
            encoder: EncoderConfig::default(),
            encoder_steps: 2000,
            encoder_lr: 1e-3,
            flow: FlowTrainConfig { steps: 3000, lr: 1e-3, batch_size: 64 },
            slice_count: 20,
            aggregation: Aggregation::Mean,
            tau: 0.05,
            simulate: SimulateConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Keys accepted as bare flags in place of their dotted config path.
const ALIASES: &[(&str, &str)] = &[
    ("count", "simulate.count"),
    ("corrupt_fraction", "simulate.corrupt_fraction"),
    ("data", "paths.data"),
    ("eval_data", "paths.eval_data"),
    ("steps", "encoder_steps"),
];

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `--key value` / `--key=value` overrides. Keys use dots for
    /// nesting and may spell underscores as dashes. Values parse as JSON
    /// when they can and as strings otherwise.
    pub fn with_overrides(self, args: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(&self)?;
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                bail!("unexpected argument {arg:?}; overrides look like --key value");
            };
            let (key, raw) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().with_context(|| format!("--{flag} needs a value"))?;
                    (flag.to_string(), v.clone())
                }
            };
            let key = key.replace('-', "_");
            let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key.clone(), |(_, full)| full.to_string());
            let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            set_path(&mut doc, &key, value)?;
        }
        serde_json::from_value(doc).context("applying overrides")
    }

    /// Copies `image_size` into the encoder config and checks invariants.
    pub fn finalize(mut self) -> Result<Self> {
        self.encoder.input_size = self.image_size;
        self.encoder.validate()?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            bail!("tau must lie in (0, 1), got {}", self.tau);
        }
        if !(0.0..=1.0).contains(&self.simulate.corrupt_fraction) {
            bail!("corrupt_fraction must lie in [0, 1]");
        }
        let s = &self.simulate;
        if !(0.0..=1.0).contains(&s.min_severity) || !(s.min_severity..=1.0).contains(&s.high_severity) {
            bail!("need 0 <= min_severity <= high_severity <= 1");
        }
        if self.slice_count == 0 {
            bail!("slice_count must be >= 1");
        }
        let p = &self.paths;
        let outputs = [&p.encoder_checkpoint, &p.flow_checkpoint, &p.flow_sidecar, &p.report];
        for (i, a) in outputs.iter().enumerate() {
            if outputs[i + 1..].contains(a) || *a == &p.data {
                bail!("output path {} is used twice", a.display());
            }
        }
        Ok(self)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.out.join(p) }
    }

    pub fn simulate_seed(&self) -> u64 {
        self.seeds.simulate.unwrap_or_else(|| mix_seed(self.seed, 1))
    }

    pub fn encoder_seed(&self) -> u64 {
        self.seeds.encoder.unwrap_or_else(|| mix_seed(self.seed, 2))
    }

    pub fn flow_seed(&self) -> u64 {
        self.seeds.flow.unwrap_or_else(|| mix_seed(self.seed, 3))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("config key {key:?} does not name a field");
        };
        if !map.contains_key(*part) {
            bail!("unknown config key {key:?}");
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_nested_and_aliased() {
        let cfg = RunConfig::default()
            .with_overrides(&args(&["--tau", "0.03", "--flow.steps=10", "--encoder.growth-rate", "4", "--count", "7", "--out", "x/y"]))
            .unwrap();
        assert_eq!(cfg.tau, 0.03);
        assert_eq!(cfg.flow.steps, 10);
        assert_eq!(cfg.encoder.growth_rate, 4);
        assert_eq!(cfg.simulate.count, 7);
        assert_eq!(cfg.out, PathBuf::from("x/y"));
        let cfg = cfg.with_overrides(&args(&["--image-size", "[32,32]", "--eval-data", "held"])).unwrap().finalize().unwrap();
        assert_eq!(cfg.encoder.input_size, (32, 32));
        assert_eq!(cfg.paths.eval_data, Some(PathBuf::from("held")));
    }

    #[test]
    fn bad_overrides() {
        let base = RunConfig::default();
        assert!(base.clone().with_overrides(&args(&["--nope", "1"])).is_err());
        assert!(base.clone().with_overrides(&args(&["--tau"])).is_err());
        assert!(base.clone().with_overrides(&args(&["tau", "1"])).is_err());
        assert!(base.clone().with_overrides(&args(&["--tau.x", "1"])).is_err());
        assert!(base.clone().with_overrides(&args(&["--tau", "1.5"])).unwrap().finalize().is_err());
        assert!(base.with_overrides(&args(&["--paths.report", "flow.json"])).unwrap().finalize().is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.seeds.flow = Some(9);
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.flow_seed(), 9);
        assert_ne!(back.encoder_seed(), back.simulate_seed());
        fs::write(&path, r#"{"tau": 0.1}"#).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap().tau, 0.1);
    }
}
