use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use artiqc_core::artsim::{corrupt_volume, mix_seed, CorruptionKind, CorruptionSpec};
use artiqc_core::diffnet::ParamStore;
use artiqc_core::encoder::{train_encoder, Embedding, EncoderConfig};
use artiqc_core::flow::{log_density, train_flow, FlowModel};
use artiqc_core::phantom;
use artiqc_core::qc::{self, calibrate_threshold, classify, emit_report, volume_embedding, Label, MetricsReport, QcRecord};
use artiqc_core::volio::{load_volume, write_volume, Volume};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub spec: Option<CorruptionSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub volumes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mqcv"))
}

pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub volumes: Vec<Volume>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let volumes = manifest
            .volumes
            .iter()
            .map(|e| load_volume(volume_path(dir, &e.id)).with_context(|| format!("loading volume {}", e.id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries: manifest.volumes, volumes })
    }
}

/// The clean phantom behind volume `index` of a simulated dataset.
pub fn simulated_phantom(cfg: &RunConfig, index: usize) -> Result<Volume> {
    Ok(phantom::generate(cfg.simulate.dims, mix_seed(cfg.simulate_seed(), index as u64))?.volume)
}

/// Generates the phantom dataset, corrupting a seeded subset with random
/// artifacts at severity >= `min_severity`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Manifest> {
    let sim = &cfg.simulate;
    let dir = cfg.resolve(&cfg.paths.data);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.simulate_seed());
    let n_corrupt = (sim.count as f64 * sim.corrupt_fraction).round() as usize;
    let mut order: Vec<usize> = (0..sim.count).collect();
    order.shuffle(&mut rng);
    let mut corrupted = vec![false; sim.count];
    for &i in &order[..n_corrupt] {
        corrupted[i] = true;
    }
    let kinds = [CorruptionKind::Noise, CorruptionKind::Motion, CorruptionKind::Bias, CorruptionKind::Wraparound];

    let mut manifest = Manifest::default();
    for (i, &bad) in corrupted.iter().enumerate() {
        let id = format!("{}_{i:04}", sim.id_prefix);
        let clean = simulated_phantom(cfg, i)?;
        let (volume, label, spec) = if bad {
            let kind = kinds[rng.random_range(0..kinds.len())];
            let severity = rng.random_range(sim.min_severity..=1.0);
            let spec = CorruptionSpec::leaf(kind, severity, rng.random());
            let label = if severity >= sim.high_severity { Label::High } else { Label::Medium };
            (corrupt_volume(&clean, &spec)?, label, Some(spec))
        } else {
            (clean, Label::Low, None)
        };
        write_volume(&volume, volume_path(&dir, &id))?;
        manifest.volumes.push(ManifestEntry { id, label, spec });
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    info!("simulated {} volumes ({n_corrupt} corrupted) in {}", sim.count, dir.display());
    Ok(manifest)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

fn encoder_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn cmd_train_encoder(cfg: &RunConfig) -> Result<Vec<f64>> {
    let data = Dataset::load(&cfg.resolve(&cfg.paths.data))?;
    let trained = train_encoder(&data.volumes, &cfg.encoder, cfg.encoder_steps, cfg.encoder_lr, cfg.encoder_seed())?;
    let ckpt = cfg.resolve(&cfg.paths.encoder_checkpoint);
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent)?;
    }
    trained.params.save(&ckpt)?;
    fs::write(encoder_sidecar(&ckpt), serde_json::to_string_pretty(&cfg.encoder)?)?;
    fs::write(cfg.out.join("encoder_loss.csv"), loss_csv(&trained.losses))?;
    info!("encoder trained for {} steps, final loss {:.4}", cfg.encoder_steps, trained.losses.last().unwrap_or(&f64::NAN));
    Ok(trained.losses)
}

pub fn load_encoder(cfg: &RunConfig) -> Result<(ParamStore, EncoderConfig)> {
    let ckpt = cfg.resolve(&cfg.paths.encoder_checkpoint);
    let params = ParamStore::load(&ckpt).with_context(|| format!("loading encoder {}", ckpt.display()))?;
    let side = encoder_sidecar(&ckpt);
    let enc: EncoderConfig = serde_json::from_str(&fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?)?;
    Ok((params, enc))
}

/// Volume-level embeddings of every volume in `data`.
pub fn embed_dataset(cfg: &RunConfig, data: &Dataset, params: &ParamStore, enc: &EncoderConfig) -> Result<Vec<(String, Embedding)>> {
    data.entries
        .iter()
        .zip(&data.volumes)
        .map(|(e, v)| Ok((e.id.clone(), volume_embedding(v, params, enc, cfg.slice_count, cfg.aggregation)?)))
        .collect()
}

fn embeddings_csv(rows: &[(String, Embedding)]) -> String {
    let mut out = String::from("volume_id,m1,m2\n");
    for (id, m) in rows {
        let _ = writeln!(out, "{id},{},{}", m.0[0], m.0[1]);
    }
    out
}

pub fn cmd_train_flow(cfg: &RunConfig) -> Result<Vec<f64>> {
    let data = Dataset::load(&cfg.resolve(&cfg.paths.data))?;
    let (params, enc) = load_encoder(cfg)?;
    let rows = embed_dataset(cfg, &data, &params, &enc)?;
    let embeddings: Vec<Embedding> = rows.iter().map(|(_, m)| *m).collect();
    let mut flow_cfg = cfg.flow.clone();
    flow_cfg.batch_size = flow_cfg.batch_size.min(embeddings.len());
    let trained = train_flow(&embeddings, &flow_cfg, cfg.flow_seed())?;
    trained.model.save(cfg.resolve(&cfg.paths.flow_checkpoint), cfg.resolve(&cfg.paths.flow_sidecar))?;
    fs::write(cfg.out.join("flow_loss.csv"), loss_csv(&trained.losses))?;
    fs::write(cfg.out.join("embeddings.csv"), embeddings_csv(&rows))?;
    info!("flow trained for {} steps, final nll {:.4}", flow_cfg.steps, trained.losses.last().unwrap_or(&f64::NAN));
    Ok(trained.losses)
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub records: Vec<QcRecord>,
    pub metrics: MetricsReport,
    pub calibration: qc::ThresholdCalibration,
    pub report_dir: PathBuf,
}

/// Calibrates on the reference split (the flow's training data) and
/// classifies the evaluation split.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreOutcome> {
    let (params, enc) = load_encoder(cfg)?;
    let flow = FlowModel::load(cfg.resolve(&cfg.paths.flow_checkpoint), cfg.resolve(&cfg.paths.flow_sidecar))?;
    let reference = Dataset::load(&cfg.resolve(&cfg.paths.data))?;
    let reference_rows = embed_dataset(cfg, &reference, &params, &enc)?;
    let reference_ld: Vec<f64> = reference_rows.iter().map(|(_, m)| log_density(&flow, m)).collect();
    let calibration = calibrate_threshold(&reference_ld, cfg.tau)?;

    let (eval, eval_rows) = match &cfg.paths.eval_data {
        Some(dir) => {
            let eval = Dataset::load(&cfg.resolve(dir))?;
            let rows = embed_dataset(cfg, &eval, &params, &enc)?;
            (eval, rows)
        }
        None => (reference, reference_rows),
    };
    if eval_rows.is_empty() {
        bail!("evaluation split is empty");
    }
    let mut records = classify(&eval_rows, &flow, &calibration);
    for (r, e) in records.iter_mut().zip(&eval.entries) {
        r.label = Some(e.label);
    }
    let report_dir = cfg.resolve(&cfg.paths.report);
    emit_report(&records, &calibration, &flow, &report_dir)?;
    fs::write(report_dir.join("calibration.json"), serde_json::to_string_pretty(&calibration)?)?;
    let table = qc::contingency(&records)?;
    let metrics = MetricsReport::new(Some(&table), &calibration);
    info!(
        "scored {} volumes: {} flagged, sensitivity {:?}, specificity {:?}",
        records.len(),
        table.tp + table.fp,
        metrics.sensitivity,
        metrics.specificity
    );
    Ok(ScoreOutcome { records, metrics, calibration, report_dir })
}
