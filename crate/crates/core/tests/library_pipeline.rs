use artiqc_core::artsim::corrupt_volume;
use artiqc_core::diffnet::ParamStore;
use artiqc_core::encoder::train_encoder;
use artiqc_core::flow::train_flow;
use artiqc_core::qc::{calibrate_threshold, classify, contingency, emit_report, volume_embedding, Aggregation};
use artiqc_core::volio::{load_volume, write_volume};
use artiqc_core::{phantom, CorruptionKind, CorruptionSpec, EncoderConfig, FlowModel, FlowTrainConfig, Label, Verdict};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: (24, 24),
        dense_blocks: 1,
        layers_per_block: 2,
        growth_rate: 3,
        stem_channels: 4,
        negatives: 4,
        queries_per_step: 1,
        ..EncoderConfig::default()
    }
}

#[test]
fn persisted_models_reproduce_scores() {
    let dir = tempfile::tempdir().unwrap();
    let mut volumes = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10u64 {
        let clean = phantom::generate([24, 24, 8], i).unwrap().volume;
        let v = if i % 5 == 4 {
            labels.push(Label::High);
            corrupt_volume(&clean, &CorruptionSpec { kind: CorruptionKind::Noise, severity: 1.0, seed: i, children: Vec::new() }).unwrap()
        } else {
            labels.push(Label::Low);
            clean
        };
        let path = dir.path().join(format!("v{i}.mqcv"));
        write_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
        volumes.push(v);
    }

    let cfg = tiny_encoder();
    let enc = train_encoder(&volumes, &cfg, 5, 1e-3, 11).unwrap();
    assert_eq!(enc.losses.len(), 5);
    let ckpt = dir.path().join("enc.mqcp");
    enc.params.save(&ckpt).unwrap();
    let params = ParamStore::load(&ckpt).unwrap();

    let embed = |p: &ParamStore| -> Vec<(String, artiqc_core::Embedding)> {
        volumes
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("v{i}"), volume_embedding(v, p, &cfg, 3, Aggregation::Mean).unwrap()))
            .collect()
    };
    let embedded = embed(&params);
    assert_eq!(embedded, embed(&enc.params));

    let points: Vec<_> = embedded.iter().map(|(_, m)| *m).collect();
    let flow = train_flow(&points, &FlowTrainConfig { steps: 50, lr: 1e-3, batch_size: 10 }, 3).unwrap().model;
    let (fc, fs) = (dir.path().join("flow.mqcp"), dir.path().join("flow.json"));
    flow.save(&fc, &fs).unwrap();
    let reloaded = FlowModel::load(&fc, &fs).unwrap();

    let densities: Vec<f64> = classify(&embedded, &flow, &calibrate_threshold(&[0.0], 0.5).unwrap()).iter().map(|r| r.log_density).collect();
    let cal = calibrate_threshold(&densities, 0.2).unwrap();
    let mut records = classify(&embedded, &reloaded, &cal);
    for (r, l) in records.iter_mut().zip(&labels) {
        r.label = Some(*l);
    }
    assert_eq!(records.iter().map(|r| r.log_density).collect::<Vec<_>>(), densities);
    let fails = records.iter().filter(|r| r.verdict == Verdict::Fail).count();
    assert!((1..=3).contains(&fails), "{fails} fails");

    let t = contingency(&records).unwrap();
    assert_eq!(t.tp + t.fn_, 2);
    assert_eq!(t.tn + t.fp, 8);
    let paths = emit_report(&records, &cal, &reloaded, dir.path().join("report")).unwrap();
    assert_eq!(std::fs::read_to_string(paths.records).unwrap().lines().count(), 11);
    assert!(std::fs::read_to_string(paths.scatter).unwrap().contains("<svg"));
}
