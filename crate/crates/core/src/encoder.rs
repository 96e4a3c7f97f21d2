//! The artifact encoder: a small densely connected convolutional network
//! mapping a slice to a 2-D embedding, trained with a contrastive loss over
//! (query, positive, negatives) batches.
//!
//! The query is an axial slice; the positive is a coronal or sagittal slice
//! of the same volume, so both share an artifact level. Negatives are either
//! the query with a simulated corruption or slices from other volumes.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artsim::{corrupt, mix_seed, CorruptionKind, CorruptionSpec, SimError};
use crate::diffnet::{self, backward, forward, DiffError, Graph, NodeId, ParamStore, Tensor};
use crate::volio::{extract_slice, prepare_slice, Orientation, SliceImage, VolError, Volume};

pub const EMBEDDING_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("need at least 2 volumes, got {0}")]
    InsufficientVolumes(usize),
    #[error("image is {got:?}, encoder expects {expected:?}")]
    ShapeMismatch { got: (usize, usize), expected: (usize, usize) },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Volume(#[from] VolError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// A point in the 2-D artifact space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Embedding(pub [f64; 2]);

impl Embedding {
    pub fn new(m1: f64, m2: f64) -> Self {
        Self([m1, m2])
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn mean(items: &[Embedding]) -> Embedding {
        let n = items.len() as f64;
        let (a, b) = items.iter().fold((0.0, 0.0), |(a, b), e| (a + e.0[0], b + e.0[1]));
        Embedding([a / n, b / n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_size: (usize, usize),
    pub dense_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub embedding_dim: usize,
    pub negatives: usize,
    pub simulated_negative_fraction: f64,
    /// Queries whose gradients are accumulated per optimizer step.
    pub queries_per_step: usize,
    pub severity_range: (f64, f64),
    /// Fraction of each axis skipped at both ends when sampling slices.
    pub slice_margin: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            dense_blocks: 3,
            layers_per_block: 4,
            growth_rate: 8,
            stem_channels: 8,
            stem_stride: 2,
            embedding_dim: EMBEDDING_DIM,
            negatives: 8,
            simulated_negative_fraction: 0.5,
            queries_per_step: 4,
            severity_range: (0.2, 0.8),
            slice_margin: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.embedding_dim != EMBEDDING_DIM {
            return bad("embedding_dim must be 2");
        }
        if self.negatives == 0 {
            return bad("negatives must be >= 1");
        }
        if self.dense_blocks == 0 || self.growth_rate == 0 || self.stem_channels == 0 || self.stem_stride == 0 {
            return bad("block, growth, stem sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.simulated_negative_fraction) {
            return bad("simulated_negative_fraction must be in [0, 1]");
        }
        if self.queries_per_step == 0 {
            return bad("queries_per_step must be >= 1");
        }
        let (lo, hi) = self.severity_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("severity_range must satisfy 0 <= lo <= hi <= 1");
        }
        if !(0.0..0.5).contains(&self.slice_margin) {
            return bad("slice_margin must be in [0, 0.5)");
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return bad("input_size must be positive");
        }
        Ok(())
    }

    pub fn simulated_negatives(&self) -> usize {
        (self.negatives as f64 * self.simulated_negative_fraction).round() as usize
    }
}

/// Parameter shapes in graph order: (name, shape, fan_in).
fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut conv = |name: String, cin: usize, cout: usize| {
        out.push((format!("{name}.w"), vec![cout, cin, 3, 3], cin * 9));
        out.push((format!("{name}.b"), vec![cout], 0));
    };
    conv("enc.stem".into(), 1, cfg.stem_channels);
    let mut channels = cfg.stem_channels;
    for b in 0..cfg.dense_blocks {
        for l in 0..cfg.layers_per_block {
            conv(format!("enc.block{b}.layer{l}"), channels + l * cfg.growth_rate, cfg.growth_rate);
        }
        channels += cfg.layers_per_block * cfg.growth_rate;
        if b + 1 < cfg.dense_blocks {
            let next = (channels / 2).max(cfg.growth_rate);
            conv(format!("enc.trans{b}"), channels, next);
            channels = next;
        }
    }
    out.push(("enc.head.w".into(), vec![EMBEDDING_DIM, channels], channels));
    out.push(("enc.head.b".into(), vec![EMBEDDING_DIM], 0));
    out
}

/// He-uniform conv weights, LeCun-uniform head, zero biases.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, fan_in) in layout(cfg) {
        if name.ends_with(".b") {
            store.insert_zeros(name, &shape);
        } else if name == "enc.head.w" {
            let bound = (3.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product()).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(name, Tensor::new(shape, data)?);
        } else {
            store.insert_he_uniform(name, &shape, fan_in, &mut rng);
        }
    }
    Ok(store)
}

fn conv_relu(g: &mut Graph, x: NodeId, name: &str, stride: usize) -> NodeId {
    let w = g.param(format!("{name}.w"));
    let b = g.param(format!("{name}.b"));
    let y = g.conv2d(x, w, Some(b), stride, 1);
    g.relu(y)
}

/// Appends the encoder to `g`, reading `[B, 1, H, W]` from `x` and
/// returning the `[B, 2]` embedding node.
pub fn append_encoder(g: &mut Graph, x: NodeId, cfg: &EncoderConfig) -> NodeId {
    let mut h = conv_relu(g, x, "enc.stem", cfg.stem_stride);
    for b in 0..cfg.dense_blocks {
        let mut features = vec![h];
        for l in 0..cfg.layers_per_block {
            let input = if features.len() == 1 { features[0] } else { g.concat(features.clone(), 1) };
            features.push(conv_relu(g, input, &format!("enc.block{b}.layer{l}"), 1));
        }
        h = if features.len() == 1 { features[0] } else { g.concat(features, 1) };
        if b + 1 < cfg.dense_blocks {
            h = conv_relu(g, h, &format!("enc.trans{b}"), 2);
        }
    }
    let pooled = g.global_avg_pool(h);
    let w = g.param("enc.head.w");
    let bias = g.param("enc.head.b");
    g.dense(pooled, w, Some(bias))
}

/// Graph from a `[B, 1, H, W]` batch (input 0) to `[B, 2]` embeddings.
pub fn embedding_graph(cfg: &EncoderConfig) -> Graph {
    let mut g = Graph::new();
    let x = g.input(0);
    let out = append_encoder(&mut g, x, cfg);
    g.set_output(out);
    g
}

/// Appends the contrastive loss over a `[2 + N, 2]` embedding node whose
/// rows are query, positive, then the N negatives.
pub fn append_info_nce(g: &mut Graph, emb: NodeId, negatives: usize) -> NodeId {
    let q = g.slice(emb, 0, 0, 1);
    let q = g.reshape(q, vec![EMBEDDING_DIM]);
    let pos = g.slice(emb, 0, 1, 1);
    let neg = g.slice(emb, 0, 2, negatives);
    let d_pos = g.dense(q, pos, None);
    let d_neg = g.dense(q, neg, None);
    let lse_neg = g.log_sum_exp(d_neg);
    let mean_neg = g.add_scalar(lse_neg, -(negatives as f64).ln());
    let both = g.concat(vec![d_pos, mean_neg], 0);
    let denom = g.log_sum_exp(both);
    g.sub(denom, d_pos)
}

/// Graph from a `[2 + N, 2]` embedding matrix (input 0) to the scalar loss.
pub fn info_nce_graph(negatives: usize) -> Graph {
    let mut g = Graph::new();
    let emb = g.input(0);
    let out = append_info_nce(&mut g, emb, negatives);
    g.set_output(out);
    g
}

/// Full training graph: image batch (input 0) through encoder and loss.
pub fn loss_graph(cfg: &EncoderConfig) -> Graph {
    let mut g = Graph::new();
    let x = g.input(0);
    let emb = append_encoder(&mut g, x, cfg);
    let out = append_info_nce(&mut g, emb, cfg.negatives);
    g.set_output(out);
    g
}

/// -log[ e^(q.p) / (e^(q.p) + mean_i e^(q.n_i)) ] on raw dot products,
/// evaluated in log-sum-exp form.
pub fn info_nce_loss(query: &Embedding, positive: &Embedding, negatives: &[Embedding]) -> f64 {
    assert!(!negatives.is_empty(), "at least one negative is required");
    let d_pos = query.dot(positive);
    let dots: Vec<f64> = negatives.iter().map(|n| query.dot(n)).collect();
    let lse_neg = log_sum_exp(&dots) - (negatives.len() as f64).ln();
    log_sum_exp(&[d_pos, lse_neg]) - d_pos
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_size(image: &SliceImage, cfg: &EncoderConfig) -> Result<()> {
    if (image.height(), image.width()) != cfg.input_size {
        return Err(EncoderError::ShapeMismatch {
            got: (image.height(), image.width()),
            expected: cfg.input_size,
        });
    }
    Ok(())
}

/// Stacks prepared slices into a `[B, 1, H, W]` tensor.
pub fn batch_tensor(images: &[&SliceImage], cfg: &EncoderConfig) -> Result<Tensor> {
    let (h, w) = cfg.input_size;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        check_size(img, cfg)?;
        data.extend(img.pixels().iter().map(|&p| p as f64));
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

fn rows_to_embeddings(t: &Tensor) -> Vec<Embedding> {
    t.data().chunks_exact(EMBEDDING_DIM).map(|r| Embedding([r[0], r[1]])).collect()
}

pub fn encode(image: &SliceImage, params: &ParamStore, cfg: &EncoderConfig) -> Result<Embedding> {
    Ok(encode_many(&[image], params, cfg)?[0])
}

/// Encodes several slices in one batched pass.
pub fn encode_many(images: &[&SliceImage], params: &ParamStore, cfg: &EncoderConfig) -> Result<Vec<Embedding>> {
    let graph = embedding_graph(cfg);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let (emb, _) = forward(&graph, &[batch_tensor(chunk, cfg)?], params)?;
        out.extend(rows_to_embeddings(&emb));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NegativeSource {
    OtherVolume { volume: usize },
    Simulated(CorruptionSpec),
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub query: SliceImage,
    pub positive: SliceImage,
    pub negatives: Vec<SliceImage>,
    pub provenance: Vec<NegativeSource>,
    /// Index of the volume the query and positive were drawn from.
    pub source_volume: usize,
}

impl ContrastiveBatch {
    /// Query, positive and negatives in the row order the loss expects.
    pub fn images(&self) -> Vec<&SliceImage> {
        let mut v = vec![&self.query, &self.positive];
        v.extend(self.negatives.iter());
        v
    }
}

fn sample_index(rng: &mut impl Rng, extent: usize, margin: f64) -> usize {
    let skip = (margin * extent as f64).floor() as usize;
    let hi = extent.saturating_sub(skip).max(skip + 1).min(extent);
    let lo = skip.min(hi - 1);
    rng.random_range(lo..hi)
}

/// Draws one contrastive batch. Deterministic given `seed`.
pub fn build_batch(volumes: &[Volume], cfg: &EncoderConfig, seed: u64) -> Result<ContrastiveBatch> {
    cfg.validate()?;
    if volumes.len() < 2 {
        return Err(EncoderError::InsufficientVolumes(volumes.len()));
    }
    let (th, tw) = cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = rng.random_range(0..volumes.len());
    let vol = &volumes[source];

    let qz = sample_index(&mut rng, vol.extent(Orientation::Axial), cfg.slice_margin);
    let raw_query = extract_slice(vol, Orientation::Axial, qz)?;
    let pos_orientation = if rng.random_bool(0.5) { Orientation::Coronal } else { Orientation::Sagittal };
    let pz = sample_index(&mut rng, vol.extent(pos_orientation), cfg.slice_margin);
    let positive = prepare_slice(&extract_slice(vol, pos_orientation, pz)?, th, tw)?;

    let n_sim = cfg.simulated_negatives();
    let mut negatives = Vec::with_capacity(cfg.negatives);
    let mut provenance = Vec::with_capacity(cfg.negatives);
    let (sev_lo, sev_hi) = cfg.severity_range;
    for _ in 0..n_sim {
        let kind = if rng.random_bool(0.5) { CorruptionKind::Noise } else { CorruptionKind::Motion };
        let severity = if sev_hi > sev_lo { rng.random_range(sev_lo..sev_hi) } else { sev_lo };
        let spec = CorruptionSpec::leaf(kind, severity, rng.random());
        negatives.push(prepare_slice(&corrupt(&raw_query, &spec)?, th, tw)?);
        provenance.push(NegativeSource::Simulated(spec));
    }
    for _ in n_sim..cfg.negatives {
        let mut other = rng.random_range(0..volumes.len() - 1);
        if other >= source {
            other += 1;
        }
        let orientation = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal][rng.random_range(0..3)];
        let v = &volumes[other];
        let idx = sample_index(&mut rng, v.extent(orientation), cfg.slice_margin);
        negatives.push(prepare_slice(&extract_slice(v, orientation, idx)?, th, tw)?);
        provenance.push(NegativeSource::OtherVolume { volume: other });
    }

    Ok(ContrastiveBatch {
        query: prepare_slice(&raw_query, th, tw)?,
        positive,
        negatives,
        provenance,
        source_volume: source,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub params: ParamStore,
    /// Mean loss over the queries of each step.
    pub losses: Vec<f64>,
}

/// Adam training on freshly drawn batches. Each step accumulates
/// `queries_per_step` batches. Deterministic given `seed`.
pub fn train_encoder(volumes: &[Volume], cfg: &EncoderConfig, steps: usize, lr: f64, seed: u64) -> Result<TrainedEncoder> {
    if steps == 0 {
        return Err(EncoderError::Config("steps must be >= 1".into()));
    }
    if volumes.len() < 2 {
        return Err(EncoderError::InsufficientVolumes(volumes.len()));
    }
    let mut params = init_params(cfg, seed)?;
    let graph = loss_graph(cfg);
    let q = cfg.queries_per_step;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut total = 0.0;
        for k in 0..q {
            let batch = build_batch(volumes, cfg, mix_seed(seed, (step * q + k) as u64 + 1))?;
            let x = batch_tensor(&batch.images(), cfg)?;
            let (loss, tape) = forward(&graph, &[x], &params)?;
            backward(&tape, &Tensor::scalar(1.0 / q as f64), &mut params, false)?;
            total += loss.item();
        }
        params.adam_step(lr, diffnet::ADAM_BETA1, diffnet::ADAM_BETA2, diffnet::ADAM_EPS);
        let mean = total / q as f64;
        if step % 100 == 0 {
            debug!("encoder step {step}: loss {mean:.5}");
        }
        losses.push(mean);
    }
    Ok(TrainedEncoder { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{grad_check, relative_error, FD_STEP};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            input_size: (16, 16),
            dense_blocks: 2,
            layers_per_block: 2,
            growth_rate: 3,
            stem_channels: 4,
            negatives: 4,
            queries_per_step: 1,
            ..EncoderConfig::default()
        }
    }

    fn blob_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cx, cy, r) = (rng.random_range(0.4..0.6), rng.random_range(0.4..0.6), rng.random_range(0.25..0.4));
        let level = rng.random_range(0.5f32..1.0);
        Volume::from_fn(dims, [1.0; 3], |x, y, _| {
            let dx = x as f64 / dims[0] as f64 - cx;
            let dy = y as f64 / dims[1] as f64 - cy;
            if dx * dx + dy * dy < r * r { level } else { 0.0 }
        })
        .unwrap()
    }

    #[test]
    fn closed_form_losses() {
        let z = Embedding::new(0.0, 0.0);
        for n in [1, 3, 8] {
            let negs = vec![Embedding::new(1.0, -2.0); n];
            assert!((info_nce_loss(&z, &Embedding::new(4.0, 5.0), &negs) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let q = Embedding::new(1.0, 0.0);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        let got = info_nce_loss(&q, &Embedding::new(1.0, 0.0), &[Embedding::new(0.0, 1.0)]);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_monotone_in_dots() {
        let q = Embedding::new(1.0, 0.0);
        let negs = [Embedding::new(0.3, 0.0), Embedding::new(-0.5, 1.0)];
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let l = info_nce_loss(&q, &Embedding::new(k as f64 * 0.5, 0.0), &negs);
            assert!(l < prev && l > 0.0);
            prev = l;
        }
        let mut prev = 0.0;
        for k in 0..20 {
            let l = info_nce_loss(&q, &Embedding::new(1.0, 0.0), &[Embedding::new(k as f64 * 0.5 - 5.0, 0.0), negs[1]]);
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn loss_stable_for_large_dots() {
        let q = Embedding::new(50.0 * 0.7, 50.0 * 0.5);
        let p = Embedding::new(10.0, 0.0);
        let negs = [Embedding::new(-10.0, 0.0), Embedding::new(0.0, 10.0)];
        assert!(q.dot(&p).abs() <= 500.0);
        let l = info_nce_loss(&q, &p, &negs);
        assert!(l.is_finite() && l >= 0.0);
        let l = info_nce_loss(&q, &negs[0], &[p]);
        assert!(l.is_finite() && l > 400.0);
    }

    #[test]
    fn loss_graph_matches_closed_form_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let rows: Vec<f64> = (0..(n + 2) * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let emb: Vec<Embedding> = rows.chunks(2).map(|r| Embedding::new(r[0], r[1])).collect();
        let direct = info_nce_loss(&emb[0], &emb[1], &emb[2..]);
        let g = info_nce_graph(n);
        let x = Tensor::new(vec![n + 2, 2], rows.clone()).unwrap();
        let mut store = ParamStore::new();
        let (out, tape) = forward(&g, &[x], &store).unwrap();
        assert!((out.item() - direct).abs() < 1e-12);
        let grads = backward(&tape, &Tensor::scalar(1.0), &mut store, true).unwrap();
        let gx = grads.input(0).unwrap();
        for i in 0..rows.len() {
            let mut plus = rows.clone();
            plus[i] += FD_STEP;
            let mut minus = rows.clone();
            minus[i] -= FD_STEP;
            let f = |r: &[f64]| {
                let e: Vec<Embedding> = r.chunks(2).map(|c| Embedding::new(c[0], c[1])).collect();
                info_nce_loss(&e[0], &e[1], &e[2..])
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            assert!(relative_error(gx.data()[i], numeric) < 1e-6, "row {i}");
        }
    }

    #[test]
    fn encode_total_and_deterministic() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 1).unwrap();
        assert_eq!(params.get("enc.head.b").unwrap().data(), &[0.0, 0.0]);
        let zero = SliceImage::from_fn(16, 16, |_, _| 0.0);
        let m = encode(&zero, &params, &cfg).unwrap();
        assert!(m.is_finite());
        let img = SliceImage::from_fn(16, 16, |r, c| ((r * c) % 7) as f32 / 7.0);
        assert_eq!(encode(&img, &params, &cfg).unwrap(), encode(&img, &params, &cfg).unwrap());
        let wrong = SliceImage::from_fn(8, 16, |_, _| 0.0);
        assert!(matches!(encode(&wrong, &params, &cfg), Err(EncoderError::ShapeMismatch { .. })));
    }

    #[test]
    fn encode_agrees_with_graph_forward() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 2).unwrap();
        let img = SliceImage::from_fn(16, 16, |r, c| ((r + 2 * c) % 5) as f32 / 5.0);
        let m = encode(&img, &params, &cfg).unwrap();
        let x = batch_tensor(&[&img], &cfg).unwrap();
        let (out, _) = forward(&embedding_graph(&cfg), &[x], &params).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(m.0, [out.data()[0], out.data()[1]]);
    }

    #[test]
    fn batch_composition() {
        let vols: Vec<Volume> = (0..4).map(|s| blob_volume(s, [16, 16, 8])).collect();
        let cfg = EncoderConfig { negatives: 2, ..tiny_config() };
        let b = build_batch(&vols, &cfg, 5).unwrap();
        let sims = b.provenance.iter().filter(|p| matches!(p, NegativeSource::Simulated(_))).count();
        assert_eq!((sims, b.negatives.len()), (1, 2));
        assert_eq!(b.query.orientation, Orientation::Axial);
        assert_ne!(b.positive.orientation, Orientation::Axial);
        for p in &b.provenance {
            match p {
                NegativeSource::OtherVolume { volume } => assert_ne!(*volume, b.source_volume),
                NegativeSource::Simulated(spec) => {
                    assert!(matches!(spec.kind, CorruptionKind::Noise | CorruptionKind::Motion));
                    assert!((0.2..0.8).contains(&spec.severity));
                }
            }
        }
        for img in b.images() {
            assert_eq!((img.height(), img.width()), (16, 16));
        }
        assert!(matches!(build_batch(&vols[..1], &cfg, 0), Err(EncoderError::InsufficientVolumes(1))));
    }

    #[test]
    fn simulated_fraction_over_many_batches() {
        let vols: Vec<Volume> = (0..3).map(|s| blob_volume(s, [8, 8, 6])).collect();
        let cfg = EncoderConfig { input_size: (8, 8), negatives: 8, ..tiny_config() };
        let (mut sim, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            let b = build_batch(&vols, &cfg, seed).unwrap();
            sim += b.provenance.iter().filter(|p| matches!(p, NegativeSource::Simulated(_))).count();
            total += b.provenance.len();
        }
        assert!((sim as f64 / total as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn batches_are_seeded() {
        let vols: Vec<Volume> = (0..3).map(|s| blob_volume(s, [16, 16, 8])).collect();
        let cfg = tiny_config();
        let a = build_batch(&vols, &cfg, 11).unwrap();
        let b = build_batch(&vols, &cfg, 11).unwrap();
        assert_eq!(a.query, b.query);
        assert_eq!(a.negatives, b.negatives);
    }

    #[test]
    fn encoder_loss_gradient_check() {
        let vols: Vec<Volume> = (0..3).map(|s| blob_volume(s, [16, 16, 8])).collect();
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 4).unwrap();
        // Zero biases over a zero background sit exactly on the relu kink.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (name, p) in params.iter_mut() {
            if name.ends_with(".b") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
            }
        }
        let batch = build_batch(&vols, &cfg, 2).unwrap();
        let x = batch_tensor(&batch.images(), &cfg).unwrap();
        let report = grad_check(&loss_graph(&cfg), &[x], &params, 1e-4, 9).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn training_steps() {
        let vols: Vec<Volume> = (0..3).map(|s| blob_volume(s, [16, 16, 8])).collect();
        let cfg = tiny_config();
        assert!(train_encoder(&vols, &cfg, 0, 1e-3, 1).is_err());
        let init = init_params(&cfg, 1).unwrap();
        let one = train_encoder(&vols, &cfg, 1, 1e-3, 1).unwrap();
        assert_eq!(one.losses.len(), 1);
        assert_ne!(one.params.to_checkpoint_bytes(), init.to_checkpoint_bytes());
        let again = train_encoder(&vols, &cfg, 3, 1e-3, 1).unwrap();
        let twice = train_encoder(&vols, &cfg, 3, 1e-3, 1).unwrap();
        assert_eq!(again.params.to_checkpoint_bytes(), twice.params.to_checkpoint_bytes());
        assert_eq!(again.losses, twice.losses);
    }

    fn toy_two_cluster(n: usize) -> (Vec<Volume>, Vec<bool>) {
        let mut vols = Vec::new();
        let mut corrupted = Vec::new();
        for s in 0..n as u64 {
            let clean = blob_volume(s, [16, 16, 8]);
            let bad = s % 2 == 1;
            let v = if bad {
                let spec = CorruptionSpec::leaf(CorruptionKind::Noise, 1.0, s);
                crate::artsim::corrupt_volume(&clean, &spec).unwrap()
            } else {
                clean
            };
            vols.push(v);
            corrupted.push(bad);
        }
        (vols, corrupted)
    }

    #[test]
    fn toy_training_progress_and_separation() {
        let (vols, corrupted) = toy_two_cluster(12);
        let cfg = tiny_config();
        let trained = train_encoder(&vols, &cfg, 2000, 1e-3, 5).unwrap();
        let first = trained.losses[..100].iter().sum::<f64>() / 100.0;
        let last = trained.losses[1900..].iter().sum::<f64>() / 100.0;
        assert!(last < first, "first {first} last {last}");

        let emb: Vec<Embedding> = vols
            .iter()
            .map(|v| {
                let slices = crate::volio::center_slices(v, 4, cfg.input_size).unwrap();
                Embedding::mean(&encode_many(&slices.iter().collect::<Vec<_>>(), &trained.params, &cfg).unwrap())
            })
            .collect();
        let dist = |a: &Embedding, b: &Embedding| ((a.0[0] - b.0[0]).powi(2) + (a.0[1] - b.0[1]).powi(2)).sqrt();
        let (mut between, mut nb, mut within, mut nw) = (0.0, 0, 0.0, 0);
        for i in 0..emb.len() {
            for j in i + 1..emb.len() {
                match (corrupted[i], corrupted[j]) {
                    (false, false) => {
                        within += dist(&emb[i], &emb[j]);
                        nw += 1;
                    }
                    (true, true) => {}
                    _ => {
                        between += dist(&emb[i], &emb[j]);
                        nb += 1;
                    }
                }
            }
        }
        assert!(between / nb as f64 > within / nw as f64, "between {} within {}", between / nb as f64, within / nw as f64);
    }
}
