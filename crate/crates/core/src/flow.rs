//! A six-layer affine coupling flow over the 2-D artifact space.
//!
//! Every layer maps `(a, b)` to `(b, a * exp(s(b)) + t(b))`: the passive
//! coordinate moves to the front and the other one is transformed, so the
//! transformed coordinate alternates from layer to layer. Inputs are
//! standardized with training-set statistics first, and the standardization
//! Jacobian is part of the reported log-density.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{self, backward, forward, DiffError, Graph, NodeId, ParamStore, Tensor};
use crate::encoder::Embedding;

pub const NUM_LAYERS: usize = 6;
pub const HIDDEN: usize = 32;
pub const S_CLAMP: f64 = 5.0;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("non-finite intermediate value in layer {layer}")]
    NonFiniteIntermediate { layer: usize },
    #[error("component {component} of the training data has zero variance")]
    DegenerateData { component: usize },
    #[error("need at least {need} embeddings, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Scale,
    Shift,
}

impl Net {
    fn tag(self) -> &'static str {
        match self {
            Net::Scale => "s",
            Net::Shift => "t",
        }
    }
}

/// Names the parameters of one coupling layer's two MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CouplingLayer {
    pub index: usize,
}

impl CouplingLayer {
    /// 0 when the layer transforms the first input coordinate of the
    /// original embedding, 1 for the second.
    pub fn parity(&self) -> usize {
        self.index % 2
    }

    pub fn param_name(&self, net: Net, part: &str) -> String {
        format!("flow.{}.{}.{}", self.index, net.tag(), part)
    }
}

/// Per-component affine standardization applied before the flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for Standardize {
    fn default() -> Self {
        Self { mean: [0.0; 2], std: [1.0; 2] }
    }
}

impl Standardize {
    pub fn fit(data: &[Embedding]) -> Result<Self> {
        if data.is_empty() {
            return Err(FlowError::InsufficientData { need: 1, got: 0 });
        }
        let n = data.len() as f64;
        let mut out = Self::default();
        for c in 0..2 {
            let mean = data.iter().map(|e| e.0[c]).sum::<f64>() / n;
            let var = data.iter().map(|e| (e.0[c] - mean).powi(2)).sum::<f64>() / n;
            if var <= 0.0 || !var.is_finite() {
                return Err(FlowError::DegenerateData { component: c });
            }
            out.mean[c] = mean;
            out.std[c] = var.sqrt();
        }
        Ok(out)
    }

    pub fn apply(&self, m: &Embedding) -> [f64; 2] {
        [(m.0[0] - self.mean[0]) / self.std[0], (m.0[1] - self.mean[1]) / self.std[1]]
    }

    pub fn invert(&self, u: [f64; 2]) -> Embedding {
        Embedding([u[0] * self.std[0] + self.mean[0], u[1] * self.std[1] + self.mean[1]])
    }

    /// log |det| of the map m -> u.
    pub fn log_det(&self) -> f64 {
        -(self.std[0].ln() + self.std[1].ln())
    }
}

/// JSON companion of the parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub standardize: Standardize,
    pub layers: usize,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub params: ParamStore,
    pub standardize: Standardize,
}

fn mlp_shapes() -> [(&'static str, Vec<usize>); 6] {
    [
        ("w1", vec![HIDDEN, 1]),
        ("b1", vec![HIDDEN]),
        ("w2", vec![HIDDEN, HIDDEN]),
        ("b2", vec![HIDDEN]),
        ("w3", vec![1, HIDDEN]),
        ("b3", vec![1]),
    ]
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 { v } else { LEAKY_SLOPE * v }
}

impl FlowModel {
    pub fn layers() -> impl Iterator<Item = CouplingLayer> {
        (0..NUM_LAYERS).map(|index| CouplingLayer { index })
    }

    /// Every parameter zero: the identity flow.
    pub fn zeros() -> Self {
        let mut params = ParamStore::new();
        for layer in Self::layers() {
            for net in [Net::Scale, Net::Shift] {
                for (part, shape) in mlp_shapes() {
                    params.insert_zeros(layer.param_name(net, part), &shape);
                }
            }
        }
        Self { params, standardize: Standardize::default() }
    }

    /// He-uniform hidden layers and zero output layers, so the flow starts
    /// as the identity but gradients reach every parameter.
    pub fn init(seed: u64) -> Self {
        let mut model = Self::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in Self::layers() {
            for net in [Net::Scale, Net::Shift] {
                for (part, shape) in mlp_shapes() {
                    if part == "w1" || part == "w2" {
                        model.params.insert_he_uniform(layer.param_name(net, part), &shape, shape[1], &mut rng);
                    }
                }
            }
        }
        model
    }

    /// Fills every parameter from U[-scale, scale]; used to probe the flow
    /// away from the identity.
    pub fn randomized(seed: u64, scale: f64) -> Self {
        let mut model = Self::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in model.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
        model
    }

    fn weights(&self, layer: CouplingLayer, net: Net, part: &str) -> &[f64] {
        self.params
            .get(&layer.param_name(net, part))
            .unwrap_or_else(|| panic!("flow parameter {} missing", layer.param_name(net, part)))
            .data()
    }

    /// Evaluates one coupling MLP at a scalar input.
    pub fn mlp(&self, layer: CouplingLayer, net: Net, x: f64) -> f64 {
        let (w1, b1) = (self.weights(layer, net, "w1"), self.weights(layer, net, "b1"));
        let (w2, b2) = (self.weights(layer, net, "w2"), self.weights(layer, net, "b2"));
        let (w3, b3) = (self.weights(layer, net, "w3"), self.weights(layer, net, "b3"));
        let mut h1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            h1[j] = leaky(w1[j] * x + b1[j]);
        }
        let mut out = b3[0];
        for j in 0..HIDDEN {
            let row = &w2[j * HIDDEN..(j + 1) * HIDDEN];
            let pre = b2[j] + row.iter().zip(&h1).map(|(w, h)| w * h).sum::<f64>();
            out += w3[j] * leaky(pre);
        }
        out
    }

    fn s_t(&self, layer: CouplingLayer, x: f64) -> (f64, f64) {
        let s = self.mlp(layer, Net::Scale, x).clamp(-S_CLAMP, S_CLAMP);
        (s, self.mlp(layer, Net::Shift, x))
    }

    /// The coupling stack alone, on already standardized input.
    pub fn forward_standardized(&self, u: [f64; 2]) -> Result<([f64; 2], f64)> {
        let (mut a, mut b) = (u[0], u[1]);
        let mut log_det = 0.0;
        for layer in Self::layers() {
            let (s, t) = self.s_t(layer, b);
            let next = a * s.exp() + t;
            if !next.is_finite() {
                return Err(FlowError::NonFiniteIntermediate { layer: layer.index });
            }
            log_det += s;
            (a, b) = (b, next);
        }
        Ok(([a, b], log_det))
    }

    pub fn inverse_standardized(&self, z: [f64; 2]) -> Result<[f64; 2]> {
        let (mut a, mut b) = (z[0], z[1]);
        for layer in Self::layers().collect::<Vec<_>>().into_iter().rev() {
            // (a, b) holds (passive, transformed) of this layer's output.
            let (s, t) = self.s_t(layer, a);
            let prev = (b - t) * (-s).exp();
            if !prev.is_finite() {
                return Err(FlowError::NonFiniteIntermediate { layer: layer.index });
            }
            (a, b) = (prev, a);
        }
        Ok([a, b])
    }

    pub fn sidecar(&self) -> FlowSidecar {
        FlowSidecar { standardize: self.standardize, layers: NUM_LAYERS }
    }

    pub fn save(&self, checkpoint: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        self.params.save(checkpoint)?;
        fs::write(sidecar, serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(checkpoint: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Self> {
        let params = ParamStore::load(checkpoint)?;
        let side: FlowSidecar = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
        if side.layers != NUM_LAYERS {
            return Err(FlowError::Config(format!("expected {NUM_LAYERS} layers, sidecar has {}", side.layers)));
        }
        for layer in Self::layers() {
            for net in [Net::Scale, Net::Shift] {
                for (part, shape) in mlp_shapes() {
                    let name = layer.param_name(net, part);
                    match params.get(&name) {
                        Some(t) if t.shape() == shape.as_slice() => {}
                        _ => return Err(FlowError::Config(format!("checkpoint lacks {name} with shape {shape:?}"))),
                    }
                }
            }
        }
        Ok(Self { params, standardize: side.standardize })
    }
}

/// Standardizes `m` and applies the coupling stack. The log-determinant
/// includes the standardization term.
pub fn flow_forward(model: &FlowModel, m: &Embedding) -> Result<(Embedding, f64)> {
    let (z, ld) = model.forward_standardized(model.standardize.apply(m))?;
    Ok((Embedding(z), ld + model.standardize.log_det()))
}

pub fn flow_inverse(model: &FlowModel, z: &Embedding) -> Result<Embedding> {
    let u = model.inverse_standardized(z.0)?;
    Ok(model.standardize.invert(u))
}

/// Standard bivariate normal log-density.
pub fn gaussian_log_density(z: &Embedding) -> f64 {
    -(2.0 * PI).ln() - 0.5 * (z.0[0] * z.0[0] + z.0[1] * z.0[1])
}

/// log p(m) in the original embedding units. Non-finite intermediates map
/// to negative infinity.
pub fn log_density(model: &FlowModel, m: &Embedding) -> f64 {
    match flow_forward(model, m) {
        Ok((z, ld)) => gaussian_log_density(&z) + ld,
        Err(_) => f64::NEG_INFINITY,
    }
}

fn append_mlp(g: &mut Graph, x: NodeId, layer: CouplingLayer, net: Net) -> NodeId {
    let mut h = x;
    for (w, b, act) in [("w1", "b1", true), ("w2", "b2", true), ("w3", "b3", false)] {
        let wn = g.param(layer.param_name(net, w));
        let bn = g.param(layer.param_name(net, b));
        h = g.dense(h, wn, Some(bn));
        if act {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    h
}

/// Mean negative log-density of a `[B, 2]` batch of standardized
/// embeddings (input 0), including the constant standardization term.
pub fn nll_graph(standardize: &Standardize) -> Graph {
    let mut g = Graph::new();
    let x = g.input(0);
    let mut a = g.slice(x, 1, 0, 1);
    let mut b = g.slice(x, 1, 1, 1);
    let mut log_det: Option<NodeId> = None;
    for layer in FlowModel::layers() {
        let s_raw = append_mlp(&mut g, b, layer, Net::Scale);
        let s = g.clamp(s_raw, -S_CLAMP, S_CLAMP);
        let t = append_mlp(&mut g, b, layer, Net::Shift);
        let es = g.exp(s);
        let scaled = g.mul(a, es);
        let next = g.add(scaled, t);
        log_det = Some(match log_det {
            None => s,
            Some(acc) => g.add(acc, s),
        });
        (a, b) = (b, next);
    }
    let a2 = g.mul(a, a);
    let b2 = g.mul(b, b);
    let sq = g.add(a2, b2);
    let half = g.scale(sq, 0.5);
    let neg_ld = g.scale(log_det.expect("at least one layer"), -1.0);
    let per_point = g.add(half, neg_ld);
    let per_point = g.add_scalar(per_point, (2.0 * PI).ln() - standardize.log_det());
    let out = g.mean(per_point);
    g.set_output(out);
    g
}

fn standardized_batch(model: &FlowModel, batch: &[Embedding]) -> Result<Tensor> {
    let data = batch.iter().flat_map(|m| model.standardize.apply(m)).collect();
    Ok(Tensor::new(vec![batch.len(), 2], data)?)
}

/// Mean of -log_density over a nonempty batch, through the graph.
pub fn nll_loss(model: &FlowModel, batch: &[Embedding]) -> Result<f64> {
    if batch.is_empty() {
        return Err(FlowError::InsufficientData { need: 1, got: 0 });
    }
    let (out, _) = forward(&nll_graph(&model.standardize), &[standardized_batch(model, batch)?], &model.params)?;
    Ok(out.item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-3, batch_size: 256 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub model: FlowModel,
    pub losses: Vec<f64>,
}

/// Minibatch NLL training with Adam over epochs of shuffled data.
/// Deterministic given `seed`.
pub fn train_flow(embeddings: &[Embedding], cfg: &FlowTrainConfig, seed: u64) -> Result<TrainedFlow> {
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(FlowError::Config("steps and batch_size must be >= 1".into()));
    }
    if embeddings.len() < cfg.batch_size {
        return Err(FlowError::InsufficientData { need: cfg.batch_size, got: embeddings.len() });
    }
    if let Some(i) = embeddings.iter().position(|e| !e.is_finite()) {
        return Err(FlowError::Config(format!("embedding {i} is not finite")));
    }
    let mut model = FlowModel::init(seed);
    model.standardize = Standardize::fit(embeddings)?;
    let graph = nll_graph(&model.standardize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f10f);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(embeddings[order[cursor]]);
            cursor += 1;
        }
        let x = standardized_batch(&model, &batch)?;
        let (loss, tape) = forward(&graph, &[x], &model.params)?;
        backward(&tape, &Tensor::scalar(1.0), &mut model.params, false)?;
        model.params.adam_step(cfg.lr, diffnet::ADAM_BETA1, diffnet::ADAM_BETA2, diffnet::ADAM_EPS);
        if step % 500 == 0 {
            debug!("flow step {step}: nll {:.5}", loss.item());
        }
        losses.push(loss.item());
    }
    Ok(TrainedFlow { model, losses })
}

/// Draws from the learned density by pushing standard normal samples
/// through the inverse flow.
pub fn sample(model: &FlowModel, count: usize, seed: u64) -> Result<Vec<Embedding>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = Embedding([rng.sample(StandardNormal), rng.sample(StandardNormal)]);
            flow_inverse(model, &z)
        })
        .collect()
}

/// Midpoint-rule integral of exp(log_density) over a square grid.
pub fn integrate_density(model: &FlowModel, center: [f64; 2], half_width: [f64; 2], cells: usize) -> f64 {
    let (dx, dy) = (2.0 * half_width[0] / cells as f64, 2.0 * half_width[1] / cells as f64);
    let mut total = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            let m = Embedding([
                center[0] - half_width[0] + (i as f64 + 0.5) * dx,
                center[1] - half_width[1] + (j as f64 + 0.5) * dy,
            ]);
            total += log_density(model, &m).exp();
        }
    }
    total * dx * dy
}
