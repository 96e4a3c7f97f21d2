use std::f64::consts::{LN_2, PI};

use artiqc_core::diffnet::{grad_check, Tensor};
use artiqc_core::encoder::{self, info_nce_loss, Embedding, EncoderConfig};
use artiqc_core::flow::{self, flow_forward, flow_inverse, log_density, FlowModel, Standardize};
use artiqc_core::phantom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, err: f64, tolerance: f64) -> Check {
    Check { name, passed: err < tolerance, detail: format!("|err| = {err:.3e} (tolerance {tolerance:.0e})") }
}

fn failed(name: &'static str, e: impl std::fmt::Display) -> Check {
    Check { name, passed: false, detail: e.to_string() }
}

fn loss_closed_forms() -> Vec<Check> {
    let z = Embedding([0.0, 0.0]);
    let zero = info_nce_loss(&z, &Embedding([1.0, 2.0]), &[Embedding([3.0, -1.0]); 4]);
    let q = Embedding([1.0, 0.0]);
    let one = info_nce_loss(&q, &q, &[Embedding([0.0, 1.0])]);
    vec![
        check("contrastive loss, zero dots = ln 2", (zero - LN_2).abs(), 1e-12),
        check("contrastive loss, unit positive dot = ln(1 + 1/e)", (one - (1.0 + (-1.0f64).exp()).ln()).abs(), 1e-12),
    ]
}

fn identity_flow_values() -> Vec<Check> {
    let model = FlowModel::zeros();
    let at_origin = log_density(&model, &Embedding([0.0, 0.0]));
    let at_unit = log_density(&model, &Embedding([1.0, 0.0]));
    vec![
        check("identity flow, log p(0, 0) = -log 2pi", (at_origin + (2.0 * PI).ln()).abs(), 1e-12),
        check("identity flow, log p(1, 0) = -log 2pi - 1/2", (at_unit + (2.0 * PI).ln() + 0.5).abs(), 1e-12),
    ]
}

fn flow_round_trip() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut model = FlowModel::randomized(seed, 0.1);
        model.standardize = Standardize { mean: [0.3, -0.2], std: [1.5, 0.8] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let m = Embedding([rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]);
            match flow_forward(&model, &m).and_then(|(z, _)| flow_inverse(&model, &z)) {
                Ok(back) => worst = worst.max((back.0[0] - m.0[0]).abs()).max((back.0[1] - m.0[1]).abs()),
                Err(e) => return failed("flow round trip", e),
            }
        }
    }
    check("flow round trip", worst, 1e-9)
}

fn flow_jacobian() -> Check {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..20 {
        let model = FlowModel::randomized(seed, 0.2);
        let m = Embedding([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
        let f = |d: [f64; 2]| flow_forward(&model, &Embedding([m.0[0] + d[0], m.0[1] + d[1]])).map(|r| r.0 .0);
        let eval = || -> flow::Result<f64> {
            let (p0, n0, p1, n1) = (f([h, 0.0])?, f([-h, 0.0])?, f([0.0, h])?, f([0.0, -h])?);
            let j00 = (p0[0] - n0[0]) / (2.0 * h);
            let j10 = (p0[1] - n0[1]) / (2.0 * h);
            let j01 = (p1[0] - n1[0]) / (2.0 * h);
            let j11 = (p1[1] - n1[1]) / (2.0 * h);
            let numeric = (j00 * j11 - j01 * j10).abs().ln();
            Ok((numeric - flow_forward(&model, &m)?.1).abs())
        };
        match eval() {
            Ok(d) => worst = worst.max(d),
            Err(e) => return failed("flow log-determinant vs numerical Jacobian", e),
        }
    }
    check("flow log-determinant vs numerical Jacobian", worst, 1e-5)
}

fn encoder_gradients() -> Check {
    let cfg = EncoderConfig {
        input_size: (16, 16),
        dense_blocks: 2,
        layers_per_block: 2,
        growth_rate: 3,
        stem_channels: 4,
        negatives: 4,
        ..EncoderConfig::default()
    };
    let run = || -> anyhow::Result<f64> {
        let vols = (0..3).map(|s| Ok(phantom::generate([16, 16, 8], s)?.volume)).collect::<anyhow::Result<Vec<_>>>()?;
        let mut params = encoder::init_params(&cfg, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (name, p) in params.iter_mut() {
            if name.ends_with(".b") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
            }
        }
        let batch = encoder::build_batch(&vols, &cfg, 3)?;
        let x = encoder::batch_tensor(&batch.images(), &cfg)?;
        Ok(grad_check(&encoder::loss_graph(&cfg), &[x], &params, 1e-4, 4)?.max_rel_error)
    };
    match run() {
        Ok(err) => check("encoder loss gradients vs finite differences", err, 1e-4),
        Err(e) => failed("encoder loss gradients vs finite differences", e),
    }
}

fn flow_gradients() -> Check {
    let mut model = FlowModel::randomized(5, 0.3);
    model.standardize = Standardize { mean: [0.0, 0.0], std: [1.0, 1.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let run = || -> anyhow::Result<f64> {
        let x = Tensor::new(vec![8, 2], data.clone())?;
        Ok(grad_check(&flow::nll_graph(&model.standardize), &[x], &model.params, 1e-4, 7)?.max_rel_error)
    };
    match run() {
        Ok(err) => check("flow NLL gradients vs finite differences", err, 1e-4),
        Err(e) => failed("flow NLL gradients vs finite differences", e),
    }
}

pub fn run_selftest() -> Vec<Check> {
    let mut checks = loss_closed_forms();
    checks.extend(identity_flow_values());
    checks.push(flow_round_trip());
    checks.push(flow_jacobian());
    checks.push(encoder_gradients());
    checks.push(flow_gradients());
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes() {
        let checks = run_selftest();
        assert!(checks.len() >= 8);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
