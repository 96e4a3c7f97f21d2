use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, Graph, Op, ParamStore, Result, Tape, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than
/// relatively. Central differences at `FD_STEP` carry rounding noise near
/// 1e-11 for O(1) outputs, so a lower floor would compare noise.
pub const REL_FLOOR: f64 = 1e-4;
pub const MIN_SAMPLE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose `±FD_STEP` probes straddled a relu or clamp kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar graph with central finite
/// differences over `MIN_SAMPLE` randomly drawn scalar parameters (all of
/// them when fewer exist).
///
/// A coordinate whose `+h` and `-h` probes put some relu, leaky-relu or
/// clamp input on different sides of its kink is skipped and replaced by
/// the next draw. The central difference there averages two one-sided
/// slopes and is no estimate of the gradient.
pub fn grad_check(graph: &Graph, inputs: &[Tensor], params: &ParamStore, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(graph, inputs, params, tolerance, seed, |g, i, p| {
        let (out, tape) = forward(g, i, p)?;
        backward(&tape, &Tensor::filled(out.shape(), 1.0), p, false)?;
        Ok(())
    })
}

/// As [`grad_check`], with the analytic gradient supplied by `analytic`,
/// which must accumulate d(output)/d(param) into the store it is given.
pub fn grad_check_with(
    graph: &Graph,
    inputs: &[Tensor],
    params: &ParamStore,
    tolerance: f64,
    seed: u64,
    analytic: impl Fn(&Graph, &[Tensor], &mut ParamStore) -> Result<()>,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    work.zero_grad();
    analytic(graph, inputs, &mut work)?;

    let mut slots = Vec::with_capacity(work.numel());
    for (pi, (_, p)) in work.iter().enumerate() {
        slots.extend((0..p.value.len()).map(|e| (pi, e)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, slots.len(), slots.len()).into_vec();

    let mut probe = params.clone();
    let mut eval = |pi: usize, e: usize, value: f64| -> Result<(f64, Vec<u8>)> {
        probe.by_index_mut(pi).value.data_mut()[e] = value;
        let (out, tape) = forward(graph, inputs, &probe)?;
        Ok((out.data().iter().sum(), kink_sides(graph, &tape)))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance,
    };
    for k in order {
        if report.checked == MIN_SAMPLE {
            break;
        }
        let (pi, e) = slots[k];
        let x0 = params.by_index(pi).value.data()[e];
        let (plus, plus_sides) = eval(pi, e, x0 + FD_STEP)?;
        let (minus, minus_sides) = eval(pi, e, x0 - FD_STEP)?;
        eval(pi, e, x0)?;
        if plus_sides != minus_sides {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(work.by_index(pi).grad.data()[e], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((work.names().nth(pi).unwrap_or_default().to_string(), e));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Which side of its kink every relu, leaky-relu and clamp input lies on.
fn kink_sides(graph: &Graph, tape: &Tape<'_>) -> Vec<u8> {
    let mut sides = Vec::new();
    for op in graph.nodes() {
        match op {
            Op::Relu(x) | Op::LeakyRelu(x, _) => sides.extend(tape.value(*x).data().iter().map(|&v| u8::from(v > 0.0))),
            Op::Clamp(x, lo, hi) => sides.extend(tape.value(*x).data().iter().map(|&v| u8::from(v > *lo) + u8::from(v >= *hi))),
            _ => {}
        }
    }
    sides
}
