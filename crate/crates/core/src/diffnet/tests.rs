use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn dense_identity_layer() {
    let mut p = ParamStore::new();
    p.insert("w", t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    p.insert_zeros("b", &[3]);
    let mut g = Graph::new();
    let x = g.input(0);
    let (w, b) = (g.param("w"), g.param("b"));
    g.dense(x, w, Some(b));
    let x0 = t(&[3], &[0.5, -2.0, 7.0]);
    let (y, _) = forward(&g, std::slice::from_ref(&x0), &p).unwrap();
    assert_eq!(y, x0);
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::new();
    let x = g.input(0);
    g.relu(x);
    let (y, _) = forward(&g, &[t(&[2], &[-1.0, 2.0])], &ParamStore::new()).unwrap();
    assert_eq!(y.data(), &[0.0, 2.0]);
}

#[test]
fn averaging_kernel_keeps_constant_interior() {
    let mut p = ParamStore::new();
    p.insert("k", Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0));
    let mut g = Graph::new();
    let x = g.input(0);
    let k = g.param("k");
    g.conv2d(x, k, None, 1, 1);
    let (y, _) = forward(&g, &[Tensor::filled(&[1, 6, 7], 2.5)], &p).unwrap();
    assert_eq!(y.shape(), &[1, 6, 7]);
    for r in 1..5 {
        for c in 1..6 {
            assert!((y.data()[r * 7 + c] - 2.5).abs() < 1e-12);
        }
    }
    // Border pixels see zero padding.
    assert!(y.data()[0] < 2.5);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(0);
    g.sum(x);
    let mut p = ParamStore::new();
    let (_, tape) = forward(&g, &[t(&[2, 2], &[1., 2., 3., 4.])], &p).unwrap();
    let grads = backward(&tape, &Tensor::scalar(1.0), &mut p, true).unwrap();
    assert_eq!(grads.input(0).unwrap().data(), &[1.0; 4]);
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let mut p = ParamStore::new();
    p.insert("w", t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
    let mut g = Graph::new();
    let x = g.input(0);
    let w = g.param("w");
    g.dense(x, w, None);
    let xv = t(&[3], &[1.0, -2.0, 3.0]);
    let gy = t(&[2], &[0.5, -1.5]);
    let (_, tape) = forward(&g, &[xv], &p).unwrap();
    backward(&tape, &gy, &mut p, false).unwrap();
    let expected = [0.5, -1.0, 1.5, -1.5, 3.0, -4.5];
    for (a, b) in p.grad("w").unwrap().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// A graph touching every op the encoder and flow use.
fn mixed_graph(rng: &mut impl Rng) -> (Graph, Vec<Tensor>, ParamStore) {
    let mut p = ParamStore::new();
    p.insert("c1", random(&[3, 1, 3, 3], rng));
    p.insert("c1b", random(&[3], rng));
    p.insert("c2", random(&[2, 4, 3, 3], rng));
    p.insert("fc", random(&[2, 5], rng));
    p.insert("fcb", random(&[2], rng));
    let mut g = Graph::new();
    let x = g.input(0);
    let (c1, c1b, c2, fc, fcb) = (g.param("c1"), g.param("c1b"), g.param("c2"), g.param("fc"), g.param("fcb"));
    let h1 = g.conv2d(x, c1, Some(c1b), 1, 1);
    let h1 = g.leaky_relu(h1, 0.1);
    let cat = g.concat(vec![x, h1], 1);
    let h2 = g.conv2d(cat, c2, None, 2, 1);
    let h2 = g.relu(h2);
    let pooled = g.global_avg_pool(cat);
    let pooled2 = g.global_avg_pool(h2);
    let feats = g.concat(vec![pooled, pooled2], 1);
    let feats = g.slice(feats, 1, 1, 5);
    let emb = g.dense(feats, fc, Some(fcb));
    let e0 = g.slice(emb, 0, 0, 1);
    let e0 = g.reshape(e0, vec![2]);
    let rest = g.slice(emb, 0, 1, 2);
    let dots = g.dense(e0, rest, None);
    let lse = g.log_sum_exp(dots);
    let sq = g.mul(emb, emb);
    let clamped = g.clamp(sq, -5.0, 0.5);
    let ex = g.exp(clamped);
    let lg = g.log(ex);
    let s = g.scale(lg, 0.3);
    let s = g.add_scalar(s, 1.0);
    let m = g.mean(s);
    let sub = g.sub(lse, m);
    let sum = g.sum(sub);
    g.add(sum, sum);
    (g, vec![random(&[3, 1, 6, 6], rng)], p)
}

#[test]
fn mixed_graph_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (g, inputs, p) = mixed_graph(&mut rng);
    let report = grad_check(&g, &inputs, &p, 1e-4, 1).unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked, (p.numel() - report.skipped).min(MIN_SAMPLE));
}

#[test]
fn probes_straddling_a_kink_are_skipped() {
    let mut p = ParamStore::new();
    // relu(w) with w inside the probe step: one-sided slopes 1 and 0.
    p.insert("w", t(&[1], &[0.3 * FD_STEP]));
    p.insert("v", t(&[1], &[2.0]));
    let mut g = Graph::new();
    let (w, v) = (g.param("w"), g.param("v"));
    let r = g.relu(w);
    let sq = g.mul(v, v);
    let y = g.add(r, sq);
    g.sum(y);
    let report = grad_check(&g, &[], &p, 1e-6, 0).unwrap();
    assert_eq!((report.checked, report.skipped), (1, 1));
    assert!(report.passed(), "{report:?}");
}

#[test]
fn input_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (g, inputs, mut p) = mixed_graph(&mut rng);
    let (_, tape) = forward(&g, &inputs, &p).unwrap();
    let grads = backward(&tape, &Tensor::scalar(1.0), &mut p, true).unwrap();
    let gx = grads.input(0).unwrap();
    for idx in [0, 17, 50, 107] {
        let mut plus = inputs[0].clone();
        plus.data_mut()[idx] += FD_STEP;
        let mut minus = inputs[0].clone();
        minus.data_mut()[idx] -= FD_STEP;
        let fp = forward(&g, &[plus], &p).unwrap().0.item();
        let fm = forward(&g, &[minus], &p).unwrap().0.item();
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        assert!(relative_error(gx.data()[idx], numeric) < 1e-4);
    }
}

#[test]
fn linear_graph_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamStore::new();
    p.insert("w", random(&[4, 30], &mut rng));
    p.insert("b", random(&[4], &mut rng));
    let mut g = Graph::new();
    let x = g.input(0);
    let (w, b) = (g.param("w"), g.param("b"));
    let y = g.dense(x, w, Some(b));
    g.sum(y);
    let report = grad_check(&g, &[random(&[5, 30], &mut rng)], &p, 1e-8, 3).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (g, inputs, p) = mixed_graph(&mut rng);
    // Analytic gradient taken with the leaky slope dropped to plain relu.
    let report = grad_check_with(&g, &inputs, &p, 1e-4, 1, |g, i, p| {
        let mutated = Graph::clone(g);
        let mut nodes = mutated.nodes().to_vec();
        for op in &mut nodes {
            if let Op::LeakyRelu(x, _) = op {
                *op = Op::Relu(*x);
            }
        }
        let mut broken = Graph::new();
        for op in nodes {
            broken.push(op);
        }
        let (out, tape) = forward(&broken, i, p)?;
        backward(&tape, &Tensor::filled(out.shape(), 1.0), p, false)?;
        Ok(())
    })
    .unwrap();
    assert!(!report.passed(), "{report:?}");
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = ParamStore::new();
    p.insert("w", t(&[2], &[1.0, -3.0]));
    let before = p.get("w").unwrap().clone();
    p.adam_step(0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    assert_eq!(p.get("w").unwrap(), &before);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(0.5));
    p.iter_mut().next().unwrap().1.grad = Tensor::scalar(1.0);
    p.adam_step(0.001, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
    let moved = 0.5 - p.get("w").unwrap().item();
    assert!((moved - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    assert_eq!(p.grad("w").unwrap().item(), 0.0);
    assert_eq!(p.step(), 1);
}

#[test]
fn adam_lr_zero_is_identity() {
    let mut p = ParamStore::new();
    p.insert("w", t(&[3], &[0.3, -0.2, 5.0]));
    p.iter_mut().next().unwrap().1.grad = t(&[3], &[1.0, 2.0, -4.0]);
    p.adam_step(0.0, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    assert_eq!(p.get("w").unwrap().data(), &[0.3, -0.2, 5.0]);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(1.0));
    let mut g = Graph::new();
    let w = g.param("w");
    g.mul(w, w);
    for _ in 0..500 {
        let (_, tape) = forward(&g, &[], &p).unwrap();
        backward(&tape, &Tensor::scalar(1.0), &mut p, false).unwrap();
        p.adam_step(0.05, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    }
    assert!(p.get("w").unwrap().item().abs() < 0.01);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (g, inputs, p) = mixed_graph(&mut rng);
    let a = forward(&g, &inputs, &p).unwrap().0;
    let b = forward(&g, &inputs, &p).unwrap().0;
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
}

#[test]
fn shape_and_reference_errors() {
    let p = ParamStore::new();
    let mut g = Graph::new();
    let a = g.input(0);
    let b = g.input(1);
    g.add(a, b);
    let err = forward(&g, &[Tensor::zeros(&[2]), Tensor::zeros(&[3])], &p).unwrap_err();
    assert!(matches!(err, DiffError::ShapeMismatch(_)));

    let mut g = Graph::new();
    g.param("missing");
    assert!(matches!(forward(&g, &[], &p).unwrap_err(), DiffError::UnknownNode(_)));

    let mut g = Graph::new();
    g.push(Op::Relu(3));
    assert!(matches!(forward(&g, &[], &p).unwrap_err(), DiffError::UnknownNode(_)));

    let mut g = Graph::new();
    let x = g.input(0);
    g.sum(x);
    let (_, tape) = forward(&g, &[Tensor::zeros(&[2])], &p).unwrap();
    let mut p = p;
    assert!(matches!(backward(&tape, &Tensor::zeros(&[2]), &mut p, false), Err(DiffError::ShapeMismatch(_))));
}

#[test]
fn checkpoint_roundtrip_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::new();
    p.insert("enc.w", random(&[2, 3], &mut rng));
    p.insert("b", random(&[1], &mut rng));
    let bytes = p.to_checkpoint_bytes();
    assert_eq!(&bytes[..4], b"MQCP");
    // header 6, then 2 + 5 + 1 + 8 + 48, then 2 + 1 + 1 + 4 + 8
    assert_eq!(bytes.len(), 6 + 64 + 16);
    let back = ParamStore::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.to_checkpoint_bytes(), bytes);
    assert_eq!(back.get("enc.w"), p.get("enc.w"));
    assert!(ParamStore::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
}
