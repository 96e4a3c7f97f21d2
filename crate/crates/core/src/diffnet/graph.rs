use super::kernels::{conv2d_backward, conv2d_forward, dense_forward, ConvGeom};
use super::{DiffError, ParamStore, Result, Tensor};

pub type NodeId = usize;

/// One node of a computation graph. Operands always refer to earlier nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(usize),
    Param(String),
    /// `x: [in]` or `[B, in]`, `w: [out, in]`, `b: [out]`.
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// `x: [C, H, W]` or `[B, C, H, W]`, `w: [O, C, k, k]`, zero padding.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    /// Gradient is zero outside the open interval.
    Clamp(NodeId, f64, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Mean over the trailing two axes: `[C, H, W] -> [C]`, `[B, C, H, W] -> [B, C]`.
    GlobalAvgPool(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    LogSumExp(NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Clamp(x, ..)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::GlobalAvgPool(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::LogSumExp(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

/// A computation description: nodes in topological order plus an output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1))
    }

    pub fn input(&mut self, index: usize) -> NodeId {
        self.push(Op::Input(index))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        self.push(Op::Dense { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp(x, lo, hi))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(x, c))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn concat(&mut self, xs: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat(xs, axis))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(x, shape))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSumExp(x))
    }

    fn validate(&self, params: &ParamStore, n_inputs: usize) -> Result<Vec<Option<usize>>> {
        let mut slots = vec![None; self.nodes.len()];
        for (id, op) in self.nodes.iter().enumerate() {
            if let Some(bad) = op.operands().into_iter().find(|&o| o >= id) {
                return Err(DiffError::UnknownNode(format!("node {id} references node {bad}")));
            }
            match op {
                Op::Input(i) if *i >= n_inputs => {
                    return Err(DiffError::UnknownNode(format!("input {i} of {n_inputs}")));
                }
                Op::Param(name) => {
                    let slot = params
                        .index_of(name)
                        .ok_or_else(|| DiffError::UnknownNode(format!("parameter {name:?}")))?;
                    slots[id] = Some(slot);
                }
                _ => {}
            }
        }
        if self.output().is_none() {
            return Err(DiffError::UnknownNode("empty graph".into()));
        }
        Ok(slots)
    }
}

/// Node values from a forward pass, kept for `backward`.
#[derive(Debug, Clone)]
pub struct Tape<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
    param_slots: Vec<Option<usize>>,
}

impl Tape<'_> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    pub fn output(&self) -> &Tensor {
        &self.values[self.graph.output().expect("validated")]
    }
}

fn mismatch(what: &str, detail: impl std::fmt::Debug) -> DiffError {
    DiffError::ShapeMismatch(format!("{what}: {detail:?}"))
}

/// (outer, axis, inner) extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (batch, chw) = match x.len() {
        3 => (1, x),
        4 => (x[0], &x[1..]),
        _ => return Err(mismatch("conv2d input rank", x)),
    };
    if w.len() != 4 || w[1] != chw[0] || w[2] != w[3] || stride == 0 {
        return Err(mismatch("conv2d weight", (x, w)));
    }
    if chw[1] + 2 * pad < w[2] || chw[2] + 2 * pad < w[2] {
        return Err(mismatch("conv2d kernel larger than padded input", (x, w)));
    }
    Ok((
        batch,
        ConvGeom {
            in_c: chw[0],
            in_h: chw[1],
            in_w: chw[2],
            out_c: w[0],
            kernel: w[2],
            stride,
            pad,
        },
    ))
}

fn dense_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    let (batch, in_dim) = match x.len() {
        1 => (1, x[0]),
        2 => (x[0], x[1]),
        _ => return Err(mismatch("dense input rank", x)),
    };
    if w.len() != 2 || w[1] != in_dim {
        return Err(mismatch("dense weight", (x, w)));
    }
    Ok((batch, in_dim, w[0]))
}

/// Evaluates `graph` and records every node value.
pub fn forward<'g>(graph: &'g Graph, inputs: &[Tensor], params: &ParamStore) -> Result<(Tensor, Tape<'g>)> {
    let param_slots = graph.validate(params, inputs.len())?;
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (id, op) in graph.nodes.iter().enumerate() {
        let v = |n: NodeId| &values[n];
        let out = match op {
            Op::Input(i) => inputs[*i].clone(),
            Op::Param(_) => params.by_index(param_slots[id].unwrap()).value.clone(),
            Op::Dense { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let (batch, in_dim, out_dim) = dense_dims(xv.shape(), wv.shape())?;
                let bias = match b {
                    Some(b) if v(*b).shape() != [out_dim] => return Err(mismatch("dense bias", v(*b).shape())),
                    Some(b) => Some(v(*b).data()),
                    None => None,
                };
                let mut y = vec![0.0; batch * out_dim];
                dense_forward(xv.data(), batch, in_dim, wv.data(), out_dim, bias, &mut y);
                let shape = if xv.rank() == 1 { vec![out_dim] } else { vec![batch, out_dim] };
                Tensor::new(shape, y)?
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (v(*x), v(*w));
                let (batch, g) = conv_geom(xv.shape(), wv.shape(), *stride, *pad)?;
                let bias = match b {
                    Some(b) if v(*b).shape() != [g.out_c] => return Err(mismatch("conv bias", v(*b).shape())),
                    Some(b) => Some(v(*b).data()),
                    None => None,
                };
                let mut y = vec![0.0; batch * g.out_len()];
                for s in 0..batch {
                    conv2d_forward(
                        &g,
                        &xv.data()[s * g.in_len()..(s + 1) * g.in_len()],
                        wv.data(),
                        bias,
                        &mut y[s * g.out_len()..(s + 1) * g.out_len()],
                    );
                }
                let mut shape = vec![g.out_c, g.out_h(), g.out_w()];
                if xv.rank() == 4 {
                    shape.insert(0, batch);
                }
                Tensor::new(shape, y)?
            }
            Op::Relu(x) => v(*x).map(|a| a.max(0.0)),
            Op::LeakyRelu(x, slope) => v(*x).map(|a| if a > 0.0 { a } else { slope * a }),
            Op::Exp(x) => v(*x).map(f64::exp),
            Op::Log(x) => v(*x).map(f64::ln),
            Op::Clamp(x, lo, hi) => v(*x).map(|a| a.clamp(*lo, *hi)),
            Op::Scale(x, c) => v(*x).map(|a| a * c),
            Op::AddScalar(x, c) => v(*x).map(|a| a + c),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                if av.shape() != bv.shape() {
                    return Err(mismatch("elementwise operands", (av.shape(), bv.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(av.shape().to_vec(), data)?
            }
            Op::GlobalAvgPool(x) => {
                let xv = v(*x);
                if xv.rank() < 3 {
                    return Err(mismatch("global pool rank", xv.shape()));
                }
                let r = xv.rank();
                let plane = xv.shape()[r - 2] * xv.shape()[r - 1];
                let data = xv.data().chunks_exact(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
                Tensor::new(xv.shape()[..r - 2].to_vec(), data)?
            }
            Op::Concat(xs, axis) => {
                let first = v(xs[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(mismatch("concat axis", (axis, &first)));
                }
                let mut total = 0;
                for &n in xs {
                    let s = v(n).shape();
                    if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != *axis && d != first[i]) {
                        return Err(mismatch("concat operands", (&first, s)));
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = split_axis(&first, *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for &n in xs {
                        let chunk = v(n).shape()[*axis] * inner;
                        data.extend_from_slice(&v(n).data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first;
                shape[*axis] = total;
                Tensor::new(shape, data)?
            }
            Op::Slice { x, axis, start, len } => {
                let xv = v(*x);
                if *axis >= xv.rank() || *len == 0 || start + len > xv.shape()[*axis] {
                    return Err(mismatch("slice bounds", (xv.shape(), axis, start, len)));
                }
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    data.extend_from_slice(&xv.data()[base..base + len * inner]);
                }
                let mut shape = xv.shape().to_vec();
                shape[*axis] = *len;
                Tensor::new(shape, data)?
            }
            Op::Reshape(x, shape) => v(*x).reshaped(shape.clone())?,
            Op::Sum(x) => Tensor::scalar(v(*x).data().iter().sum()),
            Op::Mean(x) => Tensor::scalar(v(*x).data().iter().sum::<f64>() / v(*x).len() as f64),
            Op::LogSumExp(x) => {
                let d = v(*x).data();
                let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                Tensor::scalar(max + d.iter().map(|a| (a - max).exp()).sum::<f64>().ln())
            }
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite(format!("node {id} ({op:?})")));
        }
        values.push(out);
    }
    let tape = Tape {
        graph,
        values,
        param_slots,
    };
    Ok((tape.output().clone(), tape))
}

/// Per-node gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    input_nodes: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn node(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node].as_ref()
    }

    /// Gradient w.r.t. input `index`, summed over every node reading it.
    pub fn input(&self, index: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(i, node) in &self.input_nodes {
            if i != index {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

fn zip_with(x: &Tensor, g: &Tensor, f: &dyn Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut grads[node] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Reverse pass from the graph output. Parameter gradients are added into
/// `params`; gradients of input nodes are returned only when
/// `want_inputs` is set.
pub fn backward(tape: &Tape<'_>, out_grad: &Tensor, params: &mut ParamStore, want_inputs: bool) -> Result<Gradients> {
    let graph = tape.graph;
    let out = graph.output().expect("validated");
    if out_grad.shape() != tape.values[out].shape() {
        return Err(mismatch("output gradient", (out_grad.shape(), tape.values[out].shape())));
    }
    let n = graph.nodes.len();
    let mut needs = vec![false; n];
    for (id, op) in graph.nodes.iter().enumerate() {
        needs[id] = match op {
            Op::Param(_) => true,
            Op::Input(_) => want_inputs,
            _ => op.operands().iter().any(|&o| needs[o]),
        };
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[out] = Some(out_grad.clone());
    let val = |node: NodeId| &tape.values[node];

    for id in (0..=out).rev() {
        let Some(g) = grads[id].take() else { continue };
        let op = &graph.nodes[id];
        let y = val(id);
        let zip_map = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| zip_with(x, &g, f);
        match op {
            Op::Input(_) => {}
            Op::Param(_) => {
                let slot = tape.param_slots[id].expect("validated");
                params.by_index_mut(slot).grad.add_assign(&g);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, in_dim, out_dim) = dense_dims(xv.shape(), wv.shape())?;
                let gd = g.data();
                if needs[*x] {
                    let mut gx = vec![0.0; batch * in_dim];
                    for bi in 0..batch {
                        for o in 0..out_dim {
                            let go = gd[bi * out_dim + o];
                            let wrow = &wv.data()[o * in_dim..(o + 1) * in_dim];
                            for (dst, &wi) in gx[bi * in_dim..(bi + 1) * in_dim].iter_mut().zip(wrow) {
                                *dst += go * wi;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if needs[*w] {
                    let mut gw = vec![0.0; out_dim * in_dim];
                    for bi in 0..batch {
                        let xrow = &xv.data()[bi * in_dim..(bi + 1) * in_dim];
                        for o in 0..out_dim {
                            let go = gd[bi * out_dim + o];
                            for (dst, &xi) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xrow) {
                                *dst += go * xi;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                }
                if let Some(b) = b.filter(|&b| needs[b]) {
                    let mut gb = vec![0.0; out_dim];
                    for row in gd.chunks_exact(out_dim) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    accumulate(&mut grads, b, Tensor::vector(gb));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, geom) = conv_geom(xv.shape(), wv.shape(), *stride, *pad)?;
                let mut gx = needs[*x].then(|| vec![0.0; xv.len()]);
                let mut gw = vec![0.0; wv.len()];
                let want_b = b.is_some_and(|b| needs[b]);
                let mut gb = vec![0.0; geom.out_c];
                for s in 0..batch {
                    let (il, ol) = (geom.in_len(), geom.out_len());
                    conv2d_backward(
                        &geom,
                        &xv.data()[s * il..(s + 1) * il],
                        wv.data(),
                        &g.data()[s * ol..(s + 1) * ol],
                        gx.as_mut().map(|v| &mut v[s * il..(s + 1) * il]),
                        &mut gw,
                        want_b.then_some(&mut gb[..]),
                    );
                }
                if let Some(gx) = gx {
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if needs[*w] {
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                }
                if let (true, Some(b)) = (want_b, b) {
                    accumulate(&mut grads, *b, Tensor::vector(gb));
                }
            }
            Op::Relu(x) if needs[*x] => {
                let t = zip_map(val(*x), &|a, gg| if a > 0.0 { gg } else { 0.0 });
                accumulate(&mut grads, *x, t);
            }
            Op::LeakyRelu(x, slope) if needs[*x] => {
                let t = zip_map(val(*x), &|a, gg| if a > 0.0 { gg } else { slope * gg });
                accumulate(&mut grads, *x, t);
            }
            Op::Exp(x) if needs[*x] => {
                let t = zip_map(y, &|e, gg| e * gg);
                accumulate(&mut grads, *x, t);
            }
            Op::Log(x) if needs[*x] => {
                let t = zip_map(val(*x), &|a, gg| gg / a);
                accumulate(&mut grads, *x, t);
            }
            Op::Clamp(x, lo, hi) if needs[*x] => {
                let t = zip_map(val(*x), &|a, gg| if a > *lo && a < *hi { gg } else { 0.0 });
                accumulate(&mut grads, *x, t);
            }
            Op::Scale(x, c) if needs[*x] => accumulate(&mut grads, *x, g.map(|gg| gg * c)),
            Op::AddScalar(x, _) if needs[*x] => accumulate(&mut grads, *x, g.clone()),
            Op::Add(a, b) => {
                if needs[*a] {
                    accumulate(&mut grads, *a, g.clone());
                }
                if needs[*b] {
                    accumulate(&mut grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs[*a] {
                    accumulate(&mut grads, *a, g.clone());
                }
                if needs[*b] {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs[*a] {
                    let t = zip_map(val(*b), &|bv, gg| bv * gg);
                    accumulate(&mut grads, *a, t);
                }
                if needs[*b] {
                    let t = zip_map(val(*a), &|av, gg| av * gg);
                    accumulate(&mut grads, *b, t);
                }
            }
            Op::GlobalAvgPool(x) if needs[*x] => {
                let xv = val(*x);
                let r = xv.rank();
                let plane = xv.shape()[r - 2] * xv.shape()[r - 1];
                let inv = 1.0 / plane as f64;
                let data = g.data().iter().flat_map(|&gg| std::iter::repeat_n(gg * inv, plane)).collect();
                accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &n in xs {
                    let len = val(n).shape()[*axis];
                    if needs[n] {
                        let mut data = Vec::with_capacity(val(n).len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(&mut grads, n, Tensor::new(val(n).shape().to_vec(), data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, len } if needs[*x] => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let mut data = vec![0.0; xv.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Reshape(x, _) if needs[*x] => {
                accumulate(&mut grads, *x, g.reshaped(val(*x).shape().to_vec())?);
            }
            Op::Sum(x) if needs[*x] => {
                accumulate(&mut grads, *x, Tensor::filled(val(*x).shape(), g.item()));
            }
            Op::Mean(x) if needs[*x] => {
                let xv = val(*x);
                accumulate(&mut grads, *x, Tensor::filled(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::LogSumExp(x) if needs[*x] => {
                let lse = y.item();
                let gg = g.item();
                accumulate(&mut grads, *x, val(*x).map(|a| gg * (a - lse).exp()));
            }
            _ => {}
        }
        grads[id] = Some(g);
    }

    let input_nodes = graph
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(id, op)| match op {
            Op::Input(i) => Some((*i, id)),
            _ => None,
        })
        .collect();
    Ok(Gradients { grads, input_nodes })
}
