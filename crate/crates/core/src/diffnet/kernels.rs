//! Single-sample convolution and dense kernels on flat `f64` buffers.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    /// Output positions `o` along one axis whose input `o * stride + k - pad`
    /// falls inside `[0, n)`.
    #[inline]
    fn valid(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = n as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(n_out as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane_in = g.in_h * g.in_w;
    let plane_out = ho * wo;
    for o in 0..g.out_c {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        out_o.fill(bias.map_or(0.0, |b| b[o]));
        for c in 0..g.in_c {
            let x_c = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid(ky, g.in_h, ho);
                for kx in 0..k {
                    let wv = weight[((o * g.in_c + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid(kx, g.in_w, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                        let row_out = &mut out_o[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let src = &row_in[ix0..ix0 + (ox_hi - ox_lo)];
                            for (dst, &v) in row_out[ox_lo..ox_hi].iter_mut().zip(src) {
                                *dst += wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for one sample.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_x: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane_in = g.in_h * g.in_w;
    let plane_out = ho * wo;
    if let Some(gb) = grad_b {
        for o in 0..g.out_c {
            gb[o] += grad_out[o * plane_out..(o + 1) * plane_out].iter().sum::<f64>();
        }
    }
    let mut grad_x = grad_x;
    for o in 0..g.out_c {
        let go = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.in_c {
            let x_c = &x[c * plane_in..(c + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid(ky, g.in_h, ho);
                for kx in 0..k {
                    let widx = ((o * g.in_c + c) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = g.valid(kx, g.in_w, wo);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_go = &go[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let n = ox_hi - ox_lo;
                            let row_x = &x_c[iy * g.in_w + ix0..iy * g.in_w + ix0 + n];
                            let gseg = &row_go[ox_lo..ox_hi];
                            acc += gseg.iter().zip(row_x).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gx) = grad_x.as_deref_mut() {
                                let dst = &mut gx[c * plane_in + iy * g.in_w + ix0..][..n];
                                for (d, &gv) in dst.iter_mut().zip(gseg) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += row_go[ox] * x_c[iy * g.in_w + ix];
                                if let Some(gx) = grad_x.as_deref_mut() {
                                    gx[c * plane_in + iy * g.in_w + ix] += wv * row_go[ox];
                                }
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

/// y[b, o] = sum_i w[o, i] x[b, i] + bias[o]
pub fn dense_forward(x: &[f64], batch: usize, in_dim: usize, w: &[f64], out_dim: usize, bias: Option<&[f64]>, y: &mut [f64]) {
    for b in 0..batch {
        let xb = &x[b * in_dim..(b + 1) * in_dim];
        for o in 0..out_dim {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            let dot: f64 = wo.iter().zip(xb).map(|(a, c)| a * c).sum();
            y[b * out_dim + o] = dot + bias.map_or(0.0, |bb| bb[o]);
        }
    }
}
