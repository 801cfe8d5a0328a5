//! Direct 3D convolution kernels on `[C, D, H, W]` buffers.
//!
//! Only three loops exist: the correlation forward pass, its adjoint with
//! respect to the input, and its adjoint with respect to the weights.
//! Transposed convolution is expressed through the same three.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output extent of a strided correlation, if positive.
pub(crate) fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output extent of a transposed convolution, if positive.
pub(crate) fn conv_transpose_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (n - 1) * stride + k;
    (full > 2 * pad).then(|| full - 2 * pad)
}

/// Output indices `o` with `0 <= o*stride + k - pad < n_in`, as `[lo, hi)`.
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in - 1 + pad - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every (input row, output row, x-range) pairing for one kernel tap.
#[inline]
fn for_each_row(
    g: &Geometry,
    kz: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let [di, hi, wi] = g.input;
    let [d_o, h_o, w_o] = g.output;
    let s = g.stride;
    let p = g.pad;
    let (z0, z1) = valid_range(kz, p, s, di, d_o);
    let (y0, y1) = valid_range(ky, p, s, hi, h_o);
    let (x0, x1) = valid_range(kx, p, s, wi, w_o);
    if x0 >= x1 {
        return;
    }
    for oz in z0..z1 {
        let iz = oz * s + kz - p;
        for oy in y0..y1 {
            let iy = oy * s + ky - p;
            f((iz * hi + iy) * wi, (oz * h_o + oy) * w_o, x0, x1, x0 * s + kx - p);
        }
    }
}

/// `out[co] = bias[co] + sum_ci weight[co, ci] ⋆ input[ci]`.
pub(crate) fn forward(g: &Geometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let [_, kh, kw] = g.kernel;
    let s = g.stride;
    for co in 0..g.out_ch {
        let out_c = &mut out[co * ol..(co + 1) * ol];
        if let Some(b) = bias {
            out_c.fill(b[co]);
        }
        for ci in 0..g.in_ch {
            let in_c = &input[ci * il..(ci + 1) * il];
            let w_base = (co * g.in_ch + ci) * kl;
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = weight[w_base + (kz * kh + ky) * kw + kx];
                        for_each_row(g, kz, ky, kx, |irow, orow, x0, x1, ix0| {
                            let o = &mut out_c[orow + x0..orow + x1];
                            if s == 1 {
                                let i = &in_c[irow + ix0..irow + ix0 + (x1 - x0)];
                                for (a, &b) in o.iter_mut().zip(i) {
                                    *a += w * b;
                                }
                            } else {
                                for (j, a) in o.iter_mut().enumerate() {
                                    *a += w * in_c[irow + ix0 + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Adjoint of [`forward`] with respect to `input`: accumulates into `grad_in`.
pub(crate) fn backward_input(g: &Geometry, grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let [_, kh, kw] = g.kernel;
    let s = g.stride;
    for co in 0..g.out_ch {
        let go = &grad_out[co * ol..(co + 1) * ol];
        for ci in 0..g.in_ch {
            let gi = &mut grad_in[ci * il..(ci + 1) * il];
            let w_base = (co * g.in_ch + ci) * kl;
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = weight[w_base + (kz * kh + ky) * kw + kx];
                        for_each_row(g, kz, ky, kx, |irow, orow, x0, x1, ix0| {
                            let o = &go[orow + x0..orow + x1];
                            if s == 1 {
                                let i = &mut gi[irow + ix0..irow + ix0 + (x1 - x0)];
                                for (a, &b) in i.iter_mut().zip(o) {
                                    *a += w * b;
                                }
                            } else {
                                for (j, &b) in o.iter().enumerate() {
                                    gi[irow + ix0 + j * s] += w * b;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Adjoint of [`forward`] with respect to `weight`: accumulates into `grad_w`.
pub(crate) fn backward_weight(g: &Geometry, grad_out: &[f64], input: &[f64], grad_w: &mut [f64]) {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let [_, kh, kw] = g.kernel;
    let s = g.stride;
    for co in 0..g.out_ch {
        let go = &grad_out[co * ol..(co + 1) * ol];
        for ci in 0..g.in_ch {
            let in_c = &input[ci * il..(ci + 1) * il];
            let w_base = (co * g.in_ch + ci) * kl;
            for kz in 0..g.kernel[0] {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for_each_row(g, kz, ky, kx, |irow, orow, x0, x1, ix0| {
                            let o = &go[orow + x0..orow + x1];
                            if s == 1 {
                                let i = &in_c[irow + ix0..irow + ix0 + (x1 - x0)];
                                acc += o.iter().zip(i).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for (j, &b) in o.iter().enumerate() {
                                    acc += b * in_c[irow + ix0 + j * s];
                                }
                            }
                        });
                        grad_w[w_base + (kz * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-channel sum of `grad_out`, accumulated into `grad_b`.
pub(crate) fn backward_bias(out_ch: usize, grad_out: &[f64], grad_b: &mut [f64]) {
    let ol = grad_out.len() / out_ch;
    for (co, gb) in grad_b.iter_mut().enumerate().take(out_ch) {
        *gb += grad_out[co * ol..(co + 1) * ol].iter().sum::<f64>();
    }
}
