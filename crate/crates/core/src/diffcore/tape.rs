//! Recording tape and the differentiable primitive set.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Leaves are
//! created with [`Tape::leaf`]; each primitive appends a node and, when any
//! input requires a gradient, remembers how to push gradients back to its
//! inputs. [`Tape::backward`] walks the nodes in exact reverse order.
//!
//! Broadcasting is limited to a one-element operand in the elementwise
//! binary ops (`scalar · tensor`). Everything else requires equal shapes.

use super::conv::{self, Geometry};
use super::{DiffError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    ConvTranspose3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        /// Geometry of the adjoint correlation (input/output swapped).
        geom: Geometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into `(outer, n, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, or `None` if no backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient with unreached nodes reported as zeros.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor, inputs: &[Var], record: Op) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite(op));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { record } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        let shape = self.binary_shape(op, a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let ia = |i: usize| if xa.len() == 1 { 0 } else { i };
        let ib = |i: usize| if xb.len() == 1 { 0 } else { i };
        let data = (0..n).map(|i| f(xa[ia(i)], xb[ib(i)])).collect();
        self.push(op, Tensor::from_parts(shape, data), &[a, b], record)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = xa[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&xb[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        self.push("matmul", Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b))
    }

    fn check_conv_args(&self, op: &'static str, input: Var, weight: Var, bias: Option<Var>, out_ch_axis: usize) -> Result<()> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let in_axis = 1 - out_ch_axis;
        if si.len() != 4 || sw.len() != 5 || sw[in_axis] != si[0] {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: si.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[out_ch_axis]] {
                return Err(DiffError::ShapeMismatch {
                    op,
                    lhs: sw.to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Cross-correlation of `input [Ci, D, H, W]` with
    /// `weight [Co, Ci, kd, kh, kw]`, zero padding `pad` on every face.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_conv_args("conv3d", input, weight, bias, 0)?;
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let kernel = [sw[2], sw[3], sw[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv::conv_out_extent(si[a + 1], kernel[a], stride.max(1), pad).ok_or_else(|| {
                DiffError::ShapeMismatch {
                    op: "conv3d",
                    lhs: si.clone(),
                    rhs: sw.clone(),
                }
            })?;
        }
        let geom = Geometry {
            in_ch: si[0],
            out_ch: sw[0],
            input: [si[1], si[2], si[3]],
            output,
            kernel,
            stride: stride.max(1),
            pad,
        };
        let mut out = vec![0.0; geom.out_ch * output.iter().product::<usize>()];
        conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let shape = vec![geom.out_ch, output[0], output[1], output[2]];
        let inputs: Vec<Var> = [Some(input), Some(weight), bias].into_iter().flatten().collect();
        self.push(
            "conv3d",
            Tensor::from_parts(shape, out),
            &inputs,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Transposed convolution of `input [Ci, D, H, W]` with
    /// `weight [Ci, Co, kd, kh, kw]`; output extent `(n-1)·stride + k - 2·pad`.
    pub fn conv3d_transpose(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_conv_args("conv3d_transpose", input, weight, bias, 1)?;
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let stride = stride.max(1);
        let kernel = [sw[2], sw[3], sw[4]];
        let mut big = [0; 3];
        for a in 0..3 {
            big[a] = conv::conv_transpose_out_extent(si[a + 1], kernel[a], stride, pad).ok_or_else(|| {
                DiffError::ShapeMismatch {
                    op: "conv3d_transpose",
                    lhs: si.clone(),
                    rhs: sw.clone(),
                }
            })?;
        }
        // The adjoint correlation maps [Co, big] -> [Ci, small] with weight
        // layout [Ci, Co, k]; transposed conv is its input-adjoint.
        let geom = Geometry {
            in_ch: sw[1],
            out_ch: si[0],
            input: big,
            output: [si[1], si[2], si[3]],
            kernel,
            stride,
            pad,
        };
        let co = sw[1];
        let big_len: usize = big.iter().product();
        let mut out = vec![0.0; co * big_len];
        if let Some(b) = bias {
            for (c, chunk) in out.chunks_mut(big_len).enumerate() {
                chunk.fill(self.value(b).data()[c]);
            }
        }
        conv::backward_input(&geom, self.value(input).data(), self.value(weight).data(), &mut out);
        let inputs: Vec<Var> = [Some(input), Some(weight), bias].into_iter().flatten().collect();
        self.push(
            "conv3d_transpose",
            Tensor::from_parts(vec![co, big[0], big[1], big[2]], out),
            &inputs,
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, record: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(op, value, &[x], record)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| c * v, Op::Scale(x, c))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::BadAxis { op: "softmax", axis, shape });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xs[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis })
    }

    /// Normalizes over axis 0 (channels) independently at every position of
    /// the remaining axes, then applies per-channel `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let s = xs.len() / c;
        let mut mean = vec![0.0; s];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xs[ch * s..(ch + 1) * s]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; s];
        for ch in 0..c {
            for ((acc, &v), &m) in var.iter_mut().zip(&xs[ch * s..(ch + 1) * s]).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / c as f64 + LN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            for p in 0..s {
                let h = (xs[ch * s + p] - mean[p]) * inv_std[p];
                xhat[ch * s + p] = h;
                out[ch * s + p] = g[ch] * h + b[ch];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), &[x], Op::Mean(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::BadAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && (0..s.len()).all(|a| a == axis || s[a] == first[a]);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(DiffError::BadAxis { op: "slice", axis, shape });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push("slice", Tensor::from_parts(new_shape, out), &[x], Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// Accumulates `∂loss/∂v` into every reachable node that requires a
    /// gradient. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NotScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let len = |v: Var| nodes[v.0].value.numel();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Elementwise binary helper: handles the one-element broadcast side.
        let binary = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if !wants(v) {
                return;
            }
            let n = len(v);
            add_into(&mut grads[v.0], n, |buf| {
                if n == 1 && g.len() > 1 {
                    buf[0] += (0..g.len()).map(f).sum::<f64>();
                } else {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += f(i);
                    }
                }
            });
        };
        let at = |x: &[f64], i: usize| if x.len() == 1 { x[0] } else { x[i] };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                binary(grads, *a, &|i| g[i]);
                binary(grads, *b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                binary(grads, *a, &|i| g[i]);
                binary(grads, *b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                binary(grads, *a, &|i| g[i] * at(xb, i));
                binary(grads, *b, &|i| g[i] * at(xa, i));
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                binary(grads, *a, &|i| g[i] / at(xb, i));
                binary(grads, *b, &|i| {
                    let d = at(xb, i);
                    -g[i] * at(xa, i) / (d * d)
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G · Bᵀ
                    add_into(&mut grads[a.0], m * k, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &xb[p * n..(p + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    add_into(&mut grads[b.0], k * n, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = xa[i * k + p];
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                if wants(*input) {
                    add_into(&mut grads[input.0], len(*input), |gi| {
                        conv::backward_input(geom, g, val(*weight), gi)
                    });
                }
                if wants(*weight) {
                    add_into(&mut grads[weight.0], len(*weight), |gw| {
                        conv::backward_weight(geom, g, val(*input), gw)
                    });
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    add_into(&mut grads[b.0], len(b), |gb| conv::backward_bias(geom.out_ch, g, gb));
                }
            }
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                geom,
            } => {
                if wants(*input) {
                    add_into(&mut grads[input.0], len(*input), |gi| {
                        conv::forward(geom, g, val(*weight), None, gi)
                    });
                }
                if wants(*weight) {
                    add_into(&mut grads[weight.0], len(*weight), |gw| {
                        conv::backward_weight(geom, val(*input), g, gw)
                    });
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    add_into(&mut grads[b.0], len(b), |gb| conv::backward_bias(geom.in_ch, g, gb));
                }
            }
            Op::Relu(x) => {
                let xs = val(*x);
                binary(grads, *x, &|i| if xs[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(x) => {
                let ys = nodes[id].value.data();
                binary(grads, *x, &|i| g[i] * ys[i] * (1.0 - ys[i]));
            }
            Op::Sqrt(x) => {
                let ys = nodes[id].value.data();
                binary(grads, *x, &|i| g[i] / (2.0 * ys[i]));
            }
            Op::Scale(x, c) => binary(grads, *x, &|i| c * g[i]),
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let ys = nodes[id].value.data();
                    let (outer, n, inner) = split_axis(nodes[id].value.shape(), *axis);
                    add_into(&mut grads[x.0], ys.len(), |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * n + j) * inner + i;
                                let dot: f64 = (0..n).map(|j| g[at(j)] * ys[at(j)]).sum();
                                for j in 0..n {
                                    gx[at(j)] += ys[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = nodes[gain.0].value.numel();
                let s = xhat.len() / c;
                let gv = val(*gain);
                if wants(*x) {
                    add_into(&mut grads[x.0], xhat.len(), |gx| {
                        let mut mean_d = vec![0.0; s];
                        let mut mean_dx = vec![0.0; s];
                        for ch in 0..c {
                            for p in 0..s {
                                let d = g[ch * s + p] * gv[ch];
                                mean_d[p] += d;
                                mean_dx[p] += d * xhat[ch * s + p];
                            }
                        }
                        for p in 0..s {
                            mean_d[p] /= c as f64;
                            mean_dx[p] /= c as f64;
                        }
                        for ch in 0..c {
                            for p in 0..s {
                                let d = g[ch * s + p] * gv[ch];
                                gx[ch * s + p] += inv_std[p] * (d - mean_d[p] - xhat[ch * s + p] * mean_dx[p]);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    add_into(&mut grads[gain.0], c, |gg| {
                        for ch in 0..c {
                            gg[ch] += (0..s).map(|p| g[ch * s + p] * xhat[ch * s + p]).sum::<f64>();
                        }
                    });
                }
                if wants(*bias) {
                    add_into(&mut grads[bias.0], c, |gb| {
                        for ch in 0..c {
                            gb[ch] += g[ch * s..(ch + 1) * s].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Sum(x) => binary(grads, *x, &|_| g[0]),
            Op::Mean(x) => {
                let n = len(*x) as f64;
                binary(grads, *x, &|_| g[0] / n)
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[id].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.shape()[*axis];
                    if wants(p) {
                        add_into(&mut grads[p.0], len(p), |gp| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                for (d, s) in gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let l = nodes[id].value.shape()[*axis];
                    add_into(&mut grads[x.0], len(*x), |gx| {
                        for o in 0..outer {
                            let dst = &mut gx[(o * n + start) * inner..(o * n + start + l) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * l * inner..(o + 1) * l * inner]) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => binary(grads, *x, &|i| g[i]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(t: &mut Tape, v: &[f64]) -> Var {
        t.leaf(Tensor::vector(v.to_vec()), true)
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0, 0.0, 2.0]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = vec_leaf(&mut t, &[0.0, 0.0]);
        let s = t.softmax(z, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 60).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = t.leaf(Tensor::new(vec![2, 3, 4, 5], data.clone()).unwrap(), false);
        let mut w = vec![0.0; 2 * 2 * 27];
        // Channel-diagonal delta at the kernel center.
        w[13] = 1.0;
        w[(2 + 1) * 27 + 13] = 1.0;
        let w = t.leaf(Tensor::new(vec![2, 2, 3, 3, 3], w).unwrap(), false);
        let y = t.conv3d(x, w, None, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[2, 3, 4, 5]);
        assert_eq!(t.value(y).data(), &data[..]);
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 6]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn mean_square_grad_by_hand() {
        // loss = mean(x²) at x = [3]: d/dx = 2·3/1 = 6.
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[3.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.mean(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[3.0, -1.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.mean(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn unreachable_nodes_get_no_grad() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        let y = vec_leaf(&mut t, &[1.0, 2.0]);
        let _unused = t.relu(y).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(y).is_none());
        assert_eq!(t.grad_or_zero(y), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(DiffError::NotScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]), false);
        let b = t.leaf(Tensor::zeros(&[2, 3]), false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = t.leaf(Tensor::zeros(&[4]), false);
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn nan_is_an_error() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0]);
        assert!(matches!(t.sqrt(x), Err(DiffError::NonFinite("sqrt"))));
    }

    #[test]
    fn constants_do_not_record() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.relu(a).unwrap();
        assert!(!t.requires_grad(b));
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3, 2, 2, 2], 1.0), false);
        let w = t.leaf(Tensor::full(&[3, 2, 2, 2, 2], 0.5), false);
        let y = t.conv3d_transpose(x, w, None, 2, 0).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 4, 4]);
        // Non-overlapping taps: each output sees exactly 3 input channels.
        assert!(t.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }
}
