//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`], which copies the current value out of a
//! [`ParamStore`]; frozen parameters take part in the forward pass but never
//! receive a gradient. [`Graph::backward`] walks the tape once in reverse.
//!
//! Shape errors inside the tape are programming errors and panic; public
//! entry points in [`crate::net`] validate shapes before building a graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::linalg::gemm;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{dims5, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, factors: [usize; 3] },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Concat(Var, Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    ChannelSeqMean(Var),
    MulMap(Var, Var),
    GlobalAvgPool(Var),
    ScalarLoss(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    /// Parameters treated as constants on this tape regardless of their
    /// trainable flag.
    held: Vec<bool>,
}

/// Gradients of leaves and parameters after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::leaf`], if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter reached from the loss.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of `x` permuted by `perm`.
fn permute_walk(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        // odometer increment
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    /// Stops gradient flow into `ids` on this tape only. Must be called
    /// before the parameters are first used.
    pub fn hold_params(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            debug_assert!(self.param_vars.get(id.0).is_none_or(|v| v.is_none()), "parameter already on the tape");
            if self.held.len() <= id.0 {
                self.held.resize(id.0 + 1, false);
            }
            self.held[id.0] = true;
        }
    }

    /// The graph node of a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let held = self.held.get(id.0).copied().unwrap_or(false);
        let v = self.push(store.get(id).clone(), Op::Param(id), store.is_trainable(id) && !held);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(self.shape(a), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(t, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Volumetric convolution of `x: [B, Cin, H, W, T]` with
    /// `w: [Cout, Cin, kh, kw, kt]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (bs, cin, dims) = dims5(self.shape(x)).unwrap();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5, "conv3d: weight rank");
        assert_eq!(ws[1], cin, "conv3d: input channels {cin} vs weight {ws:?}");
        assert_eq!(&ws[2..], &geom.kernel, "conv3d: kernel shape");
        let cout = ws[0];
        let od = geom.out_dims(dims).expect("conv3d: input smaller than kernel span");
        let in_n = cin * dims.iter().product::<usize>();
        let out_n = cout * od.iter().product::<usize>();
        let mut out = vec![0.0; bs * out_n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..bs {
                kernels::conv_forward(
                    &xv[i * in_n..(i + 1) * in_n],
                    wv,
                    bv,
                    cin,
                    cout,
                    dims,
                    &geom,
                    &mut out[i * out_n..(i + 1) * out_n],
                );
            }
        }
        let t = Tensor::from_vec(&[bs, cout, od[0], od[1], od[2]], out).unwrap();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv { x, w, b, geom }, ng)
    }

    /// Stride-2 transposed convolution (kernel 2) upsampling `x` to `target`
    /// spatial dims; axes that do not grow use stride 1. `w: [Cin, Cout, 2, 2, 2]`.
    pub fn conv_transpose_up(&mut self, x: Var, w: Var, b: Option<Var>, target: [usize; 3]) -> Var {
        let (bs, cin, dims) = dims5(self.shape(x)).unwrap();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], cin, "conv_transpose: channels");
        let cout = ws[1];
        let factors = kernels::up_factors(dims, target).expect("conv_transpose: target must be 1x or 2x per axis");
        let in_n = cin * dims.iter().product::<usize>();
        let out_n = cout * target.iter().product::<usize>();
        let mut out = vec![0.0; bs * out_n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..bs {
                kernels::convt_forward(
                    &xv[i * in_n..(i + 1) * in_n],
                    wv,
                    bv,
                    cin,
                    cout,
                    dims,
                    factors,
                    &mut out[i * out_n..(i + 1) * out_n],
                );
            }
        }
        let t = Tensor::from_vec(&[bs, cout, target[0], target[1], target[2]], out).unwrap();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::ConvT { x, w, b, factors }, ng)
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    /// `groups == C` is instance normalization.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (bs, c) = (shape[0], shape[1]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups for {c} channels");
        let vox: usize = shape[2..].iter().product();
        let cg = c / groups;
        let n = (cg * vox) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(bs * groups);
        let mut rstds = Vec::with_capacity(bs * groups);
        for b in 0..bs {
            for g in 0..groups {
                let start = (b * c + g * cg) * vox;
                let seg = &xv[start..start + cg * vox];
                let mean = seg.iter().sum::<f64>() / n;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let rstd = 1.0 / libm::sqrt(var + NORM_EPS);
                for j in 0..cg {
                    let ch = g * cg + j;
                    let o = start + j * vox;
                    for k in 0..vox {
                        out[o + k] = (xv[o + k] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let t = Tensor::from_vec(&shape, out).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), &[d], "layer_norm: gamma shape");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / libm::sqrt(var + NORM_EPS);
            for k in 0..d {
                out[r * d + k] = (seg[k] - mean) * rstd * gv[k] + bv[k];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::from_vec(&shape, out).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu(x, slope), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0], "concat: batch");
        assert_eq!(sa[2..], sb[2..], "concat: trailing dims");
        let inner: usize = sa[2..].iter().product();
        let (na, nb) = (sa[1] * inner, sb[1] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0] * (na + nb));
        for i in 0..sa[0] {
            out.extend_from_slice(&av[i * na..(i + 1) * na]);
            out.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let t = Tensor::from_vec(&shape, out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Concat(a, b), ng)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), in_shape.len(), "permute: rank");
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        permute_walk(&in_shape, perm, |o, i| out[o] = xv[i]);
        let t = Tensor::from_vec(&out_shape, out).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape: element count");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// `x W^T + b` over the last axis; `w: [Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let cin = *shape.last().unwrap();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[1], cin, "linear: input features");
        let cout = ws[0];
        let rows = self.value(x).numel() / cin;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                for (o, bb) in out[r * cout..(r + 1) * cout].iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = cout;
        let t = Tensor::from_vec(&oshape, out).unwrap();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Linear { x, w, b }, ng)
    }

    /// Batched product of `a: [G, n, k]` with `b: [G, k, m]`, or with
    /// `b: [G, m, k]` transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (g, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(sb[0], g, "batch_matmul: groups");
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "batch_matmul: inner");
        let mut out = vec![0.0; g * n * m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                n,
                k,
                m,
                &av[i * n * k..],
                false,
                &bv[i * k * m..],
                trans_b,
                0.0,
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        let t = Tensor::from_vec(&[g, n, m], out).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::BatchMatMul { a, b, trans_b }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = libm::exp(v - mx);
                s += *o;
            }
            for o in dst.iter_mut() {
                *o /= s;
            }
        }
        let t = Tensor::from_vec(&shape, out).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Mean over the channel and sequence (`T`) axes of `[B, C, H, W, T]`,
    /// giving one value per `(b, h, w)` as `[B, 1, H, W, 1]`.
    pub fn channel_seq_mean(&mut self, x: Var) -> Var {
        let (bs, c, [h, w, t]) = dims5(self.shape(x)).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * h * w];
        let norm = (c * t) as f64;
        for b in 0..bs {
            for ch in 0..c {
                for hw in 0..h * w {
                    let base = ((b * c + ch) * h * w + hw) * t;
                    out[b * h * w + hw] += xv[base..base + t].iter().sum::<f64>();
                }
            }
        }
        for o in &mut out {
            *o /= norm;
        }
        let tn = Tensor::from_vec(&[bs, 1, h, w, 1], out).unwrap();
        let ng = self.ng(x);
        self.push(tn, Op::ChannelSeqMean(x), ng)
    }

    /// `x * a` with `a: [B, 1, H, W, 1]` broadcast over channels and `T`.
    pub fn mul_map(&mut self, x: Var, a: Var) -> Var {
        let (bs, c, [h, w, t]) = dims5(self.shape(x)).unwrap();
        assert_eq!(self.shape(a), &[bs, 1, h, w, 1], "mul_map: map shape");
        let xv = self.value(x).data();
        let av = self.value(a).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..bs {
            for ch in 0..c {
                for hw in 0..h * w {
                    let base = ((b * c + ch) * h * w + hw) * t;
                    let s = av[b * h * w + hw];
                    for k in 0..t {
                        out[base + k] = xv[base + k] * s;
                    }
                }
            }
        }
        let tn = Tensor::from_vec(self.shape(x), out).unwrap();
        let ng = self.ng(x) || self.ng(a);
        self.push(tn, Op::MulMap(x, a), ng)
    }

    /// Spatial-and-sequence global average pooling `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (bs, c) = (shape[0], shape[1]);
        let vox: usize = shape[2..].iter().product();
        let xv = self.value(x).data();
        let out: Vec<f64> = xv.chunks(vox).map(|s| s.iter().sum::<f64>() / vox as f64).collect();
        let t = Tensor::from_vec(&[bs, c], out).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::GlobalAvgPool(x), ng)
    }

    /// A scalar whose value and local gradients were computed outside the
    /// tape; `local[i]` is d(value)/d(inputs[i]).
    pub fn scalar_loss(&mut self, value: f64, terms: Vec<(Var, Vec<f64>)>) -> Var {
        for (v, g) in &terms {
            assert_eq!(self.value(*v).numel(), g.len(), "scalar_loss: gradient length");
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::scalar(value), Op::ScalarLoss(terms), ng)
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Var {
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if self.ng(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        params.push((id, g));
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { by_node: grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.ng(v) {
                        for (d, s) in acc(grads, v, len(v)).iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    for (d, s) in acc(grads, *a, len(*a)).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.ng(*b) {
                    for (d, s) in acc(grads, *b, len(*b)).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = val(*b);
                    for ((d, s), y) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if self.ng(*b) {
                    let av = val(*a);
                    for ((d, s), x) in acc(grads, *b, len(*b)).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Affine(x, scale) => {
                for (d, s) in acc(grads, *x, len(*x)).iter_mut().zip(g) {
                    *d += s * scale;
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (bs, cin, dims) = dims5(self.shape(*x)).unwrap();
                let cout = self.shape(*w)[0];
                let od = geom.out_dims(dims).unwrap();
                let in_n = cin * dims.iter().product::<usize>();
                let out_n = cout * od.iter().product::<usize>();
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = self.ng(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.ng(*w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|b| self.ng(*b)).map(|b| vec![0.0; len(b)]);
                for i in 0..bs {
                    kernels::conv_backward(
                        &xv[i * in_n..(i + 1) * in_n],
                        wv,
                        &g[i * out_n..(i + 1) * out_n],
                        cin,
                        cout,
                        dims,
                        geom,
                        dx.as_mut().map(|d| &mut d[i * in_n..(i + 1) * in_n]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
                if let Some(b) = b {
                    add_into(grads, *b, db);
                }
            }
            Op::ConvT { x, w, b, factors } => {
                let (bs, cin, dims) = dims5(self.shape(*x)).unwrap();
                let cout = self.shape(*w)[1];
                let in_n = cin * dims.iter().product::<usize>();
                let out_n = cout * dims.iter().zip(factors).map(|(d, f)| d * f).product::<usize>();
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = self.ng(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.ng(*w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|b| self.ng(*b)).map(|b| vec![0.0; len(b)]);
                for i in 0..bs {
                    kernels::convt_backward(
                        &xv[i * in_n..(i + 1) * in_n],
                        wv,
                        &g[i * out_n..(i + 1) * out_n],
                        cin,
                        cout,
                        dims,
                        *factors,
                        dx.as_mut().map(|d| &mut d[i * in_n..(i + 1) * in_n]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
                if let Some(b) = b {
                    add_into(grads, *b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let shape = self.shape(*x);
                let (bs, c) = (shape[0], shape[1]);
                let vox: usize = shape[2..].iter().product();
                let cg = c / groups;
                let n = (cg * vox) as f64;
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dx = self.ng(*x).then(|| vec![0.0; xv.len()]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..bs {
                    for gi in 0..*groups {
                        let k = b * groups + gi;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let start = (b * c + gi * cg) * vox;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cg {
                            let ch = gi * cg + j;
                            for q in 0..vox {
                                let o = start + j * vox + q;
                                let xh = (xv[o] - mu) * rs;
                                dgamma[ch] += g[o] * xh;
                                dbeta[ch] += g[o];
                                let dxh = g[o] * gv[ch];
                                s1 += dxh;
                                s2 += dxh * xh;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let (m1, m2) = (s1 / n, s2 / n);
                            for j in 0..cg {
                                let ch = gi * cg + j;
                                for q in 0..vox {
                                    let o = start + j * vox + q;
                                    let xh = (xv[o] - mu) * rs;
                                    dx[o] = rs * (g[o] * gv[ch] - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                add_into(grads, *x, dx);
                add_into(grads, *gamma, self.ng(*gamma).then_some(dgamma));
                add_into(grads, *beta, self.ng(*beta).then_some(dbeta));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *self.shape(*x).last().unwrap();
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dx = self.ng(*x).then(|| vec![0.0; xv.len()]);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..xv.len() / d {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for k in 0..d {
                        let o = r * d + k;
                        let xh = (xv[o] - mu) * rs;
                        dgamma[k] += g[o] * xh;
                        dbeta[k] += g[o];
                        let dxh = g[o] * gv[k];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for k in 0..d {
                            let o = r * d + k;
                            let xh = (xv[o] - mu) * rs;
                            dx[o] = rs * (g[o] * gv[k] - m1 - xh * m2);
                        }
                    }
                }
                add_into(grads, *x, dx);
                add_into(grads, *gamma, self.ng(*gamma).then_some(dgamma));
                add_into(grads, *beta, self.ng(*beta).then_some(dbeta));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                for ((d, s), v) in acc(grads, *x, xv.len()).iter_mut().zip(g).zip(xv) {
                    *d += if *v > 0.0 { *s } else { s * slope };
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                for ((d, s), v) in acc(grads, *x, xv.len()).iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += s;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                for ((d, s), y) in acc(grads, *x, yv.len()).iter_mut().zip(g).zip(yv) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                for ((d, s), v) in acc(grads, *x, xv.len()).iter_mut().zip(g).zip(xv) {
                    *d += s * gelu_grad(*v);
                }
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let inner: usize = sa[2..].iter().product();
                let (na, nb) = (sa[1] * inner, sb[1] * inner);
                for i in 0..sa[0] {
                    let base = i * (na + nb);
                    if self.ng(*a) {
                        let da = acc(grads, *a, sa[0] * na);
                        for (d, s) in da[i * na..(i + 1) * na].iter_mut().zip(&g[base..base + na]) {
                            *d += s;
                        }
                    }
                    if self.ng(*b) {
                        let db = acc(grads, *b, sa[0] * nb);
                        for (d, s) in db[i * nb..(i + 1) * nb].iter_mut().zip(&g[base + na..base + na + nb]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let in_shape = self.shape(*x).to_vec();
                let dx = acc(grads, *x, len(*x));
                permute_walk(&in_shape, perm, |o, i| dx[i] += g[o]);
            }
            Op::Reshape(x) => {
                for (d, s) in acc(grads, *x, len(*x)).iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Linear { x, w, b } => {
                let cin = *self.shape(*x).last().unwrap();
                let cout = self.shape(*w)[0];
                let rows = len(*x) / cin;
                if self.ng(*x) {
                    let wv = val(*w);
                    gemm(rows, cout, cin, g, false, wv, false, 1.0, acc(grads, *x, rows * cin));
                }
                if self.ng(*w) {
                    let xv = val(*x);
                    gemm(cout, rows, cin, g, true, xv, false, 1.0, acc(grads, *w, cout * cin));
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let db = acc(grads, b, cout);
                    for r in 0..rows {
                        for (d, s) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (gn, n, k) = (sa[0], sa[1], sa[2]);
                let m = if *trans_b { sb[1] } else { sb[2] };
                let av = val(*a);
                let bv = val(*b);
                if self.ng(*a) {
                    let da = acc(grads, *a, gn * n * k);
                    for i in 0..gn {
                        let gi = &g[i * n * m..(i + 1) * n * m];
                        let bi = &bv[i * k * m..(i + 1) * k * m];
                        gemm(n, m, k, gi, false, bi, !*trans_b, 1.0, &mut da[i * n * k..(i + 1) * n * k]);
                    }
                }
                if self.ng(*b) {
                    let db = acc(grads, *b, gn * k * m);
                    for i in 0..gn {
                        let gi = &g[i * n * m..(i + 1) * n * m];
                        let ai = &av[i * n * k..(i + 1) * n * k];
                        let dbi = &mut db[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            gemm(m, n, k, gi, true, ai, false, 1.0, dbi);
                        } else {
                            gemm(k, n, m, ai, true, gi, false, 1.0, dbi);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *self.shape(*x).last().unwrap();
                let yv = node.value.data();
                let dx = acc(grads, *x, yv.len());
                for r in 0..yv.len() / d {
                    let y = &yv[r * d..(r + 1) * d];
                    let gy = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] += y[k] * (gy[k] - dot);
                    }
                }
            }
            Op::ChannelSeqMean(x) => {
                let (bs, c, [h, w, t]) = dims5(self.shape(*x)).unwrap();
                let norm = (c * t) as f64;
                let dx = acc(grads, *x, bs * c * h * w * t);
                for b in 0..bs {
                    for ch in 0..c {
                        for hw in 0..h * w {
                            let base = ((b * c + ch) * h * w + hw) * t;
                            let s = g[b * h * w + hw] / norm;
                            for d in &mut dx[base..base + t] {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::MulMap(x, a) => {
                let (bs, c, [h, w, t]) = dims5(self.shape(*x)).unwrap();
                let xv = val(*x);
                let av = val(*a);
                if self.ng(*x) {
                    let dx = acc(grads, *x, xv.len());
                    for b in 0..bs {
                        for ch in 0..c {
                            for hw in 0..h * w {
                                let base = ((b * c + ch) * h * w + hw) * t;
                                let s = av[b * h * w + hw];
                                for k in 0..t {
                                    dx[base + k] += g[base + k] * s;
                                }
                            }
                        }
                    }
                }
                if self.ng(*a) {
                    let da = acc(grads, *a, av.len());
                    for b in 0..bs {
                        for ch in 0..c {
                            for hw in 0..h * w {
                                let base = ((b * c + ch) * h * w + hw) * t;
                                let mut s = 0.0;
                                for k in 0..t {
                                    s += g[base + k] * xv[base + k];
                                }
                                da[b * h * w + hw] += s;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let n = len(*x);
                let vox = n / g.len();
                let dx = acc(grads, *x, n);
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[j / vox] / vox as f64;
                }
            }
            Op::ScalarLoss(terms) => {
                for (v, local) in terms {
                    if self.ng(*v) {
                        for (d, l) in acc(grads, *v, local.len()).iter_mut().zip(local) {
                            *d += g[0] * l;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match grads[v.0].as_mut() {
        Some(existing) => {
            for (d, s) in existing.iter_mut().zip(&g) {
                *d += s;
            }
        }
        None => grads[v.0] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn held_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = store.add("b", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        g.hold_params([a]);
        let (va, vb) = (g.param(&store, a), g.param(&store, b));
        let y = g.mul(va, vb);
        let l = g.scalar_loss(g.value(y).data().iter().sum(), vec![(y, vec![1.0, 1.0])]);
        let grads = g.backward(l);
        assert_eq!(grads.params().len(), 1);
        assert_eq!(grads.params()[0], (b, vec![1.0, 2.0]));
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()).unwrap()
    }

    /// Checks d(sum(out * probe))/d(leaf) against central differences.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = pseudo(shape, 0.731);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let probe = pseudo(g.shape(y), 1.37);
        let loss_val: f64 = g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let l = g.scalar_loss(loss_val, vec![(y, probe.data().to_vec())]);
        let grads = g.backward(l);
        let gx = grads.wrt(x).unwrap().to_vec();
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(t);
            let y = build(&mut g, x);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs analytic {}", gx[i]);
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        check(&[2, 3], |g, x| g.sigmoid(x));
        check(&[2, 3], |g, x| g.gelu(x));
        check(&[2, 3], |g, x| g.leaky_relu(x, 0.01));
        check(&[2, 3], |g, x| {
            let y = g.affine(x, -2.0, 1.0);
            g.mul(x, y)
        });
        check(&[2, 3], |g, x| {
            let s = g.sigmoid(x);
            g.sub(s, x)
        });
    }

    #[test]
    fn norm_gradients() {
        check(&[2, 4, 2, 2, 1], |g, x| {
            let gm = g.input(pseudo(&[4], 0.3));
            let bt = g.input(pseudo(&[4], 0.9));
            g.group_norm(x, gm, bt, 2)
        });
        check(&[3, 5], |g, x| {
            let gm = g.input(pseudo(&[5], 0.3));
            let bt = g.input(pseudo(&[5], 0.9));
            g.layer_norm(x, gm, bt)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check(&[2, 3, 2, 2, 2], |g, x| g.permute(x, &[0, 2, 4, 3, 1]));
        check(&[2, 3, 2], |g, x| g.softmax(x));
        check(&[2, 3, 2, 2, 3], |g, x| g.channel_seq_mean(x));
        check(&[2, 3, 2, 2, 3], |g, x| g.global_avg_pool(x));
        check(&[2, 3, 2, 2, 3], |g, x| {
            let m = g.channel_seq_mean(x);
            let s = g.sigmoid(m);
            g.mul_map(x, s)
        });
        check(&[1, 2, 2, 2, 1], |g, x| {
            let y = g.sigmoid(x);
            g.concat(x, y)
        });
        check(&[2, 3, 4], |g, x| {
            let w = g.leaf(pseudo(&[5, 4], 0.2));
            let b = g.leaf(pseudo(&[5], 0.4));
            g.linear(x, w, Some(b))
        });
        check(&[2, 3, 4], |g, x| {
            let y = g.affine(x, 0.5, 0.1);
            let a = g.batch_matmul(x, y, true);
            g.batch_matmul(a, x, false)
        });
    }

    #[test]
    fn conv_gradients() {
        check(&[2, 2, 4, 4, 2], |g, x| {
            let w = g.input(pseudo(&[3, 2, 3, 3, 3], 0.21));
            let b = g.input(pseudo(&[3], 0.5));
            g.conv3d(x, w, Some(b), ConvGeom::down([4, 4, 2]))
        });
        check(&[1, 2, 2, 2, 1], |g, x| {
            let w = g.input(pseudo(&[2, 3, 2, 2, 2], 0.21));
            g.conv_transpose_up(x, w, None, [4, 4, 2])
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 2.0));
        let b = store.add("b", Tensor::full(&[2], 3.0));
        store.set_trainable("b", false);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let p = g.mul(va, vb);
        let l = g.scalar_loss(g.value(p).data().iter().sum(), vec![(p, vec![1.0, 1.0])]);
        let grads = g.backward(l);
        assert_eq!(grads.params().len(), 1);
        assert_eq!(grads.params()[0].0, a);
        assert_eq!(grads.params()[0].1, vec![3.0, 3.0]);
    }
}
