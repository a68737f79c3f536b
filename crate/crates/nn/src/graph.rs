//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar output with respect to every node that
//! depends on a parameter (or on an input created with
//! [`Graph::input_with_grad`]).
//!
//! Shape errors inside the tape are programmer errors and panic; models
//! validate user-facing shapes before calling in.

use crate::linalg::gemm;
use crate::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    /// `x` of shape `[B, ..rest]` plus `p` with `numel(rest)` elements.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatmul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Upsample2(Var),
    MeanTokens(Var),
    MulChannels(Var, Var),
    MulPositions(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    PrependToken { cls: Var, x: Var },
    TakeToken(Var, usize),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    /// One gradient per parameter in `store`, zero-filled for parameters the
    /// forward pass never touched.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.params
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| self.nodes[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "conv kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: &Conv2dSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NHWC, got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be [kh,kw,cin,cout], got {w:?}");
        assert_eq!(x[3], w[2], "conv2d channel mismatch: input {x:?} weight {w:?}");
        Self {
            b: x[0],
            h: x[1],
            w: x[2],
            cin: x[3],
            kh: w[0],
            kw: w[1],
            cout: w[3],
            ho: conv_out(x[1], w[0], spec.stride, spec.pad),
            wo: conv_out(x[2], w[1], spec.stride, spec.pad),
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Patch matrix `[B*Ho*Wo, kh*kw*cin]` with zero padding.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let k = self.k();
        let mut cols = vec![T::zero(); self.rows() * k];
        let c = self.cin;
        for b in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * c;
                            let dst = row + (ky * self.kw + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let k = self.k();
        let c = self.cin;
        let mut x = vec![T::zero(); self.b * self.h * self.w * c];
        for b in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * c;
                            let src = row + (ky * self.kw + kx) * c;
                            for i in 0..c {
                                x[dst + i] += cols[src + i];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
    T::of(0.5 * xf * (1.0 + t))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
    T::of(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xf * xf))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let s = if xf >= 0.0 {
        1.0 / (1.0 + (-xf).exp())
    } else {
        let e = xf.exp();
        e / (1.0 + e)
    };
    T::of(s)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    (out_shape, src_strides)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let (out_shape, src_strides) = permuted_strides(shape, perm);
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (used to check input sensitivities).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Add `p` to every leading-axis slice of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Var {
        let (vx, vp) = (self.value(x), self.value(p));
        let inner = vp.numel();
        assert_eq!(vx.numel() % inner.max(1), 0, "add_broadcast: {:?} vs {:?}", vx.shape(), vp.shape());
        assert_eq!(vx.shape()[1..].iter().product::<usize>(), inner, "add_broadcast trailing shape");
        let pd = vp.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + pd[i % inner]).collect();
        let out = Tensor::from_vec(vx.shape().to_vec(), data).unwrap();
        let rg = self.rg(x) || self.rg(p);
        self.push(out, Op::AddBroadcast(x, p), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * T::of(s));
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `x[.., K] @ w[K, N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.ndim(), 2, "linear weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(*vx.shape().last().expect("linear input rank >= 1"), k, "linear: input {:?} weight {:?}", vx.shape(), vw.shape());
        let rows = vx.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n);
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bias);
            }
        }
        gemm(false, false, rows, n, k, vx.data(), vw.data(), T::one(), &mut out);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Linear { x, w, b }, rg)
    }

    /// Batched `op(a) @ op(b)` over a leading group axis.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.ndim() == 3 && vb.ndim() == 3, "batch_matmul needs 3-D operands");
        let g = va.shape()[0];
        assert_eq!(g, vb.shape()[0]);
        let (m, ka) = if ta { (va.shape()[2], va.shape()[1]) } else { (va.shape()[1], va.shape()[2]) };
        let (kb, n) = if tb { (vb.shape()[2], vb.shape()[1]) } else { (vb.shape()[1], vb.shape()[2]) };
        assert_eq!(ka, kb, "batch_matmul inner dims: {:?} {:?}", va.shape(), vb.shape());
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            gemm(
                ta,
                tb,
                m,
                n,
                ka,
                &va.data()[i * m * ka..(i + 1) * m * ka],
                &vb.data()[i * ka * n..(i + 1) * ka * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec([g, m, n], out).unwrap(), Op::BatchMatmul { a, b, ta, tb }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("softmax on rank-0 tensor");
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::from_vec(vx.shape().to_vec(), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("layer_norm on rank-0 tensor");
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        assert!(gm.len() == d && bt.len() == d, "layer_norm affine size");
        let rows = vx.numel() / d;
        let mut out = vec![T::zero(); vx.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            for i in 0..d {
                out[r * d + i] = (row[i] - mu) * rs * gm[i] + bt[i];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::from_vec(vx.shape().to_vec(), out).unwrap();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg)
    }

    /// 2-D convolution on NHWC input with `[kh, kw, cin, cout]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        assert!(stride >= 1);
        let spec = Conv2dSpec { stride, pad };
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeom::new(vx.shape(), vw.shape(), &spec);
        let cols = geo.im2col(vx.data());
        let rows = geo.rows();
        let mut out = vec![T::zero(); rows * geo.cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), geo.cout);
            for r in 0..rows {
                out[r * geo.cout..(r + 1) * geo.cout].copy_from_slice(bias);
            }
        }
        gemm(false, false, rows, geo.cout, geo.k(), &cols, vw.data(), T::one(), &mut out);
        let out = Tensor::from_vec([geo.b, geo.ho, geo.wo, geo.cout], out).unwrap();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    /// Nearest-neighbour 2x upsampling of an NHWC map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4);
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        let src = vx.data();
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let so = ((bi * h + y / 2) * w + xx / 2) * c;
                    let d = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[d..d + c].copy_from_slice(&src[so..so + c]);
                }
            }
        }
        let out = Tensor::from_vec([b, 2 * h, 2 * w, c], out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Mean over the middle axis: `[B, P, C] -> [B, C]`. Accepts NHWC maps,
    /// treating `H*W` as `P`.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert!(s.len() >= 3);
        let (b, c) = (s[0], s[s.len() - 1]);
        let p = vx.numel() / (b * c);
        let mut out = vec![T::zero(); b * c];
        let inv = T::of(1.0 / p as f64);
        for bi in 0..b {
            for pi in 0..p {
                let row = &vx.data()[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                for ci in 0..c {
                    out[bi * c + ci] += row[ci];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec([b, c], out).unwrap(), Op::MeanTokens(x), rg)
    }

    /// `x[b, p, c] * g[b, c]` (channel gating). `x` may be NHWC.
    pub fn mul_channels(&mut self, x: Var, g: Var) -> Var {
        let (vx, vg) = (self.value(x), self.value(g));
        let s = vx.shape();
        let (b, c) = (s[0], s[s.len() - 1]);
        assert_eq!(vg.shape(), &[b, c], "mul_channels gate shape");
        let p = vx.numel() / (b * c);
        let gd = vg.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[(i / (p * c)) * c + i % c])
            .collect();
        let out = Tensor::from_vec(s.to_vec(), data).unwrap();
        let rg = self.rg(x) || self.rg(g);
        self.push(out, Op::MulChannels(x, g), rg)
    }

    /// `x[b, p, c] * m[b, p]` (spatial gating). `m` may carry a trailing 1.
    pub fn mul_positions(&mut self, x: Var, m: Var) -> Var {
        let (vx, vm) = (self.value(x), self.value(m));
        let s = vx.shape();
        let c = s[s.len() - 1];
        assert_eq!(vm.numel() * c, vx.numel(), "mul_positions mask size");
        let md = vm.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v * md[i / c]).collect();
        let out = Tensor::from_vec(s.to_vec(), data).unwrap();
        let rg = self.rg(x) || self.rg(m);
        self.push(out, Op::MulPositions(x, m), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape.to_vec()).expect("reshape element count");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(perm.len(), vx.ndim());
        let (shape, data) = permute_data(vx.data(), vx.shape(), perm);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(shape, data).unwrap(), Op::Permute(x, perm.to_vec()), rg)
    }

    /// Prepend a learned token `cls[D]` to every sequence of `x[B, N, D]`.
    pub fn prepend_token(&mut self, cls: Var, x: Var) -> Var {
        let (vc, vx) = (self.value(cls), self.value(x));
        let s = vx.shape();
        assert_eq!(s.len(), 3);
        let (b, n, d) = (s[0], s[1], s[2]);
        assert_eq!(vc.numel(), d);
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(vc.data());
            out.extend_from_slice(&vx.data()[bi * n * d..(bi + 1) * n * d]);
        }
        let rg = self.rg(cls) || self.rg(x);
        self.push(Tensor::from_vec([b, n + 1, d], out).unwrap(), Op::PrependToken { cls, x }, rg)
    }

    /// `x[B, N, D] -> x[:, idx, :]`.
    pub fn take_token(&mut self, x: Var, idx: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        assert!(idx < n);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&vx.data()[(bi * n + idx) * d..(bi * n + idx + 1) * d]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec([b, d], out).unwrap(), Op::TakeToken(x, idx), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.ndim(), 2);
        let (b, c) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(labels.len(), b, "one label per row");
        let mut probs = vec![T::zero(); b * c];
        let mut loss = 0.0f64;
        for r in 0..b {
            let row = &vl.data()[r * c..(r + 1) * c];
            assert!(labels[r] < c, "label {} out of range", labels[r]);
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            for i in 0..c {
                probs[r * c + i] = T::of((row[i].as_f64() - lse).exp());
            }
            loss += lse - row[labels[r]].as_f64();
        }
        let out = Tensor::scalar(T::of(loss / b as f64));
        let rg = self.rg(logits);
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse shape mismatch");
        let n = vp.numel() as f64;
        let loss: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        self.push(Tensor::scalar(T::of(loss)), Op::Mse { pred, target: target.data().to_vec() }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.value(output).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), T::one()));

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Grads { nodes: grads, params: self.param_vars.clone() }
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = gy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(&mut grads[v.0], gy.clone());
                    }
                }
            }
            Op::AddBroadcast(x, p) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], gy.clone());
                }
                if want(*p) {
                    let vp = val(*p);
                    let inner = vp.numel();
                    let mut acc = vec![T::zero(); inner];
                    for (i, &g) in gd.iter().enumerate() {
                        acc[i % inner] += g;
                    }
                    accumulate(&mut grads[p.0], Tensor::from_vec(vp.shape().to_vec(), acc).unwrap());
                }
            }
            Op::Scale(x, s) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], gy.map(|g| g * T::of(*s)));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / k;
                if want(*x) {
                    let mut dx = vec![T::zero(); rows * k];
                    gemm(false, true, rows, k, n, gd, vw.data(), T::zero(), &mut dx);
                    accumulate(&mut grads[x.0], Tensor::from_vec(vx.shape().to_vec(), dx).unwrap());
                }
                if want(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm(true, false, k, n, rows, vx.data(), gd, T::zero(), &mut dw);
                    accumulate(&mut grads[w.0], Tensor::from_vec([k, n], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut db = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += gd[r * n + j];
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_vec([n], db).unwrap());
                }
            }
            Op::BatchMatmul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let g = va.shape()[0];
                let (m, k) = if *ta { (va.shape()[2], va.shape()[1]) } else { (va.shape()[1], va.shape()[2]) };
                let n = if *tb { vb.shape()[1] } else { vb.shape()[2] };
                if want(*a) {
                    let mut da = vec![T::zero(); g * m * k];
                    for i in 0..g {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let bs = &vb.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // A stored [k, m]: dA = op(B) dC^T
                            gemm(*tb, true, k, m, n, bs, dc, T::zero(), out);
                        } else {
                            gemm(false, !*tb, m, k, n, dc, bs, T::zero(), out);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_vec(va.shape().to_vec(), da).unwrap());
                }
                if want(*b) {
                    let mut db = vec![T::zero(); g * k * n];
                    for i in 0..g {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let as_ = &va.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // B stored [n, k]: dB = dC^T op(A)
                            gemm(true, *ta, n, k, m, dc, as_, T::zero(), out);
                        } else {
                            gemm(!*ta, false, k, n, m, as_, dc, T::zero(), out);
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_vec(vb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let data = vx
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(vx.shape().to_vec(), data).unwrap());
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let data = vx.data().iter().zip(gd).map(|(&v, &g)| g * gelu_grad(v)).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(vx.shape().to_vec(), data).unwrap());
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let data = y.iter().zip(gd).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(node.value.shape().to_vec(), data).unwrap());
                }
            }
            Op::SoftmaxLast(x) => {
                if want(*x) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / d {
                        let (ys, gs) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            dx[r * d + i] = ys[i] * (gs[i] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(node.value.shape().to_vec(), dx).unwrap());
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = val(*x);
                let gm = val(*gamma).data();
                let d = gm.len();
                let rows = vx.numel() / d;
                let inv_d = T::of(1.0 / d as f64);
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dg = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let xs = &vx.data()[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (xs[i] - mean[r]) * rstd[r];
                        dxhat[i] = gs[i] * gm[i];
                        dg[i] += gs[i] * xhat[i];
                        dbeta[i] += gs[i];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for i in 0..d {
                        dx[r * d + i] = rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                if want(*x) {
                    accumulate(&mut grads[x.0], Tensor::from_vec(vx.shape().to_vec(), dx).unwrap());
                }
                if want(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::from_vec([d], dg).unwrap());
                }
                if want(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::from_vec([d], dbeta).unwrap());
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (vx, vw) = (val(*x), val(*w));
                let geo = ConvGeom::new(vx.shape(), vw.shape(), spec);
                let (rows, k, cout) = (geo.rows(), geo.k(), geo.cout);
                if want(*w) {
                    let cols = geo.im2col(vx.data());
                    let mut dw = vec![T::zero(); k * cout];
                    gemm(true, false, k, cout, rows, &cols, gd, T::zero(), &mut dw);
                    accumulate(&mut grads[w.0], Tensor::from_vec(vw.shape().to_vec(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut db = vec![T::zero(); cout];
                    for r in 0..rows {
                        for j in 0..cout {
                            db[j] += gd[r * cout + j];
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_vec([cout], db).unwrap());
                }
                if want(*x) {
                    let mut dcols = vec![T::zero(); rows * k];
                    gemm(false, true, rows, k, cout, gd, vw.data(), T::zero(), &mut dcols);
                    let dx = geo.col2im(&dcols);
                    accumulate(&mut grads[x.0], Tensor::from_vec(vx.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Upsample2(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let s = vx.shape();
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); vx.numel()];
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let so = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                let d = ((bi * h + y / 2) * w + xx / 2) * c;
                                for i in 0..c {
                                    dx[d + i] += gd[so + i];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(s.to_vec(), dx).unwrap());
                }
            }
            Op::MeanTokens(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let s = vx.shape();
                    let (b, c) = (s[0], s[s.len() - 1]);
                    let p = vx.numel() / (b * c);
                    let inv = T::of(1.0 / p as f64);
                    let data = (0..vx.numel()).map(|i| gd[(i / (p * c)) * c + i % c] * inv).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(s.to_vec(), data).unwrap());
                }
            }
            Op::MulChannels(x, g) => {
                let (vx, vg) = (val(*x), val(*g));
                let s = vx.shape();
                let (b, c) = (s[0], s[s.len() - 1]);
                let p = vx.numel() / (b * c);
                if want(*x) {
                    let gv = vg.data();
                    let data = gd.iter().enumerate().map(|(i, &dy)| dy * gv[(i / (p * c)) * c + i % c]).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(s.to_vec(), data).unwrap());
                }
                if want(*g) {
                    let mut dg = vec![T::zero(); b * c];
                    for (i, (&dy, &xv)) in gd.iter().zip(vx.data()).enumerate() {
                        dg[(i / (p * c)) * c + i % c] += dy * xv;
                    }
                    accumulate(&mut grads[g.0], Tensor::from_vec([b, c], dg).unwrap());
                }
            }
            Op::MulPositions(x, m) => {
                let (vx, vm) = (val(*x), val(*m));
                let c = *vx.shape().last().unwrap();
                if want(*x) {
                    let md = vm.data();
                    let data = gd.iter().enumerate().map(|(i, &dy)| dy * md[i / c]).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(vx.shape().to_vec(), data).unwrap());
                }
                if want(*m) {
                    let mut dm = vec![T::zero(); vm.numel()];
                    for (i, (&dy, &xv)) in gd.iter().zip(vx.data()).enumerate() {
                        dm[i / c] += dy * xv;
                    }
                    accumulate(&mut grads[m.0], Tensor::from_vec(vm.shape().to_vec(), dm).unwrap());
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    let g = gy.clone().reshape(val(*x).shape().to_vec()).unwrap();
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Permute(x, perm) => {
                if want(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (shape, data) = permute_data(gd, gy.shape(), &inv);
                    accumulate(&mut grads[x.0], Tensor::from_vec(shape, data).unwrap());
                }
            }
            Op::PrependToken { cls, x } => {
                let s = gy.shape();
                let (b, n1, d) = (s[0], s[1], s[2]);
                if want(*cls) {
                    let mut dc = vec![T::zero(); d];
                    for bi in 0..b {
                        for i in 0..d {
                            dc[i] += gd[bi * n1 * d + i];
                        }
                    }
                    accumulate(&mut grads[cls.0], Tensor::from_vec(val(*cls).shape().to_vec(), dc).unwrap());
                }
                if want(*x) {
                    let mut dx = Vec::with_capacity(b * (n1 - 1) * d);
                    for bi in 0..b {
                        dx.extend_from_slice(&gd[(bi * n1 + 1) * d..(bi + 1) * n1 * d]);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec([b, n1 - 1, d], dx).unwrap());
                }
            }
            Op::TakeToken(x, idx) => {
                if want(*x) {
                    let vx = val(*x);
                    let s = vx.shape();
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let mut dx = vec![T::zero(); vx.numel()];
                    for bi in 0..b {
                        dx[(bi * n + idx) * d..(bi * n + idx + 1) * d].copy_from_slice(&gd[bi * d..(bi + 1) * d]);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(s.to_vec(), dx).unwrap());
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if want(*logits) {
                    let vl = val(*logits);
                    let c = vl.shape()[1];
                    let b = labels.len();
                    let scale = gy.item() / T::of(b as f64);
                    let mut dl = probs.clone();
                    for (r, &lab) in labels.iter().enumerate() {
                        dl[r * c + lab] -= T::one();
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads[logits.0], Tensor::from_vec(vl.shape().to_vec(), dl).unwrap());
                }
            }
            Op::Mse { pred, target } => {
                if want(*pred) {
                    let vp = val(*pred);
                    let scale = gy.item() * T::of(2.0 / vp.numel() as f64);
                    let data = vp.data().iter().zip(target).map(|(&a, &b)| (a - b) * scale).collect();
                    accumulate(&mut grads[pred.0], Tensor::from_vec(vp.shape().to_vec(), data).unwrap());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every element of every
    /// parameter, compared against the tape.
    fn check(store: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        let analytic = g.backward(out).param_grads(store);
        let eps = 1e-6;
        for (pi, t) in store.tensors().iter().enumerate() {
            for j in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.tensors_mut()[pi].data_mut()[j] += delta;
                    let mut g = Graph::new(&s);
                    let out = f(&mut g);
                    g.value(out).item()
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let ana = analytic[pi].data()[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "param {} elem {j}: analytic {ana} numeric {num}", store.name(ParamId(pi)));
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let mut s = ParamStore::<f64>::new();
        let x = s.add("x", init::normal(&mut r, &[1, 4, 5, 2], 1.0));
        let w = s.add("w", init::normal(&mut r, &[3, 3, 2, 3], 1.0));
        let mut g = Graph::new(&s);
        let (xv, wv) = (g.param(x), g.param(w));
        let y = g.conv2d(xv, wv, None, 2, 1);
        assert_eq!(g.shape(y), &[1, 2, 3, 3]);
        let xs = s.get(x).data();
        let ws = s.get(w).data();
        for oy in 0..2 {
            for ox in 0..3 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || iy >= 4 || ix < 0 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += xs[((iy as usize) * 5 + ix as usize) * 2 + ci]
                                    * ws[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * 3 + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_conv_linear_layernorm() {
        let mut r = rng();
        let mut s = ParamStore::<f64>::new();
        let x = s.add("x", init::normal(&mut r, &[2, 5, 5, 2], 1.0));
        let w = s.add("w", init::normal(&mut r, &[3, 3, 2, 3], 0.5));
        let b = s.add("b", init::normal(&mut r, &[3], 0.5));
        let gm = s.add("g", init::normal(&mut r, &[3], 1.0));
        let bt = s.add("bt", init::normal(&mut r, &[3], 1.0));
        let lw = s.add("lw", init::normal(&mut r, &[3, 2], 1.0));
        check(&s, |g| {
            let (x, w, b, gm, bt, lw) = (g.param(x), g.param(w), g.param(b), g.param(gm), g.param(bt), g.param(lw));
            let y = g.conv2d(x, w, Some(b), 2, 1);
            let y = g.layer_norm(y, gm, bt, 1e-5);
            let y = g.gelu(y);
            let y = g.mean_tokens(y);
            let y = g.linear(y, lw, None);
            g.cross_entropy(y, &[0, 1])
        });
    }

    #[test]
    fn grad_attention_path() {
        let mut r = rng();
        let mut s = ParamStore::<f64>::new();
        let x = s.add("x", init::normal(&mut r, &[2, 3, 4], 1.0));
        let cls = s.add("cls", init::normal(&mut r, &[4], 1.0));
        let pos = s.add("pos", init::normal(&mut r, &[4, 4], 1.0));
        let wq = s.add("wq", init::normal(&mut r, &[4, 4], 0.5));
        check(&s, |g| {
            let (x, cls, pos, wq) = (g.param(x), g.param(cls), g.param(pos), g.param(wq));
            let t = g.prepend_token(cls, x);
            let t = g.add_broadcast(t, pos);
            let q = g.linear(t, wq, None);
            let qh = g.reshape(q, &[2, 4, 2, 2]);
            let qh = g.permute(qh, &[0, 2, 1, 3]);
            let qh = g.reshape(qh, &[4, 4, 2]);
            let sc = g.batch_matmul(qh, qh, false, true);
            let sc = g.scale(sc, 0.7);
            let a = g.softmax_last(sc);
            let o = g.batch_matmul(a, qh, false, false);
            let o = g.reshape(o, &[2, 2, 4, 2]);
            let o = g.permute(o, &[0, 2, 1, 3]);
            let o = g.reshape(o, &[2, 4, 4]);
            let o = g.add(o, t);
            let c = g.take_token(o, 0);
            let c = g.sigmoid(c);
            let c2 = g.reshape(c, &[2, 2, 2]);
            let m = g.mean_tokens(c2);
            g.cross_entropy(m, &[1, 0])
        });
    }

    #[test]
    fn grad_transposed_batch_matmul() {
        let mut r = rng();
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", init::normal(&mut r, &[2, 3, 2], 1.0));
        let b = s.add("b", init::normal(&mut r, &[2, 4, 3], 1.0));
        let t = s.add("t", init::normal(&mut r, &[2, 2, 4], 1.0));
        check(&s, |g| {
            let (a, b, t) = (g.param(a), g.param(b), g.param(t));
            // a^T b^T : [2,2,4]
            let y = g.batch_matmul(a, b, true, true);
            let y = g.add(y, t);
            let y = g.reshape(y, &[4, 4]);
            let y = g.relu(y);
            let y = g.reshape(y, &[2, 2, 4]);
            let y = g.mean_tokens(y);
            g.cross_entropy(y, &[0, 3])
        });
    }

    #[test]
    fn grad_gating_and_upsample() {
        let mut r = rng();
        let mut s = ParamStore::<f64>::new();
        let x = s.add("x", init::normal(&mut r, &[2, 2, 3, 3], 1.0));
        let gate = s.add("gate", init::normal(&mut r, &[2, 3], 1.0));
        let mask = s.add("mask", init::normal(&mut r, &[2, 2, 3, 1], 1.0));
        let target = init::normal::<f64, _>(&mut r, &[2, 4, 6, 3], 1.0);
        check(&s, |g| {
            let (x, gate, mask) = (g.param(x), g.param(gate), g.param(mask));
            let gs = g.sigmoid(gate);
            let y = g.mul_channels(x, gs);
            let y = g.mul_positions(y, mask);
            let y = g.upsample2(y);
            g.mse(y, &target)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let mut r = rng();
        let x = g.input(init::normal(&mut r, &[5, 7], 3.0));
        let y = g.softmax_last(x);
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::from_vec([1, 2], vec![1.0, 2.0]).unwrap());
        s.add("unused", Tensor::zeros([3]));
        let mut g = Graph::new(&s);
        let av = g.param(a);
        let l = g.cross_entropy(av, &[0]);
        let grads = g.backward(l).param_grads(&s);
        assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
        assert!(grads[0].data()[0] < 0.0);
    }

    #[test]
    fn permute_roundtrip() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::from_vec([2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let y = g.permute(x, &[2, 0, 1]);
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(g.value(y).data()[(3 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 3) as f64);
        let z = g.permute(y, &[1, 2, 0]);
        assert_eq!(g.value(z), g.value(x));
    }
}
