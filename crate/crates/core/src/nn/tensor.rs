//! Tensor storage, forward ops, and reverse-mode differentiation.

use ndarray::ArrayView2;
use rayon::prelude::*;
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when ops record the tape on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording the tape (inference / sampling).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

#[derive(Clone)]
enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Matmul(Tensor, Tensor),
    BMatmul(Tensor, Tensor),
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Tensor),
    Relu(Tensor),
    Silu(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Abs(Tensor),
    SoftmaxLast(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
    SumAxis(Tensor, usize),
    MeanAxis(Tensor, usize),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Concat(Vec<Tensor>, usize),
    Narrow {
        x: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    },
    IndexSelect0 {
        x: Tensor,
        ids: Vec<usize>,
    },
    BceWithLogits {
        logits: Tensor,
        targets: Tensor,
    },
    CrossEntropyLogits {
        logits: Tensor,
        targets: Vec<usize>,
    },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Option<Op>,
    requires_grad: bool,
}

/// Immutable row-major f64 tensor; clones share storage.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.0.shape)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

/// numpy-style broadcast of two shapes (trailing alignment).
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Per-output-element source strides for broadcasting `shape` to `target`
/// (0 on broadcast axes), left-padded to `target.len()`.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let n = target.len();
    let mut padded = vec![1usize; n];
    padded[n - shape.len()..].copy_from_slice(shape);
    let src_strides = strides_of(&padded);
    (0..n)
        .map(|d| if padded[d] == 1 { 0 } else { src_strides[d] })
        .collect()
}

/// Iterate the row-major indices of `shape`, tracking an offset under
/// `strides` incrementally (odometer), calling `f(flat_idx, offset)`.
fn odometer_walk(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let n = shape.len();
    let mut counters = vec![0usize; n];
    let mut offset = 0usize;
    for idx in 0..total {
        f(idx, offset);
        for d in (0..n).rev() {
            counters[d] += 1;
            offset += strides[d];
            if counters[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            counters[d] = 0;
        }
    }
}

/// Walk two offset streams at once (both operands of a broadcast binary op).
fn odometer_walk2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let n = shape.len();
    let mut counters = vec![0usize; n];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for idx in 0..total {
        f(idx, oa, ob);
        for d in (0..n).rev() {
            counters[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if counters[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            counters[d] = 0;
        }
    }
}

/// Sum-reduce a gradient in `from` shape back to `to` shape (inverse of broadcast).
fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let strides = broadcast_strides(to, from);
    let mut out = vec![0.0; numel(to)];
    odometer_walk(from, &strides, |idx, off| out[off] += grad[idx]);
    out
}

fn use_direct_kernel(m: usize, k: usize, n: usize) -> bool {
    m * n * k <= 32_768 || (n <= 32 && m * n * k <= 4_000_000)
}

/// a[m,k] x b[k,n]; small or skinny problems use direct kernels, else gemm.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if use_direct_kernel(m, k, n) {
        mm_small_into(a, b, m, k, n, &mut out);
        return out;
    }
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut ov = ndarray::ArrayViewMut2::from_shape((m, n), &mut out[..]).unwrap();
    ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    out
}

/// a[m,n] x b[k,n]^T -> [m,k] without materializing the transpose.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if use_direct_kernel(m, n, k) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let orow = &mut out[i * k..(i + 1) * k];
            for (kk, slot) in orow.iter_mut().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += arow[j] * brow[j];
                }
                *slot += acc;
            }
        }
        return out;
    }
    let av = ArrayView2::from_shape((m, n), a).unwrap();
    let bv = ArrayView2::from_shape((k, n), b).unwrap();
    let mut ov = ndarray::ArrayViewMut2::from_shape((m, k), &mut out[..]).unwrap();
    ndarray::linalg::general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut ov);
    out
}

/// a[m,k]^T x b[m,n] -> [k,n] without materializing the transpose.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if use_direct_kernel(k, m, n) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        return out;
    }
    let av = ArrayView2::from_shape((m, k), a).unwrap();
    let bv = ArrayView2::from_shape((m, n), b).unwrap();
    let mut ov = ndarray::ArrayViewMut2::from_shape((k, n), &mut out[..]).unwrap();
    ndarray::linalg::general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut ov);
    out
}

#[inline]
fn mm_small_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "shape/data mismatch");
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    fn result(shape: Vec<usize>, data: Vec<f64>, op: Op, parents_grad: bool) -> Tensor {
        if grad_enabled() && parents_grad {
            Tensor::build(shape, data, Some(op), true)
        } else {
            Tensor::build(shape, data, None, false)
        }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), data, None, false)
    }

    /// Leaf that participates in gradient computation (parameters, probes).
    pub fn leaf_grad(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), data, None, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(vec![v; numel(shape)], shape)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[1])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data[0]
    }

    /// Same data, detached from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.data.clone(), &self.0.shape)
    }

    fn binary(
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Tensor, Tensor) -> Op,
    ) -> Tensor {
        let shape = broadcast_shapes(a.shape(), b.shape());
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(a.shape(), &shape);
            let sb = broadcast_strides(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; numel(&shape)];
            odometer_walk2(&shape, &sa, &sb, |i, oa, ob| out[i] = f(ad[oa], bd[ob]));
            out
        };
        let rg = a.requires_grad() || b.requires_grad();
        Tensor::result(shape, data, op(a.clone(), b.clone()), rg)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        Tensor::binary(self, other, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        Tensor::binary(self, other, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        Tensor::binary(self, other, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        Tensor::binary(self, other, |x, y| x / y, Op::Div)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|&x| -x).collect();
        Tensor::result(
            self.shape().to_vec(),
            data,
            Op::Neg(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| c * x).collect();
        Tensor::result(
            self.shape().to_vec(),
            data,
            Op::Scale(self.clone(), c),
            self.requires_grad(),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::result(
            self.shape().to_vec(),
            data,
            Op::AddScalar(self.clone()),
            self.requires_grad(),
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl Fn(Tensor) -> Op) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::result(
            self.shape().to_vec(),
            data,
            op(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu)
    }

    pub fn silu(&self) -> Tensor {
        self.unary(|x| x / (1.0 + (-x).exp()), Op::Silu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|x| x.tanh(), Op::Tanh)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), Op::Exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(|x| x.ln(), Op::Ln)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(|x| x.sqrt(), Op::Sqrt)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(|x| x.abs(), Op::Abs)
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2D");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be 2D");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let data = mm(self.data(), other.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::result(vec![m, n], data, Op::Matmul(self.clone(), other.clone()), rg)
    }

    /// [B,m,k] x [B,k,n] -> [B,m,n]
    pub fn bmatmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 3, "bmatmul lhs must be 3D");
        assert_eq!(other.shape().len(), 3, "bmatmul rhs must be 3D");
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        assert_eq!(bs, bs2, "bmatmul batch dims");
        assert_eq!(k, k2, "bmatmul inner dims");
        let mut data = vec![0.0; bs * m * n];
        let per_batch = m * k * n;
        if per_batch <= 32_768 {
            for i in 0..bs {
                let a = &self.data()[i * m * k..(i + 1) * m * k];
                let b = &other.data()[i * k * n..(i + 1) * k * n];
                mm_small_into(a, b, m, k, n, &mut data[i * m * n..(i + 1) * m * n]);
            }
        } else {
            data.par_chunks_mut(m * n).enumerate().for_each(|(i, chunk)| {
                let a = &self.data()[i * m * k..(i + 1) * m * k];
                let b = &other.data()[i * k * n..(i + 1) * k * n];
                chunk.copy_from_slice(&mm(a, b, m, k, n));
            });
        }
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::result(
            vec![bs, m, n],
            data,
            Op::BMatmul(self.clone(), other.clone()),
            rg,
        )
    }

    /// x: [B,C,H,W], w: [O,C,kh,kw] -> [B,O,H',W']
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (bs, c, h, wd) = shape4(self.shape());
        let (o, c2, kh, kw) = shape4(w.shape());
        assert_eq!(c, c2, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let mut data = vec![0.0; bs * o * hw];
        let mut col = vec![0.0; ckk * hw];
        for i in 0..bs {
            im2col_into(
                &self.data()[i * c * h * wd..(i + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut col,
            );
            let wv = ndarray::ArrayView2::from_shape((o, ckk), w.data()).unwrap();
            let cv = ndarray::ArrayView2::from_shape((ckk, hw), &col[..]).unwrap();
            let mut ov =
                ndarray::ArrayViewMut2::from_shape((o, hw), &mut data[i * o * hw..(i + 1) * o * hw])
                    .unwrap();
            ndarray::linalg::general_mat_mul(1.0, &wv, &cv, 0.0, &mut ov);
            if let Some(bias) = b {
                let chunk = &mut data[i * o * hw..(i + 1) * o * hw];
                for oc in 0..o {
                    let bv = bias.data()[oc];
                    for v in &mut chunk[oc * hw..(oc + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let rg = self.requires_grad()
            || w.requires_grad()
            || b.map(|t| t.requires_grad()).unwrap_or(false);
        Tensor::result(
            vec![bs, o, ho, wo],
            data,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                stride,
                pad,
            },
            rg,
        )
    }

    /// Nearest-neighbor 2x spatial upsample of [B,C,H,W].
    pub fn upsample2x(&self) -> Tensor {
        let (bs, c, h, w) = shape4(self.shape());
        let mut data = vec![0.0; bs * c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for b in 0..bs {
            for ch in 0..c {
                let src = &self.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let dst = &mut data[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[i * wo + j] = src[(i / 2) * w + j / 2];
                    }
                }
            }
        }
        Tensor::result(
            vec![bs, c, ho, wo],
            data,
            Op::Upsample2x(self.clone()),
            self.requires_grad(),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax on 0-d");
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in x.iter().enumerate() {
                let e = (v - m).exp();
                data[r * d + i] = e;
                sum += e;
            }
            for v in &mut data[r * d..(r + 1) * d] {
                *v /= sum;
            }
        }
        Tensor::result(
            self.shape().to_vec(),
            data,
            Op::SoftmaxLast(self.clone()),
            self.requires_grad(),
        )
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let d = *self.shape().last().expect("layer_norm on 0-d");
        assert_eq!(gamma.numel(), d);
        assert_eq!(beta.numel(), d);
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                data[r * d + i] = gamma.data()[i] * (x[i] - mu) * rstd + beta.data()[i];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Tensor::result(
            self.shape().to_vec(),
            data,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
            rg,
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::result(vec![1], vec![s], Op::SumAll(self.clone()), self.requires_grad())
    }

    pub fn mean_all(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::result(vec![1], vec![s], Op::MeanAll(self.clone()), self.requires_grad())
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (shape, data) = reduce_axis(self.shape(), self.data(), axis, false);
        Tensor::result(shape, data, Op::SumAxis(self.clone(), axis), self.requires_grad())
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let (shape, data) = reduce_axis(self.shape(), self.data(), axis, true);
        Tensor::result(shape, data, Op::MeanAxis(self.clone(), axis), self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape numel mismatch");
        Tensor::result(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.shape().len());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        Tensor::result(
            out_shape,
            data,
            Op::Permute(self.clone(), axes.to_vec()),
            self.requires_grad(),
        )
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        let mut axis_total = 0;
        for p in parts {
            assert_eq!(p.shape().len(), base.len());
            for (d, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dims must match");
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let row = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[axis];
                let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
                data[o * row + offset..o * row + offset + pa * inner].copy_from_slice(src);
                offset += pa * inner;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Tensor::result(out_shape, data, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = o * shape[axis] * inner + start * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&self.data()[src_base..src_base + len * inner]);
        }
        Tensor::result(
            out_shape,
            data,
            Op::Narrow {
                x: self.clone(),
                axis,
                start,
                len,
            },
            self.requires_grad(),
        )
    }

    /// Row gather from a [V, D] table.
    pub fn index_select0(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "index_select0 needs 2D table");
        let d = self.shape()[1];
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < self.shape()[0], "row id out of range");
            data[i * d..(i + 1) * d].copy_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        Tensor::result(
            vec![ids.len(), d],
            data,
            Op::IndexSelect0 {
                x: self.clone(),
                ids: ids.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Mean binary cross-entropy on logits (numerically stable form).
    pub fn bce_with_logits(&self, targets: &Tensor) -> Tensor {
        assert_eq!(self.shape(), targets.shape());
        let n = self.numel() as f64;
        let mut acc = 0.0;
        for (&x, &t) in self.data().iter().zip(targets.data()) {
            acc += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
        }
        let rg = self.requires_grad() || targets.requires_grad();
        Tensor::result(
            vec![1],
            vec![acc / n],
            Op::BceWithLogits {
                logits: self.clone(),
                targets: targets.clone(),
            },
            rg,
        )
    }

    /// Mean cross-entropy of [B, C] logits against class ids.
    pub fn cross_entropy_logits(&self, targets: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (b, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(b, targets.len());
        let mut acc = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < c, "target class out of range");
            let row = &self.data()[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - row[t];
        }
        Tensor::result(
            vec![1],
            vec![acc / b as f64],
            Op::CrossEntropyLogits {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Reverse-mode gradients of a scalar loss.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar loss");
        let order = topo_order(self);
        let mut grads = Gradients::default();
        grads.accum(self.id(), self.numel(), &[1.0]);
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let Some(g) = grads.map.get(&node.0.id).cloned() else {
                continue;
            };
            backprop(node, op, &g, &mut grads);
        }
        grads
    }
}

fn shape4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected 4D shape, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn reduce_axis(shape: &[usize], data: &[f64], axis: usize, mean: bool) -> (Vec<usize>, Vec<f64>) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += data[base + i];
            }
        }
    }
    if mean {
        for v in &mut out {
            *v /= n as f64;
        }
    }
    (out_shape, out)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let walk_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    // fast path: innermost axis preserved, copy contiguous rows
    if axes.last() == Some(&(shape.len() - 1)) && *out_shape.last().unwrap() > 1 {
        let row = *out_shape.last().unwrap();
        let outer = &out_shape[..out_shape.len() - 1];
        let strides = &walk_strides[..walk_strides.len() - 1];
        odometer_walk(outer, strides, |i, off| {
            out[i * row..(i + 1) * row].copy_from_slice(&data[off..off + row]);
        });
        return out;
    }
    odometer_walk(&out_shape, &walk_strides, |i, off| out[i] = data[off]);
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col_into(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let hw = ho * wo;
    col.fill(0.0);
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * hw;
                let oj_lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
                let oj_hi_excl = ((w + pad - kj - 1) / stride + 1).min(wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[ii as usize * w..(ii as usize + 1) * w];
                    let crow = &mut col[row + oi * wo..row + (oi + 1) * wo];
                    if stride == 1 {
                        let xoff = oj_lo + kj - pad;
                        let len = oj_hi_excl - oj_lo;
                        crow[oj_lo..oj_hi_excl].copy_from_slice(&xrow[xoff..xoff + len]);
                    } else {
                        for oj in oj_lo..oj_hi_excl {
                            crow[oj] = xrow[oj * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let hw = ho * wo;
    for ch in 0..c {
        let xplane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * hw;
                let oj_lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
                let oj_hi_excl = ((w + pad - kj - 1) / stride + 1).min(wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = &mut xplane[ii as usize * w..(ii as usize + 1) * w];
                    let crow = &col[row + oi * wo..row + (oi + 1) * wo];
                    if stride == 1 {
                        let xoff = oj_lo + kj - pad;
                        for (xv, cv) in xrow[xoff..xoff + (oj_hi_excl - oj_lo)]
                            .iter_mut()
                            .zip(&crow[oj_lo..oj_hi_excl])
                        {
                            *xv += cv;
                        }
                    } else {
                        for oj in oj_lo..oj_hi_excl {
                            xrow[oj * stride + kj - pad] += crow[oj];
                        }
                    }
                }
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // Iterative postorder DFS; parents land before children in `order`.
    enum Item {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut stack = vec![Item::Enter(root.clone())];
    while let Some(item) = stack.pop() {
        match item {
            Item::Enter(t) => {
                if visited.contains(&t.0.id) {
                    continue;
                }
                visited.insert(t.0.id);
                stack.push(Item::Exit(t.clone()));
                if let Some(op) = &t.0.op {
                    for p in op_parents(op) {
                        if !visited.contains(&p.0.id) {
                            stack.push(Item::Enter(p));
                        }
                    }
                }
            }
            Item::Exit(t) => order.push(t),
        }
    }
    order
}

fn op_parents(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Matmul(a, b) | Op::BMatmul(a, b) => vec![a.clone(), b.clone()],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Silu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Abs(a)
        | Op::SoftmaxLast(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SumAxis(a, _)
        | Op::MeanAxis(a, _)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::Upsample2x(a) => vec![a.clone()],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![x.clone(), w.clone()];
            if let Some(bias) = b {
                v.push(bias.clone());
            }
            v
        }
        Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
        Op::Concat(parts, _) => parts.clone(),
        Op::Narrow { x, .. } | Op::IndexSelect0 { x, .. } => vec![x.clone()],
        Op::BceWithLogits { logits, targets } => vec![logits.clone(), targets.clone()],
        Op::CrossEntropyLogits { logits, .. } => vec![logits.clone()],
    }
}

/// Per-tensor gradient buffers keyed by tensor id.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    fn accum(&mut self, id: u64, n: usize, g: &[f64]) {
        debug_assert_eq!(n, g.len());
        match self.map.get_mut(&id) {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(id, g.to_vec());
            }
        }
    }

    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }
}

fn backprop(node: &Tensor, op: &Op, g: &[f64], grads: &mut Gradients) {
    let push = |grads: &mut Gradients, t: &Tensor, contrib: Vec<f64>| {
        if t.requires_grad() {
            grads.accum(t.id(), t.numel(), &contrib);
        }
    };
    match op {
        Op::Add(a, b) => {
            push(grads, a, reduce_to_shape(g, node.shape(), a.shape()));
            push(grads, b, reduce_to_shape(g, node.shape(), b.shape()));
        }
        Op::Sub(a, b) => {
            push(grads, a, reduce_to_shape(g, node.shape(), a.shape()));
            let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
            push(grads, b, reduce_to_shape(&neg, node.shape(), b.shape()));
        }
        Op::Mul(a, b) => {
            let sa = broadcast_strides(a.shape(), node.shape());
            let sb = broadcast_strides(b.shape(), node.shape());
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            odometer_walk2(node.shape(), &sa, &sb, |i, oa, ob| {
                ga[oa] += g[i] * bd[ob];
                gb[ob] += g[i] * ad[oa];
            });
            push(grads, a, ga);
            push(grads, b, gb);
        }
        Op::Div(a, b) => {
            let sa = broadcast_strides(a.shape(), node.shape());
            let sb = broadcast_strides(b.shape(), node.shape());
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            odometer_walk2(node.shape(), &sa, &sb, |i, oa, ob| {
                ga[oa] += g[i] / bd[ob];
                gb[ob] += -g[i] * ad[oa] / (bd[ob] * bd[ob]);
            });
            push(grads, a, ga);
            push(grads, b, gb);
        }
        Op::Neg(a) => push(grads, a, g.iter().map(|&v| -v).collect()),
        Op::Scale(a, c) => push(grads, a, g.iter().map(|&v| c * v).collect()),
        Op::AddScalar(a) => push(grads, a, g.to_vec()),
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                push(grads, a, mm_nt(g, b.data(), m, n, k));
            }
            if b.requires_grad() {
                push(grads, b, mm_tn(a.data(), g, m, k, n));
            }
        }
        Op::BMatmul(a, b) => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if a.requires_grad() {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    let chunk = mm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                    ga[i * m * k..(i + 1) * m * k].copy_from_slice(&chunk);
                }
                push(grads, a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let chunk = mm_tn(
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                    gb[i * k * n..(i + 1) * k * n].copy_from_slice(&chunk);
                }
                push(grads, b, gb);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (bs, c, h, wd) = shape4(x.shape());
            let (o, _, kh, kw) = shape4(w.shape());
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let ckk = c * kh * kw;
            let hw = ho * wo;
            let need_dx = x.requires_grad();
            let need_dw = w.requires_grad();
            let mut dx = vec![0.0; if need_dx { bs * c * h * wd } else { 0 }];
            let mut dw = vec![0.0; if need_dw { o * ckk } else { 0 }];
            let mut col = vec![0.0; ckk * hw];
            let mut dcol = vec![0.0; ckk * hw];
            for i in 0..bs {
                let gv = ndarray::ArrayView2::from_shape((o, hw), &g[i * o * hw..(i + 1) * o * hw])
                    .unwrap();
                if need_dw {
                    im2col_into(
                        &x.data()[i * c * h * wd..(i + 1) * c * h * wd],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut col,
                    );
                    let cv = ndarray::ArrayView2::from_shape((ckk, hw), &col[..]).unwrap();
                    let mut dwv =
                        ndarray::ArrayViewMut2::from_shape((o, ckk), &mut dw[..]).unwrap();
                    ndarray::linalg::general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut dwv);
                }
                if need_dx {
                    let wv = ndarray::ArrayView2::from_shape((o, ckk), w.data()).unwrap();
                    let mut dcv =
                        ndarray::ArrayViewMut2::from_shape((ckk, hw), &mut dcol[..]).unwrap();
                    ndarray::linalg::general_mat_mul(1.0, &wv.t(), &gv, 0.0, &mut dcv);
                    col2im_add(
                        &dcol,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dx[i * c * h * wd..(i + 1) * c * h * wd],
                    );
                }
            }
            if need_dx {
                push(grads, x, dx);
            }
            if need_dw {
                push(grads, w, dw);
            }
            if let Some(bias) = b {
                if bias.requires_grad() {
                    let mut db = vec![0.0; o];
                    for i in 0..bs {
                        for oc in 0..o {
                            db[oc] += g[(i * o + oc) * hw..(i * o + oc + 1) * hw]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    push(grads, bias, db);
                }
            }
        }
        Op::Upsample2x(a) => {
            let (bs, c, h, w) = shape4(a.shape());
            let (ho, wo) = (2 * h, 2 * w);
            let mut da = vec![0.0; a.numel()];
            for bi in 0..bs * c {
                let src = &g[bi * ho * wo..(bi + 1) * ho * wo];
                let dst = &mut da[bi * h * w..(bi + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[(i / 2) * w + j / 2] += src[i * wo + j];
                    }
                }
            }
            push(grads, a, da);
        }
        Op::Relu(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                .collect();
            push(grads, a, da);
        }
        Op::Silu(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gv * (s + x * s * (1.0 - s))
                })
                .collect();
            push(grads, a, da);
        }
        Op::Sigmoid(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(node.data())
                .map(|(&gv, &y)| gv * y * (1.0 - y))
                .collect();
            push(grads, a, da);
        }
        Op::Tanh(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(node.data())
                .map(|(&gv, &y)| gv * (1.0 - y * y))
                .collect();
            push(grads, a, da);
        }
        Op::Exp(a) => {
            let da: Vec<f64> = g.iter().zip(node.data()).map(|(&gv, &y)| gv * y).collect();
            push(grads, a, da);
        }
        Op::Ln(a) => {
            let da: Vec<f64> = g.iter().zip(a.data()).map(|(&gv, &x)| gv / x).collect();
            push(grads, a, da);
        }
        Op::Sqrt(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(node.data())
                .map(|(&gv, &y)| gv * 0.5 / y)
                .collect();
            push(grads, a, da);
        }
        Op::Abs(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| gv * x.signum())
                .collect();
            push(grads, a, da);
        }
        Op::SoftmaxLast(a) => {
            let d = *node.shape().last().unwrap();
            let rows = node.numel() / d;
            let y = node.data();
            let mut da = vec![0.0; node.numel()];
            for r in 0..rows {
                let dot: f64 = (0..d).map(|i| g[r * d + i] * y[r * d + i]).sum();
                for i in 0..d {
                    da[r * d + i] = y[r * d + i] * (g[r * d + i] - dot);
                }
            }
            push(grads, a, da);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mu = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|&v| (v - mu) * rstd).collect();
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for i in 0..d {
                    dgamma[i] += gr[i] * xhat[i];
                    dbeta[i] += gr[i];
                    let dxhat = gr[i] * gamma.data()[i];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat[i];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                for i in 0..d {
                    let dxhat = gr[i] * gamma.data()[i];
                    dx[r * d + i] = rstd * (dxhat - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                }
            }
            push(grads, x, dx);
            push(grads, gamma, dgamma);
            push(grads, beta, dbeta);
        }
        Op::SumAll(a) => push(grads, a, vec![g[0]; a.numel()]),
        Op::MeanAll(a) => push(grads, a, vec![g[0] / a.numel() as f64; a.numel()]),
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let shape = a.shape();
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let scale = if matches!(op, Op::MeanAxis(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut da = vec![0.0; a.numel()];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    for i in 0..inner {
                        da[base + i] = g[o * inner + i] * scale;
                    }
                }
            }
            push(grads, a, da);
        }
        Op::Reshape(a) => push(grads, a, g.to_vec()),
        Op::Permute(a, axes) => {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            push(grads, a, permute_data(g, node.shape(), &inverse));
        }
        Op::Concat(parts, axis) => {
            let out_shape = node.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let row = out_shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[*axis];
                if p.requires_grad() {
                    let mut dp = vec![0.0; p.numel()];
                    for o in 0..outer {
                        dp[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(
                            &g[o * row + offset..o * row + offset + pa * inner],
                        );
                    }
                    push(grads, p, dp);
                }
                offset += pa * inner;
            }
        }
        Op::Narrow { x, axis, start, len } => {
            let shape = x.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = o * shape[*axis] * inner + start * inner;
                dx[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            push(grads, x, dx);
        }
        Op::IndexSelect0 { x, ids } => {
            let d = x.shape()[1];
            let mut dx = vec![0.0; x.numel()];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dx[id * d + j] += g[i * d + j];
                }
            }
            push(grads, x, dx);
        }
        Op::BceWithLogits { logits, targets } => {
            let n = logits.numel() as f64;
            if logits.requires_grad() {
                let dl: Vec<f64> = logits
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| g[0] * (1.0 / (1.0 + (-x).exp()) - t) / n)
                    .collect();
                push(grads, logits, dl);
            }
            if targets.requires_grad() {
                let dt: Vec<f64> = logits.data().iter().map(|&x| g[0] * (-x) / n).collect();
                push(grads, targets, dt);
            }
        }
        Op::CrossEntropyLogits { logits, targets } => {
            let (b, c) = (logits.shape()[0], logits.shape()[1]);
            let mut dl = vec![0.0; logits.numel()];
            for (r, &t) in targets.iter().enumerate() {
                let row = &logits.data()[r * c..(r + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                for i in 0..c {
                    let p = (row[i] - m).exp() / sum;
                    dl[r * c + i] = g[0] * (p - if i == t { 1.0 } else { 0.0 }) / b as f64;
                }
            }
            push(grads, logits, dl);
        }
    }
}
