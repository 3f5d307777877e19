//! Tape-based reverse-mode differentiation over `C x H x W` tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when an
//! op is added, and [`Graph::backward`] walks the tape in reverse. Nodes built
//! only from constants never receive gradients, which is how teacher forward
//! passes and frozen weights are expressed.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a loss op reduces its per-element terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Per-element mean.
    Mean,
    /// The literal global form: `sqrt(sum + eps^2)` for Charbonnier, the root
    /// of the sum of squares for squared error, the plain sum for L1.
    Global,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    ConcatChannels(Vec<Var>),
    SliceWidth {
        x: Var,
        start: usize,
    },
    ConcatWidth(Vec<Var>),
    Resize(Var),
    Laplacian(Var),
    Charbonnier {
        a: Var,
        b: Var,
        eps: f64,
        reduce: Reduce,
    },
    SquaredError {
        a: Var,
        b: Var,
        reduce: Reduce,
    },
    AbsError {
        a: Var,
        b: Var,
        reduce: Reduce,
    },
    Scale(Var, f64),
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let p = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Source taps for half-pixel bilinear resampling of one axis.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn reflect1(i: isize, n: usize) -> usize {
    crate::degrade::reflect_index(i, n)
}

/// 5-point Laplacian with reflect-101 borders on every `H x W` plane.
pub fn laplacian_planes<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let four = T::from_f64(4.0);
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let up = reflect1(i as isize - 1, h);
            let dn = reflect1(i as isize + 1, h);
            for j in 0..w {
                let lf = reflect1(j as isize - 1, w);
                let rt = reflect1(j as isize + 1, w);
                o[i * w + j] = p[up * w + j] + p[dn * w + j] + p[i * w + lf] + p[i * w + rt]
                    - four * p[i * w + j];
            }
        }
    }
    out
}

fn laplacian_adjoint<T: Real>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let four = T::from_f64(4.0);
    let mut out = vec![T::zero(); g.len()];
    for ch in 0..c {
        let gp = &g[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let up = reflect1(i as isize - 1, h);
            let dn = reflect1(i as isize + 1, h);
            for j in 0..w {
                let lf = reflect1(j as isize - 1, w);
                let rt = reflect1(j as isize + 1, w);
                let v = gp[i * w + j];
                o[up * w + j] += v;
                o[dn * w + j] += v;
                o[i * w + lf] += v;
                o[i * w + rt] += v;
                o[i * w + j] -= four * v;
            }
        }
    }
    out
}

/// Charbonnier value accumulated in `f64`, evaluated as `eps + excess` so the
/// zero-difference value is exactly `eps`.
pub fn charbonnier_value<T: Real>(a: &[T], b: &[T], eps: f64, reduce: Reduce) -> f64 {
    let excess = |s: f64| s / (libm::sqrt(s + eps * eps) + eps);
    match reduce {
        Reduce::Mean => {
            let s: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x.as_f64() - y.as_f64();
                    excess(d * d)
                })
                .sum();
            eps + s / a.len() as f64
        }
        Reduce::Global => eps + excess(sum_sq(a, b)),
    }
}

fn sum_sq<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

pub fn squared_error_value<T: Real>(a: &[T], b: &[T], reduce: Reduce) -> f64 {
    match reduce {
        Reduce::Mean => sum_sq(a, b) / a.len() as f64,
        Reduce::Global => libm::sqrt(sum_sq(a, b)),
    }
}

pub fn abs_error_value<T: Real>(a: &[T], b: &[T], reduce: Reduce) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| libm::fabs(x.as_f64() - y.as_f64()))
        .sum();
    match reduce {
        Reduce::Mean => s / a.len() as f64,
        Reduce::Global => s,
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: never differentiated.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Zero-padded ("same" for odd kernels) 2-D convolution.
    /// `x: Ci x H x W`, `w: Co x Ci x k x k`, `b: Co`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let (ci, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], ci, "conv expects {} input channels, got {ci}", ws[1]);
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
        let p = ho * wo;
        let mut out = vec![T::zero(); co * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if k == 1 && stride == 1 {
                gemm(MatRef::new(wv, co, ci), MatRef::new(xv, ci, p), T::zero(), &mut out);
            } else {
                let cols = im2col(xv, ci, h, wd, k, stride, ho, wo);
                gemm(
                    MatRef::new(wv, co, ci * k * k),
                    MatRef::new(&cols, ci * k * k, p),
                    T::zero(),
                    &mut out,
                );
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), co, "conv bias length");
            for (row, &bias) in out.chunks_exact_mut(p).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::from_vec(&[co, ho, wo], out),
            Op::Conv2d { x, w, b, stride },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_vec(self.shape(a), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let v = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let v = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// `C x H x W -> C x 1 x 1` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = T::from_f64((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) / n)
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[c, 1, 1], data), Op::GlobalAvgPool(x), ng)
    }

    /// Multiplies every plane of `x` by the matching entry of `gate: C x 1 x 1`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(gate).numel(), c, "gate must have one entry per channel");
        let g = self.value(gate).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, &gv) in data.chunks_exact_mut(h * w).zip(g) {
            plane.iter_mut().for_each(|v| *v *= gv);
        }
        let ng = self.ng(&[x, gate]);
        self.push(Tensor::from_vec(&[c, h, w], data), Op::ScaleChannels { x, gate }, ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::from_vec(&[c, h, w], data),
            Op::ConcatChannels(parts.to_vec()),
            ng,
        )
    }

    /// Columns `start..start + width` of every plane.
    pub fn slice_width(&mut self, x: Var, start: usize, width: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + width <= w, "slice out of range");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * h * width);
        for row in src.chunks_exact(w) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::from_vec(&[c, h, width], data),
            Op::SliceWidth { x, start },
            ng,
        )
    }

    pub fn concat_width(&mut self, parts: &[Var]) -> Var {
        let (c, h, _) = self.value(parts[0]).chw();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pc, ph, pw) = self.value(p).chw();
                assert_eq!((pc, ph), (c, h), "concat_width mismatch");
                pw
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(c * h * total);
        for r in 0..c * h {
            for (&p, &pw) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * pw..(r + 1) * pw]);
            }
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::from_vec(&[c, h, total], data),
            Op::ConcatWidth(parts.to_vec()),
            ng,
        )
    }

    /// Bilinear resampling with half-pixel centers. Same-size resizes are
    /// exact copies.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            let o = &mut data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                    o[oy * out_w + ox] = gy * (gx * p[y0 * w + x0] + fx * p[y0 * w + x1])
                        + fy * (gx * p[y1 * w + x0] + fx * p[y1 * w + x1]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[c, out_h, out_w], data), Op::Resize(x), ng)
    }

    pub fn laplacian(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let data = laplacian_planes(self.value(x).data(), c, h, w);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[c, h, w], data), Op::Laplacian(x), ng)
    }

    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64, reduce: Reduce) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "charbonnier shape mismatch");
        let v = charbonnier_value(self.value(a).data(), self.value(b).data(), eps, reduce);
        let ng = self.ng(&[a, b]);
        self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::Charbonnier { a, b, eps, reduce },
            ng,
        )
    }

    pub fn squared_error(&mut self, a: Var, b: Var, reduce: Reduce) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "squared error shape mismatch");
        let v = squared_error_value(self.value(a).data(), self.value(b).data(), reduce);
        let ng = self.ng(&[a, b]);
        self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::SquaredError { a, b, reduce },
            ng,
        )
    }

    pub fn abs_error(&mut self, a: Var, b: Var, reduce: Reduce) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "abs error shape mismatch");
        let v = abs_error_value(self.value(a).data(), self.value(b).data(), reduce);
        let ng = self.ng(&[a, b]);
        self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::AbsError { a, b, reduce },
            ng,
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let f = T::from_f64(s);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let v = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut acc = 0.0;
        for &p in parts {
            acc += self.value(p).item().as_f64();
        }
        let ng = self.ng(parts);
        self.push(Tensor::scalar(T::from_f64(acc)), Op::Sum(parts.to_vec()), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride } => {
                let xv = self.value(*x);
                let (ci, h, wd) = xv.chw();
                let ws = self.value(*w).shape();
                let (co, k) = (ws[0], ws[2]);
                let (_, ho, wo) = node.value.chw();
                let p = ho * wo;
                let kk = ci * k * k;
                let one_by_one = k == 1 && *stride == 1;
                let cols = (!one_by_one && self.needs_grad(*w))
                    .then(|| im2col(xv.data(), ci, h, wd, k, *stride, ho, wo));
                if self.needs_grad(*w) {
                    let c = cols.as_deref().unwrap_or(xv.data());
                    let mut dw = vec![T::zero(); co * kk];
                    gemm(MatRef::new(gd, co, p), MatRef::t(c, kk, p), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(ws, dw));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let db = gd
                            .chunks_exact(p)
                            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
                            .collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[co], db));
                    }
                }
                if self.needs_grad(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); kk * p];
                    gemm(MatRef::t(wv, co, kk), MatRef::new(gd, co, p), T::zero(), &mut dcols);
                    let dx = if one_by_one {
                        dcols
                    } else {
                        col2im(&dcols, ci, h, wd, k, *stride, ho, wo)
                    };
                    self.accumulate(grads, *x, Tensor::from_vec(&[ci, h, wd], dx));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs_grad(*a) {
                    let d = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
                if self.needs_grad(*b) {
                    let d = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw();
                let n = T::from_f64((h * w) as f64);
                let mut d = Vec::with_capacity(c * h * w);
                for &gv in gd {
                    d.extend(core::iter::repeat_n(gv / n, h * w));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::ScaleChannels { x, gate } => {
                let (c, h, w) = self.value(*x).chw();
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                if self.needs_grad(*x) {
                    let mut d = gd.to_vec();
                    for (plane, &s) in d.chunks_exact_mut(h * w).zip(gv) {
                        plane.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
                }
                if self.needs_grad(*gate) {
                    let d = gd
                        .chunks_exact(h * w)
                        .zip(xv.chunks_exact(h * w))
                        .map(|(gp, xp)| gp.iter().zip(xp).fold(T::zero(), |a, (&g, &x)| a + g * x))
                        .collect();
                    let shape = self.value(*gate).shape();
                    self.accumulate(grads, *gate, Tensor::from_vec(shape, d));
                }
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs_grad(p) {
                        let shape = self.value(p).shape();
                        self.accumulate(grads, p, Tensor::from_vec(shape, gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SliceWidth { x, start } => {
                let (c, h, w) = self.value(*x).chw();
                let (_, _, sw) = node.value.chw();
                let mut d = vec![T::zero(); c * h * w];
                for (dst, src) in d.chunks_exact_mut(w).zip(gd.chunks_exact(sw)) {
                    dst[*start..*start + sw].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::ConcatWidth(parts) => {
                let (c, h, total) = node.value.chw();
                let mut off = 0;
                for &p in parts {
                    let (_, _, pw) = self.value(p).chw();
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(c * h * pw);
                        for row in gd.chunks_exact(total) {
                            d.extend_from_slice(&row[off..off + pw]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[c, h, pw], d));
                    }
                    off += pw;
                }
            }
            Op::Resize(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                let ty = resize_taps(h, oh);
                let tx = resize_taps(w, ow);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let gp = &gd[ch * oh * ow..(ch + 1) * oh * ow];
                    let dp = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                            let v = gp[oy * ow + ox];
                            dp[y0 * w + x0] += gy * gx * v;
                            dp[y0 * w + x1] += gy * fx * v;
                            dp[y1 * w + x0] += fy * gx * v;
                            dp[y1 * w + x1] += fy * fx * v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::Laplacian(x) => {
                let (c, h, w) = self.value(*x).chw();
                let d = laplacian_adjoint(gd, c, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::Charbonnier { a, b, eps, reduce } => {
                let up = gd[0].as_f64();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = av.len() as f64;
                let total = node.value.item().as_f64();
                let e2 = eps * eps;
                let da: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x.as_f64() - y.as_f64();
                        let v = match reduce {
                            Reduce::Mean => d / (n * libm::sqrt(d * d + e2)),
                            Reduce::Global => d / total,
                        };
                        T::from_f64(up * v)
                    })
                    .collect();
                self.push_pair(grads, *a, *b, da);
            }
            Op::SquaredError { a, b, reduce } => {
                let up = gd[0].as_f64();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = av.len() as f64;
                let total = node.value.item().as_f64();
                let da: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x.as_f64() - y.as_f64();
                        let v = match reduce {
                            Reduce::Mean => 2.0 * d / n,
                            Reduce::Global if total > 0.0 => d / total,
                            Reduce::Global => 0.0,
                        };
                        T::from_f64(up * v)
                    })
                    .collect();
                self.push_pair(grads, *a, *b, da);
            }
            Op::AbsError { a, b, reduce } => {
                let up = gd[0].as_f64();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = match reduce {
                    Reduce::Mean => up / av.len() as f64,
                    Reduce::Global => up,
                };
                let da: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x.as_f64() - y.as_f64();
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        T::from_f64(scale * s)
                    })
                    .collect();
                self.push_pair(grads, *a, *b, da);
            }
            Op::Scale(x, s) => {
                let f = T::from_f64(*s);
                let d = gd.iter().map(|&v| v * f).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, Tensor::scalar(gd[0]));
                }
            }
        }
    }

    /// Routes `da` to `a` and `-da` to `b`.
    fn push_pair(&self, grads: &mut [Option<Tensor<T>>], a: Var, b: Var, da: Vec<T>) {
        let shape = self.value(a).shape().to_vec();
        if self.needs_grad(b) {
            let db = da.iter().map(|&v| -v).collect();
            self.accumulate(grads, b, Tensor::from_vec(&shape, db));
        }
        self.accumulate(grads, a, Tensor::from_vec(&shape, da));
    }
}
