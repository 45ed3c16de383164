//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation together with its forward value.
//! [`Tape::backward`] walks the record in reverse and returns gradients for
//! every node that transitively depends on a leaf created with
//! `requires_grad`. Nodes that do not need a gradient are skipped entirely,
//! which matters for convolutions over constant images.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::real::matmul_into;
use crate::{shape_err_fmt, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// A fixed linear resampling of 2-D planes: each output pixel is a weighted
/// sum of at most four input pixels of the same plane.
///
/// Bilinear texture lookup, affine warps and their inverses are all expressed
/// this way, so gradients flow to the sampled values but never to the
/// sampling positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan<T> {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, T); 4]>,
}

impl<T: Real> ResamplePlan<T> {
    /// Builds a plan from per-output-pixel taps (row-major output order).
    pub fn new(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        taps: Vec<[(u32, T); 4]>,
    ) -> Result<Self> {
        if taps.len() != out_h * out_w {
            return Err(shape_err_fmt!(
                "resample plan has {} taps for {}x{} output",
                taps.len(),
                out_h,
                out_w
            ));
        }
        if taps.iter().flatten().any(|(i, _)| *i as usize >= in_h * in_w) {
            return Err(shape_err_fmt!("resample tap outside {}x{} input", in_h, in_w));
        }
        Ok(Self { in_h, in_w, out_h, out_w, taps })
    }

    pub fn cast<U: Real>(&self) -> ResamplePlan<U> {
        ResamplePlan {
            in_h: self.in_h,
            in_w: self.in_w,
            out_h: self.out_h,
            out_w: self.out_w,
            taps: self
                .taps
                .iter()
                .map(|t| t.map(|(i, w)| (i, U::c(w.as_f64()))))
                .collect(),
        }
    }

    pub fn taps(&self) -> &[[(u32, T); 4]] {
        &self.taps
    }

    /// Applies the plan to every plane of `src` (planes are the trailing
    /// `in_h * in_w` blocks).
    pub fn apply(&self, src: &[T], out: &mut [T]) {
        let pin = self.in_h * self.in_w;
        let pout = self.out_h * self.out_w;
        for (plane_in, plane_out) in src.chunks_exact(pin).zip(out.chunks_exact_mut(pout)) {
            for (o, taps) in plane_out.iter_mut().zip(&self.taps) {
                let mut acc = T::zero();
                for &(i, w) in taps {
                    acc = acc + w * plane_in[i as usize];
                }
                *o = acc;
            }
        }
    }

    fn apply_transpose(&self, g_out: &[T], g_in: &mut [T]) {
        let pin = self.in_h * self.in_w;
        let pout = self.out_h * self.out_w;
        for (plane_g, plane_in) in g_out.chunks_exact(pout).zip(g_in.chunks_exact_mut(pin)) {
            for (g, taps) in plane_g.iter().zip(&self.taps) {
                for &(i, w) in taps {
                    plane_in[i as usize] = plane_in[i as usize] + w * *g;
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, b: Var, outer: usize, len: usize, inner: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x { x: Var, h: usize, w: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    LnClamp { x: Var, lo: T, hi: T },
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { xs: Vec<Var>, outer: usize, lens: Vec<usize>, inner: usize },
    Slice { x: Var, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    Reshape(Var),
    Resample { x: Var, plan: Arc<ResamplePlan<T>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err_fmt!(
                "{}: {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("shape checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn map_op(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::from_vec(vx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map_op(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.map_op(x, |v| v + s, Op::AddScalar(x))
    }

    /// `1 - x`, used by blending and adversarial terms.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// Adds a vector along `axis` (broadcast over every other axis).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(b).len() != shape[axis] {
            return Err(shape_err_fmt!(
                "bias of {} entries on axis {} of {:?}",
                self.value(b).len(),
                axis,
                shape
            ));
        }
        let (outer, len, inner) = split3(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for o in 0..outer {
            for (l, bv) in bias.iter().enumerate() {
                let base = (o * len + l) * inner;
                for v in &mut data[base..base + inner] {
                    *v = *v + *bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(t, Op::AddBias { x, b, outer, len, inner }, rg))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err_fmt!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), false, self.value(b).data(), false, &mut out, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// 2-D convolution on `N x C x H x W` input with `O x C x k x k` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err_fmt!("conv2d input {:?} with weight {:?}", sx, sw));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err_fmt!("kernel {} larger than padded {}x{}", k, h, wd));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(shape_err_fmt!("conv bias has {} entries, need {}", self.value(b).len(), o));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, c, h, w: wd, o, k, stride, pad, ho, wo };
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut out = vec![T::zero(); n * o * hw];
        let mut cols = vec![T::zero(); ckk * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let oi = &mut out[i * o * hw..(i + 1) * o * hw];
            if is_pointwise(&geom) {
                matmul_into(wv, false, xi, false, oi, o, c, hw, false);
            } else {
                im2col(xi, &geom, &mut cols);
                matmul_into(wv, false, &cols, false, oi, o, ckk, hw, false);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for i in 0..n {
                for (oc, bb) in bv.iter().enumerate() {
                    let base = (i * o + oc) * hw;
                    for v in &mut out[base..base + hw] {
                        *v = *v + *bb;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&[n, o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Nearest-neighbour 2x upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err_fmt!("upsample needs 2 spatial axes, got {:?}", s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    op[y * 2 * w + xx] = sp[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape[l - 2] = 2 * h;
        shape[l - 1] = 2 * w;
        let rg = self.rg(x);
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::Upsample2x { x, h, w }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map_op(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v * v, Op::Square(x))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(T::zero()).sqrt(), Op::Sqrt(x))
    }

    /// `ln(clamp(x, lo, hi))`; zero derivative where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.map_op(x, |v| v.max(lo).min(hi).ln(), Op::LnClamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err_fmt!("axis {} of {:?}", axis, shape));
        }
        let (outer, len, inner) = split3(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&new_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, outer, len, inner }, rg))
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err_fmt!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err_fmt!("axis {} of {:?}", axis, base));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for v in xs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err_fmt!("concat {:?} with {:?} on axis {}", base, s, axis));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split3(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, l) in xs.iter().zip(&lens) {
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.rg(*v));
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), outer, lens, inner }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err_fmt!("slice {}..{} on axis {} of {:?}", start, start + len, axis, shape));
        }
        let (outer, len_in, inner) = split3(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * len_in + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let rg = self.rg(x);
        let t = Tensor::from_vec(&new_shape, out)?;
        Ok(self.push(t, Op::Slice { x, outer, len_in, start, len, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Applies a [`ResamplePlan`] to every plane of `x`.
    pub fn resample(&mut self, x: Var, plan: Arc<ResamplePlan<T>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let l = s.len();
        if l < 2 || s[l - 2] != plan.in_h || s[l - 1] != plan.in_w {
            return Err(shape_err_fmt!(
                "resample plan for {}x{} applied to {:?}",
                plan.in_h,
                plan.in_w,
                s
            ));
        }
        let planes = self.value(x).len() / (plan.in_h * plan.in_w);
        let mut out = vec![T::zero(); planes * plan.out_h * plan.out_w];
        plan.apply(self.value(x).data(), &mut out);
        let mut shape = s.clone();
        shape[l - 2] = plan.out_h;
        shape[l - 1] = plan.out_w;
        let rg = self.rg(x);
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::Resample { x, plan }, rg))
    }

    /// Mean softmax cross-entropy of `N x C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|t| *t >= s[1]) {
            return Err(shape_err_fmt!("cross entropy logits {:?} with {} targets", s, targets.len()));
        }
        let (n, c) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, v) in row.iter().enumerate() {
                let e = (*v - m).exp();
                probs[i * c + j] = e;
                z = z + e;
            }
            for j in 0..c {
                probs[i * c + j] = probs[i * c + j] / z;
            }
            total = total + (z.ln() + m - row[targets[i]]);
        }
        let value = total / T::c(n.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        let seed_len = self.value(loss).len();
        grads[loss.0] = Some(vec![T::one(); seed_len]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s = *s + *g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s = *s + *g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s = *s - *g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, g), o) in s.iter_mut().zip(g).zip(bv) {
                        *s = *s + *g * *o;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, g), o) in s.iter_mut().zip(g).zip(av) {
                        *s = *s + *g * *o;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s = *s + *g * *k);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s = *s + *g);
                }
            }
            Op::AddBias { x, b, outer, len, inner } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s = *s + *g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for o in 0..*outer {
                        for (l, sb) in s.iter_mut().enumerate() {
                            let base = (o * len + l) * inner;
                            *sb = *sb + g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G * B^T
                    matmul_into(g, false, bv, true, s, *m, *n, *k, true);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T * G
                    matmul_into(av, true, g, false, s, *k, *m, *n, true);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::Upsample2x { x, h, w } => {
                if let Some(s) = self.slot(grads, *x) {
                    let (h, w) = (*h, *w);
                    let planes = s.len() / (h * w);
                    for p in 0..planes {
                        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let sp = &mut s[p * h * w..(p + 1) * h * w];
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                let d = &mut sp[(yy / 2) * w + xx / 2];
                                *d = *d + gp[yy * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), yv) in s.iter_mut().zip(g).zip(y) {
                        if *yv > T::zero() {
                            *s = *s + *g;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), xv) in s.iter_mut().zip(g).zip(xv) {
                        let d = if *xv > T::zero() { T::one() } else { *slope };
                        *s = *s + *g * d;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), yv) in s.iter_mut().zip(g).zip(y) {
                        *s = *s + *g * (T::one() - *yv * *yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), yv) in s.iter_mut().zip(g).zip(y) {
                        *s = *s + *g * *yv * (T::one() - *yv);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), xv) in s.iter_mut().zip(g).zip(xv) {
                        let d = if *xv > T::zero() {
                            T::one()
                        } else if *xv < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *s = *s + *g * d;
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    let two = T::c(2.0);
                    for ((s, g), xv) in s.iter_mut().zip(g).zip(xv) {
                        *s = *s + *g * two * *xv;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let two = T::c(2.0);
                    for ((s, g), yv) in s.iter_mut().zip(g).zip(y) {
                        if *yv > T::zero() {
                            *s = *s + *g / (two * *yv);
                        }
                    }
                }
            }
            Op::LnClamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), xv) in s.iter_mut().zip(g).zip(xv) {
                        if *xv > *lo && *xv < *hi {
                            *s = *s + *g / *xv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let g0 = g[0];
                    s.iter_mut().for_each(|s| *s = *s + g0);
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for k in 0..*inner {
                                s[base + k] = s[base + k] + g[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut off = 0;
                for (v, l) in xs.iter().zip(lens) {
                    if let Some(s) = self.slot(grads, *v) {
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + l) * inner];
                            let dst = &mut s[o * l * inner..(o + 1) * l * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d = *d + *g);
                        }
                    }
                    off += l;
                }
            }
            Op::Slice { x, outer, len_in, start, len, inner } => {
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let b = (o * len_in + start) * inner;
                        let dst = &mut s[b..b + len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d = *d + *g);
                    }
                }
            }
            Op::Resample { x, plan } => {
                if let Some(s) = self.slot(grads, *x) {
                    plan.apply_transpose(g, s);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let n = targets.len();
                    let c = probs.len() / n.max(1);
                    let scale = g[0] / T::c(n.max(1) as f64);
                    for (r, t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == *t { T::one() } else { T::zero() };
                            s[r * c + j] = s[r * c + j] + (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let ConvGeom { n, c, h, w: wd, o, k, .. } = *geom;
        let hw = geom.ho * geom.wo;
        let ckk = c * k * k;
        if let Some(bv) = b {
            if let Some(s) = self.slot(grads, bv) {
                for i in 0..n {
                    for (oc, sb) in s.iter_mut().enumerate() {
                        let base = (i * o + oc) * hw;
                        *sb = *sb + g[base..base + hw].iter().copied().sum::<T>();
                    }
                }
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let pointwise = is_pointwise(geom);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw] };
        if self.rg(w) {
            let mut dw = grads[w.0].take().unwrap_or_else(|| vec![T::zero(); o * ckk]);
            for i in 0..n {
                let gi = &g[i * o * hw..(i + 1) * o * hw];
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                if pointwise {
                    matmul_into(gi, false, xi, true, &mut dw, o, hw, c, true);
                } else {
                    im2col(xi, geom, &mut cols);
                    matmul_into(gi, false, &cols, true, &mut dw, o, hw, ckk, true);
                }
            }
            grads[w.0] = Some(dw);
        }
        if let Some(s) = self.slot(grads, x) {
            for i in 0..n {
                let gi = &g[i * o * hw..(i + 1) * o * hw];
                let si = &mut s[i * c * h * wd..(i + 1) * c * h * wd];
                if pointwise {
                    matmul_into(wv, true, gi, false, si, c, o, hw, true);
                } else {
                    matmul_into(wv, true, gi, false, &mut cols, ckk, o, hw, false);
                    col2im(&cols, geom, si);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *d = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            prow[ix as usize] = prow[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Central differences of `f` around every entry of `x0`.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 23) as f64 / 11.0 - 1.0) * scale).collect()
    }

    #[test]
    fn matmul_grad_matches_differences() {
        let a0 = t(&[2, 3], &seq(6, 1.0));
        let b0 = t(&[3, 4], &seq(12, 0.5));
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tp = Tape::new();
            let (va, vb) = (tp.param(a.clone()), tp.param(b.clone()));
            let m = tp.matmul(va, vb).unwrap();
            let sq = tp.square(m);
            let l = tp.sum(sq);
            (tp.scalar(l), tp.backward(l).get(va).unwrap().to_vec())
        };
        let (_, ga) = loss(&a0, &b0);
        close(&ga, &numeric_grad(&a0, |a| loss(a, &b0).0), 1e-6);
    }

    #[test]
    fn conv_grad_matches_differences() {
        let x0 = t(&[2, 2, 5, 4], &seq(80, 1.0));
        let w0 = t(&[3, 2, 3, 3], &seq(54, 0.3));
        let b0 = t(&[3], &[0.1, -0.2, 0.05]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let mut tp = Tape::new();
                let (vx, vw, vb) = (tp.param(x.clone()), tp.param(w.clone()), tp.param(b.clone()));
                let y = tp.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
                let sq = tp.square(y);
                let l = tp.sum(sq);
                let g = tp.backward(l);
                (
                    tp.scalar(l),
                    g.get(vx).unwrap().to_vec(),
                    g.get(vw).unwrap().to_vec(),
                    g.get(vb).unwrap().to_vec(),
                )
            };
            let (_, gx, gw, gb) = run(&x0, &w0, &b0);
            close(&gx, &numeric_grad(&x0, |x| run(x, &w0, &b0).0), 1e-5);
            close(&gw, &numeric_grad(&w0, |w| run(&x0, w, &b0).0), 1e-5);
            close(&gb, &numeric_grad(&b0, |b| run(&x0, &w0, b).0), 1e-5);
        }
    }

    #[test]
    fn pointwise_conv_equals_matmul() {
        let x0 = t(&[1, 3, 2, 2], &seq(12, 1.0));
        let w0 = t(&[2, 3, 1, 1], &seq(6, 1.0));
        let mut tp = Tape::new();
        let (vx, vw) = (tp.constant(x0.clone()), tp.constant(w0.clone()));
        let y = tp.conv2d(vx, vw, None, 1, 0).unwrap();
        let xm = tp.constant(x0.reshape(&[3, 4]).unwrap());
        let wm = tp.constant(w0.reshape(&[2, 3]).unwrap());
        let m = tp.matmul(wm, xm).unwrap();
        assert_eq!(tp.value(y).data(), tp.value(m).data());
    }

    #[test]
    fn structural_ops_route_gradients() {
        let x0 = t(&[2, 3, 2, 2], &seq(24, 1.0));
        let run = |x: &Tensor<f64>| {
            let mut tp = Tape::new();
            let vx = tp.param(x.clone());
            let a = tp.slice(vx, 1, 1, 2).unwrap();
            let b = tp.concat(&[a, vx, a], 1).unwrap();
            let u = tp.upsample2x(b).unwrap();
            let s = tp.sum_axis(u, 1).unwrap();
            let th = tp.tanh(s);
            let sg = tp.sigmoid(th);
            let r = tp.reshape(sg, &[2, 16]).unwrap();
            let l = tp.mean(r);
            (tp.scalar(l), tp.backward(l).get(vx).unwrap().to_vec())
        };
        let (_, g) = run(&x0);
        close(&g, &numeric_grad(&x0, |x| run(x).0), 1e-6);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut tp = Tape::<f64>::new();
        let l = tp.param(Tensor::zeros(&[4, 7]));
        let ce = tp.cross_entropy(l, &[0, 1, 2, 6]).unwrap();
        assert!((tp.scalar(ce) - 7f64.ln()).abs() < 1e-12);
        let run = |x: &Tensor<f64>| {
            let mut tp = Tape::new();
            let v = tp.param(x.clone());
            let ce = tp.cross_entropy(v, &[2, 0]).unwrap();
            (tp.scalar(ce), tp.backward(ce).get(v).unwrap().to_vec())
        };
        let x0 = t(&[2, 3], &seq(6, 2.0));
        close(&run(&x0).1, &numeric_grad(&x0, |x| run(x).0), 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tp = Tape::<f32>::new();
        let c = tp.constant(Tensor::full(&[3], 2.0));
        let p = tp.param(Tensor::full(&[3], 1.0));
        let m = tp.mul(c, p).unwrap();
        let l = tp.sum(m);
        let g = tp.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_slope() {
        let mut tp = Tape::<f64>::new();
        let p = tp.param(Tensor::zeros(&[2]));
        let s = tp.sqrt(p);
        let l = tp.sum(s);
        assert_eq!(tp.scalar(l), 0.0);
        assert_eq!(tp.backward(l).get(p).unwrap(), &[0.0, 0.0]);
    }
}
