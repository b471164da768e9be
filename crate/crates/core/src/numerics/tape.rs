//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node holding its forward value and the inputs needed
//! to propagate gradients. [`Tape::backward`] walks the nodes in reverse and
//! returns a [`Grads`] table indexed by [`Var`].

use std::cell::RefCell;
use std::sync::Arc;

use super::scalar::{gemm_into, MatView};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows that attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, affine: Option<(Var, Var)>, xhat: Vec<T>, rstd: Vec<T> },
    Mse { a: Var, b: Var },
    Sum(Var),
    Gather { src: Var, idx: Vec<usize> },
    Assemble { srcs: Vec<Var>, picks: Vec<(usize, usize)> },
    Attention { qkv: Var, segs: Vec<Segment>, heads: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward (and optionally backward) pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    // tanh via one exp; saturates cleanly for large |u|
    let th = T::one() - T::of(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization without affine; returns (xhat, rstd).
pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len().checked_div(d).unwrap_or(0);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Numerically stable softmax over each `d`-wide row, in place. When
/// `causal_from` is set, row `i` only keeps entries `0..=i` (others become 0).
pub(crate) fn softmax_rows_in_place<T: Scalar>(x: &mut [T], d: usize, causal: bool) {
    let rows = x.len().checked_div(d).unwrap_or(0);
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        let live = if causal { (r + 1).min(d) } else { d };
        let max = row[..live].iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row[..live].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row[..live].iter_mut() {
            *v *= inv;
        }
        for v in row[live..].iter_mut() {
            *v = T::zero();
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Tape that records values only; `backward` yields no gradients.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, needs_grad: needs_grad && self.grad_enabled });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Differentiable leaf sharing the given storage.
    pub fn param(&self, t: Arc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, op: Op::Leaf, needs_grad: self.grad_enabled });
        Var(nodes.len() - 1)
    }

    pub fn var(&self, t: Tensor<T>) -> Var {
        self.param(Arc::new(t))
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&self, t: Arc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_into(T::one(), av.data(), MatView::dense(m, k), bv.data(), MatView::dense(k, n), true, &mut out, MatView::dense(m, n));
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs))
    }

    /// `x · w + bias` for `x: [m, k]`, `w: [k, n]`, `bias: [n]`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn broadcast_binary(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(bv.shape(), av.shape()) {
            return dim_err(format!("{name}: {:?} does not broadcast onto {:?}", bv.shape(), av.shape()));
        }
        let (a, b) = (av.data(), bv.data());
        let mut data = Vec::with_capacity(a.len());
        if b.len() == a.len() {
            data.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
        } else if !b.is_empty() {
            for chunk in a.chunks_exact(b.len()) {
                data.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let s = T::of(s);
        let data = av.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { a, s }, self.needs(&[a]))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn silu(&self, a: Var) -> Var {
        let t = self.unary(a, |x| x * sigmoid(x));
        self.push(t, Op::Silu(a), self.needs(&[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let t = self.unary(a, |x| gelu_parts(x).0);
        self.push(t, Op::Gelu(a), self.needs(&[a]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let mut data = av.data().to_vec();
        softmax_rows_in_place(&mut data, av.last_dim(), false);
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(a), self.needs(&[a]))
    }

    /// Layer normalization over the last dimension, optionally followed by
    /// `gamma * xhat + beta`. A zero-variance row normalizes to zeros.
    pub fn layer_norm(&self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return dim_err("layer_norm over an empty dimension");
        }
        let (xhat, rstd) = layer_norm_rows(xv.data(), d);
        let out = match affine {
            Some((g, b)) => {
                let (gv, bv) = (self.value(g), self.value(b));
                if gv.shape() != [d] || bv.shape() != [d] {
                    return dim_err(format!("layer_norm affine {:?}/{:?} for width {d}", gv.shape(), bv.shape()));
                }
                xhat.chunks_exact(d)
                    .flat_map(|r| r.iter().zip(gv.data()).zip(bv.data()).map(|((&v, &g), &b)| v * g + b))
                    .collect()
            }
            None => xhat.clone(),
        };
        let mut deps = vec![x];
        if let Some((g, b)) = affine {
            deps.extend([g, b]);
        }
        let needs = self.needs(&deps);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, affine, xhat, rstd }, needs))
    }

    /// Mean squared error over all elements (scalar).
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(format!("mse {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let n = av.len().max(1) as f64;
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / T::of(n));
        Ok(self.push(t, Op::Mse { a, b }, self.needs(&[a, b])))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.needs(&[a]))
    }

    /// Rows of a `[r, d]` tensor picked by index (embedding lookup / repeat).
    pub fn gather_rows(&self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if sv.shape().len() != 2 {
            return dim_err(format!("gather_rows expects a matrix, got {:?}", sv.shape()));
        }
        let (r, d) = (sv.shape()[0], sv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::Range(format!("row {i} of {r}")));
            }
            out.extend_from_slice(sv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(t, Op::Gather { src, idx: idx.to_vec() }, self.needs(&[src])))
    }

    /// Build a matrix whose row `j` is row `picks[j].1` of `srcs[picks[j].0]`.
    pub fn assemble_rows(&self, srcs: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let vals: Vec<_> = srcs.iter().map(|&s| self.value(s)).collect();
        let d = match vals.first() {
            Some(v) => v.last_dim(),
            None => return dim_err("assemble_rows needs a source"),
        };
        if vals.iter().any(|v| v.shape().len() != 2 || v.last_dim() != d) {
            return dim_err("assemble_rows sources must be matrices of equal width");
        }
        let mut out = Vec::with_capacity(picks.len() * d);
        for &(s, r) in picks {
            let v = vals.get(s).ok_or_else(|| Error::Range(format!("source {s}")))?;
            if r >= v.rows() {
                return Err(Error::Range(format!("row {r} of source {s}")));
            }
            out.extend_from_slice(v.row(r));
        }
        let t = Tensor::new(vec![picks.len(), d], out)?;
        let needs = self.needs(srcs);
        Ok(self.push(t, Op::Assemble { srcs: srcs.to_vec(), picks: picks.to_vec() }, needs))
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `qkv` is `[rows, 3·d]` with query, key and value blocks side by side;
    /// each segment attends only within itself. Returns `[rows, d]`.
    pub fn attention(&self, qkv: Var, segs: &[Segment], heads: usize, causal: bool) -> Result<Var> {
        let qv = self.value(qkv);
        let shape = qv.shape();
        if shape.len() != 2 || !shape[1].is_multiple_of(3) {
            return dim_err(format!("attention expects [rows, 3d], got {shape:?}"));
        }
        let rows = shape[0];
        let d = shape[1] / 3;
        if heads == 0 || !d.is_multiple_of(heads) {
            return dim_err(format!("width {d} not divisible by {heads} heads"));
        }
        let covered: usize = segs.iter().map(|s| s.len).sum();
        if covered != rows || segs.iter().any(|s| s.start + s.len > rows) {
            return dim_err("attention segments must tile the rows");
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let q = qv.data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(segs.iter().map(|s| s.len * s.len * heads).sum());
        let rs3 = 3 * d as isize;
        for seg in segs {
            let l = seg.len;
            for h in 0..heads {
                let qview = MatView { offset: seg.start * 3 * d + h * dh, rows: l, cols: dh, rs: rs3, cs: 1 };
                let kview = MatView { offset: seg.start * 3 * d + d + h * dh, ..qview };
                let vview = MatView { offset: seg.start * 3 * d + 2 * d + h * dh, ..qview };
                let mut s = vec![T::zero(); l * l];
                gemm_into(scale, q, qview, q, kview.t(), true, &mut s, MatView::dense(l, l));
                softmax_rows_in_place(&mut s, l, causal);
                let oview = MatView { offset: seg.start * d + h * dh, rows: l, cols: dh, rs: d as isize, cs: 1 };
                gemm_into(T::one(), &s, MatView::dense(l, l), q, vview, true, &mut out, oview);
                probs.extend_from_slice(&s);
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let op = Op::Attention { qkv, segs: segs.to_vec(), heads, probs };
        Ok(self.push(t, op, self.needs(&[qkv])))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return dim_err(format!("backward needs a scalar, got {:?}", root.value.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce(&mut [T])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    contrib(slot);
}

/// Sum `g` (shape of `a`) into the broadcast operand's gradient.
fn reduce_broadcast<T: Scalar>(g: &[T], target: &mut [T], scale: Option<&[T]>, negate: bool) {
    if target.is_empty() {
        return;
    }
    let bl = target.len();
    for (r, gr) in g.chunks_exact(bl).enumerate() {
        match scale {
            Some(a) => {
                let ar = &a[r * bl..(r + 1) * bl];
                for ((t, &gv), &av) in target.iter_mut().zip(gr).zip(ar) {
                    *t += gv * av;
                }
            }
            None if negate => target.iter_mut().zip(gr).for_each(|(t, &gv)| *t -= gv),
            None => target.iter_mut().zip(gr).for_each(|(t, &gv)| *t += gv),
        }
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            accumulate(nodes, grads, *a, |ga| {
                gemm_into(T::one(), g, MatView::dense(m, n), bv.data(), MatView::dense(k, n).t(), false, ga, MatView::dense(m, k));
            });
            accumulate(nodes, grads, *b, |gb| {
                gemm_into(T::one(), av.data(), MatView::dense(m, k).t(), g, MatView::dense(m, n), false, gb, MatView::dense(k, n));
            });
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            accumulate(nodes, grads, *b, |gb| reduce_broadcast(g, gb, None, false));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            accumulate(nodes, grads, *b, |gb| reduce_broadcast(g, gb, None, true));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let bl = bv.len().max(1);
            accumulate(nodes, grads, *a, |ga| {
                for (gar, gr) in ga.chunks_exact_mut(bl).zip(g.chunks_exact(bl)) {
                    for ((x, &gv), &bb) in gar.iter_mut().zip(gr).zip(bv.data()) {
                        *x += gv * bb;
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| reduce_broadcast(g, gb, Some(av.data()), false));
        }
        Op::Scale { a, s } => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s));
        }
        Op::Silu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gv), &xv) in ga.iter_mut().zip(g).zip(av.data()) {
                    let s = sigmoid(xv);
                    *x += gv * s * (T::one() + xv * (T::one() - s));
                }
            });
        }
        Op::Gelu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gv), &xv) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += gv * gelu_parts(xv).1;
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let d = node.value.last_dim();
            accumulate(nodes, grads, *a, |ga| {
                for r in 0..y.len() / d.max(1) {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        ga[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, affine, xhat, rstd } => {
            let d = node.value.last_dim();
            let rows = rstd.len();
            let gamma = affine.map(|(gm, _)| val(gm).data().to_vec());
            // gradient w.r.t. xhat
            let gx: Vec<T> = match &gamma {
                Some(gm) => g.chunks_exact(d).flat_map(|gr| gr.iter().zip(gm).map(|(&v, &w)| v * w)).collect(),
                None => g.to_vec(),
            };
            if let Some((gm, bt)) = affine {
                accumulate(nodes, grads, *gm, |gg| reduce_broadcast(g, gg, Some(xhat), false));
                accumulate(nodes, grads, *bt, |gb| reduce_broadcast(g, gb, None, false));
            }
            accumulate(nodes, grads, *x, |gxin| {
                let inv_d = T::of(1.0 / d as f64);
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let (xr, gr) = (&xhat[span.clone()], &gx[span]);
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        gxin[r * d + j] += rstd[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            });
        }
        Op::Mse { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let c = g[0] * T::of(2.0 / av.len().max(1) as f64);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &p), &q) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                    *x += c * (p - q);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((x, &p), &q) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                    *x -= c * (p - q);
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Gather { src, idx } => {
            let d = node.value.last_dim();
            accumulate(nodes, grads, *src, |gs| {
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gs[i * d + c] += g[j * d + c];
                    }
                }
            });
        }
        Op::Assemble { srcs, picks } => {
            let d = node.value.last_dim();
            for (si, &s) in srcs.iter().enumerate() {
                accumulate(nodes, grads, s, |gs| {
                    for (j, &(src, r)) in picks.iter().enumerate() {
                        if src == si {
                            for c in 0..d {
                                gs[r * d + c] += g[j * d + c];
                            }
                        }
                    }
                });
            }
        }
        Op::Attention { qkv, segs, heads, probs } => {
            let qv = val(*qkv);
            let d = qv.shape()[1] / 3;
            let dh = d / heads;
            let scale = T::of(1.0 / (dh as f64).sqrt());
            let q = qv.data();
            accumulate(nodes, grads, *qkv, |gq| {
                let rs3 = 3 * d as isize;
                let mut p_off = 0;
                for seg in segs {
                    let l = seg.len;
                    for h in 0..*heads {
                        let p = &probs[p_off..p_off + l * l];
                        p_off += l * l;
                        let qview = MatView { offset: seg.start * 3 * d + h * dh, rows: l, cols: dh, rs: rs3, cs: 1 };
                        let kview = MatView { offset: seg.start * 3 * d + d + h * dh, ..qview };
                        let vview = MatView { offset: seg.start * 3 * d + 2 * d + h * dh, ..qview };
                        let oview = MatView { offset: seg.start * d + h * dh, rows: l, cols: dh, rs: d as isize, cs: 1 };
                        // dV += Pᵀ dO
                        gemm_into(T::one(), p, MatView::dense(l, l).t(), g, oview, false, gq, vview);
                        // dP = dO Vᵀ
                        let mut dp = vec![T::zero(); l * l];
                        gemm_into(T::one(), g, oview, q, vview.t(), true, &mut dp, MatView::dense(l, l));
                        for r in 0..l {
                            let pr = &p[r * l..(r + 1) * l];
                            let dr = &mut dp[r * l..(r + 1) * l];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        // dQ += scale dS K ; dK += scale dSᵀ Q
                        gemm_into(scale, &dp, MatView::dense(l, l), q, kview, false, gq, qview);
                        gemm_into(scale, &dp, MatView::dense(l, l).t(), q, qview, false, gq, kview);
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::<f64>::new();
        let i = tape.var(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.var(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.var(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.var(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extent() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn add_rejects_non_trailing_broadcast() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
        let c = tape.var(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).is_ok());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(&[3]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::full(&[2, 5], 3.25));
        let y = tape.layer_norm(x, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let tape = Tape::<f64>::new();
        let a = tape.var(t(&[2], &[1.0, 2.0]));
        let b = tape.var(t(&[2], &[1.0, 2.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let tape = Tape::<f64>::new();
        let p = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.var(t(&[2], &[0.5, 0.5]));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn no_grad_tape_yields_nothing() {
        let tape = Tape::<f64>::no_grad();
        let p = tape.var(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(p).is_none());
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let tape = Tape::<f64>::new();
        // 2 rows, d = 2, one head
        let qkv = tape.var(t(&[2, 6], &[1.0, 0.0, 1.0, 0.0, 5.0, 6.0, 0.0, 1.0, 0.0, 1.0, 7.0, 8.0]));
        let y = tape.attention(qkv, &[Segment { start: 0, len: 2 }], 1, true).unwrap();
        assert_eq!(tape.value(y).row(0), &[5.0, 6.0]);
    }
}
