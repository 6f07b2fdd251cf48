use std::borrow::Cow;
use std::collections::HashMap;

use super::param::{GradSet, GroupSet, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
        // im2col buffer kept for the weight gradient
        cols: Vec<T>,
    },
    Upsample2x(Var),
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Log { input: Var, floor: T },
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SqDiffSum(Var, Var),
    StopGradient(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::BiasAdd(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SqDiffSum(a, b) => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Concat(parts) => parts.clone(),
            Op::Upsample2x(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Log { input: a, .. }
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StopGradient(a) => vec![*a],
        }
    }
}

struct Node<'p, T: Scalar> {
    op: Op<T>,
    value: Cow<'p, Tensor<T>>,
}

/// Forward record of primitive applications. Nodes are stored in execution
/// order; [`Graph::backward`] walks them in exact reverse.
pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    param_nodes: HashMap<ParamId, Var>,
    clamp_events: usize,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let hw = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let hw = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            clamp_events: 0,
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
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

    /// Number of `log` evaluations whose argument fell below the floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Cow::Owned(t),
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(store.value(id)),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// `(m,k) x (k,n) -> (m,n)`; a rank-1 right operand is a column vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(bad());
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        self.push(Op::MatMul(a, b), Tensor::new(out_shape, out)?, "matmul")
    }

    /// Adds `b` along the leading feature axis: per element for rank 1, per
    /// column for rank 2, per channel for rank 3 `(C,H,W)`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let ok = sb.len() == 1
            && match sx.len() {
                1 => sx[0] == sb[0],
                2 => sx[1] == sb[0],
                3 => sx[0] == sb[0],
                _ => false,
            };
        if !ok {
            return Err(Error::shape("bias_add", format!("{sx:?} + {sb:?}")));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        match sx.len() {
            1 | 2 => {
                for row in out.data_mut().chunks_mut(sb[0]) {
                    for (o, &bv) in row.iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
            }
            _ => {
                let plane = sx[1] * sx[2];
                for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|o| *o += bias[c]);
                }
            }
        }
        self.push(Op::BiasAdd(x, b), out, "bias_add")
    }

    /// 2-D convolution of `(C,H,W)` with `(O,C,k,k)` weights, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let bad = || Error::shape("conv2d", format!("{sx:?} * {sw:?} stride {stride} pad {pad}"));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(bad());
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let ho = conv_out(h, k, stride, pad).ok_or_else(bad)?;
        let wo = conv_out(w, k, stride, pad).ok_or_else(bad)?;
        let cols = im2col(self.value(input).data(), (c, h, w), k, stride, pad, (ho, wo));
        let mut out = vec![T::zero(); o * ho * wo];
        T::gemm(
            o,
            c * k * k,
            ho * wo,
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut out,
            T::zero(),
        );
        self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
                cols,
            },
            Tensor::new(vec![o, ho, wo], out)?,
            "conv2d",
        )
    }

    /// Nearest-neighbour 2x upsample of `(C,H,W)`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                let srow = &src[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
                let drow = &mut out[(ci * 2 * h + y) * 2 * w..(ci * 2 * h + y + 1) * 2 * w];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        self.push(
            Op::Upsample2x(x),
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            "upsample2x",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), out, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(x), out, "sigmoid")
    }

    /// `(C,H,W) -> (C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] * s[2] == 0 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let plane = s[1] * s[2];
        let inv = T::one() / T::of(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Op::GlobalAvgPool(x),
            Tensor::new(vec![s[0]], data)?,
            "global_avg_pool",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(x), out, "reshape")
    }

    /// Concatenates along axis 0 (the channel axis for `(C,H,W)`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                let all: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(Error::shape("concat", format!("{all:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data)?, "concat")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), out, "scale")
    }

    /// Natural log of `max(x, floor)`. Clamped entries get zero gradient and
    /// are counted in [`Graph::clamp_events`].
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.clamp_events += self.value(x).data().iter().filter(|&&v| v < floor).count();
        self.push(Op::Log { input: x, floor }, out, "log")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = self.value(x).map(|v| v.ln());
        self.push(
            Op::Log {
                input: x,
                floor: T::zero(),
            },
            out,
            "log",
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), out, "exp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if n == 0 {
            return Err(Error::shape("softmax", format!("{s:?}")));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        self.push(Op::Softmax(x), out, "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::of(n as f64));
        self.push(Op::Mean(x), out, "mean")
    }

    /// `sum((a - b)^2)`.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_diff_sum", a, b)?;
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(Op::SqDiffSum(a, b), Tensor::scalar(total), "sq_diff_sum")
    }

    /// Identity in the forward pass; blocks every gradient path through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            op: Op::StopGradient(x),
            value: Cow::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`. Only parameters whose group is in
    /// `groups` receive gradient; every other parameter is untouched.
    pub fn backward(&self, loss: Var, groups: GroupSet) -> Result<GradSet<T>> {
        let loss_shape = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        let end = loss.0 + 1;
        // live[i]: some selected parameter is reachable below node i
        let mut live = vec![false; end];
        for i in 0..end {
            live[i] = match &self.nodes[i].op {
                Op::Param(id) => groups.contains(self.store.get(*id).group()),
                Op::Constant | Op::StopGradient(_) => false,
                op => op.inputs().iter().any(|v| live[v.0]),
            };
        }
        let mut out = GradSet::new(self.store.len());
        if !live[loss.0] {
            return Ok(out);
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; end];
        grads[loss.0] = Some(Tensor::full(loss_shape.to_vec(), T::one()));

        for i in (0..end).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                out.add(id, g);
                continue;
            }
            for (input, gi) in self.input_grads(node, &g, &live) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }

    // Gradient contributions of one node to each of its live inputs.
    fn input_grads(&self, node: &Node<'p, T>, g: &Tensor<T>, live: &[bool]) -> Vec<(Var, Tensor<T>)> {
        let mut res = Vec::with_capacity(2);
        let val = |v: Var| self.value(v);
        let is_live = |v: Var| live[v.0];
        match &node.op {
            Op::Constant | Op::Param(_) | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let sa = val(*a).shape();
                let (m, k) = (sa[0], sa[1]);
                let n = g.len() / m;
                if is_live(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, T::zero());
                    res.push((*a, Tensor::new(sa.to_vec(), da).unwrap()));
                }
                if is_live(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, T::zero());
                    res.push((*b, Tensor::new(val(*b).shape().to_vec(), db).unwrap()));
                }
            }
            Op::BiasAdd(x, b) => {
                if is_live(*x) {
                    res.push((*x, g.clone()));
                }
                if is_live(*b) {
                    let sx = val(*x).shape();
                    let nb = val(*b).len();
                    let mut db = vec![T::zero(); nb];
                    if sx.len() == 3 {
                        let plane = sx[1] * sx[2];
                        for (c, ch) in g.data().chunks(plane).enumerate() {
                            db[c] = ch.iter().copied().sum();
                        }
                    } else {
                        for row in g.data().chunks(nb) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    res.push((*b, Tensor::from_vec(db)));
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
                cols,
            } => {
                let sx = val(*input).shape();
                let sw = val(*weight).shape();
                let (o, k) = (sw[0], sw[2]);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let gs = g.shape();
                let hw = gs[1] * gs[2];
                let ckk = c * k * k;
                if is_live(*weight) {
                    let mut dw = vec![T::zero(); o * ckk];
                    T::gemm(o, hw, ckk, g.data(), false, cols, true, &mut dw, T::zero());
                    res.push((*weight, Tensor::new(sw.to_vec(), dw).unwrap()));
                }
                if is_live(*input) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    T::gemm(ckk, o, hw, val(*weight).data(), true, g.data(), false, &mut dcols, T::zero());
                    let dx = col2im(&dcols, (c, h, w), k, *stride, *pad, (gs[1], gs[2]));
                    res.push((*input, Tensor::new(sx.to_vec(), dx).unwrap()));
                }
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); c * h * w];
                let gd = g.data();
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ci * h + y / 2) * w + xx / 2] += gd[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                res.push((*x, Tensor::new(s.to_vec(), dx).unwrap()));
            }
            Op::Relu(x) => {
                let out = node.value.as_ref();
                res.push((*x, zip_map(g, out, |gv, y| if y > T::zero() { gv } else { T::zero() })));
            }
            Op::Sigmoid(x) => {
                let out = node.value.as_ref();
                res.push((*x, zip_map(g, out, |gv, y| gv * y * (T::one() - y))));
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let plane = s[1] * s[2];
                let inv = T::one() / T::of(plane as f64);
                let mut dx = Vec::with_capacity(s[0] * plane);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * inv).take(plane));
                }
                res.push((*x, Tensor::new(s.to_vec(), dx).unwrap()));
            }
            Op::Reshape(x) => {
                res.push((*x, g.clone().reshaped(val(*x).shape().to_vec()).unwrap()));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if is_live(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        res.push((p, Tensor::new(val(p).shape().to_vec(), slice).unwrap()));
                    }
                    offset += n;
                }
            }
            Op::Add(a, b) => {
                if is_live(*a) {
                    res.push((*a, g.clone()));
                }
                if is_live(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if is_live(*a) {
                    res.push((*a, g.clone()));
                }
                if is_live(*b) {
                    res.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if is_live(*a) {
                    res.push((*a, zip_map(g, val(*b), |gv, y| gv * y)));
                }
                if is_live(*b) {
                    res.push((*b, zip_map(g, val(*a), |gv, x| gv * x)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                res.push((*a, g.map(|v| v * s)));
            }
            Op::Log { input, floor } => {
                let floor = *floor;
                res.push((
                    *input,
                    zip_map(g, val(*input), |gv, x| {
                        if x < floor || x <= T::zero() {
                            T::zero()
                        } else {
                            gv / x
                        }
                    }),
                ));
            }
            Op::Exp(x) => {
                res.push((*x, zip_map(g, node.value.as_ref(), |gv, y| gv * y)));
            }
            Op::Softmax(x) => {
                let y = node.value.as_ref();
                let n = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                res.push((*x, Tensor::new(y.shape().to_vec(), dx).unwrap()));
            }
            Op::Sum(x) => {
                res.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item())));
            }
            Op::Mean(x) => {
                let n = T::of(val(*x).len() as f64);
                res.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n)));
            }
            Op::SqDiffSum(a, b) => {
                let two_g = T::of(2.0) * g.item();
                let d = zip_map(val(*a), val(*b), |x, y| two_g * (x - y));
                if is_live(*b) {
                    res.push((*b, d.map(|v| -v)));
                }
                if is_live(*a) {
                    res.push((*a, d));
                }
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param::Group;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn matmul_hand_example() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64([2, 1], &[1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 1]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_and_softmax_definitions() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::zeros([5]));
        let p = g.softmax(z).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64([1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::from_f64([1, 1, 3, 3], &k).unwrap());
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y2 = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 2, 2]);
        assert_eq!(g.value(y2).data(), &[1.0, 3.0, 7.0, 9.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64([1, 1, 2], &[1.0, 2.0]).unwrap());
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn stop_gradient_blocks_exactly() {
        let mut s = store();
        let id = s.add("v", Group::Enc, Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let mut g = Graph::new(&s);
        let v = g.param(id);
        let sg = g.stop_gradient(v);
        assert_eq!(g.value(sg).data(), g.value(v).data());

        let only_gated = g.sum(sg).unwrap();
        let grads = g.backward(only_gated, GroupSet::all()).unwrap();
        assert!(grads.get(id).is_none());

        let both = g.add(v, sg).unwrap();
        let total = g.sum(both).unwrap();
        let grads = g.backward(total, GroupSet::all()).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_filters_groups_and_accumulates() {
        let mut s = store();
        let a = s.add("a", Group::Enc, Tensor::from_vec(vec![2.0]));
        let b = s.add("b", Group::ClsP, Tensor::from_vec(vec![3.0]));
        let mut g = Graph::new(&s);
        let va = g.param(a);
        let vb = g.param(b);
        let prod = g.mul(va, vb).unwrap();
        let loss = g.sum(prod).unwrap();

        let grads = g.backward(loss, GroupSet::of(&[Group::ClsP])).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);

        let mut s2 = s.clone();
        let full = g.backward(loss, GroupSet::all()).unwrap();
        s2.accumulate(&full);
        s2.accumulate(&full);
        assert_eq!(s2.get(a).grad.data(), &[6.0]);
        assert_eq!(s2.get(b).grad.data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros([3]));
        assert!(matches!(g.backward(x, GroupSet::all()), Err(Error::NotScalar(_))));
    }

    #[test]
    fn log_clamp_is_counted() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_vec(vec![0.0, 0.5]));
        let y = g.log_clamped(x, 1e-12).unwrap();
        assert_eq!(g.clamp_events(), 1);
        assert!((g.value(y).data()[0] - (1e-12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_vec(vec![1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }
}
