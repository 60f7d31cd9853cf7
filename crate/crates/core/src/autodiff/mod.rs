//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in creation
//! order. [`Tape::backward`] replays the recorded rules in reverse, which is
//! the chain-rule product over layer Jacobians. Gradient buffers are kept in
//! `f64` regardless of the storage scalar.
//!
//! Accumulation order: when several consumers feed gradient into the same
//! node, contributions are added in reverse recording order. `add(a, b)`
//! evaluates `a + b` element-wise in `f64` and rounds once, so it is
//! commutative bit for bit.

pub(crate) mod kernels;

use std::collections::HashMap;

use kernels::ConvGeom;
pub use kernels::ConvSpec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pixels carrying this label contribute neither loss nor metric counts.
pub const IGNORE_LABEL: u8 = 255;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        x: Var,
        coef: Var,
        index: usize,
    },
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
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Interp(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    ChannelNorm {
        x: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        count: usize,
    },
    ChannelDot {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` factorisation of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient, e.g. the point of a gradient check.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Place a stored weight on the tape. Repeated calls for the same weight
    /// return the same node. The node needs gradient iff the weight tensor
    /// has `requires_grad` set.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = &store.get(id).tensor;
        let needs = t.requires_grad();
        let v = self.push(t.clone(), Op::Leaf, needs);
        self.params.insert(key, v);
        v
    }

    /// Make later `param(store, id)` calls resolve to `v` instead of the
    /// stored tensor. Used to differentiate with respect to a weight that is
    /// supplied from outside, as in gradient checks.
    pub fn bind_param(&mut self, store: &ParamStore<T>, id: ParamId, v: Var) -> Result<()> {
        let want = store.get(id).tensor.shape();
        if self.shape(v) != want {
            return Err(Error::shape(format!(
                "binding {:?} to weight '{}' of shape {want:?}",
                self.shape(v),
                store.get(id).name
            )));
        }
        self.params.insert((store.uid(), id.index()), v);
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let wshape = self.shape(w).to_vec();
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(Error::invalid("conv2d stride, dilation and groups must be >= 1"));
        }
        if cin % spec.groups != 0 {
            return Err(Error::shape(format!(
                "input channels {cin} not divisible by groups {}",
                spec.groups
            )));
        }
        let (cout, k) = match wshape[..] {
            [co, ci, kh, kw] if ci == cin / spec.groups && kh == kw && co % spec.groups == 0 => (co, kh),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d weight {:?} incompatible with input {:?} (groups {})",
                    wshape,
                    self.shape(x),
                    spec.groups
                )))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            ho: spec.out_len(h, k)?,
            wo: spec.out_len(wd, k)?,
            spec,
        };
        let xs = self.value(x).to_f64();
        let ws = self.value(w).to_f64();
        let bs = b.map(|b| self.value(b).to_f64());
        let per = cout * geom.ho * geom.wo;
        let mut out = vec![T::zero(); n * per];
        let mut col = vec![0.0; geom.patch_rows() * geom.patch_cols()];
        let mut buf = vec![0.0; per];
        for s in 0..n {
            kernels::conv_forward_sample(&xs, &ws, bs.as_deref(), &geom, s, &mut col, &mut buf);
            for (o, &v) in out[s * per..(s + 1) * per].iter_mut().zip(&buf) {
                *o = T::narrow(v);
            }
        }
        let value = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv { x, w, b, spec }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} needs identical shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| T::narrow(f(x.widen(), y.widen())))
            .collect();
        Tensor::new(av.shape(), data).expect("shape checked by caller")
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor<T> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| T::narrow(f(x.widen()))).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.map_binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Left-to-right sum of one or more same-shaped tensors.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::invalid("add_all needs at least one tensor"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.map_binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map_unary(a, |x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `coef[index] * x` where `coef` is any tensor (read flat).
    pub fn scale_by(&mut self, x: Var, coef: Var, index: usize) -> Result<Var> {
        let c = self
            .value(coef)
            .data()
            .get(index)
            .ok_or_else(|| Error::invalid(format!("coefficient index {index} out of range")))?
            .widen();
        let v = self.map_unary(x, |e| c * e);
        let ng = self.ng(x) || self.ng(coef);
        Ok(self.push(v, Op::ScaleBy { x, coef, index }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one tensor"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} invalid for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {:?} incompatible with {base:?}",
                    s
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let len = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, ng))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} invalid for shape {shape:?}")));
        }
        let total: usize = sizes.iter().sum();
        if total != shape[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} sum to {total}, axis {axis} of {shape:?} has {}",
                shape[axis]
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} invalid for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    buf[j] = src[at(j)].widen();
                    mx = mx.max(buf[j]);
                }
                let mut z = 0.0;
                for b in buf.iter_mut() {
                    *b = (*b - mx).exp();
                    z += *b;
                }
                for j in 0..len {
                    data[at(j)] = T::narrow(buf[j] / z);
                }
            }
        }
        let value = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map_unary(x, |z| 1.0 / (1.0 + (-z).exp()));
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map_unary(x, |z| z.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Bilinear resize of the spatial dimensions (align-corners=false, edge
    /// taps clamped).
    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("interpolation target must be at least 1x1"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if (h, w) == (out_h, out_w) {
            let value = self.value(x).clone();
            let ng = self.ng(x);
            return Ok(self.push(value, Op::Reshape(x), ng));
        }
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * out_h * out_w];
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = (1.0 - ly) * ((1.0 - lx) * sp[y0 * w + x0].widen() + lx * sp[y0 * w + x1].widen())
                        + ly * ((1.0 - lx) * sp[y1 * w + x0].widen() + lx * sp[y1 * w + x1].widen());
                    dp[oy * out_w + ox] = T::narrow(v);
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Interp(x), ng))
    }

    /// Sum of every entry, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::narrow(s)), Op::Sum(x), ng)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for j in 0..len {
                    acc += src[(o * len + j) * inner + i].widen();
                }
                data[o * inner + i] = T::narrow(acc);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SumAxis { x, axis }, ng))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Parameter-free per-channel normalisation over batch and spatial
    /// extent: `(x - mean_c) / sqrt(var_c + 1e-5)`.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for s in 0..n {
                for v in &src[(s * c + ch) * hw..][..hw] {
                    mean += v.widen();
                }
            }
            mean /= count;
            let mut var = 0.0;
            for s in 0..n {
                for v in &src[(s * c + ch) * hw..][..hw] {
                    let d = v.widen() - mean;
                    var += d * d;
                }
            }
            var /= count;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            means[ch] = mean;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    data[base + i] = T::narrow((src[base + i].widen() - mean) * is);
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::ChannelNorm {
                x,
                mean: means,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over labelled pixels. `labels` holds one
    /// class id per `(n, h, w)` pixel; [`IGNORE_LABEL`] pixels are skipped.
    /// With no labelled pixel the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape(format!(
                "{} labels for logits {:?}",
                labels.len(),
                self.shape(logits)
            )));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..n {
            for p in 0..hw {
                let lab = labels[s * hw + p];
                if lab == IGNORE_LABEL {
                    continue;
                }
                if lab as usize >= k {
                    return Err(Error::invalid(format!("label {lab} out of range for {k} classes")));
                }
                let at = |c: usize| src[(s * k + c) * hw + p].widen();
                let mx = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..k).map(|c| (at(c) - mx).exp()).sum::<f64>().ln();
                total += lse - at(lab as usize);
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(T::narrow(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Per-channel inner product of two `(1, C, H, W)` maps divided by
    /// `H * W`; shape `[C]`.
    pub fn channel_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "channel_dot")?;
        let (n, c, h, w) = self.value(a).dims4()?;
        if n != 1 {
            return Err(Error::shape(format!(
                "channel_dot expects a single (batch-averaged) map, got batch {n}"
            )));
        }
        let hw = h * w;
        let av = self.value(a).to_f64();
        let bv = self.value(b).to_f64();
        let data = (0..c)
            .map(|ch| T::narrow(kernels::dot(&av[ch * hw..(ch + 1) * hw], &bv[ch * hw..(ch + 1) * hw]) / hw as f64))
            .collect();
        let value = Tensor::new(&[c], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ChannelDot { a, b }, ng))
    }

    /// Fingerprint of the sign of every ReLU input on the tape. Two
    /// evaluations of the same graph with equal fingerprints lie on the same
    /// linear piece of every ReLU.
    pub fn relu_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for v in self.value(x).data() {
                    h ^= u64::from(*v > T::zero());
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Write the gradients of every weight of `store` that appeared on the
    /// tape into the weight's gradient slot (accumulating).
    pub fn absorb_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        let uid = store.uid();
        let mut ids: Vec<_> = self
            .params
            .iter()
            .filter(|((u, _), _)| *u == uid)
            .map(|((_, i), &v)| (*i, v))
            .collect();
        ids.sort_unstable_by_key(|&(i, _)| i);
        for (i, v) in ids {
            if let Some(g) = self.grad(v) {
                store.weights_mut()[i].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn send(&mut self, to: Var, g: Vec<f64>) {
        if self.nodes[to.0].needs_grad {
            add_into(&mut self.grads[to.0], g);
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily move the op out so we can borrow self mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backward_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(a, g.to_vec());
                self.send(b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let bv = self.value(b).data();
                    let ga = g.iter().zip(bv).map(|(&g, y)| g * y.widen()).collect();
                    self.send(a, ga);
                }
                if self.ng(b) {
                    let av = self.value(a).data();
                    let gb = g.iter().zip(av).map(|(&g, x)| g * x.widen()).collect();
                    self.send(b, gb);
                }
            }
            Op::Scale(a, s) => self.send(a, g.iter().map(|&v| v * s).collect()),
            Op::ScaleBy { x, coef, index } => {
                if self.ng(x) {
                    let c = self.value(coef).data()[index].widen();
                    self.send(x, g.iter().map(|&v| v * c).collect());
                }
                if self.ng(coef) {
                    let xv = self.value(x).data();
                    let s: f64 = g.iter().zip(xv).map(|(&g, x)| g * x.widen()).sum();
                    let mut gc = vec![0.0; self.value(coef).len()];
                    gc[index] = s;
                    self.send(coef, gc);
                }
            }
            Op::Concat { ref parts, axis } => {
                let shape = self.shape(Var(i)).to_vec();
                let (outer, _, inner) = axis_split(&shape, axis);
                let total = shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.send(p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(x).to_vec();
                let (outer, full, inner) = axis_split(&in_shape, axis);
                let len = self.shape(Var(i))[axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.send(x, gx);
            }
            Op::Reshape(x) => self.send(x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let src = self.value(x).data();
                let mut gx = vec![0.0; g.len()];
                let mut y = vec![0.0; len];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let mx = (0..len).map(|j| src[at(j)].widen()).fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for (j, yj) in y.iter_mut().enumerate() {
                            *yj = (src[at(j)].widen() - mx).exp();
                            z += *yj;
                        }
                        for yj in y.iter_mut() {
                            *yj /= z;
                        }
                        let dotp: f64 = (0..len).map(|j| y[j] * g[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[j] * (g[at(j)] - dotp);
                        }
                    }
                }
                self.send(x, gx);
            }
            Op::Sigmoid(x) => {
                let src = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(src)
                    .map(|(&g, z)| {
                        let s = 1.0 / (1.0 + (-z.widen()).exp());
                        g * s * (1.0 - s)
                    })
                    .collect();
                self.send(x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, x)| if x.widen() > 0.0 { g } else { 0.0 })
                    .collect();
                self.send(x, gx);
            }
            Op::Interp(x) => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (_, _, oh, ow) = self.value(Var(i)).dims4()?;
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dp = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = gp[oy * ow + ox];
                            dp[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                            dp[y0 * w + x1] += (1.0 - ly) * lx * v;
                            dp[y1 * w + x0] += ly * (1.0 - lx) * v;
                            dp[y1 * w + x1] += ly * lx * v;
                        }
                    }
                }
                self.send(x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.send(x, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for k in 0..inner {
                            gx[(o * len + j) * inner + k] = g[o * inner + k];
                        }
                    }
                }
                self.send(x, gx);
            }
            Op::ChannelNorm {
                x,
                ref mean,
                ref inv_std,
            } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let src = self.value(x).data();
                let y: Vec<f64> = (0..src.len())
                    .map(|p| {
                        let ch = (p / hw) % c;
                        (src[p].widen() - mean[ch]) * inv_std[ch]
                    })
                    .collect();
                let mut gx = vec![0.0; g.len()];
                for ch in 0..c {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for p in base..base + hw {
                            mg += g[p];
                            mgy += g[p] * y[p];
                        }
                    }
                    mg /= count;
                    mgy /= count;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for p in base..base + hw {
                            gx[p] = inv_std[ch] * (g[p] - mg - y[p] * mgy);
                        }
                    }
                }
                self.send(x, gx);
            }
            Op::CrossEntropy {
                logits,
                ref labels,
                count,
            } => {
                let (n, k, h, w) = self.value(logits).dims4()?;
                let hw = h * w;
                let src = self.value(logits).data();
                let mut gx = vec![0.0; src.len()];
                if count > 0 {
                    let scale = g[0] / count as f64;
                    for s in 0..n {
                        for p in 0..hw {
                            let lab = labels[s * hw + p];
                            if lab == IGNORE_LABEL {
                                continue;
                            }
                            let at = |c: usize| (s * k + c) * hw + p;
                            let mx = (0..k).map(|c| src[at(c)].widen()).fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = (0..k).map(|c| (src[at(c)].widen() - mx).exp()).sum();
                            for c in 0..k {
                                let prob = (src[at(c)].widen() - mx).exp() / z;
                                let target = if c == lab as usize { 1.0 } else { 0.0 };
                                gx[at(c)] = scale * (prob - target);
                            }
                        }
                    }
                }
                self.send(logits, gx);
            }
            Op::ChannelDot { a, b } => {
                let (_, c, h, w) = self.value(a).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                for (dst, other) in [(a, b), (b, a)] {
                    if self.ng(dst) {
                        let ov = self.value(other).data();
                        let mut gd = vec![0.0; c * hw];
                        for ch in 0..c {
                            for p in 0..hw {
                                gd[ch * hw + p] = g[ch] * inv * ov[ch * hw + p].widen();
                            }
                        }
                        self.send(dst, gd);
                    }
                }
            }
            Op::Conv { x, w, b, spec } => {
                let (n, cin, h, wd) = self.value(x).dims4()?;
                let (_, cout, ho, wo) = self.value(Var(i)).dims4()?;
                let k = self.shape(w)[2];
                let geom = ConvGeom {
                    cin,
                    h,
                    w: wd,
                    cout,
                    k,
                    ho,
                    wo,
                    spec,
                };
                let want_w = self.ng(w);
                let want_x = self.ng(x);
                if want_w || want_x {
                    let xs = self.value(x).to_f64();
                    let ws = self.value(w).to_f64();
                    let mut gw = want_w.then(|| vec![0.0; ws.len()]);
                    let mut gx = want_x.then(|| vec![0.0; xs.len()]);
                    let rows = geom.patch_rows();
                    let p = geom.patch_cols();
                    let mut col = vec![0.0; rows * p];
                    let mut dcol = vec![0.0; rows * p];
                    let per = cout * p;
                    for s in 0..n {
                        kernels::conv_backward_sample(
                            &xs,
                            &ws,
                            &g[s * per..(s + 1) * per],
                            &geom,
                            s,
                            &mut col,
                            &mut dcol,
                            gw.as_deref_mut(),
                            gx.as_deref_mut(),
                        );
                    }
                    if let Some(gw) = gw {
                        self.send(w, gw);
                    }
                    if let Some(gx) = gx {
                        self.send(x, gx);
                    }
                }
                if let Some(b) = b {
                    if self.ng(b) {
                        let p = ho * wo;
                        let mut gb = vec![0.0; cout];
                        for s in 0..n {
                            for (co, gbv) in gb.iter_mut().enumerate() {
                                *gbv += g[(s * cout + co) * p..][..p].iter().sum::<f64>();
                            }
                        }
                        self.send(b, gb);
                    }
                }
            }
        }
        Ok(())
    }
}
