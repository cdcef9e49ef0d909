//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends a node holding its value; node ids are handed out
//! in execution order, so the record is topologically sorted by construction.
//! [`Tape::backward`] consumes the record and walks it in reverse.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        outer: usize,
        inner: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_width: usize,
        start: usize,
    },
    Swap01(Var),
    MeanTrailing {
        x: Var,
        groups: usize,
    },
    Focal {
        pred: Var,
        gt: Tensor,
        norms: Vec<f64>,
        alpha: f64,
        beta: f64,
    },
    MaskedL1 {
        pred: Var,
        target: Tensor,
        mask: Tensor,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Single-threaded record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, materialising zeros when it does not reach the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]).expect("recorded shapes are valid"),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record an input that never needs a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Weighted sum of scalar-compatible nodes of equal shape.
    pub fn weighted_sum(&self, terms: &[(f64, Var)]) -> Result<Var> {
        let (&(w0, v0), rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("weighted_sum of no terms".into()))?;
        let mut acc = self.scale(v0, w0);
        for &(w, v) in rest {
            let s = self.scale(v, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = kernels::transpose(&self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(&self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// 2-D cross-correlation; `x` is `C×H×W` or `N×C×H×W`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom, batch) = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (batch, geom) = kernels::conv2d_geom(xv.shape(), wv.shape(), stride, pad)?;
            let data = geom.forward(xv.data(), wv.data(), batch);
            let out = Tensor::new(&kernels::conv2d_out_shape(xv.shape(), &geom), data)?;
            (out, geom, batch)
        };
        Ok(self.push(out, Op::Conv { x, w, geom, batch }))
    }

    /// 3-D cross-correlation; `x` is `C×T×H×W`.
    pub fn conv3d(&self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (out, geom) = {
            let xv = self.value(x);
            let wv = self.value(w);
            let geom = kernels::conv3d_geom(xv.shape(), wv.shape(), stride, pad)?;
            let data = geom.forward(xv.data(), wv.data(), 1);
            let o = geom.output;
            (Tensor::new(&[geom.cout, o[0], o[1], o[2]], data)?, geom)
        };
        Ok(self.push(out, Op::Conv { x, w, geom, batch: 1 }))
    }

    /// Add `bias[c]` to every element whose index along `axis` is `c`.
    pub fn bias_add(&self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (out, outer, inner) = {
            let xv = self.value(x);
            let bv = self.value(bias);
            let (outer, width, inner) = split_axis(xv.shape(), axis, "bias_add")?;
            if bv.len() != width {
                return Err(Error::dim(
                    "bias_add",
                    format!("bias {:?} does not match axis {axis} of {:?}", bv.shape(), xv.shape()),
                ));
            }
            let mut data = xv.data().to_vec();
            for o in 0..outer {
                for (c, &b) in bv.data().iter().enumerate() {
                    let start = (o * width + c) * inner;
                    for v in &mut data[start..start + inner] {
                        *v += b;
                    }
                }
            }
            (Tensor::new(xv.shape(), data)?, outer, inner)
        };
        Ok(self.push(out, Op::BiasAdd { x, bias, outer, inner }))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?;
        let base = self.shape(*first);
        let (outer, _, inner) = split_axis(&base, axis, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("cannot concatenate {s:?} with {base:?} along axis {axis}"),
                ));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (out, outer, src_width) = {
            let xv = self.value(x);
            let (outer, width, inner) = split_axis(xv.shape(), axis, "slice")?;
            if len == 0 || start + len > width {
                return Err(Error::dim(
                    "slice",
                    format!("range {start}..{} outside axis {axis} of {:?}", start + len, xv.shape()),
                ));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * width + start) * inner;
                data.extend_from_slice(&xv.data()[s..s + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            (Tensor::new(&shape, data)?, outer, width)
        };
        Ok(self.push(
            out,
            Op::Slice {
                x,
                outer,
                src_width,
                start,
            },
        ))
    }

    pub fn swap01(&self, a: Var) -> Result<Var> {
        let out = self.value(a).swap01()?;
        Ok(self.push(out, Op::Swap01(a)))
    }

    /// Mean over all axes after the first `keep`; returns a tensor of the
    /// leading shape (global average pooling when `keep == 1`).
    pub fn mean_trailing(&self, a: Var, keep: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if keep == 0 || keep >= v.rank() {
                return Err(Error::dim(
                    "mean_trailing",
                    format!("cannot keep {keep} axes of {:?}", v.shape()),
                ));
            }
            let groups: usize = v.shape()[..keep].iter().product();
            let width = v.len() / groups;
            let data = v
                .data()
                .chunks(width)
                .map(|c| c.iter().sum::<f64>() / width as f64)
                .collect();
            Tensor::new(&v.shape()[..keep], data)?
        };
        let groups = out.len();
        Ok(self.push(out, Op::MeanTrailing { x: a, groups }))
    }

    /// Penalty-reduced pixel-wise focal loss.
    ///
    /// `pred` is split into `norms.len()` equal contiguous groups; group `i`
    /// is divided by `max(norms[i], 1)` and the group losses are summed.
    /// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the clamp has
    /// zero gradient outside that range.
    pub fn focal_loss(
        &self,
        pred: Var,
        gt: &Tensor,
        norms: &[f64],
        alpha: f64,
        beta: f64,
    ) -> Result<Var> {
        let out = {
            let p = self.value(pred);
            p.expect_same_shape(gt, "focal_loss")?;
            let group = group_len(p.len(), norms.len(), "focal_loss")?;
            let mut total = 0.0;
            for (i, &n) in norms.iter().enumerate() {
                let range = i * group..(i + 1) * group;
                let mut acc = 0.0;
                for (&ph, &g) in p.data()[range.clone()].iter().zip(&gt.data()[range]) {
                    acc += focal_term(ph, g, alpha, beta);
                }
                total += -acc / n.max(1.0);
            }
            Tensor::scalar(total)
        };
        Ok(self.push(
            out,
            Op::Focal {
                pred,
                gt: gt.clone(),
                norms: norms.to_vec(),
                alpha,
                beta,
            },
        ))
    }

    /// Masked L1 loss. `pred`/`target` hold `norms.len()` items, each of
    /// `C × S` values; `mask` holds `norms.len() × S` weights shared across
    /// the `C` channels of an item. Item `i` is divided by `max(norms[i], 1)`.
    pub fn masked_l1(&self, pred: Var, target: &Tensor, mask: &Tensor, norms: &[f64]) -> Result<Var> {
        let out = {
            let p = self.value(pred);
            p.expect_same_shape(target, "masked_l1")?;
            let (item, spatial) = masked_layout(p.len(), mask.len(), norms.len())?;
            let channels = item / spatial;
            let mut total = 0.0;
            for (i, &n) in norms.iter().enumerate() {
                let mut acc = 0.0;
                for c in 0..channels {
                    for s in 0..spatial {
                        let m = mask.data()[i * spatial + s];
                        if m != 0.0 {
                            let j = i * item + c * spatial + s;
                            acc += m * (p.data()[j] - target.data()[j]).abs();
                        }
                    }
                }
                total += acc / n.max(1.0);
            }
            Tensor::scalar(total)
        };
        Ok(self.push(
            out,
            Op::MaskedL1 {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                norms: norms.to_vec(),
            },
        ))
    }

    /// `-log softmax(logits)[label]` for a flat logit vector.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let out = {
            let l = self.value(logits);
            if label >= l.len() {
                return Err(Error::Contract(format!(
                    "label {label} outside {} classes",
                    l.len()
                )));
            }
            Tensor::scalar(log_sum_exp(l.data()) - l.data()[label])
        };
        Ok(self.push(out, Op::CrossEntropy { logits, label }))
    }

    /// Run reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                // Interior gradients are dropped once propagated; leaves keep theirs.
                Op::Leaf => grads[id] = Some(g),
                Op::Const => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(val(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.map(|x| x * c)),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), s)?);
                }
                Op::Reshape(a) => accumulate(&mut grads[a.0], g.reshape(val(*a).shape())?),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut ga);
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut gb);
                    accumulate(&mut grads[a.0], Tensor::new(av.shape(), ga)?);
                    accumulate(&mut grads[b.0], Tensor::new(bv.shape(), gb)?);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], kernels::transpose(&g)?),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.shape()[1];
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(y.shape(), gx)?);
                }
                Op::Conv { x, w, geom, batch } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let need_dx = !matches!(nodes[x.0].op, Op::Const);
                    let (dx, dw) = geom.backward(xv.data(), wv.data(), g.data(), *batch, need_dx);
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape(), dw)?);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape(), dx)?);
                    }
                }
                Op::BiasAdd {
                    x,
                    bias,
                    outer,
                    inner,
                } => {
                    let bv = val(*bias);
                    let width = bv.len();
                    let mut gb = vec![0.0; width];
                    for o in 0..*outer {
                        for (c, slot) in gb.iter_mut().enumerate() {
                            let s = (o * width + c) * inner;
                            *slot += g.data()[s..s + inner].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads[bias.0], Tensor::new(bv.shape(), gb)?);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Relu(a) => {
                    let gx = g.zip_map(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads[a.0], gx);
                }
                Op::Sigmoid(a) => {
                    let gx = g.zip_map(&node.value, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
                    accumulate(&mut grads[a.0], gx);
                }
                Op::Concat {
                    parts,
                    outer,
                    widths,
                } => {
                    let total: usize = widths.iter().sum();
                    let inner = g.len() / (outer * total);
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        let mut data = Vec::with_capacity(outer * w * inner);
                        for o in 0..*outer {
                            let s = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[s..s + w * inner]);
                        }
                        offset += w;
                        accumulate(&mut grads[p.0], Tensor::new(val(p).shape(), data)?);
                    }
                }
                Op::Slice {
                    x,
                    outer,
                    src_width,
                    start,
                } => {
                    let xv = val(*x);
                    let len = node.value.len() / outer;
                    let inner = xv.len() / (outer * src_width);
                    let len_axis = len / inner;
                    let mut data = vec![0.0; xv.len()];
                    for o in 0..*outer {
                        let d = (o * src_width + start) * inner;
                        data[d..d + len_axis * inner]
                            .copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape(), data)?);
                }
                Op::Swap01(a) => accumulate(&mut grads[a.0], g.swap01()?),
                Op::MeanTrailing { x, groups } => {
                    let xv = val(*x);
                    let width = xv.len() / groups;
                    let mut data = Vec::with_capacity(xv.len());
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv / width as f64, width));
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape(), data)?);
                }
                Op::Focal {
                    pred,
                    gt,
                    norms,
                    alpha,
                    beta,
                } => {
                    let pv = val(*pred);
                    let up = g.data()[0];
                    let group = pv.len() / norms.len();
                    let mut data = vec![0.0; pv.len()];
                    for (i, &n) in norms.iter().enumerate() {
                        let s = -up / n.max(1.0);
                        for j in i * group..(i + 1) * group {
                            data[j] = s * focal_term_grad(pv.data()[j], gt.data()[j], *alpha, *beta);
                        }
                    }
                    accumulate(&mut grads[pred.0], Tensor::new(pv.shape(), data)?);
                }
                Op::MaskedL1 {
                    pred,
                    target,
                    mask,
                    norms,
                } => {
                    let pv = val(*pred);
                    let up = g.data()[0];
                    let (item, spatial) = masked_layout(pv.len(), mask.len(), norms.len())?;
                    let mut data = vec![0.0; pv.len()];
                    for (i, &n) in norms.iter().enumerate() {
                        let s = up / n.max(1.0);
                        for c in 0..item / spatial {
                            for sp in 0..spatial {
                                let m = mask.data()[i * spatial + sp];
                                let j = i * item + c * spatial + sp;
                                let d = pv.data()[j] - target.data()[j];
                                if m != 0.0 && d != 0.0 {
                                    data[j] = s * m * d.signum();
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[pred.0], Tensor::new(pv.shape(), data)?);
                }
                Op::CrossEntropy { logits, label } => {
                    let lv = val(*logits);
                    let mut probs = lv.data().to_vec();
                    kernels::softmax_in_place(&mut probs);
                    probs[*label] -= 1.0;
                    let up = g.data()[0];
                    let data = probs.iter().map(|p| p * up).collect();
                    accumulate(&mut grads[logits.0], Tensor::new(lv.shape(), data)?);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn group_len(len: usize, groups: usize, op: &'static str) -> Result<usize> {
    if groups == 0 || len % groups != 0 {
        return Err(Error::dim(
            op,
            format!("{len} values cannot be split into {groups} groups"),
        ));
    }
    Ok(len / groups)
}

fn masked_layout(pred_len: usize, mask_len: usize, items: usize) -> Result<(usize, usize)> {
    let item = group_len(pred_len, items, "masked_l1")?;
    let spatial = group_len(mask_len, items, "masked_l1")?;
    if item % spatial != 0 {
        return Err(Error::dim(
            "masked_l1",
            format!("mask of {mask_len} values does not tile prediction of {pred_len}"),
        ));
    }
    Ok((item, spatial))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-pixel focal term before the leading minus sign and normalisation.
pub fn focal_term(pred: f64, gt: f64, alpha: f64, beta: f64) -> f64 {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if gt == 1.0 {
        (1.0 - p).powf(alpha) * p.ln()
    } else {
        (1.0 - gt).powf(beta) * p.powf(alpha) * (1.0 - p).ln()
    }
}

fn focal_term_grad(pred: f64, gt: f64, alpha: f64, beta: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pred) {
        return 0.0;
    }
    let p = pred;
    if gt == 1.0 {
        -alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() + (1.0 - p).powf(alpha) / p
    } else {
        (1.0 - gt).powf(beta)
            * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
    }
}
