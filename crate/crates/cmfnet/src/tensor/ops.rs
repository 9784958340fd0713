//! Forward operations and their backward rules.

use super::conv;
use super::pool;
use super::{Element, Op, OpKind, Tensor};
use crate::error::{Error, Result};

// ── broadcasting helpers ─────────────────────────────────────────────

/// Dimension of `shape` at position `i` of a rank-`rank` view, left-padding
/// with 1s (numpy semantics).
fn dim_at(shape: &[usize], rank: usize, i: usize) -> usize {
    let off = rank - shape.len();
    if i < off {
        1
    } else {
        shape[i - off]
    }
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    (0..rank)
        .map(|i| {
            let (da, db) = (dim_at(a, rank, i), dim_at(b, rank, i));
            if da == db || db == 1 {
                Ok(da)
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", a, b)))
            }
        })
        .collect()
}

/// Materialize `data` (of shape `shape`) broadcast to `out_shape`.
fn expand<E: Element>(data: &[E], shape: &[usize], out_shape: &[usize]) -> Vec<E> {
    if shape == out_shape {
        return data.to_vec();
    }
    if data.len() == 1 {
        return vec![data[0]; out_shape.iter().product()];
    }
    let rank = out_shape.len();
    let mut strides = vec![0isize; rank];
    let mut acc = 1isize;
    for i in (0..rank).rev() {
        let d = dim_at(shape, rank, i);
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d as isize;
    }
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0isize;
    for _ in 0..n {
        out.push(data[src as usize]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax] as isize;
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `grad` (laid out as `from`) down to `to`, summing over broadcast axes.
fn reduce_to_shape<E: Element>(grad: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return grad.to_vec();
    }
    let to_numel: usize = to.iter().product();
    if to_numel == 1 {
        let s = grad.iter().copied().fold(E::zero(), |a, b| a + b);
        return vec![s];
    }
    let rank = from.len();
    let mut strides = vec![0isize; rank];
    let mut acc = 1isize;
    for i in (0..rank).rev() {
        let d = dim_at(to, rank, i);
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d as isize;
    }
    let mut out = vec![E::zero(); to_numel];
    let mut idx = vec![0usize; rank];
    let mut dst = 0isize;
    for &g in grad {
        out[dst as usize] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            dst += strides[ax];
            if idx[ax] < from[ax] {
                break;
            }
            dst -= strides[ax] * from[ax] as isize;
            idx[ax] = 0;
        }
    }
    out
}

fn ew_binary<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: &'static str,
    kind: OpKind<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else if a.numel() == 1 {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let xa = expand(a.data(), a.shape(), &out_shape);
        let xb = expand(b.data(), b.shape(), &out_shape);
        xa.iter().zip(&xb).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok(Tensor::from_op(out_shape, data, kind, vec![a.clone(), b.clone()]))
}

fn ew_unary<E: Element>(x: &Tensor<E>, kind: OpKind<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, kind, vec![x.clone()])
}

// ── public operations ────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        ew_binary(self, other, "add", OpKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        ew_binary(self, other, "sub", OpKind::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        ew_binary(self, other, "mul", OpKind::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        ew_binary(self, other, "div", OpKind::Div, |a, b| a / b)
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        ew_unary(self, OpKind::Scale(c), |v| v * c)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-E::one())
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        ew_unary(self, OpKind::AddScalar, |v| v + c)
    }

    pub fn relu(&self) -> Tensor<E> {
        ew_unary(self, OpKind::Relu, |v| if v > E::zero() { v } else { E::zero() })
    }

    /// Elementwise logistic function, 1/(1+exp(−x)).
    pub fn sigmoid(&self) -> Tensor<E> {
        ew_unary(self, OpKind::Sigmoid, |v| E::one() / (E::one() + (-v).exp()))
    }

    pub fn sqrt(&self) -> Tensor<E> {
        ew_unary(self, OpKind::Sqrt, |v| v.sqrt())
    }

    pub fn ln(&self) -> Tensor<E> {
        ew_unary(self, OpKind::Ln, |v| v.ln())
    }

    pub fn abs(&self) -> Tensor<E> {
        ew_unary(self, OpKind::Abs, |v| v.abs())
    }

    /// max(x, c); the gradient passes only where x > c.
    pub fn clamp_min(&self, c: E) -> Tensor<E> {
        ew_unary(self, OpKind::ClampMin(c), |v| if v > c { v } else { c })
    }

    /// Parametric ReLU. `slope` is either a scalar or one value per channel of
    /// a B×C×H×W input. The subgradient at exactly 0 takes the positive
    /// branch (derivative 1).
    pub fn prelu(&self, slope: &Tensor<E>) -> Result<Tensor<E>> {
        let per_channel = if slope.numel() == 1 {
            false
        } else {
            let (_, c, _, _) = self.dims4().map_err(|_| {
                Error::shape("prelu", "per-channel slope requires a rank-4 input".to_string())
            })?;
            if slope.numel() != c {
                return Err(Error::shape(
                    "prelu",
                    format!("slope has {} entries for {} channels", slope.numel(), c),
                ));
            }
            true
        };
        let s = slope.data();
        let data: Vec<E> = if per_channel {
            let (b, c, h, w) = self.dims4()?;
            let plane = h * w;
            let mut out = Vec::with_capacity(self.numel());
            for bi in 0..b {
                let _ = bi;
                for (ci, &sc) in s.iter().enumerate().take(c) {
                    let base = (bi * c + ci) * plane;
                    for &v in &self.data()[base..base + plane] {
                        out.push(if v >= E::zero() { v } else { sc * v });
                    }
                }
            }
            out
        } else {
            let sc = s[0];
            self.data()
                .iter()
                .map(|&v| if v >= E::zero() { v } else { sc * v })
                .collect()
        };
        Ok(Tensor::from_op(self.shape().to_vec(), data, OpKind::Prelu, vec![self.clone(), slope.clone()]))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<E> {
        let s = self.data().iter().copied().fold(E::zero(), |a, b| a + b);
        Tensor::from_op(vec![1], vec![s], OpKind::Sum, vec![self.clone()])
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_usize(self.numel());
        let s = self.data().iter().copied().fold(E::zero(), |a, b| a + b);
        Tensor::from_op(vec![1], vec![s / n], OpKind::Mean, vec![self.clone()])
    }

    /// Channel-axis concatenation of B×Ci×H×W tensors, in argument order.
    pub fn concat_channels(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels: empty input list".into()))?;
        let (b, _, h, w) = first.dims4()?;
        let mut c_total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not spatially match {:?}", p.shape(), first.shape()),
                ));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape()[1];
                let base = bi * pc * plane;
                data.extend_from_slice(&p.data()[base..base + pc * plane]);
            }
        }
        Ok(Tensor::from_op(
            vec![b, c_total, h, w],
            data,
            OpKind::ConcatChannels,
            parts.to_vec(),
        ))
    }

    /// Channels [start, start+len) of a B×C×H×W tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) out of {} channels", start + len, c),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&self.data()[base..base + len * plane]);
        }
        Ok(Tensor::from_op(
            vec![b, len, h, w],
            data,
            OpKind::SliceChannels { start },
            vec![self.clone()],
        ))
    }
}

// ── backward dispatch ────────────────────────────────────────────────

/// Propagate `gout` through one recorded op, handing each parent's gradient
/// contribution to `sink`. Parents that cannot receive gradients are skipped.
pub(crate) fn backprop<E: Element>(
    node: &Tensor<E>,
    op: &Op<E>,
    gout: &[E],
    sink: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    let p = &op.parents;
    match &op.kind {
        OpKind::Add => {
            for t in p {
                if t.needs_grad() {
                    sink(t, reduce_to_shape(gout, node.shape(), t.shape()));
                }
            }
        }
        OpKind::Sub => {
            if p[0].needs_grad() {
                sink(&p[0], reduce_to_shape(gout, node.shape(), p[0].shape()));
            }
            if p[1].needs_grad() {
                let neg: Vec<E> = gout.iter().map(|&g| -g).collect();
                sink(&p[1], reduce_to_shape(&neg, node.shape(), p[1].shape()));
            }
        }
        OpKind::Mul => {
            if p[0].needs_grad() {
                let b = expand(p[1].data(), p[1].shape(), node.shape());
                let ga: Vec<E> = gout.iter().zip(&b).map(|(&g, &v)| g * v).collect();
                sink(&p[0], reduce_to_shape(&ga, node.shape(), p[0].shape()));
            }
            if p[1].needs_grad() {
                let a = expand(p[0].data(), p[0].shape(), node.shape());
                let gb: Vec<E> = gout.iter().zip(&a).map(|(&g, &v)| g * v).collect();
                sink(&p[1], reduce_to_shape(&gb, node.shape(), p[1].shape()));
            }
        }
        OpKind::Div => {
            let b = expand(p[1].data(), p[1].shape(), node.shape());
            if p[0].needs_grad() {
                let ga: Vec<E> = gout.iter().zip(&b).map(|(&g, &v)| g / v).collect();
                sink(&p[0], reduce_to_shape(&ga, node.shape(), p[0].shape()));
            }
            if p[1].needs_grad() {
                let a = expand(p[0].data(), p[0].shape(), node.shape());
                let gb: Vec<E> = gout
                    .iter()
                    .zip(&a)
                    .zip(&b)
                    .map(|((&g, &av), &bv)| -g * av / (bv * bv))
                    .collect();
                sink(&p[1], reduce_to_shape(&gb, node.shape(), p[1].shape()));
            }
        }
        OpKind::Scale(c) => {
            if p[0].needs_grad() {
                sink(&p[0], gout.iter().map(|&g| g * *c).collect());
            }
        }
        OpKind::AddScalar => {
            if p[0].needs_grad() {
                sink(&p[0], gout.to_vec());
            }
        }
        OpKind::Relu => {
            if p[0].needs_grad() {
                let g = p[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > E::zero() { g } else { E::zero() })
                    .collect();
                sink(&p[0], g);
            }
        }
        OpKind::Sigmoid => {
            if p[0].needs_grad() {
                let g = node
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * y * (E::one() - y))
                    .collect();
                sink(&p[0], g);
            }
        }
        OpKind::Sqrt => {
            if p[0].needs_grad() {
                let half = E::from_f64(0.5);
                let g = node.data().iter().zip(gout).map(|(&y, &g)| g * half / y).collect();
                sink(&p[0], g);
            }
        }
        OpKind::Ln => {
            if p[0].needs_grad() {
                let g = p[0].data().iter().zip(gout).map(|(&x, &g)| g / x).collect();
                sink(&p[0], g);
            }
        }
        OpKind::Abs => {
            if p[0].needs_grad() {
                let g = p[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| {
                        if x > E::zero() {
                            g
                        } else if x < E::zero() {
                            -g
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                sink(&p[0], g);
            }
        }
        OpKind::ClampMin(c) => {
            if p[0].needs_grad() {
                let g = p[0]
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > *c { g } else { E::zero() })
                    .collect();
                sink(&p[0], g);
            }
        }
        OpKind::Prelu => {
            let x = p[0].data();
            let s = p[1].data();
            let per_channel = s.len() > 1;
            let (b, c, h, w) = if per_channel { p[0].dims4().unwrap() } else { (0, 0, 0, 0) };
            if p[0].needs_grad() {
                let g: Vec<E> = if per_channel {
                    let plane = h * w;
                    let mut out = Vec::with_capacity(x.len());
                    for bi in 0..b {
                        for (ci, &sc) in s.iter().enumerate().take(c) {
                            let base = (bi * c + ci) * plane;
                            for i in base..base + plane {
                                out.push(if x[i] >= E::zero() { gout[i] } else { gout[i] * sc });
                            }
                        }
                    }
                    out
                } else {
                    let sc = s[0];
                    x.iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v >= E::zero() { g } else { g * sc })
                        .collect()
                };
                sink(&p[0], g);
            }
            if p[1].needs_grad() {
                let g: Vec<E> = if per_channel {
                    let plane = h * w;
                    let mut out = vec![E::zero(); c];
                    for bi in 0..b {
                        for (ci, slot) in out.iter_mut().enumerate() {
                            let base = (bi * c + ci) * plane;
                            for i in base..base + plane {
                                if x[i] < E::zero() {
                                    *slot += gout[i] * x[i];
                                }
                            }
                        }
                    }
                    out
                } else {
                    let mut acc = E::zero();
                    for (&v, &g) in x.iter().zip(gout) {
                        if v < E::zero() {
                            acc += g * v;
                        }
                    }
                    vec![acc]
                };
                sink(&p[1], g);
            }
        }
        OpKind::Conv2d { stride, padding } => {
            conv::backprop_conv2d(node, p, gout, *stride, *padding, sink);
        }
        OpKind::AvgPool2
        | OpKind::UpBilinear2
        | OpKind::GlobalAvgPool
        | OpKind::GlobalMaxPool { .. }
        | OpKind::ChannelMean
        | OpKind::ChannelMax { .. } => {
            pool::backprop_pool(node, op, gout, sink);
        }
        OpKind::ConcatChannels => {
            let (b, _, h, w) = node.dims4().unwrap();
            let plane = h * w;
            let mut offset = 0;
            let c_total = node.shape()[1];
            for t in p {
                let pc = t.shape()[1];
                if t.needs_grad() {
                    let mut g = Vec::with_capacity(b * pc * plane);
                    for bi in 0..b {
                        let base = (bi * c_total + offset) * plane;
                        g.extend_from_slice(&gout[base..base + pc * plane]);
                    }
                    sink(t, g);
                }
                offset += pc;
            }
        }
        OpKind::SliceChannels { start } => {
            if p[0].needs_grad() {
                let (b, c, h, w) = p[0].dims4().unwrap();
                let len = node.shape()[1];
                let plane = h * w;
                let mut g = vec![E::zero(); p[0].numel()];
                for bi in 0..b {
                    let src = bi * len * plane;
                    let dst = (bi * c + start) * plane;
                    g[dst..dst + len * plane].copy_from_slice(&gout[src..src + len * plane]);
                }
                sink(&p[0], g);
            }
        }
        OpKind::Sum => {
            if p[0].needs_grad() {
                sink(&p[0], vec![gout[0]; p[0].numel()]);
            }
        }
        OpKind::Mean => {
            if p[0].needs_grad() {
                let g = gout[0] / E::from_usize(p[0].numel());
                sink(&p[0], vec![g; p[0].numel()]);
            }
        }
    }
}
