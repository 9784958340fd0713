//! Pooling, resampling, and per-axis reductions on B×C×H×W tensors.

use super::{Element, Op, OpKind, Tensor};
use crate::error::{Error, Result};

/// Per-axis sample table for a 2× bilinear upsample with half-pixel centers
/// (align_corners = false): output i samples source (i + 0.5)/2 − 0.5.
fn bilinear2x_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let i0f = src.floor();
            let t = src - i0f;
            let i0 = (i0f as isize).clamp(0, n as isize - 1) as usize;
            let i1 = ((i0f as isize + 1).clamp(0, n as isize - 1)) as usize;
            (i0, i1, t)
        })
        .collect()
}

impl<E: Element> Tensor<E> {
    /// 2×2 average pooling; halves both spatial dimensions.
    pub fn avg_pool2(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("spatial size {h}x{w} must be even")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let quarter = E::from_f64(0.25);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * h2 * w2);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..h2 {
                let r0 = base + (2 * oy) * w;
                let r1 = r0 + w;
                for ox in 0..w2 {
                    let i = 2 * ox;
                    out.push(((x[r0 + i] + x[r0 + i + 1]) + (x[r1 + i] + x[r1 + i + 1])) * quarter);
                }
            }
        }
        Ok(Tensor::from_op(vec![b, c, h2, w2], out, OpKind::AvgPool2, vec![self.clone()]))
    }

    /// 2× bilinear upsampling with half-pixel sample centers. Interpolation
    /// is written in lerp form `a + t·(b − a)` so constant inputs reproduce
    /// exactly.
    pub fn upsample_bilinear2x(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        let ytaps = bilinear2x_taps(h);
        let xtaps = bilinear2x_taps(w);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * 4 * h * w);
        let mut row = vec![E::zero(); w];
        for plane in 0..b * c {
            let base = plane * h * w;
            for &(y0, y1, ty) in &ytaps {
                let ty = E::from_f64(ty);
                let r0 = base + y0 * w;
                let r1 = base + y1 * w;
                for i in 0..w {
                    let a = x[r0 + i];
                    row[i] = a + ty * (x[r1 + i] - a);
                }
                for &(x0, x1, tx) in &xtaps {
                    let a = row[x0];
                    out.push(a + E::from_f64(tx) * (row[x1] - a));
                }
            }
        }
        Ok(Tensor::from_op(vec![b, c, 2 * h, 2 * w], out, OpKind::UpBilinear2, vec![self.clone()]))
    }

    /// Mean over each H×W plane, producing B×C×1×1.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        let n = E::from_usize(h * w);
        let x = self.data();
        let out = (0..b * c)
            .map(|plane| {
                let base = plane * h * w;
                x[base..base + h * w].iter().copied().fold(E::zero(), |a, v| a + v) / n
            })
            .collect();
        Ok(Tensor::from_op(vec![b, c, 1, 1], out, OpKind::GlobalAvgPool, vec![self.clone()]))
    }

    /// Maximum over each H×W plane, producing B×C×1×1. The gradient is routed
    /// to the first maximal element in row-major scan order.
    pub fn global_max_pool(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        let x = self.data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for plane in 0..b * c {
            let base = plane * h * w;
            let mut best = x[base];
            let mut best_i = base;
            for i in base + 1..base + h * w {
                if x[i] > best {
                    best = x[i];
                    best_i = i;
                }
            }
            out.push(best);
            argmax.push(best_i);
        }
        Ok(Tensor::from_op(
            vec![b, c, 1, 1],
            out,
            OpKind::GlobalMaxPool { argmax },
            vec![self.clone()],
        ))
    }

    /// Mean across channels, producing B×1×H×W.
    pub fn channel_mean(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        let plane = h * w;
        let n = E::from_usize(c);
        let x = self.data();
        let mut out = vec![E::zero(); b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    out[bi * plane + i] += x[base + i];
                }
            }
        }
        for v in &mut out {
            *v = *v / n;
        }
        Ok(Tensor::from_op(vec![b, 1, h, w], out, OpKind::ChannelMean, vec![self.clone()]))
    }

    /// Maximum across channels, producing B×1×H×W; first-channel tie-break.
    pub fn channel_max(&self) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.dims4()?;
        let plane = h * w;
        let x = self.data();
        let mut out = Vec::with_capacity(b * plane);
        let mut argmax = Vec::with_capacity(b * plane);
        for bi in 0..b {
            for i in 0..plane {
                let mut best = x[bi * c * plane + i];
                let mut best_c = 0usize;
                for ci in 1..c {
                    let v = x[(bi * c + ci) * plane + i];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out.push(best);
                argmax.push(best_c);
            }
        }
        Ok(Tensor::from_op(
            vec![b, 1, h, w],
            out,
            OpKind::ChannelMax { argmax },
            vec![self.clone()],
        ))
    }
}

pub(crate) fn backprop_pool<E: Element>(
    node: &Tensor<E>,
    op: &Op<E>,
    gout: &[E],
    sink: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    let src = &op.parents[0];
    if !src.needs_grad() {
        return;
    }
    let (b, c, h, w) = src.dims4().unwrap();
    match &op.kind {
        OpKind::AvgPool2 => {
            let (h2, w2) = (h / 2, w / 2);
            let quarter = E::from_f64(0.25);
            let mut g = Vec::with_capacity(src.numel());
            for plane in 0..b * c {
                let base = plane * h2 * w2;
                for y in 0..h {
                    for x in 0..w {
                        g.push(gout[base + (y / 2) * w2 + x / 2] * quarter);
                    }
                }
            }
            sink(src, g);
        }
        OpKind::UpBilinear2 => {
            // Transpose of the separable lerp: scatter columns, then rows.
            let ytaps = bilinear2x_taps(h);
            let xtaps = bilinear2x_taps(w);
            let mut g = vec![E::zero(); src.numel()];
            let mut rows = vec![E::zero(); 2 * h * w];
            for plane in 0..b * c {
                rows.fill(E::zero());
                let obase = plane * 4 * h * w;
                for oy in 0..2 * h {
                    let rbase = oy * w;
                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                        let gv = gout[obase + oy * 2 * w + ox];
                        let tx = E::from_f64(tx);
                        rows[rbase + x0] += gv * (E::one() - tx);
                        rows[rbase + x1] += gv * tx;
                    }
                }
                let ibase = plane * h * w;
                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                    let ty = E::from_f64(ty);
                    for i in 0..w {
                        let gv = rows[oy * w + i];
                        g[ibase + y0 * w + i] += gv * (E::one() - ty);
                        g[ibase + y1 * w + i] += gv * ty;
                    }
                }
            }
            sink(src, g);
        }
        OpKind::GlobalAvgPool => {
            let inv = E::one() / E::from_usize(h * w);
            let mut g = Vec::with_capacity(src.numel());
            for plane in 0..b * c {
                let gv = gout[plane] * inv;
                g.extend(std::iter::repeat_n(gv, h * w));
            }
            sink(src, g);
        }
        OpKind::GlobalMaxPool { argmax } => {
            let mut g = vec![E::zero(); src.numel()];
            for (plane, &i) in argmax.iter().enumerate() {
                g[i] += gout[plane];
            }
            sink(src, g);
        }
        OpKind::ChannelMean => {
            let plane = h * w;
            let inv = E::one() / E::from_usize(c);
            let mut g = Vec::with_capacity(src.numel());
            for bi in 0..b {
                for _ in 0..c {
                    for i in 0..plane {
                        g.push(gout[bi * plane + i] * inv);
                    }
                }
            }
            sink(src, g);
        }
        OpKind::ChannelMax { argmax } => {
            let plane = h * w;
            let mut g = vec![E::zero(); src.numel()];
            for bi in 0..b {
                for i in 0..plane {
                    let ci = argmax[bi * plane + i];
                    g[(bi * c + ci) * plane + i] += gout[bi * plane + i];
                }
            }
            sink(src, g);
        }
        _ => unreachable!("backprop_pool called with non-pool op"),
    }
    let _ = node;
}
