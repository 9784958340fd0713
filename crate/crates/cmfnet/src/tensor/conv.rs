//! 2-D convolution via im2col + gemm, with backward rules.
//!
//! Work is split over fixed-size spatial chunks so results are bit-identical
//! for any rayon thread count: every output element is produced by exactly
//! one gemm call with a fixed accumulation order.

use rayon::prelude::*;

use super::{Element, OpKind, Tensor};
use crate::error::{Error, Result};

/// Output columns handled per gemm task.
const SPATIAL_CHUNK: usize = 1024;
/// Below this many multiply-accumulates the parallel split is not worth it.
const PAR_THRESHOLD: usize = 65_536;

#[derive(Clone, Copy, Debug)]
struct Geom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    h2: usize,
    w2: usize,
}

impl Geom {
    fn npos(&self) -> usize {
        self.h2 * self.w2
    }
    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = (size + 2 * pad).checked_sub(k).ok_or_else(|| {
        Error::shape("conv2d", format!("kernel {k} larger than padded input {}", size + 2 * pad))
    })?;
    if span % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input {size} with kernel {k}, stride {stride}, padding {pad} does not tile"),
        ));
    }
    Ok(span / stride + 1)
}

struct SendPtr<E>(*mut E);
unsafe impl<E> Send for SendPtr<E> {}
unsafe impl<E> Sync for SendPtr<E> {}

impl<E> SendPtr<E> {
    fn get(&self) -> *mut E {
        self.0
    }
}

/// Gather the im2col block for output columns [c0, c1) of batch item `bi`.
/// Layout: row r = (ci·kh + u)·kw + v, one row per kernel tap, `c1-c0` wide.
fn im2col<E: Element>(x: &[E], g: &Geom, bi: usize, c0: usize, c1: usize, col: &mut [E]) {
    let nc = c1 - c0;
    let (w2, stride) = (g.w2, g.stride);
    for ci in 0..g.cin {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((ci * g.kh + u) * g.kw + v) * nc;
                let dst = &mut col[row..row + nc];
                let mut j = 0;
                let mut p = c0;
                while p < c1 {
                    let oy = p / w2;
                    let ox0 = p % w2;
                    let span = (w2 - ox0).min(c1 - p);
                    let iy = (oy * stride + u) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst[j..j + span].fill(E::zero());
                    } else {
                        let src_row = ((bi * g.cin + ci) * g.h + iy as usize) * g.w;
                        if stride == 1 {
                            let ix0 = ox0 as isize + v as isize - g.pad_w as isize;
                            let lo = (-ix0).max(0).min(span as isize) as usize;
                            let hi = (g.w as isize - ix0).max(0).min(span as isize) as usize;
                            dst[j..j + lo].fill(E::zero());
                            if hi > lo {
                                let src = (ix0 + lo as isize) as usize;
                                dst[j + lo..j + hi]
                                    .copy_from_slice(&x[src_row + src..src_row + src + (hi - lo)]);
                            }
                            dst[j + hi..j + span].fill(E::zero());
                        } else {
                            for (s, slot) in dst[j..j + span].iter_mut().enumerate() {
                                let ix = ((ox0 + s) * stride + v) as isize - g.pad_w as isize;
                                *slot = if ix >= 0 && ix < g.w as isize {
                                    x[src_row + ix as usize]
                                } else {
                                    E::zero()
                                };
                            }
                        }
                    }
                    j += span;
                    p += span;
                }
            }
        }
    }
}

fn chunk_tasks(g: &Geom) -> Vec<(usize, usize, usize)> {
    let npos = g.npos();
    let mut tasks = Vec::new();
    for bi in 0..g.b {
        let mut c0 = 0;
        while c0 < npos {
            let c1 = (c0 + SPATIAL_CHUNK).min(npos);
            tasks.push((bi, c0, c1));
            c0 = c1;
        }
    }
    tasks
}

fn forward_raw<E: Element>(x: &[E], weight: &[E], bias: Option<&[E]>, g: &Geom) -> Vec<E> {
    let npos = g.npos();
    let kdim = g.kdim();
    let mut out = vec![E::zero(); g.b * g.cout * npos];
    let tasks = chunk_tasks(g);
    let optr = SendPtr(out.as_mut_ptr());

    let run = |&(bi, c0, c1): &(usize, usize, usize)| {
        let nc = c1 - c0;
        let mut col = vec![E::zero(); kdim * nc];
        im2col(x, g, bi, c0, c1, &mut col);
        // out[bi, :, c0..c1] = weight[cout × kdim] · col[kdim × nc]
        unsafe {
            E::gemm(
                g.cout,
                kdim,
                nc,
                E::one(),
                weight.as_ptr(),
                kdim as isize,
                1,
                col.as_ptr(),
                nc as isize,
                1,
                E::zero(),
                optr.get().add(bi * g.cout * npos + c0),
                npos as isize,
                1,
            );
        }
    };
    if tasks.len() > 1 && g.b * g.cout * npos * kdim >= PAR_THRESHOLD {
        tasks.par_iter().for_each(run);
    } else {
        tasks.iter().for_each(run);
    }

    if let Some(bias) = bias {
        for bi in 0..g.b {
            for (co, &bv) in bias.iter().enumerate() {
                let base = (bi * g.cout + co) * npos;
                for o in &mut out[base..base + npos] {
                    *o += bv;
                }
            }
        }
    }
    out
}

/// d(loss)/d(input): convolve the (zero-stuffed, for stride > 1) output
/// gradient with the 180°-rotated kernel, in/out channels swapped.
fn grad_input_raw<E: Element>(gout: &[E], weight: &[E], g: &Geom) -> Vec<E> {
    let mut wt = vec![E::zero(); g.kdim() * g.cout];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for u in 0..g.kh {
                for v in 0..g.kw {
                    wt[((ci * g.cout + co) * g.kh + (g.kh - 1 - u)) * g.kw + (g.kw - 1 - v)] =
                        weight[((co * g.cin + ci) * g.kh + u) * g.kw + v];
                }
            }
        }
    }
    let (gdata, gh, gw);
    if g.stride == 1 {
        gdata = None;
        gh = g.h2;
        gw = g.w2;
    } else {
        gh = (g.h2 - 1) * g.stride + 1;
        gw = (g.w2 - 1) * g.stride + 1;
        let mut stuffed = vec![E::zero(); g.b * g.cout * gh * gw];
        for bi in 0..g.b {
            for co in 0..g.cout {
                for oy in 0..g.h2 {
                    for ox in 0..g.w2 {
                        stuffed[((bi * g.cout + co) * gh + oy * g.stride) * gw + ox * g.stride] =
                            gout[((bi * g.cout + co) * g.h2 + oy) * g.w2 + ox];
                    }
                }
            }
        }
        gdata = Some(stuffed);
    }
    let tg = Geom {
        b: g.b,
        cin: g.cout,
        h: gh,
        w: gw,
        cout: g.cin,
        kh: g.kh,
        kw: g.kw,
        stride: 1,
        pad_h: g.kh - 1 - g.pad_h,
        pad_w: g.kw - 1 - g.pad_w,
        h2: g.h,
        w2: g.w,
    };
    forward_raw(gdata.as_deref().unwrap_or(gout), &wt, None, &tg)
}

/// d(loss)/d(kernel): per-chunk partial products reduced in fixed order.
fn grad_kernel_raw<E: Element>(x: &[E], gout: &[E], g: &Geom) -> Vec<E> {
    let npos = g.npos();
    let kdim = g.kdim();
    let tasks = chunk_tasks(g);

    let run = |&(bi, c0, c1): &(usize, usize, usize)| -> Vec<E> {
        let nc = c1 - c0;
        let mut col = vec![E::zero(); kdim * nc];
        im2col(x, g, bi, c0, c1, &mut col);
        let mut partial = vec![E::zero(); g.cout * kdim];
        // partial = gout[bi, :, c0..c1] [cout × nc] · colᵀ [nc × kdim]
        unsafe {
            E::gemm(
                g.cout,
                nc,
                kdim,
                E::one(),
                gout.as_ptr().add(bi * g.cout * npos + c0),
                npos as isize,
                1,
                col.as_ptr(),
                1,
                nc as isize,
                E::zero(),
                partial.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        partial
    };
    let partials: Vec<Vec<E>> = if tasks.len() > 1 && g.b * g.cout * npos * kdim >= PAR_THRESHOLD {
        tasks.par_iter().map(run).collect()
    } else {
        tasks.iter().map(run).collect()
    };

    let mut dw = vec![E::zero(); g.cout * kdim];
    for partial in partials {
        for (d, v) in dw.iter_mut().zip(partial) {
            *d += v;
        }
    }
    dw
}

impl<E: Element> Tensor<E> {
    /// 2-D convolution with zero padding.
    ///
    /// `self` is B×Cin×H×W, `kernel` is Cout×Cin×kh×kw (odd kh, kw), `bias`
    /// is a length-Cout vector. Output is B×Cout×H'×W' with
    /// H' = (H + 2·padding − kh)/stride + 1.
    pub fn conv2d(&self, kernel: &Tensor<E>, bias: &Tensor<E>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        let (b, cin, h, w) = self.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if bias.numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {cout} output channels", bias.numel()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let h2 = out_dim(h, kh, stride, padding)?;
        let w2 = out_dim(w, kw, stride, padding)?;
        let g = Geom { b, cin, h, w, cout, kh, kw, stride, pad_h: padding, pad_w: padding, h2, w2 };
        let data = forward_raw(self.data(), kernel.data(), Some(bias.data()), &g);
        Ok(Tensor::from_op(
            vec![b, cout, h2, w2],
            data,
            OpKind::Conv2d { stride, padding },
            vec![self.clone(), kernel.clone(), bias.clone()],
        ))
    }
}

pub(crate) fn backprop_conv2d<E: Element>(
    node: &Tensor<E>,
    parents: &[Tensor<E>],
    gout: &[E],
    stride: usize,
    padding: usize,
    sink: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    let (x, kernel, bias) = (&parents[0], &parents[1], &parents[2]);
    let (b, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kh, kw) = kernel.dims4().unwrap();
    let (_, _, h2, w2) = node.dims4().unwrap();
    let g = Geom { b, cin, h, w, cout, kh, kw, stride, pad_h: padding, pad_w: padding, h2, w2 };

    if x.needs_grad() {
        sink(x, grad_input_raw(gout, kernel.data(), &g));
    }
    if kernel.needs_grad() {
        sink(kernel, grad_kernel_raw(x.data(), gout, &g));
    }
    if bias.needs_grad() {
        let npos = g.npos();
        let mut db = vec![E::zero(); cout];
        for bi in 0..b {
            for (co, slot) in db.iter_mut().enumerate() {
                let base = (bi * cout + co) * npos;
                for &gv in &gout[base..base + npos] {
                    *slot += gv;
                }
            }
        }
        sink(bias, db);
    }
}
