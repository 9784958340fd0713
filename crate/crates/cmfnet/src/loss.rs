//! Evaluation metrics (PSNR, SSIM, YCbCr luma protocol) and the training
//! losses: the PSNR/SSIM-derived PS loss, the Laplacian edge loss, and their
//! weighted total.
//!
//! Metrics run in f64 through the same tensor code path used by the
//! differentiable f32 losses, so one SSIM implementation serves both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// MSE floor keeping PSNR finite when the images coincide; floored PSNR at
/// peak 1 is exactly 120 dB.
pub const MSE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Ps,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::Ps => "ps",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "ps" => Ok(LossKind::Ps),
            other => Err(Error::InvalidArgument(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Single-scale SSIM settings: 11×11 Gaussian window (σ = 1.5), stabilizers
/// C1 = (k1·L)², C2 = (k2·L)² with dynamic range L.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the edge term in the total loss.
    pub alpha: f64,
    /// PSNR denominator stabilizer in the PS loss.
    pub omega: f64,
    /// Charbonnier constant of the edge loss.
    pub epsilon: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ps,
            alpha: 0.05,
            omega: 0.005,
            epsilon: 1e-3,
            ssim: SsimConfig::default(),
        }
    }
}

fn check_same_shape<E: Element>(x: &Tensor<E>, y: &Tensor<E>, op: &'static str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Depthwise fixed-filter convolution: one k×k tap per channel, encoded as a
/// block-diagonal kernel that does not track gradients.
fn depthwise_fixed<E: Element>(x: &Tensor<E>, tap: &[f64], k: usize, padding: usize) -> Result<Tensor<E>> {
    let (_, c, _, _) = x.dims4()?;
    let mut kernel = vec![E::zero(); c * c * k * k];
    for ci in 0..c {
        for (i, &v) in tap.iter().enumerate() {
            kernel[(ci * c + ci) * k * k + i] = E::from_f64(v);
        }
    }
    let kernel = Tensor::from_vec(&[c, c, k, k], kernel)?;
    let bias = Tensor::zeros(&[c]);
    x.conv2d(&kernel, &bias, 1, padding)
}

/// Normalized 2-D Gaussian window, row-major, sums to 1.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - center;
            let x = (i % size) as f64 - center;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Differentiable single-scale SSIM between two B×C×H×W tensors (C = 1 or 3),
/// returned as a scalar tensor. Local statistics use the Gaussian window with
/// valid (unpadded) support; per-channel maps are averaged.
pub fn ssim_tensor<E: Element>(x: &Tensor<E>, y: &Tensor<E>, cfg: &SsimConfig) -> Result<Tensor<E>> {
    check_same_shape(x, y, "ssim")?;
    let (_, c, h, w) = x.dims4()?;
    if c != 1 && c != 3 {
        return Err(Error::shape("ssim", format!("expected 1 or 3 channels, got {c}")));
    }
    if h < cfg.window || w < cfg.window {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{w} smaller than the {}x{} window", cfg.window, cfg.window),
        ));
    }
    let win = gaussian_window(cfg.window, cfg.sigma);
    let blur = |t: &Tensor<E>| depthwise_fixed(t, &win, cfg.window, 0);

    let c1 = E::from_f64((cfg.k1 * cfg.peak).powi(2));
    let c2 = E::from_f64((cfg.k2 * cfg.peak).powi(2));
    let two = E::from_f64(2.0);

    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = mu_x.mul(&mu_x)?;
    let mu_yy = mu_y.mul(&mu_y)?;
    let mu_xy = mu_x.mul(&mu_y)?;
    let sigma_x = blur(&x.mul(x)?)?.sub(&mu_xx)?;
    let sigma_y = blur(&y.mul(y)?)?.sub(&mu_yy)?;
    let sigma_xy = blur(&x.mul(y)?)?.sub(&mu_xy)?;

    let numer = mu_xy.scale(two).add_scalar(c1).mul(&sigma_xy.scale(two).add_scalar(c2))?;
    let denom = mu_xx.add(&mu_yy)?.add_scalar(c1).mul(&sigma_x.add(&sigma_y)?.add_scalar(c2))?;
    Ok(numer.div(&denom)?.mean())
}

/// SSIM index as an evaluation metric, computed in f64.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_tensor::<f64>(&x.cast(), &y.cast(), cfg)?.item())
}

/// PSNR in dB over all elements, with the MSE floored at 1e-12.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>, peak: f64) -> Result<f64> {
    check_same_shape(x, y, "psnr")?;
    if peak <= 0.0 {
        return Err(Error::InvalidArgument("psnr: peak must be positive".into()));
    }
    let n = x.numel() as f64;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(10.0 * (peak * peak / mse.max(MSE_FLOOR)).log10())
}

/// PSNR at peak 1 as a differentiable scalar tensor.
pub fn psnr_tensor<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(x, y, "psnr")?;
    let diff = x.sub(y)?;
    let mse = diff.mul(&diff)?.mean().clamp_min(E::from_f64(MSE_FLOOR));
    // 10·log10(1/mse) = −10/ln(10) · ln(mse)
    Ok(mse.ln().scale(E::from_f64(-10.0 / std::f64::consts::LN_10)))
}

/// PS loss value from already-computed parts: (1 − ssim)/(psnr + ω).
pub fn ps_value(ssim: f64, psnr_db: f64, omega: f64) -> f64 {
    (1.0 - ssim) / (psnr_db + omega)
}

/// L_ps = (1 − SSIM(X,Y)) / (PSNR(X,Y) + ω), differentiable and ≥ 0; zero
/// exactly when SSIM = 1. The floored PSNR keeps the denominator finite.
pub fn ps_loss<E: Element>(x: &Tensor<E>, y: &Tensor<E>, cfg: &LossConfig) -> Result<Tensor<E>> {
    let s = ssim_tensor(x, y, &cfg.ssim)?;
    let numer = s.neg().add_scalar(E::one());
    let denom = psnr_tensor(x, y)?.add_scalar(E::from_f64(cfg.omega));
    numer.div(&denom)
}

/// Per-channel 3×3 Laplacian with zero padding. The kernel sums to zero, so
/// constant images map to zero away from the one-pixel border (the border
/// rows see the zero padding and keep nonzero values).
pub fn laplacian<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    const TAP: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    depthwise_fixed(x, &TAP, 3, 1)
}

/// L_edge = sqrt(mean((ΔX − ΔY)²) + ε²), a Charbonnier penalty on Laplacian
/// differences. Mean reduction keeps the scale independent of image size;
/// the value is always ≥ ε with equality iff the Laplacians agree.
pub fn edge_loss<E: Element>(x: &Tensor<E>, y: &Tensor<E>, cfg: &LossConfig) -> Result<Tensor<E>> {
    check_same_shape(x, y, "edge_loss")?;
    let d = laplacian(x)?.sub(&laplacian(y)?)?;
    let eps = E::from_f64(cfg.epsilon);
    Ok(d.mul(&d)?.mean().add_scalar(eps * eps).sqrt())
}

/// Loss components: the fidelity term (PS or L1) and the weighted edge term.
#[derive(Debug, Clone)]
pub struct LossTerms<E: Element> {
    pub total: Tensor<E>,
    pub fidelity: Tensor<E>,
    pub edge: Tensor<E>,
}

/// L_total = fidelity + α·L_edge, with fidelity selected by `cfg.kind`:
/// the PS loss, or mean absolute error for the L1 ablation (the edge term is
/// kept in both so the loss axis toggles exactly one factor).
pub fn total_loss<E: Element>(x: &Tensor<E>, y: &Tensor<E>, cfg: &LossConfig) -> Result<LossTerms<E>> {
    let fidelity = match cfg.kind {
        LossKind::Ps => ps_loss(x, y, cfg)?,
        LossKind::L1 => x.sub(y)?.abs().mean(),
    };
    let edge = edge_loss(x, y, cfg)?;
    let total = fidelity.add(&edge.scale(E::from_f64(cfg.alpha)))?;
    Ok(LossTerms { total, fidelity, edge })
}

/// ITU-R BT.601 full-range RGB → YCbCr. Input values are expected in [0,1];
/// Y lands in [0,1] and the chroma planes are offset by 0.5.
pub fn rgb_to_ycbcr(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape("rgb_to_ycbcr", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = x.data();
    let mut out = vec![0.0f32; d.len()];
    for bi in 0..b {
        let base = bi * 3 * plane;
        for i in 0..plane {
            let r = d[base + i];
            let g = d[base + plane + i];
            let bl = d[base + 2 * plane + i];
            let y = 0.299 * r + 0.587 * g + 0.114 * bl;
            out[base + i] = y;
            out[base + plane + i] = 0.5 - 0.168_735_9 * r - 0.331_264_1 * g + 0.5 * bl;
            out[base + 2 * plane + i] = 0.5 + 0.5 * r - 0.418_687_6 * g - 0.081_312_4 * bl;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalProtocol {
    /// Metrics over all RGB channels.
    Rgb,
    /// Metrics over the BT.601 luma channel only.
    YLuma,
}

impl FromStr for EvalProtocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(EvalProtocol::Rgb),
            "yluma" | "y" => Ok(EvalProtocol::YLuma),
            other => Err(Error::InvalidArgument(format!("unknown eval protocol '{other}'"))),
        }
    }
}

fn clamp01(x: &Tensor<f32>) -> Tensor<f32> {
    let data = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// PSNR (dB) and SSIM of `pred` against `gt` under the given protocol.
/// Both images are clamped to [0,1] first.
pub fn evaluate_pair(pred: &Tensor<f32>, gt: &Tensor<f32>, protocol: EvalProtocol) -> Result<(f64, f64)> {
    check_same_shape(pred, gt, "evaluate_pair")?;
    let (pred, gt) = (clamp01(pred), clamp01(gt));
    let (pred, gt) = match protocol {
        EvalProtocol::Rgb => (pred, gt),
        EvalProtocol::YLuma => (
            rgb_to_ycbcr(&pred)?.slice_channels(0, 1)?.detach(),
            rgb_to_ycbcr(&gt)?.slice_channels(0, 1)?.detach(),
        ),
    };
    Ok((psnr(&pred, &gt, 1.0)?, ssim(&pred, &gt, &SsimConfig::default())?))
}
