//! The full multi-branch restoration network.
//!
//! Per branch: a shallow conv/PReLU/conv stem, an attention U-Net, and a
//! residual attention module producing features F_b and an image I_b. The
//! branch images combine through the configured skip connection into I_R, and
//! the concatenated branch features pass through one 3×3 conv whose output is
//! added to I_R.

mod msc;
mod ram;
mod unet;

pub use msc::{asc_forward, mean_residual, msc_forward, msc_weights};
pub use ram::{ram_forward, RamOutput, RamParams};
pub use unet::{branch_unet_forward, UnetParams};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::nn::{key, Conv2dParams, PreluParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipVariant {
    /// No skip-connection module: branch images enter as their plain average.
    None,
    /// Fixed-weight average of the branch images.
    Asc,
    /// Learnable convex combination (requires all three branches).
    Msc,
}

impl fmt::Display for SkipVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipVariant::None => "none",
            SkipVariant::Asc => "asc",
            SkipVariant::Msc => "msc",
        })
    }
}

impl FromStr for SkipVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SkipVariant::None),
            "asc" => Ok(SkipVariant::Asc),
            "msc" => Ok(SkipVariant::Msc),
            other => Err(Error::InvalidArgument(format!("unknown skip variant '{other}'"))),
        }
    }
}

/// Architecture hyperparameters. The defaults are the desk-scale setup;
/// `width: 96` restores the full-size network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmfnetConfig {
    pub width: usize,
    pub scales: usize,
    pub blocks_per_scale: usize,
    /// Which branch U-Nets to build, kept in canonical (channel, pixel,
    /// spatial) order.
    pub branches: Vec<AttentionKind>,
    pub sc_variant: SkipVariant,
    pub msc_theta_init: f32,
    /// Channel reduction ratio inside channel/pixel attention.
    pub reduction: usize,
    /// Kernel size of the spatial-attention conv.
    pub spatial_kernel: usize,
    /// Alternate fusion head: also pass I_R through its own 3×3 conv before
    /// the sum. Breaks the zero-init passthrough property; off by default.
    pub residual_head_conv: bool,
}

impl Default for CmfnetConfig {
    fn default() -> Self {
        CmfnetConfig {
            width: 8,
            scales: 3,
            blocks_per_scale: 3,
            branches: AttentionKind::ALL.to_vec(),
            sc_variant: SkipVariant::Msc,
            msc_theta_init: 0.0,
            reduction: 4,
            spatial_kernel: 5,
            residual_head_conv: false,
        }
    }
}

impl CmfnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::InvalidConfig("at least one branch is required".into()));
        }
        let mut sorted = self.branches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.branches.len() || sorted != self.branches {
            return Err(Error::InvalidConfig(
                "branches must be unique and in canonical (channel, pixel, spatial) order".into(),
            ));
        }
        if self.sc_variant == SkipVariant::Msc && self.branches.len() != 3 {
            return Err(Error::InvalidConfig("the mixed skip connection requires all three branches".into()));
        }
        if self.scales == 0 || self.blocks_per_scale == 0 {
            return Err(Error::InvalidConfig("scales and blocks_per_scale must be positive".into()));
        }
        if self.width < self.reduction || self.width % self.reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} must be a positive multiple of the attention reduction {}",
                self.width, self.reduction
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("spatial_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Inputs must have H and W divisible by this (one halving per
    /// downsample).
    pub fn spatial_factor(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub fn has_branch(&self, kind: AttentionKind) -> bool {
        self.branches.contains(&kind)
    }
}

#[derive(Debug, Clone)]
pub struct BranchParams<E: Element> {
    pub stem_conv1: Conv2dParams<E>,
    pub stem_prelu: PreluParams<E>,
    pub stem_conv2: Conv2dParams<E>,
    pub unet: UnetParams<E>,
    pub ram: RamParams<E>,
}

impl<E: Element> BranchParams<E> {
    fn init(rng: &mut ChaCha8Rng, kind: AttentionKind, cfg: &CmfnetConfig) -> Result<Self> {
        Ok(BranchParams {
            stem_conv1: Conv2dParams::init(rng, cfg.width, 3, 3),
            stem_prelu: PreluParams::init(cfg.width),
            stem_conv2: Conv2dParams::init(rng, cfg.width, cfg.width, 3),
            unet: UnetParams::init(rng, kind, cfg.width, cfg.scales, cfg.blocks_per_scale, cfg.reduction, cfg.spatial_kernel)?,
            ram: RamParams::init(rng, cfg.width),
        })
    }

    fn zeros(kind: AttentionKind, cfg: &CmfnetConfig) -> Result<Self> {
        Ok(BranchParams {
            stem_conv1: Conv2dParams::zeros(cfg.width, 3, 3),
            stem_prelu: PreluParams::zeros(cfg.width),
            stem_conv2: Conv2dParams::zeros(cfg.width, cfg.width, 3),
            unet: UnetParams::zeros(kind, cfg.width, cfg.scales, cfg.blocks_per_scale, cfg.reduction, cfg.spatial_kernel)?,
            ram: RamParams::zeros(cfg.width),
        })
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.stem_conv1.visit(&key(prefix, "stem.conv1"), f);
        self.stem_prelu.visit(&key(prefix, "stem.prelu"), f);
        self.stem_conv2.visit(&key(prefix, "stem.conv2"), f);
        self.unet.visit(&key(prefix, "unet"), f);
        self.ram.visit(&key(prefix, "ram"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.stem_conv1.visit_mut(&key(prefix, "stem.conv1"), f);
        self.stem_prelu.visit_mut(&key(prefix, "stem.prelu"), f);
        self.stem_conv2.visit_mut(&key(prefix, "stem.conv2"), f);
        self.unet.visit_mut(&key(prefix, "unet"), f);
        self.ram.visit_mut(&key(prefix, "ram"), f);
    }

    fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> BranchParams<F> {
        BranchParams {
            stem_conv1: self.stem_conv1.map(f),
            stem_prelu: self.stem_prelu.map(f),
            stem_conv2: self.stem_conv2.map(f),
            unet: self.unet.map(f),
            ram: self.ram.map(f),
        }
    }
}

/// Every learnable tensor of the network, in a fixed named order.
#[derive(Debug, Clone)]
pub struct CmfnetParams<E: Element> {
    pub branches: Vec<(AttentionKind, BranchParams<E>)>,
    /// n·width → 3 fusion of the concatenated branch features.
    pub fusion: Conv2dParams<E>,
    /// Only present for the alternate fusion head.
    pub residual_head: Option<Conv2dParams<E>>,
    /// Only present under the mixed skip connection.
    pub msc_theta: Option<Tensor<E>>,
}

impl<E: Element> CmfnetParams<E> {
    pub fn init(cfg: &CmfnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = cfg
            .branches
            .iter()
            .map(|&kind| Ok((kind, BranchParams::init(&mut rng, kind, cfg)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CmfnetParams {
            branches,
            fusion: Conv2dParams::init(&mut rng, 3, cfg.branches.len() * cfg.width, 3),
            residual_head: cfg
                .residual_head_conv
                .then(|| Conv2dParams::init(&mut rng, 3, 3, 3)),
            msc_theta: (cfg.sc_variant == SkipVariant::Msc)
                .then(|| Tensor::param(&[1], vec![E::from_f64(cfg.msc_theta_init as f64)]).unwrap()),
        })
    }

    pub fn zeros(cfg: &CmfnetConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .branches
            .iter()
            .map(|&kind| Ok((kind, BranchParams::zeros(kind, cfg)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CmfnetParams {
            branches,
            fusion: Conv2dParams::zeros(3, cfg.branches.len() * cfg.width, 3),
            residual_head: cfg.residual_head_conv.then(|| Conv2dParams::zeros(3, 3, 3)),
            msc_theta: (cfg.sc_variant == SkipVariant::Msc)
                .then(|| Tensor::param(&[1], vec![E::zero()]).unwrap()),
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (kind, bp) in &self.branches {
            bp.visit(&format!("{kind}"), f);
        }
        self.fusion.visit("fusion", f);
        if let Some(rh) = &self.residual_head {
            rh.visit("residual_head", f);
        }
        if let Some(theta) = &self.msc_theta {
            f(&key("msc", "theta"), theta);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (kind, bp) in &mut self.branches {
            bp.visit_mut(&format!("{kind}"), f);
        }
        self.fusion.visit_mut("fusion", f);
        if let Some(rh) = &mut self.residual_head {
            rh.visit_mut("residual_head", f);
        }
        if let Some(theta) = &mut self.msc_theta {
            f(&key("msc", "theta"), theta);
        }
    }

    /// Tensors traversed in the same fixed order as [`Self::visit`].
    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> CmfnetParams<F> {
        CmfnetParams {
            branches: self.branches.iter().map(|(k, b)| (*k, b.map(f))).collect(),
            fusion: self.fusion.map(f),
            residual_head: self.residual_head.as_ref().map(|c| c.map(f)),
            msc_theta: self.msc_theta.as_ref().map(|t| f(t)),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Rebuild with the same structure but tensors drawn from `tensors`
    /// (visit order). Counts must match exactly.
    pub fn with_tensors(&self, tensors: &[Tensor<E>]) -> CmfnetParams<E> {
        let mut it = tensors.iter();
        let out = self.map(&mut |_| it.next().expect("tensor list too short").clone());
        assert!(it.next().is_none(), "tensor list too long");
        out
    }

    /// Inference copy whose leaves do not record gradients.
    pub fn detached(&self) -> CmfnetParams<E> {
        self.map(&mut |t| t.detach())
    }

    pub fn cast<F: Element>(&self) -> CmfnetParams<F> {
        self.map(&mut |t| t.cast())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&self) {
        self.visit(&mut |_, t| t.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }
}

/// Total learnable scalar count for a configuration.
pub fn param_count(cfg: &CmfnetConfig) -> Result<usize> {
    Ok(CmfnetParams::<f32>::zeros(cfg)?.param_count())
}

/// Combine the per-branch images through the configured skip connection.
fn skip_connect<E: Element>(
    images: &[(AttentionKind, Tensor<E>)],
    cfg: &CmfnetConfig,
    params: &CmfnetParams<E>,
) -> Result<Tensor<E>> {
    match cfg.sc_variant {
        SkipVariant::Msc => {
            let by = |kind: AttentionKind| {
                images.iter().find(|(k, _)| *k == kind).map(|(_, t)| t).ok_or_else(|| {
                    Error::InvalidConfig(format!("mixed skip connection needs the {kind} branch"))
                })
            };
            let theta = params
                .msc_theta
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("msc_theta missing from parameters".into()))?;
            msc_forward(by(AttentionKind::Channel)?, by(AttentionKind::Pixel)?, by(AttentionKind::Spatial)?, theta)
        }
        SkipVariant::Asc | SkipVariant::None => {
            // Average relative to the pixel branch when present (the main
            // pathway), otherwise the first branch.
            let base = images
                .iter()
                .position(|(k, _)| *k == AttentionKind::Pixel)
                .unwrap_or(0);
            let imgs: Vec<Tensor<E>> = images.iter().map(|(_, t)| t.clone()).collect();
            mean_residual(&imgs, base)
        }
    }
}

/// Restore a degraded B×3×H×W image (values expected in [0,1]; H, W divisible
/// by the config's spatial factor).
pub fn cmfnet_forward<E: Element>(
    degraded: &Tensor<E>,
    cfg: &CmfnetConfig,
    params: &CmfnetParams<E>,
) -> Result<Tensor<E>> {
    let (_, c, h, w) = degraded.dims4()?;
    if c != 3 {
        return Err(Error::shape("cmfnet_forward", format!("expected 3 input channels, got {c}")));
    }
    let factor = cfg.spatial_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "cmfnet_forward",
            format!("spatial size {h}x{w} not divisible by {factor}; pad first"),
        ));
    }
    if params.branches.len() != cfg.branches.len()
        || params.branches.iter().map(|(k, _)| *k).ne(cfg.branches.iter().copied())
    {
        return Err(Error::InvalidConfig("parameter branches do not match the configuration".into()));
    }

    let mut feats = Vec::with_capacity(params.branches.len());
    let mut images = Vec::with_capacity(params.branches.len());
    for (kind, bp) in &params.branches {
        let shallow = bp.stem_conv2.apply(&bp.stem_prelu.apply(&bp.stem_conv1.apply(degraded)?)?)?;
        let features = branch_unet_forward(&shallow, &bp.unet)?;
        let out = ram_forward(&features, degraded, &bp.ram)?;
        feats.push(out.features);
        images.push((*kind, out.image));
    }

    let residual = skip_connect(&images, cfg, params)?;
    let residual = match (&params.residual_head, cfg.residual_head_conv) {
        (Some(conv), true) => conv.apply(&residual)?,
        _ => residual,
    };
    let fused = params.fusion.apply(&Tensor::concat_channels(&feats)?)?;
    fused.add(&residual)
}
