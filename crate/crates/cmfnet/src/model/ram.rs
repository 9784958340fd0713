//! Residual attention module at the tail of each branch.
//!
//! Produces the branch image I_b = conv(F) + degraded and re-gates the branch
//! features with a sigmoid mask derived from that image. All convolutions are
//! 3×3 and no supervision is applied to I_b here; the branch images only meet
//! the ground truth through the fused output.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{key, Conv2dParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct RamParams<E: Element> {
    /// width → 3: projects branch features onto an image residual.
    pub img: Conv2dParams<E>,
    /// 3 → width: lifts the image back into a per-channel mask logit.
    pub mask: Conv2dParams<E>,
    /// width → width: the feature path that gets gated.
    pub feat: Conv2dParams<E>,
}

/// Per-branch outputs: full-resolution features F_b and image I_b.
#[derive(Debug, Clone)]
pub struct RamOutput<E: Element> {
    pub features: Tensor<E>,
    pub image: Tensor<E>,
}

impl<E: Element> RamParams<E> {
    pub fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        RamParams {
            img: Conv2dParams::init(rng, 3, width, 3),
            mask: Conv2dParams::init(rng, width, 3, 3),
            feat: Conv2dParams::init(rng, width, width, 3),
        }
    }

    pub fn zeros(width: usize) -> Self {
        RamParams {
            img: Conv2dParams::zeros(3, width, 3),
            mask: Conv2dParams::zeros(width, 3, 3),
            feat: Conv2dParams::zeros(width, width, 3),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.img.visit(&key(prefix, "img"), f);
        self.mask.visit(&key(prefix, "mask"), f);
        self.feat.visit(&key(prefix, "feat"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.img.visit_mut(&key(prefix, "img"), f);
        self.mask.visit_mut(&key(prefix, "mask"), f);
        self.feat.visit_mut(&key(prefix, "feat"), f);
    }

    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> RamParams<F> {
        RamParams { img: self.img.map(f), mask: self.mask.map(f), feat: self.feat.map(f) }
    }
}

pub fn ram_forward<E: Element>(
    branch_features: &Tensor<E>,
    degraded: &Tensor<E>,
    p: &RamParams<E>,
) -> Result<RamOutput<E>> {
    let image = p.img.apply(branch_features)?.add(degraded)?;
    let mask = p.mask.apply(&image)?.sigmoid();
    let features = branch_features.add(&p.feat.apply(branch_features)?.mul(&mask)?)?;
    Ok(RamOutput { features, image })
}
