//! Patch sampling and the eight dihedral augmentations (identity, three
//! rotations, four reflections), always applied identically to the degraded
//! and clean image of a pair.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];
}

/// Apply a dihedral transform to a square C×H×H image.
pub fn apply_dihedral(t: &Tensor<f32>, d: Dihedral) -> Result<Tensor<f32>> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("augment", format!("expected [C,H,W], got {s:?}"))),
    };
    if h != w {
        return Err(Error::shape(
            "augment",
            format!("dihedral transforms need square patches, got {h}x{w}"),
        ));
    }
    let n = h;
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ci in 0..c {
        let base = ci * n * n;
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = match d {
                    Dihedral::Identity => (y, x),
                    // (y,x) ← source rotated 90° counter-clockwise.
                    Dihedral::Rot90 => (x, n - 1 - y),
                    Dihedral::Rot180 => (n - 1 - y, n - 1 - x),
                    Dihedral::Rot270 => (n - 1 - x, y),
                    Dihedral::FlipH => (y, n - 1 - x),
                    Dihedral::FlipV => (n - 1 - y, x),
                    Dihedral::Transpose => (x, y),
                    Dihedral::AntiTranspose => (n - 1 - x, n - 1 - y),
                };
                out[base + y * n + x] = src[base + sy * n + sx];
            }
        }
    }
    Tensor::from_vec(t.shape(), out)
}

/// Crop the same random window out of both images of a pair. `size` must
/// divide by 4 so crops stay valid network inputs.
pub fn sample_patch(pair: &ImagePair, size: usize, rng: &mut ChaCha8Rng) -> Result<ImagePair> {
    let (h, w) = pair.spatial();
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!("patch {size} exceeds image {h}x{w}")));
    }
    if size % 4 != 0 {
        return Err(Error::InvalidArgument(format!("patch size {size} must be divisible by 4")));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let crop = |t: &Tensor<f32>| -> Tensor<f32> {
        let d = t.data();
        let mut out = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for y in 0..size {
                let row = (c * h + y0 + y) * w + x0;
                out.extend_from_slice(&d[row..row + size]);
            }
        }
        Tensor::from_vec(&[3, size, size], out).unwrap()
    };
    Ok(ImagePair {
        degraded: crop(&pair.degraded),
        clean: crop(&pair.clean),
        id: pair.id.clone(),
    })
}

/// Apply one of the eight dihedral transforms, drawn uniformly, to both
/// images of a (square) pair.
pub fn augment(pair: &ImagePair, rng: &mut ChaCha8Rng) -> Result<ImagePair> {
    let d = Dihedral::ALL[rng.gen_range(0..Dihedral::ALL.len())];
    Ok(ImagePair {
        degraded: apply_dihedral(&pair.degraded, d)?,
        clean: apply_dihedral(&pair.clean, d)?,
        id: pair.id.clone(),
    })
}
