//! Paired training data: directory loading, synthetic degradation sets, and
//! batch assembly. All randomness flows from a single seed.

mod augment;
mod io;
mod synth;

pub use augment::{apply_dihedral, augment, sample_patch, Dihedral};
pub use io::{load_image, save_image, GrayPolicy};
pub use synth::{
    random_blur_params, random_blur_recipe, random_haze_params, random_haze_recipe, synth_blur,
    synth_haze, BlurParams, BlurRecipe, HazeParams, HazeRecipe,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A degraded/clean image pair, channels-first, values in [0,1].
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub id: String,
}

impl ImagePair {
    pub fn spatial(&self) -> (usize, usize) {
        match self.clean.shape() {
            [_, h, w] => (*h, *w),
            _ => unreachable!("pairs are rank 3"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradationKind {
    Haze,
    Blur,
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradationKind::Haze => "haze",
            DegradationKind::Blur => "blur",
        })
    }
}

impl FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haze" => Ok(DegradationKind::Haze),
            "blur" => Ok(DegradationKind::Blur),
            other => Err(Error::InvalidArgument(format!("unknown degradation kind '{other}'"))),
        }
    }
}

/// Load the `<root>/degraded/<id>` + `<root>/clean/<id>` pair layout. Ids are
/// the sorted intersection of the two directories' image files.
pub fn load_directory_pairs(root: &Path, gray: GrayPolicy) -> Result<Vec<ImagePair>> {
    let list = |sub: &str| -> Result<Vec<String>> {
        let dir = root.join(sub);
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| {
                let lower = n.to_ascii_lowercase();
                lower.ends_with(".png") || lower.ends_with(".ppm")
            })
            .collect();
        names.sort();
        Ok(names)
    };
    let degraded_names = list("degraded")?;
    let clean_names = list("clean")?;
    let ids: Vec<String> = degraded_names
        .iter()
        .filter(|n| clean_names.binary_search(n).is_ok())
        .cloned()
        .collect();
    if ids.is_empty() {
        return Err(Error::Data(format!(
            "no matching image pairs under {} (degraded: {}, clean: {})",
            root.display(),
            degraded_names.len(),
            clean_names.len()
        )));
    }
    ids.iter()
        .map(|id| {
            let degraded = load_image(&root.join("degraded").join(id), gray)?;
            let clean = load_image(&root.join("clean").join(id), gray)?;
            if degraded.shape() != clean.shape() {
                return Err(Error::Data(format!(
                    "pair '{id}': degraded {:?} does not match clean {:?}",
                    degraded.shape(),
                    clean.shape()
                )));
            }
            Ok(ImagePair { degraded, clean, id: id.clone() })
        })
        .collect()
}

/// Procedural clean image: a few octaves of smooth bilinear noise plus random
/// solid rectangles for hard edges, per channel, kept inside [0.05, 0.95].
pub fn synthetic_clean(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for (g, weight) in [(4usize, 0.5f32), (8, 0.3), (16, 0.2)] {
            let grid: Vec<f32> = (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect();
            let field = synth::upsample_grid_pub(&grid, g, h, w);
            for i in 0..plane {
                data[c * plane + i] += weight * field[i];
            }
        }
    }
    let rects = rng.gen_range(2..=4);
    for _ in 0..rects {
        let rh = rng.gen_range(h / 8..=h / 2).max(1);
        let rw = rng.gen_range(w / 8..=w / 2).max(1);
        let y0 = rng.gen_range(0..h - rh + 1);
        let x0 = rng.gen_range(0..w - rw + 1);
        let color = [(); 3].map(|_| rng.gen_range(0.0..1.0f32));
        let blend = rng.gen_range(0.5..1.0f32);
        for (cc, &col) in color.iter().enumerate() {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    let v = &mut data[cc * plane + y * w + x];
                    *v = (1.0 - blend) * *v + blend * col;
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.05, 0.95);
    }
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

/// Build `count` synthetic degraded/clean pairs of the given size,
/// deterministically from the seed.
pub fn synthetic_pairs(kind: DegradationKind, count: usize, size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let clean = synthetic_clean(&mut rng, size, size);
            let degraded = match kind {
                DegradationKind::Haze => {
                    let p = random_haze_params(&mut rng, size, size)?;
                    synth_haze(&clean, &p)?
                }
                DegradationKind::Blur => {
                    let p = random_blur_params(&mut rng)?;
                    synth_blur(&clean, &p, &mut rng)?
                }
            };
            Ok(ImagePair { degraded, clean, id: format!("{kind}-{i:04}") })
        })
        .collect()
}

/// Stack rank-3 images into one B×C×H×W batch tensor (a graph leaf).
pub fn stack_batch(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack_batch: empty batch".into()))?;
    let shape = first.shape();
    if shape.len() != 3 {
        return Err(Error::shape("stack_batch", format!("expected rank-3 images, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(
                "stack_batch",
                format!("{:?} does not match {:?}", img.shape(), shape),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(shape);
    Tensor::from_vec(&out_shape, data)
}

/// Pad a 3×H×W image on the bottom/right with symmetric reflection until
/// both sides are multiples of `multiple`; returns the original size too.
pub fn pad_to_multiple(t: &Tensor<f32>, multiple: usize) -> Result<(Tensor<f32>, (usize, usize))> {
    let (h, w) = match t.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("pad_to_multiple", format!("expected [3,H,W], got {s:?}"))),
    };
    let target_h = h.div_ceil(multiple) * multiple;
    let target_w = w.div_ceil(multiple) * multiple;
    if (target_h, target_w) == (h, w) {
        return Ok((t.clone(), (h, w)));
    }
    let reflect = |i: usize, n: usize| -> usize {
        let mut i = i as isize;
        let n = n as isize;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let d = t.data();
    let mut out = Vec::with_capacity(3 * target_h * target_w);
    for c in 0..3 {
        for y in 0..target_h {
            let sy = reflect(y, h);
            for x in 0..target_w {
                let sx = reflect(x, w);
                out.push(d[(c * h + sy) * w + sx]);
            }
        }
    }
    Ok((Tensor::from_vec(&[3, target_h, target_w], out)?, (h, w)))
}

/// Top-left crop of a 3×H×W image.
pub fn crop_to(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ph, pw) = match t.shape() {
        [3, ph, pw] => (*ph, *pw),
        s => return Err(Error::shape("crop_to", format!("expected [3,H,W], got {s:?}"))),
    };
    if h > ph || w > pw {
        return Err(Error::shape("crop_to", format!("crop {h}x{w} exceeds {ph}x{pw}")));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            let row = (c * ph + y) * pw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// The rank-3 view of one batch item (inverse of [`stack_batch`]).
pub fn unstack_one(batch: &Tensor<f32>, index: usize) -> Result<Tensor<f32>> {
    let (b, c, h, w) = batch.dims4()?;
    if index >= b {
        return Err(Error::InvalidArgument(format!("batch index {index} out of {b}")));
    }
    let n = c * h * w;
    Tensor::from_vec(&[c, h, w], batch.data()[index * n..(index + 1) * n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_pairs_are_deterministic() {
        let a = synthetic_pairs(DegradationKind::Haze, 3, 16, 42).unwrap();
        let b = synthetic_pairs(DegradationKind::Haze, 3, 16, 42).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.degraded.data(), pb.degraded.data());
            assert_eq!(pa.clean.data(), pb.clean.data());
        }
        let c = synthetic_pairs(DegradationKind::Haze, 3, 16, 43).unwrap();
        assert_ne!(a[0].degraded.data(), c[0].degraded.data());
    }

    #[test]
    fn synthetic_values_stay_in_unit_range() {
        for kind in [DegradationKind::Haze, DegradationKind::Blur] {
            let pairs = synthetic_pairs(kind, 2, 16, 1).unwrap();
            for p in pairs {
                assert!(p.clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(p.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn stack_and_unstack_round_trip() {
        let pairs = synthetic_pairs(DegradationKind::Blur, 2, 8, 2).unwrap();
        let batch = stack_batch(&[&pairs[0].clean, &pairs[1].clean]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 8, 8]);
        assert_eq!(unstack_one(&batch, 0).unwrap().data(), pairs[0].clean.data());
        assert_eq!(unstack_one(&batch, 1).unwrap().data(), pairs[1].clean.data());
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let pairs = synthetic_pairs(DegradationKind::Haze, 1, 8, 4).unwrap();
        // Crop to an awkward 7×5, pad back to a multiple of 4, crop again.
        let odd = crop_to(&pairs[0].clean, 7, 5).unwrap();
        let (padded, (h, w)) = pad_to_multiple(&odd, 4).unwrap();
        assert_eq!(padded.shape(), &[3, 8, 8]);
        assert_eq!((h, w), (7, 5));
        let back = crop_to(&padded, h, w).unwrap();
        assert_eq!(back.data(), odd.data());

        // Already aligned input is returned unchanged.
        let (same, _) = pad_to_multiple(&pairs[0].clean, 4).unwrap();
        assert_eq!(same.data(), pairs[0].clean.data());
    }

    #[test]
    fn directory_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("degraded")).unwrap();
        std::fs::create_dir_all(dir.path().join("clean")).unwrap();
        let pairs = synthetic_pairs(DegradationKind::Haze, 2, 8, 3).unwrap();
        for p in &pairs {
            save_image(&p.degraded, &dir.path().join("degraded").join(format!("{}.png", p.id))).unwrap();
            save_image(&p.clean, &dir.path().join("clean").join(format!("{}.png", p.id))).unwrap();
        }
        // An unpaired extra file is ignored.
        save_image(&pairs[0].clean, &dir.path().join("clean").join("orphan.png")).unwrap();

        let loaded = load_directory_pairs(dir.path(), GrayPolicy::Broadcast).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, "haze-0000.png");

        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(empty.path().join("degraded")).unwrap();
        std::fs::create_dir_all(empty.path().join("clean")).unwrap();
        assert!(load_directory_pairs(empty.path(), GrayPolicy::Broadcast).is_err());
    }
}
