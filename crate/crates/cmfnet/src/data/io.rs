//! Image file I/O: 8-bit RGB PNG and binary PPM (P6), mapped to and from
//! [0,1] tensors of shape 3×H×W.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What to do with single-channel input files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrayPolicy {
    Reject,
    /// Replicate the gray plane onto all three channels.
    Broadcast,
}

/// Load an 8-bit RGB image as a 3×H×W tensor with values u8/255, clamped to
/// [0,1].
pub fn load_image(path: &Path, gray: GrayPolicy) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), detail: e.to_string() })?;
    let rgb = match img {
        image::DynamicImage::ImageLuma8(_) | image::DynamicImage::ImageLumaA8(_) => match gray {
            GrayPolicy::Reject => {
                return Err(Error::Image {
                    path: path.into(),
                    detail: "grayscale input rejected (enable gray broadcast to accept)".into(),
                })
            }
            GrayPolicy::Broadcast => img.to_rgb8(),
        },
        other => other.to_rgb8(),
    };
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = (px.0[c] as f32 / 255.0).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn to_u8_round_half_up(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Save a 3×H×W tensor in [0,1] as PNG or binary PPM (by extension), using
/// round-half-up quantization — the exact inverse of [`load_image`] for
/// values already on the 1/255 grid.
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let shape = t.shape();
    let (h, w) = match shape {
        [3, h, w] => (*h, *w),
        _ => return Err(Error::shape("save_image", format!("expected [3,H,W], got {shape:?}"))),
    };
    let plane = h * w;
    let d = t.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_u8_round_half_up(d[c * plane + i]));
        }
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => {
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            write!(f, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        "png" => {
            image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)
                .map_err(|e| Error::Image { path: path.into(), detail: e.to_string() })?;
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported image extension '{other}' (use .png or .ppm)"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_values_round_trip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.gen_range(0..=255) as f32 / 255.0).collect();
        let t = Tensor::from_vec(&[3, 8, 8], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["x.png", "x.ppm"] {
            let path = dir.path().join(name);
            save_image(&t, &path).unwrap();
            let back = load_image(&path, GrayPolicy::Reject).unwrap();
            assert_eq!(back.data(), t.data(), "{name}");
        }
    }

    #[test]
    fn all_white_loads_as_ones() {
        let t = Tensor::full(&[3, 4, 4], 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        save_image(&t, &path).unwrap();
        let back = load_image(&path, GrayPolicy::Reject).unwrap();
        assert!(back.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gray_policy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let gray = image::GrayImage::from_fn(4, 4, |x, _| image::Luma([(x * 60) as u8]));
        gray.save(&path).unwrap();
        assert!(load_image(&path, GrayPolicy::Reject).is_err());
        let t = load_image(&path, GrayPolicy::Broadcast).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
        let plane = 16;
        for i in 0..plane {
            assert_eq!(t.data()[i], t.data()[plane + i]);
            assert_eq!(t.data()[i], t.data()[2 * plane + i]);
        }
    }

    #[test]
    fn unreadable_file_reports_path() {
        let err = load_image(Path::new("/nonexistent/img.png"), GrayPolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("img.png"));
    }
}
