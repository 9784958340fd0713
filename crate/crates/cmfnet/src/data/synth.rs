//! Synthetic degradation from the atmospheric-scattering haze model
//! x̂ = x⊙m + A⊙(1−m) and the blur model x̂ = x⊗k + n.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Transmission map m (1×H×W, values in [0,1]) and global atmospheric light.
#[derive(Debug, Clone)]
pub struct HazeParams {
    pub transmission: Tensor<f32>,
    pub atmosphere: [f32; 3],
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        match self.transmission.shape() {
            [1, _, _] => {}
            s => return Err(Error::shape("haze", format!("transmission must be [1,H,W], got {s:?}"))),
        }
        if !self.transmission.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("haze: transmission values must lie in [0,1]".into()));
        }
        if !self.atmosphere.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("haze: atmospheric light must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Apply the haze formation model to a clean 3×H×W image.
pub fn synth_haze(clean: &Tensor<f32>, params: &HazeParams) -> Result<Tensor<f32>> {
    params.validate()?;
    let (h, w) = match clean.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("synth_haze", format!("expected [3,H,W], got {s:?}"))),
    };
    if params.transmission.shape()[1..] != [h, w] {
        return Err(Error::shape(
            "synth_haze",
            format!("transmission {:?} does not match image {h}x{w}", params.transmission.shape()),
        ));
    }
    let m = params.transmission.data();
    let x = clean.data();
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        let a = params.atmosphere[c];
        for i in 0..plane {
            out[c * plane + i] = x[c * plane + i] * m[i] + a * (1.0 - m[i]);
        }
    }
    Tensor::from_vec(clean.shape(), out)
}

/// Normalized blur kernel plus additive Gaussian noise level.
#[derive(Debug, Clone)]
pub struct BlurParams {
    /// Row-major kh×kw taps, nonnegative, summing to 1.
    pub kernel: Vec<f32>,
    pub kh: usize,
    pub kw: usize,
    pub noise_sigma: f32,
}

impl BlurParams {
    pub fn identity() -> Self {
        BlurParams { kernel: vec![1.0], kh: 1, kw: 1, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.len() != self.kh * self.kw {
            return Err(Error::shape("blur", format!("kernel length {} != {}x{}", self.kernel.len(), self.kh, self.kw)));
        }
        if self.kernel.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("blur: kernel taps must be nonnegative".into()));
        }
        let sum: f32 = self.kernel.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("blur: kernel must sum to 1, got {sum}")));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("blur: noise sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-channel convolution with the blur kernel (symmetric reflection at the
/// borders) plus Gaussian noise, clamped back to [0,1].
pub fn synth_blur(clean: &Tensor<f32>, params: &BlurParams, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    params.validate()?;
    let (h, w) = match clean.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("synth_blur", format!("expected [3,H,W], got {s:?}"))),
    };
    let (ph, pw) = (params.kh / 2, params.kw / 2);
    let x = clean.data();
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f32;
                for u in 0..params.kh {
                    let iy = reflect(y as isize + u as isize - ph as isize, h);
                    for v in 0..params.kw {
                        let ix = reflect(xx as isize + v as isize - pw as isize, w);
                        acc += params.kernel[u * params.kw + v] * x[c * plane + iy * w + ix];
                    }
                }
                out[c * plane + y * w + xx] = acc;
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, params.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("blur noise: {e}")))?;
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(clean.shape(), out)
}

/// Compact, serializable description of sampled haze parameters: an 8×8
/// latent grid that expands into a smooth transmission map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HazeRecipe {
    pub grid: Vec<f32>,
    pub t_min: f32,
    pub t_max: f32,
    pub atmosphere: [f32; 3],
}

pub(crate) fn upsample_grid_pub(grid: &[f32], g: usize, h: usize, w: usize) -> Vec<f32> {
    upsample_grid(grid, g, h, w)
}

/// Bilinear resize of a g×g grid to h×w with half-pixel sample centers.
fn upsample_grid(grid: &[f32], g: usize, h: usize, w: usize) -> Vec<f32> {
    let taps = |n: usize, out_n: usize| -> Vec<(usize, usize, f32)> {
        (0..out_n)
            .map(|i| {
                let src = (i as f32 + 0.5) * n as f32 / out_n as f32 - 0.5;
                let i0f = src.floor();
                let t = src - i0f;
                let i0 = (i0f as isize).clamp(0, n as isize - 1) as usize;
                let i1 = (i0f as isize + 1).clamp(0, n as isize - 1) as usize;
                (i0, i1, t)
            })
            .collect()
    };
    let ys = taps(g, h);
    let xs = taps(g, w);
    let mut out = Vec::with_capacity(h * w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let a = grid[y0 * g + x0] + tx * (grid[y0 * g + x1] - grid[y0 * g + x0]);
            let b = grid[y1 * g + x0] + tx * (grid[y1 * g + x1] - grid[y1 * g + x0]);
            out.push(a + ty * (b - a));
        }
    }
    out
}

impl HazeRecipe {
    pub fn expand(&self, h: usize, w: usize) -> Result<HazeParams> {
        let field = upsample_grid(&self.grid, 8, h, w);
        let data: Vec<f32> = field.iter().map(|&v| self.t_min + (self.t_max - self.t_min) * v).collect();
        Ok(HazeParams {
            transmission: Tensor::from_vec(&[1, h, w], data)?,
            atmosphere: self.atmosphere,
        })
    }

    /// Constant transmission (used by CLI overrides and inversion tests).
    pub fn constant(m: f32, atmosphere: [f32; 3]) -> Self {
        HazeRecipe { grid: vec![1.0; 64], t_min: m, t_max: m, atmosphere }
    }
}

pub fn random_haze_recipe(rng: &mut ChaCha8Rng) -> HazeRecipe {
    let grid = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let atmosphere = [(); 3].map(|_| rng.gen_range(0.6..1.0));
    HazeRecipe { grid, t_min: 0.2, t_max: 0.9, atmosphere }
}

/// Smooth random transmission field in [0.2, 0.9] plus bright atmosphere.
pub fn random_haze_params(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<HazeParams> {
    random_haze_recipe(rng).expand(h, w)
}

/// Serializable description of sampled blur parameters: a linear motion
/// kernel given by length and angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlurRecipe {
    pub length: usize,
    pub angle: f32,
    pub noise_sigma: f32,
}

impl BlurRecipe {
    pub fn kernel(&self) -> Result<BlurParams> {
        if self.length == 0 || self.length % 2 == 0 {
            return Err(Error::InvalidArgument(format!("blur length {} must be odd", self.length)));
        }
        if self.length == 1 {
            return Ok(BlurParams { kernel: vec![1.0], kh: 1, kw: 1, noise_sigma: self.noise_sigma });
        }
        let k = self.length;
        let c = (k - 1) as f32 / 2.0;
        let mut taps = vec![0.0f32; k * k];
        let (dy, dx) = (self.angle.sin(), self.angle.cos());
        for s in 0..k {
            let t = s as f32 - c;
            let y = c + t * dy;
            let x = c + t * dx;
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let mut splat = |yy: isize, xx: isize, wgt: f32| {
                if wgt > 0.0 && yy >= 0 && yy < k as isize && xx >= 0 && xx < k as isize {
                    taps[yy as usize * k + xx as usize] += wgt;
                }
            };
            splat(y0 as isize, x0 as isize, (1.0 - fy) * (1.0 - fx));
            splat(y0 as isize, x0 as isize + 1, (1.0 - fy) * fx);
            splat(y0 as isize + 1, x0 as isize, fy * (1.0 - fx));
            splat(y0 as isize + 1, x0 as isize + 1, fy * fx);
        }
        let sum: f32 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        Ok(BlurParams { kernel: taps, kh: k, kw: k, noise_sigma: self.noise_sigma })
    }
}

pub fn random_blur_recipe(rng: &mut ChaCha8Rng) -> BlurRecipe {
    let length = 2 * rng.gen_range(1..=4) + 1; // odd, 3..=9
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let noise_sigma = rng.gen_range(0.0..0.01);
    BlurRecipe { length, angle, noise_sigma }
}

/// Random linear motion kernel (length 3–9 px, uniform angle) plus a small
/// noise level. Deterministic given the RNG state.
pub fn random_blur_params(rng: &mut ChaCha8Rng) -> Result<BlurParams> {
    random_blur_recipe(rng).kernel()
}
