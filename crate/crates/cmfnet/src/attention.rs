//! Channel, spatial, and pixel attention blocks.
//!
//! Each branch U-Net uses one attention kind throughout. All three gates
//! share the same skeleton — squeeze to a mask logit, sigmoid, multiply back
//! onto the features — and differ only in the mask's dimensionality:
//! channel masks are B×C×1×1, spatial masks B×1×H×W, pixel masks B×C×H×W.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{key, Conv2dParams, PreluParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Channel,
    Pixel,
    Spatial,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Channel, AttentionKind::Pixel, AttentionKind::Spatial];

    pub fn short(&self) -> char {
        match self {
            AttentionKind::Channel => 'c',
            AttentionKind::Pixel => 'p',
            AttentionKind::Spatial => 's',
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttentionKind::Channel => "channel",
            AttentionKind::Pixel => "pixel",
            AttentionKind::Spatial => "spatial",
        };
        f.write_str(s)
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c" | "channel" => Ok(AttentionKind::Channel),
            "p" | "pixel" => Ok(AttentionKind::Pixel),
            "s" | "spatial" => Ok(AttentionKind::Spatial),
            other => Err(Error::InvalidArgument(format!("unknown attention kind '{other}'"))),
        }
    }
}

/// Channel attention: squeeze with global average pooling, then a 1×1
/// bottleneck (C → C/r → C) produces one gate value per channel.
#[derive(Debug, Clone)]
pub struct CabParams<E: Element> {
    pub down: Conv2dParams<E>,
    pub up: Conv2dParams<E>,
}

fn check_reduction(channels: usize, reduction: usize, what: &str) -> Result<()> {
    if reduction == 0 || channels < reduction || channels % reduction != 0 {
        return Err(Error::InvalidConfig(format!(
            "{what}: {channels} channels not divisible by reduction {reduction}"
        )));
    }
    Ok(())
}

impl<E: Element> CabParams<E> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction, "channel attention")?;
        Ok(CabParams {
            down: Conv2dParams::init(rng, channels / reduction, channels, 1),
            up: Conv2dParams::init(rng, channels, channels / reduction, 1),
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction, "channel attention")?;
        Ok(CabParams {
            down: Conv2dParams::zeros(channels / reduction, channels, 1),
            up: Conv2dParams::zeros(channels, channels / reduction, 1),
        })
    }
}

/// Spatial attention: average- and max-pool across channels, then one k×k
/// convolution produces a single gate plane.
#[derive(Debug, Clone)]
pub struct SabParams<E: Element> {
    pub conv: Conv2dParams<E>,
}

impl<E: Element> SabParams<E> {
    pub fn init(rng: &mut ChaCha8Rng, kernel: usize) -> Self {
        SabParams { conv: Conv2dParams::init(rng, 1, 2, kernel) }
    }

    pub fn zeros(kernel: usize) -> Self {
        SabParams { conv: Conv2dParams::zeros(1, 2, kernel) }
    }
}

/// Pixel attention: the same 1×1 bottleneck as channel attention but with no
/// pooling, so the mask keeps full B×C×H×W resolution.
#[derive(Debug, Clone)]
pub struct PabParams<E: Element> {
    pub down: Conv2dParams<E>,
    pub up: Conv2dParams<E>,
}

impl<E: Element> PabParams<E> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction, "pixel attention")?;
        Ok(PabParams {
            down: Conv2dParams::init(rng, channels / reduction, channels, 1),
            up: Conv2dParams::init(rng, channels, channels / reduction, 1),
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction, "pixel attention")?;
        Ok(PabParams {
            down: Conv2dParams::zeros(channels / reduction, channels, 1),
            up: Conv2dParams::zeros(channels, channels / reduction, 1),
        })
    }
}

#[derive(Debug, Clone)]
pub enum GateParams<E: Element> {
    Channel(CabParams<E>),
    Spatial(SabParams<E>),
    Pixel(PabParams<E>),
}

impl<E: Element> GateParams<E> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        kind: AttentionKind,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Channel => GateParams::Channel(CabParams::init(rng, channels, reduction)?),
            AttentionKind::Spatial => GateParams::Spatial(SabParams::init(rng, spatial_kernel)),
            AttentionKind::Pixel => GateParams::Pixel(PabParams::init(rng, channels, reduction)?),
        })
    }

    pub fn zeros(kind: AttentionKind, channels: usize, reduction: usize, spatial_kernel: usize) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Channel => GateParams::Channel(CabParams::zeros(channels, reduction)?),
            AttentionKind::Spatial => GateParams::Spatial(SabParams::zeros(spatial_kernel)),
            AttentionKind::Pixel => GateParams::Pixel(PabParams::zeros(channels, reduction)?),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        match self {
            GateParams::Channel(p) => {
                p.down.visit(&key(prefix, "down"), f);
                p.up.visit(&key(prefix, "up"), f);
            }
            GateParams::Spatial(p) => p.conv.visit(&key(prefix, "conv"), f),
            GateParams::Pixel(p) => {
                p.down.visit(&key(prefix, "down"), f);
                p.up.visit(&key(prefix, "up"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        match self {
            GateParams::Channel(p) => {
                p.down.visit_mut(&key(prefix, "down"), f);
                p.up.visit_mut(&key(prefix, "up"), f);
            }
            GateParams::Spatial(p) => p.conv.visit_mut(&key(prefix, "conv"), f),
            GateParams::Pixel(p) => {
                p.down.visit_mut(&key(prefix, "down"), f);
                p.up.visit_mut(&key(prefix, "up"), f);
            }
        }
    }

    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> GateParams<F> {
        match self {
            GateParams::Channel(p) => {
                GateParams::Channel(CabParams { down: p.down.map(f), up: p.up.map(f) })
            }
            GateParams::Spatial(p) => GateParams::Spatial(SabParams { conv: p.conv.map(f) }),
            GateParams::Pixel(p) => {
                GateParams::Pixel(PabParams { down: p.down.map(f), up: p.up.map(f) })
            }
        }
    }
}

/// 1-D channel attention mask, shape B×C×1×1.
pub fn cab_mask<E: Element>(features: &Tensor<E>, p: &CabParams<E>) -> Result<Tensor<E>> {
    let squeezed = features.global_avg_pool()?;
    Ok(p.up.apply(&p.down.apply(&squeezed)?.relu())?.sigmoid())
}

pub fn cab_forward<E: Element>(features: &Tensor<E>, p: &CabParams<E>) -> Result<Tensor<E>> {
    features.mul(&cab_mask(features, p)?)
}

/// 2-D spatial attention mask, shape B×1×H×W.
pub fn sab_mask<E: Element>(features: &Tensor<E>, p: &SabParams<E>) -> Result<Tensor<E>> {
    let pooled = Tensor::concat_channels(&[features.channel_mean()?, features.channel_max()?])?;
    Ok(p.conv.apply(&pooled)?.sigmoid())
}

pub fn sab_forward<E: Element>(features: &Tensor<E>, p: &SabParams<E>) -> Result<Tensor<E>> {
    features.mul(&sab_mask(features, p)?)
}

/// 3-D pixel attention mask, shape B×C×H×W — no pooling anywhere.
pub fn pab_mask<E: Element>(features: &Tensor<E>, p: &PabParams<E>) -> Result<Tensor<E>> {
    Ok(p.up.apply(&p.down.apply(features)?.relu())?.sigmoid())
}

pub fn pab_forward<E: Element>(features: &Tensor<E>, p: &PabParams<E>) -> Result<Tensor<E>> {
    features.mul(&pab_mask(features, p)?)
}

pub fn gate_forward<E: Element>(features: &Tensor<E>, gate: &GateParams<E>) -> Result<Tensor<E>> {
    match gate {
        GateParams::Channel(p) => cab_forward(features, p),
        GateParams::Spatial(p) => sab_forward(features, p),
        GateParams::Pixel(p) => pab_forward(features, p),
    }
}

/// One residual attention block: conv3×3 → PReLU → conv3×3 → attention gate,
/// added back onto the input.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams<E: Element> {
    pub conv1: Conv2dParams<E>,
    pub prelu: PreluParams<E>,
    pub conv2: Conv2dParams<E>,
    pub gate: GateParams<E>,
}

impl<E: Element> AttentionBlockParams<E> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        kind: AttentionKind,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        Ok(AttentionBlockParams {
            conv1: Conv2dParams::init(rng, channels, channels, 3),
            prelu: PreluParams::init(channels),
            conv2: Conv2dParams::init(rng, channels, channels, 3),
            gate: GateParams::init(rng, kind, channels, reduction, spatial_kernel)?,
        })
    }

    pub fn zeros(kind: AttentionKind, channels: usize, reduction: usize, spatial_kernel: usize) -> Result<Self> {
        Ok(AttentionBlockParams {
            conv1: Conv2dParams::zeros(channels, channels, 3),
            prelu: PreluParams::zeros(channels),
            conv2: Conv2dParams::zeros(channels, channels, 3),
            gate: GateParams::zeros(kind, channels, reduction, spatial_kernel)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.conv1.visit(&key(prefix, "conv1"), f);
        self.prelu.visit(&key(prefix, "prelu"), f);
        self.conv2.visit(&key(prefix, "conv2"), f);
        self.gate.visit(&key(prefix, "gate"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.conv1.visit_mut(&key(prefix, "conv1"), f);
        self.prelu.visit_mut(&key(prefix, "prelu"), f);
        self.conv2.visit_mut(&key(prefix, "conv2"), f);
        self.gate.visit_mut(&key(prefix, "gate"), f);
    }

    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> AttentionBlockParams<F> {
        AttentionBlockParams {
            conv1: self.conv1.map(f),
            prelu: self.prelu.map(f),
            conv2: self.conv2.map(f),
            gate: self.gate.map(f),
        }
    }
}

pub fn attention_block_forward<E: Element>(
    features: &Tensor<E>,
    p: &AttentionBlockParams<E>,
) -> Result<Tensor<E>> {
    let body = p.conv2.apply(&p.prelu.apply(&p.conv1.apply(features)?)?)?;
    features.add(&gate_forward(&body, &p.gate)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_features(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_gate_at_half() {
        let x = random_features(0, &[2, 8, 4, 4]);
        let cab = CabParams::<f32>::zeros(8, 4).unwrap();
        let sab = SabParams::<f32>::zeros(5);
        let pab = PabParams::<f32>::zeros(8, 4).unwrap();
        for y in [
            cab_forward(&x, &cab).unwrap(),
            sab_forward(&x, &sab).unwrap(),
            pab_forward(&x, &pab).unwrap(),
        ] {
            for (a, b) in y.data().iter().zip(x.data()) {
                assert_eq!(*a, 0.5 * b);
            }
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let mut r = rng(1);
        let x = Tensor::<f32>::zeros(&[1, 8, 4, 4]);
        let cab = CabParams::init(&mut r, 8, 4).unwrap();
        let y = cab_forward(&x, &cab).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_shapes_match_attention_dimensionality() {
        let mut r = rng(2);
        let x = random_features(3, &[2, 8, 6, 5]);
        let cab = CabParams::init(&mut r, 8, 4).unwrap();
        let sab = SabParams::init(&mut r, 5);
        let pab = PabParams::init(&mut r, 8, 4).unwrap();
        assert_eq!(cab_mask(&x, &cab).unwrap().shape(), &[2, 8, 1, 1]);
        assert_eq!(sab_mask(&x, &sab).unwrap().shape(), &[2, 1, 6, 5]);
        assert_eq!(pab_mask(&x, &pab).unwrap().shape(), &[2, 8, 6, 5]);
    }

    #[test]
    fn masks_stay_in_unit_interval() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let x = random_features(200 + seed, &[1, 8, 6, 6]);
            let masks = [
                cab_mask(&x, &CabParams::init(&mut r, 8, 4).unwrap()).unwrap(),
                sab_mask(&x, &SabParams::init(&mut r, 5)).unwrap(),
                pab_mask(&x, &PabParams::init(&mut r, 8, 4).unwrap()).unwrap(),
            ];
            for m in masks {
                assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn output_shape_preserved() {
        let x = random_features(4, &[2, 8, 16, 16]);
        for kind in AttentionKind::ALL {
            let mut r = rng(5);
            let p = AttentionBlockParams::init(&mut r, kind, 8, 4, 5).unwrap();
            assert_eq!(attention_block_forward(&x, &p).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn sab_constant_input_gives_constant_output() {
        let mut r = rng(6);
        let sab = SabParams::init(&mut r, 5);
        let x = Tensor::<f32>::full(&[1, 4, 8, 8], 0.37);
        let y = sab_forward(&x, &sab).unwrap();
        // Interior is exactly constant; borders see zero padding in the 5×5
        // conv, so compare away from the 2-pixel rim.
        let reference = y.data()[2 * 8 + 2];
        for yy in 2..6 {
            for xx in 2..6 {
                assert!((y.data()[yy * 8 + xx] - reference).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pab_and_cab_have_equal_param_counts_but_different_mask_sizes() {
        let mut r = rng(7);
        let cab = CabParams::<f32>::init(&mut r, 8, 4).unwrap();
        let pab = PabParams::<f32>::init(&mut r, 8, 4).unwrap();
        let count = |g: &GateParams<f32>| {
            let mut n = 0;
            g.visit("", &mut |_, t| n += t.numel());
            n
        };
        assert_eq!(count(&GateParams::Channel(cab.clone())), count(&GateParams::Pixel(pab.clone())));
        let x = random_features(8, &[1, 8, 6, 6]);
        assert_eq!(cab_mask(&x, &cab).unwrap().numel(), 8);
        assert_eq!(pab_mask(&x, &pab).unwrap().numel(), 8 * 6 * 6);
    }

    #[test]
    fn residual_identity_with_zero_body() {
        let x = random_features(9, &[1, 8, 8, 8]);
        for kind in AttentionKind::ALL {
            let p = AttentionBlockParams::<f32>::zeros(kind, 8, 4, 5).unwrap();
            let y = attention_block_forward(&x, &p).unwrap();
            assert_eq!(y.data(), x.data(), "{kind} block should be identity at zero init");
        }
    }

    #[test]
    fn zero_input_fixpoint_with_random_weights_zero_biases() {
        // Multiplicative gating kills the body output regardless of weights
        // as long as every bias is zero.
        for kind in AttentionKind::ALL {
            let mut r = rng(10);
            let mut p = AttentionBlockParams::<f32>::init(&mut r, kind, 8, 4, 5).unwrap();
            p.visit_mut("", &mut |name, t| {
                if name.ends_with("bias") {
                    *t = Tensor::param(t.shape(), vec![0.0; t.numel()]).unwrap();
                }
            });
            let x = Tensor::<f32>::zeros(&[1, 8, 4, 4]);
            let y = attention_block_forward(&x, &p).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0), "{kind}");
        }
    }

    #[test]
    fn saturated_logits_pass_features_through() {
        // Drive the pre-sigmoid logits to +30: the gate saturates at 1 and
        // the gated output matches its input to 1e-6.
        let x = random_features(11, &[1, 8, 6, 6]);
        let saturate = |g: &mut GateParams<f32>| {
            g.visit_mut("", &mut |name, t| {
                let is_final_bias =
                    (name == "up.bias") || (name == "conv.bias");
                if is_final_bias {
                    *t = Tensor::param(t.shape(), vec![30.0; t.numel()]).unwrap();
                } else {
                    *t = Tensor::param(t.shape(), vec![0.0; t.numel()]).unwrap();
                }
            });
        };
        for kind in AttentionKind::ALL {
            let mut g = GateParams::<f32>::zeros(kind, 8, 4, 5).unwrap();
            saturate(&mut g);
            let y = gate_forward(&x, &g).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reduction_larger_than_channels_rejected() {
        let mut r = rng(12);
        assert!(CabParams::<f32>::init(&mut r, 2, 4).is_err());
        assert!(PabParams::<f32>::init(&mut r, 3, 4).is_err());
    }

    #[test]
    fn block_gradient_check_width_four() {
        // Full finite-difference pass through a width-4 block of each kind.
        for kind in AttentionKind::ALL {
            let mut r = rng(13);
            let p64 = AttentionBlockParams::<f64>::init(&mut r, kind, 4, 4, 5).unwrap();
            let x = {
                let mut rr = rng(14);
                let data = (0..4 * 16).map(|_| rr.gen_range(-1.0..1.0)).collect();
                Tensor::<f64>::from_vec(&[1, 4, 4, 4], data).unwrap()
            };
            let mut flat: Vec<Tensor<f64>> = vec![x.clone()];
            p64.visit("", &mut |_, t| flat.push(t.clone()));
            let f = move |inputs: &[Tensor<f64>]| -> crate::error::Result<Tensor<f64>> {
                let mut it = inputs[1..].iter().cloned();
                let rebuilt = p64.map(&mut |_| it.next().unwrap());
                Ok(attention_block_forward(&inputs[0], &rebuilt)?.mul(&inputs[0])?.mean())
            };
            let report = crate::tensor::grad_check_multi(&f, &flat, 1e-5, usize::MAX).unwrap();
            assert!(report.max_rel_err < 1e-4, "{kind}: rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("c".parse::<AttentionKind>().unwrap(), AttentionKind::Channel);
        assert_eq!("pixel".parse::<AttentionKind>().unwrap(), AttentionKind::Pixel);
        assert_eq!("S".parse::<AttentionKind>().unwrap(), AttentionKind::Spatial);
        assert!("x".parse::<AttentionKind>().is_err());
    }
}
