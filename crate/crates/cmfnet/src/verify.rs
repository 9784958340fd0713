//! Finite-difference verification suites over every differentiable
//! component: the three attention blocks, the residual attention module, the
//! mixed skip connection (including its scalar), both loss terms, and the
//! whole model. Everything runs in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block_forward, AttentionBlockParams, AttentionKind};
use crate::error::Result;
use crate::loss::{edge_loss, ps_loss, LossConfig};
use crate::model::{cmfnet_forward, msc_forward, ram_forward, CmfnetConfig, CmfnetParams};
use crate::tensor::{grad_check_multi, Tensor};

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub coords_checked: usize,
}

impl ComponentReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Biases (and θ) initialize to zero, which the harness's kink-skip rule
/// would exclude from the sweep; give them random values so every parameter
/// kind actually gets probed.
fn randomize_zero_leaves(names_and_tensors: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor<f64>)), rng: &mut ChaCha8Rng) {
    names_and_tensors(&mut |_name, t| {
        if t.data().iter().all(|&v| v == 0.0) {
            let fresh: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            *t = Tensor::param(t.shape(), fresh).unwrap();
        }
    });
}

fn block_report(
    name: &'static str,
    kind: AttentionKind,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ComponentReport> {
    let mut params = AttentionBlockParams::<f64>::init(rng, kind, width, 4.min(width), 5)?;
    randomize_zero_leaves(&mut |f| params.visit_mut("", f), rng);
    let x = random_tensor(rng, &[1, width, 6, 6], -1.0, 1.0);
    let probe = random_tensor(rng, &[1, width, 6, 6], -1.0, 1.0);
    let mut flat = vec![x];
    params.visit("", &mut |_, t| flat.push(t.clone()));
    let f = move |inputs: &[Tensor<f64>]| {
        let mut it = inputs[1..].iter().cloned();
        let rebuilt = params.map(&mut |_| it.next().unwrap());
        Ok(attention_block_forward(&inputs[0], &rebuilt)?.mul(&probe)?.mean())
    };
    let out = grad_check_multi(&f, &flat, 1e-5, usize::MAX)?;
    Ok(ComponentReport { name, max_rel_err: out.max_rel_err, threshold: 1e-4, coords_checked: out.coords_checked })
}

/// Run every suite; deterministic in (width, seed).
pub fn run_gradient_suite(width: usize, seed: u64) -> Result<Vec<ComponentReport>> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    reports.push(block_report("cab_block", AttentionKind::Channel, width, &mut rng)?);
    reports.push(block_report("sab_block", AttentionKind::Spatial, width, &mut rng)?);
    reports.push(block_report("pab_block", AttentionKind::Pixel, width, &mut rng)?);

    // Residual attention module: gradient through both outputs.
    {
        let mut params = crate::model::RamParams::<f64>::init(&mut rng, width);
        randomize_zero_leaves(&mut |f| params.visit_mut("", f), &mut rng);
        let feats = random_tensor(&mut rng, &[1, width, 8, 8], -1.0, 1.0);
        let degraded = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
        let probe_f = random_tensor(&mut rng, &[1, width, 8, 8], -1.0, 1.0);
        let probe_i = random_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
        let mut flat = vec![feats, degraded];
        params.visit("", &mut |_, t| flat.push(t.clone()));
        let f = move |inputs: &[Tensor<f64>]| {
            let mut it = inputs[2..].iter().cloned();
            let rebuilt = params.map(&mut |_| it.next().unwrap());
            let out = ram_forward(&inputs[0], &inputs[1], &rebuilt)?;
            out.features.mul(&probe_f)?.mean().add(&out.image.mul(&probe_i)?.mean())
        };
        let out = grad_check_multi(&f, &flat, 1e-5, usize::MAX)?;
        reports.push(ComponentReport { name: "ram", max_rel_err: out.max_rel_err, threshold: 1e-4, coords_checked: out.coords_checked });
    }

    // Mixed skip connection, including the scalar θ.
    {
        let shapes = [1, 3, 8, 8];
        let i_c = random_tensor(&mut rng, &shapes, 0.0, 1.0);
        let i_p = random_tensor(&mut rng, &shapes, 0.0, 1.0);
        let i_s = random_tensor(&mut rng, &shapes, 0.0, 1.0);
        let probe = random_tensor(&mut rng, &shapes, -1.0, 1.0);
        let theta = Tensor::from_vec(&[1], vec![rng.gen_range(-1.5..1.5)]).unwrap();
        let f = move |inputs: &[Tensor<f64>]| {
            Ok(msc_forward(&inputs[0], &inputs[1], &inputs[2], &inputs[3])?.mul(&probe)?.mean())
        };
        let out = grad_check_multi(&f, &[i_c, i_p, i_s, theta], 1e-6, usize::MAX)?;
        reports.push(ComponentReport { name: "msc", max_rel_err: out.max_rel_err, threshold: 1e-4, coords_checked: out.coords_checked });
    }

    // Loss terms against a fixed target.
    {
        let cfg = LossConfig::default();
        let y = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let x = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let y_ps = y.clone();
        let f_ps = move |inputs: &[Tensor<f64>]| ps_loss(&inputs[0], &y_ps, &cfg);
        let out = grad_check_multi(&f_ps, std::slice::from_ref(&x), 1e-6, usize::MAX)?;
        reports.push(ComponentReport { name: "ps_loss", max_rel_err: out.max_rel_err, threshold: 1e-4, coords_checked: out.coords_checked });

        let f_edge = move |inputs: &[Tensor<f64>]| edge_loss(&inputs[0], &y, &cfg);
        let out = grad_check_multi(&f_edge, &[x], 1e-6, usize::MAX)?;
        reports.push(ComponentReport { name: "edge_loss", max_rel_err: out.max_rel_err, threshold: 1e-4, coords_checked: out.coords_checked });
    }

    // Full model over every parameter tensor, sampled coordinates.
    {
        let cfg = CmfnetConfig { width, ..CmfnetConfig::default() };
        cfg.validate()?;
        let mut params = CmfnetParams::<f64>::init(&cfg, seed ^ 0xABCD)?;
        randomize_zero_leaves(&mut |f| params.visit_mut(f), &mut rng);
        let params = params;
        let x = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
        let probe = random_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
        let mut flat = Vec::new();
        params.visit(&mut |_, t| flat.push(t.clone()));
        let f = move |inputs: &[Tensor<f64>]| {
            let rebuilt = params.with_tensors(inputs);
            Ok(cmfnet_forward(&x, &cfg, &rebuilt)?.mul(&probe)?.mean())
        };
        let out = grad_check_multi(&f, &flat, 1e-5, 3)?;
        reports.push(ComponentReport { name: "full_model", max_rel_err: out.max_rel_err, threshold: 1e-3, coords_checked: out.coords_checked });
    }

    Ok(reports)
}
