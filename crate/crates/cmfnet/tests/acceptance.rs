//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values. Criterion 7 (the ablation-direction experiment) is
//! marked `#[ignore]` for runtime; run it with `cargo test --test acceptance
//! -- --ignored`.

use cmfnet::attention::AttentionKind;
use cmfnet::data::{
    synth_blur, synth_haze, synthetic_clean, synthetic_pairs, BlurParams, DegradationKind,
    HazeRecipe, ImagePair,
};
use cmfnet::loss::{
    edge_loss, ps_loss, ssim, total_loss, LossConfig, LossKind, SsimConfig,
};
use cmfnet::model::{
    cmfnet_forward, msc_weights, CmfnetConfig, CmfnetParams, SkipVariant,
};
use cmfnet::train::{
    eval_holdout, train_from_scratch, train_loop, Checkpoint, Dataset, Schedule, TrainConfig,
    TrainState,
};
use cmfnet::verify::run_gradient_suite;
use cmfnet::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Criterion 1: finite-difference relative error < 1e-4 for the attention
/// blocks, RAM, MSC (incl. θ), PS loss, and edge loss; < 1e-3 for the full
/// width-4 model on an 8×8 input.
#[test]
fn criterion_1_gradient_suite() {
    let reports = run_gradient_suite(4, 0).unwrap();
    for r in &reports {
        assert!(
            r.pass(),
            "criterion 1 FAIL: {} rel err {:.3e} over threshold {:.0e}",
            r.name,
            r.max_rel_err,
            r.threshold
        );
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    println!("criterion 1 PASS: gradient suite, worst rel err {worst:.3e} over {} components", reports.len());
}

/// Criterion 2: with all parameters zero, the forward pass is the identity,
/// exactly, for every SC variant and branch subset.
#[test]
fn criterion_2_zero_init_passthrough() {
    let x = random_image(2, &[2, 3, 8, 8]);
    let subsets: Vec<Vec<AttentionKind>> = vec![
        vec![AttentionKind::Channel],
        vec![AttentionKind::Pixel],
        vec![AttentionKind::Spatial],
        vec![AttentionKind::Channel, AttentionKind::Pixel],
        vec![AttentionKind::Channel, AttentionKind::Spatial],
        vec![AttentionKind::Pixel, AttentionKind::Spatial],
        AttentionKind::ALL.to_vec(),
    ];
    let mut cases = 0;
    for sc in [SkipVariant::None, SkipVariant::Asc, SkipVariant::Msc] {
        for branches in &subsets {
            if sc == SkipVariant::Msc && branches.len() != 3 {
                continue;
            }
            for blocks in [1usize, 3] {
                let cfg = CmfnetConfig {
                    width: 4,
                    blocks_per_scale: blocks,
                    branches: branches.clone(),
                    sc_variant: sc,
                    ..CmfnetConfig::default()
                };
                let params = CmfnetParams::<f32>::zeros(&cfg).unwrap();
                let y = cmfnet_forward(&x, &cfg, &params).unwrap();
                assert_eq!(
                    y.data(),
                    x.data(),
                    "criterion 2 FAIL: {sc} with {branches:?}, {blocks} blocks not exact"
                );
                cases += 1;
            }
        }
    }
    println!("criterion 2 PASS: zero-init passthrough exact over {cases} variant/subset cases");
}

/// Criterion 3: skip-connection weights form a simplex for 1000 θ values in
/// [−50, 50]; θ = 0 gives exactly (0.25, 0.5, 0.25).
#[test]
fn criterion_3_msc_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f32 = 0.0;
    for _ in 0..1000 {
        let theta = rng.gen_range(-50.0f32..50.0);
        let (wc, a, ws) = msc_weights(theta);
        assert!(wc >= 0.0 && a >= 0.0 && ws >= 0.0, "criterion 3 FAIL: negative weight at θ={theta}");
        let gap = ((wc + a + ws) - 1.0).abs();
        assert!(gap < 1e-7, "criterion 3 FAIL: weight sum off by {gap} at θ={theta}");
        worst = worst.max(gap);
    }
    assert_eq!(msc_weights(0.0f32), (0.25, 0.5, 0.25), "criterion 3 FAIL: θ=0 not exact");
    println!("criterion 3 PASS: simplex over 1000 θ values, worst sum error {worst:.2e}; θ=0 exact");
}

/// Criterion 4: X == Y gives ps_loss = 0, edge_loss = 1e-3, and
/// total_loss = 5e-5, each within 1e-9.
#[test]
fn criterion_4_loss_fixpoints() {
    let x = random_image(4, &[1, 3, 16, 16]);
    let cfg = LossConfig::default();
    let ps = ps_loss(&x, &x, &cfg).unwrap().item() as f64;
    let edge = edge_loss(&x, &x, &cfg).unwrap().item() as f64;
    assert!(ps.abs() < 1e-9, "criterion 4 FAIL: ps_loss {ps}");
    assert!((edge - 1e-3).abs() < 1e-9, "criterion 4 FAIL: edge_loss {edge}");
    for kind in [LossKind::Ps, LossKind::L1] {
        let cfg = LossConfig { kind, ..LossConfig::default() };
        let total = total_loss(&x, &x, &cfg).unwrap().total.item() as f64;
        assert!((total - 5e-5).abs() < 1e-9, "criterion 4 FAIL: {kind} total {total}");
    }
    println!("criterion 4 PASS: loss fixpoints ps={ps:.1e}, edge={edge:.6e}, totals at 5e-5");
}

/// Straightforward direct-formula SSIM, written independently of the tensor
/// path: explicit window loops over per-window statistics in f64.
fn ssim_oracle(x: &[f32], y: &[f32], c: usize, h: usize, w: usize) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut window = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            total += *v;
        }
    }
    for row in window.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    for ci in 0..c {
        let plane = ci * h * w;
        for oy in 0..h - WIN + 1 {
            for ox in 0..w - WIN + 1 {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let idx = plane + (oy + i) * w + ox + j;
                        mx += window[i][j] * x[idx] as f64;
                        my += window[i][j] * y[idx] as f64;
                    }
                }
                let (mut vx, mut vy, mut vxy) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let idx = plane + (oy + i) * w + ox + j;
                        let dx = x[idx] as f64 - mx;
                        let dy = y[idx] as f64 - my;
                        vx += window[i][j] * dx * dx;
                        vy += window[i][j] * dy * dy;
                        vxy += window[i][j] * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + C1) * (2.0 * vxy + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Criterion 5: the library SSIM matches the independent oracle to 1e-6 on
/// 20 random 32×32 pairs; ssim(X,X) = 1 exactly; the constant-image case
/// hits C1/(1+C1) within 1e-9.
#[test]
fn criterion_5_ssim_oracle_equivalence() {
    let cfg = SsimConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let x = random_image(100 + seed, &[1, 3, 32, 32]);
        let y = random_image(200 + seed, &[1, 3, 32, 32]);
        let lib = ssim(&x, &y, &cfg).unwrap();
        let oracle = ssim_oracle(x.data(), y.data(), 3, 32, 32);
        let diff = (lib - oracle).abs();
        assert!(diff < 1e-6, "criterion 5 FAIL: pair {seed} lib {lib} vs oracle {oracle}");
        worst = worst.max(diff);
    }
    let x = random_image(5, &[1, 3, 16, 16]);
    assert_eq!(ssim(&x, &x, &cfg).unwrap(), 1.0, "criterion 5 FAIL: ssim(X,X) not exactly 1");
    let zero = Tensor::zeros(&[1, 1, 16, 16]);
    let one = Tensor::ones(&[1, 1, 16, 16]);
    let constant = ssim(&zero, &one, &cfg).unwrap();
    let expected = 1e-4 / (1.0 + 1e-4);
    assert!(
        (constant - expected).abs() < 1e-9,
        "criterion 5 FAIL: constant case {constant} vs {expected}"
    );
    println!("criterion 5 PASS: SSIM oracle equivalence, worst disagreement {worst:.2e}");
}

/// Pinned setting for the overfitting experiment (criterion 6); also reused
/// as the strong arm of criterion 7.
fn overfit_config(seed: u64, iters: usize) -> TrainConfig {
    let model = CmfnetConfig { width: 8, ..CmfnetConfig::default() };
    TrainConfig {
        model,
        loss: LossConfig::default(),
        schedule: Schedule::cosine_default(iters).unwrap(),
        batch_size: 1,
        patch: 64,
        iters,
        seed,
        log_every: 250,
        eval_every: 500,
        checkpoint_every: 0,
        clip_norm: None,
    }
}

/// Criterion 6: a width-8 model (MSC, PS loss) overfits one synthetic-haze
/// 64×64 pair to PSNR ≥ 28 dB and SSIM ≥ 0.90 within 2000 iterations.
#[test]
fn criterion_6_overfit_smoke() {
    let pairs = synthetic_pairs(DegradationKind::Haze, 1, 64, 41).unwrap();
    let data = Dataset::from_pairs(pairs).unwrap();
    let cfg = overfit_config(0, 2000);
    let (state, log) = train_from_scratch(&cfg, &data, None, None).unwrap();
    let loss_at = |step: usize| {
        log.iter()
            .find(|e| e.step == step)
            .unwrap_or_else(|| panic!("no log entry at step {step}"))
            .loss
    };
    assert!(
        loss_at(500) < loss_at(0),
        "criterion 6 FAIL: loss did not decrease ({} at step 500 vs {} at step 0)",
        loss_at(500),
        loss_at(0)
    );
    let (psnr, ssim) = eval_holdout(&state.params, &cfg.model, &data.holdout).unwrap();
    assert!(psnr >= 28.0, "criterion 6 FAIL: PSNR {psnr:.2} dB below 28");
    assert!(ssim >= 0.90, "criterion 6 FAIL: SSIM {ssim:.4} below 0.90");
    println!("criterion 6 PASS: overfit reached {psnr:.2} dB / SSIM {ssim:.4} in {} iters", cfg.iters);
}

fn mean_psnr_over_pairs(params: &cmfnet::model::CmfnetParams<f32>, model: &CmfnetConfig, pairs: &[ImagePair]) -> f64 {
    let mut sum = 0.0;
    for p in pairs {
        let (psnr, _) = eval_holdout(params, model, p).unwrap();
        sum += psnr;
    }
    sum / pairs.len() as f64
}

/// Criterion 7 (slow, optional): on a fixed 20-pair synthetic-haze set, the
/// 3-branch MSC configuration reaches mean PSNR at least as high as the
/// single-branch channel-attention configuration, by majority over 3 seeds.
#[test]
#[ignore = "ablation experiment, ~1h on a small CPU"]
fn criterion_7_ablation_direction() {
    let pairs = synthetic_pairs(DegradationKind::Haze, 20, 64, 777).unwrap();
    let mut wins = 0;
    let mut detail = String::new();
    for seed in [1u64, 2, 3] {
        let strong_cfg = TrainConfig { batch_size: 2, ..overfit_config(seed, 2000) };
        let data = Dataset::from_pairs(pairs.clone()).unwrap();
        let (strong_state, _) = train_from_scratch(&strong_cfg, &data, None, None).unwrap();
        let strong = mean_psnr_over_pairs(&strong_state.params, &strong_cfg.model, &pairs);

        let weak_model = CmfnetConfig {
            width: 8,
            branches: vec![AttentionKind::Channel],
            sc_variant: SkipVariant::None,
            ..CmfnetConfig::default()
        };
        let weak_cfg = TrainConfig {
            model: weak_model,
            loss: LossConfig { kind: LossKind::L1, ..LossConfig::default() },
            batch_size: 2,
            ..overfit_config(seed, 2000)
        };
        let (weak_state, _) = train_from_scratch(&weak_cfg, &data, None, None).unwrap();
        let weak = mean_psnr_over_pairs(&weak_state.params, &weak_cfg.model, &pairs);

        detail.push_str(&format!("seed {seed}: 3-branch {strong:.2} dB vs 1-branch {weak:.2} dB; "));
        if strong >= weak {
            wins += 1;
        }
    }
    assert!(wins >= 2, "criterion 7 FAIL: 3-branch won only {wins}/3 seeds ({detail})");
    println!("criterion 7 PASS: 3-branch ≥ 1-branch on {wins}/3 seeds ({detail})");
}

/// Criterion 8: identical seeds give bit-identical loss logs, and training
/// through a checkpoint matches an uninterrupted run to 0 ulps.
#[test]
fn criterion_8_determinism_and_resume() {
    let pairs = synthetic_pairs(DegradationKind::Haze, 3, 32, 9).unwrap();
    let data = Dataset::from_pairs(pairs).unwrap();
    let model = CmfnetConfig {
        width: 4,
        blocks_per_scale: 1,
        ..CmfnetConfig::default()
    };
    let cfg = TrainConfig {
        model,
        loss: LossConfig::default(),
        schedule: Schedule::cosine_default(40).unwrap(),
        batch_size: 2,
        patch: 32,
        iters: 40,
        seed: 5,
        log_every: 1,
        eval_every: 20,
        checkpoint_every: 0,
        clip_norm: None,
    };

    let (full_state, log_a) = train_from_scratch(&cfg, &data, None, None).unwrap();
    let (_, log_b) = train_from_scratch(&cfg, &data, None, None).unwrap();
    assert_eq!(log_a, log_b, "criterion 8 FAIL: same-seed logs differ");

    let half = TrainConfig { iters: 20, ..cfg.clone() };
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("half.ckpt");
    train_from_scratch(&half, &data, Some(&ckpt_path), None).unwrap();
    let mut resumed = TrainState::from_checkpoint(&Checkpoint::read(&ckpt_path).unwrap()).unwrap();
    train_loop(&cfg, &data, &mut resumed, None).unwrap();
    for ((name, a), (_, b)) in full_state.params.named().iter().zip(resumed.params.named().iter()) {
        assert_eq!(a.data(), b.data(), "criterion 8 FAIL: {name} differs after resume");
    }
    println!(
        "criterion 8 PASS: {} log rows bit-identical; resume exact over {} tensors",
        log_a.len(),
        full_state.params.named().len()
    );
}

/// Criterion 9: formation-model limits are exact (m≡1, m≡0, identity blur)
/// and the constant-transmission haze inverts algebraically to 1e-6.
#[test]
fn criterion_9_formation_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let clean = synthetic_clean(&mut rng, 24, 24);

    let clear = HazeRecipe::constant(1.0, [0.8, 0.7, 0.9]).expand(24, 24).unwrap();
    assert_eq!(
        synth_haze(&clean, &clear).unwrap().data(),
        clean.data(),
        "criterion 9 FAIL: m≡1 not exact"
    );

    let opaque = HazeRecipe::constant(0.0, [0.8, 0.7, 0.9]).expand(24, 24).unwrap();
    let hazed = synth_haze(&clean, &opaque).unwrap();
    let plane = 24 * 24;
    for c in 0..3 {
        let a = [0.8, 0.7, 0.9][c];
        assert!(
            hazed.data()[c * plane..(c + 1) * plane].iter().all(|&v| v == a),
            "criterion 9 FAIL: m≡0 does not give pure atmosphere"
        );
    }

    let blurred = synth_blur(&clean, &BlurParams::identity(), &mut rng).unwrap();
    assert_eq!(blurred.data(), clean.data(), "criterion 9 FAIL: identity blur not exact");

    let (c, a) = (0.55f32, 0.82f32);
    let p = HazeRecipe::constant(c, [a; 3]).expand(24, 24).unwrap();
    let degraded = synth_haze(&clean, &p).unwrap();
    let mut worst = 0.0f32;
    for (orig, deg) in clean.data().iter().zip(degraded.data()) {
        let recovered = (deg - a * (1.0 - c)) / c;
        worst = worst.max((recovered - orig).abs());
    }
    assert!(worst < 1e-6, "criterion 9 FAIL: inversion error {worst}");
    println!("criterion 9 PASS: formation limits exact, inversion error {worst:.2e}");
}
