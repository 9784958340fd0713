//! Cross-cutting property tests: shape contracts under random valid shapes,
//! linear-operator adjoint identities, loss robustness fuzzing, and the
//! translation-consistency smoke test on the full model.

use cmfnet::attention::AttentionKind;
use cmfnet::loss::{psnr, ssim, total_loss, LossConfig, LossKind, SsimConfig};
use cmfnet::model::{cmfnet_forward, CmfnetConfig, CmfnetParams};
use cmfnet::Tensor;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// ⟨A·x, g⟩ must equal ⟨x, Aᵀ·g⟩ for every linear operator; the backward pass
/// provides Aᵀ·g through a probe loss.
#[test]
fn pool_upsample_conv_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..10 {
        let x = Tensor::param(
            &[1, 3, 8, 8],
            random_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0).data().to_vec(),
        )
        .unwrap();

        // avg_pool2
        let y = x.avg_pool2().unwrap();
        let g = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        y.mul(&g).unwrap().sum().backward().unwrap();
        let lhs = dot(y.data(), g.data());
        let rhs = dot(x.data(), &x.grad().unwrap());
        assert!((lhs - rhs).abs() < 1e-5, "avg_pool adjoint trial {trial}: {lhs} vs {rhs}");
        x.zero_grad();

        // upsample_bilinear2x
        let y = x.upsample_bilinear2x().unwrap();
        let g = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        y.mul(&g).unwrap().sum().backward().unwrap();
        let lhs = dot(y.data(), g.data());
        let rhs = dot(x.data(), &x.grad().unwrap());
        assert!((lhs - rhs).abs() < 1e-5, "upsample adjoint trial {trial}: {lhs} vs {rhs}");
        x.zero_grad();

        // conv2d with zero bias (linear in the input)
        let kernel = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let zero_bias = Tensor::zeros(&[2]);
        let y = x.conv2d(&kernel, &zero_bias, 1, 1).unwrap();
        let g = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        y.mul(&g).unwrap().sum().backward().unwrap();
        let lhs = dot(y.data(), g.data());
        let rhs = dot(x.data(), &x.grad().unwrap());
        assert!((lhs - rhs).abs() < 2e-4 * lhs.abs().max(1.0), "conv adjoint trial {trial}: {lhs} vs {rhs}");
        x.zero_grad();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Output shapes follow the convolution arithmetic for any valid setup.
    #[test]
    fn conv_shape_formula_holds(
        b in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 5usize..12,
        w in 5usize..12,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
    ) {
        prop_assume!(h + 2 >= k && w + 2 >= k);
        let pad = (k - 1) / 2;
        prop_assume!((h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0);
        let x = Tensor::<f32>::zeros(&[b, cin, h, w]);
        let kernel = Tensor::<f32>::zeros(&[cout, cin, k, k]);
        let bias = Tensor::<f32>::zeros(&[cout]);
        let y = x.conv2d(&kernel, &bias, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[b, cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }

    /// Pooling, upsampling, channel reductions, and concatenation keep their
    /// advertised shapes.
    #[test]
    fn pool_and_concat_shapes_hold(
        b in 1usize..3,
        c in 1usize..5,
        c2 in 1usize..5,
        h in 1usize..6,
        w in 1usize..6,
    ) {
        let x = Tensor::<f32>::zeros(&[b, c, 2 * h, 2 * w]);
        let shape_of = |t: Tensor<f32>| t.shape().to_vec();
        prop_assert_eq!(shape_of(x.avg_pool2().unwrap()), vec![b, c, h, w]);
        prop_assert_eq!(shape_of(x.upsample_bilinear2x().unwrap()), vec![b, c, 4 * h, 4 * w]);
        prop_assert_eq!(shape_of(x.global_avg_pool().unwrap()), vec![b, c, 1, 1]);
        prop_assert_eq!(shape_of(x.global_max_pool().unwrap()), vec![b, c, 1, 1]);
        prop_assert_eq!(shape_of(x.channel_mean().unwrap()), vec![b, 1, 2 * h, 2 * w]);
        prop_assert_eq!(shape_of(x.channel_max().unwrap()), vec![b, 1, 2 * h, 2 * w]);
        let other = Tensor::<f32>::zeros(&[b, c2, 2 * h, 2 * w]);
        let cat = Tensor::concat_channels(&[x.clone(), other]).unwrap();
        prop_assert_eq!(shape_of(cat.slice_channels(c, c2).unwrap()), vec![b, c2, 2 * h, 2 * w]);
        prop_assert_eq!(shape_of(cat), vec![b, c + c2, 2 * h, 2 * w]);
    }
}

/// No finite input pair may produce a non-finite loss.
#[test]
fn total_loss_never_goes_non_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg_ps = LossConfig::default();
    let cfg_l1 = LossConfig { kind: LossKind::L1, ..LossConfig::default() };
    for trial in 0..1000 {
        // Mix ordinary pairs with adversarial ones: identical, saturated,
        // and large out-of-range values.
        let x = match trial % 4 {
            0 => random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0),
            1 => Tensor::full(&[1, 3, 16, 16], rng.gen_range(0.0..1.0)),
            2 => random_tensor(&mut rng, &[1, 3, 16, 16], -5.0, 5.0),
            _ => random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1e-3),
        };
        let y = if trial % 5 == 0 { x.detach() } else { random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0) };
        for cfg in [&cfg_ps, &cfg_l1] {
            let terms = total_loss(&x, &y, cfg).unwrap();
            assert!(
                terms.total.item().is_finite(),
                "non-finite loss at trial {trial} ({:?})",
                cfg.kind
            );
        }
    }
}

/// ps_loss is nonnegative and zero only at SSIM = 1; edge_loss never drops
/// below ε, with equality only when the Laplacians agree.
#[test]
fn loss_lower_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let y = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let ps = cmfnet::loss::ps_loss(&x, &y, &cfg).unwrap().item();
        assert!(ps > 0.0, "distinct pairs must have positive ps_loss, got {ps}");
        let edge = cmfnet::loss::edge_loss(&x, &y, &cfg).unwrap().item() as f64;
        assert!(edge > 1e-3, "distinct pairs must exceed ε, got {edge}");
    }
    let x = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    assert_eq!(cmfnet::loss::ps_loss(&x, &x, &cfg).unwrap().item(), 0.0);
}

/// PSNR strictly decreases as the perturbation grows.
#[test]
fn psnr_monotone_in_noise_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[1, 3, 12, 12], 0.2, 0.8);
    let noise = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
    let mut prev = f64::INFINITY;
    for level in [0.001f32, 0.003, 0.01, 0.03, 0.1, 0.3] {
        let y = x.add(&noise.scale(level)).unwrap();
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!(p < prev, "psnr did not decrease at noise level {level}: {p} !< {prev}");
        prev = p;
    }
}

/// SSIM stays within [−1, 1] and at 1 only for identical inputs.
#[test]
fn ssim_range_over_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SsimConfig::default();
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let y = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let s = ssim(&x, &y, &cfg).unwrap();
        assert!((-1.0..=1.0).contains(&s), "ssim {s} out of range");
        assert!(s < 1.0, "distinct pairs should not reach 1");
    }
}

/// Shifting the input by a 4-pixel multiple shifts the restored output: the
/// image is pasted at two offsets into a constant canvas (so the global
/// pooling statistics stay identical) and the interiors must agree to 1e-3
/// once an 8-pixel border is cropped to exclude padding effects.
#[test]
fn translation_consistency_smoke() {
    let cfg = CmfnetConfig { width: 4, blocks_per_scale: 1, ..CmfnetConfig::default() };
    let params = CmfnetParams::<f32>::init(&cfg, 11).unwrap().detached();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = cmfnet::data::synthetic_clean(&mut rng, 40, 40);

    let canvas = |y0: usize, x0: usize| -> Tensor<f32> {
        let mut out = vec![0.5f32; 3 * 64 * 64];
        let d = img.data();
        for c in 0..3 {
            for y in 0..40 {
                for x in 0..40 {
                    out[(c * 64 + y0 + y) * 64 + x0 + x] = d[(c * 40 + y) * 40 + x];
                }
            }
        }
        Tensor::from_vec(&[1, 3, 64, 64], out).unwrap()
    };

    let out_a = cmfnet_forward(&canvas(8, 8), &cfg, &params).unwrap();
    let out_b = cmfnet_forward(&canvas(12, 12), &cfg, &params).unwrap();
    let mut worst = 0.0f32;
    for c in 0..3 {
        for y in 8..32 {
            for x in 8..32 {
                let a = out_a.data()[(c * 64 + 8 + y) * 64 + 8 + x];
                let b = out_b.data()[(c * 64 + 12 + y) * 64 + 12 + x];
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-3, "translation inconsistency {worst}");
}

/// The zero-input fixpoint and mask-range invariants hold for every branch
/// kind inside the assembled model too.
#[test]
fn assembled_model_is_finite_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kind in AttentionKind::ALL {
        let cfg = CmfnetConfig {
            width: 4,
            blocks_per_scale: 1,
            branches: vec![kind],
            sc_variant: cmfnet::model::SkipVariant::None,
            ..CmfnetConfig::default()
        };
        let params = CmfnetParams::<f32>::init(&cfg, 14).unwrap().detached();
        let x = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let y = cmfnet_forward(&x, &cfg, &params).unwrap();
        assert!(y.all_finite());
    }
}
