//! Finite-difference verification of the backward pass.
//!
//! Checks always run in `f64`: central differences in `f32` carry too much
//! roundoff to distinguish a wrong gradient from noise at the 1e-4 gate.

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOutcome {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients of a scalar-valued `f` against central
/// differences at `base`, for every input tensor.
///
/// Per coordinate the error is |analytic − numeric| / max(1e-8, |analytic| +
/// |numeric|). Coordinates with |x| < eps are skipped so the difference
/// quotient never straddles a ReLU/PReLU kink sitting at zero. For large
/// inputs at most `max_coords_per_input` evenly strided coordinates are
/// probed.
pub fn grad_check_multi(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    base: &[Tensor<f64>],
    eps: f64,
    max_coords_per_input: usize,
) -> Result<GradCheckOutcome> {
    let leaves: Vec<Tensor<f64>> = base
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> { Ok(f(inputs)?.item()) };

    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0usize;
    for (ti, t) in base.iter().enumerate() {
        let n = t.numel();
        let stride = if max_coords_per_input == usize::MAX || n <= max_coords_per_input {
            1
        } else {
            n.div_ceil(max_coords_per_input)
        };
        for idx in (0..n).step_by(stride) {
            let x0 = t.data()[idx];
            if x0.abs() < eps {
                continue;
            }
            let probe = |delta: f64| -> Result<f64> {
                let inputs: Vec<Tensor<f64>> = base
                    .iter()
                    .enumerate()
                    .map(|(tj, tt)| {
                        if tj == ti {
                            let mut d = tt.data().to_vec();
                            d[idx] += delta;
                            Tensor::from_vec(tt.shape(), d)
                        } else {
                            Ok(tt.clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                eval(&inputs)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let a = analytic[ti][idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max(rel);
            coords_checked += 1;
        }
    }
    Ok(GradCheckOutcome { max_rel_err, coords_checked })
}

/// Single-input convenience wrapper; returns the worst relative error.
pub fn grad_check(
    f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    point: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    let multi = |xs: &[Tensor<f64>]| f(&xs[0]);
    Ok(grad_check_multi(&multi, std::slice::from_ref(point), eps, usize::MAX)?.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_is_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let point = random_tensor(&mut rng, &[2, 3]);
        let err = grad_check(&|x| Ok(x.mul(x)?.sum()), &point, 1e-6).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn conv_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernel = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let bias = random_tensor(&mut rng, &[2]);
        let point = random_tensor(&mut rng, &[1, 1, 6, 6]);
        let err = grad_check(
            &|x| Ok(x.conv2d(&kernel, &bias, 1, 1)?.sigmoid().mean()),
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn constant_function_has_no_gradient() {
        let point = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(&|_x| Ok(Tensor::scalar(2.5)), &point, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_op_passes_at_random_points() {
        // One composite graph per op family, 10 random points each.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        type F = Box<dyn Fn(&Tensor<f64>) -> crate::error::Result<Tensor<f64>>>;
        let aux = random_tensor(&mut rng, &[1, 2, 4, 4]);
        let slope = random_tensor(&mut rng, &[2]);
        let cases: Vec<(&str, Vec<usize>, F)> = vec![
            ("add", vec![1, 2, 4, 4], {
                let aux = aux.clone();
                Box::new(move |x: &Tensor<f64>| Ok(x.add(&aux)?.mul(x)?.mean()))
            }),
            ("sub_div", vec![1, 2, 4, 4], {
                let aux = aux.clone();
                Box::new(move |x: &Tensor<f64>| Ok(x.sub(&aux)?.div(&x.mul(x)?.add_scalar(2.0))?.mean()))
            }),
            ("relu", vec![1, 2, 4, 4], Box::new(|x| Ok(x.relu().mul(x)?.mean()))),
            ("prelu", vec![1, 2, 4, 4], {
                let slope = slope.clone();
                Box::new(move |x| Ok(x.prelu(&slope)?.mean()))
            }),
            ("sigmoid", vec![1, 2, 4, 4], Box::new(|x| Ok(x.sigmoid().mean()))),
            ("sqrt_ln", vec![6], Box::new(|x| Ok(x.mul(x)?.add_scalar(1.5).sqrt().ln().sum()))),
            ("abs", vec![6], Box::new(|x| Ok(x.abs().mean()))),
            ("clamp_min", vec![6], Box::new(|x| Ok(x.clamp_min(0.25).sum()))),
            ("avg_pool2", vec![1, 2, 4, 4], Box::new(|x| Ok(x.avg_pool2()?.mul(&x.avg_pool2()?)?.sum()))),
            ("upsample", vec![1, 2, 3, 3], Box::new(|x| Ok(x.upsample_bilinear2x()?.mul(&x.upsample_bilinear2x()?)?.mean()))),
            ("gap", vec![1, 2, 4, 4], Box::new(|x| Ok(x.global_avg_pool()?.mul(&x.global_avg_pool()?)?.sum()))),
            ("gmp", vec![1, 2, 4, 4], Box::new(|x| Ok(x.global_max_pool()?.sum()))),
            ("channel_mean", vec![1, 3, 3, 3], Box::new(|x| Ok(x.channel_mean()?.mul(&x.channel_mean()?)?.sum()))),
            ("channel_max", vec![1, 3, 3, 3], Box::new(|x| Ok(x.channel_max()?.sum()))),
            ("concat_slice", vec![1, 2, 3, 3], {
                Box::new(move |x: &Tensor<f64>| {
                    let both = Tensor::concat_channels(&[x.clone(), x.mul(x)?])?;
                    Ok(both.slice_channels(1, 2)?.mean())
                })
            }),
        ];
        for (name, shape, f) in &cases {
            for trial in 0..10 {
                let point = random_tensor(&mut rng, shape);
                let err = grad_check(f.as_ref(), &point, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn detach_fixture_is_caught() {
        // Deliberately inconsistent gradient: the detached factor hides half
        // of d/dx [x·x], so the harness must report a large error.
        let point = Tensor::from_vec(&[4], vec![0.9, -0.4, 1.3, 0.7]).unwrap();
        let err = grad_check(&|x| Ok(x.mul(&x.detach())?.sum()), &point, 1e-5).unwrap();
        assert!(err > 0.3, "broken gradient should be flagged, got {err}");
    }
}
