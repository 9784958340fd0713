//! Mixed skip connection: a learnable convex combination of the three branch
//! images, plus the fixed-weight average used by the ablation variants.
//!
//! Both are evaluated in residual form, `base + Σ wᵢ·(Iᵢ − base)`, which is
//! algebraically identical to the weighted sum (the weights total 1) but
//! returns the base image bit-exactly when all inputs coincide. That keeps
//! the zero-initialized network an exact identity.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check_same_shapes<E: Element>(images: &[&Tensor<E>], op: &'static str) -> Result<()> {
    for pair in images.windows(2) {
        if pair[0].shape() != pair[1].shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", pair[0].shape(), pair[1].shape()),
            ));
        }
    }
    Ok(())
}

/// Skip-connection weights ((1−a)/2, a, (1−a)/2) with a = sigmoid(θ).
pub fn msc_weights<E: Element>(theta: E) -> (E, E, E) {
    let a = E::one() / (E::one() + (-theta).exp());
    let side = (E::one() - a) / E::from_f64(2.0);
    (side, a, side)
}

/// I_R = ((1−a)/2)·I_C + a·I_P + ((1−a)/2)·I_S with a = sigmoid(θ),
/// differentiable in θ and in all three images.
pub fn msc_forward<E: Element>(
    i_c: &Tensor<E>,
    i_p: &Tensor<E>,
    i_s: &Tensor<E>,
    theta: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_same_shapes(&[i_c, i_p, i_s], "msc_forward")?;
    if theta.numel() != 1 {
        return Err(Error::shape("msc_forward", format!("theta must be scalar, got {:?}", theta.shape())));
    }
    let a = theta.sigmoid();
    // side = (1 − a)/2
    let side = a.neg().add_scalar(E::one()).scale(E::from_f64(0.5));
    let c_term = i_c.sub(i_p)?.mul(&side)?;
    let s_term = i_s.sub(i_p)?.mul(&side)?;
    i_p.add(&c_term)?.add(&s_term)
}

/// Average of the branch images relative to `base`: exact when all images
/// are identical. `base` indexes into `images`.
pub fn mean_residual<E: Element>(images: &[Tensor<E>], base: usize) -> Result<Tensor<E>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("mean_residual: no images".into()));
    }
    let refs: Vec<&Tensor<E>> = images.iter().collect();
    check_same_shapes(&refs, "mean_residual")?;
    let base_img = &images[base];
    if images.len() == 1 {
        return Ok(base_img.clone());
    }
    let mut diff_sum: Option<Tensor<E>> = None;
    for (i, img) in images.iter().enumerate() {
        if i == base {
            continue;
        }
        let d = img.sub(base_img)?;
        diff_sum = Some(match diff_sum {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
    }
    base_img.add(&diff_sum.unwrap().scale(E::one() / E::from_usize(images.len())))
}

/// Fixed-weight skip connection: the unweighted average (I_C + I_P + I_S)/3,
/// i.e. the mixed connection with a forced to 1/3.
pub fn asc_forward<E: Element>(i_c: &Tensor<E>, i_p: &Tensor<E>, i_s: &Tensor<E>) -> Result<Tensor<E>> {
    mean_residual(&[i_c.clone(), i_p.clone(), i_s.clone()], 1)
}
