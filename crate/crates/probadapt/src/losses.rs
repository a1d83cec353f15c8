//! Training losses: soft dice over per-pixel weights, the KL divergence
//! between the two latent Gaussians, and their analytic gradients.
//!
//! Everything here is checked against independent oracles in the tests:
//! gradients against central finite differences, the KL against 1-D
//! numerical quadrature of its defining integral.

use crate::error::{Error, Result};
use crate::model::{GaussianGrad, LatentGaussian};
use ndarray::{Array2, Array3};

/// Smoothing constant in both the numerator and denominator of the dice
/// ratio. With it, two empty masks score a perfect 1 instead of 0/0.
pub const DICE_EPSILON: f64 = 1e-6;

fn check_dice_inputs(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: Option<&Array2<f64>>,
) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape_mismatch("dice inputs", pred.dim(), target.dim()));
    }
    let (_, h, w) = pred.dim();
    if let Some(wt) = weights {
        if wt.dim() != (h, w) {
            return Err(Error::shape_mismatch("dice weights", (h, w), wt.dim()));
        }
        if wt.iter().any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput("dice weights must lie in [0, 1]".into()));
        }
    }
    for v in pred.iter().chain(target.iter()) {
        if !v.is_finite() || !(0.0..=1.0).contains(v) {
            return Err(Error::InvalidInput(
                "dice operands must be probabilities in [0, 1]".into(),
            ));
        }
    }
    Ok(())
}

/// Soft dice overlap, averaged over classes:
/// `(2 Σ w·p·t + eps) / (Σ w·p + Σ w·t + eps)` per class plane.
/// `weights` masks or down-weights pixels; `None` means weight 1 everywhere.
pub fn dice_score(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: Option<&Array2<f64>>,
) -> Result<f64> {
    check_dice_inputs(pred, target, weights)?;
    let (classes, h, w) = pred.dim();
    let mut total = 0.0;
    for c in 0..classes {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wt = weights.map_or(1.0, |m| m[[i, j]]);
                let p = pred[[c, i, j]];
                let t = target[[c, i, j]];
                inter += wt * p * t;
                psum += wt * p;
                tsum += wt * t;
            }
        }
        total += (2.0 * inter + DICE_EPSILON) / (psum + tsum + DICE_EPSILON);
    }
    Ok(total / classes as f64)
}

/// `1 - dice_score`; the reconstruction loss.
pub fn dice_error(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: Option<&Array2<f64>>,
) -> Result<f64> {
    Ok(1.0 - dice_score(pred, target, weights)?)
}

/// Gradient of [`dice_error`] with respect to `pred`. Pixels with zero
/// weight receive an exactly zero gradient.
pub fn dice_error_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: Option<&Array2<f64>>,
) -> Result<Array3<f64>> {
    check_dice_inputs(pred, target, weights)?;
    let (classes, h, w) = pred.dim();
    let mut grad = Array3::zeros(pred.dim());
    for c in 0..classes {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wt = weights.map_or(1.0, |m| m[[i, j]]);
                inter += wt * pred[[c, i, j]] * target[[c, i, j]];
                psum += wt * pred[[c, i, j]];
                tsum += wt * target[[c, i, j]];
            }
        }
        let num = 2.0 * inter + DICE_EPSILON;
        let den = psum + tsum + DICE_EPSILON;
        // d(num/den)/dp = (2·w·t·den - num·w) / den²; dice_error negates it
        // and the class mean scales by 1/classes
        let scale = -1.0 / classes as f64;
        for i in 0..h {
            for j in 0..w {
                let wt = weights.map_or(1.0, |m| m[[i, j]]);
                let t = target[[c, i, j]];
                grad[[c, i, j]] = scale * wt * (2.0 * t * den - num) / (den * den);
            }
        }
    }
    Ok(grad)
}

fn check_gaussian_pair(q: &LatentGaussian, p: &LatentGaussian) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::shape_mismatch("kl gaussians", q.dim(), p.dim()));
    }
    Ok(())
}

/// `KL(q ‖ p)` between diagonal Gaussians, summed over dimensions:
/// `0.5 Σ_d exp(lv_q - lv_p) + (mu_p - mu_q)² / exp(lv_p) - 1 + lv_p - lv_q`.
pub fn kl_diag_gaussians(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    check_gaussian_pair(q, p)?;
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let lvq = q.log_variance[d];
        let lvp = p.log_variance[d];
        let dm = p.mean[d] - q.mean[d];
        kl += 0.5 * ((lvq - lvp).exp() + dm * dm * (-lvp).exp() - 1.0 + lvp - lvq);
    }
    Ok(kl)
}

/// Gradients of [`kl_diag_gaussians`] with respect to `q` and `p`.
pub fn kl_gradients(q: &LatentGaussian, p: &LatentGaussian) -> Result<(GaussianGrad, GaussianGrad)> {
    check_gaussian_pair(q, p)?;
    let d = q.dim();
    let mut gq = GaussianGrad::zeros(d);
    let mut gp = GaussianGrad::zeros(d);
    for i in 0..d {
        let lvq = q.log_variance[i];
        let lvp = p.log_variance[i];
        let inv_vp = (-lvp).exp();
        let ratio = (lvq - lvp).exp();
        let dm = p.mean[i] - q.mean[i];
        gq.mean[i] = -dm * inv_vp;
        gq.log_variance[i] = 0.5 * (ratio - 1.0);
        gp.mean[i] = dm * inv_vp;
        gp.log_variance[i] = 0.5 * (1.0 - ratio - dm * dm * inv_vp);
    }
    Ok((gq, gp))
}

/// One loss evaluation, split into its parts. `total` is always
/// `reconstruction + beta * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl LossValue {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.reconstruction.is_finite() && self.kl.is_finite()
    }
}

/// Variational training loss: weighted dice error plus `beta` times the KL
/// between posterior `q` and prior `p`. Pass `gaussians = None` on the
/// unsupervised path, where no posterior exists and the variational term is
/// defined as zero.
pub fn punet_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    gaussians: Option<(&LatentGaussian, &LatentGaussian)>,
    beta: f64,
    weights: Option<&Array2<f64>>,
) -> Result<LossValue> {
    let reconstruction = dice_error(pred, target, weights)?;
    let kl = match gaussians {
        Some((q, p)) => kl_diag_gaussians(q, p)?,
        None => 0.0,
    };
    Ok(LossValue {
        total: reconstruction + beta * kl,
        reconstruction,
        kl,
    })
}

/// [`punet_loss`] together with its gradients: on the prediction, and (when
/// the variational term is present) on both Gaussians, already scaled by
/// `beta`.
pub fn punet_loss_grads(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    gaussians: Option<(&LatentGaussian, &LatentGaussian)>,
    beta: f64,
    weights: Option<&Array2<f64>>,
) -> Result<(LossValue, Array3<f64>, Option<(GaussianGrad, GaussianGrad)>)> {
    let loss = punet_loss(pred, target, gaussians, beta, weights)?;
    let g_pred = dice_error_grad(pred, target, weights)?;
    let g_gauss = match gaussians {
        Some((q, p)) => {
            let (mut gq, mut gp) = kl_gradients(q, p)?;
            gq.mean *= beta;
            gq.log_variance *= beta;
            gp.mean *= beta;
            gp.log_variance *= beta;
            Some((gq, gp))
        }
        None => None,
    };
    Ok((loss, g_pred, g_gauss))
}
