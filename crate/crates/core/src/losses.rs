//! The three training objectives and their building blocks.
//!
//! Value semantics: `loss_d1`/`loss_d2` return objectives the discriminators
//! ASCEND (0 at the optimum, negative elsewhere); the trainer descends their
//! negations. `loss_g` returns the quantity the generator DESCENDS: it
//! negates its adversarial and label parts (non-saturating form) and adds
//! the weighted L1 reconstruction term.
//!
//! The label comparison `log(1 - (t - p))` is read componentwise with an
//! absolute difference, `sum_c log(1 - |t_c - p_c| + eps)`, which is bounded
//! above by ~0 and maximal exactly at a correct prediction; for predictions
//! below a one-hot target it coincides with the raw expression.
//!
//! Scores are clamped into `[eps, 1-eps]` before any logarithm; gradients
//! are taken in logit space (see the `*_grads` helpers), which is exact
//! wherever the clamp is inactive and bounded everywhere.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::MassImage;
use crate::nn::Scalar;

/// Guard added inside every logarithm.
pub const LOSS_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Balancing weights of the four auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 10.0,
            lambda4: 300.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::Contract(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn clamp_score(p: f64) -> f64 {
    p.clamp(LOSS_EPS, 1.0 - LOSS_EPS)
}

/// `sum_c log(1 - |target_c - predicted_c| + eps)`; <= 0 with equality only
/// at an exact prediction (up to eps).
pub fn label_term(target: &[f64], predicted: &[f64]) -> Result<f64, LossError> {
    if target.len() != predicted.len() {
        return Err(LossError::Contract(format!(
            "label_term length mismatch: {} vs {}",
            target.len(),
            predicted.len()
        )));
    }
    Ok(target
        .iter()
        .zip(predicted.iter())
        .map(|(t, p)| (1.0 - (t - p).abs() + LOSS_EPS).ln())
        .sum())
}

/// Margin discriminator objective (ascended).
pub fn loss_d1(
    rf_real: f64,
    rf_fake: f64,
    label_real: &[f64],
    label_fake: &[f64],
    target_margin: &[f64],
    w: &LossWeights,
) -> Result<f64, LossError> {
    Ok(clamp_score(rf_real).ln()
        + (1.0 - clamp_score(rf_fake)).ln()
        + w.lambda1
            * (label_term(target_margin, label_real)? + label_term(target_margin, label_fake)?))
}

/// Shape discriminator objective (ascended); identical in form to
/// [`loss_d1`] with `lambda2` and the shape target.
pub fn loss_d2(
    rf_real: f64,
    rf_fake: f64,
    label_real: &[f64],
    label_fake: &[f64],
    target_shape: &[f64],
    w: &LossWeights,
) -> Result<f64, LossError> {
    Ok(clamp_score(rf_real).ln()
        + (1.0 - clamp_score(rf_fake)).ln()
        + w.lambda2
            * (label_term(target_shape, label_real)? + label_term(target_shape, label_fake)?))
}

/// Generator objective (descended): negated non-saturating adversarial and
/// label terms plus the weighted L1 reconstruction term.
#[allow(clippy::too_many_arguments)]
pub fn loss_g(
    rf_fake_d1: f64,
    rf_fake_d2: f64,
    label_fake_d1: &[f64],
    label_fake_d2: &[f64],
    target_margin: &[f64],
    target_shape: &[f64],
    real_image: &ArrayView2<'_, f64>,
    fake_image: &ArrayView2<'_, f64>,
    w: &LossWeights,
) -> Result<f64, LossError> {
    let adversarial = clamp_score(rf_fake_d1).ln() + clamp_score(rf_fake_d2).ln();
    let labels = label_term(target_margin, label_fake_d1)? + label_term(target_shape, label_fake_d2)?;
    let recon = l1_mean(real_image, fake_image)?;
    Ok(-(adversarial + w.lambda3 * labels) + w.lambda4 * recon)
}

/// Mean absolute pixel difference between two rasters of equal shape.
pub fn l1_mean(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<f64, LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::Contract(format!(
            "l1 shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// L1 reconstruction distance between two mass images.
pub fn l1_reconstruction(a: &MassImage, b: &MassImage) -> f64 {
    l1_mean(&a.pixels().view(), &b.pixels().view()).expect("images share the fixed size")
}

// ---------------------------------------------------------------------------
// Batch objective values and logit-space gradients used by the trainer.
// ---------------------------------------------------------------------------

/// Batch-mean discriminator objective (the ascended quantity) from sigmoid
/// scores.
pub fn d_objective_batch<F: Scalar>(
    rf_real: &Array1<F>,
    rf_fake: &Array1<F>,
    lab_real: &Array2<F>,
    lab_fake: &Array2<F>,
    targets: &Array2<F>,
    lambda: f64,
) -> f64 {
    let w = LossWeights {
        lambda1: lambda,
        ..Default::default()
    };
    let n = rf_real.len();
    let mut acc = 0.0;
    for b in 0..n {
        let lr: Vec<f64> = lab_real.row(b).iter().map(|v| v.as_f64()).collect();
        let lf: Vec<f64> = lab_fake.row(b).iter().map(|v| v.as_f64()).collect();
        let t: Vec<f64> = targets.row(b).iter().map(|v| v.as_f64()).collect();
        acc += loss_d1(
            rf_real[b].as_f64(),
            rf_fake[b].as_f64(),
            &lr,
            &lf,
            &t,
            &w,
        )
        .expect("equal lengths");
    }
    acc / n as f64
}

/// Batch-mean generator objective (descended) and batch-mean L1 term.
#[allow(clippy::too_many_arguments)]
pub fn g_objective_batch<F: Scalar>(
    rf_fake_d1: &Array1<F>,
    rf_fake_d2: &Array1<F>,
    lab_fake_d1: &Array2<F>,
    lab_fake_d2: &Array2<F>,
    targets_margin: &Array2<F>,
    targets_shape: &Array2<F>,
    real: &Array4<F>,
    fake: &Array4<F>,
    w: &LossWeights,
) -> (f64, f64) {
    let n = rf_fake_d1.len();
    let hw = real.shape()[2] * real.shape()[3];
    let mut acc = 0.0;
    let mut acc_l1 = 0.0;
    for b in 0..n {
        let l1: Vec<f64> = lab_fake_d1.row(b).iter().map(|v| v.as_f64()).collect();
        let l2: Vec<f64> = lab_fake_d2.row(b).iter().map(|v| v.as_f64()).collect();
        let tm: Vec<f64> = targets_margin.row(b).iter().map(|v| v.as_f64()).collect();
        let ts: Vec<f64> = targets_shape.row(b).iter().map(|v| v.as_f64()).collect();
        let adversarial = clamp_score(rf_fake_d1[b].as_f64()).ln()
            + clamp_score(rf_fake_d2[b].as_f64()).ln();
        let labels = label_term(&tm, &l1).expect("lengths")
            + label_term(&ts, &l2).expect("lengths");
        let mut l1_px = 0.0;
        for (x, y) in real
            .index_axis(ndarray::Axis(0), b)
            .iter()
            .zip(fake.index_axis(ndarray::Axis(0), b).iter())
        {
            l1_px += (x.as_f64() - y.as_f64()).abs();
        }
        l1_px /= hw as f64;
        acc += -(adversarial + w.lambda3 * labels) + w.lambda4 * l1_px;
        acc_l1 += l1_px;
    }
    (acc / n as f64, acc_l1 / n as f64)
}

/// Derivative of `log(1 - |t - sigmoid(z)| + eps)` with respect to the
/// logit `z`, evaluated from the sigmoid output.
fn dlabel_dlogit<F: Scalar>(t: F, p: F) -> F {
    let eps = F::from_f64(LOSS_EPS);
    let diff = p - t;
    let sign = if diff > F::zero() {
        F::one()
    } else if diff < F::zero() {
        -F::one()
    } else {
        F::zero()
    };
    -sign * p * (F::one() - p) / (F::one() - diff.abs() + eps)
}

/// Gradients of the descended discriminator objective `-loss_d` with
/// respect to the head logits, for the real pass and the fake pass.
/// Score arrays are the sigmoid outputs of the corresponding logits.
pub fn d_loss_logit_grads<F: Scalar>(
    rf_real: &Array1<F>,
    rf_fake: &Array1<F>,
    lab_real: &Array2<F>,
    lab_fake: &Array2<F>,
    targets: &Array2<F>,
    lambda: f64,
) -> (Array2<F>, Array2<F>) {
    let n = rf_real.len();
    let c = lab_real.ncols();
    let inv_n = F::from_f64(1.0 / n as f64);
    let lam = F::from_f64(lambda);
    let mut greal = Array2::zeros((n, 1 + c));
    let mut gfake = Array2::zeros((n, 1 + c));
    for b in 0..n {
        // d/dz of -log(sigmoid(z)) is sigma - 1; of -log(1 - sigma(z)) is sigma
        greal[[b, 0]] = (rf_real[b] - F::one()) * inv_n;
        gfake[[b, 0]] = rf_fake[b] * inv_n;
        for j in 0..c {
            let t = targets[[b, j]];
            greal[[b, 1 + j]] = -lam * inv_n * dlabel_dlogit(t, lab_real[[b, j]]);
            gfake[[b, 1 + j]] = -lam * inv_n * dlabel_dlogit(t, lab_fake[[b, j]]);
        }
    }
    (greal, gfake)
}

/// Gradients of the generator objective with respect to one discriminator's
/// head logits on the fake pass.
pub fn g_loss_logit_grads<F: Scalar>(
    rf_fake: &Array1<F>,
    lab_fake: &Array2<F>,
    targets: &Array2<F>,
    lambda3: f64,
) -> Array2<F> {
    let n = rf_fake.len();
    let c = lab_fake.ncols();
    let inv_n = F::from_f64(1.0 / n as f64);
    let lam = F::from_f64(lambda3);
    let mut g = Array2::zeros((n, 1 + c));
    for b in 0..n {
        g[[b, 0]] = (rf_fake[b] - F::one()) * inv_n;
        for j in 0..c {
            g[[b, 1 + j]] = -lam * inv_n * dlabel_dlogit(targets[[b, j]], lab_fake[[b, j]]);
        }
    }
    g
}

/// Gradient of the batch-mean weighted L1 term with respect to the fake
/// image pixels: `lambda4 / (B*H*W) * sign(fake - real)`.
pub fn l1_logit_free_grad<F: Scalar>(real: &Array4<F>, fake: &Array4<F>, lambda4: f64) -> Array4<F> {
    let (n, _, h, w) = real.dim();
    let scale = F::from_f64(lambda4 / (n * h * w) as f64);
    let mut g = Array4::zeros(real.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(real)
        .and(fake)
        .for_each(|gv, &r, &f| {
            *gv = if f > r {
                scale
            } else if f < r {
                -scale
            } else {
                F::zero()
            };
        });
    g
}

/// Elementwise sigmoid over a logit matrix.
pub fn sigmoid_scores<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    logits.mapv(crate::nn::sigmoid)
}
