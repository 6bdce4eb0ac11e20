//! Flow-matching loss, content consistency loss, and their weighted
//! combination, with analytic gradients with respect to the network output.

use crate::coupling::{CouplingSample, EditInstance};
use crate::{Error, Result};

/// Added to L2 norms before dividing; keeps the normalized CCL vectors
/// defined for zero inputs (no-edit samples).
pub const NORM_EPS: f64 = 1e-12;

/// Components of the combined training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub fm: f64,
    pub ccl: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Velocity target `x1 - x0`, which equals `-eps` for every coupling kind.
pub fn target_velocity(s: &CouplingSample) -> Vec<f64> {
    s.x1
        .as_slice()
        .iter()
        .zip(s.x0.as_slice())
        .map(|(b, a)| b - a)
        .collect()
}

/// Mean squared error between the prediction and the velocity target.
pub fn fm_loss(pred: &[f64], s: &CouplingSample) -> Result<f64> {
    let target = target_velocity(s);
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "fm_loss pred",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(&target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of [`fm_loss`] with respect to the prediction.
pub fn fm_loss_backward(pred: &[f64], s: &CouplingSample) -> Result<Vec<f64>> {
    let target = target_velocity(s);
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "fm_loss_backward pred",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(&target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}

/// Split a paired prediction into its source and target halves.
pub fn slice_outputs(pred: &[f64]) -> Result<(&[f64], &[f64])> {
    if pred.len() % 2 != 0 {
        return Err(Error::contract(format!(
            "cannot slice prediction of odd length {}",
            pred.len()
        )));
    }
    Ok(pred.split_at(pred.len() / 2))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Content consistency loss: squared distance between the normalized
/// instruction embedding and the normalized predicted image delta.
pub fn ccl(pred: &[f64], inst: &EditInstance) -> Result<f64> {
    let (z_src, z_tgt) = slice_outputs(pred)?;
    let text = inst.x_text.as_slice();
    if text.len() != z_src.len() {
        return Err(Error::DimensionMismatch {
            context: "ccl x_text",
            expected: z_src.len(),
            actual: text.len(),
        });
    }
    // |P| = 1: pooling over one block is the identity
    let delta: Vec<f64> = z_tgt.iter().zip(z_src).map(|(t, s)| t - s).collect();
    let tn = l2(text) + NORM_EPS;
    let dn = l2(&delta) + NORM_EPS;
    let mut acc = 0.0;
    for i in 0..delta.len() {
        let diff = text[i] / tn - delta[i] / dn;
        acc += diff * diff;
    }
    Ok(acc)
}

/// Exact gradient of [`ccl`] with respect to the prediction, including the
/// normalization Jacobian of the delta vector.
pub fn ccl_backward(pred: &[f64], inst: &EditInstance) -> Result<Vec<f64>> {
    let (z_src, z_tgt) = slice_outputs(pred)?;
    let text = inst.x_text.as_slice();
    if text.len() != z_src.len() {
        return Err(Error::DimensionMismatch {
            context: "ccl_backward x_text",
            expected: z_src.len(),
            actual: text.len(),
        });
    }
    let d = z_src.len();
    let delta: Vec<f64> = z_tgt.iter().zip(z_src).map(|(t, s)| t - s).collect();
    let norm = l2(&delta);
    let mut grad = vec![0.0; pred.len()];
    if norm == 0.0 {
        // ||delta|| is not differentiable at zero; the loss is flat in the
        // eps-regularized sense, report a zero gradient
        return Ok(grad);
    }
    let tn = l2(text) + NORM_EPS;
    let s = norm + NORM_EPS;
    let residual: Vec<f64> = (0..d).map(|i| text[i] / tn - delta[i] / s).collect();
    let dot_dr: f64 = delta.iter().zip(&residual).map(|(a, b)| a * b).sum();
    for i in 0..d {
        // dL/d(delta_i) through delta_hat = delta / (||delta|| + eps)
        let g = -2.0 * residual[i] / s + 2.0 * delta[i] * dot_dr / (norm * s * s);
        grad[i] = -g; // z_src enters delta negatively
        grad[d + i] = g;
    }
    Ok(grad)
}

/// Combined objective `fm + alpha * ccl`.
pub fn combined_loss(
    pred: &[f64],
    s: &CouplingSample,
    inst: &EditInstance,
    alpha: f64,
) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(Error::contract(format!("alpha {alpha} must be >= 0")));
    }
    let fm = fm_loss(pred, s)?;
    let c = ccl(pred, inst)?;
    Ok(LossBreakdown {
        fm,
        ccl: c,
        alpha,
        total: fm + alpha * c,
    })
}

/// Gradient of [`combined_loss`] with respect to the prediction.
pub fn combined_loss_backward(
    pred: &[f64],
    s: &CouplingSample,
    inst: &EditInstance,
    alpha: f64,
) -> Result<Vec<f64>> {
    let mut grad = fm_loss_backward(pred, s)?;
    let cg = ccl_backward(pred, inst)?;
    for (g, c) in grad.iter_mut().zip(&cg) {
        *g += alpha * c;
    }
    Ok(grad)
}
