use super::{check_logits, LossValue};
use crate::error::Result;
use crate::nn::{softmax, softmax_backward, Real, Tensor};
use crate::voxel::VoxelGrid;

pub const DICE_SMOOTHING: f64 = 1.0;

/// Soft dice loss with smoothing 1, see [`dice_loss_with_smoothing`].
pub fn dice_loss<T: Real>(logits: &Tensor<T>, labels: &VoxelGrid) -> Result<LossValue<T>> {
    dice_loss_with_smoothing(logits, labels, DICE_SMOOTHING)
}

/// `1 - mean_c (2 I_c + eps) / (P_c + G_c + eps)` over the classes present in the ground truth
/// or in the argmax prediction, with `p = softmax(logits)` and one-hot ground truth.
pub fn dice_loss_with_smoothing<T: Real>(
    logits: &Tensor<T>,
    labels: &VoxelGrid,
    smoothing: f64,
) -> Result<LossValue<T>> {
    let (n, voxels) = check_logits(logits, labels)?;
    let probs = softmax(logits, 0)?;
    let p = probs.data();
    let y = labels.labels();
    let eps = T::of(smoothing);
    let two = T::of(2.0);

    let mut present = vec![false; n];
    let mut inter = vec![T::zero(); n];
    let mut pred_mass = vec![T::zero(); n];
    let mut gt_mass = vec![T::zero(); n];
    for v in 0..voxels {
        let l = y[v] as usize;
        present[l] = true;
        gt_mass[l] = gt_mass[l] + T::one();
        inter[l] = inter[l] + p[l * voxels + v];
        let mut arg = 0;
        for c in 0..n {
            let pc = p[c * voxels + v];
            pred_mass[c] = pred_mass[c] + pc;
            if pc > p[arg * voxels + v] {
                arg = c;
            }
        }
        present[arg] = true;
    }
    let k = T::of(present.iter().filter(|&&b| b).count() as f64);

    let mut score = T::zero();
    let mut dp = vec![T::zero(); p.len()];
    for c in (0..n).filter(|&c| present[c]) {
        let num = two * inter[c] + eps;
        let den = pred_mass[c] + gt_mass[c] + eps;
        score = score + num / den;
        let den2 = den * den;
        for v in 0..voxels {
            let g = if y[v] as usize == c { T::one() } else { T::zero() };
            dp[c * voxels + v] = -(two * g * den - num) / (den2 * k);
        }
    }
    let grad = softmax_backward(&probs, &Tensor::new(logits.shape(), dp)?, 0)?;
    Ok(LossValue {
        value: T::one() - score / k,
        grad,
    })
}
