//! Class statistics and the class-balancing loss terms.
//!
//! All per-voxel losses take logits laid out `[classes, Z, H, W]` (or `[classes, voxels]`)
//! matching a [`VoxelGrid`](crate::voxel::VoxelGrid), and return the loss value together with
//! its exact gradient w.r.t. the logits.

mod combine;
mod depth;
mod dice;
mod stats;
mod wce;

pub use combine::{multiscale_loss, total_loss, LossBreakdown, LossWeights, ScaleTargets, DEFAULT_AUX_WEIGHT};
pub use depth::depth_loss;
pub use dice::{dice_loss, dice_loss_with_smoothing, DICE_SMOOTHING};
pub use stats::{class_frequencies, class_weights, ClassStats, ClassWeights, DEFAULT_CLAMP_RATIO};
pub use wce::weighted_cross_entropy;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::voxel::VoxelGrid;

/// A scalar loss and its gradient w.r.t. the logits it was computed from.
#[derive(Clone, Debug)]
pub struct LossValue<T = f64> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Validates logits against a label grid; returns `(classes, voxels)`.
pub(crate) fn check_logits<T: Real>(logits: &Tensor<T>, labels: &VoxelGrid) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() < 2 {
        return Err(Error::shape("logits [classes, ...voxels]", &[0, 0], shape));
    }
    let n = shape[0];
    let voxels: usize = shape[1..].iter().product();
    let spatial_ok = if shape.len() == 4 {
        shape[1..] == labels.spatial_shape()
    } else {
        voxels == labels.labels().len()
    };
    if !spatial_ok {
        return Err(Error::shape("logits spatial shape vs label grid", &labels.spatial_shape(), &shape[1..]));
    }
    if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= n) {
        return Err(Error::Label {
            label: bad as usize,
            num_classes: n,
        });
    }
    Ok((n, voxels))
}

/// Per-voxel log-sum-exp over the class axis of `[classes, voxels]` logits.
pub(crate) fn log_sum_exp<T: Real>(x: &[T], n: usize, voxels: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(voxels);
    for v in 0..voxels {
        let max = (0..n).map(|c| x[c * voxels + v]).fold(T::neg_infinity(), T::max);
        if !max.is_finite() {
            return Err(Error::Numeric(format!("non-finite logits at voxel {v}")));
        }
        let s: T = (0..n).map(|c| (x[c * voxels + v] - max).exp()).sum();
        out.push(max + s.ln());
    }
    Ok(out)
}
