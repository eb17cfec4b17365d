use super::{check_logits, log_sum_exp, ClassWeights, LossValue};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::voxel::VoxelGrid;

/// Class-weighted cross-entropy normalised by the applied weight mass:
/// `sum_v w[y_v] * CE_v / sum_v w[y_v]`.
pub fn weighted_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &VoxelGrid,
    weights: &ClassWeights,
) -> Result<LossValue<T>> {
    let (n, voxels) = check_logits(logits, labels)?;
    if weights.len() != n {
        return Err(Error::shape("class weights", &[n], &[weights.len()]));
    }
    let x = logits.data();
    let lse = log_sum_exp(x, n, voxels)?;
    let w: Vec<T> = weights.weights().iter().map(|&v| T::of(v)).collect();
    let y = labels.labels();

    let mass: T = y.iter().map(|&l| w[l as usize]).sum();
    let mut total = T::zero();
    for v in 0..voxels {
        let l = y[v] as usize;
        total = total + w[l] * (lse[v] - x[l * voxels + v]);
    }
    let mut grad = vec![T::zero(); x.len()];
    for v in 0..voxels {
        let l = y[v] as usize;
        let scale = w[l] / mass;
        for c in 0..n {
            let p = (x[c * voxels + v] - lse[v]).exp();
            grad[c * voxels + v] = scale * if c == l { p - T::one() } else { p };
        }
    }
    Ok(LossValue {
        value: total / mass,
        grad: Tensor::new(logits.shape(), grad)?,
    })
}
