use super::{dice_loss, weighted_cross_entropy, ClassWeights};
use crate::error::{Error, Result};
use crate::heads::{AuxLogits, MultiScaleLogits};
use crate::nn::{Real, Tensor};
use crate::voxel::{downsample_labels, LabelSpace, VoxelGrid};

pub const DEFAULT_AUX_WEIGHT: f64 = 0.5;

/// Coefficients of the weighted-CE, dice and depth terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_wce: f64,
    pub w_dice: f64,
    pub w_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_wce: 1.0,
            w_dice: 0.3,
            w_depth: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_wce, self.w_dice, self.w_depth].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub wce: f64,
    pub dice: f64,
    pub depth: f64,
    pub total: f64,
}

/// `total = w_wce * wce + w_dice * dice + w_depth * depth`, evaluated left to right.
pub fn total_loss(wce: f64, dice: f64, depth: f64, lw: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("wce", wce), ("dice", dice), ("depth", depth)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        wce,
        dice,
        depth,
        total: lw.w_wce * wce + lw.w_dice * dice + lw.w_depth * depth,
    })
}

/// Ground truth at full resolution plus its coarsened copies for each aux factor.
#[derive(Clone, Debug)]
pub struct ScaleTargets {
    pub full: VoxelGrid,
    pub aux: Vec<(usize, VoxelGrid)>,
}

impl ScaleTargets {
    pub fn new(gt: &VoxelGrid, factors: &[usize], space: &LabelSpace) -> Result<Self> {
        let aux = factors
            .iter()
            .map(|&f| Ok((f, downsample_labels(gt, [f; 3], space)?)))
            .collect::<Result<_>>()?;
        Ok(Self { full: gt.clone(), aux })
    }
}

/// Weighted-CE and dice summed over scales: `L(full) + aux_weight * sum_f L(aux_f)`.
///
/// The returned breakdown holds the scale-aggregated components with `depth = 0`; the depth
/// term is added once by the caller. Gradients are w.r.t. every logit map.
pub fn multiscale_loss<T: Real>(
    outputs: &MultiScaleLogits<T>,
    targets: &ScaleTargets,
    weights: &ClassWeights,
    lw: &LossWeights,
    aux_weight: f64,
) -> Result<(LossBreakdown, MultiScaleLogits<T>)> {
    if outputs.aux.len() != targets.aux.len()
        || outputs.aux.iter().zip(&targets.aux).any(|(o, (f, _))| o.factor != *f)
    {
        return Err(Error::Config(format!(
            "aux outputs at factors {:?} but targets at {:?}",
            outputs.aux.iter().map(|a| a.factor).collect::<Vec<_>>(),
            targets.aux.iter().map(|(f, _)| *f).collect::<Vec<_>>()
        )));
    }
    let (ww, wd) = (T::of(lw.w_wce), T::of(lw.w_dice));
    let scale = |logits: &Tensor<T>, gt: &VoxelGrid, factor: T| -> Result<(f64, f64, Tensor<T>)> {
        let ce = weighted_cross_entropy(logits, gt, weights)?;
        let dice = dice_loss(logits, gt)?;
        let grad = Tensor::new(
            logits.shape(),
            ce.grad
                .data()
                .iter()
                .zip(dice.grad.data())
                .map(|(&a, &b)| factor * (ww * a + wd * b))
                .collect(),
        )?;
        Ok((ce.value.as_f64(), dice.value.as_f64(), grad))
    };

    let (mut wce, mut dice, full) = scale(&outputs.full, &targets.full, T::one())?;
    let mut aux = Vec::with_capacity(outputs.aux.len());
    for (out, (_, gt)) in outputs.aux.iter().zip(&targets.aux) {
        let (c, d, g) = scale(&out.logits, gt, T::of(aux_weight))?;
        wce += aux_weight * c;
        dice += aux_weight * d;
        aux.push(AuxLogits {
            factor: out.factor,
            logits: g,
        });
    }
    Ok((total_loss(wce, dice, 0.0, lw)?, MultiScaleLogits { full, aux }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_examples() {
        let lw = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &lw).unwrap().total, 1.35);
        assert_eq!(total_loss(2.0, 0.0, 0.0, &lw).unwrap().total, 2.0);
        let zero = LossWeights {
            w_wce: 0.0,
            w_dice: 0.0,
            w_depth: 0.0,
        };
        assert_eq!(total_loss(3.0, 2.0, 1.0, &zero).unwrap().total, 0.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &lw), Err(Error::Numeric(_))));
    }
}
