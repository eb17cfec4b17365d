use super::{log_sum_exp, LossValue};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Plain cross-entropy over depth bins averaged over pixels; logits are `[bins, pixels]`.
pub fn depth_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<LossValue<T>> {
    let &[bins, pixels] = logits.shape() else {
        return Err(Error::shape("depth logits [bins, pixels]", &[0, targets.len()], logits.shape()));
    };
    if pixels != targets.len() || pixels == 0 {
        return Err(Error::shape("depth targets", &[pixels], &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= bins) {
        return Err(Error::Label {
            label: bad,
            num_classes: bins,
        });
    }
    let x = logits.data();
    let lse = log_sum_exp(x, bins, pixels)?;
    let inv = T::one() / T::of(pixels as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); x.len()];
    for (v, &t) in targets.iter().enumerate() {
        total = total + lse[v] - x[t * pixels + v];
        for b in 0..bins {
            let p = (x[b * pixels + v] - lse[v]).exp();
            grad[b * pixels + v] = inv * if b == t { p - T::one() } else { p };
        }
    }
    Ok(LossValue {
        value: total * inv,
        grad: Tensor::new(logits.shape(), grad)?,
    })
}
