use super::{Real, Tensor};
use crate::error::{Error, Result};

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("softmax axis {axis} for rank {}", shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted before exponentiation).
pub fn softmax<T: Real>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_layout(logits.shape(), axis)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let max = (0..n).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..n {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                sum = sum + e;
            }
            for c in 0..n {
                out[at(c)] = out[at(c)] / sum;
            }
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Gradient w.r.t. the logits given the softmax output and the gradient w.r.t. it.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    grad_out.expect_shape("softmax upstream gradient", probs.shape())?;
    let (outer, n, inner) = axis_layout(probs.shape(), axis)?;
    let (p, g) = (probs.data(), grad_out.data());
    let mut out = vec![T::zero(); p.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let dot: T = (0..n).map(|c| p[at(c)] * g[at(c)]).sum();
            for c in 0..n {
                out[at(c)] = p[at(c)] * (g[at(c)] - dot);
            }
        }
    }
    Tensor::new(probs.shape(), out)
}
