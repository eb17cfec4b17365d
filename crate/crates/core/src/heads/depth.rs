use crate::error::{Error, Result};
use crate::nn::{linear, linear_backward, ParamInit, Real, Tensor};

/// Linear depth-bin classifier over each BEV column of the feature volume.
///
/// Column `(h, w)` is described by its `C * Z` features; the probe emits `[bins, H * W]`
/// logits for the depth-classification loss.
#[derive(Clone, Debug)]
pub struct DepthProbe<T = f64> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

fn columns<T: Real>(volume: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, z, h, w] = volume.shape() else {
        return Err(Error::shape("depth probe input [C, Z, H, W]", &[0; 4], volume.shape()));
    };
    let (feat, pix) = (c * z, h * w);
    let d = volume.data();
    Ok(Tensor::from_fn(&[pix, feat], |i| d[(i % feat) * pix + i / feat]))
}

impl<T: Real> DepthProbe<T> {
    pub fn new(column_features: usize, bins: usize, init: &mut ParamInit) -> Self {
        Self {
            weight: init.uniform(&[bins, column_features], column_features),
            bias: init.uniform(&[bins], column_features),
        }
    }

    /// Returns `[bins, pixels]` logits and the column matrix for backward.
    pub fn forward(&self, volume: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let cols = columns(volume)?;
        let out = linear(&cols, &self.weight, &self.bias)?;
        let &[pix, bins] = out.shape() else { unreachable!() };
        let d = out.data();
        let logits = Tensor::from_fn(&[bins, pix], |i| d[(i % pix) * bins + i / pix]);
        Ok((logits, cols))
    }

    pub fn backward(&mut self, cols: &Tensor<T>, grad_logits: &Tensor<T>) -> Result<()> {
        let &[bins, pix] = grad_logits.shape() else {
            return Err(Error::shape("depth logits gradient", &[0, 0], grad_logits.shape()));
        };
        let g = grad_logits.data();
        let rows = Tensor::from_fn(&[pix, bins], |i| g[(i % bins) * pix + i / bins]);
        let grads = linear_backward(cols, &self.weight, &self.bias, &rows)?;
        self.weight.accumulate_grad(grads.weight.data());
        self.bias.accumulate_grad(grads.bias.data());
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("depth.weight".into(), &self.weight), ("depth.bias".into(), &self.bias)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("depth.weight".into(), &mut self.weight), ("depth.bias".into(), &mut self.bias)]
    }
}
