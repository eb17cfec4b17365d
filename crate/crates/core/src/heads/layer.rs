use crate::error::Result;
use crate::nn::{conv3d, conv3d_backward, deconv3d, deconv3d_backward, Conv3dParams, ParamInit, Real, Tensor};

/// A named (transposed) convolution with optional rectifier.
#[derive(Clone, Debug)]
pub struct ConvLayer<T = f64> {
    pub name: String,
    pub params: Conv3dParams<T>,
    pub transposed: bool,
    pub relu: bool,
}

impl<T: Real> ConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        relu: bool,
        init: &mut ParamInit,
    ) -> Self {
        let fan_in = in_ch * k * k * k;
        Self {
            name: name.to_string(),
            params: Conv3dParams {
                kernel: init.uniform(&[out_ch, in_ch, k, k, k], fan_in),
                bias: init.uniform(&[out_ch], fan_in),
                stride: [stride; 3],
                padding: [pad; 3],
            },
            transposed: false,
            relu,
        }
    }

    pub fn deconv(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, init: &mut ParamInit) -> Self {
        let fan_in = in_ch * k * k * k;
        Self {
            name: name.to_string(),
            params: Conv3dParams {
                kernel: init.uniform(&[in_ch, out_ch, k, k, k], fan_in),
                bias: init.uniform(&[out_ch], fan_in),
                stride: [stride; 3],
                padding: [0; 3],
            },
            transposed: true,
            relu: false,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = if self.transposed {
            deconv3d(x, &self.params)?
        } else {
            conv3d(x, &self.params)?
        };
        Ok(if self.relu { y.map(|v| v.max(T::zero())) } else { y })
    }

    /// Backward given the layer input `x`, its output `y` and `dy`; accumulates parameter
    /// gradients and returns `dx`.
    pub fn backward(&mut self, x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let masked;
        let dy = if self.relu {
            masked = Tensor::new(
                dy.shape(),
                dy.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &out)| if out > T::zero() { g } else { T::zero() })
                    .collect(),
            )?;
            &masked
        } else {
            dy
        };
        let g = if self.transposed {
            deconv3d_backward(x, &self.params, dy)?
        } else {
            conv3d_backward(x, &self.params, dy)?
        };
        self.params.kernel.accumulate_grad(g.kernel.data());
        self.params.bias.accumulate_grad(g.bias.data());
        Ok(g.input)
    }

    pub fn named_params(&self) -> [(String, &Tensor<T>); 2] {
        [
            (format!("{}.kernel", self.name), &self.params.kernel),
            (format!("{}.bias", self.name), &self.params.bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> [(String, &mut Tensor<T>); 2] {
        [
            (format!("{}.kernel", self.name), &mut self.params.kernel),
            (format!("{}.bias", self.name), &mut self.params.bias),
        ]
    }

    pub fn zero_params(&mut self) {
        self.params.kernel.data_mut().fill(T::zero());
        self.params.bias.data_mut().fill(T::zero());
    }
}
