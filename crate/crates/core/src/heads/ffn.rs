use super::HeadConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, linear_backward, ParamInit, Real, Tensor};

/// Baseline head: flatten the volume to `[voxels, channels]` and apply one linear layer.
#[derive(Clone, Debug)]
pub struct FfnHead<T = f64> {
    config: HeadConfig,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// `[C, V]` channel-major storage to `[V, C]` rows.
fn to_rows<T: Real>(t: &Tensor<T>, channels: usize) -> Tensor<T> {
    let v = t.len() / channels;
    let d = t.data();
    Tensor::from_fn(&[v, channels], |i| d[(i % channels) * v + i / channels])
}

fn to_channels<T: Real>(rows: &Tensor<T>, spatial: &[usize]) -> Result<Tensor<T>> {
    let &[v, c] = rows.shape() else { unreachable!() };
    let d = rows.data();
    let mut shape = vec![c];
    shape.extend_from_slice(spatial);
    Tensor::new(&shape, (0..v * c).map(|i| d[(i % v) * c + i / v]).collect())
}

/// Applies `[classes, C]` weights and `[classes]` bias at every voxel of a `[C, Z, H, W]` volume.
pub fn ffn_head_forward<T: Real>(volume: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, ..] = volume.shape() else {
        return Err(Error::shape("ffn head input", &[0, 0, 0, 0], volume.shape()));
    };
    if volume.rank() != 4 {
        return Err(Error::shape("ffn head input [C, Z, H, W]", &[c, 0, 0, 0], volume.shape()));
    }
    let rows = linear(&to_rows(volume, c), weight, bias)?;
    to_channels(&rows, &volume.shape()[1..])
}

impl<T: Real> FfnHead<T> {
    pub fn new(config: &HeadConfig, init: &mut ParamInit) -> Result<Self> {
        if config.in_channels == 0 || config.num_classes == 0 {
            return Err(Error::Config(format!("ffn head needs positive channel counts: {config:?}")));
        }
        let (c, n) = (config.in_channels, config.num_classes);
        Ok(Self {
            config: config.clone(),
            weight: init.uniform(&[n, c], c),
            bias: init.uniform(&[n], c),
        })
    }

    pub fn from_params(config: &HeadConfig, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        weight.expect_shape("ffn weight", &[config.num_classes, config.in_channels])?;
        bias.expect_shape("ffn bias", &[config.num_classes])?;
        Ok(Self {
            config: config.clone(),
            weight,
            bias,
        })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    /// Returns the logits and the flattened input kept for backward.
    pub fn forward(&self, volume: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.config.check_input(volume.shape(), false)?;
        let rows = to_rows(volume, self.config.in_channels);
        let out = linear(&rows, &self.weight, &self.bias)?;
        Ok((to_channels(&out, &volume.shape()[1..])?, rows))
    }

    pub fn backward(&mut self, rows: &Tensor<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let v = rows.shape()[0];
        let n = self.config.num_classes;
        if grad_logits.len() != v * n || grad_logits.shape()[0] != n {
            return Err(Error::shape("ffn upstream gradient", &[n, v], grad_logits.shape()));
        }
        let spatial = grad_logits.shape()[1..].to_vec();
        let g_rows = to_rows(grad_logits, n);
        let g = linear_backward(rows, &self.weight, &self.bias, &g_rows)?;
        self.weight.accumulate_grad(g.weight.data());
        self.bias.accumulate_grad(g.bias.data());
        to_channels(&g.input, &spatial)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("ffn.weight".into(), &self.weight), ("ffn.bias".into(), &self.bias)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("ffn.weight".into(), &mut self.weight), ("ffn.bias".into(), &mut self.bias)]
    }

    pub fn zero_params(&mut self) {
        self.weight.data_mut().fill(T::zero());
        self.bias.data_mut().fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_reproduces_features() {
        let vol = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| i as f64 - 4.0);
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let out = ffn_head_forward(&vol, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn per_voxel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vol = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let out = ffn_head_forward(&vol, &w, &b).unwrap();
        assert_eq!(out.shape(), &[5, 2, 2, 2]);
        for v in 0..8 {
            for k in 0..5 {
                let mut e = b.data()[k];
                for c in 0..3 {
                    e += w.data()[k * 3 + c] * vol.data()[c * 8 + v];
                }
                assert!((out.data()[k * 8 + v] - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn head_struct_agrees_with_free_function() {
        let cfg = HeadConfig {
            in_channels: 4,
            num_classes: 6,
            ..Default::default()
        };
        let head: FfnHead = FfnHead::new(&cfg, &mut ParamInit::new(2)).unwrap();
        let vol = Tensor::from_fn(&[4, 2, 3, 5], |i| (i as f64).sin());
        let (a, _) = head.forward(&vol).unwrap();
        let b = ffn_head_forward(&vol, head.weight(), head.bias()).unwrap();
        assert_eq!(a, b);
        assert!(head.forward(&Tensor::zeros(&[3, 2, 2, 2])).is_err());
    }
}
