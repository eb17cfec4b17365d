//! UNet-like multi-scale occupancy head.
//!
//! With `b = base_channels` and `d = depth`, level `l` of the encoder works at `b * 2^l`
//! channels and `1 / 2^l` resolution:
//!
//! ```text
//! stem        conv k3 s1   C      -> b        relu   (skip for decoder level 0)
//! enc{l}      conv k3 s2   b2^l   -> b2^(l+1) relu   (skip for decoder level l+1)
//! bottleneck  conv k3 s1   b2^d   -> b2^d     relu
//! dec{l}.up   deconv k2 s2 b2^(l+1) -> b2^l
//! dec{l}.fuse conv k3 s1   [up, skip] 2*b2^l -> b2^l relu
//! cls         conv k1      b      -> classes
//! aux{f}      conv k1      b*f    -> classes on the bottleneck (f = 2^d) or dec{log2 f} output
//! ```

use super::{AuxLogits, ConvLayer, HeadConfig, MultiScaleLogits};
use crate::error::{Error, Result};
use crate::nn::{ParamInit, Real, Tensor};

#[derive(Clone, Debug)]
pub struct UnetHead<T = f64> {
    config: HeadConfig,
    stem: ConvLayer<T>,
    enc: Vec<ConvLayer<T>>,
    bottleneck: ConvLayer<T>,
    aux: Vec<(usize, ConvLayer<T>)>,
    up: Vec<ConvLayer<T>>,
    fuse: Vec<ConvLayer<T>>,
    cls: ConvLayer<T>,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct UnetCache<T = f64> {
    input: Tensor<T>,
    stem: Tensor<T>,
    enc: Vec<Tensor<T>>,
    bottleneck: Tensor<T>,
    up: Vec<Tensor<T>>,
    cat: Vec<Tensor<T>>,
    fuse: Vec<Tensor<T>>,
    outputs: MultiScaleLogits<T>,
}

fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("skip concatenation", a.shape(), b.shape()));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}

fn split_channels<T: Real>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let vol: usize = t.shape()[1..].iter().product();
    let mut sa = t.shape().to_vec();
    let mut sb = sa.clone();
    sa[0] = first;
    sb[0] -= first;
    let (a, b) = t.data().split_at(first * vol);
    Ok((Tensor::new(&sa, a.to_vec())?, Tensor::new(&sb, b.to_vec())?))
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

fn take_or_zero<T: Real>(slot: Option<Tensor<T>>, like: &Tensor<T>) -> Tensor<T> {
    slot.unwrap_or_else(|| Tensor::zeros(like.shape()))
}

impl<T: Real> UnetHead<T> {
    pub fn new(config: &HeadConfig, init: &mut ParamInit) -> Result<Self> {
        config.validate()?;
        let (c, b, n, d) = (config.in_channels, config.base_channels, config.num_classes, config.depth);
        let ch = |l: usize| b << l;
        let stem = ConvLayer::conv("stem", c, b, 3, 1, 1, true, init);
        let enc = (0..d)
            .map(|l| ConvLayer::conv(&format!("enc{l}"), ch(l), ch(l + 1), 3, 2, 1, true, init))
            .collect();
        let bottleneck = ConvLayer::conv("bottleneck", ch(d), ch(d), 3, 1, 1, true, init);
        let aux = config
            .aux_scales
            .iter()
            .map(|&f| (f, ConvLayer::conv(&format!("aux{f}"), b * f, n, 1, 1, 0, false, init)))
            .collect();
        let up = (0..d)
            .map(|l| ConvLayer::deconv(&format!("dec{l}.up"), ch(l + 1), ch(l), 2, 2, init))
            .collect();
        let fuse = (0..d)
            .map(|l| ConvLayer::conv(&format!("dec{l}.fuse"), 2 * ch(l), ch(l), 3, 1, 1, true, init))
            .collect();
        let cls = ConvLayer::conv("cls", b, n, 1, 1, 0, false, init);
        Ok(Self {
            config: config.clone(),
            stem,
            enc,
            bottleneck,
            aux,
            up,
            fuse,
            cls,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Parameter count from the layer formula.
    pub fn param_count_formula(config: &HeadConfig) -> usize {
        let (c, b, n, d) = (config.in_channels, config.base_channels, config.num_classes, config.depth);
        let conv = |i: usize, o: usize, k: usize| i * o * k * k * k + o;
        let ch = |l: usize| b << l;
        let mut total = conv(c, b, 3) + conv(ch(d), ch(d), 3) + conv(b, n, 1);
        for l in 0..d {
            total += conv(ch(l), ch(l + 1), 3) + conv(ch(l + 1), ch(l), 2) + conv(2 * ch(l), ch(l), 3);
        }
        total + config.aux_scales.iter().map(|&f| conv(b * f, n, 1)).sum::<usize>()
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        std::iter::once(&self.stem)
            .chain(&self.enc)
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.aux.iter().map(|(_, l)| l))
            .chain(self.up.iter().zip(&self.fuse).flat_map(|(u, f)| [u, f]))
            .chain(std::iter::once(&self.cls))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers().flat_map(|l| l.named_params()).collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        out.extend(self.stem.named_params_mut());
        for l in &mut self.enc {
            out.extend(l.named_params_mut());
        }
        out.extend(self.bottleneck.named_params_mut());
        for (_, l) in &mut self.aux {
            out.extend(l.named_params_mut());
        }
        for (u, f) in self.up.iter_mut().zip(self.fuse.iter_mut()) {
            out.extend(u.named_params_mut());
            out.extend(f.named_params_mut());
        }
        out.extend(self.cls.named_params_mut());
        out
    }

    pub fn zero_classifiers(&mut self) {
        self.cls.zero_params();
        for (_, l) in &mut self.aux {
            l.zero_params();
        }
    }

    fn aux_feature<'a>(&self, cache_bottleneck: &'a Tensor<T>, fuse: &'a [Tensor<T>], factor: usize) -> &'a Tensor<T> {
        let level = factor.trailing_zeros() as usize;
        if level == self.config.depth {
            cache_bottleneck
        } else {
            &fuse[level]
        }
    }

    pub fn forward(&self, volume: &Tensor<T>) -> Result<(MultiScaleLogits<T>, UnetCache<T>)> {
        self.config.check_input(volume.shape(), true)?;
        let d = self.config.depth;
        let stem = self.stem.forward(volume)?;
        let mut enc: Vec<Tensor<T>> = Vec::with_capacity(d);
        for (l, layer) in self.enc.iter().enumerate() {
            let x = if l == 0 { &stem } else { &enc[l - 1] };
            let y = layer.forward(x)?;
            enc.push(y);
        }
        let bottleneck = self.bottleneck.forward(&enc[d - 1])?;

        let mut up = vec![None; d];
        let mut cat = vec![None; d];
        let mut fuse: Vec<Option<Tensor<T>>> = vec![None; d];
        for l in (0..d).rev() {
            let below = if l + 1 == d { &bottleneck } else { fuse[l + 1].as_ref().unwrap() };
            let u = self.up[l].forward(below)?;
            let skip = if l == 0 { &stem } else { &enc[l - 1] };
            let c = concat_channels(&u, skip)?;
            fuse[l] = Some(self.fuse[l].forward(&c)?);
            up[l] = Some(u);
            cat[l] = Some(c);
        }
        let fuse: Vec<Tensor<T>> = fuse.into_iter().map(Option::unwrap).collect();
        let full = self.cls.forward(&fuse[0])?;
        let mut aux = Vec::with_capacity(self.aux.len());
        for (factor, layer) in &self.aux {
            let logits = layer.forward(self.aux_feature(&bottleneck, &fuse, *factor))?;
            aux.push(AuxLogits { factor: *factor, logits });
        }
        let outputs = MultiScaleLogits { full, aux };
        let cache = UnetCache {
            input: volume.clone(),
            stem,
            enc,
            bottleneck,
            up: up.into_iter().map(Option::unwrap).collect(),
            cat: cat.into_iter().map(Option::unwrap).collect(),
            fuse,
            outputs: outputs.clone(),
        };
        Ok((outputs, cache))
    }

    /// Backpropagates gradients w.r.t. every output scale; returns the input gradient.
    pub fn backward(&mut self, cache: &UnetCache<T>, grads: &MultiScaleLogits<T>) -> Result<Tensor<T>> {
        let d = self.config.depth;
        if grads.aux.len() != self.aux.len()
            || grads.aux.iter().zip(&self.aux).any(|(g, (f, _))| g.factor != *f)
        {
            return Err(Error::Config("aux gradients do not match the head's aux scales".into()));
        }
        let mut d_fuse: Vec<Option<Tensor<T>>> = vec![None; d];
        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None; d];
        let mut d_bottleneck = None;
        let mut d_stem = None;

        add_into(
            &mut d_fuse[0],
            self.cls.backward(&cache.fuse[0], &cache.outputs.full, &grads.full)?,
        );
        for (i, g) in grads.aux.iter().enumerate() {
            let level = g.factor.trailing_zeros() as usize;
            let feature = if level == d { &cache.bottleneck } else { &cache.fuse[level] };
            let (_, layer) = &mut self.aux[i];
            let df = layer.backward(feature, &cache.outputs.aux[i].logits, &g.logits)?;
            if level == d {
                add_into(&mut d_bottleneck, df);
            } else {
                add_into(&mut d_fuse[level], df);
            }
        }

        for l in 0..d {
            let df = take_or_zero(d_fuse[l].take(), &cache.fuse[l]);
            let d_cat = self.fuse[l].backward(&cache.cat[l], &cache.fuse[l], &df)?;
            let (d_up, d_skip) = split_channels(&d_cat, cache.up[l].shape()[0])?;
            let below = if l + 1 == d { &cache.bottleneck } else { &cache.fuse[l + 1] };
            let d_below = self.up[l].backward(below, &cache.up[l], &d_up)?;
            if l + 1 == d {
                add_into(&mut d_bottleneck, d_below);
            } else {
                add_into(&mut d_fuse[l + 1], d_below);
            }
            if l == 0 {
                add_into(&mut d_stem, d_skip);
            } else {
                add_into(&mut d_enc[l - 1], d_skip);
            }
        }

        let db = take_or_zero(d_bottleneck, &cache.bottleneck);
        let de = self.bottleneck.backward(&cache.enc[d - 1], &cache.bottleneck, &db)?;
        add_into(&mut d_enc[d - 1], de);
        for l in (0..d).rev() {
            let g = take_or_zero(d_enc[l].take(), &cache.enc[l]);
            let x = if l == 0 { &cache.stem } else { &cache.enc[l - 1] };
            let dx = self.enc[l].backward(x, &cache.enc[l], &g)?;
            if l == 0 {
                add_into(&mut d_stem, dx);
            } else {
                add_into(&mut d_enc[l - 1], dx);
            }
        }
        let ds = take_or_zero(d_stem, &cache.stem);
        self.stem.backward(&cache.input, &cache.stem, &ds)
    }

    /// Forward pass with the skip branch replaced by zeros; used to check the skip wiring.
    pub fn forward_without_skips(&self, volume: &Tensor<T>) -> Result<Tensor<T>> {
        self.config.check_input(volume.shape(), true)?;
        let d = self.config.depth;
        let stem = self.stem.forward(volume)?;
        let mut x = stem;
        for layer in &self.enc {
            x = layer.forward(&x)?;
        }
        let mut u = self.bottleneck.forward(&x)?;
        for l in (0..d).rev() {
            let up = self.up[l].forward(&u)?;
            let zeros = Tensor::zeros(up.shape());
            u = self.fuse[l].forward(&concat_channels(&up, &zeros)?)?;
        }
        self.cls.forward(&u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(c: usize, b: usize, n: usize) -> HeadConfig {
        HeadConfig {
            in_channels: c,
            num_classes: n,
            depth: 1,
            base_channels: b,
            aux_scales: vec![2],
        }
    }

    #[test]
    fn output_shapes() {
        let head: UnetHead = UnetHead::new(&config(8, 8, 18), &mut ParamInit::new(0)).unwrap();
        let x = Tensor::full(&[8, 8, 8, 8], 0.1);
        let (out, _) = head.forward(&x).unwrap();
        assert_eq!(out.full.shape(), &[18, 8, 8, 8]);
        assert_eq!(out.aux.len(), 1);
        assert_eq!(out.aux[0].factor, 2);
        assert_eq!(out.aux[0].logits.shape(), &[18, 4, 4, 4]);
    }

    #[test]
    fn deeper_head_shapes() {
        let cfg = HeadConfig {
            depth: 2,
            aux_scales: vec![2, 4],
            ..config(3, 4, 5)
        };
        let head: UnetHead = UnetHead::new(&cfg, &mut ParamInit::new(1)).unwrap();
        let (out, _) = head.forward(&Tensor::full(&[3, 4, 8, 8], 0.2)).unwrap();
        assert_eq!(out.full.shape(), &[5, 4, 8, 8]);
        assert_eq!(out.aux[0].logits.shape(), &[5, 2, 4, 4]);
        assert_eq!(out.aux[1].logits.shape(), &[5, 1, 2, 2]);
        assert_eq!(head.named_params().iter().map(|(_, t)| t.len()).sum::<usize>(), UnetHead::<f64>::param_count_formula(&cfg));
    }

    #[test]
    fn golden_param_count() {
        // stem 1736 + enc0 3472 + bottleneck 6928 + aux2 306 + dec0.up 1032 + dec0.fuse 3464 + cls 162
        let cfg = config(8, 8, 18);
        assert_eq!(UnetHead::<f64>::param_count_formula(&cfg), 17100);
        let head: UnetHead = UnetHead::new(&cfg, &mut ParamInit::new(0)).unwrap();
        let enumerated: usize = head.named_params().iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        assert_eq!(enumerated, 17100);
    }

    #[test]
    fn stable_parameter_names() {
        let head: UnetHead = UnetHead::new(&config(2, 2, 3), &mut ParamInit::new(0)).unwrap();
        let names: Vec<String> = head.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "stem.kernel", "stem.bias", "enc0.kernel", "enc0.bias", "bottleneck.kernel",
                "bottleneck.bias", "aux2.kernel", "aux2.bias", "dec0.up.kernel", "dec0.up.bias",
                "dec0.fuse.kernel", "dec0.fuse.bias", "cls.kernel", "cls.bias"
            ]
        );
        let mut head = head;
        let mut_names: Vec<String> = head.named_params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn rejects_indivisible_input() {
        let head: UnetHead = UnetHead::new(&config(2, 2, 3), &mut ParamInit::new(0)).unwrap();
        assert!(matches!(head.forward(&Tensor::zeros(&[2, 3, 4, 4])), Err(Error::Dimension(_))));
        assert!(matches!(head.forward(&Tensor::zeros(&[3, 4, 4, 4])), Err(Error::Shape { .. })));
    }
}
