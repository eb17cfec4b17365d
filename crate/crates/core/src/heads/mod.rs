//! Occupancy heads mapping a `[C, Z, H, W]` feature volume to per-voxel class logits.

mod depth;
mod ffn;
mod layer;
mod unet;

pub use depth::DepthProbe;
pub use ffn::{ffn_head_forward, FfnHead};
pub use layer::ConvLayer;
pub use unet::{UnetCache, UnetHead};

use crate::error::{Error, Result};
use crate::nn::{NamedTensor, ParamInit, Real, Tensor};

/// Shape configuration shared by both heads. `depth`, `base_channels` and `aux_scales` only
/// affect the UNet head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub aux_scales: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            num_classes: 18,
            depth: 1,
            base_channels: 32,
            aux_scales: vec![2],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("head channel counts must be positive: {self:?}")));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("head depth {} outside 1..=8", self.depth)));
        }
        for (i, &f) in self.aux_scales.iter().enumerate() {
            if !f.is_power_of_two() || f < 2 || f > 1 << self.depth {
                return Err(Error::Config(format!(
                    "aux scale {f} must be a power of two in 2..={} for depth {}",
                    1 << self.depth,
                    self.depth
                )));
            }
            if self.aux_scales[..i].contains(&f) {
                return Err(Error::Config(format!("duplicate aux scale {f}")));
            }
        }
        Ok(())
    }

    /// Checks that a `[C, Z, H, W]` input fits this head.
    pub fn check_input(&self, shape: &[usize], multiscale: bool) -> Result<()> {
        let &[c, z, h, w] = shape else {
            return Err(Error::shape("head input [C, Z, H, W]", &[self.in_channels, 0, 0, 0], shape));
        };
        if c != self.in_channels {
            return Err(Error::shape("head input channels", &[self.in_channels], &[c]));
        }
        let unit = if multiscale { 1 << self.depth } else { 1 };
        if [z, h, w].iter().any(|&d| d == 0 || d % unit != 0) {
            return Err(Error::Dimension(format!(
                "spatial dims {:?} must be positive multiples of {unit}",
                [z, h, w]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxLogits<T = f64> {
    pub factor: usize,
    pub logits: Tensor<T>,
}

/// Full-resolution logits plus one coarser map per supervised scale.
///
/// The same type carries the gradients w.r.t. those logits on the way back.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleLogits<T = f64> {
    pub full: Tensor<T>,
    pub aux: Vec<AuxLogits<T>>,
}

/// Splits the channel axis of a flat BEV map into `z_bins` height slices:
/// `[C_bev, H, W]` -> `[C_bev / z_bins, z_bins, H, W]`.
pub fn reshape_bev_to_volume<T: Real>(bev: &Tensor<T>, z_bins: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = bev.shape() else {
        return Err(Error::shape("BEV map [C, H, W]", &[0, 0, 0], bev.shape()));
    };
    if z_bins == 0 || c % z_bins != 0 {
        return Err(Error::shape(
            format!("BEV channels must divide into {z_bins} height bins"),
            &[z_bins],
            &[c],
        ));
    }
    bev.reshape(&[c / z_bins, z_bins, h, w])
}

/// Inverse of [`reshape_bev_to_volume`].
pub fn volume_to_bev<T: Real>(volume: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, z, h, w] = volume.shape() else {
        return Err(Error::shape("volume [C, Z, H, W]", &[0, 0, 0, 0], volume.shape()));
    };
    volume.reshape(&[c * z, h, w])
}

/// Either head behind one interface.
#[derive(Clone, Debug)]
pub enum OccupancyHead<T = f64> {
    Ffn(FfnHead<T>),
    Unet(UnetHead<T>),
}

#[derive(Clone, Debug)]
pub enum HeadCache<T = f64> {
    Ffn(Tensor<T>),
    Unet(Box<UnetCache<T>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Ffn,
    Unet,
}

impl<T: Real> OccupancyHead<T> {
    pub fn new(kind: HeadKind, config: &HeadConfig, init: &mut ParamInit) -> Result<Self> {
        Ok(match kind {
            HeadKind::Ffn => Self::Ffn(FfnHead::new(config, init)?),
            HeadKind::Unet => Self::Unet(UnetHead::new(config, init)?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::Ffn(_) => HeadKind::Ffn,
            Self::Unet(_) => HeadKind::Unet,
        }
    }

    pub fn forward(&self, volume: &Tensor<T>) -> Result<(MultiScaleLogits<T>, HeadCache<T>)> {
        match self {
            Self::Ffn(h) => {
                let (full, cache) = h.forward(volume)?;
                Ok((MultiScaleLogits { full, aux: Vec::new() }, HeadCache::Ffn(cache)))
            }
            Self::Unet(h) => {
                let (out, cache) = h.forward(volume)?;
                Ok((out, HeadCache::Unet(Box::new(cache))))
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input volume.
    pub fn backward(&mut self, cache: &HeadCache<T>, grads: &MultiScaleLogits<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (Self::Ffn(h), HeadCache::Ffn(c)) => h.backward(c, &grads.full),
            (Self::Unet(h), HeadCache::Unet(c)) => h.backward(c, grads),
            _ => Err(Error::Config("head cache from a different head kind".into())),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Self::Ffn(h) => h.named_params(),
            Self::Unet(h) => h.named_params(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Self::Ffn(h) => h.named_params_mut(),
            Self::Unet(h) => h.named_params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Zeroes every classifier (full and auxiliary) so all logits start at zero.
    pub fn zero_classifiers(&mut self) {
        match self {
            Self::Ffn(h) => h.zero_params(),
            Self::Unet(h) => h.zero_classifiers(),
        }
    }

    /// Overwrites parameters from archive entries; names and shapes must match exactly.
    pub fn load_params(&mut self, entries: &[NamedTensor]) -> Result<()> {
        load_named(self.named_params_mut(), entries)
    }
}

pub(crate) fn load_named<T: Real>(
    params: Vec<(String, &mut Tensor<T>)>,
    entries: &[NamedTensor],
) -> Result<()> {
    if params.len() != entries.len() {
        let expected: Vec<_> = params.iter().map(|(n, _)| n.clone()).collect();
        let found: Vec<_> = entries.iter().map(|e| e.name.clone()).collect();
        return Err(Error::Config(format!(
            "checkpoint has parameters {found:?}, head expects {expected:?}"
        )));
    }
    for ((name, t), e) in params.into_iter().zip(entries) {
        if name != e.name {
            return Err(Error::Config(format!(
                "checkpoint parameter {:?} where head expects {name:?}",
                e.name
            )));
        }
        if t.shape() != e.tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {name:?}: checkpoint shape {:?}, head shape {:?}",
                e.tensor.shape(),
                t.shape()
            )));
        }
        *t = e.tensor.cast();
    }
    Ok(())
}
