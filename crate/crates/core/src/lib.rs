//! Volumetric occupancy prediction at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`voxel`]: label space, metric grid geometry, dense label grids and the `VOXG` file format.
//! * [`nn`]: dense tensors with hand-written forward/backward passes for 3D (transposed)
//!   convolution, linear layers and softmax, the AdamW optimizer, finite-difference checking
//!   and the `VOXT` tensor archive.
//! * [`heads`]: the flatten + linear baseline head and the UNet-like multi-scale head.
//! * [`losses`]: class statistics, inverse-frequency weights, weighted cross-entropy, soft dice,
//!   depth-bin cross-entropy and their weighted combination across scales.
//! * [`metrics`]: confusion matrices, per-class IoU and mIoU without the free class.
//! * [`synth`]: seeded synthetic scenes that stand in for an upstream BEV encoder.
//! * [`config`], [`train`], [`verify`]: run configuration, the training/evaluation loop and
//!   the gradient-check suites behind the `voxocc` binary.
//!
//! Axis convention used everywhere: a voxel index is `(x, y, z)`; dense storage is row-major
//! over `[z, y, x]`, so feature volumes are `[channels, Z, H, W]` with `H = y` and `W = x`.

pub mod config;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod train;
pub mod verify;
pub mod voxel;

pub use error::{Error, Result};
