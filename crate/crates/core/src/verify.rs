//! Finite-difference gradient-check suites behind `voxocc gradcheck`.
//!
//! Every suite builds a small random problem in f64, computes analytic gradients with the
//! hand-written backward passes and compares them against central differences. A suite passes
//! when the largest relative error (see [`relative_error`](crate::nn::relative_error)) is below
//! [`GRADCHECK_TOLERANCE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::heads::{FfnHead, HeadConfig, HeadKind, MultiScaleLogits, OccupancyHead};
use crate::losses::{
    depth_loss, dice_loss, multiscale_loss, weighted_cross_entropy, ClassWeights, LossWeights, ScaleTargets,
};
use crate::nn::{
    conv3d, conv3d_backward, deconv3d, deconv3d_backward, finite_diff_check, linear, linear_backward, softmax,
    softmax_backward, Conv3dParams, ParamInit, Tensor,
};
use crate::voxel::{GridGeometry, Label, LabelSpace, VoxelGrid};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Perturbs one analytic gradient entry in every suite, which must then fail.
    pub inject_fault: bool,
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: bool,
    worst: f64,
}

impl Ctx {
    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check(&mut self, f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Result<()> {
        let mut a = analytic.to_vec();
        if self.fault {
            a[0] += 1e-2;
        }
        self.worst = self.worst.max(finite_diff_check(f, x, &a, FD_STEP)?);
        Ok(())
    }
}

fn with(t: &Tensor<f64>, x: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape(), x.to_vec()).expect("same length")
}

fn random_grid(rng: &mut ChaCha8Rng, dims: [usize; 3], n: usize) -> VoxelGrid {
    let geom = GridGeometry::nuscenes().with_dims(dims).expect("positive dims");
    let labels = (0..geom.num_voxels()).map(|_| rng.gen_range(0..n) as Label).collect();
    VoxelGrid::new(geom, labels).expect("matching length")
}

fn conv_suite(c: &mut Ctx) -> Result<()> {
    let x = c.tensor(&[3, 4, 6, 5]);
    let p = Conv3dParams {
        kernel: c.tensor(&[4, 3, 3, 3, 3]),
        bias: c.tensor(&[4]),
        stride: [2, 1, 2],
        padding: [1, 1, 0],
    };
    let y = conv3d(&x, &p)?;
    let r = c.tensor(y.shape());
    let g = conv3d_backward(&x, &p, &r)?;
    let loss = |x: &Tensor<f64>, p: &Conv3dParams<f64>| conv3d(x, p).unwrap().dot(&r).unwrap();
    c.check(|v| loss(&with(&x, v), &p), x.data(), g.input.data())?;
    c.check(
        |v| loss(&x, &Conv3dParams { kernel: with(&p.kernel, v), ..p.clone() }),
        p.kernel.data(),
        g.kernel.data(),
    )?;
    c.check(
        |v| loss(&x, &Conv3dParams { bias: with(&p.bias, v), ..p.clone() }),
        p.bias.data(),
        g.bias.data(),
    )
}

fn deconv_suite(c: &mut Ctx) -> Result<()> {
    let x = c.tensor(&[4, 2, 3, 3]);
    let p = Conv3dParams {
        kernel: c.tensor(&[4, 3, 2, 3, 2]),
        bias: c.tensor(&[3]),
        stride: [2, 2, 2],
        padding: [0, 1, 0],
    };
    let y = deconv3d(&x, &p)?;
    let r = c.tensor(y.shape());
    let g = deconv3d_backward(&x, &p, &r)?;
    let loss = |x: &Tensor<f64>, p: &Conv3dParams<f64>| deconv3d(x, p).unwrap().dot(&r).unwrap();
    c.check(|v| loss(&with(&x, v), &p), x.data(), g.input.data())?;
    c.check(
        |v| loss(&x, &Conv3dParams { kernel: with(&p.kernel, v), ..p.clone() }),
        p.kernel.data(),
        g.kernel.data(),
    )?;
    c.check(
        |v| loss(&x, &Conv3dParams { bias: with(&p.bias, v), ..p.clone() }),
        p.bias.data(),
        g.bias.data(),
    )
}

fn linear_suite(c: &mut Ctx) -> Result<()> {
    let x = c.tensor(&[6, 5]);
    let w = c.tensor(&[4, 5]);
    let b = c.tensor(&[4]);
    let r = c.tensor(&[6, 4]);
    let g = linear_backward(&x, &w, &b, &r)?;
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| linear(x, w, b).unwrap().dot(&r).unwrap();
    c.check(|v| loss(&with(&x, v), &w, &b), x.data(), g.input.data())?;
    c.check(|v| loss(&x, &with(&w, v), &b), w.data(), g.weight.data())?;
    c.check(|v| loss(&x, &w, &with(&b, v)), b.data(), g.bias.data())
}

fn softmax_suite(c: &mut Ctx) -> Result<()> {
    let x = c.tensor(&[5, 2, 3, 3]);
    let r = c.tensor(x.shape());
    let p = softmax(&x, 0)?;
    let g = softmax_backward(&p, &r, 0)?;
    c.check(|v| softmax(&with(&x, v), 0).unwrap().dot(&r).unwrap(), x.data(), g.data())
}

fn wce_suite(c: &mut Ctx) -> Result<()> {
    let n = 5;
    let x = c.tensor(&[n, 2, 4, 4]).map(|v| 3.0 * v);
    let gt = random_grid(&mut c.rng, [4, 4, 2], n);
    let weights = ClassWeights::new((0..n).map(|_| c.rng.gen_range(0.1..3.0)).collect())?;
    let l = weighted_cross_entropy(&x, &gt, &weights)?;
    c.check(
        |v| weighted_cross_entropy(&with(&x, v), &gt, &weights).unwrap().value,
        x.data(),
        l.grad.data(),
    )
}

fn dice_suite(c: &mut Ctx) -> Result<()> {
    let n = 4;
    let x = c.tensor(&[n, 2, 4, 4]).map(|v| 3.0 * v);
    let gt = random_grid(&mut c.rng, [4, 4, 2], n - 1);
    let l = dice_loss(&x, &gt)?;
    c.check(|v| dice_loss(&with(&x, v), &gt).unwrap().value, x.data(), l.grad.data())
}

fn depth_suite(c: &mut Ctx) -> Result<()> {
    let (bins, pixels) = (6, 16);
    let x = c.tensor(&[bins, pixels]).map(|v| 3.0 * v);
    let targets: Vec<usize> = (0..pixels).map(|_| c.rng.gen_range(0..bins)).collect();
    let l = depth_loss(&x, &targets)?;
    c.check(|v| depth_loss(&with(&x, v), &targets).unwrap().value, x.data(), l.grad.data())
}

type HeadLoss<'a> = dyn Fn(&MultiScaleLogits<f64>) -> Result<(f64, MultiScaleLogits<f64>)> + 'a;

/// Gradients w.r.t. the input volume and every head parameter of `loss(head(x))`.
fn head_suite(
    c: &mut Ctx,
    kind: HeadKind,
    config: &HeadConfig,
    dims: [usize; 3],
    loss: &HeadLoss<'_>,
) -> Result<()> {
    let seed = c.rng.gen();
    let head = OccupancyHead::<f64>::new(kind, config, &mut ParamInit::new(seed))?;
    let [nx, ny, nz] = dims;
    let x = c.tensor(&[config.in_channels, nz, ny, nx]);

    let mut trained = head.clone();
    let (out, cache) = trained.forward(&x)?;
    let (_, grads) = loss(&out)?;
    let gx = trained.backward(&cache, &grads)?;
    let eval = |h: &OccupancyHead<f64>, x: &Tensor<f64>| loss(&h.forward(x).unwrap().0).unwrap().0;
    c.check(|v| eval(&head, &with(&x, v)), x.data(), gx.data())?;

    let analytic: Vec<(Vec<f64>, Vec<f64>)> = trained
        .named_params()
        .into_iter()
        .map(|(_, t)| (t.data().to_vec(), t.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()])))
        .collect();
    for (i, (values, grad)) in analytic.iter().enumerate() {
        let mut probe = head.clone();
        c.check(
            |v| {
                probe.named_params_mut()[i].1.data_mut().copy_from_slice(v);
                eval(&probe, &x)
            },
            values,
            grad,
        )?;
    }
    Ok(())
}

fn ffn_wce_suite(c: &mut Ctx) -> Result<()> {
    let space = LabelSpace::reduced();
    let config = HeadConfig {
        in_channels: 4,
        num_classes: space.num_classes(),
        ..HeadConfig::default()
    };
    let dims = [4, 4, 2];
    let gt = random_grid(&mut c.rng, dims, space.num_classes());
    let weights = ClassWeights::new((0..space.num_classes()).map(|_| c.rng.gen_range(0.1..3.0)).collect())?;
    // the head alone first, then head + loss
    let head: FfnHead<f64> = FfnHead::new(&config, &mut ParamInit::new(c.rng.gen()))?;
    let x = c.tensor(&[4, 2, 4, 4]);
    let (y, rows) = head.forward(&x)?;
    let r = c.tensor(y.shape());
    let mut h = head.clone();
    let gx = h.backward(&rows, &r)?;
    c.check(|v| head.forward(&with(&x, v)).unwrap().0.dot(&r).unwrap(), x.data(), gx.data())?;
    head_suite(c, HeadKind::Ffn, &config, dims, &|out| {
        let l = weighted_cross_entropy(&out.full, &gt, &weights)?;
        Ok((l.value, MultiScaleLogits { full: l.grad, aux: Vec::new() }))
    })
}

fn unet_multiscale_suite(c: &mut Ctx) -> Result<()> {
    let space = LabelSpace::reduced();
    let config = HeadConfig {
        in_channels: 3,
        num_classes: space.num_classes(),
        depth: 2,
        base_channels: 2,
        aux_scales: vec![2, 4],
    };
    let dims = [8, 8, 4];
    let gt = random_grid(&mut c.rng, dims, space.num_classes());
    let targets = ScaleTargets::new(&gt, &config.aux_scales, &space)?;
    let weights = ClassWeights::new((0..space.num_classes()).map(|_| c.rng.gen_range(0.1..3.0)).collect())?;
    let lw = LossWeights::default();
    head_suite(c, HeadKind::Unet, &config, dims, &|out| {
        let (b, g) = multiscale_loss(out, &targets, &weights, &lw, 0.5)?;
        Ok((b.total, g))
    })
}

type Suite = fn(&mut Ctx) -> Result<()>;

const SUITES: [(&str, Suite); 9] = [
    ("conv3d", conv_suite),
    ("deconv3d", deconv_suite),
    ("linear", linear_suite),
    ("softmax", softmax_suite),
    ("weighted_ce", wce_suite),
    ("dice", dice_suite),
    ("depth", depth_suite),
    ("ffn_head+weighted_ce", ffn_wce_suite),
    ("unet_head+multiscale_loss", unet_multiscale_suite),
];

pub fn suite_names() -> impl Iterator<Item = &'static str> {
    SUITES.iter().map(|(name, _)| *name)
}

fn run_one(index: usize, options: GradcheckOptions) -> SuiteResult {
    let (name, suite) = SUITES[index];
    let mut ctx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(index as u64)),
        fault: options.inject_fault,
        worst: 0.0,
    };
    // non-finite gradients count as a failure rather than an error
    let max_rel_error = match suite(&mut ctx) {
        Ok(()) => ctx.worst,
        Err(_) => f64::INFINITY,
    };
    SuiteResult {
        name,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
    }
}

/// Runs one suite by name.
pub fn run_suite(name: &str, options: GradcheckOptions) -> Option<SuiteResult> {
    SUITES.iter().position(|(n, _)| *n == name).map(|i| run_one(i, options))
}

pub fn run_gradcheck(options: GradcheckOptions) -> Vec<SuiteResult> {
    (0..SUITES.len()).map(|i| run_one(i, options)).collect()
}
