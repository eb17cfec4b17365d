//! Training and evaluation loops driven by a [`RunConfig`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ClassWeighting, DataSource, Precision, RunConfig};
use crate::error::{Error, Result};
use crate::heads::{load_named, DepthProbe, HeadKind, MultiScaleLogits, OccupancyHead};
use crate::losses::{
    class_frequencies, class_weights, depth_loss, multiscale_loss, total_loss, ClassWeights, LossBreakdown,
    ScaleTargets,
};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::nn::{encode_archive, read_archive, write_archive, AdamW, NamedTensor, ParamInit, Real, Tensor};
use crate::synth::{depth_targets, generate_scene, Manifest};
use crate::voxel::{Label, LabelSpace, VoxelGrid};

/// A feature volume `[C, Z, H, W]` and its ground-truth grid.
#[derive(Clone, Debug)]
pub struct Sample {
    pub features: Tensor<f64>,
    pub grid: VoxelGrid,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub label_space: LabelSpace,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn samples(pairs: Vec<(Tensor<f64>, VoxelGrid)>) -> Vec<Sample> {
    pairs.into_iter().map(|(features, grid)| Sample { features, grid }).collect()
}

impl Dataset {
    /// Loads manifests or generates the configured synthetic scenes.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let ds = match &config.data {
            DataSource::Manifest { train, eval, label_space } => {
                let train_set = samples(Manifest::read(train)?.load_all(label_space)?);
                let eval_set = match eval {
                    Some(p) => samples(Manifest::read(p)?.load_all(label_space)?),
                    None => train_set.clone(),
                };
                Self {
                    label_space: label_space.clone(),
                    train: train_set,
                    eval: eval_set,
                }
            }
            DataSource::Synthetic {
                scene,
                train_scenes,
                eval_scenes,
            } => {
                let gen = |i: usize| generate_scene(&scene.with_seed(scene.seed.wrapping_add(i as u64)));
                let train = samples((0..*train_scenes).map(gen).collect::<Result<_>>()?);
                let eval = if *eval_scenes == 0 {
                    train.clone()
                } else {
                    samples((*train_scenes..train_scenes + eval_scenes).map(gen).collect::<Result<_>>()?)
                };
                Self {
                    label_space: scene.label_space.clone(),
                    train,
                    eval,
                }
            }
        };
        ds.check(config)?;
        Ok(ds)
    }

    fn check(&self, config: &RunConfig) -> Result<()> {
        let Some(first) = self.train.first() else {
            return Err(Error::EmptyDataset("no training scenes".into()));
        };
        if self.eval.is_empty() {
            return Err(Error::EmptyDataset("no evaluation scenes".into()));
        }
        let shape = first.features.shape().to_vec();
        for s in self.train.iter().chain(&self.eval) {
            if s.features.shape() != shape.as_slice() {
                return Err(Error::shape("scene feature volume", &shape, s.features.shape()));
            }
            s.grid.validate(&self.label_space)?;
        }
        let multiscale = config.head_kind == HeadKind::Unet;
        config.head.check_input(&shape, multiscale)
    }
}

/// Head plus the optional depth probe, with parameters in checkpoint order.
#[derive(Clone, Debug)]
pub struct Model<T = f64> {
    pub head: OccupancyHead<T>,
    pub depth: Option<DepthProbe<T>>,
}

impl<T: Real> Model<T> {
    /// `volume_shape` is the `[C, Z, H, W]` shape of the input features.
    pub fn new(config: &RunConfig, volume_shape: &[usize]) -> Result<Self> {
        let mut init = ParamInit::new(config.training.seed);
        let mut head = OccupancyHead::new(config.head_kind, &config.head, &mut init)?;
        if config.zero_classifier {
            head.zero_classifiers();
        }
        let depth = config.loss.use_depth.then(|| {
            let (c, z) = (volume_shape[0], volume_shape[1]);
            DepthProbe::new(c * z, z, &mut init)
        });
        Ok(Self { head, depth })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.head.named_params();
        if let Some(d) = &self.depth {
            out.extend(d.named_params());
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.head.named_params_mut();
        if let Some(d) = &mut self.depth {
            out.extend(d.named_params_mut());
        }
        out
    }

    pub fn load_params(&mut self, entries: &[NamedTensor]) -> Result<()> {
        load_named(self.named_params_mut(), entries)
    }

    pub fn to_archive(&self) -> Vec<NamedTensor> {
        self.named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                tensor: t.cast(),
            })
            .collect()
    }

    /// Full-resolution prediction; ties go to the smaller class id.
    pub fn predict(&self, features: &Tensor<f64>, template: &VoxelGrid) -> Result<VoxelGrid> {
        let (out, _) = self.head.forward(&features.cast())?;
        argmax_grid(&out.full, template)
    }
}

/// Per-voxel argmax of `[classes, Z, H, W]` logits, placed on `template`'s geometry.
pub fn argmax_grid<T: Real>(logits: &Tensor<T>, template: &VoxelGrid) -> Result<VoxelGrid> {
    let n = logits.shape()[0];
    let voxels = logits.len() / n.max(1);
    if voxels != template.labels().len() {
        return Err(Error::shape("logits vs grid", &template.spatial_shape(), &logits.shape()[1..]));
    }
    let x = logits.data();
    let labels: Vec<Label> = (0..voxels)
        .map(|v| {
            let mut best = 0;
            for c in 1..n {
                if x[c * voxels + v] > x[best * voxels + v] {
                    best = c;
                }
            }
            best as Label
        })
        .collect();
    VoxelGrid::new(*template.geometry(), labels)
}

/// One line of the training log, written after every epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// mIoU of the predictions made during the epoch's forward passes.
    pub miou: f64,
}

pub const LOG_HEADER: &str = "step\tepoch\twce\tdice\tdepth\ttotal\tmiou";

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.epoch, l.wce, l.dice, l.depth, l.total, self.miou
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Vec<NamedTensor>,
    pub log: Vec<LogRecord>,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_archive(self.checkpoint.iter().map(|e| (e.name.as_str(), &e.tensor)))
    }
}

/// Class weights for the configured weighting, computed once from the training split.
pub fn training_class_weights(config: &RunConfig, data: &Dataset) -> Result<ClassWeights> {
    let n = data.label_space.num_classes();
    match config.loss.class_weighting {
        ClassWeighting::Uniform => Ok(ClassWeights::uniform(n)),
        ClassWeighting::Inverse => {
            let stats = class_frequencies(data.train.iter().map(|s| &s.grid), &data.label_space)?;
            class_weights(&stats, config.loss.clamp_ratio)
        }
    }
}

struct Prepared<T> {
    features: Tensor<T>,
    targets: ScaleTargets,
    depth: Vec<usize>,
}

fn add(a: LossBreakdown, b: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        wce: a.wce + s * b.wce,
        dice: a.dice + s * b.dice,
        depth: a.depth + s * b.depth,
        total: a.total + s * b.total,
    }
}

fn scale_grads<T: Real>(g: &mut MultiScaleLogits<T>, s: T) {
    for v in g.full.data_mut() {
        *v = *v * s;
    }
    for a in &mut g.aux {
        for v in a.logits.data_mut() {
            *v = *v * s;
        }
    }
}

fn with_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("training aborted at step {step}: {m}")),
        other => other,
    }
}

fn train_typed<T: Real>(config: &RunConfig, data: &Dataset, log: &mut dyn Write) -> Result<TrainOutcome> {
    let space = &data.label_space;
    let shape = data.train[0].features.shape().to_vec();
    let mut model = Model::<T>::new(config, &shape)?;
    let mut optim = AdamW::<T>::new(config.optimizer)?;
    let weights = training_class_weights(config, data)?;
    let factors = match config.head_kind {
        HeadKind::Unet => config.head.aux_scales.clone(),
        HeadKind::Ffn => Vec::new(),
    };
    let prepared: Vec<Prepared<T>> = data
        .train
        .iter()
        .map(|s| {
            Ok(Prepared {
                features: s.features.cast(),
                targets: ScaleTargets::new(&s.grid, &factors, space)?,
                depth: depth_targets(&s.grid, space),
            })
        })
        .collect::<Result<_>>()?;

    let io = |e| Error::io("training log", e);
    writeln!(log, "{LOG_HEADER}").map_err(io)?;
    let lw = config.loss.weights;
    let batch = config.training.batch_size;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut records = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.training.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut cm = ConfusionMatrix::new(space.num_classes());
        for chunk in order.chunks(batch) {
            step += 1;
            let inv = 1.0 / chunk.len() as f64;
            for (_, t) in model.named_params_mut() {
                t.zero_grad();
            }
            for &i in chunk {
                let p = &prepared[i];
                let (out, cache) = model.head.forward(&p.features)?;
                cm.accumulate(&argmax_grid(&out.full, &p.targets.full)?, &p.targets.full)?;
                let (mut parts, mut grads) =
                    multiscale_loss(&out, &p.targets, &weights, &lw, config.loss.aux_weight)
                        .map_err(with_step(step))?;
                if let Some(probe) = &mut model.depth {
                    let (logits, cols) = probe.forward(&p.features)?;
                    let d = depth_loss(&logits, &p.depth).map_err(with_step(step))?;
                    parts = total_loss(parts.wce, parts.dice, d.value.as_f64(), &lw).map_err(with_step(step))?;
                    let s = T::of(lw.w_depth * inv);
                    probe.backward(&cols, &d.grad.map(|g| g * s))?;
                }
                if !parts.total.is_finite() {
                    return Err(Error::Numeric(format!("training aborted at step {step}: loss is {}", parts.total)));
                }
                scale_grads(&mut grads, T::of(inv));
                model.head.backward(&cache, &grads)?;
                epoch_loss = add(epoch_loss, parts, 1.0 / prepared.len() as f64);
            }
            optim.step(model.named_params_mut()).map_err(with_step(step))?;
            if model.named_params().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Numeric(format!("training aborted at step {step}: non-finite parameters")));
            }
        }
        let record = LogRecord {
            step,
            epoch,
            losses: epoch_loss,
            miou: MetricsReport::from_confusion(&cm, space)?.miou,
        };
        writeln!(log, "{record}").map_err(io)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: model.to_archive(),
        log: records,
        steps: step,
    })
}

/// Trains on `data`, writing log lines to `log` as epochs finish.
pub fn train_on(config: &RunConfig, data: &Dataset, log: &mut dyn Write) -> Result<TrainOutcome> {
    config.validate()?;
    match config.training.precision {
        Precision::F64 => train_typed::<f64>(config, data, log),
        Precision::F32 => train_typed::<f32>(config, data, log),
    }
}

/// Loads data, trains, and writes the configured checkpoint and log files.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let data = Dataset::load(config)?;
    let outcome = match &config.output.log {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            let out = train_on(config, &data, &mut w);
            w.flush().map_err(|e| Error::io(path, e))?;
            out?
        }
        None => train_on(config, &data, &mut std::io::sink())?,
    };
    if let Some(path) = &config.output.checkpoint {
        write_archive(outcome.checkpoint.iter().map(|e| (e.name.as_str(), &e.tensor)), path)?;
    }
    Ok(outcome)
}

/// Confusion-matrix evaluation of full-scale argmax predictions; aux outputs are ignored.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], space: &LabelSpace) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(space.num_classes());
    for s in samples {
        cm.accumulate(&model.predict(&s.features, &s.grid)?, &s.grid)?;
    }
    MetricsReport::from_confusion(&cm, space)
}

/// Builds the configured model, loads `params` into it and evaluates the eval split.
pub fn evaluate_params(config: &RunConfig, data: &Dataset, params: &[NamedTensor]) -> Result<MetricsReport> {
    let mut model = Model::<f64>::new(config, data.train[0].features.shape())?;
    model.load_params(params)?;
    evaluate(&model, &data.eval, &data.label_space)
}

/// Evaluates a checkpoint file on the eval split.
pub fn eval(config: &RunConfig, checkpoint: impl AsRef<Path>) -> Result<MetricsReport> {
    let data = Dataset::load(config)?;
    let params = read_archive(checkpoint)?;
    evaluate_params(config, &data, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::parse(
            "head.base_channels = 4\nscene.dims = 8,8,4\nscene.object_counts = 1,1,1,1,1,0\nscene.imbalance_ratio = 20\ntraining.epochs = 2\noptimizer.learning_rate = 1e-2\n",
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let mut cfg = small();
        cfg.training.epochs = 0;
        let data = Dataset::load(&cfg).unwrap();
        let mut log = Vec::new();
        let out = train_on(&cfg, &data, &mut log).unwrap();
        assert_eq!(String::from_utf8(log).unwrap(), format!("{LOG_HEADER}\n"));
        let init = Model::<f64>::new(&cfg, data.train[0].features.shape()).unwrap();
        assert_eq!(out.checkpoint, init.to_archive());
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let cfg = small();
        let data = Dataset::load(&cfg).unwrap();
        let a = train_on(&cfg, &data, &mut std::io::sink()).unwrap();
        let b = train_on(&cfg, &data, &mut std::io::sink()).unwrap();
        assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.log[1].step, 2);
    }

    #[test]
    fn divergence_reports_step() {
        let mut cfg = small();
        cfg.optimizer.learning_rate = 1e300;
        cfg.optimizer.weight_decay = 0.0;
        let data = Dataset::load(&cfg).unwrap();
        match train_on(&cfg, &data, &mut std::io::sink()) {
            Err(Error::Numeric(m)) => assert!(m.contains("aborted at step"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn depth_term_and_f32_run() {
        let mut cfg = small();
        cfg.loss.use_depth = true;
        cfg.training.precision = Precision::F32;
        let data = Dataset::load(&cfg).unwrap();
        let out = train_on(&cfg, &data, &mut std::io::sink()).unwrap();
        assert!(out.log[0].losses.depth > 0.0);
        assert!(out.checkpoint.iter().any(|e| e.name == "depth.weight"));
        evaluate_params(&cfg, &data, &out.checkpoint).unwrap();
    }

    #[test]
    fn mismatched_checkpoint_names_parameter() {
        let cfg = small();
        let data = Dataset::load(&cfg).unwrap();
        let mut params = Model::<f64>::new(&cfg, data.train[0].features.shape()).unwrap().to_archive();
        params[0].tensor = Tensor::zeros(&[1]);
        match evaluate_params(&cfg, &data, &params) {
            Err(Error::Config(m)) => assert!(m.contains(&params[0].name), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
