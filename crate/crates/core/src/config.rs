//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted (`optimizer.learning_rate`).
//! Lists are comma separated. Unknown keys are rejected so typos surface before training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::losses::{LossWeights, DEFAULT_AUX_WEIGHT, DEFAULT_CLAMP_RATIO};
use crate::nn::OptimizerConfig;
use crate::synth::SceneConfig;
use crate::voxel::{GridGeometry, LabelSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    /// Clipped inverse frequency from the training split.
    Inverse,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub aux_weight: f64,
    /// `None` disables clipping.
    pub clamp_ratio: Option<f64>,
    pub use_depth: bool,
    pub class_weighting: ClassWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            aux_weight: DEFAULT_AUX_WEIGHT,
            clamp_ratio: Some(DEFAULT_CLAMP_RATIO),
            use_depth: false,
            class_weighting: ClassWeighting::Inverse,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest {
        train: PathBuf,
        /// Defaults to the training manifest.
        eval: Option<PathBuf>,
        label_space: LabelSpace,
    },
    /// Scenes generated in memory: training seeds `scene.seed + i`, evaluation seeds continue
    /// after the training ones. With no eval scenes, evaluation reuses the training scenes.
    Synthetic {
        scene: SceneConfig,
        train_scenes: usize,
        eval_scenes: usize,
    },
}

impl DataSource {
    pub fn label_space(&self) -> &LabelSpace {
        match self {
            Self::Manifest { label_space, .. } => label_space,
            Self::Synthetic { scene, .. } => &scene.label_space,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub head_kind: HeadKind,
    pub head: HeadConfig,
    /// Start every classifier at zero so initial predictions are uniform.
    pub zero_classifier: bool,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub data: DataSource,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::desk();
        Self {
            head_kind: HeadKind::Unet,
            head: HeadConfig {
                in_channels: scene.feature_channels,
                num_classes: scene.label_space.num_classes(),
                ..HeadConfig::default()
            },
            zero_classifier: false,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            data: DataSource::Synthetic {
                scene,
                train_scenes: 1,
                eval_scenes: 0,
            },
            training: TrainingConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Parsed `key = value` pairs that remember which keys were consumed.
struct Entries {
    values: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(Self { values })
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.values.keys().any(|k| k.starts_with(prefix))
    }

    fn take_str(&mut self, key: &str) -> Option<(usize, String)> {
        self.values.remove(key)
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.values.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}"))),
        }
    }

    fn take_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.values.remove(key) {
            None => Ok(default),
            Some((line, v)) => {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
                    })
                    .collect()
            }
        }
    }

    fn take_triple<T: std::str::FromStr + Copy>(&mut self, key: &str, default: [T; 3]) -> Result<[T; 3]> {
        let line = self.values.get(key).map(|e| e.0);
        let v = self.take_list(key, default.to_vec())?;
        v.try_into()
            .map_err(|_| Error::Config(format!("line {}: {key} needs three values", line.unwrap_or(0))))
    }

    fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
        }
    }
}

fn parse_label_space(value: &str) -> Result<LabelSpace> {
    match value {
        "reduced" => Ok(LabelSpace::reduced()),
        "nuscenes" => Ok(LabelSpace::nuscenes()),
        list => {
            // explicit class list, free class last
            let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            let free = names.len().saturating_sub(1);
            let free = u8::try_from(free).map_err(|_| Error::Config("too many classes".into()))?;
            LabelSpace::new(names, free)
        }
    }
}

fn label_space_text(space: &LabelSpace) -> String {
    if *space == LabelSpace::reduced() {
        "reduced".into()
    } else if *space == LabelSpace::nuscenes() {
        "nuscenes".into()
    } else {
        space.names().join(",")
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn take_scene(e: &mut Entries, prefix: &str) -> Result<SceneConfig> {
    let key = |k: &str| format!("{prefix}{k}");
    let space = match e.take_str(&key("label_space")) {
        None => LabelSpace::reduced(),
        Some((line, v)) => parse_label_space(&v)
            .map_err(|err| Error::Config(format!("line {line}: {err}")))?,
    };
    let dims = e.take_triple(&key("dims"), [32usize, 32, 8])?;
    let mut base = if space == LabelSpace::reduced() {
        SceneConfig::desk()
    } else if space == LabelSpace::nuscenes() {
        SceneConfig::full_label_space(dims)?
    } else {
        let n = space.num_classes();
        let mut counts = vec![2; n];
        counts[space.free_class() as usize] = 0;
        SceneConfig {
            object_counts: counts,
            rare_class: space.semantic_labels().next().unwrap_or(0),
            label_space: space.clone(),
            ..SceneConfig::desk()
        }
    };
    let nus = GridGeometry::nuscenes();
    let lo = e.take_triple(&key("min_corner"), nus.min_corner())?;
    let hi = e.take_triple(&key("max_corner"), nus.max_corner())?;
    base.geometry = GridGeometry::new(lo, hi, dims)?;
    base.object_counts = e.take_list(&key("object_counts"), base.object_counts.clone())?;
    if let Some((line, name)) = e.take_str(&key("rare_class")) {
        base.rare_class = space
            .find(&name)
            .ok_or_else(|| Error::Config(format!("line {line}: unknown class {name:?}")))?;
    }
    base.imbalance_ratio = e.take(&key("imbalance_ratio"), base.imbalance_ratio)?;
    base.feature_channels = e.take(&key("feature_channels"), base.feature_channels)?;
    base.noise_level = e.take(&key("noise_level"), base.noise_level)?;
    base.seed = e.take(&key("seed"), base.seed)?;
    base.template_seed = e.take(&key("template_seed"), base.template_seed)?;
    base.label_space = space;
    base.validate()?;
    Ok(base)
}

fn write_scene(out: &mut String, prefix: &str, s: &SceneConfig) {
    let g = &s.geometry;
    let _ = writeln!(out, "{prefix}label_space = {}", label_space_text(&s.label_space));
    let _ = writeln!(out, "{prefix}dims = {}", join(&g.dims()));
    let _ = writeln!(out, "{prefix}min_corner = {}", join(&g.min_corner()));
    let _ = writeln!(out, "{prefix}max_corner = {}", join(&g.max_corner()));
    let _ = writeln!(out, "{prefix}object_counts = {}", join(&s.object_counts));
    let _ = writeln!(out, "{prefix}rare_class = {}", s.label_space.name(s.rare_class));
    let _ = writeln!(out, "{prefix}imbalance_ratio = {}", s.imbalance_ratio);
    let _ = writeln!(out, "{prefix}feature_channels = {}", s.feature_channels);
    let _ = writeln!(out, "{prefix}noise_level = {}", s.noise_level);
    let _ = writeln!(out, "{prefix}seed = {}", s.seed);
    let _ = writeln!(out, "{prefix}template_seed = {}", s.template_seed);
}

/// Scene generator settings under the `scene.` prefix (the `gen-data` config).
pub fn parse_scene_config(text: &str) -> Result<SceneConfig> {
    let mut e = Entries::parse(text)?;
    let scene = take_scene(&mut e, "scene.")?;
    e.finish()?;
    Ok(scene)
}

pub fn scene_config_to_text(scene: &SceneConfig) -> String {
    let mut out = String::new();
    write_scene(&mut out, "scene.", scene);
    out
}

fn opt_path(e: &mut Entries, key: &str) -> Option<PathBuf> {
    e.take_str(key).map(|(_, v)| PathBuf::from(v))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let d = RunConfig::default();

        let data = if let Some((_, train)) = e.take_str("data.manifest") {
            if e.has_prefix("scene.") {
                return Err(Error::Config("data.manifest and scene.* settings are exclusive".into()));
            }
            let label_space = match e.take_str("data.label_space") {
                None => LabelSpace::reduced(),
                Some((line, v)) => {
                    parse_label_space(&v).map_err(|err| Error::Config(format!("line {line}: {err}")))?
                }
            };
            DataSource::Manifest {
                train: train.into(),
                eval: opt_path(&mut e, "data.eval_manifest"),
                label_space,
            }
        } else {
            DataSource::Synthetic {
                scene: take_scene(&mut e, "scene.")?,
                train_scenes: e.take("data.train_scenes", 1)?,
                eval_scenes: e.take("data.eval_scenes", 0)?,
            }
        };
        let space = data.label_space().clone();

        let head_kind = match e.take_str("head.kind") {
            None => d.head_kind,
            Some((_, v)) if v == "unet" => HeadKind::Unet,
            Some((_, v)) if v == "ffn" => HeadKind::Ffn,
            Some((line, v)) => return Err(Error::Config(format!("line {line}: head.kind {v:?} is not ffn|unet"))),
        };
        let default_channels = match &data {
            DataSource::Synthetic { scene, .. } => scene.feature_channels,
            DataSource::Manifest { .. } => d.head.in_channels,
        };
        let head = HeadConfig {
            in_channels: e.take("head.in_channels", default_channels)?,
            num_classes: e.take("head.num_classes", space.num_classes())?,
            depth: e.take("head.depth", d.head.depth)?,
            base_channels: e.take("head.base_channels", d.head.base_channels)?,
            aux_scales: e.take_list("head.aux_scales", d.head.aux_scales.clone())?,
        };
        let zero_classifier = e.take("head.zero_classifier", d.zero_classifier)?;

        let o = d.optimizer;
        let optimizer = OptimizerConfig {
            learning_rate: e.take("optimizer.learning_rate", o.learning_rate)?,
            weight_decay: e.take("optimizer.weight_decay", o.weight_decay)?,
            beta1: e.take("optimizer.beta1", o.beta1)?,
            beta2: e.take("optimizer.beta2", o.beta2)?,
            epsilon: e.take("optimizer.epsilon", o.epsilon)?,
        };

        let l = &d.loss;
        let clamp_ratio = match e.take_str("loss.clamp_ratio") {
            None => l.clamp_ratio,
            Some((_, v)) if v == "none" => None,
            Some((line, v)) => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("line {line}: cannot parse loss.clamp_ratio = {v:?}")))?,
            ),
        };
        let class_weighting = match e.take_str("loss.class_weighting") {
            None => l.class_weighting,
            Some((_, v)) if v == "inverse" => ClassWeighting::Inverse,
            Some((_, v)) if v == "uniform" => ClassWeighting::Uniform,
            Some((line, v)) => {
                return Err(Error::Config(format!(
                    "line {line}: loss.class_weighting {v:?} is not inverse|uniform"
                )))
            }
        };
        let loss = LossConfig {
            weights: LossWeights {
                w_wce: e.take("loss.w_wce", l.weights.w_wce)?,
                w_dice: e.take("loss.w_dice", l.weights.w_dice)?,
                w_depth: e.take("loss.w_depth", l.weights.w_depth)?,
            },
            aux_weight: e.take("loss.aux_weight", l.aux_weight)?,
            clamp_ratio,
            use_depth: e.take("loss.use_depth", l.use_depth)?,
            class_weighting,
        };

        let t = &d.training;
        let precision = match e.take_str("training.precision") {
            None => t.precision,
            Some((_, v)) if v == "f64" => Precision::F64,
            Some((_, v)) if v == "f32" => Precision::F32,
            Some((line, v)) => return Err(Error::Config(format!("line {line}: training.precision {v:?} is not f32|f64"))),
        };
        let training = TrainingConfig {
            epochs: e.take("training.epochs", t.epochs)?,
            batch_size: e.take("training.batch_size", t.batch_size)?,
            seed: e.take("training.seed", t.seed)?,
            precision,
        };
        let output = OutputConfig {
            checkpoint: opt_path(&mut e, "output.checkpoint"),
            log: opt_path(&mut e, "output.log"),
            report: opt_path(&mut e, "output.report"),
        };
        e.finish()?;

        let cfg = Self {
            head_kind,
            head,
            zero_classifier,
            optimizer,
            loss,
            data,
            training,
            output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Manifest { train, eval, .. } = &mut cfg.data {
            resolve(base, train);
            if let Some(e) = eval {
                resolve(base, e);
            }
        }
        for p in [&mut cfg.output.checkpoint, &mut cfg.output.log, &mut cfg.output.report]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.optimizer.validate()?;
        self.loss.weights.validate()?;
        if !(self.loss.aux_weight >= 0.0 && self.loss.aux_weight.is_finite()) {
            return Err(Error::Config(format!("loss.aux_weight {} must be >= 0", self.loss.aux_weight)));
        }
        if let Some(r) = self.loss.clamp_ratio {
            if !(r >= 1.0 && r.is_finite()) {
                return Err(Error::Config(format!("loss.clamp_ratio {r} must be >= 1")));
            }
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        let space = self.data.label_space();
        if self.head.num_classes != space.num_classes() {
            return Err(Error::Config(format!(
                "head.num_classes = {} but the label space has {} classes",
                self.head.num_classes,
                space.num_classes()
            )));
        }
        if let DataSource::Synthetic { scene, train_scenes, .. } = &self.data {
            scene.validate()?;
            if *train_scenes == 0 {
                return Err(Error::Config("data.train_scenes must be at least 1".into()));
            }
            if scene.feature_channels != self.head.in_channels {
                return Err(Error::Config(format!(
                    "head.in_channels = {} but scenes have {} feature channels",
                    self.head.in_channels, scene.feature_channels
                )));
            }
        }
        Ok(())
    }

    /// Every setting, one per line, in a form `parse` reads back to an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let kind = match self.head_kind {
            HeadKind::Ffn => "ffn",
            HeadKind::Unet => "unet",
        };
        let h = &self.head;
        let _ = writeln!(out, "head.kind = {kind}");
        let _ = writeln!(out, "head.in_channels = {}", h.in_channels);
        let _ = writeln!(out, "head.num_classes = {}", h.num_classes);
        let _ = writeln!(out, "head.depth = {}", h.depth);
        let _ = writeln!(out, "head.base_channels = {}", h.base_channels);
        let _ = writeln!(out, "head.aux_scales = {}", join(&h.aux_scales));
        let _ = writeln!(out, "head.zero_classifier = {}", self.zero_classifier);
        let o = &self.optimizer;
        let _ = writeln!(out, "optimizer.learning_rate = {}", o.learning_rate);
        let _ = writeln!(out, "optimizer.weight_decay = {}", o.weight_decay);
        let _ = writeln!(out, "optimizer.beta1 = {}", o.beta1);
        let _ = writeln!(out, "optimizer.beta2 = {}", o.beta2);
        let _ = writeln!(out, "optimizer.epsilon = {}", o.epsilon);
        let l = &self.loss;
        let _ = writeln!(out, "loss.w_wce = {}", l.weights.w_wce);
        let _ = writeln!(out, "loss.w_dice = {}", l.weights.w_dice);
        let _ = writeln!(out, "loss.w_depth = {}", l.weights.w_depth);
        let _ = writeln!(out, "loss.aux_weight = {}", l.aux_weight);
        match l.clamp_ratio {
            Some(r) => writeln!(out, "loss.clamp_ratio = {r}"),
            None => writeln!(out, "loss.clamp_ratio = none"),
        }
        .ok();
        let _ = writeln!(out, "loss.use_depth = {}", l.use_depth);
        let cw = match l.class_weighting {
            ClassWeighting::Inverse => "inverse",
            ClassWeighting::Uniform => "uniform",
        };
        let _ = writeln!(out, "loss.class_weighting = {cw}");
        match &self.data {
            DataSource::Manifest { train, eval, label_space } => {
                let _ = writeln!(out, "data.manifest = {}", train.display());
                if let Some(e) = eval {
                    let _ = writeln!(out, "data.eval_manifest = {}", e.display());
                }
                let _ = writeln!(out, "data.label_space = {}", label_space_text(label_space));
            }
            DataSource::Synthetic {
                scene,
                train_scenes,
                eval_scenes,
            } => {
                let _ = writeln!(out, "data.train_scenes = {train_scenes}");
                let _ = writeln!(out, "data.eval_scenes = {eval_scenes}");
                write_scene(&mut out, "scene.", scene);
            }
        }
        let t = &self.training;
        let _ = writeln!(out, "training.epochs = {}", t.epochs);
        let _ = writeln!(out, "training.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "training.seed = {}", t.seed);
        let p = match t.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let _ = writeln!(out, "training.precision = {p}");
        for (k, v) in [
            ("checkpoint", &self.output.checkpoint),
            ("log", &self.output.log),
            ("report", &self.output.report),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "output.{k} = {}", p.display());
            }
        }
        out
    }
}
