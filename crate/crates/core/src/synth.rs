//! Seeded synthetic occupancy scenes.
//!
//! A scene is a free-filled grid with a ground slab, boxes and columns of semantic classes, and
//! one rare class whose voxel count is set so that `free / rare` equals the configured
//! imbalance ratio. Features are a fixed unit template per class plus Gaussian noise, so a
//! per-voxel classifier can recover the labels exactly when the noise is zero.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{read_tensor, write_tensor, Tensor};
use crate::voxel::{read_grid, write_grid, GridGeometry, Label, LabelSpace, VoxelGrid};

const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub geometry: GridGeometry,
    pub label_space: LabelSpace,
    /// Instances to place per class (index = label). Ignored for the free class.
    pub object_counts: Vec<usize>,
    /// Class whose voxel count is derived from `imbalance_ratio`.
    pub rare_class: Label,
    /// Target `free / rare` voxel ratio.
    pub imbalance_ratio: f64,
    pub feature_channels: usize,
    pub noise_level: f64,
    /// Drives placement and noise.
    pub seed: u64,
    /// Drives the per-class feature templates; shared by every scene of a dataset.
    pub template_seed: u64,
}

impl SceneConfig {
    /// 32x32x8 grid, six classes, eight feature channels.
    pub fn desk() -> Self {
        let label_space = LabelSpace::reduced();
        Self {
            geometry: GridGeometry::nuscenes().with_dims([32, 32, 8]).unwrap(),
            // barrier, bicycle, car, driveable_surface, vegetation
            object_counts: vec![3, 1, 4, 1, 4, 0],
            rare_class: label_space.find("bicycle").unwrap(),
            label_space,
            imbalance_ratio: 100.0,
            feature_channels: 8,
            noise_level: 0.05,
            seed: 0,
            template_seed: 7,
        }
    }

    /// All 18 classes at the given resolution, two instances of each object class.
    pub fn full_label_space(dims: [usize; 3]) -> Result<Self> {
        let label_space = LabelSpace::nuscenes();
        let mut object_counts = vec![2; 18];
        object_counts[17] = 0;
        Ok(Self {
            geometry: GridGeometry::nuscenes().with_dims(dims)?,
            object_counts,
            rare_class: label_space.find("bicycle").unwrap(),
            label_space,
            imbalance_ratio: 100.0,
            feature_channels: 24,
            noise_level: 0.05,
            seed: 0,
            template_seed: 7,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.label_space.num_classes();
        if self.object_counts.len() != n {
            return Err(Error::Config(format!(
                "object_counts has {} entries for {n} classes",
                self.object_counts.len()
            )));
        }
        self.label_space.check(self.rare_class)?;
        if self.rare_class == self.label_space.free_class() {
            return Err(Error::Config("rare class cannot be the free class".into()));
        }
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be at least 1".into()));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::Config(format!("imbalance_ratio {} must be >= 1", self.imbalance_ratio)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(format!("noise_level {} must be >= 0", self.noise_level)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Ground,
    Column,
    Block,
}

fn shape_of(name: &str) -> Shape {
    match name {
        "driveable_surface" | "other_flat" | "sidewalk" | "terrain" => Shape::Ground,
        "manmade" | "vegetation" => Shape::Column,
        _ => Shape::Block,
    }
}

/// Unit-norm feature template per class.
pub fn class_templates(num_classes: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

struct Placer<'a> {
    grid: &'a mut VoxelGrid,
    free: Label,
    rng: &'a mut ChaCha8Rng,
}

impl Placer<'_> {
    fn region_free(&self, lo: [usize; 3], size: [usize; 3]) -> bool {
        (lo[2]..lo[2] + size[2]).all(|z| {
            (lo[1]..lo[1] + size[1])
                .all(|y| (lo[0]..lo[0] + size[0]).all(|x| self.grid.get([x, y, z]) == self.free))
        })
    }

    fn fill(&mut self, lo: [usize; 3], size: [usize; 3], label: Label) {
        for z in lo[2]..lo[2] + size[2] {
            for y in lo[1]..lo[1] + size[1] {
                for x in lo[0]..lo[0] + size[0] {
                    self.grid.set([x, y, z], label);
                }
            }
        }
    }

    fn ground(&mut self, label: Label, full_layer: bool) {
        let [nx, ny, _] = self.grid.dims();
        if full_layer {
            self.fill([0, 0, 0], [nx, ny, 1], label);
            return;
        }
        let w = self.rng.gen_range(1..=(nx / 3).max(1));
        let h = self.rng.gen_range(1..=(ny / 3).max(1));
        let x = self.rng.gen_range(0..=nx - w);
        let y = self.rng.gen_range(0..=ny - h);
        self.fill([x, y, 0], [w, h, 1], label);
    }

    /// Places a free-standing object resting at `z = base`.
    fn object(&mut self, label: Label, shape: Shape, base: usize, name: &str) -> Result<()> {
        let [nx, ny, nz] = self.grid.dims();
        let room = nz - base;
        for _ in 0..PLACEMENT_RETRIES {
            let size = match shape {
                Shape::Column => {
                    let side = self.rng.gen_range(1..=2.min(nx).min(ny));
                    [side, side, self.rng.gen_range(room.div_ceil(2)..=room)]
                }
                _ => [
                    self.rng.gen_range(2..=5).min(nx),
                    self.rng.gen_range(2..=5).min(ny),
                    self.rng.gen_range(1..=3).min(room),
                ],
            };
            let lo = [
                self.rng.gen_range(0..=nx - size[0]),
                self.rng.gen_range(0..=ny - size[1]),
                base,
            ];
            if self.region_free(lo, size) {
                self.fill(lo, size, label);
                return Ok(());
            }
        }
        Err(Error::Placement(format!(
            "no free room for a {name:?} instance after {PLACEMENT_RETRIES} attempts"
        )))
    }

    /// Grows a 6-connected clump of `count` free voxels from a random free seed.
    fn clump(&mut self, label: Label, count: usize, base: usize) -> usize {
        let geom = *self.grid.geometry();
        let [nx, ny, nz] = geom.dims();
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < PLACEMENT_RETRIES {
            attempts += 1;
            let start = [self.rng.gen_range(0..nx), self.rng.gen_range(0..ny), self.rng.gen_range(base..nz)];
            if self.grid.get(start) != self.free {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([start]);
            self.grid.set(start, label);
            placed += 1;
            while let Some(p) = queue.pop_front() {
                if placed == count {
                    break;
                }
                let mut next = Vec::with_capacity(6);
                for axis in 0..3 {
                    if p[axis] > 0 {
                        let mut q = p;
                        q[axis] -= 1;
                        next.push(q);
                    }
                    if p[axis] + 1 < geom.dims()[axis] && (axis != 2 || p[2] + 1 < nz) {
                        let mut q = p;
                        q[axis] += 1;
                        next.push(q);
                    }
                }
                for q in next {
                    if placed < count && q[2] >= base && self.grid.get(q) == self.free {
                        self.grid.set(q, label);
                        placed += 1;
                        queue.push_back(q);
                    }
                }
            }
        }
        placed
    }
}

fn place_labels(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<VoxelGrid> {
    let space = &config.label_space;
    let free = space.free_class();
    let mut grid = VoxelGrid::filled(config.geometry, free);
    let nz = config.geometry.dims()[2];
    let base = usize::from(nz > 1);
    let mut placer = Placer {
        grid: &mut grid,
        free,
        rng,
    };

    let order: Vec<Label> = space
        .semantic_labels()
        .filter(|&l| l != config.rare_class)
        .collect();
    // ground classes first so objects rest on them
    for &label in order.iter().filter(|&&l| shape_of(space.name(l)) == Shape::Ground) {
        let full = space.name(label) == "driveable_surface";
        for _ in 0..config.object_counts[label as usize] {
            placer.ground(label, full);
        }
    }
    for &label in order.iter().filter(|&&l| shape_of(space.name(l)) != Shape::Ground) {
        let shape = shape_of(space.name(label));
        for _ in 0..config.object_counts[label as usize] {
            placer.object(label, shape, base, space.name(label))?;
        }
    }

    // rare voxels r and free voxels f with f = ratio * r; leftovers become filler
    let free_now = placer.grid.labels().iter().filter(|&&l| l == free).count();
    let rare_count = (free_now as f64 / (config.imbalance_ratio + 1.0)).floor() as usize;
    if rare_count == 0 {
        return Err(Error::Placement(format!(
            "{free_now} free voxels cannot host imbalance ratio {}",
            config.imbalance_ratio
        )));
    }
    let clumps = config.object_counts[config.rare_class as usize].max(1).min(rare_count);
    let mut placed = 0;
    for i in 0..clumps {
        let share = rare_count / clumps + usize::from(i < rare_count % clumps);
        placed += placer.clump(config.rare_class, share, base);
    }
    if placed < rare_count {
        placed += placer.clump(config.rare_class, rare_count - placed, 0);
    }
    if placed != rare_count {
        return Err(Error::Placement(format!(
            "placed {placed} of {rare_count} rare voxels"
        )));
    }
    let target_free = (config.imbalance_ratio * rare_count as f64).round() as usize;
    let mut excess = (free_now - rare_count).saturating_sub(target_free);
    if excess > 0 {
        let hist = grid.histogram(space.num_classes());
        let filler = space
            .semantic_labels()
            .filter(|&l| l != config.rare_class)
            .max_by_key(|&l| (hist[l as usize], std::cmp::Reverse(l)))
            .ok_or_else(|| Error::Placement("no class available to absorb surplus free voxels".into()))?;
        for l in grid.labels_mut().iter_mut() {
            if excess == 0 {
                break;
            }
            if *l == free {
                *l = filler;
                excess -= 1;
            }
        }
    }
    Ok(grid)
}

/// Builds one `([C, Z, H, W] features, labels)` pair.
pub fn generate_scene(config: &SceneConfig) -> Result<(Tensor<f64>, VoxelGrid)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = place_labels(config, &mut rng)?;
    let templates = class_templates(
        config.label_space.num_classes(),
        config.feature_channels,
        config.template_seed,
    );
    let [nx, ny, nz] = config.geometry.dims();
    let vol = nx * ny * nz;
    let c = config.feature_channels;
    let mut data = vec![0.0; c * vol];
    for (v, &l) in grid.labels().iter().enumerate() {
        for ch in 0..c {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data[ch * vol + v] = templates[l as usize][ch] + config.noise_level * noise;
        }
    }
    Ok((Tensor::new(&[c, nz, ny, nx], data)?, grid))
}

/// Depth-bin target per BEV column: height index of the topmost occupied voxel, 0 if empty.
/// Columns are ordered `y * nx + x`; there are `nz` bins.
pub fn depth_targets(grid: &VoxelGrid, space: &LabelSpace) -> Vec<usize> {
    let [nx, ny, nz] = grid.dims();
    let free = space.free_class();
    (0..nx * ny)
        .map(|col| {
            let (x, y) = (col % nx, col / nx);
            (0..nz).rev().find(|&z| grid.get([x, y, z]) != free).unwrap_or(0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub grid: PathBuf,
    pub features: PathBuf,
    pub seed: u64,
}

/// Scene list: one `id<TAB>grid<TAB>features<TAB>seed` line per scene, paths relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::Validation(format!("{}:{}: {msg}", path.display(), i + 1));
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                grid: fields[1].into(),
                features: fields[2].into(),
                seed: fields[3].parse().map_err(|_| bad("seed is not an integer"))?,
            });
        }
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.id, e.grid.display(), e.features.display(), e.seed);
        }
        out
    }

    pub fn load(&self, entry: &ManifestEntry, space: &LabelSpace) -> Result<(Tensor<f64>, VoxelGrid)> {
        let grid = read_grid(self.base_dir.join(&entry.grid), space)?;
        let features = read_tensor(self.base_dir.join(&entry.features))?;
        let [nz, ny, nx] = grid.spatial_shape();
        match features.shape() {
            &[_, z, y, x] if [z, y, x] == [nz, ny, nx] => Ok((features, grid)),
            s => Err(Error::shape(
                format!("features of scene {}", entry.id),
                &[0, nz, ny, nx],
                s,
            )),
        }
    }

    pub fn load_all(&self, space: &LabelSpace) -> Result<Vec<(Tensor<f64>, VoxelGrid)>> {
        self.entries.iter().map(|e| self.load(e, space)).collect()
    }
}

/// Writes `n_scenes` scenes (seeds `seed, seed + 1, ...`) and `manifest.txt` into `out_dir`.
pub fn generate_dataset(config: &SceneConfig, n_scenes: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let seed = config.seed.wrapping_add(i as u64);
        let (features, grid) = generate_scene(&config.with_seed(seed))?;
        let id = format!("scene_{i:04}");
        let entry = ManifestEntry {
            grid: format!("{id}.voxg").into(),
            features: format!("{id}.voxt").into(),
            id,
            seed,
        };
        write_grid(&grid, out_dir.join(&entry.grid))?;
        write_tensor(&features, out_dir.join(&entry.features))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::class_frequencies;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::desk();
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
        let c = generate_scene(&cfg.with_seed(1)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn noiseless_features_recover_labels() {
        let cfg = SceneConfig {
            noise_level: 0.0,
            ..SceneConfig::desk()
        };
        let (features, grid) = generate_scene(&cfg).unwrap();
        let templates = class_templates(6, 8, cfg.template_seed);
        let vol = grid.labels().len();
        for (v, &l) in grid.labels().iter().enumerate() {
            let best = (0..6)
                .max_by(|&a, &b| {
                    let dot = |c: usize| (0..8).map(|ch| templates[c][ch] * features.data()[ch * vol + v]).sum::<f64>();
                    dot(a).total_cmp(&dot(b))
                })
                .unwrap();
            assert_eq!(best as u8, l);
        }
    }

    #[test]
    fn imbalance_ratio_is_met() {
        let cfg = SceneConfig {
            geometry: GridGeometry::nuscenes().with_dims([64, 64, 8]).unwrap(),
            imbalance_ratio: 1000.0,
            ..SceneConfig::desk()
        };
        let (_, grid) = generate_scene(&cfg).unwrap();
        let s = class_frequencies([&grid], &cfg.label_space).unwrap();
        let ratio = s.counts()[5] as f64 / s.counts()[1] as f64;
        assert!((ratio / 1000.0 - 1.0).abs() <= 0.2, "{ratio}");
    }

    #[test]
    fn exact_ten_thousand_to_one() {
        let cfg = SceneConfig {
            geometry: GridGeometry::nuscenes().with_dims([64, 64, 8]).unwrap(),
            imbalance_ratio: 10_000.0,
            ..SceneConfig::desk()
        };
        let grids: Vec<VoxelGrid> = (0..4).map(|s| generate_scene(&cfg.with_seed(s)).unwrap().1).collect();
        let s = class_frequencies(&grids, &cfg.label_space).unwrap();
        assert!(s.counts()[1] > 0);
        assert_eq!(s.counts()[5], 10_000 * s.counts()[1]);
    }

    #[test]
    fn full_label_space_scene() {
        let cfg = SceneConfig::full_label_space([32, 32, 8]).unwrap();
        let (f, g) = generate_scene(&cfg).unwrap();
        assert_eq!(f.shape(), &[24, 8, 32, 32]);
        g.validate(&cfg.label_space).unwrap();
        assert!(g.histogram(18).iter().filter(|&&c| c > 0).count() >= 10);
    }

    #[test]
    fn placement_failure() {
        let cfg = SceneConfig {
            geometry: GridGeometry::nuscenes().with_dims([4, 4, 2]).unwrap(),
            object_counts: vec![0, 1, 40, 1, 0, 0],
            ..SceneConfig::desk()
        };
        assert!(matches!(generate_scene(&cfg), Err(Error::Placement(_))));
        let tiny = SceneConfig {
            geometry: GridGeometry::nuscenes().with_dims([4, 4, 2]).unwrap(),
            object_counts: vec![0; 6],
            imbalance_ratio: 1000.0,
            ..SceneConfig::desk()
        };
        assert!(matches!(generate_scene(&tiny), Err(Error::Placement(_))));
    }

    #[test]
    fn depth_targets_pick_topmost() {
        let mut g = VoxelGrid::filled(GridGeometry::nuscenes().with_dims([2, 1, 4]).unwrap(), 5);
        g.set([0, 0, 0], 3);
        g.set([0, 0, 2], 2);
        assert_eq!(depth_targets(&g, &LabelSpace::reduced()), vec![2, 0]);
    }
}
