use std::fmt::Write;

use crate::error::{Error, Result};
use crate::voxel::{LabelSpace, VoxelGrid};

pub const DEFAULT_CLAMP_RATIO: f64 = 100.0;

/// Voxel totals per class over a set of grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassStats {
    counts: Vec<u64>,
}

impl ClassStats {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::EmptyDataset("all class counts are zero".into()));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `name<TAB>count<TAB>weight` per class, preceded by a header line.
    pub fn table(&self, weights: &ClassWeights, space: &LabelSpace) -> String {
        let mut out = String::from("class\tcount\tweight\n");
        for (i, name) in space.names().iter().enumerate() {
            let _ = writeln!(out, "{name}\t{}\t{:.6}", self.counts[i], weights.weights()[i]);
        }
        out
    }

    /// Log-scaled bar chart of the counts, one class per line.
    pub fn histogram(&self, space: &LabelSpace, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let pad = space.names().iter().map(|n| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (i, name) in space.names().iter().enumerate() {
            let c = self.counts[i];
            let bar = if c == 0 {
                0
            } else {
                ((1.0 + c as f64).ln() / (1.0 + max).ln() * width as f64).round().max(1.0) as usize
            };
            let _ = writeln!(out, "{name:<pad$} |{} {c}", "#".repeat(bar));
        }
        out
    }
}

pub fn class_frequencies<'a>(
    grids: impl IntoIterator<Item = &'a VoxelGrid>,
    space: &LabelSpace,
) -> Result<ClassStats> {
    let mut counts = vec![0u64; space.num_classes()];
    let mut seen = false;
    for grid in grids {
        seen = true;
        grid.validate(space)?;
        for (c, n) in counts.iter_mut().zip(grid.histogram(space.num_classes())) {
            *c += n;
        }
    }
    if !seen {
        return Err(Error::EmptyDataset("no grids given".into()));
    }
    ClassStats::new(counts)
}

/// Positive per-class loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation(format!("class weights must be positive: {weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Inverse-frequency weights normalised to mean 1, then clipped to
/// `[1 / clamp_ratio, clamp_ratio]` when a ratio is given. The clip is not re-normalised.
pub fn class_weights(stats: &ClassStats, clamp_ratio: Option<f64>) -> Result<ClassWeights> {
    if stats.total() == 0 {
        return Err(Error::EmptyDataset("all class counts are zero".into()));
    }
    if let Some(r) = clamp_ratio {
        if !(r >= 1.0) {
            return Err(Error::Config(format!("clamp ratio {r} must be at least 1")));
        }
    }
    let raw: Vec<f64> = stats.counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let weights = raw
        .iter()
        .map(|r| {
            let w = r / mean;
            match clamp_ratio {
                Some(k) => w.clamp(1.0 / k, k),
                None => w,
            }
        })
        .collect();
    ClassWeights::new(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridGeometry;
    use proptest::prelude::*;

    #[test]
    fn all_free_grid() {
        let g = VoxelGrid::filled(GridGeometry::nuscenes().with_dims([2, 2, 2]).unwrap(), 17);
        let s = class_frequencies([&g], &LabelSpace::nuscenes()).unwrap();
        assert_eq!(s.counts()[17], 8);
        assert_eq!(s.total(), 8);
        assert!(matches!(
            class_frequencies(std::iter::empty(), &LabelSpace::nuscenes()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn two_class_weights() {
        let s = ClassStats::new(vec![100, 1]).unwrap();
        let w = class_weights(&s, None).unwrap();
        // raw [0.01, 1], mean 0.505
        assert!((w.weights()[0] - 0.01 / 0.505).abs() < 1e-12);
        assert!((w.weights()[1] - 1.0 / 0.505).abs() < 1e-12);
        assert!((w.weights()[0] - 0.019802).abs() < 1e-6);
        assert!((w.weights()[1] - 1.980198).abs() < 1e-6);
    }

    #[test]
    fn uniform_counts_give_unit_weights() {
        let w = class_weights(&ClassStats::new(vec![7; 6]).unwrap(), Some(100.0)).unwrap();
        assert!(w.weights().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn clamp_limits_extremes() {
        let w = class_weights(&ClassStats::new(vec![1_000_000, 1, 1]).unwrap(), Some(100.0)).unwrap();
        assert_eq!(w.weights()[0], 0.01);
        assert!(class_weights(&ClassStats { counts: vec![0, 0] }, None).is_err());
    }

    #[test]
    fn table_lists_every_class() {
        let ls = LabelSpace::reduced();
        let s = ClassStats::new(vec![1, 2, 3, 4, 5, 100]).unwrap();
        let w = class_weights(&s, Some(100.0)).unwrap();
        let t = s.table(&w, &ls);
        assert_eq!(t.lines().count(), 7);
        assert!(t.lines().nth(6).unwrap().starts_with("free\t100\t"));
        assert_eq!(s.histogram(&ls, 20).lines().count(), 6);
    }

    proptest! {
        #[test]
        fn weights_order_and_scale(counts in prop::collection::vec(1u64..100_000, 2..18), scale in 1u64..50) {
            let s = ClassStats::new(counts.clone()).unwrap();
            let w = class_weights(&s, None).unwrap();
            let mean = w.weights().iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() <= 1e-9);
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] < counts[j] {
                        prop_assert!(w.weights()[i] > w.weights()[j]);
                    }
                }
            }
            let scaled = ClassStats::new(counts.iter().map(|c| c * scale).collect()).unwrap();
            let ws = class_weights(&scaled, None).unwrap();
            for (a, b) in w.weights().iter().zip(ws.weights()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }
    }
}
