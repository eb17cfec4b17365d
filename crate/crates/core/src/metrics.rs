//! Confusion matrices, per-class IoU and mIoU over the semantic (non-free) classes.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::voxel::{LabelSpace, VoxelGrid};

/// `counts[gt][pred]` voxel tallies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &VoxelGrid, gt: &VoxelGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape("prediction vs ground truth dims", &gt.dims(), &pred.dims()));
        }
        self.accumulate_labels(pred.labels(), gt.labels())
    }

    pub fn accumulate_labels(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("prediction vs ground truth voxels", &[gt.len()], &[pred.len()]));
        }
        let n = self.num_classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l as usize >= n) {
            return Err(Error::Label {
                label: bad as usize,
                num_classes: n,
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrix merge", &[self.num_classes], &[other.num_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// `TP / (TP + FP + FN)` per class; `None` where the class is absent from both sides.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let n = cm.num_classes();
    (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..n).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean IoU over defined, non-free classes.
pub fn miou(per_class: &[Option<f64>], space: &LabelSpace) -> Result<f64> {
    let defined: Vec<f64> = space
        .semantic_labels()
        .filter_map(|c| per_class.get(c as usize).copied().flatten())
        .collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no semantic class has a defined IoU".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    KeyValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub evaluated_voxels: u64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, space: &LabelSpace) -> Result<Self> {
        let per_class_iou = iou_per_class(cm);
        Ok(Self {
            miou: miou(&per_class_iou, space)?,
            per_class_iou,
            evaluated_voxels: cm.total(),
        })
    }

    pub fn render(&self, space: &LabelSpace, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.render_table(space),
            ReportFormat::KeyValue => self.render_kv(space),
        }
    }

    /// One header row and one value row in percent: mIoU followed by every semantic class.
    pub fn render_table(&self, space: &LabelSpace) -> String {
        let mut cols = vec![("mIoU".to_string(), format!("{:.2}", 100.0 * self.miou))];
        for c in space.semantic_labels() {
            let v = match self.per_class_iou[c as usize] {
                Some(iou) => format!("{:.2}", 100.0 * iou),
                None => "-".to_string(),
            };
            cols.push((space.name(c).to_string(), v));
        }
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let header = row(cols.iter().map(|(h, _)| h.as_str()).collect());
        let values = row(cols.iter().map(|(_, v)| v.as_str()).collect());
        format!("{header}\n{}\n{values}\n", "-".repeat(header.len()))
    }

    pub fn render_kv(&self, space: &LabelSpace) -> String {
        let mut out = format!("miou={:.6}\nevaluated_voxels={}\n", self.miou, self.evaluated_voxels);
        for (i, name) in space.names().iter().enumerate() {
            match self.per_class_iou[i] {
                Some(v) => writeln!(out, "iou.{name}={v:.6}"),
                None => writeln!(out, "iou.{name}=undefined"),
            }
            .unwrap();
        }
        out
    }
}
