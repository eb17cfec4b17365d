use super::{GridGeometry, Label, LabelSpace, VoxelIndex};
use crate::error::{Error, Result};

/// Dense semantic label per voxel, row-major over `[z, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    geometry: GridGeometry,
    labels: Vec<Label>,
}

impl VoxelGrid {
    pub fn new(geometry: GridGeometry, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != geometry.num_voxels() {
            return Err(Error::shape(
                "voxel grid labels",
                &[geometry.num_voxels()],
                &[labels.len()],
            ));
        }
        Ok(Self { geometry, labels })
    }

    pub fn filled(geometry: GridGeometry, label: Label) -> Self {
        Self {
            labels: vec![label; geometry.num_voxels()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    /// Spatial shape in storage order, `[Z, H, W]`.
    pub fn spatial_shape(&self) -> [usize; 3] {
        let [nx, ny, nz] = self.dims();
        [nz, ny, nx]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    pub fn get(&self, index: VoxelIndex) -> Label {
        self.labels[self.geometry.offset(index)]
    }

    pub fn set(&mut self, index: VoxelIndex, label: Label) {
        let off = self.geometry.offset(index);
        self.labels[off] = label;
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        match self.labels.iter().position(|&l| space.check(l).is_err()) {
            None => Ok(()),
            Some(off) => Err(Error::Validation(format!(
                "voxel {:?} has label {} but only {} classes exist",
                self.geometry.index_of(off),
                self.labels[off],
                space.num_classes()
            ))),
        }
    }

    /// Voxel count per class.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes.max(256)];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts.truncate(num_classes);
        counts
    }
}

/// Coarsens a label grid by an integer factor per axis.
///
/// Each output voxel takes the most frequent non-free label of its block; a block is free only
/// when every voxel in it is free. Ties go to the smaller label id.
pub fn downsample_labels(
    grid: &VoxelGrid,
    factor: [usize; 3],
    space: &LabelSpace,
) -> Result<VoxelGrid> {
    let dims = grid.dims();
    for axis in 0..3 {
        if factor[axis] == 0 || !dims[axis].is_multiple_of(factor[axis]) {
            return Err(Error::Dimension(format!(
                "axis {axis}: {} voxels not divisible by factor {}",
                dims[axis], factor[axis]
            )));
        }
    }
    let out_dims: [usize; 3] = std::array::from_fn(|a| dims[a] / factor[a]);
    let geometry = grid.geometry().with_dims(out_dims)?;
    let free = space.free_class() as usize;
    let [fx, fy, fz] = factor;
    let [nx, ny, _] = dims;

    let mut counts = [0u32; 256];
    let mut labels = Vec::with_capacity(geometry.num_voxels());
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                counts.fill(0);
                for z in oz * fz..(oz + 1) * fz {
                    for y in oy * fy..(oy + 1) * fy {
                        let row = (z * ny + y) * nx;
                        for &l in &grid.labels[row + ox * fx..row + (ox + 1) * fx] {
                            counts[l as usize] += 1;
                        }
                    }
                }
                let mut best = free;
                let mut best_count = 0;
                for (label, &c) in counts.iter().enumerate() {
                    if label != free && c > best_count {
                        best = label;
                        best_count = c;
                    }
                }
                labels.push(best as Label);
            }
        }
    }
    VoxelGrid::new(geometry, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Mirrors labels along a horizontal axis.
pub fn flip_grid(grid: &VoxelGrid, axis: Axis) -> Result<VoxelGrid> {
    let [nx, ny, nz] = grid.dims();
    let src = grid.labels();
    let mut labels = Vec::with_capacity(src.len());
    match axis {
        Axis::Z => return Err(Error::UnsupportedAxis),
        Axis::X => {
            for row in src.chunks_exact(nx) {
                labels.extend(row.iter().rev());
            }
        }
        Axis::Y => {
            for z in 0..nz {
                for y in (0..ny).rev() {
                    let start = (z * ny + y) * nx;
                    labels.extend_from_slice(&src[start..start + nx]);
                }
            }
        }
    }
    VoxelGrid::new(*grid.geometry(), labels)
}
