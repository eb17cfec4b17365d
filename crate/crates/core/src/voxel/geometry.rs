use crate::error::{Error, Result};

/// Voxel index `(x, y, z)`.
pub type VoxelIndex = [usize; 3];

/// Axis-aligned metric box discretised into `dims = [nx, ny, nz]` voxels.
///
/// Cells are half-open: along each axis voxel `i` covers
/// `[min + i * size, min + (i + 1) * size)`, so the upper corner itself lies outside the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    min_corner: [f64; 3],
    max_corner: [f64; 3],
    dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(min_corner: [f64; 3], max_corner: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        for axis in 0..3 {
            let (lo, hi) = (min_corner[axis], max_corner[axis]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Validation(format!(
                    "axis {axis}: max corner {hi} must exceed min corner {lo}"
                )));
            }
            if dims[axis] == 0 {
                return Err(Error::Validation(format!("axis {axis}: zero voxels")));
            }
            if !((hi - lo) / dims[axis] as f64 > 0.0) {
                return Err(Error::Validation(format!("axis {axis}: voxel size underflows")));
            }
        }
        Ok(Self {
            min_corner,
            max_corner,
            dims,
        })
    }

    /// The occupancy benchmark volume: [-40, 40] x [-40, 40] x [-1, 5.4] metres at 200x200x16.
    pub fn nuscenes() -> Self {
        Self {
            min_corner: [-40.0, -40.0, -1.0],
            max_corner: [40.0, 40.0, 5.4],
            dims: [200, 200, 16],
        }
    }

    /// Same metric extent with a different resolution.
    pub fn with_dims(&self, dims: [usize; 3]) -> Result<Self> {
        Self::new(self.min_corner, self.max_corner, dims)
    }

    pub fn min_corner(&self) -> [f64; 3] {
        self.min_corner
    }

    pub fn max_corner(&self) -> [f64; 3] {
        self.max_corner
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.max_corner[a] - self.min_corner[a]) / self.dims[a] as f64)
    }

    /// Row-major offset of `index` in `[z, y, x]` storage.
    pub fn offset(&self, index: VoxelIndex) -> usize {
        let [nx, ny, _] = self.dims;
        (index[2] * ny + index[1]) * nx + index[0]
    }

    pub fn index_of(&self, offset: usize) -> VoxelIndex {
        let [nx, ny, _] = self.dims;
        [offset % nx, (offset / nx) % ny, offset / (nx * ny)]
    }

    /// Voxel containing `point`, or `None` outside `[min, max)` on any axis.
    pub fn world_to_voxel(&self, point: [f64; 3]) -> Option<VoxelIndex> {
        let mut index = [0; 3];
        for axis in 0..3 {
            let (lo, hi) = (self.min_corner[axis], self.max_corner[axis]);
            let p = point[axis];
            if !(p >= lo && p < hi) {
                return None;
            }
            // scaling by dims/extent keeps exact grid coordinates exact
            let cell = ((p - lo) * self.dims[axis] as f64 / (hi - lo)).floor() as usize;
            index[axis] = cell.min(self.dims[axis] - 1);
        }
        Some(index)
    }

    /// Metric centre of a voxel.
    pub fn voxel_to_world(&self, index: VoxelIndex) -> Result<[f64; 3]> {
        if (0..3).any(|a| index[a] >= self.dims[a]) {
            return Err(Error::Index {
                index,
                dims: self.dims,
            });
        }
        Ok(std::array::from_fn(|a| {
            let extent = self.max_corner[a] - self.min_corner[a];
            self.min_corner[a] + (index[a] as f64 + 0.5) * extent / self.dims[a] as f64
        }))
    }
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self::nuscenes()
    }
}
