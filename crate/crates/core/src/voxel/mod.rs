//! Label space, grid geometry and dense voxel label grids.

mod geometry;
mod grid;
mod io;
mod labels;

pub use geometry::{GridGeometry, VoxelIndex};
pub use grid::{downsample_labels, flip_grid, Axis, VoxelGrid};
pub use io::{decode_grid, encode_grid, read_grid, write_grid, GRID_MAGIC, GRID_VERSION};
pub use labels::{Label, LabelSpace, NUSCENES_CLASS_NAMES};
