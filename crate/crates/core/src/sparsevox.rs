//! Sparse voxel hashing: point-to-voxel keys, mean-pooled voxel features and
//! containing-voxel ("nearest") interpolation back to points.
//!
//! Voxel rows are always ordered by ascending lexicographic key, so no output
//! depends on hash-map iteration order.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{PixelMapping, PointCloud};

/// Integer voxel coordinate.
pub type VoxelKey = [i64; 3];

/// Base voxel edge length at the finest scale, meters.
pub const BASE_VOXEL_SIZE: f64 = 0.1;

/// Voxel size at 1-based scale `l`: `base · 2^(l−1)`.
pub fn scale_resolution(base: f64, scale_index: usize) -> f64 {
    base * 2f64.powi(scale_index.saturating_sub(1) as i32)
}

/// Per-point voxel keys `⌊p / r⌋` at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMapping {
    pub keys: Vec<VoxelKey>,
    pub resolution: f64,
    pub scale_index: usize,
}

impl VoxelMapping {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn voxel_key(p: &[f64; 3], r: f64) -> VoxelKey {
    [
        (p[0] / r).floor() as i64,
        (p[1] / r).floor() as i64,
        (p[2] / r).floor() as i64,
    ]
}

pub fn build_voxel_mapping(cloud: &PointCloud, resolution: f64, scale_index: usize) -> Result<VoxelMapping> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::invalid(format!(
            "voxel resolution must be positive, got {resolution}"
        )));
    }
    cloud.validate()?;
    Ok(VoxelMapping {
        keys: cloud.coords.iter().map(|p| voxel_key(p, resolution)).collect(),
        resolution,
        scale_index,
    })
}

/// Occupancy structure of a mapping: sorted distinct keys and the voxel row
/// of every point. Shared by array and tensor voxelization.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelIndex {
    pub keys: Vec<VoxelKey>,
    pub table: HashMap<VoxelKey, usize>,
    pub point_rows: Vec<usize>,
    pub counts: Vec<usize>,
}

impl VoxelIndex {
    pub fn from_mapping(mapping: &VoxelMapping) -> Self {
        let mut keys = mapping.keys.clone();
        keys.sort_unstable();
        keys.dedup();
        let table: HashMap<VoxelKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let point_rows: Vec<usize> = mapping.keys.iter().map(|k| table[k]).collect();
        let mut counts = vec![0; keys.len()];
        for &r in &point_rows {
            counts[r] += 1;
        }
        Self {
            keys,
            table,
            point_rows,
            counts,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.keys.len()
    }
}

/// Occupied voxels with one mean-pooled feature row each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub keys: Vec<VoxelKey>,
    pub table: HashMap<VoxelKey, usize>,
    pub features: Array2<f64>,
    pub counts: Vec<usize>,
}

impl SparseVoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.keys.len()
    }

    pub fn lookup(&self, key: &VoxelKey) -> Option<usize> {
        self.table.get(key).copied()
    }
}

/// Scatters point features into their voxels, averaging members.
pub fn voxelize(point_features: &Array2<f64>, mapping: &VoxelMapping) -> Result<SparseVoxelGrid> {
    if point_features.nrows() != mapping.len() {
        return Err(Error::len_mismatch("voxelize", mapping.len(), point_features.nrows()));
    }
    let index = VoxelIndex::from_mapping(mapping);
    let d = point_features.ncols();
    let mut features = Array2::zeros((index.num_voxels(), d));
    for (i, &row) in index.point_rows.iter().enumerate() {
        let mut dst = features.row_mut(row);
        dst += &point_features.row(i);
    }
    for (mut row, &count) in features.rows_mut().into_iter().zip(&index.counts) {
        row /= count as f64;
    }
    Ok(SparseVoxelGrid {
        keys: index.keys,
        table: index.table,
        features,
        counts: index.counts,
    })
}

/// Gives every point the feature of the voxel that contains it.
pub fn devoxelize(grid: &SparseVoxelGrid, mapping: &VoxelMapping) -> Result<Array2<f64>> {
    let d = grid.features.ncols();
    let mut out = Array2::zeros((mapping.len(), d));
    for (i, key) in mapping.keys.iter().enumerate() {
        let row = grid
            .lookup(key)
            .ok_or(Error::MissingVoxel { point: i, key: *key })?;
        out.row_mut(i).assign(&grid.features.row(row));
    }
    Ok(out)
}

/// Keeps the rows of points inside the camera field of view, in ascending
/// point order (the same order used when lifting image features).
pub fn filter_point_features_to_fov(point_features: &Array2<f64>, mapping: &PixelMapping) -> Result<Array2<f64>> {
    if point_features.nrows() != mapping.len() {
        return Err(Error::len_mismatch(
            "filter_point_features_to_fov",
            mapping.len(),
            point_features.nrows(),
        ));
    }
    let idx = mapping.valid_indices();
    Ok(point_features.select(ndarray::Axis(0), &idx))
}
