//! Desk-scale modal-specific backbones.
//!
//! Both encoders produce `L` parallel feature scales. The image branch is a
//! stack of 3×3 convolution, leaky ReLU and 2×2 pooling blocks decoded FCN
//! style (per-scale 1×1 projection, upsample, sum, classify). The point
//! branch voxelizes at doubling resolutions, runs a residual per-voxel MLP
//! and feeds devoxelized features to the next scale; its decoder
//! concatenates every scale at the points and classifies.

mod params;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::PointScorer;
use crate::geometry::PointCloud;
use crate::rng::SplitRng;
use crate::sparsevox::{build_voxel_mapping, scale_resolution, SparseVoxelGrid, VoxelIndex, VoxelMapping};
use crate::tensor::Tensor;

pub use params::{
    group_of, linear, Binder, ParamStore, GROUPS_3D, GROUPS_TRAINING_ONLY, GROUP_DEC2D, GROUP_DEC3D, GROUP_ENC2D,
    GROUP_ENC3D, GROUP_FUSION,
};

pub const LEAKY_SLOPE: f64 = 0.1;
/// Per-point input channels: x, y, z, intensity.
pub const POINT_INPUT_DIM: usize = 4;
const IMAGE_CHANNELS: usize = 3;

/// Architecture hyper-parameters shared by every branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub scales: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub base_voxel_size: f64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.hidden_dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "network needs scales ≥ 1, hidden_dim ≥ 1 and num_classes ≥ 2, got {self:?}"
            )));
        }
        if !(self.base_voxel_size > 0.0 && self.base_voxel_size.is_finite()) {
            return Err(Error::invalid(format!(
                "base_voxel_size must be positive, got {}",
                self.base_voxel_size
            )));
        }
        Ok(())
    }

    /// Spatial divisor the image size must satisfy.
    pub fn image_divisor(&self) -> usize {
        1 << self.scales
    }
}

fn s(group: &str, scale: usize, layer: &str) -> String {
    format!("{group}.s{scale}.{layer}")
}

/// Voxel-branch weights. Independent of the image branch so both training
/// modes start from the same 3D initialization for a given seed.
pub fn init_3d(cfg: &NetConfig, rng: &mut SplitRng) -> ParamStore {
    let mut rng = rng.split(1);
    let d = cfg.hidden_dim;
    let mut store = ParamStore::new();
    for l in 1..=cfg.scales {
        let d_in = if l == 1 { POINT_INPUT_DIM } else { d };
        store.init_linear(&s(GROUP_ENC3D, l, "fc1"), d_in, d, true, &mut rng);
        store.init_linear(&s(GROUP_ENC3D, l, "fc2"), d, d, true, &mut rng);
        if d_in != d {
            store.init_linear(&s(GROUP_ENC3D, l, "proj"), d_in, d, false, &mut rng);
        }
    }
    store.init_linear(&format!("{GROUP_DEC3D}.cls"), cfg.scales * d, cfg.num_classes, true, &mut rng);
    store
}

/// Image encoder and decoder weights, added to `store`.
pub fn init_2d(cfg: &NetConfig, rng: &mut SplitRng, store: &mut ParamStore) {
    let mut rng = rng.split(2);
    let d = cfg.hidden_dim;
    for l in 1..=cfg.scales {
        let c_in = if l == 1 { IMAGE_CHANNELS } else { d };
        store.init_linear(&s(GROUP_ENC2D, l, "conv"), 9 * c_in, d, true, &mut rng);
        store.init_linear(&s(GROUP_DEC2D, l, "lat"), d, d, true, &mut rng);
    }
    store.init_linear(&format!("{GROUP_DEC2D}.cls"), d, cfg.num_classes, true, &mut rng);
}

/// Packs an `H×W×3` image as an `[H, W, 3]` tensor.
pub fn image_tensor(image: &ndarray::Array3<f64>) -> Tensor {
    let shape = image.shape().to_vec();
    Tensor::new(shape, image.iter().copied().collect()).expect("dimensions match")
}

/// `[N, 4]` network input: coordinates and intensity (0 when absent).
pub fn point_input(cloud: &PointCloud) -> Tensor {
    let mut data = Vec::with_capacity(cloud.len() * POINT_INPUT_DIM);
    for (i, p) in cloud.coords.iter().enumerate() {
        data.extend_from_slice(p);
        data.push(cloud.intensity.as_ref().map_or(0.0, |v| v[i]));
    }
    Tensor::new(vec![cloud.len(), POINT_INPUT_DIM], data).expect("dimensions match")
}

/// Per-scale `[H/2^l, W/2^l, D]` image features, finest first.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures2D {
    pub scales: Vec<Tensor>,
}

pub fn encode_2d(binder: &Binder, cfg: &NetConfig, image: &Tensor) -> Result<MultiScaleFeatures2D> {
    let (h, w) = match image.shape() {
        [h, w, c] if *c == IMAGE_CHANNELS => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "encode_2d",
                lhs: other.to_vec(),
                rhs: vec![0, 0, IMAGE_CHANNELS],
            })
        }
    };
    let div = cfg.image_divisor();
    if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} must be divisible by 2^{} = {div}",
            cfg.scales
        )));
    }
    let mut x = image.clone();
    let mut scales = Vec::with_capacity(cfg.scales);
    for l in 1..=cfg.scales {
        let (hl, wl) = (x.shape()[0], x.shape()[1]);
        let y = linear(binder, &s(GROUP_ENC2D, l, "conv"), &x.im2col3x3()?)
            .and_then(|y| y.reshape(vec![hl, wl, cfg.hidden_dim]))
            .map_err(|e| e.at_scale(l))?;
        x = y.leaky_relu(LEAKY_SLOPE).avg_pool2x2().map_err(|e| e.at_scale(l))?;
        scales.push(x.clone());
    }
    Ok(MultiScaleFeatures2D { scales })
}

/// `[H·W, C]` pixel logits in row-major pixel order.
///
/// The 1×1 projection is applied before the nearest-neighbour upsampling;
/// the two commute exactly, and the low-resolution order is cheaper.
pub fn decode_2d(binder: &Binder, cfg: &NetConfig, features: &MultiScaleFeatures2D) -> Result<Tensor> {
    if features.scales.is_empty() {
        return Err(Error::invalid("decode_2d needs at least one scale"));
    }
    let mut merged: Option<Tensor> = None;
    for (i, f) in features.scales.iter().enumerate() {
        let l = i + 1;
        let (hl, wl, d) = match f.shape() {
            [a, b, c] => (*a, *b, *c),
            other => {
                return Err(Error::Shape {
                    op: "decode_2d",
                    lhs: other.to_vec(),
                    rhs: vec![0, 0, cfg.hidden_dim],
                }
                .at_scale(l))
            }
        };
        let up = f
            .reshape(vec![hl * wl, d])
            .and_then(|x| linear(binder, &s(GROUP_DEC2D, l, "lat"), &x))
            .and_then(|x| x.reshape(vec![hl, wl, cfg.hidden_dim]))
            .and_then(|x| x.upsample_nearest(1 << l))
            .map_err(|e| e.at_scale(l))?;
        merged = Some(match merged {
            None => up,
            Some(m) => m.add(&up).map_err(|e| e.at_scale(l))?,
        });
    }
    let merged = merged.expect("at least one scale");
    let (h, w) = (merged.shape()[0], merged.shape()[1]);
    linear(binder, &format!("{GROUP_DEC2D}.cls"), &merged.reshape(vec![h * w, cfg.hidden_dim])?)
}

/// One voxel scale of the point branch.
#[derive(Debug, Clone)]
pub struct VoxelScale {
    pub mapping: VoxelMapping,
    pub index: VoxelIndex,
    /// `[V, D]`, rows in ascending key order.
    pub voxel_features: Tensor,
    /// `[N, D]`, each point's containing-voxel feature.
    pub point_features: Tensor,
}

impl VoxelScale {
    /// Detached array view of this scale.
    pub fn grid(&self) -> SparseVoxelGrid {
        SparseVoxelGrid {
            keys: self.index.keys.clone(),
            table: self.index.table.clone(),
            features: self.voxel_features.to_array2(),
            counts: self.index.counts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiScaleFeatures3D {
    pub scales: Vec<VoxelScale>,
}

impl MultiScaleFeatures3D {
    pub fn num_points(&self) -> usize {
        self.scales.first().map_or(0, |s| s.mapping.len())
    }
}

pub fn encode_3d(binder: &Binder, cfg: &NetConfig, cloud: &PointCloud, point_features: &Tensor) -> Result<MultiScaleFeatures3D> {
    if cloud.is_empty() {
        return Err(Error::invalid("encode_3d needs at least one point"));
    }
    if point_features.shape().first() != Some(&cloud.len()) {
        return Err(Error::len_mismatch("encode_3d", cloud.len(), point_features.shape()[0]));
    }
    let mut x = point_features.clone();
    let mut scales = Vec::with_capacity(cfg.scales);
    for l in 1..=cfg.scales {
        let step = || -> Result<VoxelScale> {
            let mapping = build_voxel_mapping(cloud, scale_resolution(cfg.base_voxel_size, l), l)?;
            let index = VoxelIndex::from_mapping(&mapping);
            let v = x.segment_mean(&index.point_rows, index.num_voxels())?;
            let hidden = linear(binder, &s(GROUP_ENC3D, l, "fc1"), &v)?.leaky_relu(LEAKY_SLOPE);
            let residual = linear(binder, &s(GROUP_ENC3D, l, "fc2"), &hidden)?;
            let proj = s(GROUP_ENC3D, l, "proj");
            let shortcut = if binder.store().contains(&format!("{proj}.w")) {
                linear(binder, &proj, &v)?
            } else {
                v
            };
            let voxel_features = shortcut.add(&residual)?;
            let point_features = voxel_features.gather_rows(&index.point_rows)?;
            Ok(VoxelScale {
                mapping,
                index,
                voxel_features,
                point_features,
            })
        };
        let scale = step().map_err(|e| e.at_scale(l))?;
        x = scale.point_features.clone();
        scales.push(scale);
    }
    Ok(MultiScaleFeatures3D { scales })
}

/// `[N, C]` point logits from every scale concatenated at the points.
pub fn decode_3d(binder: &Binder, features: &MultiScaleFeatures3D, num_points: usize) -> Result<Tensor> {
    let mut cat: Option<Tensor> = None;
    for (i, scale) in features.scales.iter().enumerate() {
        if scale.point_features.shape().first() != Some(&num_points) {
            return Err(Error::len_mismatch("decode_3d", num_points, scale.point_features.shape()[0]).at_scale(i + 1));
        }
        cat = Some(match cat {
            None => scale.point_features.clone(),
            Some(c) => c.concat_last_dim(&scale.point_features)?,
        });
    }
    let cat = cat.ok_or_else(|| Error::invalid("decode_3d needs at least one scale"))?;
    linear(binder, &format!("{GROUP_DEC3D}.cls"), &cat)
}

/// 3D-only inference: logits for `cloud` using only the point branch.
pub fn infer_3d(binder: &Binder, cfg: &NetConfig, cloud: &PointCloud) -> Result<Array2<f64>> {
    let feats = encode_3d(binder, cfg, cloud, &point_input(cloud))?;
    Ok(decode_3d(binder, &feats, cloud.len())?.to_array2())
}

/// A point-branch model usable wherever a [`PointScorer`] is expected.
pub struct PointModel<'a> {
    pub params: &'a ParamStore,
    pub config: &'a NetConfig,
}

impl PointScorer for PointModel<'_> {
    fn logits(&self, cloud: &PointCloud) -> Result<Array2<f64>> {
        infer_3d(&Binder::inference(self.params), self.config, cloud)
    }
}
