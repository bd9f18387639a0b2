//! Seeded synthetic scenes with exact LiDAR/camera correspondence.
//!
//! Points are uniform in a cube. Their class is a fixed function of position
//! (concentric bands about the Z axis, warped by height), and the camera
//! image is rendered by painting each in-view point's class colour at its
//! projected pixel. The colour is an unambiguous cue, while recovering the
//! class from coordinates requires learning the band structure.

use nalgebra::{Matrix3x4, Matrix4};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::geometry::{map_points_to_pixels, project_labels_to_image, CameraModel, PixelMapping, PointCloud, IGNORE_LABEL};
use crate::rng::SplitRng;

const BACKGROUND: [u8; 3] = [128, 128, 128];
const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [250, 190, 212],
];
/// Safety margin that keeps every point inside the frame when the whole
/// cloud is requested to be visible.
const FULL_VIEW_MARGIN: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_points: usize,
    pub num_classes: usize,
    /// Half-width of the sampling cube, meters.
    pub box_extent: f64,
    /// Target share of points inside the camera view, in (0, 1].
    pub camera_fov_fraction: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_points: 5000,
            num_classes: 3,
            box_extent: 4.0,
            camera_fov_fraction: 0.5,
            image_height: 48,
            image_width: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes as u32 >= IGNORE_LABEL {
            return Err(Error::invalid(format!(
                "num_classes must be in [2, 255), got {}",
                self.num_classes
            )));
        }
        if self.num_points < self.num_classes {
            return Err(Error::invalid(format!(
                "num_points ({}) must be at least num_classes ({})",
                self.num_points, self.num_classes
            )));
        }
        if !(self.box_extent > 0.0 && self.box_extent.is_finite()) {
            return Err(Error::invalid(format!("box_extent must be positive, got {}", self.box_extent)));
        }
        if !(self.camera_fov_fraction > 0.0 && self.camera_fov_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "camera_fov_fraction must be in (0, 1], got {}",
                self.camera_fov_fraction
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(())
    }
}

/// Class of a point under the synthetic layout.
pub fn synthetic_class(p: &[f64; 3], extent: f64, num_classes: usize) -> u32 {
    let radius = (p[0] * p[0] + p[1] * p[1]).sqrt() / extent;
    let height = p[2] / extent;
    let s = radius + 0.3 * (std::f64::consts::PI * height).sin();
    ((s * 3.0).floor().rem_euclid(num_classes as f64)) as u32
}

pub fn class_color(class: u32) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

/// A generated scene plus the exact mapping used to render its image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub mapping: PixelMapping,
}

/// LiDAR → camera transform for a camera `distance` meters behind the origin
/// along −X, looking along +X (camera z forward, x right, y down).
fn viewing_extrinsic(distance: f64) -> Matrix4<f64> {
    Matrix4::new(
        0.0, -1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, 0.0, //
        1.0, 0.0, 0.0, distance, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Chooses the focal length so that about `fraction` of the points land in
/// a `height × width` frame centred on the optical axis.
fn focal_for_fraction(cloud: &PointCloud, extrinsic: &Matrix4<f64>, fraction: f64, height: usize, width: usize) -> Result<f64> {
    let mut spread: Vec<f64> = cloud
        .coords
        .iter()
        .map(|p| {
            let q = extrinsic * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
            let (a, b) = (q[0] / q[2], q[1] / q[2]);
            (a.abs() / (width as f64 / 2.0)).max(b.abs() / (height as f64 / 2.0))
        })
        .collect();
    spread.sort_by(f64::total_cmp);
    let n = spread.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let focal = if k == n {
        FULL_VIEW_MARGIN / spread[n - 1]
    } else {
        2.0 / (spread[k - 1] + spread[k])
    };
    if !(focal.is_finite() && focal > 0.0) {
        return Err(Error::invalid(format!(
            "cannot place a camera seeing {fraction} of the points"
        )));
    }
    Ok(focal)
}

pub fn generate_synthetic_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = SplitRng::seed(cfg.seed);
    let e = cfg.box_extent;
    let mut coords = Vec::with_capacity(cfg.num_points);
    let mut intensity = Vec::with_capacity(cfg.num_points);
    for _ in 0..cfg.num_points {
        // f32-representable so the scene survives the .bin format bit-exactly
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-e..e) as f32 as f64);
        coords.push(p);
        intensity.push(rng.random_range(0.0f32..1.0) as f64);
    }
    let labels: Vec<u32> = coords.iter().map(|p| synthetic_class(p, e, cfg.num_classes)).collect();
    let cloud = PointCloud::new(coords, Some(intensity))?;

    let (h, w) = (cfg.image_height, cfg.image_width);
    let extrinsic = viewing_extrinsic(3.0 * e);
    let focal = focal_for_fraction(&cloud, &extrinsic, cfg.camera_fov_fraction, h, w)?;
    let intrinsic = Matrix3x4::new(
        focal, 0.0, w as f64 / 2.0, 0.0, //
        0.0, focal, h as f64 / 2.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    let camera = CameraModel::new(intrinsic, extrinsic, h, w)?;
    let mapping = map_points_to_pixels(&cloud, &camera)?;
    let label_image = project_labels_to_image(&labels, &mapping)?;
    let image = Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
        let label = label_image[(r, c)];
        let rgb = if label == IGNORE_LABEL { BACKGROUND } else { class_color(label) };
        rgb[k] as f64 / 255.0
    });

    Ok(SyntheticScene {
        scene: Scene {
            cloud,
            labels,
            cameras: vec![camera],
            images: vec![image],
        },
        mapping,
    })
}

/// `count` scenes with seeds `base.seed, base.seed + 1, …`.
pub fn generate_synthetic_dataset(base: &SynthConfig, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| {
            generate_synthetic_scene(&SynthConfig {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}
