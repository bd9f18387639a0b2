//! Training-time augmentation for both modalities.

use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);
pub const JITTER_RANGE: (f64, f64) = (0.8, 1.2);

/// Drawn parameters of a 3D augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment3dParams {
    pub scale: f64,
    pub angle: f64,
}

impl Augment3dParams {
    pub const IDENTITY: Self = Self { scale: 1.0, angle: 0.0 };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            scale: rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1),
            angle: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

/// Scales the horizontal coordinates by `scale`, then rotates about Z.
/// Heights are left untouched.
pub fn apply_augment_3d(cloud: &PointCloud, params: Augment3dParams) -> PointCloud {
    let (sin, cos) = params.angle.sin_cos();
    let coords = cloud
        .coords
        .iter()
        .map(|p| {
            let (x, y) = (p[0] * params.scale, p[1] * params.scale);
            [cos * x - sin * y, sin * x + cos * y, p[2]]
        })
        .collect();
    PointCloud {
        coords,
        intensity: cloud.intensity.clone(),
    }
}

pub fn augment_3d(cloud: &PointCloud, labels: &[u32], rng: &mut impl Rng) -> (PointCloud, Vec<u32>, Augment3dParams) {
    let params = Augment3dParams::sample(rng);
    (apply_augment_3d(cloud, params), labels.to_vec(), params)
}

/// Drawn parameters of a 2D augmentation: crop window, mirror flag and
/// per-channel colour gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment2dParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
    pub jitter: [f64; 3],
}

impl Augment2dParams {
    pub fn sample(image_hw: (usize, usize), crop_hw: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let (h, w) = image_hw;
        let (ch, cw) = crop_hw;
        if ch == 0 || cw == 0 || ch > h || cw > w {
            return Err(Error::invalid(format!(
                "crop {cw}x{ch} (w×h) does not fit image {w}x{h}"
            )));
        }
        Ok(Self {
            top: rng.random_range(0..=h - ch),
            left: rng.random_range(0..=w - cw),
            height: ch,
            width: cw,
            flip: rng.random_bool(0.5),
            jitter: std::array::from_fn(|_| rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1)),
        })
    }
}

/// Crops, optionally mirrors and colour-jitters an image; the label image
/// receives the same crop and mirror but no jitter.
pub fn apply_augment_2d(
    image: &Array3<f64>,
    labels: &Array2<u32>,
    params: &Augment2dParams,
) -> Result<(Array3<f64>, Array2<u32>)> {
    let (h, w, c) = image.dim();
    if labels.dim() != (h, w) {
        return Err(Error::Shape {
            op: "augment_2d",
            lhs: vec![h, w],
            rhs: vec![labels.nrows(), labels.ncols()],
        });
    }
    if c != 3 {
        return Err(Error::invalid(format!("augment_2d expects 3 channels, got {c}")));
    }
    let (top, left, ch, cw) = (params.top, params.left, params.height, params.width);
    if top + ch > h || left + cw > w {
        return Err(Error::invalid(format!(
            "crop window {cw}x{ch}+{left}+{top} exceeds image {w}x{h}"
        )));
    }
    let mut img = image.slice(s![top..top + ch, left..left + cw, ..]).to_owned();
    let mut lab = labels.slice(s![top..top + ch, left..left + cw]).to_owned();
    if params.flip {
        img.invert_axis(ndarray::Axis(1));
        lab.invert_axis(ndarray::Axis(1));
        img = img.as_standard_layout().to_owned();
        lab = lab.as_standard_layout().to_owned();
    }
    for (k, gain) in params.jitter.iter().enumerate() {
        if *gain != 1.0 {
            img.slice_mut(s![.., .., k]).mapv_inplace(|v| (v * gain).clamp(0.0, 1.0));
        }
    }
    Ok((img, lab))
}

pub fn augment_2d(
    image: &Array3<f64>,
    labels: &Array2<u32>,
    crop_hw: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Array3<f64>, Array2<u32>, Augment2dParams)> {
    let (h, w, _) = image.dim();
    let params = Augment2dParams::sample((h, w), crop_hw, rng)?;
    let (img, lab) = apply_augment_2d(image, labels, &params)?;
    Ok((img, lab, params))
}
