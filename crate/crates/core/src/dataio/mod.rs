//! Dataset input/output, augmentation and the synthetic scene generator.

mod augment;
mod formats;
mod scene_io;
mod synth;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PointCloud};

pub use augment::{
    apply_augment_2d, apply_augment_3d, augment_2d, augment_3d, Augment2dParams, Augment3dParams, JITTER_RANGE,
    SCALE_RANGE,
};
pub use formats::{format_kitti_calib, parse_kitti_calib, read_labels, read_point_cloud_bin, write_labels, write_point_cloud_bin};
pub use scene_io::{list_scene_dirs, load_dataset, load_scene, save_dataset, save_scene, LoadedScene};
pub use synth::{
    class_color, generate_synthetic_dataset, generate_synthetic_scene, synthetic_class, SynthConfig, SyntheticScene,
};

/// One LiDAR sweep with its labels and any number of camera views.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: Vec<u32>,
    pub cameras: Vec<CameraModel>,
    /// `H×W×3` images in [0, 1], one per camera.
    pub images: Vec<Array3<f64>>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        if self.labels.len() != self.cloud.len() {
            return Err(Error::len_mismatch("Scene labels", self.cloud.len(), self.labels.len()));
        }
        if self.images.len() != self.cameras.len() {
            return Err(Error::len_mismatch("Scene images", self.cameras.len(), self.images.len()));
        }
        for (k, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            let (h, w, c) = img.dim();
            if (h, w) != (cam.height(), cam.width()) || c != 3 {
                return Err(Error::invalid(format!(
                    "image {k} is {h}x{w}x{c}, camera expects {}x{}x3",
                    cam.height(),
                    cam.width()
                )));
            }
        }
        Ok(())
    }
}
