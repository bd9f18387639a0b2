//! Scene directories.
//!
//! A scene directory holds `cloud.bin`, `labels.label`, `calib.txt` (first
//! camera, KITTI layout), `image_<k>.png` per camera and an optional
//! `scene.json` sidecar with every camera and the stored point/pixel
//! mapping. A dataset is a directory of scene directories, read in name
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3x4, Matrix4};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::formats::{format_kitti_calib, parse_kitti_calib, read_labels, read_point_cloud_bin, write_labels, write_point_cloud_bin};
use super::Scene;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PixelMapping};

const SIDECAR: &str = "scene.json";
const SIDECAR_FORMAT: &str = "lidarpass-scene";
const SIDECAR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    /// Row-major 3×4.
    intrinsic: Vec<f64>,
    /// Row-major 4×4.
    extrinsic: Vec<f64>,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    num_points: usize,
    cameras: Vec<CameraRecord>,
    mapping: Option<PixelMapping>,
}

/// A scene read from disk together with its stored mapping, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub scene: Scene,
    pub mapping: Option<PixelMapping>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn in_file(path: &Path, err: Error) -> Error {
    match err {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn image_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("image_{k}.png"))
}

fn row_major<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<f64> {
    (0..R).flat_map(|r| (0..C).map(move |c| m[(r, c)])).collect()
}

fn save_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|k| {
            (image[(y as usize, x as usize, k)].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn load_png(path: &Path) -> Result<Array3<f64>> {
    let bytes = read(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        img.get_pixel(c as u32, r as u32)[k] as f64 / 255.0
    }))
}

/// Writes `scene` into `dir`, creating it if needed. Image values are
/// quantized to 8 bits.
pub fn save_scene(dir: &Path, scene: &Scene, mapping: Option<&PixelMapping>) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("cloud.bin"), &write_point_cloud_bin(&scene.cloud))?;
    write(&dir.join("labels.label"), &write_labels(&scene.labels)?)?;
    if let Some(cam) = scene.cameras.first() {
        write(&dir.join("calib.txt"), format_kitti_calib(cam.intrinsic(), cam.extrinsic()).as_bytes())?;
    }
    for (k, img) in scene.images.iter().enumerate() {
        save_png(&image_path(dir, k), img)?;
    }
    let sidecar = Sidecar {
        format: SIDECAR_FORMAT.into(),
        version: SIDECAR_VERSION,
        num_points: scene.cloud.len(),
        cameras: scene
            .cameras
            .iter()
            .map(|c| CameraRecord {
                intrinsic: row_major(c.intrinsic()),
                extrinsic: row_major(c.extrinsic()),
                height: c.height(),
                width: c.width(),
            })
            .collect(),
        mapping: mapping.cloned(),
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::format(e.to_string()))?;
    write(&dir.join(SIDECAR), &json)
}

fn camera_from_record(rec: &CameraRecord, k: usize) -> Result<CameraModel> {
    if rec.intrinsic.len() != 12 || rec.extrinsic.len() != 16 {
        return Err(Error::format(format!("camera {k}: intrinsic needs 12 values and extrinsic 16")));
    }
    CameraModel::new(
        Matrix3x4::from_row_slice(&rec.intrinsic),
        Matrix4::from_row_slice(&rec.extrinsic),
        rec.height,
        rec.width,
    )
}

/// Reads a scene directory. Without a sidecar, the single camera comes from
/// `calib.txt` and takes its size from `image_0.png`.
pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let cloud_path = dir.join("cloud.bin");
    let cloud = read_point_cloud_bin(&read(&cloud_path)?).map_err(|e| in_file(&cloud_path, e))?;
    let label_path = dir.join("labels.label");
    let labels = read_labels(&read(&label_path)?).map_err(|e| in_file(&label_path, e))?;

    let sidecar_path = dir.join(SIDECAR);
    let (cameras, images, mapping) = if sidecar_path.exists() {
        let sidecar: Sidecar = serde_json::from_slice(&read(&sidecar_path)?)
            .map_err(|e| Error::format(format!("{}: {e}", sidecar_path.display())))?;
        if sidecar.format != SIDECAR_FORMAT || sidecar.version != SIDECAR_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported sidecar {} v{}",
                sidecar_path.display(),
                sidecar.format,
                sidecar.version
            )));
        }
        if sidecar.num_points != cloud.len() {
            return Err(Error::format(format!(
                "{}: records {} points but cloud.bin has {}",
                sidecar_path.display(),
                sidecar.num_points,
                cloud.len()
            )));
        }
        let cameras = sidecar
            .cameras
            .iter()
            .enumerate()
            .map(|(k, rec)| camera_from_record(rec, k))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| in_file(&sidecar_path, e))?;
        let images = (0..cameras.len())
            .map(|k| load_png(&image_path(dir, k)))
            .collect::<Result<Vec<_>>>()?;
        (cameras, images, sidecar.mapping)
    } else {
        let calib_path = dir.join("calib.txt");
        let text = String::from_utf8(read(&calib_path)?)
            .map_err(|_| Error::format(format!("{}: not UTF-8", calib_path.display())))?;
        let (k, t) = parse_kitti_calib(&text).map_err(|e| in_file(&calib_path, e))?;
        let image = load_png(&image_path(dir, 0))?;
        let (h, w, _) = image.dim();
        (vec![CameraModel::new(k, t, h, w)?], vec![image], None)
    };

    if let Some(m) = &mapping {
        if m.len() != cloud.len() {
            return Err(Error::format(format!(
                "{}: mapping has {} entries for {} points",
                sidecar_path.display(),
                m.len(),
                cloud.len()
            )));
        }
    }
    let scene = Scene {
        cloud,
        labels,
        cameras,
        images,
    };
    scene.validate()?;
    Ok(LoadedScene { scene, mapping })
}

/// Scene subdirectories of `dir`, sorted by name.
pub fn list_scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() && path.join("cloud.bin").exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes scenes as `dir/scene_0000`, `dir/scene_0001`, …
pub fn save_dataset(dir: &Path, scenes: &[(Scene, Option<PixelMapping>)]) -> Result<Vec<PathBuf>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, (scene, mapping))| {
            let sub = dir.join(format!("scene_{i:04}"));
            save_scene(&sub, scene, mapping.as_ref())?;
            Ok(sub)
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedScene>> {
    let dirs = list_scene_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::invalid(format!("{} contains no scene directories", dir.display())));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_scene, SynthConfig};

    fn scene() -> (Scene, PixelMapping) {
        let s = generate_synthetic_scene(&SynthConfig {
            num_points: 300,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        (s.scene, s.mapping)
    }

    #[test]
    fn round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let (s, m) = scene();
        save_scene(tmp.path(), &s, Some(&m)).unwrap();
        let back = load_scene(tmp.path()).unwrap();
        assert_eq!(back.scene, s);
        assert_eq!(back.mapping, Some(m));
    }

    #[test]
    fn kitti_only_directory_loads() {
        let tmp = tempfile::tempdir().unwrap();
        let (s, _) = scene();
        save_scene(tmp.path(), &s, None).unwrap();
        fs::remove_file(tmp.path().join(SIDECAR)).unwrap();
        let back = load_scene(tmp.path()).unwrap();
        assert_eq!(back.scene.cameras, s.cameras);
        assert_eq!(back.mapping, None);
    }

    #[test]
    fn truncated_cloud_is_a_format_error_naming_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let (s, m) = scene();
        save_scene(tmp.path(), &s, Some(&m)).unwrap();
        fs::write(tmp.path().join("cloud.bin"), [0u8; 7]).unwrap();
        let err = load_scene(tmp.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("cloud.bin"), "{err}");
    }

    #[test]
    fn dataset_order_is_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let (s, m) = scene();
        let written = save_dataset(tmp.path(), &[(s.clone(), Some(m.clone())), (s, None)]).unwrap();
        assert_eq!(list_scene_dirs(tmp.path()).unwrap(), written);
        let loaded = load_dataset(tmp.path()).unwrap();
        assert!(loaded[0].mapping.is_some() && loaded[1].mapping.is_none());
    }
}
