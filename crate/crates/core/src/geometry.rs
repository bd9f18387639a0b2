//! Pinhole projection of LiDAR points into a camera image.
//!
//! Conventions: `u` is the horizontal (column) image coordinate and `v` the
//! vertical (row) coordinate, so the integer pixel of a point is
//! `(⌊v⌋, ⌊u⌋)` as `(row, col)`. Points whose camera-frame depth does not
//! exceed [`DEPTH_EPS`] are never valid.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector4};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Minimum camera-frame depth (meters) for a point to be projectable.
pub const DEPTH_EPS: f64 = 1e-6;

/// Sentinel label for pixels no point projects onto.
pub const IGNORE_LABEL: u32 = 255;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// LiDAR points in meters, optionally with per-point intensity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, intensity: Option<Vec<f64>>) -> Result<Self> {
        let cloud = Self { coords, intensity };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(intensity) = &self.intensity {
            if intensity.len() != self.coords.len() {
                return Err(Error::len_mismatch("PointCloud", self.coords.len(), intensity.len()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Checks that `t` is a rigid transform: homogeneous last row exactly
/// `[0,0,0,1]` and an orthonormal rotation block.
pub fn validate_rigid(t: &Matrix4<f64>) -> Result<()> {
    let last = [t[(3, 0)], t[(3, 1)], t[(3, 2)], t[(3, 3)]];
    if last != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::invalid(format!(
            "extrinsic last row must be [0,0,0,1], got {last:?}"
        )));
    }
    let r: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let deviation = (r.transpose() * r - Matrix3::identity()).amax();
    if !(deviation < ORTHONORMAL_TOL) {
        return Err(Error::invalid(format!(
            "extrinsic rotation block is not orthonormal (max |RᵀR − I| = {deviation:e})"
        )));
    }
    Ok(())
}

/// Intrinsic `K` (3×4, pixels), extrinsic `T` (4×4, LiDAR → camera) and
/// image size.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsic: Matrix3x4<f64>,
    extrinsic: Matrix4<f64>,
    height: usize,
    width: usize,
}

impl CameraModel {
    pub fn new(
        intrinsic: Matrix3x4<f64>,
        extrinsic: Matrix4<f64>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {height}x{width}"
            )));
        }
        if intrinsic.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("intrinsic matrix has non-finite entries"));
        }
        validate_rigid(&extrinsic)?;
        Ok(Self {
            intrinsic,
            extrinsic,
            height,
            width,
        })
    }

    pub fn intrinsic(&self) -> &Matrix3x4<f64> {
        &self.intrinsic
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Continuous projection result for every point.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(u, v)` per point; `(0, 0)` where `in_front` is false.
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub in_front: Vec<bool>,
}

/// Projects every point with `[u, v, 1]ᵀ = (1/z)·K·T·[x, y, z, 1]ᵀ`.
pub fn project_points(cloud: &PointCloud, camera: &CameraModel) -> Result<Projection> {
    cloud.validate()?;
    let kt = camera.intrinsic * camera.extrinsic;
    let n = cloud.len();
    let mut uv = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut in_front = Vec::with_capacity(n);
    for p in &cloud.coords {
        let q = kt * Vector4::new(p[0], p[1], p[2], 1.0);
        let z = q[2];
        let front = z > DEPTH_EPS;
        uv.push(if front { [q[0] / z, q[1] / z] } else { [0.0, 0.0] });
        depth.push(z);
        in_front.push(front);
    }
    Ok(Projection {
        uv,
        depth,
        in_front,
    })
}

/// Left-to-right product of rigid transforms; identity for an empty chain.
pub fn compose_extrinsic_chain(transforms: &[Matrix4<f64>]) -> Result<Matrix4<f64>> {
    let mut acc = Matrix4::identity();
    for (i, t) in transforms.iter().enumerate() {
        validate_rigid(t).map_err(|e| Error::invalid(format!("transform {i}: {e}")))?;
        acc *= t;
    }
    // Floating-point products drift off the exact homogeneous row only if an
    // input did; the inputs were validated, so pin it.
    acc[(3, 0)] = 0.0;
    acc[(3, 1)] = 0.0;
    acc[(3, 2)] = 0.0;
    acc[(3, 3)] = 1.0;
    Ok(acc)
}

/// Integer point-to-pixel map with its field-of-view mask.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelMapping {
    pub rows: Vec<i64>,
    pub cols: Vec<i64>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub num_valid: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelMapping {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Indices of valid points in ascending order. Every per-point feature
    /// gather or filter uses this order, so row `k` of any FOV-restricted
    /// array refers to the same point.
    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }

    /// Row-major flat pixel index of each valid point, in [`Self::valid_indices`] order.
    pub fn valid_pixels(&self) -> Vec<usize> {
        self.valid_indices()
            .into_iter()
            .map(|i| self.rows[i] as usize * self.width + self.cols[i] as usize)
            .collect()
    }

    /// Fraction of points inside the image.
    pub fn overlap_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.num_valid as f64 / self.len() as f64
        }
    }

    /// Re-expresses the mapping inside a crop window of an image that may
    /// then be mirrored horizontally. Points outside the window become invalid.
    pub fn crop_and_flip(
        &self,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        flip: bool,
    ) -> Result<PixelMapping> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop window {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let n = self.len();
        let mut rows = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for i in 0..n {
            let r = self.rows[i] - top as i64;
            let mut c = self.cols[i] - left as i64;
            let inside = self.valid[i] && r >= 0 && r < height as i64 && c >= 0 && c < width as i64;
            if flip && inside {
                c = width as i64 - 1 - c;
            }
            rows.push(r);
            cols.push(c);
            valid.push(inside);
        }
        let num_valid = valid.iter().filter(|&&v| v).count();
        Ok(PixelMapping {
            rows,
            cols,
            depth: self.depth.clone(),
            valid,
            num_valid,
            height,
            width,
        })
    }
}

/// Floors projected coordinates and applies the `0 ≤ idx < bound` FOV test.
pub fn build_pixel_mapping(projection: &Projection, height: usize, width: usize) -> Result<PixelMapping> {
    let n = projection.uv.len();
    if projection.depth.len() != n {
        return Err(Error::len_mismatch("build_pixel_mapping", n, projection.depth.len()));
    }
    if projection.in_front.len() != n {
        return Err(Error::len_mismatch("build_pixel_mapping", n, projection.in_front.len()));
    }
    let mut rows = Vec::with_capacity(n);
    let mut cols = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let [u, v] = projection.uv[i];
        let r = v.floor() as i64;
        let c = u.floor() as i64;
        let inside = projection.in_front[i]
            && projection.depth[i] > DEPTH_EPS
            && (0..height as i64).contains(&r)
            && (0..width as i64).contains(&c);
        rows.push(r);
        cols.push(c);
        valid.push(inside);
    }
    let num_valid = valid.iter().filter(|&&v| v).count();
    Ok(PixelMapping {
        rows,
        cols,
        depth: projection.depth.clone(),
        valid,
        num_valid,
        height,
        width,
    })
}

/// Convenience: projection followed by mapping construction.
pub fn map_points_to_pixels(cloud: &PointCloud, camera: &CameraModel) -> Result<PixelMapping> {
    let projection = project_points(cloud, camera)?;
    build_pixel_mapping(&projection, camera.height, camera.width)
}

/// Renders point labels into an `H×W` image. Each hit pixel takes the label
/// of its nearest point (smallest depth, then smallest index); other pixels
/// hold [`IGNORE_LABEL`].
pub fn project_labels_to_image(labels: &[u32], mapping: &PixelMapping) -> Result<Array2<u32>> {
    if labels.len() != mapping.len() {
        return Err(Error::len_mismatch("project_labels_to_image", mapping.len(), labels.len()));
    }
    if let Some(i) = labels.iter().position(|&l| l >= IGNORE_LABEL) {
        return Err(Error::invalid(format!(
            "label {} of point {i} collides with the reserved ignore value",
            labels[i]
        )));
    }
    let (h, w) = (mapping.height, mapping.width);
    let mut image = Array2::from_elem((h, w), IGNORE_LABEL);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for i in mapping.valid_indices() {
        let px = mapping.rows[i] as usize * w + mapping.cols[i] as usize;
        let d = mapping.depth[i];
        let closer = match best[px] {
            None => true,
            Some((bd, _)) => d < bd,
        };
        if closer {
            best[px] = Some((d, i));
        }
    }
    for (px, hit) in best.iter().enumerate() {
        if let Some((_, i)) = hit {
            image[(px / w, px % w)] = labels[*i];
        }
    }
    Ok(image)
}

/// Gathers the feature vector under each valid point: output row `k` is the
/// pixel feature of the `k`-th valid point in ascending index order.
pub fn lift_image_features_to_points(features: &Array3<f64>, mapping: &PixelMapping) -> Result<Array2<f64>> {
    let (h, w, d) = features.dim();
    if (h, w) != (mapping.height, mapping.width) {
        return Err(Error::Shape {
            op: "lift_image_features_to_points",
            lhs: vec![h, w],
            rhs: vec![mapping.height, mapping.width],
        });
    }
    let idx = mapping.valid_indices();
    let mut out = Array2::zeros((idx.len(), d));
    for (k, &i) in idx.iter().enumerate() {
        let (r, c) = (mapping.rows[i] as usize, mapping.cols[i] as usize);
        out.row_mut(k).assign(&features.slice(ndarray::s![r, c, ..]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_camera(h: usize, w: usize) -> CameraModel {
        let k = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        CameraModel::new(k, Matrix4::identity(), h, w).unwrap()
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec(), None).unwrap()
    }

    #[test]
    fn on_axis_point_projects_to_origin() {
        let p = project_points(&cloud(&[[0.0, 0.0, 2.0]]), &identity_camera(4, 4)).unwrap();
        assert_eq!(p.uv[0], [0.0, 0.0]);
        assert_eq!(p.depth[0], 2.0);
        assert!(p.in_front[0]);
    }

    #[test]
    fn off_axis_point_divides_by_depth() {
        let p = project_points(&cloud(&[[1.0, -1.0, 2.0]]), &identity_camera(4, 4)).unwrap();
        assert_eq!(p.uv[0], [0.5, -0.5]);
        assert_eq!(p.depth[0], 2.0);
    }

    #[test]
    fn points_behind_camera_are_not_in_front() {
        let p = project_points(
            &cloud(&[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, DEPTH_EPS]]),
            &identity_camera(4, 4),
        )
        .unwrap();
        assert_eq!(p.in_front, vec![false, false, false]);
        assert!(p.uv.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn camera_rejects_bad_extrinsics() {
        let k = Matrix3x4::identity();
        let mut t = Matrix4::identity();
        t[(3, 0)] = 1e-12;
        assert!(CameraModel::new(k, t, 2, 2).is_err());
        let mut t = Matrix4::identity();
        t[(0, 0)] = 1.01;
        assert!(CameraModel::new(k, t, 2, 2).is_err());
        assert!(CameraModel::new(k, Matrix4::identity(), 0, 2).is_err());
    }

    #[test]
    fn floor_mapping_examples() {
        let proj = Projection {
            uv: vec![[0.9, 0.9], [-0.1, 0.5]],
            depth: vec![1.0, 1.0],
            in_front: vec![true, true],
        };
        let m = build_pixel_mapping(&proj, 2, 2).unwrap();
        assert_eq!((m.rows[0], m.cols[0], m.valid[0]), (0, 0, true));
        assert_eq!((m.rows[1], m.cols[1], m.valid[1]), (0, -1, false));
        assert_eq!(m.num_valid, 1);
    }

    #[test]
    fn mapping_rejects_ragged_inputs() {
        let proj = Projection {
            uv: vec![[0.0, 0.0]],
            depth: vec![],
            in_front: vec![true],
        };
        assert!(build_pixel_mapping(&proj, 2, 2).is_err());
    }

    #[test]
    fn empty_chain_is_identity() {
        assert_eq!(compose_extrinsic_chain(&[]).unwrap(), Matrix4::identity());
        let four = [Matrix4::identity(); 4];
        assert_eq!(compose_extrinsic_chain(&four).unwrap(), Matrix4::identity());
    }

    #[test]
    fn chain_rejects_non_rigid() {
        let mut bad = Matrix4::identity();
        bad[(1, 1)] = 2.0;
        assert!(compose_extrinsic_chain(&[Matrix4::identity(), bad]).is_err());
    }

    fn single_pixel_mapping(points: &[(i64, i64, f64)], h: usize, w: usize) -> PixelMapping {
        PixelMapping {
            rows: points.iter().map(|p| p.0).collect(),
            cols: points.iter().map(|p| p.1).collect(),
            depth: points.iter().map(|p| p.2).collect(),
            valid: vec![true; points.len()],
            num_valid: points.len(),
            height: h,
            width: w,
        }
    }

    #[test]
    fn single_label_lands_on_its_pixel() {
        let m = single_pixel_mapping(&[(3, 4, 1.0)], 6, 6);
        let img = project_labels_to_image(&[2], &m).unwrap();
        assert_eq!(img[(3, 4)], 2);
        assert_eq!(img.iter().filter(|&&v| v == IGNORE_LABEL).count(), 35);
    }

    #[test]
    fn nearest_depth_wins_collision() {
        let m = single_pixel_mapping(&[(1, 1, 5.0), (1, 1, 2.0)], 3, 3);
        assert_eq!(project_labels_to_image(&[1, 7], &m).unwrap()[(1, 1)], 7);
        let tie = single_pixel_mapping(&[(1, 1, 2.0), (1, 1, 2.0)], 3, 3);
        assert_eq!(project_labels_to_image(&[4, 7], &tie).unwrap()[(1, 1)], 4);
    }

    #[test]
    fn reserved_label_rejected() {
        let m = single_pixel_mapping(&[(0, 0, 1.0)], 1, 1);
        assert!(project_labels_to_image(&[255], &m).is_err());
    }

    #[test]
    fn constant_feature_image_lifts_to_constant_rows() {
        let m = single_pixel_mapping(&[(0, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)], 3, 3);
        let feats = Array3::from_elem((3, 3, 4), 1.5);
        let out = lift_image_features_to_points(&feats, &m).unwrap();
        assert_eq!(out.dim(), (3, 4));
        assert!(out.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn lifting_enumerates_pixel_indices() {
        let (h, w) = (3, 4);
        let pts: Vec<(i64, i64, f64)> = [(2, 3), (0, 0), (1, 2), (0, 3)]
            .iter()
            .map(|&(r, c)| (r, c, 1.0))
            .collect();
        let m = single_pixel_mapping(&pts, h, w);
        let feats = Array3::from_shape_fn((h, w, 1), |(r, c, _)| (r * w + c) as f64);
        let out = lift_image_features_to_points(&feats, &m).unwrap();
        assert_eq!(out.column(0).to_vec(), vec![11.0, 0.0, 6.0, 3.0]);
    }

    #[test]
    fn lifting_checks_spatial_size() {
        let m = single_pixel_mapping(&[(0, 0, 1.0)], 3, 3);
        assert!(lift_image_features_to_points(&Array3::zeros((3, 4, 1)), &m).is_err());
    }

    #[test]
    fn crop_and_flip_moves_points() {
        let m = single_pixel_mapping(&[(2, 3, 1.0), (0, 0, 1.0)], 4, 6);
        let c = m.crop_and_flip(1, 2, 2, 3, true).unwrap();
        assert_eq!((c.rows[0], c.cols[0], c.valid[0]), (1, 1, true));
        assert!(!c.valid[1]);
        assert_eq!(c.num_valid, 1);
    }
}
