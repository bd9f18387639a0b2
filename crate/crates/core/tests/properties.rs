use lidarpass::evalmetrics::{distance_binned_miou, ConfusionMatrix, DistanceBins, default_distance_edges};
use lidarpass::geometry::{
    build_pixel_mapping, lift_image_features_to_points, map_points_to_pixels, project_points, CameraModel,
    PointCloud, Projection, DEPTH_EPS,
};
use lidarpass::sparsevox::{build_voxel_mapping, voxelize};
use nalgebra::{Matrix3x4, Matrix4};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn pinhole(f: f64, h: usize, w: usize) -> CameraModel {
    let k = Matrix3x4::new(f, 0.0, w as f64 / 2.0, 0.0, 0.0, f, h as f64 / 2.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    CameraModel::new(k, Matrix4::identity(), h, w).unwrap()
}

#[test]
fn pixel_centres_round_trip() {
    let (h, w, f) = (16, 16, 20.0);
    let cam = pinhole(f, h, w);
    let mut coords = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let depth = 3.0 + (r * w + c) as f64 * 0.01;
            let u = c as f64 + 0.5;
            let v = r as f64 + 0.5;
            coords.push([(u - w as f64 / 2.0) * depth / f, (v - h as f64 / 2.0) * depth / f, depth]);
        }
    }
    let m = map_points_to_pixels(&PointCloud::new(coords, None).unwrap(), &cam).unwrap();
    assert_eq!(m.num_valid, h * w);
    for i in 0..h * w {
        assert_eq!((m.rows[i], m.cols[i]), ((i / w) as i64, (i % w) as i64));
    }
}

fn cloud_strategy() -> impl Strategy<Value = Vec<[f64; 3]>> {
    proptest::collection::vec(
        (-10.0f64..10.0, -10.0f64..10.0, -2.0f64..15.0).prop_map(|(x, y, z)| [x, y, z]),
        1..300,
    )
}

proptest! {
    #[test]
    fn enlarging_the_frame_never_loses_points(
        coords in cloud_strategy(), h in 1usize..40, w in 1usize..40, dh in 0usize..20, dw in 0usize..20,
    ) {
        let cloud = PointCloud::new(coords, None).unwrap();
        let proj = project_points(&cloud, &pinhole(10.0, h, w)).unwrap();
        let small = build_pixel_mapping(&proj, h, w).unwrap();
        let large = build_pixel_mapping(&proj, h + dh, w + dw).unwrap();
        prop_assert!(large.num_valid >= small.num_valid);
    }

    #[test]
    fn nothing_at_or_behind_the_camera_is_valid(coords in cloud_strategy()) {
        let cloud = PointCloud::new(coords, None).unwrap();
        let m = map_points_to_pixels(&cloud, &pinhole(10.0, 32, 32)).unwrap();
        for i in 0..m.len() {
            if m.valid[i] {
                prop_assert!(m.depth[i] > DEPTH_EPS);
                prop_assert!(m.rows[i] >= 0 && m.rows[i] < 32 && m.cols[i] >= 0 && m.cols[i] < 32);
            }
        }
        prop_assert_eq!(m.num_valid, m.valid.iter().filter(|&&v| v).count());
    }

    #[test]
    fn lifting_yields_one_row_per_valid_point(
        uv in proptest::collection::vec((-5.0f64..25.0, -5.0f64..25.0, any::<bool>()), 0..200),
    ) {
        let proj = Projection {
            uv: uv.iter().map(|&(u, v, _)| [u, v]).collect(),
            depth: vec![1.0; uv.len()],
            in_front: uv.iter().map(|&(_, _, f)| f).collect(),
        };
        let m = build_pixel_mapping(&proj, 20, 20).unwrap();
        let image = Array3::from_elem((20, 20, 3), 1.5);
        prop_assert_eq!(lift_image_features_to_points(&image, &m).unwrap().nrows(), m.num_valid);
    }

    #[test]
    fn voxel_counts_partition_the_points(coords in cloud_strategy(), r in 0.05f64..3.0) {
        let n = coords.len();
        let cloud = PointCloud::new(coords, None).unwrap();
        let m = build_voxel_mapping(&cloud, r, 1).unwrap();
        let grid = voxelize(&Array2::ones((n, 1)), &m).unwrap();
        prop_assert!(grid.num_voxels() <= n);
        prop_assert_eq!(grid.counts.iter().sum::<usize>(), n);
        for (key, &row) in &grid.table {
            prop_assert_eq!(&grid.keys[row], key);
        }
    }

    #[test]
    fn metrics_lie_in_the_unit_interval(
        pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..200),
    ) {
        let (labels, preds): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&preds, &labels).unwrap();
        for v in [cm.miou(), cm.fwiou(), cm.overall_acc()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let off_diagonal = (0..4).any(|t| (0..4).any(|p| t != p && cm.get(t, p) > 0));
        prop_assert_eq!(cm.miou() == 1.0, !off_diagonal);
    }

    #[test]
    fn distance_bins_partition_the_confusion_matrix(
        pts in proptest::collection::vec((-80.0f64..80.0, -80.0f64..80.0, -3.0f64..3.0, 0u32..3, 0u32..3), 1..200),
    ) {
        let coords: Vec<[f64; 3]> = pts.iter().map(|p| [p.0, p.1, p.2]).collect();
        let labels: Vec<u32> = pts.iter().map(|p| p.3).collect();
        let preds: Vec<u32> = pts.iter().map(|p| p.4).collect();
        let cloud = PointCloud::new(coords, None).unwrap();
        let mut bins = DistanceBins::new(default_distance_edges(), 3).unwrap();
        bins.accumulate(&preds, &labels, &cloud).unwrap();
        let mut merged = ConfusionMatrix::new(3);
        for b in bins.bins() {
            merged.merge(b).unwrap();
        }
        let mut global = ConfusionMatrix::new(3);
        global.accumulate(&preds, &labels).unwrap();
        prop_assert_eq!(merged, global);
        let per_bin = distance_binned_miou(&preds, &labels, &cloud, default_distance_edges(), 3).unwrap();
        prop_assert_eq!(per_bin.len(), bins.bins().len());
    }
}
