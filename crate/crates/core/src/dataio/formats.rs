//! KITTI-style on-disk formats: velodyne `.bin` scans, SemanticKITTI
//! `.label` files and `P2:`/`Tr:` calibration text.

use nalgebra::{Matrix3x4, Matrix4};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

const RECORD_BYTES: usize = 16;

/// Decodes little-endian `f32` records `(x, y, z, intensity)`.
pub fn read_point_cloud_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::format(format!(
            "point cloud byte length {} is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let v: [f32; 4] = std::array::from_fn(|k| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()));
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(format!("record {i} contains a non-finite value")));
        }
        coords.push([v[0] as f64, v[1] as f64, v[2] as f64]);
        intensity.push(v[3] as f64);
    }
    Ok(PointCloud {
        coords,
        intensity: Some(intensity),
    })
}

/// Inverse of [`read_point_cloud_bin`]; values are stored as `f32` and a
/// missing intensity channel is written as 0.
pub fn write_point_cloud_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for (i, p) in cloud.coords.iter().enumerate() {
        let r = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Semantic class ids from 32-bit label words (low 16 bits; the instance id
/// in the high half is dropped).
pub fn read_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(format!(
            "label byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|w| u32::from_le_bytes(w.try_into().unwrap()) & 0xFFFF)
        .collect())
}

/// Writes class ids as label words with instance id 0.
pub fn write_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for (i, &l) in labels.iter().enumerate() {
        if l > 0xFFFF {
            return Err(Error::invalid(format!("label {l} of point {i} does not fit in 16 bits")));
        }
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

fn parse_twelve(key: &str, rest: &str, line_no: usize) -> Result<[f64; 12]> {
    let values: Vec<&str> = rest.split_whitespace().collect();
    if values.len() != 12 {
        return Err(Error::format(format!(
            "line {line_no}: `{key}` needs 12 values, found {}",
            values.len()
        )));
    }
    let mut out = [0.0; 12];
    for (slot, tok) in out.iter_mut().zip(values) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::format(format!("line {line_no}: `{key}` has invalid number `{tok}`")))?;
    }
    Ok(out)
}

/// Parses the `P2:` (3×4 intrinsic) and `Tr:` (3×4, extended to 4×4) rows of
/// a KITTI calibration file. Other keys are ignored.
pub fn parse_kitti_calib(text: &str) -> Result<(Matrix3x4<f64>, Matrix4<f64>)> {
    let mut p2 = None;
    let mut tr = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        match key.trim() {
            "P2" => p2 = Some(parse_twelve("P2", rest, i + 1)?),
            "Tr" => tr = Some(parse_twelve("Tr", rest, i + 1)?),
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| Error::format("calibration is missing the `P2:` line"))?;
    let tr = tr.ok_or_else(|| Error::format("calibration is missing the `Tr:` line"))?;
    let k = Matrix3x4::from_row_slice(&p2);
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 4>(0, 0).copy_from(&Matrix3x4::from_row_slice(&tr));
    Ok((k, t))
}

/// Writes `P2:`/`Tr:` lines with round-trip exact number formatting.
pub fn format_kitti_calib(k: &Matrix3x4<f64>, t: &Matrix4<f64>) -> String {
    let row_major = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
    let p2: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| k[(r, c)])).collect();
    let tr: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| t[(r, c)])).collect();
    format!("P2: {}\nTr: {}\n", row_major(p2), row_major(tr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_record() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = read_point_cloud_bin(&bytes).unwrap();
        assert_eq!(cloud.coords, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(cloud.intensity, Some(vec![0.5]));
    }

    #[test]
    fn empty_bin_is_empty_cloud() {
        assert!(read_point_cloud_bin(&[]).unwrap().is_empty());
    }

    #[test]
    fn misaligned_bin_reports_length() {
        let err = read_point_cloud_bin(&[0u8; 17]).unwrap_err().to_string();
        assert!(err.contains("17"), "{err}");
    }

    #[test]
    fn label_bit_mask() {
        let bytes = [0x0002_0001u32, 0x0000_00FF]
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .collect::<Vec<_>>();
        assert_eq!(read_labels(&bytes).unwrap(), vec![1, 255]);
        assert!(read_labels(&[0u8; 5]).is_err());
    }

    #[test]
    fn identity_calibration() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nP2: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let (k, t) = parse_kitti_calib(text).unwrap();
        assert_eq!(k, Matrix3x4::identity());
        assert_eq!(t, Matrix4::identity());
    }

    #[test]
    fn calibration_errors_name_the_line() {
        let missing = parse_kitti_calib("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap_err().to_string();
        assert!(missing.contains("Tr"), "{missing}");
        let short = parse_kitti_calib("P2: 1 0 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0").unwrap_err().to_string();
        assert!(short.contains("line 1"), "{short}");
        let bad = parse_kitti_calib("P2: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 1 0 0 0 0 x 0 0 0 0 1 0")
            .unwrap_err()
            .to_string();
        assert!(bad.contains("line 2") && bad.contains("`x`"), "{bad}");
    }

    proptest! {
        #[test]
        fn parsers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = read_point_cloud_bin(&bytes);
            let _ = read_labels(&bytes);
            let _ = parse_kitti_calib(&String::from_utf8_lossy(&bytes));
        }

        #[test]
        fn cloud_round_trip(values in proptest::collection::vec(-1e4f32..1e4, 0..64)) {
            let n = values.len() / 4 * 4;
            let bytes: Vec<u8> = values[..n].iter().flat_map(|v| v.to_le_bytes()).collect();
            let cloud = read_point_cloud_bin(&bytes).unwrap();
            prop_assert_eq!(write_point_cloud_bin(&cloud), bytes);
        }
    }
}
