//! Segmentation losses and evaluation metrics.
//!
//! Losses operate on [`Tensor`]s so they can sit at the end of a training
//! tape. Metrics operate on integer predictions through a [`ConfusionMatrix`]
//! (rows = ground truth, columns = prediction). Points labelled
//! [`IGNORE_LABEL`] never contribute to either.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, IGNORE_LABEL};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-5;

fn check_labels(labels: &[u32], num_classes: usize, op: &str) -> Result<Vec<usize>> {
    let mut kept = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::invalid(format!(
                "{op}: label {l} of point {i} is outside [0, {num_classes})"
            )));
        }
        kept.push(i);
    }
    Ok(kept)
}

fn matrix_dims(t: &Tensor, rows: usize, op: &'static str) -> Result<usize> {
    match t.shape() {
        [n, c] if *n == rows => Ok(*c),
        shape => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![rows],
        }),
    }
}

/// Mean negative log-likelihood over non-ignored rows; zero if all ignored.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let c = matrix_dims(logits, labels.len(), "cross_entropy")?;
    let kept = check_labels(labels, c, "cross_entropy")?;
    if kept.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let targets: Vec<usize> = kept.iter().map(|&i| labels[i] as usize).collect();
    let picked = logits
        .gather_rows(&kept)?
        .log_softmax_rows()
        .select_per_row(&targets)?;
    Ok(picked.mean_all().scale(-1.0))
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// sorted errors, given the ground-truth indicator in that sorted order.
pub fn lovasz_jaccard_weights(sorted_fg: &[bool]) -> Vec<f64> {
    let gts = sorted_fg.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    sorted_fg
        .iter()
        .map(|&fg| {
            if fg {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let w = jaccard - prev;
            prev = jaccard;
            w
        })
        .collect()
}

/// Lovász-softmax over classes present in the (non-ignored) labels.
///
/// Sorting is treated as a fixed permutation, so the gradient is the
/// subgradient of the piecewise-linear extension at the current ordering.
pub fn lovasz_softmax(probabilities: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let c = matrix_dims(probabilities, labels.len(), "lovasz_softmax")?;
    for (i, row) in probabilities.data().chunks(c.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| !(0.0..=1.0 + ROW_SUM_TOL).contains(p)) {
            return Err(Error::invalid(format!(
                "lovasz_softmax: row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    let kept = check_labels(labels, c, "lovasz_softmax")?;
    if kept.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let probs = probabilities.gather_rows(&kept)?;
    let values = probs.data();
    let n = kept.len();
    let mut coeff = vec![0.0; n * c];
    let mut offset = 0.0;
    let mut present = 0usize;
    for class in 0..c {
        let fg: Vec<bool> = kept.iter().map(|&i| labels[i] as usize == class).collect();
        if !fg.iter().any(|&f| f) {
            continue;
        }
        present += 1;
        let errors: Vec<f64> = (0..n)
            .map(|i| {
                let p = values[i * c + class];
                if fg[i] {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let sorted_fg: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let weights = lovasz_jaccard_weights(&sorted_fg);
        for (&i, w) in order.iter().zip(weights) {
            // error = 1 − p for foreground, p for background
            if fg[i] {
                coeff[i * c + class] -= w;
                offset += w;
            } else {
                coeff[i * c + class] += w;
            }
        }
    }
    let inv = 1.0 / present as f64;
    coeff.iter_mut().for_each(|v| *v *= inv);
    let coeff = Tensor::new(vec![n, c], coeff)?;
    Ok(probs.mul(&coeff)?.sum_all().add_scalar(offset * inv))
}

/// `cross_entropy + lovasz_weight · lovasz_softmax(softmax(logits))`.
pub fn combined_seg_loss(logits: &Tensor, labels: &[u32], lovasz_weight: f64) -> Result<Tensor> {
    let ce = cross_entropy(logits, labels)?;
    if lovasz_weight == 0.0 {
        return Ok(ce);
    }
    let lovasz = lovasz_softmax(&logits.softmax_rows(), labels)?;
    ce.add(&lovasz.scale(lovasz_weight))
}

/// C×C counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::len_mismatch("ConfusionMatrix", num_classes * num_classes, counts.len()));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn accumulate(&mut self, preds: &[u32], labels: &[u32]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::len_mismatch("accumulate", labels.len(), preds.len()));
        }
        let kept = check_labels(labels, self.num_classes, "accumulate")?;
        for &i in &kept {
            let p = preds[i] as usize;
            if p >= self.num_classes {
                return Err(Error::invalid(format!(
                    "accumulate: prediction {p} of point {i} is outside [0, {})",
                    self.num_classes
                )));
            }
        }
        for i in kept {
            self.counts[labels[i] as usize * self.num_classes + preds[i] as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::len_mismatch("merge", self.num_classes, other.num_classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    fn truth_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    /// IoU per class; `None` for classes absent from both truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.truth_count(c) + self.pred_count(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over populated classes; 0 for an empty matrix.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// IoU weighted by ground-truth point frequency; 0 for an empty matrix.
    pub fn fwiou(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.per_class_iou()
            .iter()
            .enumerate()
            .map(|(c, iou)| self.truth_count(c) as f64 / total as f64 * iou.unwrap_or(0.0))
            .sum()
    }

    pub fn overall_acc(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        trace as f64 / total as f64
    }
}

/// Default range edges in meters: `[0, 10, 20, 30, 40, ∞)`.
pub fn default_distance_edges() -> Vec<f64> {
    vec![0.0, 10.0, 20.0, 30.0, 40.0, f64::INFINITY]
}

/// Confusion matrices per Euclidean-range bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceBins {
    edges: Vec<f64>,
    bins: Vec<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    /// `None` encodes an unbounded upper edge.
    pub hi: Option<f64>,
    pub miou: f64,
    pub points: u64,
    pub empty: bool,
}

impl DistanceBins {
    /// `edges` must start at 0, ascend strictly and end at +∞.
    pub fn new(edges: Vec<f64>, num_classes: usize) -> Result<Self> {
        if edges.len() < 2
            || edges[0] != 0.0
            || *edges.last().unwrap() != f64::INFINITY
            || edges.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(Error::invalid(format!(
                "distance edges must ascend strictly from 0 to infinity, got {edges:?}"
            )));
        }
        let bins = vec![ConfusionMatrix::new(num_classes); edges.len() - 1];
        Ok(Self { edges, bins })
    }

    pub fn bin_of(&self, distance: f64) -> usize {
        // partition_point gives the first edge > distance
        self.edges.partition_point(|&e| e <= distance).saturating_sub(1).min(self.bins.len() - 1)
    }

    pub fn accumulate(&mut self, preds: &[u32], labels: &[u32], cloud: &PointCloud) -> Result<()> {
        if cloud.len() != labels.len() || preds.len() != labels.len() {
            return Err(Error::len_mismatch("distance_bins", labels.len(), cloud.len().min(preds.len())));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.bins.len()];
        for (i, p) in cloud.coords.iter().enumerate() {
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            members[self.bin_of(d)].push(i);
        }
        for (cm, idx) in self.bins.iter_mut().zip(members) {
            let bp: Vec<u32> = idx.iter().map(|&i| preds[i]).collect();
            let bl: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            cm.accumulate(&bp, &bl)?;
        }
        Ok(())
    }

    pub fn bins(&self) -> &[ConfusionMatrix] {
        &self.bins
    }

    pub fn report(&self) -> Vec<BinReport> {
        self.bins
            .iter()
            .enumerate()
            .map(|(k, cm)| BinReport {
                lo: self.edges[k],
                hi: self.edges[k + 1].is_finite().then_some(self.edges[k + 1]),
                miou: cm.miou(),
                points: cm.total(),
                empty: cm.is_empty(),
            })
            .collect()
    }
}

pub fn distance_binned_miou(
    preds: &[u32],
    labels: &[u32],
    cloud: &PointCloud,
    edges: Vec<f64>,
    num_classes: usize,
) -> Result<Vec<BinReport>> {
    let mut bins = DistanceBins::new(edges, num_classes)?;
    bins.accumulate(preds, labels, cloud)?;
    Ok(bins.report())
}

/// Anything that maps a point cloud to per-point class logits.
pub trait PointScorer {
    fn logits(&self, cloud: &PointCloud) -> Result<Array2<f64>>;
}

impl<F> PointScorer for F
where
    F: Fn(&PointCloud) -> Result<Array2<f64>>,
{
    fn logits(&self, cloud: &PointCloud) -> Result<Array2<f64>> {
        self(cloud)
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn argmax_rows(scores: &Array2<f64>) -> Vec<u32> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Rotates the cloud about +Z by `angle` radians.
pub fn rotate_about_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    PointCloud {
        coords: cloud
            .coords
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// Averages softmax scores over `angles` evenly spaced rotations about Z.
/// Member 0 is the unrotated cloud, so `angles = 1` is plain inference.
pub fn tta_vote(model: &dyn PointScorer, cloud: &PointCloud, angles: usize) -> Result<Array2<f64>> {
    if angles == 0 {
        return Err(Error::invalid("tta_vote needs at least one angle"));
    }
    let mut acc: Option<Array2<f64>> = None;
    for k in 0..angles {
        let rotated;
        let input = if k == 0 {
            cloud
        } else {
            rotated = rotate_about_z(cloud, std::f64::consts::TAU * k as f64 / angles as f64);
            &rotated
        };
        let scores = softmax_rows(&model.logits(input)?);
        match &mut acc {
            None => acc = Some(scores),
            Some(a) => *a += &scores,
        }
    }
    let acc = acc.expect("angles > 0");
    Ok(acc / angles as f64)
}

/// Evaluation summary in the shape written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fwiou: f64,
    pub acc: f64,
    pub empty: bool,
    pub distance_bins: Vec<BinReport>,
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, bins: &DistanceBins) -> Self {
        Self {
            per_class_iou: cm.per_class_iou(),
            miou: cm.miou(),
            fwiou: cm.fwiou(),
            acc: cm.overall_acc(),
            empty: cm.is_empty(),
            distance_bins: bins.report(),
        }
    }

    /// Aligned plain-text rendering of the report.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>10}", "class", "IoU");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map_or("-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(s, "{:<12}{:>10}", c, v);
        }
        let _ = writeln!(s, "{:<12}{:>10.4}", "mIoU", self.miou);
        let _ = writeln!(s, "{:<12}{:>10.4}", "FwIoU", self.fwiou);
        let _ = writeln!(s, "{:<12}{:>10.4}", "Acc", self.acc);
        let _ = writeln!(s, "{:<12}{:>10}{:>10}", "range", "mIoU", "points");
        for b in &self.distance_bins {
            let range = match b.hi {
                Some(hi) => format!("{}-{}", b.lo, hi),
                None => format!("{}+", b.lo),
            };
            let v = if b.empty { "-".to_string() } else { format!("{:.4}", b.miou) };
            let _ = writeln!(s, "{:<12}{:>10}{:>10}", range, v, b.points);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let loss = cross_entropy(&t(3, 4, vec![0.0; 12]), &[0, 1, 3]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_costs_nothing() {
        let loss = cross_entropy(&t(1, 3, vec![200.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = t(2, 2, vec![1.0, -1.0, 0.5, 0.3]);
        assert_eq!(cross_entropy(&logits, &[255, 255]).unwrap().item(), 0.0);
        assert_eq!(combined_seg_loss(&logits, &[255, 255], 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(cross_entropy(&t(1, 2, vec![0.0, 0.0]), &[2]).is_err());
        assert!(lovasz_softmax(&t(1, 2, vec![0.5, 0.5]), &[7]).is_err());
    }

    #[test]
    fn lovasz_single_point_half() {
        let loss = lovasz_softmax(&t(1, 2, vec![0.5, 0.5]), &[0]).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lovasz_perfect_is_zero() {
        let p = t(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(lovasz_softmax(&p, &[0, 1, 2]).unwrap().item(), 0.0);
    }

    #[test]
    fn lovasz_rejects_unnormalised_rows() {
        assert!(lovasz_softmax(&t(1, 2, vec![0.5, 0.6]), &[0]).is_err());
    }

    #[test]
    fn lovasz_gradient_flows_to_probabilities() {
        let tape = Tape::new();
        let logits = tape.leaf(&t(3, 2, vec![0.3, -0.2, 1.0, 0.1, -0.5, 0.4]));
        lovasz_softmax(&logits.softmax_rows(), &[0, 1, 1])
            .unwrap()
            .backward()
            .unwrap();
        assert!(logits.grad().unwrap().iter().any(|g| g.abs() > 1e-6));
    }

    #[test]
    fn jaccard_weights_of_length_one() {
        assert_eq!(lovasz_jaccard_weights(&[true]), vec![1.0]);
    }

    #[test]
    fn hand_computed_two_class_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        let iou = cm.per_class_iou();
        assert!((iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cm.miou() - 7.0 / 12.0).abs() < 1e-12);
        assert!((cm.overall_acc() - 0.75).abs() < 1e-12);
        assert!((cm.fwiou() - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn all_wrong_scores_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 0, 1], &[0, 1, 0]).unwrap();
        assert_eq!(cm.miou(), 0.0);
        assert_eq!(cm.overall_acc(), 0.0);
    }

    #[test]
    fn empty_matrix_is_flagged() {
        let cm = ConfusionMatrix::new(3);
        assert!(cm.is_empty());
        assert_eq!((cm.miou(), cm.fwiou(), cm.overall_acc()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ignored_points_do_not_count() {
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&[0, 1, 2], &[0, 1, 1]).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&[0, 1, 2, 2, 0], &[0, 1, 1, 255, 255]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_prediction_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[5], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[3]).is_err());
    }

    #[test]
    fn bins_single_population() {
        let cloud = PointCloud::new(vec![[5.0, 0.0, 0.0], [0.0, 3.0, 4.0]], None).unwrap();
        let r = distance_binned_miou(&[1, 1], &[1, 1], &cloud, vec![0.0, 10.0, f64::INFINITY], 2).unwrap();
        assert_eq!(r.len(), 2);
        assert!(!r[0].empty && r[0].miou == 1.0 && r[0].points == 2);
        assert!(r[1].empty && r[1].hi.is_none());
    }

    #[test]
    fn bin_edges_validated() {
        assert!(DistanceBins::new(vec![0.0, 10.0], 2).is_err());
        assert!(DistanceBins::new(vec![0.0, 10.0, 10.0, f64::INFINITY], 2).is_err());
        assert!(DistanceBins::new(vec![1.0, f64::INFINITY], 2).is_err());
        assert!(DistanceBins::new(default_distance_edges(), 2).is_ok());
    }

    #[test]
    fn constant_model_vote_is_constant() {
        let model = |c: &PointCloud| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn((c.len(), 3), |(_, j)| j as f64))
        };
        let cloud = PointCloud::new(vec![[1.0, 2.0, 0.0], [3.0, -1.0, 1.0]], None).unwrap();
        let expected = softmax_rows(&model(&cloud).unwrap());
        let voted = tta_vote(&model, &cloud, 12).unwrap();
        for (a, b) in voted.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(tta_vote(&model, &cloud, 1).unwrap(), expected);
    }

    #[test]
    fn quarter_turn_rotation() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 2.0]], None).unwrap();
        let r = rotate_about_z(&cloud, std::f64::consts::FRAC_PI_2);
        assert!((r.coords[0][0]).abs() < 1e-12 && (r.coords[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(r.coords[0][2], 2.0);
    }

    #[test]
    fn report_table_lists_every_class() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let mut bins = DistanceBins::new(default_distance_edges(), 2).unwrap();
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0], [15.0, 0.0, 0.0]], None).unwrap();
        bins.accumulate(&[0, 1], &[0, 1], &cloud).unwrap();
        let report = MetricsReport::new(&cm, &bins);
        assert_eq!(report.miou, 1.0);
        let table = report.to_table();
        assert!(table.contains("mIoU") && table.contains("40+"));
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["distance_bins"][4]["hi"].is_null());
    }
}
