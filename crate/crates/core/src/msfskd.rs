//! Multi-scale fusion-to-single knowledge distillation.
//!
//! At every scale the in-view point features of both branches are fused
//! through a gated residual, a fused head and a point-only head are
//! supervised with the point labels, and the point-only head is pulled
//! toward the (gradient-blocked) fused head with a KL term. The point branch
//! receives the alignment signal through a "2D learner" MLP whose output is
//! added back to the 3D features, so the raw 3D features are never
//! overwritten by the image modality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{combined_seg_loss, cross_entropy};
use crate::geometry::{project_labels_to_image, PixelMapping};
use crate::nets::{
    decode_2d, decode_3d, linear, Binder, MultiScaleFeatures2D, MultiScaleFeatures3D, NetConfig, ParamStore,
    GROUP_FUSION, LEAKY_SLOPE,
};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

fn name(scale: usize, layer: &str) -> String {
    format!("{GROUP_FUSION}.s{scale}.{layer}")
}

/// Adds the per-scale fusion blocks to `store`.
pub fn init_fusion(cfg: &NetConfig, rng: &mut SplitRng, store: &mut ParamStore) {
    let mut rng = rng.split(3);
    let d = cfg.hidden_dim;
    let h = cfg.hidden_dim;
    for l in 1..=cfg.scales {
        store.init_linear(&name(l, "learner1"), d, h, true, &mut rng);
        store.init_linear(&name(l, "learner2"), h, h, true, &mut rng);
        store.init_linear(&name(l, "fuse"), h + d, h, true, &mut rng);
        store.init_linear(&name(l, "gate"), h, h, true, &mut rng);
        store.init_linear(&name(l, "proj2d"), d, h, true, &mut rng);
        store.init_linear(&name(l, "skip"), h, d, true, &mut rng);
        store.init_linear(&name(l, "head_fuse"), h, cfg.num_classes, true, &mut rng);
        store.init_linear(&name(l, "head_3d"), d, cfg.num_classes, true, &mut rng);
    }
}

/// Intermediate results of one fusion block.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub f_learner: Tensor,
    pub f2d3d: Tensor,
    pub gate: Tensor,
    pub f2d3d_e: Tensor,
    pub f3d_e: Tensor,
}

/// Fuses in-view features `f2d` and `f3d` (same rows, same point order).
pub fn fuse(binder: &Binder, scale: usize, f2d: &Tensor, f3d: &Tensor) -> Result<FusionOutput> {
    if f2d.shape().first() != f3d.shape().first() {
        return Err(Error::Shape {
            op: "fuse",
            lhs: f2d.shape().to_vec(),
            rhs: f3d.shape().to_vec(),
        });
    }
    let hidden = linear(binder, &name(scale, "learner1"), f3d)?.leaky_relu(LEAKY_SLOPE);
    let f_learner = linear(binder, &name(scale, "learner2"), &hidden)?;
    let f2d3d = linear(binder, &name(scale, "fuse"), &f_learner.concat_last_dim(f2d)?)?.leaky_relu(LEAKY_SLOPE);
    let gate = linear(binder, &name(scale, "gate"), &f2d3d)?.sigmoid();
    let f2d3d_e = linear(binder, &name(scale, "proj2d"), f2d)?.add(&gate.mul(&f2d3d)?)?;
    let f3d_e = f3d.add(&linear(binder, &name(scale, "skip"), &f_learner)?)?;
    Ok(FusionOutput {
        f_learner,
        f2d3d,
        gate,
        f2d3d_e,
        f3d_e,
    })
}

/// Row-mean `KL(softmax(teacher) ‖ softmax(student))`. The teacher is
/// detached, so only the student receives gradient.
pub fn distill_loss(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<Tensor> {
    if teacher_logits.shape() != student_logits.shape() || teacher_logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "distill_loss",
            lhs: teacher_logits.shape().to_vec(),
            rhs: student_logits.shape().to_vec(),
        });
    }
    let (n, c) = (teacher_logits.shape()[0], teacher_logits.shape()[1]);
    if c < 2 {
        return Err(Error::invalid(format!("distill_loss needs at least 2 classes, got {c}")));
    }
    if n == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let log_p = teacher_logits.detach().log_softmax_rows();
    let p = log_p.exp();
    let log_q = student_logits.log_softmax_rows();
    Ok(log_p.sub(&log_q)?.mul(&p)?.sum_all().scale(1.0 / n as f64))
}

/// Weights combining the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Multiplier on the summed per-scale KL terms.
    pub kd: f64,
    /// Lovász weight inside each combined segmentation loss.
    pub lovasz: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kd: 0.05, lovasz: 1.0 }
    }
}

/// Per-scale teacher logits to use instead of the live fused head. With a
/// frozen teacher the objective is an ordinary differentiable function of
/// the parameters, which is what finite-difference checks require.
pub type FrozenTeacher<'a> = Option<&'a [Tensor]>;

/// Tensors of one training objective evaluation.
#[derive(Debug, Clone)]
pub struct KdStep {
    /// Combined loss of the 3D decoder on all points.
    pub seg3d: Tensor,
    /// Combined loss of the 2D decoder on labelled pixels; zero in baseline mode.
    pub seg2d: Tensor,
    /// Cross-entropy of each fused head on in-view points.
    pub seg_fuse: Vec<Tensor>,
    /// Cross-entropy of each point-only head on in-view points.
    pub seg_single: Vec<Tensor>,
    pub kd: Vec<Tensor>,
    pub total: Tensor,
    pub logits_3d: Tensor,
    /// Fused-head logits per scale (the teachers).
    pub teacher_logits: Vec<Tensor>,
}

/// Scalar values of a [`KdStep`], as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg3d: f64,
    pub seg2d: f64,
    pub seg_fuse: Vec<f64>,
    pub seg_single: Vec<f64>,
    pub kd: Vec<f64>,
    pub total: f64,
}

impl KdStep {
    pub fn breakdown(&self) -> LossBreakdown {
        let items = |v: &[Tensor]| v.iter().map(Tensor::item).collect();
        LossBreakdown {
            seg3d: self.seg3d.item(),
            seg2d: self.seg2d.item(),
            seg_fuse: items(&self.seg_fuse),
            seg_single: items(&self.seg_single),
            kd: items(&self.kd),
            total: self.total.item(),
        }
    }
}

/// `seg + kd_weight · Σ kd`.
pub fn combine_losses(seg_terms: &[Tensor], kd_terms: &[Tensor], kd_weight: f64) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for t in seg_terms {
        total = total.add(t)?;
    }
    let mut kd = Tensor::scalar(0.0);
    for t in kd_terms {
        kd = kd.add(t)?;
    }
    total.add(&kd.scale(kd_weight))
}

/// Image features at scale `l` gathered under each in-view point.
fn lift_scale(f2d: &Tensor, scale: usize, mapping: &PixelMapping, valid: &[usize]) -> Result<Tensor> {
    let full = f2d.upsample_nearest(1 << scale)?;
    let (h, w, d) = (full.shape()[0], full.shape()[1], full.shape()[2]);
    if (h, w) != (mapping.height, mapping.width) {
        return Err(Error::Shape {
            op: "lift_scale",
            lhs: vec![h, w],
            rhs: vec![mapping.height, mapping.width],
        });
    }
    let pixels: Vec<usize> = valid
        .iter()
        .map(|&i| mapping.rows[i] as usize * w + mapping.cols[i] as usize)
        .collect();
    full.reshape(vec![h * w, d])?.gather_rows(&pixels)
}

/// Baseline objective: the 3D decoder's combined loss only.
pub fn baseline_step(binder: &Binder, f3d: &MultiScaleFeatures3D, labels: &[u32], weights: &LossWeights) -> Result<KdStep> {
    let logits_3d = decode_3d(binder, f3d, labels.len())?;
    let seg3d = combined_seg_loss(&logits_3d, labels, weights.lovasz)?;
    Ok(KdStep {
        total: seg3d.clone(),
        seg3d,
        seg2d: Tensor::scalar(0.0),
        seg_fuse: Vec::new(),
        seg_single: Vec::new(),
        kd: Vec::new(),
        logits_3d,
        teacher_logits: Vec::new(),
    })
}

/// Full objective with the image branch and per-scale distillation.
///
/// `mapping` relates the points to the image the 2D features were computed
/// from; out-of-view points take part only in the 3D decoder's loss.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_kd_step(
    binder: &Binder,
    cfg: &NetConfig,
    f2d: &MultiScaleFeatures2D,
    f3d: &MultiScaleFeatures3D,
    mapping: &PixelMapping,
    labels: &[u32],
    weights: &LossWeights,
    frozen_teacher: FrozenTeacher,
) -> Result<KdStep> {
    let n = labels.len();
    if f2d.scales.len() != cfg.scales || f3d.scales.len() != cfg.scales {
        return Err(Error::invalid(format!(
            "expected {} scales, got {} image and {} point scales",
            cfg.scales,
            f2d.scales.len(),
            f3d.scales.len()
        )));
    }
    if mapping.len() != n || f3d.num_points() != n {
        return Err(Error::len_mismatch("multiscale_kd_step", n, mapping.len()));
    }
    let valid = mapping.valid_indices();
    let fov_labels: Vec<u32> = valid.iter().map(|&i| labels[i]).collect();

    let logits_3d = decode_3d(binder, f3d, n)?;
    let seg3d = combined_seg_loss(&logits_3d, labels, weights.lovasz)?;
    let logits_2d = decode_2d(binder, cfg, f2d)?;
    let pixel_labels: Vec<u32> = project_labels_to_image(labels, mapping)?.iter().copied().collect();
    let seg2d = combined_seg_loss(&logits_2d, &pixel_labels, weights.lovasz)?;

    let mut seg_fuse = Vec::with_capacity(cfg.scales);
    let mut seg_single = Vec::with_capacity(cfg.scales);
    let mut kd = Vec::with_capacity(cfg.scales);
    let mut teacher_logits = Vec::with_capacity(cfg.scales);
    for l in 1..=cfg.scales {
        let per_scale = || -> Result<(Tensor, Tensor, Tensor, Tensor)> {
            let lifted = lift_scale(&f2d.scales[l - 1], l, mapping, &valid)?;
            let in_view = f3d.scales[l - 1].point_features.gather_rows(&valid)?;
            let out = fuse(binder, l, &lifted, &in_view)?;
            let s_fuse = linear(binder, &name(l, "head_fuse"), &out.f2d3d_e)?;
            let s_3d = linear(binder, &name(l, "head_3d"), &out.f3d_e)?;
            let teacher = match frozen_teacher {
                Some(t) => t.get(l - 1).cloned().ok_or_else(|| Error::invalid("frozen teacher has too few scales"))?,
                None => s_fuse.clone(),
            };
            Ok((
                cross_entropy(&s_fuse, &fov_labels)?,
                cross_entropy(&s_3d, &fov_labels)?,
                distill_loss(&teacher, &s_3d)?,
                s_fuse,
            ))
        };
        let (sf, ss, k, t) = per_scale().map_err(|e| e.at_scale(l))?;
        seg_fuse.push(sf);
        seg_single.push(ss);
        kd.push(k);
        teacher_logits.push(t.detach());
    }

    let mut seg_terms = vec![seg3d.clone(), seg2d.clone()];
    seg_terms.extend(seg_fuse.iter().cloned());
    seg_terms.extend(seg_single.iter().cloned());
    let total = combine_losses(&seg_terms, &kd, weights.kd)?;
    Ok(KdStep {
        seg3d,
        seg2d,
        seg_fuse,
        seg_single,
        kd,
        total,
        logits_3d,
        teacher_logits,
    })
}
