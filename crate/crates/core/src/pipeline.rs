//! Orchestration: data preparation, training loop, evaluation and projection
//! statistics. Every stochastic choice is drawn from a stream split off the
//! run seed, so a run is a pure function of its config and data.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainMode};
use crate::dataio::{
    apply_augment_2d, apply_augment_3d, generate_synthetic_dataset, load_dataset, Augment2dParams, Augment3dParams,
    Scene,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{argmax_rows, tta_vote, ConfusionMatrix, DistanceBins, MetricsReport, PointScorer};
use crate::geometry::{map_points_to_pixels, project_labels_to_image, PixelMapping, PointCloud, IGNORE_LABEL};
use crate::msfskd::{baseline_step, init_fusion, multiscale_kd_step, LossBreakdown};
use crate::nets::{
    encode_2d, encode_3d, image_tensor, infer_3d, init_2d, init_3d, point_input, Binder, NetConfig, ParamStore,
    GROUPS_TRAINING_ONLY,
};
use crate::rng::SplitRng;
use crate::sparsevox::{build_voxel_mapping, scale_resolution, VoxelIndex};
use crate::tensor::Tape;

/// A scene paired with the point/pixel mapping of its first camera.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub scene: Scene,
    pub mapping: PixelMapping,
}

impl PreparedScene {
    /// Uses `mapping` when given, otherwise projects onto camera 0.
    pub fn new(scene: Scene, mapping: Option<PixelMapping>) -> Result<Self> {
        scene.validate()?;
        let mapping = match mapping {
            Some(m) => m,
            None => {
                let cam = scene
                    .cameras
                    .first()
                    .ok_or_else(|| Error::invalid("scene has no camera"))?;
                map_points_to_pixels(&scene.cloud, cam)?
            }
        };
        if mapping.len() != scene.cloud.len() {
            return Err(Error::len_mismatch("PreparedScene", scene.cloud.len(), mapping.len()));
        }
        Ok(Self { scene, mapping })
    }
}

/// Loads `data_dir` or generates the configured synthetic scenes.
pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir)?
            .into_iter()
            .map(|s| PreparedScene::new(s.scene, s.mapping))
            .collect(),
        None if cfg.synthetic_scenes > 0 => generate_synthetic_dataset(&cfg.synthetic, cfg.synthetic_scenes)?
            .into_iter()
            .map(|s| PreparedScene::new(s.scene, Some(s.mapping)))
            .collect(),
        None => Err(Error::Config(vec!["no data: set `data_dir` or `synthetic_scenes`".into()])),
    }
}

/// Splits off the last `cfg.val_scenes` scenes for validation.
pub fn split_validation(mut scenes: Vec<PreparedScene>, val: usize) -> Result<(Vec<PreparedScene>, Vec<PreparedScene>)> {
    if val >= scenes.len() {
        return Err(Error::Config(vec![format!(
            "`val_scenes` ({val}) must leave at least one of {} scenes for training",
            scenes.len()
        )]));
    }
    let held = scenes.split_off(scenes.len() - val);
    Ok((scenes, held))
}

pub fn check_labels(scenes: &[PreparedScene], num_classes: usize) -> Result<()> {
    for (k, s) in scenes.iter().enumerate() {
        if let Some((i, l)) = s
            .scene
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            return Err(Error::invalid(format!(
                "scene {k}: point {i} has label {l} but the model has {num_classes} classes"
            )));
        }
    }
    Ok(())
}

/// Fresh parameters for `mode`.
pub fn init_model(net: &NetConfig, mode: TrainMode, seed: u64) -> ParamStore {
    let mut rng = SplitRng::seed(seed);
    let mut params = init_3d(net, &mut rng);
    if mode == TrainMode::TwoDPass {
        init_2d(net, &mut rng, &mut params);
        init_fusion(net, &mut rng, &mut params);
    }
    params
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: usize,
    /// Mean `seg3d` over the last epoch.
    pub final_seg3d: f64,
    pub validation: Option<MetricsReport>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    let avg_vec = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| -> Vec<f64> {
        let len = f(&items[0]).len();
        (0..len).map(|k| items.iter().map(|b| f(b)[k]).sum::<f64>() / n).collect()
    };
    LossBreakdown {
        seg3d: avg(&|b| b.seg3d),
        seg2d: avg(&|b| b.seg2d),
        seg_fuse: avg_vec(&|b| &b.seg_fuse),
        seg_single: avg_vec(&|b| &b.seg_single),
        kd: avg_vec(&|b| &b.kd),
        total: avg(&|b| b.total),
    }
}

/// Crop window for training: random when augmenting, centred otherwise.
fn crop_params(cfg: &RunConfig, image_hw: (usize, usize), rng: &mut SplitRng) -> Result<Augment2dParams> {
    let crop = (cfg.crop_height, cfg.crop_width);
    if cfg.augment {
        return Augment2dParams::sample(image_hw, crop, rng);
    }
    let (h, w) = image_hw;
    if crop.0 > h || crop.1 > w {
        return Err(Error::invalid(format!(
            "crop {}x{} (w×h) does not fit image {w}x{h}",
            crop.1, crop.0
        )));
    }
    Ok(Augment2dParams {
        top: (h - crop.0) / 2,
        left: (w - crop.1) / 2,
        height: crop.0,
        width: crop.1,
        flip: false,
        jitter: [1.0; 3],
    })
}

/// Objective and gradients for one scene.
fn scene_gradients(
    cfg: &RunConfig,
    mode: TrainMode,
    params: &ParamStore,
    item: &PreparedScene,
    rng: &mut SplitRng,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f64>>)> {
    let net = cfg.net();
    let weights = cfg.loss_weights();
    let scene = &item.scene;
    let aug3d = if cfg.augment {
        Augment3dParams::sample(rng)
    } else {
        Augment3dParams::IDENTITY
    };
    let cloud = apply_augment_3d(&scene.cloud, aug3d);

    let tape = Tape::new();
    let binder = Binder::training(params, &tape);
    let f3d = encode_3d(&binder, &net, &cloud, &point_input(&cloud))?;
    let step = match mode {
        TrainMode::Baseline => baseline_step(&binder, &f3d, &scene.labels, &weights)?,
        TrainMode::TwoDPass => {
            let image = scene.images.first().ok_or_else(|| Error::invalid("scene has no image"))?;
            let (h, w, _) = image.dim();
            let p2d = crop_params(cfg, (h, w), rng)?;
            let label_image = project_labels_to_image(&scene.labels, &item.mapping)?;
            let (crop, _) = apply_augment_2d(image, &label_image, &p2d)?;
            let mapping = item.mapping.crop_and_flip(p2d.top, p2d.left, p2d.height, p2d.width, p2d.flip)?;
            let f2d = encode_2d(&binder, &net, &image_tensor(&crop))?;
            multiscale_kd_step(&binder, &net, &f2d, &f3d, &mapping, &scene.labels, &weights, None)?
        }
    };
    step.total.backward()?;
    Ok((step.breakdown(), binder.gradients()))
}

/// Plain SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`, with `lr`
/// supplied per step by the schedule.
struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
            let current = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            let updated = current.data().iter().zip(v.iter()).map(|(p, vi)| p - lr * vi).collect();
            params.set_values(name, updated)?;
        }
        Ok(())
    }
}

/// Trains from the config's seed. `log` receives one entry per optimizer
/// step. Validation (if any scenes are given) runs the point branch alone.
pub fn train(
    cfg: &RunConfig,
    mode: TrainMode,
    train_scenes: &[PreparedScene],
    val_scenes: &[PreparedScene],
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    check_labels(train_scenes, cfg.num_classes)?;
    check_labels(val_scenes, cfg.num_classes)?;
    let net = cfg.net();
    let mut params = init_model(&net, mode, cfg.seed);
    let mut root = SplitRng::seed(cfg.seed).split(0x0074_7261_696e);
    let mut sgd = Sgd {
        momentum: cfg.momentum,
        velocity: BTreeMap::new(),
    };
    let mut step = 0;
    let total_steps = cfg.epochs * train_scenes.len().div_ceil(cfg.batch_size);
    let mut final_seg3d = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        order.shuffle(&mut root.split(epoch as u64));
        let mut epoch_seg3d = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut logs = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut rng = root.split(i as u64);
                let (losses, grads) = scene_gradients(cfg, mode, &params, &train_scenes[i], &mut rng)?;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
                epoch_seg3d.push(losses.seg3d);
                logs.push(losses);
            }
            let inv = 1.0 / batch.len() as f64;
            sum.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
            if let Some(bad) = sum.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::invalid(format!(
                    "non-finite gradient for `{}` at step {step}; lower the learning rate",
                    bad.0
                )));
            }
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, step, total_steps);
            sgd.step(&mut params, &sum, lr)?;
            log(&StepLog {
                step,
                epoch,
                losses: mean_breakdown(&logs),
            })?;
            step += 1;
        }
        final_seg3d = epoch_seg3d.iter().sum::<f64>() / epoch_seg3d.len() as f64;
    }
    let checkpoint = Checkpoint { net, mode, params };
    let validation = if val_scenes.is_empty() {
        None
    } else {
        Some(evaluate(&checkpoint, val_scenes, 1)?.report)
    };
    Ok(TrainOutcome {
        checkpoint,
        steps: step,
        final_seg3d,
        validation,
    })
}

/// Point-branch scorer that totals parameter accesses across calls.
struct CountingModel<'a> {
    params: &'a ParamStore,
    net: &'a NetConfig,
    counts: RefCell<BTreeMap<String, usize>>,
}

impl PointScorer for CountingModel<'_> {
    fn logits(&self, cloud: &PointCloud) -> Result<Array2<f64>> {
        let binder = Binder::inference(self.params);
        let out = infer_3d(&binder, self.net, cloud);
        let mut counts = self.counts.borrow_mut();
        for (g, c) in binder.access_counts() {
            *counts.entry(g).or_default() += c;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub bins: DistanceBins,
    /// Averaged class scores per scene.
    pub scores: Vec<Array2<f64>>,
    /// Parameter requests per group made during evaluation.
    pub access_counts: BTreeMap<String, usize>,
}

/// Evaluates the point branch with `tta_angles` rotations (1 = none).
///
/// Fails if the pass touched any image-branch or fusion parameter.
pub fn evaluate(checkpoint: &Checkpoint, scenes: &[PreparedScene], tta_angles: usize) -> Result<EvalOutcome> {
    check_labels(scenes, checkpoint.net.num_classes)?;
    let c = checkpoint.net.num_classes;
    let model = CountingModel {
        params: &checkpoint.params,
        net: &checkpoint.net,
        counts: RefCell::default(),
    };
    let mut cm = ConfusionMatrix::new(c);
    let mut bins = DistanceBins::new(crate::evalmetrics::default_distance_edges(), c)?;
    let mut scores = Vec::with_capacity(scenes.len());
    for s in scenes {
        let votes = tta_vote(&model, &s.scene.cloud, tta_angles)?;
        let preds = argmax_rows(&votes);
        cm.accumulate(&preds, &s.scene.labels)?;
        bins.accumulate(&preds, &s.scene.labels, &s.scene.cloud)?;
        scores.push(votes);
    }
    let access_counts = model.counts.into_inner();
    if let Some(g) = GROUPS_TRAINING_ONLY.iter().find(|g| access_counts.get(**g).copied().unwrap_or(0) > 0) {
        return Err(Error::invalid(format!("evaluation touched `{g}` parameters")));
    }
    Ok(EvalOutcome {
        report: MetricsReport::new(&cm, &bins),
        confusion: cm,
        bins,
        scores,
        access_counts,
    })
}

/// Summary printed by the projection inspector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub num_points: usize,
    pub num_in_view: usize,
    pub overlap_fraction: f64,
}

pub fn projection_stats(scene: &Scene, camera: usize) -> Result<(PixelMapping, ProjectionStats)> {
    let cam = scene.cameras.get(camera).ok_or_else(|| {
        Error::invalid(format!("camera {camera} requested but the scene has {}", scene.cameras.len()))
    })?;
    let mapping = map_points_to_pixels(&scene.cloud, cam)?;
    let stats = ProjectionStats {
        num_points: mapping.len(),
        num_in_view: mapping.num_valid,
        overlap_fraction: mapping.overlap_fraction(),
    };
    Ok((mapping, stats))
}

/// `index,row,col,depth,valid` per point.
pub fn mapping_csv(mapping: &PixelMapping) -> String {
    let mut s = String::from("index,row,col,depth,valid\n");
    for i in 0..mapping.len() {
        let _ = writeln!(
            s,
            "{i},{},{},{:?},{}",
            mapping.rows[i], mapping.cols[i], mapping.depth[i], mapping.valid[i] as u8
        );
    }
    s
}

/// Occupied voxel count at each scale.
pub fn voxel_counts(cloud: &PointCloud, base: f64, scales: usize) -> Result<Vec<(f64, usize)>> {
    (1..=scales)
        .map(|l| {
            let r = scale_resolution(base, l);
            let m = build_voxel_mapping(cloud, r, l)?;
            Ok((r, VoxelIndex::from_mapping(&m).num_voxels()))
        })
        .collect()
}
