//! Run configuration: model, objective, augmentation, optimizer and data.
//!
//! A config file is either a JSON object or `key = value` lines (`#`
//! comments, dotted keys for the nested `synthetic` table). Every problem
//! found is reported at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::msfskd::LossWeights;
use crate::nets::NetConfig;

/// Whether training uses the image branch and distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Point branch alone, supervised by its decoder.
    #[serde(rename = "baseline")]
    Baseline,
    /// Point and image branches with per-scale fusion and distillation.
    #[serde(rename = "2dpass")]
    TwoDPass,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "2dpass" => Ok(TrainMode::TwoDPass),
            other => Err(Error::Config(vec![format!("unknown mode `{other}` (expected baseline or 2dpass)")])),
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` towards zero over the run.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for optimizer step `step` of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::TwoDPass => "2dpass",
        })
    }
}

/// A default inherited from the reference method, with where it comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub field: &'static str,
    pub value: f64,
    pub source: &'static str,
}

pub const REFERENCE_DEFAULTS: [Provenance; 7] = [
    Provenance { field: "scales", value: 4.0, source: "reference setup, fusion scales L on SemanticKITTI" },
    Provenance { field: "base_voxel_size", value: 0.1, source: "reference setup, 3D encoder voxel size" },
    Provenance { field: "hidden_dim", value: 64.0, source: "reference setup, MLP and 2D-learner hidden size" },
    Provenance { field: "kd_weight", value: 0.05, source: "reference setup, segmentation : KL = 1 : 0.05" },
    Provenance { field: "crop_width", value: 480.0, source: "reference augmentation, 480 x 320 (w x h) crop" },
    Provenance { field: "crop_height", value: 320.0, source: "reference augmentation, 480 x 320 (w x h) crop" },
    Provenance { field: "tta_angles", value: 12.0, source: "reference test-time voting over Z rotations" },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scales: usize,
    pub base_voxel_size: f64,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub kd_weight: f64,
    pub lovasz_weight: f64,
    pub crop_width: usize,
    pub crop_height: usize,
    /// Apply the random 3D/2D augmentations during training.
    pub augment: bool,
    pub tta_angles: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    /// Directory of scene directories to train on.
    pub data_dir: Option<PathBuf>,
    /// Number of generated scenes to use when `data_dir` is unset.
    pub synthetic_scenes: usize,
    pub synthetic: SynthConfig,
    /// Scenes held out from the end of the dataset for a final validation.
    pub val_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            base_voxel_size: 0.1,
            hidden_dim: 64,
            num_classes: 3,
            kd_weight: 0.05,
            lovasz_weight: 1.0,
            crop_width: 480,
            crop_height: 320,
            augment: true,
            tta_angles: 12,
            seed: 0,
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_schedule: LrSchedule::Cosine,
            data_dir: None,
            synthetic_scenes: 0,
            synthetic: SynthConfig::default(),
            val_scenes: 0,
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn parse_key_values(text: &str, errors: &mut Vec<String>) -> Map<String, Value> {
    let mut root = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`", i + 1));
            continue;
        };
        let mut path: Vec<&str> = key.trim().split('.').collect();
        let leaf = path.pop().unwrap_or_default();
        let mut table = &mut root;
        for part in path {
            let entry = table.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            table = entry.as_object_mut().expect("just ensured an object");
        }
        table.insert(leaf.to_string(), parse_scalar(value.trim()));
    }
    root
}

/// Checks each supplied key on its own so every bad key is reported, and
/// drops the bad ones.
fn check_keys(supplied: &mut Map<String, Value>, errors: &mut Vec<String>) {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let known = defaults.as_object().expect("config is an object");
    supplied.retain(|key, value| {
        if !known.contains_key(key) {
            errors.push(format!("unknown key `{key}`"));
            return false;
        }
        let mut probe = known.clone();
        probe.insert(key.clone(), value.clone());
        match serde_json::from_value::<RunConfig>(Value::Object(probe)) {
            Ok(_) => true,
            Err(e) => {
                errors.push(format!("`{key}`: {e}"));
                false
            }
        }
    });
}

impl RunConfig {
    /// Parses JSON (if the text starts with `{`) or `key = value` lines, then
    /// validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut supplied = if text.trim_start().starts_with('{') {
            match serde_json::from_str::<Value>(text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Error::Config(vec!["config must be a JSON object".into()])),
                Err(e) => return Err(Error::Config(vec![format!("JSON: {e}")])),
            }
        } else {
            parse_key_values(text, &mut errors)
        };
        check_keys(&mut supplied, &mut errors);
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(supplied)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if let Err(Error::Config(more)) = cfg.validate() {
            errors.extend(more);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Replaces the seed with `raw` (the value of an override variable).
    pub fn override_seed(&mut self, raw: &str) -> Result<()> {
        self.seed = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(vec![format!("seed override `{raw}` is not an unsigned integer")]))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                e.push(format!("`{name}` must be positive"));
            }
        };
        positive("scales", self.scales);
        positive("hidden_dim", self.hidden_dim);
        positive("crop_width", self.crop_width);
        positive("crop_height", self.crop_height);
        positive("tta_angles", self.tta_angles);
        positive("batch_size", self.batch_size);
        if self.num_classes < 2 || self.num_classes >= 255 {
            e.push(format!("`num_classes` must be in [2, 255), got {}", self.num_classes));
        }
        if self.scales > 0 && self.scales < 16 {
            let div = 1usize << self.scales;
            if !self.crop_width.is_multiple_of(div) || !self.crop_height.is_multiple_of(div) {
                e.push(format!(
                    "crop {}x{} must be divisible by 2^scales = {div}",
                    self.crop_width, self.crop_height
                ));
            }
        } else if self.scales >= 16 {
            e.push("`scales` must be below 16".into());
        }
        for (name, v) in [("base_voxel_size", self.base_voxel_size), ("learning_rate", self.learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                e.push(format!("`{name}` must be positive, got {v}"));
            }
        }
        for (name, v) in [("kd_weight", self.kd_weight), ("lovasz_weight", self.lovasz_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                e.push(format!("`{name}` must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            e.push(format!("`momentum` must be in [0, 1), got {}", self.momentum));
        }
        if self.data_dir.is_none() {
            if self.synthetic_scenes > 0 {
                if let Err(err) = self.synthetic.validate() {
                    e.push(format!("synthetic: {err}"));
                }
                if self.val_scenes >= self.synthetic_scenes {
                    e.push(format!(
                        "`val_scenes` ({}) must leave at least one training scene out of {}",
                        self.val_scenes, self.synthetic_scenes
                    ));
                }
            }
        } else if self.synthetic_scenes > 0 {
            e.push("set either `data_dir` or `synthetic_scenes`, not both".into());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            scales: self.scales,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            base_voxel_size: self.base_voxel_size,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            kd: self.kd_weight,
            lovasz: self.lovasz_weight,
        }
    }

    /// Value of a numeric field by name, for provenance checks.
    pub fn numeric_field(&self, field: &str) -> Option<f64> {
        serde_json::to_value(self).ok()?.get(field)?.as_f64()
    }

    /// Human-readable list of fields whose defaults come from the reference
    /// method.
    pub fn provenance_help() -> String {
        REFERENCE_DEFAULTS
            .iter()
            .map(|p| format!("  {:<16} {:<6} {}", p.field, p.value, p.source))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_decays_from_the_base_rate() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(0.1, 0, 10), 0.1);
        assert!((s.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(s.rate(0.1, 9, 10) > 0.0 && s.rate(0.1, 9, 10) < s.rate(0.1, 8, 10));
        assert_eq!(LrSchedule::Constant.rate(0.1, 9, 10), 0.1);
        assert_eq!(RunConfig::parse("lr_schedule = constant").unwrap().lr_schedule, LrSchedule::Constant);
    }

    #[test]
    fn defaults_match_reference_values() {
        let cfg = RunConfig::default();
        for p in REFERENCE_DEFAULTS {
            assert_eq!(cfg.numeric_field(p.field), Some(p.value), "{}", p.field);
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = RunConfig::parse("scales = 2\n# comment\nsynthetic.num_points = 100\nlearning_rate=0.5").unwrap();
        let js = RunConfig::parse(r#"{"scales": 2, "synthetic": {"num_points": 100}, "learning_rate": 0.5}"#).unwrap();
        assert_eq!(kv, js);
        assert_eq!(kv.synthetic.num_points, 100);
        assert_eq!(kv.synthetic.num_classes, 3);
    }

    #[test]
    fn all_problems_are_listed() {
        let Err(Error::Config(errs)) = RunConfig::parse("scales = 0\nbogus = 1\nmomentum = 1.5\nepochs = many\n") else {
            panic!("expected config error");
        };
        let joined = errs.join("\n");
        for needle in ["bogus", "epochs", "scales", "momentum"] {
            assert!(joined.contains(needle), "{joined}");
        }
        let Err(Error::Config(errs)) = RunConfig::parse("scales = 0\nmomentum = 1.5\nkd_weight = -1") else {
            panic!("expected config error");
        };
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.override_seed("42").unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.override_seed("x").is_err());
    }
}
