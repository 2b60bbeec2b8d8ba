//! Run configuration: one JSON document with a section per concern.
//!
//! A user file only needs the fields it changes. It is merged over the
//! defaults of its `preset`, and the fully resolved document is written
//! next to every run's outputs.

use std::path::{Path, PathBuf};

use msp_core::cohort::CohortConfig;
use msp_core::models::{Arch, Widths};
use msp_core::train::{AlphaSchedule, ScheduleSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Narrow networks, small batches and truncated epochs for one CPU core.
    #[default]
    Desk,
    /// Full epochs, minibatch 12, lr 1e-4 and the stand-in widths.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of patches used for training; the rest is the test set.
    pub fraction: f64,
    pub seed: u64,
    /// Holds out whole subjects instead of a random patch split.
    pub test_subjects: Option<Vec<usize>>,
    /// Carves a validation set of this share out of the training patches;
    /// without it the test set doubles as the validation set.
    pub validation_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub seed: u64,
    pub init_seed: u64,
    pub connection_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub alpha: Option<AlphaSchedule>,
    pub patches_per_epoch: Option<usize>,
    pub val_limit: Option<usize>,
    pub connection_lr_scale: f64,
    pub freeze_single: bool,
    pub restore_best: bool,
    pub widths: Widths,
    /// Epochs of single-net pretraining when `msp` runs without `--pretrained`.
    pub pretrain_epochs: usize,
    /// Architecture pretrained for every platform in that case.
    pub pretrain_arch: Arch,
}

impl TrainSettings {
    pub fn train_config(&self, epochs: usize, epoch_offset: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs,
            epoch_offset,
            batch_size: self.batch_size,
            schedule: self.schedule,
            alpha: self.alpha,
            pin_alpha: None,
            patches_per_epoch: self.patches_per_epoch,
            val_limit: self.val_limit,
            freeze_single: self.freeze_single,
            connection_lr_scale: self.connection_lr_scale,
            restore_best: self.restore_best,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Decimals in the text table.
    pub precision: usize,
    /// Factor applied to MSEs in the text table.
    pub scale: f64,
    /// Scores at most this many evenly spaced test patches.
    pub limit: Option<usize>,
    /// Patches per forward pass in `predict`.
    pub batch_size: usize,
    /// Bonferroni factor; defaults to the number of target platforms.
    pub comparisons: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Cohort directory; `--data` takes precedence.
    pub data: Option<PathBuf>,
    pub split: SplitConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = preset == Preset::Desk;
        Self {
            preset,
            data: None,
            split: SplitConfig {
                fraction: 0.9,
                seed: 1,
                test_subjects: None,
                validation_fraction: None,
            },
            train: TrainSettings {
                seed: 1,
                init_seed: 7,
                connection_seed: 11,
                epochs: if desk { 30 } else { 50 },
                batch_size: if desk { 4 } else { 12 },
                schedule: ScheduleSpec {
                    lr0: if desk { 3e-3 } else { 1e-4 },
                    period: if desk { 25 } else { 15 },
                },
                alpha: None,
                patches_per_epoch: desk.then_some(240),
                val_limit: desk.then_some(120),
                connection_lr_scale: 1.0,
                freeze_single: false,
                restore_best: true,
                widths: if desk { Widths::desk() } else { Widths::default() },
                pretrain_epochs: if desk { 20 } else { 50 },
                pretrain_arch: Arch::Cnnrish5,
            },
            eval: EvalSettings {
                precision: 0,
                scale: 1000.0,
                limit: desk.then_some(400),
                batch_size: 12,
                comparisons: None,
            },
        }
    }

    /// Parses a user document and merges it over its preset's defaults.
    pub fn from_json(text: &str, origin: &Path) -> CliResult<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        let Value::Object(ref fields) = user else {
            return Err(CliError::Config(format!("{}: the config must be a JSON object", origin.display())));
        };
        let preset = match fields.get("preset") {
            None => Preset::default(),
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| CliError::Config(format!("{}: field `preset`: {e}", origin.display())))?,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::preset(Preset::default())),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text, p)
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return bad("split.fraction must lie in (0, 1)");
        }
        if self.split.validation_fraction.is_some_and(|f| !(f > 0.0 && f < 1.0)) {
            return bad("split.validation_fraction must lie in (0, 1)");
        }
        if self.eval.batch_size == 0 || self.eval.limit == Some(0) || self.eval.comparisons == Some(0) {
            return bad("eval.batch_size, eval.limit and eval.comparisons must be positive");
        }
        if !(self.eval.scale > 0.0 && self.eval.scale.is_finite()) {
            return bad("eval.scale must be positive");
        }
        self.train.train_config(self.train.epochs, 0).validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Reads a cohort document, merged over the default cohort.
pub fn load_cohort(path: Option<&Path>) -> CliResult<CohortConfig> {
    let cfg = match path {
        None => CohortConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if !user.is_object() {
                return Err(CliError::Config(format!("{}: the config must be a JSON object", p.display())));
            }
            let mut merged = serde_json::to_value(CohortConfig::default()).expect("config serializes");
            merge(&mut merged, user);
            serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_preset() {
        let cfg = RunConfig::from_json("{}", Path::new("x.json")).unwrap();
        assert_eq!(cfg, RunConfig::preset(Preset::Desk));
        let full = RunConfig::from_json(r#"{"preset": "full"}"#, Path::new("x.json")).unwrap();
        assert_eq!(full.train.batch_size, 12);
        assert_eq!(full.train.schedule.lr0, 1e-4);
    }

    #[test]
    fn partial_sections_merge() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3, "schedule": {"period": 40}}}"#, Path::new("x")).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.schedule.period, 40);
        assert_eq!(cfg.train.schedule.lr0, 3e-3);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn diagnostics_name_line_or_field() {
        let e = RunConfig::from_json("{\n  \"train\": {\n    \"epochs\": ,\n  }\n}", Path::new("c.json")).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = RunConfig::from_json(r#"{"train": {"epoch": 3}}"#, Path::new("c.json")).unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        let e = RunConfig::from_json(r#"{"split": {"fraction": 1.5}}"#, Path::new("c.json")).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
    }

    #[test]
    fn resolved_document_roundtrips() {
        let cfg = RunConfig::preset(Preset::Full);
        assert_eq!(RunConfig::from_json(&cfg.to_json(), Path::new("r")).unwrap(), cfg);
    }
}
