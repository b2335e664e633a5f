//! Dataset generation, training variants and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    assign_splits, generate_synthetic, log_path, make_windows, save_log, synthetic_suite,
    DatasetManifest, DatasetSplits, FlightLog, ManifestEntry,
};
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossWeights};
use crate::seq2seq::{Model, ModelConfig, Normalizer};
use crate::trainer::{train, EpochRecord, TrainReport};

/// The trained model and its two ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fit, physics, projection and slack terms with a slack head.
    Full,
    /// Fit and projection terms only; no slack head.
    NoPhysics,
    /// Physics term kept, slacks fixed at zero.
    NoSlack,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoPhysics, Variant::NoSlack];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPhysics => "no_physics",
            Variant::NoSlack => "no_slack",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            slack_head: self == Variant::Full,
            ..base.clone()
        }
    }

    pub fn loss_weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Variant::NoPhysics => base.without_physics(),
            Variant::NoSlack => LossWeights { rho: 0.0, ..base.clone() },
            Variant::Full => base.clone(),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (full, no_physics or no_slack)")))
    }
}

/// Closed-loop flights described by `cfg.data`.
pub fn generate_logs(cfg: &RunConfig) -> Result<Vec<FlightLog>> {
    let d = &cfg.data;
    synthetic_suite(d.logs, (d.min_rows, d.max_rows), d.seed)
        .iter()
        .map(|spec| generate_synthetic(&cfg.physics, &cfg.disturbance, &cfg.gains, spec))
        .collect()
}

/// Write `logs` as CSV files under `dir` with a split manifest
/// (`dataset.toml`). Returns the manifest path.
pub fn write_dataset(cfg: &RunConfig, logs: &[FlightLog], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let w = cfg.windowing();
    let counts: Vec<(String, usize)> = logs
        .iter()
        .map(|l| Ok((l.id.clone(), make_windows(l, w.history, w.horizon, w.stride, &cfg.physics)?.len())))
        .collect::<Result<_>>()?;
    let assignment = assign_splits(&counts, cfg.data.fractions, cfg.data.split_seed)?;
    let mut entries = Vec::with_capacity(logs.len());
    for ((log, (_, n)), (_, split)) in logs.iter().zip(&counts).zip(&assignment.logs) {
        let path = log_path(dir, &log.id);
        save_log(log, &path)?;
        entries.push(ManifestEntry {
            path: path.file_name().expect("file name").into(),
            split: *split,
            windows: *n,
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        seed: cfg.data.split_seed,
        history: w.history,
        horizon: w.horizon,
        stride: w.stride,
        fractions: cfg.data.fractions,
        achieved: assignment.achieved,
        logs: entries,
    };
    let path = dir.join("dataset.toml");
    manifest.save(&path)?;
    Ok(path)
}

/// Provenance of a training run, written next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub seed: u64,
    pub dataset_hash: String,
    pub param_count: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_validation: LossBreakdown,
    pub config: RunConfig,
    pub version: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub struct TrainedRun {
    pub model: Model,
    pub report: TrainReport,
    pub manifest: RunManifest,
}

/// Train one variant from scratch. `seed` drives both initialization and
/// batch order.
pub fn train_variant(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    splits: &DatasetSplits,
    dataset_hash: &str,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    cfg.validate()?;
    let model_cfg = variant.model_config(&cfg.model);
    let weights = variant.loss_weights(&cfg.loss);
    let train_cfg = crate::trainer::TrainConfig { seed, ..cfg.train.clone() };
    if splits.train.is_empty() {
        return Err(Error::Data("the train split has no windows".into()));
    }
    let mut model = Model::new(model_cfg.clone(), seed)?
        .with_normalizer(Normalizer::fit(&splits.train, model_cfg.residual));
    let report = train(
        &mut model,
        &splits.train,
        &splits.validation,
        &weights,
        &cfg.physics,
        &train_cfg,
        on_epoch,
    )?;
    let manifest = RunManifest {
        variant,
        seed,
        dataset_hash: dataset_hash.to_string(),
        param_count: model.param_count(),
        train_windows: splits.train.len(),
        validation_windows: splits.validation.len(),
        epochs_run: report.epochs.len() - 1,
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        best_validation: report.best_validation,
        config: RunConfig {
            model: model_cfg,
            loss: weights,
            train: train_cfg,
            ..cfg.clone()
        },
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(TrainedRun {
        model,
        report,
        manifest,
    })
}
