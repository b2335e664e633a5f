//! Multi-step prediction metrics and baseline comparison reports.
//!
//! Errors are grouped as position, velocity, attitude and payload position.
//! The attitude error is the norm of [`quat_error`] between the normalized
//! prediction and the truth. The combined error of a step is the norm of the
//! four group errors stacked together, so the combined RMSE satisfies
//! `combined² = position² + velocity² + quaternion² + payload²`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SequenceWindow;
use crate::dynamics::{rollout, LoadAngularVelocity, PhysicalParams, SystemState};
use crate::error::{Error, Result};
use crate::seq2seq::Model;
use crate::so3::{norm4, quat_error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Position,
    Velocity,
    Quaternion,
    Payload,
    Combined,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Position,
        Group::Velocity,
        Group::Quaternion,
        Group::Payload,
        Group::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Position => "position",
            Group::Velocity => "velocity",
            Group::Quaternion => "quaternion",
            Group::Payload => "payload",
            Group::Combined => "combined",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Error norms of one predicted state, indexed like [`Group::ALL`].
pub fn group_errors(pred: &SystemState, truth: &SystemState) -> [f64; 5] {
    let p = (pred.p - truth.p).norm();
    let v = (pred.v - truth.v).norm();
    let q = norm4(&quat_error(pred.q.normalized(), truth.q));
    let l = (pred.p_load - truth.p_load).norm();
    [p, v, q, l, (p * p + v * v + q * q + l * l).sqrt()]
}

/// Anything that predicts `horizon` future states for each window.
pub trait Predictor {
    fn name(&self) -> &str;
    fn predict(&self, windows: &[&SequenceWindow], horizon: usize) -> Result<Vec<Vec<SystemState>>>;
}

/// Open-loop rollout of the physical model from the last measured state,
/// seeded with the window's load angular velocity.
#[derive(Debug, Clone)]
pub struct PhysicsBaseline {
    pub params: PhysicalParams,
}

impl Predictor for PhysicsBaseline {
    fn name(&self) -> &str {
        "physics"
    }

    fn predict(&self, windows: &[&SequenceWindow], horizon: usize) -> Result<Vec<Vec<SystemState>>> {
        windows
            .iter()
            .map(|w| {
                let controls = w.decoder_controls(horizon)?;
                rollout(
                    &w.last_state(),
                    &LoadAngularVelocity(w.omega_load),
                    &controls,
                    &self.params,
                )
                .map_err(|e| {
                    Error::Data(format!(
                        "physics rollout of window {}@{}: {e}",
                        w.source.log_id, w.source.start
                    ))
                })
            })
            .collect()
    }
}

/// A trained network under a report name.
pub struct ModelPredictor<'a> {
    pub name: String,
    pub model: &'a Model,
    pub batch_size: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(name: impl Into<String>, model: &'a Model) -> Self {
        ModelPredictor {
            name: name.into(),
            model,
            batch_size: 64,
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, windows: &[&SequenceWindow], horizon: usize) -> Result<Vec<Vec<SystemState>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(self.batch_size.max(1)) {
            out.extend(self.model.predict(chunk, horizon)?.into_iter().map(|p| p.states));
        }
        Ok(out)
    }
}

/// Summary of one step's error distribution over windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl StepStats {
    pub fn of(values: &[f64]) -> StepStats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        StepStats {
            mean,
            std: var.sqrt(),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
        }
    }
}

/// Per-step error statistics for every group; `steps[k]` is `k + 1` steps
/// ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeCurve {
    pub windows: usize,
    pub groups: BTreeMap<Group, Vec<StepStats>>,
}

impl MaeCurve {
    pub fn horizon(&self) -> usize {
        self.groups.values().next().map_or(0, Vec::len)
    }

    pub fn means(&self, group: Group) -> Vec<f64> {
        self.groups[&group].iter().map(|s| s.mean).collect()
    }

    /// CSV with columns `k, group, mean, std, q1, q3`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "group", "mean", "std", "q1", "q3"])?;
        for (g, steps) in &self.groups {
            for (k, s) in steps.iter().enumerate() {
                w.write_record([
                    (k + 1).to_string(),
                    g.name().to_string(),
                    format!("{:?}", s.mean),
                    format!("{:?}", s.std),
                    format!("{:?}", s.q1),
                    format!("{:?}", s.q3),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_shapes(predictions: &[Vec<SystemState>], truths: &[&[SystemState]]) -> Result<usize> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Data(format!(
            "need at least one window and matching counts, got {} predictions and {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let n = predictions[0].len();
    for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
        if p.len() != n || t.len() < n || n == 0 {
            return Err(Error::Data(format!(
                "window {i}: horizon mismatch ({} predicted, {} true, expected {n})",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(n)
}

/// Per-step MAE statistics. `truths[j]` may extend beyond the prediction
/// horizon; the excess is ignored.
pub fn mae_curve(predictions: &[Vec<SystemState>], truths: &[&[SystemState]]) -> Result<MaeCurve> {
    let n = check_shapes(predictions, truths)?;
    let mut groups = BTreeMap::new();
    let errs: Vec<Vec<[f64; 5]>> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| group_errors(a, b)).collect())
        .collect();
    for (gi, g) in Group::ALL.iter().enumerate() {
        let steps = (0..n)
            .map(|k| {
                let vals: Vec<f64> = errs.iter().map(|e| e[k][gi]).collect();
                StepStats::of(&vals)
            })
            .collect();
        groups.insert(*g, steps);
    }
    Ok(MaeCurve {
        windows: predictions.len(),
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub position: f64,
    pub velocity: f64,
    pub quaternion: f64,
    pub payload: f64,
    pub combined: f64,
}

/// Root of the mean squared error norm over all windows and steps, per group.
pub fn rmse(predictions: &[Vec<SystemState>], truths: &[&[SystemState]]) -> Result<RmseRow> {
    let n = check_shapes(predictions, truths)?;
    let mut sq = [0.0; 4];
    for (p, t) in predictions.iter().zip(truths) {
        for (a, b) in p.iter().zip(t.iter()) {
            let e = group_errors(a, b);
            for g in 0..4 {
                sq[g] += e[g] * e[g];
            }
        }
    }
    let count = (predictions.len() * n) as f64;
    let mse = sq.map(|s| s / count);
    Ok(RmseRow {
        position: mse[0].sqrt(),
        velocity: mse[1].sqrt(),
        quaternion: mse[2].sqrt(),
        payload: mse[3].sqrt(),
        combined: mse.iter().sum::<f64>().sqrt(),
    })
}

/// First step `k` (1-based) at which `model`'s mean combined error drops
/// below `baseline`'s.
pub fn crossing_index(model: &MaeCurve, baseline: &MaeCurve) -> Option<usize> {
    model
        .means(Group::Combined)
        .iter()
        .zip(baseline.means(Group::Combined))
        .position(|(m, b)| *m < b)
        .map(|k| k + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub name: String,
    pub curve: MaeCurve,
    pub rmse: RmseRow,
}

pub fn evaluate(predictor: &dyn Predictor, windows: &[SequenceWindow], horizon: usize) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.horizon() < horizon) {
        return Err(Error::Data(format!(
            "window {}@{} has {} future steps, fewer than the evaluation horizon {horizon}",
            w.source.log_id,
            w.source.start,
            w.horizon()
        )));
    }
    let refs: Vec<&SequenceWindow> = windows.iter().collect();
    let predictions = predictor.predict(&refs, horizon)?;
    let truths: Vec<&[SystemState]> = windows.iter().map(|w| &w.future_truth[..horizon]).collect();
    Ok(Evaluation {
        name: predictor.name().to_string(),
        curve: mae_curve(&predictions, &truths)?,
        rmse: rmse(&predictions, &truths)?,
    })
}

/// Every predictor measured on the same windows against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub horizon: usize,
    pub windows: usize,
    pub baseline: String,
    pub evaluations: Vec<Evaluation>,
    /// Crossing index of every non-baseline predictor.
    pub crossings: BTreeMap<String, Option<usize>>,
}

impl Comparison {
    pub fn get(&self, name: &str) -> Option<&Evaluation> {
        self.evaluations.iter().find(|e| e.name == name)
    }

    pub fn rmse_table(&self) -> BTreeMap<String, RmseRow> {
        self.evaluations
            .iter()
            .map(|e| (e.name.clone(), e.rmse))
            .collect()
    }

    /// Writes `mae_<name>.csv` per predictor, `rmse.json` and `summary.json`.
    pub fn write(&self, dir: &Path, run_manifest: Option<&Path>) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for e in &self.evaluations {
            let path = dir.join(format!("mae_{}.csv", e.name));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            e.curve.write_csv(&mut f)?;
            f.flush()?;
            written.push(path);
        }
        let rmse_path = dir.join("rmse.json");
        std::fs::write(&rmse_path, serde_json::to_string_pretty(&self.rmse_table())?)?;
        written.push(rmse_path);

        let summary = serde_json::json!({
            "horizon": self.horizon,
            "windows": self.windows,
            "baseline": self.baseline,
            "crossing_index": self.crossings,
            "run_manifest": run_manifest.map(|p| p.display().to_string()),
        });
        let summary_path = dir.join("summary.json");
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
        written.push(summary_path);
        Ok(written)
    }
}

pub fn compare_predictors(
    predictors: &[&dyn Predictor],
    baseline: &dyn Predictor,
    windows: &[SequenceWindow],
    horizon: usize,
) -> Result<Comparison> {
    let base = evaluate(baseline, windows, horizon)?;
    let mut crossings = BTreeMap::new();
    let mut evaluations = vec![];
    for p in predictors {
        let e = evaluate(*p, windows, horizon)?;
        crossings.insert(e.name.clone(), crossing_index(&e.curve, &base.curve));
        evaluations.push(e);
    }
    let baseline_name = base.name.clone();
    evaluations.insert(0, base);
    Ok(Comparison {
        horizon,
        windows: windows.len(),
        baseline: baseline_name,
        evaluations,
        crossings,
    })
}
