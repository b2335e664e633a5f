use serde::{Deserialize, Serialize};

use super::flight_log::FlightLog;
use crate::autodiff::Tensor;
use crate::dynamics::{
    estimate_load_angular_velocity, ControlInput, PhysicalParams, SystemState, CONTROL_DIM,
    STATE_DIM,
};
use crate::error::{Error, Result};
use crate::so3::Vec3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSource {
    pub log_id: String,
    pub start: usize,
}

/// `M` measured (state, control) pairs followed by `N` future steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceWindow {
    pub history: Vec<(SystemState, ControlInput)>,
    /// Controls `u_M … u_{M+N-1}`, aligned with `future_truth`.
    pub future_controls: Vec<ControlInput>,
    /// States `x_M … x_{M+N-1}`.
    pub future_truth: Vec<SystemState>,
    /// Load angular velocity at step `M-1`: the logged value when the log
    /// carries one, otherwise a backward difference over the last two
    /// history frames.
    pub omega_load: Vec3,
    pub source: WindowSource,
}

impl SequenceWindow {
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn horizon(&self) -> usize {
        self.future_truth.len()
    }

    pub fn last_state(&self) -> SystemState {
        self.history.last().expect("non-empty history").0
    }

    /// Controls consumed by a recursive predictor, `u_{M-1} … u_{M+n-2}`.
    pub fn decoder_controls(&self, n: usize) -> Result<Vec<ControlInput>> {
        if n == 0 || n > self.future_controls.len() + 1 {
            return Err(Error::Data(format!(
                "window {}@{} cannot drive {n} steps",
                self.source.log_id, self.source.start
            )));
        }
        let mut out = Vec::with_capacity(n);
        out.push(self.history.last().expect("non-empty history").1);
        out.extend_from_slice(&self.future_controls[..n - 1]);
        Ok(out)
    }
}

/// Sliding windows of `history + horizon` rows at the given stride.
pub fn make_windows(
    log: &FlightLog,
    history: usize,
    horizon: usize,
    stride: usize,
    params: &PhysicalParams,
) -> Result<Vec<SequenceWindow>> {
    if history == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Data(format!(
            "need history, horizon and stride >= 1 (got {history}, {horizon}, {stride})"
        )));
    }
    let span = history + horizon;
    if log.len() < span {
        log::warn!(
            "log {} has {} rows, shorter than one window ({span}); no windows produced",
            log.id,
            log.len()
        );
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity((log.len() - span) / stride + 1);
    for start in (0..=log.len() - span).step_by(stride) {
        let rows = &log.rows[start..start + span];
        let last = &rows[history - 1];
        let omega_load = match last.omega_load {
            Some(w) => w,
            None if history < 2 => {
                return Err(Error::Data(format!(
                    "log {} has no load angular velocity and history {history} is too short to estimate it",
                    log.id
                )))
            }
            None => {
                estimate_load_angular_velocity(&rows[history - 2].state, &last.state, params)
                    .map_err(|e| Error::Data(format!("log {} row {}: {e}", log.id, start + history - 1)))?
                    .0
            }
        };
        out.push(SequenceWindow {
            history: rows[..history].iter().map(|r| (r.state, r.control)).collect(),
            future_controls: rows[history..].iter().map(|r| r.control).collect(),
            future_truth: rows[history..].iter().map(|r| r.state).collect(),
            omega_load,
            source: WindowSource {
                log_id: log.id.clone(),
                start,
            },
        });
    }
    Ok(out)
}

/// Windows stacked row-wise for batched evaluation: every tensor has one row
/// per window.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub size: usize,
    /// `M` tensors of `B x 13`.
    pub history_states: Vec<Tensor>,
    /// `M` tensors of `B x 4`.
    pub history_controls: Vec<Tensor>,
    /// `x_{M-1}`, `B x 13`.
    pub last_state: Tensor,
    /// Per decoder step `j`, the controls `u_{M-1+j}` of every window.
    pub decoder_controls: Vec<Vec<ControlInput>>,
    /// `B x 4` tensors matching `decoder_controls`.
    pub decoder_control_tensors: Vec<Tensor>,
    /// `horizon` tensors of `B x 13`.
    pub truth: Vec<Tensor>,
    /// `ΩL_{M-1}`, `B x 3`.
    pub omega_load: Tensor,
}

impl WindowBatch {
    pub fn new(windows: &[&SequenceWindow], horizon: usize) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let m = first.history_len();
        for w in windows {
            if w.history_len() != m || w.horizon() < horizon {
                return Err(Error::Data(format!(
                    "window {}@{} does not fit batch (history {}, horizon {} < {horizon})",
                    w.source.log_id,
                    w.source.start,
                    w.history_len(),
                    w.horizon()
                )));
            }
        }
        let b = windows.len();
        let stack = |f: &dyn Fn(&SequenceWindow) -> Vec<f64>, cols: usize| -> Tensor {
            let mut data = Vec::with_capacity(b * cols);
            for w in windows {
                data.extend(f(w));
            }
            Tensor::matrix(b, cols, data).expect("batch shape")
        };
        let history_states = (0..m)
            .map(|k| stack(&|w| w.history[k].0.to_vector().to_vec(), STATE_DIM))
            .collect();
        let history_controls = (0..m)
            .map(|k| stack(&|w| w.history[k].1.to_vector().to_vec(), CONTROL_DIM))
            .collect();
        let per_window: Vec<Vec<ControlInput>> = windows
            .iter()
            .map(|w| w.decoder_controls(horizon))
            .collect::<Result<_>>()?;
        let decoder_controls: Vec<Vec<ControlInput>> = (0..horizon)
            .map(|j| per_window.iter().map(|c| c[j]).collect())
            .collect();
        let decoder_control_tensors = decoder_controls
            .iter()
            .map(|step| {
                let rows: Vec<[f64; CONTROL_DIM]> = step.iter().map(|u| u.to_vector()).collect();
                Tensor::from_rows(&rows).expect("control rows")
            })
            .collect();
        let truth = (0..horizon)
            .map(|n| stack(&|w| w.future_truth[n].to_vector().to_vec(), STATE_DIM))
            .collect();
        Ok(WindowBatch {
            size: b,
            history_states,
            history_controls,
            last_state: stack(&|w| w.last_state().to_vector().to_vec(), STATE_DIM),
            decoder_controls,
            decoder_control_tensors,
            truth,
            omega_load: stack(&|w| w.omega_load.to_array().to_vec(), 3),
        })
    }

    pub fn history_len(&self) -> usize {
        self.history_states.len()
    }

    pub fn horizon(&self) -> usize {
        self.truth.len()
    }
}
