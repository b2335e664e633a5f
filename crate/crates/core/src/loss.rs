//! Training objective: data fit, physics residual with slack, quaternion
//! unit-norm projection and slack magnitude.
//!
//! Every term is a sum over the prediction horizon for each window, then
//! averaged over the windows of the batch. Horizon step `j = n - M` starts
//! at 0.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::WindowBatch;
use crate::dynamics::graph::{quat_mul_const, step_graph, StepControls};
use crate::dynamics::{PhysicalParams, STATE_DIM};
use crate::error::{Error, Result};
use crate::seq2seq::PredictionGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Position, velocity, quaternion and load-position fit weights.
    pub lambda: [f64; 4],
    pub phi: f64,
    pub psi: f64,
    pub rho: f64,
    /// Decay rate of the fit weights.
    pub alpha: f64,
    /// Decay rate of the physics and slack weights.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [20.0; 4],
            phi: 5.0,
            psi: 10.0,
            rho: 0.1,
            alpha: 0.1,
            beta: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .lambda
            .iter()
            .chain([&self.phi, &self.psi, &self.rho, &self.alpha, &self.beta]);
        if all.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("loss decay rates alpha and beta must be > 0".into()));
        }
        Ok(())
    }

    /// Objective of the ablation trained without the physics and slack terms.
    pub fn without_physics(&self) -> Self {
        LossWeights {
            phi: 0.0,
            rho: 0.0,
            ..self.clone()
        }
    }

    /// Weight of fit terms at horizon step `j`.
    pub fn fit_decay(&self, j: usize) -> f64 {
        decay(self.alpha, j)
    }

    /// Weight of physics and slack terms at horizon step `j`.
    pub fn physics_decay(&self, j: usize) -> f64 {
        decay(self.beta, j)
    }
}

/// `e^{-rate·j}`.
pub fn decay(rate: f64, j: usize) -> f64 {
    (-rate * j as f64).exp()
}

/// Loss terms for one batch, batch-averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fit: f64,
    pub physics: f64,
    pub projection: f64,
    pub slack: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Running weighted mean, used to aggregate batches into an epoch value.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.fit += weight * other.fit;
        self.physics += weight * other.physics;
        self.projection += weight * other.projection;
        self.slack += weight * other.slack;
        self.total += weight * other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            fit: self.fit * s,
            physics: self.physics * s,
            projection: self.projection * s,
            slack: self.slack * s,
            total: self.total * s,
        }
    }
}

fn ones<'t>(tape: &'t Tape, rows: usize) -> Result<Var<'t>> {
    tape.constant(Tensor::filled(rows, 1, 1.0))
}

fn quat_columns(x: Var<'_>) -> Result<[Var<'_>; 4]> {
    Ok([x.col(6)?, x.col(7)?, x.col(8)?, x.col(9)?])
}

/// Per-row `Σ_c w_c d_c²` for the 13 state columns, summed over rows.
fn weighted_rows<'t>(diff: Var<'t>, col_weights: Var<'t>) -> Result<Var<'t>> {
    diff.mul(diff)?.matmul(col_weights)?.sum()
}

/// Σ_j e^{-αj} [λ1|p̂-p|² + λ2|v̂-v|² + λ3|e(q̂,q)|² + λ4|p̂L-pL|²]
pub fn fit_loss<'t>(states: &[Var<'t>], truth: &[Tensor], w: &LossWeights) -> Result<Var<'t>> {
    let tape = first(states)?.tape();
    if truth.len() < states.len() {
        return Err(Error::shape("fit_loss", &[states.len()], &[truth.len()]));
    }
    let b = states[0].dims().0;
    let mut cw = [0.0; STATE_DIM];
    cw[0..3].fill(w.lambda[0]);
    cw[3..6].fill(w.lambda[1]);
    cw[10..13].fill(w.lambda[3]);
    let col_weights = tape.constant(Tensor::column(&cw))?;
    let mut terms = Vec::with_capacity(states.len());
    for (j, (x, t)) in states.iter().zip(truth).enumerate() {
        if t.dims() != x.dims() {
            return Err(Error::shape("fit_loss", &[x.dims().0, x.dims().1], &[t.rows(), t.cols()]));
        }
        let target = tape.constant(t.clone())?;
        let euclid = weighted_rows(x.sub(target)?, col_weights)?;
        // q̂ ⊗ q⁻¹ with the (unit) truth inverted by conjugation.
        let conj: Vec<Var<'t>> = [1.0, -1.0, -1.0, -1.0]
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let col: Vec<f64> = (0..b).map(|i| s * t.get(i, 6 + c)).collect();
                tape.constant(Tensor::column(&col))
            })
            .collect::<Result<_>>()?;
        let e = quat_mul_const(quat_columns(*x)?, [conj[0], conj[1], conj[2], conj[3]])?;
        let quat = e[0]
            .add_scalar(-1.0)?
            .weighted_sq_norm(1.0)?
            .add(e[1].weighted_sq_norm(1.0)?)?
            .add(e[2].weighted_sq_norm(1.0)?)?
            .add(e[3].weighted_sq_norm(1.0)?)?
            .scale(w.lambda[2])?;
        terms.push(euclid.add(quat)?.scale(w.fit_decay(j) / b as f64)?);
    }
    sum_all(&terms)
}

/// φ Σ_j e^{-βj} |x̂_j - f(x̂_{j-1}, u_{j-1}, ΩL_{j-1}) + s_j|², where
/// `x̂_{-1}` is the last measured state and `ΩL` is propagated by `f` from
/// the batch's initial estimate. Gradients flow through `f`.
pub fn physics_loss<'t>(
    states: &[Var<'t>],
    slacks: Option<&[Var<'t>]>,
    batch: &WindowBatch,
    params: &PhysicalParams,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let tape = first(states)?.tape();
    if batch.decoder_controls.len() < states.len() {
        return Err(Error::shape(
            "physics_loss",
            &[states.len()],
            &[batch.decoder_controls.len()],
        ));
    }
    if let Some(s) = slacks {
        if s.len() != states.len() {
            return Err(Error::shape("physics_loss (slacks)", &[states.len()], &[s.len()]));
        }
    }
    let b = batch.size as f64;
    let mut prev = tape.constant(batch.last_state.clone())?;
    let mut omega = tape.constant(batch.omega_load.clone())?;
    let mut terms = Vec::with_capacity(states.len());
    for (j, x) in states.iter().enumerate() {
        let controls = StepControls::new(tape, &batch.decoder_controls[j], params)?;
        let (model, omega_next) =
            step_graph(prev, omega, &controls, params).map_err(|e| Error::at_step(j, e))?;
        let mut r = x.sub(model)?;
        if let Some(s) = slacks {
            r = r.add(s[j])?;
        }
        terms.push(r.weighted_sq_norm(w.phi * w.physics_decay(j) / b)?);
        prev = *x;
        omega = omega_next;
    }
    sum_all(&terms)
}

/// ψ Σ_j (1 - |q̂_j|)².
pub fn projection_loss<'t>(states: &[Var<'t>], w: &LossWeights) -> Result<Var<'t>> {
    let tape = first(states)?.tape();
    let b = states[0].dims().0;
    let sum4 = ones(tape, 4)?;
    let mut terms = Vec::with_capacity(states.len());
    for x in states {
        let q = x.cols(6..10)?;
        let norm = q.mul(q)?.matmul(sum4)?.sqrt()?;
        terms.push(norm.add_scalar(-1.0)?.weighted_sq_norm(w.psi / b as f64)?);
    }
    sum_all(&terms)
}

/// ρ Σ_j e^{-βj} |s_j|².
pub fn slack_loss<'t>(slacks: &[Var<'t>], w: &LossWeights) -> Result<Var<'t>> {
    let b = first(slacks)?.dims().0 as f64;
    let terms: Vec<Var<'t>> = slacks
        .iter()
        .enumerate()
        .map(|(j, s)| s.weighted_sq_norm(w.rho * w.physics_decay(j) / b))
        .collect::<Result<_>>()?;
    sum_all(&terms)
}

/// Sum of the four terms. Terms whose weight is zero are skipped (they are
/// reported as 0).
pub fn total_loss<'t>(
    pred: &PredictionGraph<'t>,
    batch: &WindowBatch,
    params: &PhysicalParams,
    w: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let states = &pred.states;
    let tape = first(states)?.tape();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let fit = fit_loss(states, &batch.truth, w)?;
    let physics = if w.phi > 0.0 {
        physics_loss(states, pred.slacks.as_deref(), batch, params, w)?
    } else {
        zero()?
    };
    let projection = if w.psi > 0.0 {
        projection_loss(states, w)?
    } else {
        zero()?
    };
    let slack = match &pred.slacks {
        Some(s) if w.rho > 0.0 => slack_loss(s, w)?,
        _ => zero()?,
    };
    let total = fit.add(physics)?.add(projection)?.add(slack)?;
    let breakdown = LossBreakdown {
        fit: fit.item(),
        physics: physics.item(),
        projection: projection.item(),
        slack: slack.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

fn first<'a, 't>(v: &'a [Var<'t>]) -> Result<&'a Var<'t>> {
    v.first()
        .ok_or_else(|| Error::shape("loss over an empty horizon", &[0], &[1]))
}

fn sum_all<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = *first(terms)?;
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(acc)
}
