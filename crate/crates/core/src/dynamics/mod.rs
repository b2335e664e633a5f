//! Discrete-time model of a quadrotor carrying a load on a taut cable.
//!
//! # Axis convention
//!
//! The world frame has `e3` pointing **down**, so gravity enters the load
//! acceleration as `+g e3` and the load hangs at `p + ℓ e3` in hover. The
//! rotors push along the body `-z` axis, so the thrust force in the world
//! frame is `f = -T R e3`. With that substitution the model reads
//!
//! ```text
//! ξ   = (pL - p) / ℓ
//! TL  = (mL / (mL + mQ)) T ξᵀ R e3 + (mL mQ / (mL + mQ)) ℓ |ΩL|²
//! u*  = -TL ξ / mL + g e3
//! ū   = -(T / mQ) R e3 + ((mQ + mL) / mQ) g e3
//! vL  = v + ℓ ΩL × ξ
//! pL' = pL + h vL + h²/2 u*
//! p'  = p + h v + h²/2 (ū + u*)
//! v'  = v + h (ū + u*)
//! R'  = R exp(h S(ω))
//! ΩL' = (1 - d) ΩL + h / (mQ ℓ) S(ξ) R T e3
//! ```
//!
//! In hover (`R = I`, `ξ = e3`, `T = (mQ + mL) g`, `ΩL = 0`) both virtual
//! inputs vanish and the state is a fixed point of [`step`].
//!
//! All auxiliary quantities are evaluated at the current step.

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{quat_mul, quat_to_rot, UnitQuat, Vec3};

/// Width of the flattened state vector `(p, v, q, pL)`.
pub const STATE_DIM: usize = 13;
/// Width of the flattened control vector `(T, ω)`.
pub const CONTROL_DIM: usize = 4;

/// Separation below which the cable direction is undefined.
const DEGENERATE_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisConvention {
    /// `e3` down, gravity `+g e3`, thrust force `-T R e3`.
    #[default]
    PaperAudited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalParams {
    /// Vehicle mass (kg).
    pub mass_vehicle: f64,
    /// Load mass (kg).
    pub mass_load: f64,
    /// Cable length (m).
    pub cable_length: f64,
    /// Load angular-velocity damping in `[0, 1]`.
    pub damping: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
    /// Sampling period (s).
    pub dt: f64,
    /// Allowed relative deviation of `|pL - p|` from `ℓ` before a state is
    /// reported as slack.
    pub taut_tolerance: f64,
    pub convention: AxisConvention,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            mass_vehicle: 1.4,
            mass_load: 0.1,
            cable_length: 0.6,
            damping: 0.02,
            gravity: 9.8,
            dt: 0.03,
            taut_tolerance: 0.05,
            convention: AxisConvention::PaperAudited,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass_vehicle", self.mass_vehicle),
            ("mass_load", self.mass_load),
            ("cable_length", self.cable_length),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::InvalidParams(format!(
                "damping must be in [0, 1], got {}",
                self.damping
            )));
        }
        if !(self.gravity.is_finite() && self.taut_tolerance >= 0.0) {
            return Err(Error::InvalidParams(
                "gravity must be finite and taut_tolerance >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_vehicle + self.mass_load
    }

    /// Thrust that balances the weight of vehicle and load.
    pub fn hover_thrust(&self) -> f64 {
        self.total_mass() * self.gravity
    }

    /// World-frame "down" axis.
    pub fn down(&self) -> Vec3 {
        match self.convention {
            AxisConvention::PaperAudited => Vec3::e3(),
        }
    }

    /// Thrust force in the world frame for body-axis `R e3 = body_z`.
    pub fn thrust_force(&self, thrust: f64, body_z: Vec3) -> Vec3 {
        match self.convention {
            AxisConvention::PaperAudited => body_z.scale(-thrust),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub p: Vec3,
    pub v: Vec3,
    pub q: UnitQuat,
    pub p_load: Vec3,
}

impl SystemState {
    /// Hover equilibrium at vehicle position `p` with the load hanging below.
    pub fn hover(p: Vec3, params: &PhysicalParams) -> Self {
        SystemState {
            p,
            v: Vec3::ZERO,
            q: UnitQuat::identity(),
            p_load: p + params.down().scale(params.cable_length),
        }
    }

    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[0..3].copy_from_slice(&self.p.to_array());
        out[3..6].copy_from_slice(&self.v.to_array());
        out[6..10].copy_from_slice(&self.q.to_array());
        out[10..13].copy_from_slice(&self.p_load.to_array());
        out
    }

    pub fn from_slice(a: &[f64]) -> Self {
        assert!(a.len() >= STATE_DIM, "state slice too short");
        SystemState {
            p: Vec3::new(a[0], a[1], a[2]),
            v: Vec3::new(a[3], a[4], a[5]),
            q: UnitQuat::new(a[6], a[7], a[8], a[9]),
            p_load: Vec3::new(a[10], a[11], a[12]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.v.is_finite() && self.q.is_finite() && self.p_load.is_finite()
    }

    /// Whether the cable length is within the taut tolerance of `ℓ`.
    pub fn is_taut(&self, params: &PhysicalParams) -> bool {
        let sep = (self.p_load - self.p).norm();
        (sep - params.cable_length).abs() <= params.taut_tolerance * params.cable_length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Total rotor thrust (N).
    pub thrust: f64,
    /// Body angular rates (rad/s).
    pub omega: Vec3,
}

impl ControlInput {
    pub fn new(thrust: f64, omega: Vec3) -> Self {
        ControlInput { thrust, omega }
    }

    pub fn hover(params: &PhysicalParams) -> Self {
        ControlInput::new(params.hover_thrust(), Vec3::ZERO)
    }

    pub fn to_vector(&self) -> [f64; CONTROL_DIM] {
        [self.thrust, self.omega.x, self.omega.y, self.omega.z]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        ControlInput::new(a[0], Vec3::new(a[1], a[2], a[3]))
    }
}

/// Angular velocity of the load about the vehicle, `ΩL`. Not measured.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadAngularVelocity(pub Vec3);

/// All intermediate quantities of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDetail {
    pub cable_direction: Vec3,
    pub tension: f64,
    pub load_input: Vec3,
    pub vehicle_input: Vec3,
    pub load_velocity: Vec3,
    pub next_load_velocity: Vec3,
    pub next: SystemState,
    pub next_omega: LoadAngularVelocity,
}

pub fn cable_direction(x: &SystemState, params: &PhysicalParams) -> Result<Vec3> {
    let d = x.p_load - x.p;
    let separation = d.norm();
    if !(separation >= DEGENERATE_SEPARATION) {
        return Err(Error::DegenerateState { separation });
    }
    Ok(d.scale(1.0 / params.cable_length))
}

pub fn cable_tension(
    x: &SystemState,
    omega_l: &LoadAngularVelocity,
    u: &ControlInput,
    params: &PhysicalParams,
) -> Result<f64> {
    let xi = cable_direction(x, params)?;
    Ok(tension_from(xi, x.q, omega_l, u, params))
}

fn tension_from(
    xi: Vec3,
    q: UnitQuat,
    omega_l: &LoadAngularVelocity,
    u: &ControlInput,
    params: &PhysicalParams,
) -> f64 {
    let ml = params.mass_load;
    let mq = params.mass_vehicle;
    let m = ml + mq;
    let force = params.thrust_force(u.thrust, quat_to_rot(q).col(2));
    -(ml / m) * xi.dot(&force) + (ml * mq / m) * params.cable_length * omega_l.0.norm_squared()
}

fn load_input_from(xi: Vec3, tension: f64, params: &PhysicalParams) -> Vec3 {
    params.down().scale(params.gravity) - xi.scale(tension / params.mass_load)
}

/// Load acceleration `u*`.
pub fn load_virtual_input(
    x: &SystemState,
    omega_l: &LoadAngularVelocity,
    u: &ControlInput,
    params: &PhysicalParams,
) -> Result<Vec3> {
    let xi = cable_direction(x, params)?;
    let tension = tension_from(xi, x.q, omega_l, u, params);
    Ok(load_input_from(xi, tension, params))
}

/// Vehicle acceleration contribution `ū`; the vehicle accelerates by `ū + u*`.
pub fn quad_virtual_input(x: &SystemState, u: &ControlInput, params: &PhysicalParams) -> Vec3 {
    let mq = params.mass_vehicle;
    let force = params.thrust_force(u.thrust, quat_to_rot(x.q).col(2));
    force.scale(1.0 / mq) + params.down().scale(params.total_mass() / mq * params.gravity)
}

/// One transition with every intermediate quantity exposed.
pub fn step_detailed(
    x: &SystemState,
    omega_l: &LoadAngularVelocity,
    u: &ControlInput,
    params: &PhysicalParams,
) -> Result<StepDetail> {
    let h = params.dt;
    let xi = cable_direction(x, params)?;
    let tension = tension_from(xi, x.q, omega_l, u, params);
    let u_star = load_input_from(xi, tension, params);
    let u_bar = quad_virtual_input(x, u, params);
    let v_load = x.v + omega_l.0.cross(&xi).scale(params.cable_length);

    let a_vehicle = u_bar + u_star;
    let p_load = x.p_load + v_load.scale(h) + u_star.scale(0.5 * h * h);
    let p = x.p + x.v.scale(h) + a_vehicle.scale(0.5 * h * h);
    let v = x.v + a_vehicle.scale(h);
    let q = quat_mul(x.q, UnitQuat::from_rotation_vector(u.omega.scale(h))).normalized();

    let body_z_thrust = quat_to_rot(x.q).col(2).scale(u.thrust);
    let forcing = xi
        .cross(&body_z_thrust)
        .scale(h / (params.mass_vehicle * params.cable_length));
    let omega_next = omega_l.0.scale(1.0 - params.damping) + forcing;

    Ok(StepDetail {
        cable_direction: xi,
        tension,
        load_input: u_star,
        vehicle_input: u_bar,
        load_velocity: v_load,
        next_load_velocity: v_load + u_star.scale(h),
        next: SystemState { p, v, q, p_load },
        next_omega: LoadAngularVelocity(omega_next),
    })
}

/// The transition `x_{k+1} = f(x_k, u_k, ΩL_k)`, also returning `ΩL_{k+1}`.
pub fn step(
    x: &SystemState,
    omega_l: &LoadAngularVelocity,
    u: &ControlInput,
    params: &PhysicalParams,
) -> Result<(SystemState, LoadAngularVelocity)> {
    let d = step_detailed(x, omega_l, u, params)?;
    Ok((d.next, d.next_omega))
}

/// Open-loop prediction: one output state per control.
pub fn rollout(
    x0: &SystemState,
    omega_l0: &LoadAngularVelocity,
    controls: &[ControlInput],
    params: &PhysicalParams,
) -> Result<Vec<SystemState>> {
    if controls.is_empty() {
        return Err(Error::InvalidParams(
            "rollout needs at least one control".into(),
        ));
    }
    let mut out = Vec::with_capacity(controls.len());
    let mut x = *x0;
    let mut omega = *omega_l0;
    let mut slack_at = None;
    for (k, u) in controls.iter().enumerate() {
        let (next, next_omega) =
            step(&x, &omega, u, params).map_err(|e| Error::at_step(k, e))?;
        if slack_at.is_none() && !next.is_taut(params) {
            slack_at = Some(k);
        }
        out.push(next);
        x = next;
        omega = next_omega;
    }
    if let Some(k) = slack_at {
        log::debug!("rollout: cable length outside taut tolerance from step {k}");
    }
    Ok(out)
}

/// Indices of states whose cable length leaves the taut tolerance.
pub fn taut_violations(states: &[SystemState], params: &PhysicalParams) -> Vec<usize> {
    states
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_taut(params))
        .map(|(i, _)| i)
        .collect()
}

/// Finite-difference estimate `ξ_k × (ξ_{k+1} − ξ_k) / h`.
///
/// Only the component perpendicular to the cable is observable; the axial
/// component is zero.
pub fn estimate_load_angular_velocity(
    x_k: &SystemState,
    x_next: &SystemState,
    params: &PhysicalParams,
) -> Result<LoadAngularVelocity> {
    let xi = cable_direction(x_k, params)?;
    let xi_next = cable_direction(x_next, params)?;
    Ok(LoadAngularVelocity(
        xi.cross(&(xi_next - xi)).scale(1.0 / params.dt),
    ))
}
