//! Closed-loop synthetic flights.
//!
//! The plant is the discrete model of [`crate::dynamics::step`] plus effects
//! that model leaves out: linear drag on vehicle and load relative to a
//! constant wind, a downwash push on the load, re-tensioning of the cable
//! to its nominal length, and Gaussian measurement noise on the logged
//! state. A cascaded PD position controller closes the loop; its thrust
//! vector fixes the attitude setpoint (yaw held at zero) and a proportional
//! attitude loop produces body rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::flight_log::{FlightLog, LogRow};
use crate::dynamics::{
    cable_direction, step_detailed, ControlInput, LoadAngularVelocity,
    PhysicalParams, SystemState,
};
use crate::error::{Error, Result};
use crate::so3::{quat_to_rot, vee, Mat3, UnitQuat, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Vehicle drag coefficient (kg/s).
    pub drag_vehicle: f64,
    /// Load drag coefficient (kg/s).
    pub drag_load: f64,
    /// Constant wind velocity (m/s).
    pub wind: [f64; 3],
    /// Downward load acceleration per newton of thrust (m/s² per N).
    pub downwash: f64,
    /// Pull the load back to distance `ℓ` after every step.
    pub taut_projection: bool,
    /// Standard deviation of position noise on vehicle and load (m).
    pub noise_position: f64,
    /// Standard deviation of velocity noise (m/s).
    pub noise_velocity: f64,
    /// Standard deviation of the rotation-vector noise on the attitude (rad).
    pub noise_attitude: f64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig {
            drag_vehicle: 0.25,
            drag_load: 0.05,
            wind: [0.0; 3],
            downwash: 0.0,
            taut_projection: true,
            noise_position: 1e-3,
            noise_velocity: 5e-3,
            noise_attitude: 1e-3,
        }
    }
}

impl DisturbanceConfig {
    /// The plant equals the discrete model and measurements are exact.
    pub fn none() -> Self {
        DisturbanceConfig {
            drag_vehicle: 0.0,
            drag_load: 0.0,
            wind: [0.0; 3],
            downwash: 0.0,
            taut_projection: false,
            noise_position: 0.0,
            noise_velocity: 0.0,
            noise_attitude: 0.0,
        }
    }

    fn noiseless(&self) -> bool {
        self.noise_position == 0.0 && self.noise_velocity == 0.0 && self.noise_attitude == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    /// Tilt of the thrust axis against the cable's swing rate (s).
    pub swing_damping: f64,
    /// Body-rate magnitude limit (rad/s).
    pub max_rate: f64,
    /// Thrust limit as a multiple of hover thrust.
    pub max_thrust_ratio: f64,
    /// State-norm bound beyond which the flight counts as diverged.
    pub divergence_bound: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            position: 4.0,
            velocity: 3.0,
            attitude: 30.0,
            swing_damping: 0.1,
            max_rate: 20.0,
            max_thrust_ratio: 2.0,
            divergence_bound: 1e3,
        }
    }
}

/// Reference trajectories. Positions are offsets from the start point
/// (world frame, third axis down); all start at rest and blend in over
/// `ramp` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    Hover,
    Circle {
        radius: f64,
        period: f64,
        ramp: f64,
    },
    Lemniscate {
        size: f64,
        period: f64,
        ramp: f64,
    },
    Step {
        offset: [f64; 3],
        at: f64,
    },
}

impl Trajectory {
    pub fn name(&self) -> &'static str {
        match self {
            Trajectory::Hover => "hover",
            Trajectory::Circle { .. } => "circle",
            Trajectory::Lemniscate { .. } => "lemniscate",
            Trajectory::Step { .. } => "step",
        }
    }

    pub fn circle() -> Self {
        Trajectory::Circle {
            radius: 1.0,
            period: 6.0,
            ramp: 2.0,
        }
    }

    pub fn lemniscate() -> Self {
        Trajectory::Lemniscate {
            size: 1.2,
            period: 8.0,
            ramp: 2.0,
        }
    }

    pub fn step() -> Self {
        Trajectory::Step {
            offset: [1.0, 0.5, -0.5],
            at: 1.5,
        }
    }

    /// Reference position offset at time `t`.
    pub fn position(&self, t: f64) -> Vec3 {
        let blend = |ramp: f64| {
            if ramp <= 0.0 {
                1.0
            } else {
                let s = (t / ramp).clamp(0.0, 1.0);
                s * s * (3.0 - 2.0 * s)
            }
        };
        match *self {
            Trajectory::Hover => Vec3::ZERO,
            Trajectory::Circle {
                radius,
                period,
                ramp,
            } => {
                let a = std::f64::consts::TAU * t / period;
                Vec3::new(radius * (a.cos() - 1.0), radius * a.sin(), 0.0).scale(blend(ramp))
            }
            Trajectory::Lemniscate { size, period, ramp } => {
                let a = std::f64::consts::TAU * t / period;
                Vec3::new(size * a.sin(), 0.5 * size * (2.0 * a).sin(), 0.2 * size * a.sin())
                    .scale(blend(ramp))
            }
            Trajectory::Step { offset, at } => {
                if t >= at {
                    Vec3::from(offset)
                } else {
                    Vec3::ZERO
                }
            }
        }
    }

    /// Reference velocity and acceleration by central differences (zero for
    /// the step reference).
    fn derivatives(&self, t: f64) -> (Vec3, Vec3) {
        if matches!(self, Trajectory::Step { .. } | Trajectory::Hover) {
            return (Vec3::ZERO, Vec3::ZERO);
        }
        let e = 1e-4;
        let (a, b, c) = (self.position(t - e), self.position(t), self.position(t + e));
        ((c - a).scale(0.5 / e), (c - b.scale(2.0) + a).scale(1.0 / (e * e)))
    }
}

/// Attitude whose body `z` axis is `b3` with zero yaw.
fn attitude_from_axis(b3: Vec3) -> Mat3 {
    let heading = Vec3::new(1.0, 0.0, 0.0);
    let mut b2 = b3.cross(&heading);
    if b2.norm() < 1e-6 {
        b2 = b3.cross(&Vec3::new(0.0, 1.0, 0.0));
    }
    let b2 = b2.scale(1.0 / b2.norm());
    let b1 = b2.cross(&b3);
    Mat3::from_cols(b1, b2, b3)
}

struct Measurement {
    position: Option<Normal<f64>>,
    velocity: Option<Normal<f64>>,
    attitude: Option<Normal<f64>>,
}

impl Measurement {
    fn new(d: &DisturbanceConfig) -> Result<Self> {
        let mk = |s: f64| -> Result<Option<Normal<f64>>> {
            if s == 0.0 {
                Ok(None)
            } else {
                Normal::new(0.0, s)
                    .map(Some)
                    .map_err(|e| Error::Config(format!("noise sigma {s}: {e}")))
            }
        };
        Ok(Measurement {
            position: mk(d.noise_position)?,
            velocity: mk(d.noise_velocity)?,
            attitude: mk(d.noise_attitude)?,
        })
    }

    fn vec(n: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec3 {
        match n {
            Some(n) => Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)),
            None => Vec3::ZERO,
        }
    }

    fn apply(&self, x: &SystemState, rng: &mut ChaCha8Rng) -> SystemState {
        let dq = UnitQuat::from_rotation_vector(Measurement::vec(&self.attitude, rng));
        SystemState {
            p: x.p + Measurement::vec(&self.position, rng),
            v: x.v + Measurement::vec(&self.velocity, rng),
            q: crate::so3::quat_mul(x.q, dq).normalized(),
            p_load: x.p_load + Measurement::vec(&self.position, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub id: String,
    pub trajectory: Trajectory,
    /// Number of logged rows.
    pub rows: usize,
    pub seed: u64,
    /// Start position of the vehicle.
    pub start: [f64; 3],
}

/// Fly `spec.trajectory` for `spec.rows` samples and log the measured state,
/// applied controls and true load angular velocity.
pub fn generate_synthetic(
    params: &PhysicalParams,
    disturbance: &DisturbanceConfig,
    gains: &ControllerGains,
    spec: &SyntheticSpec,
) -> Result<FlightLog> {
    params.validate()?;
    let h = params.dt;
    let mq = params.mass_vehicle;
    let ml = params.mass_load;
    let ell = params.cable_length;
    let down = params.down();
    let wind = Vec3::from(disturbance.wind);
    let max_thrust = gains.max_thrust_ratio * params.hover_thrust();
    let origin = Vec3::from(spec.start);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Measurement::new(disturbance)?;

    let mut x = SystemState::hover(origin, params);
    let mut omega = LoadAngularVelocity(Vec3::ZERO);
    let mut rows = Vec::with_capacity(spec.rows);
    let diverged = |step| Error::ControllerDivergence {
        trajectory: spec.trajectory.name().to_string(),
        seed: spec.seed,
        step,
    };

    for k in 0..spec.rows {
        let t = k as f64 * h;
        let target = origin + spec.trajectory.position(t);
        let (ref_v, ref_a) = spec.trajectory.derivatives(t);
        let a_des = ref_a
            + (target - x.p).scale(gains.position)
            + (ref_v - x.v).scale(gains.velocity);

        // Vehicle acceleration is affine in the thrust vector f = T R e3:
        //   a = -f/mQ - (ξ·f) ξ/M + (M/mQ + 1) g e3 - c ξ,  c = (mQ/M) ℓ |ΩL|²
        // so the thrust vector for a_des follows from a rank-one inverse.
        let xi = cable_direction(&x, params).map_err(|_| diverged(k))?;
        let m = params.total_mass();
        let c = mq / m * ell * omega.0.norm_squared();
        let rhs = down.scale((m / mq + 1.0) * params.gravity) - xi.scale(c) - a_des;
        let r = mq / m;
        let force = (rhs - xi.scale(r * xi.dot(&rhs) / (1.0 + r * xi.norm_squared()))).scale(mq);
        let magnitude = force.norm();
        let b3 = if magnitude > 1e-9 {
            let swing = omega.0.cross(&xi);
            let axis = force.scale(1.0 / magnitude) - swing.scale(gains.swing_damping);
            axis.scale(1.0 / axis.norm())
        } else {
            down
        };
        let thrust = magnitude.min(max_thrust);

        let r = quat_to_rot(x.q);
        let r_des = attitude_from_axis(b3);
        let err = vee(&r_des.transpose().mul_mat(&r).sub(&r.transpose().mul_mat(&r_des))).scale(0.5);
        let mut rate = err.scale(-gains.attitude);
        if rate.norm() > gains.max_rate {
            rate = rate.scale(gains.max_rate / rate.norm());
        }
        let u = ControlInput::new(thrust, rate);

        let measured = if disturbance.noiseless() {
            x
        } else {
            noise.apply(&x, &mut rng)
        };
        rows.push(LogRow {
            t,
            state: measured,
            control: u,
            omega_load: Some(omega.0),
        });

        let detail = step_detailed(&x, &omega, &u, params).map_err(|_| diverged(k))?;
        let mut next = detail.next;
        let mut next_omega = detail.next_omega.0;

        let a_vehicle = (x.v - wind).scale(-disturbance.drag_vehicle / mq);
        let a_load = (detail.load_velocity - wind).scale(-disturbance.drag_load / ml)
            + down.scale(disturbance.downwash * thrust / ml);
        if a_vehicle != Vec3::ZERO || a_load != Vec3::ZERO {
            next.p += a_vehicle.scale(0.5 * h * h);
            next.v += a_vehicle.scale(h);
            next.p_load += a_load.scale(0.5 * h * h);
            let xi = detail.cable_direction;
            next_omega += xi.cross(&(a_load - a_vehicle)).scale(h / ell);
        }
        if disturbance.taut_projection {
            let offset = next.p_load - next.p;
            let len = offset.norm();
            if len > 1e-9 {
                next.p_load = next.p + offset.scale(ell / len);
            }
            // The axial component is not a swing rate of a taut cable.
            let xi = cable_direction(&next, params).map_err(|_| diverged(k))?;
            next_omega = next_omega - xi.scale(xi.dot(&next_omega));
        }

        let bound = gains.divergence_bound;
        let norm = next.to_vector().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(next.is_finite() && next_omega.is_finite()) || norm > bound {
            return Err(diverged(k + 1));
        }
        x = next;
        omega = LoadAngularVelocity(next_omega);
    }
    let mut log = FlightLog {
        id: spec.id.clone(),
        dt: h,
        rows,
    };
    log.enforce_sign_continuity();
    Ok(log)
}

/// A mixed set of flights with seeded trajectory parameters and lengths in
/// `rows` (inclusive).
pub fn synthetic_suite(count: usize, rows: (usize, usize), seed: u64) -> Vec<SyntheticSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let trajectory = match i % 4 {
                0 => Trajectory::Circle {
                    radius: rng.random_range(0.5..1.5),
                    period: rng.random_range(4.0..8.0),
                    ramp: 1.5,
                },
                1 => Trajectory::Lemniscate {
                    size: rng.random_range(0.6..1.6),
                    period: rng.random_range(5.0..10.0),
                    ramp: 1.5,
                },
                2 => Trajectory::Step {
                    offset: [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.5),
                    ],
                    at: rng.random_range(0.5..2.0),
                },
                _ => Trajectory::Hover,
            };
            SyntheticSpec {
                id: format!("flight_{i:03}_{}", trajectory.name()),
                trajectory,
                rows: rng.random_range(rows.0..=rows.1),
                seed: rng.random(),
                start: [0.0, 0.0, -1.5],
            }
        })
        .collect()
}
