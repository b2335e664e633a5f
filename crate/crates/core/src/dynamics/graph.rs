//! The transition of [`super::step`] recorded on a gradient tape, batched
//! over rows: states are `B x 13`, load angular velocities `B x 3`.
//!
//! The orientation is propagated as `q ⊗ exp(hω/2)` without
//! re-normalization, and the body axis `R e3` uses the homogeneous
//! quadratic form, so a non-unit `q` stays visible to the projection loss.

use super::{ControlInput, PhysicalParams, STATE_DIM};
use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::so3::UnitQuat;

/// Three `B x 1` columns.
#[derive(Clone, Copy)]
struct Col3<'t>([Var<'t>; 3]);

impl<'t> Col3<'t> {
    fn split(v: Var<'t>, start: usize) -> Result<Self> {
        Ok(Col3([v.col(start)?, v.col(start + 1)?, v.col(start + 2)?]))
    }

    fn zip(self, o: Col3<'t>, f: impl Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<Self> {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        Ok(Col3([f(a0, b0)?, f(a1, b1)?, f(a2, b2)?]))
    }

    fn map(self, f: impl Fn(Var<'t>) -> Result<Var<'t>>) -> Result<Self> {
        let [a0, a1, a2] = self.0;
        Ok(Col3([f(a0)?, f(a1)?, f(a2)?]))
    }

    fn add(self, o: Col3<'t>) -> Result<Self> {
        self.zip(o, |a, b| a.add(b))
    }

    fn sub(self, o: Col3<'t>) -> Result<Self> {
        self.zip(o, |a, b| a.sub(b))
    }

    fn scale(self, s: f64) -> Result<Self> {
        self.map(|a| a.scale(s))
    }

    /// Multiply every component by a `B x 1` column.
    fn times(self, c: Var<'t>) -> Result<Self> {
        self.map(|a| a.mul(c))
    }

    fn dot(self, o: Col3<'t>) -> Result<Var<'t>> {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        a0.mul(b0)?.add(a1.mul(b1)?)?.add(a2.mul(b2)?)
    }

    fn cross(self, o: Col3<'t>) -> Result<Self> {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        Ok(Col3([
            a1.mul(b2)?.sub(a2.mul(b1)?)?,
            a2.mul(b0)?.sub(a0.mul(b2)?)?,
            a0.mul(b1)?.sub(a1.mul(b0)?)?,
        ]))
    }

    fn join(self) -> Result<Var<'t>> {
        concat(&self.0, 1)
    }
}

/// Body `z` axis `R(q) e3` in homogeneous form (scales with `|q|²`).
fn body_z<'t>(q: [Var<'t>; 4]) -> Result<Col3<'t>> {
    let [w, x, y, z] = q;
    let c0 = x.mul(z)?.add(w.mul(y)?)?.scale(2.0)?;
    let c1 = y.mul(z)?.sub(w.mul(x)?)?.scale(2.0)?;
    let c2 = w
        .mul(w)?
        .sub(x.mul(x)?)?
        .sub(y.mul(y)?)?
        .add(z.mul(z)?)?;
    Ok(Col3([c0, c1, c2]))
}

/// Hamilton product with a constant right factor given as four columns.
pub(crate) fn quat_mul_const<'t>(a: [Var<'t>; 4], b: [Var<'t>; 4]) -> Result<[Var<'t>; 4]> {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    let w = aw.mul(bw)?.sub(ax.mul(bx)?)?.sub(ay.mul(by)?)?.sub(az.mul(bz)?)?;
    let x = aw.mul(bx)?.add(ax.mul(bw)?)?.add(ay.mul(bz)?)?.sub(az.mul(by)?)?;
    let y = aw.mul(by)?.sub(ax.mul(bz)?)?.add(ay.mul(bw)?)?.add(az.mul(bx)?)?;
    let z = aw.mul(bz)?.add(ax.mul(by)?)?.sub(ay.mul(bx)?)?.add(az.mul(bw)?)?;
    Ok([w, x, y, z])
}

/// Per-row constants derived from the controls of one step.
pub struct StepControls<'t> {
    thrust: Var<'t>,
    rotation: [Var<'t>; 4],
}

impl<'t> StepControls<'t> {
    pub fn new(tape: &'t Tape, controls: &[ControlInput], params: &PhysicalParams) -> Result<Self> {
        let thrust: Vec<f64> = controls.iter().map(|u| u.thrust).collect();
        let dq: Vec<UnitQuat> = controls
            .iter()
            .map(|u| UnitQuat::from_rotation_vector(u.omega.scale(params.dt)))
            .collect();
        let col = |f: fn(&UnitQuat) -> f64| -> Result<Var<'t>> {
            tape.constant(Tensor::column(&dq.iter().map(f).collect::<Vec<_>>()))
        };
        Ok(StepControls {
            thrust: tape.constant(Tensor::column(&thrust))?,
            rotation: [col(|q| q.w)?, col(|q| q.x)?, col(|q| q.y)?, col(|q| q.z)?],
        })
    }
}

/// Differentiable `f(x, u, ΩL)` for a batch. Returns `(x', ΩL')`.
pub fn step_graph<'t>(
    x: Var<'t>,
    omega_l: Var<'t>,
    u: &StepControls<'t>,
    params: &PhysicalParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let (b, w) = x.dims();
    if w != STATE_DIM || omega_l.dims() != (b, 3) || u.thrust.dims() != (b, 1) {
        return Err(Error::shape("step_graph", &[b, w], &[omega_l.dims().0, omega_l.dims().1]));
    }
    let h = params.dt;
    let ell = params.cable_length;
    let (ml, mq) = (params.mass_load, params.mass_vehicle);
    let m = ml + mq;
    let g = params.gravity;

    let p = Col3::split(x, 0)?;
    let v = Col3::split(x, 3)?;
    let q = [x.col(6)?, x.col(7)?, x.col(8)?, x.col(9)?];
    let pl = Col3::split(x, 10)?;
    let omega = Col3::split(omega_l, 0)?;

    let xi = pl.sub(p)?.scale(1.0 / ell)?;
    let bz = body_z(q)?;
    let thrust_axis = bz.times(u.thrust)?;

    let tension = xi
        .dot(thrust_axis)?
        .scale(ml / m)?
        .add(omega.dot(omega)?.scale(ml * mq / m * ell)?)?;

    // u* = g e3 - TL ξ / mL
    let pull = xi.times(tension)?.scale(-1.0 / ml)?;
    let u_star = Col3([pull.0[0], pull.0[1], pull.0[2].add_scalar(g)?]);
    // ū = -(T/mQ) R e3 + (M/mQ) g e3
    let push = thrust_axis.scale(-1.0 / mq)?;
    let u_bar = Col3([push.0[0], push.0[1], push.0[2].add_scalar(m / mq * g)?]);

    let v_load = v.add(omega.cross(xi)?.scale(ell)?)?;
    let accel = u_bar.add(u_star)?;

    let pl_next = pl.add(v_load.scale(h)?)?.add(u_star.scale(0.5 * h * h)?)?;
    let p_next = p.add(v.scale(h)?)?.add(accel.scale(0.5 * h * h)?)?;
    let v_next = v.add(accel.scale(h)?)?;
    let q_next = quat_mul_const(q, u.rotation)?;

    let omega_next = omega
        .scale(1.0 - params.damping)?
        .add(xi.cross(thrust_axis)?.scale(h / (mq * ell))?)?;

    let mut cols = Vec::with_capacity(STATE_DIM);
    cols.extend(p_next.0);
    cols.extend(v_next.0);
    cols.extend(q_next);
    cols.extend(pl_next.0);
    Ok((concat(&cols, 1)?, omega_next.join()?))
}
