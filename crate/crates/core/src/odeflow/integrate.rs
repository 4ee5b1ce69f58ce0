//! Explicit Euler integration of the flow.

use crate::error::{HmlError, Result};
use crate::gint::check_psd;
use crate::orderparams::Trajectory;

use super::eom::{assemble, eom_rhs, FlowState};
use super::generr::generalisation_error;

/// Default step: 10⁻²/η, reduced proportionally for δ < 0.04 where the
/// density equations become stiff (their rates scale as η/δ).
pub fn default_dt(eta: f64, delta: f64) -> f64 {
    1e-2 / eta * (25.0 * delta).min(1.0)
}

/// ε_g of a flow state.
pub fn state_error(state: &FlowState) -> Result<f64> {
    let (q, r, _) = assemble(state);
    generalisation_error(
        &q,
        &r,
        &state.t,
        &state.v,
        &state.v_tilde,
        state.student_activation,
        state.teacher_activation,
        None,
    )
}

fn euler(state: &FlowState, h: f64) -> Result<FlowState> {
    let d = eom_rhs(state)?;
    let mut next = state.clone();
    next.advance(&d, h);
    let finite = next.density.r.iter().chain(&next.density.sigma).all(|x| x.is_finite())
        && next.w.iter().all(|x| x.is_finite())
        && next.v.iter().all(|x| x.is_finite());
    if !finite {
        return Err(HmlError::DegenerateCovariance("non-finite state after step".into()));
    }
    let (q, _, _) = assemble(&next);
    check_psd(&q)?;
    Ok(next)
}

/// Upper bound on the number of Euler steps of one integration.
pub const MAX_STEPS: f64 = 1e9;

fn check_step(dt: f64, span: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(HmlError::InvalidArgument(format!("dt must be positive (got {dt})")));
    }
    if span / dt > MAX_STEPS {
        return Err(HmlError::InvalidArgument(format!("{span} time units at dt = {dt:e} exceed {MAX_STEPS:e} steps")));
    }
    Ok(())
}

/// Integrate from `initial` to `t_max`, landing exactly on every snapshot
/// time in `snapshots` (values beyond `t_max` are ignored).
///
/// A failed step halves dt for the rest of the run; a second failure aborts.
pub fn integrate(initial: &FlowState, dt: f64, t_max: f64, snapshots: &[f64]) -> Result<Trajectory> {
    check_step(dt, t_max - initial.time)?;
    let mut marks: Vec<f64> = snapshots.iter().copied().filter(|&t| t >= initial.time && t <= t_max).collect();
    marks.sort_by(f64::total_cmp);
    marks.dedup();
    let mut traj = Trajectory::default();
    let mut state = initial.clone();
    let mut dt = dt;
    let mut shrunk = false;
    for &target in &marks {
        while target - state.time > 1e-12 * target.max(1.0) {
            let h = dt.min(target - state.time);
            match euler(&state, h) {
                Ok(next) => state = next,
                Err(e) if e.is_numerical() && !shrunk => {
                    shrunk = true;
                    dt *= 0.5;
                }
                Err(e) if e.is_numerical() => {
                    return Err(HmlError::Integration { t: state.time, reason: format!("step of {h:e} failed after halving dt: {e}") });
                }
                Err(e) => return Err(e),
            }
        }
        state.time = target;
        let eps = state_error(&state)?;
        traj.push(target, eps, Some(eps), state.order_params());
    }
    Ok(traj)
}

/// Final state only. Same step-failure policy as [`integrate`].
pub fn integrate_to(initial: &FlowState, dt: f64, t_end: f64) -> Result<FlowState> {
    check_step(dt, t_end - initial.time)?;
    let mut state = initial.clone();
    let mut dt = dt;
    let mut shrunk = false;
    while t_end - state.time > 1e-12 * t_end.max(1.0) {
        let h = dt.min(t_end - state.time);
        match euler(&state, h) {
            Ok(next) => state = next,
            Err(e) if e.is_numerical() && !shrunk => {
                shrunk = true;
                dt *= 0.5;
            }
            Err(e) if e.is_numerical() => {
                return Err(HmlError::Integration { t: state.time, reason: format!("step of {h:e} failed after halving dt: {e}") });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(state)
}

/// Result of rerunning an integration at half the step size.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StepAudit {
    pub dt: f64,
    pub eps: f64,
    pub eps_half: f64,
    pub relative_change: f64,
}

/// Final ε_g at dt and dt/2.
pub fn dt_audit(initial: &FlowState, dt: f64, t_max: f64) -> Result<StepAudit> {
    let eps = state_error(&integrate_to(initial, dt, t_max)?)?;
    let eps_half = state_error(&integrate_to(initial, 0.5 * dt, t_max)?)?;
    Ok(StepAudit { dt, eps, eps_half, relative_change: (eps_half - eps).abs() / eps.abs().max(f64::MIN_POSITIVE) })
}
