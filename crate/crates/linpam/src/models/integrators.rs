//! Explicit time steppers: classical fixed-step RK4 and an adaptive
//! four-stage third-order strong-stability-preserving scheme with an
//! embedded second-order error estimate.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Hard floor for the adaptive step size; shrinking below it aborts with a
/// stiffness error instead of looping forever.
pub const DT_FLOOR: f64 = 1e-12;

/// One classical fourth-order Runge-Kutta step of size `dt`.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (dt / 2.0)));
    let k3 = f(&(x + &k2 * (dt / 2.0)));
    let k4 = f(&(x + &k3 * dt));
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowup);
    }
    Ok(next)
}

/// Result of one accepted adaptive step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: DVector<f64>,
    /// Step size actually taken (may be smaller than requested).
    pub dt_taken: f64,
    /// Controller suggestion for the next attempt.
    pub dt_next: f64,
}

/// One adaptive step of the four-stage third-order SSP Runge-Kutta method.
///
/// Shu-Osher form with coefficient 1/2 per stage and a 2/3-1/3 convex
/// recombination at stage three; the embedded second-order solution uses
/// equal weights 1/4, giving the error estimate
/// `dt * (k4/4 - (k1+k2+k3)/12)`. The requested `dt` is shrunk until the
/// weighted RMS error estimate drops below one; the accepted state, the
/// step taken, and a suggested next step are returned.
pub fn ssprk43_step<F>(
    f: F,
    x: &DVector<f64>,
    dt: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<StepOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if abs_tol <= 0.0 || rel_tol < 0.0 {
        return Err(Error::Config(format!(
            "tolerances must satisfy abs_tol > 0, rel_tol >= 0 (got {abs_tol}, {rel_tol})"
        )));
    }

    let mut dt_try = dt;
    loop {
        if dt_try < DT_FLOOR {
            return Err(Error::Stiffness { dt: dt_try, floor: DT_FLOOR });
        }
        let half = dt_try / 2.0;
        let k1 = f(x);
        let y1 = x + &k1 * half;
        let k2 = f(&y1);
        let y2 = &y1 + &k2 * half;
        let k3 = f(&y2);
        let y3 = x * (2.0 / 3.0) + (&y2 + &k3 * half) * (1.0 / 3.0);
        let k4 = f(&y3);
        let next = &y3 + &k4 * half;

        let err_vec = (&k4 * 0.25 - (&k1 + &k2 + &k3) * (1.0 / 12.0)) * dt_try;
        let mut acc = 0.0f64;
        let n = x.len().max(1);
        for i in 0..x.len() {
            let scale = abs_tol + rel_tol * x[i].abs().max(next[i].abs());
            let ratio = err_vec[i] / scale;
            acc += ratio * ratio;
        }
        let err = (acc / n as f64).sqrt();

        if err.is_finite() && err <= 1.0 && next.iter().all(|v| v.is_finite()) {
            // Third-order accepted solution, second-order estimator: the
            // estimate scales like dt^3, hence the 1/3 exponent.
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 5.0)
            };
            return Ok(StepOutcome {
                state: next,
                dt_taken: dt_try,
                dt_next: dt_try * factor,
            });
        }

        let factor = if err.is_finite() {
            (0.9 * err.powf(-1.0 / 3.0)).clamp(0.1, 0.5)
        } else {
            0.1
        };
        dt_try *= factor;
    }
}

/// Integrates `x' = f(x)` over exactly `t_total` with adaptive SSP steps,
/// clipping the final substep to land on the endpoint.
pub fn integrate_adaptive<F>(
    f: F,
    x0: &DVector<f64>,
    t_total: f64,
    abs_tol: f64,
    rel_tol: f64,
    dt_init: f64,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(t_total.is_finite() && t_total >= 0.0) {
        return Err(Error::Config(format!(
            "integration horizon must be nonnegative, got {t_total}"
        )));
    }
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut dt = dt_init.min(t_total);
    while t_total - t > 1e-14 * t_total.max(1.0) {
        let remaining = t_total - t;
        let out = ssprk43_step(&f, &x, dt.min(remaining), abs_tol, rel_tol)?;
        t += out.dt_taken;
        x = out.state;
        dt = out.dt_next;
    }
    Ok(x)
}
