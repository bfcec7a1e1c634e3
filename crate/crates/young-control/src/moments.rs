//! Deterministic mean/covariance propagation under a linearized Gaussian
//! closure: the drift is evaluated at the mean, its Jacobian transports the
//! covariance, and the three-level control contributes diffusion
//! `(mu + nu) M_Y^{2 alpha}` per channel. This gives the optimizer a cheap
//! surrogate for the Monte Carlo objective.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Horizon, MeasureSchedule, NoiseSpec, SystemModel};

/// Mean and covariance of the state at one time step.
#[derive(Clone, Debug)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentState {
    /// Deterministic initial condition: zero covariance.
    pub fn deterministic(x0: DVector<f64>) -> Self {
        let n = x0.len();
        Self { mean: x0, cov: DMatrix::zeros(n, n) }
    }
}

/// Symmetrize and clip tiny negative eigenvalues so the covariance stays
/// numerically PSD (eigenvalues >= -1e-10 tolerated, projected to 0).
pub fn project_psd(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|l| *l >= 0.0) {
        return sym;
    }
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let q = eig.eigenvectors;
    let rebuilt = &q * DMatrix::from_diagonal(&vals) * q.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

/// One Euler step of the mean: `mean' = mean + dt (a(mean,t) + b(mean,t)
/// lambda)` with `lambda_j = (mu_j - nu_j) M_Y` (first-order closure
/// `E[g(x)] ~ g(E x)`).
pub fn propagate_mean(
    model: &SystemModel,
    noise: &NoiseSpec,
    state: &MomentState,
    weights: &[(f64, f64)],
    t: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    let a = (model.drift)(&state.mean, t);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite drift at t = {t}")));
    }
    let b = (model.gain)(&state.mean, t);
    let lambda =
        DVector::from_iterator(model.control_dim, weights.iter().map(|(mu, nu)| (mu - nu) * noise.m_y));
    Ok(&state.mean + (a + b * lambda) * dt)
}

/// One Euler step of the covariance under the Jacobian closure:
/// `cov' = cov + dt (J cov + cov J^T) + dt sum_j b_j b_j^T kappa_j^2
/// (mu_j + nu_j) M_Y^{2 alpha}`, symmetrized and PSD-projected.
pub fn propagate_cov(
    model: &SystemModel,
    noise: &NoiseSpec,
    state: &MomentState,
    weights: &[(f64, f64)],
    t: f64,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let jac = drift_plus_gain_jacobian(model, noise, state, weights, t);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite drift Jacobian at t = {t}")));
    }
    let b = (model.gain)(&state.mean, t);
    let m_pow = noise.m_y.powf(2.0 * noise.alpha);
    let mut next = &state.cov + (&jac * &state.cov + &state.cov * jac.transpose()) * dt;
    for (j, (mu, nu)) in weights.iter().enumerate() {
        let intensity = noise.kappa[j] * noise.kappa[j] * (mu + nu) * m_pow;
        if intensity == 0.0 {
            continue;
        }
        let col = b.column(j);
        for r in 0..model.state_dim {
            for c in 0..model.state_dim {
                next[(r, c)] += dt * intensity * col[r] * col[c];
            }
        }
    }
    Ok(project_psd(&next))
}

/// State-Jacobian of the full drift `A(x) = a(x) + b(x) lambda` at the mean.
/// The `a` part uses the model's Jacobian (analytic or finite-difference);
/// the `b lambda` part is finite-differenced only when lambda is nonzero.
fn drift_plus_gain_jacobian(
    model: &SystemModel,
    noise: &NoiseSpec,
    state: &MomentState,
    weights: &[(f64, f64)],
    t: f64,
) -> DMatrix<f64> {
    let lambda =
        DVector::from_iterator(model.control_dim, weights.iter().map(|(mu, nu)| (mu - nu) * noise.m_y));
    let mut jac = model.drift_jac(&state.mean, t);
    if lambda.iter().any(|l| *l != 0.0) {
        let gain = &model.gain;
        let extra = crate::model::fd_jacobian(model.state_dim, &state.mean, |x| gain(x, t) * &lambda);
        jac += extra;
    }
    jac
}

/// Per-time objective statistics from a forward moment sweep.
#[derive(Clone, Debug)]
pub struct MomentSweep {
    pub times: Vec<f64>,
    pub states: Vec<MomentState>,
    /// First-order objective mean `phi(mean, t)`.
    pub phi_mean: Vec<DVector<f64>>,
    /// Delta-method objective variance `diag(Jphi cov Jphi^T)`.
    pub phi_var: Vec<DVector<f64>>,
    /// Trapezoidal `int_T^{T+R} sum_i var(phi_i) dt`.
    pub hold_variance: f64,
}

impl MomentSweep {
    /// CSV matching the ensemble schema: `t,mean_1..mean_k,var_1..var_k`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let k = self.phi_mean[0].len();
        let mut out = String::from("t");
        for c in 0..k {
            let _ = write!(out, ",mean_{}", c + 1);
        }
        for c in 0..k {
            let _ = write!(out, ",var_{}", c + 1);
        }
        out.push('\n');
        for (ti, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t:.9e}");
            for c in 0..k {
                let _ = write!(out, ",{:.17e}", self.phi_mean[ti][c]);
            }
            for c in 0..k {
                let _ = write!(out, ",{:.17e}", self.phi_var[ti][c]);
            }
            out.push('\n');
        }
        out
    }
}

/// Full forward sweep over the horizon at `dt_integrate` under a schedule.
pub fn propagate_horizon(
    model: &SystemModel,
    noise: &NoiseSpec,
    horizon: &Horizon,
    schedule: &MeasureSchedule,
    x0: &DVector<f64>,
) -> Result<MomentSweep> {
    let steps_per_bin = horizon.steps_per_bin()?;
    let n_steps = horizon.num_steps();
    if schedule.bins * steps_per_bin < n_steps {
        return Err(Error::Config("schedule does not cover the horizon".into()));
    }
    let mut state = MomentState::deterministic(x0.clone());
    let mut sweep = MomentSweep {
        times: Vec::with_capacity(n_steps + 1),
        states: Vec::with_capacity(n_steps + 1),
        phi_mean: Vec::with_capacity(n_steps + 1),
        phi_var: Vec::with_capacity(n_steps + 1),
        hold_variance: 0.0,
    };
    record(model, &state, 0.0, &mut sweep);
    let mut weights = vec![(0.0, 0.0); model.control_dim];
    for i in 0..n_steps {
        let t = i as f64 * horizon.dt_integrate;
        let bin = (i / steps_per_bin).min(schedule.bins - 1);
        for (j, w) in weights.iter_mut().enumerate() {
            *w = (schedule.weights_pos[(j, bin)], schedule.weights_neg[(j, bin)]);
        }
        let mean = propagate_mean(model, noise, &state, &weights, t, horizon.dt_integrate)?;
        let cov = propagate_cov(model, noise, &state, &weights, t, horizon.dt_integrate)?;
        state = MomentState { mean, cov };
        if !model.inside(&state.mean) {
            return Err(Error::Escape { t: t + horizon.dt_integrate, state: state.mean });
        }
        record(model, &state, t + horizon.dt_integrate, &mut sweep);
    }
    // Trapezoidal accumulation of the total phi-variance over [T, T+R].
    let start = horizon.hold_start_step();
    let totals: Vec<f64> = sweep.phi_var.iter().map(|v| v.sum()).collect();
    for i in start..totals.len() - 1 {
        sweep.hold_variance += 0.5 * (totals[i] + totals[i + 1]) * horizon.dt_integrate;
    }
    Ok(sweep)
}

fn record(model: &SystemModel, state: &MomentState, t: f64, sweep: &mut MomentSweep) {
    let phi = (model.objective)(&state.mean, t);
    let jphi = model.objective_jac(&state.mean, t);
    let prop = &jphi * &state.cov * jphi.transpose();
    let var = DVector::from_iterator(model.objective_dim, (0..model.objective_dim).map(|i| prop[(i, i)].max(0.0)));
    sweep.times.push(t);
    sweep.phi_mean.push(phi);
    sweep.phi_var.push(var);
    sweep.states.push(state.clone());
}
