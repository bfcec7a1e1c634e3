//! Closed-form reference solutions for the scalar plant `dx/dt = px + qu`
//! with signal-dependent control noise. Every downstream module is validated
//! against the quadrature evaluations in here.

use crate::error::{Error, Result};
use crate::model::{Horizon, NoiseSpec};
use crate::quad;

/// Quadrature tolerance for the reference evaluations.
pub const REL_TOL: f64 = 1e-10;

/// The scalar linear benchmark system.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    /// Drift rate `p` (1/s).
    pub p: f64,
    /// Control gain `q` (nonzero).
    pub q: f64,
    pub x0: f64,
    /// Constant target value held on `[T, T+R]`.
    pub z0: f64,
    pub noise: NoiseSpec,
    pub horizon: Horizon,
}

impl LinearSystem {
    pub fn new(p: f64, q: f64, x0: f64, z0: f64, noise: NoiseSpec, horizon: Horizon) -> Result<Self> {
        if q == 0.0 {
            return Err(Error::Usage("q must be nonzero (controllability)".into()));
        }
        Ok(Self { p, q, x0, z0, noise, horizon })
    }

    fn kappa(&self) -> f64 {
        self.noise.kappa[0]
    }
}

/// `E x(t) = x0 e^{pt} + int_0^t e^{p(t-s)} q lambda(s) ds`.
pub fn mean_trajectory(sys: &LinearSystem, lambda: &dyn Fn(f64) -> f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Usage("t must be >= 0".into()));
    }
    let p = sys.p;
    let q = sys.q;
    let forced = quad::integrate_piecewise(
        |s| (p * (t - s)).exp() * q * lambda(s),
        0.0,
        t,
        &[sys.horizon.reach_time],
        REL_TOL,
    )?;
    Ok(sys.x0 * (p * t).exp() + forced)
}

/// `var x(t) = int_0^t e^{2p(t-s)} kappa^2 q^2 |lambda(s)|^{2 alpha} ds`.
pub fn variance_trajectory(sys: &LinearSystem, lambda: &dyn Fn(f64) -> f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Usage("t must be >= 0".into()));
    }
    let p = sys.p;
    let c = sys.kappa().powi(2) * sys.q.powi(2);
    let two_alpha = 2.0 * sys.noise.alpha;
    quad::integrate_piecewise(
        |s| (2.0 * p * (t - s)).exp() * c * lambda(s).abs().powf(two_alpha),
        0.0,
        t,
        &[sys.horizon.reach_time],
        REL_TOL,
    )
}

/// The constructive reach control
/// `lambda(t) = (z0 - x0 e^{pT}) / (T q) * e^{p(t - T)}` on `[0, T]`,
/// which drives the mean exactly to `z0` at `t = T`.
pub fn optimal_reach_control(sys: &LinearSystem) -> impl Fn(f64) -> f64 + Clone + Send + Sync {
    let t_reach = sys.horizon.reach_time;
    let scale = (sys.z0 - sys.x0 * (sys.p * t_reach).exp()) / (t_reach * sys.q);
    let p = sys.p;
    move |t: f64| scale * (p * (t - t_reach)).exp()
}

/// Hold-phase weights of the three-point measure sustaining `z0`:
/// mass `|p z0 / (q M_Y)|` at `sign(-p z0 / q) * M_Y`, rest at zero.
/// Returns `(mu, nu)`, constant across hold bins.
pub fn optimal_hold_measure(sys: &LinearSystem) -> Result<(f64, f64)> {
    let required = -sys.p * sys.z0 / sys.q;
    if required.abs() > sys.noise.m_y {
        return Err(Error::InfeasibleHold { required: required.abs(), bound: sys.noise.m_y });
    }
    if required > 0.0 {
        Ok((required / sys.noise.m_y, 0.0))
    } else {
        Ok((0.0, -required / sys.noise.m_y))
    }
}

/// The deterministic mean control over the whole task: the reach control on
/// `[0, T)` and the constant hold mean `-p z0 / q` on `[T, T+R]`.
pub fn task_mean_control(sys: &LinearSystem) -> Result<impl Fn(f64) -> f64 + Clone + Send + Sync> {
    let (mu, nu) = optimal_hold_measure(sys)?;
    let hold = (mu - nu) * sys.noise.m_y;
    let reach = optimal_reach_control(sys);
    let t_reach = sys.horizon.reach_time;
    Ok(move |t: f64| if t < t_reach { reach(t) } else { hold })
}

/// Accumulated variance over the window `[w0, w1]` when a deterministic mean
/// control `u_hat` is realised by the lifted measure (mass `|u_hat|/M_Y` at
/// `sign(u_hat) M_Y`):
/// `int_{w0}^{w1} int_0^t e^{2p(t-s)} q^2 kappa^2 M_Y^{2 alpha} |u_hat(s)|/M_Y ds dt`.
pub fn accumulated_variance_under_lift(
    p: f64,
    q: f64,
    noise: &NoiseSpec,
    u_hat: &dyn Fn(f64) -> f64,
    window: (f64, f64),
    breaks: &[f64],
) -> Result<f64> {
    let kappa = noise.kappa[0];
    let c = kappa * kappa * q * q * noise.m_y.powf(2.0 * noise.alpha - 1.0);
    let (w0, w1) = window;
    let var_at = |t: f64| -> f64 {
        quad::integrate_piecewise(|s| (2.0 * p * (t - s)).exp() * c * u_hat(s).abs(), 0.0, t, breaks, 1e-11)
            .unwrap_or(f64::NAN)
    };
    let out = quad::integrate(var_at, w0, w1, 1e-9)?;
    if !out.is_finite() {
        return Err(Error::Numeric("inner quadrature failed in accumulated variance".into()));
    }
    Ok(out)
}

/// Accumulated hold-window variance for the system's own task controls
/// (reach control then hold measure). Scales exactly as `M_Y^{2 alpha - 1}`.
pub fn hold_variance_bound(sys: &LinearSystem) -> Result<f64> {
    let u = task_mean_control(sys)?;
    let t_reach = sys.horizon.reach_time;
    accumulated_variance_under_lift(
        sys.p,
        sys.q,
        &sys.noise,
        &u,
        (t_reach, sys.horizon.total_time()),
        &[t_reach],
    )
}

/// Variational-argument coefficient `g(t)` of the scalar functional
/// (piecewise in `t` relative to the hold window); exercised only by the
/// Hamiltonian tests.
pub fn functional_g(sys: &LinearSystem, t: f64) -> f64 {
    let p = sys.p;
    let q2 = sys.q * sys.q;
    let t_reach = sys.horizon.reach_time;
    let t_end = sys.horizon.total_time();
    if p.abs() < 1e-12 {
        // p -> 0 limit of the displayed formula.
        if t <= t_reach {
            q2 * sys.horizon.hold_time
        } else {
            q2 * (t_end - t)
        }
    } else if t <= t_reach {
        q2 / (2.0 * p) * ((2.0 * p * (t_end - t)).exp() - (2.0 * p * (t_reach - t)).exp())
    } else {
        q2 / (2.0 * p) * ((2.0 * p * (t_end - t)).exp() - 1.0)
    }
}

/// Coefficient `f(t)` for a supplied Lagrange multiplier `gamma(t)`; the
/// multiplier is an input, never solved for.
pub fn functional_f(sys: &LinearSystem, gamma: &dyn Fn(f64) -> f64, t: f64) -> Result<f64> {
    let p = sys.p;
    let q = sys.q;
    let t_reach = sys.horizon.reach_time;
    let t_end = sys.horizon.total_time();
    let lo = if t <= t_reach { t_reach } else { t };
    quad::integrate(|s| -q * gamma(s) * (p * (s - t)).exp(), lo, t_end, 1e-10)
}

/// Offset term `mu(t) = gamma(t) (x0 e^{pt} - z0)`; never moves the argmin.
pub fn functional_offset(sys: &LinearSystem, gamma: &dyn Fn(f64) -> f64, t: f64) -> f64 {
    gamma(t) * (sys.x0 * (sys.p * t).exp() - sys.z0)
}
