//! Shared domain types: the controlled plant, noise specification, time
//! horizon, target, and the three-level measure schedule.
//!
//! The plant is `dx/dt = a(x,t) + b(x,t) u(t)` with control noise
//! `u_i = lambda_i + kappa_i |lambda_i|^alpha * white noise`. A
//! [`MeasureSchedule`] stores, per control channel and per control bin, the
//! weights `(mu, nu)` of a probability measure supported on
//! `{+M_Y, -M_Y, 0}` with masses `(mu, nu, 1 - mu - nu)`.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type GainFn = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// The controlled plant: drift `a(x,t)`, gain `b(x,t)` and objective `phi(x,t)`.
///
/// All closures must return finite values for finite inputs inside
/// [`SystemModel::state_bound`]; simulation aborts when a trajectory leaves
/// that box.
#[derive(Clone)]
pub struct SystemModel {
    pub state_dim: usize,
    pub control_dim: usize,
    pub objective_dim: usize,
    /// Drift `a(x,t)`, an n-vector.
    pub drift: StateFn,
    /// Gain `b(x,t)`, an n x m matrix.
    pub gain: GainFn,
    /// Objective `phi(x,t)`, a k-vector.
    pub objective: StateFn,
    /// Axis-aligned state box (lower, upper); trajectories must stay inside.
    pub state_bound: (DVector<f64>, DVector<f64>),
    /// Optional analytic Jacobian of the drift `a` with respect to `x`.
    /// When absent, consumers fall back to central finite differences.
    pub drift_jacobian: Option<GainFn>,
    /// Optional analytic Jacobian of `phi` with respect to `x` (k x n).
    pub objective_jacobian: Option<GainFn>,
    /// Declared Lipschitz constant of `phi` on the state box.
    pub lipschitz_c1: f64,
}

impl SystemModel {
    /// True iff `x` lies inside the declared state box.
    pub fn inside(&self, x: &DVector<f64>) -> bool {
        let (lo, hi) = &self.state_bound;
        x.iter()
            .zip(lo.iter().zip(hi.iter()))
            .all(|(v, (l, h))| v.is_finite() && *v >= *l && *v <= *h)
    }

    /// Jacobian of `phi` at `x` (analytic when supplied, else central
    /// finite differences with step `1e-6 * (1 + |x_i|)`).
    pub fn objective_jac(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        if let Some(j) = &self.objective_jacobian {
            return j(x, t);
        }
        fd_jacobian(self.objective_dim, x, |y| (self.objective)(y, t))
    }

    /// Jacobian of the drift `a` at `x`.
    pub fn drift_jac(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        if let Some(j) = &self.drift_jacobian {
            return j(x, t);
        }
        fd_jacobian(self.state_dim, x, |y| (self.drift)(y, t))
    }

    /// Sampled finite-difference check that `phi` respects the declared
    /// Lipschitz constant on the state box. Returns the largest observed
    /// difference ratio.
    pub fn sampled_lipschitz_ratio(&self, pairs: &[(DVector<f64>, DVector<f64>)], t: f64) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in pairs {
            let d = (x - y).norm();
            if d < 1e-14 {
                continue;
            }
            let r = ((self.objective)(x, t) - (self.objective)(y, t)).norm() / d;
            worst = worst.max(r);
        }
        worst
    }
}

/// Central finite-difference Jacobian with per-coordinate step `1e-6 (1+|x_i|)`.
pub fn fd_jacobian<F>(rows: usize, x: &DVector<f64>, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(rows, n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..rows {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Signal-dependent noise: dispersion index `alpha`, per-channel scales
/// `kappa_i`, and the control bound `M_Y` (controls live in `[-M_Y, M_Y]^m`).
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub alpha: f64,
    pub kappa: Vec<f64>,
    pub m_y: f64,
}

impl NoiseSpec {
    pub fn new(alpha: f64, kappa: Vec<f64>, m_y: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Usage(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if m_y <= 0.0 {
            return Err(Error::Usage(format!("m_y must be positive, got {m_y}")));
        }
        if kappa.iter().any(|k| *k < 0.0 || !k.is_finite()) {
            return Err(Error::Usage("kappa entries must be finite and >= 0".into()));
        }
        Ok(Self { alpha, kappa, m_y })
    }
}

/// Task timing: reach for `reach_time`, hold for `hold_time`, integrate at
/// `dt_integrate`, decide weights per control bin of width `dt_control`.
#[derive(Clone, Debug)]
pub struct Horizon {
    pub reach_time: f64,
    pub hold_time: f64,
    pub dt_integrate: f64,
    pub dt_control: f64,
}

impl Horizon {
    pub fn new(reach_time: f64, hold_time: f64, dt_integrate: f64, dt_control: f64) -> Result<Self> {
        if !(dt_integrate > 0.0 && dt_integrate <= dt_control && dt_control <= reach_time) {
            return Err(Error::Usage(format!(
                "need 0 < dt_integrate <= dt_control <= reach_time, got {dt_integrate}, {dt_control}, {reach_time}"
            )));
        }
        if hold_time < 0.0 {
            return Err(Error::Usage("hold_time must be >= 0".into()));
        }
        Ok(Self { reach_time, hold_time, dt_integrate, dt_control })
    }

    pub fn total_time(&self) -> f64 {
        self.reach_time + self.hold_time
    }

    /// Integration steps per control bin; errors unless the ratio is a whole
    /// number to within one part in 1e9.
    pub fn steps_per_bin(&self) -> Result<usize> {
        let ratio = self.dt_control / self.dt_integrate;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "dt_control/dt_integrate = {ratio} is not a whole number of steps"
            )));
        }
        Ok(rounded as usize)
    }

    /// Number of control bins covering `[0, T+R]` (last bin may be partial in
    /// time but weights are still per bin).
    pub fn num_bins(&self) -> usize {
        (self.total_time() / self.dt_control).ceil() as usize
    }

    /// Number of integration steps covering `[0, T+R]`.
    pub fn num_steps(&self) -> usize {
        (self.total_time() / self.dt_integrate).round() as usize
    }

    /// Index of the first integration step inside the hold window `[T, T+R]`.
    pub fn hold_start_step(&self) -> usize {
        (self.reach_time / self.dt_integrate).round() as usize
    }

    /// Control bin index containing time `t`.
    pub fn bin_of(&self, t: f64) -> usize {
        ((t / self.dt_control).floor() as usize).min(self.num_bins().saturating_sub(1))
    }
}

/// Target trajectory `z(t)` on the hold window, with per-component mean
/// deviation tolerances.
#[derive(Clone)]
pub struct TargetSpec {
    pub target: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    pub tolerance: DVector<f64>,
}

impl TargetSpec {
    pub fn constant(z: DVector<f64>, tolerance: DVector<f64>) -> Self {
        Self { target: Arc::new(move |_| z.clone()), tolerance }
    }
}

/// Per-channel, per-bin weights of the three-point measure
/// `mu * delta_{+M_Y} + nu * delta_{-M_Y} + (1-mu-nu) * delta_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureSchedule {
    pub bins: usize,
    pub channels: usize,
    /// `mu[(i, k)]`: mass at `+M_Y` for channel i, bin k.
    pub weights_pos: DMatrix<f64>,
    /// `nu[(i, k)]`: mass at `-M_Y`.
    pub weights_neg: DMatrix<f64>,
}

/// One invariant violation found by [`validate_schedule`]; violations are
/// data, not errors.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleViolation {
    /// `mu + nu > 1` in a cell.
    SumExceedsOne { channel: usize, bin: usize, sum: f64 },
    /// `mu * nu != 0` in a cell.
    Complementarity { channel: usize, bin: usize, product: f64 },
    /// Negative or non-finite weight.
    WeightOutOfRange { channel: usize, bin: usize, value: f64 },
}

impl MeasureSchedule {
    pub fn zeros(channels: usize, bins: usize) -> Self {
        Self {
            bins,
            channels,
            weights_pos: DMatrix::zeros(channels, bins),
            weights_neg: DMatrix::zeros(channels, bins),
        }
    }

    /// Build a schedule from signed weights `w in [-1, 1]`:
    /// `mu = max(w, 0)`, `nu = max(-w, 0)`. Complementarity holds by
    /// construction.
    pub fn from_signed(w: &DMatrix<f64>) -> Self {
        let channels = w.nrows();
        let bins = w.ncols();
        let mut s = Self::zeros(channels, bins);
        for i in 0..channels {
            for k in 0..bins {
                let v = w[(i, k)].clamp(-1.0, 1.0);
                if v >= 0.0 {
                    s.weights_pos[(i, k)] = v;
                } else {
                    s.weights_neg[(i, k)] = -v;
                }
            }
        }
        s
    }

    /// Mean control `(mu - nu) * M_Y` for one cell.
    pub fn mean_control(&self, noise: &NoiseSpec, channel: usize, bin: usize) -> Result<f64> {
        if channel >= self.channels || bin >= self.bins {
            return Err(Error::Usage(format!(
                "index out of range: channel {channel} bin {bin} for {}x{} schedule",
                self.channels, self.bins
            )));
        }
        Ok((self.weights_pos[(channel, bin)] - self.weights_neg[(channel, bin)]) * noise.m_y)
    }

    /// Serialize to CSV: `bin,t_start,channel,mu,nu`, times with 9
    /// significant digits.
    pub fn to_csv(&self, dt_control: f64) -> String {
        let mut out = String::from("bin,t_start,channel,mu,nu\n");
        for k in 0..self.bins {
            for i in 0..self.channels {
                let _ = writeln!(
                    out,
                    "{},{:.9e},{},{:.17e},{:.17e}",
                    k,
                    k as f64 * dt_control,
                    i,
                    self.weights_pos[(i, k)],
                    self.weights_neg[(i, k)]
                );
            }
        }
        out
    }

    /// Parse the CSV interchange format written by [`MeasureSchedule::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "bin,t_start,channel,mu,nu" => {}
            other => {
                return Err(Error::Config(format!("bad schedule CSV header: {other:?}")));
            }
        }
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Config(format!("schedule CSV line {}: expected 5 fields", lineno + 2)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("schedule CSV line {}: {e}", lineno + 2)))
            };
            let bin = parse(fields[0])? as usize;
            let chan = parse(fields[2])? as usize;
            rows.push((bin, chan, parse(fields[3])?, parse(fields[4])?));
        }
        let bins = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let channels = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut s = Self::zeros(channels, bins);
        for (bin, chan, mu, nu) in rows {
            s.weights_pos[(chan, bin)] = mu;
            s.weights_neg[(chan, bin)] = nu;
        }
        Ok(s)
    }
}

/// Check the schedule invariants: weights in `[0, 1]`, `mu + nu <= 1` and
/// `mu * nu = 0` per cell, within tolerance 1e-12. Empty list iff valid.
pub fn validate_schedule(schedule: &MeasureSchedule) -> Vec<ScheduleViolation> {
    const TOL: f64 = 1e-12;
    let mut out = Vec::new();
    for i in 0..schedule.channels {
        for k in 0..schedule.bins {
            let mu = schedule.weights_pos[(i, k)];
            let nu = schedule.weights_neg[(i, k)];
            for v in [mu, nu] {
                if !v.is_finite() || v < -TOL || v > 1.0 + TOL {
                    out.push(ScheduleViolation::WeightOutOfRange { channel: i, bin: k, value: v });
                }
            }
            if mu + nu > 1.0 + TOL {
                out.push(ScheduleViolation::SumExceedsOne { channel: i, bin: k, sum: mu + nu });
            }
            if (mu * nu).abs() > TOL {
                out.push(ScheduleViolation::Complementarity { channel: i, bin: k, product: mu * nu });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn noise(m_y: f64) -> NoiseSpec {
        NoiseSpec::new(0.25, vec![1.0], m_y).unwrap()
    }

    #[test]
    fn mean_control_examples() {
        let mut s = MeasureSchedule::zeros(1, 1);
        s.weights_pos[(0, 0)] = 0.5;
        assert_relative_eq!(s.mean_control(&noise(20000.0), 0, 0).unwrap(), 10000.0);

        let s = MeasureSchedule::zeros(1, 1);
        assert_eq!(s.mean_control(&noise(123.0), 0, 0).unwrap(), 0.0);

        let mut s = MeasureSchedule::zeros(1, 1);
        s.weights_neg[(0, 0)] = 0.25;
        assert_relative_eq!(s.mean_control(&noise(20000.0), 0, 0).unwrap(), -5000.0);
    }

    #[test]
    fn mean_control_bad_index_is_usage_error() {
        let s = MeasureSchedule::zeros(1, 2);
        assert!(matches!(s.mean_control(&noise(1.0), 1, 0), Err(Error::Usage(_))));
        assert!(matches!(s.mean_control(&noise(1.0), 0, 2), Err(Error::Usage(_))));
    }

    #[test]
    fn validate_flags_sum_violation() {
        let mut s = MeasureSchedule::zeros(1, 1);
        s.weights_pos[(0, 0)] = 0.6;
        s.weights_neg[(0, 0)] = 0.5;
        let v = validate_schedule(&s);
        assert!(v.iter().any(|x| matches!(x, ScheduleViolation::SumExceedsOne { .. })));
    }

    #[test]
    fn validate_flags_complementarity() {
        let mut s = MeasureSchedule::zeros(1, 1);
        s.weights_pos[(0, 0)] = 0.3;
        s.weights_neg[(0, 0)] = 0.3;
        let v = validate_schedule(&s);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], ScheduleViolation::Complementarity { .. }));
    }

    #[test]
    fn all_zero_schedule_is_valid() {
        let s = MeasureSchedule::zeros(2, 5);
        assert!(validate_schedule(&s).is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let mut s = MeasureSchedule::zeros(2, 3);
        s.weights_pos[(0, 1)] = 0.25;
        s.weights_neg[(1, 2)] = 0.125;
        let text = s.to_csv(0.005);
        assert!(text.starts_with("bin,t_start,channel,mu,nu\n"));
        let back = MeasureSchedule::from_csv(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn signed_weights_keep_complementarity() {
        let w = DMatrix::from_row_slice(1, 4, &[0.4, -0.7, 0.0, 1.5]);
        let s = MeasureSchedule::from_signed(&w);
        assert!(validate_schedule(&s).is_empty());
        assert_relative_eq!(s.weights_pos[(0, 0)], 0.4);
        assert_relative_eq!(s.weights_neg[(0, 1)], 0.7);
        assert_relative_eq!(s.weights_pos[(0, 3)], 1.0);
    }

    #[test]
    fn horizon_bin_arithmetic() {
        let h = Horizon::new(0.65, 0.01, 1e-4, 5e-3).unwrap();
        assert_eq!(h.steps_per_bin().unwrap(), 50);
        assert_eq!(h.num_bins(), 132);
        assert_eq!(h.num_steps(), 6600);
        assert_eq!(h.hold_start_step(), 6500);
    }

    #[test]
    fn horizon_rejects_mismatched_grids() {
        let h = Horizon::new(1.0, 0.0, 3e-4, 1e-3).unwrap();
        assert!(matches!(h.steps_per_bin(), Err(Error::Config(_))));
    }
}
