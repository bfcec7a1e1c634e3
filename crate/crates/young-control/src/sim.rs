//! Euler–Maruyama simulation of the controlled SDE under deterministic mean
//! controls, time-sliced schedule realizations, and measure-averaged
//! schedule stepping, with Monte Carlo ensemble statistics and the
//! accumulated execution-error integral.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Horizon, MeasureSchedule, NoiseSpec, SystemModel, TargetSpec};
use crate::rng::path_stream;

/// Per-integration-step control values. In schedule mode each entry is one
/// of `{-M_Y, 0, +M_Y}`; in deterministic mode entries are arbitrary reals
/// carrying their own signal-dependent noise.
#[derive(Clone, Debug)]
pub struct RealizedControl {
    pub dt: f64,
    /// One m-vector per integration step.
    pub segments: Vec<DVector<f64>>,
}

impl RealizedControl {
    /// Sample a deterministic mean-control function on the step grid.
    pub fn from_function(
        horizon: &Horizon,
        control_dim: usize,
        f: impl Fn(f64) -> DVector<f64>,
    ) -> Self {
        let n = horizon.num_steps();
        let segments = (0..n)
            .map(|i| {
                let v = f(i as f64 * horizon.dt_integrate);
                debug_assert_eq!(v.len(), control_dim);
                v
            })
            .collect();
        Self { dt: horizon.dt_integrate, segments }
    }

    /// Time-average of the realized control over one control bin.
    pub fn bin_average(&self, horizon: &Horizon, channel: usize, bin: usize) -> f64 {
        let s = horizon.steps_per_bin().expect("grid checked at construction");
        let lo = bin * s;
        let hi = ((bin + 1) * s).min(self.segments.len());
        let sum: f64 = self.segments[lo..hi].iter().map(|v| v[channel]).sum();
        sum / (hi - lo) as f64
    }
}

/// Largest-remainder apportionment of `total` steps among the three masses
/// `(mu, nu, 1 - mu - nu)`; the counts always sum to `total`.
fn apportion_steps(mu: f64, nu: f64, total: usize) -> (usize, usize, usize) {
    let quotas = [mu * total as f64, nu * total as f64, (1.0 - mu - nu).max(0.0) * total as f64];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
        remainders[i] = quotas[i] - counts[i] as f64;
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap());
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Chattering realization of a schedule: within each control bin, channel
/// `i` spends the first `mu` fraction of the steps at `+M_Y`, then the `nu`
/// fraction at `-M_Y`, then the remainder at zero, fractions rounded to
/// whole integration steps by largest remainder.
pub fn realize_schedule(
    schedule: &MeasureSchedule,
    noise: &NoiseSpec,
    horizon: &Horizon,
) -> Result<RealizedControl> {
    let steps_per_bin = horizon.steps_per_bin()?;
    let total_steps = horizon.num_steps();
    if schedule.bins * steps_per_bin < total_steps {
        return Err(Error::Config(format!(
            "schedule covers {} bins but the horizon needs {}",
            schedule.bins,
            total_steps.div_ceil(steps_per_bin)
        )));
    }
    let m = schedule.channels;
    let mut segments = vec![DVector::zeros(m); total_steps];
    for k in 0..schedule.bins {
        let lo = k * steps_per_bin;
        if lo >= total_steps {
            break;
        }
        let hi = (lo + steps_per_bin).min(total_steps);
        for i in 0..m {
            let (n_pos, n_neg, _) =
                apportion_steps(schedule.weights_pos[(i, k)], schedule.weights_neg[(i, k)], hi - lo);
            for (offset, seg) in segments[lo..hi].iter_mut().enumerate() {
                seg[i] = if offset < n_pos {
                    noise.m_y
                } else if offset < n_pos + n_neg {
                    -noise.m_y
                } else {
                    0.0
                };
            }
        }
    }
    Ok(RealizedControl { dt: horizon.dt_integrate, segments })
}

/// One Euler–Maruyama step:
/// `x' = x + A(x,t,lambda) dt + B(x,t,lambda) sqrt(dt) draws` with
/// `A = a + b lambda` and `B_ij = b_ij kappa_j |lambda_j|^alpha`.
pub fn step(
    model: &SystemModel,
    noise: &NoiseSpec,
    x: &DVector<f64>,
    t: f64,
    lambda: &DVector<f64>,
    dt: f64,
    gaussian_draws: &DVector<f64>,
) -> Result<DVector<f64>> {
    if lambda.iter().any(|l| l.abs() > noise.m_y * (1.0 + 1e-12)) {
        return Err(Error::Usage(format!("control magnitude exceeds M_Y = {}", noise.m_y)));
    }
    if !model.inside(x) {
        return Err(Error::Escape { t, state: x.clone() });
    }
    let diffusion: Vec<f64> = (0..model.control_dim)
        .map(|j| noise.kappa[j] * lambda[j].abs().powf(noise.alpha))
        .collect();
    let next = euler_step(model, x, t, lambda, &diffusion, dt, Some(gaussian_draws));
    if !model.inside(&next) {
        return Err(Error::Escape { t: t + dt, state: next });
    }
    Ok(next)
}

/// Shared Euler kernel: drift from `lambda`, per-channel diffusion
/// magnitudes `d_j` (noise term `b_{.j} d_j sqrt(dt) xi_j`).
fn euler_step(
    model: &SystemModel,
    x: &DVector<f64>,
    t: f64,
    lambda: &DVector<f64>,
    diffusion: &[f64],
    dt: f64,
    draws: Option<&DVector<f64>>,
) -> DVector<f64> {
    let a = (model.drift)(x, t);
    let b = (model.gain)(x, t);
    let mut next = x + (a + &b * lambda) * dt;
    if let Some(draws) = draws {
        let sqrt_dt = dt.sqrt();
        for j in 0..model.control_dim {
            if diffusion[j] != 0.0 {
                let scale = diffusion[j] * sqrt_dt * draws[j];
                for i in 0..model.state_dim {
                    next[i] += b[(i, j)] * scale;
                }
            }
        }
    }
    next
}

/// How [`run_ensemble`] reacts to a trajectory leaving the state box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EscapePolicy {
    /// Abort the whole ensemble with diagnostics.
    Abort,
    /// Drop the path and record it in the escape count.
    DropAndFlag,
}

#[derive(Clone, Debug)]
pub struct EnsembleOptions {
    pub escape: EscapePolicy,
    /// Keep every path's objective trajectory (memory heavy; used to verify
    /// that stored summaries match a recomputation).
    pub store_paths: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self { escape: EscapePolicy::Abort, store_paths: false }
    }
}

/// Monte Carlo ensemble summary: per-time objective mean/variance and the
/// accumulated execution error over the hold window.
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub paths: usize,
    pub times: Vec<f64>,
    /// Per-time componentwise mean of `phi`.
    pub mean: Vec<DVector<f64>>,
    /// Per-time componentwise variance of `phi` (unbiased, divisor P-1).
    pub variance: Vec<DVector<f64>>,
    /// Trapezoidal `int_T^{T+R} sum_i var(phi_i) dt`.
    pub exec_error: f64,
    pub rng_seed: u64,
    pub escaped: usize,
    /// Per-path flattened `phi` trajectories (time-major, k components per
    /// time), present only with `store_paths`.
    pub phi_paths: Option<Vec<Vec<f64>>>,
}

impl TrajectoryEnsemble {
    /// Recompute mean/variance/exec_error from stored paths (two-pass),
    /// independently of the streaming accumulation used during the run.
    pub fn recompute_stats(&self, horizon: &Horizon) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> {
        let paths = self
            .phi_paths
            .as_ref()
            .ok_or_else(|| Error::Usage("ensemble was run without store_paths".into()))?;
        let n_t = self.times.len();
        let k = self.mean[0].len();
        let p = paths.len();
        let mut mean = vec![DVector::zeros(k); n_t];
        for path in paths {
            for ti in 0..n_t {
                for c in 0..k {
                    mean[ti][c] += path[ti * k + c];
                }
            }
        }
        for m in &mut mean {
            *m /= p as f64;
        }
        let mut var = vec![DVector::zeros(k); n_t];
        for path in paths {
            for ti in 0..n_t {
                for c in 0..k {
                    let d = path[ti * k + c] - mean[ti][c];
                    var[ti][c] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= (p - 1) as f64;
        }
        let exec = exec_error_trapezoid(&var, horizon);
        Ok((mean, var, exec))
    }

    /// Summary CSV: `t,mean_1..mean_k,var_1..var_k`.
    pub fn to_csv(&self) -> String {
        let k = self.mean[0].len();
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
                let _ = write!(out, ",{:.17e}", self.mean[ti][c]);
            }
            for c in 0..k {
                let _ = write!(out, ",{:.17e}", self.variance[ti][c]);
            }
            out.push('\n');
        }
        out
    }
}

/// Trapezoidal rule for `int_T^{T+R} sum_i var_i dt` on the step grid.
pub(crate) fn exec_error_trapezoid(variance: &[DVector<f64>], horizon: &Horizon) -> f64 {
    let start = horizon.hold_start_step();
    let dt = horizon.dt_integrate;
    let total: Vec<f64> = variance.iter().map(|v| v.sum()).collect();
    let mut acc = 0.0;
    for i in start..total.len() - 1 {
        acc += 0.5 * (total[i] + total[i + 1]) * dt;
    }
    acc
}

// Chunk size for the deterministic pairwise reduction; statistics are
// independent of worker count because chunk boundaries are fixed.
const CHUNK: usize = 32;

struct ChunkStats {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    escaped: usize,
    used: usize,
    paths: Vec<Vec<f64>>,
}

fn run_generic<C>(
    model: &SystemModel,
    horizon: &Horizon,
    x0: &DVector<f64>,
    per_step: C,
    paths: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<TrajectoryEnsemble>
where
    C: Fn(usize) -> (DVector<f64>, Vec<f64>) + Sync,
{
    if paths < 2 {
        return Err(Error::Usage("need at least 2 paths".into()));
    }
    let n_steps = horizon.num_steps();
    let k = model.objective_dim;
    let m = model.control_dim;
    let n_t = n_steps + 1;

    // Pre-evaluate the control sequence once; it is shared read-only.
    let controls: Vec<(DVector<f64>, Vec<f64>)> = (0..n_steps).map(&per_step).collect();

    let chunk_results: Vec<Result<ChunkStats>> = (0..paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk_idx| {
            let lo = chunk_idx * CHUNK;
            let hi = (lo + CHUNK).min(paths);
            let mut stats = ChunkStats {
                sum: vec![0.0; n_t * k],
                sumsq: vec![0.0; n_t * k],
                escaped: 0,
                used: 0,
                paths: Vec::new(),
            };
            let mut phi_buf = vec![0.0; n_t * k];
            for path in lo..hi {
                let mut rng = path_stream(seed, path as u64);
                let mut x = x0.clone();
                let mut draws = DVector::zeros(m);
                let mut escaped_at = None;
                let phi0 = (model.objective)(&x, 0.0);
                phi_buf[..k].copy_from_slice(phi0.as_slice());
                for i in 0..n_steps {
                    let t = i as f64 * horizon.dt_integrate;
                    for j in 0..m {
                        draws[j] = rng.sample(StandardNormal);
                    }
                    let (lambda, diffusion) = &controls[i];
                    x = euler_step(model, &x, t, lambda, diffusion, horizon.dt_integrate, Some(&draws));
                    if !model.inside(&x) {
                        escaped_at = Some((t + horizon.dt_integrate, x.clone()));
                        break;
                    }
                    let phi = (model.objective)(&x, t + horizon.dt_integrate);
                    phi_buf[(i + 1) * k..(i + 2) * k].copy_from_slice(phi.as_slice());
                }
                if let Some((t, state)) = escaped_at {
                    match opts.escape {
                        EscapePolicy::Abort => return Err(Error::Escape { t, state }),
                        EscapePolicy::DropAndFlag => {
                            stats.escaped += 1;
                            continue;
                        }
                    }
                }
                for (acc_idx, v) in phi_buf.iter().enumerate() {
                    stats.sum[acc_idx] += v;
                    stats.sumsq[acc_idx] += v * v;
                }
                stats.used += 1;
                if opts.store_paths {
                    stats.paths.push(phi_buf.clone());
                }
            }
            Ok(stats)
        })
        .collect();

    // Merge chunks in index order so the reduction is deterministic.
    let mut sum = vec![0.0; n_t * k];
    let mut sumsq = vec![0.0; n_t * k];
    let mut escaped = 0;
    let mut used = 0;
    let mut stored: Vec<Vec<f64>> = Vec::new();
    for res in chunk_results {
        let c = res?;
        for i in 0..n_t * k {
            sum[i] += c.sum[i];
            sumsq[i] += c.sumsq[i];
        }
        escaped += c.escaped;
        used += c.used;
        stored.extend(c.paths);
    }
    if used < 2 {
        return Err(Error::Numeric(format!("only {used} of {paths} paths survived; cannot form statistics")));
    }

    let p = used as f64;
    let mut mean = Vec::with_capacity(n_t);
    let mut variance = Vec::with_capacity(n_t);
    for ti in 0..n_t {
        let mut mu = DVector::zeros(k);
        let mut va = DVector::zeros(k);
        for c in 0..k {
            let s = sum[ti * k + c];
            let ss = sumsq[ti * k + c];
            mu[c] = s / p;
            va[c] = ((ss - s * s / p) / (p - 1.0)).max(0.0);
        }
        mean.push(mu);
        variance.push(va);
    }
    let times: Vec<f64> = (0..n_t).map(|i| i as f64 * horizon.dt_integrate).collect();
    let exec_error = exec_error_trapezoid(&variance, horizon);
    Ok(TrajectoryEnsemble {
        paths: used,
        times,
        mean,
        variance,
        exec_error,
        rng_seed: seed,
        escaped,
        phi_paths: if opts.store_paths { Some(stored) } else { None },
    })
}

/// Monte Carlo ensemble under a realized (per-step) control. The diffusion
/// magnitude is the pointwise `kappa_j |lambda_j|^alpha`.
pub fn run_ensemble(
    model: &SystemModel,
    noise: &NoiseSpec,
    horizon: &Horizon,
    control: &RealizedControl,
    x0: &DVector<f64>,
    paths: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<TrajectoryEnsemble> {
    if control.segments.len() < horizon.num_steps() {
        return Err(Error::Config(format!(
            "control has {} steps but the horizon needs {}",
            control.segments.len(),
            horizon.num_steps()
        )));
    }
    let alpha = noise.alpha;
    run_generic(
        model,
        horizon,
        x0,
        |i| {
            let lambda = control.segments[i].clone();
            let diffusion =
                (0..model.control_dim).map(|j| noise.kappa[j] * lambda[j].abs().powf(alpha)).collect();
            (lambda, diffusion)
        },
        paths,
        seed,
        opts,
    )
}

/// Monte Carlo ensemble directly under a measure schedule using the
/// measure-averaged Euler step: drift from the bin mean `(mu - nu) M_Y`,
/// diffusion variance from the bin second moment `(mu + nu) M_Y^{2 alpha}`.
///
/// This is the discretisation that stays faithful at large `M_Y`, where the
/// on-fraction `|u|/M_Y` of a chattering realization would round to zero
/// integration steps per bin.
pub fn run_schedule_ensemble(
    model: &SystemModel,
    noise: &NoiseSpec,
    horizon: &Horizon,
    schedule: &MeasureSchedule,
    x0: &DVector<f64>,
    paths: usize,
    seed: u64,
    opts: &EnsembleOptions,
) -> Result<TrajectoryEnsemble> {
    let steps_per_bin = horizon.steps_per_bin()?;
    if schedule.bins * steps_per_bin < horizon.num_steps() {
        return Err(Error::Config("schedule does not cover the horizon".into()));
    }
    let m_pow = noise.m_y.powf(noise.alpha);
    run_generic(
        model,
        horizon,
        x0,
        |i| {
            let bin = (i / steps_per_bin).min(schedule.bins - 1);
            let mut lambda = DVector::zeros(model.control_dim);
            let mut diffusion = vec![0.0; model.control_dim];
            for j in 0..model.control_dim {
                let mu = schedule.weights_pos[(j, bin)];
                let nu = schedule.weights_neg[(j, bin)];
                lambda[j] = (mu - nu) * noise.m_y;
                diffusion[j] = noise.kappa[j] * (mu + nu).max(0.0).sqrt() * m_pow;
            }
            (lambda, diffusion)
        },
        paths,
        seed,
        opts,
    )
}

/// Noiseless forward integration (Euler) under a realized control.
pub fn simulate_deterministic(
    model: &SystemModel,
    horizon: &Horizon,
    control: &RealizedControl,
    x0: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let n_steps = horizon.num_steps();
    if control.segments.len() < n_steps {
        return Err(Error::Config("control shorter than horizon".into()));
    }
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    let zero_diff = vec![0.0; model.control_dim];
    for i in 0..n_steps {
        let t = i as f64 * horizon.dt_integrate;
        x = euler_step(model, &x, t, &control.segments[i], &zero_diff, horizon.dt_integrate, None);
        if !model.inside(&x) {
            return Err(Error::Escape { t: t + horizon.dt_integrate, state: x });
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Per-run manifest block recording the simulation setup.
pub fn run_manifest(ens: &TrajectoryEnsemble, horizon: &Horizon, target: &TargetSpec) -> String {
    let _ = target;
    format!(
        "paths = {}\nseed = {}\ndt_integrate_s = {:.9e}\ndt_control_s = {:.9e}\nescaped = {}\nexec_error = {:.12e}\n",
        ens.paths, ens.rng_seed, horizon.dt_integrate, horizon.dt_control, ens.escaped, ens.exec_error
    )
}
