//! Pulse-ensemble approximation of a measure schedule: excitatory and
//! inhibitory neuron populations fire Bernoulli spikes per time bin, and the
//! scaled net count reproduces the schedule's mean control in expectation.
//! The binomial sampling noise then plays the role of the signal-dependent
//! noise term when the pulse control drives a noiseless plant.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Binomial;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Horizon, MeasureSchedule, NoiseSpec, SystemModel};
use crate::optimizer::BinControl;
use crate::rng::{domain_stream, path_stream};
use crate::sim::{exec_error_trapezoid, TrajectoryEnsemble};

/// Finite neuron ensembles backing one control channel each: `n_exc`
/// excitatory and `n_inh` inhibitory neurons firing in bins of `bin_width`
/// seconds, with `gamma` control units per unit net population rate.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub n_exc: usize,
    pub n_inh: usize,
    /// Control units per (spikes/s) of net population rate.
    pub gamma: f64,
    /// Spontaneous population rate floor (spikes/s) on both populations.
    pub baseline_rate: f64,
    pub bin_width: f64,
    pub seed: u64,
}

impl EnsembleSpec {
    /// Default scale: a fully active excitatory population (one spike per
    /// neuron per bin) encodes `+M_Y`.
    pub fn default_gamma(noise: &NoiseSpec, bin_width: f64, n_exc: usize) -> f64 {
        noise.m_y * bin_width / n_exc as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_exc == 0 || self.n_inh == 0 || self.gamma <= 0.0 || self.bin_width <= 0.0 {
            return Err(Error::Usage("ensemble needs positive sizes, gamma and bin width".into()));
        }
        if self.baseline_rate < 0.0 {
            return Err(Error::Usage("baseline rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-channel target population rates (spikes/s), one entry per bin.
#[derive(Clone, Debug)]
pub struct ChannelRates {
    pub exc: Vec<f64>,
    pub inh: Vec<f64>,
}

/// One-sided split of the mean control into population rates:
/// `exc = baseline + max(u, 0)/gamma`, `inh = baseline + max(-u, 0)/gamma`.
pub fn rates_from_schedule(
    schedule: &MeasureSchedule,
    noise: &NoiseSpec,
    spec: &EnsembleSpec,
) -> Result<Vec<ChannelRates>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(schedule.channels);
    for i in 0..schedule.channels {
        let mut rates = ChannelRates {
            exc: Vec::with_capacity(schedule.bins),
            inh: Vec::with_capacity(schedule.bins),
        };
        for k in 0..schedule.bins {
            let u = schedule.mean_control(noise, i, k)?;
            let exc = spec.baseline_rate + u.max(0.0) / spec.gamma;
            let inh = spec.baseline_rate + (-u).max(0.0) / spec.gamma;
            for (rate, n) in [(exc, spec.n_exc), (inh, spec.n_inh)] {
                if rate * spec.bin_width > n as f64 {
                    return Err(Error::Saturation(format!(
                        "bin {k} channel {i}: rate {rate:.1} sp/s exceeds what {n} neurons can fire in {} s; increase gamma or the ensemble size",
                        spec.bin_width
                    )));
                }
            }
            rates.exc.push(exc);
            rates.inh.push(inh);
        }
        out.push(rates);
    }
    Ok(out)
}

/// Per-neuron spike indicators: matrices are `n x bins` per channel.
#[derive(Clone, Debug)]
pub struct SpikeRaster {
    pub bins: usize,
    pub channels: usize,
    pub exc: Vec<DMatrix<u8>>,
    pub inh: Vec<DMatrix<u8>>,
}

impl SpikeRaster {
    pub fn exc_count(&self, channel: usize, bin: usize) -> u32 {
        self.exc[channel].column(bin).iter().map(|s| *s as u32).sum()
    }

    pub fn inh_count(&self, channel: usize, bin: usize) -> u32 {
        self.inh[channel].column(bin).iter().map(|s| *s as u32).sum()
    }

    /// Export as `bin,channel,neuron,spike`; inhibitory neurons are indexed
    /// after the excitatory ones.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,channel,neuron,spike\n");
        for k in 0..self.bins {
            for c in 0..self.channels {
                let n_exc = self.exc[c].nrows();
                for j in 0..n_exc {
                    let _ = writeln!(out, "{k},{c},{j},{}", self.exc[c][(j, k)]);
                }
                for j in 0..self.inh[c].nrows() {
                    let _ = writeln!(out, "{k},{c},{},{}", n_exc + j, self.inh[c][(j, k)]);
                }
            }
        }
        out
    }
}

/// Rate summary export: `bin,channel,exc_rate,inh_rate`.
pub fn rates_csv(rates: &[ChannelRates]) -> String {
    let mut out = String::from("bin,channel,exc_rate,inh_rate\n");
    for (c, r) in rates.iter().enumerate() {
        for k in 0..r.exc.len() {
            let _ = writeln!(out, "{k},{c},{:.9e},{:.9e}", r.exc[k], r.inh[k]);
        }
    }
    out
}

/// Independent Bernoulli spikes per neuron per bin with probability
/// `rate * bin_width / n`, so the expected population count per bin is
/// `rate * bin_width`. Deterministic per `(seed, channel, bin)`.
pub fn sample_raster(rates: &[ChannelRates], spec: &EnsembleSpec) -> Result<SpikeRaster> {
    spec.validate()?;
    let channels = rates.len();
    let bins = rates.first().map(|r| r.exc.len()).unwrap_or(0);
    let mut out = SpikeRaster {
        bins,
        channels,
        exc: vec![DMatrix::zeros(spec.n_exc, bins); channels],
        inh: vec![DMatrix::zeros(spec.n_inh, bins); channels],
    };
    for (c, r) in rates.iter().enumerate() {
        for k in 0..bins {
            let mut rng = domain_stream(spec.seed, 0x50_15E, (c * bins + k) as u64);
            for (rate, n, mat) in [
                (r.exc[k], spec.n_exc, &mut out.exc[c]),
                (r.inh[k], spec.n_inh, &mut out.inh[c]),
            ] {
                let p = rate * spec.bin_width / n as f64;
                if p > 1.0 {
                    return Err(Error::Saturation(format!("spike probability {p:.3} > 1 in bin {k}")));
                }
                for j in 0..n {
                    mat[(j, k)] = u8::from(rng.random_bool(p));
                }
            }
        }
    }
    Ok(out)
}

/// Pulse-train control from a raster: per bin,
/// `u = gamma * (exc_count - inh_count) / bin_width`, which equals the
/// schedule's mean control in expectation.
pub fn control_from_raster(raster: &SpikeRaster, spec: &EnsembleSpec) -> BinControl {
    let mut values = DMatrix::zeros(raster.channels, raster.bins);
    for c in 0..raster.channels {
        for k in 0..raster.bins {
            let net = raster.exc_count(c, k) as f64 - raster.inh_count(c, k) as f64;
            values[(c, k)] = spec.gamma * net / spec.bin_width;
        }
    }
    BinControl { dt: spec.bin_width, values }
}

const CHUNK: usize = 32;

/// Monte Carlo over pulse realizations: each path samples its own spike
/// counts (binomial shortcut, equivalent in law to the per-neuron raster)
/// and drives the *noiseless* plant — the sampling noise is the only noise.
/// `spec.bin_width` must equal the horizon's control-bin width.
pub fn run_pulse_ensemble(
    model: &SystemModel,
    horizon: &Horizon,
    rates: &[ChannelRates],
    spec: &EnsembleSpec,
    x0: &DVector<f64>,
    paths: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    spec.validate()?;
    if (spec.bin_width - horizon.dt_control).abs() > 1e-12 * spec.bin_width {
        return Err(Error::Config("pulse bin width must equal dt_control".into()));
    }
    if paths < 2 {
        return Err(Error::Usage("need at least 2 paths".into()));
    }
    let steps_per_bin = horizon.steps_per_bin()?;
    let n_steps = horizon.num_steps();
    let n_bins_needed = n_steps.div_ceil(steps_per_bin);
    if rates.len() != model.control_dim || rates.iter().any(|r| r.exc.len() < n_bins_needed) {
        return Err(Error::Config("rates do not cover the horizon".into()));
    }
    let k = model.objective_dim;
    let n_t = n_steps + 1;

    let chunk_results: Vec<Result<(Vec<f64>, Vec<f64>, usize)>> = (0..paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk_idx| {
            let lo = chunk_idx * CHUNK;
            let hi = (lo + CHUNK).min(paths);
            let mut sum = vec![0.0; n_t * k];
            let mut sumsq = vec![0.0; n_t * k];
            let mut used = 0usize;
            let mut u = DVector::zeros(model.control_dim);
            for path in lo..hi {
                let mut rng = path_stream(seed, path as u64);
                let mut x = x0.clone();
                let record = |x: &DVector<f64>, t: f64, idx: usize, sum: &mut [f64], sumsq: &mut [f64]| {
                    let phi = (model.objective)(x, t);
                    for c in 0..k {
                        let v = phi[c];
                        sum[idx * k + c] += v;
                        sumsq[idx * k + c] += v * v;
                    }
                };
                record(&x, 0.0, 0, &mut sum, &mut sumsq);
                for i in 0..n_steps {
                    let t = i as f64 * horizon.dt_integrate;
                    if i % steps_per_bin == 0 {
                        let bin = i / steps_per_bin;
                        for (j, r) in rates.iter().enumerate() {
                            let draw = |rng: &mut rand_chacha::ChaCha8Rng, rate: f64, n: usize| -> Result<f64> {
                                let p = rate * spec.bin_width / n as f64;
                                let d = Binomial::new(n as u64, p.min(1.0))
                                    .map_err(|e| Error::Numeric(format!("binomial: {e}")))?;
                                Ok(rng.sample(d) as f64)
                            };
                            let ce = draw(&mut rng, r.exc[bin], spec.n_exc)?;
                            let ci = draw(&mut rng, r.inh[bin], spec.n_inh)?;
                            u[j] = spec.gamma * (ce - ci) / spec.bin_width;
                        }
                    }
                    let a = (model.drift)(&x, t);
                    let b = (model.gain)(&x, t);
                    x += (a + &b * &u) * horizon.dt_integrate;
                    if !model.inside(&x) {
                        return Err(Error::Escape { t: t + horizon.dt_integrate, state: x });
                    }
                    record(&x, t + horizon.dt_integrate, i + 1, &mut sum, &mut sumsq);
                }
                used += 1;
            }
            Ok((sum, sumsq, used))
        })
        .collect();

    let mut sum = vec![0.0; n_t * k];
    let mut sumsq = vec![0.0; n_t * k];
    let mut used = 0usize;
    for res in chunk_results {
        let (s, ss, u) = res?;
        for i in 0..n_t * k {
            sum[i] += s[i];
            sumsq[i] += ss[i];
        }
        used += u;
    }
    let p = used as f64;
    let mut mean = Vec::with_capacity(n_t);
    let mut variance = Vec::with_capacity(n_t);
    for ti in 0..n_t {
        let mut mu = DVector::zeros(k);
        let mut va = DVector::zeros(k);
        for c in 0..k {
            let s = sum[ti * k + c];
            mu[c] = s / p;
            va[c] = ((sumsq[ti * k + c] - s * s / p) / (p - 1.0)).max(0.0);
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
        escaped: 0,
        phi_paths: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(n: usize, gamma: f64, bw: f64) -> EnsembleSpec {
        EnsembleSpec { n_exc: n, n_inh: n, gamma, baseline_rate: 5.0, bin_width: bw, seed: 9 }
    }

    fn schedule_with(mc_over_my: &[f64]) -> MeasureSchedule {
        let w = DMatrix::from_row_slice(1, mc_over_my.len(), mc_over_my);
        MeasureSchedule::from_signed(&w)
    }

    #[test]
    fn rates_one_sided_split() {
        let noise = NoiseSpec::new(0.25, vec![1.0], 5.0).unwrap();
        let sp = spec(100, 0.01, 0.005);
        let s = schedule_with(&[0.0, 0.1, -0.2]);
        let rates = rates_from_schedule(&s, &noise, &sp).unwrap();
        let r = &rates[0];
        // mean control 0 -> both at baseline.
        assert_relative_eq!(r.exc[0], 5.0);
        assert_relative_eq!(r.inh[0], 5.0);
        // mean control 0.5 = gamma * 50.
        assert_relative_eq!(r.exc[1], 5.0 + 50.0, max_relative = 1e-12);
        assert_relative_eq!(r.inh[1], 5.0);
        // reconstruction at rate level.
        for k in 0..3 {
            let u = s.mean_control(&noise, 0, k).unwrap();
            assert_relative_eq!(sp.gamma * (r.exc[k] - r.inh[k]), u, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn rates_saturation_error() {
        let noise = NoiseSpec::new(0.25, vec![1.0], 1000.0).unwrap();
        let sp = spec(10, 0.001, 0.5);
        let s = schedule_with(&[0.9]);
        assert!(matches!(rates_from_schedule(&s, &noise, &sp), Err(Error::Saturation(_))));
    }

    #[test]
    fn raster_counts_near_expectation() {
        // Expected firing fraction 0.5 with n = 100: counts ~ Binomial(100, 0.5).
        let sp = spec(100, 1.0, 0.005);
        let rate = 0.5 * 100.0 / 0.005; // p = rate*bw/n = 0.5
        let rates = vec![ChannelRates { exc: vec![rate; 200], inh: vec![rate; 200] }];
        let raster = sample_raster(&rates, &sp).unwrap();
        let mean_count: f64 = (0..200).map(|k| raster.exc_count(0, k) as f64).sum::<f64>() / 200.0;
        assert!((mean_count - 50.0).abs() < 2.0, "mean count {mean_count}");
        let var: f64 =
            (0..200).map(|k| (raster.exc_count(0, k) as f64 - mean_count).powi(2)).sum::<f64>() / 199.0;
        assert!((var.sqrt() - 5.0).abs() < 1.5, "sd {}", var.sqrt());
    }

    #[test]
    fn raster_is_seed_deterministic() {
        let sp = spec(50, 1.0, 0.005);
        let rates = vec![ChannelRates { exc: vec![800.0; 20], inh: vec![400.0; 20] }];
        let a = sample_raster(&rates, &sp).unwrap();
        let b = sample_raster(&rates, &sp).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn pulse_control_unbiased_over_seeds() {
        let noise = NoiseSpec::new(0.25, vec![1.0], 5.0).unwrap();
        let bw = 0.005;
        let n = 100;
        let mut sp = spec(n, EnsembleSpec::default_gamma(&noise, bw, n), bw);
        let s = schedule_with(&[0.4; 50]);
        let rates = rates_from_schedule(&s, &noise, &sp).unwrap();
        let target = s.mean_control(&noise, 0, 0).unwrap();
        let mut means = Vec::new();
        for seed in 0..100 {
            sp.seed = seed;
            let raster = sample_raster(&rates, &sp).unwrap();
            let u = control_from_raster(&raster, &sp);
            means.push(u.values.row(0).mean());
        }
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let sd = (means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / 99.0).sqrt();
        assert!(
            (grand - target).abs() <= 3.0 * sd / (means.len() as f64).sqrt() + 1e-12,
            "grand mean {grand} vs target {target} (sd {sd})"
        );
    }

    #[test]
    fn quadrupling_ensemble_halves_control_noise() {
        let noise = NoiseSpec::new(0.25, vec![1.0], 5.0).unwrap();
        let bw = 0.005;
        let s = schedule_with(&[0.4; 400]);
        let sd_for = |n: usize| {
            let sp = spec(n, EnsembleSpec::default_gamma(&noise, bw, n), bw);
            let rates = rates_from_schedule(&s, &noise, &sp).unwrap();
            let raster = sample_raster(&rates, &sp).unwrap();
            let u = control_from_raster(&raster, &sp);
            let row = u.values.row(0);
            let m = row.mean();
            (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (row.len() - 1) as f64).sqrt()
        };
        let (sd1, sd4) = (sd_for(100), sd_for(400));
        assert!((sd1 / sd4 - 2.0).abs() < 0.35, "ratio {}", sd1 / sd4);
    }

    #[test]
    fn pulse_ensemble_tracks_linear_mean() {
        use std::sync::Arc;
        let model = SystemModel {
            state_dim: 1,
            control_dim: 1,
            objective_dim: 1,
            drift: Arc::new(|x, _| -x.clone()),
            gain: Arc::new(|_, _| DMatrix::from_element(1, 1, 1.0)),
            objective: Arc::new(|x, _| x.clone()),
            state_bound: (DVector::from_element(1, -1e9), DVector::from_element(1, 1e9)),
            drift_jacobian: None,
            objective_jacobian: None,
            lipschitz_c1: 1.0,
        };
        let noise = NoiseSpec::new(0.25, vec![1.0], 5.0).unwrap();
        let horizon = Horizon::new(0.5, 0.5, 1e-3, 5e-3).unwrap();
        let s = schedule_with(&[0.4; 200]);
        let n = 200;
        let sp = spec(n, EnsembleSpec::default_gamma(&noise, 5e-3, n), 5e-3);
        let rates = rates_from_schedule(&s, &noise, &sp).unwrap();
        let ens =
            run_pulse_ensemble(&model, &horizon, &rates, &sp, &DVector::zeros(1), 600, 21).unwrap();
        // E x(t) for dx/dt = -x + u with u ~ 2, x0 = 0 is 2(1 - e^{-t});
        // the horizon ends at t = 1.
        let expected = 2.0 * (1.0 - (-1.0f64).exp());
        let last = ens.mean.last().unwrap()[0];
        assert!((last - expected).abs() < 0.05, "mean {last}");
        assert!(ens.exec_error > 0.0);
        let again =
            run_pulse_ensemble(&model, &horizon, &rates, &sp, &DVector::zeros(1), 600, 21).unwrap();
        assert_eq!(again.exec_error.to_bits(), ens.exec_error.to_bits());
    }
}
