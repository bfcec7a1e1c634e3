//! Pointwise analysis of the integrand `h(xi) = g |xi|^{2 alpha} - f xi` on
//! `[-M_Y, M_Y]`: evaluation, argmin classification, and the coefficient
//! value at which the zero and boundary minima tie.

use crate::error::{Error, Result};

/// Point values of the integrand coefficients at one time.
#[derive(Clone, Copy, Debug)]
pub struct IntegrandCoeffs {
    pub g: f64,
    pub f: f64,
    pub alpha: f64,
    pub m_y: f64,
}

impl IntegrandCoeffs {
    pub fn new(g: f64, f: f64, alpha: f64, m_y: f64) -> Result<Self> {
        if m_y <= 0.0 {
            return Err(Error::Usage("m_y must be positive".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Usage("alpha must be in (0, 1]".into()));
        }
        Ok(Self { g, f, alpha, m_y })
    }
}

/// Qualitative shape of the minimizer set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MinimaRegime {
    /// A single minimizer strictly inside or at a unique point.
    InteriorUnique,
    /// A single minimizer pinned at `+M_Y` or `-M_Y`.
    Boundary,
    /// Two (or more) minimizers tie within tolerance; the measure may split
    /// its mass between them.
    DegenerateTie,
}

/// Minimizer set of the integrand together with the attained value.
#[derive(Clone, Debug)]
pub struct MinimaReport {
    pub argmin_set: Vec<f64>,
    pub min_value: f64,
    pub regime: MinimaRegime,
}

/// Evaluate `g |xi|^{2 alpha} - f xi`; `xi` must lie in `[-M_Y, M_Y]`.
pub fn integrand(c: &IntegrandCoeffs, xi: f64) -> Result<f64> {
    if xi.abs() > c.m_y {
        return Err(Error::Usage(format!("xi = {xi} outside [-{m}, {m}]", m = c.m_y)));
    }
    Ok(c.g * xi.abs().powf(2.0 * c.alpha) - c.f * xi)
}

fn h(c: &IntegrandCoeffs, xi: f64) -> f64 {
    c.g * xi.abs().powf(2.0 * c.alpha) - c.f * xi
}

/// Classify the minimizers of the integrand on `[-M_Y, M_Y]`.
///
/// `tie_tol` is the absolute band within which competing values count as
/// tied (callers typically pass `1e-9 * scale`).
pub fn classify_minima(c: &IntegrandCoeffs, tie_tol: f64) -> Result<MinimaReport> {
    if tie_tol <= 0.0 {
        return Err(Error::Usage("tie_tol must be positive".into()));
    }
    let m = c.m_y;
    let side = if c.f >= 0.0 { m } else { -m };

    if c.g == 0.0 {
        // Pure linear term.
        if c.f == 0.0 {
            return Ok(MinimaReport {
                argmin_set: vec![-m, 0.0, m],
                min_value: 0.0,
                regime: MinimaRegime::DegenerateTie,
            });
        }
        return Ok(MinimaReport {
            argmin_set: vec![side],
            min_value: h(c, side),
            regime: MinimaRegime::Boundary,
        });
    }

    if c.g < 0.0 {
        // Concave power term: minimum always sits on the boundary.
        let (hp, hm) = (h(c, m), h(c, -m));
        if (hp - hm).abs() <= tie_tol {
            return Ok(MinimaReport {
                argmin_set: vec![-m, m],
                min_value: hp.min(hm),
                regime: MinimaRegime::DegenerateTie,
            });
        }
        let best = if hp < hm { m } else { -m };
        return Ok(MinimaReport {
            argmin_set: vec![best],
            min_value: hp.min(hm),
            regime: MinimaRegime::Boundary,
        });
    }

    // g > 0 from here on.
    if c.f == 0.0 {
        return Ok(MinimaReport { argmin_set: vec![0.0], min_value: 0.0, regime: MinimaRegime::InteriorUnique });
    }

    if c.alpha > 0.5 {
        // Convex in |xi|: unique stationary point, clamped to the boundary.
        let interior = (c.f.abs() / (2.0 * c.alpha * c.g)).powf(1.0 / (2.0 * c.alpha - 1.0));
        if interior < m {
            let xi = interior.copysign(c.f);
            return Ok(MinimaReport {
                argmin_set: vec![xi],
                min_value: h(c, xi),
                regime: MinimaRegime::InteriorUnique,
            });
        }
        return Ok(MinimaReport { argmin_set: vec![side], min_value: h(c, side), regime: MinimaRegime::Boundary });
    }

    if c.alpha == 0.5 {
        // Piecewise linear in |xi|: slope (g - |f|) on the favored side.
        let slope = c.g - c.f.abs();
        if slope.abs() * m <= tie_tol {
            return Ok(MinimaReport {
                argmin_set: vec![0.0, side],
                min_value: 0.0f64.min(h(c, side)),
                regime: MinimaRegime::DegenerateTie,
            });
        }
        if slope > 0.0 {
            return Ok(MinimaReport { argmin_set: vec![0.0], min_value: 0.0, regime: MinimaRegime::InteriorUnique });
        }
        return Ok(MinimaReport { argmin_set: vec![side], min_value: h(c, side), regime: MinimaRegime::Boundary });
    }

    // alpha < 0.5, g > 0: candidates are 0 and the boundary on the side of f.
    let hb = h(c, side);
    if hb.abs() <= tie_tol {
        return Ok(MinimaReport {
            argmin_set: vec![0.0, side],
            min_value: hb.min(0.0),
            regime: MinimaRegime::DegenerateTie,
        });
    }
    if hb < 0.0 {
        Ok(MinimaReport { argmin_set: vec![side], min_value: hb, regime: MinimaRegime::Boundary })
    } else {
        Ok(MinimaReport { argmin_set: vec![0.0], min_value: 0.0, regime: MinimaRegime::InteriorUnique })
    }
}

/// The `f` value at which `h(0) = h(M_Y)` for `g > 0`, `alpha < 0.5`:
/// `f = g M_Y^{2 alpha - 1}`. At exactly this coefficient the measure may
/// keep mass on both `0` and the boundary.
pub fn tie_coefficient(c: &IntegrandCoeffs) -> Result<f64> {
    if c.g <= 0.0 || c.alpha >= 0.5 {
        return Err(Error::Usage("tie_coefficient requires g > 0 and alpha < 0.5".into()));
    }
    Ok(c.g * c.m_y.powf(2.0 * c.alpha - 1.0))
}

/// Brute-force grid argmin used as the independent oracle in tests and in
/// the acceptance suite: evaluates `points` uniform samples of `h` on
/// `[-M_Y, M_Y]` and returns every grid point within the tie band of the
/// grid minimum, collapsed to cluster representatives.
pub fn grid_search_argmin(c: &IntegrandCoeffs, points: usize, tie_tol: f64) -> (Vec<f64>, f64) {
    let m = c.m_y;
    let step = 2.0 * m / (points - 1) as f64;
    let mut min_val = f64::INFINITY;
    for i in 0..points {
        let xi = -m + step * i as f64;
        min_val = min_val.min(h(c, xi));
    }
    let mut reps: Vec<f64> = Vec::new();
    let mut last_in_band = f64::NEG_INFINITY;
    let mut best_in_cluster = (f64::NAN, f64::INFINITY);
    for i in 0..points {
        let xi = -m + step * i as f64;
        let v = h(c, xi);
        if v <= min_val + tie_tol {
            if xi - last_in_band > 2.0 * step && best_in_cluster.0.is_finite() {
                reps.push(best_in_cluster.0);
                best_in_cluster = (f64::NAN, f64::INFINITY);
            }
            if v < best_in_cluster.1 {
                best_in_cluster = (xi, v);
            }
            last_in_band = xi;
        }
    }
    if best_in_cluster.0.is_finite() {
        reps.push(best_in_cluster.0);
    }
    (reps, min_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn coeffs(g: f64, f: f64, alpha: f64, m_y: f64) -> IntegrandCoeffs {
        IntegrandCoeffs::new(g, f, alpha, m_y).unwrap()
    }

    #[test]
    fn integrand_values() {
        let c = coeffs(1.0, 2.0, 0.25, 10.0);
        assert_eq!(integrand(&c, 0.0).unwrap(), 0.0);
        assert_relative_eq!(integrand(&c, 10.0).unwrap(), 10.0f64.sqrt() - 20.0, max_relative = 1e-12);
        let c = coeffs(1.0, 0.0, 0.8, 10.0);
        assert_relative_eq!(integrand(&c, -1.0).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn integrand_rejects_out_of_domain() {
        let c = coeffs(1.0, 2.0, 0.25, 10.0);
        assert!(matches!(integrand(&c, 10.5), Err(Error::Usage(_))));
    }

    #[test]
    fn supra_poisson_interior_minimum() {
        // Stationarity: (f / (2 alpha g))^{1/(2 alpha - 1)}.
        let c = coeffs(1.0, 2.0, 0.8, 10.0);
        let r = classify_minima(&c, 1e-9).unwrap();
        assert_eq!(r.regime, MinimaRegime::InteriorUnique);
        let expected = (2.0f64 / 1.6).powf(1.0 / 0.6);
        assert_relative_eq!(r.argmin_set[0], expected, max_relative = 1e-12);
        assert_relative_eq!(r.argmin_set[0], 1.4505, max_relative = 1e-4);
    }

    #[test]
    fn sub_poisson_boundary_minimum() {
        let c = coeffs(1.0, 2.0, 0.25, 10.0);
        let r = classify_minima(&c, 1e-9).unwrap();
        assert_eq!(r.argmin_set, vec![10.0]);
        assert_relative_eq!(r.min_value, 10.0f64.sqrt() - 20.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_f_keeps_zero_minimum() {
        for alpha in [0.2, 0.5, 0.9] {
            let r = classify_minima(&coeffs(1.0, 0.0, alpha, 5.0), 1e-9).unwrap();
            assert_eq!(r.argmin_set, vec![0.0]);
        }
    }

    #[test]
    fn negative_g_goes_to_boundary() {
        // Table row g < 0.
        let r = classify_minima(&coeffs(-1.0, 1.0, 0.25, 10.0), 1e-9).unwrap();
        assert_eq!(r.argmin_set, vec![10.0]);
        let r = classify_minima(&coeffs(-1.0, -1.0, 0.25, 10.0), 1e-9).unwrap();
        assert_eq!(r.argmin_set, vec![-10.0]);
        let r = classify_minima(&coeffs(-1.0, 0.0, 0.25, 10.0), 1e-9).unwrap();
        assert_eq!(r.regime, MinimaRegime::DegenerateTie);
        assert_eq!(r.argmin_set, vec![-10.0, 10.0]);
    }

    #[test]
    fn tie_coefficient_values() {
        let c = coeffs(1.0, 0.0, 0.25, 10.0);
        let f_tie = tie_coefficient(&c).unwrap();
        assert_relative_eq!(f_tie, 10.0f64.powf(-0.5), max_relative = 1e-12);

        let c2 = coeffs(2.0, 0.0, 0.3, 1.0);
        assert_relative_eq!(tie_coefficient(&c2).unwrap(), 2.0, max_relative = 1e-12);

        let c3 = coeffs(1.0, 0.0, 0.4999999, 10.0);
        assert_relative_eq!(tie_coefficient(&c3).unwrap(), 1.0, max_relative = 1e-5);

        // At exactly the tie value the classifier reports both points.
        let at_tie = coeffs(1.0, f_tie, 0.25, 10.0);
        let r = classify_minima(&at_tie, 1e-9).unwrap();
        assert_eq!(r.regime, MinimaRegime::DegenerateTie);
        assert_eq!(r.argmin_set, vec![0.0, 10.0]);
    }

    #[test]
    fn tie_coefficient_domain_errors() {
        assert!(tie_coefficient(&coeffs(-1.0, 0.0, 0.25, 10.0)).is_err());
        assert!(tie_coefficient(&coeffs(1.0, 0.0, 0.8, 10.0)).is_err());
    }

    #[test]
    fn odd_symmetry_in_f() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g: f64 = rng.random_range(-2.0..2.0);
            let f: f64 = rng.random_range(-3.0..3.0);
            let alpha: f64 = rng.random_range(0.05..1.0);
            let m_y: f64 = rng.random_range(0.5..50.0);
            let a = classify_minima(&coeffs(g, f, alpha, m_y), 1e-9).unwrap();
            let b = classify_minima(&coeffs(g, -f, alpha, m_y), 1e-9).unwrap();
            let mut mirrored: Vec<f64> = b.argmin_set.iter().map(|x| -x).collect();
            mirrored.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mut orig = a.argmin_set.clone();
            orig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(orig.len(), mirrored.len());
            for (u, v) in orig.iter().zip(mirrored.iter()) {
                assert_relative_eq!(u, v, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn never_both_boundaries_for_positive_g() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let c = coeffs(
                rng.random_range(0.01..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.05..0.499),
                rng.random_range(0.5..100.0),
            );
            let r = classify_minima(&c, 1e-9).unwrap();
            let has_pos = r.argmin_set.iter().any(|x| *x > 0.0);
            let has_neg = r.argmin_set.iter().any(|x| *x < 0.0);
            assert!(!(has_pos && has_neg), "both boundaries reported for {c:?}");
        }
    }

    #[test]
    fn grid_oracle_agrees_on_random_draws() {
        // Smaller than the acceptance sweep; the full 1e6-point oracle runs there.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let c = coeffs(
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.05..1.0),
                rng.random_range(0.5..50.0),
            );
            // Two passes: the band scales with the attained minimum.
            let first = classify_minima(&c, 1e-12).unwrap();
            let band = 1e-9 * first.min_value.abs() + 1e-12;
            let r = classify_minima(&c, band).unwrap();
            let (grid, grid_min) = grid_search_argmin(&c, 200_001, band);
            let spacing = 2.0 * c.m_y / 200_000.0;
            assert!((grid_min - r.min_value).abs() <= 1e-6 * (1.0 + r.min_value.abs()));
            for xi in &r.argmin_set {
                assert!(
                    grid.iter().any(|g| (g - xi).abs() <= 2.0 * spacing),
                    "classified {xi} missing from grid set {grid:?} for {c:?}"
                );
            }
            for gxi in &grid {
                assert!(
                    r.argmin_set.iter().any(|xi| (gxi - xi).abs() <= 2.0 * spacing),
                    "grid point {gxi} missing from classified {:?} for {c:?}",
                    r.argmin_set
                );
            }
        }
    }
}
