//! Adaptive quadrature used by the closed-form linear benchmark.
//!
//! A 10-point Gauss–Legendre rule is applied on each interval; the interval
//! is bisected until the whole-interval estimate agrees with the sum of the
//! half-interval estimates. Nodes and weights are computed once by Newton
//! iteration on the Legendre recurrence, so no tabulated constants are
//! needed.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const ORDER: usize = 10;

fn legendre_nodes() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static CACHE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    CACHE.get_or_init(|| {
        let n = ORDER;
        let mut nodes = [0.0; ORDER];
        let mut weights = [0.0; ORDER];
        for i in 0..n {
            // Chebyshev-like starting guess for the i-th root of P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                // Evaluate P_n and P_n' via the three-term recurrence.
                let (mut p0, mut p1) = (1.0f64, x);
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

fn fixed_rule<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = legendre_nodes();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..ORDER {
        acc += weights[i] * f(c + h * nodes[i]);
    }
    acc * h
}

fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    rel_tol: f64,
    abs_tol: f64,
    abs_floor: f64,
    depth: u32,
) -> Result<f64> {
    let mid = 0.5 * (a + b);
    let left = fixed_rule(f, a, mid);
    let right = fixed_rule(f, mid, b);
    let refined = left + right;
    let err = (refined - whole).abs();
    if err <= abs_tol + rel_tol * refined.abs() {
        return Ok(refined);
    }
    if depth == 0 {
        return Err(Error::Numeric(format!(
            "quadrature did not converge on [{a}, {b}] (residual {err:.3e})"
        )));
    }
    // Halving the absolute budget on every bisection would underflow near an
    // integrable singularity; stop tightening once the budget reaches the
    // rounding floor of the whole-interval estimate.
    let half_abs = (0.5 * abs_tol).max(abs_floor);
    Ok(adaptive(f, a, mid, left, rel_tol, half_abs, abs_floor, depth - 1)?
        + adaptive(f, mid, b, right, rel_tol, half_abs, abs_floor, depth - 1)?)
}

/// Integrate `f` over `[a, b]` to relative tolerance `rel_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let whole = fixed_rule(&f, a, b);
    let abs_tol = 1e-300f64.max(rel_tol * whole.abs() * 1e-3) + 1e-15 * (b - a).abs();
    let abs_floor = f64::EPSILON * (1.0 + whole.abs());
    adaptive(&f, a, b, whole, rel_tol, abs_tol, abs_floor, 48)
}

/// Integrate with breakpoints where the integrand is only piecewise smooth.
pub fn integrate_piecewise<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    rel_tol: f64,
) -> Result<f64> {
    let mut pts: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|t| *t > a && *t < b))
        .chain(std::iter::once(b))
        .collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut acc = 0.0;
    for w in pts.windows(2) {
        acc += integrate(&f, w[0], w[1], rel_tol)?;
    }
    Ok(acc)
}
