//! Two-link planar arm: mass and Coriolis matrices, joint accelerations,
//! forward/inverse kinematics, and packaging as a [`SystemModel`] with state
//! `(theta_1, theta_2, omega_1, omega_2)` and two torque channels.
//!
//! Gravity, viscosity and muscle dynamics are deliberately absent.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::model::SystemModel;

/// Physical parameters of the arm. `l` are segment lengths (used by the
/// kinematics), `r` are mass-center distances (used by the dynamics).
#[derive(Clone, Debug)]
pub struct ArmParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub i1: f64,
    pub i2: f64,
    pub r1: f64,
    pub r2: f64,
    /// Torque scale applied to the control channels.
    pub gamma0: f64,
    /// Signal-dependent noise scale on the torque channels.
    pub kappa0: f64,
}

impl ArmParams {
    /// Human-arm reference values (masses in kg, lengths in m, inertias in
    /// kg m^2). `kappa0` is expressed for time in seconds.
    pub fn reference() -> Self {
        Self {
            m1: 2.28,
            m2: 1.31,
            l1: 0.305,
            l2: 0.254,
            i1: 0.022,
            i2: 0.0077,
            r1: 0.133,
            r2: 0.109,
            gamma0: 1.0,
            kappa0: 1.0 / 1000f64.sqrt(),
        }
    }

    /// Coupling constant `k = m2 l1 r2`.
    pub fn k(&self) -> f64 {
        self.m2 * self.l1 * self.r2
    }
}

/// Joint state: angles and angular velocities.
#[derive(Clone, Copy, Debug)]
pub struct ArmState {
    pub theta: Vector2<f64>,
    pub theta_dot: Vector2<f64>,
}

/// Inertia matrix `N(theta)` (symmetric, positive definite away from the
/// folded configuration).
pub fn mass_matrix(params: &ArmParams, theta: &Vector2<f64>) -> Matrix2<f64> {
    let k = params.k();
    let n22 = params.i2 + params.m2 * params.r2 * params.r2;
    let n12 = n22 + k * theta[1].cos();
    let n11 = params.i1
        + params.m1 * params.r1 * params.r1
        + params.m2 * params.l1 * params.l1
        + n22
        + 2.0 * k * theta[1].cos();
    Matrix2::new(n11, n12, n12, n22)
}

/// Velocity-coupling matrix `C(theta, theta_dot) = k sin(theta_2) *
/// [[-w2, -(w1 + w2)], [w1, 0]]`.
///
/// The sign of the first row is fixed by the Euler–Lagrange equations for
/// the kinetic energy `E = theta_dot' N theta_dot / 2`: it is the unique
/// choice for which `dN/dt - 2C` is skew-symmetric, so the passive dynamics
/// `N theta_dd + C theta_d = 0` conserve `E`. (A common transcription of
/// this matrix flips the first-row signs; that variant pumps energy.)
pub fn coriolis_matrix(params: &ArmParams, theta: &Vector2<f64>, theta_dot: &Vector2<f64>) -> Matrix2<f64> {
    let s = params.k() * theta[1].sin();
    let (w1, w2) = (theta_dot[0], theta_dot[1]);
    Matrix2::new(-s * w2, -s * (w1 + w2), s * w1, 0.0)
}

/// Joint accelerations from `N theta_dd + C theta_d = gamma0 Q`.
pub fn accel(params: &ArmParams, state: &ArmState, torque: &Vector2<f64>) -> Result<Vector2<f64>> {
    let n = mass_matrix(params, &state.theta);
    let det = n.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::Numeric(format!("singular inertia matrix (det = {det:.3e}) at theta2 = {}", state.theta[1])));
    }
    let c = coriolis_matrix(params, &state.theta, &state.theta_dot);
    let rhs = params.gamma0 * torque - c * state.theta_dot;
    Ok(n.try_inverse().expect("determinant checked") * rhs)
}

/// Hand position of the planar chain.
pub fn forward_kinematics(params: &ArmParams, theta: &Vector2<f64>) -> Vector2<f64> {
    let (t1, t12) = (theta[0], theta[0] + theta[1]);
    Vector2::new(
        params.l1 * t1.cos() + params.l2 * t12.cos(),
        params.l1 * t1.sin() + params.l2 * t12.sin(),
    )
}

/// Jacobian of the hand position with respect to the joint angles.
pub fn hand_jacobian(params: &ArmParams, theta: &Vector2<f64>) -> Matrix2<f64> {
    let (t1, t12) = (theta[0], theta[0] + theta[1]);
    Matrix2::new(
        -params.l1 * t1.sin() - params.l2 * t12.sin(),
        -params.l2 * t12.sin(),
        params.l1 * t1.cos() + params.l2 * t12.cos(),
        params.l2 * t12.cos(),
    )
}

/// Joint angles reaching `hand`, elbow-positive branch
/// (`theta_2 = arccos[(x1^2 + x2^2 - l1^2 - l2^2) / (2 l1 l2)]`).
pub fn inverse_kinematics(params: &ArmParams, hand: &Vector2<f64>) -> Result<Vector2<f64>> {
    let d2 = hand.norm_squared();
    let (l1, l2) = (params.l1, params.l2);
    let d = d2.sqrt();
    if d > l1 + l2 + 1e-12 || d < (l1 - l2).abs() - 1e-12 {
        return Err(Error::Usage(format!(
            "hand at distance {d:.6} outside the reachable annulus [{:.6}, {:.6}]",
            (l1 - l2).abs(),
            l1 + l2
        )));
    }
    let mut cos_t2 = ((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    // acos is ill-conditioned at the annulus boundary (error ~ sqrt(eps));
    // snap to the exact straight/folded configuration there.
    if 1.0 - cos_t2.abs() < 1e-14 {
        cos_t2 = cos_t2.signum();
    }
    let t2 = cos_t2.acos();
    let t1 = hand[1].atan2(hand[0]) - (l2 * t2.sin()).atan2(l1 + l2 * cos_t2);
    Ok(Vector2::new(t1, t2))
}

/// Objective choice for [`as_system_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// `phi(x) = (theta_1, theta_2)` — targets given in joint space.
    Angles,
    /// `phi(x) = forward_kinematics(theta)` — hand-coordinate variance.
    Hand,
}

/// Package the arm as a 4-state [`SystemModel`] with torque controls.
/// Noise enters only through the torque channels, so the gain matrix has
/// zero rows for the two angle coordinates.
pub fn as_system_model(params: &ArmParams, mode: ObjectiveMode) -> SystemModel {
    let p_drift = params.clone();
    let p_gain = params.clone();
    let p_obj = params.clone();
    let p_jac = params.clone();
    let lipschitz = match mode {
        ObjectiveMode::Angles => 1.0,
        ObjectiveMode::Hand => params.l1 + params.l2,
    };
    let max_t2 = std::f64::consts::PI - 1e-6;
    SystemModel {
        state_dim: 4,
        control_dim: 2,
        objective_dim: 2,
        drift: Arc::new(move |x, _| {
            let st = ArmState {
                theta: Vector2::new(x[0], x[1]),
                theta_dot: Vector2::new(x[2], x[3]),
            };
            let acc = accel(&p_drift, &st, &Vector2::zeros()).unwrap_or_else(|_| Vector2::new(f64::NAN, f64::NAN));
            DVector::from_vec(vec![x[2], x[3], acc[0], acc[1]])
        }),
        gain: Arc::new(move |x, _| {
            let n = mass_matrix(&p_gain, &Vector2::new(x[0], x[1]));
            let inv = n.try_inverse().unwrap_or_else(|| Matrix2::from_element(f64::NAN));
            let mut b = DMatrix::zeros(4, 2);
            for r in 0..2 {
                for c in 0..2 {
                    b[(r + 2, c)] = p_gain.gamma0 * inv[(r, c)];
                }
            }
            b
        }),
        objective: Arc::new(move |x, _| {
            let theta = Vector2::new(x[0], x[1]);
            match mode {
                ObjectiveMode::Angles => DVector::from_vec(vec![x[0], x[1]]),
                ObjectiveMode::Hand => {
                    let h = forward_kinematics(&p_obj, &theta);
                    DVector::from_vec(vec![h[0], h[1]])
                }
            }
        }),
        state_bound: (
            DVector::from_vec(vec![-2.0 * std::f64::consts::PI, -max_t2, -500.0, -500.0]),
            DVector::from_vec(vec![2.0 * std::f64::consts::PI, max_t2, 500.0, 500.0]),
        ),
        drift_jacobian: None,
        objective_jacobian: Some(Arc::new(move |x, _| {
            let mut j = DMatrix::zeros(2, 4);
            match mode {
                ObjectiveMode::Angles => {
                    j[(0, 0)] = 1.0;
                    j[(1, 1)] = 1.0;
                }
                ObjectiveMode::Hand => {
                    let hj = hand_jacobian(&p_jac, &Vector2::new(x[0], x[1]));
                    for r in 0..2 {
                        for c in 0..2 {
                            j[(r, c)] = hj[(r, c)];
                        }
                    }
                }
            }
            j
        })),
        lipschitz_c1: lipschitz,
    }
}

/// Kinetic energy `0.5 theta_dot^T N theta_dot`.
pub fn kinetic_energy(params: &ArmParams, state: &ArmState) -> f64 {
    let n = mass_matrix(params, &state.theta);
    0.5 * state.theta_dot.dot(&(n * state.theta_dot))
}

/// Inverse-dynamics torques along a minimum-jerk joint trajectory from
/// `theta0` (at rest) to `theta_t` over `[0, reach_time]`, zero afterwards.
/// Used to warm-start the shooting solver for the reach task.
pub fn min_jerk_torques(
    params: &ArmParams,
    theta0: Vector2<f64>,
    theta_t: Vector2<f64>,
    reach_time: f64,
) -> impl Fn(f64) -> DVector<f64> + Clone + Send + Sync {
    let p = params.clone();
    let delta = theta_t - theta0;
    move |t: f64| {
        if t >= reach_time {
            return DVector::zeros(2);
        }
        let s = t / reach_time;
        let pos = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
        let vel = (30.0 * s.powi(2) - 60.0 * s.powi(3) + 30.0 * s.powi(4)) / reach_time;
        let acc = (60.0 * s - 180.0 * s.powi(2) + 120.0 * s.powi(3)) / (reach_time * reach_time);
        let theta = theta0 + delta * pos;
        let theta_dot = delta * vel;
        let theta_dd = delta * acc;
        let n = mass_matrix(&p, &theta);
        let c = coriolis_matrix(&p, &theta, &theta_dot);
        let q = (n * theta_dd + c * theta_dot) / p.gamma0;
        DVector::from_vec(vec![q[0], q[1]])
    }
}

/// Trajectory export in `t,theta1,theta2,omega1,omega2,x1,x2` form.
pub fn trajectory_csv(params: &ArmParams, times: &[f64], states: &[DVector<f64>]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("t,theta1,theta2,omega1,omega2,x1,x2\n");
    for (t, x) in times.iter().zip(states) {
        let hand = forward_kinematics(params, &Vector2::new(x[0], x[1]));
        let _ = writeln!(
            out,
            "{t:.9e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            x[0], x[1], x[2], x[3], hand[0], hand[1]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn mass_matrix_reference_values() {
        let p = ArmParams::reference();
        let n = mass_matrix(&p, &Vector2::new(0.0, FRAC_PI_2));
        assert_relative_eq!(n[(0, 0)], 0.207458, epsilon = 1e-6);
        assert_relative_eq!(n[(0, 1)], 0.023264, epsilon = 1e-6);
        assert_relative_eq!(n[(1, 0)], 0.023264, epsilon = 1e-6);
        assert_relative_eq!(n[(1, 1)], 0.023264, epsilon = 1e-6);
    }

    #[test]
    fn mass_matrix_cosine_endpoints() {
        let p = ArmParams::reference();
        let n0 = mass_matrix(&p, &Vector2::new(0.3, 0.0));
        let npi = mass_matrix(&p, &Vector2::new(0.3, PI));
        assert_relative_eq!(n0[(0, 0)] - npi[(0, 0)], 4.0 * p.k(), max_relative = 1e-12);
        assert_relative_eq!(n0[(0, 1)], n0[(1, 0)], max_relative = 1e-14);
    }

    #[test]
    fn coriolis_reference_values() {
        let p = ArmParams::reference();
        assert_relative_eq!(p.k(), 0.043550, epsilon = 5e-6);
        let c = coriolis_matrix(&p, &Vector2::new(0.0, FRAC_PI_2), &Vector2::new(1.0, 2.0));
        let k = p.k();
        // Entry magnitudes |C| = k sin(theta_2) [[w2, w1+w2],[w1, 0]];
        // signs are the energy-conserving convention (see coriolis_matrix).
        assert_relative_eq!(c[(0, 0)], -2.0 * k, max_relative = 1e-12);
        assert_relative_eq!(c[(0, 1)], -3.0 * k, max_relative = 1e-12);
        assert_relative_eq!(c[(1, 0)], k, max_relative = 1e-12);
        assert_eq!(c[(1, 1)], 0.0);
    }

    #[test]
    fn coriolis_vanishes_at_rest_and_straight_elbow() {
        let p = ArmParams::reference();
        assert_eq!(coriolis_matrix(&p, &Vector2::new(0.5, 1.0), &Vector2::zeros()).norm(), 0.0);
        assert_eq!(coriolis_matrix(&p, &Vector2::new(0.5, 0.0), &Vector2::new(3.0, -2.0)).norm(), 0.0);
    }

    #[test]
    fn accel_reference_and_linearity() {
        let p = ArmParams::reference();
        let rest = ArmState { theta: Vector2::new(0.0, FRAC_PI_2), theta_dot: Vector2::zeros() };
        assert_eq!(accel(&p, &rest, &Vector2::zeros()).unwrap().norm(), 0.0);
        let a = accel(&p, &rest, &Vector2::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(a[0], 5.4295, epsilon = 2e-3);
        assert_relative_eq!(a[1], -5.4295, epsilon = 2e-3);
        let mut p2 = p.clone();
        p2.gamma0 = 2.0;
        let a2 = accel(&p2, &rest, &Vector2::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(a2[0], 2.0 * a[0], max_relative = 1e-12);
    }

    #[test]
    fn accel_satisfies_constraint_residual() {
        let p = ArmParams::reference();
        let st = ArmState { theta: Vector2::new(-0.4, 1.1), theta_dot: Vector2::new(0.7, -1.3) };
        let q = Vector2::new(0.3, -0.2);
        let a = accel(&p, &st, &q).unwrap();
        let res = mass_matrix(&p, &st.theta) * a + coriolis_matrix(&p, &st.theta, &st.theta_dot) * st.theta_dot
            - p.gamma0 * q;
        assert!(res.norm() < 1e-10, "constraint residual {}", res.norm());
    }

    #[test]
    fn kinematics_reference_points() {
        let p = ArmParams::reference();
        let hand = forward_kinematics(&p, &Vector2::new(-FRAC_PI_2, FRAC_PI_2));
        assert_relative_eq!(hand[0], 0.254, epsilon = 1e-12);
        assert_relative_eq!(hand[1], -0.305, epsilon = 1e-12);
        let straight = forward_kinematics(&p, &Vector2::zeros());
        assert_relative_eq!(straight[0], 0.559, epsilon = 1e-12);
        assert_relative_eq!(straight[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_kinematics_round_trip() {
        let p = ArmParams::reference();
        let th = inverse_kinematics(&p, &Vector2::new(0.254, -0.305)).unwrap();
        assert_relative_eq!(th[0], -FRAC_PI_2, epsilon = 1e-9);
        assert_relative_eq!(th[1], FRAC_PI_2, epsilon = 1e-9);
        let th = inverse_kinematics(&p, &Vector2::new(p.l1 + p.l2, 0.0)).unwrap();
        assert!(th.norm() < 1e-9);
        assert!(inverse_kinematics(&p, &Vector2::new(0.01, 0.0)).is_err());
    }

    #[test]
    fn round_trip_random_states() {
        use rand::{Rng, SeedableRng};
        let p = ArmParams::reference();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let theta = Vector2::new(rng.random_range(-PI..PI), rng.random_range(0.05..PI - 0.05));
            let hand = forward_kinematics(&p, &theta);
            let back = inverse_kinematics(&p, &hand).unwrap();
            let wrapped = (back[0] - theta[0] + PI).rem_euclid(2.0 * PI) - PI;
            assert!(wrapped.abs() < 1e-9 && (back[1] - theta[1]).abs() < 1e-9);
            assert!(hand.norm() <= p.l1 + p.l2 + 1e-12);
        }
    }

    #[test]
    fn system_model_gain_matches_accel() {
        let p = ArmParams::reference();
        let m = as_system_model(&p, ObjectiveMode::Angles);
        let x = DVector::from_vec(vec![0.0, FRAC_PI_2, 0.0, 0.0]);
        let b = (m.gain)(&x, 0.0);
        // Upper rows are zero (noise enters only the torques).
        assert_eq!(b[(0, 0)], 0.0);
        assert_eq!(b[(1, 1)], 0.0);
        let rest = ArmState { theta: Vector2::new(0.0, FRAC_PI_2), theta_dot: Vector2::zeros() };
        let a = accel(&p, &rest, &Vector2::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(b[(2, 0)], a[0], max_relative = 1e-12);
        assert_relative_eq!(b[(3, 0)], a[1], max_relative = 1e-12);
    }

    #[test]
    fn hand_jacobian_matches_finite_differences() {
        let p = ArmParams::reference();
        let theta = Vector2::new(-0.8, 1.2);
        let j = hand_jacobian(&p, &theta);
        let h = 1e-7;
        for c in 0..2 {
            let mut tp = theta;
            tp[c] += h;
            let mut tm = theta;
            tm[c] -= h;
            let d = (forward_kinematics(&p, &tp) - forward_kinematics(&p, &tm)) / (2.0 * h);
            assert_relative_eq!(j[(0, c)], d[0], epsilon = 1e-6);
            assert_relative_eq!(j[(1, c)], d[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn passive_swing_conserves_energy() {
        // Q = 0, no noise: kinetic energy is conserved because C transfers
        // energy skew-symmetrically for this parameterization.
        let p = ArmParams::reference();
        let mut st = ArmState {
            theta: Vector2::new(-FRAC_PI_2, FRAC_PI_2),
            theta_dot: Vector2::new(2.0, -1.0),
        };
        let e0 = kinetic_energy(&p, &st);
        let dt = 1e-5;
        for _ in 0..10_000 {
            let a = accel(&p, &st, &Vector2::zeros()).unwrap();
            st.theta += st.theta_dot * dt;
            st.theta_dot += a * dt;
        }
        let e1 = kinetic_energy(&p, &st);
        assert!((e1 - e0).abs() / e0 < 1e-3, "energy drift {:.3e}", (e1 - e0).abs() / e0);
    }

    #[test]
    fn min_jerk_torques_recover_target() {
        let p = ArmParams::reference();
        let theta0 = Vector2::new(-FRAC_PI_2, FRAC_PI_2);
        let theta_t = Vector2::new(-1.0, FRAC_PI_2);
        let torques = min_jerk_torques(&p, theta0, theta_t, 0.65);
        let mut st = ArmState { theta: theta0, theta_dot: Vector2::zeros() };
        let dt = 1e-4;
        for i in 0..6500 {
            let q = torques(i as f64 * dt);
            let a = accel(&p, &st, &Vector2::new(q[0], q[1])).unwrap();
            st.theta += st.theta_dot * dt;
            st.theta_dot += a * dt;
        }
        assert!((st.theta - theta_t).norm() < 2e-3, "reach error {}", (st.theta - theta_t).norm());
        assert!(st.theta_dot.norm() < 2e-2);
    }
}
