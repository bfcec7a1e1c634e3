//! Minimum-variance stochastic control with signal-dependent noise.
//!
//! The controlled plant is `dx = A(x,t,lambda) dt + B(x,t,lambda) dW` where
//! the noise intensity scales as `kappa |lambda|^alpha` with the control
//! magnitude. For dispersion index `alpha < 1/2` the pointwise cost of
//! control is concave near zero, so optimal controls are measure-valued:
//! each channel mixes the three levels `{-M_Y, 0, +M_Y}` with per-bin
//! weights, and the execution error of the realized control decays like a
//! power of the bound `M_Y`.
//!
//! The crate provides:
//! - the shared plant/measure types ([`model`]),
//! - closed-form references for the scalar linear benchmark ([`linear`]),
//! - pointwise minima analysis of the control integrand ([`hamiltonian`]),
//! - Euler–Maruyama Monte Carlo with chattering realizations ([`sim`]),
//! - mean/covariance propagation ([`moments`]) and a schedule optimizer
//!   ([`optimizer`]),
//! - a two-link arm plant ([`arm`]) and spike-train control ([`pulse`]),
//! - the configuration-driven experiment harness ([`experiments`]) used by
//!   the `young-control` binary.

pub mod arm;
pub mod config;
pub mod error;
pub mod experiments;
pub mod hamiltonian;
pub mod linear;
pub mod model;
pub mod moments;
pub mod optimizer;
pub mod pulse;
pub mod quad;
pub mod rng;
pub mod sim;
pub mod svg;

pub use error::{Error, Result};
