//! Reward-tilted sampling from Gaussian-mixture diffusion processes.
//!
//! The library draws from the KL-regularized alignment target
//! `p*(x_0) ∝ exp(r(x_0)/α) p_pre(x_0)` of a mixture-of-Gaussians diffusion
//! process by tilting each reverse transition with the soft value
//! `v_t(x_t) = log E[exp(r(x_0)) | x_t]`. Two rejection samplers implement
//! that tilt: an exact one that envelopes every transition with the global
//! reward bound, and a baselined one that replaces the global bound with
//! per-state Chernoff baselines `B_{t+1}(x_{t+1}) = b(x_{t+1}) + τ̂` trained
//! to a user-chosen exceedance level δ. Generation policies live behind a
//! name-keyed registry ([`sampler::build_policy`]) so the CLI and the
//! experiment harness can select them at runtime.
//!
//! Module map:
//! - [`mixture`]: closed-form target, schedule, forward/reverse kernels
//! - [`reward`]: bounded rewards and temperature scaling
//! - [`value`]: analytic / Monte Carlo / regression soft-value estimators
//! - [`lcb`]: the Chernoff-baseline objective, slack, and fitting routines
//! - [`sampler`]: generation policies and proposal accounting
//! - [`trainer`]: sequential particle-compatible baseline training
//! - [`diagnostics`]: histogram TV, effective N, coverage matrices
//! - [`config`] / [`artifact`]: experiment configuration and run artifacts

pub mod artifact;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod lcb;
pub mod math;
pub mod mixture;
pub mod nn;
pub mod reward;
pub mod sampler;
pub mod trainer;
pub mod value;

pub use error::{Error, Result};
