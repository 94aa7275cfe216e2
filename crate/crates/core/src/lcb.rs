//! Chernoff baselines: the objective, the slack, and the fitting routines.
//!
//! A baseline `B_{t+1}(x_{t+1}) = b(x_{t+1}) + τ` replaces the global bound
//! in the rejection test for `x_t | x_{t+1}`. With `s_i = v̂_t(x_t^i) -
//! b(x_{t+1}^i)` over pair samples, the objective
//!
//! ```text
//! Ĵ(λ, b) = (1/λ) log Ê[e^{λ s}] + (1/λ) log Ê[e^{-λ s}] + (2/λ) log(1/δ)
//! ```
//!
//! simultaneously bounds the per-step TV error (through `δ e^{Ĵ}`) and the
//! expected proposal count, so minimizing it directly targets cheap, accurate
//! sampling. The slack `τ̂ = (log(1/δ) + log Ê[e^{λ s}])/λ` then certifies the
//! exceedance level δ via the Chernoff bound on the same pairs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, logsumexp_scaled_with_softmax};
use crate::mixture::MixtureDiffusion;
use crate::nn::Mlp;
use crate::reward::RewardSpec;
use crate::value::ValueModel;

/// Joint samples `(x_{t+1}, x_t)` with `x_t ~ p_pre(. | x_{t+1})`, plus the
/// cached values `v̂_t(x_t)`. Columns are samples.
pub struct PairBatch {
    pub t: usize,
    pub x_next: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub values: Vec<f64>,
}

impl PairBatch {
    /// Draws one proposal per conditioning state and caches the values.
    pub fn draw<R: Rng>(
        md: &MixtureDiffusion,
        value: &ValueModel,
        reward: &RewardSpec,
        states_next: &[DVector<f64>],
        t: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let m = states_next.len();
        if m < 2 {
            return Err(Error::InvalidConfig("pair batch needs at least 2 samples".into()));
        }
        let d = md.dim();
        let mut x_next = DMatrix::zeros(d, m);
        let mut x = DMatrix::zeros(d, m);
        let mut values = Vec::with_capacity(m);
        for (j, s) in states_next.iter().enumerate() {
            x_next.set_column(j, s);
            let prop = md.sample_reverse_step(s, t, rng)?;
            values.push(value.evaluate(md, reward, &prop, t, rng)?);
            x.set_column(j, &prop);
        }
        Ok(PairBatch { t, x_next, x, values })
    }

    /// Synthetic batch from explicit values; conditioning states are zeros.
    /// Used by tests and the scalar (prior-level) base case.
    pub fn from_values(t: usize, values: Vec<f64>) -> Self {
        let m = values.len();
        PairBatch { t, x_next: DMatrix::zeros(1, m), x: DMatrix::zeros(1, m), values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The state-dependent part of a baseline: a constant (prior level) or a
/// fitted network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BaselineModel {
    Constant { value: f64 },
    Net(Mlp),
}

impl BaselineModel {
    pub fn evaluate(&self, x_next: Option<&DVector<f64>>) -> f64 {
        match self {
            BaselineModel::Constant { value } => *value,
            BaselineModel::Net(net) => {
                let x = x_next.expect("state-dependent baseline evaluated without a state");
                net.forward_one(x)
            }
        }
    }

    pub fn evaluate_columns(&self, xs: &DMatrix<f64>) -> Vec<f64> {
        match self {
            BaselineModel::Constant { value } => vec![*value; xs.ncols()],
            BaselineModel::Net(net) => net.forward_batch(xs).0,
        }
    }
}

/// A fitted per-timestep baseline `min{b(x) + τ̂ + ε₀, ceiling}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LcbBaseline {
    pub b: BaselineModel,
    pub tau_hat: f64,
    pub lambda_hat: f64,
    pub epsilon0: f64,
    /// Clip-above bound, the effective reward bound B.
    pub ceiling: f64,
    pub delta: f64,
}

impl LcbBaseline {
    /// `B_{t+1}(x_{t+1})`; pass `None` at the prior level where the baseline
    /// is a scalar.
    pub fn evaluate(&self, x_next: Option<&DVector<f64>>) -> f64 {
        (self.b.evaluate(x_next) + self.tau_hat + self.epsilon0).min(self.ceiling)
    }

    /// A degenerate baseline pinned at the ceiling; turns the baselined
    /// sampler into the exact one.
    pub fn at_ceiling(ceiling: f64, delta: f64) -> Self {
        LcbBaseline {
            b: BaselineModel::Constant { value: ceiling },
            tau_hat: 0.0,
            lambda_hat: 1.0,
            epsilon0: 0.0,
            ceiling,
            delta,
        }
    }
}

/// The full trained system: `baselines[t]` guards acceptance of `x_t`, i.e.
/// holds `B_{t+1}`; the last entry is the scalar prior baseline `B_{T+1}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LcbSystem {
    pub baselines: Vec<LcbBaseline>,
    pub delta: f64,
    pub ceiling: f64,
    pub lambda_max: f64,
}

impl LcbSystem {
    pub fn t_steps(&self) -> usize {
        self.baselines.len() - 1
    }

    /// Ceiling-clipped system of the same shape, for degeneracy checks and
    /// coverage diagnostics.
    pub fn all_ceiling(t_steps: usize, ceiling: f64, delta: f64) -> Self {
        LcbSystem {
            baselines: (0..=t_steps).map(|_| LcbBaseline::at_ceiling(ceiling, delta)).collect(),
            delta,
            ceiling,
            lambda_max: 1.0,
        }
    }
}

/// Gradient-descent knobs shared by the ERM and MSE fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { steps: 10, learning_rate: 0.5 }
    }
}

fn check_lambda_delta(lambda: f64, delta: f64) -> Result<()> {
    if lambda < 1.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 1, got {lambda}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0, 1], got {delta}")));
    }
    Ok(())
}

fn s_values(batch: &PairBatch, b: &BaselineModel) -> Result<Vec<f64>> {
    let bs = b.evaluate_columns(&batch.x_next);
    let s: Vec<f64> = batch.values.iter().zip(&bs).map(|(v, bv)| v - bv).collect();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitDiverged("non-finite value/baseline difference".into()));
    }
    Ok(s)
}

fn j_of_s(s: &[f64], lambda: f64, delta: f64) -> f64 {
    let m = s.len() as f64;
    let pos: Vec<f64> = s.iter().map(|v| lambda * v).collect();
    let neg: Vec<f64> = s.iter().map(|v| -lambda * v).collect();
    let term_pos = logsumexp(&pos) - m.ln();
    let term_neg = logsumexp(&neg) - m.ln();
    (term_pos + term_neg + 2.0 * (1.0 / delta).ln()) / lambda
}

/// `Ĵ_t(λ, b)` over the batch.
pub fn empirical_j(batch: &PairBatch, b: &BaselineModel, lambda: f64, delta: f64) -> Result<f64> {
    check_lambda_delta(lambda, delta)?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty pair batch".into()));
    }
    Ok(j_of_s(&s_values(batch, b)?, lambda, delta))
}

/// The Chernoff slack `τ̂ = (log(1/δ) + log Ê[e^{λ s}]) / λ`.
pub fn tau_hat(batch: &PairBatch, b: &BaselineModel, lambda: f64, delta: f64) -> Result<f64> {
    check_lambda_delta(lambda, delta)?;
    let s = s_values(batch, b)?;
    let m = s.len() as f64;
    let scaled: Vec<f64> = s.iter().map(|v| lambda * v).collect();
    Ok(((1.0 / delta).ln() + logsumexp(&scaled) - m.ln()) / lambda)
}

/// Minimizes `Ĵ` over `λ ∈ [lo, hi]` by ternary search. The empirical
/// objective has a unique interior minimum when the batch is informative; a
/// 64-point grid guards the search, and whichever candidate scores lower
/// wins, so a non-unimodal batch degrades to the grid argmin.
pub fn ternary_search_lambda(
    batch: &PairBatch,
    b: &BaselineModel,
    delta: f64,
    lambda_range: (f64, f64),
    tol: f64,
) -> Result<f64> {
    let (lo, hi) = lambda_range;
    if !(lo >= 1.0 && hi > lo) {
        return Err(Error::InvalidConfig(format!("bad lambda range [{lo}, {hi}]")));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidConfig("tol must be positive".into()));
    }
    check_lambda_delta(lo, delta)?;
    let s = s_values(batch, b)?;
    let j = |lam: f64| j_of_s(&s, lam, delta);

    let ternary = |mut a: f64, mut c: f64| -> f64 {
        while c - a > tol {
            let m1 = a + (c - a) / 3.0;
            let m2 = c - (c - a) / 3.0;
            if j(m1) <= j(m2) {
                c = m2;
            } else {
                a = m1;
            }
        }
        0.5 * (a + c)
    };

    let candidate = ternary(lo, hi);

    // Grid sanity pass: on small batches the empirical objective can wobble.
    let grid_n = 64;
    let cell = (hi - lo) / (grid_n - 1) as f64;
    let (mut best_i, mut best_j) = (0, f64::INFINITY);
    for i in 0..grid_n {
        let lam = lo + cell * i as f64;
        let val = j(lam);
        if val < best_j {
            best_j = val;
            best_i = i;
        }
    }
    if best_j + 1e-12 < j(candidate) {
        let a = (lo + cell * (best_i as f64 - 1.0)).max(lo);
        let c = (lo + cell * (best_i as f64 + 1.0)).min(hi);
        return Ok(ternary(a, c));
    }
    Ok(candidate)
}

/// Gradient descent on `Ĵ(λ, ·)` at fixed λ over the network parameters.
/// The output-side gradient is `softmax(-λ s) - softmax(λ s)` per sample.
pub fn fit_baseline(
    batch: &PairBatch,
    start: Mlp,
    lambda: f64,
    delta: f64,
    opt: &OptConfig,
) -> Result<BaselineModel> {
    check_lambda_delta(lambda, delta)?;
    let mut net = start;
    fit_baseline_steps(batch, &mut net, lambda, opt)?;
    Ok(BaselineModel::Net(net))
}

/// In-place variant used by the trainer's refresh rounds.
pub fn fit_baseline_steps(
    batch: &PairBatch,
    net: &mut Mlp,
    lambda: f64,
    opt: &OptConfig,
) -> Result<()> {
    let m = batch.len();
    let mut w_pos = vec![0.0; m];
    let mut w_neg = vec![0.0; m];
    for step in 0..opt.steps {
        let (bs, cache) = net.forward_batch(&batch.x_next);
        let s: Vec<f64> = batch.values.iter().zip(&bs).map(|(v, bv)| v - bv).collect();
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::FitDiverged(format!("non-finite s at step {step}")));
        }
        logsumexp_scaled_with_softmax(&s, lambda, &mut w_pos);
        logsumexp_scaled_with_softmax(&s, -lambda, &mut w_neg);
        let grad_out: Vec<f64> = w_neg.iter().zip(&w_pos).map(|(n, p)| n - p).collect();
        let grads = net.backward_batch(&cache, &grad_out);
        net.gradient_step(&grads, opt.learning_rate);
        if net.has_nonfinite() {
            return Err(Error::FitDiverged(format!("baseline parameters non-finite at step {step}")));
        }
    }
    Ok(())
}

/// Least-squares pretraining `b(x_{t+1}) ≈ Ê[v̂_t(x_t) | x_{t+1}]`, used as a
/// warm start for the ERM fit or as the frozen-b variant.
pub fn mse_pretrain_baseline(batch: &PairBatch, start: Mlp, opt: &OptConfig) -> Result<BaselineModel> {
    let mut net = start;
    let m = batch.len();
    for step in 0..opt.steps {
        let (bs, cache) = net.forward_batch(&batch.x_next);
        let grad_out: Vec<f64> = bs
            .iter()
            .zip(&batch.values)
            .map(|(b, v)| 2.0 * (b - v) / m as f64)
            .collect();
        let grads = net.backward_batch(&cache, &grad_out);
        net.gradient_step(&grads, opt.learning_rate);
        if net.has_nonfinite() {
            return Err(Error::FitDiverged(format!("MSE pretraining non-finite at step {step}")));
        }
    }
    Ok(BaselineModel::Net(net))
}

/// Closed-form high-probability baseline for Lipschitz rewards on the
/// mixture model:
///
/// ```text
/// φ_t(x)  = logsumexp_k [ r(μ^k_{0|t}(x)) + L_r² ||Σ_{0|t}|| / 2 + log γ^k_t(x) ]
/// B(x')   = max_k φ_t(μ^k_{t|t+1}(x')) + L_φ sqrt(2 β̃_t log(1/δ))
/// L_φ     = L_r ||A_t|| + 2 ||Σ_t^{-1}|| max_k ||m^k||,   β̃_t = ||Σ_{t|t+1}||
/// ```
///
/// The sharp indicator has no Lipschitz constant; exercise this path with
/// the smoothed threshold reward.
pub fn analytic_mog_baseline(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    x_next: &DVector<f64>,
    t: usize,
    delta: f64,
) -> Result<f64> {
    let l_r = reward.scaled_lipschitz().ok_or(Error::UnsupportedReward {
        op: "analytic_mog_baseline",
        kind: "coordinate_threshold (no Lipschitz constant)".into(),
    })?;
    if !(0.0 < delta && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0, 1], got {delta}")));
    }
    let phi = |x: &DVector<f64>| -> Result<f64> {
        if t == 0 {
            // Sigma_{0|0} degenerates to zero: φ_0 is the reward itself.
            return Ok(reward.scaled_reward(x));
        }
        let gammas = md.responsibilities(x, t)?;
        let (gain, offsets, cov) = md.denoise_params(t)?;
        let cov_norm = cov.symmetric_eigenvalues().iter().map(|e| e.abs()).fold(0.0, f64::max);
        let gx = gain * x;
        let terms: Vec<f64> = gammas
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let mu = &gx + &offsets[k];
                reward.scaled_reward(&mu) + 0.5 * l_r * l_r * cov_norm + g.ln()
            })
            .collect();
        Ok(logsumexp(&terms))
    };

    let kernel = md.reverse_kernel(x_next, t)?;
    let mut max_phi = f64::NEG_INFINITY;
    for mean in &kernel.component_means {
        max_phi = max_phi.max(phi(mean)?);
    }

    let l_phi = if t == 0 {
        // Level 0: Sigma_0 is the target covariance and A_0 = I.
        l_r + 2.0 * level_inv_norm_at_zero(md) * md.max_mean_norm()
    } else {
        let (inv_norm, gain_norm, _) = md.level_norms(t)?;
        l_r * gain_norm + 2.0 * inv_norm * md.max_mean_norm()
    };
    let beta_tilde = md.reverse_cov_norm(t)?;
    Ok(max_phi + l_phi * (2.0 * beta_tilde * (1.0 / delta).ln()).sqrt())
}

fn level_inv_norm_at_zero(md: &MixtureDiffusion) -> f64 {
    // ||Sigma_0^{-1}|| = 1 / min-eigenvalue of the target covariance.
    let sigma = md.spec.covariance_matrix();
    1.0 / sigma.symmetric_eigenvalues().min()
}
