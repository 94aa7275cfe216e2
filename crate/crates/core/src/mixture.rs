//! Gaussian-mixture target with a variance-preserving forward noising
//! process, inverted exactly.
//!
//! The target is `sum_k pi_k N(m^k, Sigma)` with one covariance shared across
//! components. One forward step is `x_{t+1} = sqrt(alpha_t) x_t + N(0, beta_t I)`
//! with `beta_t = 1 - alpha_t`, so the level-`t` marginal of component `k` is
//! Gaussian with
//!
//! ```text
//! m^k_t    = sqrt(abar_t) m^k
//! Sigma_t  = abar_t Sigma + (1 - abar_t) I,        abar_t = prod_{s<t} alpha_s
//! ```
//!
//! Conditioning the joint Gaussians gives every kernel this crate needs in
//! closed form: responsibilities `gamma^k_t(x)`, the reverse transition
//! `x_t | x_{t+1}`, and the denoising posterior `x_0 | x_t`. All per-timestep
//! matrices (Cholesky factors, posterior gains, operator norms) are
//! precomputed once in [`MixtureDiffusion::new`]; after that every operation
//! is pure and read-only, so a single instance can be shared across sampling
//! workers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp, LOG_DENSITY_FLOOR};

/// Mixture target: weights, component means, one shared SPD covariance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
}

impl MixtureSpec {
    /// The two-cluster planar target used throughout the experiment suite:
    /// `0.05 N([-5,0], I) + 0.95 N([5,0], I)`.
    pub fn two_cluster_default() -> Self {
        MixtureSpec {
            weights: vec![0.05, 0.95],
            means: vec![vec![-5.0, 0.0], vec![5.0, 0.0]],
            covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k {
            return Err(Error::InvalidSpec(format!(
                "need matching weights/means, got {} weights and {} means",
                k,
                self.means.len()
            )));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidSpec("mixture weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "mixture weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidSpec("component means must share one dimension".into()));
        }
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidSpec("covariance must be d x d".into()));
        }
        let sigma = self.covariance_matrix();
        if (&sigma - sigma.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidSpec("covariance must be symmetric".into()));
        }
        let eig = sigma.symmetric_eigenvalues();
        if eig.min() <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "covariance must be positive definite (min eigenvalue {})",
                eig.min()
            )));
        }
        Ok(())
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i][j])
    }

    pub fn mean_vectors(&self) -> Vec<DVector<f64>> {
        self.means.iter().map(|m| DVector::from_column_slice(m)).collect()
    }
}

/// Per-step retention factors `alpha_t` for `t = 0..T-1`, with the derived
/// cumulative products `abar_t` (`abar_0 = 1`) and step sizes `beta_t`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub alphas: Vec<f64>,
    #[serde(skip)]
    pub betas: Vec<f64>,
    #[serde(skip)]
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        if alphas.iter().any(|&a| !(0.0..1.0).contains(&a) || a == 0.0) {
            return Err(Error::InvalidSpec("alphas must lie in (0, 1)".into()));
        }
        let betas: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len() + 1);
        alpha_bars.push(1.0);
        for &a in &alphas {
            alpha_bars.push(alpha_bars.last().unwrap() * a);
        }
        Ok(NoiseSchedule { alphas, betas, alpha_bars })
    }

    /// Linear `beta` ramp; the default `0.02 -> 0.30` over 20 steps leaves
    /// `abar_T` near 0.03, close enough to pure noise for the prior swap.
    pub fn linear_beta(t: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidSpec("schedule needs at least one step".into()));
        }
        let alphas = (0..t)
            .map(|i| {
                let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
                1.0 - (beta_min + frac * (beta_max - beta_min))
            })
            .collect();
        NoiseSchedule::new(alphas)
    }

    pub fn t_steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Rebuilds the derived fields after deserialization.
    pub fn rederive(self) -> Result<Self> {
        NoiseSchedule::new(self.alphas)
    }
}

/// Mean/covariance pair for one Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// A mixture-of-Gaussians conditional law with one shared covariance:
/// carries `x_t | x_{t+1}` and `x_0 | x_t` alike.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    pub weights: Vec<f64>,
    pub component_means: Vec<DVector<f64>>,
    pub shared_covariance: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl MixturePosterior {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Draws one point: component by responsibility, then the Gaussian.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let k = sample_index(&self.weights, rng);
        sample_gaussian(&self.component_means[k], &self.chol_l, rng)
    }
}

/// A reverse-time path `x_T, x_{T-1}, ..., x_0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// states[i] is the state at level `T - i`; the last entry is `x_0`.
    pub states: Vec<DVector<f64>>,
    pub terminal_reward: Option<f64>,
}

impl Trajectory {
    /// State at noise level `t` (0 = data).
    pub fn state_at_level(&self, t: usize) -> &DVector<f64> {
        let top = self.states.len() - 1;
        &self.states[top - t]
    }

    pub fn x0(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

struct LevelCache {
    /// sqrt(abar_t) m^k
    means: Vec<DVector<f64>>,
    /// abar_t Sigma + (1 - abar_t) I
    sigma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    chol_l: DMatrix<f64>,
    /// L^{-1} where Sigma_t = L L^T; quadratic forms become row sums.
    inv_chol_l: DMatrix<f64>,
    log_det: f64,
    /// ||Sigma_t^{-1}|| (operator norm)
    inv_norm: f64,
    /// Denoising posterior x_0 | x_t, absent at t = 0 where it degenerates
    /// to a point mass.
    denoise: Option<DenoiseCache>,
}

struct DenoiseCache {
    /// A_t = sqrt(abar_t) Sigma Sigma_t^{-1}
    gain: DMatrix<f64>,
    /// b^k_t = m^k - sqrt(abar_t) A_t m^k
    offsets: Vec<DVector<f64>>,
    /// Sigma_{0|t} = Sigma - abar_t Sigma Sigma_t^{-1} Sigma
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    gain_norm: f64,
    cov_norm: f64,
}

struct StepCache {
    /// sqrt(alpha_t) Sigma_t Sigma_{t+1}^{-1}
    gain: DMatrix<f64>,
    /// Sigma_{t|t+1} = Sigma_t - alpha_t Sigma_t Sigma_{t+1}^{-1} Sigma_t
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    /// ||Sigma_{t|t+1}||
    cov_norm: f64,
}

/// The pretrained process: mixture target, schedule, and every per-timestep
/// matrix the kernels need, factored once.
pub struct MixtureDiffusion {
    pub spec: MixtureSpec,
    pub sched: NoiseSchedule,
    means: Vec<DVector<f64>>,
    levels: Vec<LevelCache>,
    steps: Vec<StepCache>,
}

impl MixtureDiffusion {
    pub fn new(spec: MixtureSpec, sched: NoiseSchedule) -> Result<Self> {
        spec.validate()?;
        let sigma = spec.covariance_matrix();
        let means = spec.mean_vectors();
        let d = spec.dim();
        let eye = DMatrix::identity(d, d);
        let t_steps = sched.t_steps();

        let mut levels = Vec::with_capacity(t_steps + 1);
        for t in 0..=t_steps {
            let abar = sched.alpha_bar(t);
            let sigma_t = &sigma * abar + &eye * (1.0 - abar);
            let chol = Cholesky::new(sigma_t.clone())
                .ok_or_else(|| Error::InvalidSpec(format!("Sigma_{t} is not SPD")))?;
            let chol_l = chol.l();
            let inv_chol_l = chol_l
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::InvalidSpec(format!("Sigma_{t} factor not invertible")))?;
            let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let inv = chol.inverse();
            let level_means: Vec<DVector<f64>> = means.iter().map(|m| m * abar.sqrt()).collect();

            let denoise = if t == 0 {
                None
            } else {
                // A_t = sqrt(abar) Sigma Sigma_t^{-1}; symmetric because
                // Sigma_t is a polynomial in Sigma.
                let gain = (&sigma * &inv) * abar.sqrt();
                let offsets: Vec<DVector<f64>> =
                    means.iter().map(|m| m - &gain * m * abar.sqrt()).collect();
                let cov = &sigma - (&sigma * &inv * &sigma) * abar;
                let chol0 = Cholesky::new(cov.clone())
                    .ok_or_else(|| Error::InvalidSpec(format!("Sigma_0|{t} is not SPD")))?;
                Some(DenoiseCache {
                    gain_norm: operator_norm(&gain),
                    cov_norm: operator_norm(&cov),
                    gain,
                    offsets,
                    cov,
                    chol_l: chol0.l(),
                })
            };

            levels.push(LevelCache {
                means: level_means,
                sigma: sigma_t,
                chol,
                chol_l,
                inv_chol_l,
                log_det,
                inv_norm: operator_norm(&inv),
                denoise,
            });
        }

        let mut steps = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let alpha = sched.alphas[t];
            let sigma_t = levels[t].sigma.clone();
            let inv_next = levels[t + 1].chol.inverse();
            let gain = (&sigma_t * &inv_next) * alpha.sqrt();
            let cov = &sigma_t - (&sigma_t * &inv_next * &sigma_t) * alpha;
            let chol = Cholesky::new(cov.clone())
                .ok_or_else(|| Error::InvalidSpec(format!("Sigma_{t}|{} is not SPD", t + 1)))?;
            steps.push(StepCache { cov_norm: operator_norm(&cov), gain, cov, chol_l: chol.l() });
        }

        Ok(MixtureDiffusion { spec, sched, means, levels, steps })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn n_components(&self) -> usize {
        self.spec.n_components()
    }

    pub fn t_steps(&self) -> usize {
        self.sched.t_steps()
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t > self.t_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.t_steps() });
        }
        Ok(())
    }

    /// Level-`t` marginal of the forward process: per-component means plus
    /// the shared covariance.
    pub fn forward_marginal(&self, t: usize) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
        self.check_level(t)?;
        let lv = &self.levels[t];
        Ok((lv.means.clone(), lv.sigma.clone()))
    }

    /// Exact mean of the level-`t` marginal (mixture of the component means).
    pub fn forward_marginal_mean(&self, t: usize) -> Result<DVector<f64>> {
        self.check_level(t)?;
        let lv = &self.levels[t];
        let mut mean = DVector::zeros(self.dim());
        for (w, m) in self.spec.weights.iter().zip(&lv.means) {
            mean += m * *w;
        }
        Ok(mean)
    }

    /// Exact covariance of the level-`t` marginal.
    pub fn forward_marginal_cov(&self, t: usize) -> Result<DMatrix<f64>> {
        self.check_level(t)?;
        let lv = &self.levels[t];
        let mean = self.forward_marginal_mean(t)?;
        let mut cov = lv.sigma.clone();
        for (w, m) in self.spec.weights.iter().zip(&lv.means) {
            let c = m - &mean;
            cov += (&c * c.transpose()) * *w;
        }
        Ok(cov)
    }

    fn component_log_density(&self, t: usize, k: usize, x: &DVector<f64>) -> f64 {
        let lv = &self.levels[t];
        // quad = ||L^{-1}(x - mean)||^2, accumulated without temporaries.
        let d = self.dim();
        let mean = &lv.means[k];
        let linv = &lv.inv_chol_l;
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += linv[(i, j)] * (x[j] - mean[j]);
            }
            quad += acc * acc;
        }
        let ld = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + lv.log_det + quad);
        ld.max(LOG_DENSITY_FLOOR)
    }

    /// Posterior component weights at level `t`, computed entirely in log
    /// space (weighted log-densities shifted through logsumexp), written
    /// into `out`.
    pub fn responsibilities_into(&self, x: &DVector<f64>, t: usize, out: &mut Vec<f64>) -> Result<()> {
        self.check_level(t)?;
        let k = self.n_components();
        out.clear();
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            let lw = self.spec.weights[i].ln() + self.component_log_density(t, i, x);
            if lw > max {
                max = lw;
            }
            out.push(lw);
        }
        let mut sum = 0.0;
        for lw in out.iter_mut() {
            *lw = (*lw - max).exp();
            sum += *lw;
        }
        for w in out.iter_mut() {
            *w /= sum;
        }
        Ok(())
    }

    /// Posterior component weights at level `t`.
    pub fn responsibilities(&self, x: &DVector<f64>, t: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_components());
        self.responsibilities_into(x, t, &mut out)?;
        Ok(out)
    }

    /// log p_t(x), the mixture log-density of the level-`t` marginal.
    pub fn marginal_log_density(&self, x: &DVector<f64>, t: usize) -> Result<f64> {
        self.check_level(t)?;
        let logw: Vec<f64> = (0..self.n_components())
            .map(|i| self.spec.weights[i].ln() + self.component_log_density(t, i, x))
            .collect();
        Ok(logsumexp(&logw))
    }

    /// The exact reverse transition `x_t | x_{t+1} = x_next`: mixture with
    /// weights `gamma^k_{t+1}(x_next)`, component means
    /// `m^k_t + sqrt(alpha_t) Sigma_t Sigma_{t+1}^{-1} (x_next - m^k_{t+1})`,
    /// and shared covariance `Sigma_t - alpha_t Sigma_t Sigma_{t+1}^{-1} Sigma_t`.
    pub fn reverse_kernel(&self, x_next: &DVector<f64>, t: usize) -> Result<MixturePosterior> {
        if t >= self.t_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.t_steps() - 1 });
        }
        let weights = self.responsibilities(x_next, t + 1)?;
        let step = &self.steps[t];
        let component_means = (0..self.n_components())
            .map(|k| &self.levels[t].means[k] + &step.gain * (x_next - &self.levels[t + 1].means[k]))
            .collect();
        Ok(MixturePosterior {
            weights,
            component_means,
            shared_covariance: step.cov.clone(),
            chol_l: step.chol_l.clone(),
        })
    }

    /// The denoising posterior `x_0 | x_t = x`: weights `gamma^k_t(x)`,
    /// means `A_t x + b^k_t`, shared covariance `Sigma_{0|t}`.
    pub fn posterior_x0(&self, x: &DVector<f64>, t: usize) -> Result<MixturePosterior> {
        self.check_level(t)?;
        let dn = self.levels[t]
            .denoise
            .as_ref()
            .ok_or(Error::TimestepOutOfRange { t: 0, max: self.t_steps() })?;
        let weights = self.responsibilities(x, t)?;
        let component_means = (0..self.n_components()).map(|k| &dn.gain * x + &dn.offsets[k]).collect();
        Ok(MixturePosterior {
            weights,
            component_means,
            shared_covariance: dn.cov.clone(),
            chol_l: dn.chol_l.clone(),
        })
    }

    /// Affine map of the denoising posterior mean: `(A_t, b^k_t)` plus the
    /// shared covariance, without the responsibility evaluation.
    pub fn denoise_params(&self, t: usize) -> Result<(&DMatrix<f64>, &[DVector<f64>], &DMatrix<f64>)> {
        self.check_level(t)?;
        let dn = self.levels[t]
            .denoise
            .as_ref()
            .ok_or(Error::TimestepOutOfRange { t: 0, max: self.t_steps() })?;
        Ok((&dn.gain, &dn.offsets, &dn.cov))
    }

    /// Operator norms used by the analytic baseline: `(||Sigma_t^{-1}||,
    /// ||A_t||, ||Sigma_{0|t}||)`.
    pub fn level_norms(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_level(t)?;
        let lv = &self.levels[t];
        let dn = lv
            .denoise
            .as_ref()
            .ok_or(Error::TimestepOutOfRange { t: 0, max: self.t_steps() })?;
        Ok((lv.inv_norm, dn.gain_norm, dn.cov_norm))
    }

    /// `||Sigma_{t|t+1}||`, the reverse-step covariance norm.
    pub fn reverse_cov_norm(&self, t: usize) -> Result<f64> {
        if t >= self.t_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.t_steps() - 1 });
        }
        Ok(self.steps[t].cov_norm)
    }

    /// Largest component-mean norm, a constant in the analytic Lipschitz
    /// bound.
    pub fn max_mean_norm(&self) -> f64 {
        self.means.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }

    /// Draws `x_T` from the level-`T` marginal.
    pub fn sample_prior<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let t = self.t_steps();
        let k = sample_index(&self.spec.weights, rng);
        sample_gaussian(&self.levels[t].means[k], &self.levels[t].chol_l, rng)
    }

    /// Draws `x_t ~ p(x_t | x_{t+1})` without materializing the posterior:
    /// one responsibility pass, one component pick, one Gaussian draw.
    pub fn sample_reverse_step<R: Rng>(&self, x_next: &DVector<f64>, t: usize, rng: &mut R) -> Result<DVector<f64>> {
        if t >= self.t_steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.t_steps() - 1 });
        }
        let d = self.dim();
        let n_comp = self.n_components();
        let mut weights = Vec::with_capacity(n_comp);
        self.responsibilities_into(x_next, t + 1, &mut weights)?;
        let k = sample_index(&weights, rng);
        let step = &self.steps[t];
        let mean_t = &self.levels[t].means[k];
        let mean_next = &self.levels[t + 1].means[k];
        let mut out = DVector::zeros(d);
        for i in 0..d {
            let mut acc = mean_t[i];
            for j in 0..d {
                acc += step.gain[(i, j)] * (x_next[j] - mean_next[j]);
            }
            out[i] = acc;
        }
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            for i in j..d {
                out[i] += step.chol_l[(i, j)] * z;
            }
        }
        Ok(out)
    }

    /// One full reverse pass `x_T -> x_0`.
    pub fn sample_trajectory<R: Rng>(&self, rng: &mut R) -> Trajectory {
        let t_steps = self.t_steps();
        let mut states = Vec::with_capacity(t_steps + 1);
        states.push(self.sample_prior(rng));
        for t in (0..t_steps).rev() {
            let next = self
                .sample_reverse_step(states.last().unwrap(), t, rng)
                .expect("t < T by construction");
            states.push(next);
        }
        Trajectory { states, terminal_reward: None }
    }
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    // All matrices passing through here are symmetric (polynomials in Sigma),
    // so the operator norm is the largest absolute eigenvalue.
    m.symmetric_eigenvalues().iter().map(|e| e.abs()).fold(0.0, f64::max)
}

pub(crate) fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub(crate) fn sample_gaussian<R: Rng>(
    mean: &DVector<f64>,
    chol_l: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let d = mean.len();
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol_l * z
}
