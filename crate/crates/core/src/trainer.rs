//! Baseline training over an evolving particle system.
//!
//! Baselines must stay valid under the state distribution that applying the
//! earlier baselines induces, so training walks backward in time alongside
//! `m` particles: fit `B_{t+1}` on pairs drawn from the current particles,
//! then advance every particle one level through the freshly fitted
//! baseline's own rejection step. Two schedules are provided:
//!
//! - [`train_sequential`]: one backward sweep; per timestep the network and
//!   the Chernoff exponent are optimized together (alternating descent and
//!   one-dimensional search).
//! - [`train_two_pass`]: the practical variant. Pass one fixes `λ = 1` and
//!   trains only the networks, redrawing fresh proposal pairs every refresh
//!   round; pass two freezes the networks and re-runs the sweep, selecting
//!   `λ ∈ [1, Λ]` by ternary search and recomputing the slack on fresh
//!   particles.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcb::{
    empirical_j, fit_baseline_steps, mse_pretrain_baseline, tau_hat, ternary_search_lambda,
    BaselineModel, LcbBaseline, LcbSystem, OptConfig, PairBatch,
};
use crate::math::derive_seed;
use crate::mixture::MixtureDiffusion;
use crate::nn::Mlp;
use crate::reward::RewardSpec;
use crate::value::ValueModel;

/// The m states being advanced backward through the baselines.
pub struct ParticleSystem {
    pub states: Vec<DVector<f64>>,
    /// Current noise level of every particle.
    pub level: usize,
}

/// Which training schedule drives the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sequential,
    TwoPass,
}

/// Everything the baseline trainer can be told.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Particle count m.
    pub particles: usize,
    pub delta: f64,
    /// Upper end of the Chernoff-exponent search range.
    pub lambda_max: f64,
    /// Uniform-convergence allowance added to deployed baselines.
    pub epsilon0: f64,
    /// Fresh-pair refresh rounds per timestep in pass one.
    pub refresh_rounds: usize,
    /// Full-batch descent steps per refresh round.
    pub steps_per_round: usize,
    pub learning_rate: f64,
    /// Hidden widths of the per-timestep baseline networks.
    pub hidden: Vec<usize>,
    /// Least-squares warm start toward Ê[v̂ | x_{t+1}] before the ERM fit.
    pub mse_warm_start: bool,
    pub warm_start_steps: usize,
    /// Proposal cap while advancing particles; hitting it forces the
    /// best-value candidate and is counted.
    pub advance_cap: u64,
    pub lambda_tol: f64,
    /// Alternation cycles (descent + λ search) per timestep in
    /// `train_sequential`.
    pub joint_cycles: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::TwoPass,
            particles: 7_000,
            delta: 0.1,
            lambda_max: 12.0,
            epsilon0: 0.0,
            refresh_rounds: 200,
            steps_per_round: 5,
            learning_rate: 0.2,
            hidden: vec![64],
            mse_warm_start: false,
            warm_start_steps: 500,
            advance_cap: 1_000,
            lambda_tol: 1e-3,
            joint_cycles: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::InvalidConfig("need at least 2 particles".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.lambda_max <= 1.0 {
            return Err(Error::InvalidConfig("lambda_max must exceed 1".into()));
        }
        if self.refresh_rounds == 0 || self.steps_per_round == 0 || self.advance_cap == 0 {
            return Err(Error::InvalidConfig("training counts must be positive".into()));
        }
        Ok(())
    }
}

/// Per-timestep training outcome. `t_plus_1` is the baseline index (T+1 for
/// the scalar base case, then T..1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestepReport {
    pub t_plus_1: usize,
    pub lambda_hat: f64,
    pub tau_hat: f64,
    /// Ĵ at the deployed (λ̂, b̂) on the final fitting batch.
    pub j_final: f64,
    /// Ĵ at λ = 1 on the same batch (pass-one objective value).
    pub j_at_lambda1: f64,
    /// Fresh-pair exceedance rate of the deployed baseline.
    pub holdout_exceedance: f64,
    /// Proposals spent advancing all particles through this baseline.
    pub advance_proposals: u64,
    pub forced_advances: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub per_timestep: Vec<TimestepReport>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

struct Trainer<'a> {
    md: &'a MixtureDiffusion,
    reward: &'a RewardSpec,
    value: &'a ValueModel,
    cfg: &'a TrainConfig,
    ceiling: f64,
    seed: u64,
}

impl Trainer<'_> {
    fn prior_particles(&self, pass: u64) -> Vec<DVector<f64>> {
        (0..self.cfg.particles)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    &[0x70, pass, i as u64],
                ));
                self.md.sample_prior(&mut rng)
            })
            .collect()
    }

    /// Parallel pair draw: proposals from level `t`'s reverse kernel plus
    /// cached values, one derived stream per particle.
    fn draw_pairs(
        &self,
        states: &[DVector<f64>],
        t: usize,
        pass: u64,
        round: u64,
    ) -> Result<PairBatch> {
        let d = self.md.dim();
        let m = states.len();
        let cols: Result<Vec<(DVector<f64>, f64)>> = states
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    &[0x7072, pass, t as u64, round, i as u64],
                ));
                let prop = self.md.sample_reverse_step(s, t, &mut rng)?;
                let v = self.value.evaluate(self.md, self.reward, &prop, t, &mut rng)?;
                Ok((prop, v))
            })
            .collect();
        let cols = cols?;
        let mut x_next = DMatrix::zeros(d, m);
        let mut x = DMatrix::zeros(d, m);
        let mut values = Vec::with_capacity(m);
        for (j, (prop, v)) in cols.iter().enumerate() {
            x_next.set_column(j, &states[j]);
            x.set_column(j, prop);
            values.push(*v);
        }
        Ok(PairBatch { t, x_next, x, values })
    }

    /// Scalar values `v̂_T(x_T^i)` as a synthetic batch for the base case.
    fn prior_value_batch(&self, states: &[DVector<f64>], pass: u64) -> Result<PairBatch> {
        let t = self.md.t_steps();
        let values: Result<Vec<f64>> = states
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    &[0x7076, pass, i as u64],
                ));
                self.value.evaluate(self.md, self.reward, s, t, &mut rng)
            })
            .collect();
        Ok(PairBatch::from_values(t, values?))
    }

    /// Advances every particle one level through the given baseline,
    /// returning (new states, total proposals, forced count).
    fn advance(
        &self,
        states: &[DVector<f64>],
        t: usize,
        baseline: &LcbBaseline,
        pass: u64,
    ) -> Result<(Vec<DVector<f64>>, u64, u64)> {
        let cap = self.cfg.advance_cap;
        let moved: Result<Vec<(DVector<f64>, u64, u64)>> = states
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.seed,
                    &[0x616476, pass, t as u64, i as u64],
                ));
                let thr = baseline.evaluate(Some(s));
                let mut n = 0u64;
                let mut best: Option<(f64, DVector<f64>)> = None;
                loop {
                    let cand = self.md.sample_reverse_step(s, t, &mut rng)?;
                    n += 1;
                    let v = self.value.evaluate(self.md, self.reward, &cand, t, &mut rng)?;
                    let u: f64 = rng.gen();
                    if u.ln() <= v - thr {
                        return Ok((cand, n, 0));
                    }
                    if best.as_ref().map_or(true, |(bv, _)| v > *bv) {
                        best = Some((v, cand));
                    }
                    if n >= cap {
                        return Ok((best.take().expect("cap >= 1").1, n, 1));
                    }
                }
            })
            .collect();
        let moved = moved?;
        let total: u64 = moved.iter().map(|(_, n, _)| n).sum();
        let forced: u64 = moved.iter().map(|(_, _, f)| f).sum();
        if forced as usize == states.len() {
            return Err(Error::ParticleCollapse { t, forced: forced as usize, m: states.len() });
        }
        Ok((moved.into_iter().map(|(s, _, _)| s).collect(), total, forced))
    }

    fn holdout_exceedance(
        &self,
        states: &[DVector<f64>],
        t: usize,
        baseline: &LcbBaseline,
        pass: u64,
    ) -> Result<f64> {
        let batch = self.draw_pairs(states, t, pass, u64::MAX)?;
        let mut exceed = 0usize;
        for (j, v) in batch.values.iter().enumerate() {
            let x_next = DVector::from_column_slice(batch.x_next.column(j).as_slice());
            if *v > baseline.evaluate(Some(&x_next)) {
                exceed += 1;
            }
        }
        Ok(exceed as f64 / batch.len() as f64)
    }

    fn scalar_base_case(&self, states: &[DVector<f64>], pass: u64, search_lambda: bool) -> Result<(LcbBaseline, TimestepReport)> {
        let cfg = self.cfg;
        let batch = self.prior_value_batch(states, pass)?;
        let zero = BaselineModel::Constant { value: 0.0 };
        let lambda = if search_lambda {
            ternary_search_lambda(&batch, &zero, cfg.delta, (1.0, cfg.lambda_max), cfg.lambda_tol)?
        } else {
            1.0
        };
        let tau = tau_hat(&batch, &zero, lambda, cfg.delta)?;
        let baseline = LcbBaseline {
            b: zero.clone(),
            tau_hat: tau,
            lambda_hat: lambda,
            epsilon0: cfg.epsilon0,
            ceiling: self.ceiling,
            delta: cfg.delta,
        };
        // Exceedance of the scalar baseline over fresh prior draws.
        let fresh = self.prior_value_batch(states, pass ^ 0x5a5a)?;
        let thr = baseline.evaluate(None);
        let exceed = fresh.values.iter().filter(|&&v| v > thr).count();
        let report = TimestepReport {
            t_plus_1: self.md.t_steps() + 1,
            lambda_hat: lambda,
            tau_hat: tau,
            j_final: empirical_j(&batch, &zero, lambda, cfg.delta)?,
            j_at_lambda1: empirical_j(&batch, &zero, 1.0, cfg.delta)?,
            holdout_exceedance: exceed as f64 / fresh.len() as f64,
            advance_proposals: 0,
            forced_advances: 0,
        };
        Ok((baseline, report))
    }
}

/// One backward sweep of particle-compatible training with per-timestep
/// joint (λ, b) optimization.
pub fn train_sequential(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LcbSystem, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let ceiling = reward.effective_bound();
    let tr = Trainer { md, reward, value, cfg, ceiling, seed };
    let t_steps = md.t_steps();
    let opt = OptConfig { steps: cfg.steps_per_round, learning_rate: cfg.learning_rate };

    let mut particles = tr.prior_particles(0);
    let mut reports = Vec::with_capacity(t_steps + 1);
    let mut baselines: Vec<Option<LcbBaseline>> = vec![None; t_steps + 1];

    let (base, base_report) = tr.scalar_base_case(&particles, 0, true)?;
    baselines[t_steps] = Some(base);
    reports.push(base_report);

    for t in (0..t_steps).rev() {
        let mut net = Mlp::new(md.dim(), &cfg.hidden, derive_seed(seed, &[0x6e65, t as u64]));
        net.zero_output_layer();
        let mut lambda = 1.0;
        let mut last_batch = None;
        if cfg.mse_warm_start {
            let batch = tr.draw_pairs(&particles, t, 0, 0)?;
            let warm = mse_pretrain_baseline(
                &batch,
                net,
                &OptConfig { steps: cfg.warm_start_steps, learning_rate: 0.05 },
            )?;
            net = match warm {
                BaselineModel::Net(n) => n,
                BaselineModel::Constant { .. } => unreachable!("warm start returns a net"),
            };
        }
        for cycle in 0..cfg.joint_cycles {
            for round in 0..cfg.refresh_rounds {
                let batch =
                    tr.draw_pairs(&particles, t, 0, (cycle * cfg.refresh_rounds + round) as u64 + 1)?;
                fit_baseline_steps(&batch, &mut net, lambda, &opt)?;
                last_batch = Some(batch);
            }
            let batch = last_batch.as_ref().expect("refresh_rounds >= 1");
            let b = BaselineModel::Net(net.clone());
            lambda =
                ternary_search_lambda(batch, &b, cfg.delta, (1.0, cfg.lambda_max), cfg.lambda_tol)?;
        }
        let batch = last_batch.expect("refresh_rounds >= 1");
        let b = BaselineModel::Net(net);
        let tau = tau_hat(&batch, &b, lambda, cfg.delta)?;
        let baseline = LcbBaseline {
            b,
            tau_hat: tau,
            lambda_hat: lambda,
            epsilon0: cfg.epsilon0,
            ceiling,
            delta: cfg.delta,
        };

        let holdout = tr.holdout_exceedance(&particles, t, &baseline, 0)?;
        let (next, proposals, forced) = tr.advance(&particles, t, &baseline, 0)?;
        particles = next;
        reports.push(TimestepReport {
            t_plus_1: t + 1,
            lambda_hat: lambda,
            tau_hat: tau,
            j_final: empirical_j(&batch, &baseline.b, lambda, cfg.delta)?,
            j_at_lambda1: empirical_j(&batch, &baseline.b, 1.0, cfg.delta)?,
            holdout_exceedance: holdout,
            advance_proposals: proposals,
            forced_advances: forced,
        });
        baselines[t] = Some(baseline);
    }

    let system = LcbSystem {
        baselines: baselines.into_iter().map(|b| b.expect("all fitted")).collect(),
        delta: cfg.delta,
        ceiling,
        lambda_max: cfg.lambda_max,
    };
    let report = TrainReport {
        per_timestep: reports,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed,
        config: cfg.clone(),
    };
    Ok((system, report))
}

/// The two-pass schedule: networks at `λ = 1` first, then a frozen-network
/// sweep that picks `λ` by ternary search and recomputes the slack on fresh
/// particles.
pub fn train_two_pass(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LcbSystem, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let ceiling = reward.effective_bound();
    let tr = Trainer { md, reward, value, cfg, ceiling, seed };
    let t_steps = md.t_steps();
    let opt = OptConfig { steps: cfg.steps_per_round, learning_rate: cfg.learning_rate };

    // Pass 1: fixed λ = 1, train networks over refresh rounds.
    let mut particles = tr.prior_particles(1);
    let mut baselines: Vec<Option<LcbBaseline>> = vec![None; t_steps + 1];
    let (base, _) = tr.scalar_base_case(&particles, 1, false)?;
    baselines[t_steps] = Some(base);

    let mut nets: Vec<Option<Mlp>> = vec![None; t_steps];
    for t in (0..t_steps).rev() {
        let mut net = Mlp::new(md.dim(), &cfg.hidden, derive_seed(seed, &[0x6e65, t as u64]));
        net.zero_output_layer();
        if cfg.mse_warm_start {
            let batch = tr.draw_pairs(&particles, t, 1, 0)?;
            match mse_pretrain_baseline(
                &batch,
                net,
                &OptConfig { steps: cfg.warm_start_steps, learning_rate: 0.05 },
            )? {
                BaselineModel::Net(n) => net = n,
                BaselineModel::Constant { .. } => unreachable!(),
            }
        }
        let mut last_batch = None;
        for round in 0..cfg.refresh_rounds {
            let batch = tr.draw_pairs(&particles, t, 1, round as u64 + 1)?;
            fit_baseline_steps(&batch, &mut net, 1.0, &opt)?;
            last_batch = Some(batch);
        }
        let batch = last_batch.expect("refresh_rounds >= 1");
        let b = BaselineModel::Net(net.clone());
        let tau = tau_hat(&batch, &b, 1.0, cfg.delta)?;
        let baseline = LcbBaseline {
            b,
            tau_hat: tau,
            lambda_hat: 1.0,
            epsilon0: cfg.epsilon0,
            ceiling,
            delta: cfg.delta,
        };
        let (next, _, _) = tr.advance(&particles, t, &baseline, 1)?;
        particles = next;
        nets[t] = Some(net);
        baselines[t] = Some(baseline);
    }

    // Pass 2: fresh particles, frozen networks, λ by ternary search.
    let mut particles = tr.prior_particles(2);
    let mut reports = Vec::with_capacity(t_steps + 1);
    let (base, base_report) = tr.scalar_base_case(&particles, 2, true)?;
    baselines[t_steps] = Some(base);
    reports.push(base_report);

    for t in (0..t_steps).rev() {
        let net = nets[t].take().expect("pass 1 fitted every level");
        let b = BaselineModel::Net(net);
        let batch = tr.draw_pairs(&particles, t, 2, 0)?;
        let j_at_1 = empirical_j(&batch, &b, 1.0, cfg.delta)?;
        let lambda =
            ternary_search_lambda(&batch, &b, cfg.delta, (1.0, cfg.lambda_max), cfg.lambda_tol)?;
        let tau = tau_hat(&batch, &b, lambda, cfg.delta)?;
        let j_final = empirical_j(&batch, &b, lambda, cfg.delta)?;
        let baseline = LcbBaseline {
            b,
            tau_hat: tau,
            lambda_hat: lambda,
            epsilon0: cfg.epsilon0,
            ceiling,
            delta: cfg.delta,
        };
        let holdout = tr.holdout_exceedance(&particles, t, &baseline, 2)?;
        let (next, proposals, forced) = tr.advance(&particles, t, &baseline, 2)?;
        particles = next;
        reports.push(TimestepReport {
            t_plus_1: t + 1,
            lambda_hat: lambda,
            tau_hat: tau,
            j_final,
            j_at_lambda1: j_at_1,
            holdout_exceedance: holdout,
            advance_proposals: proposals,
            forced_advances: forced,
        });
        baselines[t] = Some(baseline);
    }

    let system = LcbSystem {
        baselines: baselines.into_iter().map(|b| b.expect("all fitted")).collect(),
        delta: cfg.delta,
        ceiling,
        lambda_max: cfg.lambda_max,
    };
    let report = TrainReport {
        per_timestep: reports,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed,
        config: cfg.clone(),
    };
    Ok((system, report))
}

/// Dispatches on the configured schedule.
pub fn train(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LcbSystem, TrainReport)> {
    match cfg.mode {
        TrainMode::Sequential => train_sequential(md, reward, value, cfg, seed),
        TrainMode::TwoPass => train_two_pass(md, reward, value, cfg, seed),
    }
}

/// Mean particle value per level while sampling with a trained system; used
/// by the tilt-concentration diagnostic.
pub fn particle_value_trend(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    lcbs: &LcbSystem,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let ctx = crate::sampler::SampleContext {
        md: Arc::new(MixtureDiffusion::new(md.spec.clone(), md.sched.clone())?),
        reward: Arc::new(reward.clone()),
        value: Arc::new(value.clone()),
    };
    let policy = crate::sampler::build_policy(
        &crate::sampler::PolicyConfig::Lcb { cap: 1_000 },
        Some(Arc::new(lcbs.clone())),
    )?;
    let t_steps = md.t_steps();
    let rows: Result<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x747264, i as u64]));
            let res = policy.sample(&ctx, &mut rng)?;
            let trj = res.trajectory.expect("policies keep trajectories");
            let mut vals = Vec::with_capacity(t_steps + 1);
            for t in (0..=t_steps).rev() {
                vals.push(value.evaluate(md, reward, trj.state_at_level(t), t, &mut rng)?);
            }
            Ok(vals)
        })
        .collect();
    let rows = rows?;
    let mut out = Vec::with_capacity(t_steps + 1);
    for (idx, t) in (0..=t_steps).rev().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[idx]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (col.len() - 1) as f64;
        out.push((t, mean, (var / col.len() as f64).sqrt()));
    }
    Ok(out)
}
