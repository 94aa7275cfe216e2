//! Generation policies and proposal accounting.
//!
//! Every policy draws complete `x_T -> x_0` paths and reports exactly how
//! many pretrained-model queries it spent, per level. The two rejection
//! policies share one code path parameterized by the per-step acceptance
//! threshold, so a baseline system clipped at the ceiling reproduces the
//! exact sampler bit for bit (same seed, same acceptance stream).
//!
//! Policies are trait objects behind a name registry: `build_policy` turns a
//! [`PolicyConfig`] plus artifacts into a `Box<dyn Policy>`, which is how the
//! CLI and the experiment harness select a sampler at runtime.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcb::{LcbBaseline, LcbSystem};
use crate::math::derive_seed;
use crate::mixture::{MixtureDiffusion, Trajectory};
use crate::reward::RewardSpec;
use crate::value::ValueModel;

/// One generated sample plus its cost accounting.
///
/// `proposals_per_step` has `T + 1` entries: index 0 counts prior draws,
/// index `T - t` counts proposals spent sampling `x_t`. Rejection policies
/// count every query (entries >= 1). Best-of-N is the exception by
/// convention: a trajectory is booked as `T` queries spread over the
/// transition entries with the prior entry left at zero, which is what makes
/// its effective N come out to exactly N.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub x0: DVector<f64>,
    pub trajectory: Option<Trajectory>,
    pub proposals_per_step: Vec<u64>,
    pub forced_acceptances: u64,
    /// Raw (unscaled) reward of `x0`.
    pub reward: f64,
}

impl SampleResult {
    pub fn total_proposals(&self) -> u64 {
        self.proposals_per_step.iter().sum()
    }
}

/// Common inputs every policy draws from.
pub struct SampleContext {
    pub md: Arc<MixtureDiffusion>,
    pub reward: Arc<RewardSpec>,
    pub value: Arc<ValueModel>,
}

/// A generation strategy. Implementations are stateless aside from their
/// configuration, so one boxed policy serves any number of workers.
pub trait Policy: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, ctx: &SampleContext, rng: &mut ChaCha8Rng) -> Result<SampleResult>;
}

/// Policy selection as it appears in config files and on the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicyConfig {
    Unguided,
    Rs {
        #[serde(default = "default_rs_cap")]
        cap: u64,
    },
    Lcb {
        #[serde(default = "default_lcb_cap")]
        cap: u64,
    },
    Bon {
        n: u64,
    },
    LcbBon {
        m: u64,
        #[serde(default = "default_lcb_cap")]
        cap: u64,
    },
}

fn default_rs_cap() -> u64 {
    10_000
}

fn default_lcb_cap() -> u64 {
    1_000
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Unguided => "unguided",
            PolicyConfig::Rs { .. } => "rs",
            PolicyConfig::Lcb { .. } => "lcb",
            PolicyConfig::Bon { .. } => "bon",
            PolicyConfig::LcbBon { .. } => "lcb_bon",
        }
    }

    pub fn needs_lcb(&self) -> bool {
        matches!(self, PolicyConfig::Lcb { .. } | PolicyConfig::LcbBon { .. })
    }
}

/// Names accepted by [`build_policy`], in registry order.
pub const POLICY_NAMES: [&str; 5] = ["unguided", "rs", "lcb", "bon", "lcb_bon"];

/// Instantiates the named strategy. LCB-backed policies need the trained
/// baseline system; the rest ignore it.
pub fn build_policy(cfg: &PolicyConfig, lcbs: Option<Arc<LcbSystem>>) -> Result<Box<dyn Policy>> {
    match cfg {
        PolicyConfig::Unguided => Ok(Box::new(UnguidedPolicy)),
        PolicyConfig::Rs { cap } => Ok(Box::new(ExactRsPolicy { cap: *cap })),
        PolicyConfig::Lcb { cap } => {
            let lcbs = lcbs.ok_or_else(|| {
                Error::InvalidConfig("lcb policy requires a trained baseline artifact".into())
            })?;
            Ok(Box::new(LcbRsPolicy { lcbs, cap: *cap }))
        }
        PolicyConfig::Bon { n } => {
            if *n == 0 {
                return Err(Error::InvalidConfig("bon needs n >= 1".into()));
            }
            Ok(Box::new(BonPolicy { n: *n }))
        }
        PolicyConfig::LcbBon { m, cap } => {
            if *m == 0 {
                return Err(Error::InvalidConfig("lcb_bon needs m >= 1".into()));
            }
            let lcbs = lcbs.ok_or_else(|| {
                Error::InvalidConfig("lcb_bon policy requires a trained baseline artifact".into())
            })?;
            Ok(Box::new(LcbBonPolicy { inner: LcbRsPolicy { lcbs, cap: *cap }, m: *m }))
        }
    }
}

struct UnguidedPolicy;

impl Policy for UnguidedPolicy {
    fn name(&self) -> &'static str {
        "unguided"
    }

    fn sample(&self, ctx: &SampleContext, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
        let tr = ctx.md.sample_trajectory(rng);
        let reward = ctx.reward.raw_reward(tr.x0());
        Ok(SampleResult {
            x0: tr.x0().clone(),
            proposals_per_step: vec![1; ctx.md.t_steps() + 1],
            forced_acceptances: 0,
            reward,
            trajectory: Some(tr),
        })
    }
}

/// Per-step acceptance threshold seen by the shared rejection loop.
enum Threshold<'a> {
    /// The global bound B at every step.
    Global(f64),
    /// `B_{t+1}(x_{t+1})` from a baseline system; `None` state at the prior.
    Baselines(&'a [LcbBaseline]),
}

impl Threshold<'_> {
    fn at(&self, t: usize, x_next: Option<&DVector<f64>>) -> f64 {
        match self {
            Threshold::Global(b) => *b,
            Threshold::Baselines(bs) => bs[t].evaluate(x_next),
        }
    }
}

/// The shared rejection engine: propose from the pretrained kernel, accept
/// when `log u <= v̂ - threshold`, force-accept the best proposal seen once
/// the cap is hit.
fn rejection_trajectory(
    ctx: &SampleContext,
    threshold: &Threshold,
    cap: u64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let t_steps = ctx.md.t_steps();
    let mut proposals = vec![0u64; t_steps + 1];
    let mut forced = 0u64;
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(t_steps + 1);

    // Prior level: accept x_T against the scalar threshold.
    let thr = threshold.at(t_steps, None);
    let mut best: Option<(f64, DVector<f64>)> = None;
    loop {
        let cand = ctx.md.sample_prior(rng);
        proposals[0] += 1;
        let v = ctx.value.evaluate(&ctx.md, &ctx.reward, &cand, t_steps, rng)?;
        let u: f64 = rng.gen();
        if u.ln() <= v - thr {
            states.push(cand);
            break;
        }
        if best.as_ref().map_or(true, |(bv, _)| v > *bv) {
            best = Some((v, cand));
        }
        if proposals[0] >= cap {
            forced += 1;
            states.push(best.take().expect("cap >= 1 guarantees a candidate").1);
            break;
        }
    }

    for t in (0..t_steps).rev() {
        let x_next = states.last().unwrap().clone();
        let thr = threshold.at(t, Some(&x_next));
        let slot = t_steps - t;
        let mut best: Option<(f64, DVector<f64>)> = None;
        loop {
            let cand = ctx.md.sample_reverse_step(&x_next, t, rng)?;
            proposals[slot] += 1;
            let v = ctx.value.evaluate(&ctx.md, &ctx.reward, &cand, t, rng)?;
            let u: f64 = rng.gen();
            if u.ln() <= v - thr {
                states.push(cand);
                break;
            }
            if best.as_ref().map_or(true, |(bv, _)| v > *bv) {
                best = Some((v, cand));
            }
            if proposals[slot] >= cap {
                forced += 1;
                states.push(best.take().expect("cap >= 1 guarantees a candidate").1);
                break;
            }
        }
    }

    let tr = Trajectory { states, terminal_reward: None };
    let reward = ctx.reward.raw_reward(tr.x0());
    Ok(SampleResult {
        x0: tr.x0().clone(),
        proposals_per_step: proposals,
        forced_acceptances: forced,
        reward,
        trajectory: Some(tr),
    })
}

struct ExactRsPolicy {
    cap: u64,
}

impl Policy for ExactRsPolicy {
    fn name(&self) -> &'static str {
        "rs"
    }

    fn sample(&self, ctx: &SampleContext, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
        let b = ctx.reward.effective_bound();
        rejection_trajectory(ctx, &Threshold::Global(b), self.cap, rng)
    }
}

struct LcbRsPolicy {
    lcbs: Arc<LcbSystem>,
    cap: u64,
}

impl Policy for LcbRsPolicy {
    fn name(&self) -> &'static str {
        "lcb"
    }

    fn sample(&self, ctx: &SampleContext, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
        if self.lcbs.t_steps() != ctx.md.t_steps() {
            return Err(Error::ArtifactMismatch(format!(
                "baseline system built for T = {}, model has T = {}",
                self.lcbs.t_steps(),
                ctx.md.t_steps()
            )));
        }
        rejection_trajectory(ctx, &Threshold::Baselines(&self.lcbs.baselines), self.cap, rng)
    }
}

struct BonPolicy {
    n: u64,
}

impl Policy for BonPolicy {
    fn name(&self) -> &'static str {
        "bon"
    }

    fn sample(&self, ctx: &SampleContext, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
        let t_steps = ctx.md.t_steps();
        let mut best: Option<(f64, Trajectory)> = None;
        for _ in 0..self.n {
            let tr = ctx.md.sample_trajectory(rng);
            let r = ctx.reward.raw_reward(tr.x0());
            // Ties break toward the first draw.
            if best.as_ref().map_or(true, |(br, _)| r > *br) {
                best = Some((r, tr));
            }
        }
        let (reward, tr) = best.expect("n >= 1");
        // One trajectory is booked as T queries: the prior entry stays zero
        // so that effective N equals N by construction.
        let mut proposals = vec![self.n; t_steps + 1];
        proposals[0] = 0;
        Ok(SampleResult {
            x0: tr.x0().clone(),
            proposals_per_step: proposals,
            forced_acceptances: 0,
            reward,
            trajectory: Some(tr),
        })
    }
}

struct LcbBonPolicy {
    inner: LcbRsPolicy,
    m: u64,
}

impl Policy for LcbBonPolicy {
    fn name(&self) -> &'static str {
        "lcb_bon"
    }

    fn sample(&self, ctx: &SampleContext, rng: &mut ChaCha8Rng) -> Result<SampleResult> {
        let mut best: Option<SampleResult> = None;
        let mut proposals = vec![0u64; ctx.md.t_steps() + 1];
        let mut forced = 0;
        for _ in 0..self.m {
            let cand = self.inner.sample(ctx, rng)?;
            for (acc, p) in proposals.iter_mut().zip(&cand.proposals_per_step) {
                *acc += p;
            }
            forced += cand.forced_acceptances;
            if best.as_ref().map_or(true, |b| cand.reward > b.reward) {
                best = Some(cand);
            }
        }
        let mut out = best.expect("m >= 1");
        out.proposals_per_step = proposals;
        out.forced_acceptances = forced;
        Ok(out)
    }
}

/// Draws a batch with one derived RNG stream per sample index, in parallel,
/// collected in index order so results are independent of thread scheduling.
pub fn sample_batch(
    policy: &dyn Policy,
    ctx: &SampleContext,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SampleResult>> {
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7361, i as u64]));
            policy.sample(ctx, &mut rng)
        })
        .collect()
}

/// Monte Carlo check of the per-step proposal bound at one probe state:
/// returns the empirical mean proposal count over full rejection loops and
/// the bound `(1/(1-c))^2 Ê[e^{B(x') - v̂(x)}]` with `c` the observed
/// exceedance fraction at the probe.
pub fn expected_proposals_bound(
    ctx: &SampleContext,
    lcb: &LcbBaseline,
    x_next: &DVector<f64>,
    t: usize,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if n_mc < 1_000 {
        return Err(Error::InvalidConfig("expected_proposals_bound needs n_mc >= 1000".into()));
    }
    let b_val = lcb.evaluate(Some(x_next));

    // One pass of proposals estimates both c and the exponential moment.
    let mut exceed = 0usize;
    let mut sum_exp = 0.0;
    for _ in 0..n_mc {
        let x = ctx.md.sample_reverse_step(x_next, t, rng)?;
        let v = ctx.value.evaluate(&ctx.md, &ctx.reward, &x, t, rng)?;
        if v > b_val {
            exceed += 1;
        }
        sum_exp += crate::math::exp_clamped(b_val - v);
    }
    let c = exceed as f64 / n_mc as f64;
    if c >= 1.0 {
        return Err(Error::InvalidConfig(
            "degenerate probe: every proposal exceeds the baseline".into(),
        ));
    }
    let bound = sum_exp / n_mc as f64 / ((1.0 - c) * (1.0 - c));

    // Independent rejection loops for the empirical mean count.
    let n_loops = (n_mc / 10).max(200);
    let mut total = 0u64;
    for _ in 0..n_loops {
        loop {
            total += 1;
            let x = ctx.md.sample_reverse_step(x_next, t, rng)?;
            let v = ctx.value.evaluate(&ctx.md, &ctx.reward, &x, t, rng)?;
            let u: f64 = rng.gen();
            if u.ln() <= v - b_val {
                break;
            }
        }
    }
    Ok((total as f64 / n_loops as f64, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcb::BaselineModel;
    use crate::mixture::{MixtureSpec, NoiseSchedule};
    use crate::reward::RewardKind;
    use crate::value::analytic_value;
    use approx::assert_relative_eq;

    fn paper_ctx(alpha: f64) -> SampleContext {
        let md = MixtureDiffusion::new(
            MixtureSpec::two_cluster_default(),
            NoiseSchedule::linear_beta(20, 0.02, 0.30).unwrap(),
        )
        .unwrap();
        SampleContext {
            md: Arc::new(md),
            reward: Arc::new(RewardSpec::left_tail_indicator(alpha).unwrap()),
            value: Arc::new(ValueModel::Analytic),
        }
    }

    #[test]
    fn unguided_counts_and_mean_reward() {
        let ctx = paper_ctx(0.2);
        let policy = build_policy(&PolicyConfig::Unguided, None).unwrap();
        let results = sample_batch(policy.as_ref(), &ctx, 20_000, 11).unwrap();
        for r in &results {
            assert!(r.proposals_per_step.iter().all(|&p| p == 1));
            assert_eq!(r.forced_acceptances, 0);
        }
        // E[r0] = 0.05 Phi(-2) + 0.95 Phi(-12).
        let expect = 0.05 * crate::math::normal_cdf(-2.0);
        let mean = results.iter().map(|r| r.reward).sum::<f64>() / results.len() as f64;
        let se = (expect * (1.0 - expect) / results.len() as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn batch_sampling_is_seed_deterministic() {
        let ctx = paper_ctx(0.5);
        for cfg in [
            PolicyConfig::Unguided,
            PolicyConfig::Rs { cap: 10_000 },
            PolicyConfig::Bon { n: 4 },
        ] {
            let policy = build_policy(&cfg, None).unwrap();
            let a = sample_batch(policy.as_ref(), &ctx, 64, 99).unwrap();
            let b = sample_batch(policy.as_ref(), &ctx, 64, 99).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.x0, y.x0, "{} not deterministic", cfg.name());
                assert_eq!(x.proposals_per_step, y.proposals_per_step);
            }
            let c = sample_batch(policy.as_ref(), &ctx, 64, 100).unwrap();
            assert!(a.iter().zip(&c).any(|(x, y)| x.x0 != y.x0));
        }
    }

    #[test]
    fn constant_reward_at_bound_accepts_everything() {
        // v ≡ B makes every proposal accept; the law equals unguided and
        // every step spends exactly one query.
        let md = MixtureDiffusion::new(
            MixtureSpec::two_cluster_default(),
            NoiseSchedule::linear_beta(6, 0.05, 0.3).unwrap(),
        )
        .unwrap();
        let ctx = SampleContext {
            md: Arc::new(md),
            reward: Arc::new(
                RewardSpec::new(RewardKind::Constant { value: 1.0 }, 1.0, 0.5).unwrap(),
            ),
            value: Arc::new(ValueModel::Analytic),
        };
        let policy = build_policy(&PolicyConfig::Rs { cap: 10_000 }, None).unwrap();
        let results = sample_batch(policy.as_ref(), &ctx, 200, 5).unwrap();
        for r in &results {
            assert!(r.proposals_per_step.iter().all(|&p| p == 1));
        }
    }

    #[test]
    fn ceiling_baselines_reproduce_exact_rs_bitwise() {
        let ctx = paper_ctx(0.2);
        let lcbs = Arc::new(LcbSystem::all_ceiling(20, ctx.reward.effective_bound(), 0.1));
        let rs = build_policy(&PolicyConfig::Rs { cap: 700 }, None).unwrap();
        let lcb = build_policy(&PolicyConfig::Lcb { cap: 700 }, Some(lcbs)).unwrap();
        let a = sample_batch(rs.as_ref(), &ctx, 48, 1234).unwrap();
        let b = sample_batch(lcb.as_ref(), &ctx, 48, 1234).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x0, y.x0);
            assert_eq!(x.proposals_per_step, y.proposals_per_step);
            assert_eq!(x.forced_acceptances, y.forced_acceptances);
        }
    }

    #[test]
    fn proposal_accounting_is_exact() {
        // With cap 1 every loop runs exactly once, so totals are T + 1.
        let ctx = paper_ctx(0.5);
        let policy = build_policy(&PolicyConfig::Rs { cap: 1 }, None).unwrap();
        let r = sample_batch(policy.as_ref(), &ctx, 16, 3).unwrap();
        for s in &r {
            assert_eq!(s.total_proposals(), 21);
        }
    }

    #[test]
    fn bon_accounting_and_monotone_reward() {
        let ctx = paper_ctx(0.2);
        let bon1 = build_policy(&PolicyConfig::Bon { n: 1 }, None).unwrap();
        let bon2 = build_policy(&PolicyConfig::Bon { n: 2 }, None).unwrap();
        let unguided = build_policy(&PolicyConfig::Unguided, None).unwrap();

        // N = 1 draws the same trajectory as unguided under the same stream.
        let a = sample_batch(bon1.as_ref(), &ctx, 32, 7).unwrap();
        let b = sample_batch(unguided.as_ref(), &ctx, 32, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x0, y.x0);
        }

        let n = 10_000;
        let r1 = sample_batch(bon1.as_ref(), &ctx, n, 21).unwrap();
        let r2 = sample_batch(bon2.as_ref(), &ctx, n, 22).unwrap();
        let m1 = r1.iter().map(|r| r.reward).sum::<f64>() / n as f64;
        let m2 = r2.iter().map(|r| r.reward).sum::<f64>() / n as f64;
        let se = (m1.max(m2) / n as f64).sqrt().max(1e-4);
        assert!(m2 >= m1 - 2.0 * se, "BoN(2) mean {m2} vs BoN(1) {m1}");

        // Accounting: prior entry zero, transitions n each.
        for r in &r2 {
            assert_eq!(r.proposals_per_step[0], 0);
            assert!(r.proposals_per_step[1..].iter().all(|&p| p == 2));
            assert_eq!(r.total_proposals(), 40);
        }
    }

    #[test]
    fn exact_rs_matches_closed_form_tilted_density() {
        // K = 1 target, alpha = 0.5: acceptance is the exact tilt, so x0's
        // first coordinate follows N(-5,1) reweighted by e^{B 1{x < -7}}.
        let md = MixtureDiffusion::new(
            MixtureSpec {
                weights: vec![1.0],
                means: vec![vec![-5.0, 0.0]],
                covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            NoiseSchedule::linear_beta(20, 0.02, 0.30).unwrap(),
        )
        .unwrap();
        let ctx = SampleContext {
            md: Arc::new(md),
            reward: Arc::new(RewardSpec::left_tail_indicator(0.5).unwrap()),
            value: Arc::new(ValueModel::Analytic),
        };
        let policy = build_policy(&PolicyConfig::Rs { cap: 10_000 }, None).unwrap();
        let results = sample_batch(policy.as_ref(), &ctx, 20_000, 77).unwrap();
        let xs: Vec<f64> = results.iter().map(|r| r.x0[0]).collect();

        let tv = crate::diagnostics::tv_to_tilted_scalar_gaussian(
            &xs,
            -5.0,
            1.0,
            -7.0,
            2.0,
            100,
            (-10.0, 10.0),
        );
        assert!(tv <= 0.03, "TV to closed-form tilted density: {tv}");
        // Forced acceptances stay zero in a healthy run.
        assert_eq!(results.iter().map(|r| r.forced_acceptances).sum::<u64>(), 0);
    }

    #[test]
    fn forced_acceptance_cap_is_counted() {
        // A hostile constant baseline far above every value forces the cap at
        // every step.
        let ctx = paper_ctx(0.2);
        let mut lcbs = LcbSystem::all_ceiling(20, ctx.reward.effective_bound(), 0.1);
        for b in &mut lcbs.baselines {
            b.b = BaselineModel::Constant { value: 50.0 };
            b.tau_hat = 0.0;
            b.ceiling = 50.0;
        }
        let policy = build_policy(&PolicyConfig::Lcb { cap: 3 }, Some(Arc::new(lcbs))).unwrap();
        let r = sample_batch(policy.as_ref(), &ctx, 4, 9).unwrap();
        for s in &r {
            assert_eq!(s.forced_acceptances, 21);
            assert_eq!(s.total_proposals(), 63);
        }
    }

    #[test]
    fn forced_acceptance_keeps_best_value_candidate() {
        // With cap 2 the kept state is the argmax-v̂ of the two proposals:
        // replay the stream to verify.
        let ctx = paper_ctx(0.2);
        let mut lcbs = LcbSystem::all_ceiling(ctx.md.t_steps(), 50.0, 0.1);
        for b in &mut lcbs.baselines {
            b.b = BaselineModel::Constant { value: 50.0 };
        }
        let policy = build_policy(&PolicyConfig::Lcb { cap: 2 }, Some(Arc::new(lcbs))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(31, &[0x7361, 0]));
        let res = policy.sample(&ctx, &mut rng).unwrap();

        let mut replay = ChaCha8Rng::seed_from_u64(derive_seed(31, &[0x7361, 0]));
        let mut c1 = ctx.md.sample_prior(&mut replay);
        let v1 = analytic_value(&ctx.md, &ctx.reward, &c1, 20).unwrap();
        let _u: f64 = replay.gen();
        let c2 = ctx.md.sample_prior(&mut replay);
        let v2 = analytic_value(&ctx.md, &ctx.reward, &c2, 20).unwrap();
        let _u: f64 = replay.gen();
        if v2 > v1 {
            c1 = c2;
        }
        assert_eq!(res.trajectory.as_ref().unwrap().states[0], c1);
    }

    #[test]
    fn proposal_bound_holds_at_probes() {
        let ctx = paper_ctx(0.5);
        let t = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for i in 0..5 {
            let x_next = {
                let mut r = ChaCha8Rng::seed_from_u64(500 + i);
                let tr = ctx.md.sample_trajectory(&mut r);
                tr.state_at_level(t + 1).clone()
            };
            let lcb = LcbBaseline {
                b: BaselineModel::Constant { value: 0.3 },
                tau_hat: 0.2,
                lambda_hat: 2.0,
                epsilon0: 0.0,
                ceiling: ctx.reward.effective_bound(),
                delta: 0.1,
            };
            let (emp, bound) =
                expected_proposals_bound(&ctx, &lcb, &x_next, t, 20_000, &mut rng).unwrap();
            // 3 Monte Carlo SEs on the empirical mean: geometric-ish spread,
            // bounded above by emp itself.
            let se = emp / (2_000f64).sqrt() * 3.0;
            assert!(emp <= bound + se, "probe {i}: empirical {emp} vs bound {bound}");
        }
    }

    #[test]
    fn proposal_bound_trivial_when_baseline_equals_value_bound() {
        // v̂ ≡ B and B(x) ≡ B: acceptance always, both sides 1.
        let md = MixtureDiffusion::new(
            MixtureSpec::two_cluster_default(),
            NoiseSchedule::linear_beta(6, 0.05, 0.3).unwrap(),
        )
        .unwrap();
        let ctx = SampleContext {
            md: Arc::new(md),
            reward: Arc::new(
                RewardSpec::new(RewardKind::Constant { value: 1.0 }, 1.0, 1.0).unwrap(),
            ),
            value: Arc::new(ValueModel::Analytic),
        };
        let lcb = LcbBaseline::at_ceiling(1.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_next = DVector::from_vec(vec![0.5, -0.5]);
        let (emp, bound) =
            expected_proposals_bound(&ctx, &lcb, &x_next, 2, 2_000, &mut rng).unwrap();
        assert_relative_eq!(emp, 1.0);
        assert_relative_eq!(bound, 1.0, max_relative = 1e-12);
    }
}
