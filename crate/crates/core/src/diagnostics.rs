//! Quantitative comparison machinery: histogram TV, effective N, reward
//! statistics, coverage matrices, and value-vs-baseline traces.

use nalgebra::DVector;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lcb::LcbSystem;
use crate::math::{derive_seed, mean_interval, normal_cdf, wilson_interval};
use crate::mixture::MixtureDiffusion;
use crate::reward::RewardSpec;
use crate::sampler::{build_policy, PolicyConfig, SampleContext, SampleResult};
use crate::value::ValueModel;

/// Uniform-bin histogram over a fixed range, with explicit underflow and
/// overflow bins so out-of-range mass still participates in TV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram1D {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    /// counts[0] is underflow, counts[bins + 1] overflow.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram1D {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::InvalidConfig(format!("bad histogram range [{lo}, {hi}] x {bins}")));
        }
        Ok(Histogram1D { lo, hi, bins, counts: vec![0; bins + 2], total: 0 })
    }

    pub fn insert(&mut self, v: f64) {
        let idx = if v < self.lo {
            0
        } else if v >= self.hi {
            self.bins + 1
        } else {
            1 + ((v - self.lo) / (self.hi - self.lo) * self.bins as f64) as usize
        };
        self.counts[idx.min(self.bins + 1)] += 1;
        self.total += 1;
    }

    pub fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        let mut h = Histogram1D::new(lo, hi, bins)?;
        for &v in values {
            h.insert(v);
        }
        Ok(h)
    }

    pub fn proportions(&self) -> Vec<f64> {
        let n = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Total variation between two sample sets along one coordinate:
/// `(1/2) sum_bins |p̂_a - p̂_b|` over the shared binning.
pub fn marginal_tv(
    samples_a: &[DVector<f64>],
    samples_b: &[DVector<f64>],
    coordinate: usize,
    bins: usize,
    range: (f64, f64),
) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidConfig("marginal_tv needs nonempty sample sets".into()));
    }
    let va: Vec<f64> = samples_a.iter().map(|x| x[coordinate]).collect();
    let vb: Vec<f64> = samples_b.iter().map(|x| x[coordinate]).collect();
    let ha = Histogram1D::from_values(&va, range.0, range.1, bins)?;
    let hb = Histogram1D::from_values(&vb, range.0, range.1, bins)?;
    Ok(tv_between(&ha.proportions(), &hb.proportions()))
}

pub fn tv_between(pa: &[f64], pb: &[f64]) -> f64 {
    0.5 * pa.iter().zip(pb).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// TV between empirical scalar samples and the closed-form tilted Gaussian
/// `p*(x) ∝ N(x; mean, sd²) e^{log_tilt · 1{x < θ}}`, using exact bin masses
/// plus overflow bins.
pub fn tv_to_tilted_scalar_gaussian(
    samples: &[f64],
    mean: f64,
    sd: f64,
    theta: f64,
    log_tilt: f64,
    bins: usize,
    range: (f64, f64),
) -> f64 {
    let hist = Histogram1D::from_values(samples, range.0, range.1, bins).expect("valid range");
    let phi = |x: f64| {
        if x == f64::NEG_INFINITY {
            0.0
        } else if x == f64::INFINITY {
            1.0
        } else {
            normal_cdf((x - mean) / sd)
        }
    };
    let tilt = log_tilt.exp();
    // Mass of [a, b) under the unnormalized tilted density.
    let seg = |a: f64, b: f64| -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut m = 0.0;
        if a < theta {
            m += tilt * (phi(b.min(theta)) - phi(a));
        }
        if b > theta {
            m += phi(b) - phi(a.max(theta));
        }
        m
    };
    let z = seg(f64::NEG_INFINITY, f64::INFINITY);
    let w = (range.1 - range.0) / bins as f64;
    let mut masses = Vec::with_capacity(bins + 2);
    masses.push(seg(f64::NEG_INFINITY, range.0) / z);
    for i in 0..bins {
        let a = range.0 + w * i as f64;
        masses.push(seg(a, a + w) / z);
    }
    masses.push(seg(range.1, f64::INFINITY) / z);
    tv_between(&hist.proportions(), &masses)
}

/// Total pretrained-model queries divided by `T × batch size`.
pub fn effective_n(results: &[SampleResult], t_steps: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("effective_n needs a nonempty batch".into()));
    }
    let total: u64 = results.iter().map(|r| r.total_proposals()).sum();
    Ok(total as f64 / (t_steps as f64 * results.len() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardStats {
    pub mean: f64,
    pub mean_ci: (f64, f64),
    /// Fraction of samples attaining the reward kind's maximum raw value.
    pub top_mass: f64,
    pub top_mass_ci: (f64, f64),
    pub n: usize,
}

/// Batch reward statistics: normal CI for the mean, Wilson CI for the mass
/// at the maximal reward value.
pub fn reward_stats(results: &[SampleResult], reward: &RewardSpec) -> Result<RewardStats> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("reward_stats needs a nonempty batch".into()));
    }
    let rewards: Vec<f64> = results.iter().map(|r| r.reward).collect();
    let (mean, lo, hi) = mean_interval(&rewards);
    let max_raw = reward.max_raw();
    let hits = rewards.iter().filter(|&&r| r >= max_raw - 1e-12).count() as u64;
    let n = rewards.len() as u64;
    Ok(RewardStats {
        mean,
        mean_ci: (lo, hi),
        top_mass: hits as f64 / n as f64,
        top_mass_ci: wilson_interval(hits, n),
        n: rewards.len(),
    })
}

/// Per-source-state coverage rates `D_{i,t+1} = (1/N) Σ_j 1{v̂_t(y_j) <=
/// B_{t+1}(x^i_{t+1})}` over `M` guided trajectories and `N` fresh proposals
/// per state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageMatrix {
    /// entries[i][col] for source trajectory `i`; columns run t = T-1 .. 0.
    pub entries: Vec<Vec<f64>>,
    pub m_sources: usize,
    pub n_proposals: usize,
    /// Fraction of source states per column with coverage below the summary
    /// threshold (the empirical ζ).
    pub zeta_per_step: Vec<f64>,
    pub threshold: f64,
}

impl CoverageMatrix {
    pub fn worst_zeta(&self) -> f64 {
        self.zeta_per_step.iter().copied().fold(0.0, f64::max)
    }
}

fn lcb_context(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
) -> Result<SampleContext> {
    Ok(SampleContext {
        md: Arc::new(MixtureDiffusion::new(md.spec.clone(), md.sched.clone())?),
        reward: Arc::new(reward.clone()),
        value: Arc::new(value.clone()),
    })
}

/// Runs the baselined sampler for `m_sources` trajectories and rates every
/// visited source state by how often fresh proposals stay under its
/// baseline.
pub fn coverage_matrix(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    lcbs: &LcbSystem,
    m_sources: usize,
    n_proposals: usize,
    threshold: f64,
    seed: u64,
) -> Result<CoverageMatrix> {
    if m_sources == 0 || n_proposals == 0 {
        return Err(Error::InvalidConfig("coverage needs m, n >= 1".into()));
    }
    let t_steps = md.t_steps();
    let ctx = lcb_context(md, reward, value)?;
    let policy = build_policy(&PolicyConfig::Lcb { cap: 1_000 }, Some(Arc::new(lcbs.clone())))?;

    let entries: Result<Vec<Vec<f64>>> = (0..m_sources)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc07e, i as u64]));
            let res = policy.sample(&ctx, &mut rng)?;
            let tr = res.trajectory.expect("policies keep trajectories");
            let mut row = Vec::with_capacity(t_steps);
            for t in (0..t_steps).rev() {
                let x_next = tr.state_at_level(t + 1);
                let b_val = lcbs.baselines[t].evaluate(Some(x_next));
                let mut ok = 0usize;
                for _ in 0..n_proposals {
                    let y = md.sample_reverse_step(x_next, t, &mut rng)?;
                    let v = value.evaluate(md, reward, &y, t, &mut rng)?;
                    if v <= b_val {
                        ok += 1;
                    }
                }
                row.push(ok as f64 / n_proposals as f64);
            }
            Ok(row)
        })
        .collect();
    let entries = entries?;

    let mut zeta_per_step = Vec::with_capacity(t_steps);
    for col in 0..t_steps {
        let below = entries.iter().filter(|row| row[col] < threshold).count();
        zeta_per_step.push(below as f64 / m_sources as f64);
    }
    Ok(CoverageMatrix { entries, m_sources, n_proposals, zeta_per_step, threshold })
}

/// One guided trajectory's aligned series `(t, v̂_t(x_t), B_{t+1}(x_{t+1}))`
/// for t = T-1 .. 0.
pub fn trajectory_trace(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    lcbs: &LcbSystem,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let ctx = lcb_context(md, reward, value)?;
    let policy = build_policy(&PolicyConfig::Lcb { cap: 1_000 }, Some(Arc::new(lcbs.clone())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = policy.sample(&ctx, &mut rng)?;
    let tr = res.trajectory.expect("policies keep trajectories");
    let mut out = Vec::with_capacity(md.t_steps());
    for t in (0..md.t_steps()).rev() {
        let x_next = tr.state_at_level(t + 1);
        let x_t = tr.state_at_level(t);
        let v = value.evaluate(md, reward, x_t, t, &mut rng)?;
        let b = lcbs.baselines[t].evaluate(Some(x_next));
        out.push((t, v, b));
    }
    Ok(out)
}

/// Fresh-trajectory exceedance rates per level, including the scalar prior
/// level last: the fraction of fresh proposals whose value exceeds the
/// deployed baseline, with conditioning states drawn by the baselined
/// sampler itself.
pub fn exceedance_rates(
    md: &MixtureDiffusion,
    reward: &RewardSpec,
    value: &ValueModel,
    lcbs: &LcbSystem,
    n_states: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let t_steps = md.t_steps();
    let ctx = lcb_context(md, reward, value)?;
    let policy = build_policy(&PolicyConfig::Lcb { cap: 1_000 }, Some(Arc::new(lcbs.clone())))?;

    let counts: Result<Vec<Vec<u64>>> = (0..n_states)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe8ce, i as u64]));
            let res = policy.sample(&ctx, &mut rng)?;
            let tr = res.trajectory.expect("policies keep trajectories");
            let mut row = vec![0u64; t_steps + 1];
            for t in 0..t_steps {
                let x_next = tr.state_at_level(t + 1);
                let y = md.sample_reverse_step(x_next, t, &mut rng)?;
                let v = value.evaluate(md, reward, &y, t, &mut rng)?;
                if v > lcbs.baselines[t].evaluate(Some(x_next)) {
                    row[t] = 1;
                }
            }
            let y = md.sample_prior(&mut rng);
            let v = value.evaluate(md, reward, &y, t_steps, &mut rng)?;
            if v > lcbs.baselines[t_steps].evaluate(None) {
                row[t_steps] = 1;
            }
            Ok(row)
        })
        .collect();
    let counts = counts?;
    let mut out = Vec::with_capacity(t_steps + 1);
    for t in 0..=t_steps {
        let exceed: u64 = counts.iter().map(|row| row[t]).sum();
        out.push((t, exceed as f64 / n_states as f64));
    }
    Ok(out)
}
