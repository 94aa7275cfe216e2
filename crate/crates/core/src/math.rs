//! Numerically careful scalar helpers shared across the crate: log-space
//! reductions, normal CDF machinery, and the global exponent-saturation
//! counter.

use std::sync::atomic::{AtomicU64, Ordering};

/// Component log-densities below this are clamped before any logsumexp so a
/// single underflowed term cannot poison a reduction with `-inf`.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

/// Exponents are clamped to this magnitude before `exp`; each clamp bumps the
/// saturation counter.
pub const EXP_CLAMP: f64 = 700.0;

static SATURATION_COUNT: AtomicU64 = AtomicU64::new(0);

/// Number of exponent clamps observed since the last reset. A healthy run
/// reports zero.
pub fn saturation_count() -> u64 {
    SATURATION_COUNT.load(Ordering::Relaxed)
}

pub fn reset_saturation_count() {
    SATURATION_COUNT.store(0, Ordering::Relaxed);
}

/// `exp` with the argument clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
pub fn exp_clamped(x: f64) -> f64 {
    if x.abs() > EXP_CLAMP {
        SATURATION_COUNT.fetch_add(1, Ordering::Relaxed);
        x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
    } else {
        x.exp()
    }
}

/// log(sum_i exp(x_i)) with the usual max shift. Empty input yields -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// log(exp(a) + exp(b)) for two terms.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// logsumexp of `scale * x_i` over a slice, returned together with the
/// softmax weights of the same scaled values (written into `weights`).
pub fn logsumexp_scaled_with_softmax(xs: &[f64], scale: f64, weights: &mut [f64]) -> f64 {
    debug_assert_eq!(xs.len(), weights.len());
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        let v = scale * x;
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for (w, &x) in weights.iter_mut().zip(xs) {
        let e = (scale * x - m).exp();
        *w = e;
        s += e;
    }
    for w in weights.iter_mut() {
        *w /= s;
    }
    m + s.ln()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// log Phi(z), switching to the asymptotic tail expansion once the direct CDF
/// underflows (z below about -8 the direct route starts losing digits; below
/// about -37 it is exactly zero).
pub fn log_normal_cdf(z: f64) -> f64 {
    if z > -8.0 {
        return normal_cdf(z).ln();
    }
    // Phi(z) ~ phi(z)/(-z) * (1 - 1/z^2 + 3/z^4 - 15/z^6) for z << 0.
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
    -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z2 - (-z).ln() + series.ln()
}

/// 95% Wilson score interval for a Bernoulli proportion.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = 1.959963984540054; // Phi^{-1}(0.975)
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Mean with its 95% normal-approximation interval.
pub fn mean_interval(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, mean, mean);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let half = 1.959963984540054 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministically mixes a master seed with a tag path into a stream seed.
/// Workers (particles, batch samples, timesteps) each get their own stream so
/// parallel execution order cannot change results.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09e667f3bcc908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        out = splitmix64(&mut state) ^ out.rotate_left(17);
    }
    out
}
