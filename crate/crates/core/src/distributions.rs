//! Log-density kernels and samplers for Normal, Half-Cauchy and Student-t.
//!
//! Random streams come from ChaCha8 (`rand_chacha`), a counter-based
//! generator whose output is fixed by (seed, stream, word position) on
//! every platform. Independent consumers take separate streams of the
//! same seed via [`rng_stream`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

pub type RngState = ChaCha8Rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// From this many degrees of freedom on, the Student-t normalizer and its
/// derivative are evaluated by asymptotic series.
const NU_SERIES: f64 = 100.0;

/// Generator for `seed` on stream 0.
pub fn rng_from_seed(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `seed` on an explicit stream; streams never overlap.
pub fn rng_stream(seed: u64, stream: u64) -> RngState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Location, scale and degrees of freedom. `nu = +inf` is the Normal limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentTParams {
    pub mu: f64,
    pub sigma: f64,
    pub nu: f64,
}

impl StudentTParams {
    pub fn new(mu: f64, sigma: f64, nu: f64) -> Self {
        debug_assert!(sigma > 0.0 && nu > 0.0, "invalid Student-t parameters");
        StudentTParams { mu, sigma, nu }
    }

    pub fn normal(mu: f64, sigma: f64) -> Self {
        StudentTParams::new(mu, sigma, f64::INFINITY)
    }

    pub fn is_normal(&self) -> bool {
        self.nu.is_infinite()
    }
}

pub fn logpdf_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - HALF_LN_2PI
}

/// Normalizing constant of the Student-t log-density, minus `ln sigma`.
pub fn student_t_log_norm(nu: f64) -> f64 {
    if nu >= NU_SERIES {
        let r = 1.0 / nu;
        let r2 = r * r;
        return -HALF_LN_2PI + r * (-0.25 + r2 * (1.0 / 24.0 + r2 * (-0.05 + r2 * (17.0 / 112.0 - r2 * 31.0 / 36.0))));
    }
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
}

/// Derivative of [`student_t_log_norm`] with respect to `nu`.
pub fn student_t_log_norm_dnu(nu: f64) -> f64 {
    if nu >= NU_SERIES {
        let r2 = 1.0 / (nu * nu);
        return 0.5 * r2 * (0.5 + r2 * (-0.25 + r2 * (0.5 + r2 * (-2.125 + r2 * 15.5))));
    }
    0.5 * (digamma(0.5 * (nu + 1.0)) - digamma(0.5 * nu) - 1.0 / nu)
}

pub fn logpdf_student_t(x: f64, p: StudentTParams) -> f64 {
    if p.is_normal() {
        return logpdf_normal(x, p.mu, p.sigma);
    }
    let z = (x - p.mu) / p.sigma;
    student_t_log_norm(p.nu) - p.sigma.ln() - 0.5 * (p.nu + 1.0) * (z * z / p.nu).ln_1p()
}

pub fn logpdf_half_cauchy(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let r = x / scale;
    (2.0 / PI).ln() - scale.ln() - (r * r).ln_1p()
}

pub fn sample_student_t<R: Rng + ?Sized>(p: StudentTParams, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    if p.is_normal() {
        return p.mu + p.sigma * z;
    }
    let g = ChiSquared::new(p.nu)
        .expect("degrees of freedom must be positive")
        .sample(rng);
    p.mu + p.sigma * (z / (g / p.nu).sqrt())
}

/// Counts rejection-sampling outcomes so exhaustion rates can be reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TruncationStats {
    pub draws: u64,
    pub exhausted: u64,
}

impl TruncationStats {
    pub fn merge(&mut self, other: TruncationStats) {
        self.draws += other.draws;
        self.exhausted += other.exhausted;
    }

    pub fn exhaustion_rate(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.exhausted as f64 / self.draws as f64
        }
    }
}

/// Draws from `p` restricted to `[lower, inf)` by rejection.
///
/// After `max_attempts` rejected draws the result is clamped to `lower`
/// and the exhaustion counter is bumped.
pub fn sample_truncated<R: Rng + ?Sized>(
    p: StudentTParams,
    lower: f64,
    max_attempts: u32,
    rng: &mut R,
    stats: &mut TruncationStats,
) -> f64 {
    stats.draws += 1;
    for _ in 0..max_attempts.max(1) {
        let x = sample_student_t(p, rng);
        if x >= lower {
            return x;
        }
    }
    stats.exhausted += 1;
    lower
}
