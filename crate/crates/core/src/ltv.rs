//! Hierarchical LTV regression with Student-t or Gaussian likelihood.
//!
//! Every per-category quantity is a base term plus a Horseshoe-shrunk
//! effect `z * lambda * tau` in non-centered form:
//!
//! * location `mu_c = base_mu + effect_mu[c]`
//! * scale `sigma_c = exp(base_log_sigma) + |effect_sigma[c]|`
//! * degrees of freedom `nu_c = exp(base_log_df) + |effect_df[c]|`
//!
//! Positive parameters are sampled on the log scale with their Jacobians.
//! The parameter vector layout is fixed by [`Layout`] so sampler state can
//! be carried from batch to batch.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::LogDensity;
use crate::distributions::{
    logpdf_half_cauchy, logpdf_normal, logpdf_student_t, rng_stream, sample_truncated, student_t_log_norm,
    student_t_log_norm_dnu, StudentTParams, TruncationStats,
};
use crate::evaluation::RowDraws;
use crate::exec::{Execution, CHUNK_ROWS};
use crate::nuts::SampleChain;
use crate::preprocess::AffineMap;
use crate::{Error, Result};

/// Rejection attempts per truncated predictive draw.
pub const TRUNCATION_ATTEMPTS: u32 = 100;
/// Predictive draws are truncated below at zero in target units.
pub const TRUNCATION_LOWER: f64 = 0.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    StudentT,
    Gaussian,
}

impl Likelihood {
    pub fn name(self) -> &'static str {
        match self {
            Likelihood::StudentT => "student_t",
            Likelihood::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_t" | "student-t" | "t" => Ok(Likelihood::StudentT),
            "gaussian" | "normal" => Ok(Likelihood::Gaussian),
            _ => Err(Error::invalid("model", format!("unknown likelihood `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub likelihood: Likelihood,
    pub category_capacity: usize,
    /// Global Horseshoe scale for the location and scale effects.
    /// `None` resolves to `1 / category_capacity`.
    pub tau0: Option<f64>,
    /// Half-Cauchy scale for the base degrees of freedom and the df effects.
    pub df_prior_scale: f64,
    pub base_mu_scale: f64,
    pub base_sigma_scale: f64,
    /// Per-category scale effects; when off every category shares one scale.
    pub per_category_scale: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            likelihood: Likelihood::StudentT,
            category_capacity: crate::preprocess::DEFAULT_CAPACITY,
            tau0: None,
            df_prior_scale: 5.0,
            base_mu_scale: 10.0,
            base_sigma_scale: 2.5,
            per_category_scale: true,
        }
    }
}

impl ModelSpec {
    pub fn new(likelihood: Likelihood, category_capacity: usize) -> Self {
        ModelSpec {
            likelihood,
            category_capacity,
            ..ModelSpec::default()
        }
    }

    pub fn tau0(&self) -> f64 {
        self.tau0.unwrap_or(1.0 / self.category_capacity.max(1) as f64)
    }

    /// Same spec with `tau0` made explicit.
    pub fn resolved(&self) -> Self {
        ModelSpec {
            tau0: Some(self.tau0()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.category_capacity < 1 {
            return Err(Error::invalid("category_capacity", "must be positive"));
        }
        let positive = [
            ("tau0", self.tau0()),
            ("df_prior_scale", self.df_prior_scale),
            ("base_mu_scale", self.base_mu_scale),
            ("base_sigma_scale", self.base_sigma_scale),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, "must be a positive finite number"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// A per-category quantity that receives a Horseshoe effect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Mu,
    Sigma,
    Df,
}

impl Group {
    fn prefix(self) -> &'static str {
        match self {
            Group::Mu => "mu",
            Group::Sigma => "sigma",
            Group::Df => "df",
        }
    }
}

/// Index map of the unconstrained parameter vector.
///
/// Order: base terms, then the `z` blocks of every group, then the
/// `log lambda` blocks, then one `log tau` per group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub capacity: usize,
    pub groups: Vec<Group>,
    pub student_t: bool,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let student_t = spec.likelihood == Likelihood::StudentT;
        let mut groups = vec![Group::Mu];
        if spec.per_category_scale {
            groups.push(Group::Sigma);
        }
        if student_t {
            groups.push(Group::Df);
        }
        Layout {
            capacity: spec.category_capacity,
            groups,
            student_t,
        }
    }

    pub const BASE_MU: usize = 0;
    pub const BASE_LOG_SIGMA: usize = 1;
    pub const BASE_LOG_DF: usize = 2;

    pub fn num_base(&self) -> usize {
        if self.student_t {
            3
        } else {
            2
        }
    }

    pub fn dim(&self) -> usize {
        self.num_base() + self.groups.len() * (2 * self.capacity + 1)
    }

    fn slot(&self, g: Group) -> Option<usize> {
        self.groups.iter().position(|&x| x == g)
    }

    pub fn z(&self, g: Group) -> Option<usize> {
        self.slot(g).map(|k| self.num_base() + k * self.capacity)
    }

    pub fn log_lambda(&self, g: Group) -> Option<usize> {
        let off = self.num_base() + self.groups.len() * self.capacity;
        self.slot(g).map(|k| off + k * self.capacity)
    }

    pub fn log_tau(&self, g: Group) -> Option<usize> {
        let off = self.num_base() + 2 * self.groups.len() * self.capacity;
        self.slot(g).map(|k| off + k)
    }

    /// Human-readable name of coordinate `i`.
    pub fn name(&self, i: usize) -> String {
        let base = ["base_mu", "base_log_sigma", "base_log_df"];
        if i < self.num_base() {
            return base[i].to_string();
        }
        let c = self.capacity;
        let g = self.groups.len();
        let j = i - self.num_base();
        if j < g * c {
            format!("{}_z[{}]", self.groups[j / c].prefix(), j % c)
        } else if j < 2 * g * c {
            let j = j - g * c;
            format!("{}_log_lambda[{}]", self.groups[j / c].prefix(), j % c)
        } else {
            format!("{}_log_tau", self.groups[j - 2 * g * c].prefix())
        }
    }
}

/// Horseshoe effects `z * lambda * tau` for one group, with the pieces
/// needed for the chain rule.
struct Effects {
    value: Vec<f64>,
    lambda: Vec<f64>,
    tau: f64,
}

fn effects(theta: &[f64], layout: &Layout, g: Group) -> Option<Effects> {
    let z0 = layout.z(g)?;
    let l0 = layout.log_lambda(g)?;
    let tau = theta[layout.log_tau(g)?].exp();
    let c = layout.capacity;
    let lambda: Vec<f64> = theta[l0..l0 + c].iter().map(|u| u.exp()).collect();
    let value = (0..c).map(|k| theta[z0 + k] * lambda[k] * tau).collect();
    Some(Effects { value, lambda, tau })
}

/// Sends `d(logp)/d(effect)` back to `z`, `log lambda` and `log tau`.
fn backprop_effects(d_effect: &[f64], e: &Effects, layout: &Layout, g: Group, grad: &mut [f64]) {
    let (z0, l0, t) = (
        layout.z(g).unwrap(),
        layout.log_lambda(g).unwrap(),
        layout.log_tau(g).unwrap(),
    );
    let mut d_tau = 0.0;
    for k in 0..layout.capacity {
        let d = d_effect[k];
        grad[z0 + k] += d * e.lambda[k] * e.tau;
        grad[l0 + k] += d * e.value[k];
        d_tau += d * e.value[k];
    }
    grad[t] += d_tau;
}

/// Log Half-Cauchy density of `exp(u)` plus the log-Jacobian `u`, and its
/// derivative in `u`.
fn log_half_cauchy_on_log(u: f64, scale: f64) -> (f64, f64) {
    let x = u.exp();
    let r2 = (x / scale).powi(2);
    let w = if r2.is_infinite() { 1.0 } else { r2 / (1.0 + r2) };
    (logpdf_half_cauchy(x, scale) + u, 1.0 - 2.0 * w)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    code: u32,
    start: usize,
    end: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct SegmentSums {
    log1p: f64,
    r_over_d: f64,
    z2_over_d: f64,
}

#[derive(Clone, Copy, Debug)]
struct GaussianStats {
    code: u32,
    n: f64,
    mean: f64,
    m2: f64,
}

#[derive(Clone, Debug)]
enum Data {
    /// Targets sorted by category, cut into segments of at most `CHUNK_ROWS`.
    StudentT {
        y: Vec<f64>,
        segments: Vec<Segment>,
        counts: Vec<(u32, f64)>,
    },
    /// Per-category count, mean and centered sum of squares.
    Gaussian(Vec<GaussianStats>),
}

/// Unnormalized log posterior of one mini-batch.
#[derive(Clone, Debug)]
pub struct LtvDensity {
    spec: ModelSpec,
    layout: Layout,
    exec: Execution,
    n_rows: usize,
    data: Data,
}

/// Builds the batch posterior from category codes and scaled targets.
pub fn build_density(spec: &ModelSpec, codes: &[u32], targets: &[f64], exec: Execution) -> Result<LtvDensity> {
    spec.validate()?;
    if codes.len() != targets.len() {
        return Err(Error::Dimension {
            expected: codes.len(),
            got: targets.len(),
        });
    }
    if codes.is_empty() {
        return Err(Error::Empty("mini-batch has no rows".into()));
    }
    let cap = spec.category_capacity;
    if let Some(&bad) = codes.iter().find(|&&c| c as usize >= cap) {
        return Err(Error::CodeOutOfRange {
            code: bad,
            capacity: cap,
        });
    }
    let mut order: Vec<usize> = (0..codes.len()).collect();
    order.sort_by_key(|&i| codes[i]);

    let data = match spec.likelihood {
        Likelihood::StudentT => {
            let y: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
            let mut segments = Vec::new();
            let mut counts: Vec<(u32, f64)> = Vec::new();
            let mut start = 0;
            while start < order.len() {
                let code = codes[order[start]];
                let mut end = start;
                while end < order.len() && codes[order[end]] == code {
                    end += 1;
                }
                counts.push((code, (end - start) as f64));
                let mut s = start;
                while s < end {
                    let e = (s + CHUNK_ROWS).min(end);
                    segments.push(Segment { code, start: s, end: e });
                    s = e;
                }
                start = end;
            }
            Data::StudentT { y, segments, counts }
        }
        Likelihood::Gaussian => {
            let mut stats: Vec<GaussianStats> = Vec::new();
            for &i in &order {
                let code = codes[i];
                if stats.last().is_none_or(|s| s.code != code) {
                    stats.push(GaussianStats {
                        code,
                        n: 0.0,
                        mean: 0.0,
                        m2: 0.0,
                    });
                }
                let s = stats.last_mut().unwrap();
                s.n += 1.0;
                let d = targets[i] - s.mean;
                s.mean += d / s.n;
                s.m2 += d * (targets[i] - s.mean);
            }
            Data::Gaussian(stats)
        }
    };
    Ok(LtvDensity {
        spec: spec.clone(),
        layout: spec.layout(),
        exec,
        n_rows: codes.len(),
        data,
    })
}

impl LtvDensity {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_rows(&self) -> usize {
        self.n_rows
    }

    /// Adds the prior terms and their gradient.
    fn prior(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let spec = &self.spec;
        let l = &self.layout;
        let mut lp = logpdf_normal(theta[Layout::BASE_MU], 0.0, spec.base_mu_scale);
        grad[Layout::BASE_MU] -= theta[Layout::BASE_MU] / spec.base_mu_scale.powi(2);

        let (v, d) = log_half_cauchy_on_log(theta[Layout::BASE_LOG_SIGMA], spec.base_sigma_scale);
        lp += v;
        grad[Layout::BASE_LOG_SIGMA] += d;
        if l.student_t {
            let (v, d) = log_half_cauchy_on_log(theta[Layout::BASE_LOG_DF], spec.df_prior_scale);
            lp += v;
            grad[Layout::BASE_LOG_DF] += d;
        }
        for &g in &l.groups {
            let z0 = l.z(g).unwrap();
            let l0 = l.log_lambda(g).unwrap();
            for k in 0..l.capacity {
                let z = theta[z0 + k];
                lp += logpdf_normal(z, 0.0, 1.0);
                grad[z0 + k] -= z;
                let (v, d) = log_half_cauchy_on_log(theta[l0 + k], 1.0);
                lp += v;
                grad[l0 + k] += d;
            }
            let t = l.log_tau(g).unwrap();
            let scale = if g == Group::Df { spec.df_prior_scale } else { spec.tau0() };
            let (v, d) = log_half_cauchy_on_log(theta[t], scale);
            lp += v;
            grad[t] += d;
        }
        lp
    }
}

/// Per-category parameters in scaled units for one parameter vector.
pub fn category_params(layout: &Layout, theta: &[f64]) -> Vec<StudentTParams> {
    let c = layout.capacity;
    let mu_e = effects(theta, layout, Group::Mu).unwrap();
    let sig_e = effects(theta, layout, Group::Sigma);
    let df_e = effects(theta, layout, Group::Df);
    let base_sigma = theta[Layout::BASE_LOG_SIGMA].exp();
    let base_df = if layout.student_t {
        theta[Layout::BASE_LOG_DF].exp()
    } else {
        f64::INFINITY
    };
    (0..c)
        .map(|k| StudentTParams {
            mu: theta[Layout::BASE_MU] + mu_e.value[k],
            sigma: base_sigma + sig_e.as_ref().map_or(0.0, |e| e.value[k].abs()),
            nu: base_df + df_e.as_ref().map_or(0.0, |e| e.value[k].abs()),
        })
        .collect()
}

impl LogDensity for LtvDensity {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let l = &self.layout;
        let c = l.capacity;
        let mut lp = self.prior(theta, grad);

        let mu_e = effects(theta, l, Group::Mu).unwrap();
        let sig_e = effects(theta, l, Group::Sigma);
        let df_e = effects(theta, l, Group::Df);
        let base_sigma = theta[Layout::BASE_LOG_SIGMA].exp();
        let base_df = if l.student_t {
            theta[Layout::BASE_LOG_DF].exp()
        } else {
            f64::INFINITY
        };
        let mu = |k: usize| theta[Layout::BASE_MU] + mu_e.value[k];
        let sigma = |k: usize| base_sigma + sig_e.as_ref().map_or(0.0, |e| e.value[k].abs());
        let nu = |k: usize| base_df + df_e.as_ref().map_or(0.0, |e| e.value[k].abs());

        let mut d_mu = vec![0.0; c];
        let mut d_sigma = vec![0.0; c];
        let mut d_nu = vec![0.0; c];

        match &self.data {
            Data::StudentT { y, segments, counts } => {
                let sums = self.exec.map_slice(segments, |_, seg| {
                    let k = seg.code as usize;
                    let (m, s, v) = (mu(k), sigma(k), nu(k));
                    let inv_s = 1.0 / s;
                    let mut acc = SegmentSums::default();
                    for &yi in &y[seg.start..seg.end] {
                        let r = yi - m;
                        let z = r * inv_s;
                        let z2 = z * z;
                        let inv_d = 1.0 / (v + z2);
                        acc.log1p += (z2 / v).ln_1p();
                        acc.r_over_d += r * inv_d;
                        acc.z2_over_d += z2 * inv_d;
                    }
                    acc
                });
                for (seg, acc) in segments.iter().zip(&sums) {
                    let k = seg.code as usize;
                    let (s, v) = (sigma(k), nu(k));
                    lp -= 0.5 * (v + 1.0) * acc.log1p;
                    d_mu[k] += (v + 1.0) / (s * s) * acc.r_over_d;
                    d_sigma[k] += (v + 1.0) / s * acc.z2_over_d;
                    d_nu[k] += -0.5 * acc.log1p + (v + 1.0) / (2.0 * v) * acc.z2_over_d;
                }
                for &(code, n) in counts {
                    let k = code as usize;
                    let (s, v) = (sigma(k), nu(k));
                    lp += n * (student_t_log_norm(v) - s.ln());
                    d_sigma[k] -= n / s;
                    d_nu[k] += n * student_t_log_norm_dnu(v);
                }
            }
            Data::Gaussian(stats) => {
                for st in stats {
                    let k = st.code as usize;
                    let (m, s) = (mu(k), sigma(k));
                    let dev = st.mean - m;
                    let q = st.m2 + st.n * dev * dev;
                    lp += -st.n * s.ln() - 0.5 * st.n * (2.0 * std::f64::consts::PI).ln() - q / (2.0 * s * s);
                    d_mu[k] += st.n * dev / (s * s);
                    d_sigma[k] += -st.n / s + q / (s * s * s);
                }
            }
        }

        grad[Layout::BASE_MU] += d_mu.iter().sum::<f64>();
        backprop_effects(&d_mu, &mu_e, l, Group::Mu, grad);

        grad[Layout::BASE_LOG_SIGMA] += base_sigma * d_sigma.iter().sum::<f64>();
        if let Some(e) = &sig_e {
            let d: Vec<f64> = (0..c).map(|k| d_sigma[k] * sign(e.value[k])).collect();
            backprop_effects(&d, e, l, Group::Sigma, grad);
        }
        if l.student_t {
            grad[Layout::BASE_LOG_DF] += base_df * d_nu.iter().sum::<f64>();
            if let Some(e) = &df_e {
                let d: Vec<f64> = (0..c).map(|k| d_nu[k] * sign(e.value[k])).collect();
                backprop_effects(&d, e, l, Group::Df, grad);
            }
        }
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }
}

/// Draws a parameter vector from the prior.
pub fn sample_prior<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Cauchy, Distribution, Normal};
    let l = spec.layout();
    let mut theta = vec![0.0; l.dim()];
    let log_half_cauchy = |scale: f64, rng: &mut R| -> f64 {
        let c = Cauchy::new(0.0, scale).unwrap();
        let x: f64 = c.sample(rng);
        x.abs().max(1e-300).ln()
    };
    theta[Layout::BASE_MU] = Normal::new(0.0, spec.base_mu_scale).unwrap().sample(rng);
    theta[Layout::BASE_LOG_SIGMA] = log_half_cauchy(spec.base_sigma_scale, rng);
    if l.student_t {
        theta[Layout::BASE_LOG_DF] = log_half_cauchy(spec.df_prior_scale, rng);
    }
    for &g in &l.groups {
        let z0 = l.z(g).unwrap();
        let l0 = l.log_lambda(g).unwrap();
        for k in 0..l.capacity {
            theta[z0 + k] = rng.sample(rand_distr::StandardNormal);
            theta[l0 + k] = log_half_cauchy(1.0, rng);
        }
        let scale = if g == Group::Df { spec.df_prior_scale } else { spec.tau0() };
        theta[l.log_tau(g).unwrap()] = log_half_cauchy(scale, rng);
    }
    theta
}

/// Maps scaled-space parameters to target units.
pub fn unscale_params(p: StudentTParams, map: AffineMap) -> StudentTParams {
    let spread = if map.is_degenerate() { 1.0 } else { map.spread };
    StudentTParams {
        mu: map.center + spread * p.mu,
        sigma: spread * p.sigma,
        nu: p.nu,
    }
}

/// Per-draw, per-category parameters in target units, `draws x capacity`.
pub fn unscaled_param_table(layout: &Layout, chain: &SampleChain, map: AffineMap) -> Vec<StudentTParams> {
    chain
        .iter()
        .flat_map(|d| category_params(layout, d).into_iter().map(move |p| unscale_params(p, map)))
        .collect()
}

/// Posterior means of a category's parameters in target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamSummary {
    pub mu: f64,
    pub sigma: f64,
    /// `+inf` for the Gaussian model.
    pub nu: f64,
}

/// Posterior predictive output for one batch of rows.
#[derive(Clone, Debug)]
pub struct PosteriorBatch {
    pub codes: Vec<u32>,
    /// Truncated predictive draws in target units, one row per input row.
    pub draws: RowDraws,
    pub category_summary: Vec<ParamSummary>,
    pub truncation: TruncationStats,
}

impl PosteriorBatch {
    pub fn row_summary(&self, i: usize) -> ParamSummary {
        self.category_summary[self.codes[i] as usize]
    }

    pub fn footprint_bytes(&self) -> usize {
        self.draws.values.len() * 8 + self.codes.len() * 4 + self.category_summary.len() * 24
    }
}

fn summarize(table: &[StudentTParams], capacity: usize, n_draws: usize) -> Vec<ParamSummary> {
    (0..capacity)
        .map(|k| {
            let mut s = ParamSummary {
                mu: 0.0,
                sigma: 0.0,
                nu: 0.0,
            };
            for d in 0..n_draws {
                let p = table[d * capacity + k];
                s.mu += p.mu;
                s.sigma += p.sigma;
                s.nu += p.nu;
            }
            let n = n_draws.max(1) as f64;
            ParamSummary {
                mu: s.mu / n,
                sigma: s.sigma / n,
                nu: s.nu / n,
            }
        })
        .collect()
}

/// Stream id of the predictive generator for one row of one batch.
pub fn predictive_stream(batch_index: usize, row: usize) -> u64 {
    ((batch_index as u64) << 32) | row as u64
}

/// One truncated predictive draw per row and posterior draw.
///
/// Each row has its own random stream keyed by `(batch_index, row)`, so the
/// result does not depend on the execution mode.
pub fn posterior_predictive(
    spec: &ModelSpec,
    chain: &SampleChain,
    codes: &[u32],
    map: AffineMap,
    seed: u64,
    batch_index: usize,
    exec: Execution,
) -> Result<PosteriorBatch> {
    if chain.num_draws() == 0 {
        return Err(Error::Empty("posterior chain has no draws".into()));
    }
    let layout = spec.layout();
    let cap = layout.capacity;
    if let Some(&bad) = codes.iter().find(|&&c| c as usize >= cap) {
        return Err(Error::CodeOutOfRange {
            code: bad,
            capacity: cap,
        });
    }
    let s = chain.num_draws();
    let table = unscaled_param_table(&layout, chain, map);
    let n_chunks = codes.len().div_ceil(CHUNK_ROWS);
    let parts = exec.map_range(n_chunks, |k| {
        let lo = k * CHUNK_ROWS;
        let hi = (lo + CHUNK_ROWS).min(codes.len());
        let mut values = Vec::with_capacity((hi - lo) * s);
        let mut stats = TruncationStats::default();
        for (i, &code) in codes.iter().enumerate().take(hi).skip(lo) {
            let mut rng = rng_stream(seed, predictive_stream(batch_index, i));
            for d in 0..s {
                let p = table[d * cap + code as usize];
                values.push(sample_truncated(p, TRUNCATION_LOWER, TRUNCATION_ATTEMPTS, &mut rng, &mut stats));
            }
        }
        (values, stats)
    });
    let mut values = Vec::with_capacity(codes.len() * s);
    let mut truncation = TruncationStats::default();
    for (v, st) in parts {
        values.extend(v);
        truncation.merge(st);
    }
    Ok(PosteriorBatch {
        codes: codes.to_vec(),
        draws: RowDraws::new(codes.len(), s, values),
        category_summary: summarize(&table, cap, s),
        truncation,
    })
}

/// Untruncated predictive log-densities `log p(y_i | theta_s)` in target units.
pub fn predictive_logdensities(
    spec: &ModelSpec,
    chain: &SampleChain,
    codes: &[u32],
    actuals: &[f64],
    map: AffineMap,
    exec: Execution,
) -> Result<RowDraws> {
    if codes.len() != actuals.len() {
        return Err(Error::Dimension {
            expected: codes.len(),
            got: actuals.len(),
        });
    }
    let layout = spec.layout();
    let cap = layout.capacity;
    if let Some(&bad) = codes.iter().find(|&&c| c as usize >= cap) {
        return Err(Error::CodeOutOfRange {
            code: bad,
            capacity: cap,
        });
    }
    let s = chain.num_draws();
    let table = unscaled_param_table(&layout, chain, map);
    let mut values = vec![0.0; codes.len() * s];
    exec.fill_chunks(&mut values, CHUNK_ROWS * s.max(1), |offset, out| {
        let first = offset / s.max(1);
        for (r, row) in out.chunks_mut(s.max(1)).enumerate() {
            let i = first + r;
            let code = codes[i] as usize;
            for (d, v) in row.iter_mut().enumerate() {
                *v = logpdf_student_t(actuals[i], table[d * cap + code]);
            }
        }
    });
    Ok(RowDraws::new(codes.len(), s, values))
}

/// Posterior summary of one category's degrees of freedom.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailSummary {
    pub code: u32,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
}

fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let h = (xs.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Degrees of freedom `base_df + |df_effect[c]|` summarized per category.
///
/// The 5% to 95% interval is usually asymmetric because the df priors are.
pub fn fat_tail_report(chain: &SampleChain, spec: &ModelSpec) -> Result<Vec<TailSummary>> {
    if spec.likelihood != Likelihood::StudentT {
        return Err(Error::Unsupported(
            "degrees-of-freedom report requires the Student-t model".into(),
        ));
    }
    if chain.num_draws() == 0 {
        return Err(Error::Empty("posterior chain has no draws".into()));
    }
    let layout = spec.layout();
    let cap = layout.capacity;
    let per_draw: Vec<Vec<StudentTParams>> = chain.iter().map(|d| category_params(&layout, d)).collect();
    Ok((0..cap)
        .map(|k| {
            let mut nu: Vec<f64> = per_draw.iter().map(|p| p[k].nu).collect();
            let n = nu.len() as f64;
            let mean = nu.iter().sum::<f64>() / n;
            let sd = if nu.len() > 1 {
                (nu.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            nu.sort_by(f64::total_cmp);
            TailSummary {
                code: k as u32,
                mean,
                sd,
                q05: quantile_sorted(&nu, 0.05),
                median: quantile_sorted(&nu, 0.5),
                q95: quantile_sorted(&nu, 0.95),
            }
        })
        .collect())
}

/// Writes the report as CSV with one labelled row per summary.
pub fn write_fat_tail_report<W: Write>(
    out: W,
    rows: &[TailSummary],
    label: impl Fn(u32) -> String,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["category", "code", "nu_mean", "nu_sd", "nu_q05", "nu_median", "nu_q95"])?;
    for r in rows {
        w.write_record([
            label(r.code),
            r.code.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.q05.to_string(),
            r.median.to_string(),
            r.q95.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<fat-tail report>", e))?;
    Ok(())
}
