//! No-U-Turn sampler with Stan-style warmup adaptation.
//!
//! [`warmup`] adapts the step size (dual averaging) and a diagonal inverse
//! mass matrix (windowed running variance) starting from whatever state it
//! is given, so the same routine serves both the initial warmup and the
//! extra warmup performed on every later mini-batch. [`sample`] draws with
//! adaptation frozen and hands the state back for carryover.

mod adapt;
mod tree;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adapt::{DualAveraging, DualAveragingSettings, RunningVariance, WindowSchedule};
pub use tree::{TransitionStats, MAX_ENERGY_ERROR};

use crate::diff::LogDensity;
use crate::distributions::{rng_stream, RngState};
use crate::{Error, Result};
use tree::Point;

pub const DEFAULT_NUM_SAMPLES: usize = 500;
pub const DEFAULT_NUM_WARMUP: usize = 1500;
pub const DEFAULT_EXTRA_WARMUP: usize = 500;
pub const DEFAULT_BATCH_SIZE: usize = 3000;
/// Bounds for the initial step-size search, applied in the search direction.
const MIN_STEP_SIZE: f64 = 1e-10;
const MAX_STEP_SIZE: f64 = 1e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_samples: usize,
    pub num_warmup: usize,
    pub extra_warmup: usize,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    pub step_size_init: f64,
    /// Warmup fails if more than this fraction of its steps diverge.
    pub max_divergence_fraction: f64,
    /// Half-width of the uniform jitter around zero for fresh positions.
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_samples: DEFAULT_NUM_SAMPLES,
            num_warmup: DEFAULT_NUM_WARMUP,
            extra_warmup: DEFAULT_EXTRA_WARMUP,
            max_tree_depth: 10,
            target_accept: 0.8,
            step_size_init: 0.1,
            max_divergence_fraction: 0.5,
            init_radius: 1.0,
        }
    }
}

impl SamplerConfig {
    /// Extra warmup sized by the "three times the number of samples" rule
    /// of thumb. The default stays at the fixed 500 steps.
    pub fn heuristic_extra_warmup(&self) -> usize {
        3 * self.num_samples
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples", "must be positive"));
        }
        if self.num_warmup == 0 {
            return Err(Error::invalid("num_warmup", "must be positive"));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::invalid("max_tree_depth", "must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept", "must lie in (0, 1)"));
        }
        if !(self.step_size_init > 0.0) {
            return Err(Error::invalid("step_size_init", "must be positive"));
        }
        Ok(())
    }
}

/// Everything carried from one mini-batch to the next.
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub position: Vec<f64>,
    pub step_size: f64,
    pub inverse_mass_diag: Vec<f64>,
    pub step_adaptation: DualAveraging,
    pub position_variance: RunningVariance,
    pub rng: RngState,
    pub divergence_count: usize,
    /// Number of mini-batches this state has been fit on.
    pub batches_seen: usize,
}

impl SamplerState {
    /// Fresh state: jittered position near zero and unit metric.
    ///
    /// The position is redrawn until the log-density is finite (at most 100
    /// tries, then zero).
    pub fn fresh<D: LogDensity + ?Sized>(density: &D, config: &SamplerConfig, seed: u64) -> Self {
        let dim = density.dim();
        let mut rng = rng_stream(seed, 0);
        let mut position = vec![0.0; dim];
        for _ in 0..100 {
            for x in position.iter_mut() {
                *x = config.init_radius * (2.0 * rng.random::<f64>() - 1.0);
            }
            if density.logp(&position).is_finite() {
                break;
            }
            position.iter_mut().for_each(|x| *x = 0.0);
        }
        SamplerState {
            position,
            step_size: config.step_size_init,
            inverse_mass_diag: vec![1.0; dim],
            step_adaptation: DualAveraging::new(
                DualAveragingSettings::new(config.target_accept),
                config.step_size_init,
            ),
            position_variance: RunningVariance::new(dim),
            rng,
            divergence_count: 0,
            batches_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// Approximate bytes held by the state; independent of data size.
    pub fn footprint_bytes(&self) -> usize {
        std::mem::size_of::<Self>() + self.dim() * 5 * std::mem::size_of::<f64>()
    }
}

/// Draws from one sampling phase, row-major `num_draws x dim`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleChain {
    pub dim: usize,
    pub draws: Vec<f64>,
    pub accept_stats: Vec<f64>,
    pub tree_depths: Vec<usize>,
    pub n_leapfrog: usize,
    pub divergences: usize,
}

impl SampleChain {
    pub fn num_draws(&self) -> usize {
        self.accept_stats.len()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim.max(1))
    }

    /// All draws of one coordinate.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter().map(|d| d[j]).collect()
    }

    pub fn mean_accept(&self) -> f64 {
        mean(&self.accept_stats)
    }

    pub fn mean_tree_depth(&self) -> f64 {
        let n = self.tree_depths.len().max(1) as f64;
        self.tree_depths.iter().sum::<usize>() as f64 / n
    }

    pub fn footprint_bytes(&self) -> usize {
        std::mem::size_of::<Self>()
            + self.draws.len() * 8
            + self.accept_stats.len() * 8
            + self.tree_depths.len() * std::mem::size_of::<usize>()
    }
}

/// Diagnostics for one warmup phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmupStats {
    pub steps: usize,
    pub divergences: usize,
    pub accept_stats: Vec<f64>,
    pub n_leapfrog: usize,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Heuristic initial step size: doubles or halves until the one-step
/// acceptance probability crosses 0.8.
fn reasonable_step_size<D: LogDensity + ?Sized>(
    density: &D,
    position: &[f64],
    inv_mass: &[f64],
    start: f64,
    rng: &mut RngState,
) -> f64 {
    let base = Point::at(density, position.to_vec());
    if !base.logp.is_finite() || !(start > 0.0 && start.is_finite()) {
        return start;
    }
    let threshold = 0.8f64.ln();
    let mut step = start;
    let up = tree::one_step_log_accept(density, &base, step, inv_mass, rng) > threshold;
    for _ in 0..100 {
        let next = if up { step * 2.0 } else { step * 0.5 };
        if (up && next > MAX_STEP_SIZE) || (!up && next < MIN_STEP_SIZE) {
            break;
        }
        step = next;
        let still = tree::one_step_log_accept(density, &base, step, inv_mass, rng) > threshold;
        if still != up {
            break;
        }
    }
    step
}

/// Adapts step size and diagonal mass matrix over `steps` NUTS transitions.
///
/// Starts from the carried step size and metric. `steps == 0` returns the
/// state unchanged.
pub fn warmup<D: LogDensity + ?Sized>(
    density: &D,
    config: &SamplerConfig,
    mut state: SamplerState,
    steps: usize,
) -> Result<(SamplerState, WarmupStats)> {
    if state.dim() != density.dim() {
        return Err(Error::Dimension {
            expected: density.dim(),
            got: state.dim(),
        });
    }
    let mut stats = WarmupStats::default();
    if steps == 0 {
        return Ok((state, stats));
    }
    let schedule = WindowSchedule::new(steps);
    let settings = DualAveragingSettings::new(config.target_accept);
    state.step_size = reasonable_step_size(
        density,
        &state.position,
        &state.inverse_mass_diag,
        state.step_size,
        &mut state.rng,
    );
    state.step_adaptation = DualAveraging::new(settings, state.step_size);
    state.position_variance.reset();

    let mut current = Point::at(density, std::mem::take(&mut state.position));
    for i in 0..steps {
        let t = tree::transition(
            density,
            &mut current,
            state.step_size,
            &state.inverse_mass_diag,
            config.max_tree_depth,
            &mut state.rng,
        );
        stats.steps += 1;
        stats.n_leapfrog += t.n_leapfrog;
        stats.accept_stats.push(t.accept_stat);
        if t.divergent {
            stats.divergences += 1;
        }
        state.step_adaptation.update(t.accept_stat);
        state.step_size = state.step_adaptation.step_size();

        if schedule.in_slow_phase(i) {
            state.position_variance.add(&current.q);
        }
        if schedule.closes_window(i) && state.position_variance.count() > 2 {
            state.inverse_mass_diag = state.position_variance.regularized_variance();
            state.position_variance.reset();
            state.step_size = reasonable_step_size(
                density,
                &current.q,
                &state.inverse_mass_diag,
                state.step_size,
                &mut state.rng,
            );
            state.step_adaptation.restart(state.step_size);
        }
    }
    state.step_size = state.step_adaptation.final_step_size();
    state.position = current.q;
    state.divergence_count += stats.divergences;

    if stats.divergences as f64 > config.max_divergence_fraction * steps as f64 {
        return Err(Error::PersistentDivergence {
            divergences: stats.divergences,
            steps,
        });
    }
    Ok((state, stats))
}

/// Draws `config.num_samples` transitions with frozen adaptation.
pub fn sample<D: LogDensity + ?Sized>(
    density: &D,
    config: &SamplerConfig,
    mut state: SamplerState,
) -> Result<(SampleChain, SamplerState)> {
    if state.dim() != density.dim() {
        return Err(Error::Dimension {
            expected: density.dim(),
            got: state.dim(),
        });
    }
    let dim = state.dim();
    let s = config.num_samples;
    let mut chain = SampleChain {
        dim,
        draws: Vec::with_capacity(s * dim),
        accept_stats: Vec::with_capacity(s),
        tree_depths: Vec::with_capacity(s),
        n_leapfrog: 0,
        divergences: 0,
    };
    let mut current = Point::at(density, std::mem::take(&mut state.position));
    for _ in 0..s {
        let t = tree::transition(
            density,
            &mut current,
            state.step_size,
            &state.inverse_mass_diag,
            config.max_tree_depth,
            &mut state.rng,
        );
        chain.draws.extend_from_slice(&current.q);
        chain.accept_stats.push(t.accept_stat);
        chain.tree_depths.push(t.tree_depth);
        chain.n_leapfrog += t.n_leapfrog;
        if t.divergent {
            chain.divergences += 1;
        }
    }
    state.divergence_count += chain.divergences;
    state.position = current.q;
    Ok((chain, state))
}
