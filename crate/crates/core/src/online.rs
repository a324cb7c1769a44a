//! Mini-batch driver: score each batch with the carried posterior, then
//! re-adapt the sampler with extra warmup and refit on the batch.

use crate::data_io::DataBatch;
use crate::diff::LogDensity;
use crate::exec::Execution;
use crate::ltv::{build_density, posterior_predictive, ModelSpec, PosteriorBatch};
use crate::nuts::{sample, warmup, SampleChain, SamplerConfig, SamplerState, WarmupStats};
use crate::preprocess::{AffineMap, EncoderState, ScalerKind, ScalerState};
use crate::Result;

/// Streaming category encoder and target scaler.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub encoder: EncoderState,
    pub scaler: ScalerState,
    rows_seen: usize,
}

/// A batch after encoding and scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub index: usize,
    pub codes: Vec<u32>,
    /// Targets in original units.
    pub targets: Vec<f64>,
    /// Targets scaled row by row, each with the statistics before its update.
    pub scaled: Vec<f64>,
    /// Scaler statistics after the whole batch.
    pub map_after: AffineMap,
    /// Rows consumed up to and including this batch.
    pub rows_seen: usize,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl Preprocessor {
    pub fn new(capacity: usize, fresh_codes: bool, scaler: ScalerKind) -> Self {
        Preprocessor {
            encoder: EncoderState::new(capacity).with_fresh_codes(fresh_codes),
            scaler: ScalerState::new(scaler),
            rows_seen: 0,
        }
    }

    pub fn prepare(&mut self, batch: DataBatch) -> Result<PreparedBatch> {
        let codes = self.encoder.encode_all(batch.categories.iter().map(String::as_str))?;
        let scaled = batch.targets.iter().map(|&y| self.scaler.scale_update(y)).collect();
        self.rows_seen += batch.targets.len();
        Ok(PreparedBatch {
            index: batch.index,
            codes,
            targets: batch.targets,
            scaled,
            map_after: self.scaler.snapshot(),
            rows_seen: self.rows_seen,
        })
    }

    /// Bytes held by the encoder and scaler.
    pub fn footprint_bytes(&self) -> usize {
        self.encoder.footprint_bytes() + self.scaler.footprint_bytes()
    }
}

/// Predictions for one batch and the posterior they came from.
pub struct Prediction<'a> {
    pub batch: &'a PreparedBatch,
    pub posterior: &'a PosteriorBatch,
    pub chain: &'a SampleChain,
    pub state: &'a SamplerState,
    /// Scaler statistics used to return to target units.
    pub map: AffineMap,
    /// True only for the first batch, which is scored after fitting on it.
    pub in_sample: bool,
}

/// Diagnostics of one fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub batch_index: usize,
    pub warmup: WarmupStats,
    pub step_size: f64,
    pub sample_divergences: usize,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
    pub max_tree_depth_hits: usize,
    pub n_leapfrog: usize,
}

impl FitReport {
    pub fn divergences(&self) -> usize {
        self.warmup.divergences + self.sample_divergences
    }
}

pub trait Observer {
    fn predicted(&mut self, prediction: &Prediction<'_>) -> Result<()>;

    fn fitted(&mut self, batch: &PreparedBatch, report: &FitReport, chain: &SampleChain, state: &SamplerState) -> Result<()>;
}

/// Ignores every event.
pub struct NullObserver;

impl Observer for NullObserver {
    fn predicted(&mut self, _: &Prediction<'_>) -> Result<()> {
        Ok(())
    }

    fn fitted(&mut self, _: &PreparedBatch, _: &FitReport, _: &SampleChain, _: &SamplerState) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OnlineSettings {
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub exec: Execution,
}

/// Posterior and sampler state after the last batch.
#[derive(Clone, Debug)]
pub struct OnlineResult {
    pub chain: SampleChain,
    pub state: SamplerState,
    pub map: AffineMap,
    pub batches: usize,
}

fn fit_report(batch_index: usize, warm: WarmupStats, chain: &SampleChain, state: &SamplerState, cfg: &SamplerConfig) -> FitReport {
    FitReport {
        batch_index,
        warmup: warm,
        step_size: state.step_size,
        sample_divergences: chain.divergences,
        mean_accept: chain.mean_accept(),
        mean_tree_depth: chain.mean_tree_depth(),
        max_tree_depth_hits: chain.tree_depths.iter().filter(|&&d| d >= cfg.max_tree_depth).count(),
        n_leapfrog: chain.n_leapfrog,
    }
}

/// Runs the mini-batch workflow over `batches`.
///
/// Batch 1 gets `num_warmup` warmup steps and is then scored in-sample.
/// Every later batch is first scored with the posterior carried from the
/// previous batch, then the carried sampler state gets `extra_warmup`
/// steps on the new batch and draws `num_samples` from it.
pub fn run_online<I, O>(spec: &ModelSpec, batches: I, settings: &OnlineSettings, observer: &mut O) -> Result<Option<OnlineResult>>
where
    I: IntoIterator<Item = Result<PreparedBatch>>,
    O: Observer + ?Sized,
{
    settings.sampler.validate()?;
    spec.validate()?;
    let cfg = &settings.sampler;
    let exec = settings.exec;
    let mut carried: Option<OnlineResult> = None;

    for batch in batches {
        let batch = batch?;
        if batch.is_empty() {
            continue;
        }
        let density = build_density(spec, &batch.codes, &batch.scaled, exec)?;

        let (state, warm) = match carried.take() {
            Some(prev) => {
                let posterior = posterior_predictive(spec, &prev.chain, &batch.codes, prev.map, settings.seed, batch.index, exec)?;
                observer.predicted(&Prediction {
                    batch: &batch,
                    posterior: &posterior,
                    chain: &prev.chain,
                    state: &prev.state,
                    map: prev.map,
                    in_sample: false,
                })?;
                warmup(&density, cfg, prev.state, cfg.extra_warmup)?
            }
            None => {
                let fresh = SamplerState::fresh(&density, cfg, settings.seed);
                debug_assert_eq!(fresh.dim(), density.dim());
                warmup(&density, cfg, fresh, cfg.num_warmup)?
            }
        };
        let (chain, mut state) = sample(&density, cfg, state)?;
        state.batches_seen += 1;
        let report = fit_report(batch.index, warm, &chain, &state, cfg);

        if state.batches_seen == 1 {
            let posterior = posterior_predictive(spec, &chain, &batch.codes, batch.map_after, settings.seed, batch.index, exec)?;
            observer.predicted(&Prediction {
                batch: &batch,
                posterior: &posterior,
                chain: &chain,
                state: &state,
                map: batch.map_after,
                in_sample: true,
            })?;
        }
        observer.fitted(&batch, &report, &chain, &state)?;
        carried = Some(OnlineResult {
            chain,
            state,
            map: batch.map_after,
            batches: batch.index,
        });
    }
    Ok(carried)
}

/// Encodes and scales a stream of raw batches lazily.
pub fn prepare_stream<'a, I>(pre: &'a mut Preprocessor, raw: I) -> impl Iterator<Item = Result<PreparedBatch>> + 'a
where
    I: IntoIterator<Item = Result<DataBatch>>,
    I::IntoIter: 'a,
{
    raw.into_iter().map(move |b| b.and_then(|b| pre.prepare(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv::Likelihood;

    fn raw(index: usize, cats: &[&str], ys: &[f64]) -> DataBatch {
        DataBatch {
            index,
            categories: cats.iter().map(|s| s.to_string()).collect(),
            targets: ys.to_vec(),
        }
    }

    #[test]
    fn preprocessing_follows_stream_order() {
        let mut pre = Preprocessor::new(8, false, ScalerKind::Standard);
        let a = pre.prepare(raw(1, &["x", "y", "x"], &[1.0, 3.0, 5.0])).unwrap();
        assert_eq!(a.codes, vec![0, 0, 1]);
        assert_eq!(a.scaled[0], 0.0);
        assert_eq!(a.rows_seen, 3);
        let b = pre.prepare(raw(2, &["y", "z"], &[3.0, 3.0])).unwrap();
        assert_eq!(b.codes, vec![2, 0]);
        assert_eq!(b.scaled[0], 0.0);
        assert_eq!(b.rows_seen, 5);
    }

    #[test]
    fn capacity_exhaustion_propagates() {
        let mut pre = Preprocessor::new(2, false, ScalerKind::Robust);
        let err = pre.prepare(raw(1, &["a", "b"], &[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, crate::Error::CapacityExhausted { .. }));
    }

    struct Log(Vec<(usize, bool, usize)>, Vec<usize>);

    impl Observer for Log {
        fn predicted(&mut self, p: &Prediction<'_>) -> Result<()> {
            self.0.push((p.batch.index, p.in_sample, p.state.batches_seen));
            Ok(())
        }

        fn fitted(&mut self, b: &PreparedBatch, r: &FitReport, _: &SampleChain, _: &SamplerState) -> Result<()> {
            assert_eq!(b.index, r.batch_index);
            self.1.push(r.warmup.steps);
            Ok(())
        }
    }

    #[test]
    fn prediction_precedes_fit() {
        let spec = ModelSpec::new(Likelihood::Gaussian, 4);
        let settings = OnlineSettings {
            sampler: SamplerConfig {
                num_samples: 5,
                num_warmup: 30,
                extra_warmup: 7,
                ..SamplerConfig::default()
            },
            seed: 1,
            exec: Execution::Sequential,
        };
        let mut pre = Preprocessor::new(4, false, ScalerKind::Robust);
        let raws: Vec<Result<DataBatch>> = (1..=3)
            .map(|i| Ok(raw(i, &["a", "b", "a", "b"], &[1.0, 2.0, 3.0, 4.0 + i as f64])))
            .collect();
        let mut log = Log(Vec::new(), Vec::new());
        let out = run_online(&spec, prepare_stream(&mut pre, raws), &settings, &mut log)
            .unwrap()
            .unwrap();
        assert_eq!(log.0, vec![(1, true, 1), (2, false, 1), (3, false, 2)]);
        assert_eq!(log.1, vec![30, 7, 7]);
        assert_eq!(out.state.batches_seen, 3);
        assert_eq!(out.chain.num_draws(), 5);
    }

    #[test]
    fn empty_stream_yields_nothing() {
        let spec = ModelSpec::new(Likelihood::Gaussian, 4);
        let settings = OnlineSettings {
            sampler: SamplerConfig::default(),
            seed: 1,
            exec: Execution::Sequential,
        };
        let out = run_online(&spec, Vec::new(), &settings, &mut NullObserver).unwrap();
        assert!(out.is_none());
    }
}
