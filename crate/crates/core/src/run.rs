//! End-to-end runs: configuration, prequential recording and output files.
//!
//! A run writes everything it produces into one directory. `manifest.toml`
//! is the fully resolved configuration; feeding it back as the config of a
//! new run reproduces every other file byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{read_stream, DataBatch, ReadStats, StreamConfig};
use crate::evaluation::{
    location_fit, lppd, point_errors, predictive_means, write_metrics, CumulativeMetrics, PrequentialRecord,
};
use crate::exec::Execution;
use crate::ltv::{fat_tail_report, predictive_logdensities, write_fat_tail_report, Likelihood, ModelSpec, TailSummary};
use crate::nuts::{SampleChain, SamplerConfig, SamplerState};
use crate::online::{run_online, FitReport, Observer, OnlineSettings, Prediction, PreparedBatch, Preprocessor};
use crate::preprocess::{AffineMap, EncoderState, ScalerKind, UNKNOWN_CODE};
use crate::synth::{self, SynthSpec};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const FAT_TAILS_FILE: &str = "fat_tails.csv";
pub const CATEGORIES_FILE: &str = "categories.csv";
pub const ENCODER_FILE: &str = "encoder.csv";
pub const STATE_FILE: &str = "state.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Where the rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Csv(PathBuf),
    Synthetic(SynthSpec),
}

impl Default for Source {
    fn default() -> Self {
        Source::Synthetic(SynthSpec::demo())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scaler: ScalerKind,
    /// Emit a category's code on its first occurrence instead of unknown.
    pub fresh_codes: bool,
    pub execution: Execution,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub sampler: SamplerConfig,
    pub stream: StreamConfig,
    pub source: Source,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            scaler: ScalerKind::Robust,
            fresh_codes: false,
            execution: Execution::Parallel,
            output_dir: None,
            model: ModelSpec::default(),
            sampler: SamplerConfig::default(),
            stream: StreamConfig::default(),
            source: Source::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::toml(text, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.stream.validate()?;
        if let Source::Synthetic(s) = &self.source {
            s.validate()?;
        }
        Ok(())
    }

    /// Same config with every default made explicit.
    pub fn resolved(&self) -> Self {
        RunConfig {
            model: self.model.resolved(),
            ..self.clone()
        }
    }

    /// The manifest text: the resolved config without the output directory.
    pub fn to_manifest(&self) -> String {
        toml::to_string(&self.resolved()).expect("run config always serializes")
    }

    pub fn settings(&self) -> OnlineSettings {
        OnlineSettings {
            sampler: self.sampler.clone(),
            seed: self.seed,
            exec: self.execution,
        }
    }
}

/// Sampler diagnostics of one fit plus the truncation counters of the
/// prediction made for the same batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDiagnostics {
    pub batch_index: usize,
    pub warmup_steps: usize,
    pub warmup_divergences: usize,
    pub sample_divergences: usize,
    pub step_size: f64,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
    pub max_tree_depth_hits: usize,
    pub n_leapfrog: usize,
    pub truncation_draws: u64,
    pub truncation_exhausted: u64,
}

/// Per-category totals over the whole run, in target units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category: String,
    pub code: u32,
    pub rows: u64,
    pub max_target: f64,
    pub max_predictive: f64,
    /// Posterior means from the final chain.
    pub mu: f64,
    pub sigma: f64,
    pub nu: f64,
}

/// Final sampler and scaler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub batches_seen: usize,
    pub rows_seen: usize,
    pub step_size: f64,
    pub divergence_count: usize,
    pub scaler_center: f64,
    pub scaler_spread: f64,
    pub position: Vec<f64>,
    pub inverse_mass_diag: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub batches: usize,
    pub rows: usize,
    /// Largest carried state seen between batches: sampler state, previous
    /// chain and preprocessing. Excludes the batch being processed.
    pub peak_state_bytes: usize,
    pub final_cum_lppd: Option<f64>,
    pub final_cum_mae: Option<f64>,
    pub final_cum_rmse: Option<f64>,
    pub skipped_missing_target: u64,
    pub negative_targets: u64,
    pub warnings: Vec<String>,
}

/// Everything a run produces, before it is written anywhere.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<PrequentialRecord>,
    pub diagnostics: Vec<BatchDiagnostics>,
    pub categories: Vec<CategoryRecord>,
    pub fat_tails: Option<Vec<TailSummary>>,
    pub encoder: EncoderState,
    pub state: Option<StateSnapshot>,
    pub summary: RunSummary,
}

struct Pending {
    record: PrequentialRecord,
    truncation: (u64, u64),
}

#[derive(Clone, Copy, Default)]
struct Extremes {
    rows: u64,
    max_target: f64,
    max_predictive: f64,
}

/// Observer that scores every prediction and keeps fixed-size running state.
struct Recorder<'a> {
    spec: &'a ModelSpec,
    exec: Execution,
    cumulative: CumulativeMetrics,
    pending: Option<Pending>,
    records: Vec<PrequentialRecord>,
    diagnostics: Vec<BatchDiagnostics>,
    extremes: Vec<Extremes>,
    peak_bytes: usize,
    warnings: Vec<String>,
}

impl<'a> Recorder<'a> {
    fn new(spec: &'a ModelSpec, exec: Execution) -> Self {
        Recorder {
            spec,
            exec,
            cumulative: CumulativeMetrics::default(),
            pending: None,
            records: Vec::new(),
            diagnostics: Vec::new(),
            extremes: vec![
                Extremes {
                    max_target: f64::NEG_INFINITY,
                    max_predictive: f64::NEG_INFINITY,
                    ..Extremes::default()
                };
                spec.category_capacity
            ],
            peak_bytes: 0,
            warnings: Vec::new(),
        }
    }
}

impl Observer for Recorder<'_> {
    fn predicted(&mut self, p: &Prediction<'_>) -> Result<()> {
        let b = p.batch;
        let logdens = predictive_logdensities(self.spec, p.chain, &b.codes, &b.targets, p.map, self.exec)?;
        let l = lppd(&logdens, self.exec);
        let bad = l.non_finite_rows();
        if !bad.is_empty() {
            self.warnings.push(format!(
                "batch {}: {} rows have a non-finite predictive density",
                b.index,
                bad.len()
            ));
        }
        let errors = point_errors(&predictive_means(&p.posterior.draws), &b.targets)?;
        let loc = location_fit(&p.posterior.draws, &b.targets, self.exec)?;
        self.cumulative.add(b.len(), l.total, errors);

        for (i, (&code, &y)) in b.codes.iter().zip(&b.targets).enumerate() {
            let e = &mut self.extremes[code as usize];
            e.rows += 1;
            e.max_target = e.max_target.max(y);
            let top = p.posterior.draws.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            e.max_predictive = e.max_predictive.max(top);
        }

        let t = p.posterior.truncation;
        if t.exhausted > 0 {
            self.warnings.push(format!(
                "batch {}: {} predictive draws fell back to the truncation bound",
                b.index, t.exhausted
            ));
        }
        self.pending = Some(Pending {
            record: PrequentialRecord {
                batch_index: b.index,
                rows: b.len(),
                rows_seen: b.rows_seen,
                in_sample: p.in_sample,
                lppd: l.total / b.len() as f64,
                mae: errors.mae,
                rmse: errors.rmse,
                pred_location: loc.pred_location,
                actual_mean: loc.actual_mean,
                divergences: 0,
                cum_lppd: self.cumulative.mean_lppd(),
                cum_mae: self.cumulative.mae(),
                cum_rmse: self.cumulative.rmse(),
            },
            truncation: (t.draws, t.exhausted),
        });
        Ok(())
    }

    fn fitted(&mut self, batch: &PreparedBatch, r: &FitReport, chain: &SampleChain, state: &SamplerState) -> Result<()> {
        let pending = self.pending.take().filter(|p| p.record.batch_index == batch.index);
        let (draws, exhausted) = pending.as_ref().map_or((0, 0), |p| p.truncation);
        if let Some(mut p) = pending {
            p.record.divergences = r.divergences();
            self.records.push(p.record);
        }
        if r.sample_divergences > 0 {
            self.warnings.push(format!(
                "batch {}: {} divergent transitions after warmup",
                batch.index, r.sample_divergences
            ));
        }
        self.diagnostics.push(BatchDiagnostics {
            batch_index: r.batch_index,
            warmup_steps: r.warmup.steps,
            warmup_divergences: r.warmup.divergences,
            sample_divergences: r.sample_divergences,
            step_size: r.step_size,
            mean_accept: r.mean_accept,
            mean_tree_depth: r.mean_tree_depth,
            max_tree_depth_hits: r.max_tree_depth_hits,
            n_leapfrog: r.n_leapfrog,
            truncation_draws: draws,
            truncation_exhausted: exhausted,
        });
        self.peak_bytes = self.peak_bytes.max(state.footprint_bytes() + chain.footprint_bytes());
        Ok(())
    }
}

/// Runs the online workflow over raw batches without touching the file system.
pub fn run_batches<I>(config: &RunConfig, raw: I) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<DataBatch>>,
{
    config.validate()?;
    let spec = config.model.resolved();
    let mut pre = Preprocessor::new(spec.category_capacity, config.fresh_codes, config.scaler);
    let mut recorder = Recorder::new(&spec, config.execution);
    let mut rows = 0;
    let result = {
        let prepared = raw.into_iter().map(|b| {
            let p = pre.prepare(b?)?;
            rows = p.rows_seen;
            Ok(p)
        });
        run_online(&spec, prepared, &config.settings(), &mut recorder)?
    };

    let mut warnings = std::mem::take(&mut recorder.warnings);
    let encoder = pre.encoder.clone();
    let label = |code: u32| label_of(&encoder, code);
    let (fat_tails, categories, state) = match &result {
        Some(res) => {
            let tails = match spec.likelihood {
                Likelihood::StudentT => Some(fat_tail_report(&res.chain, &spec)?),
                Likelihood::Gaussian => None,
            };
            let cats = category_records(&spec, &res.chain, res.map, &recorder.extremes, &label);
            let snap = StateSnapshot {
                batches_seen: res.state.batches_seen,
                rows_seen: rows,
                step_size: res.state.step_size,
                divergence_count: res.state.divergence_count,
                scaler_center: res.map.center,
                scaler_spread: res.map.spread,
                position: res.state.position.clone(),
                inverse_mass_diag: res.state.inverse_mass_diag.clone(),
            };
            (tails, cats, Some(snap))
        }
        None => {
            warnings.push("input stream contained no rows".into());
            (None, Vec::new(), None)
        }
    };
    let last = recorder.records.last();
    let summary = RunSummary {
        batches: recorder.records.len(),
        rows,
        peak_state_bytes: recorder.peak_bytes + pre.footprint_bytes(),
        final_cum_lppd: last.map(|r| r.cum_lppd),
        final_cum_mae: last.map(|r| r.cum_mae),
        final_cum_rmse: last.map(|r| r.cum_rmse),
        skipped_missing_target: 0,
        negative_targets: 0,
        warnings,
    };
    Ok(RunOutput {
        records: recorder.records,
        diagnostics: recorder.diagnostics,
        categories,
        fat_tails,
        encoder,
        state,
        summary,
    })
}

fn label_of(encoder: &EncoderState, code: u32) -> String {
    if code == UNKNOWN_CODE {
        "<unknown>".into()
    } else {
        encoder.value_of(code).map_or_else(|| "<unused>".into(), str::to_string)
    }
}

fn category_records(
    spec: &ModelSpec,
    chain: &SampleChain,
    map: AffineMap,
    extremes: &[Extremes],
    label: &dyn Fn(u32) -> String,
) -> Vec<CategoryRecord> {
    let layout = spec.layout();
    let cap = layout.capacity;
    let table = crate::ltv::unscaled_param_table(&layout, chain, map);
    let n = chain.num_draws().max(1) as f64;
    (0..cap)
        .filter(|&k| extremes[k].rows > 0)
        .map(|k| {
            let (mut mu, mut sigma, mut nu) = (0.0, 0.0, 0.0);
            for d in 0..chain.num_draws() {
                let p = table[d * cap + k];
                mu += p.mu;
                sigma += p.sigma;
                nu += p.nu;
            }
            CategoryRecord {
                category: label(k as u32),
                code: k as u32,
                rows: extremes[k].rows,
                max_target: extremes[k].max_target,
                max_predictive: extremes[k].max_predictive,
                mu: mu / n,
                sigma: sigma / n,
                nu: nu / n,
            }
        })
        .collect()
}

/// Reads the configured source and runs it.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    match &config.source {
        Source::Synthetic(s) => run_batches(config, synth::batches(s, config.stream.batch_size)),
        Source::Csv(path) => {
            let mut reader = read_stream(path, &config.stream)?;
            let mut out = run_batches(config, reader.by_ref())?;
            let ReadStats {
                skipped_missing_target,
                negative_targets,
                ..
            } = reader.stats();
            out.summary.skipped_missing_target = skipped_missing_target;
            out.summary.negative_targets = negative_targets;
            if skipped_missing_target > 0 {
                out.summary
                    .warnings
                    .push(format!("{skipped_missing_target} rows without a target were skipped"));
            }
            if negative_targets > 0 {
                out.summary
                    .warnings
                    .push(format!("{negative_targets} rows have a negative target"));
            }
            Ok(out)
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, name: &str) -> Result<()> {
    w.flush().map_err(|e| Error::io(name, e))
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, name)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(name), e))
}

fn write_toml<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = toml::to_string(value).expect("output records always serialize");
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(dir.join(name), e))?;
    finish(w, name)
}

/// Writes all outputs of a run into `dir`, creating it if needed.
pub fn write_outputs(config: &RunConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = create(dir, MANIFEST_FILE)?;
    w.write_all(config.to_manifest().as_bytes())
        .map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    finish(w, MANIFEST_FILE)?;

    write_metrics(create(dir, METRICS_FILE)?, &out.records)?;
    write_csv(dir, DIAGNOSTICS_FILE, &out.diagnostics)?;
    write_csv(dir, CATEGORIES_FILE, &out.categories)?;
    out.encoder.write_table(create(dir, ENCODER_FILE)?)?;
    if let Some(tails) = &out.fat_tails {
        write_fat_tail_report(create(dir, FAT_TAILS_FILE)?, tails, |c| label_of(&out.encoder, c))?;
    }
    if let Some(state) = &out.state {
        write_toml(dir, STATE_FILE, state)?;
    }
    write_toml(dir, SUMMARY_FILE, &out.summary)
}

/// Runs `config` and writes its outputs to `config.output_dir`.
pub fn execute(config: &RunConfig) -> Result<RunOutput> {
    let dir = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::invalid("output_dir", "no output directory given"))?;
    let out = run(config)?;
    write_outputs(config, &out, &dir)?;
    Ok(out)
}

/// Names of the output files that differ in content between two run
/// directories. A file missing from one side counts as different.
pub fn differing_outputs(a: &Path, b: &Path) -> Result<Vec<String>> {
    let names = [
        MANIFEST_FILE,
        METRICS_FILE,
        DIAGNOSTICS_FILE,
        CATEGORIES_FILE,
        ENCODER_FILE,
        FAT_TAILS_FILE,
        STATE_FILE,
        SUMMARY_FILE,
    ];
    let mut out = Vec::new();
    for name in names {
        let (pa, pb) = (a.join(name), b.join(name));
        if !pa.exists() && !pb.exists() {
            continue;
        }
        if fs::read(&pa).ok() != fs::read(&pb).ok() {
            out.push(name.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{CategorySpec, TailKind};

    fn small() -> RunConfig {
        RunConfig {
            model: ModelSpec::new(Likelihood::StudentT, 4),
            sampler: SamplerConfig {
                num_samples: 20,
                num_warmup: 60,
                extra_warmup: 20,
                max_tree_depth: 6,
                ..SamplerConfig::default()
            },
            stream: StreamConfig {
                batch_size: 100,
                ..StreamConfig::default()
            },
            source: Source::Synthetic(SynthSpec {
                n_rows: 250,
                seed: 5,
                categories: vec![
                    CategorySpec {
                        name: "a".into(),
                        weight: 0.5,
                        tail: TailKind::Gaussian,
                        df: None,
                        location: 10.0,
                        scale: 2.0,
                    },
                    CategorySpec {
                        name: "b".into(),
                        weight: 0.5,
                        tail: TailKind::Cauchy,
                        df: None,
                        location: 10.0,
                        scale: 2.0,
                    },
                ],
                drift_events: Vec::new(),
            }),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_reference_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.stream.batch_size, 3000);
        assert_eq!(c.sampler.num_warmup, 1500);
        assert_eq!(c.sampler.num_samples, 500);
        assert_eq!(c.sampler.extra_warmup, 500);
        assert_eq!(c.scaler, ScalerKind::Robust);
        assert_eq!(c.model.likelihood, Likelihood::StudentT);
    }

    #[test]
    fn manifest_round_trips() {
        let c = small();
        let back = RunConfig::from_toml(&c.to_manifest()).unwrap();
        assert_eq!(back, c.resolved());
        assert_eq!(back.to_manifest(), c.to_manifest());
    }

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn config_errors_name_the_field() {
        match RunConfig::from_toml("seed = \"x\"\n") {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("[sampler]\nnum_samples = 0\n") {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "num_samples"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn one_record_per_batch() {
        let out = run(&small()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.diagnostics.len(), 3);
        assert_eq!(out.records.iter().map(|r| r.rows).collect::<Vec<_>>(), vec![100, 100, 50]);
        assert!(out.records[0].in_sample && !out.records[1].in_sample);
        assert_eq!(out.records[2].rows_seen, 250);
        assert_eq!(out.summary.rows, 250);
        assert!(out.fat_tails.is_some());
        assert_eq!(out.state.as_ref().unwrap().batches_seen, 3);
    }

    #[test]
    fn single_batch_gives_single_record() {
        let mut c = small();
        c.stream.batch_size = 1000;
        assert_eq!(run(&c).unwrap().records.len(), 1);
    }

    #[test]
    fn capacity_exhaustion_is_reported() {
        let mut c = small();
        c.model.category_capacity = 2;
        assert!(matches!(run(&c), Err(Error::CapacityExhausted { .. })));
    }

    #[test]
    fn outputs_are_reproducible_and_mode_independent() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.execution = Execution::Sequential;
        c.output_dir = Some(dir.path().join("a"));
        execute(&c).unwrap();
        let replay = RunConfig {
            output_dir: Some(dir.path().join("b")),
            ..RunConfig::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap()
        };
        execute(&replay).unwrap();
        assert!(differing_outputs(&dir.path().join("a"), &dir.path().join("b")).unwrap().is_empty());

        let par = RunConfig {
            execution: Execution::Parallel,
            output_dir: Some(dir.path().join("c")),
            ..c.clone()
        };
        execute(&par).unwrap();
        assert_eq!(
            differing_outputs(&dir.path().join("a"), &dir.path().join("c")).unwrap(),
            vec![MANIFEST_FILE.to_string()]
        );
    }

    #[test]
    fn gaussian_run_has_no_tail_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.model.likelihood = Likelihood::Gaussian;
        c.output_dir = Some(dir.path().to_path_buf());
        execute(&c).unwrap();
        assert!(!dir.path().join(FAT_TAILS_FILE).exists());
        assert!(dir.path().join(METRICS_FILE).exists());
    }

    #[test]
    fn csv_source_counts_skipped_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.csv");
        fs::write(&path, "category,target\na,1\nb,\na,2\nb,3\n").unwrap();
        let mut c = small();
        c.source = Source::Csv(path);
        let out = run(&c).unwrap();
        assert_eq!(out.summary.rows, 3);
        assert_eq!(out.summary.skipped_missing_target, 1);
        assert!(out.summary.warnings.iter().any(|w| w.contains("without a target")));
    }

    #[test]
    fn empty_csv_runs_to_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.csv");
        fs::write(&path, "category,target\n").unwrap();
        let mut c = small();
        c.source = Source::Csv(path);
        c.output_dir = Some(dir.path().join("out"));
        let out = execute(&c).unwrap();
        assert!(out.records.is_empty());
        assert!(out.state.is_none());
    }
}
