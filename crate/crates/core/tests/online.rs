use ltv_stream::data_io::DataBatch;
use ltv_stream::ltv::{Likelihood, ModelSpec};
use ltv_stream::nuts::{SampleChain, SamplerConfig, SamplerState};
use ltv_stream::online::{
    prepare_stream, run_online, FitReport, Observer, OnlineSettings, Prediction, PreparedBatch, Preprocessor,
};
use ltv_stream::preprocess::ScalerKind;
use ltv_stream::synth::{self, SynthSpec};
use ltv_stream::{Execution, Result};

fn settings() -> OnlineSettings {
    OnlineSettings {
        sampler: SamplerConfig {
            num_samples: 30,
            num_warmup: 80,
            extra_warmup: 20,
            max_tree_depth: 6,
            ..SamplerConfig::default()
        },
        seed: 17,
        exec: Execution::Parallel,
    }
}

fn raw_batches(rows: u64, size: usize) -> Vec<DataBatch> {
    let spec = SynthSpec {
        n_rows: rows,
        ..SynthSpec::demo()
    };
    synth::batches(&spec, size).collect::<Result<_>>().unwrap()
}

/// Records every prediction and checks that the chain behind it was the
/// one fit on the previous batch.
#[derive(Default)]
struct Sentinel {
    last_fit: Option<(usize, SampleChain)>,
    predictions: Vec<(usize, bool, Vec<f64>)>,
}

impl Observer for Sentinel {
    fn predicted(&mut self, p: &Prediction<'_>) -> Result<()> {
        if p.in_sample {
            assert_eq!(p.batch.index, 1);
            assert_eq!(p.state.batches_seen, 1);
        } else {
            let (fit_index, chain) = self.last_fit.as_ref().expect("a fit precedes every later prediction");
            assert_eq!(*fit_index + 1, p.batch.index);
            assert_eq!(chain, p.chain);
            assert!(p.state.batches_seen < p.batch.index);
        }
        self.predictions.push((p.batch.index, p.in_sample, p.posterior.draws.values.clone()));
        Ok(())
    }

    fn fitted(&mut self, b: &PreparedBatch, _: &FitReport, chain: &SampleChain, _: &SamplerState) -> Result<()> {
        self.last_fit = Some((b.index, chain.clone()));
        Ok(())
    }
}

fn predictions(raw: Vec<DataBatch>) -> Vec<(usize, bool, Vec<f64>)> {
    let spec = ModelSpec::new(Likelihood::StudentT, 8);
    let mut pre = Preprocessor::new(8, false, ScalerKind::Robust);
    let mut s = Sentinel::default();
    run_online(&spec, prepare_stream(&mut pre, raw.into_iter().map(Ok)), &settings(), &mut s).unwrap();
    s.predictions
}

#[test]
fn predictions_never_see_their_own_batch() {
    let clean = raw_batches(1200, 300);
    let mut tampered = clean.clone();
    for y in tampered[2].targets.iter_mut() {
        *y = 1e9;
    }
    let a = predictions(clean);
    let b = predictions(tampered);
    assert_eq!(a.len(), 4);
    assert_eq!(a.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(1, true), (2, false), (3, false), (4, false)]);
    assert_eq!(a[..3], b[..3], "batch 3 predictions must not depend on batch 3 targets");
    assert_ne!(a[3], b[3], "batch 4 predictions must reflect the fit on batch 3");
}

#[test]
fn posterior_batches_repeat_for_identical_runs() {
    assert_eq!(predictions(raw_batches(900, 300)), predictions(raw_batches(900, 300)));
}

#[test]
fn execution_modes_give_identical_posterior_batches() {
    let spec = ModelSpec::new(Likelihood::StudentT, 8);
    let go = |exec| {
        let mut pre = Preprocessor::new(8, false, ScalerKind::Robust);
        let mut s = Sentinel::default();
        let settings = OnlineSettings { exec, ..settings() };
        let raw = raw_batches(900, 300).into_iter().map(Ok);
        run_online(&spec, prepare_stream(&mut pre, raw), &settings, &mut s).unwrap();
        s.predictions
    };
    assert_eq!(go(Execution::Sequential), go(Execution::Parallel));
}
