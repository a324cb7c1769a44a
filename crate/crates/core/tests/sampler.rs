use ltv_stream::diff::targets::{DiagNormal, Shifted};
use ltv_stream::distributions::rng_from_seed;
use ltv_stream::evaluation::{effective_sample_size, ks_critical, ks_one_sample, ks_two_sample, normal_cdf};
use ltv_stream::ltv::{category_params, Likelihood, ModelSpec};
use ltv_stream::nuts::{sample, warmup, SampleChain, SamplerConfig, SamplerState};
use ltv_stream::online::{run_online, FitReport, Observer, OnlineSettings, Prediction, PreparedBatch};
use ltv_stream::preprocess::AffineMap;
use ltv_stream::{Execution, Result};
use rand::Rng;

fn cfg(samples: usize, warm: usize) -> SamplerConfig {
    SamplerConfig {
        num_samples: samples,
        num_warmup: warm,
        ..SamplerConfig::default()
    }
}

#[test]
fn standard_normal_draws_pass_ks() {
    let d = DiagNormal::standard(1);
    let c = cfg(5000, 1000);
    let (s, _) = warmup(&d, &c, SamplerState::fresh(&d, &c, 101), 1000).unwrap();
    let (chain, _) = sample(&d, &c, s).unwrap();
    let xs = chain.column(0);
    let n_eff = effective_sample_size(&xs).min(xs.len() as f64);
    let ks = ks_one_sample(&xs, normal_cdf);
    assert!(ks < ks_critical(n_eff, 0.01), "ks {ks} n_eff {n_eff}");
}

#[test]
fn acceptance_averages_near_target_after_warmup() {
    for (dim, target) in [(3, 0.8), (25, 0.8), (10, 0.9), (40, 0.95)] {
        let d = DiagNormal {
            mean: vec![1.0; dim],
            sd: (1..=dim).map(|i| i as f64 / 2.0).collect(),
        };
        let c = SamplerConfig {
            target_accept: target,
            ..cfg(1000, 1000)
        };
        let (s, _) = warmup(&d, &c, SamplerState::fresh(&d, &c, dim as u64), 1000).unwrap();
        let (chain, _) = sample(&d, &c, s).unwrap();
        assert_eq!(chain.divergences, 0);
        assert!((chain.mean_accept() - target).abs() < 0.1, "dim {dim}: {}", chain.mean_accept());
    }
}

#[test]
fn shifted_density_gives_identical_frozen_trajectories() {
    let base = DiagNormal {
        mean: vec![0.5, -2.0, 3.0],
        sd: vec![1.0, 0.3, 4.0],
    };
    let c = cfg(300, 300);
    let (s, _) = warmup(&base, &c, SamplerState::fresh(&base, &c, 9), 300).unwrap();
    let shifted = Shifted {
        inner: base.clone(),
        shift: 100.0,
    };
    let (a, _) = sample(&base, &c, s.clone()).unwrap();
    let (b, _) = sample(&shifted, &c, s).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_eq!(a.tree_depths, b.tree_depths);
}

struct Chains(Vec<SampleChain>);

impl Observer for Chains {
    fn predicted(&mut self, _: &Prediction<'_>) -> Result<()> {
        Ok(())
    }

    fn fitted(&mut self, _: &PreparedBatch, _: &FitReport, chain: &SampleChain, _: &SamplerState) -> Result<()> {
        self.0.push(chain.clone());
        Ok(())
    }
}

fn batch(index: usize, codes: &[u32], scaled: &[f64]) -> PreparedBatch {
    PreparedBatch {
        index,
        codes: codes.to_vec(),
        targets: scaled.to_vec(),
        scaled: scaled.to_vec(),
        map_after: AffineMap::IDENTITY,
        rows_seen: index * codes.len(),
    }
}

fn category_mean(spec: &ModelSpec, chains: &[SampleChain], code: usize) -> Vec<f64> {
    let layout = spec.layout();
    chains
        .iter()
        .flat_map(|c| c.iter().map(|d| category_params(&layout, d)[code].mu).collect::<Vec<_>>())
        .collect()
}

#[test]
fn carried_state_without_extra_warmup_keeps_sampling_the_same_posterior() {
    let spec = ModelSpec::new(Likelihood::Gaussian, 4);
    let mut rng = rng_from_seed(77);
    let codes: Vec<u32> = (0..300).map(|i| 1 + (i % 3) as u32).collect();
    let scaled: Vec<f64> = codes
        .iter()
        .map(|&c| 0.5 * c as f64 + rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let s = 1000;

    let carried = OnlineSettings {
        sampler: SamplerConfig {
            extra_warmup: 0,
            ..cfg(s, 1000)
        },
        seed: 1,
        exec: Execution::Parallel,
    };
    let mut two = Chains(Vec::new());
    let stream = vec![Ok(batch(1, &codes, &scaled)), Ok(batch(2, &codes, &scaled))];
    run_online(&spec, stream, &carried, &mut two).unwrap();
    assert_eq!(two.0.len(), 2);

    let single = OnlineSettings {
        sampler: cfg(2 * s, 1000),
        seed: 2,
        exec: Execution::Parallel,
    };
    let mut one = Chains(Vec::new());
    run_online(&spec, vec![Ok(batch(1, &codes, &scaled))], &single, &mut one).unwrap();

    for code in 1..=3 {
        let a = category_mean(&spec, &two.0, code);
        let b = category_mean(&spec, &one.0, code);
        let (ea, eb) = (
            effective_sample_size(&a).min(a.len() as f64),
            effective_sample_size(&b).min(b.len() as f64),
        );
        let ks = ks_two_sample(&a, &b);
        let crit = ks_critical(ea * eb / (ea + eb), 0.01);
        assert!(ks < crit, "category {code}: ks {ks} >= {crit}");
    }
}

#[test]
fn seeded_online_runs_repeat_exactly() {
    let spec = ModelSpec::new(Likelihood::StudentT, 4);
    let codes: Vec<u32> = (0..100).map(|i| (i % 4) as u32).collect();
    let scaled: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    let settings = OnlineSettings {
        sampler: SamplerConfig {
            extra_warmup: 30,
            ..cfg(40, 80)
        },
        seed: 3,
        exec: Execution::Parallel,
    };
    let go = || {
        let mut c = Chains(Vec::new());
        let stream = (1..=3).map(|i| Ok(batch(i, &codes, &scaled)));
        run_online(&spec, stream, &settings, &mut c).unwrap();
        c.0
    };
    assert_eq!(go(), go());
}
