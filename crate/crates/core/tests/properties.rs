use ltv_stream::data_io::{BatchReader, DataBatch, StreamConfig};
use ltv_stream::distributions::{logpdf_normal, rng_from_seed, sample_truncated, StudentTParams, TruncationStats};
use ltv_stream::evaluation::{lppd, RowDraws};
use ltv_stream::synth::{self, generate, SynthSpec};
use ltv_stream::{Execution, Result};
use proptest::prelude::*;
use rand::Rng;

fn csv_text(rows: &[(u8, i32)]) -> String {
    let mut s = String::from("category,target\n");
    for (c, y) in rows {
        s.push_str(&format!("c{c},{y}\n"));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_concatenate_to_file_order(
        rows in prop::collection::vec((0u8..5, -100i32..100_000), 0..400),
        size in 1usize..50,
    ) {
        let text = csv_text(&rows);
        let cfg = StreamConfig { batch_size: size, ..StreamConfig::default() };
        let read = || -> Vec<DataBatch> {
            BatchReader::new(text.as_bytes(), &cfg).unwrap().collect::<Result<_>>().unwrap()
        };
        let batches = read();
        prop_assert_eq!(&batches, &read());
        prop_assert!(batches.iter().all(|b| b.len() <= size && !b.is_empty()));
        let ys: Vec<f64> = batches.iter().flat_map(|b| b.targets.iter().copied()).collect();
        prop_assert_eq!(ys, rows.iter().map(|r| r.1 as f64).collect::<Vec<_>>());
    }

    #[test]
    fn better_located_density_scores_higher(seed in 0u64..1000, shift in 0.5f64..3.0) {
        let mut rng = rng_from_seed(seed);
        let y: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let draws = |loc: f64| {
            RowDraws::from_rows(&y.iter().map(|&v| vec![logpdf_normal(v, loc, 1.0)]).collect::<Vec<_>>())
        };
        let good = lppd(&draws(0.0), Execution::Sequential).total;
        let bad = lppd(&draws(shift), Execution::Sequential).total;
        prop_assert!(good > bad);
    }

    #[test]
    fn truncated_draws_respect_the_bound(
        seed in any::<u64>(),
        mu in -50.0f64..50.0,
        sigma in 0.1f64..20.0,
        nu in 0.5f64..100.0,
        lower in -10.0f64..10.0,
    ) {
        let mut rng = rng_from_seed(seed);
        let mut stats = TruncationStats::default();
        for _ in 0..50 {
            let x = sample_truncated(StudentTParams::new(mu, sigma, nu), lower, 100, &mut rng, &mut stats);
            prop_assert!(x >= lower);
        }
    }

    #[test]
    fn generated_csv_reads_back_as_in_memory_batches(n in 0u64..2000, seed in any::<u64>(), size in 1usize..700) {
        let spec = SynthSpec { n_rows: n, seed, ..SynthSpec::demo() };
        let mut buf = Vec::new();
        generate(&spec, &mut buf).unwrap();
        let cfg = StreamConfig { batch_size: size, ..StreamConfig::default() };
        let from_file: Vec<DataBatch> = BatchReader::new(&buf[..], &cfg).unwrap().collect::<Result<_>>().unwrap();
        let direct: Vec<DataBatch> = synth::batches(&spec, size).collect::<Result<_>>().unwrap();
        prop_assert_eq!(from_file, direct);
    }
}
