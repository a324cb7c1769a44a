use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ltv_stream::evaluation::{compare, read_metrics, Comparison};
use ltv_stream::ltv::Likelihood;
use ltv_stream::preprocess::ScalerKind;
use ltv_stream::run::{execute, RunConfig, Source};
use ltv_stream::synth::{generate, SynthSpec};
use ltv_stream::{Error, Execution};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CAPACITY: u8 = 3;
const EXIT_SAMPLER: u8 = 4;

#[derive(Parser)]
#[command(name = "ltv-stream", version, about = "Streaming Bayesian LTV models with fat-tail detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Five categories from Gaussian to Cauchy, 18000 rows.
    Demo,
    /// Three categories with a x20 location shift at row 15000.
    Drift,
    /// A thin and a heavy category, 100000 rows.
    Pareto,
}

impl Preset {
    fn spec(self) -> SynthSpec {
        match self {
            Preset::Demo => SynthSpec::demo(),
            Preset::Drift => SynthSpec::drift_demo(),
            Preset::Pareto => SynthSpec::pareto_demo(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    StudentT,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scaler {
    Robust,
    Standard,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic `category,target` CSV.
    Synth {
        /// TOML generator spec.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Built-in generator spec (default: demo).
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        rows: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved generator spec as TOML instead of data.
        #[arg(long)]
        print_spec: bool,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train online over a stream with prequential scoring.
    Run(RunArgs),
    /// Compare two metrics files batch by batch (first minus second).
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run config, for example a previous run's manifest.toml.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Input CSV with category and target columns.
    #[arg(long, conflicts_with = "preset")]
    input: Option<PathBuf>,
    /// Use a built-in synthetic stream as input.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    extra_warmup: Option<usize>,
    #[arg(long)]
    max_tree_depth: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    scaler: Option<Scaler>,
    /// Encoder and model capacity, including the unknown code.
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    category_column: Option<String>,
    #[arg(long)]
    target_column: Option<String>,
    /// Run the data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
    #[arg(short, long, env = "LTV_STREAM_OUT_DIR", default_value = "ltv-stream-out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.input {
            c.source = Source::Csv(p.clone());
        }
        if let Some(p) = self.preset {
            c.source = Source::Synthetic(p.spec());
        }
        if let Some(m) = self.model {
            c.model.likelihood = match m {
                Model::StudentT => Likelihood::StudentT,
                Model::Gaussian => Likelihood::Gaussian,
            };
        }
        if let Some(v) = self.capacity {
            c.model.category_capacity = v;
            c.model.tau0 = None;
        }
        let s = &mut c.sampler;
        s.num_samples = self.samples.unwrap_or(s.num_samples);
        s.num_warmup = self.warmup.unwrap_or(s.num_warmup);
        s.extra_warmup = self.extra_warmup.unwrap_or(s.extra_warmup);
        s.max_tree_depth = self.max_tree_depth.unwrap_or(s.max_tree_depth);
        s.target_accept = self.target_accept.unwrap_or(s.target_accept);
        c.stream.batch_size = self.batch_size.unwrap_or(c.stream.batch_size);
        if let Some(v) = &self.category_column {
            c.stream.category_column = v.clone();
        }
        if let Some(v) = &self.target_column {
            c.stream.target_column = v.clone();
        }
        if let Some(v) = self.scaler {
            c.scaler = match v {
                Scaler::Robust => ScalerKind::Robust,
                Scaler::Standard => ScalerKind::Standard,
            };
        }
        c.seed = self.seed.unwrap_or(c.seed);
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.output_dir = Some(self.out.clone());
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::CapacityExhausted { .. } | Error::CodeOutOfRange { .. } => EXIT_CAPACITY,
        Error::PersistentDivergence { .. } | Error::Dimension { .. } => EXIT_SAMPLER,
        Error::Io { .. } | Error::Malformed { .. } | Error::Schema(_) | Error::Csv(_) | Error::Empty(_) => EXIT_IO,
        Error::InvalidSpec { .. } | Error::Unsupported(_) => EXIT_USAGE,
    }
}

fn synth(
    spec: Option<PathBuf>,
    preset: Option<Preset>,
    rows: Option<u64>,
    seed: Option<u64>,
    print_spec: bool,
    output: Option<PathBuf>,
) -> Result<(), Error> {
    let mut s = match spec {
        Some(p) => SynthSpec::load(&p)?,
        None => preset.unwrap_or(Preset::Demo).spec(),
    };
    s.n_rows = rows.unwrap_or(s.n_rows);
    s.seed = seed.unwrap_or(s.seed);
    s.validate()?;
    let io_err = |p: &Path, e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    let out: Box<dyn Write> = match &output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    if print_spec {
        let mut out = out;
        return out
            .write_all(s.to_toml().as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| io_err(Path::new("<output>"), e));
    }
    let n = generate(&s, out)?;
    if let Some(p) = output {
        eprintln!("wrote {n} rows to {}", p.display());
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Error> {
    let config = args.config()?;
    let out = execute(&config)?;
    for w in &out.summary.warnings {
        eprintln!("warning: {w}");
    }
    let dir = config.output_dir.as_deref().unwrap_or(Path::new("."));
    println!("batch  rows  in_sample  lppd  mae  cum_lppd  cum_mae  divergences");
    for r in &out.records {
        println!(
            "{:>5} {:>5} {:>9} {:>10.4} {:>10.3} {:>10.4} {:>10.3} {:>5}",
            r.batch_index, r.rows, r.in_sample, r.lppd, r.mae, r.cum_lppd, r.cum_mae, r.divergences
        );
    }
    if let Some(tails) = &out.fat_tails {
        println!("\ncategory  nu_mean  nu_q05  nu_q95");
        for (t, c) in tails.iter().zip(0u32..) {
            if let Some(cat) = out.categories.iter().find(|r| r.code == c) {
                println!("{:<12} {:>8.2} {:>8.2} {:>8.2}", cat.category, t.mean, t.q05, t.q95);
            }
        }
    }
    println!("\noutputs written to {}", dir.display());
    Ok(())
}

fn print_comparison(c: &Comparison) {
    println!("batch  d_lppd  d_mae  d_rmse  d_cum_lppd  d_cum_mae  d_cum_rmse");
    for d in &c.deltas {
        println!(
            "{:>5} {:>10.4} {:>10.3} {:>10.3} {:>10.4} {:>10.3} {:>10.3}",
            d.batch_index, d.lppd, d.mae, d.rmse, d.cum_lppd, d.cum_mae, d.cum_rmse
        );
    }
    println!(
        "\nbatches won (lppd, mae, rmse): first {:?}, second {:?}",
        c.a_wins, c.b_wins
    );
    if let Some(last) = c.final_delta() {
        let winner = match last.cum_lppd.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => "first",
            Some(std::cmp::Ordering::Less) => "second",
            _ => "neither",
        };
        println!("cumulative lppd favours {winner} (delta {:.4})", last.cum_lppd);
    }
}

fn compare_files(a: &Path, b: &Path) -> Result<(), Error> {
    let open = |p: &Path| {
        File::open(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    let ra = read_metrics(open(a)?)?;
    let rb = read_metrics(open(b)?)?;
    print_comparison(&compare(&ra, &rb)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth {
            spec,
            preset,
            rows,
            seed,
            print_spec,
            output,
        } => synth(spec, preset, rows, seed, print_spec, output),
        Command::Run(args) => run(args),
        Command::Compare { a, b } => compare_files(&a, &b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
