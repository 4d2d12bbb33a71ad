use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use pointgva_core::bench::{self, BenchSpec, PoolingMethod};
use pointgva_core::checks::{self, CheckOutcome, EquivSuite, GradModule};
use pointgva_core::io;
use pointgva_core::network::{count_params, BackboneConfig, SegmentationModel};
use pointgva_core::numerics::{DEFAULT_STEP, DEFAULT_TOL};
use pointgva_core::PointCloud;

#[derive(Parser, Debug)]
#[command(name = "pointgva", version, about = "Grouped vector attention and grid pooling toolkit")]
struct Cli {
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for parallel kernels.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a uniform synthetic cloud in the unit cube.
    Gen(GenArgs),
    /// Time pool+unpool for FPS-kNN, Grid-kNN and grid pooling.
    BenchPool(BenchArgs),
    /// Finite-difference gradient checks.
    CheckGrad(GradArgs),
    /// Degeneracy and oracle equivalence suites.
    CheckEquiv(EquivArgs),
    /// Segmentation logits for a cloud file.
    Forward(ForwardArgs),
    /// Print the learnable scalar count of a model config.
    CountParams(CountArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, default_value_t = 3)]
    c: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 40_000, 160_000])]
    n_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5f64, 0.25, 0.125])]
    r_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = PoolingMethod::ALL.map(|m| m.name().to_string()))]
    methods: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Module name, or `all`.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Args, Debug)]
struct EquivArgs {
    /// Suite name, or `all`.
    #[arg(long)]
    which: String,
    #[arg(long, default_value_t = 50)]
    trials: usize,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    /// TOML model config; toy defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&PathBuf>) -> Result<BackboneConfig> {
    Ok(match path {
        Some(p) => BackboneConfig::load(p)?,
        None => BackboneConfig::toy(),
    })
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    let mut ok = true;
    for o in outcomes {
        println!("{o}");
        for f in &o.failures {
            println!("    {f}");
        }
        ok &= o.passed();
    }
    ok
}

/// Parses `all` or a comma-separated list of names; an unknown name is a
/// usage error.
fn all_or<T>(flag: &str, name: &str, all: &[T]) -> Vec<T>
where
    T: Copy + std::str::FromStr<Err = pointgva_core::Error>,
{
    if name == "all" {
        return all.to_vec();
    }
    name.split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<pointgva_core::Result<Vec<_>>>()
        .unwrap_or_else(|e| {
            Cli::command()
                .error(ErrorKind::InvalidValue, format!("--{flag}: {e}"))
                .exit()
        })
}

fn run(cli: Cli) -> Result<bool> {
    let threads = usize::from(cli.threads);
    match cli.command {
        Command::Gen(a) => {
            let cloud = bench::synth_uniform(a.n as usize, a.c as usize, cli.seed);
            io::write_ptpc(&a.out, &cloud, None)?;
            Ok(true)
        }
        Command::BenchPool(a) => {
            let methods = all_or("methods", &a.methods.join(","), &PoolingMethod::ALL);
            let spec = BenchSpec {
                ns: a.n_list,
                ratios: a.r_list,
                methods,
                repeats: a.repeats,
                warmup: a.warmup,
                seed: cli.seed,
                channels: a.channels,
                threads,
                ..BenchSpec::default()
            };
            let table = bench::bench_pooling(&spec)?;
            match a.out {
                Some(p) => bench::emit_csv(&table, &p)?,
                None => {
                    let stdout = std::io::stdout();
                    bench::write_csv(&table, stdout.lock())?;
                }
            }
            Ok(true)
        }
        Command::CheckGrad(a) => {
            if a.trials == 0 {
                bail!("--trials must be positive");
            }
            let modules = all_or("module", &a.module, &GradModule::ALL);
            let outcomes = modules
                .into_iter()
                .map(|m| checks::run_grad(m, a.trials, a.step, a.tol, cli.seed))
                .collect::<pointgva_core::Result<Vec<_>>>()?;
            Ok(report(&outcomes))
        }
        Command::CheckEquiv(a) => {
            if a.trials == 0 {
                bail!("--trials must be positive");
            }
            let suites = all_or("which", &a.which, &EquivSuite::ALL);
            let outcomes = suites
                .into_iter()
                .map(|s| checks::run_equiv(s, a.trials, cli.seed))
                .collect::<pointgva_core::Result<Vec<_>>>()?;
            Ok(report(&outcomes))
        }
        Command::Forward(a) => {
            let cfg = load_config(a.config.as_ref())?;
            let file = io::read_ptpc(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let model = SegmentationModel::new(cfg, cli.seed)?;
            let logits = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()?
                .install(|| model.logits(&file.cloud))?;
            let out = PointCloud::new(file.cloud.positions, logits)?;
            io::write_ptpc(&a.out, &out, file.labels.as_deref())?;
            Ok(true)
        }
        Command::CountParams(a) => {
            let cfg = load_config(a.config.as_ref())?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", count_params(&cfg)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
