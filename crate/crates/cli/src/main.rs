use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use memoroid::batching::Tape;
use memoroid::bench::ReturnsBench;
use memoroid::params::ParamSet;
use memoroid::qlearn::sensitivity::sensitivity_profile;
use memoroid::qlearn::train::{checkpoint_specs, rollout, train, TrainConfig};
use memoroid::scan::{ScanSchedule, WORKERS_ENV};
use memoroid::verify::{self, Fault, Scale, VerifyOptions};

/// Memoroid scans, returns and recurrent Q-learning at desk scale.
#[derive(Debug, Parser)]
#[command(name = "memoroid", version)]
struct Cli {
    /// Default worker budget for parallel scans.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    NonAssociative,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the oracle-equivalence and property suites.
    Verify {
        /// Only suites whose name starts with this (e.g. `scan`, `returns.gae`).
        #[arg(long)]
        filter: Option<String>,
        /// Acceptance-sized instances instead of the quick pass.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print one JSON object per suite instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Time scan-based returns against the backward loop.
    BenchReturns {
        #[arg(long)]
        max_len: usize,
        #[arg(long)]
        trials: usize,
        /// Episodes per trial.
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        /// Draw exactly this many timesteps per trial instead.
        #[arg(long)]
        total_steps: Option<usize>,
        /// Worker budgets to time, comma separated.
        #[arg(long = "budgets", value_delimiter = ',')]
        budgets: Vec<usize>,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Cumulative input-gradient curves of a checkpoint.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Greedy episodes to analyse.
        #[arg(long)]
        episodes: usize,
        /// Lag at which the marker column is set.
        #[arg(long)]
        rml: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Episode-length histogram and padding fraction of a saved tape.
    Stats {
        #[arg(long)]
        tape: PathBuf,
        #[arg(long)]
        segment_length: Option<usize>,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// A suite or equivalence check failed.
    Check(String),
    /// Bad arguments, config or input files.
    Usage(String),
}

impl From<memoroid::Error> for Failure {
    fn from(e: memoroid::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn schedule(workers: Option<usize>) -> Result<ScanSchedule, Failure> {
    match workers {
        Some(w) => Ok(ScanSchedule::serial().with_workers(w)?),
        None => Ok(ScanSchedule::from_env()),
    }
}

fn sink(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_verify(
    workers: Option<usize>,
    filter: Option<&str>,
    full: bool,
    seed: u64,
    json: bool,
    fault: Option<FaultArg>,
) -> Result<(), Failure> {
    let opts = VerifyOptions {
        seed,
        scale: if full { Scale::Full } else { Scale::Quick },
        sched: schedule(workers)?,
        fault: fault.map(|FaultArg::NonAssociative| Fault::NonAssociative),
    };
    let reports = verify::run(filter, &opts)?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = io::stdout().lock();
    for r in &reports {
        if json {
            writeln!(out, "{}", serde_json::to_string(r).expect("report serializes"))?;
        } else {
            let status = if r.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{:<width$}  {status}  {:>7.2}s  {}", r.name, r.seconds, r.detail)?;
        }
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} suites failed", reports.len())));
    }
    Ok(())
}

fn cmd_train(workers: Option<usize>, config: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(w) = workers.filter(|_| cfg.workers.is_none()) {
        cfg.workers = Some(w);
    }
    let dir = output_dir
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Usage("invalid `output_dir`: set it in the config or pass --output-dir".into()))?;
    let results = train(&cfg, Some(&dir))?;
    for r in &results {
        eprintln!(
            "seed {}: final return {:.4}, best {:.4}",
            r.seed,
            r.final_return(),
            r.best_return()
        );
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_sensitivity(
    checkpoint: &Path,
    episodes: usize,
    rml: usize,
    seed: u64,
    output: Option<&Path>,
) -> Result<(), Failure> {
    let (params, meta) = ParamSet::load(checkpoint)?;
    let (spec, task) = checkpoint_specs(&meta)?;
    spec.check_params(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sink(output)?;
    writeln!(
        out,
        "episode,lag,position,action,gradient_l1,cumulative,degenerate,rml_marker"
    )?;
    for episode in 0..episodes {
        let (transitions, _) = rollout(&spec, &params, task, None, &mut rng)?;
        let observations: Vec<Vec<f64>> = transitions.into_iter().map(|t| t.obs).collect();
        let profile = sensitivity_profile(&spec, &params, &observations)?;
        let n = observations.len();
        for lag in 0..n {
            let position = n - 1 - lag;
            writeln!(
                out,
                "{episode},{lag},{position},{},{:.9e},{:.9},{},{}",
                profile.action,
                profile.per_step[position],
                profile.cumulative[lag],
                u8::from(profile.degenerate),
                u8::from(lag == rml),
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Verify {
            filter,
            full,
            seed,
            json,
            inject_fault,
        } => cmd_verify(cli.workers, filter.as_deref(), full, seed, json, inject_fault),
        Command::BenchReturns {
            max_len,
            trials,
            episodes,
            total_steps,
            budgets,
            gamma,
            seed,
            output,
        } => {
            let workers = if budgets.is_empty() {
                vec![schedule(cli.workers)?.worker_budget()]
            } else {
                budgets
            };
            let bench = ReturnsBench {
                max_len,
                trials,
                episodes,
                total_steps,
                gamma,
                workers,
                seed,
            };
            bench.validate()?;
            let report = bench.run().map_err(|e| match e {
                memoroid::Error::Precondition(msg) => Failure::Check(msg),
                other => other.into(),
            })?;
            let mut out = sink(output.as_deref())?;
            serde_json::to_writer_pretty(&mut out, &report).map_err(memoroid::Error::from)?;
            writeln!(out)?;
            out.flush()?;
            Ok(())
        }
        Command::Train { config, output_dir } => cmd_train(cli.workers, &config, output_dir),
        Command::Sensitivity {
            checkpoint,
            episodes,
            rml,
            seed,
            output,
        } => cmd_sensitivity(&checkpoint, episodes, rml, seed, output.as_deref()),
        Command::Stats { tape, segment_length } => {
            if segment_length == Some(0) {
                return Err(Failure::Usage("invalid `segment_length`: must be at least 1".into()));
            }
            let tape = Tape::load(tape)?;
            let stats = tape.length_stats(segment_length);
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &stats).map_err(memoroid::Error::from)?;
            writeln!(out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
