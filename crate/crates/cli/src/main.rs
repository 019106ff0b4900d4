use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use branchflow::harness::config::RunConfig;
use branchflow::harness::data::ToyDatasetSpec;
use branchflow::harness::{checkpoint, pipeline, selftest, write_atomic};
use branchflow::model::{build_batch, grad_check, Model};
use branchflow::rng::{configure_threads, stream, stream_id, BfRng};
use branchflow::sampler::ScheduleKind;
use branchflow::{Error, Result};

#[derive(Parser)]
#[command(name = "branchflow", version, about = "Train, sample and check branching flow models on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "token_runs")]
    TokenRuns,
    Polyline2d,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config for a toy task.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, self.preset) {
            (Some(p), _) => RunConfig::load(p),
            (None, Some(Preset::TokenRuns)) => Ok(RunConfig::preset(ToyDatasetSpec::token_runs())),
            (None, Some(Preset::Polyline2d)) => Ok(RunConfig::preset(ToyDatasetSpec::polyline2d())),
            (None, None) => Err(Error::Config("one of --config or --preset is required".into())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, metrics.csv and config.json into --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of optimiser steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate samples from a checkpoint as JSONL.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        schedule: Option<ScheduleKind>,
        /// Number of samples (default: the config's).
        #[arg(long)]
        n: Option<usize>,
        /// Also write every intermediate state as CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Compare samples with data; writes an EvalReport as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generated samples (JSONL).
        #[arg(long)]
        samples: PathBuf,
        /// Reference samples (JSONL); held-out data from the config when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump conditioning variables and conditional states for inspection.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (z.jsonl, paths.csv).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        times: Vec<f64>,
    },
    /// Finite-difference check of the analytic loss gradient.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the oracle-equivalence suites.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Run at 2% of the sample counts with widened statistical tolerances.
        #[arg(long)]
        quick: bool,
        /// Write the reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write held-out data as JSONL.
    Data {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
    /// Print a config as JSON.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, out, steps } => {
            let mut cfg = config.load()?;
            if let Some(s) = steps {
                cfg.model.steps = s;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let every = (cfg.model.steps / 20).max(1);
            let (model, losses) = pipeline::train_run(&cfg, seed, |step, l| {
                if step % every == 0 {
                    eprintln!("step {step}: loss {:.5}", l.total);
                }
            })?;
            checkpoint::save(&out.join("model.ckpt"), &cfg, &model)?;
            write(&out.join("metrics.csv"), &pipeline::metrics_csv(&losses))?;
            write(&out.join("config.json"), &cfg.to_json_pretty())?;
            Ok(true)
        }
        Command::Sample { checkpoint: ckpt, seed, out, steps, schedule, n, trajectory } => {
            let (cfg, model) = checkpoint::load(&ckpt)?;
            let mut sched = cfg.sampler.schedule;
            if let Some(s) = steps {
                sched.n_steps = s;
            }
            if let Some(k) = schedule {
                sched.kind = k;
            }
            let n = n.unwrap_or(cfg.sampler.num_samples);
            let outputs = pipeline::sample_run(&cfg, &model, sched, n, seed, trajectory.is_some())?;
            let elements: Vec<_> = outputs.iter().map(|o| o.elements.clone()).collect();
            write(&out, &pipeline::samples_jsonl(&elements, seed))?;
            if let Some(path) = trajectory {
                write(&path, &pipeline::trajectory_csv(&outputs, cfg.model.d))?;
            }
            Ok(true)
        }
        Command::Eval { config, samples, reference, seed, out } => {
            let cfg = config.load()?;
            let generated = pipeline::parse_samples_jsonl(&std::fs::read_to_string(&samples)?)?;
            let reference = match reference {
                Some(p) => pipeline::parse_samples_jsonl(&std::fs::read_to_string(p)?)?,
                None => cfg.data.held_out(generated.len(), seed),
            };
            let report = pipeline::eval_run(&cfg, &generated, &reference, seed)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
            let failures = pipeline::distribution_match_failures(&report);
            for f in &failures {
                eprintln!("below threshold: {f}");
            }
            Ok(failures.is_empty())
        }
        Command::Simulate { config, seed, out, n, times } => {
            let cfg = config.load()?;
            let (zs, csv) = pipeline::simulate_dump(&cfg, n, &times, seed)?;
            std::fs::create_dir_all(&out)?;
            write(&out.join("z.jsonl"), &zs)?;
            write(&out.join("paths.csv"), &csv)?;
            Ok(true)
        }
        Command::Gradcheck { config, seed } => {
            let cfg = config.load()?;
            let mut rng = stream(seed, stream_id(0, 0));
            let model = Model::init(cfg.model.clone(), &mut rng)?;
            let data = cfg.data.clone();
            let source = move |r: &mut BfRng| data.generate(r);
            let batch = build_batch(&source, &cfg.train_setup(), &cfg.model, seed, 0)?;
            let err = grad_check(&model, &batch, &mut rng)?;
            println!("max relative gradient error: {err:.3e}");
            Ok(err < 1e-4)
        }
        Command::Selftest { seed, quick, out } => {
            let scale = if quick { 0.02 } else { 1.0 };
            let reports = selftest::run_all(seed, scale, |r| println!("{}", r.line()));
            if let Some(p) = out {
                write(&p, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
            }
            Ok(reports.iter().all(|r| r.passed))
        }
        Command::Data { config, seed, out, n } => {
            let cfg = config.load()?;
            write(&out, &pipeline::samples_jsonl(&cfg.data.held_out(n, seed), seed))?;
            Ok(true)
        }
        Command::Config { config } => {
            println!("{}", config.load()?.to_json_pretty());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFinite { dump, .. } = &e {
                eprintln!("{dump}");
            }
            ExitCode::from(2)
        }
    }
}
