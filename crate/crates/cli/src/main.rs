use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchmi::attacks::Method;
use patchmi::pipeline::{self, Layout, RunConfig};
use patchmi::Error;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "PATCHMI_OUT";

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "patchmi", version, about = "Patch-wise model inversion workbench")]
struct Cli {
    /// Run config (TOML). Without it the built-in defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; re-derives every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root. Falls back to `out_dir` in the config, then $PATCHMI_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Classes attacked concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the target and evaluation classifiers.
    TrainClassifier,
    /// Invert the target classifier with one method.
    Attack {
        /// bmi, gmi or patchmi.
        method: Method,
    },
    /// Score stored attack samples with the evaluation classifier.
    Evaluate {
        /// Methods to score; defaults to every method with samples on disk.
        methods: Vec<Method>,
    },
    /// Check the divergence bounds on random discrete instances.
    VerifyTheory {
        /// Overrides the number of random instances.
        #[arg(long)]
        trials: Option<usize>,
        /// Negate the posterior term to self-test the checker.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn resolve(cli: &Cli) -> Result<(RunConfig, Layout), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_master_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Command::VerifyTheory { trials, inject_fault } = &cli.command {
        if let Some(t) = trials {
            cfg.theory.trials = *t;
        }
        cfg.theory.inject_fault |= *inject_fault;
    }
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    cfg.out_dir = Some(root.clone());
    cfg.validate()?;
    Ok((cfg, Layout::new(root)))
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let (cfg, layout) = resolve(cli)?;
    let progress = |msg: &str| eprintln!("{msg}");
    match &cli.command {
        Command::TrainClassifier => {
            let s = pipeline::cmd_train_classifier(&cfg, &layout)?;
            println!("target classifier     val acc {:.4} ({} images)", s.target.val_acc, s.target.val_size);
            println!("evaluation classifier val acc {:.4} ({} images)", s.evaluation.val_acc, s.evaluation.val_size);
            println!("checkpoints in {}", layout.classifiers().display());
        }
        Command::Attack { method } => {
            let r = pipeline::cmd_attack(&cfg, *method, &layout, &progress)?;
            println!(
                "{}: {} classes in {:.1}s, outputs in {}",
                method.name(),
                r.classes.len(),
                r.wall_seconds,
                layout.attack(*method).display()
            );
        }
        Command::Evaluate { methods } => {
            for r in pipeline::cmd_evaluate(&cfg, methods, &layout)? {
                println!("{}\n{}", r.method, r.table());
            }
        }
        Command::VerifyTheory { .. } => {
            let r = pipeline::cmd_verify_theory(&cfg, &layout)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if !r.passed() {
                eprintln!("theory check failed: {} violations", r.violations());
                return Ok(EXIT_VIOLATION);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { EXIT_DIVERGENCE } else { EXIT_USAGE })
        }
    }
}
