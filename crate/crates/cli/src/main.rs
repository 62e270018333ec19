//! `crcl`: run, validate and generate data for class-incremental
//! experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crcl_core::stream::synth::{write_dataset, SynthConfig};
use crcl_core::stream::TaskOrder;
use crcl_core::{run_experiment, validate_config, ConfigIssue, Error, ExperimentConfig, Method, RunOptions};

#[derive(Parser)]
#[command(name = "crcl", version, about = "Replay-free class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report, session table and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        /// Task order: given, reversed or shuffled.
        #[arg(long)]
        order: Option<TaskOrder>,
        /// Number of tasks.
        #[arg(long)]
        tasks: Option<usize>,
        /// Continue from a session checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Check a config file and print every problem found.
    Validate { config: PathBuf },
    /// Write a synthetic glyph dataset (IDX files and a manifest).
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 200)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Std of stroke endpoint jitter, pixels.
        #[arg(long)]
        jitter: Option<f64>,
        /// Largest whole-glyph shift, pixels.
        #[arg(long)]
        max_shift: Option<f64>,
        /// Std of additive pixel noise on the [0, 1] scale.
        #[arg(long)]
        noise: Option<f64>,
    },
}

fn print_issues(issues: &[ConfigIssue]) {
    for issue in issues {
        eprintln!("error: {issue}");
    }
}

fn eval_threads() -> Result<Option<usize>, String> {
    match std::env::var("CRCL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("CRCL_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn report_error(err: &Error) {
    match err {
        Error::Session {
            session,
            operation,
            source,
        } => eprintln!("error: session={session} operation=\"{operation}\" cause=\"{source}\""),
        other => eprintln!("error: {other}"),
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    method: Option<Method>,
    order: Option<TaskOrder>,
    tasks: Option<usize>,
    resume: Option<PathBuf>,
) -> ExitCode {
    let mut cfg: ExperimentConfig = match validate_config(&config) {
        Ok(c) => c,
        Err(issues) => {
            print_issues(&issues);
            return ExitCode::from(2);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(o) = order {
        cfg.tasks.order = o;
    }
    if let Some(t) = tasks {
        cfg.tasks.num_tasks = t;
    }
    let issues = cfg.check();
    if !issues.is_empty() {
        print_issues(&issues);
        return ExitCode::from(2);
    }
    let threads = match eval_threads() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        eval_threads: threads,
        resume,
        stop_after: None,
    };
    let result = run_experiment(&cfg, &opts, |r| {
        let fused = r
            .fused_fraction
            .map(|f| format!(" fused={:.1}%", 100.0 * f))
            .unwrap_or_default();
        println!(
            "session {:>2}  classes {:>3}  acc {:>6.2}%{fused}",
            r.session, r.classes_seen, r.accuracy
        );
    });
    match result {
        Ok(report) => {
            match report.acc_avg {
                Some(avg) => println!("acc_avg {avg:.2}%  acc_last {:.2}%", report.acc_last),
                None => println!("acc {:.2}%", report.acc_last),
            }
            println!("report written to {}", cfg.output.join("report.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            method,
            order,
            tasks,
            resume,
        } => run(config, seed, out, method, order, tasks, resume),
        Command::Validate { config } => match validate_config(&config) {
            Ok(cfg) => {
                print!("{}", cfg.render());
                ExitCode::SUCCESS
            }
            Err(issues) => {
                print_issues(&issues);
                ExitCode::from(2)
            }
        },
        Command::Synth {
            dir,
            classes,
            train_per_class,
            test_per_class,
            seed,
            jitter,
            max_shift,
            noise,
        } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                classes,
                train_per_class,
                test_per_class,
                seed,
                jitter: jitter.unwrap_or(defaults.jitter),
                max_shift: max_shift.unwrap_or(defaults.max_shift),
                noise: noise.unwrap_or(defaults.noise),
                ..defaults
            };
            match write_dataset(&dir, &cfg) {
                Ok(manifest) => {
                    println!("{}", manifest.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    report_error(&e);
                    ExitCode::FAILURE
                }
            }
        }
    }
}
