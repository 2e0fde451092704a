use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ktan_cli::compare::{compare, CompareOptions};
use ktan_cli::config::ExperimentConfig;
use ktan_cli::{reference, run, CliResult};
use ktan_core::verify::gradient_suite;

/// Feature-map transfer experiments on small image datasets.
#[derive(Parser)]
#[command(name = "ktan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `method.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the run directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace artifacts of an earlier run in the output directory.
    #[arg(long)]
    overwrite: bool,
}

impl RunArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.method.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train `method.name` into `output.dir`.
    Train(RunArgs),
    /// Train the teacher into `teacher.dir`.
    TrainTeacher(RunArgs),
    /// Train the regressor against the saved teacher into `teacher.regressor_dir`.
    TrainRegressor(RunArgs),
    /// Finite-difference check of every differentiable operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Reload a run's checkpoint and compare its accuracy with the summary.
    Eval {
        run_dir: PathBuf,
    },
    /// Run every method config in a directory across seeds and report.
    Compare {
        /// Directory with one config file per method.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print the config reference.
    ConfigReference,
}

const GRADIENT_LIMIT: f64 = 1e-4;

fn execute(cmd: Command) -> CliResult<bool> {
    match cmd {
        Command::Train(a) => {
            let cfg = a.load()?;
            let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let s = run::train(&cfg, &out, a.overwrite)?;
            println!(
                "{} seed {}: test accuracy {:.4} (best {:.4} at epoch {}), written to {}",
                s.method.as_str(),
                s.seed,
                s.test_accuracy,
                s.best_test_accuracy,
                s.best_epoch,
                out.display()
            );
            Ok(true)
        }
        Command::TrainTeacher(a) => {
            let mut cfg = a.load()?;
            if let Some(out) = &a.out {
                cfg.teacher.dir = out.clone();
            }
            let s = run::train_teacher(&cfg, a.overwrite)?;
            println!(
                "teacher seed {}: test accuracy {:.4}, written to {}",
                s.seed,
                s.test_accuracy,
                cfg.teacher.dir.display()
            );
            Ok(true)
        }
        Command::TrainRegressor(a) => {
            let mut cfg = a.load()?;
            if let Some(out) = &a.out {
                cfg.teacher.regressor_dir = out.clone();
            }
            let s = run::train_regressor_cmd(&cfg, a.overwrite)?;
            println!(
                "regressor {:?} -> {:?}: kernel {:?}, {} head, ce {:.4} -> {:.4}, written to {}",
                s.teacher_map,
                s.student_map,
                s.kernel,
                s.head,
                s.first_ce,
                s.last_ce,
                cfg.teacher.regressor_dir.display()
            );
            Ok(true)
        }
        Command::Gradcheck { seed, eps } => {
            let cases = gradient_suite(eps, seed)?;
            println!("{:<16} {:>14}  status", "operation", "max rel error");
            let mut ok = true;
            for c in &cases {
                let pass = c.max_relative_error < GRADIENT_LIMIT;
                ok &= pass;
                println!(
                    "{:<16} {:>14.3e}  {}",
                    c.name,
                    c.max_relative_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            Ok(ok)
        }
        Command::Eval { run_dir } => {
            let r = run::eval(&run_dir)?;
            println!(
                "{}: train {:.6} (recorded {:.6}), test {:.6} (recorded {:.6}), max deviation {:e}",
                r.method.as_str(),
                r.train_accuracy,
                r.recorded_train_accuracy,
                r.test_accuracy,
                r.recorded_test_accuracy,
                r.max_deviation()
            );
            Ok(r.matches())
        }
        Command::Compare {
            config,
            seeds,
            out,
            overwrite,
            threads,
        } => {
            let report = compare(&CompareOptions {
                config_dir: config,
                seeds,
                out,
                overwrite,
                threads,
            })?;
            print!("{}", report.render());
            Ok(report.cells.iter().all(|c| c.result.is_ok()))
        }
        Command::ConfigReference => {
            print!("{}", reference::render());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
