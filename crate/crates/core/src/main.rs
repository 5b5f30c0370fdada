use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chemolab::experiment::{
    cmd_classify, cmd_estimate_cgn, cmd_run, cmd_sweep, error_exit_code, ExperimentConfig,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "chemolab", version, about = "Keller-Segel chemotaxis laboratory with kinetic sources")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "CHEMOLAB_OUT", default_value = "out")]
    out: PathBuf,

    /// Concurrent runs for `sweep`.
    #[arg(long, global = true)]
    parallel: Option<usize>,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Estimate mu and M and report the boundedness regime.
    Classify,
    /// Simulate and write diagnostics and a verdict.
    Run,
    /// Run once per value of the [sweep] parameter.
    Sweep,
    /// Lower-bound the Gagliardo-Nirenberg constant on the config grid.
    EstimateCgn,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}

fn execute(cli: &Cli) -> chemolab::Result<i32> {
    let Some(path) = &cli.config else {
        return Err(chemolab::Error::Config { line: 0, message: "--config is required".into() });
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed)?;
    }
    match cli.command {
        Command::Classify => {
            let outcome = cmd_classify(&cfg, &cli.out)?;
            print!("{outcome}");
            Ok(0)
        }
        Command::Run => {
            let summary = cmd_run(&cfg, &cli.out)?;
            println!(
                "{} after {} steps (t = {}, {:.1}s); regime {}",
                summary.verdict,
                summary.step_count,
                summary.t_final,
                summary.wall_time,
                summary.report.label()
            );
            Ok(summary.exit_code())
        }
        Command::Sweep => {
            let rows = cmd_sweep(&cfg, &cli.out, cli.parallel)?;
            println!("{}", chemolab::experiment::PHASE_HEADER);
            for r in &rows {
                println!("{}", r.csv_row());
            }
            Ok(0)
        }
        Command::EstimateCgn => {
            let est = cmd_estimate_cgn(&cfg, &cli.out)?;
            println!("C_GN >= {} ({} trials, best {})", est.lower_bound, est.evaluations, est.best);
            Ok(0)
        }
    }
}
