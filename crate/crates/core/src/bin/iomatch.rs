use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iomatch::experiment::{emit_report, parse_config, run_experiment};
use iomatch::gradcheck::{run_suite, DEFAULT_TOLERANCE};

const EXIT_CONFIG: u8 = 1;
const EXIT_GRADCHECK: u8 = 3;

/// Open-set semi-supervised training and evaluation on feature vectors.
#[derive(Debug, Parser)]
#[command(name = "iomatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured mode on every seed and write CSV, checkpoints and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config file.
        #[arg(long, env = "IOMATCH_OUT")]
        out: Option<PathBuf>,
        /// Comma-separated seeds; overrides the config file.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print the mode-by-metric table from a finished run directory.
    Report {
        #[arg(long, env = "IOMATCH_OUT")]
        out: PathBuf,
    },
    /// Check every autodiff op and loss against finite differences.
    Gradcheck,
}

fn fail(e: iomatch::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match cli.command {
        Command::Run { config, out, seeds } => {
            let mut spec = match parse_config(&config) {
                Ok(spec) => spec,
                Err(e) => return fail(e),
            };
            if let Some(out) = out {
                spec.out_dir = out.clone();
                spec.echo.out_dir = out;
            }
            if let Some(seeds) = seeds {
                if seeds.is_empty() {
                    eprintln!("error: --seeds must list at least one seed");
                    return ExitCode::from(EXIT_CONFIG);
                }
                spec.seeds = seeds.clone();
                spec.echo.seeds = seeds;
            }
            if let Err(e) = run_experiment(&spec) {
                return fail(e);
            }
            match emit_report(&spec.out_dir) {
                Ok(table) => print!("{table}"),
                Err(e) => return fail(e),
            }
            println!("results written to {}", spec.out_dir.display());
            ExitCode::SUCCESS
        }
        Command::Report { out } => match emit_report(&out) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Gradcheck => {
            let results = match run_suite() {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_GRADCHECK);
                }
            };
            let mut failed = 0;
            for r in &results {
                let status = if r.passed(DEFAULT_TOLERANCE) { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed(DEFAULT_TOLERANCE));
                println!("{status:<5}{:<44}{:.3e}", r.name, r.max_rel_error);
            }
            println!("{} cases, {failed} failed, tolerance {DEFAULT_TOLERANCE:e}", results.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_GRADCHECK)
            }
        }
    }
}
