use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clockens::bench;
use clockens::experiment;
use clockens::{load_config, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "clockens", version, about = "Clock-ensemble time-scale experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write trajectory.csv
    Simulate(Common),
    /// Run the configured algorithms; write series.csv, summary.csv and ADEV/band tables
    Compare(Common),
    /// Overlapping Allan deviation of the time-scale errors
    Allan(Common),
    /// Hypothesis report and asymptotic residual-variance criterion
    Theory(Common),
    /// Runtime of both algorithms against the number of clocks
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    paths: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Clock counts to time
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,20")]
    m: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    /// Steps per timed run
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut exp = load_config(&self.config)?;
        if let Some(s) = self.seed {
            exp.seed = s;
        }
        if let Some(p) = self.paths {
            if p == 0 {
                return Err(clockens::Error::Usage("--paths must be at least 1".into()));
            }
            exp.paths = p;
        }
        let out = self
            .out
            .clone()
            .or_else(|| exp.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((exp, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let (exp, out) = c.load()?;
            experiment::simulate(&exp, &out)?;
            println!("wrote {}", out.join("trajectory.csv").display());
        }
        Command::Compare(c) => {
            let (exp, out) = c.load()?;
            let summary = experiment::run_experiment(&exp, &out)?;
            for (section, name, value) in summary.rows.iter().filter(|r| r.0 != "adev") {
                println!("{section:<11} {name:<20} {value}");
            }
            println!("wrote {}", out.display());
        }
        Command::Allan(c) => {
            let (exp, out) = c.load()?;
            for (name, curve) in experiment::allan(&exp, &out)? {
                println!("{name}");
                for (t, a) in curve.taus.iter().zip(&curve.adev) {
                    println!("  {t:>12.4e}  {a:.4e}");
                }
            }
        }
        Command::Theory(c) => {
            let (exp, out) = c.load()?;
            for (section, name, value) in &experiment::theory(&exp, &out)?.rows {
                println!("{section:<11} {name:<20} {value}");
            }
        }
        Command::Bench(b) => {
            std::fs::create_dir_all(&b.out).map_err(|source| clockens::Error::Io {
                path: b.out.clone(),
                source,
            })?;
            let rows = bench::bench_runtime(&b.m, b.repeats, b.horizon)?;
            bench::write_bench(&b.out.join("bench.csv"), &rows)?;
            println!("{:>4} {:>14} {:>14}", "m", "jst_mean_s", "ckf_mean_s");
            for r in &rows {
                println!("{:>4} {:>14.4e} {:>14.4e}", r.m, r.jst_mean, r.ckf_mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
