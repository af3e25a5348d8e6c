use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ppfl_core::experiment::bench::{run_bench, write_bench_csv, BenchConfig};
use ppfl_core::experiment::selftest::{run_selftest, Fault};
use ppfl_core::experiment::{output_dir, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ppfl", version, about = "Two-server private Byzantine-robust federated learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write `<name>.metrics.csv` to $PPFL_OUTPUT_DIR.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, applied after the file. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the compression benchmark grid.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the invariant suite at toy parameters.
    Selftest {
        /// Corrupt one step of the named module's check.
        #[arg(long, value_name = "MODULE")]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Run { config, overrides, dry_run } => {
            let cfg = ExperimentConfig::load(&config, &overrides)
                .with_context(|| format!("loading {}", config.display()))?;
            cfg.validate()?;
            if dry_run {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let dir = output_dir();
            let (summary, out) = run_experiment(&cfg, &dir)?;
            println!("wrote {}", out.metrics.display());
            if let Some(t) = out.transcripts {
                println!("wrote {}", t.display());
            }
            if let Some(acc) = summary.final_accuracy() {
                println!("final accuracy {:.4}", acc);
            }
        }
        Cmd::Bench { config } => {
            let cfg = match config {
                Some(p) => BenchConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => BenchConfig::default(),
            };
            let rows = run_bench(&cfg)?;
            println!(
                "{:>8} {:>7} {:>12} {:>10} {:>12} {:>12} {:>9} {:>9} {:>9}",
                "ratio", "k", "secnorm_ms", "speedup", "ops", "s0s1_bytes", "overhead", "bytes_r", "table_r"
            );
            for r in &rows {
                println!(
                    "{:>8} {:>7} {:>12.1} {:>10.2} {:>12} {:>12} {:>8.3}% {:>9.4} {:>9.4}",
                    r.ratio,
                    r.k,
                    r.sec_norm_ms,
                    r.sec_norm_speedup,
                    format!("{}{}", r.sec_norm_exps, if r.ops_match() { "" } else { "!" }),
                    r.s0s1_bytes,
                    100.0 * r.framing_overhead,
                    r.bytes_ratio,
                    r.table_ratio
                );
            }
            let dir = output_dir();
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.bench.csv", cfg.name));
            write_bench_csv(&rows, &path)?;
            println!("wrote {}", path.display());
        }
        Cmd::Selftest { inject_fault } => {
            let fault = inject_fault.map(|m| m.parse::<Fault>()).transpose()?;
            let report = run_selftest(fault);
            println!("{report}");
            if !report.passed() {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
