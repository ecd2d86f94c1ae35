//! `tds`: benchmark and validation harness.
//!
//! Exit codes: 0 on success, 2 on a configuration error, 3 when a
//! correctness check fails, 1 for anything else.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tds_core::bench::{
    self, median_per_point, run_accuracy, run_pde, run_scaling, run_solver_bench, BenchConfig,
    BenchRecord,
};
use tds_core::movement::SolverKind;
use tds_core::TdsError;

#[derive(Parser)]
#[command(name = "tds", version, about = "Batched tridiagonal solver benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-solver throughput sweep over line lengths at fixed total points.
    Bench(Common),
    /// Simulated-rank strong scaling of DistD2.
    Scaling(Common),
    /// Order-of-accuracy table for the sixth-order first derivative.
    Accuracy(Common),
    /// Fused transport right-hand side: ledger, reorder share, timing.
    Pde(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 64)]
    nx: usize,
    #[arg(long, default_value_t = 64)]
    ny: usize,
    #[arg(long, default_value_t = 64)]
    nz: usize,
    #[arg(long, default_value_t = 8)]
    sz: usize,
    #[arg(long, default_value_t = 2)]
    ranks: usize,
    /// thomas, periodic_thomas, pdd, modified_thomas or distd2.
    #[arg(long, default_value = "distd2")]
    solver: SolverKind,
    #[arg(long, default_value_t = bench::MIN_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Peak memory bandwidth in GB/s, used for the % of peak column.
    #[arg(long)]
    peak_gbps: Option<f64>,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Periodic lines for pdd and distd2.
    #[arg(long)]
    cyclic: bool,
    /// Pad the transverse size up to a multiple of sz.
    #[arg(long)]
    pad: bool,
}

impl Common {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            extents: [self.nx, self.ny, self.nz],
            sz: self.sz,
            ranks: self.ranks,
            solver: self.solver,
            repeats: self.repeats,
            seed: self.seed,
            peak_gbps: self.peak_gbps,
            cyclic: self.cyclic,
            pad: self.pad,
        }
    }
}

fn output(path: Option<&Path>) -> tds_core::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn summarize(records: &[BenchRecord]) {
    for (solver, n, p, t) in median_per_point(records) {
        eprintln!("{solver:>16} n={n:<5} P={p:<3} {t:.3e} s/point");
    }
}

fn run(cli: Cli) -> tds_core::Result<()> {
    match cli.command {
        Command::Bench(args) => {
            let records = run_solver_bench(&args.config())?;
            summarize(&records);
            bench::write_records(output(args.out.as_deref())?, &records)
        }
        Command::Scaling(args) => {
            let rep = run_scaling(&args.config())?;
            for ((p, eff), (_, rounds)) in rep.efficiency.iter().zip(&rep.rounds) {
                eprintln!(
                    "P={p:<3} efficiency {:.1}%  rounds/solve {rounds}",
                    100.0 * eff
                );
            }
            bench::write_records(output(args.out.as_deref())?, &rep.records)
        }
        Command::Accuracy(args) => {
            let rep = run_accuracy(&args.config())?;
            for r in &rep.rows {
                eprintln!(
                    "n={:<4} thomas {:.3e}  distd2 {:.3e}  |diff| {:.1e}  dropped {:.1e}",
                    r.n, r.thomas_error, r.distd2_error, r.max_abs_diff, r.max_dropped
                );
            }
            match rep.study.slope {
                Some(s) => eprintln!("fitted order {s:.3}"),
                None => eprintln!("fitted order unavailable"),
            }
            bench::write_accuracy(output(args.out.as_deref())?, &rep.rows)?;
            if rep.passed {
                Ok(())
            } else {
                Err(TdsError::CheckFailed(rep.failures.join("; ")))
            }
        }
        Command::Pde(args) => {
            let rep = run_pde(&args.config())?;
            eprintln!(
                "ledger {} units, reorder {:.1}% (cpu model {:.1}%), fused vs reference {:.2e} ({})",
                rep.ledger.total_units(),
                100.0 * rep.reorder_fraction,
                100.0 * rep.cpu_reorder_fraction,
                rep.max_rel_diff,
                if rep.fused_matches_reference { "pass" } else { "FAIL" }
            );
            bench::write_records(output(args.out.as_deref())?, &rep.records)?;
            if rep.fused_matches_reference {
                Ok(())
            } else {
                Err(TdsError::CheckFailed(format!(
                    "fused transport differs from reference by {:e}",
                    rep.max_rel_diff
                )))
            }
        }
    }
}

fn exit_code(e: &TdsError) -> u8 {
    match e {
        TdsError::Config(_) | TdsError::Divisibility { .. } | TdsError::InvalidPartition(_) => 2,
        TdsError::CheckFailed(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
