//! Throughput, scaling, accuracy and PDE benchmark drivers.
//!
//! Timings are wall-clock medians over repeats; correctness outputs are
//! reproducible from the seed. Bandwidth figures use the logical per-point
//! traffic of [`crate::movement`], so "achieved" is logical bytes over time,
//! not measured memory traffic.

use std::io::{Read, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compact::{
    assemble, differentiate, order_of_accuracy, CompactScheme, OrderSolver, OrderStudy, SchemeKind,
};
use crate::distd2::{distd2_solve, Distd2Options, Distd2Plan, StencilCoeffs};
use crate::error::{Result, TdsError};
use crate::layout::{Direction, GroupedField, LayoutDescriptor};
use crate::movement::{
    reorder_cost_fraction, transport_ledger_cpu, MemoryModel, MovementLedger, SolverKind,
};
use crate::pde::{evaluate_transport_rhs, naive_transport_rhs, TransportOperator, VelocityField};
use crate::transport::{spawn_ranks, RankContext, Transport};
use crate::tridiag::{
    modified_thomas_solve, pdd_solve, periodic_thomas_solve_grouped, thomas_solve_grouped,
    RhsBatch, SubdomainPartition, TridiagonalSystem,
};

pub const MIN_REPEATS: usize = 3;
/// Achieved bandwidth above this share of the peak points at a ledger bug.
pub const PEAK_SANITY_PCT: f64 = 110.0;
pub const SWEEP_MIN_N: usize = 32;
pub const SWEEP_MAX_N: usize = 8192;
/// Allowed pointwise gap between DistD2 and periodic Thomas where the
/// decomposition drops nothing above it.
pub const POINTWISE_TOL: f64 = 1e-14;
pub const ORDER_NS: [usize; 4] = [32, 64, 128, 256];
pub const PDE_TOL: f64 = 1e-12;
const BYTES_PER_VALUE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub extents: [usize; 3],
    pub sz: usize,
    pub ranks: usize,
    pub solver: SolverKind,
    pub repeats: usize,
    pub seed: u64,
    /// User-supplied peak memory bandwidth in GB/s.
    pub peak_gbps: Option<f64>,
    pub cyclic: bool,
    pub pad: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            extents: [64, 64, 64],
            sz: 8,
            ranks: 2,
            solver: SolverKind::Distd2,
            repeats: MIN_REPEATS,
            seed: 0,
            peak_gbps: None,
            cyclic: true,
            pad: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < MIN_REPEATS {
            return Err(TdsError::Config(format!(
                "repeats must be at least {MIN_REPEATS}, got {}",
                self.repeats
            )));
        }
        if self.extents.contains(&0) || self.sz == 0 || self.ranks == 0 {
            return Err(TdsError::Config(format!(
                "extents, sz and ranks must be positive: {:?}, sz {}, P {}",
                self.extents, self.sz, self.ranks
            )));
        }
        if let Some(peak) = self.peak_gbps {
            if !(peak.is_finite() && peak > 0.0) {
                return Err(TdsError::Config(format!(
                    "peak bandwidth must be positive, got {peak}"
                )));
            }
        }
        self.layout(self.extents[0])?;
        Ok(())
    }

    /// Whether the benchmarked system is cyclic for this solver.
    fn periodic(&self) -> bool {
        match self.solver {
            SolverKind::Thomas | SolverKind::ModifiedThomas => false,
            SolverKind::PeriodicThomas => true,
            SolverKind::Pdd | SolverKind::Distd2 => self.cyclic,
        }
    }

    /// `n` points per line with the configured transverse size.
    fn layout(&self, n: usize) -> Result<LayoutDescriptor> {
        let [_, ny, nz] = self.extents;
        if self.pad {
            LayoutDescriptor::padded(n, ny, nz, self.sz, Direction::X)
        } else {
            LayoutDescriptor::new(n, ny, nz, self.sz, Direction::X)
        }
    }

    fn total_points(&self) -> usize {
        self.extents.iter().product()
    }
}

/// One timed solve. Column order is the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub solver: String,
    pub n: usize,
    pub sz: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub repeat: usize,
    /// Wall time of one solve over all points.
    pub runtime_s: f64,
    pub points: usize,
    pub bytes_per_point: f64,
    pub achieved_gbps: f64,
    pub pct_peak: Option<f64>,
}

impl BenchRecord {
    pub fn runtime_per_point(&self) -> f64 {
        self.runtime_s / self.points as f64
    }
}

pub const CSV_HEADER: &str =
    "solver,n,sz,P,repeat,runtime_s,points,bytes_per_point,achieved_gbps,pct_peak";

pub fn write_records<W: Write>(out: W, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(TdsError::Io(format!(
            "unexpected CSV header {}",
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|rec| rec.map_err(TdsError::from))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median per-point runtime of each `(solver, n, P)` series, in order of
/// first appearance.
pub fn median_per_point(records: &[BenchRecord]) -> Vec<(String, usize, usize, f64)> {
    let mut keys: Vec<(String, usize, usize)> = Vec::new();
    for r in records {
        let k = (r.solver.clone(), r.n, r.p);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(s, n, p)| {
            let times: Vec<f64> = records
                .iter()
                .filter(|r| r.solver == s && r.n == n && r.p == p)
                .map(BenchRecord::runtime_per_point)
                .collect();
            (s, n, p, median(&times))
        })
        .collect()
}

fn bench_operator(n: usize, periodic: bool) -> Result<(TridiagonalSystem, StencilCoeffs)> {
    let scheme = CompactScheme::new(
        SchemeKind::FirstDerivative,
        std::f64::consts::TAU / n as f64,
    )?;
    assemble(&scheme, n, periodic)
}

fn random_field(layout: LayoutDescriptor, rng: &mut ChaCha8Rng) -> GroupedField {
    let data = (0..layout.len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    GroupedField::from_data(layout, data).expect("length matches layout")
}

fn record(
    cfg: &BenchConfig,
    n: usize,
    sz: usize,
    p: usize,
    repeat: usize,
    runtime_s: f64,
    points: usize,
) -> Result<BenchRecord> {
    let bytes_per_point =
        cfg.solver.traffic(MemoryModel::Standard).units(false) as f64 * BYTES_PER_VALUE;
    let achieved_gbps = bytes_per_point * points as f64 / runtime_s / 1e9;
    let pct_peak = cfg.peak_gbps.map(|peak| 100.0 * achieved_gbps / peak);
    if let Some(pct) = pct_peak {
        if pct > PEAK_SANITY_PCT {
            return Err(TdsError::CheckFailed(format!(
                "{} at n={n}: {pct:.1}% of peak exceeds {PEAK_SANITY_PCT}%",
                cfg.solver
            )));
        }
    }
    Ok(BenchRecord {
        solver: cfg.solver.name().to_string(),
        n,
        sz,
        p,
        repeat,
        runtime_s: runtime_s.max(f64::MIN_POSITIVE),
        points,
        bytes_per_point,
        achieved_gbps,
        pct_peak,
    })
}

/// Times `repeats` DistD2 solves on `p` simulated ranks. Each repeat costs
/// the slowest rank's time; also returns the per-solve neighbour rounds.
fn time_distd2(
    sys: &TridiagonalSystem,
    stencil: &StencilCoeffs,
    u: &GroupedField,
    p: usize,
    repeats: usize,
) -> Result<(Vec<f64>, Vec<u64>)> {
    let part = SubdomainPartition::even(u.layout().n(), p)?;
    let parts = u.split_positions(part.local_sizes())?;
    let per_rank = spawn_ranks(p, sys.is_periodic(), |ctx: &mut RankContext| {
        let plan = Distd2Plan::new(ctx, sys, stencil, &part, &Distd2Options::default())?;
        let local = &parts[ctx.rank()];
        let mut times = Vec::with_capacity(repeats);
        let mut rounds = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let before = ctx.counters().rounds;
            let t0 = Instant::now();
            let out = distd2_solve(ctx, &plan, local)?;
            times.push(t0.elapsed().as_secs_f64());
            rounds.push(ctx.counters().rounds - before);
            std::hint::black_box(out);
        }
        Ok::<_, TdsError>((times, rounds))
    })?;
    let per_rank = per_rank.into_iter().collect::<Result<Vec<_>>>()?;
    let times = (0..repeats)
        .map(|r| per_rank.iter().map(|(t, _)| t[r]).fold(0.0, f64::max))
        .collect();
    let rounds = (0..repeats)
        .map(|r| per_rank.iter().map(|(_, c)| c[r]).max().unwrap_or(0))
        .collect();
    Ok((times, rounds))
}

fn lines_of(u: &GroupedField) -> Result<RhsBatch> {
    let layout = u.layout();
    let mut values = Vec::with_capacity(layout.points());
    for g in 0..layout.n_groups() {
        for lane in 0..layout.sz() {
            if layout
                .packed_to_cartesian(crate::layout::PackedIndex {
                    lane,
                    position: 0,
                    group: g,
                })
                .is_some()
            {
                values.extend(u.line(lane, g));
            }
        }
    }
    RhsBatch::new(layout.n(), values)
}

/// Times one configuration; returns per-repeat runtimes and the `sz` the
/// solver actually ran with.
fn time_solver(
    cfg: &BenchConfig,
    n: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    let layout = cfg.layout(n)?;
    let (sys, stencil) = bench_operator(n, cfg.periodic())?;
    let u = random_field(layout, rng);
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut timed = |f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        for _ in 0..cfg.repeats {
            let t0 = Instant::now();
            f()?;
            times.push(t0.elapsed().as_secs_f64());
        }
        Ok(())
    };
    let sz = match cfg.solver {
        SolverKind::Thomas => {
            timed(&mut || thomas_solve_grouped(&sys, &u).map(|x| drop(std::hint::black_box(x))))?;
            layout.sz()
        }
        SolverKind::PeriodicThomas => {
            timed(&mut || {
                periodic_thomas_solve_grouped(&sys, &u).map(|x| drop(std::hint::black_box(x)))
            })?;
            layout.sz()
        }
        SolverKind::Pdd | SolverKind::ModifiedThomas => {
            let rhs = lines_of(&u)?;
            let part = SubdomainPartition::even(n, p)?;
            if cfg.solver == SolverKind::Pdd {
                timed(&mut || pdd_solve(&sys, &rhs, &part).map(|x| drop(std::hint::black_box(x))))?;
            } else {
                timed(&mut || {
                    modified_thomas_solve(&sys, &rhs, &part).map(|x| drop(std::hint::black_box(x)))
                })?;
            }
            1
        }
        SolverKind::Distd2 => {
            let (t, _) = time_distd2(&sys, &stencil, &u, p, cfg.repeats)?;
            times = t;
            layout.sz()
        }
    };
    Ok((times, sz))
}

fn uses_ranks(solver: SolverKind) -> bool {
    matches!(
        solver,
        SolverKind::Pdd | SolverKind::ModifiedThomas | SolverKind::Distd2
    )
}

/// Line lengths swept at a fixed total point count.
pub fn sweep_lengths(cfg: &BenchConfig) -> Vec<usize> {
    let total = cfg.total_points();
    let p = if uses_ranks(cfg.solver) { cfg.ranks } else { 1 };
    let mut ns = Vec::new();
    let mut n = SWEEP_MIN_N;
    while n <= SWEEP_MAX_N && n <= total {
        let transverse = total / n;
        let fits = total.is_multiple_of(n) && (cfg.pad || transverse.is_multiple_of(cfg.sz));
        if fits && n / p >= crate::distd2::MIN_LOCAL {
            ns.push(n);
        }
        n *= 2;
    }
    ns
}

/// Throughput sweep over line lengths at fixed total points: each `n`
/// runs with `total / n` lines.
pub fn run_solver_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let total = cfg.total_points();
    let p = if uses_ranks(cfg.solver) { cfg.ranks } else { 1 };
    let ns = sweep_lengths(cfg);
    if ns.is_empty() {
        return Err(TdsError::Config(format!(
            "no line length in {SWEEP_MIN_N}..={SWEEP_MAX_N} divides {total} points into groups of {}",
            cfg.sz
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for n in ns {
        let line_cfg = BenchConfig {
            extents: [n, total / n, 1],
            ..cfg.clone()
        };
        let (times, sz) = match time_solver(&line_cfg, n, p, &mut rng) {
            Err(TdsError::TruncationUnsafe { max_dropped, .. }) => {
                log::warn!(
                    "{} skips n={n}: dropped coupling {max_dropped:e}",
                    cfg.solver
                );
                continue;
            }
            other => other?,
        };
        for (repeat, t) in times.into_iter().enumerate() {
            records.push(record(cfg, n, sz, p, repeat, t, total)?);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub records: Vec<BenchRecord>,
    /// `(P, T_1 / (P T_P))` from median runtimes.
    pub efficiency: Vec<(usize, f64)>,
    /// `(P, neighbour rounds per solve)`, the same for every repeat.
    pub rounds: Vec<(usize, u64)>,
}

/// Strong scaling of DistD2 on simulated ranks, fixed global size.
pub fn run_scaling(cfg: &BenchConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let n = cfg.extents[0];
    let layout = cfg.layout(n)?;
    let periodic = cfg.cyclic;
    let (sys, stencil) = bench_operator(n, periodic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = random_field(layout, &mut rng);
    let scaling_cfg = BenchConfig {
        solver: SolverKind::Distd2,
        ..cfg.clone()
    };

    let mut counts = vec![1];
    while counts.last().unwrap() * 2 <= cfg.ranks {
        counts.push(counts.last().unwrap() * 2);
    }
    if *counts.last().unwrap() != cfg.ranks {
        counts.push(cfg.ranks);
    }

    let mut records = Vec::new();
    let mut medians = Vec::new();
    let mut rounds_per_p = Vec::new();
    for p in counts {
        if n / p < crate::distd2::MIN_LOCAL {
            log::warn!(
                "scaling stops at P={p}: fewer than {} rows per rank",
                crate::distd2::MIN_LOCAL
            );
            break;
        }
        let (times, rounds) = time_distd2(&sys, &stencil, &u, p, cfg.repeats)?;
        let expected = if p == 1 { 1 } else { 2 };
        if let Some(bad) = rounds.iter().find(|&&r| r != expected) {
            return Err(TdsError::CheckFailed(format!(
                "P={p}: {bad} neighbour rounds per solve, expected {expected}"
            )));
        }
        rounds_per_p.push((p, rounds[0]));
        medians.push((p, median(&times)));
        for (repeat, t) in times.into_iter().enumerate() {
            records.push(record(
                &scaling_cfg,
                n,
                layout.sz(),
                p,
                repeat,
                t,
                layout.points(),
            )?);
        }
    }
    let t1 = medians[0].1;
    let efficiency = medians
        .iter()
        .map(|&(p, t)| (p, t1 / (p as f64 * t)))
        .collect();
    Ok(ScalingReport {
        records,
        efficiency,
        rounds: rounds_per_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub n: usize,
    pub thomas_error: f64,
    pub distd2_error: f64,
    /// Largest pointwise gap between the two solutions.
    pub max_abs_diff: f64,
    /// Largest coupling the DistD2 decomposition dropped.
    pub max_dropped: f64,
}

#[derive(Debug, Clone)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub study: OrderStudy,
    /// Whether the slope and every truncation-safe pointwise comparison
    /// passed.
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Convergence of the sixth-order first derivative of sin with periodic
/// Thomas, and the DistD2 solution on `cfg.ranks` ranks beside it.
pub fn run_accuracy(cfg: &BenchConfig) -> Result<AccuracyReport> {
    if cfg.ranks == 0 {
        return Err(TdsError::Config("ranks must be positive".into()));
    }
    let study = order_of_accuracy(SchemeKind::FirstDerivative, OrderSolver::Thomas, &ORDER_NS)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&n, &thomas_error) in ORDER_NS.iter().zip(&study.errors) {
        if n / cfg.ranks < crate::distd2::MIN_LOCAL {
            return Err(TdsError::Config(format!(
                "n={n} is too small for {} ranks",
                cfg.ranks
            )));
        }
        let h = std::f64::consts::TAU / n as f64;
        let scheme = CompactScheme::new(SchemeKind::FirstDerivative, h)?;
        let x: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        let u: Vec<f64> = x.iter().map(|x| x.sin()).collect();
        let a = differentiate(&scheme, &u, true, OrderSolver::Thomas)?;
        let b = differentiate(&scheme, &u, true, OrderSolver::Distd2 { ranks: cfg.ranks })?;
        let max_abs_diff = a
            .iter()
            .zip(&b)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        let distd2_error = b
            .iter()
            .zip(&x)
            .fold(0.0f64, |m, (d, x)| m.max((d - x.cos()).abs()));
        let (sys, _) = assemble(&scheme, n, true)?;
        let max_dropped = if cfg.ranks > 1 {
            crate::tridiag::pdd_dropped_couplings_dense(
                &sys,
                &SubdomainPartition::even(n, cfg.ranks)?,
            )?
        } else {
            0.0
        };
        if max_dropped <= POINTWISE_TOL && max_abs_diff > POINTWISE_TOL {
            failures.push(format!(
                "n={n}: DistD2 differs from Thomas by {max_abs_diff:e}"
            ));
        }
        rows.push(AccuracyRow {
            n,
            thomas_error,
            distd2_error,
            max_abs_diff,
            max_dropped,
        });
    }
    match study.slope {
        Some(s) if (s - 6.0).abs() <= 0.2 => {}
        other => failures.push(format!("fitted order {other:?} outside 6.0 +- 0.2")),
    }
    Ok(AccuracyReport {
        rows,
        study,
        passed: failures.is_empty(),
        failures,
    })
}

pub fn write_accuracy<W: Write>(out: W, rows: &[AccuracyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_accuracy<R: Read>(input: R) -> Result<Vec<AccuracyRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(TdsError::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PdeReport {
    pub records: Vec<BenchRecord>,
    /// Ledger of one executed evaluation.
    pub ledger: MovementLedger,
    pub reorder_fraction: f64,
    /// Same kernel schedule on the cache-blocked write-allocate model.
    pub cpu_reorder_fraction: f64,
    pub max_rel_diff: f64,
    pub fused_matches_reference: bool,
}

/// Times the fused transport right-hand side and checks it once against
/// the term-by-term Cartesian reference.
pub fn run_pde(cfg: &BenchConfig) -> Result<PdeReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let fields = VelocityField::from_fn(cfg.extents, cfg.sz, 0.01, |x, y, z| {
        [
            (x + phase[0]).sin() * (y + phase[1]).cos() * z.cos(),
            -(x + phase[2]).cos() * (y + phase[3]).sin() * z.cos(),
            0.3 * (x + y + phase[4]).sin() + 0.1 * (z + phase[5]).cos(),
        ]
    })?;
    let op = TransportOperator::new(fields.layout())?;

    let mut times = Vec::with_capacity(cfg.repeats);
    let mut last = None;
    for _ in 0..cfg.repeats {
        let t0 = Instant::now();
        let eval = evaluate_transport_rhs(&op, &fields)?;
        times.push(t0.elapsed().as_secs_f64());
        last = Some(eval);
    }
    let eval = last.expect("at least one repeat");
    let naive = naive_transport_rhs(&fields)?;
    let scale = naive
        .iter()
        .flat_map(|f| f.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = eval
        .rhs
        .iter()
        .zip(&naive)
        .map(|(a, b)| {
            a.unpack()
                .data()
                .iter()
                .zip(b.data())
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
        })
        .fold(0.0f64, f64::max);
    let max_rel_diff = if scale > 0.0 { diff / scale } else { diff };

    let points = fields.layout().points();
    let bytes_per_point = eval.ledger.total_units() as f64 * BYTES_PER_VALUE;
    let records = times
        .iter()
        .enumerate()
        .map(|(repeat, &t)| {
            let achieved_gbps = bytes_per_point * points as f64 / t / 1e9;
            BenchRecord {
                solver: "pde".into(),
                n: cfg.extents[0],
                sz: cfg.sz,
                p: 1,
                repeat,
                runtime_s: t,
                points,
                bytes_per_point,
                achieved_gbps,
                pct_peak: cfg.peak_gbps.map(|peak| 100.0 * achieved_gbps / peak),
            }
        })
        .collect();
    Ok(PdeReport {
        records,
        reorder_fraction: reorder_cost_fraction(&eval.ledger),
        cpu_reorder_fraction: reorder_cost_fraction(&transport_ledger_cpu()),
        ledger: eval.ledger,
        max_rel_diff,
        fused_matches_reference: max_rel_diff <= PDE_TOL,
    })
}
