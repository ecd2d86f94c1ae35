//! Logical data-movement accounting.
//!
//! Traffic is counted in field-sized (or per-point) units: a read costs one
//! unit, a write one unit (two under a write-allocate cache, which loads the
//! line before overwriting it) and a read-modify-write two units.

use std::fmt;
use std::ops::Add;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Traffic {
    pub reads: u64,
    pub writes: u64,
    pub read_writes: u64,
}

impl Traffic {
    pub const fn new(reads: u64, writes: u64, read_writes: u64) -> Self {
        Self {
            reads,
            writes,
            read_writes,
        }
    }

    pub fn units(&self, write_allocate: bool) -> u64 {
        let write_cost = if write_allocate { 2 } else { 1 };
        self.reads + write_cost * self.writes + 2 * self.read_writes
    }
}

impl Add for Traffic {
    type Output = Traffic;

    fn add(self, o: Traffic) -> Traffic {
        Traffic::new(
            self.reads + o.reads,
            self.writes + o.writes,
            self.read_writes + o.read_writes,
        )
    }
}

/// Whether intermediate state of a sweep stays in cache between passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryModel {
    Standard,
    Cached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Distd2Decoupling,
    Distd2Substitution,
    Thomas,
    PeriodicThomas,
    Pdd,
    ModifiedThomas,
}

/// Per-point traffic of one solver phase.
pub fn phase_traffic(phase: Phase, model: MemoryModel) -> Traffic {
    use MemoryModel::*;
    use Phase::*;
    match (phase, model) {
        (Distd2Decoupling, Standard) => Traffic::new(1, 1, 1),
        (Distd2Decoupling, Cached) => Traffic::new(1, 1, 0),
        (Distd2Substitution, _) => Traffic::new(0, 0, 1),
        (Thomas, Standard) => Traffic::new(1, 1, 1),
        (Thomas, Cached) => Traffic::new(1, 1, 0),
        (PeriodicThomas, Standard) => Traffic::new(1, 1, 2),
        (PeriodicThomas, Cached) => Traffic::new(1, 1, 0),
        // forward/backward sweep plus one correction pass over the output
        (Pdd | ModifiedThomas, Standard) => Traffic::new(1, 1, 2),
        (Pdd | ModifiedThomas, Cached) => Traffic::new(1, 1, 1),
    }
}

/// Solvers the benchmark harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Thomas,
    PeriodicThomas,
    Pdd,
    ModifiedThomas,
    Distd2,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] = [
        SolverKind::Thomas,
        SolverKind::PeriodicThomas,
        SolverKind::Pdd,
        SolverKind::ModifiedThomas,
        SolverKind::Distd2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Thomas => "thomas",
            SolverKind::PeriodicThomas => "periodic_thomas",
            SolverKind::Pdd => "pdd",
            SolverKind::ModifiedThomas => "modified_thomas",
            SolverKind::Distd2 => "distd2",
        }
    }

    pub fn phases(self) -> &'static [Phase] {
        match self {
            SolverKind::Thomas => &[Phase::Thomas],
            SolverKind::PeriodicThomas => &[Phase::PeriodicThomas],
            SolverKind::Pdd => &[Phase::Pdd],
            SolverKind::ModifiedThomas => &[Phase::ModifiedThomas],
            SolverKind::Distd2 => &[Phase::Distd2Decoupling, Phase::Distd2Substitution],
        }
    }

    /// Per-point traffic summed over the solver's phases.
    pub fn traffic(self, model: MemoryModel) -> Traffic {
        self.phases()
            .iter()
            .fold(Traffic::default(), |t, &p| t + phase_traffic(p, model))
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown solver '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelClass {
    /// Per-direction transport kernel, `i != j`.
    OffDiagonal,
    /// Per-direction transport kernel, `i == j`.
    Diagonal,
    Reorder,
    Accumulate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub class: KernelClass,
    pub calls: u64,
    pub per_call: Traffic,
}

impl LedgerEntry {
    pub fn units(&self, write_allocate: bool) -> u64 {
        self.calls * self.per_call.units(write_allocate)
    }
}

/// Call counts and per-call traffic of the kernels in one evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MovementLedger {
    entries: Vec<LedgerEntry>,
    pub write_allocate: bool,
}

impl MovementLedger {
    pub fn new(write_allocate: bool) -> Self {
        Self {
            entries: Vec::new(),
            write_allocate,
        }
    }

    /// Counts one call. Calls of the same class and traffic share an entry.
    pub fn record(&mut self, class: KernelClass, per_call: Traffic) {
        self.record_calls(class, per_call, 1);
    }

    pub fn record_calls(&mut self, class: KernelClass, per_call: Traffic, calls: u64) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.class == class && e.per_call == per_call)
        {
            Some(e) => e.calls += calls,
            None => self.entries.push(LedgerEntry {
                class,
                calls,
                per_call,
            }),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn calls(&self, class: KernelClass) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.calls)
            .sum()
    }

    pub fn class_units(&self, class: KernelClass) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.units(self.write_allocate))
            .sum()
    }

    pub fn total_units(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.units(self.write_allocate))
            .sum()
    }
}

/// Per-call traffic of the fused kernels, `decoupling + substitution`
/// merged, as run with kernel fusion and no write-allocate.
pub mod fused {
    use super::Traffic;
    pub const OFF_DIAGONAL: Traffic = Traffic::new(2 + 4, 3 + 1, 3);
    pub const DIAGONAL: Traffic = Traffic::new(1 + 4, 3 + 1, 3);
    pub const REORDER: Traffic = Traffic::new(1, 1, 0);
    pub const ACCUMULATE: Traffic = Traffic::new(1, 0, 1);
}

/// Per-call traffic of the cache-blocked kernels on a write-allocate CPU.
pub mod blocked {
    use super::Traffic;
    pub const OFF_DIAGONAL: Traffic = Traffic::new(2 + 3, 3, 1);
    pub const DIAGONAL: Traffic = Traffic::new(1 + 3, 3, 1);
    pub const REORDER: Traffic = Traffic::new(1, 1, 0);
    pub const ACCUMULATE: Traffic = Traffic::new(1, 0, 1);
}

/// Ledger of one transport-equation evaluation on the fused GPU model.
pub fn transport_ledger_gpu() -> MovementLedger {
    let mut l = MovementLedger::new(false);
    l.record_calls(KernelClass::OffDiagonal, fused::OFF_DIAGONAL, 6);
    l.record_calls(KernelClass::Diagonal, fused::DIAGONAL, 3);
    l.record_calls(KernelClass::Reorder, fused::REORDER, 6);
    l.record_calls(KernelClass::Accumulate, fused::ACCUMULATE, 6);
    l
}

/// Ledger of one transport-equation evaluation on the cache-blocked CPU model.
pub fn transport_ledger_cpu() -> MovementLedger {
    let mut l = MovementLedger::new(true);
    l.record_calls(KernelClass::OffDiagonal, blocked::OFF_DIAGONAL, 6);
    l.record_calls(KernelClass::Diagonal, blocked::DIAGONAL, 3);
    l.record_calls(KernelClass::Reorder, blocked::REORDER, 6);
    l.record_calls(KernelClass::Accumulate, blocked::ACCUMULATE, 6);
    l
}

/// Share of the total traffic spent on layout reorders; 0 for an empty ledger.
pub fn reorder_cost_fraction(ledger: &MovementLedger) -> f64 {
    let total = ledger.total_units();
    if total == 0 {
        0.0
    } else {
        ledger.class_units(KernelClass::Reorder) as f64 / total as f64
    }
}
