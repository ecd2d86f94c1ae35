//! Distributed diagonally dominant tridiagonal solver.
//!
//! Each rank reduces its subdomain so that every local row depends only on
//! the subdomain's own first and last unknowns, plus one coupling across
//! each edge. Couplings that reach two subdomains away are dropped; for
//! diagonally dominant operators they decay geometrically with the local
//! size. What remains is an independent 2x2 system per internal boundary,
//! solved redundantly by both neighbours after one exchange of edge rows.
//!
//! A solve costs two neighbour rounds regardless of the rank count: one
//! halo exchange feeding the fused right-hand-side construction, and one
//! boundary exchange. The boundary coefficients never change between
//! solves, so they are traded once when a [`Distd2Plan`] is built.

use rayon::prelude::*;

use crate::error::{Result, TdsError};
use crate::layout::{GroupedField, LayoutDescriptor};
use crate::transport::{
    exchange_boundary, exchange_coefficients, exchange_halo, gather_field, spawn_ranks, Counters,
    HaloField, RankContext, Transport,
};
use crate::tridiag::{LocalBands, SubdomainPartition, TridiagonalSystem, DEFAULT_PIVOT_FLOOR};

/// Ghost rows needed on each side by a five-point right-hand side.
pub const HALO_DEPTH: usize = 2;
/// Boundary pairs with a smaller determinant are rejected.
pub const PAIR_DET_FLOOR: f64 = 1e-12;
/// Local subdomains must hold at least this many rows.
pub const MIN_LOCAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubdomainPosition {
    First,
    Interior,
    Last,
    /// The only subdomain.
    Single,
}

impl SubdomainPosition {
    pub fn of(rank: usize, size: usize) -> Self {
        match (rank, size) {
            (_, 1) => Self::Single,
            (0, _) => Self::First,
            (r, p) if r + 1 == p => Self::Last,
            _ => Self::Interior,
        }
    }

    fn opens_low(self) -> bool {
        matches!(self, Self::First | Self::Single)
    }

    fn opens_high(self) -> bool {
        matches!(self, Self::Last | Self::Single)
    }
}

/// What to do with rows that are not strictly diagonally dominant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DominancePolicy {
    #[default]
    Reject,
    Warn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distd2Options {
    pub pivot_floor: f64,
    pub dominance: DominancePolicy,
}

impl Default for Distd2Options {
    fn default() -> Self {
        Self {
            pivot_floor: DEFAULT_PIVOT_FLOOR,
            dominance: DominancePolicy::Reject,
        }
    }
}

/// Per-rank elimination coefficients. After preprocessing, row `j` of the
/// local system reads
///
/// * `j = 0`: `u_0 + s_a[0] u_prev_last + s_c[0] u_{n-1}`
/// * `0 < j < n-1`: `u_j + s_a[j] u_0 + s_c[j] u_{n-1}`
/// * `j = n-1`: `u_{n-1} + s_a[n-1] u_0 + s_c[n-1] u_next_first`
///
/// with right-hand sides produced by [`decouple_unfused`]. `s_c[0]` and
/// `s_a[n-1]` are the dropped couplings when there is more than one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct DistCoeffs {
    pub s_a: Vec<f64>,
    pub s_c: Vec<f64>,
    pub w: Vec<f64>,
    pub f: Vec<f64>,
    pub r: Vec<f64>,
    pub n_loc: usize,
    pub cyclic_global: bool,
    pub position: SubdomainPosition,
}

impl DistCoeffs {
    /// Largest coupling that the 2x2 boundary systems ignore.
    pub fn dropped_coupling(&self) -> f64 {
        self.s_c[0].abs().max(self.s_a[self.n_loc - 1].abs())
    }

    /// Coefficients of the 2x2 system a lone rank forms with itself, where
    /// nothing is dropped: `(last row on u_0, first row on u_{n-1})`.
    fn self_pair(&self) -> (f64, f64) {
        let n = self.n_loc;
        if self.cyclic_global {
            (self.s_a[n - 1] + self.s_c[n - 1], self.s_c[0] + self.s_a[0])
        } else {
            (self.s_a[n - 1], self.s_c[0])
        }
    }
}

fn check_pivot(row: usize, pivot: f64, floor: f64) -> Result<()> {
    if !pivot.is_finite() || pivot.abs() < floor {
        Err(TdsError::SingularPivot { row, pivot, floor })
    } else {
        Ok(())
    }
}

/// Builds the elimination coefficients for one subdomain.
pub fn preprocess(
    bands: &LocalBands,
    position: SubdomainPosition,
    cyclic: bool,
    options: &Distd2Options,
) -> Result<DistCoeffs> {
    let n = bands.len();
    if n < MIN_LOCAL || bands.lower.len() != n || bands.upper.len() != n {
        return Err(TdsError::InvalidSystem(format!(
            "local bands need {MIN_LOCAL} or more rows of equal length, got {}/{}/{}",
            bands.lower.len(),
            n,
            bands.upper.len()
        )));
    }
    let mut a = bands.lower.clone();
    let b = &bands.diag;
    let mut c = bands.upper.clone();
    if !cyclic && position.opens_low() {
        a[0] = 0.0;
    }
    if !cyclic && position.opens_high() {
        c[n - 1] = 0.0;
    }
    for j in 0..n {
        let margin = b[j].abs() - a[j].abs() - c[j].abs();
        if margin <= 0.0 {
            match options.dominance {
                DominancePolicy::Reject => return Err(TdsError::NotDominant { row: j, margin }),
                DominancePolicy::Warn => {
                    log::warn!("local row {j} is not diagonally dominant (margin {margin:e})")
                }
            }
        }
    }

    let floor = options.pivot_floor;
    let mut s_a = vec![0.0; n];
    let mut s_c = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut f = vec![1.0; n];
    let mut r = vec![0.0; n];

    for j in 0..2 {
        check_pivot(j, b[j], floor)?;
        r[j] = 1.0 / b[j];
        s_a[j] = a[j] / b[j];
        s_c[j] = c[j] / b[j];
        w[j] = s_c[j];
    }
    for j in 2..n {
        let pivot = b[j] - a[j] * s_c[j - 1];
        check_pivot(j, pivot, floor)?;
        f[j] = 1.0 / pivot;
        r[j] = a[j];
        s_a[j] = -f[j] * a[j] * s_a[j - 1];
        s_c[j] = f[j] * c[j];
    }
    for j in (1..n - 2).rev() {
        w[j] = s_c[j];
        s_a[j] -= s_c[j] * s_a[j + 1];
        s_c[j] = -s_c[j] * s_c[j + 1];
    }
    let pivot = 1.0 - s_c[0] * s_a[1];
    check_pivot(0, pivot, floor)?;
    f[0] = 1.0 / pivot;
    s_a[0] *= f[0];
    s_c[0] = -f[0] * s_c[0] * s_c[1];

    Ok(DistCoeffs {
        s_a,
        s_c,
        w,
        f,
        r,
        n_loc: n,
        cyclic_global: cyclic,
        position,
    })
}

/// Five-point right-hand-side weights, one row per line position; entry
/// `k` multiplies `u[j + k - 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilCoeffs {
    pub rows: Vec<[f64; 5]>,
    pub halo_depth: usize,
}

impl StencilCoeffs {
    pub fn new(rows: Vec<[f64; 5]>) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TdsError::InvalidSystem("non-finite stencil weight".into()));
        }
        Ok(Self {
            rows,
            halo_depth: HALO_DEPTH,
        })
    }

    /// Same weights on every row.
    pub fn uniform(n: usize, weights: [f64; 5]) -> Result<Self> {
        Self::new(vec![weights; n])
    }

    /// Right-hand side equal to the input field.
    pub fn identity(n: usize) -> Self {
        Self {
            rows: vec![[0.0, 0.0, 1.0, 0.0, 0.0]; n],
            halo_depth: HALO_DEPTH,
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn slice(&self, offset: usize, len: usize) -> Result<Self> {
        let rows = self
            .rows
            .get(offset..offset + len)
            .ok_or_else(|| {
                TdsError::InvalidPartition(format!(
                    "stencil rows {offset}..{} outside {}",
                    offset + len,
                    self.n()
                ))
            })?
            .to_vec();
        Ok(Self {
            rows,
            halo_depth: self.halo_depth,
        })
    }
}

/// `out[l] = sum_k weights[k] * window[k][l]`, accumulated left to right.
pub fn build_rhs_row(window: [&[f64]; 5], weights: &[f64; 5], out: &mut [f64]) {
    for (l, o) in out.iter_mut().enumerate() {
        *o = weights[0] * window[0][l]
            + weights[1] * window[1][l]
            + weights[2] * window[2][l]
            + weights[3] * window[3][l]
            + weights[4] * window[4][l];
    }
}

fn stencil_window<'a>(halo: &'a HaloField<'_>, g: usize, j: usize) -> [&'a [f64]; 5] {
    let j = j as isize;
    [
        halo.row(g, j - 2),
        halo.row(g, j - 1),
        halo.row(g, j),
        halo.row(g, j + 1),
        halo.row(g, j + 2),
    ]
}

fn check_stencil(halo: &HaloField<'_>, coeffs: &DistCoeffs, stencil: &StencilCoeffs) -> Result<()> {
    let n = halo.interior.layout().n();
    if stencil.n() != n || coeffs.n_loc != n {
        return Err(TdsError::ShapeMismatch(format!(
            "field has {n} positions, stencil {} rows, coefficients {}",
            stencil.n(),
            coeffs.n_loc
        )));
    }
    if halo.depth < stencil.halo_depth {
        return Err(TdsError::ShapeMismatch(format!(
            "halo depth {} below stencil reach {}",
            halo.depth, stencil.halo_depth
        )));
    }
    Ok(())
}

/// Right-hand side of every line, built from a halo-extended field.
pub fn build_rhs(halo: &HaloField<'_>, stencil: &StencilCoeffs) -> Result<GroupedField> {
    let layout = *halo.interior.layout();
    if stencil.n() != layout.n() || halo.depth < stencil.halo_depth {
        return Err(TdsError::ShapeMismatch(format!(
            "stencil of {} rows and reach {} on {} positions with halo {}",
            stencil.n(),
            stencil.halo_depth,
            layout.n(),
            halo.depth
        )));
    }
    let sz = layout.sz();
    let mut out = GroupedField::zeros(layout);
    let block = out.group_len();
    out.data_mut()
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(g, group)| {
            for (j, row) in group.chunks_exact_mut(sz).enumerate() {
                build_rhs_row(stencil_window(halo, g, j), &stencil.rows[j], row);
            }
        });
    Ok(out)
}

/// Forward and backward sweeps over one group. `fill(j, row)` writes the
/// right-hand side of position `j` just before it is consumed, which is
/// where the fused and unfused paths differ; the arithmetic is shared.
fn sweep_group(
    c: &DistCoeffs,
    sz: usize,
    out: &mut [f64],
    mut fill: impl FnMut(usize, &mut [f64]),
) {
    let n = c.n_loc;
    for j in 0..n {
        let (done, rest) = out.split_at_mut(j * sz);
        let row = &mut rest[..sz];
        fill(j, row);
        if j < 2 {
            let r = c.r[j];
            for v in row.iter_mut() {
                *v *= r;
            }
        } else {
            let prev = &done[(j - 1) * sz..];
            let (f, r) = (c.f[j], c.r[j]);
            for (v, p) in row.iter_mut().zip(prev) {
                *v = f * (*v - r * p);
            }
        }
    }
    for j in (1..n - 2).rev() {
        let (lo, hi) = out.split_at_mut((j + 1) * sz);
        let w = c.w[j];
        for (v, next) in lo[j * sz..].iter_mut().zip(&hi[..sz]) {
            *v -= w * next;
        }
    }
    let (lo, hi) = out.split_at_mut(sz);
    let (f, w) = (c.f[0], c.w[0]);
    for (v, next) in lo.iter_mut().zip(&hi[..sz]) {
        *v = f * (*v - w * next);
    }
}

/// Builds the right-hand side and runs the decoupling sweeps in a single
/// pass over each group, all lanes in lockstep.
pub fn decouple_fused(
    halo: &HaloField<'_>,
    coeffs: &DistCoeffs,
    stencil: &StencilCoeffs,
) -> Result<GroupedField> {
    check_stencil(halo, coeffs, stencil)?;
    decouple_rows(halo.interior.layout(), coeffs, |g, j, row| {
        build_rhs_row(stencil_window(halo, g, j), &stencil.rows[j], row)
    })
}

/// Decoupling sweeps with the right-hand side of group `g`, position `j`
/// written by `fill(g, j, row)` just before the row is consumed.
pub fn decouple_rows<F>(
    layout: &LayoutDescriptor,
    coeffs: &DistCoeffs,
    fill: F,
) -> Result<GroupedField>
where
    F: Fn(usize, usize, &mut [f64]) + Sync,
{
    if layout.n() != coeffs.n_loc {
        return Err(TdsError::ShapeMismatch(format!(
            "layout has {} positions, coefficients {}",
            layout.n(),
            coeffs.n_loc
        )));
    }
    let sz = layout.sz();
    let mut out = GroupedField::zeros(*layout);
    let block = out.group_len();
    out.data_mut()
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(g, group)| sweep_group(coeffs, sz, group, |j, row| fill(g, j, row)));
    Ok(out)
}

/// The decoupling sweeps on an already assembled right-hand side.
pub fn decouple_unfused(d_rhs: &GroupedField, coeffs: &DistCoeffs) -> Result<GroupedField> {
    let layout = *d_rhs.layout();
    if layout.n() != coeffs.n_loc {
        return Err(TdsError::ShapeMismatch(format!(
            "field has {} positions, coefficients {}",
            layout.n(),
            coeffs.n_loc
        )));
    }
    let sz = layout.sz();
    let mut out = GroupedField::zeros(layout);
    let block = out.group_len();
    out.data_mut()
        .par_chunks_mut(block)
        .zip(d_rhs.data().par_chunks(block))
        .for_each(|(group, src)| {
            sweep_group(coeffs, sz, group, |j, row| {
                row.copy_from_slice(&src[j * sz..(j + 1) * sz])
            });
        });
    Ok(out)
}

/// The 2x2 system across one boundary:
/// `u_last + s_c_last u_first = d_last` on the lower rank and
/// `u_first + s_a_first u_last = d_first` on the upper one.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub d_last_local: Vec<f64>,
    pub d_first_remote: Vec<f64>,
    pub s_c_last: f64,
    pub s_a_first_remote: f64,
}

/// Cramer solve of a [`BoundaryPair`], returning `(u_last, u_first)` per lane.
pub fn solve_boundary_pair(pair: &BoundaryPair) -> Result<(Vec<f64>, Vec<f64>)> {
    if pair.d_last_local.len() != pair.d_first_remote.len() {
        return Err(TdsError::ShapeMismatch(format!(
            "boundary pair with {} and {} lanes",
            pair.d_last_local.len(),
            pair.d_first_remote.len()
        )));
    }
    let (sc, sa) = (pair.s_c_last, pair.s_a_first_remote);
    let det = 1.0 - sc * sa;
    if !det.is_finite() || det.abs() < PAIR_DET_FLOOR {
        return Err(TdsError::SingularPair { det });
    }
    let (last, first) = pair
        .d_last_local
        .iter()
        .zip(&pair.d_first_remote)
        .map(|(&dl, &df)| ((dl - sc * df) / det, (df - sa * dl) / det))
        .unzip();
    Ok((last, first))
}

/// Recovers every unknown from the decoupled rows once the subdomain's own
/// first and last unknowns are known. `u_start` and `u_end` hold one value
/// per line, indexed `group * sz + lane`.
pub fn substitute(
    d: &mut GroupedField,
    coeffs: &DistCoeffs,
    u_start: &[f64],
    u_end: &[f64],
) -> Result<()> {
    let layout = *d.layout();
    let (n, sz) = (layout.n(), layout.sz());
    let lines = sz * layout.n_groups();
    if n != coeffs.n_loc || u_start.len() != lines || u_end.len() != lines {
        return Err(TdsError::ShapeMismatch(format!(
            "substitute on {n} positions x {lines} lines with {} coefficients and {}/{} edge values",
            coeffs.n_loc,
            u_start.len(),
            u_end.len()
        )));
    }
    let block = d.group_len();
    d.data_mut()
        .par_chunks_mut(block)
        .zip(u_start.par_chunks(sz).zip(u_end.par_chunks(sz)))
        .for_each(|(group, (us, ue))| {
            for j in 1..n - 1 {
                let (sa, sc) = (coeffs.s_a[j], coeffs.s_c[j]);
                for ((v, s), e) in group[j * sz..(j + 1) * sz].iter_mut().zip(us).zip(ue) {
                    *v = *v - sa * s - sc * e;
                }
            }
            group[..sz].copy_from_slice(us);
            group[(n - 1) * sz..].copy_from_slice(ue);
        });
    Ok(())
}

/// First and last row of every line, each laid out `group * sz + lane`.
fn edge_rows(d: &GroupedField) -> (Vec<f64>, Vec<f64>) {
    let layout = d.layout();
    let (n, sz) = (layout.n(), layout.sz());
    let mut first = Vec::with_capacity(sz * layout.n_groups());
    let mut last = Vec::with_capacity(sz * layout.n_groups());
    for g in 0..layout.n_groups() {
        let group = d.group(g);
        first.extend_from_slice(&group[..sz]);
        last.extend_from_slice(&group[(n - 1) * sz..]);
    }
    (first, last)
}

/// Finishes a decoupled field owned entirely by one rank: the 2x2 system
/// linking its first and last rows is exact, so no message is needed.
pub fn complete_single_rank(d: &mut GroupedField, coeffs: &DistCoeffs) -> Result<()> {
    let (first, last) = edge_rows(d);
    let (s_c_last, s_a_first_remote) = coeffs.self_pair();
    let (u_last, u_first) = solve_boundary_pair(&BoundaryPair {
        d_last_local: last,
        d_first_remote: first,
        s_c_last,
        s_a_first_remote,
    })?;
    substitute(d, coeffs, &u_first, &u_last)
}

/// Everything a rank needs to solve repeatedly with one operator.
#[derive(Debug, Clone)]
pub struct Distd2Plan {
    pub coeffs: DistCoeffs,
    pub stencil: StencilCoeffs,
    /// `s_c` of the previous rank's last row, if a boundary pair exists there.
    pub prev_s_c_last: Option<f64>,
    /// `s_a` of the next rank's first row, if a boundary pair exists there.
    pub next_s_a_first: Option<f64>,
}

impl Distd2Plan {
    /// Preprocesses this rank's rows of `sys` and trades the boundary
    /// coefficients with the neighbours. Collective: every rank must call it.
    pub fn new<T: Transport>(
        ctx: &mut T,
        sys: &TridiagonalSystem,
        stencil: &StencilCoeffs,
        partition: &SubdomainPartition,
        options: &Distd2Options,
    ) -> Result<Self> {
        let (rank, size) = (ctx.rank(), ctx.size());
        if partition.rank_count() != size || partition.n() != sys.n() || stencil.n() != sys.n() {
            return Err(TdsError::InvalidPartition(format!(
                "{} subdomains covering {} rows for {size} ranks, system {} and stencil {}",
                partition.rank_count(),
                partition.n(),
                sys.n(),
                stencil.n()
            )));
        }
        if ctx.is_cyclic() != sys.is_periodic() {
            return Err(TdsError::Config(format!(
                "rank topology cyclic = {} but system periodic = {}",
                ctx.is_cyclic(),
                sys.is_periodic()
            )));
        }
        let offset = partition.offsets()[rank];
        let len = partition.local_sizes()[rank];
        let bands = sys.local_bands(offset, len)?;
        let position = SubdomainPosition::of(rank, size);
        let coeffs = preprocess(&bands, position, sys.is_periodic(), options)?;
        let stencil = stencil.slice(offset, len)?;

        let mut plan = Self {
            coeffs,
            stencil,
            prev_s_c_last: None,
            next_s_a_first: None,
        };
        if size > 1 {
            ctx.begin_epoch();
            let c = &plan.coeffs;
            let edges = exchange_coefficients(ctx, &[c.s_a[0]], &[c.s_c[c.n_loc - 1]])?;
            plan.prev_s_c_last = edges.from_prev.map(|v| v[0]);
            plan.next_s_a_first = edges.from_next.map(|v| v[0]);
        }
        Ok(plan)
    }

    /// Whether this rank owns the pair on its high side. Summed over ranks,
    /// this counts every boundary pair exactly once.
    pub fn owns_high_pair(&self) -> bool {
        self.next_s_a_first.is_some()
    }
}

/// One distributed solve: halo exchange, fused decoupling, boundary
/// exchange, 2x2 solves and substitution. `u` is this rank's slice of the
/// input field; the result is the matching slice of the solution.
pub fn distd2_solve<T: Transport>(
    ctx: &mut T,
    plan: &Distd2Plan,
    u: &GroupedField,
) -> Result<GroupedField> {
    ctx.begin_epoch();
    let halo = exchange_halo(ctx, u, plan.stencil.halo_depth)?;
    let mut d = decouple_fused(&halo, &plan.coeffs, &plan.stencil)?;
    let c = &plan.coeffs;
    if ctx.size() == 1 {
        complete_single_rank(&mut d, c)?;
        return Ok(d);
    }
    let (first, last) = edge_rows(&d);
    let edges = exchange_boundary(ctx, &first, &last)?;
    let u_start = match (edges.from_prev, plan.prev_s_c_last) {
        (Some(prev_last), Some(s_c_last)) => {
            solve_boundary_pair(&BoundaryPair {
                d_last_local: prev_last,
                d_first_remote: first,
                s_c_last,
                s_a_first_remote: c.s_a[0],
            })?
            .1
        }
        _ => first,
    };
    let u_end = match (edges.from_next, plan.next_s_a_first) {
        (Some(next_first), Some(s_a_first_remote)) => {
            solve_boundary_pair(&BoundaryPair {
                d_last_local: last,
                d_first_remote: next_first,
                s_c_last: c.s_c[c.n_loc - 1],
                s_a_first_remote,
            })?
            .0
        }
        _ => last,
    };
    substitute(&mut d, c, &u_start, &u_end)?;
    Ok(d)
}

/// Outcome of [`solve_distributed`].
#[derive(Debug, Clone)]
pub struct DistributedRun {
    pub solution: GroupedField,
    /// Neighbour counters accumulated during the solve alone, per rank.
    pub solve_counters: Vec<Counters>,
    /// Number of 2x2 boundary systems in the decomposition.
    pub boundary_pairs: usize,
    /// Largest coupling dropped by any rank.
    pub max_dropped: f64,
}

/// Splits `u` along its lines, runs one [`distd2_solve`] on `partition`'s
/// ranks and gathers the solution.
pub fn solve_distributed(
    sys: &TridiagonalSystem,
    stencil: &StencilCoeffs,
    u: &GroupedField,
    partition: &SubdomainPartition,
    options: &Distd2Options,
) -> Result<DistributedRun> {
    let parts = u.split_positions(partition.local_sizes())?;
    let p = partition.rank_count();
    let results = spawn_ranks(p, sys.is_periodic(), |ctx: &mut RankContext| {
        let plan = Distd2Plan::new(ctx, sys, stencil, partition, options)?;
        let before = ctx.counters();
        let local = distd2_solve(ctx, &plan, &parts[ctx.rank()])?;
        let after = ctx.counters();
        let counters = Counters {
            messages_sent: after.messages_sent - before.messages_sent,
            bytes_sent: after.bytes_sent - before.bytes_sent,
            rounds: after.rounds - before.rounds,
        };
        let gathered = gather_field(ctx, &local)?;
        let owned = usize::from(plan.owns_high_pair() || (p == 1 && sys.is_periodic()));
        Ok::<_, TdsError>((gathered, counters, owned, plan.coeffs.dropped_coupling()))
    })?;
    let mut solution = None;
    let mut solve_counters = Vec::with_capacity(p);
    let mut boundary_pairs = 0;
    let mut max_dropped = 0.0f64;
    for r in results {
        let (gathered, counters, owned, dropped) = r?;
        if gathered.is_some() {
            solution = gathered;
        }
        solve_counters.push(counters);
        boundary_pairs += owned;
        if p > 1 {
            max_dropped = max_dropped.max(dropped);
        }
    }
    Ok(DistributedRun {
        solution: solution.expect("rank 0 gathers the solution"),
        solve_counters,
        boundary_pairs,
        max_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Direction, LayoutDescriptor};
    use crate::transport::RankContext;
    use crate::tridiag::{dense_solve_oracle, thomas_solve, RhsBatch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn compact_weights(h: f64) -> [f64; 5] {
        let (a, b) = (14.0 / 9.0, 1.0 / 9.0);
        [
            -b / (4.0 * h),
            -a / (2.0 * h),
            0.0,
            a / (2.0 * h),
            b / (4.0 * h),
        ]
    }

    fn random_dominant(n: usize, periodic: bool, rng: &mut ChaCha8Rng) -> TridiagonalSystem {
        let a = (0..n).map(|_| rng.gen_range(-0.25..0.25)).collect();
        let c = (0..n).map(|_| rng.gen_range(-0.25..0.25)).collect();
        let b = (0..n)
            .map(|_| {
                let m: f64 = rng.gen_range(1.0..2.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        TridiagonalSystem::new(a, b, c, periodic).unwrap()
    }

    fn random_field(layout: LayoutDescriptor, rng: &mut ChaCha8Rng) -> GroupedField {
        let data = (0..layout.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        GroupedField::from_data(layout, data).unwrap()
    }

    /// Solves every line of `rhs` with the dense oracle.
    fn oracle_lines(sys: &TridiagonalSystem, rhs: &GroupedField) -> GroupedField {
        let layout = *rhs.layout();
        let mut out = GroupedField::zeros(layout);
        let sz = layout.sz();
        for g in 0..layout.n_groups() {
            for lane in 0..sz {
                let x =
                    dense_solve_oracle(sys, &RhsBatch::single(rhs.line(lane, g)).unwrap()).unwrap();
                for (j, v) in x.values().iter().enumerate() {
                    out.data_mut()[lane + sz * (j + layout.n() * g)] = *v;
                }
            }
        }
        out
    }

    #[test]
    fn identity_bands_give_trivial_coefficients() {
        let bands = LocalBands {
            lower: vec![0.0; 6],
            diag: vec![1.0; 6],
            upper: vec![0.0; 6],
        };
        let c = preprocess(
            &bands,
            SubdomainPosition::Interior,
            true,
            &Distd2Options::default(),
        )
        .unwrap();
        assert!(c.s_a.iter().chain(&c.s_c).chain(&c.w).all(|v| *v == 0.0));
        assert!(c.f.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn preprocess_rejects_small_and_non_dominant() {
        let small = LocalBands {
            lower: vec![0.1; 3],
            diag: vec![1.0; 3],
            upper: vec![0.1; 3],
        };
        let opts = Distd2Options::default();
        assert!(matches!(
            preprocess(&small, SubdomainPosition::Interior, false, &opts),
            Err(TdsError::InvalidSystem(_))
        ));
        let weak = LocalBands {
            lower: vec![0.6; 5],
            diag: vec![1.0; 5],
            upper: vec![0.6; 5],
        };
        assert!(matches!(
            preprocess(&weak, SubdomainPosition::Interior, false, &opts),
            Err(TdsError::NotDominant { row: 0, .. })
        ));
        let warn = Distd2Options {
            dominance: DominancePolicy::Warn,
            ..opts
        };
        assert!(preprocess(&weak, SubdomainPosition::Interior, false, &warn).is_ok());
    }

    #[test]
    fn last_row_coupling_vanishes_for_large_subdomains() {
        let sys = TridiagonalSystem::constant(128, 1.0 / 3.0, 1.0, 1.0 / 3.0, true).unwrap();
        let bands = sys.local_bands(0, 64).unwrap();
        let c = preprocess(
            &bands,
            SubdomainPosition::Interior,
            true,
            &Distd2Options::default(),
        )
        .unwrap();
        assert!(c.s_a[63].abs() < 1e-15, "{}", c.s_a[63]);
        assert!(c.s_c[0].abs() < 1e-15, "{}", c.s_c[0]);
    }

    #[test]
    fn rhs_row_examples() {
        let h = 0.1;
        let central = [0.0, -1.0 / (2.0 * h), 0.0, 1.0 / (2.0 * h), 0.0];
        let rows: Vec<Vec<f64>> = (0..5).map(|k| vec![3.0 * k as f64 * h + 1.0; 2]).collect();
        let window = [&rows[0][..], &rows[1], &rows[2], &rows[3], &rows[4]];
        let mut out = [0.0; 2];
        build_rhs_row(window, &central, &mut out);
        assert!((out[0] - 3.0).abs() < 1e-12);
        build_rhs_row(window, &[0.0; 5], &mut out);
        assert_eq!(out, [0.0, 0.0]);

        let n = 64;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let u = |j: isize| (j as f64 * h).sin();
        let j = 10isize;
        let vals: Vec<[f64; 1]> = (-2..=2).map(|k| [u(j + k)]).collect();
        let window = [&vals[0][..], &vals[1], &vals[2], &vals[3], &vals[4]];
        build_rhs_row(window, &compact_weights(h), &mut out[..1]);
        let direct = 14.0 / 9.0 * (u(j + 1) - u(j - 1)) / (2.0 * h)
            + 1.0 / 9.0 * (u(j + 2) - u(j - 2)) / (4.0 * h);
        assert!((out[0] - direct).abs() < 1e-15);
    }

    #[test]
    fn fused_equals_unfused_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = random_dominant(16, true, &mut rng);
        let layout = LayoutDescriptor::new(16, 4, 2, 4, Direction::X).unwrap();
        let u = random_field(layout, &mut rng);
        let stencil = StencilCoeffs::new(
            (0..16)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let coeffs = preprocess(
            &sys.local_bands(0, 16).unwrap(),
            SubdomainPosition::Single,
            true,
            &Distd2Options::default(),
        )
        .unwrap();
        let mut ctx = RankContext::solo(true);
        let halo = exchange_halo(&mut ctx, &u, 2).unwrap();
        let fused = decouple_fused(&halo, &coeffs, &stencil).unwrap();
        let rhs = build_rhs(&halo, &stencil).unwrap();
        let unfused = decouple_unfused(&rhs, &coeffs).unwrap();
        assert_eq!(fused.data(), unfused.data());

        let zero = GroupedField::zeros(*u.layout());
        let halo = exchange_halo(&mut ctx, &zero, 2).unwrap();
        assert_eq!(
            decouple_fused(&halo, &coeffs, &stencil).unwrap().max_abs(),
            0.0
        );
    }

    #[test]
    fn boundary_pair_examples() {
        let (l, f) = solve_boundary_pair(&BoundaryPair {
            d_last_local: vec![1.0, -2.0],
            d_first_remote: vec![3.0, 4.0],
            s_c_last: 0.0,
            s_a_first_remote: 0.0,
        })
        .unwrap();
        assert_eq!((l, f), (vec![1.0, -2.0], vec![3.0, 4.0]));

        let (l, f) = solve_boundary_pair(&BoundaryPair {
            d_last_local: vec![1.0],
            d_first_remote: vec![1.0],
            s_c_last: 0.1,
            s_a_first_remote: 0.2,
        })
        .unwrap();
        assert!((l[0] - 0.9 / 0.98).abs() < 1e-15);
        assert!((f[0] - 0.8 / 0.98).abs() < 1e-15);

        let err = solve_boundary_pair(&BoundaryPair {
            d_last_local: vec![1.0],
            d_first_remote: vec![1.0],
            s_c_last: 1.0,
            s_a_first_remote: 1.0,
        });
        assert!(matches!(err, Err(TdsError::SingularPair { .. })));
    }

    #[test]
    fn substitute_with_zero_couplings_only_sets_edges() {
        let layout = LayoutDescriptor::new(5, 2, 1, 2, Direction::X).unwrap();
        let mut d = GroupedField::from_fn(layout, |i, j, _| (10 * i + j) as f64);
        let coeffs = preprocess(
            &LocalBands {
                lower: vec![0.0; 5],
                diag: vec![1.0; 5],
                upper: vec![0.0; 5],
            },
            SubdomainPosition::Single,
            false,
            &Distd2Options::default(),
        )
        .unwrap();
        substitute(&mut d, &coeffs, &[-1.0, -2.0], &[7.0, 8.0]).unwrap();
        assert_eq!(d.line(1, 0), vec![-2.0, 11.0, 21.0, 31.0, 8.0]);
    }

    #[test]
    fn single_rank_matches_thomas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_dominant(40, false, &mut rng);
        let layout = LayoutDescriptor::new(40, 4, 1, 4, Direction::X).unwrap();
        let u = random_field(layout, &mut rng);
        let part = SubdomainPartition::new(vec![40]).unwrap();
        let run = solve_distributed(
            &sys,
            &StencilCoeffs::identity(40),
            &u,
            &part,
            &Distd2Options::default(),
        )
        .unwrap();
        for lane in 0..4 {
            let x = thomas_solve(&sys, &RhsBatch::single(u.line(lane, 0)).unwrap()).unwrap();
            let got = RhsBatch::single(run.solution.line(lane, 0)).unwrap();
            assert!(got.rel_diff(&x) < 1e-13);
        }
        assert_eq!(run.boundary_pairs, 0);
        assert_eq!(run.max_dropped, 0.0);
    }

    #[test]
    fn identity_operator_returns_input() {
        let sys = TridiagonalSystem::identity(24, true).unwrap();
        let layout = LayoutDescriptor::new(24, 2, 2, 2, Direction::X).unwrap();
        let u = random_field(layout, &mut ChaCha8Rng::seed_from_u64(1));
        let part = SubdomainPartition::even(24, 3).unwrap();
        let run = solve_distributed(
            &sys,
            &StencilCoeffs::identity(24),
            &u,
            &part,
            &Distd2Options::default(),
        )
        .unwrap();
        assert_eq!(run.solution, u);
    }

    #[test]
    fn multi_rank_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (p, periodic) in [(2, false), (2, true), (3, true), (4, false)] {
            let sys = random_dominant(64, periodic, &mut rng);
            let layout = LayoutDescriptor::new(64, 4, 2, 4, Direction::X).unwrap();
            let u = random_field(layout, &mut rng);
            let part = SubdomainPartition::even(64, p).unwrap();
            let run = solve_distributed(
                &sys,
                &StencilCoeffs::identity(64),
                &u,
                &part,
                &Distd2Options::default(),
            )
            .unwrap();
            let expect = oracle_lines(&sys, &u);
            let rel = run.solution.max_abs_diff(&expect) / expect.max_abs();
            assert!(rel < 1e-12, "P={p} periodic={periodic}: {rel:e}");
            assert!(run.solve_counters.iter().all(|c| c.rounds == 2));
            assert_eq!(run.boundary_pairs, p - 1 + usize::from(periodic));
        }
    }

    fn compact_problem(n: usize) -> (TridiagonalSystem, StencilCoeffs, GroupedField) {
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let sys = TridiagonalSystem::constant(n, 1.0 / 3.0, 1.0, 1.0 / 3.0, true).unwrap();
        let stencil = StencilCoeffs::uniform(n, compact_weights(h)).unwrap();
        let layout = LayoutDescriptor::new(n, 4, 1, 4, Direction::X).unwrap();
        let u = GroupedField::from_fn(layout, |i, j, _| ((i as f64) * h + j as f64).sin());
        (sys, stencil, u)
    }

    #[test]
    fn compact_slices_reproduce_dense_solution() {
        let (sys, stencil, u) = compact_problem(64);
        let mut ctx = RankContext::solo(true);
        let halo = exchange_halo(&mut ctx, &u, 2).unwrap();
        let rhs = build_rhs(&halo, &stencil).unwrap();
        let expect = oracle_lines(&sys, &rhs);
        let part = SubdomainPartition::even(64, 2).unwrap();
        let run = solve_distributed(&sys, &stencil, &u, &part, &Distd2Options::default()).unwrap();
        let rel = run.solution.max_abs_diff(&expect) / expect.max_abs();
        assert!(rel < 1e-12, "{rel:e}");
    }

    #[test]
    fn rank_count_does_not_change_results() {
        let (sys, stencil, u) = compact_problem(256);
        let opts = Distd2Options::default();
        let two = solve_distributed(
            &sys,
            &stencil,
            &u,
            &SubdomainPartition::even(256, 2).unwrap(),
            &opts,
        )
        .unwrap();
        let four = solve_distributed(
            &sys,
            &stencil,
            &u,
            &SubdomainPartition::even(256, 4).unwrap(),
            &opts,
        )
        .unwrap();
        assert!(two.solution.max_abs_diff(&four.solution) < 1e-12);
    }

    #[test]
    fn permuting_lanes_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_dominant(32, true, &mut rng);
        let layout = LayoutDescriptor::new(32, 4, 1, 4, Direction::X).unwrap();
        let u = random_field(layout, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permuted = GroupedField::from_fn(layout, |i, j, _| u.data()[perm[j] + 4 * i]);
        let part = SubdomainPartition::even(32, 2).unwrap();
        let opts = Distd2Options::default();
        let stencil = StencilCoeffs::identity(32);
        let a = solve_distributed(&sys, &stencil, &u, &part, &opts)
            .unwrap()
            .solution;
        let b = solve_distributed(&sys, &stencil, &permuted, &part, &opts)
            .unwrap()
            .solution;
        for (lane, &src) in perm.iter().enumerate() {
            assert_eq!(b.line(lane, 0), a.line(src, 0));
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (sys, stencil, u) = compact_problem(96);
        let part = SubdomainPartition::even(96, 3).unwrap();
        let opts = Distd2Options::default();
        let a = solve_distributed(&sys, &stencil, &u, &part, &opts).unwrap();
        let b = solve_distributed(&sys, &stencil, &u, &part, &opts).unwrap();
        assert_eq!(a.solution.data(), b.solution.data());
    }
}
