//! Serial reference solvers and the two earlier distributed schemes.
//!
//! The solvers work on row-major batches ([`RhsBatch`]); Thomas and periodic
//! Thomas also have grouped-layout variants for throughput runs. They are
//! used to cross-check the distributed path in [`crate::distd2`]. Inputs are
//! never mutated: the sweeps run on working copies so one
//! [`TridiagonalSystem`] can serve many batches.

use rayon::prelude::*;

use crate::error::{Result, TdsError};
use crate::layout::GroupedField;

/// Pivots smaller than this (in magnitude) are treated as exact zeros.
pub const DEFAULT_PIVOT_FLOOR: f64 = 1e-300;
/// Largest coupling PDD may drop before reporting [`TdsError::TruncationUnsafe`].
pub const DEFAULT_TRUNCATION_THRESHOLD: f64 = 1e-14;
/// The dense oracle materialises an n x n matrix.
pub const DENSE_ORACLE_MAX_N: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub pivot_floor: f64,
    pub truncation_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            pivot_floor: DEFAULT_PIVOT_FLOOR,
            truncation_threshold: DEFAULT_TRUNCATION_THRESHOLD,
        }
    }
}

/// The three bands of a (possibly cyclic) tridiagonal matrix.
///
/// Row `i` reads `lower[i] * u[i-1] + diag[i] * u[i] + upper[i] * u[i+1]`.
/// `lower[0]` and `upper[n-1]` are the wraparound corners and only take part
/// when the system is periodic.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    periodic: bool,
}

impl TridiagonalSystem {
    pub fn new(lower: Vec<f64>, diag: Vec<f64>, upper: Vec<f64>, periodic: bool) -> Result<Self> {
        let n = diag.len();
        if n < 3 {
            return Err(TdsError::InvalidSystem(format!("n must be >= 3, got {n}")));
        }
        if lower.len() != n || upper.len() != n {
            return Err(TdsError::InvalidSystem(format!(
                "band lengths differ: lower {}, diag {n}, upper {}",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(i) = diag.iter().position(|b| !b.is_finite() || *b == 0.0) {
            return Err(TdsError::InvalidSystem(format!(
                "diagonal entry {i} is zero or not finite"
            )));
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return Err(TdsError::InvalidSystem(
                "off-diagonal entries must be finite".into(),
            ));
        }
        Ok(Self {
            lower,
            diag,
            upper,
            periodic,
        })
    }

    /// Constant-coefficient (Toeplitz or circulant) system.
    pub fn constant(n: usize, a: f64, b: f64, c: f64, periodic: bool) -> Result<Self> {
        Self::new(vec![a; n], vec![b; n], vec![c; n], periodic)
    }

    pub fn identity(n: usize, periodic: bool) -> Result<Self> {
        Self::constant(n, 0.0, 1.0, 0.0, periodic)
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Lower band with the corner zeroed for non-periodic systems.
    pub fn lower_at(&self, i: usize) -> f64 {
        if i == 0 && !self.periodic {
            0.0
        } else {
            self.lower[i]
        }
    }

    pub fn upper_at(&self, i: usize) -> f64 {
        if i + 1 == self.n() && !self.periodic {
            0.0
        } else {
            self.upper[i]
        }
    }

    /// `min_i |b_i| - |a_i| - |c_i|`, corners included only when periodic.
    pub fn dominance_margin(&self) -> f64 {
        (0..self.n())
            .map(|i| self.diag[i].abs() - self.lower_at(i).abs() - self.upper_at(i).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Strict row diagonal dominance.
    pub fn is_diagonally_dominant(&self) -> bool {
        self.dominance_margin() > 0.0
    }

    /// First row violating strict dominance, with its margin.
    pub fn first_non_dominant_row(&self) -> Option<(usize, f64)> {
        (0..self.n())
            .map(|i| {
                (
                    i,
                    self.diag[i].abs() - self.lower_at(i).abs() - self.upper_at(i).abs(),
                )
            })
            .find(|(_, m)| *m <= 0.0)
    }

    pub fn matvec(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(u.len(), n, "matvec length mismatch");
        (0..n)
            .map(|i| {
                let prev = if i == 0 { u[n - 1] } else { u[i - 1] };
                let next = if i + 1 == n { u[0] } else { u[i + 1] };
                self.lower_at(i) * prev + self.diag[i] * u[i] + self.upper_at(i) * next
            })
            .collect()
    }

    /// Row-major dense matrix including the cyclic corners.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] += self.diag[i];
            m[i * n + (i + n - 1) % n] += self.lower_at(i);
            m[i * n + (i + 1) % n] += self.upper_at(i);
        }
        m
    }

    /// Bands of rows `offset..offset + len` as seen by the owner of that
    /// subdomain. The outer couplings point at the neighbouring subdomains
    /// and are zero at the ends of a non-periodic system.
    pub fn local_bands(&self, offset: usize, len: usize) -> Result<LocalBands> {
        if len == 0 || offset + len > self.n() {
            return Err(TdsError::InvalidPartition(format!(
                "rows {offset}..{} outside system of size {}",
                offset + len,
                self.n()
            )));
        }
        let rows = offset..offset + len;
        let mut lower: Vec<f64> = rows.clone().map(|i| self.lower_at(i)).collect();
        let upper: Vec<f64> = rows.clone().map(|i| self.upper_at(i)).collect();
        let diag = self.diag[rows].to_vec();
        // a single subdomain covering a periodic system keeps its corners
        if offset == 0 && !self.periodic {
            lower[0] = 0.0;
        }
        Ok(LocalBands { lower, diag, upper })
    }
}

/// Rows of one subdomain. `lower[0]` couples to the previous subdomain's
/// last unknown, `upper[len-1]` to the next subdomain's first unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBands {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LocalBands {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
}

/// `m` right-hand sides of length `n`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RhsBatch {
    m: usize,
    n: usize,
    values: Vec<f64>,
}

impl RhsBatch {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.is_empty() || !values.len().is_multiple_of(n) {
            return Err(TdsError::ShapeMismatch(format!(
                "{} values do not form rows of length {n}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TdsError::ShapeMismatch(
                "right-hand sides must be finite".into(),
            ));
        }
        Ok(Self {
            m: values.len() / n,
            n,
            values,
        })
    }

    pub fn single(values: Vec<f64>) -> Result<Self> {
        Self::new(values.len(), values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(TdsError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n..(r + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n)
    }

    fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.values.chunks_exact_mut(self.n)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `||self - reference||_inf / ||reference||_inf` (absolute when the
    /// reference is identically zero).
    pub fn rel_diff(&self, reference: &RhsBatch) -> f64 {
        assert_eq!(self.values.len(), reference.values.len());
        let diff = self
            .values
            .iter()
            .zip(&reference.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = reference.max_abs();
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }
}

/// Split of `n` rows into consecutive subdomains, one per rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubdomainPartition {
    local_sizes: Vec<usize>,
}

impl SubdomainPartition {
    pub const MIN_LOCAL: usize = 4;

    pub fn new(local_sizes: Vec<usize>) -> Result<Self> {
        if local_sizes.is_empty() {
            return Err(TdsError::InvalidPartition(
                "need at least one subdomain".into(),
            ));
        }
        if let Some(s) = local_sizes.iter().find(|&&s| s < Self::MIN_LOCAL) {
            return Err(TdsError::InvalidPartition(format!(
                "local size {s} below minimum {}",
                Self::MIN_LOCAL
            )));
        }
        Ok(Self { local_sizes })
    }

    /// Near-even split; the first `n % p` subdomains get one extra row.
    pub fn even(n: usize, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(TdsError::InvalidPartition(
                "rank count must be positive".into(),
            ));
        }
        let base = n / p;
        let rem = n % p;
        Self::new((0..p).map(|k| base + usize::from(k < rem)).collect())
    }

    pub fn rank_count(&self) -> usize {
        self.local_sizes.len()
    }

    pub fn local_sizes(&self) -> &[usize] {
        &self.local_sizes
    }

    pub fn n(&self) -> usize {
        self.local_sizes.iter().sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.local_sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect()
    }

    fn check_against(&self, n: usize) -> Result<()> {
        if self.n() != n {
            return Err(TdsError::InvalidPartition(format!(
                "partition covers {} rows, system has {n}",
                self.n()
            )));
        }
        Ok(())
    }
}

fn check_rhs(sys: &TridiagonalSystem, rhs: &RhsBatch) -> Result<()> {
    if rhs.n() != sys.n() {
        return Err(TdsError::ShapeMismatch(format!(
            "rhs length {} != system size {}",
            rhs.n(),
            sys.n()
        )));
    }
    Ok(())
}

/// Forward-elimination factors of a non-periodic tridiagonal matrix:
/// the normalised upper band and the reciprocal pivots.
struct ThomasFactors {
    lower: Vec<f64>,
    c_prime: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl ThomasFactors {
    fn new(lower: &[f64], diag: &[f64], upper: &[f64], floor: f64) -> Result<Self> {
        let n = diag.len();
        let mut c_prime = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        if diag[0].abs() < floor {
            return Err(TdsError::SingularPivot {
                row: 0,
                pivot: diag[0],
                floor,
            });
        }
        inv_pivot[0] = 1.0 / diag[0];
        c_prime[0] = upper[0] / diag[0];
        for i in 1..n {
            let pivot = diag[i] - lower[i] * c_prime[i - 1];
            if !(pivot.abs() >= floor) {
                return Err(TdsError::SingularPivot {
                    row: i,
                    pivot,
                    floor,
                });
            }
            let w = 1.0 / pivot;
            inv_pivot[i] = w;
            c_prime[i] = w * upper[i];
        }
        Ok(Self {
            lower: lower.to_vec(),
            c_prime,
            inv_pivot,
        })
    }

    /// Solves in place.
    fn apply(&self, d: &mut [f64]) {
        let n = d.len();
        d[0] *= self.inv_pivot[0];
        for i in 1..n {
            d[i] = self.inv_pivot[i] * (d[i] - self.lower[i] * d[i - 1]);
        }
        for i in (0..n - 1).rev() {
            d[i] -= self.c_prime[i] * d[i + 1];
        }
    }

    /// Solves `sz` interleaved lines in place; `d[lane + sz * i]`.
    fn apply_lanes(&self, d: &mut [f64], sz: usize) {
        let n = d.len() / sz;
        for v in &mut d[..sz] {
            *v *= self.inv_pivot[0];
        }
        for i in 1..n {
            let (done, rest) = d.split_at_mut(i * sz);
            let (w, a) = (self.inv_pivot[i], self.lower[i]);
            for (v, p) in rest[..sz].iter_mut().zip(&done[(i - 1) * sz..]) {
                *v = w * (*v - a * p);
            }
        }
        for i in (0..n - 1).rev() {
            let (lo, hi) = d.split_at_mut((i + 1) * sz);
            let c = self.c_prime[i];
            for (v, nx) in lo[i * sz..].iter_mut().zip(&hi[..sz]) {
                *v -= c * nx;
            }
        }
    }
}

fn non_periodic_bands(sys: &TridiagonalSystem) -> (Vec<f64>, Vec<f64>) {
    let n = sys.n();
    let mut lower = sys.lower.clone();
    let mut upper = sys.upper.clone();
    lower[0] = 0.0;
    upper[n - 1] = 0.0;
    (lower, upper)
}

pub fn thomas_solve(sys: &TridiagonalSystem, rhs: &RhsBatch) -> Result<RhsBatch> {
    thomas_solve_with(sys, rhs, &SolverOptions::default())
}

pub fn thomas_solve_with(
    sys: &TridiagonalSystem,
    rhs: &RhsBatch,
    opts: &SolverOptions,
) -> Result<RhsBatch> {
    if sys.is_periodic() {
        return Err(TdsError::InvalidSystem(
            "thomas_solve needs a non-periodic system".into(),
        ));
    }
    check_rhs(sys, rhs)?;
    let (lower, upper) = non_periodic_bands(sys);
    let factors = ThomasFactors::new(&lower, &sys.diag, &upper, opts.pivot_floor)?;
    let mut out = rhs.clone();
    out.rows_mut().for_each(|row| factors.apply(row));
    Ok(out)
}

pub fn periodic_thomas_solve(sys: &TridiagonalSystem, rhs: &RhsBatch) -> Result<RhsBatch> {
    periodic_thomas_solve_with(sys, rhs, &SolverOptions::default())
}

/// Sherman-Morrison setup for a cyclic matrix: `A = A' + u v^T` with
/// `u = (gamma, 0, .., 0, c_n)` and `v = (1, 0, .., 0, a_1 / gamma)`,
/// `gamma = -b_1`. `z` solves `A' z = u`.
struct PeriodicFactors {
    factors: ThomasFactors,
    z: Vec<f64>,
    corner_lower: f64,
    gamma: f64,
    denominator: f64,
}

impl PeriodicFactors {
    fn new(sys: &TridiagonalSystem, opts: &SolverOptions) -> Result<Self> {
        if !sys.is_periodic() {
            return Err(TdsError::InvalidSystem(
                "periodic_thomas_solve needs a periodic system".into(),
            ));
        }
        let n = sys.n();
        let corner_lower = sys.lower[0];
        let corner_upper = sys.upper[n - 1];
        let gamma = -sys.diag[0];

        let (lower, upper) = non_periodic_bands(sys);
        let mut diag = sys.diag.clone();
        diag[0] -= gamma;
        diag[n - 1] -= corner_lower * corner_upper / gamma;
        let factors = ThomasFactors::new(&lower, &diag, &upper, opts.pivot_floor)?;

        let mut z = vec![0.0; n];
        z[0] = gamma;
        z[n - 1] = corner_upper;
        factors.apply(&mut z);
        let denominator = 1.0 + z[0] + corner_lower * z[n - 1] / gamma;
        if !(denominator.abs() >= opts.pivot_floor) {
            return Err(TdsError::SingularCorrection {
                denominator,
                floor: opts.pivot_floor,
            });
        }
        Ok(Self {
            factors,
            z,
            corner_lower,
            gamma,
            denominator,
        })
    }

    fn apply(&self, row: &mut [f64]) {
        let n = row.len();
        self.factors.apply(row);
        let factor = (row[0] + self.corner_lower * row[n - 1] / self.gamma) / self.denominator;
        for (x, zi) in row.iter_mut().zip(&self.z) {
            *x -= factor * zi;
        }
    }

    fn apply_lanes(&self, d: &mut [f64], sz: usize) {
        let n = d.len() / sz;
        self.factors.apply_lanes(d, sz);
        let factors: Vec<f64> = (0..sz)
            .map(|l| {
                (d[l] + self.corner_lower * d[l + sz * (n - 1)] / self.gamma) / self.denominator
            })
            .collect();
        for (row, zi) in d.chunks_exact_mut(sz).zip(&self.z) {
            for (x, f) in row.iter_mut().zip(&factors) {
                *x -= f * zi;
            }
        }
    }
}

/// Cyclic solve by Sherman-Morrison on a non-periodic Thomas factorisation.
pub fn periodic_thomas_solve_with(
    sys: &TridiagonalSystem,
    rhs: &RhsBatch,
    opts: &SolverOptions,
) -> Result<RhsBatch> {
    let pf = PeriodicFactors::new(sys, opts)?;
    check_rhs(sys, rhs)?;
    let mut out = rhs.clone();
    out.rows_mut().for_each(|row| pf.apply(row));
    Ok(out)
}

fn check_grouped(sys: &TridiagonalSystem, field: &GroupedField) -> Result<()> {
    if field.layout().n() != sys.n() {
        return Err(TdsError::ShapeMismatch(format!(
            "field lines of length {} for system size {}",
            field.layout().n(),
            sys.n()
        )));
    }
    Ok(())
}

/// [`thomas_solve`] on every line of a grouped field, the `sz` lanes of a
/// group swept together.
pub fn thomas_solve_grouped(sys: &TridiagonalSystem, field: &GroupedField) -> Result<GroupedField> {
    if sys.is_periodic() {
        return Err(TdsError::InvalidSystem(
            "thomas_solve needs a non-periodic system".into(),
        ));
    }
    check_grouped(sys, field)?;
    let (lower, upper) = non_periodic_bands(sys);
    let factors = ThomasFactors::new(&lower, &sys.diag, &upper, DEFAULT_PIVOT_FLOOR)?;
    let sz = field.layout().sz();
    let mut out = field.clone();
    let block = out.group_len();
    out.data_mut()
        .par_chunks_mut(block)
        .for_each(|g| factors.apply_lanes(g, sz));
    Ok(out)
}

/// [`periodic_thomas_solve`] on every line of a grouped field.
pub fn periodic_thomas_solve_grouped(
    sys: &TridiagonalSystem,
    field: &GroupedField,
) -> Result<GroupedField> {
    let pf = PeriodicFactors::new(sys, &SolverOptions::default())?;
    check_grouped(sys, field)?;
    let sz = field.layout().sz();
    let mut out = field.clone();
    let block = out.group_len();
    out.data_mut()
        .par_chunks_mut(block)
        .for_each(|g| pf.apply_lanes(g, sz));
    Ok(out)
}

/// Row-major dense LU with partial pivoting.
struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl DenseLu {
    fn factor(mut a: Vec<f64>, n: usize) -> Result<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tiny = f64::EPSILON * n as f64 * scale;
        for k in 0..n {
            let (p, best) = (k..n)
                .map(|r| (r, a[r * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= tiny || !best.is_finite() {
                return Err(TdsError::SingularMatrix { column: k });
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            for r in k + 1..n {
                let l = a[r * n + k] / pivot;
                if l == 0.0 {
                    continue;
                }
                a[r * n + k] = l;
                for c in k + 1..n {
                    a[r * n + c] -= l * a[k * n + c];
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..n {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s / self.lu[r * n + r];
        }
        x
    }
}

/// Gaussian elimination with partial pivoting on the fully materialised
/// matrix (cyclic corners included).
pub fn dense_solve_oracle(sys: &TridiagonalSystem, rhs: &RhsBatch) -> Result<RhsBatch> {
    check_rhs(sys, rhs)?;
    let n = sys.n();
    if n > DENSE_ORACLE_MAX_N {
        return Err(TdsError::TooLarge {
            n,
            max: DENSE_ORACLE_MAX_N,
        });
    }
    let lu = DenseLu::factor(sys.to_dense(), n)?;
    let values = rhs.rows().flat_map(|row| lu.solve(row)).collect();
    RhsBatch::new(n, values)
}

/// Inverse of a dense row-major n x n matrix, column by column.
pub fn dense_inverse(matrix: &[f64], n: usize) -> Result<Vec<f64>> {
    if matrix.len() != n * n {
        return Err(TdsError::ShapeMismatch("matrix is not n x n".into()));
    }
    let lu = DenseLu::factor(matrix.to_vec(), n)?;
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.fill(0.0);
        e[c] = 1.0;
        let col = lu.solve(&e);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Ok(inv)
}

/// Subdomain-local elimination of the modified Thomas scheme. Every row ends
/// up as `u_i + first[i] * u_0 + last[i] * u_{m-1} = e_i` for interior `i`;
/// row 0 couples to the previous subdomain through `first[0]` and row `m-1`
/// to the next through `last[m-1]`.
struct ModifiedThomasBlock {
    first: Vec<f64>,
    last: Vec<f64>,
    // per-row multipliers replayed on every right-hand side
    scale: Vec<f64>,
    lower: Vec<f64>,
    back: Vec<f64>,
    closure: f64,
    closure_scale: f64,
}

impl ModifiedThomasBlock {
    fn new(bands: &LocalBands, floor: f64) -> Result<Self> {
        let m = bands.len();
        let (a, b, c) = (&bands.lower, &bands.diag, &bands.upper);
        let mut first = vec![0.0; m];
        let mut last = vec![0.0; m];
        let mut scale = vec![0.0; m];
        for i in 0..2 {
            if b[i].abs() < floor {
                return Err(TdsError::SingularPivot {
                    row: i,
                    pivot: b[i],
                    floor,
                });
            }
            scale[i] = 1.0 / b[i];
            first[i] = a[i] * scale[i];
            last[i] = c[i] * scale[i];
        }
        for i in 2..m {
            let pivot = b[i] - a[i] * last[i - 1];
            if !(pivot.abs() >= floor) {
                return Err(TdsError::SingularPivot {
                    row: i,
                    pivot,
                    floor,
                });
            }
            scale[i] = 1.0 / pivot;
            first[i] = -a[i] * first[i - 1] * scale[i];
            last[i] = c[i] * scale[i];
        }
        let mut back = vec![0.0; m];
        for i in (1..m - 2).rev() {
            back[i] = last[i];
            first[i] -= last[i] * first[i + 1];
            last[i] = -last[i] * last[i + 1];
        }
        let closure = last[0];
        let denom = 1.0 - closure * first[1];
        if !(denom.abs() >= floor) {
            return Err(TdsError::SingularPivot {
                row: 0,
                pivot: denom,
                floor,
            });
        }
        let closure_scale = 1.0 / denom;
        first[0] *= closure_scale;
        last[0] = -closure_scale * closure * last[1];
        Ok(Self {
            first,
            last,
            scale,
            lower: a.clone(),
            back,
            closure,
            closure_scale,
        })
    }

    fn eliminate(&self, d: &mut [f64]) {
        let m = d.len();
        d[0] *= self.scale[0];
        d[1] *= self.scale[1];
        for i in 2..m {
            d[i] = self.scale[i] * (d[i] - self.lower[i] * d[i - 1]);
        }
        for i in (1..m - 2).rev() {
            d[i] -= self.back[i] * d[i + 1];
        }
        d[0] = self.closure_scale * (d[0] - self.closure * d[1]);
    }
}

/// Modified Thomas: local elimination per subdomain, a gathered serial solve
/// of the 2P-row reduced system, then interior substitution.
pub fn modified_thomas_solve(
    sys: &TridiagonalSystem,
    rhs: &RhsBatch,
    part: &SubdomainPartition,
) -> Result<RhsBatch> {
    modified_thomas_solve_with(sys, rhs, part, &SolverOptions::default())
}

pub fn modified_thomas_solve_with(
    sys: &TridiagonalSystem,
    rhs: &RhsBatch,
    part: &SubdomainPartition,
    opts: &SolverOptions,
) -> Result<RhsBatch> {
    if sys.is_periodic() {
        return Err(TdsError::InvalidSystem(
            "modified_thomas_solve needs a non-periodic system".into(),
        ));
    }
    check_rhs(sys, rhs)?;
    part.check_against(sys.n())?;
    let p = part.rank_count();
    if p == 1 {
        return thomas_solve_with(sys, rhs, opts);
    }
    let offsets = part.offsets();
    let blocks = offsets
        .iter()
        .zip(part.local_sizes())
        .map(|(&o, &m)| ModifiedThomasBlock::new(&sys.local_bands(o, m)?, opts.pivot_floor))
        .collect::<Result<Vec<_>>>()?;

    // reduced unknowns ordered (first_0, last_0, first_1, last_1, ...)
    let mut r_lower = Vec::with_capacity(2 * p);
    let mut r_upper = Vec::with_capacity(2 * p);
    for (blk, &m) in blocks.iter().zip(part.local_sizes()) {
        r_lower.push(blk.first[0]);
        r_upper.push(blk.last[0]);
        r_lower.push(blk.first[m - 1]);
        r_upper.push(blk.last[m - 1]);
    }
    let reduced = TridiagonalSystem::new(r_lower, vec![1.0; 2 * p], r_upper, false)?;

    let mut out = rhs.clone();
    let mut reduced_rhs = Vec::with_capacity(rhs.m() * 2 * p);
    for row in out.rows_mut() {
        for ((blk, &o), &m) in blocks.iter().zip(&offsets).zip(part.local_sizes()) {
            let d = &mut row[o..o + m];
            blk.eliminate(d);
            reduced_rhs.push(d[0]);
            reduced_rhs.push(d[m - 1]);
        }
    }
    let edges = thomas_solve_with(&reduced, &RhsBatch::new(2 * p, reduced_rhs)?, opts)?;

    for (row, edge) in out.rows_mut().zip(edges.rows()) {
        for (k, ((blk, &o), &m)) in blocks
            .iter()
            .zip(&offsets)
            .zip(part.local_sizes())
            .enumerate()
        {
            let (u_first, u_last) = (edge[2 * k], edge[2 * k + 1]);
            let d = &mut row[o..o + m];
            for i in 1..m - 1 {
                d[i] -= blk.first[i] * u_first + blk.last[i] * u_last;
            }
            d[0] = u_first;
            d[m - 1] = u_last;
        }
    }
    Ok(out)
}

/// Result of a PDD solve together with the largest coupling it dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PddSolution {
    pub solution: RhsBatch,
    pub max_dropped: f64,
}

/// Local inverse columns of one PDD subdomain: `left = A_k^{-1} e_0 * a_first`
/// and `right = A_k^{-1} e_{m-1} * c_last`.
struct PddBlock {
    factors: ThomasFactors,
    left: Vec<f64>,
    right: Vec<f64>,
}

/// Parallel diagonally dominant solve: every subdomain is multiplied by its
/// local inverse, the penta-diagonal reduced entries below the truncation
/// threshold are dropped and the remaining 2x2 systems across each
/// subdomain boundary are solved independently.
pub fn pdd_solve(
    sys: &TridiagonalSystem,
    rhs: &RhsBatch,
    part: &SubdomainPartition,
) -> Result<RhsBatch> {
    pdd_solve_with(sys, rhs, part, &SolverOptions::default()).map(|s| s.solution)
}

pub fn pdd_solve_with(
    sys: &TridiagonalSystem,
    rhs: &RhsBatch,
    part: &SubdomainPartition,
    opts: &SolverOptions,
) -> Result<PddSolution> {
    check_rhs(sys, rhs)?;
    part.check_against(sys.n())?;
    let p = part.rank_count();
    if p == 1 {
        let solution = if sys.is_periodic() {
            periodic_thomas_solve_with(sys, rhs, opts)?
        } else {
            thomas_solve_with(sys, rhs, opts)?
        };
        return Ok(PddSolution {
            solution,
            max_dropped: 0.0,
        });
    }
    let offsets = part.offsets();
    let sizes = part.local_sizes();
    let bands = offsets
        .iter()
        .zip(sizes)
        .map(|(&o, &m)| sys.local_bands(o, m))
        .collect::<Result<Vec<_>>>()?;

    // interior bands only: outer couplings move to the right-hand side
    let inner: Vec<(Vec<f64>, Vec<f64>)> = bands
        .iter()
        .map(|b| {
            let mut lower = b.lower.clone();
            let mut upper = b.upper.clone();
            lower[0] = 0.0;
            *upper.last_mut().unwrap() = 0.0;
            (lower, upper)
        })
        .collect();

    let mut blocks = Vec::with_capacity(p);
    for (b, (lower, upper)) in bands.iter().zip(&inner) {
        let m = b.len();
        let factors = ThomasFactors::new(lower, &b.diag, upper, opts.pivot_floor)?;
        let mut left = vec![0.0; m];
        left[0] = b.lower[0];
        factors.apply(&mut left);
        let mut right = vec![0.0; m];
        right[m - 1] = b.upper[m - 1];
        factors.apply(&mut right);
        blocks.push(PddBlock {
            factors,
            left,
            right,
        });
    }

    let periodic = sys.is_periodic();
    let mut max_dropped = 0.0f64;
    for k in 0..p {
        let has_next = periodic || k + 1 < p;
        let has_prev = periodic || k > 0;
        let m = sizes[k];
        if has_prev {
            max_dropped = max_dropped.max(blocks[k].left[m - 1].abs());
        }
        if has_next {
            max_dropped = max_dropped.max(blocks[k].right[0].abs());
        }
    }
    if max_dropped > opts.truncation_threshold {
        return Err(TdsError::TruncationUnsafe {
            max_dropped,
            threshold: opts.truncation_threshold,
        });
    }

    let mut out = rhs.clone();
    let mut first = vec![0.0; p];
    let mut last = vec![0.0; p];
    for row in out.rows_mut() {
        for (blk, (&o, &m)) in blocks.iter().zip(offsets.iter().zip(sizes)) {
            blk.factors.apply(&mut row[o..o + m]);
        }
        for k in 0..p {
            first[k] = row[offsets[k]];
            last[k] = row[offsets[k] + sizes[k] - 1];
        }
        let (x_first, x_last) = (first.clone(), last.clone());
        for k in 0..p {
            let next = (k + 1) % p;
            if next == 0 && !periodic {
                continue;
            }
            // [1, right_k(last); left_next(first), 1] [u_last_k; u_first_next]
            let s_c = blocks[k].right[sizes[k] - 1];
            let s_a = blocks[next].left[0];
            let det = 1.0 - s_c * s_a;
            if !(det.abs() >= opts.pivot_floor) {
                return Err(TdsError::SingularPair { det });
            }
            last[k] = (x_last[k] - s_c * x_first[next]) / det;
            first[next] = (x_first[next] - s_a * x_last[k]) / det;
        }
        for k in 0..p {
            let prev_last = if k > 0 {
                last[k - 1]
            } else if periodic {
                last[p - 1]
            } else {
                0.0
            };
            let next_first = if k + 1 < p {
                first[k + 1]
            } else if periodic {
                first[0]
            } else {
                0.0
            };
            let o = offsets[k];
            let m = sizes[k];
            let blk = &blocks[k];
            for i in 1..m - 1 {
                row[o + i] -= blk.left[i] * prev_last + blk.right[i] * next_first;
            }
            row[o] = first[k];
            row[o + m - 1] = last[k];
        }
    }
    Ok(PddSolution {
        solution: out,
        max_dropped,
    })
}

/// Largest coupling PDD would drop, computed from explicit dense inverses of
/// every local block. Independent of the elimination path in [`pdd_solve`].
pub fn pdd_dropped_couplings_dense(
    sys: &TridiagonalSystem,
    part: &SubdomainPartition,
) -> Result<f64> {
    part.check_against(sys.n())?;
    let p = part.rank_count();
    let mut max_dropped = 0.0f64;
    for (k, (&o, &m)) in part.offsets().iter().zip(part.local_sizes()).enumerate() {
        let bands = sys.local_bands(o, m)?;
        let mut block = vec![0.0; m * m];
        for i in 0..m {
            block[i * m + i] = bands.diag[i];
            if i > 0 {
                block[i * m + i - 1] = bands.lower[i];
            }
            if i + 1 < m {
                block[i * m + i + 1] = bands.upper[i];
            }
        }
        let inv = dense_inverse(&block, m)?;
        if p == 1 {
            continue;
        }
        let has_prev = sys.is_periodic() || k > 0;
        let has_next = sys.is_periodic() || k + 1 < p;
        if has_prev {
            max_dropped = max_dropped.max((inv[(m - 1) * m] * bands.lower[0]).abs());
        }
        if has_next {
            max_dropped = max_dropped.max((inv[m - 1] * bands.upper[m - 1]).abs());
        }
    }
    Ok(max_dropped)
}
