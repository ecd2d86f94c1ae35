//! Compact (Padé-type) finite-difference operators and their convergence
//! harness.
//!
//! A compact scheme couples neighbouring derivative values on the left,
//! `alpha u'_{j-1} + u'_j + alpha u'_{j+1} = rhs_j`, so evaluating a
//! derivative means solving a tridiagonal system per grid line.

use crate::distd2::{solve_distributed, Distd2Options, StencilCoeffs};
use crate::error::{Result, TdsError};
use crate::layout::{Direction, GroupedField, LayoutDescriptor};
use crate::tridiag::{
    dense_solve_oracle, periodic_thomas_solve, thomas_solve, RhsBatch, SubdomainPartition,
    TridiagonalSystem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// Sixth-order first derivative.
    FirstDerivative,
    /// Sixth-order second derivative.
    SecondDerivative,
}

/// Interior coefficients of a symmetric tridiagonal compact scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactScheme {
    pub derivative_order: u8,
    pub alpha: f64,
    pub a_w: f64,
    pub b_w: f64,
    pub formal_order: u8,
    pub h: f64,
}

fn check_spacing(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(TdsError::Config(format!(
            "grid spacing must be positive, got {h}"
        )))
    }
}

pub fn sixth_order_first_derivative(h: f64) -> Result<CompactScheme> {
    check_spacing(h)?;
    Ok(CompactScheme {
        derivative_order: 1,
        alpha: 1.0 / 3.0,
        a_w: 14.0 / 9.0,
        b_w: 1.0 / 9.0,
        formal_order: 6,
        h,
    })
}

/// `alpha = 2/11, a = 12/11, b = 3/11`: the tridiagonal member of the
/// compact second-derivative family with the highest order.
pub fn second_derivative_scheme(h: f64) -> Result<CompactScheme> {
    check_spacing(h)?;
    Ok(CompactScheme {
        derivative_order: 2,
        alpha: 2.0 / 11.0,
        a_w: 12.0 / 11.0,
        b_w: 3.0 / 11.0,
        formal_order: 6,
        h,
    })
}

impl CompactScheme {
    pub fn new(kind: SchemeKind, h: f64) -> Result<Self> {
        match kind {
            SchemeKind::FirstDerivative => sixth_order_first_derivative(h),
            SchemeKind::SecondDerivative => second_derivative_scheme(h),
        }
    }

    /// Right-hand-side weights on offsets `-2..=2` for interior rows.
    pub fn interior_weights(&self) -> [f64; 5] {
        let (a, b, h) = (self.a_w, self.b_w, self.h);
        if self.derivative_order == 1 {
            [
                -b / (4.0 * h),
                -a / (2.0 * h),
                0.0,
                a / (2.0 * h),
                b / (4.0 * h),
            ]
        } else {
            let (a, b) = (a / (h * h), b / (4.0 * h * h));
            [b, a, -2.0 * a - 2.0 * b, a, b]
        }
    }

    /// `(lower, upper, weights)` for the first two rows of a non-periodic
    /// line. The last two rows mirror them.
    fn boundary_rows(&self) -> [(f64, f64, [f64; 5]); 2] {
        let h = self.h;
        if self.derivative_order == 1 {
            [
                // one-sided, second order
                (0.0, 0.5, [0.0, 0.0, -1.75 / h, 2.0 / h, -0.25 / h]),
                // fourth-order Padé
                (0.25, 0.25, [0.0, -0.75 / h, 0.0, 0.75 / h, 0.0]),
            ]
        } else {
            let h2 = h * h;
            let p = 1.2 / h2;
            [
                (0.0, 0.0, [0.0, 0.0, 1.0 / h2, -2.0 / h2, 1.0 / h2]),
                (0.1, 0.1, [0.0, p, -2.0 * p, p, 0.0]),
            ]
        }
    }
}

/// Assembles the left-hand matrix and right-hand-side stencil of `scheme`
/// on `n` points. Non-periodic lines close with lower-order rows that only
/// read inside the line.
pub fn assemble(
    scheme: &CompactScheme,
    n: usize,
    periodic: bool,
) -> Result<(TridiagonalSystem, StencilCoeffs)> {
    if n < 5 {
        return Err(TdsError::Config(format!(
            "compact scheme needs n >= 5, got {n}"
        )));
    }
    let alpha = scheme.alpha;
    let mut lower = vec![alpha; n];
    let diag = vec![1.0; n];
    let mut upper = vec![alpha; n];
    let mut rows = vec![scheme.interior_weights(); n];
    if !periodic {
        let odd = scheme.derivative_order == 1;
        for (j, (lo, up, w)) in scheme.boundary_rows().into_iter().enumerate() {
            lower[j] = lo;
            upper[j] = up;
            rows[j] = w;
            // mirror: offsets reverse, odd derivatives flip sign
            let m = n - 1 - j;
            lower[m] = up;
            upper[m] = lo;
            let s = if odd { -1.0 } else { 1.0 };
            rows[m] = [s * w[4], s * w[3], s * w[2], s * w[1], s * w[0]];
        }
        lower[0] = 0.0;
        upper[n - 1] = 0.0;
    }
    let sys = TridiagonalSystem::new(lower, diag, upper, periodic)?;
    Ok((sys, StencilCoeffs::new(rows)?))
}

/// Applies a five-point stencil to one line. Off-line reads wrap when
/// `periodic` and are zero otherwise.
pub fn apply_stencil(stencil: &StencilCoeffs, u: &[f64], periodic: bool) -> Vec<f64> {
    let n = u.len() as isize;
    let at = |i: isize| -> f64 {
        if periodic {
            u[i.rem_euclid(n) as usize]
        } else if (0..n).contains(&i) {
            u[i as usize]
        } else {
            0.0
        }
    };
    stencil
        .rows
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let j = j as isize;
            w[0] * at(j - 2) + w[1] * at(j - 1) + w[2] * at(j) + w[3] * at(j + 1) + w[4] * at(j + 2)
        })
        .collect()
}

/// Linear solver used to evaluate a compact derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderSolver {
    /// Thomas or periodic Thomas, matching the system.
    Thomas,
    Dense,
    Distd2 {
        ranks: usize,
    },
}

/// Derivative of the samples `u` on a line of spacing `scheme.h`.
pub fn differentiate(
    scheme: &CompactScheme,
    u: &[f64],
    periodic: bool,
    solver: OrderSolver,
) -> Result<Vec<f64>> {
    let n = u.len();
    let (sys, stencil) = assemble(scheme, n, periodic)?;
    match solver {
        OrderSolver::Thomas | OrderSolver::Dense => {
            let rhs = RhsBatch::single(apply_stencil(&stencil, u, periodic))?;
            let x = match solver {
                OrderSolver::Dense => dense_solve_oracle(&sys, &rhs)?,
                _ if periodic => periodic_thomas_solve(&sys, &rhs)?,
                _ => thomas_solve(&sys, &rhs)?,
            };
            Ok(x.into_values())
        }
        OrderSolver::Distd2 { ranks } => {
            let layout = LayoutDescriptor::new(n, 1, 1, 1, Direction::X)?;
            let field = GroupedField::from_data(layout, u.to_vec())?;
            let part = SubdomainPartition::even(n, ranks)?;
            let run = solve_distributed(&sys, &stencil, &field, &part, &Distd2Options::default())?;
            Ok(run.solution.into_data())
        }
    }
}

/// Max-norm error of the compact derivative of `f` against `df` on `n`
/// periodic points of `[0, 2 pi)`.
pub fn max_error(
    kind: SchemeKind,
    solver: OrderSolver,
    n: usize,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
) -> Result<f64> {
    let h = std::f64::consts::TAU / n as f64;
    let scheme = CompactScheme::new(kind, h)?;
    let x: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let u: Vec<f64> = x.iter().map(|&x| f(x)).collect();
    let d = differentiate(&scheme, &u, true, solver)?;
    Ok(d.iter()
        .zip(&x)
        .fold(0.0f64, |m, (d, &x)| m.max((d - df(x)).abs())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderStudy {
    pub ns: Vec<usize>,
    pub errors: Vec<f64>,
    /// Least-squares `-d log(error) / d log(n)`; `None` when fewer than two
    /// points sit above the rounding floor.
    pub slope: Option<f64>,
}

/// Points with errors below this are at the rounding floor and are left
/// out of the slope fit.
pub const ROUNDING_FLOOR: f64 = 100.0 * f64::EPSILON;

/// Least-squares slope of `log(errors)` against `log(ns)`, negated.
pub fn fitted_order(ns: &[usize], errors: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > ROUNDING_FLOOR)
        .map(|(&n, &e)| ((n as f64).ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Some(-sxy / sxx)
}

/// Convergence of the compact derivative of `sin` on `[0, 2 pi)`.
pub fn order_of_accuracy(
    kind: SchemeKind,
    solver: OrderSolver,
    ns: &[usize],
) -> Result<OrderStudy> {
    let errors = ns
        .iter()
        .map(|&n| match kind {
            SchemeKind::FirstDerivative => max_error(kind, solver, n, f64::sin, f64::cos),
            SchemeKind::SecondDerivative => max_error(kind, solver, n, f64::sin, |x| -x.sin()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OrderStudy {
        ns: ns.to_vec(),
        slope: fitted_order(ns, &errors),
        errors,
    })
}
