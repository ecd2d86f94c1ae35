//! Momentum transport in skew-symmetric form on a periodic box.
//!
//! For each velocity component `u_i` and direction `x_j` the kernel
//! evaluates
//!
//! `-1/2 (u_j du_i/dx_j + d(u_j u_i)/dx_j) + nu d2u_i/dx_j2`
//!
//! with compact derivatives, all three solves sharing one pass over the
//! grouped layout of direction `j`. The y and z passes work on reordered
//! copies of the inputs and are accumulated back into x-layout results.

use std::f64::consts::TAU;

use crate::compact::{assemble, differentiate, CompactScheme, OrderSolver, SchemeKind};
use crate::distd2::{
    complete_single_rank, decouple_fused, decouple_rows, Distd2Options, Distd2Plan,
};
use crate::error::{Result, TdsError};
use crate::layout::{CartesianField, Direction, GroupedField, LayoutDescriptor};
use crate::movement::{fused, KernelClass, MovementLedger};
use crate::transport::{exchange_halo, RankContext, Transport};
use crate::tridiag::SubdomainPartition;

/// Three velocity components on a periodic `[0, 2 pi)^3` box, stored along x.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub u: [GroupedField; 3],
    pub nu: f64,
    pub h: [f64; 3],
}

impl VelocityField {
    pub fn new(u: [GroupedField; 3], nu: f64) -> Result<Self> {
        let layout = *u[0].layout();
        if layout.direction() != Direction::X || u.iter().any(|c| *c.layout() != layout) {
            return Err(TdsError::ShapeMismatch(
                "velocity components must share one x-direction layout".into(),
            ));
        }
        if !nu.is_finite() || nu < 0.0 || u.iter().any(|c| c.data().iter().any(|v| !v.is_finite()))
        {
            return Err(TdsError::Config(
                "velocity and viscosity must be finite, nu >= 0".into(),
            ));
        }
        let e = layout.extents();
        Ok(Self {
            u,
            nu,
            h: [TAU / e[0] as f64, TAU / e[1] as f64, TAU / e[2] as f64],
        })
    }

    /// Samples `f(x, y, z)` at the grid points.
    pub fn from_fn(
        extents: [usize; 3],
        sz: usize,
        nu: f64,
        f: impl Fn(f64, f64, f64) -> [f64; 3],
    ) -> Result<Self> {
        let layout = LayoutDescriptor::new(extents[0], extents[1], extents[2], sz, Direction::X)?;
        let h = extents.map(|n| TAU / n as f64);
        let at =
            |i: usize, j: usize, k: usize| f(i as f64 * h[0], j as f64 * h[1], k as f64 * h[2]);
        let u = [0, 1, 2].map(|c| GroupedField::from_fn(layout, |i, j, k| at(i, j, k)[c]));
        Self::new(u, nu)
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        self.u[0].layout()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    pub fn kinetic_energy(&self) -> f64 {
        let sum: f64 = self.u.iter().flat_map(|c| c.data()).map(|v| v * v).sum();
        0.5 * sum * self.cell_volume()
    }
}

/// Solver plans for the first and second derivative along one direction.
#[derive(Debug, Clone)]
struct DirectionPlans {
    first: Distd2Plan,
    second: Distd2Plan,
}

/// Precomputed operators for one grid.
#[derive(Debug, Clone)]
pub struct TransportOperator {
    plans: [DirectionPlans; 3],
    layout: LayoutDescriptor,
}

fn single_rank_plan(kind: SchemeKind, n: usize) -> Result<Distd2Plan> {
    let scheme = CompactScheme::new(kind, TAU / n as f64)?;
    let (sys, stencil) = assemble(&scheme, n, true)?;
    let mut ctx = RankContext::solo(true);
    Distd2Plan::new(
        &mut ctx,
        &sys,
        &stencil,
        &SubdomainPartition::new(vec![n])?,
        &Distd2Options::default(),
    )
}

impl TransportOperator {
    pub fn new(layout: &LayoutDescriptor) -> Result<Self> {
        let e = layout.extents();
        let plans = [0, 1, 2].map(|d| -> Result<DirectionPlans> {
            Ok(DirectionPlans {
                first: single_rank_plan(SchemeKind::FirstDerivative, e[d])?,
                second: single_rank_plan(SchemeKind::SecondDerivative, e[d])?,
            })
        });
        let [x, y, z] = plans;
        Ok(Self {
            plans: [x?, y?, z?],
            layout: layout.with_direction(Direction::X)?,
        })
    }
}

/// Result of one directional kernel call.
#[derive(Debug, Clone)]
pub struct KernelOutput {
    pub field: GroupedField,
    /// Distinct input fields the kernel read.
    pub distinct_inputs: usize,
}

/// Contribution of direction `j` to the transport of `u_i`. `fields` must
/// be stored along `j`.
pub fn directional_contribution(
    op: &TransportOperator,
    nu: f64,
    i: usize,
    j: usize,
    fields: &[GroupedField; 3],
) -> Result<KernelOutput> {
    if i > 2 || j > 2 {
        return Err(TdsError::Config(format!(
            "component ({i}, {j}) out of range"
        )));
    }
    let layout = fields[i].layout();
    if layout.direction().axis() != j || fields[j].layout() != layout {
        return Err(TdsError::ShapeMismatch(format!(
            "inputs of direction {j} must be stored along it"
        )));
    }
    let inputs: Vec<&GroupedField> = if i == j {
        vec![&fields[i]]
    } else {
        vec![&fields[i], &fields[j]]
    };
    let plans = &op.plans[j];

    let mut ctx = RankContext::solo(true);
    ctx.begin_epoch();
    let halos = inputs
        .iter()
        .map(|f| exchange_halo(&mut ctx, f, plans.first.stencil.halo_depth))
        .collect::<Result<Vec<_>>>()?;
    let (hi, hj) = (&halos[0], &halos[halos.len() - 1]);

    let mut du = decouple_fused(hi, &plans.first.coeffs, &plans.first.stencil)?;
    let weights = &plans.first.stencil.rows;
    let mut dprod = decouple_rows(layout, &plans.first.coeffs, |g, pos, row| {
        let w = &weights[pos];
        let p = pos as isize;
        for (l, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let q = p + k as isize - 2;
                acc += wk * (hj.row(g, q)[l] * hi.row(g, q)[l]);
            }
            *out = acc;
        }
    })?;
    let mut d2u = decouple_fused(hi, &plans.second.coeffs, &plans.second.stencil)?;
    complete_single_rank(&mut du, &plans.first.coeffs)?;
    complete_single_rank(&mut dprod, &plans.first.coeffs)?;
    complete_single_rank(&mut d2u, &plans.second.coeffs)?;

    let uj = inputs[inputs.len() - 1].data();
    let mut field = du;
    for (((out, &p), &s), &v) in field
        .data_mut()
        .iter_mut()
        .zip(dprod.data())
        .zip(d2u.data())
        .zip(uj)
    {
        *out = -0.5 * (v * *out + p) + nu * s;
    }
    Ok(KernelOutput {
        field,
        distinct_inputs: inputs.len(),
    })
}

/// Everything one right-hand-side evaluation produced.
#[derive(Debug, Clone)]
pub struct TransportEvaluation {
    /// Right-hand side of each component, stored along x.
    pub rhs: [GroupedField; 3],
    pub ledger: MovementLedger,
    /// `(i, j, distinct inputs)` per kernel call, in call order.
    pub kernel_inputs: Vec<(usize, usize, usize)>,
}

/// Full right-hand side: x kernels, then y and z kernels on reordered
/// inputs with results accumulated into the x-layout outputs.
pub fn evaluate_transport_rhs(
    op: &TransportOperator,
    fields: &VelocityField,
) -> Result<TransportEvaluation> {
    if fields.layout() != &op.layout {
        return Err(TdsError::ShapeMismatch(
            "operator built for another grid".into(),
        ));
    }
    let mut ledger = MovementLedger::new(false);
    let mut kernel_inputs = Vec::with_capacity(9);
    let mut rhs: Vec<GroupedField> = Vec::with_capacity(3);
    for dir in Direction::ALL {
        let j = dir.axis();
        let reordered;
        let inputs = if dir == Direction::X {
            &fields.u
        } else {
            reordered = [
                fields.u[0].reorder(dir)?,
                fields.u[1].reorder(dir)?,
                fields.u[2].reorder(dir)?,
            ];
            ledger.record_calls(KernelClass::Reorder, fused::REORDER, 3);
            &reordered
        };
        for i in 0..3 {
            let out = directional_contribution(op, fields.nu, i, j, inputs)?;
            let (class, traffic) = if i == j {
                (KernelClass::Diagonal, fused::DIAGONAL)
            } else {
                (KernelClass::OffDiagonal, fused::OFF_DIAGONAL)
            };
            ledger.record(class, traffic);
            kernel_inputs.push((i, j, out.distinct_inputs));
            if dir == Direction::X {
                rhs.push(out.field);
            } else {
                rhs[i].accumulate_from(&out.field)?;
                ledger.record(KernelClass::Accumulate, fused::ACCUMULATE);
            }
        }
    }
    let [a, b, c]: [GroupedField; 3] = rhs.try_into().expect("three components");
    Ok(TransportEvaluation {
        rhs: [a, b, c],
        ledger,
        kernel_inputs,
    })
}

/// Term-by-term evaluation on Cartesian storage, one periodic Thomas solve
/// per derivative and line.
pub fn naive_transport_rhs(fields: &VelocityField) -> Result<[CartesianField; 3]> {
    let u = fields.u.clone().map(|c| c.unpack());
    let [nx, ny, nz] = u[0].extents();
    let ext = [nx, ny, nz];
    let mut out = [0, 1, 2].map(|_| CartesianField::from_fn(nx, ny, nz, |_, _, _| 0.0));
    for d in 0..3 {
        let n = ext[d];
        let first = CompactScheme::new(SchemeKind::FirstDerivative, fields.h[d])?;
        let second = CompactScheme::new(SchemeKind::SecondDerivative, fields.h[d])?;
        let (e1, e2) = ([1, 0, 0][d], [2, 2, 1][d]);
        let (m1, m2) = (ext[e1], ext[e2]);
        for a in 0..m1 {
            for b in 0..m2 {
                let coord = |p: usize| {
                    let mut c = [0; 3];
                    c[d] = p;
                    c[e1] = a;
                    c[e2] = b;
                    c
                };
                let line = |f: &CartesianField| -> Vec<f64> {
                    (0..n)
                        .map(|p| {
                            let [i, j, k] = coord(p);
                            f.get(i, j, k)
                        })
                        .collect()
                };
                let ud = line(&u[d]);
                for c in 0..3 {
                    let ui = line(&u[c]);
                    let prod: Vec<f64> = ud.iter().zip(&ui).map(|(x, y)| x * y).collect();
                    let dui = differentiate(&first, &ui, true, OrderSolver::Thomas)?;
                    let dprod = differentiate(&first, &prod, true, OrderSolver::Thomas)?;
                    let d2ui = differentiate(&second, &ui, true, OrderSolver::Thomas)?;
                    for p in 0..n {
                        let [i, j, k] = coord(p);
                        let term = -0.5 * (ud[p] * dui[p] + dprod[p]) + fields.nu * d2ui[p];
                        let prev = out[c].get(i, j, k);
                        out[c].set(i, j, k, prev + term);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `u + dt * rhs(u)`.
pub fn forward_euler_step(
    op: &TransportOperator,
    fields: &VelocityField,
    dt: f64,
) -> Result<VelocityField> {
    let eval = evaluate_transport_rhs(op, fields)?;
    let mut u = fields.u.clone();
    for (c, r) in u.iter_mut().zip(&eval.rhs) {
        for (v, dv) in c.data_mut().iter_mut().zip(r.data()) {
            *v += dt * dv;
        }
    }
    VelocityField::new(u, fields.nu)
}

/// `sum_i u_i . rhs_i dV`: the rate of change of kinetic energy.
pub fn energy_rate(fields: &VelocityField, rhs: &[GroupedField; 3]) -> f64 {
    let s: f64 = fields
        .u
        .iter()
        .zip(rhs)
        .flat_map(|(u, r)| u.data().iter().zip(r.data()).map(|(a, b)| a * b))
        .sum();
    s * fields.cell_volume()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_green(n: usize, nu: f64) -> VelocityField {
        VelocityField::from_fn([n, n, n], 8, nu, |x, y, z| {
            [
                x.sin() * y.cos() * z.cos(),
                -x.cos() * y.sin() * z.cos(),
                0.0,
            ]
        })
        .unwrap()
    }

    fn max_rel(a: &[GroupedField; 3], b: &[CartesianField; 3]) -> f64 {
        let scale = b
            .iter()
            .flat_map(|f| f.data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| {
                let x = x.unpack();
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(p, q)| (p - q).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0f64, f64::max)
            / scale
    }

    #[test]
    fn constant_field_has_zero_rhs() {
        let f = VelocityField::from_fn([8, 8, 8], 8, 0.1, |_, _, _| [1.0, -2.0, 0.5]).unwrap();
        let op = TransportOperator::new(f.layout()).unwrap();
        let eval = evaluate_transport_rhs(&op, &f).unwrap();
        for r in &eval.rhs {
            assert!(r.max_abs() < 1e-12, "{}", r.max_abs());
        }
    }

    #[test]
    fn one_dimensional_wave_matches_closed_form() {
        let nu = 0.05;
        let wave = |n: usize| {
            let f =
                VelocityField::from_fn([n, 8, 8], 8, nu, |x, _, _| [x.sin(), 0.0, 0.0]).unwrap();
            let op = TransportOperator::new(f.layout()).unwrap();
            let out = directional_contribution(&op, nu, 0, 0, &f.u).unwrap();
            assert_eq!(out.distinct_inputs, 1);
            (f, out.field)
        };

        // on the grid, each Fourier mode is differentiated exactly by the
        // scheme's modified wavenumber
        let (f, got) = wave(64);
        let h = f.h[0];
        let d1 = |k: f64| {
            let kh = k * h;
            (14.0 / 9.0 * kh.sin() + 1.0 / 18.0 * (2.0 * kh).sin())
                / (1.0 + 2.0 / 3.0 * kh.cos())
                / h
        };
        let d2 = |k: f64| {
            let kh = k * h;
            let num = 24.0 / 11.0 * (1.0 - kh.cos()) + 3.0 / 22.0 * (1.0 - (2.0 * kh).cos());
            num / (1.0 + 4.0 / 11.0 * kh.cos()) / (h * h)
        };
        let discrete = GroupedField::from_fn(*f.layout(), |i, _, _| {
            let x = i as f64 * h;
            // u du/dx + d(u^2)/dx with u^2 = (1 - cos 2x) / 2
            let adv = x.sin() * d1(1.0) * x.cos() + 0.5 * d1(2.0) * (2.0 * x).sin();
            -0.5 * adv - nu * d2(1.0) * x.sin()
        });
        let err = got.max_abs_diff(&discrete);
        assert!(err < 1e-13, "{err:e}");

        let (f, got) = wave(128);
        let exact = GroupedField::from_fn(*f.layout(), |i, _, _| {
            let x = i as f64 * f.h[0];
            -1.5 * x.sin() * x.cos() - nu * x.sin()
        });
        let err = got.max_abs_diff(&exact);
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn ledger_matches_kernel_schedule() {
        let f = taylor_green(8, 0.01);
        let op = TransportOperator::new(f.layout()).unwrap();
        let eval = evaluate_transport_rhs(&op, &f).unwrap();
        let l = &eval.ledger;
        assert_eq!(l.calls(KernelClass::OffDiagonal), 6);
        assert_eq!(l.calls(KernelClass::Diagonal), 3);
        assert_eq!(l.calls(KernelClass::Reorder), 6);
        assert_eq!(l.calls(KernelClass::Accumulate), 6);
        assert_eq!(l.total_units(), 171);
        for (i, j, k) in &eval.kernel_inputs {
            assert_eq!(*k, if i == j { 1 } else { 2 });
        }
    }

    #[test]
    fn fused_pipeline_matches_naive_reference() {
        let f = VelocityField::from_fn([16, 16, 16], 8, 0.02, |x, y, z| {
            [
                (x + 2.0 * y).sin() + 0.3 * z.cos(),
                (y - z).cos() * x.sin(),
                (3.0 * z).sin() + y.cos(),
            ]
        })
        .unwrap();
        let op = TransportOperator::new(f.layout()).unwrap();
        let fusedrhs = evaluate_transport_rhs(&op, &f).unwrap().rhs;
        let naive = naive_transport_rhs(&f).unwrap();
        let rel = max_rel(&fusedrhs, &naive);
        assert!(rel < 1e-12, "{rel:e}");
    }

    #[test]
    fn inviscid_energy_is_conserved() {
        let f = VelocityField::from_fn([16, 16, 16], 8, 0.0, |x, y, z| {
            [
                x.sin() * y.cos() * z.cos() + 0.2 * (2.0 * z).sin(),
                -x.cos() * y.sin() * z.cos(),
                0.3 * (x + y).cos(),
            ]
        })
        .unwrap();
        let op = TransportOperator::new(f.layout()).unwrap();
        let rhs = evaluate_transport_rhs(&op, &f).unwrap().rhs;
        let scale: f64 =
            f.u.iter()
                .zip(&rhs)
                .flat_map(|(u, r)| u.data().iter().zip(r.data()).map(|(a, b)| (a * b).abs()))
                .sum::<f64>()
                * f.cell_volume();
        let rate = energy_rate(&f, &rhs);
        assert!(rate.abs() < 1e-10 * scale, "{rate:e} vs {scale:e}");
    }

    #[test]
    fn viscous_term_is_linear_in_nu() {
        let rhs_at = |nu: f64| {
            let f = taylor_green(8, nu);
            let op = TransportOperator::new(f.layout()).unwrap();
            evaluate_transport_rhs(&op, &f).unwrap().rhs
        };
        let (r0, r1, r3) = (rhs_at(0.0), rhs_at(0.1), rhs_at(0.3));
        for c in 0..3 {
            for ((a, b), d) in r0[c].data().iter().zip(r1[c].data()).zip(r3[c].data()) {
                assert!(((d - a) - 3.0 * (b - a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_steps_dissipate_energy() {
        let mut f = taylor_green(8, 0.1);
        let op = TransportOperator::new(f.layout()).unwrap();
        let e0 = f.kinetic_energy();
        for _ in 0..5 {
            f = forward_euler_step(&op, &f, 0.01).unwrap();
        }
        let e1 = f.kinetic_energy();
        assert!(e1.is_finite() && e1 < e0, "{e0} -> {e1}");
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let f = taylor_green(8, 0.0);
        let op = TransportOperator::new(f.layout()).unwrap();
        assert!(directional_contribution(&op, 0.0, 0, 1, &f.u).is_err());
        let other = taylor_green(16, 0.0);
        assert!(evaluate_transport_rhs(&op, &other).is_err());
    }
}
