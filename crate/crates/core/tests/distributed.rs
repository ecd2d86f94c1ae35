use std::f64::consts::TAU;

use tds_core::compact::{assemble, sixth_order_first_derivative};
use tds_core::distd2::{solve_distributed, Distd2Options};
use tds_core::layout::{Direction, GroupedField, LayoutDescriptor};
use tds_core::transport::{exchange_halo, gather_to_root, spawn_ranks, Transport};
use tds_core::tridiag::{pdd_solve, RhsBatch, SubdomainPartition};
use tds_core::TdsError;

#[test]
fn derivative_along_y_after_reorder() {
    // f = sin(2y) cos(x); df/dy on 4 ranks along y
    let (nx, ny, nz) = (8, 256, 4);
    let h = TAU / ny as f64;
    let layout = LayoutDescriptor::new(nx, ny, nz, 4, Direction::X).unwrap();
    let f = GroupedField::from_fn(layout, |i, j, _| {
        (2.0 * j as f64 * h).sin() * (i as f64 * TAU / nx as f64).cos()
    });
    let fy = f.reorder(Direction::Y).unwrap();
    let (sys, stencil) = assemble(&sixth_order_first_derivative(h).unwrap(), ny, true).unwrap();
    let part = SubdomainPartition::even(ny, 4).unwrap();
    let run = solve_distributed(&sys, &stencil, &fy, &part, &Distd2Options::default()).unwrap();
    let df = run.solution.reorder(Direction::X).unwrap().unpack();
    let mut err = 0.0f64;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let exact = 2.0 * (2.0 * j as f64 * h).cos() * (i as f64 * TAU / nx as f64).cos();
                err = err.max((df.get(i, j, k) - exact).abs());
            }
        }
    }
    assert!(err < 1e-9, "{err:e}");
    assert!(run.max_dropped < 1e-14);
    assert!(run.solve_counters.iter().all(|c| c.rounds == 2));
}

#[test]
fn distd2_agrees_with_pdd_on_compact_operator() {
    let n = 256;
    let h = TAU / n as f64;
    let (sys, stencil) = assemble(&sixth_order_first_derivative(h).unwrap(), n, true).unwrap();
    let layout = LayoutDescriptor::new(n, 1, 1, 1, Direction::X).unwrap();
    let u = GroupedField::from_fn(layout, |i, _, _| (3.0 * i as f64 * h).cos() + 0.5);
    let part = SubdomainPartition::even(n, 4).unwrap();
    let dist = solve_distributed(&sys, &stencil, &u, &part, &Distd2Options::default()).unwrap();
    let d = tds_core::compact::apply_stencil(&stencil, &u.line(0, 0), true);
    let pdd = pdd_solve(&sys, &RhsBatch::single(d).unwrap(), &part).unwrap();
    let diff = dist
        .solution
        .line(0, 0)
        .iter()
        .zip(pdd.row(0))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff < 1e-13, "{diff:e}");
}

#[test]
fn ring_passes_rank_ids_forward() {
    use tds_core::transport::{MessageKind, NeighborMessage, Side};
    let got = spawn_ranks(4, true, |ctx| {
        let msg = NeighborMessage {
            kind: MessageKind::HaloLow,
            tag: 0,
            payload: vec![ctx.rank() as f64],
        };
        ctx.send(Side::Next, msg).unwrap();
        ctx.recv(Side::Prev).unwrap().payload[0] as usize
    })
    .unwrap();
    assert_eq!(got, vec![3, 0, 1, 2]);
}

#[test]
fn path_edges_have_no_outer_neighbour() {
    let errs = spawn_ranks(3, false, |ctx| {
        ctx.recv(tds_core::transport::Side::Prev).err()
    })
    .unwrap();
    assert!(matches!(
        errs[0],
        Some(TdsError::NoNeighbor { rank: 0, .. })
    ));
}

#[test]
fn halo_then_gather_preserves_rank_order() {
    let gathered = spawn_ranks(3, true, |ctx| {
        let layout = LayoutDescriptor::new(4, 2, 1, 2, Direction::X).unwrap();
        let r = ctx.rank() as f64;
        let local = GroupedField::from_fn(layout, move |i, _, _| 10.0 * r + i as f64);
        let halo = exchange_halo(ctx, &local, 2).unwrap();
        let low_first = halo.row(0, -2)[0];
        gather_to_root(ctx, &[low_first]).unwrap()
    })
    .unwrap();
    let root = gathered[0].clone().unwrap();
    // the low halo starts two rows before the end of the previous rank
    assert_eq!(root, vec![vec![22.0], vec![2.0], vec![12.0]]);
    assert!(gathered[1].is_none() && gathered[2].is_none());
}
