//! Batched, distributed-memory tridiagonal solvers built around the DistD2
//! scheme and an SZ-grouped line layout.
//!
//! The crate is organised bottom-up:
//!
//! * [`tridiag`]: serial reference solvers (Thomas, periodic Thomas, dense
//!   oracle) and the modified-Thomas and PDD distributed schemes.
//! * [`layout`]: the grouped data structure and direction reorders.
//! * [`transport`]: simulated ranks with neighbour-only messaging.
//! * [`distd2`]: preprocessing, fused decoupling, 2x2 boundary solves and
//!   substitution across ranks.
//! * [`compact`]: compact finite-difference operators and the
//!   order-of-accuracy harness.
//! * [`movement`]: logical data-movement ledgers.
//! * [`pde`]: skew-symmetric momentum transport right-hand side on a
//!   periodic box.
//! * [`bench`]: benchmark and validation runners used by the `tds` binary.

pub mod bench;
pub mod compact;
pub mod distd2;
pub mod error;
pub mod layout;
pub mod movement;
pub mod pde;
pub mod transport;
pub mod tridiag;

pub use error::{Result, TdsError};
