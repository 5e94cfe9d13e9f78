//! Safety filters with a convergence deadline.
//!
//! The crate builds quadratic-program safety filters from control barrier
//! constraints and adds a goal constraint with a hard finite-time guarantee:
//! instead of asking the goal measure to decay at a state-dependent
//! fractional power (which needs unbounded authority far from the goal), the
//! goal set is inflated by a margin `r` and required to decay exponentially
//! at rate `k`. For the right `(r, k)` — computable in closed form from the
//! initial state, the deadline, and the control bounds — the inflated
//! constraint is satisfiable everywhere along the way, so the per-step QP
//! stays feasible and the system provably reaches the goal by the deadline.
//!
//! Modules, bottom up:
//!
//! - [`model`]: control-affine systems, constraint functions, Lie
//!   derivatives, control boxes.
//! - [`barriers`]: linear-in-control constraint rows for plain/high-order
//!   barrier functions, fractional-power goal terms, and the
//!   deadline-guaranteed goal term.
//! - [`qp`]: a dense dual active-set solver for the per-step program, with
//!   an explicit slack-relaxation fallback and a KKT-based certificate
//!   check.
//! - [`design`]: the feasible gain interval, reachable-band sampling, and
//!   validity checks for a candidate `(r, k)`.
//! - [`sim`]: fixed-step closed-loop simulation with event extraction.
//! - [`scenario`]: the TOML scenario schema and its expansion into run
//!   plans.
//! - [`bench`]: batch execution, CSV/JSON export, and artifact
//!   verification.
//!
//! The `fccbf` binary wraps the last three: `fccbf run`, `fccbf design`,
//! `fccbf verify`.

pub mod barriers;
pub mod bench;
pub mod design;
pub mod error;
pub mod model;
pub mod qp;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
