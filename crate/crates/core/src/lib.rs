//! Discrete coagulation-fragmentation kinetics with detailed balance.
//!
//! * [`kernel`]: coefficient families, cached tables and hypothesis checks.
//! * [`equilibrium`]: the detailed-balance sequence `Q`, `z_s`, `ρ_s` and the
//!   equilibrium of a given mass.
//! * [`dynamics`]: the truncated right-hand side and an adaptive integrator.
//! * [`functionals`]: free energy, relative energy, dissipation, distance to
//!   equilibrium, and the numerical H-theorem check.
//! * [`inequalities`]: evaluators for the estimates used in the long-time
//!   analysis and randomized sweeps over them.
//! * [`scenario`]: run configuration, experiment drivers and output files.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod equilibrium;
pub mod functionals;
pub mod inequalities;
pub mod kernel;
pub mod scenario;

pub use dynamics::{integrate, IntegratorConfig, Rhs, State};
pub use equilibrium::{build_q, solve_z, DbSequence};
pub use kernel::{KernelSpec, KernelTables};
