//! Trajectory-based dynamic-safety-margin control barrier functions.
//!
//! The library turns trajectory predictions of a prestabilized system into a
//! family of valid CBF constraints and solves the resulting QP safety filter
//! online:
//!
//! - [`model`]: prestabilized control-affine systems, equilibrium maps, and
//!   constraint maps with analytic or finite-difference Jacobians.
//! - [`flow`]: the adaptive Runge-Kutta integrator that propagates the flow
//!   together with its state and reference sensitivities.
//! - [`dsm`]: the finite-horizon dynamic safety margin and the per-sample
//!   linear CBF rows.
//! - [`terminal`]: the quadratic Lyapunov terminal margin that extends
//!   invariance beyond the horizon.
//! - [`qp`]: the dense active-set solver for the filter QP.
//! - [`filter`]: the online filter, the sampled-data closed loop, and trace
//!   output.
//! - [`pendulum`]: the inverted-pendulum-on-cart benchmark.
//! - [`verify`]: randomized oracle suites used by the CLI.

pub mod dsm;
pub mod error;
pub mod filter;
pub mod flow;
pub mod linalg;
pub mod model;
pub mod pendulum;
pub mod qp;
pub mod terminal;
pub mod verify;

pub use dsm::{eval_dsm, path_rows, CbfRow, DsmEvaluation, RowTag};
pub use error::{Error, Result};
pub use filter::{
    audit_cbf_inequality, nominal_targets, simulate, simulate_with, FallbackMode, FilterConfig,
    FilterOutput, SafetyFilter, Scenario, SimTrace, TerminalConfig, TraceRow,
};
pub use flow::{integrate_flow, integrate_raw, FlowBundle, IntegratorConfig, RawSolution};
pub use model::{AlphaFn, ConstraintMap, Dims, SystemModel};
pub use pendulum::{
    build_plant, make_pendulum_model, benchmark_scenario, pendulum_constraints, pendulum_dynamics,
    PendulumParams,
};
pub use qp::{solve, QpProblem, QpSolution, QpStatus};
pub use terminal::{
    build_terminal, eval_terminal, terminal_rows, QuadraticTerminalDsm, TerminalMode,
};
pub use verify::{
    run_invariance_suite, run_pendulum_asymptotes, run_pendulum_sensitivity,
    run_planar_asymptotes, run_qp_suite, run_sensitivity_suite, run_suite,
    sample_in_terminal_set, CaseResult, SuiteReport,
};
