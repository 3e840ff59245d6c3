//! Single-shot thermodynamics of finite-level systems: thermo-majorization
//! feasibility decisions, compilation of feasible transitions into explicit
//! coarse-operation protocols (partial level thermalizations, level
//! transformations and two-level isothermal macros), full work accounting,
//! and independent brute-force oracles for cross-checking every decision.
//!
//! The data-parallel corpus evaluations and step simulations run under
//! rayon when the `parallel` feature (default) is enabled; the sequential
//! fallback shares the same chunked reduction order, so results are
//! bit-identical across modes.

pub mod corpus;
pub mod curve;
pub mod error;
pub mod exec;
pub mod ops;
pub mod oracle;
pub mod synth;
pub mod system;
pub mod work;
pub mod workdist;

pub use curve::{
    build_curve, horizontal_distance, majorization_margin, thermo_majorizes,
    thermo_majorizes_exact, ThermoCurve, DEFAULT_CURVE_TOL,
};
pub use error::{Result, ThermoError};
pub use exec::ExecMode;
pub use ops::{
    apply_lt, apply_pitr, apply_plt, apply_protocol, approx_points_flow, exact_points_flow,
    lt_work_distribution, pitr_work_stats, thermal_qubit, CoarseOp, Protocol,
};
pub use oracle::{brute_force_transition_work, gibbs_stochastic_feasible, plt_via_bath};
pub use synth::{
    synth_general, synth_general_approx, synth_same_order, synth_same_order_two_level,
    SynthesisReport,
};
pub use system::{
    beta_order, gibbs_state, partition_function, Beta, BetaOrdering, DiagonalState, Hamiltonian,
    ThermoSystem,
};
pub use work::{
    distillable_work, extraction_protocol, formation_protocol, switch_composite,
    wit_composite, work_of_formation, work_of_transition,
    work_of_transition_with_hamiltonian_change, ExtractionOutcome,
};
pub use workdist::{WorkBranch, WorkDistribution, WorkSummary};
