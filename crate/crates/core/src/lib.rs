//! Switched-waveform synthesis and optimization for two-level voltage-source
//! inverters driving a series R-L load.
//!
//! The crate builds sinusoidal PWM switching schedules with adjustable pulse
//! displacement factors, assembles balanced three-phase line voltages from
//! per-sector patterns, computes the exact periodic steady-state branch and
//! phase currents in closed form, measures harmonic distortion and sinusoid
//! tracking error, and searches the displacement factors for the current
//! waveform closest to the ideal sinusoid.
//!
//! Module map:
//! - [`schedule`]: half-wave symmetric switching schedules and their spectra.
//! - [`modulation`]: single-phase pulse placement from displacement factors.
//! - [`three_phase`]: sector patterns, line-voltage assembly, set validation.
//! - [`circuit`]: exact R-L steady state, references, numerical cross-check.
//! - [`metrics`]: THD, harmonic extraction, L2 tracking error.
//! - [`optimize`]: box-constrained multistart quasi-Newton search.

pub mod circuit;
pub mod metrics;
pub mod modulation;
pub mod optimize;
pub mod schedule;
pub mod three_phase;

pub use circuit::{
    ode_oracle, ode_phase_oracle, phase_current, single_phase_reference, steady_state_current,
    three_phase_reference, CircuitError, CurrentSegment, OdeSettings, OdeSolution, OracleError,
    PiecewiseCurrent, ReferenceSinusoid, RlBranch, ODE_MIN_STEPS,
};
pub use metrics::{
    current_harmonic, current_thd, l2_error, percent_improvement, rms, MetricsError, ThdReport,
    DEFAULT_MAX_HARMONIC,
};
pub use modulation::{
    build_schedule, pulse_widths, DisplacementFactors, ModulationError, PulseWidths,
    SinglePhaseConfig,
};
pub use optimize::{minimize, InverterConfig, Optimum, Problem, ProblemError, SolverSettings};
pub use schedule::{Harmonic, ScheduleError, SwitchingSchedule, INSTANT_COLLISION_TOL};
pub use three_phase::{
    assemble_line_voltage, sector_pattern, sector_widths, validate_line_voltages, Line,
    LineSchedule, LineVoltages, PulseGroup, SectorPattern, SectorWidths, ThreePhaseConfig,
    ThreePhaseError, ThreePhaseViolation,
};
