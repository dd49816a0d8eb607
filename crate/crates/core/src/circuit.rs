//! Exact periodic steady state of a series R-L branch under switched drive.
//!
//! Between switching instants the branch voltage is constant, so the current
//! on each segment is a shifted exponential a exp(-(t - s)/tau) + c. Matching
//! endpoints forward and imposing half-wave antisymmetry of the periodic
//! solution fixes every coefficient in closed form. Coefficients are stored
//! against each segment's own start time, which keeps every evaluated
//! exponent non-positive; the construction therefore stays in f64 range even
//! for time constants four orders of magnitude below the period.

use crate::schedule::{SwitchingSchedule, INSTANT_COLLISION_TOL};
use thiserror::Error;

/// Ways load parameters or oracle settings can be invalid.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CircuitError {
    #[error("resistance must be positive and finite, got {0} ohm")]
    InvalidResistance(f64),
    #[error("inductance must be positive and finite, got {0} H")]
    InvalidInductance(f64),
}

/// Failure modes of the numerical cross-check integrator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("integrator needs at least {minimum} steps per period, got {got}")]
    TooFewSteps { got: usize, minimum: usize },
    #[error("no periodic convergence after {periods} periods, residual {residual}")]
    NotConverged { periods: usize, residual: f64 },
}

/// Series resistor and inductor load on the inverter output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlBranch {
    /// Ohms.
    pub resistance: f64,
    /// Henries.
    pub inductance: f64,
}

impl RlBranch {
    pub fn validate(&self) -> Result<(), CircuitError> {
        if !self.resistance.is_finite() || self.resistance <= 0.0 {
            return Err(CircuitError::InvalidResistance(self.resistance));
        }
        if !self.inductance.is_finite() || self.inductance <= 0.0 {
            return Err(CircuitError::InvalidInductance(self.inductance));
        }
        Ok(())
    }

    /// L/R in seconds.
    pub fn time_constant(&self) -> f64 {
        self.inductance / self.resistance
    }

    /// |R + jwL| in ohms.
    pub fn impedance(&self, angular_frequency: f64) -> f64 {
        self.resistance.hypot(angular_frequency * self.inductance)
    }

    /// Current lag behind voltage, atan(wL/R), in radians.
    pub fn phase_lag(&self, angular_frequency: f64) -> f64 {
        (angular_frequency * self.inductance).atan2(self.resistance)
    }
}

/// One exponential arc: value(t) = coeff * exp(-(t - start)/tau) + offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentSegment {
    pub start: f64,
    pub end: f64,
    pub coeff: f64,
    pub offset: f64,
}

impl CurrentSegment {
    pub fn width(&self) -> f64 {
        self.end - self.start
    }
}

/// Piecewise exponential periodic waveform on [0, T].
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseCurrent {
    boundaries: Vec<f64>,
    coeffs: Vec<f64>,
    offsets: Vec<f64>,
    time_constant: f64,
    period: f64,
    forcing_scale: f64,
}

impl PiecewiseCurrent {
    pub fn segment_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn time_constant(&self) -> f64 {
        self.time_constant
    }

    /// Amplitude scale V/R of the waveform that drove this current. Used as
    /// the yardstick for negligible-fundamental detection.
    pub fn forcing_scale(&self) -> f64 {
        self.forcing_scale
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn segment(&self, index: usize) -> CurrentSegment {
        CurrentSegment {
            start: self.boundaries[index],
            end: self.boundaries[index + 1],
            coeff: self.coeffs[index],
            offset: self.offsets[index],
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = CurrentSegment> + '_ {
        (0..self.segment_count()).map(|j| self.segment(j))
    }

    /// Current value at time t, periodic in T, right-continuous at segment
    /// boundaries. The waveform itself is continuous, so the convention only
    /// matters for locating the evaluation segment.
    pub fn value_at(&self, t: f64) -> f64 {
        let reduced = t.rem_euclid(self.period);
        let last = self.segment_count() - 1;
        let j = self
            .boundaries
            .partition_point(|&b| b <= reduced)
            .saturating_sub(1)
            .min(last);
        self.coeffs[j] * (-(reduced - self.boundaries[j]) / self.time_constant).exp()
            + self.offsets[j]
    }
}

/// Closed-form periodic steady state of the branch current for a switched
/// schedule. The result satisfies i(t + T/2) = -i(t) exactly by construction.
pub fn steady_state_current(
    schedule: &SwitchingSchedule,
    branch: &RlBranch,
) -> Result<PiecewiseCurrent, CircuitError> {
    branch.validate()?;
    let tau = branch.time_constant();
    let half = schedule.half_period();
    let scale = schedule.amplitude() / branch.resistance;

    // i(0+) from the alternating edge sum; every exponent is -(T/2 - t_n)/tau.
    let mut edge_sum = 0.0;
    for (index, &t) in schedule.instants().iter().enumerate() {
        let sign = if index % 2 == 0 { -1.0 } else { 1.0 };
        edge_sum += sign * (-(half - t) / tau).exp();
    }
    let start_value = -scale * edge_sum / (1.0 + (-half / tau).exp());

    let mut half_bounds = Vec::with_capacity(schedule.instants().len() + 2);
    half_bounds.push(0.0);
    half_bounds.extend_from_slice(schedule.instants());
    half_bounds.push(half);

    let segment_count = half_bounds.len() - 1;
    let mut coeffs = Vec::with_capacity(2 * segment_count);
    let mut offsets = Vec::with_capacity(2 * segment_count);
    let mut value = start_value;
    for j in 0..segment_count {
        let offset = if j % 2 == 1 { scale } else { 0.0 };
        let coeff = value - offset;
        coeffs.push(coeff);
        offsets.push(offset);
        let width = half_bounds[j + 1] - half_bounds[j];
        value = coeff * (-width / tau).exp() + offset;
    }

    let mut boundaries = half_bounds.clone();
    for &b in &half_bounds[1..] {
        boundaries.push(half + b);
    }
    for j in 0..segment_count {
        coeffs.push(-coeffs[j]);
        offsets.push(-offsets[j]);
    }

    Ok(PiecewiseCurrent {
        boundaries,
        coeffs,
        offsets,
        time_constant: tau,
        period: schedule.period(),
        forcing_scale: scale,
    })
}

/// Phase-a current of a balanced three-phase load from the line-to-line
/// branch current: i_a(t) = (i_line(t) - i_line(t + T/3)) / 3, merged onto a
/// single segment list with the same time constant.
pub fn phase_current(line_current: &PiecewiseCurrent) -> PiecewiseCurrent {
    let period = line_current.period;
    let third = period / 3.0;
    let tau = line_current.time_constant;
    let tol = INSTANT_COLLISION_TOL * period;

    let mut merged: Vec<f64> = Vec::with_capacity(2 * line_current.boundaries.len());
    merged.extend_from_slice(&line_current.boundaries);
    for &b in &line_current.boundaries {
        merged.push((b - third).rem_euclid(period));
    }
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut bounds = Vec::with_capacity(merged.len());
    for b in merged {
        if bounds.last().is_none_or(|&last| b - last > tol) {
            bounds.push(b);
        }
    }
    bounds[0] = 0.0;
    if period - bounds[bounds.len() - 1] > tol {
        bounds.push(period);
    } else {
        let last = bounds.len() - 1;
        bounds[last] = period;
    }

    let locate = |x: f64| -> usize {
        line_current
            .boundaries
            .partition_point(|&b| b <= x)
            .saturating_sub(1)
            .min(line_current.segment_count() - 1)
    };

    let segment_count = bounds.len() - 1;
    let mut coeffs = Vec::with_capacity(segment_count);
    let mut offsets = Vec::with_capacity(segment_count);
    for j in 0..segment_count {
        let start = bounds[j];
        let mid = 0.5 * (bounds[j] + bounds[j + 1]);
        let j1 = locate(mid);
        let wrapped = mid + third >= period;
        let shift = if wrapped { third - period } else { third };
        let j2 = locate(mid + shift);
        let d1 = start - line_current.boundaries[j1];
        let d2 = start + shift - line_current.boundaries[j2];
        let a = (line_current.coeffs[j1] * (-d1 / tau).exp()
            - line_current.coeffs[j2] * (-d2 / tau).exp())
            / 3.0;
        let c = (line_current.offsets[j1] - line_current.offsets[j2]) / 3.0;
        coeffs.push(a);
        offsets.push(c);
    }

    PiecewiseCurrent {
        boundaries: bounds,
        coeffs,
        offsets,
        time_constant: tau,
        period,
        forcing_scale: line_current.forcing_scale,
    }
}

/// Target sinusoid value(t) = amplitude * sin(w t - phase), phase > 0 lagging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSinusoid {
    pub amplitude: f64,
    pub phase: f64,
    pub angular_frequency: f64,
}

impl ReferenceSinusoid {
    pub fn value_at(&self, t: f64) -> f64 {
        self.amplitude * (self.angular_frequency * t - self.phase).sin()
    }
}

/// Fundamental current an ideal sinusoidal source of the given amplitude
/// would drive through the branch.
pub fn single_phase_reference(
    target_amplitude: f64,
    frequency: f64,
    branch: &RlBranch,
) -> ReferenceSinusoid {
    let w = 2.0 * std::f64::consts::PI * frequency;
    ReferenceSinusoid {
        amplitude: target_amplitude / branch.impedance(w),
        phase: branch.phase_lag(w),
        angular_frequency: w,
    }
}

/// Phase-a reference of a balanced three-phase load driven by line voltages
/// of the given amplitude: magnitude shrinks by sqrt(3) and the lag grows by
/// pi/6 relative to the line-to-line case.
pub fn three_phase_reference(
    target_amplitude: f64,
    frequency: f64,
    branch: &RlBranch,
) -> ReferenceSinusoid {
    let w = 2.0 * std::f64::consts::PI * frequency;
    ReferenceSinusoid {
        amplitude: target_amplitude / (3.0f64.sqrt() * branch.impedance(w)),
        phase: std::f64::consts::FRAC_PI_6 + branch.phase_lag(w),
        angular_frequency: w,
    }
}

/// Settings of the direct numerical integration used to cross-check the
/// closed form. Steps never straddle a switching edge: the integration grid
/// is the union of the uniform sample grid and all edges, and the forcing is
/// captured once per grid interval. A uniform-grid integrator that steps
/// across edges commits O(h) flux errors at every crossing and cannot reach
/// the accuracy this oracle is used to certify.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeSettings {
    /// Uniform samples per period; also bounds the step size. At least 1e4.
    pub steps_per_period: usize,
    /// Give up after this many periods without periodic convergence.
    pub max_periods: usize,
    /// Periodic convergence: relative RMS change between consecutive periods.
    pub convergence_tol: f64,
}

impl Default for OdeSettings {
    fn default() -> Self {
        Self {
            steps_per_period: 20_000,
            max_periods: 10_000,
            convergence_tol: 1e-10,
        }
    }
}

/// Minimum allowed steps per period for the cross-check integrator.
pub const ODE_MIN_STEPS: usize = 10_000;

/// Samples of one converged period of the numerically integrated current.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    /// Sample times within [0, T), uniformly spaced.
    pub times: Vec<f64>,
    /// Current at the sample times.
    pub values: Vec<f64>,
    /// Periods integrated before convergence.
    pub periods: usize,
}

struct GridPoint {
    time: f64,
    is_sample: bool,
}

fn integration_grid(period: f64, steps: usize, edges: &[f64]) -> Vec<GridPoint> {
    let tol = INSTANT_COLLISION_TOL * period;
    let mut times: Vec<(f64, bool)> = (0..=steps)
        .map(|k| (period * k as f64 / steps as f64, true))
        .collect();
    for &e in edges {
        let wrapped = e.rem_euclid(period);
        times.push((wrapped, false));
    }
    times.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut grid: Vec<GridPoint> = Vec::with_capacity(times.len());
    for (time, is_sample) in times {
        match grid.last_mut() {
            Some(last) if time - last.time <= tol => last.is_sample |= is_sample,
            _ => grid.push(GridPoint { time, is_sample }),
        }
    }
    grid
}

/// One classical 4th-order step of i' = (v - R i)/L with constant v.
fn rk4_step(value: f64, forcing: f64, h: f64, branch: &RlBranch) -> f64 {
    let f = |i: f64| (forcing - branch.resistance * i) / branch.inductance;
    let k1 = f(value);
    let k2 = f(value + 0.5 * h * k1);
    let k3 = f(value + 0.5 * h * k2);
    let k4 = f(value + h * k3);
    value + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

fn run_oracle(
    period: f64,
    settings: &OdeSettings,
    branch: &RlBranch,
    edges: &[f64],
    state_dim: usize,
    forcing_for_state: impl Fn(usize, f64) -> f64,
    state_to_output: impl Fn(&[f64]) -> f64,
) -> Result<OdeSolution, OracleError> {
    if settings.steps_per_period < ODE_MIN_STEPS {
        return Err(OracleError::TooFewSteps {
            got: settings.steps_per_period,
            minimum: ODE_MIN_STEPS,
        });
    }
    let grid = integration_grid(period, settings.steps_per_period, edges);
    let mut state = vec![0.0f64; state_dim];
    let mut previous: Vec<f64> = Vec::new();
    let mut samples: Vec<f64> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    let mut last_residual = f64::INFINITY;
    for period_index in 1..=settings.max_periods {
        samples.clear();
        times.clear();
        for w in 0..grid.len() {
            let point = &grid[w];
            if point.is_sample && point.time < period {
                samples.push(state_to_output(&state));
                times.push(point.time);
            }
            if w + 1 < grid.len() {
                let h = grid[w + 1].time - point.time;
                let mid = point.time + 0.5 * h;
                for s in 0..state_dim {
                    state[s] = rk4_step(state[s], forcing_for_state(s, mid), h, branch);
                }
            }
        }
        if !previous.is_empty() {
            let mut diff2 = 0.0;
            let mut norm2 = 0.0;
            for (cur, prev) in samples.iter().zip(previous.iter()) {
                diff2 += (cur - prev) * (cur - prev);
                norm2 += cur * cur;
            }
            last_residual = (diff2 / norm2.max(f64::MIN_POSITIVE)).sqrt();
            if last_residual < settings.convergence_tol {
                return Ok(OdeSolution {
                    times: times.clone(),
                    values: samples.clone(),
                    periods: period_index,
                });
            }
        }
        previous = samples.clone();
    }
    Err(OracleError::NotConverged {
        periods: settings.max_periods,
        residual: last_residual,
    })
}

/// Numerically integrates the branch ODE from rest until the solution is
/// periodic, returning one period of uniform samples.
pub fn ode_oracle(
    schedule: &SwitchingSchedule,
    branch: &RlBranch,
    settings: &OdeSettings,
) -> Result<OdeSolution, OracleError> {
    branch.validate()?;
    let period = schedule.period();
    let mut edges: Vec<f64> = schedule.instants().to_vec();
    for &t in schedule.instants() {
        edges.push(t + schedule.half_period());
    }
    run_oracle(
        period,
        settings,
        branch,
        &edges,
        1,
        |_, t| schedule.voltage_at(t),
        |state| state[0],
    )
}

/// Numerically integrates the two line-branch ODEs driven by v(t) and
/// v(t + T/3) and returns phase-a samples (i1 - i2)/3.
pub fn ode_phase_oracle(
    schedule: &SwitchingSchedule,
    branch: &RlBranch,
    settings: &OdeSettings,
) -> Result<OdeSolution, OracleError> {
    branch.validate()?;
    let period = schedule.period();
    let third = period / 3.0;
    let mut edges: Vec<f64> = Vec::new();
    for &t in schedule.instants() {
        for base in [t, t + schedule.half_period()] {
            edges.push(base);
            edges.push(base - third);
        }
    }
    run_oracle(
        period,
        settings,
        branch,
        &edges,
        2,
        |s, t| {
            if s == 0 {
                schedule.voltage_at(t)
            } else {
                schedule.voltage_at(t + third)
            }
        },
        |state| (state[0] - state[1]) / 3.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::{build_schedule, DisplacementFactors, SinglePhaseConfig};

    const T: f64 = 1.0 / 60.0;
    const V: f64 = 300.0;

    fn square_wave() -> SwitchingSchedule {
        SwitchingSchedule::new(vec![0.0, T / 2.0], T, V).unwrap()
    }

    fn pwm_schedule(pulses: usize, m: f64) -> SwitchingSchedule {
        let cfg = SinglePhaseConfig {
            dc_voltage: V,
            frequency: 60.0,
            modulation_index: m,
            pulses,
        };
        build_schedule(&cfg, &DisplacementFactors::conventional(pulses)).unwrap()
    }

    #[test]
    fn rejects_invalid_branches() {
        let branch = RlBranch {
            resistance: 0.0,
            inductance: 1e-4,
        };
        assert_eq!(branch.validate(), Err(CircuitError::InvalidResistance(0.0)));
        let branch = RlBranch {
            resistance: 1.0,
            inductance: f64::INFINITY,
        };
        assert!(matches!(
            branch.validate(),
            Err(CircuitError::InvalidInductance(_))
        ));
    }

    #[test]
    fn square_wave_peak_matches_closed_form() {
        let branch = RlBranch {
            resistance: 1.0,
            inductance: 1e-3,
        };
        let current = steady_state_current(&square_wave(), &branch).unwrap();
        let tau = branch.time_constant();
        let expected = V / branch.resistance
            * (1.0 - 2.0 * (-T / (4.0 * tau)).exp() / (1.0 + (-T / (2.0 * tau)).exp()));
        assert!(
            (current.value_at(T / 4.0) - expected).abs() < 1e-12 * expected.abs(),
            "{} vs {expected}",
            current.value_at(T / 4.0)
        );
    }

    #[test]
    fn steady_state_is_continuous_and_antisymmetric() {
        let schedule = pwm_schedule(11, 0.9);
        for branch in [
            RlBranch {
                resistance: 1.0,
                inductance: 1e-4,
            },
            RlBranch {
                resistance: 27.0,
                inductance: 1e-4,
            },
        ] {
            let current = steady_state_current(&schedule, &branch).unwrap();
            let scale = current.forcing_scale();
            for j in 0..current.segment_count() - 1 {
                let seg = current.segment(j);
                let left = seg.coeff * (-seg.width() / current.time_constant()).exp() + seg.offset;
                let right = current.segment(j + 1).coeff + current.segment(j + 1).offset;
                assert!(
                    (left - right).abs() < 1e-12 * scale,
                    "segment {j}: {left} vs {right}"
                );
            }
            for k in 0..40 {
                let t = T * k as f64 / 40.0;
                let a = current.value_at(t);
                let b = current.value_at(t + T / 2.0);
                assert!((a + b).abs() < 1e-12 * scale, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stiff_load_stays_finite_and_bounded() {
        let schedule = pwm_schedule(11, 0.95);
        let branch = RlBranch {
            resistance: 28.5,
            inductance: 1e-4,
        };
        let current = steady_state_current(&schedule, &branch).unwrap();
        let bound = 2.5 * current.forcing_scale();
        for j in 0..current.segment_count() {
            let seg = current.segment(j);
            assert!(seg.coeff.is_finite() && seg.coeff.abs() <= bound);
            assert!(seg.offset.is_finite());
        }
    }

    #[test]
    fn phase_current_matches_direct_composition() {
        let schedule = pwm_schedule(9, 0.8);
        let branch = RlBranch {
            resistance: 2.0,
            inductance: 5e-4,
        };
        let line = steady_state_current(&schedule, &branch).unwrap();
        let phase = phase_current(&line);
        let scale = line.forcing_scale();
        for k in 0..601 {
            let t = T * k as f64 / 601.0;
            let direct = (line.value_at(t) - line.value_at(t + T / 3.0)) / 3.0;
            assert!(
                (phase.value_at(t) - direct).abs() < 1e-11 * scale,
                "t={t}: {} vs {direct}",
                phase.value_at(t)
            );
        }
    }

    #[test]
    fn references_follow_the_impedance_triangle() {
        let branch = RlBranch {
            resistance: 3.0,
            inductance: 4.0 / (2.0 * std::f64::consts::PI * 60.0),
        };
        let single = single_phase_reference(270.0, 60.0, &branch);
        assert!((single.amplitude - 54.0).abs() < 1e-12);
        assert!((single.phase - (4.0f64 / 3.0).atan()).abs() < 1e-12);
        let three = three_phase_reference(270.0, 60.0, &branch);
        assert!((three.amplitude - 54.0 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!(
            (three.phase - (std::f64::consts::FRAC_PI_6 + (4.0f64 / 3.0).atan())).abs() < 1e-12
        );
    }

    #[test]
    fn oracle_rejects_coarse_grids() {
        let schedule = square_wave();
        let branch = RlBranch {
            resistance: 1.0,
            inductance: 1e-3,
        };
        let settings = OdeSettings {
            steps_per_period: 100,
            ..OdeSettings::default()
        };
        assert!(matches!(
            ode_oracle(&schedule, &branch, &settings),
            Err(OracleError::TooFewSteps { .. })
        ));
    }

    #[test]
    fn oracle_agrees_with_closed_form_on_a_moderate_load() {
        let schedule = pwm_schedule(7, 0.85);
        let branch = RlBranch {
            resistance: 1.0,
            inductance: 1e-3,
        };
        let analytic = steady_state_current(&schedule, &branch).unwrap();
        let numeric = ode_oracle(&schedule, &branch, &OdeSettings::default()).unwrap();
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for (t, v) in numeric.times.iter().zip(numeric.values.iter()) {
            let a = analytic.value_at(*t);
            diff2 += (a - v) * (a - v);
            norm2 += a * a;
        }
        let rel = (diff2 / norm2).sqrt();
        assert!(rel < 1e-8, "relative RMS {rel}");
    }
}
