//! Balanced three-phase line voltage synthesis from per-sector patterns.
//!
//! A three-phase bridge with P odd pulses per sixth-period sector produces a
//! line voltage v_ab with N = 3P pulses per half-period. The pattern on the
//! first sector (0, T/6) fixes everything else through three symmetries: the
//! T/3 line rotation v_bc(t) = v_ab(t - T/3), half-wave negation, and the
//! quarter-wave reflection about T/4. Pulses of the assembled v_ab therefore
//! fall into three groups: native sector pulses, rotated copies of the sector
//! v_bc stretches, and reflected copies of the sector pulses. Only one bridge
//! leg switches at any instant, so inside every rotated pulse the leading
//! cover alternates between v_ca and v_bc on consecutive pulses.

use crate::modulation::{DisplacementFactors, ModulationError};
use crate::schedule::{ScheduleError, SwitchingSchedule, INSTANT_COLLISION_TOL};
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

/// Ways a three-phase operating point or factor vector can be invalid.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThreePhaseError {
    #[error("pulses per sector must be odd and at least 3, got {0}")]
    InvalidPulseCount(usize),
    #[error("modulation index must lie in (0, 1), got {0}")]
    InvalidModulationIndex(f64),
    #[error("frequency must be positive and finite, got {0}")]
    InvalidFrequency(f64),
    #[error("dc rail voltage must be positive and finite, got {0}")]
    InvalidDcVoltage(f64),
    #[error("expected {expected} displacement factors, got {got}")]
    FactorCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Factors(#[from] ModulationError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Operating point of a three-phase bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreePhaseConfig {
    /// DC rail voltage in volts.
    pub dc_voltage: f64,
    /// Fundamental frequency in hertz.
    pub frequency: f64,
    /// Ratio of the target line fundamental amplitude to the DC rail, in (0, 1).
    pub modulation_index: f64,
    /// Pulses per sixth-period sector; odd, at least 3.
    pub pulses_per_sector: usize,
}

impl ThreePhaseConfig {
    pub fn validate(&self) -> Result<(), ThreePhaseError> {
        if self.pulses_per_sector < 3 || self.pulses_per_sector % 2 == 0 {
            return Err(ThreePhaseError::InvalidPulseCount(self.pulses_per_sector));
        }
        if !self.modulation_index.is_finite()
            || self.modulation_index <= 0.0
            || self.modulation_index >= 1.0
        {
            return Err(ThreePhaseError::InvalidModulationIndex(
                self.modulation_index,
            ));
        }
        if !self.frequency.is_finite() || self.frequency <= 0.0 {
            return Err(ThreePhaseError::InvalidFrequency(self.frequency));
        }
        if !self.dc_voltage.is_finite() || self.dc_voltage <= 0.0 {
            return Err(ThreePhaseError::InvalidDcVoltage(self.dc_voltage));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frequency
    }

    /// Pulses of the assembled line voltage per half-period: 3P.
    pub fn pulses_per_half_period(&self) -> usize {
        3 * self.pulses_per_sector
    }

    /// Target line fundamental amplitude m * V_dc in volts.
    pub fn target_amplitude(&self) -> f64 {
        self.modulation_index * self.dc_voltage
    }
}

/// Conduction widths of the three line voltages inside one sector, per
/// subinterval, plus the idle remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorWidths {
    pub ab: Vec<f64>,
    pub bc: Vec<f64>,
    pub ca: Vec<f64>,
    /// Idle time per subinterval: T/6P - bc width.
    pub zero: Vec<f64>,
}

/// Samples the three line references at the sector subinterval centers
/// tau_l = (T/6P)(l - 1/2). Within the first sector v_ab and v_ca conduct
/// positive and v_bc spans their union negatively, so ab + ca = bc holds
/// per subinterval.
pub fn sector_widths(config: &ThreePhaseConfig) -> Result<SectorWidths, ThreePhaseError> {
    config.validate()?;
    let p = config.pulses_per_sector;
    let period = config.period();
    let sub = period / (6.0 * p as f64);
    let w = 2.0 * PI / period;
    let scale = config.modulation_index * sub;
    let mut ab = Vec::with_capacity(p);
    let mut bc = Vec::with_capacity(p);
    let mut ca = Vec::with_capacity(p);
    let mut zero = Vec::with_capacity(p);
    for l in 1..=p {
        let center = sub * (l as f64 - 0.5);
        let wab = scale * (w * center).sin();
        let wbc = -scale * (w * center - 2.0 * PI / 3.0).sin();
        let wca = scale * (w * center + 2.0 * PI / 3.0).sin();
        ab.push(wab);
        bc.push(wbc);
        ca.push(wca);
        zero.push(sub - wbc);
    }
    Ok(SectorWidths { ab, bc, ca, zero })
}

/// Edge positions of the three line voltages inside the first sector.
///
/// Subinterval l (1-based) starts at (l-1) T/6P; the active stretch begins
/// alpha_l of the way into the idle time and lasts ab_l + ca_l = bc_l. The
/// v_ab part leads on odd subintervals and trails on even ones, so each
/// stretch boundary toggles exactly one bridge leg.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorPattern {
    /// (rise, fall) of the positive v_ab pulse per subinterval.
    pub ab: Vec<(f64, f64)>,
    /// (rise, fall) of the positive v_ca pulse per subinterval.
    pub ca: Vec<(f64, f64)>,
    /// (start, end) of the negative v_bc stretch per subinterval.
    pub bc: Vec<(f64, f64)>,
}

pub fn sector_pattern(
    config: &ThreePhaseConfig,
    factors: &DisplacementFactors,
) -> Result<SectorPattern, ThreePhaseError> {
    let widths = sector_widths(config)?;
    let p = config.pulses_per_sector;
    if factors.len() != p {
        return Err(ThreePhaseError::FactorCountMismatch {
            expected: p,
            got: factors.len(),
        });
    }
    let sub = config.period() / (6.0 * p as f64);
    let mut ab = Vec::with_capacity(p);
    let mut ca = Vec::with_capacity(p);
    let mut bc = Vec::with_capacity(p);
    for (index, &alpha) in factors.values().iter().enumerate() {
        if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
            return Err(ThreePhaseError::Factors(
                ModulationError::FactorOutOfRange {
                    index,
                    value: alpha,
                },
            ));
        }
        let start = sub * index as f64 + alpha * widths.zero[index];
        let split = if index % 2 == 0 {
            // v_ab leads, v_ca trails.
            start + widths.ab[index]
        } else {
            // v_ca leads, v_ab trails.
            start + widths.ca[index]
        };
        let end = start + widths.bc[index];
        if index % 2 == 0 {
            ab.push((start, split));
            ca.push((split, end));
        } else {
            ca.push((start, split));
            ab.push((split, end));
        }
        bc.push((start, end));
    }
    Ok(SectorPattern { ab, ca, bc })
}

/// Provenance of one assembled v_ab pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PulseGroup {
    /// Native sector pulse on (0, T/6); printed as `p+`.
    Direct,
    /// Rotated sector v_bc stretch on (T/6, T/3); printed as `q+`.
    Rotated,
    /// Reflected sector pulse on (T/3, T/2); printed as `r+`.
    Reflected,
}

impl std::fmt::Display for PulseGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let label = match self {
            PulseGroup::Direct => "p+",
            PulseGroup::Rotated => "q+",
            PulseGroup::Reflected => "r+",
        };
        write!(f, "{label}")
    }
}

/// Assembled line voltage v_ab with per-pulse provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSchedule {
    pub schedule: SwitchingSchedule,
    /// One group label per pulse, aligned with `schedule.pulses()`.
    pub groups: Vec<PulseGroup>,
}

/// Builds the half-period of v_ab from the sector pattern.
///
/// Native pulses fill (0, T/6). The rotation v_ab(t) = v_bc(t + T/3)
/// combined with half-wave negation turns the sector's negative v_bc
/// stretches into positive pulses on (T/6, T/3). The reflection about T/4
/// mirrors the native pulses onto (T/3, T/2).
pub fn assemble_line_voltage(
    config: &ThreePhaseConfig,
    factors: &DisplacementFactors,
) -> Result<LineSchedule, ThreePhaseError> {
    let pattern = sector_pattern(config, factors)?;
    let period = config.period();
    let sixth = period / 6.0;
    let half = period / 2.0;
    let mut pulses: Vec<(f64, f64, PulseGroup)> = Vec::with_capacity(3 * pattern.ab.len());
    for &(rise, fall) in &pattern.ab {
        pulses.push((rise, fall, PulseGroup::Direct));
    }
    for &(start, end) in &pattern.bc {
        pulses.push((start + sixth, end + sixth, PulseGroup::Rotated));
    }
    for &(rise, fall) in pattern.ab.iter().rev() {
        pulses.push((half - fall, half - rise, PulseGroup::Reflected));
    }
    pulses.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut instants = Vec::with_capacity(2 * pulses.len());
    let mut groups = Vec::with_capacity(pulses.len());
    for (rise, fall, group) in pulses {
        instants.push(rise);
        instants.push(fall);
        groups.push(group);
    }
    let schedule = SwitchingSchedule::new(instants, period, config.dc_voltage)?;
    Ok(LineSchedule { schedule, groups })
}

/// The three line voltages as one base waveform plus two delayed copies:
/// v_ab(t) = base(t), v_bc(t) = base(t - bc_delay), v_ca(t) = base(t - ca_delay).
#[derive(Debug, Clone, PartialEq)]
pub struct LineVoltages {
    base: SwitchingSchedule,
    bc_delay: f64,
    ca_delay: f64,
}

/// Line identifiers used in violation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Line {
    Ab,
    Bc,
    Ca,
}

impl LineVoltages {
    /// Balanced set: v_bc lags v_ab by T/3 and v_ca leads by T/3.
    pub fn balanced(base: SwitchingSchedule) -> Self {
        let period = base.period();
        Self {
            base,
            bc_delay: period / 3.0,
            ca_delay: -period / 3.0,
        }
    }

    /// Arbitrary delays; exists so validator failure paths are exercisable.
    pub fn with_delays(base: SwitchingSchedule, bc_delay: f64, ca_delay: f64) -> Self {
        Self {
            base,
            bc_delay,
            ca_delay,
        }
    }

    pub fn base(&self) -> &SwitchingSchedule {
        &self.base
    }

    pub fn ab_at(&self, t: f64) -> f64 {
        self.base.voltage_at(t)
    }

    pub fn bc_at(&self, t: f64) -> f64 {
        self.base.voltage_at(t - self.bc_delay)
    }

    pub fn ca_at(&self, t: f64) -> f64 {
        self.base.voltage_at(t - self.ca_delay)
    }
}

/// Structural defects a three-line set can exhibit.
#[derive(Debug, Clone, PartialEq)]
pub enum ThreePhaseViolation {
    /// A delayed line disagrees with the T/3 rotation of v_ab at time `at`.
    RotationBroken { line: Line, at: f64 },
    /// v_ab(t + T/2) != -v_ab(t) at time `at`.
    HalfWaveBroken { at: f64 },
    /// Base instants break the reflection pairing by `residual` of a period.
    QuarterWaveBroken { residual: f64 },
    /// v_ab + v_bc + v_ca != 0 at time `at`.
    KirchhoffBroken { at: f64 },
    /// A switching event toggles a number of lines other than two, or the
    /// two jumps do not cancel.
    MultiLegSwitch { at: f64 },
    /// Leading cover inside consecutive rotated pulses fails to alternate.
    AlternationBroken { pulse_index: usize },
}

/// Signed jumps (time, +V or -V) of one line over a full period.
fn edge_events(base: &SwitchingSchedule, delay: f64) -> Vec<(f64, f64)> {
    let period = base.period();
    let half = base.half_period();
    let amplitude = base.amplitude();
    let mut events = Vec::with_capacity(2 * base.instants().len());
    for (index, &t) in base.instants().iter().enumerate() {
        let sign = if index % 2 == 0 { 1.0 } else { -1.0 };
        events.push(((t + delay).rem_euclid(period), sign * amplitude));
        events.push(((t + half + delay).rem_euclid(period), -sign * amplitude));
    }
    events
}

/// Checks rotation, half-wave, quarter-wave, Kirchhoff sum, single-leg
/// switching, and rotated-pulse alternation. Returns every violated
/// invariant. `tol` bounds the quarter-wave residual as a fraction of the
/// period and the clustering of switching events.
pub fn validate_line_voltages(
    lines: &LineVoltages,
    tol: f64,
) -> Result<(), Vec<ThreePhaseViolation>> {
    let mut violations = Vec::new();
    let base = &lines.base;
    let period = base.period();
    let third = period / 3.0;

    // Sample at midpoints between consecutive events of the union so every
    // constant stretch of the set is visited. Events closer than cluster_tol
    // are one physical switching instant seen through different float paths,
    // so gaps that narrow carry no stretch worth sampling.
    let cluster_tol = tol.max(INSTANT_COLLISION_TOL) * period;
    let mut event_times: Vec<f64> = Vec::new();
    for delay in [0.0, lines.bc_delay, lines.ca_delay] {
        for (t, _) in edge_events(base, delay) {
            event_times.push(t);
        }
    }
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    event_times.push(period);
    let mut samples = Vec::with_capacity(event_times.len());
    let mut cursor = 0.0;
    for &t in &event_times {
        if t > cursor + cluster_tol {
            samples.push(0.5 * (cursor + t));
        }
        cursor = cursor.max(t);
    }

    for &t in &samples {
        if lines.bc_at(t) != lines.ab_at(t - third) {
            violations.push(ThreePhaseViolation::RotationBroken {
                line: Line::Bc,
                at: t,
            });
            break;
        }
    }
    for &t in &samples {
        if lines.ca_at(t) != lines.ab_at(t + third) {
            violations.push(ThreePhaseViolation::RotationBroken {
                line: Line::Ca,
                at: t,
            });
            break;
        }
    }
    for &t in &samples {
        if lines.ab_at(t + period / 2.0) != -lines.ab_at(t) {
            violations.push(ThreePhaseViolation::HalfWaveBroken { at: t });
            break;
        }
    }
    let residual = base.quarter_wave_residual();
    if residual > tol {
        violations.push(ThreePhaseViolation::QuarterWaveBroken { residual });
    }
    for &t in &samples {
        if lines.ab_at(t) + lines.bc_at(t) + lines.ca_at(t) != 0.0 {
            violations.push(ThreePhaseViolation::KirchhoffBroken { at: t });
            break;
        }
    }

    // Cluster all switching events of the three lines; each cluster must hold
    // exactly two lines with cancelling net jumps.
    let mut tagged: Vec<(f64, usize, f64)> = Vec::new();
    for (tag, delay) in [(0usize, 0.0), (1, lines.bc_delay), (2, lines.ca_delay)] {
        for (t, jump) in edge_events(base, delay) {
            tagged.push((t, tag, jump));
        }
    }
    tagged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut clusters: Vec<(f64, [f64; 3])> = Vec::new();
    for (t, tag, jump) in tagged {
        match clusters.last_mut() {
            Some((time, net)) if t - *time <= cluster_tol => net[tag] += jump,
            _ => {
                let mut net = [0.0; 3];
                net[tag] = jump;
                clusters.push((t, net));
            }
        }
    }
    // The period seam can split one physical event into clusters at 0 and T.
    if clusters.len() > 1 {
        let last_time = clusters[clusters.len() - 1].0;
        if period - last_time + clusters[0].0 <= cluster_tol {
            let (_, last_net) = clusters.pop().unwrap();
            for (i, v) in last_net.iter().enumerate() {
                clusters[0].1[i] += v;
            }
        }
    }
    let mut rotated_partners: Vec<(f64, usize)> = Vec::new();
    for &(t, net) in &clusters {
        let active: Vec<usize> = (0..3).filter(|&i| net[i] != 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let cancelling = active.len() == 2 && net[active[0]] + net[active[1]] == 0.0;
        if !cancelling {
            if violations
                .iter()
                .all(|v| !matches!(v, ThreePhaseViolation::MultiLegSwitch { .. }))
            {
                violations.push(ThreePhaseViolation::MultiLegSwitch { at: t });
            }
            continue;
        }
        // Record which other line partners v_ab at its rising edges inside
        // the rotated region (T/6, T/3).
        let sixth = period / 6.0;
        if net[0] > 0.0 && t > sixth && t < 2.0 * sixth {
            let partner = if net[1] != 0.0 { 1 } else { 2 };
            rotated_partners.push((t, partner));
        }
    }
    rotated_partners.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (index, pair) in rotated_partners.windows(2).enumerate() {
        if pair[0].1 == pair[1].1 {
            violations.push(ThreePhaseViolation::AlternationBroken {
                pulse_index: index + 1,
            });
            break;
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
