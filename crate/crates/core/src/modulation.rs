//! Sinusoidal pulse-width modulation with adjustable pulse displacement.
//!
//! The half-period (0, T/2) splits into N equal subintervals with one pulse
//! each. Sampling the sine reference at the subinterval center fixes the
//! pulse width; the displacement factor alpha_l in [0, 1] slides the pulse
//! within the remaining zero time of its subinterval. alpha = 0.5 centers
//! every pulse and reproduces conventional sinusoidal PWM. The pairing
//! alpha_l + alpha_{N+1-l} = 1 is exactly quarter-wave symmetry of the
//! resulting schedule, so (N-1)/2 factors are free and the middle one is
//! pinned at 1/2.

use crate::schedule::{ScheduleError, SwitchingSchedule};
use std::f64::consts::PI;
use thiserror::Error;

/// Ways an operating point or a factor vector can be invalid.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModulationError {
    #[error("pulse count must be odd and at least 3, got {0}")]
    InvalidPulseCount(usize),
    #[error("modulation index must lie in (0, 1), got {0}")]
    InvalidModulationIndex(f64),
    #[error("frequency must be positive and finite, got {0}")]
    InvalidFrequency(f64),
    #[error("dc rail voltage must be positive and finite, got {0}")]
    InvalidDcVoltage(f64),
    #[error("expected {expected} displacement factors, got {got}")]
    FactorCountMismatch { expected: usize, got: usize },
    #[error("displacement factor {index} = {value} lies outside [0, 1]")]
    FactorOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Operating point of a single-phase leg pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SinglePhaseConfig {
    /// DC rail voltage in volts.
    pub dc_voltage: f64,
    /// Fundamental frequency in hertz.
    pub frequency: f64,
    /// Ratio of the target fundamental amplitude to the DC rail, in (0, 1).
    pub modulation_index: f64,
    /// Pulses per half-period; odd, at least 3.
    pub pulses: usize,
}

impl SinglePhaseConfig {
    pub fn validate(&self) -> Result<(), ModulationError> {
        if self.pulses < 3 || self.pulses % 2 == 0 {
            return Err(ModulationError::InvalidPulseCount(self.pulses));
        }
        if !self.modulation_index.is_finite()
            || self.modulation_index <= 0.0
            || self.modulation_index >= 1.0
        {
            return Err(ModulationError::InvalidModulationIndex(
                self.modulation_index,
            ));
        }
        if !self.frequency.is_finite() || self.frequency <= 0.0 {
            return Err(ModulationError::InvalidFrequency(self.frequency));
        }
        if !self.dc_voltage.is_finite() || self.dc_voltage <= 0.0 {
            return Err(ModulationError::InvalidDcVoltage(self.dc_voltage));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frequency
    }

    /// Target fundamental amplitude m * V_dc in volts.
    pub fn target_amplitude(&self) -> f64 {
        self.modulation_index * self.dc_voltage
    }
}

/// Per-subinterval conduction and idle durations.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseWidths {
    /// Conduction time of each pulse in seconds.
    pub active: Vec<f64>,
    /// Idle time of each subinterval in seconds; active + zero = T/2N.
    pub zero: Vec<f64>,
}

/// Samples the sine reference at the subinterval centers.
///
/// Pulse l (1-based) lives in ((l-1) T/2N, l T/2N) and conducts for
/// (m T / 2N) sin(w tau_l) seconds, tau_l = (T/2N)(l - 1/2).
pub fn pulse_widths(config: &SinglePhaseConfig) -> Result<PulseWidths, ModulationError> {
    config.validate()?;
    let n = config.pulses;
    let period = config.period();
    let sub = period / (2.0 * n as f64);
    let w = 2.0 * PI / period;
    let mut active = Vec::with_capacity(n);
    let mut zero = Vec::with_capacity(n);
    for l in 1..=n {
        let center = sub * (l as f64 - 0.5);
        let on = config.modulation_index * sub * (w * center).sin();
        active.push(on);
        zero.push(sub - on);
    }
    Ok(PulseWidths { active, zero })
}

/// Fractional placements of the pulse rising edges inside their idle times.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementFactors {
    values: Vec<f64>,
}

impl DisplacementFactors {
    /// All factors at 1/2: conventional centered pulses.
    pub fn conventional(count: usize) -> Self {
        Self {
            values: vec![0.5; count],
        }
    }

    /// Wraps a full factor vector, checking only the [0, 1] range.
    pub fn from_values(values: Vec<f64>) -> Result<Self, ModulationError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(ModulationError::FactorOutOfRange { index, value });
            }
        }
        Ok(Self { values })
    }

    /// Expands (count-1)/2 free factors into a full vector obeying the
    /// pairing: the middle factor is 1/2 and the upper half mirrors the free
    /// half as 1 - alpha.
    pub fn paired_from_free(free: &[f64], count: usize) -> Result<Self, ModulationError> {
        if count < 3 || count % 2 == 0 {
            return Err(ModulationError::InvalidPulseCount(count));
        }
        let half = (count - 1) / 2;
        if free.len() != half {
            return Err(ModulationError::FactorCountMismatch {
                expected: half,
                got: free.len(),
            });
        }
        let mut values = vec![0.5; count];
        for (index, &value) in free.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(ModulationError::FactorOutOfRange { index, value });
            }
            values[index] = value;
            values[count - 1 - index] = 1.0 - value;
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading (count-1)/2 factors; the rest is redundant under the pairing.
    pub fn free(&self) -> &[f64] {
        &self.values[..(self.values.len().saturating_sub(1)) / 2]
    }

    /// Largest deviation from alpha_l + alpha_{count+1-l} = 1 over all pairs.
    pub fn pairing_residual(&self) -> f64 {
        let n = self.values.len();
        let mut worst = 0.0f64;
        for l in 0..n {
            worst = worst.max((self.values[l] + self.values[n - 1 - l] - 1.0).abs());
        }
        worst
    }

    pub fn satisfies_pairing(&self, tol: f64) -> bool {
        self.pairing_residual() <= tol
    }
}

/// Places one pulse per subinterval and returns the half-period schedule.
///
/// Rising edge of pulse l sits alpha_l of the way into the idle time:
/// t_{2l-1} = (l-1) T/2N + alpha_l zero_l and t_{2l} = t_{2l-1} + active_l.
pub fn build_schedule(
    config: &SinglePhaseConfig,
    factors: &DisplacementFactors,
) -> Result<SwitchingSchedule, ModulationError> {
    let widths = pulse_widths(config)?;
    if factors.len() != config.pulses {
        return Err(ModulationError::FactorCountMismatch {
            expected: config.pulses,
            got: factors.len(),
        });
    }
    let period = config.period();
    let sub = period / (2.0 * config.pulses as f64);
    let mut instants = Vec::with_capacity(2 * config.pulses);
    for (l, &alpha) in factors.values().iter().enumerate() {
        if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
            return Err(ModulationError::FactorOutOfRange {
                index: l,
                value: alpha,
            });
        }
        let rise = sub * l as f64 + alpha * widths.zero[l];
        instants.push(rise);
        instants.push(rise + widths.active[l]);
    }
    Ok(SwitchingSchedule::new(instants, period, config.dc_voltage)?)
}
