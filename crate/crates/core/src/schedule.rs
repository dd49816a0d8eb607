//! Half-wave symmetric switching schedules and their voltage waveforms.
//!
//! A schedule stores the switching instants t_1 <= ... <= t_2N inside the
//! positive half-period [0, T/2] of a two-level leg pair. The waveform is
//! +V on (t_{2l-1}, t_{2l}), 0 elsewhere in the first half, and repeats
//! negated on (T/2, T). Half-wave symmetry is structural, so even harmonics
//! vanish up to rounding no matter where the instants sit.

use serde::Serialize;
use std::f64::consts::PI;
use std::io::{self, Write};
use thiserror::Error;

/// Two instants closer than this fraction of the period count as one
/// switching event when sequences are validated, merged, or compared.
pub const INSTANT_COLLISION_TOL: f64 = 1e-12;

/// Ways an instant sequence can fail to describe a schedule.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("amplitude must be positive and finite, got {0}")]
    InvalidAmplitude(f64),
    #[error("instant count must be even and nonzero, got {0}")]
    UnpairedInstants(usize),
    #[error("instant {index} is not finite")]
    NonFiniteInstant { index: usize },
    #[error("instant {index} = {value} s lies outside [0, {limit} s]")]
    OutOfRange {
        index: usize,
        value: f64,
        limit: f64,
    },
    #[error("instant {} is smaller than instant {index}", index + 1)]
    Decreasing { index: usize },
}

/// One Fourier component in amplitude/phase form:
/// x_h(t) = amplitude * sin(order * w * t + phase).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Harmonic {
    pub order: u32,
    pub amplitude: f64,
    pub phase: f64,
}

/// Switching instants of one half-period plus the rail they switch.
///
/// Instants must be non-decreasing within [0, T/2] up to the collision
/// tolerance. Zero-width pulses and touching edges are legal; they carry no
/// area and every consumer skips them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingSchedule {
    instants: Vec<f64>,
    period: f64,
    amplitude: f64,
}

impl SwitchingSchedule {
    /// Validates an instant sequence and wraps it.
    pub fn new(instants: Vec<f64>, period: f64, amplitude: f64) -> Result<Self, ScheduleError> {
        if !period.is_finite() || period <= 0.0 {
            return Err(ScheduleError::InvalidPeriod(period));
        }
        if !amplitude.is_finite() || amplitude <= 0.0 {
            return Err(ScheduleError::InvalidAmplitude(amplitude));
        }
        if instants.is_empty() || instants.len() % 2 != 0 {
            return Err(ScheduleError::UnpairedInstants(instants.len()));
        }
        let half = period / 2.0;
        let slack = INSTANT_COLLISION_TOL * period;
        for (index, &value) in instants.iter().enumerate() {
            if !value.is_finite() {
                return Err(ScheduleError::NonFiniteInstant { index });
            }
            if value < -slack || value > half + slack {
                return Err(ScheduleError::OutOfRange {
                    index,
                    value,
                    limit: half,
                });
            }
            if index > 0 && value < instants[index - 1] - slack {
                return Err(ScheduleError::Decreasing { index: index - 1 });
            }
        }
        Ok(Self {
            instants,
            period,
            amplitude,
        })
    }

    pub fn instants(&self) -> &[f64] {
        &self.instants
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn half_period(&self) -> f64 {
        self.period / 2.0
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Number of pulses in the half-period.
    pub fn pulse_count(&self) -> usize {
        self.instants.len() / 2
    }

    /// (rise, fall) pairs of the half-period pulses, in order.
    pub fn pulses(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.instants.chunks_exact(2).map(|p| (p[0], p[1]))
    }

    /// Waveform value at time t. Periodic in T and right-continuous at every
    /// switching instant, so v(t_k) already carries the post-switch level.
    pub fn voltage_at(&self, t: f64) -> f64 {
        let reduced = t.rem_euclid(self.period);
        let half = self.half_period();
        let (sign, local) = if reduced < half {
            (1.0, reduced)
        } else {
            (-1.0, reduced - half)
        };
        let crossed = self.instants.partition_point(|&x| x <= local);
        if crossed % 2 == 1 {
            sign * self.amplitude
        } else {
            0.0
        }
    }

    /// Largest deviation of the instant pairs from the reflection
    /// t_k + t_{2N+1-k} = T/2, as a fraction of the period.
    pub fn quarter_wave_residual(&self) -> f64 {
        let half = self.half_period();
        let n = self.instants.len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let residual = (self.instants[k] + self.instants[n - 1 - k] - half).abs();
            worst = worst.max(residual);
        }
        worst / self.period
    }

    /// Whether the waveform satisfies v(t) = v(T/2 - t) within a relative
    /// tolerance on the paired instants.
    pub fn is_quarter_wave_symmetric(&self, tol: f64) -> bool {
        self.quarter_wave_residual() <= tol
    }

    /// Fourier component of the periodic waveform. Integration runs over the
    /// full period without symmetry shortcuts, so cancellation claims (even
    /// or triplen orders) can be tested against this function directly.
    pub fn voltage_harmonic(&self, order: u32) -> Harmonic {
        if order == 0 {
            return Harmonic {
                order,
                amplitude: 0.0,
                phase: 0.0,
            };
        }
        let hw = f64::from(order) * 2.0 * PI / self.period;
        let half = self.half_period();
        let mut sin_sum = 0.0;
        let mut cos_sum = 0.0;
        for (rise, fall) in self.pulses() {
            sin_sum += (hw * rise).cos() - (hw * fall).cos();
            cos_sum += (hw * fall).sin() - (hw * rise).sin();
            sin_sum -= (hw * (rise + half)).cos() - (hw * (fall + half)).cos();
            cos_sum -= (hw * (fall + half)).sin() - (hw * (rise + half)).sin();
        }
        let scale = 2.0 * self.amplitude / (hw * self.period);
        let b = scale * sin_sum;
        let a = scale * cos_sum;
        Harmonic {
            order,
            amplitude: a.hypot(b),
            phase: a.atan2(b),
        }
    }

    /// Writes the instants as `k,t_k_seconds` rows with a header.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "k,t_k_seconds")?;
        for (k, t) in self.instants.iter().enumerate() {
            writeln!(out, "{},{}", k + 1, t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: f64 = 1.0 / 60.0;
    const V: f64 = 300.0;

    fn square_wave() -> SwitchingSchedule {
        SwitchingSchedule::new(vec![0.0, T / 2.0], T, V).unwrap()
    }

    #[test]
    fn rejects_bad_period_and_amplitude() {
        assert_eq!(
            SwitchingSchedule::new(vec![0.0, 1.0], 0.0, V),
            Err(ScheduleError::InvalidPeriod(0.0))
        );
        assert_eq!(
            SwitchingSchedule::new(vec![0.0, 1.0], T, -1.0),
            Err(ScheduleError::InvalidAmplitude(-1.0))
        );
    }

    #[test]
    fn rejects_unpaired_and_disordered_instants() {
        assert_eq!(
            SwitchingSchedule::new(vec![], T, V),
            Err(ScheduleError::UnpairedInstants(0))
        );
        assert_eq!(
            SwitchingSchedule::new(vec![0.001, 0.002, 0.003], T, V),
            Err(ScheduleError::UnpairedInstants(3))
        );
        assert_eq!(
            SwitchingSchedule::new(vec![0.002, 0.001], T, V),
            Err(ScheduleError::Decreasing { index: 0 })
        );
        assert!(matches!(
            SwitchingSchedule::new(vec![0.0, T], T, V),
            Err(ScheduleError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            SwitchingSchedule::new(vec![0.0, f64::NAN], T, V),
            Err(ScheduleError::NonFiniteInstant { index: 1 })
        ));
    }

    #[test]
    fn accepts_touching_and_zero_width_pulses() {
        let s = SwitchingSchedule::new(vec![0.001, 0.002, 0.002, 0.003], T, V).unwrap();
        assert_eq!(s.pulse_count(), 2);
        let z = SwitchingSchedule::new(vec![0.004, 0.004], T, V).unwrap();
        assert!(z.voltage_harmonic(1).amplitude.abs() < 1e-12);
    }

    #[test]
    fn square_wave_levels_and_right_continuity() {
        let s = square_wave();
        assert_eq!(s.voltage_at(T / 4.0), V);
        assert_eq!(s.voltage_at(3.0 * T / 4.0), -V);
        assert_eq!(s.voltage_at(0.0), V);
        assert_eq!(s.voltage_at(T / 2.0), -V);
        assert_eq!(s.voltage_at(-T / 4.0), -V);
        assert_eq!(s.voltage_at(T + T / 4.0), V);
    }

    #[test]
    fn square_wave_spectrum_matches_closed_form() {
        let s = square_wave();
        for h in 1..=15u32 {
            let harmonic = s.voltage_harmonic(h);
            let expected = if h % 2 == 1 {
                4.0 * V / (PI * f64::from(h))
            } else {
                0.0
            };
            assert!(
                (harmonic.amplitude - expected).abs() < 1e-9,
                "order {h}: {} vs {expected}",
                harmonic.amplitude
            );
        }
        assert!(square_wave().voltage_harmonic(1).phase.abs() < 1e-12);
    }

    #[test]
    fn dc_component_is_zero() {
        let s = square_wave();
        assert_eq!(s.voltage_harmonic(0).amplitude, 0.0);
    }

    #[test]
    fn waveform_integral_over_period_vanishes() {
        let s = SwitchingSchedule::new(vec![0.0012, 0.0031, 0.0044, 0.0071], T, V).unwrap();
        let mut edges = vec![0.0];
        for &t in s.instants() {
            edges.push(t);
            edges.push(t + T / 2.0);
        }
        edges.push(T / 2.0);
        edges.push(T);
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut integral = 0.0;
        for pair in edges.windows(2) {
            let mid = 0.5 * (pair[0] + pair[1]);
            integral += s.voltage_at(mid) * (pair[1] - pair[0]);
        }
        assert!(integral.abs() <= 1e-12 * V * T);
    }

    #[test]
    fn quarter_wave_detection() {
        let half = T / 2.0;
        let symmetric =
            SwitchingSchedule::new(vec![0.1 * half, 0.3 * half, 0.7 * half, 0.9 * half], T, V)
                .unwrap();
        assert!(symmetric.is_quarter_wave_symmetric(1e-12));
        let skewed =
            SwitchingSchedule::new(vec![0.1 * half, 0.3 * half, 0.7 * half, 0.8 * half], T, V)
                .unwrap();
        assert!(!skewed.is_quarter_wave_symmetric(1e-9));
        assert!((skewed.quarter_wave_residual() - 0.1 * half / T).abs() < 1e-12);
    }

    #[test]
    fn csv_dump_is_stable() {
        let s = SwitchingSchedule::new(vec![0.00125, 0.0025], T, V).unwrap();
        let mut buffer = Vec::new();
        s.write_csv(&mut buffer).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        assert_eq!(text, "k,t_k_seconds\n1,0.00125\n2,0.0025\n");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn sorted_instants(count: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0..=1.0f64, count).prop_map(|mut raw| {
                raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
                raw.iter().map(|x| x * T / 2.0).collect()
            })
        }

        proptest! {
            #[test]
            fn voltage_levels_are_three_valued(instants in sorted_instants(8), t in 0.0..1.0f64) {
                let s = SwitchingSchedule::new(instants, T, V).unwrap();
                let v = s.voltage_at(t * T);
                prop_assert!(v == 0.0 || v == V || v == -V);
            }

            #[test]
            fn even_harmonics_cancel(instants in sorted_instants(8)) {
                let s = SwitchingSchedule::new(instants, T, V).unwrap();
                for h in [2u32, 4, 6, 10] {
                    prop_assert!(s.voltage_harmonic(h).amplitude <= 1e-10 * V);
                }
            }

            #[test]
            fn half_wave_symmetry_of_samples(instants in sorted_instants(6), t in 0.0..1.0f64) {
                let s = SwitchingSchedule::new(instants, T, V).unwrap();
                let time = t * T;
                prop_assert_eq!(s.voltage_at(time + T / 2.0), -s.voltage_at(time));
            }
        }
    }
}
