//! Point-by-point setpoint synthesis.
//!
//! Periodic segments share a double-precision phase accumulator that advances by
//! `2π·f/tick_rate` per tick and wraps by subtracting `2π`. The tick on which the
//! accumulator wraps is reported as a completed cycle; cycle-length segments end on
//! their N-th wrap.
//!
//! Each segment leaves behind a terminal value (`entry_value`) that the next segment
//! starts from, so ramps and value-less holds are bumpless.

use std::f64::consts::{FRAC_2_PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WaveformError {
    #[error("no program")]
    NoProgram,
    #[error("tick rate must be positive")]
    BadTickRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepLaw {
    Linear,
    Logarithmic,
}

/// One piece of a commanded profile.
///
/// Periodic kinds take exactly one of `cycles` or `duration_ticks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WaveformSegment {
    Ramp {
        end_value: f64,
        duration_ticks: u64,
    },
    Hold {
        /// Held value; the previous segment's terminal value when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        duration_ticks: u64,
    },
    Sine {
        amplitude: f64,
        mean: f64,
        frequency_hz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cycles: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ticks: Option<u64>,
    },
    Square {
        amplitude: f64,
        mean: f64,
        frequency_hz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cycles: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ticks: Option<u64>,
    },
    Triangular {
        amplitude: f64,
        mean: f64,
        frequency_hz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cycles: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ticks: Option<u64>,
    },
    TaperedSine {
        amplitude: f64,
        mean: f64,
        frequency_hz: f64,
        cycles: u64,
        #[serde(default)]
        taper_cycles_in: u64,
        #[serde(default)]
        taper_cycles_out: u64,
    },
    SweepSine {
        amplitude: f64,
        mean: f64,
        f_start_hz: f64,
        f_end_hz: f64,
        sweep_law: SweepLaw,
        duration_ticks: u64,
    },
    RandomSine {
        amp_min: f64,
        amp_max: f64,
        mean: f64,
        frequency_hz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cycles: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_ticks: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Length {
    Cycles(u64),
    Ticks(u64),
}

impl WaveformSegment {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WaveformSegment::Ramp { .. } => "ramp",
            WaveformSegment::Hold { .. } => "hold",
            WaveformSegment::Sine { .. } => "sine",
            WaveformSegment::Square { .. } => "square",
            WaveformSegment::Triangular { .. } => "triangular",
            WaveformSegment::TaperedSine { .. } => "tapered_sine",
            WaveformSegment::SweepSine { .. } => "sweep_sine",
            WaveformSegment::RandomSine { .. } => "random_sine",
        }
    }

    pub fn is_periodic(&self) -> bool {
        !matches!(
            self,
            WaveformSegment::Ramp { .. } | WaveformSegment::Hold { .. }
        )
    }

    /// Segments the adaptive corrections act on.
    pub fn is_sine_family(&self) -> bool {
        matches!(
            self,
            WaveformSegment::Sine { .. }
                | WaveformSegment::TaperedSine { .. }
                | WaveformSegment::SweepSine { .. }
                | WaveformSegment::RandomSine { .. }
        )
    }

    fn length(&self) -> Length {
        use WaveformSegment::*;
        match *self {
            Ramp { duration_ticks, .. }
            | Hold { duration_ticks, .. }
            | SweepSine { duration_ticks, .. } => Length::Ticks(duration_ticks),
            TaperedSine { cycles, .. } => Length::Cycles(cycles),
            Sine {
                cycles,
                duration_ticks,
                ..
            }
            | Square {
                cycles,
                duration_ticks,
                ..
            }
            | Triangular {
                cycles,
                duration_ticks,
                ..
            }
            | RandomSine {
                cycles,
                duration_ticks,
                ..
            } => match (cycles, duration_ticks) {
                (Some(c), _) => Length::Cycles(c),
                (None, Some(t)) => Length::Ticks(t),
                (None, None) => Length::Ticks(0),
            },
        }
    }

    /// Field-level problems, as `(field, message)` pairs.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        use WaveformSegment::*;
        let mut out = Vec::new();
        let mut finite = |name: &'static str, v: f64| {
            if !v.is_finite() {
                out.push((name, format!("{name} must be finite")));
            }
        };
        match *self {
            Ramp { end_value, .. } => finite("end_value", end_value),
            Hold { value, .. } => {
                if let Some(v) = value {
                    finite("value", v)
                }
            }
            Sine {
                amplitude, mean, ..
            }
            | Square {
                amplitude, mean, ..
            }
            | Triangular {
                amplitude, mean, ..
            }
            | TaperedSine {
                amplitude, mean, ..
            }
            | SweepSine {
                amplitude, mean, ..
            } => {
                finite("amplitude", amplitude);
                finite("mean", mean);
            }
            RandomSine {
                amp_min,
                amp_max,
                mean,
                ..
            } => {
                finite("amp_min", amp_min);
                finite("amp_max", amp_max);
                finite("mean", mean);
            }
        }

        let positive = |out: &mut Vec<_>, name: &'static str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                out.push((name, format!("{name} must be positive")));
            }
        };
        match *self {
            Sine { frequency_hz, .. }
            | Square { frequency_hz, .. }
            | Triangular { frequency_hz, .. }
            | TaperedSine { frequency_hz, .. }
            | RandomSine { frequency_hz, .. } => positive(&mut out, "frequency_hz", frequency_hz),
            SweepSine {
                f_start_hz,
                f_end_hz,
                ..
            } => {
                positive(&mut out, "f_start_hz", f_start_hz);
                positive(&mut out, "f_end_hz", f_end_hz);
            }
            _ => {}
        }

        match *self {
            Sine {
                cycles,
                duration_ticks,
                ..
            }
            | Square {
                cycles,
                duration_ticks,
                ..
            }
            | Triangular {
                cycles,
                duration_ticks,
                ..
            }
            | RandomSine {
                cycles,
                duration_ticks,
                ..
            } => {
                if cycles.is_some() == duration_ticks.is_some() {
                    out.push((
                        "cycles",
                        "exactly one of cycles or duration_ticks must be set".to_string(),
                    ));
                }
            }
            TaperedSine {
                cycles,
                taper_cycles_in,
                taper_cycles_out,
                ..
            } if taper_cycles_in.saturating_add(taper_cycles_out) > cycles => {
                out.push((
                    "taper_cycles_in",
                    "taper_cycles_in + taper_cycles_out must not exceed cycles".to_string(),
                ));
            }
            _ => {}
        }

        match self.length() {
            Length::Cycles(0) => out.push(("cycles", "cycles must be at least 1".to_string())),
            Length::Ticks(0) if !out.iter().any(|(f, _)| *f == "cycles") => out.push((
                "duration_ticks",
                "duration_ticks must be at least 1".to_string(),
            )),
            _ => {}
        }

        if let RandomSine {
            amp_min, amp_max, ..
        } = *self
        {
            if amp_min > amp_max {
                out.push(("amp_min", "amp_min must not exceed amp_max".to_string()));
            }
        }
        out
    }
}

/// Additive amplitude/mean corrections from the adaptive controller.
///
/// Only periodic segments consume them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Corrections {
    pub amplitude: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    pub segment_index: usize,
    pub tick_in_segment: u64,
    /// Accumulated phase in `[0, 2π)`.
    pub phase: f64,
    pub cycle_count: u64,
    /// Terminal value of the previous segment (initial value before the first).
    pub entry_value: f64,
    pub current_cycle_amplitude: f64,
    pub rng_state: u64,
    entered: bool,
}

impl GeneratorState {
    pub fn new(seed: u64) -> Self {
        Self::with_initial_value(seed, 0.0)
    }

    pub fn with_initial_value(seed: u64, initial: f64) -> Self {
        Self {
            segment_index: 0,
            tick_in_segment: 0,
            phase: 0.0,
            cycle_count: 0,
            entry_value: initial,
            current_cycle_amplitude: 0.0,
            rng_state: seed,
            entered: false,
        }
    }
}

/// One rendered tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    /// Setpoint with corrections applied.
    pub setpoint: f64,
    /// Setpoint the program asks for before corrections.
    pub nominal: f64,
    pub periodic: bool,
    pub cycle_completed: bool,
    pub program_done: bool,
}

struct Shape {
    mean: f64,
    amplitude: f64,
    /// Fraction of the nominal amplitude currently in effect (taper envelope).
    envelope_ratio: f64,
    unit: f64,
}

impl Shape {
    fn nominal(&self) -> f64 {
        self.mean + self.amplitude * self.unit
    }

    fn corrected(&self, c: Corrections) -> f64 {
        let amp = self.amplitude + c.amplitude * self.envelope_ratio;
        self.mean + c.mean + amp * self.unit
    }
}

/// Linear taper envelope factor at fractional cycle position `p`.
pub fn taper_envelope(p: f64, cycles: u64, taper_in: u64, taper_out: u64) -> f64 {
    let mut env: f64 = 1.0;
    if taper_in > 0 {
        env = env.min(p / taper_in as f64);
    }
    if taper_out > 0 {
        env = env.min((cycles as f64 - p) / taper_out as f64);
    }
    env.clamp(0.0, 1.0)
}

fn square_unit(phase: f64) -> f64 {
    if phase.sin() >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn shape(seg: &WaveformSegment, st: &GeneratorState) -> Shape {
    use WaveformSegment::*;
    let flat = |v: f64| Shape {
        mean: v,
        amplitude: 0.0,
        envelope_ratio: 0.0,
        unit: 0.0,
    };
    match *seg {
        Ramp {
            end_value,
            duration_ticks,
        } => {
            let frac = st.tick_in_segment as f64 / duration_ticks as f64;
            flat(st.entry_value + (end_value - st.entry_value) * frac)
        }
        Hold { value, .. } => flat(value.unwrap_or(st.entry_value)),
        Sine {
            amplitude, mean, ..
        }
        | SweepSine {
            amplitude, mean, ..
        } => Shape {
            mean,
            amplitude,
            envelope_ratio: 1.0,
            unit: st.phase.sin(),
        },
        Square {
            amplitude, mean, ..
        } => Shape {
            mean,
            amplitude,
            envelope_ratio: 1.0,
            unit: square_unit(st.phase),
        },
        Triangular {
            amplitude, mean, ..
        } => Shape {
            mean,
            amplitude,
            envelope_ratio: 1.0,
            unit: FRAC_2_PI * st.phase.sin().asin(),
        },
        TaperedSine {
            amplitude,
            mean,
            cycles,
            taper_cycles_in,
            taper_cycles_out,
            ..
        } => {
            let p = st.cycle_count as f64 + st.phase / TAU;
            let env = taper_envelope(p, cycles, taper_cycles_in, taper_cycles_out);
            Shape {
                mean,
                amplitude: amplitude * env,
                envelope_ratio: env,
                unit: st.phase.sin(),
            }
        }
        RandomSine { mean, .. } => Shape {
            mean,
            amplitude: st.current_cycle_amplitude,
            envelope_ratio: 1.0,
            unit: st.phase.sin(),
        },
    }
}

/// Phase advance for the tick starting at `tick` within the segment.
fn phase_increment(seg: &WaveformSegment, tick: u64, tick_rate_hz: f64) -> f64 {
    use WaveformSegment::*;
    match *seg {
        Sine { frequency_hz, .. }
        | Square { frequency_hz, .. }
        | Triangular { frequency_hz, .. }
        | TaperedSine { frequency_hz, .. }
        | RandomSine { frequency_hz, .. } => TAU * frequency_hz / tick_rate_hz,
        SweepSine {
            f_start_hz,
            f_end_hz,
            sweep_law,
            duration_ticks,
            ..
        } => match sweep_law {
            // Exact increment of θ(t) = 2π(f0·t + (f1−f0)t²/2T) over one tick.
            SweepLaw::Linear => {
                let frac = (tick as f64 + 0.5) / duration_ticks as f64;
                TAU * (f_start_hz + (f_end_hz - f_start_hz) * frac) / tick_rate_hz
            }
            // Exact increment of θ(t) = 2π·f0·(kᵗ − 1)/ln k.
            SweepLaw::Logarithmic => {
                let span_s = duration_ticks as f64 / tick_rate_hz;
                let ln_k = (f_end_hz / f_start_hz).ln() / span_s;
                let dt = 1.0 / tick_rate_hz;
                if ln_k == 0.0 {
                    return TAU * f_start_hz * dt;
                }
                let t = tick as f64 * dt;
                TAU * f_start_hz * (ln_k * t).exp() * (ln_k * dt).exp_m1() / ln_k
            }
        },
        Ramp { .. } | Hold { .. } => 0.0,
    }
}

fn draw_amplitude(seg: &WaveformSegment, st: &mut GeneratorState) {
    if let WaveformSegment::RandomSine {
        amp_min, amp_max, ..
    } = *seg
    {
        let u = rng::rng_next(&mut st.rng_state);
        st.current_cycle_amplitude = amp_min + u * (amp_max - amp_min);
    }
}

impl GeneratorState {
    pub fn program_done(&self, program: &[WaveformSegment]) -> bool {
        self.segment_index >= program.len()
    }

    /// Returns the point for the current tick, then advances the state by one tick.
    ///
    /// Once the program is exhausted the last terminal value is repeated with
    /// `program_done` set.
    pub fn next_point(
        &mut self,
        program: &[WaveformSegment],
        tick_rate_hz: f64,
        corrections: Corrections,
    ) -> Result<Point, WaveformError> {
        if program.is_empty() {
            return Err(WaveformError::NoProgram);
        }
        if tick_rate_hz.is_nan() || tick_rate_hz <= 0.0 {
            return Err(WaveformError::BadTickRate);
        }
        let Some(seg) = program.get(self.segment_index) else {
            return Ok(Point {
                setpoint: self.entry_value,
                nominal: self.entry_value,
                periodic: false,
                cycle_completed: false,
                program_done: true,
            });
        };
        if !self.entered {
            self.entered = true;
            draw_amplitude(seg, self);
        }

        let periodic = seg.is_periodic();
        let current = shape(seg, self);
        let corr = if seg.is_sine_family() {
            corrections
        } else {
            Corrections::default()
        };
        let setpoint = current.corrected(corr);
        let nominal = current.nominal();

        let increment = phase_increment(seg, self.tick_in_segment, tick_rate_hz);
        self.tick_in_segment += 1;
        let mut cycle_completed = false;
        if periodic {
            self.phase += increment;
            if self.phase >= TAU {
                self.phase -= TAU;
                self.cycle_count += 1;
                cycle_completed = true;
            }
        }

        let finished = match seg.length() {
            Length::Cycles(n) => self.cycle_count >= n,
            Length::Ticks(n) => self.tick_in_segment >= n,
        };
        if finished {
            self.entry_value = shape(seg, self).corrected(corr);
            self.segment_index += 1;
            self.tick_in_segment = 0;
            self.cycle_count = 0;
            self.entered = false;
            if let Some(next) = program.get(self.segment_index) {
                if next.is_periodic() && !periodic {
                    self.phase = 0.0;
                }
            }
        } else if cycle_completed {
            draw_amplitude(seg, self);
        }

        Ok(Point {
            setpoint,
            nominal,
            periodic,
            cycle_completed,
            program_done: self.segment_index >= program.len(),
        })
    }
}

/// Renders `ticks` setpoints of `program` from a fresh generator.
pub fn render(
    program: &[WaveformSegment],
    ticks: u64,
    tick_rate_hz: f64,
    seed: u64,
) -> Result<Vec<f64>, WaveformError> {
    let mut st = GeneratorState::new(seed);
    (0..ticks)
        .map(|_| {
            st.next_point(program, tick_rate_hz, Corrections::default())
                .map(|p| p.setpoint)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATE: f64 = 100_000.0;

    fn sine(amplitude: f64, mean: f64, f: f64, cycles: u64) -> WaveformSegment {
        WaveformSegment::Sine {
            amplitude,
            mean,
            frequency_hz: f,
            cycles: Some(cycles),
            duration_ticks: None,
        }
    }

    #[test]
    fn empty_program_is_an_error() {
        let mut st = GeneratorState::new(0);
        assert_eq!(
            st.next_point(&[], RATE, Corrections::default()),
            Err(WaveformError::NoProgram)
        );
    }

    #[test]
    fn sine_quarter_period() {
        let v = render(&[sine(1.0, 2.0, 1.0, 100)], 25_001, RATE, 0).unwrap();
        assert!((v[25_000] - 3.0).abs() < 1e-9, "{}", v[25_000]);
        assert_eq!(v[0], 2.0);
    }

    #[test]
    fn ramp_midpoint_and_bumpless_entry() {
        let program = [
            WaveformSegment::Ramp {
                end_value: 10.0,
                duration_ticks: 1_000_000,
            },
            WaveformSegment::Hold {
                value: None,
                duration_ticks: 10,
            },
        ];
        let v = render(&program, 1_000_010, RATE, 0).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[500_000], 5.0);
        assert_eq!(v[1_000_000], 10.0);
        assert_eq!(v[1_000_009], 10.0);
    }

    #[test]
    fn ramp_after_periodic_starts_at_its_terminal_value() {
        let program = [
            WaveformSegment::Sine {
                amplitude: 2.0,
                mean: 1.0,
                frequency_hz: 3.0,
                cycles: None,
                duration_ticks: Some(12_345),
            },
            WaveformSegment::Ramp {
                end_value: 0.0,
                duration_ticks: 100,
            },
        ];
        let mut st = GeneratorState::new(0);
        let mut last = 0.0;
        for _ in 0..12_345 {
            last = st
                .next_point(&program, RATE, Corrections::default())
                .unwrap()
                .setpoint;
        }
        let first_ramp = st
            .next_point(&program, RATE, Corrections::default())
            .unwrap()
            .setpoint;
        let step_bound = TAU * 3.0 * 2.0 / RATE * 1.001;
        assert_eq!(first_ramp, st.entry_value);
        assert!((first_ramp - last).abs() <= step_bound);
    }

    #[test]
    fn cycles_counted_exactly() {
        for (f, n) in [(1.0, 3u64), (7.3, 11), (333.0, 50)] {
            let program = [sine(1.0, 0.0, f, n)];
            let mut st = GeneratorState::new(0);
            let mut completions = 0;
            let mut ticks = 0u64;
            loop {
                let p = st
                    .next_point(&program, RATE, Corrections::default())
                    .unwrap();
                ticks += 1;
                completions += p.cycle_completed as u64;
                if p.program_done {
                    break;
                }
                assert!(ticks < 10_000_000);
            }
            assert_eq!(completions, n, "f={f}");
        }
    }

    #[test]
    fn square_and_triangle_shapes() {
        let sq = WaveformSegment::Square {
            amplitude: 2.0,
            mean: 1.0,
            frequency_hz: 1.0,
            cycles: Some(1),
            duration_ticks: None,
        };
        let v = render(&[sq], 100_000, RATE, 0).unwrap();
        assert_eq!(v[0], 3.0);
        assert_eq!(v[25_000], 3.0);
        assert_eq!(v[75_000], -1.0);

        let tri = WaveformSegment::Triangular {
            amplitude: 2.0,
            mean: 0.0,
            frequency_hz: 1.0,
            cycles: Some(1),
            duration_ticks: None,
        };
        let v = render(&[tri], 100_000, RATE, 0).unwrap();
        assert!((v[25_000] - 2.0).abs() < 1e-9);
        assert!((v[12_500] - 1.0).abs() < 1e-9);
        assert!((v[75_000] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn random_sine_first_amplitude_from_seed() {
        let seg = WaveformSegment::RandomSine {
            amp_min: 1.0,
            amp_max: 3.0,
            mean: 0.0,
            frequency_hz: 10.0,
            cycles: Some(5),
            duration_ticks: None,
        };
        let mut st = GeneratorState::new(0);
        st.next_point(std::slice::from_ref(&seg), RATE, Corrections::default())
            .unwrap();
        let u = (0xE220_A839_7B1D_CDAFu64 >> 11) as f64 / (1u64 << 53) as f64;
        assert_eq!(st.current_cycle_amplitude, 1.0 + u * 2.0);
    }

    #[test]
    fn taper_envelope_linear_at_boundaries() {
        for c in 0..=4u64 {
            assert!((taper_envelope(c as f64, 10, 4, 3) - c as f64 / 4.0).abs() < 1e-12);
        }
        for c in 7..=10u64 {
            let expect = (10 - c) as f64 / 3.0;
            assert!((taper_envelope(c as f64, 10, 4, 3) - expect).abs() < 1e-12);
        }
        assert_eq!(taper_envelope(5.5, 10, 4, 3), 1.0);
        assert_eq!(taper_envelope(5.5, 10, 0, 0), 1.0);
    }

    #[test]
    fn corrections_ignored_outside_periodic_segments() {
        let program = [WaveformSegment::Hold {
            value: Some(3.0),
            duration_ticks: 5,
        }];
        let mut st = GeneratorState::new(0);
        let p = st
            .next_point(
                &program,
                RATE,
                Corrections {
                    amplitude: 1.0,
                    mean: 1.0,
                },
            )
            .unwrap();
        assert_eq!(p.setpoint, 3.0);
    }

    #[test]
    fn segment_violations() {
        let bad = WaveformSegment::Sine {
            amplitude: 1.0,
            mean: 0.0,
            frequency_hz: -1.0,
            cycles: Some(1),
            duration_ticks: Some(5),
        };
        let v = bad.violations();
        assert!(v.iter().any(|(f, _)| *f == "frequency_hz"));
        assert!(v.iter().any(|(f, _)| *f == "cycles"));

        let rs = WaveformSegment::RandomSine {
            amp_min: 2.0,
            amp_max: 1.0,
            mean: 0.0,
            frequency_hz: 1.0,
            cycles: Some(1),
            duration_ticks: None,
        };
        assert!(rs.violations().iter().any(|(f, _)| *f == "amp_min"));
        assert!(sine(1.0, 0.0, 1.0, 1).violations().is_empty());
    }

    #[test]
    fn segment_json_shape() {
        let seg: WaveformSegment = serde_json::from_str(
            r#"{"kind":"sine","amplitude":1,"mean":0,"frequency_hz":10,"cycles":100}"#,
        )
        .unwrap();
        assert_eq!(seg, sine(1.0, 0.0, 10.0, 100));
        let err = serde_json::from_str::<WaveformSegment>(
            r#"{"kind":"ramp","end_value":1,"duration_ticks":5,"amplitude":3}"#,
        );
        assert!(err.is_err());
    }
}
