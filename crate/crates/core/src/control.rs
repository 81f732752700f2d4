//! Closed-loop control laws.
//!
//! The PID is positional with derivative on measurement and an integrator clamped to
//! the output range. Feed-forward adds a setpoint term and a setpoint-velocity term.
//! The adaptive law runs once per completed cycle and nudges the commanded amplitude
//! and mean by additive, clamped corrections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("adaptive update requested before any process value was observed")]
    NoObservations,
}

fn default_out_min() -> f64 {
    -1.0
}

fn default_out_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    #[serde(default = "default_out_min")]
    pub out_min: f64,
    #[serde(default = "default_out_max")]
    pub out_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            out_min: -1.0,
            out_max: 1.0,
        }
    }
}

impl PidGains {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.out_min, self.out_max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfGains {
    #[serde(default)]
    pub kff_s: f64,
    #[serde(default)]
    pub kff_v: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub integrator: f64,
    pub prev_pv: f64,
    pub prev_setpoint: f64,
    pub initialized: bool,
}

/// One PID update. Returns the saturated output and the next state.
pub fn pid_step(
    gains: &PidGains,
    ff: &FfGains,
    setpoint: f64,
    pv: f64,
    state: &ControlState,
    dt: f64,
) -> Result<(f64, ControlState), ControlError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(ControlError::BadTimeStep(dt));
    }
    let error = setpoint - pv;
    let integrator = gains.clamp(state.integrator + gains.ki * error * dt);
    let (derivative, velocity) = if state.initialized {
        (
            -gains.kd * (pv - state.prev_pv) / dt,
            (setpoint - state.prev_setpoint) / dt,
        )
    } else {
        (0.0, 0.0)
    };
    let feedforward = ff.kff_s * setpoint + ff.kff_v * velocity;
    let output = gains.clamp(gains.kp * error + integrator + derivative + feedforward);
    Ok((
        output,
        ControlState {
            integrator,
            prev_pv: pv,
            prev_setpoint: setpoint,
            initialized: true,
        },
    ))
}

/// Re-seeds the controller so the next zero-error step reproduces `current_output`.
///
/// The setpoint feed-forward contribution at `setpoint` is folded out of the
/// integrator, so with `kff_s = 0` the integrator is simply the clamped output.
pub fn bumpless_init(
    gains: &PidGains,
    ff: &FfGains,
    current_output: f64,
    current_pv: f64,
    setpoint: f64,
) -> ControlState {
    ControlState {
        integrator: gains.clamp(current_output - ff.kff_s * setpoint),
        prev_pv: current_pv,
        prev_setpoint: setpoint,
        initialized: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub amp_gain: f64,
    pub mean_gain: f64,
    /// Bound on the magnitude of either correction, engineering units.
    pub clamp: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub amp_correction: f64,
    pub mean_correction: f64,
    pub cycle_max: f64,
    pub cycle_min: f64,
    pub observed: bool,
    /// Set when the last update had to clamp a correction.
    pub saturated: bool,
}

impl AdaptiveState {
    pub fn observe(&mut self, pv: f64) {
        if self.observed {
            self.cycle_max = self.cycle_max.max(pv);
            self.cycle_min = self.cycle_min.min(pv);
        } else {
            self.cycle_max = pv;
            self.cycle_min = pv;
            self.observed = true;
        }
    }

    pub fn reset_extrema(&mut self) {
        self.observed = false;
        self.cycle_max = 0.0;
        self.cycle_min = 0.0;
    }
}

/// Per-cycle amplitude/mean correction from the observed extrema.
pub fn adaptive_update(
    target_amp: f64,
    target_mean: f64,
    state: &AdaptiveState,
    config: &AdaptiveConfig,
) -> Result<AdaptiveState, ControlError> {
    if !state.observed {
        return Err(ControlError::NoObservations);
    }
    let measured_amp = (state.cycle_max - state.cycle_min) / 2.0;
    let measured_mean = (state.cycle_max + state.cycle_min) / 2.0;
    let raw_amp = state.amp_correction + config.amp_gain * (target_amp - measured_amp);
    let raw_mean = state.mean_correction + config.mean_gain * (target_mean - measured_mean);
    let bound = config.clamp.abs();
    let (amp, amp_hit) = clamp_finite(raw_amp, bound);
    let (mean, mean_hit) = clamp_finite(raw_mean, bound);
    Ok(AdaptiveState {
        amp_correction: amp,
        mean_correction: mean,
        cycle_max: 0.0,
        cycle_min: 0.0,
        observed: false,
        saturated: amp_hit || mean_hit,
    })
}

fn clamp_finite(v: f64, bound: f64) -> (f64, bool) {
    if v.is_nan() {
        return (0.0, true);
    }
    let c = v.clamp(-bound, bound);
    (c, c != v)
}
