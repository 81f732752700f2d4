//! Converter and driver encodings: bipolar 32-bit ADC, N-bit DAC, 16-bit PWM duty
//! and signed stepper rate.
//!
//! All encoders are stateless. Rounding is half-away-from-zero everywhere, which is
//! what `f64::round` does.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest ADC code magnitude. The scale is symmetric, so `i32::MIN` is never produced.
pub const ADC_FULL_SCALE: i32 = i32::MAX;

/// Number of PWM duty steps above zero (16-bit duty register).
pub const PWM_STEPS: u16 = u16::MAX;

pub const DEFAULT_DAC_BITS: u8 = 20;
pub const DEFAULT_MAX_STEP_RATE_HZ: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DriverError {
    #[error("non-finite input value {0}")]
    NonFinite(f64),
    #[error("full-scale range must be positive, got {0}")]
    BadFsr(f64),
    #[error("unsupported DAC width {0} (expected 16, 18 or 20)")]
    BadDacWidth(u8),
}

/// Raw signed code produced by a bipolar ADC channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdcCode(pub i32);

impl AdcCode {
    pub fn raw(self) -> i32 {
        self.0
    }
}

pub fn adc_encode(value: f64, fsr: f64) -> Result<AdcCode, DriverError> {
    if !value.is_finite() {
        return Err(DriverError::NonFinite(value));
    }
    if !fsr.is_finite() || fsr <= 0.0 {
        return Err(DriverError::BadFsr(fsr));
    }
    let scaled = value.clamp(-fsr, fsr) / fsr * ADC_FULL_SCALE as f64;
    Ok(AdcCode(scaled.round() as i32))
}

pub fn adc_decode(code: AdcCode, fsr: f64) -> f64 {
    code.0 as f64 / ADC_FULL_SCALE as f64 * fsr
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorKind {
    DacServo,
    PwmDc,
    Stepper,
}

/// Output-stage parameters for one station's actuator driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputStage {
    pub kind: ActuatorKind,
    pub dac_bits: u8,
    pub max_step_rate_hz: f64,
}

impl OutputStage {
    pub fn new(kind: ActuatorKind) -> Self {
        Self {
            kind,
            dac_bits: DEFAULT_DAC_BITS,
            max_step_rate_hz: DEFAULT_MAX_STEP_RATE_HZ,
        }
    }
}

/// Command word handed to the actuator driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActuatorCommand {
    Dac {
        code: i32,
        bits: u8,
    },
    /// Duty numerator over [`PWM_STEPS`].
    Pwm {
        duty_code: u16,
    },
    Stepper {
        rate_hz: f64,
        max_rate_hz: f64,
    },
}

impl ActuatorCommand {
    pub fn pwm_duty(&self) -> Option<f64> {
        match *self {
            ActuatorCommand::Pwm { duty_code } => Some(duty_code as f64 / PWM_STEPS as f64),
            _ => None,
        }
    }

    /// Integer representation written to logs.
    pub fn raw(&self) -> i32 {
        match *self {
            ActuatorCommand::Dac { code, .. } => code,
            ActuatorCommand::Pwm { duty_code } => duty_code as i32,
            ActuatorCommand::Stepper { rate_hz, .. } => rate_hz.round() as i32,
        }
    }

    /// Normalized command in `[-1, 1]` as seen by the actuator after quantization.
    pub fn normalized(&self) -> f64 {
        match *self {
            ActuatorCommand::Dac { code, bits } => code as f64 / dac_full_scale(bits) as f64,
            ActuatorCommand::Pwm { duty_code } => duty_code as f64 / PWM_STEPS as f64 * 2.0 - 1.0,
            ActuatorCommand::Stepper {
                rate_hz,
                max_rate_hz,
            } => rate_hz / max_rate_hz,
        }
    }
}

fn dac_full_scale(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

pub fn check_dac_bits(bits: u8) -> Result<(), DriverError> {
    match bits {
        16 | 18 | 20 => Ok(()),
        other => Err(DriverError::BadDacWidth(other)),
    }
}

/// Encodes a normalized control output `u` for the given output stage.
///
/// `u` is clamped to `[-1, 1]` first; the control layer already keeps it there.
pub fn encode_output(u: f64, stage: &OutputStage) -> Result<ActuatorCommand, DriverError> {
    if !u.is_finite() {
        return Err(DriverError::NonFinite(u));
    }
    let u = u.clamp(-1.0, 1.0);
    Ok(match stage.kind {
        ActuatorKind::DacServo => {
            check_dac_bits(stage.dac_bits)?;
            ActuatorCommand::Dac {
                code: (u * dac_full_scale(stage.dac_bits) as f64).round() as i32,
                bits: stage.dac_bits,
            }
        }
        ActuatorKind::PwmDc => ActuatorCommand::Pwm {
            duty_code: ((u + 1.0) / 2.0 * PWM_STEPS as f64).round() as u16,
        },
        ActuatorKind::Stepper => ActuatorCommand::Stepper {
            rate_hz: u * stage.max_step_rate_hz,
            max_rate_hz: stage.max_step_rate_hz,
        },
    })
}
