//! Simulated testing machine: first-order velocity-mode actuator driving a specimen
//! with an elastic / linear-hardening law, read back through noisy quantized sensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iodrivers::{adc_decode, adc_encode, AdcCode, DriverError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("time step {dt} exceeds stability bound tau/5 = {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("time step must be positive")]
    BadTimeStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// kN
    Force,
    /// mm
    Displacement,
    /// percent of gauge length
    Strain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorModel {
    /// Steady-state velocity (mm/s) per unit normalized command.
    pub gain: f64,
    pub time_constant_tau: f64,
    pub velocity_limit: f64,
}

impl ActuatorModel {
    pub fn check_time_step(&self, dt: f64) -> Result<(), PlantError> {
        if dt.is_nan() || dt <= 0.0 {
            return Err(PlantError::BadTimeStep);
        }
        let bound = self.time_constant_tau / 5.0;
        if dt > bound {
            return Err(PlantError::Unstable { dt, bound });
        }
        Ok(())
    }
}

fn default_gauge_length() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecimenModel {
    /// kN/mm
    pub stiffness_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yield_force: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plastic_slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fracture_displacement: Option<f64>,
    /// Used to convert displacement to strain.
    #[serde(default = "default_gauge_length")]
    pub gauge_length_mm: f64,
}

/// Force for a monotonically loaded intact specimen at displacement `x`.
///
/// Elastic `k·x` below yield; beyond it `yield + plastic_slope·(|x| − x_yield)`,
/// with the sign of `x`.
pub fn specimen_force(x: f64, model: &SpecimenModel, intact: bool) -> f64 {
    if !intact {
        return 0.0;
    }
    let elastic = model.stiffness_k * x;
    match model.yield_force {
        Some(fy) if elastic.abs() >= fy => {
            let x_yield = fy / model.stiffness_k;
            let slope = model.plastic_slope.unwrap_or(0.0);
            (fy + slope * (x.abs() - x_yield)).copysign(x)
        }
        _ => elastic,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub position: f64,
    pub velocity: f64,
    pub specimen_intact: bool,
    pub peak_stress_seen: f64,
}

impl Default for PlantState {
    fn default() -> Self {
        Self {
            position: 0.0,
            velocity: 0.0,
            specimen_intact: true,
            peak_stress_seen: 0.0,
        }
    }
}

/// True values a sensor can observe.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlantOutputs {
    pub force: f64,
    pub displacement: f64,
    pub strain: f64,
}

impl PlantOutputs {
    pub fn get(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Force => self.force,
            Quantity::Displacement => self.displacement,
            Quantity::Strain => self.strain,
        }
    }
}

/// Semi-implicit Euler step of the actuator plus specimen.
pub fn plant_step(
    state: &PlantState,
    u: f64,
    dt: f64,
    actuator: &ActuatorModel,
    specimen: &SpecimenModel,
) -> (PlantState, PlantOutputs) {
    let target = (actuator.gain * u).clamp(-actuator.velocity_limit, actuator.velocity_limit);
    let velocity = state.velocity + (target - state.velocity) * dt / actuator.time_constant_tau;
    let position = state.position + velocity * dt;
    let mut intact = state.specimen_intact;
    if let Some(limit) = specimen.fracture_displacement {
        if position.abs() >= limit {
            intact = false;
        }
    }
    let force = specimen_force(position, specimen, intact);
    let next = PlantState {
        position,
        velocity,
        specimen_intact: intact,
        peak_stress_seen: state.peak_stress_seen.max(force.abs()),
    };
    (next, outputs_of(&next, specimen))
}

pub fn outputs_of(state: &PlantState, specimen: &SpecimenModel) -> PlantOutputs {
    PlantOutputs {
        force: specimen_force(state.position, specimen, state.specimen_intact),
        displacement: state.position,
        strain: state.position / specimen.gauge_length_mm * 100.0,
    }
}

/// Anything the engine can drive and read back. The simulated machine is the
/// default; tests substitute scripted plants.
pub trait Plant: Send {
    fn outputs(&self) -> PlantOutputs;
    fn step(&mut self, u: f64, dt: f64);
    fn state(&self) -> PlantState;
}

#[derive(Debug, Clone)]
pub struct SimulatedMachine {
    pub actuator: ActuatorModel,
    pub specimen: SpecimenModel,
    state: PlantState,
}

impl SimulatedMachine {
    pub fn new(actuator: ActuatorModel, specimen: SpecimenModel) -> Self {
        Self {
            actuator,
            specimen,
            state: PlantState::default(),
        }
    }
}

impl Plant for SimulatedMachine {
    fn outputs(&self) -> PlantOutputs {
        outputs_of(&self.state, &self.specimen)
    }

    fn step(&mut self, u: f64, dt: f64) {
        self.state = plant_step(&self.state, u, dt, &self.actuator, &self.specimen).0;
    }

    fn state(&self) -> PlantState {
        self.state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorChannelConfig {
    pub channel_id: u8,
    pub quantity: Quantity,
    pub fsr: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub calibration_gain: f64,
    #[serde(default)]
    pub calibration_offset: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorReading {
    pub raw: AdcCode,
    pub engineering: f64,
    /// Calibrated analog value fell outside the converter's range.
    pub overrange: bool,
}

/// Quantized reading of `true_value` after noise and calibration, in engineering units.
///
/// A noise draw is only taken when `noise_sigma > 0`, so noiseless channels leave
/// the stream untouched.
pub fn read_sensor(
    channel: &SensorChannelConfig,
    true_value: f64,
    rng_state: &mut u64,
) -> Result<SensorReading, DriverError> {
    let noisy = if channel.noise_sigma > 0.0 {
        true_value + channel.noise_sigma * rng::gaussian(rng_state)
    } else {
        true_value
    };
    let analog = noisy * channel.calibration_gain + channel.calibration_offset;
    let raw = adc_encode(analog, channel.fsr)?;
    let engineering =
        (adc_decode(raw, channel.fsr) - channel.calibration_offset) / channel.calibration_gain;
    Ok(SensorReading {
        raw,
        engineering,
        overrange: analog.abs() > channel.fsr,
    })
}
