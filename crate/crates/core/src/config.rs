//! Machine and test configuration with validation.
//!
//! A configuration document is a single JSON object:
//!
//! ```json
//! { "machine": { "station_count": 1, "stations": [ ... ] }, "tests": [ { ... } ] }
//! ```
//!
//! `tests[i]` drives `machine.stations[i]`. Unknown fields anywhere are rejected.
//! Units are fixed per quantity: force kN, displacement mm, strain percent.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{AdaptiveConfig, FfGains, PidGains};
use crate::iodrivers::{
    check_dac_bits, ActuatorKind, OutputStage, DEFAULT_DAC_BITS, DEFAULT_MAX_STEP_RATE_HZ,
};
use crate::plant::{ActuatorModel, Quantity, SensorChannelConfig, SpecimenModel};
use crate::waveform::WaveformSegment;

pub const MAX_STATIONS: usize = 16;
pub const DEFAULT_TICK_RATE_HZ: u32 = 100_000;
pub const DEFAULT_LOG_DECIMATION: u64 = 100;

fn default_tick_rate() -> u32 {
    DEFAULT_TICK_RATE_HZ
}

fn default_log_decimation() -> u64 {
    DEFAULT_LOG_DECIMATION
}

fn default_dac_bits() -> u8 {
    DEFAULT_DAC_BITS
}

fn default_max_step_rate() -> f64 {
    DEFAULT_MAX_STEP_RATE_HZ
}

fn default_span() -> f64 {
    1.0
}

fn default_drop_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub station_count: usize,
    #[serde(default = "default_tick_rate")]
    pub tick_rate_hz: u32,
    pub stations: Vec<StationMachineConfig>,
}

impl MachineConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate_hz as f64
    }
}

/// Wiring and hardware of one single-channel station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationMachineConfig {
    pub actuator_kind: ActuatorKind,
    #[serde(default = "default_dac_bits")]
    pub dac_bits: u8,
    #[serde(default = "default_max_step_rate")]
    pub max_step_rate_hz: f64,
    pub sensor_channels: Vec<SensorChannelConfig>,
    #[serde(default)]
    pub digital_inputs: Vec<DigitalInputConfig>,
    pub actuator: ActuatorModel,
    pub specimen: SpecimenModel,
}

impl StationMachineConfig {
    pub fn output_stage(&self) -> OutputStage {
        OutputStage {
            kind: self.actuator_kind,
            dac_bits: self.dac_bits,
            max_step_rate_hz: self.max_step_rate_hz,
        }
    }

    pub fn channel(&self, id: u8) -> Option<&SensorChannelConfig> {
        self.sensor_channels.iter().find(|c| c.channel_id == id)
    }

    /// Index of the first channel measuring `q`.
    pub fn channel_index_for(&self, q: Quantity) -> Option<usize> {
        self.sensor_channels.iter().position(|c| c.quantity == q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitalRole {
    Estop,
    LimitSwitch,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitalInputConfig {
    pub input_id: u8,
    pub role: DigitalRole,
    /// The input is asserted when the line reads low.
    #[serde(default)]
    pub active_low: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    OpenLoop,
    ClosedLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreakConfig {
    /// Fractional drop from the running peak that counts as a break.
    #[serde(default = "default_drop_fraction")]
    pub drop_fraction: f64,
    /// Peaks below this force (kN) never arm the detector.
    #[serde(default)]
    pub min_peak_force: f64,
}

impl Default for BreakConfig {
    fn default() -> Self {
        Self {
            drop_fraction: 0.5,
            min_peak_force: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndConditions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_duration_ticks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cycles: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub break_detection: Option<BreakConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limit {
    pub channel_id: u8,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    pub control_mode: ControlMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_variable: Option<Quantity>,
    #[serde(default)]
    pub pid: PidGains,
    #[serde(default)]
    pub feedforward: FfGains,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<AdaptiveConfig>,
    pub program: Vec<WaveformSegment>,
    #[serde(default = "default_log_decimation")]
    pub log_decimation: u64,
    #[serde(default)]
    pub end_conditions: EndConditions,
    #[serde(default)]
    pub limits: Vec<Limit>,
    #[serde(default)]
    pub rng_seed: u64,
    /// Setpoint magnitude that maps to full actuator command in open loop.
    #[serde(default = "default_span")]
    pub open_loop_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub machine: MachineConfig,
    pub tests: Vec<TestConfig>,
}

/// One violated invariant, located by a JSON-path-like string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration ({} violations)", .0.len())]
    Invalid(Vec<Violation>),
    /// A value did not match the schema; no source position is available.
    #[error("{0}")]
    Schema(String),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Parse { .. } | ConfigError::Schema(_) => &[],
        }
    }
}

struct Collector {
    out: Vec<Violation>,
}

impl Collector {
    fn check(&mut self, ok: bool, path: impl FnOnce() -> String, message: &str) {
        if !ok {
            self.out.push(Violation::new(path(), message));
        }
    }

    fn finite_nonneg(&mut self, v: f64, path: &str) {
        self.check(
            v.is_finite() && v >= 0.0,
            || path.to_string(),
            "must be finite and nonnegative",
        );
    }
}

pub fn validate_machine(machine: &MachineConfig) -> Vec<Violation> {
    let mut c = Collector { out: Vec::new() };
    if machine.station_count > MAX_STATIONS {
        c.out.push(Violation::new(
            "machine.station_count",
            "station_count exceeds 16",
        ));
    }
    c.check(
        machine.station_count >= 1,
        || "machine.station_count".into(),
        "station_count must be at least 1",
    );
    c.check(
        machine.tick_rate_hz > 0,
        || "machine.tick_rate_hz".into(),
        "tick_rate_hz must be positive",
    );
    c.check(
        machine.stations.len() == machine.station_count,
        || "machine.stations".into(),
        "number of stations must equal station_count",
    );
    let dt = if machine.tick_rate_hz > 0 {
        machine.dt()
    } else {
        f64::INFINITY
    };

    for (i, st) in machine.stations.iter().enumerate() {
        let p = format!("machine.stations[{i}]");
        if st.actuator_kind == ActuatorKind::DacServo && check_dac_bits(st.dac_bits).is_err() {
            c.out.push(Violation::new(
                format!("{p}.dac_bits"),
                "dac_bits must be 16, 18 or 20",
            ));
        }
        c.check(
            st.max_step_rate_hz > 0.0 && st.max_step_rate_hz.is_finite(),
            || format!("{p}.max_step_rate_hz"),
            "max_step_rate_hz must be positive",
        );
        c.check(
            !st.sensor_channels.is_empty(),
            || format!("{p}.sensor_channels"),
            "at least one sensor channel is required",
        );
        for (j, ch) in st.sensor_channels.iter().enumerate() {
            let cp = format!("{p}.sensor_channels[{j}]");
            c.check(
                ch.fsr > 0.0 && ch.fsr.is_finite(),
                || format!("{cp}.fsr"),
                "fsr must be positive",
            );
            c.check(
                ch.noise_sigma >= 0.0 && ch.noise_sigma.is_finite(),
                || format!("{cp}.noise_sigma"),
                "noise_sigma must be nonnegative",
            );
            c.check(
                ch.calibration_gain != 0.0 && ch.calibration_gain.is_finite(),
                || format!("{cp}.calibration_gain"),
                "calibration_gain must be finite and nonzero",
            );
            c.check(
                ch.calibration_offset.is_finite(),
                || format!("{cp}.calibration_offset"),
                "calibration_offset must be finite",
            );
            c.check(
                ch.channel_id < crate::acquisition::SETPOINT_CHANNEL,
                || format!("{cp}.channel_id"),
                "channel_id 254 and 255 are reserved",
            );
            c.check(
                !st.sensor_channels[..j]
                    .iter()
                    .any(|o| o.channel_id == ch.channel_id),
                || format!("{cp}.channel_id"),
                "duplicate channel_id",
            );
        }
        for (j, d) in st.digital_inputs.iter().enumerate() {
            c.check(
                !st.digital_inputs[..j]
                    .iter()
                    .any(|o| o.input_id == d.input_id),
                || format!("{p}.digital_inputs[{j}].input_id"),
                "duplicate input_id",
            );
        }
        let a = &st.actuator;
        c.check(
            a.time_constant_tau > 0.0 && a.time_constant_tau.is_finite(),
            || format!("{p}.actuator.time_constant_tau"),
            "time_constant_tau must be positive",
        );
        c.check(
            a.velocity_limit > 0.0 && a.velocity_limit.is_finite(),
            || format!("{p}.actuator.velocity_limit"),
            "velocity_limit must be positive",
        );
        c.check(
            a.gain.is_finite(),
            || format!("{p}.actuator.gain"),
            "gain must be finite",
        );
        if a.time_constant_tau > 0.0 {
            c.check(
                a.check_time_step(dt).is_ok(),
                || format!("{p}.actuator.time_constant_tau"),
                "tick period exceeds stability bound time_constant_tau/5",
            );
        }
        let s = &st.specimen;
        c.check(
            s.stiffness_k > 0.0 && s.stiffness_k.is_finite(),
            || format!("{p}.specimen.stiffness_k"),
            "stiffness_k must be positive",
        );
        if let Some(slope) = s.plastic_slope {
            c.check(
                slope <= s.stiffness_k && slope.is_finite(),
                || format!("{p}.specimen.plastic_slope"),
                "plastic_slope must not exceed stiffness_k",
            );
        }
        if let Some(fy) = s.yield_force {
            c.check(
                fy > 0.0 && fy.is_finite(),
                || format!("{p}.specimen.yield_force"),
                "yield_force must be positive",
            );
        }
        if let Some(xf) = s.fracture_displacement {
            c.check(
                xf > 0.0 && xf.is_finite(),
                || format!("{p}.specimen.fracture_displacement"),
                "fracture_displacement must be positive",
            );
        }
        c.check(
            s.gauge_length_mm > 0.0 && s.gauge_length_mm.is_finite(),
            || format!("{p}.specimen.gauge_length_mm"),
            "gauge_length_mm must be positive",
        );
    }
    c.out
}

/// Checks one station's test against that station's wiring. `path` prefixes every
/// reported location.
pub fn validate_test(
    station: &StationMachineConfig,
    test: &TestConfig,
    path: &str,
) -> Vec<Violation> {
    let mut c = Collector { out: Vec::new() };
    let p = path;
    match test.control_mode {
        ControlMode::ClosedLoop => match test.control_variable {
            None => c.out.push(Violation::new(
                format!("{p}.control_variable"),
                "closed_loop requires control_variable",
            )),
            Some(q) => c.check(
                station.channel_index_for(q).is_some(),
                || format!("{p}.control_variable"),
                "control_variable must name an existing sensor channel",
            ),
        },
        ControlMode::OpenLoop => {
            c.check(
                test.adaptive.is_none(),
                || format!("{p}.adaptive"),
                "adaptive control requires closed_loop",
            );
        }
    }

    let g = &test.pid;
    c.finite_nonneg(g.kp, &format!("{p}.pid.kp"));
    c.finite_nonneg(g.ki, &format!("{p}.pid.ki"));
    c.finite_nonneg(g.kd, &format!("{p}.pid.kd"));
    c.check(
        g.out_min < g.out_max,
        || format!("{p}.pid.out_min"),
        "out_min must be less than out_max",
    );
    c.check(
        g.out_min >= -1.0 && g.out_max <= 1.0,
        || format!("{p}.pid.out_max"),
        "output range must lie within the normalized actuator range [-1, 1]",
    );
    c.check(
        test.feedforward.kff_s.is_finite() && test.feedforward.kff_v.is_finite(),
        || format!("{p}.feedforward"),
        "feed-forward gains must be finite",
    );
    if let Some(a) = &test.adaptive {
        c.finite_nonneg(a.amp_gain, &format!("{p}.adaptive.amp_gain"));
        c.finite_nonneg(a.mean_gain, &format!("{p}.adaptive.mean_gain"));
        c.check(
            a.clamp > 0.0 && a.clamp.is_finite(),
            || format!("{p}.adaptive.clamp"),
            "clamp must be positive",
        );
    }

    c.check(
        !test.program.is_empty(),
        || format!("{p}.program"),
        "program must not be empty",
    );
    for (i, seg) in test.program.iter().enumerate() {
        for (field, msg) in seg.violations() {
            c.out
                .push(Violation::new(format!("{p}.program[{i}].{field}"), msg));
        }
    }
    c.check(
        test.log_decimation >= 1,
        || format!("{p}.log_decimation"),
        "log_decimation must be at least 1",
    );
    c.check(
        test.open_loop_span > 0.0 && test.open_loop_span.is_finite(),
        || format!("{p}.open_loop_span"),
        "open_loop_span must be positive",
    );
    for (i, l) in test.limits.iter().enumerate() {
        c.check(
            station.channel(l.channel_id).is_some(),
            || format!("{p}.limits[{i}].channel_id"),
            "limit refers to an unknown channel",
        );
        c.check(
            l.min < l.max,
            || format!("{p}.limits[{i}].min"),
            "min must be less than max",
        );
    }
    if let Some(b) = &test.end_conditions.break_detection {
        c.check(
            b.drop_fraction > 0.0 && b.drop_fraction < 1.0,
            || format!("{p}.end_conditions.break_detection.drop_fraction"),
            "drop_fraction must lie in (0, 1)",
        );
        c.check(
            station.channel_index_for(Quantity::Force).is_some()
                && station.channel_index_for(Quantity::Displacement).is_some(),
            || format!("{p}.end_conditions.break_detection"),
            "break detection needs a force and a displacement channel",
        );
    }
    c.out
}

/// Every violated invariant of a machine plus its per-station tests, in a fixed order.
pub fn validate(machine: &MachineConfig, tests: &[TestConfig]) -> Vec<Violation> {
    let mut out = validate_machine(machine);
    if tests.len() != machine.station_count {
        out.push(Violation::new("tests", "one test per station is required"));
    }
    for (i, (station, test)) in machine.stations.iter().zip(tests).enumerate() {
        out.extend(validate_test(station, test, &format!("tests[{i}]")));
    }
    out
}

impl ConfigDocument {
    pub fn validate(&self) -> Vec<Violation> {
        validate(&self.machine, &self.tests)
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration is always serializable")
    }
}

/// Parses and validates a configuration document.
pub fn load(text: &str) -> Result<ConfigDocument, ConfigError> {
    let doc: ConfigDocument = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let violations = doc.validate();
    if violations.is_empty() {
        Ok(doc)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

/// Parses a single test section.
pub fn parse_test(value: serde_json::Value) -> Result<TestConfig, ConfigError> {
    serde_json::from_value(value).map_err(|e| ConfigError::Schema(e.to_string()))
}
