//! Per-station tick pipeline and the multi-station supervisor.
//!
//! One tick of a running station:
//!
//! 1. read every sensor channel;
//! 2. take the process value from the control-variable channel;
//! 3. safety checks on digital inputs first, then on analog limits and over-range;
//!    a trip faults the station and the zero command still goes out on this tick;
//! 4. render the next waveform point, with adaptive corrections on sine-family segments;
//! 5. closed loop runs the PID; open loop maps the setpoint straight to the output;
//! 6. encode the actuator command;
//! 7. step the plant with the decoded command;
//! 8. emit samples on decimated ticks;
//! 9. evaluate end conditions.
//!
//! Stations share nothing. Commands are applied between ticks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{Sample, SampleSink, ACTUATOR_CHANNEL, SETPOINT_CHANNEL};
use crate::config::{
    validate_test, ConfigDocument, ControlMode, DigitalRole, Limit, StationMachineConfig,
    TestConfig, Violation, MAX_STATIONS,
};
use crate::control::{adaptive_update, bumpless_init, pid_step, AdaptiveState, ControlState};
use crate::iodrivers::{encode_output, ActuatorCommand, DriverError, OutputStage};
use crate::plant::{read_sensor, Plant, PlantState, Quantity, SensorReading, SimulatedMachine};
use crate::rng;
use crate::waveform::{Corrections, GeneratorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Idle,
    Configured,
    Running,
    Holding,
    Completed,
    Faulted,
}

impl Lifecycle {
    pub fn as_str(self) -> &'static str {
        match self {
            Lifecycle::Idle => "idle",
            Lifecycle::Configured => "configured",
            Lifecycle::Running => "running",
            Lifecycle::Holding => "holding",
            Lifecycle::Completed => "completed",
            Lifecycle::Faulted => "faulted",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Lifecycle::Completed | Lifecycle::Faulted)
    }
}

impl std::fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    Estop,
    LimitExceeded,
    SpecimenBreak,
    SensorOverrange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub kind: SafetyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_id: Option<u8>,
    /// Digital input that tripped, for e-stop and limit-switch inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_id: Option<u8>,
    pub tick: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionReason {
    ProgramDone,
    MaxDuration,
    MaxCycles,
    SpecimenBreak,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("station is {0}, not running")]
    NotRunning(Lifecycle),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("waveform: {0}")]
    Waveform(#[from] crate::waveform::WaveformError),
    #[error("control: {0}")]
    Control(#[from] crate::control::ControlError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("unknown station {0}")]
    UnknownStation(usize),
    #[error("command requires a station index")]
    MissingStation,
    #[error("not configured")]
    NotConfigured,
    #[error("illegal transition: {command} while {from}")]
    IllegalTransition {
        from: Lifecycle,
        command: &'static str,
    },
    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

impl CommandError {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::UnknownStation(_) | CommandError::MissingStation => "bad_station",
            CommandError::NotConfigured => "not_configured",
            CommandError::IllegalTransition { .. } => "illegal_transition",
            CommandError::Invalid(_) => "invalid_config",
        }
    }
}

/// Partial gain update; absent fields keep their current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ki: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kff_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kff_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandKind {
    Configure(Box<TestConfig>),
    Start,
    Stop,
    Hold,
    Resume,
    Estop,
    SetGains(GainsPatch),
    SetLimits(Vec<Limit>),
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Configure(_) => "configure",
            CommandKind::Start => "start",
            CommandKind::Stop => "stop",
            CommandKind::Hold => "hold",
            CommandKind::Resume => "resume",
            CommandKind::Estop => "estop",
            CommandKind::SetGains(_) => "set_gains",
            CommandKind::SetLimits(_) => "set_limits",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub kind: CommandKind,
    /// Target station; ignored by `Estop`, which is global.
    pub station: Option<usize>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ack {
    pub seq: u64,
    /// Stations whose lifecycle the command touched, with their new state.
    pub changed: Vec<(usize, Lifecycle)>,
    pub events: Vec<SafetyEvent>,
}

/// Mutable per-station state carried from tick to tick.
#[derive(Debug, Clone, PartialEq)]
pub struct StationState {
    pub lifecycle: Lifecycle,
    /// Index of the next tick to execute.
    pub tick: u64,
    /// Ticks spent running since `start`.
    pub run_ticks: u64,
    pub generator: GeneratorState,
    pub control: ControlState,
    pub adaptive: AdaptiveState,
    pub plant: PlantState,
    pub last_output: f64,
    pub last_setpoint: f64,
    pub last_pv: f64,
    pub cycles: u64,
    pub fault: Option<SafetyEvent>,
    pub completion: Option<CompletionReason>,
    pub break_event: Option<SafetyEvent>,
}

impl StationState {
    fn new() -> Self {
        Self {
            lifecycle: Lifecycle::Idle,
            tick: 0,
            run_ticks: 0,
            generator: GeneratorState::new(0),
            control: ControlState::default(),
            adaptive: AdaptiveState::default(),
            plant: PlantState::default(),
            last_output: 0.0,
            last_setpoint: 0.0,
            last_pv: 0.0,
            cycles: 0,
            fault: None,
            completion: None,
            break_event: None,
        }
    }
}

/// What one tick did, for callers that trace the loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickReport {
    pub tick: u64,
    pub setpoint: f64,
    pub pv: f64,
    pub output: f64,
    pub command: ActuatorCommand,
    pub cycle_completed: bool,
    pub event: Option<SafetyEvent>,
    pub lifecycle: Lifecycle,
}

#[derive(Debug, Clone, Copy, Default)]
struct BreakTracker {
    peak_force: f64,
    disp_at_peak: f64,
    armed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct CycleExtrema {
    max: f64,
    min: f64,
    seen: bool,
}

impl CycleExtrema {
    fn observe(&mut self, v: f64) {
        if self.seen {
            self.max = self.max.max(v);
            self.min = self.min.min(v);
        } else {
            *self = CycleExtrema {
                max: v,
                min: v,
                seen: true,
            };
        }
    }
}

/// One station's execution context. Owns its plant and never shares state.
pub struct Station<P: Plant = SimulatedMachine> {
    index: u8,
    tick_rate_hz: u32,
    dt: f64,
    machine: StationMachineConfig,
    stage: OutputStage,
    test: Option<TestConfig>,
    branch: Option<ControlMode>,
    plant: P,
    state: StationState,
    noise_rng: u64,
    digital_levels: Vec<bool>,
    readings: Vec<SensorReading>,
    pv_index: usize,
    force_index: Option<usize>,
    disp_index: Option<usize>,
    nominal: CycleExtrema,
    breaker: BreakTracker,
    pending_bumpless: bool,
    last_segment: usize,
}

impl Station<SimulatedMachine> {
    pub fn simulated(index: u8, tick_rate_hz: u32, machine: StationMachineConfig) -> Self {
        let plant = SimulatedMachine::new(machine.actuator.clone(), machine.specimen.clone());
        Station::with_plant(index, tick_rate_hz, machine, plant)
    }
}

/// A plant that can be returned to its initial condition when a station is reconfigured.
pub trait ResettablePlant: Plant {
    fn reset(&mut self);
}

impl ResettablePlant for SimulatedMachine {
    fn reset(&mut self) {
        *self = SimulatedMachine::new(self.actuator.clone(), self.specimen.clone());
    }
}

impl<P: ResettablePlant> Station<P> {
    pub fn with_plant(
        index: u8,
        tick_rate_hz: u32,
        machine: StationMachineConfig,
        plant: P,
    ) -> Self {
        let stage = machine.output_stage();
        let digital_levels = machine
            .digital_inputs
            .iter()
            .map(|d| d.active_low)
            .collect();
        Self {
            index,
            tick_rate_hz,
            dt: 1.0 / tick_rate_hz as f64,
            readings: Vec::with_capacity(machine.sensor_channels.len()),
            force_index: machine.channel_index_for(Quantity::Force),
            disp_index: machine.channel_index_for(Quantity::Displacement),
            machine,
            stage,
            test: None,
            branch: None,
            plant,
            state: StationState::new(),
            noise_rng: 0,
            digital_levels,
            pv_index: 0,
            nominal: CycleExtrema::default(),
            breaker: BreakTracker::default(),
            pending_bumpless: false,
            last_segment: 0,
        }
    }

    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn state(&self) -> &StationState {
        &self.state
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.state.lifecycle
    }

    pub fn test(&self) -> Option<&TestConfig> {
        self.test.as_ref()
    }

    pub fn machine(&self) -> &StationMachineConfig {
        &self.machine
    }

    pub fn plant(&self) -> &P {
        &self.plant
    }

    pub fn tick_rate_hz(&self) -> u32 {
        self.tick_rate_hz
    }

    /// Drives a simulated digital input line.
    pub fn set_digital_input(&mut self, input_id: u8, level: bool) -> bool {
        match self
            .machine
            .digital_inputs
            .iter()
            .position(|d| d.input_id == input_id)
        {
            Some(i) => {
                self.digital_levels[i] = level;
                true
            }
            None => false,
        }
    }

    /// Sets the line so the input reads as asserted or released.
    pub fn assert_digital_input(&mut self, input_id: u8, asserted: bool) -> bool {
        let active_low = self
            .machine
            .digital_inputs
            .iter()
            .find(|d| d.input_id == input_id)
            .map(|d| d.active_low);
        match active_low {
            Some(low) => self.set_digital_input(input_id, asserted != low),
            None => false,
        }
    }

    fn illegal(&self, command: &'static str) -> CommandError {
        CommandError::IllegalTransition {
            from: self.state.lifecycle,
            command,
        }
    }

    pub fn configure(&mut self, test: TestConfig) -> Result<(), CommandError> {
        match self.state.lifecycle {
            Lifecycle::Idle | Lifecycle::Completed | Lifecycle::Faulted => {}
            _ => return Err(self.illegal("configure")),
        }
        let violations = validate_test(&self.machine, &test, &format!("tests[{}]", self.index));
        if !violations.is_empty() {
            return Err(CommandError::Invalid(violations));
        }
        self.plant.reset();
        self.state = StationState::new();
        self.state.generator = GeneratorState::new(test.rng_seed);
        self.state.lifecycle = Lifecycle::Configured;
        self.noise_rng = rng::noise_seed(test.rng_seed);
        self.pv_index = test
            .control_variable
            .and_then(|q| self.machine.channel_index_for(q))
            .unwrap_or(0);
        self.nominal = CycleExtrema::default();
        self.breaker = BreakTracker::default();
        self.pending_bumpless = false;
        self.last_segment = 0;
        self.branch = None;
        self.test = Some(test);
        Ok(())
    }

    pub fn start(&mut self) -> Result<(), CommandError> {
        match self.state.lifecycle {
            Lifecycle::Configured => {}
            Lifecycle::Idle => return Err(CommandError::NotConfigured),
            _ => return Err(self.illegal("start")),
        }
        let test = self.test.as_ref().ok_or(CommandError::NotConfigured)?;
        self.branch = Some(test.control_mode);
        self.state.run_ticks = 0;
        self.state.lifecycle = Lifecycle::Running;
        Ok(())
    }

    pub fn hold(&mut self) -> Result<(), CommandError> {
        if self.state.lifecycle != Lifecycle::Running {
            return Err(self.illegal("hold"));
        }
        self.state.lifecycle = Lifecycle::Holding;
        Ok(())
    }

    pub fn resume(&mut self) -> Result<(), CommandError> {
        if self.state.lifecycle != Lifecycle::Holding {
            return Err(self.illegal("resume"));
        }
        self.pending_bumpless = self.branch == Some(ControlMode::ClosedLoop);
        self.state.lifecycle = Lifecycle::Running;
        Ok(())
    }

    pub fn stop(&mut self) {
        self.state.lifecycle = Lifecycle::Idle;
        self.state.last_output = 0.0;
        self.test = None;
        self.branch = None;
    }

    /// Latches an e-stop fault. Returns the event unless the station was already faulted.
    pub fn estop(&mut self) -> Option<SafetyEvent> {
        if self.state.lifecycle == Lifecycle::Faulted {
            return None;
        }
        let event = SafetyEvent {
            kind: SafetyKind::Estop,
            channel_id: None,
            input_id: None,
            tick: self.state.tick,
            value: 0.0,
        };
        self.fault(event);
        Some(event)
    }

    fn fault(&mut self, event: SafetyEvent) {
        self.state.lifecycle = Lifecycle::Faulted;
        self.state.last_output = 0.0;
        self.state.fault = Some(event);
    }

    pub fn set_gains(&mut self, patch: &GainsPatch) -> Result<(), CommandError> {
        let Some(test) = self.test.as_ref() else {
            return Err(CommandError::NotConfigured);
        };
        let mut next = test.clone();
        let g = &mut next.pid;
        g.kp = patch.kp.unwrap_or(g.kp);
        g.ki = patch.ki.unwrap_or(g.ki);
        g.kd = patch.kd.unwrap_or(g.kd);
        g.out_min = patch.out_min.unwrap_or(g.out_min);
        g.out_max = patch.out_max.unwrap_or(g.out_max);
        next.feedforward.kff_s = patch.kff_s.unwrap_or(next.feedforward.kff_s);
        next.feedforward.kff_v = patch.kff_v.unwrap_or(next.feedforward.kff_v);
        self.replace_test(next)
    }

    pub fn set_limits(&mut self, limits: Vec<Limit>) -> Result<(), CommandError> {
        let Some(test) = self.test.as_ref() else {
            return Err(CommandError::NotConfigured);
        };
        let mut next = test.clone();
        next.limits = limits;
        self.replace_test(next)
    }

    fn replace_test(&mut self, next: TestConfig) -> Result<(), CommandError> {
        let violations = validate_test(&self.machine, &next, &format!("tests[{}]", self.index));
        if !violations.is_empty() {
            return Err(CommandError::Invalid(violations));
        }
        // Keep the integrator inside a possibly narrowed output range.
        self.state.control.integrator = next.pid.clamp(self.state.control.integrator);
        self.test = Some(next);
        Ok(())
    }

    fn safety_check(&self, test: &TestConfig, tick: u64) -> Option<SafetyEvent> {
        for (d, &level) in self.machine.digital_inputs.iter().zip(&self.digital_levels) {
            let asserted = level != d.active_low;
            if !asserted {
                continue;
            }
            let kind = match d.role {
                DigitalRole::Estop => SafetyKind::Estop,
                DigitalRole::LimitSwitch => SafetyKind::LimitExceeded,
                DigitalRole::Generic => continue,
            };
            return Some(SafetyEvent {
                kind,
                channel_id: None,
                input_id: Some(d.input_id),
                tick,
                value: 1.0,
            });
        }
        for (ch, r) in self.machine.sensor_channels.iter().zip(&self.readings) {
            if r.overrange {
                return Some(SafetyEvent {
                    kind: SafetyKind::SensorOverrange,
                    channel_id: Some(ch.channel_id),
                    input_id: None,
                    tick,
                    value: r.engineering,
                });
            }
        }
        for limit in &test.limits {
            let Some(i) = self
                .machine
                .sensor_channels
                .iter()
                .position(|c| c.channel_id == limit.channel_id)
            else {
                continue;
            };
            let v = self.readings[i].engineering;
            if v < limit.min || v > limit.max {
                return Some(SafetyEvent {
                    kind: SafetyKind::LimitExceeded,
                    channel_id: Some(limit.channel_id),
                    input_id: None,
                    tick,
                    value: v,
                });
            }
        }
        None
    }

    fn read_sensors(&mut self) -> Result<(), EngineError> {
        let outputs = self.plant.outputs();
        self.readings.clear();
        for ch in &self.machine.sensor_channels {
            let r = read_sensor(ch, outputs.get(ch.quantity), &mut self.noise_rng)?;
            self.readings.push(r);
        }
        Ok(())
    }

    fn emit(&self, sink: &mut dyn SampleSink, tick: u64, setpoint: f64, command: &ActuatorCommand) {
        for (ch, r) in self.machine.sensor_channels.iter().zip(&self.readings) {
            sink.accept(Sample {
                tick,
                station: self.index,
                channel: ch.channel_id,
                raw: r.raw.raw(),
                engineering: r.engineering,
            });
        }
        sink.accept(Sample {
            tick,
            station: self.index,
            channel: SETPOINT_CHANNEL,
            raw: 0,
            engineering: setpoint,
        });
        sink.accept(Sample {
            tick,
            station: self.index,
            channel: ACTUATOR_CHANNEL,
            raw: command.raw(),
            engineering: command.normalized(),
        });
    }

    /// Executes one tick. Running and Holding stations run the control pipeline;
    /// Configured stations only acquire and monitor safety with the output at zero.
    pub fn tick(&mut self, sink: &mut dyn SampleSink) -> Result<TickReport, EngineError> {
        let lifecycle = self.state.lifecycle;
        if !matches!(
            lifecycle,
            Lifecycle::Running | Lifecycle::Holding | Lifecycle::Configured
        ) {
            return Err(EngineError::NotRunning(lifecycle));
        }
        // Configuration is immutable for the duration of the tick.
        let test = self
            .test
            .take()
            .expect("active stations always have a test");
        let result = self.run_pipeline(&test, sink);
        self.test = Some(test);
        result
    }

    fn run_pipeline(
        &mut self,
        test: &TestConfig,
        sink: &mut dyn SampleSink,
    ) -> Result<TickReport, EngineError> {
        let tick = self.state.tick;
        let lifecycle = self.state.lifecycle;
        self.state.tick += 1;

        // (1)-(2)
        self.read_sensors()?;
        let pv = self.readings[self.pv_index].engineering;
        self.state.last_pv = pv;

        // (3)
        if let Some(event) = self.safety_check(test, tick) {
            // The zero command is still written and logged on the trip tick.
            self.fault(event);
            let command = encode_output(0.0, &self.stage)?;
            self.plant.step(command.normalized(), self.dt);
            self.state.plant = self.plant.state();
            if tick.is_multiple_of(test.log_decimation) {
                self.emit(sink, tick, self.state.last_setpoint, &command);
            }
            return Ok(TickReport {
                tick,
                setpoint: self.state.last_setpoint,
                pv,
                output: 0.0,
                command,
                cycle_completed: false,
                event: Some(event),
                lifecycle: Lifecycle::Faulted,
            });
        }

        let mut cycle_completed = false;
        let mut program_done = false;
        let (setpoint, output) = match lifecycle {
            Lifecycle::Configured => (self.state.generator.entry_value, 0.0),
            Lifecycle::Holding => (self.state.last_setpoint, self.state.last_output),
            _ => {
                // (4)
                let seg_before = self.state.generator.segment_index;
                if seg_before != self.last_segment {
                    self.last_segment = seg_before;
                    self.state.adaptive = AdaptiveState::default();
                    self.nominal = CycleExtrema::default();
                }
                let corrections = if test.adaptive.is_some() {
                    Corrections {
                        amplitude: self.state.adaptive.amp_correction,
                        mean: self.state.adaptive.mean_correction,
                    }
                } else {
                    Corrections::default()
                };
                let adapts = test
                    .program
                    .get(seg_before)
                    .is_some_and(|s| s.is_sine_family());
                let point = self.state.generator.next_point(
                    &test.program,
                    self.tick_rate_hz as f64,
                    corrections,
                )?;
                cycle_completed = point.cycle_completed;
                program_done = point.program_done;

                // (5)
                let output = match self.branch {
                    Some(ControlMode::ClosedLoop) => {
                        if self.pending_bumpless {
                            self.state.control = bumpless_init(
                                &test.pid,
                                &test.feedforward,
                                self.state.last_output,
                                pv,
                                point.setpoint,
                            );
                            self.pending_bumpless = false;
                        }
                        let (out, next) = pid_step(
                            &test.pid,
                            &test.feedforward,
                            point.setpoint,
                            pv,
                            &self.state.control,
                            self.dt,
                        )?;
                        self.state.control = next;
                        if let (Some(cfg), true) = (&test.adaptive, point.periodic && adapts) {
                            self.state.adaptive.observe(pv);
                            self.nominal.observe(point.nominal);
                            if cycle_completed && self.nominal.seen {
                                let target_amp = (self.nominal.max - self.nominal.min) / 2.0;
                                let target_mean = (self.nominal.max + self.nominal.min) / 2.0;
                                self.state.adaptive = adaptive_update(
                                    target_amp,
                                    target_mean,
                                    &self.state.adaptive,
                                    cfg,
                                )?;
                                self.nominal = CycleExtrema::default();
                            }
                        }
                        out
                    }
                    _ => (point.setpoint / test.open_loop_span).clamp(-1.0, 1.0),
                };
                self.state.run_ticks += 1;
                if cycle_completed {
                    self.state.cycles += 1;
                }
                (point.setpoint, output)
            }
        };
        self.state.last_setpoint = setpoint;
        self.state.last_output = output;

        // (6)-(7)
        let command = encode_output(output, &self.stage)?;
        self.plant.step(command.normalized(), self.dt);
        self.state.plant = self.plant.state();

        // (8)
        if tick.is_multiple_of(test.log_decimation) {
            self.emit(sink, tick, setpoint, &command);
        }

        // (9)
        let mut event = None;
        if lifecycle == Lifecycle::Running {
            let ends = &test.end_conditions;
            let reason = if let Some(ev) = self.detect_break(test, tick, cycle_completed) {
                event = Some(ev);
                self.state.break_event = Some(ev);
                Some(CompletionReason::SpecimenBreak)
            } else if program_done {
                Some(CompletionReason::ProgramDone)
            } else if ends
                .max_duration_ticks
                .is_some_and(|m| self.state.run_ticks >= m)
            {
                Some(CompletionReason::MaxDuration)
            } else if ends.max_cycles.is_some_and(|m| self.state.cycles >= m) {
                Some(CompletionReason::MaxCycles)
            } else {
                None
            };
            if let Some(reason) = reason {
                self.state.lifecycle = Lifecycle::Completed;
                self.state.completion = Some(reason);
                self.state.last_output = 0.0;
            }
        }

        Ok(TickReport {
            tick,
            setpoint,
            pv,
            output,
            command,
            cycle_completed,
            event,
            lifecycle: self.state.lifecycle,
        })
    }

    /// Force falling by more than the configured fraction from the running peak while
    /// displacement sits beyond where that peak was seen.
    fn detect_break(
        &mut self,
        test: &TestConfig,
        tick: u64,
        cycle_completed: bool,
    ) -> Option<SafetyEvent> {
        let cfg = test.end_conditions.break_detection?;
        let (fi, di) = (self.force_index?, self.disp_index?);
        let force = self.readings[fi].engineering;
        let disp = self.readings[di].engineering;
        let b = &mut self.breaker;
        if !b.armed || cycle_completed || force > b.peak_force {
            b.peak_force = force;
            b.disp_at_peak = disp;
            b.armed = true;
            return None;
        }
        let broken = b.peak_force > 0.0
            && b.peak_force >= cfg.min_peak_force
            && force < (1.0 - cfg.drop_fraction) * b.peak_force
            && disp > b.disp_at_peak;
        broken.then(|| SafetyEvent {
            kind: SafetyKind::SpecimenBreak,
            channel_id: Some(self.machine.sensor_channels[fi].channel_id),
            input_id: None,
            tick,
            value: force,
        })
    }
}

/// Per-station status as published to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStatus {
    pub station: usize,
    pub lifecycle: Lifecycle,
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<SafetyEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionReason>,
}

impl<P: ResettablePlant> Station<P> {
    pub fn status(&self) -> StationStatus {
        StationStatus {
            station: self.index as usize,
            lifecycle: self.state.lifecycle,
            tick: self.state.tick,
            fault: self.state.fault,
            completion: self.state.completion,
        }
    }

    /// Applies a station-scoped command.
    pub fn apply(&mut self, kind: &CommandKind) -> Result<Option<SafetyEvent>, CommandError> {
        match kind {
            CommandKind::Configure(test) => self.configure((**test).clone()).map(|_| None),
            CommandKind::Start => self.start().map(|_| None),
            CommandKind::Stop => {
                self.stop();
                Ok(None)
            }
            CommandKind::Hold => self.hold().map(|_| None),
            CommandKind::Resume => self.resume().map(|_| None),
            CommandKind::Estop => Ok(self.estop()),
            CommandKind::SetGains(p) => self.set_gains(p).map(|_| None),
            CommandKind::SetLimits(l) => self.set_limits(l.clone()).map(|_| None),
        }
    }
}

/// All stations of one controller.
pub struct Supervisor<P: ResettablePlant = SimulatedMachine> {
    stations: Vec<Station<P>>,
}

impl Supervisor<SimulatedMachine> {
    pub fn from_document(doc: &ConfigDocument) -> Self {
        let rate = doc.machine.tick_rate_hz;
        Self {
            stations: doc
                .machine
                .stations
                .iter()
                .enumerate()
                .map(|(i, m)| Station::simulated(i as u8, rate, m.clone()))
                .collect(),
        }
    }
}

impl<P: ResettablePlant> Supervisor<P> {
    pub fn new(stations: Vec<Station<P>>) -> Self {
        assert!(stations.len() <= MAX_STATIONS);
        Self { stations }
    }

    pub fn stations(&self) -> &[Station<P>] {
        &self.stations
    }

    pub fn station_mut(&mut self, i: usize) -> Option<&mut Station<P>> {
        self.stations.get_mut(i)
    }

    pub fn into_stations(self) -> Vec<Station<P>> {
        self.stations
    }

    pub fn apply_command(&mut self, cmd: &Command) -> Result<Ack, CommandError> {
        if cmd.kind == CommandKind::Estop {
            let mut changed = Vec::new();
            let mut events = Vec::new();
            for (i, st) in self.stations.iter_mut().enumerate() {
                if let Some(ev) = st.estop() {
                    events.push(ev);
                    changed.push((i, Lifecycle::Faulted));
                }
            }
            return Ok(Ack {
                seq: cmd.seq,
                changed,
                events,
            });
        }
        let idx = cmd.station.ok_or(CommandError::MissingStation)?;
        let st = self
            .stations
            .get_mut(idx)
            .ok_or(CommandError::UnknownStation(idx))?;
        let before = st.lifecycle();
        st.apply(&cmd.kind)?;
        let after = st.lifecycle();
        Ok(Ack {
            seq: cmd.seq,
            changed: if before != after {
                vec![(idx, after)]
            } else {
                vec![]
            },
            events: vec![],
        })
    }

    /// Ticks every station that is acquiring. Each station writes to its own sink.
    pub fn tick_all(&mut self, sinks: &mut [&mut dyn SampleSink]) -> Vec<Option<TickReport>> {
        self.stations
            .iter_mut()
            .zip(sinks.iter_mut())
            .map(|(st, sink)| st.tick(*sink).ok())
            .collect()
    }
}

/// End-of-run accounting for one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSummary {
    pub station: usize,
    pub ticks: u64,
    pub cycles: u64,
    pub lifecycle: Lifecycle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<SafetyEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub break_event: Option<SafetyEvent>,
    pub wall_seconds: f64,
}

/// Runs a started station until it leaves the running states or `max_ticks` elapse.
pub fn run_station<P: ResettablePlant>(
    station: &mut Station<P>,
    max_ticks: Option<u64>,
    sink: &mut dyn SampleSink,
) -> StationSummary {
    let started = std::time::Instant::now();
    let first = station.state().tick;
    loop {
        if max_ticks.is_some_and(|m| station.state().tick - first >= m) {
            break;
        }
        if !matches!(station.lifecycle(), Lifecycle::Running | Lifecycle::Holding) {
            break;
        }
        if station.tick(sink).is_err() {
            break;
        }
    }
    let s = station.state();
    StationSummary {
        station: station.index() as usize,
        ticks: s.tick - first,
        cycles: s.cycles,
        lifecycle: s.lifecycle,
        completion: s.completion,
        fault: s.fault,
        break_event: s.break_event,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Configures and starts every station of `doc`, then runs each on its own thread.
///
/// `make_sink` is called once per station on the calling thread; the returned sink
/// moves to that station's thread. Stations never observe each other.
pub fn run_supervisor<S, F>(
    doc: &ConfigDocument,
    max_ticks: Option<u64>,
    make_sink: F,
) -> Result<Vec<(StationSummary, S)>, CommandError>
where
    S: SampleSink + Send,
    F: FnMut(usize) -> S,
{
    let all: Vec<usize> = (0..doc.tests.len()).collect();
    run_stations(doc, &all, max_ticks, make_sink)
}

/// Like [`run_supervisor`] for a subset of stations, which keep their indices.
pub fn run_stations<S, F>(
    doc: &ConfigDocument,
    indices: &[usize],
    max_ticks: Option<u64>,
    mut make_sink: F,
) -> Result<Vec<(StationSummary, S)>, CommandError>
where
    S: SampleSink + Send,
    F: FnMut(usize) -> S,
{
    let rate = doc.machine.tick_rate_hz;
    let mut stations = Vec::with_capacity(indices.len());
    for &i in indices {
        let (Some(machine), Some(test)) = (doc.machine.stations.get(i), doc.tests.get(i)) else {
            return Err(CommandError::UnknownStation(i));
        };
        let mut st = Station::simulated(i as u8, rate, machine.clone());
        st.configure(test.clone())?;
        st.start()?;
        stations.push(st);
    }
    let sinks: Vec<S> = indices.iter().map(|&i| make_sink(i)).collect();
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = stations
            .into_iter()
            .zip(sinks)
            .map(|(mut st, mut sink)| {
                scope.spawn(move || {
                    let summary = run_station(&mut st, max_ticks, &mut sink);
                    (summary, sink)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("station thread panicked"))
            .collect()
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{load, DigitalInputConfig};

    const DOC: &str = r#"{
      "machine": {
        "station_count": 2,
        "stations": [
          {
            "actuator_kind": "dac_servo",
            "sensor_channels": [
              {"channel_id": 0, "quantity": "force", "fsr": 50.0},
              {"channel_id": 1, "quantity": "displacement", "fsr": 10.0}
            ],
            "digital_inputs": [{"input_id": 0, "role": "estop"}, {"input_id": 1, "role": "limit_switch", "active_low": true}],
            "actuator": {"gain": 10.0, "time_constant_tau": 0.01, "velocity_limit": 50.0},
            "specimen": {"stiffness_k": 100.0}
          },
          {
            "actuator_kind": "pwm_dc",
            "sensor_channels": [{"channel_id": 0, "quantity": "displacement", "fsr": 10.0}],
            "actuator": {"gain": 10.0, "time_constant_tau": 0.01, "velocity_limit": 50.0},
            "specimen": {"stiffness_k": 100.0}
          }
        ]
      },
      "tests": [
        {
          "control_mode": "closed_loop",
          "control_variable": "force",
          "pid": {"kp": 0.02, "ki": 2.0, "kd": 0.0},
          "program": [{"kind": "sine", "amplitude": 1, "mean": 0, "frequency_hz": 10, "cycles": 5}],
          "log_decimation": 10
        },
        {
          "control_mode": "open_loop",
          "program": [{"kind": "triangular", "amplitude": 0.5, "mean": 0, "frequency_hz": 20, "cycles": 3}]
        }
      ]
    }"#;

    fn doc() -> ConfigDocument {
        load(DOC).unwrap()
    }

    fn cmd(kind: CommandKind, station: Option<usize>) -> Command {
        Command {
            kind,
            station,
            seq: 1,
        }
    }

    #[test]
    fn lifecycle_guards() {
        let d = doc();
        let mut sup = Supervisor::from_document(&d);
        assert_eq!(
            sup.apply_command(&cmd(CommandKind::Start, Some(0))),
            Err(CommandError::NotConfigured)
        );
        assert_eq!(
            sup.apply_command(&cmd(CommandKind::Start, Some(16))),
            Err(CommandError::UnknownStation(16))
        );
        assert_eq!(
            sup.apply_command(&cmd(CommandKind::Hold, Some(0))),
            Err(CommandError::IllegalTransition {
                from: Lifecycle::Idle,
                command: "hold"
            })
        );
        let conf = CommandKind::Configure(Box::new(d.tests[0].clone()));
        sup.apply_command(&cmd(conf.clone(), Some(0))).unwrap();
        assert!(matches!(
            sup.apply_command(&cmd(conf, Some(0))),
            Err(CommandError::IllegalTransition { .. })
        ));
        sup.apply_command(&cmd(CommandKind::Start, Some(0)))
            .unwrap();
        sup.apply_command(&cmd(CommandKind::Hold, Some(0))).unwrap();
        assert_eq!(sup.stations()[0].lifecycle(), Lifecycle::Holding);
        sup.apply_command(&cmd(CommandKind::Resume, Some(0)))
            .unwrap();
        sup.apply_command(&cmd(CommandKind::Stop, Some(0))).unwrap();
        assert_eq!(sup.stations()[0].lifecycle(), Lifecycle::Idle);
        assert_eq!(
            sup.apply_command(&cmd(CommandKind::Start, Some(0))),
            Err(CommandError::NotConfigured)
        );
    }

    #[test]
    fn every_command_in_every_state_is_defined() {
        let d = doc();
        let kinds = [
            CommandKind::Configure(Box::new(d.tests[0].clone())),
            CommandKind::Start,
            CommandKind::Stop,
            CommandKind::Hold,
            CommandKind::Resume,
            CommandKind::Estop,
            CommandKind::SetGains(GainsPatch::default()),
            CommandKind::SetLimits(vec![]),
        ];
        let paths: [&[CommandKind]; 6] = [
            &[],
            &[kinds[0].clone()],
            &[kinds[0].clone(), CommandKind::Start],
            &[kinds[0].clone(), CommandKind::Start, CommandKind::Hold],
            &[kinds[0].clone(), CommandKind::Estop],
            &[kinds[0].clone(), CommandKind::Stop],
        ];
        for path in paths {
            for k in &kinds {
                let mut sup = Supervisor::from_document(&d);
                for p in path {
                    sup.apply_command(&cmd(p.clone(), Some(0))).unwrap();
                }
                let before = sup.stations()[0].lifecycle();
                match sup.apply_command(&cmd(k.clone(), Some(0))) {
                    Ok(_) => {}
                    Err(_) => assert_eq!(sup.stations()[0].lifecycle(), before),
                }
            }
        }
    }

    #[test]
    fn tick_rejected_unless_active() {
        let d = doc();
        let mut st = Station::simulated(0, 100_000, d.machine.stations[0].clone());
        let mut sink = Vec::new();
        assert_eq!(
            st.tick(&mut sink),
            Err(EngineError::NotRunning(Lifecycle::Idle))
        );
        assert_eq!(st.state().tick, 0);
    }

    #[test]
    fn program_runs_to_completion() {
        let d = doc();
        let results = run_supervisor(&d, None, |_| Vec::new()).unwrap();
        let (s0, log0) = &results[0];
        assert_eq!(s0.lifecycle, Lifecycle::Completed);
        assert_eq!(s0.completion, Some(CompletionReason::ProgramDone));
        assert_eq!(s0.cycles, 5);
        assert_eq!(s0.ticks, 50_000);
        // 2 sensor channels + setpoint + actuator every 10th tick
        assert_eq!(log0.len(), 5_000 * 4);
        let (s1, _) = &results[1];
        assert_eq!(s1.cycles, 3);
    }

    #[test]
    fn subset_run_matches_full_run() {
        let d = doc();
        let full = run_supervisor(&d, Some(3_000), |_| Vec::new()).unwrap();
        let solo = run_stations(&d, &[1], Some(3_000), |_| Vec::new()).unwrap();
        assert_eq!(solo.len(), 1);
        assert_eq!(solo[0].0.station, 1);
        assert!(solo[0]
            .1
            .iter()
            .zip(&full[1].1)
            .all(|(a, b)| a.same_bits(b)));
        assert_eq!(solo[0].1.len(), full[1].1.len());
        assert!(run_stations(&d, &[5], None, |_| Vec::new()).is_err());
    }

    #[test]
    fn samples_strictly_ordered_per_channel() {
        let d = doc();
        let results = run_supervisor(&d, Some(2_000), |_| Vec::new()).unwrap();
        for (_, log) in &results {
            let mut last: std::collections::HashMap<u8, u64> = Default::default();
            for s in log {
                if let Some(prev) = last.insert(s.channel, s.tick) {
                    assert!(s.tick > prev);
                }
            }
        }
    }

    #[test]
    fn digital_estop_trips_same_tick() {
        let d = doc();
        let mut st = Station::simulated(0, 100_000, d.machine.stations[0].clone());
        st.configure(d.tests[0].clone()).unwrap();
        st.start().unwrap();
        let mut sink = Vec::new();
        for _ in 0..100 {
            st.tick(&mut sink).unwrap();
        }
        assert!(st.assert_digital_input(0, true));
        let r = st.tick(&mut sink).unwrap();
        assert_eq!(r.tick, 100);
        assert_eq!(r.output, 0.0);
        assert_eq!(r.lifecycle, Lifecycle::Faulted);
        assert_eq!(r.event.unwrap().kind, SafetyKind::Estop);
        assert_eq!(st.state().fault.unwrap().tick, 100);
        assert!(st.tick(&mut sink).is_err());
    }

    #[test]
    fn active_low_limit_switch() {
        let mut d = doc();
        d.machine.stations[0].digital_inputs = vec![DigitalInputConfig {
            input_id: 3,
            role: DigitalRole::LimitSwitch,
            active_low: true,
        }];
        let mut st = Station::simulated(0, 100_000, d.machine.stations[0].clone());
        st.configure(d.tests[0].clone()).unwrap();
        st.start().unwrap();
        let mut sink = Vec::new();
        // idle-high line means released
        st.set_digital_input(3, true);
        st.tick(&mut sink).unwrap();
        assert_eq!(st.lifecycle(), Lifecycle::Running);
        st.set_digital_input(3, false);
        let r = st.tick(&mut sink).unwrap();
        assert_eq!(r.event.unwrap().kind, SafetyKind::LimitExceeded);
        assert_eq!(r.event.unwrap().input_id, Some(3));
    }

    #[test]
    fn reconfigure_after_fault() {
        let d = doc();
        let mut sup = Supervisor::from_document(&d);
        sup.apply_command(&cmd(
            CommandKind::Configure(Box::new(d.tests[0].clone())),
            Some(0),
        ))
        .unwrap();
        let ack = sup.apply_command(&cmd(CommandKind::Estop, None)).unwrap();
        assert_eq!(ack.events.len(), 2);
        assert!(sup
            .stations()
            .iter()
            .all(|s| s.lifecycle() == Lifecycle::Faulted));
        sup.apply_command(&cmd(
            CommandKind::Configure(Box::new(d.tests[0].clone())),
            Some(0),
        ))
        .unwrap();
        assert_eq!(sup.stations()[0].lifecycle(), Lifecycle::Configured);
        assert_eq!(sup.stations()[0].state().fault, None);
    }

    #[test]
    fn configured_station_monitors_with_zero_output() {
        let d = doc();
        let mut st = Station::simulated(0, 100_000, d.machine.stations[0].clone());
        st.configure(d.tests[0].clone()).unwrap();
        let mut sink = Vec::new();
        for _ in 0..20 {
            let r = st.tick(&mut sink).unwrap();
            assert_eq!(r.output, 0.0);
        }
        assert_eq!(st.state().run_ticks, 0);
        assert_eq!(sink.len(), 2 * 4);
    }

    #[test]
    fn set_gains_validates() {
        let d = doc();
        let mut st = Station::simulated(0, 100_000, d.machine.stations[0].clone());
        assert_eq!(
            st.set_gains(&GainsPatch::default()),
            Err(CommandError::NotConfigured)
        );
        st.configure(d.tests[0].clone()).unwrap();
        st.set_gains(&GainsPatch {
            kp: Some(3.5),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(st.test().unwrap().pid.kp, 3.5);
        assert_eq!(st.test().unwrap().pid.ki, 2.0);
        assert!(matches!(
            st.set_gains(&GainsPatch {
                kp: Some(-1.0),
                ..Default::default()
            }),
            Err(CommandError::Invalid(_))
        ));
        assert_eq!(st.test().unwrap().pid.kp, 3.5);
    }
}
