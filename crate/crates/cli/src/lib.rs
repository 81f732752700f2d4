//! Headless drivers behind the `mtctl` binary: run, bench, render, validate, export, serve.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mtctl_core::acquisition::{export_csv, format_f64, LogWriter, SampleQueue};
use mtctl_core::config::{self, ConfigDocument, ConfigError, Violation};
use mtctl_core::engine::{run_stations, CommandError, Lifecycle, StationSummary};
use mtctl_core::waveform::{render, WaveformSegment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAULT: i32 = 3;

/// Capacity of each station's engine-to-writer queue.
pub const LOG_QUEUE_CAPACITY: usize = 1 << 18;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String, Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(..) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string(), e.violations().to_vec())
    }
}

impl From<CommandError> for CliError {
    fn from(e: CommandError) -> Self {
        match e {
            CommandError::Invalid(v) => CliError::Config("invalid configuration".into(), v),
            other => CliError::Other(other.to_string()),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ConfigDocument, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(config::load(&text)?)
}

/// Overrides every test's seed.
pub fn apply_seed(doc: &mut ConfigDocument, seed: u64) {
    for t in &mut doc.tests {
        t.rng_seed = seed;
    }
}

/// Run identifier: a digest prefix of the effective configuration and duration.
pub fn run_id(doc: &ConfigDocument, duration_ticks: Option<u64>) -> String {
    let mut h = Sha256::new();
    h.update(doc.render().as_bytes());
    h.update(format!("{duration_ticks:?}").as_bytes());
    hex::encode(&h.finalize()[..6])
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StationRun {
    #[serde(flatten)]
    pub summary: StationSummary,
    pub samples_emitted: u64,
    pub samples_logged: u64,
    pub dropped: u64,
    pub log_file: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub tick_rate_hz: u32,
    pub duration_ticks: Option<u64>,
    pub wall_seconds: f64,
    pub exit_code: i32,
    pub stations: Vec<StationRun>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub duration_ticks: Option<u64>,
    pub seed: Option<u64>,
    pub csv: bool,
    /// Run only these stations; all when `None`.
    pub only: Option<Vec<usize>>,
}

struct LogTask {
    queue: Arc<SampleQueue>,
    done: Arc<AtomicBool>,
    writer: std::thread::JoinHandle<std::io::Result<u64>>,
    path: PathBuf,
}

fn spawn_writer(path: PathBuf, tick_rate_hz: u32, capacity: usize) -> std::io::Result<LogTask> {
    let queue = Arc::new(SampleQueue::new(capacity));
    let done = Arc::new(AtomicBool::new(false));
    let file = BufWriter::with_capacity(1 << 20, File::create(&path)?);
    let (q, d) = (queue.clone(), done.clone());
    let writer = std::thread::spawn(move || -> std::io::Result<u64> {
        let mut log = LogWriter::new(file, tick_rate_hz)?;
        loop {
            let finished = d.load(Ordering::Acquire);
            let mut any = false;
            while let Some(s) = q.pop() {
                log.write(&s)?;
                any = true;
            }
            if finished {
                break;
            }
            if !any {
                std::thread::sleep(std::time::Duration::from_micros(200));
            }
        }
        let n = log.records();
        log.finish()?.flush()?;
        Ok(n)
    });
    Ok(LogTask {
        queue,
        done,
        writer,
        path,
    })
}

/// Runs stations of `doc` and writes `station<N>_<runid>.mtlog` plus a JSON summary into `out`.
pub fn run(doc: &ConfigDocument, out: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let mut doc = doc.clone();
    if let Some(seed) = opts.seed {
        apply_seed(&mut doc, seed);
    }
    let violations = doc.validate();
    if !violations.is_empty() {
        return Err(CliError::Config("invalid configuration".into(), violations));
    }
    std::fs::create_dir_all(out)?;
    let id = run_id(&doc, opts.duration_ticks);
    let indices = opts
        .only
        .clone()
        .unwrap_or_else(|| (0..doc.tests.len()).collect());
    let rate = doc.machine.tick_rate_hz;

    let mut tasks = Vec::new();
    for &i in &indices {
        let path = out.join(format!("station{i}_{id}.mtlog"));
        tasks.push(spawn_writer(path, rate, LOG_QUEUE_CAPACITY)?);
    }
    let started = Instant::now();
    let queues: Vec<_> = tasks.iter().map(|t| t.queue.clone()).collect();
    let mut next = queues.into_iter();
    let results = run_stations(&doc, &indices, opts.duration_ticks, |_| {
        next.next().expect("one queue per station")
    })?;
    let wall_seconds = started.elapsed().as_secs_f64();

    let mut stations = Vec::new();
    for ((summary, queue), task) in results.into_iter().zip(tasks) {
        task.done.store(true, Ordering::Release);
        let logged = task
            .writer
            .join()
            .map_err(|_| CliError::Other("log writer panicked".into()))??;
        let csv_file = if opts.csv {
            let csv_path = task.path.with_extension("csv");
            std::fs::write(
                &csv_path,
                export_csv(&std::fs::read(&task.path)?)
                    .map_err(|e| CliError::Other(e.to_string()))?,
            )?;
            Some(file_name(&csv_path))
        } else {
            None
        };
        stations.push(StationRun {
            summary,
            samples_emitted: queue.emitted(),
            samples_logged: logged,
            dropped: queue.dropped(),
            sha256: sha256_file(&task.path)?,
            log_file: file_name(&task.path),
            csv_file,
        });
    }
    let faulted = stations
        .iter()
        .any(|s| s.summary.lifecycle == Lifecycle::Faulted);
    let summary = RunSummary {
        run_id: id.clone(),
        tick_rate_hz: rate,
        duration_ticks: opts.duration_ticks,
        wall_seconds,
        exit_code: if faulted { EXIT_FAULT } else { EXIT_OK },
        stations,
    };
    std::fs::write(
        out.join(format!("summary_{id}.json")),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StationBench {
    pub station: usize,
    pub ticks: u64,
    pub wall_seconds: f64,
    pub ticks_per_second: f64,
    pub realtime_factor: f64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub stations: usize,
    /// Ticks summed over all stations.
    pub ticks_executed: u64,
    pub wall_seconds: f64,
    /// Mean over stations.
    pub ticks_per_second_per_station: f64,
    /// Sum of the per-station rates.
    pub aggregate_ticks_per_second: f64,
    /// Mean per-station rate over the tick rate.
    pub realtime_factor: f64,
    pub per_station: Vec<StationBench>,
}

/// Synthetic closed-loop station: sine force program on the demo servo with logging on.
pub fn bench_document(stations: usize, ticks: u64) -> ConfigDocument {
    let machine = mtctl_service::demo_machine(stations);
    let cycles = ticks / 10_000 + 1;
    let tests = (0..stations)
        .map(|i| {
            config::parse_test(serde_json::json!({
                "control_mode": "closed_loop",
                "control_variable": "force",
                "pid": {"kp": 0.02, "ki": 2.0, "kd": 0.0001},
                "program": [{
                    "kind": "sine",
                    "amplitude": 10.0 + i as f64,
                    "mean": 0.0,
                    "frequency_hz": 10.0,
                    "cycles": cycles
                }],
                "log_decimation": config::DEFAULT_LOG_DECIMATION,
                "rng_seed": i as u64 + 1
            }))
            .expect("bench test is well formed")
        })
        .collect();
    ConfigDocument { machine, tests }
}

/// Runs `stations` synthetic stations for `ticks` each; logs go to a temporary directory.
pub fn bench(stations: usize, ticks: u64) -> Result<BenchReport, CliError> {
    if !(1..=config::MAX_STATIONS).contains(&stations) {
        return Err(CliError::Config(
            format!("stations must be between 1 and {}", config::MAX_STATIONS),
            vec![],
        ));
    }
    let doc = bench_document(stations, ticks);
    let rate = doc.machine.tick_rate_hz as f64;
    if ticks == 0 {
        return Ok(BenchReport {
            stations,
            ticks_executed: 0,
            wall_seconds: 0.0,
            ticks_per_second_per_station: 0.0,
            aggregate_ticks_per_second: 0.0,
            realtime_factor: 0.0,
            per_station: (0..stations)
                .map(|i| StationBench {
                    station: i,
                    ticks: 0,
                    wall_seconds: 0.0,
                    ticks_per_second: 0.0,
                    realtime_factor: 0.0,
                    dropped: 0,
                })
                .collect(),
        });
    }
    let dir = tempfile::tempdir()?;
    let started = Instant::now();
    let summary = run(
        &doc,
        dir.path(),
        &RunOptions {
            duration_ticks: Some(ticks),
            ..Default::default()
        },
    )?;
    let wall_seconds = started.elapsed().as_secs_f64();
    let per_station: Vec<StationBench> = summary
        .stations
        .iter()
        .map(|s| {
            let tps = if s.summary.wall_seconds > 0.0 {
                s.summary.ticks as f64 / s.summary.wall_seconds
            } else {
                0.0
            };
            StationBench {
                station: s.summary.station,
                ticks: s.summary.ticks,
                wall_seconds: s.summary.wall_seconds,
                ticks_per_second: tps,
                realtime_factor: tps / rate,
                dropped: s.dropped,
            }
        })
        .collect();
    let aggregate: f64 = per_station.iter().map(|s| s.ticks_per_second).sum();
    let mean = aggregate / stations as f64;
    Ok(BenchReport {
        stations,
        ticks_executed: per_station.iter().map(|s| s.ticks).sum(),
        wall_seconds,
        ticks_per_second_per_station: mean,
        aggregate_ticks_per_second: aggregate,
        realtime_factor: mean / rate,
        per_station,
    })
}

/// Renders one waveform segment as `tick,setpoint` CSV.
pub fn render_csv(
    segment_json: &str,
    ticks: u64,
    tick_rate_hz: f64,
    seed: u64,
) -> Result<String, CliError> {
    let seg: WaveformSegment = serde_json::from_str(segment_json)
        .map_err(|e| CliError::Config(format!("bad segment: {e}"), vec![]))?;
    let violations: Vec<Violation> = seg
        .violations()
        .into_iter()
        .map(|(field, message)| Violation {
            path: format!("segment.{field}"),
            message,
        })
        .collect();
    if !violations.is_empty() {
        return Err(CliError::Config("invalid segment".into(), violations));
    }
    let values =
        render(&[seg], ticks, tick_rate_hz, seed).map_err(|e| CliError::Other(e.to_string()))?;
    let mut out = String::with_capacity(values.len() * 24 + 16);
    out.push_str("tick,setpoint\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&i.to_string());
        out.push(',');
        out.push_str(&format_f64(*v));
        out.push('\n');
    }
    Ok(out)
}
