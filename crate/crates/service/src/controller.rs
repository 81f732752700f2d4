//! Station workers and telemetry fan-out.
//!
//! Each station runs on its own thread and owns its engine state outright. Commands reach
//! it over an ordered channel and are applied between tick batches. Samples leave through
//! a bounded queue that never blocks the tick; a dispatcher thread per station turns them
//! into frames for the subscriptions on that station.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use parking_lot::Mutex;
use tokio::sync::{broadcast, oneshot, Notify};

use mtctl_core::acquisition::{SampleQueue, ACTUATOR_CHANNEL, SETPOINT_CHANNEL};
use mtctl_core::config::{MachineConfig, TestConfig};
use mtctl_core::engine::{CommandError, CommandKind, Lifecycle, Station, StationStatus};

use crate::protocol::{SamplesFrame, WireError, MAX_FRAME_VALUES};

/// How workers map simulated ticks onto wall time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Ticks advance at the configured rate against the wall clock.
    Realtime,
    /// Ticks never advance; commands still apply. Used for reproducible protocol replay.
    Frozen,
}

/// Per-subscription frame backlog before the oldest frame is discarded.
pub const SUBSCRIPTION_BUFFER_FRAMES: usize = 64;

const SAMPLE_QUEUE_CAPACITY: usize = 1 << 16;

/// A lifecycle change pushed to every session except the one that caused it.
#[derive(Debug, Clone)]
pub struct StatusEvent {
    pub origin: Option<u64>,
    pub status: StationStatus,
}

type Reply = oneshot::Sender<Result<StationStatus, CommandError>>;

enum WorkerMsg {
    Command {
        kind: CommandKind,
        origin: u64,
        reply: Reply,
    },
    Shutdown,
}

struct Snapshot {
    status: StationStatus,
    log_decimation: Option<u64>,
}

struct StationHandle {
    commands: Sender<WorkerMsg>,
    dispatch: Sender<DispatchMsg>,
    snapshot: Arc<Mutex<Snapshot>>,
    queue: Arc<SampleQueue>,
}

/// Owns every station worker of one server.
pub struct Controller {
    machine: MachineConfig,
    stations: Vec<StationHandle>,
    events: broadcast::Sender<StatusEvent>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Controller {
    /// Spawns one worker and one dispatcher per station. Stations with a test are configured.
    pub fn spawn(
        machine: MachineConfig,
        tests: &[TestConfig],
        pacing: Pacing,
    ) -> Result<Arc<Self>, CommandError> {
        let (events, _) = broadcast::channel(1024);
        let mut stations = Vec::new();
        let mut threads = Vec::new();
        for (i, sm) in machine.stations.iter().enumerate() {
            let mut station = Station::simulated(i as u8, machine.tick_rate_hz, sm.clone());
            if let Some(test) = tests.get(i) {
                station.configure(test.clone())?;
            }
            let snapshot = Arc::new(Mutex::new(Snapshot {
                status: station.status(),
                log_decimation: station.test().map(|t| t.log_decimation),
            }));
            let queue = Arc::new(SampleQueue::new(SAMPLE_QUEUE_CAPACITY));
            let (ctx, crx) = channel::unbounded();
            let (dtx, drx) = channel::unbounded();
            let worker = Worker {
                station,
                commands: crx,
                snapshot: snapshot.clone(),
                queue: queue.clone(),
                events: events.clone(),
                pacing,
            };
            threads.push(
                std::thread::Builder::new()
                    .name(format!("station-{i}"))
                    .spawn(move || worker.run())
                    .expect("spawn station worker"),
            );
            let dispatcher = Dispatcher {
                station: i,
                flush_ticks: (machine.tick_rate_hz as u64 / 10).max(1),
                queue: queue.clone(),
                control: drx,
                subs: Vec::new(),
            };
            threads.push(
                std::thread::Builder::new()
                    .name(format!("telemetry-{i}"))
                    .spawn(move || dispatcher.run())
                    .expect("spawn telemetry dispatcher"),
            );
            stations.push(StationHandle {
                commands: ctx,
                dispatch: dtx,
                snapshot,
                queue,
            });
        }
        Ok(Arc::new(Self {
            machine,
            stations,
            events,
            threads: Mutex::new(threads),
        }))
    }

    pub fn machine(&self) -> &MachineConfig {
        &self.machine
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn events(&self) -> broadcast::Receiver<StatusEvent> {
        self.events.subscribe()
    }

    pub fn status(&self, station: usize) -> Option<StationStatus> {
        self.stations
            .get(station)
            .map(|h| h.snapshot.lock().status.clone())
    }

    pub fn statuses(&self) -> Vec<StationStatus> {
        (0..self.stations.len())
            .filter_map(|i| self.status(i))
            .collect()
    }

    /// Samples the engine discarded because telemetry could not keep up.
    pub fn engine_drops(&self, station: usize) -> Option<u64> {
        self.stations.get(station).map(|h| h.queue.dropped())
    }

    async fn send(
        &self,
        station: usize,
        kind: CommandKind,
        origin: u64,
    ) -> Result<StationStatus, CommandError> {
        let handle = self
            .stations
            .get(station)
            .ok_or(CommandError::UnknownStation(station))?;
        let (tx, rx) = oneshot::channel();
        handle
            .commands
            .send(WorkerMsg::Command {
                kind,
                origin,
                reply: tx,
            })
            .map_err(|_| CommandError::UnknownStation(station))?;
        rx.await
            .map_err(|_| CommandError::UnknownStation(station))?
    }

    /// Routes a command to its station and returns the statuses it touched.
    /// E-stop goes to every station.
    pub async fn command(
        &self,
        station: Option<usize>,
        kind: CommandKind,
        origin: u64,
    ) -> Result<Vec<StationStatus>, CommandError> {
        if kind == CommandKind::Estop {
            let replies: Vec<_> = (0..self.stations.len())
                .map(|i| self.send(i, CommandKind::Estop, origin))
                .collect();
            let mut out = Vec::with_capacity(replies.len());
            for r in futures::future::join_all(replies).await {
                out.push(r?);
            }
            return Ok(out);
        }
        let station = station.ok_or(CommandError::MissingStation)?;
        Ok(vec![self.send(station, kind, origin).await?])
    }

    /// Registers a subscription whose frames land in `outbox`.
    pub fn subscribe(
        &self,
        seq: u64,
        station: usize,
        channel: u8,
        decimation: u64,
        outbox: &Arc<Outbox>,
    ) -> Result<(), WireError> {
        let handle = self.stations.get(station).ok_or_else(|| {
            WireError::new(
                Some(seq),
                "bad_station",
                format!("unknown station {station}"),
            )
        })?;
        let known = channel == SETPOINT_CHANNEL
            || channel == ACTUATOR_CHANNEL
            || self.machine.stations[station].channel(channel).is_some();
        if !known {
            return Err(WireError::new(
                Some(seq),
                "bad_channel",
                format!("station {station} has no channel {channel}"),
            ));
        }
        let engine_decimation = handle.snapshot.lock().log_decimation;
        let decimation = match (decimation, engine_decimation) {
            (0, Some(d)) => d,
            (0, None) => {
                return Err(WireError::new(
                    Some(seq),
                    "bad_decimation",
                    "decimation is required while the station has no test",
                ))
            }
            (d, Some(e)) if d % e != 0 => {
                return Err(WireError::new(
                    Some(seq),
                    "bad_decimation",
                    format!("decimation must be a multiple of the log decimation {e}"),
                ))
            }
            (d, _) => d,
        };
        outbox.open(station, channel);
        let _ = handle.dispatch.send(DispatchMsg::Add(Subscriber {
            session: outbox.session,
            channel,
            decimation,
            outbox: outbox.clone(),
            building: None,
        }));
        Ok(())
    }

    pub fn unsubscribe(&self, station: usize, channel: u8, outbox: &Arc<Outbox>) -> bool {
        let Some(handle) = self.stations.get(station) else {
            return false;
        };
        let _ = handle.dispatch.send(DispatchMsg::Remove {
            session: outbox.session,
            channel,
        });
        outbox.close(station, channel)
    }

    /// Removes every subscription of a session.
    pub fn drop_session(&self, session: u64) {
        for h in &self.stations {
            let _ = h.dispatch.send(DispatchMsg::RemoveSession(session));
        }
    }

    pub fn shutdown(&self) {
        for h in &self.stations {
            let _ = h.commands.send(WorkerMsg::Shutdown);
            let _ = h.dispatch.send(DispatchMsg::Shutdown);
        }
        for t in self.threads.lock().drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Controller {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Worker {
    station: Station,
    commands: Receiver<WorkerMsg>,
    snapshot: Arc<Mutex<Snapshot>>,
    queue: Arc<SampleQueue>,
    events: broadcast::Sender<StatusEvent>,
    pacing: Pacing,
}

impl Worker {
    fn active(&self) -> bool {
        matches!(
            self.station.lifecycle(),
            Lifecycle::Configured | Lifecycle::Running | Lifecycle::Holding
        )
    }

    fn publish(&self, origin: Option<u64>) {
        let status = self.station.status();
        {
            let mut snap = self.snapshot.lock();
            snap.status = status.clone();
            snap.log_decimation = self.station.test().map(|t| t.log_decimation);
        }
        let _ = self.events.send(StatusEvent { origin, status });
    }

    /// Returns false on shutdown.
    fn handle(&mut self, msg: WorkerMsg) -> bool {
        match msg {
            WorkerMsg::Shutdown => false,
            WorkerMsg::Command {
                kind,
                origin,
                reply,
            } => {
                let before = self.station.lifecycle();
                let result = self.station.apply(&kind).map(|_| self.station.status());
                if result.is_ok() {
                    if self.station.lifecycle() != before {
                        self.publish(Some(origin));
                    } else {
                        let mut snap = self.snapshot.lock();
                        snap.status = self.station.status();
                        snap.log_decimation = self.station.test().map(|t| t.log_decimation);
                    }
                }
                let _ = reply.send(result);
                true
            }
        }
    }

    fn run(mut self) {
        let rate = self.station.tick_rate_hz() as u64;
        let batch = (rate / 1000).max(1);
        let mut epoch: Option<(Instant, u64)> = None;
        let mut sink = self.queue.clone();
        loop {
            loop {
                match self.commands.try_recv() {
                    Ok(msg) => {
                        if !self.handle(msg) {
                            return;
                        }
                    }
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return,
                }
            }
            if !self.active() || self.pacing == Pacing::Frozen {
                epoch = None;
                match self.commands.recv() {
                    Ok(msg) => {
                        if !self.handle(msg) {
                            return;
                        }
                        continue;
                    }
                    Err(_) => return,
                }
            }

            let now = Instant::now();
            let tick = self.station.state().tick;
            let (t0, base) = *epoch.get_or_insert((now, tick));
            let due = base + (now.duration_since(t0).as_secs_f64() * rate as f64) as u64;
            if due > tick {
                let lifecycle = self.station.lifecycle();
                for _ in 0..(due - tick).min(batch) {
                    if self.station.tick(&mut sink).is_err()
                        || self.station.lifecycle() != lifecycle
                    {
                        break;
                    }
                }
                if self.station.lifecycle() != lifecycle {
                    self.publish(None);
                } else if let Some(mut snap) = self.snapshot.try_lock() {
                    snap.status.tick = self.station.state().tick;
                }
                // Drop debt beyond 100 ms rather than bursting to catch up.
                if due - tick > rate / 10 {
                    epoch = None;
                }
                continue;
            }
            match self.commands.recv_timeout(Duration::from_micros(500)) {
                Ok(msg) => {
                    if !self.handle(msg) {
                        return;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }
}

struct SubQueue {
    station: usize,
    channel: u8,
    frames: VecDeque<SamplesFrame>,
    dropped: u64,
}

/// A session's telemetry mailbox: one bounded frame queue per subscription.
pub struct Outbox {
    session: u64,
    queues: Mutex<Vec<SubQueue>>,
    cursor: AtomicU64,
    pub notify: Notify,
    capacity: usize,
}

impl Outbox {
    pub fn new(session: u64) -> Arc<Self> {
        Self::with_capacity(session, SUBSCRIPTION_BUFFER_FRAMES)
    }

    pub fn with_capacity(session: u64, capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            session,
            queues: Mutex::new(Vec::new()),
            cursor: AtomicU64::new(0),
            notify: Notify::new(),
            capacity: capacity.max(1),
        })
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    fn open(&self, station: usize, channel: u8) {
        let mut q = self.queues.lock();
        if !q
            .iter()
            .any(|s| s.station == station && s.channel == channel)
        {
            q.push(SubQueue {
                station,
                channel,
                frames: VecDeque::new(),
                dropped: 0,
            });
        }
    }

    fn close(&self, station: usize, channel: u8) -> bool {
        let mut q = self.queues.lock();
        let before = q.len();
        q.retain(|s| !(s.station == station && s.channel == channel));
        q.len() != before
    }

    fn push(&self, frame: SamplesFrame) {
        {
            let mut q = self.queues.lock();
            let Some(sub) = q
                .iter_mut()
                .find(|s| s.station == frame.station && s.channel == frame.channel)
            else {
                return;
            };
            if sub.frames.len() >= self.capacity {
                sub.frames.pop_front();
                sub.dropped += 1;
            }
            sub.frames.push_back(frame);
        }
        self.notify.notify_one();
    }

    /// Takes at most one frame per subscription, rotating the starting point.
    pub fn take_round(&self) -> Vec<SamplesFrame> {
        let mut q = self.queues.lock();
        let n = q.len();
        if n == 0 {
            return Vec::new();
        }
        let start = self.cursor.fetch_add(1, Ordering::Relaxed) as usize % n;
        let mut out = Vec::new();
        for k in 0..n {
            let sub = &mut q[(start + k) % n];
            if let Some(mut f) = sub.frames.pop_front() {
                f.dropped = std::mem::take(&mut sub.dropped);
                out.push(f);
            }
        }
        out
    }
}

struct Subscriber {
    session: u64,
    channel: u8,
    decimation: u64,
    outbox: Arc<Outbox>,
    building: Option<(SamplesFrame, Instant)>,
}

impl Subscriber {
    fn flush(&mut self) {
        if let Some((frame, _)) = self.building.take() {
            self.outbox.push(frame);
        }
    }
}

enum DispatchMsg {
    Add(Subscriber),
    Remove { session: u64, channel: u8 },
    RemoveSession(u64),
    Shutdown,
}

struct Dispatcher {
    station: usize,
    flush_ticks: u64,
    queue: Arc<SampleQueue>,
    control: Receiver<DispatchMsg>,
    subs: Vec<Subscriber>,
}

impl Dispatcher {
    fn run(mut self) {
        let wall_flush = Duration::from_millis(100);
        loop {
            loop {
                match self.control.try_recv() {
                    Ok(msg) => {
                        if !self.apply(msg) {
                            return;
                        }
                    }
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return,
                }
            }
            let mut got = 0usize;
            while let Some(s) = self.queue.pop() {
                got += 1;
                for sub in self.subs.iter_mut() {
                    if sub.channel != s.channel || s.tick % sub.decimation != 0 {
                        continue;
                    }
                    let stale = sub
                        .building
                        .as_ref()
                        .is_some_and(|(f, _)| s.tick - f.t0_tick >= self.flush_ticks);
                    if stale {
                        sub.flush();
                    }
                    let (frame, _) = sub.building.get_or_insert_with(|| {
                        (
                            SamplesFrame {
                                station: self.station,
                                channel: s.channel,
                                t0_tick: s.tick,
                                decimation: sub.decimation,
                                values: Vec::with_capacity(MAX_FRAME_VALUES),
                                dropped: 0,
                            },
                            Instant::now(),
                        )
                    });
                    frame.values.push(s.engineering);
                    if frame.values.len() >= MAX_FRAME_VALUES {
                        sub.flush();
                    }
                }
                if got >= 4096 {
                    break;
                }
            }
            for sub in self.subs.iter_mut() {
                if sub
                    .building
                    .as_ref()
                    .is_some_and(|(_, t)| t.elapsed() >= wall_flush)
                {
                    sub.flush();
                }
            }
            if got == 0 {
                match self.control.recv_timeout(Duration::from_millis(1)) {
                    Ok(msg) => {
                        if !self.apply(msg) {
                            return;
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            }
        }
    }

    /// Returns false on shutdown.
    fn apply(&mut self, msg: DispatchMsg) -> bool {
        match msg {
            DispatchMsg::Add(s) => {
                self.subs
                    .retain(|x| !(x.session == s.session && x.channel == s.channel));
                self.subs.push(s);
            }
            DispatchMsg::Remove { session, channel } => self
                .subs
                .retain(|x| !(x.session == session && x.channel == channel)),
            DispatchMsg::RemoveSession(session) => self.subs.retain(|x| x.session != session),
            DispatchMsg::Shutdown => return false,
        }
        true
    }
}
