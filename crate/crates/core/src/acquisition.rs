//! Run logs and their CSV form, plus the bounded queue that carries samples off
//! the control loop.
//!
//! Log layout (little-endian):
//!
//! ```text
//! header  : "MTLG" | version u16 | tick_rate_hz u32                  (10 bytes)
//! record  : tick u64 | station u8 | channel u8 | pad u16 = 0 | raw i32 | engineering f64   (24 bytes)
//! ```

use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam::queue::ArrayQueue;
use thiserror::Error;

pub const LOG_MAGIC: [u8; 4] = *b"MTLG";
pub const LOG_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;
pub const RECORD_LEN: usize = 24;
pub const CSV_HEADER: &str = "tick,station,channel,raw,engineering";

/// Virtual channel carrying the commanded setpoint.
pub const SETPOINT_CHANNEL: u8 = 254;
/// Virtual channel carrying the actuator command (raw driver word, normalized value).
pub const ACTUATOR_CHANNEL: u8 = 255;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("decimation factor must be at least 1")]
    ZeroFactor,
    #[error("not a run log (bad magic)")]
    BadMagic,
    #[error("unsupported log version {0}")]
    BadVersion(u16),
    #[error("log truncated: {0} trailing bytes")]
    Truncated(usize),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub tick: u64,
    pub station: u8,
    pub channel: u8,
    pub raw: i32,
    pub engineering: f64,
}

impl Sample {
    /// Bitwise equality, so NaN and signed zeros compare by representation.
    pub fn same_bits(&self, other: &Sample) -> bool {
        self.tick == other.tick
            && self.station == other.station
            && self.channel == other.channel
            && self.raw == other.raw
            && self.engineering.to_bits() == other.engineering.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogHeader {
    pub version: u16,
    pub tick_rate_hz: u32,
}

/// Keeps samples whose tick is a multiple of `factor`.
pub fn decimate<I>(
    samples: I,
    factor: u64,
) -> Result<impl Iterator<Item = Sample>, AcquisitionError>
where
    I: IntoIterator<Item = Sample>,
{
    if factor == 0 {
        return Err(AcquisitionError::ZeroFactor);
    }
    Ok(samples.into_iter().filter(move |s| s.tick % factor == 0))
}

pub fn write_record(s: &Sample) -> [u8; RECORD_LEN] {
    let mut b = [0u8; RECORD_LEN];
    b[0..8].copy_from_slice(&s.tick.to_le_bytes());
    b[8] = s.station;
    b[9] = s.channel;
    // b[10..12] is padding and stays zero
    b[12..16].copy_from_slice(&s.raw.to_le_bytes());
    b[16..24].copy_from_slice(&s.engineering.to_le_bytes());
    b
}

pub fn read_record(b: &[u8; RECORD_LEN]) -> Sample {
    Sample {
        tick: u64::from_le_bytes(b[0..8].try_into().unwrap()),
        station: b[8],
        channel: b[9],
        raw: i32::from_le_bytes(b[12..16].try_into().unwrap()),
        engineering: f64::from_le_bytes(b[16..24].try_into().unwrap()),
    }
}

pub fn write_header(tick_rate_hz: u32) -> [u8; HEADER_LEN] {
    let mut b = [0u8; HEADER_LEN];
    b[0..4].copy_from_slice(&LOG_MAGIC);
    b[4..6].copy_from_slice(&LOG_VERSION.to_le_bytes());
    b[6..10].copy_from_slice(&tick_rate_hz.to_le_bytes());
    b
}

/// Streams a run log to any writer.
pub struct LogWriter<W: Write> {
    inner: W,
    records: u64,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut inner: W, tick_rate_hz: u32) -> io::Result<Self> {
        inner.write_all(&write_header(tick_rate_hz))?;
        Ok(Self { inner, records: 0 })
    }

    pub fn write(&mut self, s: &Sample) -> io::Result<()> {
        self.inner.write_all(&write_record(s))?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn encode_log(tick_rate_hz: u32, samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * RECORD_LEN);
    out.extend_from_slice(&write_header(tick_rate_hz));
    for s in samples {
        out.extend_from_slice(&write_record(s));
    }
    out
}

pub fn read_log(bytes: &[u8]) -> Result<(LogHeader, Vec<Sample>), AcquisitionError> {
    if bytes.len() < HEADER_LEN || bytes[0..4] != LOG_MAGIC {
        return Err(AcquisitionError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != LOG_VERSION {
        return Err(AcquisitionError::BadVersion(version));
    }
    let tick_rate_hz = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let rem = body.len() % RECORD_LEN;
    if rem != 0 {
        return Err(AcquisitionError::Truncated(rem));
    }
    let samples = body
        .chunks_exact(RECORD_LEN)
        .map(|c| read_record(c.try_into().unwrap()))
        .collect();
    Ok((
        LogHeader {
            version,
            tick_rate_hz,
        },
        samples,
    ))
}

/// 17 significant digits, which is enough for any double to survive a text round trip.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn samples_to_csv(samples: &[Sample]) -> String {
    let mut out = String::with_capacity(CSV_HEADER.len() + 1 + samples.len() * 48);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.tick,
            s.station,
            s.channel,
            s.raw,
            format_f64(s.engineering)
        ));
    }
    out
}

pub fn export_csv(log: &[u8]) -> Result<String, AcquisitionError> {
    let (_, samples) = read_log(log)?;
    Ok(samples_to_csv(&samples))
}

pub fn parse_csv(text: &str) -> Result<Vec<Sample>, AcquisitionError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(AcquisitionError::Csv {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| AcquisitionError::Csv {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        out.push(Sample {
            tick: fields[0].parse().map_err(|e| err(format!("tick: {e}")))?,
            station: fields[1]
                .parse()
                .map_err(|e| err(format!("station: {e}")))?,
            channel: fields[2]
                .parse()
                .map_err(|e| err(format!("channel: {e}")))?,
            raw: fields[3].parse().map_err(|e| err(format!("raw: {e}")))?,
            engineering: fields[4]
                .parse()
                .map_err(|e| err(format!("engineering: {e}")))?,
        });
    }
    Ok(out)
}

/// Destination for samples leaving the control loop. Implementations must not block.
pub trait SampleSink {
    fn accept(&mut self, sample: Sample);
}

impl SampleSink for Vec<Sample> {
    fn accept(&mut self, sample: Sample) {
        self.push(sample);
    }
}

/// Discards everything.
pub struct NullSink;

impl SampleSink for NullSink {
    fn accept(&mut self, _sample: Sample) {}
}

/// Bounded single-producer single-consumer sample queue with drop accounting.
///
/// A full queue drops the incoming sample and bumps the drop counter; the producer
/// never waits.
pub struct SampleQueue {
    ring: ArrayQueue<Sample>,
    emitted: AtomicU64,
    dropped: AtomicU64,
}

impl SampleQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            ring: ArrayQueue::new(capacity.max(1)),
            emitted: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn push(&self, s: Sample) {
        self.emitted.fetch_add(1, Ordering::Relaxed);
        if self.ring.push(s).is_err() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn pop(&self) -> Option<Sample> {
        self.ring.pop()
    }

    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::Acquire)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Acquire)
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity()
    }
}

impl SampleSink for &SampleQueue {
    fn accept(&mut self, sample: Sample) {
        self.push(sample);
    }
}

impl SampleSink for std::sync::Arc<SampleQueue> {
    fn accept(&mut self, sample: Sample) {
        self.push(sample);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(tick: u64) -> Sample {
        Sample {
            tick,
            station: 0,
            channel: 0,
            raw: tick as i32,
            engineering: tick as f64 * 0.5,
        }
    }

    #[test]
    fn decimate_definition() {
        let all: Vec<Sample> = (0..100).map(s).collect();
        let id: Vec<_> = decimate(all.clone(), 1).unwrap().collect();
        assert_eq!(id, all);
        let ticks: Vec<u64> = decimate(all, 10).unwrap().map(|x| x.tick).collect();
        assert_eq!(ticks, (0..10).map(|i| i * 10).collect::<Vec<_>>());
        assert!(matches!(
            decimate(Vec::<Sample>::new(), 0),
            Err(AcquisitionError::ZeroFactor)
        ));
    }

    #[test]
    fn decimate_composes() {
        let all: Vec<Sample> = (0..1000).map(s).collect();
        let twice: Vec<_> = decimate(decimate(all.clone(), 2).unwrap(), 5)
            .unwrap()
            .collect();
        // brute force: keep ticks divisible by both 2 and 5
        let brute: Vec<_> = all
            .into_iter()
            .filter(|x| x.tick % 2 == 0 && x.tick % 5 == 0)
            .collect();
        assert_eq!(twice, brute);
        assert_eq!(twice.len(), 100);
    }

    #[test]
    fn record_layout() {
        let b = write_record(&Sample {
            tick: 1,
            station: 0,
            channel: 1,
            raw: 0,
            engineering: 0.0,
        });
        let mut expect = [0u8; 24];
        expect[0] = 1;
        expect[9] = 1;
        assert_eq!(b, expect);

        let b = write_record(&Sample {
            tick: 0,
            station: 0,
            channel: 0,
            raw: 0,
            engineering: 1.0,
        });
        assert_eq!(&b[16..], &[0, 0, 0, 0, 0, 0, 0xF0, 0x3F]);
    }

    #[test]
    fn log_file_size_and_header() {
        let samples: Vec<Sample> = (0..7).map(s).collect();
        let bytes = encode_log(100_000, &samples);
        assert_eq!(bytes.len(), 7 * 24 + 10);
        assert_eq!(&bytes[..4], b"MTLG");
        let (h, back) = read_log(&bytes).unwrap();
        assert_eq!(h.tick_rate_hz, 100_000);
        assert_eq!(back, samples);
        assert!(matches!(
            read_log(&bytes[..bytes.len() - 3]),
            Err(AcquisitionError::Truncated(21))
        ));
        assert!(matches!(
            read_log(b"NOPE000000"),
            Err(AcquisitionError::BadMagic)
        ));
    }

    #[test]
    fn csv_shapes() {
        let empty = export_csv(&encode_log(1000, &[])).unwrap();
        assert_eq!(empty, "tick,station,channel,raw,engineering\n");
        let one = export_csv(&encode_log(1000, &[s(3)])).unwrap();
        assert_eq!(one.lines().count(), 2);
        assert_eq!(one.lines().nth(1).unwrap(), "3,0,0,3,1.5000000000000000e0");
    }

    #[test]
    fn queue_drop_accounting() {
        let q = SampleQueue::new(4);
        for t in 0..10 {
            q.push(s(t));
        }
        let mut logged = 0;
        while q.pop().is_some() {
            logged += 1;
        }
        assert_eq!(logged, 4);
        assert_eq!(q.emitted(), logged + q.dropped());
        assert_eq!(q.dropped(), 6);
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        (
            any::<u64>(),
            any::<u8>(),
            any::<u8>(),
            any::<i32>(),
            any::<u64>(),
        )
            .prop_map(|(tick, station, channel, raw, bits)| Sample {
                tick,
                station,
                channel,
                raw,
                engineering: f64::from_bits(bits),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn record_round_trip(sample in arb_sample()) {
            prop_assert!(read_record(&write_record(&sample)).same_bits(&sample));
        }

        #[test]
        fn csv_binary_fixed_point(samples in proptest::collection::vec(arb_sample(), 0..40)) {
            let csv = export_csv(&encode_log(100_000, &samples)).unwrap();
            let parsed = parse_csv(&csv).unwrap();
            // NaN payloads are not preserved by text; everything else is bit-exact.
            for (a, b) in samples.iter().zip(&parsed) {
                if !a.engineering.is_nan() {
                    prop_assert!(a.same_bits(b));
                }
            }
            let again = samples_to_csv(&parsed);
            prop_assert_eq!(csv, again);
        }
    }
}
