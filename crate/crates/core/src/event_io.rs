//! Event-stream ingestion: DAT/CSV parsing, synthetic generation, attention
//! windows, cropping and binning into spike frames.
//!
//! DAT record layout (little-endian, 8 bytes per event):
//!
//! | word | bits  | field                  |
//! |------|-------|------------------------|
//! | 0    | 0-31  | timestamp (µs)         |
//! | 1    | 0-13  | x                      |
//! | 1    | 14-27 | y                      |
//! | 1    | 28    | polarity (1 = positive)|
//! | 1    | 29-31 | reserved, must be zero |
//!
//! The record section may be preceded by ASCII header lines starting with
//! `%`. Recognised header keys are `Width`, `Height`, `Duration` and `Label`,
//! written as `% Key value`, and the header ends with a `% end` line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample length used by NCARS-style recordings.
pub const DEFAULT_DURATION_US: u64 = 100_000;

const X_BITS: u32 = 14;
const COORD_MASK: u32 = (1 << X_BITS) - 1;
const POLARITY_BIT: u32 = 28;
const RESERVED_MASK: u32 = 0b111 << 29;
const RECORD_LEN: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EventError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated record section: {0} bytes is not a multiple of 8")]
    TruncatedRecord(usize),
    #[error("event {index}: coordinate ({x}, {y}) outside {width}x{height} sensor")]
    CoordinateOutOfRange {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("event {index}: reserved bits set")]
    ReservedBits { index: usize },
    #[error("event {index}: timestamp {t} not below sample duration {duration}")]
    TimestampOutOfRange { index: usize, t: u64, duration: u64 },
    #[error("event {index}: timestamp {t} precedes previous event")]
    Unsorted { index: usize, t: u64 },
    #[error("bad row at line {0}")]
    BadRow(usize),
    #[error("attention window {size} larger than {width}x{height} sensor")]
    WindowTooLarge { size: u32, width: u32, height: u32 },
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unknown synthetic class {0}")]
    UnknownClass(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub x: u32,
    pub y: u32,
    /// 0 = negative, 1 = positive.
    pub polarity: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSample {
    pub events: Vec<Event>,
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub duration_us: u64,
    pub label: u32,
}

impl EventSample {
    /// Checks the sample invariants: bounds, ordering and duration.
    pub fn validate(&self) -> Result<(), EventError> {
        let mut prev = 0u64;
        for (index, e) in self.events.iter().enumerate() {
            if e.x >= self.sensor_width || e.y >= self.sensor_height {
                return Err(EventError::CoordinateOutOfRange {
                    index,
                    x: e.x,
                    y: e.y,
                    width: self.sensor_width,
                    height: self.sensor_height,
                });
            }
            if e.polarity > 1 {
                return Err(EventError::BadRow(index + 1));
            }
            if e.t >= self.duration_us {
                return Err(EventError::TimestampOutOfRange {
                    index,
                    t: e.t,
                    duration: self.duration_us,
                });
            }
            if e.t < prev {
                return Err(EventError::Unsorted { index, t: e.t });
            }
            prev = e.t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionWindow {
    pub x0: u32,
    pub y0: u32,
    pub size: u32,
}

/// Binary spike tensor of shape `T x 2 x W x W`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeFrames {
    pub data: Vec<u8>,
    pub timesteps: usize,
    pub window: usize,
}

impl SpikeFrames {
    pub fn zeros(timesteps: usize, window: usize) -> Self {
        Self {
            data: vec![0; timesteps * 2 * window * window],
            timesteps,
            window,
        }
    }

    #[inline]
    pub fn index(&self, t: usize, p: usize, y: usize, x: usize) -> usize {
        ((t * 2 + p) * self.window + y) * self.window + x
    }

    pub fn get(&self, t: usize, p: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(t, p, y, x)]
    }

    /// The `2 x W x W` slice presented at timestep `t`.
    pub fn frame(&self, t: usize) -> &[u8] {
        let len = 2 * self.window * self.window;
        &self.data[t * len..(t + 1) * len]
    }
}

#[derive(Debug, Default)]
struct DatHeader {
    width: Option<u32>,
    height: Option<u32>,
    duration: Option<u64>,
    label: Option<u32>,
}

fn parse_header_line(line: &str, header: &mut DatHeader) -> Result<(), EventError> {
    let body = line.trim_start_matches('%').trim();
    let mut parts = body.split_whitespace();
    let (Some(key), Some(value)) = (parts.next(), parts.next()) else {
        return Ok(());
    };
    let bad = || EventError::MalformedHeader(format!("bad value for {key}: {value}"));
    match key.to_ascii_lowercase().as_str() {
        "width" => header.width = Some(value.parse().map_err(|_| bad())?),
        "height" => header.height = Some(value.parse().map_err(|_| bad())?),
        "duration" => header.duration = Some(value.parse().map_err(|_| bad())?),
        "label" => header.label = Some(value.parse().map_err(|_| bad())?),
        _ => {}
    }
    Ok(())
}

/// Parses a DAT byte stream. Header lines start with `%`; a `% end` line
/// closes the header explicitly, which matters when the first record's low
/// timestamp byte happens to be `%`. Sensor dimensions default to the
/// bounding box of the events when the header does not declare them.
pub fn parse_dat(bytes: &[u8]) -> Result<EventSample, EventError> {
    let mut header = DatHeader::default();
    let mut pos = 0;
    while pos < bytes.len() && bytes[pos] == b'%' {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| EventError::MalformedHeader("unterminated header line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| EventError::MalformedHeader("non-ASCII header line".into()))?;
        let line = line.trim_end_matches('\r');
        pos += end + 1;
        if line.trim_start_matches('%').trim().eq_ignore_ascii_case("end") {
            break;
        }
        parse_header_line(line, &mut header)?;
    }

    let records = &bytes[pos..];
    if !records.len().is_multiple_of(RECORD_LEN) {
        return Err(EventError::TruncatedRecord(records.len()));
    }

    let mut events = Vec::with_capacity(records.len() / RECORD_LEN);
    for (index, rec) in records.chunks_exact(RECORD_LEN).enumerate() {
        let t = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
        let w1 = u32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]);
        if w1 & RESERVED_MASK != 0 {
            return Err(EventError::ReservedBits { index });
        }
        events.push(Event {
            t: u64::from(t),
            x: w1 & COORD_MASK,
            y: (w1 >> X_BITS) & COORD_MASK,
            polarity: ((w1 >> POLARITY_BIT) & 1) as u8,
        });
    }

    let sample = EventSample {
        sensor_width: header
            .width
            .unwrap_or_else(|| events.iter().map(|e| e.x + 1).max().unwrap_or(1)),
        sensor_height: header
            .height
            .unwrap_or_else(|| events.iter().map(|e| e.y + 1).max().unwrap_or(1)),
        duration_us: header.duration.unwrap_or(DEFAULT_DURATION_US),
        label: header.label.unwrap_or(0),
        events,
    };
    sample.validate()?;
    Ok(sample)
}

/// Packs one event into its 8-byte record.
pub fn encode_record(e: &Event) -> [u8; 8] {
    let w1 = (e.x & COORD_MASK) | ((e.y & COORD_MASK) << X_BITS) | (u32::from(e.polarity & 1) << POLARITY_BIT);
    let mut out = [0u8; 8];
    out[..4].copy_from_slice(&(e.t as u32).to_le_bytes());
    out[4..].copy_from_slice(&w1.to_le_bytes());
    out
}

pub fn write_dat(sample: &EventSample) -> Vec<u8> {
    let mut out = format!(
        "% Width {}\n% Height {}\n% Duration {}\n% Label {}\n% end\n",
        sample.sensor_width, sample.sensor_height, sample.duration_us, sample.label
    )
    .into_bytes();
    out.reserve(sample.events.len() * RECORD_LEN);
    for e in &sample.events {
        out.extend_from_slice(&encode_record(e));
    }
    out
}

pub const CSV_HEADER: &str = "t_us,x,y,p";

fn parse_csv_row(line: &str, lineno: usize) -> Result<Event, EventError> {
    let bad = || EventError::BadRow(lineno);
    let mut fields = line.split(',').map(str::trim);
    let mut next = || fields.next().ok_or_else(bad);
    let t: u64 = next()?.parse().map_err(|_| bad())?;
    let x: u32 = next()?.parse().map_err(|_| bad())?;
    let y: u32 = next()?.parse().map_err(|_| bad())?;
    let p: u8 = next()?.parse().map_err(|_| bad())?;
    if fields.next().is_some() || p > 1 || x > COORD_MASK || y > COORD_MASK {
        return Err(bad());
    }
    Ok(Event { t, x, y, polarity: p })
}

/// Parses `t_us,x,y,p` rows. Sensor dimensions are the event bounding box,
/// duration is the NCARS default and the label is 0; callers that know better
/// overwrite those fields.
pub fn parse_csv(text: &str) -> Result<EventSample, EventError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || (lineno == 1 && line.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let e = parse_csv_row(line, lineno)?;
        if let Some(prev) = events.last() {
            let prev: &Event = prev;
            if e.t < prev.t {
                return Err(EventError::BadRow(lineno));
            }
        }
        if e.t >= DEFAULT_DURATION_US {
            return Err(EventError::BadRow(lineno));
        }
        events.push(e);
    }
    Ok(EventSample {
        sensor_width: events.iter().map(|e| e.x + 1).max().unwrap_or(1),
        sensor_height: events.iter().map(|e| e.y + 1).max().unwrap_or(1),
        duration_us: DEFAULT_DURATION_US,
        label: 0,
        events,
    })
}

pub fn write_csv(sample: &EventSample) -> String {
    let mut out = String::with_capacity(16 * (sample.events.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for e in &sample.events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.polarity);
    }
    out
}

/// Exact search for the `size x size` placement holding the most events.
/// Ties go to the smallest `y0`, then the smallest `x0`.
pub fn find_attention_window(sample: &EventSample, size: u32) -> Result<AttentionWindow, EventError> {
    let (w, h) = (sample.sensor_width, sample.sensor_height);
    if size == 0 || size > w.min(h) {
        return Err(EventError::WindowTooLarge { size, width: w, height: h });
    }
    let (wu, hu, s) = (w as usize, h as usize, size as usize);
    // integral image with a zero border row/column
    let stride = wu + 1;
    let mut integral = vec![0u32; (hu + 1) * stride];
    for e in &sample.events {
        integral[(e.y as usize + 1) * stride + e.x as usize + 1] += 1;
    }
    for y in 1..=hu {
        let mut row = 0u32;
        for x in 1..=wu {
            row += integral[y * stride + x];
            integral[y * stride + x] = row + integral[(y - 1) * stride + x];
        }
    }

    let mut best = (0u32, 0usize, 0usize);
    let mut first = true;
    for y0 in 0..=hu - s {
        for x0 in 0..=wu - s {
            let (y1, x1) = (y0 + s, x0 + s);
            let count = integral[y1 * stride + x1] + integral[y0 * stride + x0]
                - integral[y0 * stride + x1]
                - integral[y1 * stride + x0];
            if first || count > best.0 {
                best = (count, x0, y0);
                first = false;
            }
        }
    }
    Ok(AttentionWindow {
        x0: best.1 as u32,
        y0: best.2 as u32,
        size,
    })
}

/// Fixed window centred on the sensor, for datasets where per-sample search
/// is not wanted.
pub fn centered_window(sample: &EventSample, size: u32) -> Result<AttentionWindow, EventError> {
    let (w, h) = (sample.sensor_width, sample.sensor_height);
    if size == 0 || size > w.min(h) {
        return Err(EventError::WindowTooLarge { size, width: w, height: h });
    }
    Ok(AttentionWindow {
        x0: (w - size) / 2,
        y0: (h - size) / 2,
        size,
    })
}

pub fn crop(sample: &EventSample, window: &AttentionWindow) -> EventSample {
    debug_assert!(window.x0 + window.size <= sample.sensor_width);
    debug_assert!(window.y0 + window.size <= sample.sensor_height);
    let (x1, y1) = (window.x0 + window.size, window.y0 + window.size);
    let events = sample
        .events
        .iter()
        .filter(|e| e.x >= window.x0 && e.x < x1 && e.y >= window.y0 && e.y < y1)
        .map(|e| Event {
            x: e.x - window.x0,
            y: e.y - window.y0,
            ..*e
        })
        .collect();
    EventSample {
        events,
        sensor_width: window.size,
        sensor_height: window.size,
        duration_us: sample.duration_us,
        label: sample.label,
    }
}

/// Bins a cropped (square) sample into `timesteps` half-open time bins with
/// binary OR accumulation.
pub fn bin_to_frames(sample: &EventSample, timesteps: usize) -> SpikeFrames {
    assert!(timesteps >= 1, "timesteps must be at least 1");
    assert_eq!(sample.sensor_width, sample.sensor_height, "sample must be cropped to a square window");
    let window = sample.sensor_width as usize;
    let mut frames = SpikeFrames::zeros(timesteps, window);
    let duration = sample.duration_us.max(1);
    for e in &sample.events {
        let bin = (e.t as u128 * timesteps as u128 / duration as u128) as usize;
        if bin >= timesteps {
            continue;
        }
        let idx = frames.index(bin, e.polarity as usize, e.y as usize, e.x as usize);
        frames.data[idx] = 1;
    }
    frames
}

/// How the attention window is placed when preparing network input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    #[default]
    PerSample,
    Centered,
}

/// Attention window, crop and bin in one step.
pub fn prepare_frames(
    sample: &EventSample,
    window: u32,
    timesteps: usize,
    mode: WindowMode,
) -> Result<SpikeFrames, EventError> {
    let win = match mode {
        WindowMode::PerSample => find_attention_window(sample, window)?,
        WindowMode::Centered => centered_window(sample, window)?,
    };
    Ok(bin_to_frames(&crop(sample, &win), timesteps))
}

/// Parameters of the desk-scale synthetic two-class stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub duration_us: u64,
    /// Mean number of uniform background events per sample.
    pub noise_events: u32,
    /// Mean number of events emitted by the moving bar (class 1).
    pub bar_events: u32,
    /// Bar length in pixels.
    pub bar_length: u32,
    /// Bar thickness in pixels.
    #[serde(default = "default_bar_width")]
    pub bar_width: u32,
}

fn default_bar_width() -> u32 {
    4
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sensor_width: 64,
            sensor_height: 64,
            duration_us: DEFAULT_DURATION_US,
            noise_events: 400,
            bar_events: 1200,
            bar_length: 24,
            bar_width: 4,
        }
    }
}

impl SyntheticConfig {
    pub fn with_sensor(mut self, width: u32, height: u32) -> Self {
        self.sensor_width = width;
        self.sensor_height = height;
        self
    }
}

fn jittered_count(rng: &mut ChaCha8Rng, mean: u32) -> u32 {
    if mean == 0 {
        return 0;
    }
    let spread = (mean / 10).max(1);
    rng.gen_range(mean - spread.min(mean)..=mean + spread)
}

/// Deterministic synthetic sample. Class 0 is uniform noise; class 1 is a
/// vertical bar sweeping horizontally (positive events) over background noise
/// at a matched total event rate.
pub fn generate_synthetic(class_id: u32, seed: u64, config: &SyntheticConfig) -> Result<EventSample, EventError> {
    if class_id > 1 {
        return Err(EventError::UnknownClass(class_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(class_id) << 56));
    let (w, h, dur) = (config.sensor_width, config.sensor_height, config.duration_us);
    let noise_n = jittered_count(&mut rng, config.noise_events);
    let bar_n = jittered_count(&mut rng, config.bar_events);
    let mut events = Vec::with_capacity((noise_n + bar_n) as usize);

    let push_noise = |rng: &mut ChaCha8Rng, events: &mut Vec<Event>, n: u32| {
        for _ in 0..n {
            events.push(Event {
                t: rng.gen_range(0..dur),
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                polarity: rng.gen_range(0..=1),
            });
        }
    };

    if class_id == 0 {
        push_noise(&mut rng, &mut events, noise_n + bar_n);
    } else {
        let len = config.bar_length.min(h);
        let y_top = rng.gen_range(0..=h - len);
        let margin = w / 8;
        let left_to_right = rng.gen_bool(0.5);
        let (start, end) = if left_to_right {
            (margin as f64, (w - 1 - margin) as f64)
        } else {
            ((w - 1 - margin) as f64, margin as f64)
        };
        for _ in 0..bar_n {
            let t = rng.gen_range(0..dur);
            let frac = t as f64 / dur as f64;
            let x = (start + (end - start) * frac).round() as u32 + rng.gen_range(0..config.bar_width.max(1));
            events.push(Event {
                t,
                x: x.min(w - 1),
                y: y_top + rng.gen_range(0..len),
                polarity: 1,
            });
        }
        push_noise(&mut rng, &mut events, noise_n);
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.polarity));

    Ok(EventSample {
        events,
        sensor_width: w,
        sensor_height: h,
        duration_us: dur,
        label: class_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: u32,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, EventError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|_| EventError::MissingManifest(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| EventError::UnreadableFile {
        path,
        reason: e.to_string(),
    })
}

fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<EventSample, EventError> {
    let path = dir.join(&entry.file);
    let unreadable = |reason: String| EventError::UnreadableFile {
        path: path.clone(),
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| unreadable(e.to_string()))?;
    let is_csv = path
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"));
    let mut sample = if is_csv {
        let text = std::str::from_utf8(&bytes).map_err(|e| unreadable(e.to_string()))?;
        parse_csv(text)
    } else {
        parse_dat(&bytes)
    }
    .map_err(|e| unreadable(e.to_string()))?;
    sample.label = entry.label;
    Ok(sample)
}

/// Loads one split in manifest order. Files are parsed in parallel.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<EventSample>, EventError> {
    let manifest = read_manifest(dir)?;
    manifest
        .par_iter()
        .filter(|e| e.split == split)
        .map(|e| load_entry(dir, e))
        .collect()
}

/// Writes a synthetic dataset as DAT files plus manifest. Returns the manifest.
pub fn write_synthetic_dataset(
    dir: &Path,
    per_class_train: usize,
    per_class_test: usize,
    classes: u32,
    seed: u64,
    config: &SyntheticConfig,
) -> Result<Vec<ManifestEntry>, EventError> {
    let io_err = |path: &Path, e: std::io::Error| EventError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = Vec::new();
    let mut idx = 0u64;
    for (split, count) in [(Split::Train, per_class_train), (Split::Test, per_class_test)] {
        for i in 0..count {
            for class in 0..classes {
                let sample = generate_synthetic(class, seed.wrapping_mul(1_000_003).wrapping_add(idx), config)?;
                idx += 1;
                let name = format!(
                    "{}_{:05}_c{}.dat",
                    if split == Split::Train { "train" } else { "test" },
                    i,
                    class
                );
                let path = dir.join(&name);
                fs::write(&path, write_dat(&sample)).map_err(|e| io_err(&path, e))?;
                manifest.push(ManifestEntry {
                    file: name,
                    label: class,
                    split,
                });
            }
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// In-memory synthetic split, interleaving classes.
pub fn synthetic_split(count_per_class: usize, classes: u32, seed: u64, config: &SyntheticConfig) -> Vec<EventSample> {
    let mut out = Vec::with_capacity(count_per_class * classes as usize);
    let mut idx = 0u64;
    for _ in 0..count_per_class {
        for class in 0..classes {
            out.push(
                generate_synthetic(class, seed.wrapping_mul(1_000_003).wrapping_add(idx), config)
                    .expect("class ids below 2 are valid"),
            );
            idx += 1;
        }
    }
    out
}
