//! Joint design-space exploration over precision, timesteps and attention
//! window: grid enumeration, accuracy collection (live evaluation or an
//! imported table), constraint filtering, Pareto extraction, selection and
//! CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{report_for, settings_tag, CostConstants, CostError, CostReport};
use crate::event_io::{EventSample, WindowMode};
use crate::quantizer::{ptq, QuantConfig, QuantError, Rounding};
use crate::spiking::{build_network_extended, NetError, NetworkSpec, WeightSet};
use crate::training::{evaluate, prepare_split, train, LabeledFrames, TrainConfig, TrainError, TrainOutcome};

/// Megabyte figures in memory constraints are read as 10^6 bits of packed
/// weight storage.
pub const BITS_PER_MB: f64 = 1_000_000.0;

#[derive(Debug, Error)]
pub enum DseError {
    #[error("grid axis {0} is empty")]
    EmptyAxis(&'static str),
    #[error("no trained baseline for {timesteps}t_{window}w")]
    MissingBaseline { timesteps: u64, window: u32 },
    #[error("no test data for window {0}")]
    MissingTestData(u32),
    #[error("accuracy table has no entry for {0}")]
    MissingAccuracy(String),
    #[error("no design point satisfies the constraints")]
    NoFeasiblePoint,
    #[error("i/o error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("bad report: {0}")]
    BadReport(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> DseError {
    DseError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub bits: Vec<u32>,
    pub timesteps: Vec<u64>,
    pub windows: Vec<u32>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bits: vec![32, 16, 12, 10],
            timesteps: vec![20, 15, 10, 5],
            windows: vec![100, 50],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Setting {
    pub bits: u32,
    pub timesteps: u64,
    pub window: u32,
}

impl Setting {
    pub fn tag(&self) -> String {
        settings_tag(self.bits, self.timesteps, self.window)
    }
}

fn sorted_desc<T: Ord + Copy>(axis: &[T], name: &'static str) -> Result<Vec<T>, DseError> {
    if axis.is_empty() {
        return Err(DseError::EmptyAxis(name));
    }
    let mut v = axis.to_vec();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v.dedup();
    Ok(v)
}

/// Cartesian product ordered by bits, then timesteps, then window, each
/// descending.
pub fn enumerate_grid(grid: &GridConfig) -> Result<Vec<Setting>, DseError> {
    let bits = sorted_desc(&grid.bits, "bits")?;
    let timesteps = sorted_desc(&grid.timesteps, "timesteps")?;
    let windows = sorted_desc(&grid.windows, "windows")?;
    let mut out = Vec::with_capacity(bits.len() * timesteps.len() * windows.len());
    for &b in &bits {
        for &t in &timesteps {
            for &w in &windows {
                out.push(Setting {
                    bits: b,
                    timesteps: t,
                    window: w,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracySource {
    /// Measured by evaluating the quantized network on a test split.
    Live,
    /// Taken from an imported table.
    Imported,
}

impl AccuracySource {
    fn as_str(&self) -> &'static str {
        match self {
            AccuracySource::Live => "live",
            AccuracySource::Imported => "imported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsePoint {
    pub bits: u32,
    pub timesteps: u64,
    pub window: u32,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub accuracy_source: AccuracySource,
    pub cost: CostReport,
}

impl DsePoint {
    pub fn setting(&self) -> Setting {
        Setting {
            bits: self.bits,
            timesteps: self.timesteps,
            window: self.window,
        }
    }

    pub fn tag(&self) -> &str {
        &self.cost.tag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEntry {
    pub bits: u32,
    pub timesteps: u64,
    pub window: u32,
    pub accuracy: f64,
    /// Free-form origin note, e.g. "reported" or "interpolated".
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub entries: Vec<AccuracyEntry>,
}

impl AccuracyTable {
    pub fn lookup(&self, s: &Setting) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.bits == s.bits && e.timesteps == s.timesteps && e.window == s.window)
            .map(|e| e.accuracy)
    }

    pub fn load(path: &Path) -> Result<Self, DseError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_error(path, e))
    }
}

/// NCARS accuracy table shipped with the crate (fractions; see provenance
/// per entry).
pub fn ncars_accuracy_table() -> AccuracyTable {
    serde_json::from_str(include_str!("../data/ncars_accuracy.json")).expect("bundled accuracy table parses")
}

/// A full-precision network trained for one `(timesteps, window)` pair.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub spec: NetworkSpec,
    pub weights: WeightSet,
}

pub type BaselineKey = (u64, u32);

/// Inputs for live accuracy: trained baselines and raw test samples per window.
pub struct LiveInputs<'a> {
    pub baselines: &'a BTreeMap<BaselineKey, Baseline>,
    pub test_samples: &'a BTreeMap<u32, Vec<EventSample>>,
    pub rounding: Rounding,
    pub quant_seed: u64,
    pub window_mode: WindowMode,
}

pub enum AccuracyInput<'a> {
    Live(LiveInputs<'a>),
    Imported(&'a AccuracyTable),
}

/// Evaluates every grid point: PTQ of the `(T, W)` baseline to `B` bits,
/// accuracy on the test split (or table lookup) and the cost report. Test
/// frames are prepared once per `(T, W)`.
pub fn run_dse(grid: &GridConfig, accuracy: &AccuracyInput<'_>, constants: &CostConstants) -> Result<Vec<DsePoint>, DseError> {
    let settings = enumerate_grid(grid)?;
    let accuracies: Vec<(f64, AccuracySource)> = match accuracy {
        AccuracyInput::Imported(table) => settings
            .iter()
            .map(|s| {
                table
                    .lookup(s)
                    .map(|a| (a, AccuracySource::Imported))
                    .ok_or_else(|| DseError::MissingAccuracy(s.tag()))
            })
            .collect::<Result<_, _>>()?,
        AccuracyInput::Live(live) => {
            let mut frames: BTreeMap<BaselineKey, Vec<LabeledFrames>> = BTreeMap::new();
            for s in &settings {
                let key = (s.timesteps, s.window);
                if !live.baselines.contains_key(&key) {
                    return Err(DseError::MissingBaseline {
                        timesteps: s.timesteps,
                        window: s.window,
                    });
                }
                if let std::collections::btree_map::Entry::Vacant(slot) = frames.entry(key) {
                    let samples = live.test_samples.get(&s.window).ok_or(DseError::MissingTestData(s.window))?;
                    slot.insert(prepare_split(samples, s.window, s.timesteps as usize, live.window_mode)?);
                }
            }
            settings
                .par_iter()
                .map(|s| {
                    let key = (s.timesteps, s.window);
                    let base = &live.baselines[&key];
                    let mut qc = QuantConfig::new(s.bits, live.rounding);
                    qc.seed = live.quant_seed;
                    let (qw, _) = ptq(&base.weights, &qc)?;
                    Ok((evaluate(&base.spec, &qw, &frames[&key])?, AccuracySource::Live))
                })
                .collect::<Result<_, DseError>>()?
        }
    };
    settings
        .iter()
        .zip(accuracies)
        .map(|(s, (acc, source))| {
            Ok(DsePoint {
                bits: s.bits,
                timesteps: s.timesteps,
                window: s.window,
                accuracy: acc,
                accuracy_source: source,
                cost: report_for(s.bits, s.timesteps, s.window, constants)?,
            })
        })
        .collect()
}

/// Trains one full-precision baseline per `(T, W)` in the grid. Keys already
/// present in `cache` are reused.
pub fn train_baselines(
    grid: &GridConfig,
    train_samples: &BTreeMap<u32, Vec<EventSample>>,
    template: &TrainConfig,
    window_mode: WindowMode,
    cache: &mut BTreeMap<BaselineKey, Baseline>,
    mut on_trained: impl FnMut(BaselineKey, &TrainOutcome),
) -> Result<(), DseError> {
    let timesteps = sorted_desc(&grid.timesteps, "timesteps")?;
    let windows = sorted_desc(&grid.windows, "windows")?;
    for &w in &windows {
        let samples = train_samples.get(&w).ok_or(DseError::MissingTestData(w))?;
        for &t in &timesteps {
            if cache.contains_key(&(t, w)) {
                continue;
            }
            let spec = build_network_extended(w)?;
            let data = prepare_split(samples, w, t as usize, window_mode)?;
            let cfg = TrainConfig {
                timesteps: t as usize,
                window: w,
                ..template.clone()
            };
            let outcome = train(&spec, &data, None, &cfg)?;
            on_trained((t, w), &outcome);
            cache.insert(
                (t, w),
                Baseline {
                    spec,
                    weights: outcome.weights,
                },
            );
        }
    }
    Ok(())
}

/// What latency ratios are measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyReference {
    /// Highest-precision, longest-timestep point of the same window.
    #[default]
    SameWindow,
    /// The single global baseline (highest bits, timesteps and window).
    Global,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_memory_bits: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_memory_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_accuracy: Option<f64>,
    #[serde(default)]
    pub latency_reference: LatencyReference,
}

impl Constraints {
    pub fn memory_limit_bits(&self) -> Option<f64> {
        let a = self.max_memory_bits.map(|b| b as f64);
        let b = self.max_memory_mb.map(|mb| mb * BITS_PER_MB);
        match (a, b) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0) => Err(format!("{name} must be positive")),
            _ => Ok(()),
        };
        positive("max_memory_bits", self.max_memory_bits.map(|b| b as f64))?;
        positive("max_memory_mb", self.max_memory_mb)?;
        positive("max_latency_ratio", self.max_latency_ratio)?;
        positive("min_accuracy", self.min_accuracy)
    }
}

/// Reference costs for normalisation: the global baseline and one baseline
/// per window.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCosts {
    pub global: CostReport,
    pub per_window: BTreeMap<u32, CostReport>,
}

impl ReferenceCosts {
    pub fn from_grid(grid: &GridConfig, constants: &CostConstants) -> Result<Self, DseError> {
        let bits = sorted_desc(&grid.bits, "bits")?[0];
        let t = sorted_desc(&grid.timesteps, "timesteps")?[0];
        let windows = sorted_desc(&grid.windows, "windows")?;
        let mut per_window = BTreeMap::new();
        for &w in &windows {
            per_window.insert(w, report_for(bits, t, w, constants)?);
        }
        Ok(Self {
            global: per_window[&windows[0]].clone(),
            per_window,
        })
    }

    pub fn latency_ratio(&self, p: &DsePoint, reference: LatencyReference) -> f64 {
        let base = match reference {
            LatencyReference::Global => &self.global,
            LatencyReference::SameWindow => self.per_window.get(&p.window).unwrap_or(&self.global),
        };
        p.cost.latency_units / base.latency_units
    }
}

fn feasible(p: &DsePoint, c: &Constraints, refs: &ReferenceCosts) -> bool {
    c.memory_limit_bits().is_none_or(|m| p.cost.memory_bits as f64 <= m)
        && c.max_latency_ratio.is_none_or(|r| refs.latency_ratio(p, c.latency_reference) <= r)
        && c.min_accuracy.is_none_or(|a| p.accuracy >= a)
}

pub fn filter_constraints(points: &[DsePoint], constraints: &Constraints, refs: &ReferenceCosts) -> Vec<DsePoint> {
    points.iter().filter(|p| feasible(p, constraints, refs)).cloned().collect()
}

/// `a` dominates `b`: no worse in accuracy, memory, latency and energy, and
/// strictly better in at least one.
pub fn dominates(a: &DsePoint, b: &DsePoint) -> bool {
    let (ca, cb) = (&a.cost, &b.cost);
    let no_worse = a.accuracy >= b.accuracy && ca.memory_bits <= cb.memory_bits && ca.latency_units <= cb.latency_units && ca.energy_units <= cb.energy_units;
    let better = a.accuracy > b.accuracy || ca.memory_bits < cb.memory_bits || ca.latency_units < cb.latency_units || ca.energy_units < cb.energy_units;
    no_worse && better
}

/// Non-dominated points, sorted by accuracy descending (input order on ties).
pub fn pareto_front(points: &[DsePoint]) -> Vec<DsePoint> {
    let mut front: Vec<usize> = (0..points.len())
        .filter(|&i| !points.iter().any(|q| dominates(q, &points[i])))
        .collect();
    front.sort_by(|&i, &j| points[j].accuracy.total_cmp(&points[i].accuracy).then(i.cmp(&j)));
    front.into_iter().map(|i| points[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Highest accuracy. Points within `tolerance` (absolute fraction) of the
    /// best feasible accuracy count as tied; ties go to lower memory, then
    /// lower latency, then fewer bits.
    MaxAccuracy {
        #[serde(default)]
        tolerance: f64,
    },
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::MaxAccuracy { tolerance: 0.0 }
    }
}

pub fn select(points: &[DsePoint], constraints: &Constraints, refs: &ReferenceCosts, policy: SelectionPolicy) -> Result<DsePoint, DseError> {
    let candidates = filter_constraints(points, constraints, refs);
    let SelectionPolicy::MaxAccuracy { tolerance } = policy;
    let best = candidates
        .iter()
        .map(|p| p.accuracy)
        .max_by(f64::total_cmp)
        .ok_or(DseError::NoFeasiblePoint)?;
    candidates
        .into_iter()
        .filter(|p| p.accuracy >= best - tolerance)
        .min_by(|a, b| {
            let acc = if tolerance == 0.0 {
                b.accuracy.total_cmp(&a.accuracy)
            } else {
                std::cmp::Ordering::Equal
            };
            acc.then(a.cost.memory_bits.cmp(&b.cost.memory_bits))
                .then(a.cost.latency_units.total_cmp(&b.cost.latency_units))
                .then(a.bits.cmp(&b.bits))
        })
        .ok_or(DseError::NoFeasiblePoint)
}

/// One row of `dse_results.csv` / `pareto.csv`. Ratio columns are normalised
/// to the global baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tag: String,
    pub bits: u32,
    pub timesteps: u64,
    pub window: u32,
    pub accuracy: f64,
    pub accuracy_source: String,
    pub memory_bits: u64,
    pub latency_units: f64,
    pub energy_units: f64,
    pub syn_ops: u64,
    pub neuron_ops: u64,
    pub memory_ratio: f64,
    pub latency_ratio: f64,
    pub energy_ratio: f64,
    pub ops_ratio: f64,
}

impl ReportRow {
    pub fn from_point(p: &DsePoint, baseline: &CostReport) -> Self {
        let c = &p.cost;
        Self {
            tag: c.tag.clone(),
            bits: p.bits,
            timesteps: p.timesteps,
            window: p.window,
            accuracy: p.accuracy,
            accuracy_source: p.accuracy_source.as_str().to_string(),
            memory_bits: c.memory_bits,
            latency_units: c.latency_units,
            energy_units: c.energy_units,
            syn_ops: c.op_count.synaptic_ops,
            neuron_ops: c.op_count.neuron_ops,
            memory_ratio: c.memory_bits as f64 / baseline.memory_bits as f64,
            latency_ratio: c.latency_units / baseline.latency_units,
            energy_ratio: c.energy_units / baseline.energy_units,
            ops_ratio: c.op_count.total() as f64 / baseline.op_count.total() as f64,
        }
    }
}

pub const RESULTS_FILE: &str = "dse_results.csv";
pub const PARETO_FILE: &str = "pareto.csv";

pub fn write_rows(path: &Path, rows: &[ReportRow]) -> Result<(), DseError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    if rows.is_empty() {
        // header only, so empty fronts still produce a parseable file
        w.write_record([
            "tag", "bits", "timesteps", "window", "accuracy", "accuracy_source", "memory_bits", "latency_units", "energy_units", "syn_ops",
            "neuron_ops", "memory_ratio", "latency_ratio", "energy_ratio", "ops_ratio",
        ])
        .map_err(|e| io_error(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>, DseError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| DseError::BadReport(e.to_string()))).collect()
}

/// Writes `dse_results.csv` (all points, grid order) and `pareto.csv`.
pub fn emit_report(points: &[DsePoint], baseline: &CostReport, dir: &Path) -> Result<(PathBuf, PathBuf), DseError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let rows: Vec<ReportRow> = points.iter().map(|p| ReportRow::from_point(p, baseline)).collect();
    let results = dir.join(RESULTS_FILE);
    write_rows(&results, &rows)?;
    let front: Vec<ReportRow> = pareto_front(points).iter().map(|p| ReportRow::from_point(p, baseline)).collect();
    let pareto = dir.join(PARETO_FILE);
    write_rows(&pareto, &front)?;
    Ok((results, pareto))
}
