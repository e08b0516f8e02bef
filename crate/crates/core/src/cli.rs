//! Command-line entry point. Exit codes: 0 success, 1 domain error, 2 usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, QuantHeader};
use crate::cost::{full_report, CostConstants};
use crate::dse::{
    emit_report, run_dse, select, train_baselines, AccuracyInput, AccuracyTable, Constraints, GridConfig, LiveInputs, ReferenceCosts,
    SelectionPolicy,
};
use crate::event_io::{load_dataset, parse_csv, parse_dat, synthetic_split, write_synthetic_dataset, EventSample, Split, SyntheticConfig, WindowMode};
use crate::quantizer::{ptq, QuantConfig, Rounding};
use crate::spiking::{build_network_extended, LifParams};
use crate::training::{evaluate, format_log, prepare_split, train_with_hook, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "snnopt", version, about = "Spiking network training, quantization and design-space exploration")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or inspect event datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a network from a run config.
    Train(TrainArgs),
    /// Post-training quantization of a checkpoint.
    Quantize(QuantizeArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Joint design-space exploration.
    Dse(DseArgs),
    /// Print the cost report of one setting as JSON.
    Complexity(ComplexityArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    Gen(GenArgs),
    Inspect { file: PathBuf },
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    classes: u32,
    /// Training samples per class.
    #[arg(long)]
    per_class: usize,
    /// Test samples per class (defaults to half of --per-class).
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    sensor: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct QuantizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bits: u32,
    #[arg(long, default_value = "TR")]
    rounding: Rounding,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_bias_quant: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    timesteps: usize,
    #[arg(long)]
    centered_window: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DseArgs {
    /// Grid JSON `{bits, timesteps, windows}`; defaults to the 32-point grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Dataset directory for live accuracy.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Imported accuracy table instead of live evaluation; `builtin:ncars`
    /// selects the bundled table.
    #[arg(long)]
    accuracy_table: Option<String>,
    /// Training config template (TrainConfig JSON) for live baselines.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Constraints JSON, e.g. `{"max_memory_mb":8,"max_latency_ratio":0.25}`.
    #[arg(long)]
    constraints: Option<String>,
    /// Accuracy band treated as a tie during selection.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    #[arg(long)]
    constants: Option<PathBuf>,
    #[arg(long, default_value = "TR")]
    rounding: Rounding,
    #[arg(long)]
    centered_window: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ComplexityArgs {
    #[arg(long)]
    window: u32,
    #[arg(long)]
    timestep: u64,
    #[arg(long, default_value_t = 32)]
    bits: u32,
    #[arg(long)]
    constants: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        config: SyntheticConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default)]
    pub window_mode: WindowMode,
    /// Write a checkpoint every K epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Dir(d) = &self.data {
            if !d.is_dir() {
                bail!("data directory {} does not exist", d.display());
            }
        }
        self.lif.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    argv: Vec<String>,
    config: &'a T,
}

fn write_run_json<T: Serialize>(dir: &Path, command: &str, argv: &[String], config: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        argv: argv.to_vec(),
        config,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_constants(path: Option<&Path>) -> Result<CostConstants> {
    Ok(match path {
        Some(p) => CostConstants::load(p)?,
        None => CostConstants::default(),
    })
}

fn window_mode(centered: bool) -> WindowMode {
    if centered {
        WindowMode::Centered
    } else {
        WindowMode::PerSample
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train or test)"),
    }
}

fn cmd_dataset(cmd: &DatasetCmd, argv: &[String]) -> Result<()> {
    match cmd {
        DatasetCmd::Gen(a) => {
            if a.classes == 0 || a.classes > 2 {
                bail!("the synthetic generator supports 1 or 2 classes");
            }
            let cfg = SyntheticConfig::default().with_sensor(a.sensor, a.sensor);
            let test = a.test_per_class.unwrap_or(a.per_class / 2);
            let manifest = write_synthetic_dataset(&a.out, a.per_class, test, a.classes, a.seed, &cfg)?;
            write_run_json(&a.out, "dataset gen", argv, a)?;
            println!("wrote {} samples to {}", manifest.len(), a.out.display());
        }
        DatasetCmd::Inspect { file } => {
            let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
            let is_csv = file.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
            let sample = if is_csv {
                parse_csv(std::str::from_utf8(&bytes)?)?
            } else {
                parse_dat(&bytes)?
            };
            let positive = sample.events.iter().filter(|e| e.polarity == 1).count();
            let summary = serde_json::json!({
                "events": sample.events.len(),
                "positive": positive,
                "negative": sample.events.len() - positive,
                "sensor_width": sample.sensor_width,
                "sensor_height": sample.sensor_height,
                "duration_us": sample.duration_us,
                "label": sample.label,
                "first_t": sample.events.first().map(|e| e.t),
                "last_t": sample.events.last().map(|e| e.t),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn load_samples(source: &DataSource, seed: u64) -> Result<(Vec<EventSample>, Vec<EventSample>)> {
    Ok(match source {
        DataSource::Dir(d) => (load_dataset(d, Split::Train)?, load_dataset(d, Split::Test)?),
        DataSource::Synthetic {
            train_per_class,
            test_per_class,
            config,
        } => (
            synthetic_split(*train_per_class, 2, seed, config),
            synthetic_split(*test_per_class, 2, seed.wrapping_add(0x5EED), config),
        ),
    })
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg: RunConfig = read_json(&a.config)?;
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let out = cfg.out.clone().context("no output directory (set `out` in the config or pass --out)")?;
    fs::create_dir_all(&out)?;
    write_run_json(&out, "train", argv, &cfg)?;

    let (train_samples, test_samples) = load_samples(&cfg.data, cfg.seed)?;
    let mut spec = build_network_extended(cfg.train.window)?;
    spec.lif = cfg.lif;
    let train_set = prepare_split(&train_samples, cfg.train.window, cfg.train.timesteps, cfg.window_mode)?;
    let test_set = prepare_split(&test_samples, cfg.train.window, cfg.train.timesteps, cfg.window_mode)?;

    let mut save_error = None;
    let outcome = train_with_hook(&spec, &train_set, Some(&test_set), &cfg.train, None, |epoch, w| {
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            let res = Checkpoint::new(spec.clone(), w.clone(), cfg.seed, None).and_then(|c| c.save(&out.join(format!("checkpoint_epoch{epoch:04}.bin"))));
            if let Err(e) = res {
                save_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    Checkpoint::new(spec, outcome.weights, cfg.seed, None)?.save(&out.join("checkpoint.bin"))?;
    fs::write(out.join("train_log.csv"), format_log(&outcome.log))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {} train_acc {:.4} test_acc {:.4} loss {:.6}",
            last.epoch,
            last.train_acc,
            last.test_acc.unwrap_or(f64::NAN),
            last.loss
        );
    }
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs, argv: &[String]) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = QuantConfig {
        bits: a.bits,
        rounding: a.rounding,
        seed: a.seed,
        quantize_biases: !a.no_bias_quant,
    };
    let (qw, report) = ptq(&ck.weights, &cfg)?;
    fs::create_dir_all(&a.out)?;
    write_run_json(&a.out, "quantize", argv, a)?;
    let out = Checkpoint::new(ck.header.network, qw, ck.header.seed, Some(QuantHeader::from(&report)))?;
    out.save(&a.out.join("checkpoint.bin"))?;
    fs::write(a.out.join("quant_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "quantized to {} bits ({}), {} of {} values saturated",
        a.bits, a.rounding, report.saturation.saturated, report.saturation.total
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let samples = load_dataset(&a.data, parse_split(&a.split)?)?;
    let spec = &ck.header.network;
    let data = prepare_split(&samples, spec.input_window as u32, a.timesteps, window_mode(a.centered_window))?;
    let acc = evaluate(spec, &ck.weights, &data)?;
    let result = serde_json::json!({ "accuracy": acc, "samples": data.len(), "precision": ck.header.precision });
    if let Some(out) = &a.out {
        write_run_json(out, "eval", argv, a)?;
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_dse(a: &DseArgs, argv: &[String]) -> Result<()> {
    let grid: GridConfig = match &a.grid {
        Some(p) => read_json(p)?,
        None => GridConfig::default(),
    };
    let constants = load_constants(a.constants.as_deref())?;
    let constraints: Option<Constraints> = a
        .constraints
        .as_deref()
        .map(serde_json::from_str)
        .transpose()
        .context("parsing --constraints")?;
    if let Some(c) = &constraints {
        c.validate().map_err(anyhow::Error::msg)?;
    }
    fs::create_dir_all(&a.out)?;
    write_run_json(&a.out, "dse", argv, a)?;

    let points = match (&a.accuracy_table, &a.data) {
        (Some(table), _) => {
            let table = if table == "builtin:ncars" {
                crate::dse::ncars_accuracy_table()
            } else {
                AccuracyTable::load(Path::new(table))?
            };
            run_dse(&grid, &AccuracyInput::Imported(&table), &constants)?
        }
        (None, Some(dir)) => {
            let template: TrainConfig = match &a.train_config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            let mode = window_mode(a.centered_window);
            let train = load_dataset(dir, Split::Train)?;
            let test = load_dataset(dir, Split::Test)?;
            let per_window = |s: &Vec<EventSample>| grid.windows.iter().map(|&w| (w, s.clone())).collect::<BTreeMap<_, _>>();
            let (train_by_w, test_by_w) = (per_window(&train), per_window(&test));
            let mut baselines = BTreeMap::new();
            let ckpt_dir = a.out.join("baselines");
            fs::create_dir_all(&ckpt_dir)?;
            let mut save_err = None;
            train_baselines(&grid, &train_by_w, &template, mode, &mut baselines, |(t, w), outcome| {
                let res = build_network_extended(w)
                    .map_err(anyhow::Error::from)
                    .and_then(|spec| Ok(Checkpoint::new(spec, outcome.weights.clone(), template.seed, None)?))
                    .and_then(|c| Ok(c.save(&ckpt_dir.join(format!("{t}t_{w}w.bin")))?))
                    .and_then(|_| Ok(fs::write(ckpt_dir.join(format!("{t}t_{w}w_log.csv")), format_log(&outcome.log))?));
                if let Err(e) = res {
                    save_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = save_err {
                return Err(e);
            }
            let live = LiveInputs {
                baselines: &baselines,
                test_samples: &test_by_w,
                rounding: a.rounding,
                quant_seed: template.seed,
                window_mode: mode,
            };
            run_dse(&grid, &AccuracyInput::Live(live), &constants)?
        }
        (None, None) => bail!("dse needs --data for live accuracy or --accuracy-table"),
    };

    let refs = ReferenceCosts::from_grid(&grid, &constants)?;
    let (results, pareto) = emit_report(&points, &refs.global, &a.out)?;
    println!("wrote {} and {}", results.display(), pareto.display());
    if let Some(c) = constraints {
        let choice = select(&points, &c, &refs, SelectionPolicy::MaxAccuracy { tolerance: a.tolerance })?;
        let summary = serde_json::json!({
            "selected": choice.tag(),
            "accuracy": choice.accuracy,
            "memory_bits": choice.cost.memory_bits,
            "latency_ratio": refs.latency_ratio(&choice, c.latency_reference),
            "energy_improvement": refs.global.energy_units / choice.cost.energy_units,
            "constraints": c,
        });
        fs::write(a.out.join("selection.json"), serde_json::to_string_pretty(&summary)?)?;
        println!("{}", serde_json::to_string_pretty(&summary)?);
    }
    Ok(())
}

fn cmd_complexity(a: &ComplexityArgs, argv: &[String]) -> Result<()> {
    let constants = load_constants(a.constants.as_deref())?;
    let spec = build_network_extended(a.window)?;
    let report = full_report(&spec, a.bits, a.timestep, &constants)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_run_json(out, "complexity", argv, a)?;
        fs::write(out.join("cost_report.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    match &cli.command {
        Command::Dataset(c) => cmd_dataset(c, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Quantize(a) => cmd_quantize(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Dse(a) => cmd_dse(a, argv),
        Command::Complexity(a) => cmd_complexity(a, argv),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
