//! The `wselect` command-line driver.
//!
//! Every command resolves a [`RunConfig`] (defaults, then an optional JSON
//! file, then flags), writes the resolved config next to its outputs and
//! stamps every file with the tool version and model fingerprint.
//!
//! Exit codes: 0 success, 2 configuration error, 3 model or data error,
//! 4 missing profile.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::energy_model::{
    layer_energy_simulated, network_energy, shares_of, write_energy_csv, ArrayConfig, LayerEnergy, SimulateConfig,
    WeightPowerTable, DEFAULT_TRACE_LEN, MIN_TRACE_LEN,
};
use crate::error::{Error, Result};
use crate::qnn::dataset::{synthetic, SynthParams};
use crate::qnn::io::fingerprint;
use crate::qnn::{load_model, save_model, Dataset, QuantizedNetwork, Split};
use crate::scheduler::{
    compress_network, config_grid, global_compress_baseline, profile_network, rank_configs, CompressionConfig,
    CompressionReport, NetworkProfile, ScheduleParams,
};
use crate::selection::SelectionParams;
use crate::transitions::{group_pair_energy, hd_sweep, CollectConfig, StatsDoc, GROUP_COUNT};
use crate::TOOL_VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PROFILE: i32 = 4;

pub const POWER_FORMAT: &str = "wselect-power";

/// Samples of the transition sweeps behind `plotdata hd` and `plotdata msb`.
pub const HD_SAMPLES: usize = 100_000;
pub const MSB_SAMPLES: usize = 500_000;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    Estimate,
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CompressMode {
    /// Energy-ordered per-layer schedule over the grid.
    Layerwise,
    /// One shared set for every layer at the first grid configuration.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub prune_ratios: Vec<f64>,
    pub set_sizes: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            prune_ratios: vec![0.3, 0.5, 0.7],
            set_sizes: vec![32, 24, 16],
        }
    }
}

/// Everything a run depends on. Serialized as JSON; missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PathBuf,
    pub calib: PathBuf,
    pub val: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub trace_len: usize,
    /// Calibration images replayed when profiling a layer.
    pub max_images: usize,
    pub reservoir_size: usize,
    pub array: ArrayConfig,
    pub energy_mode: EnergyMode,
    pub simulate: SimulateConfig,
    /// Network-level accuracy budget.
    pub delta: f64,
    pub selection: SelectionParams,
    pub grid: GridConfig,
    pub compress_mode: CompressMode,
    /// Configuration shared by the baselines in `plotdata ablation`.
    pub matched: CompressionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let collect = CollectConfig::default();
        RunConfig {
            model: fixture("desk_model.json"),
            calib: fixture("calib.bin"),
            val: fixture("val.bin"),
            out_dir: PathBuf::from("wselect-out"),
            seed: 0,
            trace_len: DEFAULT_TRACE_LEN,
            max_images: collect.max_images,
            reservoir_size: collect.reservoir_size,
            array: ArrayConfig::default(),
            energy_mode: EnergyMode::Estimate,
            simulate: SimulateConfig::default(),
            delta: 0.03,
            selection: SelectionParams::default(),
            grid: GridConfig::default(),
            compress_mode: CompressMode::Layerwise,
            matched: CompressionConfig {
                prune_ratio: 0.5,
                set_size: 16,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.selection.validate()?;
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta must be in [0, 1], got {}", self.delta)));
        }
        if self.trace_len < MIN_TRACE_LEN {
            return Err(Error::InvalidConfig(format!(
                "trace_len must be >= {MIN_TRACE_LEN}, got {}",
                self.trace_len
            )));
        }
        if self.max_images == 0 || self.reservoir_size == 0 {
            return Err(Error::InvalidConfig("max_images and reservoir_size must be >= 1".into()));
        }
        if self.simulate.images == 0 || self.simulate.columns < 2 {
            return Err(Error::InvalidConfig("simulate needs >= 1 image and >= 2 columns".into()));
        }
        rank_configs(&self.grid())?;
        self.matched.validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Vec<CompressionConfig> {
        config_grid(&self.grid.prune_ratios, &self.grid.set_sizes)
    }

    pub fn collect(&self) -> CollectConfig {
        CollectConfig {
            dim: self.array.dim,
            reservoir_size: self.reservoir_size,
            max_images: self.max_images,
            seed: self.seed,
        }
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            delta: self.delta,
            selection: self.selection,
            array: self.array,
        }
    }

    pub fn profile_dir(&self) -> PathBuf {
        self.out_dir.join("profile")
    }

    /// Defaults, then `file`, then the flags in `args`.
    pub fn resolve(file: Option<&Path>, args: &RunArgs) -> Result<RunConfig> {
        let mut cfg = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        args.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

/// Flags that override [`RunConfig`] fields.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Model file (wselect-model JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration split.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Validation split.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trace_len: Option<usize>,
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Array dimension (cycles per tile follow as 2 * dim).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Clock frequency in Hz.
    #[arg(long)]
    pub freq: Option<f64>,
    #[arg(long, value_enum)]
    pub energy_mode: Option<EnergyMode>,
    /// Accuracy budget.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub k_init: Option<usize>,
    #[arg(long)]
    pub k_target: Option<usize>,
    /// Weight of usage against power in the joint ranking.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Score only the largest energy gains in each greedy iteration.
    #[arg(long)]
    pub fast: bool,
    /// Comma-separated prune ratios of the grid.
    #[arg(long)]
    pub prune_ratios: Option<String>,
    /// Comma-separated set sizes of the grid.
    #[arg(long)]
    pub set_sizes: Option<String>,
    #[arg(long, value_enum)]
    pub compress_mode: Option<CompressMode>,
}

impl RunArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.model, cfg.model);
        set!(self.calib, cfg.calib);
        set!(self.val, cfg.val);
        set!(self.out, cfg.out_dir);
        set!(self.seed, cfg.seed);
        set!(self.trace_len, cfg.trace_len);
        set!(self.max_images, cfg.max_images);
        set!(self.freq, cfg.array.freq_hz);
        set!(self.energy_mode, cfg.energy_mode);
        set!(self.epsilon, cfg.selection.epsilon);
        set!(self.k_init, cfg.selection.k_init);
        set!(self.k_target, cfg.selection.k_target);
        set!(self.lambda, cfg.selection.lambda_usage);
        set!(self.compress_mode, cfg.compress_mode);
        if let Some(d) = self.dim {
            cfg.array.dim = d;
            cfg.array.cycles_per_tile = 2 * d;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
            cfg.selection.delta = d.min(0.999_999);
        }
        if self.fast {
            cfg.selection.fast = true;
        }
        if let Some(s) = &self.prune_ratios {
            cfg.grid.prune_ratios = parse_list(s, "prune ratio")?;
        }
        if let Some(s) = &self.set_sizes {
            cfg.grid.set_sizes = parse_list(s, "set size")?;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "wselect", version, about = "Switching-energy model and energy-aware weight-set restriction for 8-bit CNNs")]
pub struct Cli {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Per-weight power of every profiled layer.
    Power,
    /// Mean toggles per partial-sum Hamming distance.
    Hd,
    /// 50 x 50 group-pair energy heatmap.
    Msb,
    /// Activation transition counts per layer.
    Activations,
    /// Layer-wise schedule against the global and naive baselines.
    Ablation,
    /// Everything except ablation.
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect per-layer statistics and build weight power tables.
    Profile(RunArgs),
    /// Per-layer energy and energy shares from a profile.
    Energy(RunArgs),
    /// Restrict weight sets under the accuracy budget.
    Compress(RunArgs),
    /// Top-1 accuracy of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CSV data behind the figures.
    Plotdata {
        #[arg(value_enum)]
        which: PlotKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check a model (and optionally a compression report) for consistency.
    Validate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Write seeded synthetic train / calib / val splits.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8000)]
        train_n: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        distractor: Option<f64>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        strokes: Option<usize>,
        #[arg(long)]
        shift: Option<i32>,
        #[arg(long)]
        brightness: Option<f64>,
    },
    /// Convert an IDX image/label pair to the raw split format.
    ImportIdx {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_CONFIG,
        Error::MissingProfile(_) => EXIT_PROFILE,
        _ => EXIT_DATA,
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::MissingProfile(_)) {
                eprintln!("hint: run `wselect profile` with the same --out (and model) first");
            }
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = cli.config.as_deref();
    match cli.command {
        Command::Profile(a) => cmd_profile(&RunConfig::resolve(file, &a)?),
        Command::Energy(a) => cmd_energy(&RunConfig::resolve(file, &a)?),
        Command::Compress(a) => cmd_compress(&RunConfig::resolve(file, &a)?),
        Command::Eval { model, data, out } => cmd_eval(&model, &data, out.as_deref()),
        Command::Plotdata { which, run } => cmd_plotdata(&RunConfig::resolve(file, &run)?, which),
        Command::Validate { model, report } => cmd_validate(file, model.as_deref(), report.as_deref()),
        Command::Dataset(d) => cmd_dataset(d),
    }
}

// -- output helpers ----------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Appends `tool` and `model_fingerprint` columns to every record.
pub fn stamp_csv(csv_bytes: &[u8], model_fingerprint: &str) -> Result<Vec<u8>> {
    let mut r = csv::Reader::from_reader(csv_bytes);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    header.extend(["tool".to_string(), "model_fingerprint".to_string()]);
    w.write_record(&header)?;
    for rec in r.records() {
        let mut row: Vec<String> = rec?.iter().map(String::from).collect();
        row.extend([TOOL_VERSION.to_string(), model_fingerprint.to_string()]);
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

fn write_stamped_csv(path: &Path, model_fingerprint: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut raw = Vec::new();
    f(&mut raw)?;
    write_file(path, &stamp_csv(&raw, model_fingerprint)?)
}

fn write_run_config(cfg: &RunConfig, command: &str) -> Result<()> {
    write_json(&cfg.out_dir.join(format!("run_config.{command}.json")), cfg)
}

fn load_split(path: &Path, split: Split) -> Result<Dataset> {
    let d = Dataset::load(path, split)?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(d)
}

// -- profile files -----------------------------------------------------------

/// A power table as written by `profile`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerDoc {
    pub format: String,
    pub version: u32,
    pub tool: String,
    pub model_fingerprint: String,
    pub table: WeightPowerTable,
}

fn stats_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer:02}.stats.json"))
}

fn power_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer:02}.power.json"))
}

/// Reads the profile of `net` from `dir`.
pub fn load_profile(net: &QuantizedNetwork, dir: &Path, seed: u64) -> Result<NetworkProfile> {
    let fp = fingerprint(net);
    let mut stats = Vec::new();
    let mut tables = Vec::new();
    for li in net.conv_indices() {
        let (sp, pp) = (stats_path(dir, li), power_path(dir, li));
        if !sp.exists() || !pp.exists() {
            return Err(Error::MissingProfile(format!("no profile for layer {li} in {}", dir.display())));
        }
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let sdoc: StatsDoc = serde_json::from_str(&read(&sp)?)?;
        let pdoc: PowerDoc = serde_json::from_str(&read(&pp)?)?;
        if sdoc.model_fingerprint != fp || pdoc.model_fingerprint != fp {
            return Err(Error::MissingProfile(format!(
                "profile in {} belongs to another model",
                dir.display()
            )));
        }
        if pdoc.format != POWER_FORMAT || pdoc.table.layer_index != li {
            return Err(Error::schema(pp.display().to_string(), "not a power table of this layer"));
        }
        pdoc.table.validate()?;
        stats.push(sdoc.into_stats()?);
        tables.push(pdoc.table);
    }
    Ok(NetworkProfile { seed, stats, tables })
}

pub fn cmd_profile(cfg: &RunConfig) -> Result<()> {
    let net = load_model(&cfg.model)?;
    let calib = load_split(&cfg.calib, Split::Calibration)?;
    let fp = fingerprint(&net);
    let profile = profile_network(&net, &calib, &cfg.collect(), cfg.trace_len, cfg.seed)?;
    let dir = cfg.profile_dir();
    for (s, t) in profile.stats.iter().zip(&profile.tables) {
        write_json(&stats_path(&dir, s.layer_index), &StatsDoc::from_stats(s, &fp))?;
        let doc = PowerDoc {
            format: POWER_FORMAT.into(),
            version: 1,
            tool: TOOL_VERSION.into(),
            model_fingerprint: fp.clone(),
            table: t.clone(),
        };
        write_json(&power_path(&dir, t.layer_index), &doc)?;
        println!(
            "layer {:2}: {} activation / {} partial-sum transitions, power mean {:.3} cv {:.3}",
            s.layer_index,
            s.total_act_transitions,
            s.total_psum_transitions,
            t.mean(),
            t.coefficient_of_variation()
        );
    }
    write_run_config(cfg, "profile")?;
    println!("profile written to {}", dir.display());
    Ok(())
}

// -- energy ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyRow {
    #[serde(flatten)]
    pub energy: LayerEnergy,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyDoc {
    pub tool: String,
    pub model_fingerprint: String,
    pub mode: EnergyMode,
    pub array: ArrayConfig,
    pub layers: Vec<EnergyRow>,
    pub total: f64,
}

pub fn compute_energy(cfg: &RunConfig, net: &QuantizedNetwork, profile: &NetworkProfile) -> Result<EnergyDoc> {
    let layers = match cfg.energy_mode {
        EnergyMode::Estimate => network_energy(net, &profile.tables, &cfg.array)?,
        EnergyMode::Simulate => {
            let calib = load_split(&cfg.calib, Split::Calibration)?;
            net.conv_indices()
                .into_iter()
                .map(|li| layer_energy_simulated(net, &calib, li, &cfg.array, &cfg.simulate))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let shares = shares_of(&layers.iter().map(|l| l.e_layer).collect::<Vec<_>>())?;
    Ok(EnergyDoc {
        tool: TOOL_VERSION.into(),
        model_fingerprint: fingerprint(net),
        mode: cfg.energy_mode,
        array: cfg.array,
        total: layers.iter().map(|l| l.e_layer).sum(),
        layers: layers
            .into_iter()
            .zip(shares)
            .map(|(energy, rho)| EnergyRow { energy, rho })
            .collect(),
    })
}

pub fn cmd_energy(cfg: &RunConfig) -> Result<()> {
    let net = load_model(&cfg.model)?;
    let profile = load_profile(&net, &cfg.profile_dir(), cfg.seed)?;
    let doc = compute_energy(cfg, &net, &profile)?;
    let layers: Vec<LayerEnergy> = doc.layers.iter().map(|r| r.energy.clone()).collect();
    let shares: Vec<f64> = doc.layers.iter().map(|r| r.rho).collect();
    write_stamped_csv(&cfg.out_dir.join("energy.csv"), &doc.model_fingerprint, |w| {
        write_energy_csv(w, &layers, &shares)
    })?;
    write_json(&cfg.out_dir.join("energy.json"), &doc)?;
    write_run_config(cfg, "energy")?;
    for r in &doc.layers {
        println!(
            "layer {:2}: N {:3} p_tile {:8.3} E {:.4e} J rho {:.4}",
            r.energy.layer_index, r.energy.n_tiles, r.energy.p_tile, r.energy.e_layer, r.rho
        );
    }
    println!("total {:.4e} J", doc.total);
    Ok(())
}

// -- compress ------------------------------------------------------------------

pub fn run_compression(cfg: &RunConfig, net: &mut QuantizedNetwork, profile: &NetworkProfile) -> Result<CompressionReport> {
    let calib = load_split(&cfg.calib, Split::Calibration)?;
    let val = load_split(&cfg.val, Split::Validation)?;
    let params = cfg.schedule_params();
    match cfg.compress_mode {
        CompressMode::Layerwise => {
            let report = compress_network(net, profile, &calib, &val, &params, &cfg.grid())?;
            report.check_invariants()?;
            Ok(report)
        }
        CompressMode::Global => {
            let config = rank_configs(&cfg.grid())?[0];
            global_compress_baseline(net, profile, &calib, &val, &params, config, cfg.selection.lambda_usage)
        }
    }
}

pub fn cmd_compress(cfg: &RunConfig) -> Result<()> {
    let mut net = load_model(&cfg.model)?;
    let profile = load_profile(&net, &cfg.profile_dir(), cfg.seed)?;
    let report = run_compression(cfg, &mut net, &profile)?;
    let fp = report.model_fingerprint.clone();
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    write_stamped_csv(&cfg.out_dir.join("layers.csv"), &fp, |w| report.write_layer_csv(w))?;
    write_stamped_csv(&cfg.out_dir.join("trials.csv"), &fp, |w| report.write_trial_csv(w))?;
    save_model(&net, &cfg.out_dir.join("compressed_model.json"))?;
    write_run_config(cfg, "compress")?;
    for l in &report.layers {
        println!(
            "layer {:2} rho {:.3} {:?} {} E {:.3e} -> {:.3e}",
            l.layer_index,
            l.rho,
            l.status,
            l.chosen
                .map(|c| format!("prune {} set {}", c.prune_ratio, c.set_size))
                .unwrap_or_else(|| "-".into()),
            l.e_before,
            l.e_after
        );
    }
    println!(
        "accuracy {:.4} -> {:.4}, energy saving {:.2}%",
        report.acc0,
        report.final_accuracy,
        100.0 * report.saving_pct
    );
    Ok(())
}

// -- eval / validate ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDoc {
    pub tool: String,
    pub model_fingerprint: String,
    pub dataset: String,
    pub top1: f64,
    pub correct: usize,
    pub n_samples: usize,
}

pub fn cmd_eval(model: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let net = load_model(model)?;
    let d = load_split(data, Split::Validation)?;
    let acc = net.accuracy(&d)?;
    let doc = EvalDoc {
        tool: TOOL_VERSION.into(),
        model_fingerprint: fingerprint(&net),
        dataset: data.display().to_string(),
        top1: acc.top1,
        correct: acc.correct,
        n_samples: acc.n_samples,
    };
    match out {
        Some(p) => write_json(p, &doc),
        None => {
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
    }
}

pub fn cmd_validate(config: Option<&Path>, model: Option<&Path>, report: Option<&Path>) -> Result<()> {
    if let Some(c) = config {
        RunConfig::resolve(Some(c), &RunArgs::default())?;
        println!("config {}: ok", c.display());
    }
    let net = match model {
        Some(m) => {
            let net = load_model(m)?;
            let restricted = net
                .conv_indices()
                .iter()
                .filter(|&&i| net.conv(i).map(|c| c.candidate_set.is_some()).unwrap_or(false))
                .count();
            println!(
                "model {}: ok ({} conv layers, {} with a candidate set, fingerprint {})",
                m.display(),
                net.conv_indices().len(),
                restricted,
                fingerprint(&net)
            );
            Some(net)
        }
        None => None,
    };
    if let Some(r) = report {
        let text = fs::read_to_string(r).map_err(|e| Error::io(r, e))?;
        let rep: CompressionReport = serde_json::from_str(&text)?;
        rep.check_invariants()
            .map_err(|e| Error::schema(r.display().to_string(), e.to_string()))?;
        if let Some(net) = &net {
            for l in &rep.layers {
                let conv = net.conv(l.layer_index)?;
                if let (Some(set), Some(cs)) = (&l.candidate_set, &conv.candidate_set) {
                    if &set.values != cs {
                        return Err(Error::schema(
                            r.display().to_string(),
                            format!("layer {} candidate set differs from the model", l.layer_index),
                        ));
                    }
                }
            }
        }
        println!("report {}: ok", r.display());
    }
    if config.is_none() && model.is_none() && report.is_none() {
        return Err(Error::InvalidConfig("validate needs --config, --model or --report".into()));
    }
    Ok(())
}

// -- plot data -----------------------------------------------------------------

fn model_fingerprint_or_none(cfg: &RunConfig) -> String {
    load_model(&cfg.model).map(|n| fingerprint(&n)).unwrap_or_else(|_| "none".into())
}

fn plot_power(cfg: &RunConfig) -> Result<()> {
    let net = load_model(&cfg.model)?;
    let profile = load_profile(&net, &cfg.profile_dir(), cfg.seed)?;
    write_stamped_csv(&cfg.out_dir.join("plot_power.csv"), &fingerprint(&net), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["layer", "weight", "power", "rank"])?;
        for t in &profile.tables {
            for v in -128i32..=127 {
                w.write_record([
                    t.layer_index.to_string(),
                    v.to_string(),
                    format!("{:.6}", t.get(v as i8)),
                    t.rank_of(v as i8).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    })
}

fn plot_hd(cfg: &RunConfig) -> Result<()> {
    let buckets = hd_sweep(HD_SAMPLES, cfg.seed);
    write_stamped_csv(&cfg.out_dir.join("plot_hd.csv"), &model_fingerprint_or_none(cfg), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["hd", "count", "mean_toggles"])?;
        for b in &buckets {
            w.write_record([b.key.to_string(), b.count.to_string(), format!("{:.6}", b.mean_toggles)])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    })
}

fn plot_msb(cfg: &RunConfig) -> Result<()> {
    let g = group_pair_energy(MSB_SAMPLES, cfg.seed);
    write_stamped_csv(&cfg.out_dir.join("plot_msb.csv"), &model_fingerprint_or_none(cfg), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["from".to_string()];
        header.extend((0..GROUP_COUNT).map(|g| format!("to_{g}")));
        w.write_record(&header)?;
        for from in 0..GROUP_COUNT {
            let mut row = vec![from.to_string()];
            row.extend((0..GROUP_COUNT).map(|to| g.mean(from, to).map(|m| format!("{m:.4}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    })
}

fn plot_activations(cfg: &RunConfig) -> Result<()> {
    let net = load_model(&cfg.model)?;
    let profile = load_profile(&net, &cfg.profile_dir(), cfg.seed)?;
    write_stamped_csv(&cfg.out_dir.join("plot_activations.csv"), &fingerprint(&net), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["layer", "from", "to", "count"])?;
        for s in &profile.stats {
            for (i, &c) in s.act_hist.iter().enumerate() {
                if c > 0 {
                    w.write_record([
                        s.layer_index.to_string(),
                        (i as i32 / 256 - 128).to_string(),
                        (i as i32 % 256 - 128).to_string(),
                        c.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    })
}

fn plot_ablation(cfg: &RunConfig) -> Result<()> {
    let net = load_model(&cfg.model)?;
    let profile = load_profile(&net, &cfg.profile_dir(), cfg.seed)?;
    let calib = load_split(&cfg.calib, Split::Calibration)?;
    let val = load_split(&cfg.val, Split::Validation)?;
    let params = cfg.schedule_params();
    let mut rows = Vec::new();
    let mut lw = net.clone();
    rows.push(("layerwise", compress_network(&mut lw, &profile, &calib, &val, &params, &cfg.grid())?));
    let mut lm = net.clone();
    rows.push(("layerwise_matched", compress_network(&mut lm, &profile, &calib, &val, &params, &[cfg.matched])?));
    let mut gl = net.clone();
    let lambda = cfg.selection.lambda_usage;
    rows.push(("global", global_compress_baseline(&mut gl, &profile, &calib, &val, &params, cfg.matched, lambda)?));
    let mut nv = net.clone();
    let naive = CompressionConfig {
        prune_ratio: 0.0,
        set_size: cfg.matched.set_size,
    };
    rows.push(("naive", global_compress_baseline(&mut nv, &profile, &calib, &val, &params, naive, 0.0)?));
    write_stamped_csv(&cfg.out_dir.join("plot_ablation.csv"), &fingerprint(&net), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["variant", "acc0", "final_accuracy", "e_before", "e_after", "saving_pct"])?;
        for (name, r) in &rows {
            w.write_record([
                name.to_string(),
                format!("{:.6}", r.acc0),
                format!("{:.6}", r.final_accuracy),
                format!("{:.6e}", r.e_before),
                format!("{:.6e}", r.e_after),
                format!("{:.6}", r.saving_pct),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    })
}

pub fn cmd_plotdata(cfg: &RunConfig, which: PlotKind) -> Result<()> {
    match which {
        PlotKind::Power => plot_power(cfg)?,
        PlotKind::Hd => plot_hd(cfg)?,
        PlotKind::Msb => plot_msb(cfg)?,
        PlotKind::Activations => plot_activations(cfg)?,
        PlotKind::Ablation => plot_ablation(cfg)?,
        PlotKind::All => {
            plot_power(cfg)?;
            plot_hd(cfg)?;
            plot_msb(cfg)?;
            plot_activations(cfg)?;
        }
    }
    write_run_config(cfg, "plotdata")?;
    println!("plot data written to {}", cfg.out_dir.display());
    Ok(())
}

// -- datasets --------------------------------------------------------------------

fn cmd_dataset(cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Synth {
            out,
            train_n,
            noise,
            distractor,
            pool,
            strokes,
            shift,
            brightness,
        } => {
            let mut p = SynthParams::default();
            p.noise = noise.unwrap_or(p.noise);
            p.distractor = distractor.unwrap_or(p.distractor);
            p.stroke_pool = pool.unwrap_or(p.stroke_pool);
            p.strokes_per_class = strokes.unwrap_or(p.strokes_per_class);
            p.max_shift = shift.unwrap_or(p.max_shift);
            p.brightness = brightness.unwrap_or(p.brightness);
            for (name, n, seed, split) in [
                ("train.bin", train_n, 1, Split::Train),
                ("calib.bin", 512, 2, Split::Calibration),
                ("val.bin", 1024, 3, Split::Validation),
            ] {
                let d = synthetic(n, seed, split, &p)?;
                write_file(&out.join(name), &d.to_bytes())?;
                println!("{}: {} images", out.join(name).display(), d.len());
            }
            Ok(())
        }
        DatasetCommand::ImportIdx { images, labels, out } => {
            let im = fs::read(&images).map_err(|e| Error::io(&images, e))?;
            let lb = fs::read(&labels).map_err(|e| Error::io(&labels, e))?;
            let d = Dataset::from_idx(&im, &lb, Split::Validation)?;
            write_file(&out, &d.to_bytes())?;
            println!("{}: {} images {}x{}x{}", out.display(), d.len(), d.c, d.h, d.w);
            Ok(())
        }
    }
}
