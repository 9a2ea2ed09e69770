//! Command-line front end. Reports and forecasts go to stdout or files;
//! progress and diagnostics go to stderr through `log`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::{Ablation, FusionMode, ModelConfig};
use crate::data::{
    load_csv, make_windows, split_chronological, synth_series, ChannelStats, SeriesTable, Split, Splits,
    SynthKind, SynthParams, TimestampColumn,
};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::DctNet;
use crate::trainer::{evaluate, fit, EvalMetrics, TrainConfig, TrainReport};

/// Split-ratio presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 6:2:2
    Ett,
    /// 7:1:2
    Standard,
}

impl Preset {
    pub fn ratios(self) -> [f64; 3] {
        match self {
            Preset::Ett => [6.0, 2.0, 2.0],
            Preset::Standard => [7.0, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preset: Preset,
    /// Explicit train/val/test proportions; override the preset.
    pub ratios: Option<[f64; 3]>,
    /// Step between consecutive windows.
    pub stride: usize,
    pub has_header: bool,
    pub timestamp: TimestampColumn,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preset: Preset::Standard,
            ratios: None,
            stride: 1,
            has_header: true,
            timestamp: TimestampColumn::Auto,
        }
    }
}

impl DataConfig {
    pub fn ratios(&self) -> [f64; 3] {
        self.ratios.unwrap_or_else(|| self.preset.ratios())
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "dctnet", version, about = "Patch-based multivariate time-series forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a CSV file and write a checkpoint plus a JSON report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a CSV file.
    Eval(EvalArgs),
    /// Write a forecast CSV from the last (or a chosen) input window.
    Forecast(ForecastArgs),
    /// Train the full model and ablated variants with the same seed and data.
    Ablate(AblateArgs),
    /// Generate a synthetic series as CSV.
    Synth(SynthArgs),
    /// Print a checkpoint's header and tensor summary.
    Dump(DumpArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Split-ratio preset.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// The CSV has no header row.
    #[arg(long)]
    pub no_header: bool,
    /// Whether the first column holds timestamps.
    #[arg(long, value_enum)]
    pub timestamp: Option<TimestampArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TimestampArg {
    Auto,
    Present,
    Absent,
}

impl From<TimestampArg> for TimestampColumn {
    fn from(t: TimestampArg) -> Self {
        match t {
            TimestampArg::Auto => TimestampColumn::Auto,
            TimestampArg::Present => TimestampColumn::Present,
            TimestampArg::Absent => TimestampColumn::Absent,
        }
    }
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct RunOverrides {
    /// JSON config file with optional `model`, `train` and `data` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, shuffling and dropout.
    #[arg(long, env = "DCTNET_SEED")]
    pub seed: Option<u64>,
    /// Forecast horizon T.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Input window length L.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub fusion_mode: Option<FusionArg>,
    /// Stages to bypass, e.g. `fsc` or `dbct,gpaf`.
    #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
    pub disable: Vec<Ablation>,
    /// Disable gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FusionArg {
    ResidualSubstitution,
    Additive,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunOverrides,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV holding the history.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub no_header: bool,
    #[arg(long, value_enum)]
    pub timestamp: Option<TimestampArg>,
    /// Row index at which the forecast starts; defaults to the end of the file.
    #[arg(long)]
    pub origin: Option<usize>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunOverrides,
    /// Variants to compare against the full model.
    #[arg(long, value_delimiter = ',', value_parser = parse_ablation, default_value = "dbct,gpaf,fsc")]
    pub variants: Vec<Ablation>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum KindArg {
    Sine,
    SineTrend,
    LevelShift,
    FreqShift,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Sine => SynthKind::Sine,
            KindArg::SineTrend => SynthKind::SineTrend,
            KindArg::LevelShift => SynthKind::LevelShift,
            KindArg::FreqShift => SynthKind::FreqShift,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub rows: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, env = "DCTNET_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 24.0)]
    pub period: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.001)]
    pub slope: f64,
    #[arg(long)]
    pub shift_row: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    pub shift_magnitude: f64,
    #[arg(long, default_value_t = 12.0)]
    pub period_after: f64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Report written by `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub train: TrainReport,
    /// Test-split metrics of the retained parameters.
    pub test: EvalMetrics,
}

/// Report written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: Split,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub mean_alpha: f64,
    pub windows: usize,
    pub seed: u64,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub best_epoch: usize,
}

/// Report written by `ablate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
}

/// Resolves the config file, data flags and overrides into one config.
pub fn resolve_config(data: &DataArgs, run: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = data.preset {
        cfg.data.preset = p;
        cfg.data.ratios = None;
    }
    if data.no_header {
        cfg.data.has_header = false;
    }
    if let Some(t) = data.timestamp {
        cfg.data.timestamp = t.into();
    }
    let m = &mut cfg.model;
    if let Some(seed) = run.seed {
        m.seed = seed;
        cfg.train.seed = seed;
    }
    macro_rules! set {
        ($($flag:ident => $target:expr),* $(,)?) => {
            $( if let Some(v) = run.$flag { $target = v; } )*
        };
    }
    set! {
        horizon => m.pred_len,
        seq_len => m.seq_len,
        latent_dim => m.latent_dim,
        heads => m.heads,
        patch_len => m.patch_len,
        stride => m.stride,
        depth => m.depth,
        dropout => m.dropout,
        epochs => cfg.train.epochs,
        batch_size => cfg.train.batch_size,
        lr => cfg.train.lr,
        patience => cfg.train.patience,
    }
    if let Some(f) = run.fusion_mode {
        m.fusion_mode = match f {
            FusionArg::ResidualSubstitution => FusionMode::ResidualSubstitution,
            FusionArg::Additive => FusionMode::Additive,
        };
    }
    for stage in &run.disable {
        *m = m.ablation_variant(*stage);
    }
    if run.no_clip {
        cfg.train.clip_norm = None;
    }
    Ok(cfg)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Loads and splits `path`; sets the channel count in `cfg` from the file.
fn prepare(path: &Path, cfg: &mut RunConfig) -> Result<(SeriesTable, Splits)> {
    let table = load_csv(path, cfg.data.has_header, cfg.data.timestamp)?;
    if cfg.model.channels != table.channels() {
        info!("using {} channels from {}", table.channels(), path.display());
        cfg.model.channels = table.channels();
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.data.stride == 0 {
        return Err(Error::Config("data.stride must be positive".to_string()));
    }
    let min_rows = cfg.model.seq_len + cfg.model.pred_len;
    let splits = split_chronological(&table, cfg.data.ratios(), min_rows)?;
    info!(
        "{} rows split into {}/{}/{}",
        table.rows(),
        splits.train.rows(),
        splits.val.rows(),
        splits.test.rows()
    );
    Ok((table, splits))
}

/// Trains one model; returns the retained model, report and test metrics.
pub fn train_model(cfg: &RunConfig, splits: &Splits) -> Result<(DctNet, ChannelStats, TrainReport, EvalMetrics)> {
    let stats = ChannelStats::fit(&splits.train)?;
    let (l, t, s) = (cfg.model.seq_len, cfg.model.pred_len, cfg.data.stride);
    let train = make_windows(&splits.train, Split::Train, l, t, s, &stats)?;
    let val = make_windows(&splits.val, Split::Val, l, t, s, &stats)?;
    let test = make_windows(&splits.test, Split::Test, l, t, s, &stats)?;
    let model = DctNet::new(cfg.model.clone())?;
    let started = Instant::now();
    let (params, report) = fit(&model, &train, &val, &cfg.train)?;
    info!("training took {:.1}s", started.elapsed().as_secs_f64());
    let best = DctNet::from_parts(cfg.model.clone(), params)?;
    let metrics = evaluate(&best, &test, cfg.train.batch_size)?;
    info!("test mse {:.6}, mae {:.6}", metrics.mse, metrics.mae);
    Ok((best, stats, report, metrics))
}

fn write_json(value: &impl Serialize, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("serialising report: {e}")))?;
    text.push('\n');
    emit(text.as_bytes(), path)
}

fn emit(bytes: &[u8], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.data, &args.run)?;
    let (table, splits) = prepare(&args.data.data, &mut cfg)?;
    let (model, stats, report, test) = train_model(&cfg, &splits)?;
    let ckpt = Checkpoint {
        model,
        metadata: Metadata {
            channel_names: table.channel_names.clone(),
            normalization: Some(stats),
            seed: cfg.model.seed,
            best_epoch: Some(report.best_epoch),
            best_val_mse: Some(report.best_val_mse),
            split_ratios: Some(cfg.data.ratios()),
            window_stride: Some(cfg.data.stride),
        },
    };
    ckpt.save(&args.out)?;
    info!("wrote {}", args.out.display());
    let output = TrainOutput {
        dataset: dataset_name(&args.data.data),
        horizon: cfg.model.pred_len,
        seed: cfg.model.seed,
        config: cfg,
        train: report,
        test,
    };
    write_json(&output, args.report.as_deref())
}

fn load_checkpoint_for(path: &Path, table: &SeriesTable) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.config.channels != table.channels() {
        return Err(Error::Data(format!(
            "checkpoint expects {} channels but the data has {}",
            ckpt.model.config.channels,
            table.channels()
        )));
    }
    Ok(ckpt)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let d = &args.data;
    let mut data_cfg = DataConfig::default();
    if d.no_header {
        data_cfg.has_header = false;
    }
    if let Some(t) = d.timestamp {
        data_cfg.timestamp = t.into();
    }
    let table = load_csv(&d.data, data_cfg.has_header, data_cfg.timestamp)?;
    let ckpt = load_checkpoint_for(&args.checkpoint, &table)?;
    let cfg = &ckpt.model.config;
    let ratios = match d.preset {
        Some(p) => p.ratios(),
        None => ckpt.metadata.split_ratios.unwrap_or_else(|| data_cfg.ratios()),
    };
    let stride = ckpt.metadata.window_stride.unwrap_or(1);
    let splits = split_chronological(&table, ratios, cfg.seq_len + cfg.pred_len)?;
    let stats = match &ckpt.metadata.normalization {
        Some(s) => s.clone(),
        None => ChannelStats::fit(&splits.train)?,
    };
    let split: Split = args.split.into();
    let windows = make_windows(splits.get(split), split, cfg.seq_len, cfg.pred_len, stride, &stats)?;
    let m = evaluate(&ckpt.model, &windows, args.batch_size)?;
    info!("{} split: mse {:.6}, mae {:.6}, mean alpha {:.4}", split.name(), m.mse, m.mae, m.mean_alpha);
    write_json(
        &EvalReport {
            dataset: dataset_name(&d.data),
            split,
            horizon: cfg.pred_len,
            mse: m.mse,
            mae: m.mae,
            mean_alpha: m.mean_alpha,
            windows: m.windows,
            seed: ckpt.metadata.seed,
            config: cfg.clone(),
        },
        None,
    )
}

/// Forecast table in the original scale: one row per step with optional
/// ground truth.
pub fn forecast_table(ckpt: &Checkpoint, table: &SeriesTable, origin: Option<usize>) -> Result<String> {
    let cfg = &ckpt.model.config;
    let (l, t, c) = (cfg.seq_len, cfg.pred_len, cfg.channels);
    let origin = origin.unwrap_or(table.rows());
    if origin < l || origin > table.rows() {
        return Err(Error::Data(format!(
            "forecast origin {origin} needs {l} rows of history within a {}-row file",
            table.rows()
        )));
    }
    let history = table.slice_rows(origin - l, origin);
    let stats = ckpt.metadata.normalization.clone().unwrap_or(ChannelStats {
        mean: vec![0.0; c],
        std: vec![1.0; c],
    });
    let x = stats.standardize(&history.values).reshape([1, l, c])?;
    let pred = ckpt.model.predict(&x)?;
    let pred = stats.destandardize(&pred.values.reshape([t, c])?);
    let truth: Option<Tensor> = (origin + t <= table.rows()).then(|| table.slice_rows(origin, origin + t).values);

    let names = if ckpt.metadata.channel_names.len() == c {
        ckpt.metadata.channel_names.clone()
    } else {
        table.channel_names.clone()
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("writing forecast: {e}"));
    let mut header = vec!["step".to_string()];
    if truth.is_some() {
        header.extend(names.iter().map(|n| format!("{n}_true")));
    }
    header.extend(names.iter().map(|n| format!("{n}_pred")));
    w.write_record(&header).map_err(csv_err)?;
    for step in 0..t {
        let mut rec = vec![step.to_string()];
        if let Some(truth) = &truth {
            rec.extend((0..c).map(|j| format!("{}", truth.get(&[step, j]))));
        }
        rec.extend((0..c).map(|j| format!("{}", pred.get(&[step, j]))));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("writing forecast: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn cmd_forecast(args: &ForecastArgs) -> Result<()> {
    let timestamp = args.timestamp.map_or(TimestampColumn::Auto, Into::into);
    let table = load_csv(&args.data, !args.no_header, timestamp)?;
    let ckpt = load_checkpoint_for(&args.checkpoint, &table)?;
    let text = forecast_table(&ckpt, &table, args.origin)?;
    emit(text.as_bytes(), args.out.as_deref())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.data, &args.run)?;
    let (_, splits) = prepare(&args.data.data, &mut cfg)?;
    let mut variants = vec![("full".to_string(), cfg.clone())];
    for stage in &args.variants {
        if variants.iter().any(|(name, _)| name == stage.label()) {
            continue;
        }
        let mut v = cfg.clone();
        v.model = v.model.ablation_variant(*stage);
        variants.push((stage.label().to_string(), v));
    }
    let mut rows = Vec::new();
    for (name, v) in &variants {
        info!("training variant {name}");
        let (_, _, report, test) = train_model(v, &splits)?;
        rows.push(AblationRow {
            variant: name.clone(),
            mse: test.mse,
            mae: test.mae,
            best_epoch: report.best_epoch,
        });
    }
    write_json(
        &AblationReport {
            dataset: dataset_name(&args.data.data),
            horizon: cfg.model.pred_len,
            seed: cfg.model.seed,
            config: cfg,
            rows,
        },
        args.report.as_deref(),
    )
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        period: args.period,
        noise: args.noise,
        slope: args.slope,
        shift_row: args.shift_row,
        shift_magnitude: args.shift_magnitude,
        period_after: args.period_after,
    };
    let table = synth_series(args.kind.into(), args.rows, args.channels, args.seed, &params)?;
    let mut buf = Vec::new();
    table.write_csv_to(&mut buf)?;
    emit(&buf, args.out.as_deref())
}

pub fn cmd_dump(args: &DumpArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let header = serde_json::json!({
        "config": ckpt.model.config,
        "metadata": ckpt.metadata,
        "parameters": ckpt.model.params.num_scalars(),
    });
    let mut text = serde_json::to_string_pretty(&header).expect("header serialises");
    text.push('\n');
    text.push_str(&ckpt.summary());
    emit(text.as_bytes(), None)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Dump(a) => cmd_dump(a),
    }
}

/// Process exit code for an error: 2 for bad inputs, 1 for internal or
/// training failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        2
    } else {
        1
    }
}
