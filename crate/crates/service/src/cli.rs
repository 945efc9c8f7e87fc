//! `segsteer` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use segsteer_core::adapt::{initial_prediction, pretrain, AdaptConfig, PretrainConfig, SessionOptions, DESK_LR};
use segsteer_core::annotation::DESK_RADIUS;
use segsteer_core::metrics::{confusion, iou, ConfusionMatrix};
use segsteer_core::raster::LabeledImage;
use segsteer_core::segnet::{save_model, MiniLink, MiniLinkConfig};
use segsteer_core::simulator::{reports_csv, run_session, summarize, BenchmarkSummary, Protocol, SimConfig, SimMode};
use segsteer_core::synthgen::{gen_dataset, load_split, read_manifest, DomainId, DomainSpec, Manifest, Split};

use crate::config::{resolve_port, ServiceConfig};
use crate::error::{exit, CliError};
use crate::registry::{ModelEntry, Provenance, Registry};
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "segsteer", version, about = "Interactive segmentation refinement with click-driven adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset with simulated click guidance.
    Pretrain(PretrainArgs),
    /// Replay simulated annotation sessions and report mIoU per click.
    Simulate(SimulateArgs),
    /// Report IoU of a model without clicks.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    A,
    B,
}

impl From<DomainArg> for DomainId {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::A => DomainId::A,
            DomainArg::B => DomainId::B,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Disir,
    Disca,
    Both,
}

impl ModeArg {
    fn modes(self) -> &'static [SimMode] {
        match self {
            ModeArg::Disir => &[SimMode::Disir],
            ModeArg::Disca => &[SimMode::Disca],
            ModeArg::Both => &[SimMode::Disir, SimMode::Disca],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Incremental,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, value_enum, ignore_case = true, default_value = "a")]
    pub domain: DomainArg,
    /// Scene side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// 2 (building/background) or 4 (adds roads and vegetation).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub max_clicks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = DESK_RADIUS)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub clicks: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "incremental")]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = DESK_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Guidance radius; defaults to the one the model was trained with.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Per-click mIoU CSV.
    #[arg(long)]
    pub csv: PathBuf,
    /// JSON summary with per-fixture and per-mode results.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model directory; registered first and used as the default.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    /// Overridden by the SEGSTEER_PORT environment variable.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// JSON service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub session_root: Option<PathBuf>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, returning its
/// standard output.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => return Ok(e.to_string()),
        Err(e) => return Err(CliError::usage(e.to_string())),
    };
    match cli.command {
        Command::GenData(a) => gen_data_cmd(&a),
        Command::Pretrain(a) => pretrain_cmd(&a),
        Command::Simulate(a) => simulate_cmd(&a).map(|(text, _)| text),
        Command::Eval(a) => eval_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
    }
}

pub fn gen_data_cmd(a: &GenDataArgs) -> Result<String, CliError> {
    let domain = DomainSpec::for_id(a.domain.into()).with_classes(a.classes);
    let m = gen_dataset(a.seed, a.count, &domain, a.size, a.size, &a.out)?;
    Ok(format!(
        "wrote {} domain {} scenes ({} train, {} val) to {}\n",
        a.count,
        m.domain,
        m.train.len(),
        m.val.len(),
        a.out.display()
    ))
}

fn load_data(dir: &Path, split: Split, classes: usize) -> Result<(Manifest, Vec<(PathBuf, LabeledImage)>), CliError> {
    let manifest = read_manifest(dir)?;
    if manifest.classes != classes {
        return Err(CliError::new(
            exit::CLASS_MISMATCH,
            format!("dataset has {} classes, model expects {classes}", manifest.classes),
        ));
    }
    let samples = load_split(dir, split, Some(classes))?;
    Ok((manifest, samples))
}

pub fn pretrain_cmd(a: &PretrainArgs) -> Result<String, CliError> {
    let manifest = read_manifest(&a.data)?;
    let config = MiniLinkConfig {
        num_classes: manifest.classes,
        depth: a.depth,
        base_channels: a.base_channels,
        kernel_size: a.kernel_size,
        seed: a.seed,
    };
    let model = MiniLink::new(config)?;
    let strip = |v: Vec<(PathBuf, LabeledImage)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
    let train = strip(load_split(&a.data, Split::Train, Some(config.num_classes))?);
    let val = strip(load_split(&a.data, Split::Val, Some(config.num_classes))?);
    if train.is_empty() {
        return Err(CliError::usage("dataset has no training scenes"));
    }
    let cfg = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        max_clicks: a.max_clicks,
        seed: a.seed,
        radius: a.radius,
    };
    let result = pretrain(&model, &train, &val, &cfg)?;
    save_model(&result.params, &config, &a.out)?;
    Provenance {
        dataset_seed: Some(manifest.seed),
        domain: Some(manifest.domain.to_string()),
        epochs: a.epochs,
        lr: a.lr,
        max_clicks: a.max_clicks,
        seed: a.seed,
        radius: a.radius,
    }
    .write(&a.out)?;
    let mut log = String::from("epoch,train_loss,val_loss\n");
    for e in &result.log {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(log, "{},{},{val}", e.epoch, e.train_loss).unwrap();
    }
    let path = a.out.join("training_log.csv");
    fs::write(&path, log).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut out = String::new();
    match result.log.last() {
        Some(last) => {
            let val = last.val_loss.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            writeln!(out, "epoch {} train_loss {:.6} val_loss {val}", last.epoch, last.train_loss).unwrap();
        }
        None => out.push_str("0 epochs: saved the initialization\n"),
    }
    writeln!(out, "saved model to {}", a.out.display()).unwrap();
    Ok(out)
}

/// Runs the benchmark and returns the printed report with its summary.
pub fn simulate_cmd(a: &SimulateArgs) -> Result<(String, BenchmarkSummary), CliError> {
    let entry = ModelEntry::load(&a.model)?;
    let (_, samples) = load_data(&a.data, a.split.into(), entry.model.num_classes())?;
    let adapt = AdaptConfig {
        steps: a.steps,
        lr: a.lr,
        lambda: a.lambda,
        ..AdaptConfig::default()
    };
    adapt.validate()?;
    let session = SessionOptions {
        radius: a.radius.unwrap_or_else(|| entry.radius()),
        tiling: None,
    };
    let protocol = match a.protocol {
        ProtocolArg::Incremental => Protocol::Incremental,
        ProtocolArg::Batch => Protocol::Batch,
    };
    let mut reports = Vec::new();
    for (path, sample) in &samples {
        let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        for &mode in a.mode.modes() {
            let cfg = SimConfig {
                mode,
                num_clicks: a.clicks,
                protocol,
                adapt,
                session,
            };
            let rep = run_session(&entry.model, &entry.params, &sample.image, &sample.labels, &cfg)?;
            reports.push((id.clone(), rep));
        }
    }
    fs::write(&a.csv, reports_csv(&reports)).map_err(|e| CliError::io(format!("{}: {e}", a.csv.display())))?;
    let summary = summarize(&reports);
    if let Some(path) = &a.summary {
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    }
    let mut out = String::new();
    for m in &summary.modes {
        writeln!(
            out,
            "{}: {} scenes, mean initial mIoU {:.4}, mean final mIoU {:.4}, margin {:+.4}",
            m.mode.name(),
            m.fixtures,
            m.mean_initial_miou,
            m.mean_final_miou,
            m.margin
        )
        .unwrap();
    }
    if let Some(d) = summary.disca_minus_disir {
        writeln!(out, "disca - disir: {d:+.4}").unwrap();
    }
    Ok((out, summary))
}

/// Dataset-level IoU of the unguided prediction.
pub fn eval_model(entry: &ModelEntry, samples: &[(PathBuf, LabeledImage)]) -> Result<ConfusionMatrix, CliError> {
    let classes = entry.model.num_classes();
    let mut total = ConfusionMatrix::new(classes);
    for (_, s) in samples {
        let pred = initial_prediction(&entry.model, &entry.params, &s.image)?.argmax();
        total += &confusion(&pred, &s.labels, classes)?;
    }
    Ok(total)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<String, CliError> {
    let entry = ModelEntry::load(&a.model)?;
    let (_, samples) = load_data(&a.data, a.split.into(), entry.model.num_classes())?;
    if samples.is_empty() {
        return Err(CliError::usage("split has no scenes"));
    }
    let report = iou(&eval_model(&entry, &samples)?)?;
    let mut out = String::new();
    for (k, v) in report.per_class.iter().enumerate() {
        match v {
            Some(v) => writeln!(out, "class {k} IoU {v:.4}").unwrap(),
            None => writeln!(out, "class {k} IoU n/a").unwrap(),
        }
    }
    writeln!(out, "mean IoU {:.4}", report.mean).unwrap();
    Ok(out)
}

pub fn serve_cmd(a: &ServeArgs) -> Result<String, CliError> {
    let config = match &a.config {
        Some(p) => ServiceConfig::from_file(p)?,
        None => ServiceConfig::default(),
    };
    let mut registry = Registry::new();
    for dir in &a.model {
        registry.insert(ModelEntry::load(dir)?)?;
    }
    if let Some(root) = &config.registry_root {
        registry.scan(root)?;
    }
    if registry.is_empty() {
        return Err(CliError::usage("no models: pass --model or set registry_root in the config file"));
    }
    let port = resolve_port(a.port, &config)?;
    let session_root = a.session_root.clone().or(config.session_root.clone());
    let static_dir = a.static_dir.clone().or(config.static_dir.clone());
    let state = Arc::new(AppState::new(registry, session_root, config.adapt, config.tiling));
    let recovered = state.recover()?;
    if recovered > 0 {
        println!("recovered {recovered} sessions");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(state, static_dir, SocketAddr::new(a.host, port)))?;
    Ok(String::new())
}
