//! Command-line entry point: synth → split → dynimg → train → eval → report,
//! plus `selftest` and `ablate`.
//!
//! Every command that writes files also writes `run.json`, a [`RunRecord`]
//! naming the command line, the effective configuration hash and the SHA-256
//! ids of its inputs and outputs. Text artifacts carry a `# run=<id>` header.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasyn::{self, load_video, DataError, SynthConfig, MANIFEST_FILE};
use crate::diffcore::{DiffError, Tensor};
use crate::dynimg::{self, dynamic_image_at, RankPoolConfig, RankPoolError};
use crate::kv::{KvError, KvMap};
use crate::metrics::{self, ApcerMode, MetricsError, Rates, ScoredSet};
use crate::netgraph::{BackboneSpec, BranchMode, FusionVariant, InitConfig, NetConfig, NetError, Network, SampleInput};
use crate::protocols::{
    build_split, read_manifest, validate_split, write_manifest, ProtocolError, SplitOptions, SubProtocol,
    Subset,
};
use crate::trainer::{self, Dataset, Model, SlotMap, TrainConfig, TrainError, TrainOutput};
use crate::Modality;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    RankPool(#[from] RankPoolError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Kv(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Net(e) => net_code(e),
            CliError::Data(DataError::Config(_) | DataError::Kv(_)) => EXIT_USAGE,
            CliError::Metrics(MetricsError::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Kv(_) => EXIT_USAGE,
                TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
                TrainError::Diff(DiffError::NonFinite(_)) | TrainError::Metrics(MetricsError::NonFinite(_)) => {
                    EXIT_NUMERIC
                }
                TrainError::Net(n) => net_code(n),
                _ => EXIT_DATA,
            },
            CliError::RankPool(RankPoolError::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

fn net_code(e: &NetError) -> i32 {
    match e {
        NetError::Spec(_) | NetError::Config(_) | NetError::Kv(_) => EXIT_USAGE,
        NetError::Diff(DiffError::NonFinite(_)) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "psmm", version, about = "Static-dynamic multi-modal face anti-spoofing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-modal corpus and its manifest.
    Synth(SynthArgs),
    /// Build and validate one sub-protocol split of a manifest.
    Split(SplitArgs),
    /// Compute the dynamic image of one clip and export it as PNG.
    Dynimg(DynimgArgs),
    /// Train a network on a split.
    Train(TrainArgs),
    /// Score a subset with a trained model.
    Eval(EvalArgs),
    /// Aggregate score files into APCER/BPCER/ACER rows.
    Report(ReportArgs),
    /// Run the built-in oracle and gradient checks.
    Selftest(SelftestArgs),
    /// Train and evaluate a matrix of branch / modality / fusion variants.
    Ablate(AblateArgs),
}

/// Config file plus `key=value` overrides; overrides win.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Key-value config file (`key = value` per line, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(&str, Option<String>)]) -> Result<KvMap, CliError> {
        let mut kv = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p.display().to_string()))?;
                KvMap::parse(&text)?
            }
            None => KvMap::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
            kv.set(k.trim(), v.trim());
        }
        for (k, v) in extra {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
        Ok(kv)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Start from the full-size layout (500 subjects per ethnicity plus 3D).
    #[arg(long)]
    pub canonical: bool,
    #[arg(long)]
    pub subjects: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the manifest without rendering clips.
    #[arg(long)]
    pub manifest_only: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sub-protocol id such as `1_1` or `4_3`.
    #[arg(long)]
    pub protocol: SubProtocol,
    /// Directory receiving train.csv, valid.csv and test.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Leave 3D-mask recordings out of the test subset.
    #[arg(long)]
    pub no_3d: bool,
}

#[derive(Debug, Args)]
pub struct DynimgArgs {
    /// Clip in the SDVF container format.
    #[arg(long)]
    pub video: PathBuf,
    /// Frame the trailing window ends at; defaults to the last frame.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub window: usize,
    /// PNG output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus root that manifest paths are relative to.
    #[arg(long)]
    pub data: PathBuf,
    /// Training subset manifest (e.g. train.csv from `split`).
    #[arg(long, required_unless_present = "protocol", conflicts_with = "protocol")]
    pub train: Option<PathBuf>,
    /// Validation subset, scored after every epoch.
    #[arg(long, conflicts_with = "protocol")]
    pub valid: Option<PathBuf>,
    /// Split `<data>/manifest.csv` by this sub-protocol instead of reading
    /// subset files; its valid subset is scored after every epoch.
    #[arg(long)]
    pub protocol: Option<SubProtocol>,
    /// Output directory for the model, checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Fusion variant: `sdnet`, `nhf`, `psmm-wobf` or `psmm`.
    #[arg(long)]
    pub variant: Option<FusionVariant>,
    /// Modality set such as `r`, `rd` or `rdi`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory holding model.cfg and model.ckpt.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Subset manifest to score (e.g. test.csv).
    #[arg(long)]
    pub entries: PathBuf,
    /// Score CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Tag written into the subprotocol column.
    #[arg(long)]
    pub subprotocol: Option<String>,
    /// Feed every model input from this modality's clips (cross-modality tests).
    #[arg(long)]
    pub source: Option<Modality>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 7)]
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Table,
    Records,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Score files, one per sub-protocol.
    #[arg(required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Use the worst APCER over attack instruments instead of pooling.
    #[arg(long)]
    pub max_over_pai: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Branch axis: any of `s`, `d`, `sd`.
    #[arg(long, value_delimiter = ',')]
    pub branches: Vec<BranchMode>,
    /// Modality axis: sets such as `r`, `rd`, `rdi`.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Vec<String>,
    /// Fusion axis: any of `nhf`, `psmm-wobf`, `psmm`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<FusionVariant>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

/// SHA-256 id of one artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of_file(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(io_err(path.display().to_string()))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }

    /// One id for many files under `root`: the digest of their sorted
    /// `relative-path id` lines.
    pub fn of_tree(label: &str, root: &Path, files: &[PathBuf]) -> Result<Self, CliError> {
        let mut lines: Vec<String> = files
            .iter()
            .map(|p| Artifact::of_file(&root.join(p)).map(|a| format!("{} {}\n", p.display(), a.sha256)))
            .collect::<Result<_, _>>()?;
        lines.sort();
        Ok(Self {
            path: label.to_string(),
            sha256: hex::encode(Sha256::digest(lines.concat().as_bytes())),
        })
    }
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: Vec<String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub elapsed_seconds: f64,
}

pub const RUN_RECORD: &str = "run.json";

impl RunRecord {
    /// The id depends only on the subcommand, the effective config and the
    /// input ids, so a rerun into another directory shares it.
    pub fn start(command: &[String], config: &str, seed: Option<u64>, inputs: Vec<Artifact>) -> Self {
        let config_hash = hex::encode(Sha256::digest(config.as_bytes()));
        let mut h = Sha256::new();
        h.update(command.get(1).map_or("", String::as_str).as_bytes());
        h.update([0]);
        h.update(config_hash.as_bytes());
        for a in &inputs {
            h.update(a.sha256.as_bytes());
        }
        Self {
            run_id: hex::encode(h.finalize())[..16].to_string(),
            command: command.to_vec(),
            config_hash,
            seed,
            inputs,
            outputs: Vec::new(),
            elapsed_seconds: 0.0,
        }
    }

    pub fn header(&self) -> String {
        format!("run={}", self.run_id)
    }

    /// Writes the record to `path`: `run.json` inside an output directory,
    /// or a `<file>.run.json` sidecar for single-file outputs.
    pub fn finish(mut self, path: &Path, outputs: Vec<Artifact>, started: Instant) -> Result<Self, CliError> {
        self.outputs = outputs;
        self.elapsed_seconds = started.elapsed().as_secs_f64();
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n").map_err(io_err(path.display().to_string()))?;
        Ok(self)
    }
}

/// Parses `argv` (program name first) and runs the command, writing
/// human-readable output to `out` and diagnostics to `err`. Returns the exit
/// status.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command, argv: &[String], out: &mut dyn Write) -> Result<i32, CliError> {
    let w = |r: io::Result<()>| r.map_err(io_err("stdout"));
    match cmd {
        Command::Synth(a) => {
            let started = Instant::now();
            let kv = a.config.load(&[
                ("subjects", a.subjects.map(|v| v.to_string())),
                ("seed", a.seed.map(|v| v.to_string())),
            ])?;
            kv.check_keys(SynthConfig::keys())?;
            let mut cfg = if a.canonical { SynthConfig::canonical() } else { SynthConfig::default() };
            cfg.apply_kv(&kv)?;
            let rendered = cfg.to_kv().render();
            let rec = RunRecord::start(argv, &rendered, Some(cfg.seed), config_inputs(&a.config)?);
            let entries = datasyn::synth_dataset(&cfg, &a.out, a.manifest_only, Some(&rec.header()))?;
            let cfg_path = a.out.join("synth.cfg");
            write_text(&cfg_path, &format!("# {}\n{rendered}", rec.header()))?;
            let mut outputs = vec![Artifact::of_file(&a.out.join(MANIFEST_FILE))?, Artifact::of_file(&cfg_path)?];
            if !a.manifest_only {
                let files: Vec<PathBuf> = entries.iter().map(|e| PathBuf::from(&e.path)).collect();
                outputs.push(Artifact::of_tree("clips", &a.out, &files)?);
            }
            let rec = rec.finish(&a.out.join(RUN_RECORD), outputs, started)?;
            w(writeln!(out, "wrote {} entries to {} ({})", entries.len(), a.out.display(), rec.header()))?;
        }
        Command::Split(a) => {
            let started = Instant::now();
            let manifest = read_manifest(&a.manifest)?;
            let opts = SplitOptions {
                include_3d: !a.no_3d,
                ..SplitOptions::default()
            };
            let split = build_split(&manifest, a.protocol, opts)?;
            let rec = RunRecord::start(
                argv,
                &format!("protocol = {}\ninclude_3d = {}\n", a.protocol, !a.no_3d),
                None,
                vec![Artifact::of_file(&a.manifest)?],
            );
            fs::create_dir_all(&a.out).map_err(io_err(a.out.display().to_string()))?;
            let mut outputs = Vec::new();
            for s in Subset::ALL {
                let path = a.out.join(format!("{}.csv", s.as_str()));
                let mut f = BufWriter::new(fs::File::create(&path).map_err(io_err(path.display().to_string()))?);
                write_manifest(&mut f, split.subset(s), Some(&rec.header()))?;
                f.flush().map_err(io_err(path.display().to_string()))?;
                outputs.push(Artifact::of_file(&path)?);
            }
            let report = validate_split(&split);
            for s in &report.subsets {
                w(writeln!(
                    out,
                    "{} {:<5} 2d real={} fake={}  3d fake={}",
                    a.protocol,
                    s.subset.as_str(),
                    s.counts_2d.real,
                    s.counts_2d.fake,
                    s.counts_3d.fake
                ))?;
            }
            rec.finish(&a.out.join(RUN_RECORD), outputs, started)?;
            if !report.is_ok() {
                for v in &report.violations {
                    w(writeln!(out, "violation: {v}"))?;
                }
                return Ok(EXIT_DATA);
            }
        }
        Command::Dynimg(a) => {
            let started = Instant::now();
            let seq = load_video(&a.video)?;
            let index = a.index.unwrap_or(seq.len().saturating_sub(1));
            let settings = format!("index = {index}\nwindow = {}\n", a.window);
            let rec = RunRecord::start(argv, &settings, None, vec![Artifact::of_file(&a.video)?]);
            let di = dynamic_image_at(&seq, index, &RankPoolConfig::new(a.window)?)?;
            if !di.d.is_finite() {
                return Err(CliError::Numeric("dynamic image is not finite".into()));
            }
            save_png(&a.out, &di.d)?;
            rec.finish(&sidecar(&a.out), vec![Artifact::of_file(&a.out)?], started)?;
            w(writeln!(
                out,
                "frames {:?} objective {:.6e} iterations {} converged {} max|d| {:.6e}",
                di.window,
                di.objective,
                di.iterations,
                di.converged,
                di.d.max_abs()
            ))?;
        }
        Command::Train(a) => {
            let started = Instant::now();
            let kv = a.config.load(&[
                ("epochs", a.epochs.map(|v| v.to_string())),
                ("seed", a.seed.map(|v| v.to_string())),
                ("variant", a.variant.map(|v| v.to_string())),
                ("modalities", a.modalities.clone()),
            ])?;
            let (net_cfg, train_cfg) = parse_train_kv(&kv)?;
            let mut effective = format!("{}{}", net_cfg.to_kv().render(), train_cfg.to_kv().render());
            let mut inputs = config_inputs(&a.config)?;
            let (train_entries, valid_entries) = match (&a.protocol, &a.train) {
                (Some(id), _) => {
                    let path = a.data.join(MANIFEST_FILE);
                    inputs.push(Artifact::of_file(&path)?);
                    effective += &format!("protocol = {id}\n");
                    let split = build_split(&read_manifest(&path)?, *id, SplitOptions::default())?;
                    (split.train, Some(split.valid))
                }
                (None, Some(train)) => {
                    inputs.push(Artifact::of_file(train)?);
                    let valid = match &a.valid {
                        Some(v) => {
                            inputs.push(Artifact::of_file(v)?);
                            Some(read_manifest(v)?)
                        }
                        None => None,
                    };
                    (read_manifest(train)?, valid)
                }
                (None, None) => return Err(CliError::Usage("either --train or --protocol is required".into())),
            };
            let rec = RunRecord::start(argv, &effective, Some(train_cfg.seed), inputs);
            let slots = SlotMap::identity(&net_cfg.modalities);
            let size = net_cfg.spec.input_size;
            let train_set = Dataset::load(&a.data, &train_entries, &slots, size, train_cfg.window)?;
            let valid_set = match &valid_entries {
                Some(v) => Some(Dataset::load(&a.data, v, &slots, size, train_cfg.window)?),
                None => None,
            };
            let model = Model::init(net_cfg, train_cfg.seed)?;
            let outcome = trainer::train(
                model,
                &train_set,
                valid_set.as_ref(),
                &train_cfg,
                &TrainOutput {
                    dir: Some(a.out.clone()),
                    header: Some(rec.header()),
                },
            )?;
            let cfg_path = a.out.join("train.cfg");
            write_text(&cfg_path, &format!("# {}\n{effective}", rec.header()))?;
            let mut outputs: Vec<Artifact> = [
                trainer::MODEL_CONFIG,
                trainer::MODEL_CHECKPOINT,
                "train_log.jsonl",
                "train.cfg",
            ]
            .iter()
            .map(|f| Artifact::of_file(&a.out.join(f)))
            .collect::<Result<_, _>>()?;
            for l in &outcome.logs {
                if let Some(c) = &l.checkpoint {
                    outputs.push(Artifact::of_file(&a.out.join(c))?);
                }
            }
            for l in &outcome.logs {
                w(writeln!(
                    out,
                    "epoch {:>3} lr {:.1e} loss {:.6}{}",
                    l.epoch,
                    l.lr,
                    l.loss.total,
                    l.valid_acer.map(|v| format!(" valid ACER {:.2}%", 100.0 * v)).unwrap_or_default()
                ))?;
            }
            rec.finish(&a.out.join(RUN_RECORD), outputs, started)?;
        }
        Command::Eval(a) => {
            let started = Instant::now();
            let model = Model::load_dir(&a.model)?;
            let mods = model.net.config().modalities.clone();
            let slots = match a.source {
                Some(src) => SlotMap::all_from(&mods, src),
                None => SlotMap::identity(&mods),
            };
            let inputs = vec![
                Artifact::of_file(&a.model.join(trainer::MODEL_CONFIG))?,
                Artifact::of_file(&a.model.join(trainer::MODEL_CHECKPOINT))?,
                Artifact::of_file(&a.entries)?,
            ];
            let settings = format!(
                "{}window = {}\nsource = {}\nsubprotocol = {}\n",
                model.net.config().to_kv().render(),
                a.window,
                a.source.map_or("", Modality::name),
                a.subprotocol.as_deref().unwrap_or("")
            );
            let rec = RunRecord::start(argv, &settings, None, inputs);
            let data = Dataset::load(
                &a.data,
                &read_manifest(&a.entries)?,
                &slots,
                model.net.spec().input_size,
                a.window,
            )?;
            let set = model.score_dataset(&data, a.subprotocol.as_deref())?;
            if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
            }
            let mut f = BufWriter::new(fs::File::create(&a.out).map_err(io_err(a.out.display().to_string()))?);
            metrics::write_scores(&mut f, &set, Some(&rec.header()))?;
            f.flush().map_err(io_err(a.out.display().to_string()))?;
            rec.finish(&sidecar(&a.out), vec![Artifact::of_file(&a.out)?], started)?;
            let report = metrics::evaluate(&set, a.threshold, ApcerMode::Pooled, &[1e-2, 1e-3, 1e-4])?;
            w(writeln!(
                out,
                "APCER {:.2}%  BPCER {:.2}%  ACER {:.2}%  AUC {:.4}  ({} bona fide, {} attack)",
                100.0 * report.rates.apcer,
                100.0 * report.rates.bpcer,
                100.0 * report.rates.acer,
                report.auc,
                report.bona_fide,
                report.attacks
            ))?;
            for (fpr, tpr) in &report.tpr_at {
                w(writeln!(out, "TPR@FPR={fpr:e} {:.2}%", 100.0 * tpr))?;
            }
        }
        Command::Report(a) => {
            let mode = if a.max_over_pai { ApcerMode::MaxOverPai } else { ApcerMode::Pooled };
            let mut rows: Vec<(String, Rates)> = Vec::new();
            for p in &a.scores {
                let f = fs::File::open(p).map_err(io_err(p.display().to_string()))?;
                let set = metrics::read_scores(f)?;
                let name = report_name(p, &set);
                rows.push((name, metrics::rates_at_with(&set, a.threshold, mode)?));
            }
            let text = match a.format {
                ReportFormat::Table => metrics::format_table(&rows)?,
                ReportFormat::Records => metrics::format_records(&rows)?,
                ReportFormat::Json => {
                    let agg = metrics::aggregate(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
                    let v = serde_json::json!({ "rows": rows, "aggregate": agg });
                    serde_json::to_string_pretty(&v)? + "\n"
                }
            };
            w(write!(out, "{text}"))?;
        }
        Command::Selftest(a) => {
            let results = selftest(a.seed);
            let mut ok = true;
            for (name, r) in &results {
                match r {
                    Ok(detail) => w(writeln!(out, "PASS {name}: {detail}"))?,
                    Err(detail) => {
                        ok = false;
                        w(writeln!(out, "FAIL {name}: {detail}"))?
                    }
                }
            }
            return Ok(if ok { 0 } else { EXIT_NUMERIC });
        }
        Command::Ablate(a) => {
            let started = Instant::now();
            let kv = a.config.load(&[])?;
            let (base, train_cfg) = parse_train_kv(&kv)?;
            let sets = a
                .modalities
                .iter()
                .map(|s| Modality::parse_set(s).ok_or_else(|| CliError::Usage(format!("bad modality set `{s}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            let plan = AblationPlan {
                branches: a.branches.clone(),
                modalities: sets,
                variants: a.variants.clone(),
            };
            let runs = plan.runs(&base);
            let union = runs
                .iter()
                .flat_map(|r| r.modalities.iter().copied())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect::<Vec<_>>();
            let mut inputs = config_inputs(&a.config)?;
            inputs.push(Artifact::of_file(&a.train)?);
            inputs.push(Artifact::of_file(&a.test)?);
            let effective = format!(
                "{}{}runs = {}\nthreshold = {}\n",
                base.to_kv().render(),
                train_cfg.to_kv().render(),
                runs.iter().map(|r| r.to_kv().render().replace('\n', ";")).collect::<Vec<_>>().join("|"),
                a.threshold
            );
            let rec = RunRecord::start(argv, &effective, Some(train_cfg.seed), inputs);
            let slots = SlotMap::identity(&union);
            let size = base.spec.input_size;
            let train_set = Dataset::load(&a.data, &read_manifest(&a.train)?, &slots, size, train_cfg.window)?;
            let test_set = Dataset::load(&a.data, &read_manifest(&a.test)?, &slots, size, train_cfg.window)?;
            let rows = run_ablation(&runs, &train_set, &test_set, &train_cfg, a.threshold);
            let table = format_ablation(&rows);
            fs::create_dir_all(&a.out).map_err(io_err(a.out.display().to_string()))?;
            let path = a.out.join("ablation.txt");
            write_text(&path, &format!("# {}\n{table}", rec.header()))?;
            rec.finish(&a.out.join(RUN_RECORD), vec![Artifact::of_file(&path)?], started)?;
            w(write!(out, "{table}"))?;
        }
    }
    Ok(0)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    }
    fs::write(path, text).map_err(io_err(path.display().to_string()))
}

fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(RUN_RECORD);
    file.with_file_name(name)
}

fn config_inputs(c: &ConfigArgs) -> Result<Vec<Artifact>, CliError> {
    c.config.as_deref().map(Artifact::of_file).into_iter().collect()
}

fn report_name(path: &Path, set: &ScoredSet) -> String {
    let groups = set.by_subprotocol();
    match groups.keys().next() {
        Some(k) if groups.len() == 1 && !k.is_empty() => k.clone(),
        _ => path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    }
}

/// Splits a combined config into network and training parts; unknown keys
/// are rejected.
pub fn parse_train_kv(kv: &KvMap) -> Result<(NetConfig, TrainConfig), CliError> {
    let known: Vec<&str> = NetConfig::keys().iter().chain(TrainConfig::keys()).copied().collect();
    kv.check_keys(&known)?;
    let net = NetConfig::from_kv(kv)?;
    let mut train = TrainConfig::default();
    train.apply_kv(kv)?;
    Ok((net, train))
}

/// Writes a `[C, H, W]` image min-max scaled to 8 bits (grey or RGB).
pub fn save_png(path: &Path, d: &Tensor) -> Result<(), CliError> {
    let (c, h, w) = match d.shape() {
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        s => return Err(CliError::Usage(format!("cannot export shape {s:?} as an image"))),
    };
    let bytes = &dynimg::to_display(d);
    let plane = h * w;
    let interleaved: Vec<u8> = (0..plane).flat_map(|i| (0..c).map(move |ch| bytes[ch * plane + i])).collect();
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    }
    image::save_buffer_with_format(path, &interleaved, w as u32, h as u32, color, image::ImageFormat::Png)?;
    Ok(())
}

/// Axes of an ablation matrix; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationPlan {
    pub branches: Vec<BranchMode>,
    pub modalities: Vec<Vec<Modality>>,
    pub variants: Vec<FusionVariant>,
}

impl AblationPlan {
    /// Cross product of the axes. Single-modality runs have no fusion, so
    /// their variant collapses to SD-Net and duplicates are dropped.
    pub fn runs(&self, base: &NetConfig) -> Vec<NetConfig> {
        let branches = if self.branches.is_empty() { vec![base.branches] } else { self.branches.clone() };
        let mods = if self.modalities.is_empty() {
            vec![base.modalities.clone()]
        } else {
            self.modalities.clone()
        };
        let variants = if self.variants.is_empty() { vec![base.variant] } else { self.variants.clone() };
        let mut out: Vec<NetConfig> = Vec::new();
        for m in &mods {
            for &v in &variants {
                for &b in &branches {
                    let variant = if m.len() == 1 { FusionVariant::SdnetOnly } else { v };
                    let cfg = NetConfig {
                        spec: base.spec.clone(),
                        variant,
                        modalities: m.clone(),
                        branches: b,
                    };
                    if !out.contains(&cfg) {
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: NetConfig,
    pub result: Result<Rates, String>,
}

/// Trains and scores every configuration on the same data and seed; a
/// failing run is recorded and the matrix continues.
pub fn run_ablation(
    runs: &[NetConfig],
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    threshold: f64,
) -> Vec<AblationRow> {
    runs.iter()
        .map(|net| {
            let result = (|| -> Result<Rates, CliError> {
                let tr = train_set.restrict(&net.modalities)?;
                let te = test_set.restrict(&net.modalities)?;
                let model = Model::init(net.clone(), cfg.seed)?;
                let outcome = trainer::train(model, &tr, None, cfg, &TrainOutput::default())?;
                let set = outcome.model.score_dataset(&te, None)?;
                Ok(metrics::rates_at(&set, threshold)?)
            })()
            .map_err(|e| e.to_string());
            AblationRow {
                config: net.clone(),
                result,
            }
        })
        .collect()
}

fn branch_label(b: BranchMode) -> &'static str {
    match b {
        BranchMode::Static => "S-Net",
        BranchMode::Dynamic => "D-Net",
        BranchMode::Both => "SD-Net",
    }
}

/// One row per run with APCER/BPCER/ACER columns in percent.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<8} {:<10} {:<11} {:>9} {:>9} {:>9}\n",
        "Branch", "Modality", "Fusion", "APCER(%)", "BPCER(%)", "ACER(%)"
    );
    for r in rows {
        let c = &r.config;
        let head = format!(
            "{:<8} {:<10} {:<11}",
            branch_label(c.branches),
            Modality::set_tag(&c.modalities).to_uppercase(),
            c.variant.as_str()
        );
        match &r.result {
            Ok(x) => s += &format!(
                "{head} {:>9.1} {:>9.1} {:>9.1}\n",
                100.0 * x.apcer,
                100.0 * x.bpcer,
                100.0 * x.acer
            ),
            Err(e) => s += &format!("{head} failed: {e}\n"),
        }
    }
    s
}

type Check = Result<String, String>;

/// Quick versions of the oracle, gradient, topology and metric checks.
pub fn selftest(seed: u64) -> Vec<(&'static str, Check)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(&'static str, Check)> = Vec::new();

    results.push(("rank-pool hand instance", {
        let v: Vec<Tensor> = [0.0, 0.5, 1.0].iter().map(|&x| Tensor::vector(vec![x])).collect();
        match RankPoolConfig::new(3).and_then(|c| dynimg::rank_pool_fit(&v, &c)) {
            Ok(d) if (d.d.data()[0] - 2.0 / 3.0).abs() <= 1e-3 => Ok(format!("d = {:.6}", d.d.data()[0])),
            Ok(d) => Err(format!("d = {}", d.d.data()[0])),
            Err(e) => Err(e.to_string()),
        }
    }));

    results.push(("rank-pool oracle", {
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for i in 0..10 {
            let k = [3, 5, 7][i % 3];
            let dim = 1 + i % 2;
            let frames: Vec<Tensor> = (0..k)
                .map(|_| Tensor::vector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let out = dynimg::prefix_mean(&frames).and_then(|v| {
                let fit = dynimg::rank_pool_fit(&v, &RankPoolConfig::new(k)?)?;
                let oracle = dynimg::rank_pool_oracle(&v)?;
                Ok((fit, oracle))
            });
            match out {
                Ok((fit, oracle)) => {
                    for (a, b) in fit.d.data().iter().zip(oracle.d.data()) {
                        worst = worst.max((a - b).abs());
                    }
                }
                Err(e) => failure = Some(e.to_string()),
            }
        }
        match failure {
            Some(e) => Err(e),
            None if worst <= 1e-3 => Ok(format!("max deviation {worst:.2e}")),
            None => Err(format!("max deviation {worst:.2e}")),
        }
    }));

    let spec = BackboneSpec::tiny();
    let size = spec.input_size;
    let input = |mods: &[Modality], rng: &mut rand_chacha::ChaCha8Rng| {
        let mut inp = SampleInput::new();
        for &m in mods {
            let shape = [m.channels(), size, size];
            let n: usize = shape.iter().product();
            let mut r = || Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (s, d) = (r(), r());
            inp.insert(m, s, d);
        }
        inp
    };
    for (name, mods, variant, zero_loss) in [
        ("sd-net", vec![Modality::Color], FusionVariant::SdnetOnly, 4.0),
        ("psmm-net", Modality::ALL.to_vec(), FusionVariant::Psmm, 13.0),
    ] {
        let inp = input(&mods, &mut rng);
        let cfg = NetConfig {
            spec: spec.clone(),
            variant,
            modalities: mods,
            branches: BranchMode::Both,
        };
        let check = Network::new(cfg).map_err(|e| e.to_string()).and_then(|net| {
            let zero = net.init_params(InitConfig::new(seed));
            let (loss, _) = net.loss_and_grads(&zero, &inp, 1).map_err(|e| e.to_string())?;
            let expect = zero_loss * std::f64::consts::LN_2;
            if (loss.total - expect).abs() > 1e-12 {
                return Err(format!("zero-head loss {} != {expect}", loss.total));
            }
            let params = net.init_params(InitConfig::generic(seed));
            let rep = net.grad_check(&params, &inp, 1, 1e-5).map_err(|e| e.to_string())?;
            if rep.max_rel_error <= 1e-4 {
                Ok(format!("grad check max rel error {:.2e}", rep.max_rel_error))
            } else {
                Err(format!("grad check max rel error {:.2e} at {}", rep.max_rel_error, rep.param))
            }
        });
        results.push((name, check));
    }

    results.push(("metrics", {
        let set = ScoredSet::from_scores(&[0.9, 0.8, 0.3], &[0.1, 0.6, 0.2, 0.4]);
        match (metrics::rates_at(&set, 0.5), metrics::roc(&set)) {
            (Ok(r), Ok(c)) => {
                let first = c.points.first().map(|p| (p.fpr, p.tpr));
                let last = c.points.last().map(|p| (p.fpr, p.tpr));
                if r.acer == (r.apcer + r.bpcer) / 2.0 && first == Some((0.0, 0.0)) && last == Some((1.0, 1.0)) {
                    Ok(format!("ACER {:.4}, AUC {:.4}", r.acer, c.auc()))
                } else {
                    Err("ROC endpoints or ACER identity violated".into())
                }
            }
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        }
    }));

    results.push(("protocol counts", {
        let manifest = datasyn::synth_manifest(&SynthConfig::canonical());
        let id: SubProtocol = "1_1".parse().expect("valid id");
        match build_split(&manifest, id, SplitOptions::default()) {
            Ok(split) => {
                let c = split.counts_2d(Subset::Train);
                if (c.real, c.fake) == (600, 1800) && validate_split(&split).is_ok() {
                    Ok("1_1 train 600 / 1800".into())
                } else {
                    Err(format!("1_1 train {} / {}", c.real, c.fake))
                }
            }
            Err(e) => Err(e.to_string()),
        }
    }));
    results
}
