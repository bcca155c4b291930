//! The `stare` command line: simulate → tokenize → train → eval → analyze.
//!
//! Every subcommand writes a `manifest.json` into its output directory with
//! the effective configuration, its hash, input file digests and timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, AccuracyRow, AnalysisError, PredictionMatrix, Projection, TsneConfig};
use crate::baselines::{LstmModel, RecurrentConfig};
use crate::model::{
    argmax, mlm_counts, train_classifier, train_mlm, write_metric_log, EncoderModel, ModelConfig, ModelError,
    SequenceClassifier, Task, TrainConfig, TrainReport, MODEL_TYPE,
};
use crate::nn::{Checkpoint, NnError};
use crate::sim::{self, SimConfig, SimError, WorldConfig};
use crate::traj::{self, LabelKind, TokenSequence, TokenizeConfig, TrajError, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.json";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const LABEL_NAMES_FILE: &str = "label_names.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("task/label mismatch: {0}")]
    TaskMismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Schema(_) => 3,
            CliError::TaskMismatch(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingFile(_) => "missing_file",
            CliError::Schema(_) => "schema",
            CliError::TaskMismatch(_) => "task_mismatch",
            CliError::Other(_) => "error",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string()}).to_string()
    }
}

impl From<TrajError> for CliError {
    fn from(e: TrajError) -> Self {
        match e {
            TrajError::MissingColumn(_) | TrajError::Dataset(_) | TrajError::Vocabulary(_) | TrajError::Json(_) => {
                CliError::Schema(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) | SimError::Json(_) => CliError::Schema(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_)
            | ModelError::Checkpoint(_)
            | ModelError::UnknownToken { .. }
            | ModelError::BadLength { .. } => CliError::Schema(e.to_string()),
            ModelError::Nn(NnError::Checkpoint(_)) => CliError::Schema(e.to_string()),
            ModelError::LabelOutOfRange { .. } | ModelError::SingleClass | ModelError::WrongTask(_) => {
                CliError::TaskMismatch(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(m) => m.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "stare", version, about = "Trajectory tokenization, encoder training and relationship analysis")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory dataset.
    Simulate(SimulateArgs),
    /// Turn a trajectory CSV into token sequences and a vocabulary.
    Tokenize(TokenizeArgs),
    /// Train a model on a tokenized dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a tokenized dataset.
    Eval(EvalArgs),
    /// Prediction matrices, blocks, clusters, projections and heatmaps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream in the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if needed).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset size preset: S, M, L or XL (XL runs for hours).
    #[arg(long, default_value = "S")]
    pub preset: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelArg {
    Agent,
    Subpop,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trajectory CSV with agent_id, timestamp, lat, lon columns.
    #[arg(long)]
    pub input: PathBuf,
    /// agent_id → subpopulation JSON map; required for subpop labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "agent")]
    pub label_kind: LabelArg,
    /// Reuse an existing vocabulary instead of building one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Agent,
    Subpop,
    Mlm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Stare,
    Lstm,
    Bilstm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `tokenize`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value = "stare")]
    pub model: ModelArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split file from `train`; defaults to the one next to the checkpoint,
    /// and to the whole dataset when there is none.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalysisArg {
    Matrix,
    Blocks,
    Clusters,
    Projection,
    Heatmap,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Comma-separated list of analyses.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "matrix,blocks,clusters,heatmap")]
    pub analyses: Vec<AnalysisArg>,
    /// Simulator agent → subpopulation map, used to order agent matrices
    /// and score blocks.
    #[arg(long)]
    pub sim_labels: Option<PathBuf>,
}

/// Settings read from `train --config`. Vocabulary-dependent fields of the
/// model configs (sizes, special ids, task, class count) are always taken
/// from the dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub encoder: ModelConfig,
    pub recurrent: RecurrentConfig,
    pub train: TrainConfig,
}

/// Settings read from `analyze --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSettings {
    pub block_threshold: f64,
    pub n_clusters: usize,
    pub min_masked: usize,
    pub mask_repeats: usize,
    pub projection: Projection,
    pub tsne: TsneConfig,
    pub heatmap_cell_px: usize,
    pub seed: u64,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        Self {
            block_threshold: analysis::DEFAULT_BLOCK_THRESHOLD,
            n_clusters: 4,
            min_masked: analysis::DEFAULT_MIN_MASKED,
            mask_repeats: 10,
            projection: Projection::Pca,
            tsne: TsneConfig::default(),
            heatmap_cell_px: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub timings_ms: BTreeMap<String, u128>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the compact JSON form; keys of `serde_json::Value` maps are
/// sorted, so equal configs hash equally.
pub fn config_hash(config: &Value) -> String {
    hex(&Sha256::digest(config.to_string().as_bytes()))
}

fn digest(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = fs::read(path)?;
    Ok(InputDigest { path: path.to_path_buf(), sha256: hex(&Sha256::digest(&bytes)) })
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn read_config(path: Option<&Path>) -> Result<Value, CliError> {
    match path {
        None => Ok(json!({})),
        Some(p) => {
            require(p)?;
            let text = fs::read_to_string(p)?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(CliError::Schema(format!("{}: expected a JSON object", p.display())));
            }
            Ok(v)
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Schema(format!("{what} config: {e}")))
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config types serialize")
}

struct Run {
    command: &'static str,
    out: PathBuf,
    start: Instant,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        Ok(Self { command, out: out.to_path_buf(), start: Instant::now(), inputs: Vec::new(), outputs: Vec::new() })
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        require(path)?;
        self.inputs.push(digest(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self, seed: u64, config: Value) -> Result<RunManifest, CliError> {
        let mut timings_ms = BTreeMap::new();
        timings_ms.insert("total".to_string(), self.start.elapsed().as_millis());
        let m = RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: config_hash(&config),
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            timings_ms,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Other(e.to_string()))?;
        fs::write(self.out.join(MANIFEST_FILE), text)?;
        Ok(m)
    }
}

pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

pub fn cmd_simulate(a: SimulateArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::new("simulate", &a.common.out)?;
    let raw = read_config(a.common.config.as_deref())?;
    if let Some(p) = &a.common.config {
        run.input(p)?;
    }
    let base = SimConfig::preset(&a.preset)
        .ok_or_else(|| CliError::Schema(format!("unknown preset {:?}; expected S, M, L or XL", a.preset)))?;
    let has_world = raw.get("world").is_some();
    let mut merged = to_value(&base);
    merge(&mut merged, raw);
    let mut cfg: SimConfig = parse(merged, "simulation")?;
    if !has_world {
        cfg.world = WorldConfig::for_population(cfg.n_subpops, cfg.n_agents);
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let out = sim::simulate_all(&cfg)?;
    let csv = run.output(sim::CSV_NAME);
    let labels = run.output(sim::LABELS_NAME);
    sim::write_csv(&csv, &out.trajectories)?;
    sim::write_labels(&labels, &out.labels)?;
    info!("simulated {} agents over {} days", cfg.n_agents, cfg.n_days);
    run.finish(cfg.seed, to_value(&cfg))
}

/// Overlays the keys of `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

pub fn cmd_tokenize(a: TokenizeArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::new("tokenize", &a.common.out)?;
    let raw = read_config(a.common.config.as_deref())?;
    if let Some(p) = &a.common.config {
        run.input(p)?;
    }
    let cfg: TokenizeConfig = parse(raw, "tokenize")?;
    run.input(&a.input)?;
    let kind = match a.label_kind {
        LabelArg::Agent => LabelKind::Agent,
        LabelArg::Subpop => LabelKind::Subpop,
    };
    let subpops = match &a.labels {
        Some(p) => {
            run.input(p)?;
            Some(sim::read_labels(p)?)
        }
        None if kind == LabelKind::Subpop => {
            return Err(CliError::TaskMismatch("subpopulation labels need --labels".into()));
        }
        None => None,
    };
    let report = traj::ingest_csv(&a.input)?;
    let corpus = match &a.vocab {
        Some(p) => {
            run.input(p)?;
            let vocab = Vocabulary::load(p)?;
            traj::tokenize_with_vocab(&report.trajectories, &cfg, &vocab, kind, subpops.as_ref())?
        }
        None => traj::tokenize_corpus(&report.trajectories, &cfg, kind, subpops.as_ref())?,
    };
    corpus.vocab.save(&run.output(VOCAB_FILE))?;
    traj::write_dataset(&run.output(TOKENS_FILE), &corpus.sequences, kind)?;
    let names = serde_json::to_string_pretty(&corpus.label_names).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(run.output(LABEL_NAMES_FILE), names)?;
    info!("{} sequences, vocabulary of {}", corpus.sequences.len(), corpus.vocab.size());
    run.finish(a.common.seed.unwrap_or(0), json!({"tokenize": to_value(&cfg), "label_kind": kind}))
}

/// A tokenized dataset directory.
pub struct Dataset {
    pub vocab: Vocabulary,
    pub sequences: Vec<TokenSequence>,
    pub label_kind: LabelKind,
    pub label_names: Vec<String>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let (vp, tp, np) = (dir.join(VOCAB_FILE), dir.join(TOKENS_FILE), dir.join(LABEL_NAMES_FILE));
    for p in [&vp, &tp, &np] {
        require(p)?;
    }
    let vocab = Vocabulary::load(&vp)?;
    let (sequences, label_kind) = traj::read_dataset(&tp, &vocab)?;
    let label_names: Vec<String> = serde_json::from_str(&fs::read_to_string(&np)?)
        .map_err(|e| CliError::Schema(format!("{}: {e}", np.display())))?;
    if let Some(s) = sequences.iter().find(|s| s.label >= label_names.len()) {
        return Err(CliError::Schema(format!("label {} has no name ({} names)", s.label, label_names.len())));
    }
    Ok(Dataset { vocab, sequences, label_kind, label_names })
}

fn dataset_inputs(run: &mut Run, dir: &Path) -> Result<(), CliError> {
    for f in [VOCAB_FILE, TOKENS_FILE, LABEL_NAMES_FILE] {
        run.input(&dir.join(f))?;
    }
    Ok(())
}

fn check_task(task: TaskArg, kind: LabelKind) -> Result<(), CliError> {
    match (task, kind) {
        (TaskArg::Agent, LabelKind::Subpop) | (TaskArg::Subpop, LabelKind::Agent) => {
            Err(CliError::TaskMismatch(format!("task {task:?} on a dataset labelled by {kind:?}")))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

pub fn cmd_train(a: TrainArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::new("train", &a.common.out)?;
    let raw = read_config(a.common.config.as_deref())?;
    if let Some(p) = &a.common.config {
        run.input(p)?;
    }
    let mut settings: TrainSettings = parse(raw, "train")?;
    dataset_inputs(&mut run, &a.data)?;
    let data = load_dataset(&a.data)?;
    check_task(a.task, data.label_kind)?;
    if a.task == TaskArg::Mlm && a.model != ModelArg::Stare {
        return Err(CliError::TaskMismatch("masked location modeling needs the stare model".into()));
    }
    if let Some(s) = a.common.seed {
        settings.train.seed = s;
        settings.encoder.seed = s;
        settings.recurrent.seed = s;
    }
    if let Some(e) = a.epochs {
        settings.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        settings.train.adam.lr = lr;
    }
    let n_classes = data.label_names.len();
    let tc = settings.train.clone();
    let (report, ck): (TrainReport, Checkpoint) = match a.model {
        ModelArg::Stare => {
            let task = if a.task == TaskArg::Mlm { Task::Mlm } else { Task::Classification };
            let base = ModelConfig::for_vocab(&data.vocab, task, n_classes);
            let cfg = ModelConfig {
                task,
                n_classes: base.n_classes,
                vocab_size: base.vocab_size,
                pad_id: base.pad_id,
                mask_id: base.mask_id,
                max_len: base.max_len,
                ..settings.encoder.clone()
            };
            settings.encoder = cfg.clone();
            let mut m = EncoderModel::new(cfg)?;
            let rep = if task == Task::Mlm {
                train_mlm(&mut m, &data.sequences, &tc)?
            } else {
                train_classifier(&mut m, &data.sequences, &tc)?
            };
            (rep, m.to_checkpoint()?)
        }
        ModelArg::Lstm | ModelArg::Bilstm => {
            let base = RecurrentConfig::for_vocab(&data.vocab, n_classes, a.model == ModelArg::Bilstm);
            let cfg = RecurrentConfig {
                n_classes: base.n_classes,
                vocab_size: base.vocab_size,
                pad_id: base.pad_id,
                bidirectional: base.bidirectional,
                ..settings.recurrent.clone()
            };
            settings.recurrent = cfg.clone();
            let mut m = LstmModel::new(cfg)?;
            let rep = train_classifier(&mut m, &data.sequences, &tc)?;
            (rep, m.to_checkpoint()?)
        }
    };
    ck.save(&run.output(CHECKPOINT_FILE)).map_err(ModelError::from)?;
    write_metric_log(&run.output(METRICS_FILE), &report.log)?;
    let split = SplitFile { train_idx: report.train_idx.clone(), test_idx: report.test_idx.clone() };
    fs::write(run.output(SPLIT_FILE), serde_json::to_string(&split).map_err(|e| CliError::Other(e.to_string()))?)?;
    info!("best test score {:.4} at epoch {}", report.best_test_acc, report.best_epoch);
    let config = json!({"task": a.task, "model": a.model, "settings": to_value(&settings)});
    run.finish(settings.train.seed, config)
}

/// A checkpoint loaded as whichever model it holds.
pub enum LoadedModel {
    Stare(EncoderModel),
    Recurrent(LstmModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        require(path)?;
        let ck = Checkpoint::load(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        match ck.model_type.as_str() {
            MODEL_TYPE => Ok(LoadedModel::Stare(EncoderModel::from_checkpoint(&ck)?)),
            "lstm" | "bilstm" => Ok(LoadedModel::Recurrent(LstmModel::from_checkpoint(&ck)?)),
            other => Err(CliError::Schema(format!("unknown model type {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoadedModel::Stare(_) => MODEL_TYPE,
            LoadedModel::Recurrent(m) => m.config().model_type(),
        }
    }

    pub fn is_mlm(&self) -> bool {
        matches!(self, LoadedModel::Stare(m) if m.config().task == Task::Mlm)
    }

    fn classifier(&self) -> &dyn ClassifierRef {
        match self {
            LoadedModel::Stare(m) => m,
            LoadedModel::Recurrent(m) => m,
        }
    }
}

/// Object-safe view of the classifiers for the eval and analyze paths.
trait ClassifierRef {
    fn n_classes(&self) -> usize;
    fn proba(&self, batch: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError>;
}

impl<M: SequenceClassifier> ClassifierRef for M {
    fn n_classes(&self) -> usize {
        SequenceClassifier::n_classes(self)
    }
    fn proba(&self, batch: &[&[u32]]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.predict_proba(batch)
    }
}

fn test_subset<'a>(
    run: &mut Run,
    data: &'a Dataset,
    split: Option<&Path>,
    checkpoint: &Path,
) -> Result<Vec<&'a TokenSequence>, CliError> {
    let default = checkpoint.parent().map(|d| d.join(SPLIT_FILE));
    let path = match (split, default) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) if d.exists() => Some(d),
        _ => None,
    };
    let Some(path) = path else {
        return Ok(data.sequences.iter().collect());
    };
    run.input(&path)?;
    let s: SplitFile = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    s.test_idx
        .iter()
        .map(|&i| {
            data.sequences.get(i).ok_or_else(|| {
                CliError::Schema(format!("split index {i} outside a dataset of {}", data.sequences.len()))
            })
        })
        .collect()
}

fn check_model_matches(model: &LoadedModel, data: &Dataset) -> Result<(), CliError> {
    if !model.is_mlm() && model.classifier().n_classes() != data.label_names.len() {
        return Err(CliError::TaskMismatch(format!(
            "checkpoint has {} classes, dataset {} labels",
            model.classifier().n_classes(),
            data.label_names.len()
        )));
    }
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::new("eval", &a.common.out)?;
    run.input(&a.checkpoint)?;
    dataset_inputs(&mut run, &a.data)?;
    let model = LoadedModel::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    check_model_matches(&model, &data)?;
    let test = test_subset(&mut run, &data, a.split.as_deref(), &a.checkpoint)?;
    let seed = a.common.seed.unwrap_or(0);
    let row = match &model {
        LoadedModel::Stare(m) if model.is_mlm() => {
            let (correct, total) = mlm_counts(m, &test, 128, seed)?;
            AccuracyRow {
                model: model.name().into(),
                task: "mlm".into(),
                correct,
                total,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            }
        }
        _ => {
            let c = model.classifier();
            let mut predicted = Vec::with_capacity(test.len());
            for part in test.chunks(128) {
                let toks: Vec<&[u32]> = part.iter().map(|s| s.tokens.as_slice()).collect();
                predicted.extend(c.proba(&toks)?.iter().map(|p| argmax(p)));
            }
            let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
            let task = match data.label_kind {
                LabelKind::Agent => "agent",
                LabelKind::Subpop => "subpop",
            };
            AccuracyRow::new(model.name(), task, &predicted, &truth)
        }
    };
    println!("{},{},{:.6}", row.model, row.task, row.accuracy);
    analysis::write_accuracy_report(&run.output(REPORT_FILE), &[row])?;
    run.finish(seed, json!({"eval_seed": seed}))
}

fn matrix_for(
    model: &LoadedModel,
    data: &Dataset,
    test: &[&TokenSequence],
    s: &AnalyzeSettings,
) -> Result<PredictionMatrix, CliError> {
    Ok(match model {
        LoadedModel::Stare(m) if model.is_mlm() => {
            analysis::location_prediction_matrix(m, &data.vocab, test, s.mask_repeats, s.min_masked, s.seed)?
        }
        LoadedModel::Stare(m) => analysis::prediction_matrix(m, test, 128)?,
        LoadedModel::Recurrent(m) => analysis::prediction_matrix(m, test, 128)?,
    })
}

pub fn cmd_analyze(a: AnalyzeArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::new("analyze", &a.common.out)?;
    let raw = read_config(a.common.config.as_deref())?;
    if let Some(p) = &a.common.config {
        run.input(p)?;
    }
    let mut s: AnalyzeSettings = parse(raw, "analyze")?;
    if let Some(seed) = a.common.seed {
        s.seed = seed;
        s.tsne.seed = seed;
    }
    run.input(&a.checkpoint)?;
    dataset_inputs(&mut run, &a.data)?;
    let model = LoadedModel::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    check_model_matches(&model, &data)?;
    let test = test_subset(&mut run, &data, a.split.as_deref(), &a.checkpoint)?;
    let sim_labels = match &a.sim_labels {
        Some(p) => {
            run.input(p)?;
            Some(sim::read_labels(p)?)
        }
        None => None,
    };
    let location = model.is_mlm();
    let name = |l: usize| -> String {
        if location {
            data.vocab.token_cell(l as u32).map_or_else(|| l.to_string(), |c| format!("{}/{}", c.zoom, c.index))
        } else {
            data.label_names[l].clone()
        }
    };
    // subpopulation of an agent label, when known
    let subpop_of = |l: usize| -> Option<u32> {
        if location || data.label_kind != LabelKind::Agent {
            return None;
        }
        sim_labels.as_ref()?.get(&data.label_names[l]).copied()
    };

    let needs_matrix = a
        .analyses
        .iter()
        .any(|x| matches!(x, AnalysisArg::Matrix | AnalysisArg::Blocks | AnalysisArg::Clusters | AnalysisArg::Heatmap));
    let mut matrix = if needs_matrix { Some(matrix_for(&model, &data, &test, &s)?) } else { None };
    if let Some(p) = &matrix {
        if sim_labels.is_some() && !location {
            matrix = Some(p.permuted_by(|l| subpop_of(l).map_or(u64::MAX, u64::from)));
        }
    }

    for analysis_kind in &a.analyses {
        match analysis_kind {
            AnalysisArg::Matrix => {
                let p = matrix.as_ref().expect("built above");
                p.write_csv(&run.output("prediction_matrix.csv"), &name)?;
            }
            AnalysisArg::Heatmap => {
                let p = matrix.as_ref().expect("built above");
                analysis::heatmap_png(&p.values, s.heatmap_cell_px, &run.output("heatmap.png"))?;
            }
            AnalysisArg::Blocks => {
                let p = matrix.as_ref().expect("built above");
                let blocks = analysis::misclassification_blocks(p, s.block_threshold);
                let agreement = analysis::grouped_pair_agreement(
                    &blocks,
                    |x, y| matches!((subpop_of(x), subpop_of(y)), (Some(u), Some(v)) if u == v),
                );
                let named: Vec<Vec<String>> = blocks.iter().map(|g| g.iter().map(|&l| name(l)).collect()).collect();
                let v = json!({
                    "threshold": s.block_threshold,
                    "blocks": named,
                    "same_subpop_pair_fraction": if sim_labels.is_some() { agreement } else { None },
                });
                write_json(&run.output("blocks.json"), &v)?;
            }
            AnalysisArg::Clusters => {
                let p = matrix.as_ref().expect("built above");
                let c = analysis::spectral_cluster(p, s.n_clusters, s.seed)?;
                let assignments: BTreeMap<String, usize> =
                    c.items.iter().zip(&c.clusters).map(|(&i, &k)| (name(i), k)).collect();
                let purity = if sim_labels.is_some() && !location {
                    Some(analysis::purity(&c, |l| subpop_of(l).map_or(usize::MAX, |v| v as usize)))
                } else {
                    None
                };
                write_json(
                    &run.output("clusters.json"),
                    &json!({"k": c.k, "assignments": assignments, "purity": purity}),
                )?;
            }
            AnalysisArg::Projection => {
                let LoadedModel::Stare(m) = &model else {
                    return Err(CliError::TaskMismatch("projections need a stare checkpoint".into()));
                };
                let toks: Vec<&[u32]> = test.iter().map(|t| t.tokens.as_slice()).collect();
                let emb = m.embeddings(&toks, 128)?;
                let xy = analysis::project_2d(&emb, s.projection, &s.tsne)?;
                let mut w = csv::Writer::from_path(run.output("projection.csv")).map_err(AnalysisError::from)?;
                w.write_record(["agent_id", "window", "label", "x", "y"]).map_err(AnalysisError::from)?;
                for (t, p) in test.iter().zip(&xy) {
                    w.write_record([
                        t.agent_id.clone(),
                        t.m.to_string(),
                        data.label_names[t.label].clone(),
                        p[0].to_string(),
                        p[1].to_string(),
                    ])
                    .map_err(AnalysisError::from)?;
                }
                w.flush()?;
            }
        }
    }
    let config = json!({
        "analyses": a.analyses.iter().map(|x| format!("{x:?}").to_lowercase()).collect::<Vec<_>>(),
        "settings": to_value(&s),
    });
    run.finish(s.seed, config)
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(v).map_err(|e| CliError::Other(e.to_string()))?)?;
    Ok(())
}
