//! The `presslm` command line: data synthesis, corpus construction, training,
//! inference, evaluation and the gradient check, behind one binary.
//!
//! Settings resolve as defaults < profile < `--config` JSON < flags. Exit codes
//! are 0 on success, 1 on runtime failure and 2 on usage errors or missing
//! input files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::clients::{EmbeddingProvider, HashEmbedding, HttpClient, JudgeClient, StubJudge, StubTextGen, TextGenClient};
use crate::dataset::{self, Clients, PipelineConfig, SampleSpec};
use crate::error::{Error, ParseError, Result};
use crate::gradcheck;
use crate::metrics::{self, EvalPair, MetricSelection};
use crate::model::{DecodeMode, ModelConfig, SitModel};
use crate::pressure::{self, compute_stats, load_pressure_map, MapFormat, SensorGeometry};
use crate::prompt::{TaskInstruction, TaskType};
use crate::rng;
use crate::synth;
use crate::train::{self, PretrainConfig, Profile, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const MODEL_FILE: &str = "model.plmc";
const BACKBONE_FILE: &str = "backbone.plmc";
const MANIFEST_FILE: &str = "manifest.json";
const REPORT_FILE: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "presslm", version, about = "Seat pressure maps to text with a small adapted language model")]
pub struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hyperparameter profile: desk or paper.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    /// JSON file overriding any part of the resolved configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Sensor geometry sidecar (JSON) overriding the configured geometry.
    #[arg(long, global = true)]
    pub geometry: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic pressure maps, template annotations, a manifest and a knowledge base.
    SynthData(SynthDataArgs),
    /// Build a scored instruction corpus from a manifest and a knowledge base.
    BuildDataset(BuildDatasetArgs),
    /// Pretrain (or load) the backbone, then fine-tune on a corpus.
    Train(TrainArgs),
    /// Answer one instruction about one pressure map.
    Infer(InferArgs),
    /// Score predictions, or generate them from a checkpoint first.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences for every layer type.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    /// Number of maps.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Knowledge-base records to write alongside the maps.
    #[arg(long, default_value_t = 24)]
    pub kb_records: usize,
    /// Store maps as raw little-endian binary instead of CSV.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    /// JSONL manifest written by synth-data.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSONL knowledge base of {"instruction", "answer"} records.
    #[arg(long)]
    pub kb: PathBuf,
    /// Output corpus (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Task types, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<TaskType>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSONL corpus; map paths are relative to its directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for the checkpoint, manifest and report.
    #[arg(long)]
    pub out: PathBuf,
    /// Only keep corpus lines of these task types (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<TaskType>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub accum: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lora_r: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Start from this backbone checkpoint instead of pretraining.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Backbone pretraining steps; 0 skips pretraining.
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pressure map (CSV, or binary with a .pmap/.bin extension).
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value = "description")]
    pub task: TaskType,
    /// Instruction text; defaults to the task's first stock instruction.
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long, default_value_t = 160)]
    pub max_new_tokens: usize,
    /// Sample from the k most likely bytes instead of decoding greedily.
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSONL of {"id", "task_type", "candidate", "reference"}.
    #[arg(long, conflicts_with_all = ["checkpoint", "corpus"])]
    pub predictions: Option<PathBuf>,
    /// Directory written by `train`; requires --corpus.
    #[arg(long, requires = "corpus")]
    pub checkpoint: Option<PathBuf>,
    /// Corpus whose answers serve as references; requires --checkpoint.
    #[arg(long, requires = "checkpoint")]
    pub corpus: Option<PathBuf>,
    /// Only evaluate these task types (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<TaskType>,
    #[arg(long, default_value_t = 160)]
    pub max_new_tokens: usize,
    /// Also write generated predictions here.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Imported human ratings, CSV "id,score".
    #[arg(long)]
    pub human: Option<PathBuf>,
    /// Add the judge score column.
    #[arg(long)]
    pub judge: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Write per-check results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Everything a run needs besides its subcommand arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            seed: 0,
            profile,
            model: ModelConfig::for_profile(profile),
            train: TrainConfig::for_profile(profile),
            pretrain: PretrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// Layers `overrides` onto this configuration key by key.
    pub fn merged(&self, overrides: serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, overrides);
        Ok(serde_json::from_value(base)?)
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `args` and runs the command, writing normal output to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    match run(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingInput(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::for_profile(cli.profile.unwrap_or_default());
    if let Some(path) = &cli.config {
        let v: serde_json::Value = serde_json::from_str(&read_to_string(path)?)?;
        cfg = cfg.merged(v)?;
    }
    if let Some(p) = cli.profile {
        cfg.profile = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(path) = &cli.geometry {
        cfg.model.geometry = SensorGeometry::from_json(&read_to_string(path)?)?;
    }
    cfg.train.seed = cfg.seed;
    cfg.pretrain.seed = cfg.seed;
    Ok(cfg)
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::SynthData(a) => cmd_synth_data(&cfg, a, out),
        Command::BuildDataset(a) => cmd_build_dataset(&mut cfg, a, out, err),
        Command::Train(a) => cmd_train(&mut cfg, a, out),
        Command::Infer(a) => cmd_infer(&cfg, cli.geometry.is_some(), a, out),
        Command::Eval(a) => cmd_eval(&cfg, cli.geometry.is_some(), a, out, err),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a, out),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    require(path)?;
    Ok(fs::read_to_string(path)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    require(path)?;
    Ok(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_map(path: &Path, geometry: &SensorGeometry) -> Result<pressure::PressureMap> {
    load_pressure_map(open(path)?, MapFormat::from_path(path), geometry)
}

/// One manifest line per synthetic map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pressure_file: String,
    pub description: String,
    pub posture: String,
}

fn cmd_synth_data(cfg: &RunConfig, a: &SynthDataArgs, out: &mut dyn Write) -> Result<i32> {
    let geometry = &cfg.model.geometry;
    geometry.validate()?;
    let maps_dir = a.out.join("maps");
    fs::create_dir_all(&maps_dir)?;
    fs::write(a.out.join("geometry.json"), serde_json::to_string_pretty(geometry)? + "\n")?;
    let mut manifest = create(&a.out.join("manifest.jsonl"))?;
    for i in 0..a.count {
        let mut r = rng::stream(cfg.seed, &[0x5344, i as u64]);
        let spec = pressure::random_posture(geometry, &mut r);
        let map = pressure::synth_posture(&spec, geometry, rng::derive_seed(cfg.seed, &[0x534d, i as u64]))?;
        let stats = compute_stats(&map);
        let description = pressure::template_annotation(&map, &stats, Some(&spec.posture_label));
        let name = format!("map_{i:05}.{}", if a.binary { "pmap" } else { "csv" });
        let file = create(&maps_dir.join(&name))?;
        if a.binary {
            pressure::write_binary(file, &map, geometry)?;
        } else {
            pressure::write_csv(file, &map, geometry)?;
        }
        fs::write(maps_dir.join(format!("map_{i:05}.txt")), format!("{description}\n"))?;
        let entry = ManifestEntry {
            pressure_file: format!("maps/{name}"),
            description,
            posture: spec.posture_label,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    let mut kb = create(&a.out.join("kb.jsonl"))?;
    for rec in synth::knowledge_corpus(a.kb_records, rng::derive_seed(cfg.seed, &[0x4b42])) {
        serde_json::to_writer(&mut kb, &rec)?;
        kb.write_all(b"\n")?;
    }
    kb.flush()?;
    writeln!(out, "wrote {} maps and {} knowledge records to {}", a.count, a.kb_records, a.out.display())?;
    Ok(EXIT_OK)
}

fn read_manifest(path: &Path) -> Result<Vec<SampleSpec>> {
    let mut specs = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: SampleSpec = serde_json::from_str(&line).map_err(|e| ParseError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        specs.push(spec);
    }
    Ok(specs)
}

/// Rewrites a manifest-relative map path so it resolves from `target_dir`.
fn rebase(file: &str, from_dir: &Path, target_dir: &Path) -> Result<String> {
    let p = Path::new(file);
    if p.is_absolute() {
        return Ok(file.to_string());
    }
    let same = match (fs::canonicalize(from_dir.join(".")), fs::canonicalize(target_dir.join("."))) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Ok(file.to_string());
    }
    Ok(fs::canonicalize(from_dir.join(p))?.to_string_lossy().into_owned())
}

fn cmd_build_dataset(cfg: &mut RunConfig, a: &BuildDatasetArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    require(&a.manifest)?;
    require(&a.kb)?;
    let p = &mut cfg.pipeline;
    p.k = a.k.unwrap_or(p.k);
    p.m = a.m.unwrap_or(p.m);
    p.n_candidates = a.candidates.unwrap_or(p.n_candidates);
    p.alpha = a.alpha.unwrap_or(p.alpha);
    p.beta = a.beta.unwrap_or(p.beta);
    p.max_in_flight = a.max_in_flight.unwrap_or(p.max_in_flight);
    p.validate()?;
    let tasks = if a.tasks.is_empty() { TaskType::ALL.to_vec() } else { a.tasks.clone() };

    let embed = HashEmbedding::default();
    let remote = HttpClient::from_env();
    let (textgen, judge): (&dyn TextGenClient, &dyn JudgeClient) = match &remote {
        Some(h) => (h, h),
        None => (&StubTextGen, &StubJudge),
    };
    let kb = dataset::build_kb(open(&a.kb)?, &embed)?;
    let mut specs = read_manifest(&a.manifest)?;
    let from_dir = parent_dir(&a.manifest);
    let out_dir = parent_dir(&a.out);
    if !out_dir.as_os_str().is_empty() {
        fs::create_dir_all(&out_dir)?;
    }
    for s in &mut specs {
        s.pressure_file = rebase(&s.pressure_file, &from_dir, &out_dir)?;
    }
    let clients = Clients {
        textgen,
        judge,
        embed: &embed,
    };
    let (samples, report) = dataset::build_corpus(&specs, &tasks, &kb, clients, &cfg.pipeline, cfg.seed)?;
    let mut w = create(&a.out)?;
    dataset::write_corpus(&mut w, &samples)?;
    w.flush()?;
    for f in &report.failures {
        writeln!(err, "skipped: {f}")?;
    }
    for warning in &report.warnings {
        writeln!(err, "warning: {warning}")?;
    }
    writeln!(
        out,
        "wrote {} samples to {} ({} failed)",
        report.emitted,
        a.out.display(),
        report.failures.len()
    )?;
    Ok(EXIT_OK)
}

/// Contents of `manifest.json` in a training output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub checkpoint: String,
    pub samples: usize,
}

fn filter_tasks(samples: Vec<train::TrainSample>, tasks: &[TaskType]) -> Vec<train::TrainSample> {
    if tasks.is_empty() {
        return samples;
    }
    samples
        .into_iter()
        .filter(|s| tasks.contains(&s.instruction.task_type))
        .collect()
}

fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    require(&a.corpus)?;
    if let Some(b) = &a.backbone {
        require(b)?;
    }
    let t = &mut cfg.train;
    t.lr = a.lr.unwrap_or(t.lr);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch.unwrap_or(t.batch_size);
    t.accum_steps = a.accum.unwrap_or(t.accum_steps);
    t.max_len = a.max_len.unwrap_or(t.max_len);
    t.validate()?;
    cfg.model.lm.lora_rank = a.lora_r.unwrap_or(cfg.model.lm.lora_rank);
    cfg.model.lm.lora_alpha = a.lora_alpha.unwrap_or(cfg.model.lm.lora_alpha);
    cfg.pretrain.steps = a.pretrain_steps.unwrap_or(cfg.pretrain.steps);
    cfg.model.validate()?;

    let samples = train::read_corpus(open(&a.corpus)?, &parent_dir(&a.corpus), &cfg.model.geometry)?;
    let samples = filter_tasks(samples, &a.tasks);
    if samples.is_empty() {
        return Err(Error::data(format!("{} holds no usable samples", a.corpus.display())));
    }
    fs::create_dir_all(&a.out)?;
    let mut model = SitModel::new(cfg.model.clone(), cfg.seed)?;
    match &a.backbone {
        Some(path) => {
            let n = checkpoint::load_into_store(&mut model.store, path)?;
            writeln!(out, "loaded {n} tensors from {}", path.display())?;
        }
        None if cfg.pretrain.steps > 0 => {
            let texts = train::pretraining_corpus(200, 200, &cfg.model.geometry, cfg.seed)?;
            let losses = train::pretrain(&mut model, &texts, &cfg.pretrain)?;
            checkpoint::save_store(&model.store, &a.out.join(BACKBONE_FILE))?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                writeln!(out, "pretrained {} steps: loss {first:.4} -> {last:.4}", losses.len())?;
            }
        }
        None => {}
    }
    let mut report = train::train(&mut model, &samples, &cfg.train)?;
    checkpoint::save_store(&model.store, &a.out.join(MODEL_FILE))?;
    report.checkpoint = Some(MODEL_FILE.into());
    fs::write(a.out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let manifest = TrainManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs: report.epoch_losses.len(),
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        checkpoint: MODEL_FILE.into(),
        samples: samples.len(),
    };
    fs::write(a.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(out, "epoch {}: mean loss {l:.4}", e + 1)?;
    }
    writeln!(out, "checkpoint written to {}", a.out.join(MODEL_FILE).display())?;
    Ok(EXIT_OK)
}

/// Rebuilds a trained model from a `train` output directory.
pub fn load_trained(dir: &Path) -> Result<(SitModel, TrainManifest)> {
    let manifest: TrainManifest = serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?;
    let mut model = SitModel::new(manifest.config.model.clone(), manifest.seed)?;
    checkpoint::load_into_store(&mut model.store, &dir.join(&manifest.checkpoint))?;
    Ok((model, manifest))
}

fn cmd_infer(cfg: &RunConfig, geometry_flag: bool, a: &InferArgs, out: &mut dyn Write) -> Result<i32> {
    require(&a.checkpoint)?;
    require(&a.map)?;
    let (model, manifest) = load_trained(&a.checkpoint)?;
    let geometry = if geometry_flag { &cfg.model.geometry } else { &manifest.config.model.geometry };
    let map = load_map(&a.map, geometry)?;
    let text = a.instruction.clone().unwrap_or_else(|| synth::instructions(a.task)[0].to_string());
    let prompt = model.prompt(&map, &TaskInstruction::new(a.task, text))?;
    let mode = match a.top_k {
        Some(k) => DecodeMode::TopK { k, seed: cfg.seed },
        None => DecodeMode::Greedy,
    };
    let answer = model.generate(&prompt, a.max_new_tokens, mode, manifest.config.train.max_len)?;
    writeln!(out, "{answer}")?;
    Ok(EXIT_OK)
}

fn read_predictions(path: &Path) -> Result<Vec<Option<EvalPair>>> {
    let mut pairs = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| ParseError::Line {
            line: i + 1,
            message: e.to_string(),
        };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(bad)?;
        // A prediction without a candidate is counted as skipped.
        if v.get("candidate").is_none_or(serde_json::Value::is_null) {
            pairs.push(None);
        } else {
            pairs.push(Some(serde_json::from_value(v).map_err(bad)?));
        }
    }
    Ok(pairs)
}

/// Greedy predictions for every sample, in corpus order.
pub fn generate_predictions(
    model: &SitModel,
    samples: &[train::TrainSample],
    max_new_tokens: usize,
    max_len: usize,
) -> Result<Vec<EvalPair>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let prompt = model.prompt(&s.map, &s.instruction)?;
            let candidate = model.generate(&prompt, max_new_tokens, DecodeMode::Greedy, max_len)?;
            Ok(EvalPair {
                id: format!("{i}"),
                task_type: s.instruction.task_type,
                candidate,
                reference: s.answer.clone(),
            })
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, geometry_flag: bool, a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    for p in [&a.predictions, &a.checkpoint, &a.corpus, &a.human].into_iter().flatten() {
        require(p)?;
    }
    let mut pairs = match (&a.predictions, &a.checkpoint, &a.corpus) {
        (Some(p), _, _) => read_predictions(p)?,
        (None, Some(ckpt), Some(corpus)) => {
            let (model, manifest) = load_trained(ckpt)?;
            let geometry = if geometry_flag { &cfg.model.geometry } else { &manifest.config.model.geometry };
            let samples = train::read_corpus(open(corpus)?, &parent_dir(corpus), geometry)?;
            let samples = filter_tasks(samples, &a.tasks);
            let preds = generate_predictions(&model, &samples, a.max_new_tokens, manifest.config.train.max_len)?;
            if let Some(path) = &a.predictions_out {
                let mut w = create(path)?;
                for p in &preds {
                    serde_json::to_writer(&mut w, p)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            preds.into_iter().map(Some).collect()
        }
        _ => return Err(Error::config("eval needs --predictions, or --checkpoint with --corpus")),
    };
    if !a.tasks.is_empty() {
        pairs.retain(|p| p.as_ref().is_none_or(|p| a.tasks.contains(&p.task_type)));
    }
    let selection = if a.judge { MetricSelection::all() } else { MetricSelection::surface() };
    let embed = HashEmbedding::default();
    let remote = HttpClient::from_env();
    let judge: &dyn JudgeClient = match &remote {
        Some(h) => h,
        None => &StubJudge,
    };
    let provider: &dyn EmbeddingProvider = &embed;
    let mut report = metrics::run_benchmark(&pairs, selection, provider, Some(judge), metrics::DEFAULT_RUBRIC)?;
    if let Some(path) = &a.human {
        let scores: BTreeMap<String, f64> = metrics::read_human_scores(open(path)?)?;
        let hits = metrics::attach_human_scores(&mut report, &scores);
        writeln!(err, "human ratings matched {hits} of {} pairs", report.pairs.len())?;
    }
    write!(out, "{}", metrics::render_table(&report))?;
    if report.skipped > 0 {
        writeln!(err, "skipped {} pairs without a candidate", report.skipped)?;
    }
    if !report.absent_tasks.is_empty() {
        let names: Vec<&str> = report.absent_tasks.iter().map(|t| t.as_str()).collect();
        writeln!(err, "no pairs for: {}", names.join(", "))?;
    }
    if let Some(path) = &a.json {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let results = gradcheck::run_suite(cfg.seed)?;
    let mut worst = 0.0f64;
    for r in &results {
        worst = worst.max(r.max_rel_error);
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<28} {:>12.3e}  {verdict}", r.name, r.max_rel_error)?;
    }
    writeln!(
        out,
        "max relative error {worst:.3e} over {} checks (tolerance {:e})",
        results.len(),
        gradcheck::TOLERANCE
    )?;
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    Ok(if results.iter().all(|r| r.passed()) { EXIT_OK } else { EXIT_RUNTIME })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_merge_is_key_by_key() {
        let base = RunConfig::for_profile(Profile::Desk);
        let merged = base
            .merged(serde_json::json!({"train": {"lr": 0.5}, "model": {"lm": {"lora_rank": 4}}}))
            .unwrap();
        assert_eq!(merged.train.lr, 0.5);
        assert_eq!(merged.train.epochs, base.train.epochs);
        assert_eq!(merged.model.lm.lora_rank, 4);
        assert_eq!(merged.model.lm.hidden, base.model.lm.hidden);
    }

    #[test]
    fn full_scale_profile_pins_reference_settings() {
        let c = RunConfig::for_profile(Profile::Paper);
        assert_eq!((c.train.lr, c.train.accum_steps, c.train.max_len), (3e-5, 8, 4096));
        assert_eq!((c.model.lm.lora_rank, c.model.lm.lora_alpha), (64, 16.0));
        assert!(c.model.validate().is_ok());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run_args(["presslm", "gradcheck", "--bogus"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run_args(["presslm"], &mut o, &mut e), EXIT_USAGE);
    }
}
