//! `smile-lab` command line.
//!
//! Settings resolve as: explicit flag, then `--config` file, then built-in
//! default. A run manifest is accepted as a config file, so any run can be
//! repeated from its `manifest.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{detokenize, generate_corpus, Corpus, CorpusConfig, CorpusMode};
use crate::decoder::{decode, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::eval::{descriptiveness_report, export_token_viz, EvalReport, RetrievalPool};
use crate::experiments::{self, ModelShape, PresetName, PresetSettings};
use crate::model::{init, Parameters};
use crate::objectives::{apply_first_token_shift, build_mask, pad_labels, FirstToken, Objective};
use crate::trainer::{self, CheckpointMetric, Optimizer, Split, TrainConfig};

pub const MANIFEST_SCHEMA: &str = "run_v1";
pub const RUNS_ENV: &str = "SMILE_LAB_RUNS";

#[derive(Parser, Debug)]
#[command(name = "smile-lab", version, about = "Subset-restricted MLE training lab")]
struct Cli {
    /// Root for run directories created without --out.
    #[arg(long, global = true, env = RUNS_ENV, default_value = "runs")]
    runs_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config (or a run manifest) layered under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `<runs-dir>/<command>-<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene/caption corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Decode captions for corpus scenes.
    Decode(DecodeArgs),
    /// Descriptiveness report on the validation split.
    Eval(EvalArgs),
    /// Token-level loss visualization for one sample.
    Viz(VizArgs),
    /// Run a preset experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    paraphrases: Option<usize>,
    /// Four comma-separated level probabilities.
    #[arg(long)]
    detail_distribution: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct DecodeFlags {
    /// Beam width; 0 selects greedy decoding.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    /// mle | smile | reverse | random[:K] | mixed:LAMBDA
    #[arg(long)]
    objective: Option<String>,
    /// none | mle | shift
    #[arg(long)]
    first_token: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    /// val_retrieval_r1 | val_loss
    #[arg(long)]
    checkpoint_metric: Option<String>,
    /// Run MLE with early stopping first, then the chosen objective.
    #[arg(long)]
    two_stage: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated scene ids; all scenes when omitted.
    #[arg(long)]
    scenes: Option<String>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Hard distractors per pool entry.
    #[arg(long)]
    distractors: Option<usize>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Found through the checkpoint's run manifest when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Index into the corpus samples.
    #[arg(long)]
    sample: Option<usize>,
    /// Subset strategy of the admitted column: smile | reverse | random[:K]
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    first_token: Option<String>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// subsetting_compare | absorption | lambda_sweep | icr_ablation
    preset: String,
    #[command(flatten)]
    common: Common,
    /// Scenes per corpus.
    #[arg(long)]
    n_scenes: Option<usize>,
    /// Further-training epochs per arm.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stage-one epoch cap.
    #[arg(long)]
    base_epochs: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub corpus: CorpusConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub corpus_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelShape,
    pub val_fraction: f64,
    /// Stage-one MLE config when training in two stages.
    pub base: Option<TrainConfig>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeRunConfig {
    pub checkpoint: PathBuf,
    pub corpus_dir: PathBuf,
    pub scenes: Option<Vec<u64>>,
    pub decode: DecodeConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub checkpoint: PathBuf,
    pub corpus_dir: PathBuf,
    pub val_fraction: f64,
    pub distractors: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VizRunConfig {
    pub checkpoint: PathBuf,
    pub corpus_dir: PathBuf,
    pub sample: usize,
    pub objective: Objective,
    pub first_token: FirstToken,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub config: Value,
    pub outputs: Vec<String>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<PathBuf> {
    let runs = cli.runs_dir;
    match cli.command {
        Command::GenData(a) => gen_data(&runs, a),
        Command::Train(a) => train_cmd(&runs, a),
        Command::Decode(a) => decode_cmd(&runs, a),
        Command::Eval(a) => eval_cmd(&runs, a),
        Command::Viz(a) => viz_cmd(&runs, a),
        Command::Experiment(a) => experiment_cmd(&runs, a),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Layers a config file (or the `config` of a run manifest) over `defaults`.
fn layered<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(defaults);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut patch: Value = serde_json::from_str(&text)?;
    if patch.get("schema").and_then(Value::as_str) == Some(MANIFEST_SCHEMA) {
        patch = patch["config"].take();
    }
    let mut value = serde_json::to_value(defaults)?;
    merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required --{flag} (or config entry)")))
}

fn run_dir(runs: &Path, command: &str, out: Option<PathBuf>, config: &Value) -> Result<PathBuf> {
    let dir = match out {
        Some(dir) => dir,
        None => {
            let digest = Sha256::digest(serde_json::to_vec(config)?);
            let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
            runs.join(format!("{command}-{hex}"))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_manifest(dir: &Path, command: &str, config: Value, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        command: command.to_string(),
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::Config(format!("{}: unsupported manifest schema {:?}", path.display(), m.schema)));
    }
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn parse_distribution(s: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad detail distribution {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("detail distribution needs 4 values, got {s:?}")))
}

fn apply_decode_flags(cfg: &mut DecodeConfig, f: &DecodeFlags) {
    if let Some(w) = f.beam {
        cfg.mode = if w == 0 { DecodeMode::Greedy } else { DecodeMode::Beam { width: w } };
    }
    if let Some(n) = f.max_decode_len {
        cfg.max_len = n;
    }
    if let Some(a) = f.length_penalty {
        cfg.length_penalty = a;
    }
}

fn gen_data(runs: &Path, a: GenDataArgs) -> Result<PathBuf> {
    let mut cfg = layered(
        GenDataConfig {
            corpus: CorpusConfig::new(CorpusMode::Full, 0, 1000),
        },
        a.common.config.as_deref(),
    )?;
    if let Some(m) = &a.mode {
        let mode = CorpusMode::parse(m)?;
        if mode != cfg.corpus.mode {
            cfg.corpus.detail_distribution = mode.default_distribution();
        }
        cfg.corpus.mode = mode;
    }
    if let Some(s) = a.common.seed {
        cfg.corpus.seed = s;
    }
    if let Some(n) = a.n_scenes {
        cfg.corpus.n_scenes = n;
    }
    if let Some(p) = a.paraphrases {
        cfg.corpus.paraphrases = p;
    }
    if let Some(d) = &a.detail_distribution {
        cfg.corpus.detail_distribution = parse_distribution(d)?;
    }
    let corpus = generate_corpus(&cfg.corpus)?;
    let value = serde_json::to_value(&cfg)?;
    let dir = run_dir(runs, "gen-data", a.common.out, &value)?;
    corpus.save_dir(&dir)?;
    write_manifest(
        &dir,
        "gen-data",
        value,
        &["corpus.jsonl", "scenes.jsonl", "vocab.json", "corpus_config.json"],
    )?;
    Ok(dir)
}

fn train_cmd(runs: &Path, a: TrainArgs) -> Result<PathBuf> {
    let mut cfg = layered(
        TrainRunConfig {
            corpus_dir: PathBuf::new(),
            init_checkpoint: None,
            model: ModelShape::default(),
            val_fraction: 0.1,
            base: None,
            train: TrainConfig::default(),
        },
        a.common.config.as_deref(),
    )?;
    if let Some(c) = a.corpus {
        cfg.corpus_dir = c;
    }
    if cfg.corpus_dir.as_os_str().is_empty() {
        return Err(Error::Config("missing required --corpus (or config entry)".into()));
    }
    if let Some(p) = a.init {
        cfg.init_checkpoint = Some(p);
    }
    let t = &mut cfg.train;
    if let Some(s) = a.common.seed {
        t.seed = s;
        cfg.model.seed = s;
    }
    if let Some(o) = &a.objective {
        t.objective = Objective::parse(o)?;
    }
    if let Some(f) = &a.first_token {
        t.first_token = FirstToken::parse(f)?;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.lr {
        t.learning_rate = lr;
    }
    if let Some(o) = &a.optimizer {
        t.optimizer = Optimizer::parse(o)?;
    }
    if let Some(m) = &a.checkpoint_metric {
        t.checkpoint_metric = CheckpointMetric::parse(m)?;
    }
    apply_decode_flags(&mut t.decode, &a.decode);
    if a.two_stage && cfg.base.is_none() {
        let mut base = experiments::base_train_config(t.seed);
        base.batch_size = t.batch_size;
        base.decode = t.decode;
        cfg.base = Some(base);
    }
    let m = &mut cfg.model;
    if let Some(d) = a.d_model {
        m.d_model = d;
    }
    if let Some(n) = a.n_layers {
        m.n_layers = n;
    }
    if let Some(h) = a.n_heads {
        m.n_heads = h;
    }
    if let Some(l) = a.max_len {
        m.max_len = l;
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = v;
    }
    if a.decode.max_decode_len.is_none() {
        let cap = cfg.model.max_len;
        cfg.train.decode.max_len = cfg.train.decode.max_len.min(cap);
        if let Some(b) = &mut cfg.base {
            b.decode.max_len = b.decode.max_len.min(cap);
        }
    }
    cfg.train.validate()?;

    let corpus = Corpus::load_dir(&cfg.corpus_dir)?;
    let split = Split::new(&corpus, cfg.val_fraction)?;
    let params = match &cfg.init_checkpoint {
        Some(p) => Parameters::load(p)?,
        None => init(&cfg.model.config(&corpus))?,
    };
    let value = serde_json::to_value(&cfg)?;
    let dir = run_dir(runs, "train", a.common.out, &value)?;
    let report = |r: &trainer::RunMetrics| {
        eprintln!(
            "epoch {:>3} {} train {:.4} val {:.4} len {:.3} R@1 {:.3}",
            r.epoch, r.objective, r.train_loss, r.val_loss, r.mean_caption_length, r.r_at_1
        )
    };
    let mut outputs = vec!["best.json", "last.json", "metrics.csv"];
    let params = match &cfg.base {
        Some(base) => {
            let stage_one = trainer::two_stage_base_with(params, &split, base, report)?;
            stage_one.best.save(&dir.join("base.json"))?;
            trainer::write_metrics_csv(&dir.join("base_metrics.csv"), &stage_one.history)?;
            outputs.extend(["base.json", "base_metrics.csv"]);
            stage_one.best
        }
        None => params,
    };
    let outcome = trainer::train_with(params, &split, &cfg.train, report)?;
    outcome.best.save(&dir.join("best.json"))?;
    outcome.last.save(&dir.join("last.json"))?;
    trainer::write_metrics_csv(&dir.join("metrics.csv"), &outcome.history)?;
    write_manifest(&dir, "train", value, &outputs)?;
    Ok(dir)
}

#[derive(Serialize)]
struct CaptionLine {
    scene_id: u64,
    caption: String,
    tokens: Vec<u32>,
    truncated: bool,
    log_prob: f64,
}

fn features_of(bits: &[u8]) -> Array1<f64> {
    bits.iter().map(|&b| b as f64).collect()
}

fn decode_cmd(runs: &Path, a: DecodeArgs) -> Result<PathBuf> {
    let mut cfg = layered(
        DecodeRunConfig {
            checkpoint: PathBuf::new(),
            corpus_dir: PathBuf::new(),
            scenes: None,
            decode: DecodeConfig::default(),
            seed: 0,
        },
        a.common.config.as_deref(),
    )?;
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(c) = a.corpus {
        cfg.corpus_dir = c;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(list) = &a.scenes {
        let ids = list
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad scene list {list:?}")))?;
        cfg.scenes = Some(ids);
    }
    apply_decode_flags(&mut cfg.decode, &a.decode);
    let params = Parameters::load(&required(Some(&cfg.checkpoint).filter(|p| !p.as_os_str().is_empty()), "checkpoint")?)?;
    if a.decode.max_decode_len.is_none() {
        cfg.decode.max_len = cfg.decode.max_len.min(params.config().max_len);
    }
    let corpus = Corpus::load_dir(&required(Some(&cfg.corpus_dir).filter(|p| !p.as_os_str().is_empty()), "corpus")?)?;
    let scenes: Vec<_> = match &cfg.scenes {
        Some(ids) => ids
            .iter()
            .map(|&id| corpus.scene(id).ok_or_else(|| Error::Config(format!("no scene {id} in corpus"))))
            .collect::<Result<_>>()?,
        None => corpus.scenes.iter().collect(),
    };
    let vocab = &corpus.vocab;
    let mut lines = Vec::with_capacity(scenes.len());
    for s in scenes {
        let d = decode(&params, features_of(&s.features).view(), vocab.bos(), vocab.eos(), &cfg.decode)?;
        lines.push(CaptionLine {
            scene_id: s.scene_id,
            caption: detokenize(&d.tokens, vocab),
            tokens: d.tokens,
            truncated: d.truncated,
            log_prob: d.log_prob,
        });
    }
    let value = serde_json::to_value(&cfg)?;
    let dir = run_dir(runs, "decode", a.common.out, &value)?;
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    let path = dir.join("captions.jsonl");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_manifest(&dir, "decode", value, &["captions.jsonl"])?;
    Ok(dir)
}

fn eval_cmd(runs: &Path, a: EvalArgs) -> Result<PathBuf> {
    let mut cfg = layered(
        EvalRunConfig {
            checkpoint: PathBuf::new(),
            corpus_dir: PathBuf::new(),
            val_fraction: 0.1,
            distractors: 0,
            decode: DecodeConfig::default(),
            seed: 0,
        },
        a.common.config.as_deref(),
    )?;
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(c) = a.corpus {
        cfg.corpus_dir = c;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(d) = a.distractors {
        cfg.distractors = d;
    }
    apply_decode_flags(&mut cfg.decode, &a.decode);
    let params = Parameters::load(&required(Some(&cfg.checkpoint).filter(|p| !p.as_os_str().is_empty()), "checkpoint")?)?;
    if a.decode.max_decode_len.is_none() {
        cfg.decode.max_len = cfg.decode.max_len.min(params.config().max_len);
    }
    let corpus = Corpus::load_dir(&required(Some(&cfg.corpus_dir).filter(|p| !p.as_os_str().is_empty()), "corpus")?)?;
    let split = Split::new(&corpus, cfg.val_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: RetrievalPool = split
        .val_pool
        .clone()
        .with_hard_distractors(&corpus.inventory, cfg.distractors, &mut rng);
    let report: EvalReport = descriptiveness_report(&params, &pool, &cfg.decode, &split.eval)?;
    let value = serde_json::to_value(&cfg)?;
    let dir = run_dir(runs, "eval", a.common.out, &value)?;
    write_json(&dir.join("report.json"), &report)?;
    experiments::write_rows(&dir.join("report.csv"), std::slice::from_ref(&report))?;
    write_manifest(&dir, "eval", value, &["report.json", "report.csv"])?;
    Ok(dir)
}

/// Corpus directory recorded by the run that produced `checkpoint`.
fn corpus_of_checkpoint(checkpoint: &Path) -> Result<PathBuf> {
    let manifest = checkpoint
        .parent()
        .map(|d| d.join("manifest.json"))
        .ok_or_else(|| Error::Config("checkpoint has no parent directory".into()))?;
    let m = read_manifest(&manifest)?;
    m.config
        .get("corpus_dir")
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("{} records no corpus_dir; pass --corpus", manifest.display())))
}

fn viz_cmd(runs: &Path, a: VizArgs) -> Result<PathBuf> {
    let mut cfg = layered(
        VizRunConfig {
            checkpoint: PathBuf::new(),
            corpus_dir: PathBuf::new(),
            sample: 0,
            objective: Objective::Smile,
            first_token: FirstToken::default(),
            seed: 0,
        },
        a.common.config.as_deref(),
    )?;
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(Error::Config("missing required --checkpoint (or config entry)".into()));
    }
    if let Some(c) = a.corpus {
        cfg.corpus_dir = c;
    }
    if cfg.corpus_dir.as_os_str().is_empty() {
        cfg.corpus_dir = corpus_of_checkpoint(&cfg.checkpoint)?;
    }
    if let Some(n) = a.sample {
        cfg.sample = n;
    }
    if let Some(o) = &a.objective {
        cfg.objective = Objective::parse(o)?;
    }
    if let Some(f) = &a.first_token {
        cfg.first_token = FirstToken::parse(f)?;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let params = Parameters::load(&cfg.checkpoint)?;
    let corpus = Corpus::load_dir(&cfg.corpus_dir)?;
    let sample = corpus.samples.get(cfg.sample).ok_or_else(|| {
        Error::Config(format!("sample {} out of range ({} samples)", cfg.sample, corpus.samples.len()))
    })?;
    let vocab = &corpus.vocab;
    let inputs = vec![sample.caption[..sample.caption.len() - 1].to_vec()];
    let mut labels = vec![sample.caption[1..].to_vec()];
    if cfg.first_token == FirstToken::Shift {
        labels = apply_first_token_shift(&labels, vocab).0;
    }
    let features = Array2::from_shape_vec((1, sample.features.len()), features_of(&sample.features).to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (logits, _) = params.forward(features.view(), &inputs)?;
    let strategy = cfg.objective.strategy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let padded = pad_labels(&labels, vocab.pad());
    let mask = build_mask(padded.view(), vocab.len(), vocab.pad(), strategy, cfg.first_token, &mut rng);
    let viz = export_token_viz(
        logits.values.slice(s![0, .., ..]),
        &labels[0],
        mask.admit.slice(s![0, .., ..]),
        vocab,
    )?;
    let value = serde_json::to_value(&cfg)?;
    let dir = run_dir(runs, "viz", a.common.out, &value)?;
    write_json(&dir.join("viz.json"), &viz)?;
    write_manifest(&dir, "viz", value, &["viz.json"])?;
    Ok(dir)
}

fn experiment_cmd(runs: &Path, a: ExperimentArgs) -> Result<PathBuf> {
    let preset = PresetName::parse(&a.preset)?;
    let seed = a.common.seed.unwrap_or(0);
    let mut settings: PresetSettings = layered(experiments::preset_settings(preset, seed), a.common.config.as_deref())?;
    if settings.preset != preset {
        return Err(Error::Config(format!(
            "config describes preset {}, not {}",
            settings.preset.as_str(),
            preset.as_str()
        )));
    }
    for b in &mut settings.bases {
        if let Some(n) = a.n_scenes {
            b.corpus.n_scenes = n;
        }
        if let Some(e) = a.base_epochs {
            b.train.epochs = e;
        }
        if let Some(d) = a.d_model {
            b.model.d_model = d;
        }
    }
    if let Some(e) = a.epochs {
        for arm in &mut settings.arms {
            arm.train.epochs = e;
        }
    }
    let value = serde_json::to_value(&settings)?;
    let dir = run_dir(runs, &format!("experiment-{}", preset.as_str()), a.common.out, &value)?;
    let result = experiments::run_preset(&settings)?;
    result.write_csvs(&dir)?;
    write_manifest(&dir, "experiment", value, &["summary.csv", "history.csv"])?;
    Ok(dir)
}
