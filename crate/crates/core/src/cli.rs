//! Command-line front end. Every command writes a JSON run manifest next to
//! its output that is enough to replay the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::arith::{apply_forgetting, delta_norms, layer_distances, ForgettingRate, LayerDistanceReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    self, generate_corpus, load_corpus, parse_records, save_corpus, Corpus, EvalRecord, RecordFormat, Records, Vocab,
};
use crate::editors::{
    build_original_model, pretrain, run_editor, strategy_knowledge_vector, EditorKind, EditorStrategy, ForgetMethod,
};
use crate::error::Error;
use crate::eval::{evaluate, DEFAULT_MAX_NEW};
use crate::experiments::{compare_strategies, lambda_sweep, time_strategies, to_csv, DeskSetup, SweepResult};
use crate::lora::{init_adapters, lora_fine_tune, merge_adapters, LoraConfig};
use crate::model::ParamSet;
use crate::trainer::{fine_tune, fine_tune_constrained, FtcConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "flearn", version, about = "Forget-before-learn knowledge updating on a small transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic fact corpus.
    GenData(GenDataArgs),
    /// Train a fresh model on background, control and old facts.
    Pretrain(PretrainArgs),
    /// Fine-tune a base model on the old facts.
    TrainOriginal(TrainOriginalArgs),
    /// Subtract scaled old-knowledge parameters from a model.
    Forget(ForgetArgs),
    /// Fine-tune a model on the new facts.
    Learn(LearnArgs),
    /// Run a full editing strategy.
    Edit(EditArgs),
    /// Score an edited model against its pre-update model.
    Eval(EvalArgs),
    /// Old-fact recall after forgetting at several rates.
    Sweep(SweepArgs),
    /// Wall-clock editing time per strategy and edit count.
    Time(TimeArgs),
    /// Per-tensor parameter distances between two models, or of a delta.
    AnalyzeParams(AnalyzeArgs),
    /// Edit with several strategies and tabulate the metrics.
    Compare(CompareArgs),
    /// Re-run the command recorded in a manifest and verify its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_vocab: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.grad_accum {
            cfg.grad_accum_steps = v;
        }
        cfg
    }
}

#[derive(Debug, Args)]
struct LoraArgs {
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl LoraArgs {
    fn apply(&self, mut cfg: LoraConfig) -> LoraConfig {
        if let Some(v) = self.rank {
            cfg.rank = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        cfg
    }
}

#[derive(Debug, Args)]
struct FtcArgs {
    /// L∞ radius for ft_c.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Block trained by ft_c (default: last).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

impl FtcArgs {
    fn apply(&self, mut cfg: FtcConfig) -> FtcConfig {
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if self.layer.is_some() {
            cfg.target_layer = self.layer;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        cfg
    }

    fn is_set(&self) -> bool {
        self.epsilon.is_some() || self.layer.is_some() || self.steps.is_some()
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 200)]
    background: usize,
    #[arg(long, default_value_t = 40)]
    control: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    /// Initialization and shuffling seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Stop once old-fact accuracy reaches this percentage.
    #[arg(long, default_value_t = 95.0)]
    target_accuracy: f64,
    /// Upper bound on epochs is --epochs.
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct TrainOriginalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct ForgetArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full_ft", value_parser = parse_method)]
    method: ForgetMethod,
    /// Forgetting rate; defaults to 0.3 (full_ft) or 0.7 (lora).
    #[arg(long)]
    lambda: Option<f64>,
    /// Also save the old-knowledge vector.
    #[arg(long)]
    delta_out: Option<PathBuf>,
    /// Subtract a saved vector instead of fitting one.
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lora: LoraArgs,
}

#[derive(Debug, Args)]
struct LearnArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// full_ft, lora or ft_c.
    #[arg(long, default_value = "full_ft", value_parser = parse_kind)]
    method: EditorKind,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lora: LoraArgs,
    #[command(flatten)]
    ftc: FtcArgs,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    strategy: EditorKind,
    #[arg(long)]
    lambda: Option<f64>,
    /// Also save the model after forgetting.
    #[arg(long)]
    intermediate_out: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lora: LoraArgs,
    #[command(flatten)]
    ftc: FtcArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Score these records instead of the corpus edit requests. Instruction
    /// records are scored with their own prompt as rephrase and locality probe.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long, default_value = "zsre", value_parser = parse_format)]
    format: RecordFormat,
    /// Score against the old answers instead of the new ones.
    #[arg(long)]
    old: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// full_ft, lora or both.
    #[arg(long, default_value = "both")]
    method: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9])]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lora: LoraArgs,
}

#[derive(Debug, Args)]
struct TimeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_values = ["full_ft", "ft_c", "f_ft"])]
    strategy: Vec<EditorKind>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 100])]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lora: LoraArgs,
    #[command(flatten)]
    ftc: FtcArgs,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// First model, or the only input with --delta.
    #[arg(long, required_unless_present = "delta")]
    model: Option<PathBuf>,
    /// Second model.
    #[arg(long, conflicts_with = "delta", requires = "model")]
    other: Option<PathBuf>,
    /// A saved task vector; reports its per-tensor norms.
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind,
          default_values = ["full_ft", "lora", "ft_c", "f_ft", "f_lora", "f_lora_ft"])]
    strategy: Vec<EditorKind>,
    /// Overrides the rate of every forgetting strategy.
    #[arg(long)]
    lambda: Option<f64>,
    /// Record wall-clock seconds (otherwise the column is zero so that
    /// reruns are byte-identical).
    #[arg(long)]
    timing: bool,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    lora: LoraArgs,
    #[command(flatten)]
    ftc: FtcArgs,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn parse_kind(s: &str) -> Result<EditorKind, String> {
    EditorKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = EditorKind::ALL.iter().map(|k| k.as_str()).collect();
        format!("unknown strategy `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_method(s: &str) -> Result<ForgetMethod, String> {
    ForgetMethod::parse(s).ok_or_else(|| format!("unknown method `{s}` (expected full_ft or lora)"))
}

fn parse_format(s: &str) -> Result<RecordFormat, String> {
    match s {
        "instruction" => Ok(RecordFormat::Instruction),
        "zsre" => Ok(RecordFormat::Zsre),
        _ => Err(format!("unknown format `{s}` (expected instruction or zsre)")),
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub crc64: String,
}

impl FileDigest {
    fn of(path: &Path) -> crate::Result<Self> {
        let bytes = crate::io::read(path)?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
            crc64: format!("{:016x}", CRC64.checksum(&bytes)),
        })
    }
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; replaying runs exactly these.
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Manifest location for an output file or directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join(MANIFEST_NAME)
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn corpus_files(dir: &Path) -> Vec<PathBuf> {
    [
        data::OLD_FILE,
        data::NEW_FILE,
        data::EVAL_FILE,
        data::BACKGROUND_FILE,
        data::CONTROL_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}

/// Collects what a command reads and writes, and refuses to write over
/// anything it read.
struct Run {
    command: &'static str,
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_anchor: Option<PathBuf>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run {
            command,
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest_anchor: None,
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn corpus_input(&mut self, dir: &Path) {
        self.inputs.extend(corpus_files(dir));
    }

    fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    fn same_file(a: &Path, b: &Path) -> bool {
        match (fs::canonicalize(a), fs::canonicalize(b)) {
            (Ok(x), Ok(y)) => x == y,
            _ => a == b,
        }
    }

    /// Registers an output path, failing if it is one of the inputs.
    fn output(&mut self, path: &Path) -> crate::Result<()> {
        if let Some(i) = self.inputs.iter().find(|i| Self::same_file(i, path)) {
            return Err(Error::input(format!(
                "refusing to overwrite input file {}",
                i.display()
            )));
        }
        let manifest = manifest_path(path);
        if self.inputs.iter().any(|i| Self::same_file(i, &manifest)) {
            return Err(Error::input(format!(
                "refusing to overwrite input file {}",
                manifest.display()
            )));
        }
        // the primary output is always registered last
        self.manifest_anchor = Some(path.to_path_buf());
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn finish(self, argv: &[String], started: u64, write: bool) -> crate::Result<Vec<FileDigest>> {
        let digest = |paths: &[PathBuf]| paths.iter().map(|p| FileDigest::of(p)).collect::<crate::Result<Vec<_>>>();
        let outputs = digest(&self.outputs)?;
        if write {
            let manifest = RunManifest {
                command: self.command.to_string(),
                argv: argv.to_vec(),
                config: self.config,
                seeds: self.seeds,
                inputs: digest(&self.inputs)?,
                outputs: outputs.clone(),
                started_unix: started,
                finished_unix: unix_now(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            };
            if let Some(anchor) = &self.manifest_anchor {
                let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
                crate::io::write_atomic(&manifest_path(anchor), text.as_bytes())?;
            }
        }
        Ok(outputs)
    }
}

// ---------------------------------------------------------------------------
// dispatch

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &args, true) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(_) => EXIT_INPUT,
        None => EXIT_USAGE,
    }
}

fn execute(command: Command, argv: &[String], write_manifest: bool) -> anyhow::Result<()> {
    let started = unix_now();
    let run = match command {
        Command::Replay(a) => return replay(a),
        other => run_command(other)?,
    };
    run.finish(argv, started, write_manifest)?;
    Ok(())
}

fn run_command(command: Command) -> anyhow::Result<Run> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::TrainOriginal(a) => train_original(a),
        Command::Forget(a) => forget(a),
        Command::Learn(a) => learn(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Time(a) => time(a),
        Command::AnalyzeParams(a) => analyze(a),
        Command::Compare(a) => compare(a),
        Command::Replay(_) => bail!(Error::input("a manifest cannot replay another replay")),
    }
}

fn replay(a: ReplayArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::input(format!("malformed manifest: {e}")))?;
    let mut full = vec!["flearn".to_string()];
    full.extend(manifest.argv.iter().cloned());
    let cli = Cli::try_parse_from(&full).map_err(|e| Error::input(format!("manifest command is invalid: {e}")))?;
    let started = unix_now();
    let run = run_command(cli.command)?;
    let outputs = run.finish(&manifest.argv, started, false)?;
    let mut mismatches = Vec::new();
    for (old, new) in manifest.outputs.iter().zip(&outputs) {
        if old.crc64 != new.crc64 || old.bytes != new.bytes {
            mismatches.push(new.path.display().to_string());
        }
    }
    if !mismatches.is_empty() || manifest.outputs.len() != outputs.len() {
        bail!(Error::input(format!(
            "replay produced different outputs: {}",
            mismatches.join(", ")
        )));
    }
    println!("replayed `{}`: {} outputs identical", manifest.command, outputs.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// helpers

fn load_params(path: &Path) -> anyhow::Result<ParamSet> {
    Ok(load_checkpoint(path)?.into_params()?)
}

fn load_lab(args: &CorpusArgs) -> anyhow::Result<(Corpus, Vocab)> {
    let corpus = load_corpus(&args.corpus)?;
    let vocab = Vocab::build(&corpus, args.max_vocab)?;
    Ok((corpus, vocab))
}

fn check_vocab(params: &ParamSet, vocab: &Vocab, path: &Path) -> anyhow::Result<()> {
    if params.config().vocab_size != vocab.len() {
        bail!(Error::input(format!(
            "{} has a vocabulary of {} but the corpus yields {}",
            path.display(),
            params.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn save_params(run: &mut Run, params: ParamSet, path: &Path) -> anyhow::Result<()> {
    run.output(path)?;
    save_checkpoint(&Checkpoint::Params(params), path)?;
    Ok(())
}

fn save_text(run: &mut Run, text: &str, path: &Path) -> anyhow::Result<()> {
    run.output(path)?;
    crate::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Desk strategy for `kind` with command-line overrides applied.
fn strategy_for(
    kind: EditorKind,
    seed: u64,
    lambda: Option<f64>,
    train: &TrainArgs,
    lora: &LoraArgs,
    ftc: Option<&FtcArgs>,
) -> anyhow::Result<EditorStrategy> {
    let mut s = DeskSetup {
        strategy_seed: seed,
        ..DeskSetup::default()
    }
    .strategy(kind);
    s.train = train.apply(s.train);
    s.forget_train = train.apply(s.forget_train);
    s.lora = s.lora.map(|l| lora.apply(l));
    if let Some(f) = ftc {
        if f.is_set() && kind != EditorKind::FtC {
            bail!(Error::config("--epsilon, --layer and --steps apply to ft_c only"));
        }
        s.ftc = s.ftc.map(|c| f.apply(c));
    }
    if let Some(l) = lambda {
        if !kind.forgets() {
            bail!(Error::config(format!("--lambda does not apply to {kind}")));
        }
        s.rate = Some(ForgettingRate::new(l)?);
    }
    Ok(s)
}

fn strategy_config(s: &EditorStrategy) -> Value {
    json!({
        "strategy": s,
        "learn_train": s.learn_train_config(),
        "forget_train": s.kind.forgets().then(|| s.forget_train_config()),
        "learn_lora": s.learn_lora_config(),
        "forget_lora": s.kind.forgets().then(|| s.forget_lora_config()).flatten(),
    })
}

// ---------------------------------------------------------------------------
// commands

fn gen_data(a: GenDataArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("gen-data");
    let corpus = generate_corpus(a.pairs, a.background, a.control, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for f in corpus_files(&a.out) {
        run.output(&f)?;
    }
    run.manifest_anchor = Some(a.out.clone());
    save_corpus(&corpus, &a.out)?;
    run.seed("corpus", a.seed);
    run.config = json!({ "pairs": a.pairs, "background": a.background, "control": a.control });
    println!(
        "wrote {} pairs, {} background and {} control records to {}",
        corpus.pairs.len(),
        corpus.background.len(),
        corpus.control.len(),
        a.out.display()
    );
    Ok(run)
}

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("pretrain");
    run.corpus_input(&a.corpus.corpus);
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let desk = DeskSetup::default();
    let mut model = desk.model_config(&vocab);
    model.seed = a.seed;
    model.d_model = a.d_model.unwrap_or(model.d_model);
    model.n_layers = a.layers.unwrap_or(model.n_layers);
    model.n_heads = a.heads.unwrap_or(model.n_heads);
    model.d_ff = a.d_ff.unwrap_or(model.d_ff);
    model.max_seq_len = a.max_seq_len.unwrap_or(model.max_seq_len);
    model.validate()?;
    let mut cfg = desk.pretrain;
    cfg.train = a.train.apply(cfg.train).with_seed(a.seed);
    cfg.target_accuracy = a.target_accuracy;
    run.seed("model", a.seed);
    run.seed("train", a.seed);
    run.config = json!({ "model": model, "pretrain": cfg });
    let (params, report) = pretrain(&model, &corpus, &vocab, &cfg)?;
    save_params(&mut run, params, &a.out)?;
    println!(
        "pretrained {} parameters for {} epochs; old-fact accuracy {:.1}%",
        model.num_params(),
        report.epochs_run,
        report.old_accuracy
    );
    if report.old_accuracy < cfg.target_accuracy {
        eprintln!(
            "warning: target accuracy {:.1}% not reached; raise --epochs",
            cfg.target_accuracy
        );
    }
    Ok(run)
}

fn train_original(a: TrainOriginalArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("train-original");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let base = load_params(&a.model)?;
    check_vocab(&base, &vocab, &a.model)?;
    let cfg = a.train.apply(DeskSetup::default().original).with_seed(a.seed);
    run.seed("train", a.seed);
    run.config = json!({ "train": cfg });
    let original = build_original_model(&base, &corpus, &vocab, &cfg)?;
    save_params(&mut run, original, &a.out)?;
    println!("trained original model on {} old facts", corpus.pairs.len());
    Ok(run)
}

fn forget(a: ForgetArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("forget");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    if let Some(d) = &a.delta {
        run.input(d);
    }
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let theta = load_params(&a.model)?;
    check_vocab(&theta, &vocab, &a.model)?;
    let kind = match a.method {
        ForgetMethod::FullFt => EditorKind::FFt,
        ForgetMethod::Lora => EditorKind::FLora,
    };
    let s = strategy_for(kind, a.seed, a.lambda, &a.train, &a.lora, None)?;
    s.validate(theta.config())?;
    let rate = s.rate.expect("forgetting kind");
    run.seed("strategy", a.seed);
    run.config = strategy_config(&s);
    let delta = match &a.delta {
        Some(path) => load_checkpoint(path)?.into_delta()?,
        None => strategy_knowledge_vector(&s, &theta, &corpus.old_records(), &vocab)?,
    };
    let forgotten = apply_forgetting(&theta, &delta, rate)?;
    if let Some(path) = &a.delta_out {
        run.output(path)?;
        save_checkpoint(&Checkpoint::Delta(delta.clone()), path)?;
    }
    save_params(&mut run, forgotten, &a.out)?;
    println!(
        "forgot with {} at lambda {rate}; old-knowledge vector norm {:.4}",
        a.method,
        delta.norm()
    );
    Ok(run)
}

fn learn(a: LearnArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("learn");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    if a.method.forgets() {
        bail!(Error::config("--method must be full_ft, lora or ft_c"));
    }
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let theta = load_params(&a.model)?;
    check_vocab(&theta, &vocab, &a.model)?;
    let s = strategy_for(a.method, a.seed, None, &a.train, &a.lora, Some(&a.ftc))?;
    s.validate(theta.config())?;
    run.seed("strategy", a.seed);
    run.config = strategy_config(&s);
    let new = corpus.new_records();
    let learned = match a.method {
        EditorKind::FullFt => fine_tune(&theta, &new, &vocab, &s.learn_train_config())?,
        EditorKind::Lora => {
            let adapters = init_adapters(theta.config(), &s.learn_lora_config().expect("lora kind"))?;
            let trained = lora_fine_tune(&theta, &adapters, &new, &vocab, &s.learn_train_config())?;
            merge_adapters(&theta, &trained)?
        }
        EditorKind::FtC => fine_tune_constrained(&theta, &new, &vocab, &s.ftc.expect("ft_c kind"))?,
        _ => unreachable!(),
    };
    save_params(&mut run, learned, &a.out)?;
    println!("learned {} new facts with {}", corpus.pairs.len(), a.method);
    Ok(run)
}

fn edit(a: EditArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("edit");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let theta = load_params(&a.model)?;
    check_vocab(&theta, &vocab, &a.model)?;
    let s = strategy_for(a.strategy, a.seed, a.lambda, &a.train, &a.lora, Some(&a.ftc))?;
    run.seed("strategy", a.seed);
    run.config = strategy_config(&s);
    let edited = run_editor(&s, &theta, &corpus, &vocab)?;
    if let Some(path) = &a.intermediate_out {
        let Some(mid) = edited.intermediate.clone() else {
            bail!(Error::config(format!("{} has no forgetting stage", a.strategy)));
        };
        save_params(&mut run, mid, path)?;
    }
    let stages: Vec<String> = edited
        .timings
        .iter()
        .map(|t| format!("{} {:.2}s", t.stage, t.seconds))
        .collect();
    save_params(&mut run, edited.params, &a.out)?;
    println!("edited with {} ({})", a.strategy, stages.join(", "));
    Ok(run)
}

fn eval(a: EvalArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("eval");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.pre);
    run.input(&a.post);
    if let Some(r) = &a.records {
        run.input(r);
    }
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let pre = load_params(&a.pre)?;
    let post = load_params(&a.post)?;
    check_vocab(&pre, &vocab, &a.pre)?;
    check_vocab(&post, &vocab, &a.post)?;
    let mut records: Vec<EvalRecord> = match &a.records {
        None if a.old => corpus.old_eval_records(),
        None => corpus.eval_records(),
        Some(path) => {
            let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            match parse_records(std::io::BufReader::new(f), a.format)? {
                Records::Zsre(r) => r,
                Records::Instruction(r) => r
                    .into_iter()
                    .map(|k| {
                        let p = k.prompt();
                        EvalRecord {
                            prompt: p.clone(),
                            target: k.output,
                            rephrase: p.clone(),
                            locality_prompt: p,
                            locality_answer_pre: None,
                            metadata: Default::default(),
                        }
                    })
                    .collect(),
            }
        }
    };
    if a.old && a.records.is_some() {
        bail!(Error::config("--old applies to the corpus records only"));
    }
    records.iter_mut().for_each(|r| r.locality_answer_pre = None);
    run.config = json!({ "max_new": a.max_new, "old_targets": a.old, "match": "exact token sequence" });
    let report = evaluate(&pre, &post, &records, &corpus.control, &vocab, a.max_new)?;
    save_text(&mut run, &to_csv("exact-match percentages of greedy answers", &[report])?, &a.out)?;
    println!(
        "reliability {:.1}  generality {:.1}  locality {:.1}  control {:.1} -> {:.1}  ({} records)",
        report.reliability,
        report.generality,
        report.locality,
        report.control_accuracy_pre,
        report.control_accuracy_post,
        report.n_records
    );
    Ok(run)
}

fn sweep(a: SweepArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("sweep");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    let methods = match a.method.as_str() {
        "both" => vec![ForgetMethod::FullFt, ForgetMethod::Lora],
        m => vec![parse_method(m).map_err(Error::Config)?],
    };
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let theta = load_params(&a.model)?;
    check_vocab(&theta, &vocab, &a.model)?;
    let mut result = SweepResult::default();
    let mut configs = Vec::new();
    for m in methods {
        let kind = match m {
            ForgetMethod::FullFt => EditorKind::FFt,
            ForgetMethod::Lora => EditorKind::FLora,
        };
        let s = strategy_for(kind, a.seed, None, &a.train, &a.lora, None)?;
        configs.push(strategy_config(&s));
        result.rows.extend(lambda_sweep(&theta, &corpus, &vocab, &a.lambda, &s)?.rows);
    }
    run.seed("strategy", a.seed);
    run.config = json!({ "lambdas": a.lambda, "methods": configs });
    save_text(&mut run, &result.to_csv()?, &a.out)?;
    for r in &result.rows {
        println!(
            "{:8} lambda {:<5} old reliability {:5.1}  generality {:5.1}  locality {:5.1}",
            r.method, r.lambda, r.reliability_old, r.generality_old, r.locality
        );
    }
    Ok(run)
}

fn time(a: TimeArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("time");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let theta = load_params(&a.model)?;
    check_vocab(&theta, &vocab, &a.model)?;
    let strategies = a
        .strategy
        .iter()
        .map(|&k| strategy_for(k, a.seed, None, &a.train, &a.lora, Some(&a.ftc).filter(|_| k == EditorKind::FtC)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    run.seed("strategy", a.seed);
    run.config = json!({ "counts": a.counts, "strategies": strategies.iter().map(strategy_config).collect::<Vec<_>>() });
    let table = time_strategies(&strategies, &theta, &corpus, &vocab, &a.counts)?;
    save_text(&mut run, &table.to_csv()?, &a.out)?;
    for r in &table.rows {
        println!("{:10} {:4} edits {:8.3}s", r.strategy, r.edit_count, r.seconds);
    }
    Ok(run)
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("analyze-params");
    let report: LayerDistanceReport = match (&a.model, &a.other, &a.delta) {
        (_, _, Some(d)) => {
            run.input(d);
            delta_norms(&load_checkpoint(d)?.into_delta()?)?
        }
        (Some(m), Some(o), None) => {
            run.input(m);
            run.input(o);
            layer_distances(&load_params(m)?, &load_params(o)?)?
        }
        _ => bail!(Error::config("give --model with --other, or --delta")),
    };
    save_text(&mut run, &report.to_csv(), &a.out)?;
    println!(
        "mean MLP distance {:.6}, mean attention distance {:.6}",
        report.mean_mlp_distance(),
        report.mean_attention_distance()
    );
    Ok(run)
}

fn compare(a: CompareArgs) -> anyhow::Result<Run> {
    let mut run = Run::new("compare");
    run.corpus_input(&a.corpus.corpus);
    run.input(&a.model);
    let (corpus, vocab) = load_lab(&a.corpus)?;
    let theta = load_params(&a.model)?;
    check_vocab(&theta, &vocab, &a.model)?;
    let strategies = a
        .strategy
        .iter()
        .map(|&k| {
            strategy_for(
                k,
                a.seed,
                a.lambda.filter(|_| k.forgets()),
                &a.train,
                &a.lora,
                Some(&a.ftc).filter(|_| k == EditorKind::FtC),
            )
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    run.seed("strategy", a.seed);
    run.config = json!({ "timing": a.timing, "strategies": strategies.iter().map(strategy_config).collect::<Vec<_>>() });
    let mut table = compare_strategies(&theta, &corpus, &vocab, &strategies)?;
    if !a.timing {
        table = table.without_timing();
    }
    save_text(&mut run, &table.to_csv()?, &a.out)?;
    for r in &table.rows {
        println!(
            "{:10} reliability {:5.1}  generality {:5.1}  locality {:5.1}  control {:5.1} -> {:5.1}",
            r.strategy, r.reliability, r.generality, r.locality, r.control_pre, r.control_post
        );
    }
    Ok(run)
}
