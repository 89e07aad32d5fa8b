//! Scripted studies: forgetting-rate sweeps, editing-time tables, strategy
//! comparisons, and the desk-scale setup they all share.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arith::{apply_forgetting, ForgettingRate};
use crate::clock::Stopwatch;
use crate::data::{generate_corpus, Corpus, Vocab};
use crate::editors::{
    build_original_model, pretrain, run_editor, strategy_knowledge_vector, EditorKind, EditorStrategy, ForgetMethod,
    PretrainConfig, PretrainReport,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DEFAULT_MAX_NEW};
use crate::model::{ModelConfig, ParamSet};
use crate::trainer::TrainConfig;

// ---------------------------------------------------------------------------
// desk setup

/// Every knob of the desk-scale lab in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub n_pairs: usize,
    pub n_background: usize,
    pub n_control: usize,
    pub corpus_seed: u64,
    pub max_vocab: usize,
    /// `vocab_size` is overwritten by the built vocabulary.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub original: TrainConfig,
    /// Learning and forgetting stages of every strategy.
    pub edit: TrainConfig,
    /// Learning rate used instead of `edit.learning_rate` when adapters
    /// are trained.
    pub lora_learning_rate: f64,
    pub strategy_seed: u64,
}

impl Default for DeskSetup {
    fn default() -> Self {
        DeskSetup {
            n_pairs: 200,
            n_background: 200,
            n_control: 40,
            corpus_seed: 7,
            max_vocab: 512,
            model: ModelConfig {
                vocab_size: 0,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ff: 256,
                max_seq_len: 12,
                seed: 1,
            },
            pretrain: PretrainConfig::default(),
            original: TrainConfig::default(),
            edit: TrainConfig {
                learning_rate: 2e-3,
                epochs: 8,
                ..TrainConfig::default()
            },
            lora_learning_rate: 3e-3,
            strategy_seed: 11,
        }
    }
}

/// Corpus, vocabulary and the two trained models of a desk run.
#[derive(Debug, Clone)]
pub struct DeskLab {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub base: ParamSet,
    pub original: ParamSet,
    pub pretrain_report: PretrainReport,
}

impl DeskSetup {
    pub fn corpus(&self) -> Result<Corpus> {
        generate_corpus(self.n_pairs, self.n_background, self.n_control, self.corpus_seed)
    }

    pub fn vocab(&self, corpus: &Corpus) -> Result<Vocab> {
        Vocab::build(corpus, self.max_vocab)
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            ..self.model
        }
    }

    /// Strategy with the desk training settings and default rate.
    pub fn strategy(&self, kind: EditorKind) -> EditorStrategy {
        let mut train = self.edit;
        if kind.uses_lora() {
            train.learning_rate = self.lora_learning_rate;
        }
        EditorStrategy::new(kind, train, self.strategy_seed)
    }

    /// Generates the corpus, pretrains and builds the original model.
    pub fn build(&self) -> Result<DeskLab> {
        let corpus = self.corpus()?;
        let vocab = self.vocab(&corpus)?;
        let (base, pretrain_report) = pretrain(&self.model_config(&vocab), &corpus, &vocab, &self.pretrain)?;
        let original = build_original_model(&base, &corpus, &vocab, &self.original)?;
        Ok(DeskLab {
            corpus,
            vocab,
            base,
            original,
            pretrain_report,
        })
    }
}

// ---------------------------------------------------------------------------
// CSV

pub const SWEEP_NOTE: &str = "old-fact recall after the forgetting stage alone, per forgetting rate";
pub const COMPARE_NOTE: &str = "one edit per strategy on identical corpus and seeds; exact-match percentages";
pub const TIMING_NOTE: &str = "wall-clock seconds per edit batch, single-threaded, warm-up excluded";

/// Serializes rows under a `# note` line and a header row.
pub fn to_csv<T: Serialize>(note: &str, rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::input(format!("CSV write failed: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| Error::input(format!("CSV write failed: {e}")))?;
    let mut out = String::new();
    for line in note.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(std::str::from_utf8(&body).expect("CSV output is UTF-8"));
    Ok(out)
}

/// Parses rows written by [`to_csv`]; `#` lines are skipped.
pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// forgetting-rate sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub method: ForgetMethod,
    pub reliability_old: f64,
    pub generality_old: f64,
    pub locality: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        to_csv(SWEEP_NOTE, &self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Ok(SweepResult { rows: from_csv(text)? })
    }

    pub fn for_method(&self, method: ForgetMethod) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// Forgets the old facts at each rate using `strategy`'s forgetting stage,
/// then scores the result against the old targets. The knowledge vector is
/// fitted once and shared by every rate.
pub fn lambda_sweep(
    original: &ParamSet,
    corpus: &Corpus,
    vocab: &Vocab,
    lambdas: &[f64],
    strategy: &EditorStrategy,
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::input("no forgetting rates given"));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::input("forgetting rates must be distinct"));
    }
    let rates = sorted
        .iter()
        .map(|&l| ForgettingRate::new(l))
        .collect::<Result<Vec<_>>>()?;
    let method = strategy
        .kind
        .forget_method()
        .ok_or_else(|| Error::config(format!("strategy {} does not forget", strategy.kind)))?;
    let old = corpus.old_eval_records();
    let delta = strategy_knowledge_vector(strategy, original, &corpus.old_records(), vocab)?;
    let mut rows = Vec::with_capacity(rates.len());
    for rate in rates {
        let forgotten = apply_forgetting(original, &delta, rate)?;
        let rep = evaluate(original, &forgotten, &old, &[], vocab, DEFAULT_MAX_NEW)?;
        rows.push(SweepRow {
            lambda: rate.value(),
            method,
            reliability_old: rep.reliability,
            generality_old: rep.generality,
            locality: rep.locality,
        });
    }
    Ok(SweepResult { rows })
}

// ---------------------------------------------------------------------------
// timing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub edit_count: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn to_csv(&self) -> Result<String> {
        to_csv(TIMING_NOTE, &self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Ok(TimingTable { rows: from_csv(text)? })
    }

    pub fn seconds(&self, strategy: &str, edit_count: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.edit_count == edit_count)
            .map(|r| r.seconds)
    }
}

/// Times each strategy editing the first `n` pairs for every `n` in
/// `edit_counts`. One untimed warm-up run precedes the measurements.
pub fn time_strategies(
    strategies: &[EditorStrategy],
    original: &ParamSet,
    corpus: &Corpus,
    vocab: &Vocab,
    edit_counts: &[usize],
) -> Result<TimingTable> {
    let (Some(first), Some(&smallest)) = (strategies.first(), edit_counts.iter().min()) else {
        return Err(Error::input("timing needs at least one strategy and one edit count"));
    };
    if let Some(&n) = edit_counts.iter().find(|&&n| n == 0 || n > corpus.pairs.len()) {
        return Err(Error::input(format!(
            "edit count {n} outside 1..={}",
            corpus.pairs.len()
        )));
    }
    run_editor(first, original, &corpus.truncated(smallest), vocab)?;
    let mut rows = Vec::new();
    for s in strategies {
        for &n in edit_counts {
            let subset = corpus.truncated(n);
            let clock = Stopwatch::start();
            run_editor(s, original, &subset, vocab)?;
            rows.push(TimingRow {
                strategy: s.kind.as_str().to_string(),
                edit_count: n,
                seconds: clock.seconds(),
            });
        }
    }
    Ok(TimingTable { rows })
}

// ---------------------------------------------------------------------------
// strategy comparison

pub const ORIGINAL_ROW: &str = "original";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    pub control_pre: f64,
    pub control_post: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn to_csv(&self) -> Result<String> {
        to_csv(COMPARE_NOTE, &self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Ok(CompareTable { rows: from_csv(text)? })
    }

    pub fn row(&self, strategy: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// The same table with every duration zeroed, for byte-stable output.
    pub fn without_timing(mut self) -> Self {
        for r in &mut self.rows {
            r.seconds = 0.0;
        }
        self
    }
}

/// Runs and scores every strategy on the same inputs. The first row is the
/// unedited original model.
pub fn compare_strategies(
    original: &ParamSet,
    corpus: &Corpus,
    vocab: &Vocab,
    strategies: &[EditorStrategy],
) -> Result<CompareTable> {
    let records = corpus.eval_records();
    let row = |name: &str, post: &ParamSet, seconds: f64| -> Result<CompareRow> {
        let rep = evaluate(original, post, &records, &corpus.control, vocab, DEFAULT_MAX_NEW)?;
        Ok(CompareRow {
            strategy: name.to_string(),
            reliability: rep.reliability,
            generality: rep.generality,
            locality: rep.locality,
            control_pre: rep.control_accuracy_pre,
            control_post: rep.control_accuracy_post,
            seconds,
        })
    };
    let mut rows = vec![row(ORIGINAL_ROW, original, 0.0)?];
    for s in strategies {
        let edited = run_editor(s, original, corpus, vocab)?;
        rows.push(row(s.kind.as_str(), &edited.params, edited.total_seconds())?);
    }
    Ok(CompareTable { rows })
}
