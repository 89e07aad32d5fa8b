//! End-to-end knowledge-update strategies and the construction of the
//! pre-update model they start from.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{apply_forgetting, extract_delta, ForgettingRate, TaskVector};
use crate::clock::Stopwatch;
use crate::data::{encode_all, Corpus, KnowledgeRecord, Vocab};
use crate::error::{Error, Result};
use crate::eval::{record_accuracy, DEFAULT_MAX_NEW};
use crate::lora::{init_adapters, lora_fine_tune, merge_adapters, LoraConfig};
use crate::model::{init_model, ModelConfig, ParamSet};
use crate::trainer::{fine_tune, fine_tune_constrained, fine_tune_seqs, FtcConfig, TrainConfig};

// ---------------------------------------------------------------------------
// base model and original model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// `epochs` is the upper bound; training stops early once the target
    /// accuracy is reached.
    pub train: TrainConfig,
    /// Old-fact exact-match accuracy (percent) that ends pretraining.
    pub target_accuracy: f64,
    /// Accuracy is measured every this many epochs.
    pub check_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 120,
                batch_size: 8,
                grad_accum_steps: 1,
                ..TrainConfig::default()
            },
            target_accuracy: 95.0,
            check_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub old_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Background, control and old-fact records in one training set.
pub fn pretraining_records(corpus: &Corpus) -> Vec<KnowledgeRecord> {
    let mut out = corpus.background.clone();
    out.extend(corpus.control.iter().cloned());
    out.extend(corpus.old_records());
    out
}

/// Trains a freshly initialized model until it answers the old facts.
pub fn pretrain(
    model: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<(ParamSet, PretrainReport)> {
    if cfg.check_every == 0 {
        return Err(Error::config("check_every must be positive"));
    }
    let init = init_model(model)?;
    let seqs = encode_all(vocab, &pretraining_records(corpus), model.max_seq_len)?;
    let old = corpus.old_records();
    let mut accuracy = None;
    let (params, stats) = fine_tune_seqs(&init, &seqs, &cfg.train, "pretrain", |p, epoch| {
        if epoch == 0 || epoch % cfg.check_every != 0 {
            return Ok(false);
        }
        let acc = record_accuracy(p, vocab, &old, DEFAULT_MAX_NEW)?;
        accuracy = Some(acc);
        Ok(acc >= cfg.target_accuracy)
    })?;
    let epochs_run = stats.epoch_losses.len();
    // the hook only saw the state at the start of the last epoch it ran
    let old_accuracy = match accuracy {
        Some(acc) if stats.stopped_early => acc,
        _ => record_accuracy(&params, vocab, &old, DEFAULT_MAX_NEW)?,
    };
    Ok((
        params,
        PretrainReport {
            epochs_run,
            old_accuracy,
            epoch_losses: stats.epoch_losses,
        },
    ))
}

/// The pre-update model: `base` fine-tuned on the old facts.
pub fn build_original_model(base: &ParamSet, corpus: &Corpus, vocab: &Vocab, cfg: &TrainConfig) -> Result<ParamSet> {
    fine_tune(base, &corpus.old_records(), vocab, cfg).map_err(|e| e.in_stage("train-original"))
}

// ---------------------------------------------------------------------------
// strategies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    FullFt,
    Lora,
    FtC,
    FFt,
    FLora,
    FLoraFt,
}

impl EditorKind {
    pub const ALL: [EditorKind; 6] = [
        EditorKind::FullFt,
        EditorKind::Lora,
        EditorKind::FtC,
        EditorKind::FFt,
        EditorKind::FLora,
        EditorKind::FLoraFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditorKind::FullFt => "full_ft",
            EditorKind::Lora => "lora",
            EditorKind::FtC => "ft_c",
            EditorKind::FFt => "f_ft",
            EditorKind::FLora => "f_lora",
            EditorKind::FLoraFt => "f_lora_ft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn forgets(self) -> bool {
        matches!(self, EditorKind::FFt | EditorKind::FLora | EditorKind::FLoraFt)
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, EditorKind::Lora | EditorKind::FLora | EditorKind::FLoraFt)
    }

    /// How the old-knowledge vector is obtained, for forgetting kinds.
    pub fn forget_method(self) -> Option<ForgetMethod> {
        match self {
            EditorKind::FFt => Some(ForgetMethod::FullFt),
            EditorKind::FLora | EditorKind::FLoraFt => Some(ForgetMethod::Lora),
            _ => None,
        }
    }

    /// Forgetting rates tuned for 7B models: 0.3, 0.7 and 3.
    pub fn default_rate(self) -> Option<f64> {
        match self {
            EditorKind::FFt => Some(0.3),
            EditorKind::FLora => Some(0.7),
            EditorKind::FLoraFt => Some(3.0),
            _ => None,
        }
    }
}

impl fmt::Display for EditorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetMethod {
    FullFt,
    Lora,
}

impl ForgetMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ForgetMethod::FullFt => "full_ft",
            ForgetMethod::Lora => "lora",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_ft" => Some(ForgetMethod::FullFt),
            "lora" => Some(ForgetMethod::Lora),
            _ => None,
        }
    }
}

impl fmt::Display for ForgetMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Independent streams derived from a strategy seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    ForgetTrain = 1,
    LearnTrain = 2,
    ForgetAdapters = 3,
    LearnAdapters = 4,
}

/// Deterministic sub-seed: the first output of a ChaCha8 generator seeded
/// with `seed` on stream `stream`.
pub fn sub_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorStrategy {
    pub kind: EditorKind,
    pub rate: Option<ForgettingRate>,
    /// Learning stage. Its `seed` is replaced by a derived sub-seed.
    pub train: TrainConfig,
    /// Stage that fits the old-knowledge vector. Seed derived as above.
    pub forget_train: TrainConfig,
    pub lora: Option<LoraConfig>,
    pub ftc: Option<FtcConfig>,
    pub seed: u64,
}

impl EditorStrategy {
    /// Strategy with the kind's default rate and sub-configurations; both
    /// training stages start from `train`.
    pub fn new(kind: EditorKind, train: TrainConfig, seed: u64) -> Self {
        EditorStrategy {
            kind,
            rate: kind.default_rate().map(|r| ForgettingRate::new(r).expect("default rates are valid")),
            train,
            forget_train: train,
            lora: kind.uses_lora().then(LoraConfig::default),
            ftc: (kind == EditorKind::FtC).then(FtcConfig::default),
            seed,
        }
    }

    pub fn with_rate(mut self, rate: ForgettingRate) -> Self {
        self.rate = Some(rate);
        self
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let k = self.kind;
        if self.rate.is_some() != k.forgets() {
            return Err(Error::config(format!(
                "strategy {k} {} a forgetting rate",
                if k.forgets() { "requires" } else { "does not take" }
            )));
        }
        if self.lora.is_some() != k.uses_lora() {
            return Err(Error::config(format!(
                "strategy {k} {} a LoRA configuration",
                if k.uses_lora() { "requires" } else { "does not take" }
            )));
        }
        if self.ftc.is_some() != (k == EditorKind::FtC) {
            return Err(Error::config(format!("constraint settings belong to ft_c only, not {k}")));
        }
        self.train.validate()?;
        if k.forgets() {
            self.forget_train.validate()?;
        }
        if let Some(lora) = &self.lora {
            lora.validate(model)?;
        }
        if let Some(ftc) = &self.ftc {
            ftc.validate(model.n_layers)?;
        }
        Ok(())
    }

    pub fn learn_train_config(&self) -> TrainConfig {
        self.train.with_seed(sub_seed(self.seed, SeedStream::LearnTrain))
    }

    pub fn forget_train_config(&self) -> TrainConfig {
        self.forget_train.with_seed(sub_seed(self.seed, SeedStream::ForgetTrain))
    }

    pub fn learn_lora_config(&self) -> Option<LoraConfig> {
        self.lora
            .as_ref()
            .map(|l| l.with_seed(sub_seed(self.seed, SeedStream::LearnAdapters)))
    }

    pub fn forget_lora_config(&self) -> Option<LoraConfig> {
        self.lora
            .as_ref()
            .map(|l| l.with_seed(sub_seed(self.seed, SeedStream::ForgetAdapters)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditedModel {
    pub params: ParamSet,
    /// The model after forgetting, before learning.
    pub intermediate: Option<ParamSet>,
    pub timings: Vec<StageTiming>,
    pub strategy: EditorStrategy,
}

impl EditedModel {
    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.seconds).sum()
    }
}

/// Knowledge parameters of `data`: a model fitted to it, minus `theta`.
/// With the LoRA method the fitted model is `theta` with trained adapters
/// merged in. Seeds in `train` and `lora` are used as given.
pub fn knowledge_vector(
    method: ForgetMethod,
    theta: &ParamSet,
    data: &[KnowledgeRecord],
    vocab: &Vocab,
    train: &TrainConfig,
    lora: &LoraConfig,
) -> Result<TaskVector> {
    let fitted = match method {
        ForgetMethod::FullFt => fine_tune(theta, data, vocab, train)?,
        ForgetMethod::Lora => {
            let adapters = init_adapters(theta.config(), lora)?;
            let trained = lora_fine_tune(theta, &adapters, data, vocab, train)?;
            merge_adapters(theta, &trained)?
        }
    };
    let mut delta = extract_delta(&fitted, theta)?;
    delta.source = format!("{method} on {} records", data.len());
    Ok(delta)
}

/// The old-knowledge vector a forgetting strategy subtracts, with the
/// strategy's derived seeds.
pub fn strategy_knowledge_vector(
    strategy: &EditorStrategy,
    original: &ParamSet,
    old: &[KnowledgeRecord],
    vocab: &Vocab,
) -> Result<TaskVector> {
    let method = strategy
        .kind
        .forget_method()
        .ok_or_else(|| Error::config(format!("strategy {} does not forget", strategy.kind)))?;
    let lora = strategy.forget_lora_config().unwrap_or_default();
    knowledge_vector(method, original, old, vocab, &strategy.forget_train_config(), &lora)
}

fn lora_learn(strategy: &EditorStrategy, theta: &ParamSet, data: &[KnowledgeRecord], vocab: &Vocab) -> Result<ParamSet> {
    let lora = strategy.learn_lora_config().expect("validated");
    let adapters = init_adapters(theta.config(), &lora)?;
    let trained = lora_fine_tune(theta, &adapters, data, vocab, &strategy.learn_train_config())?;
    merge_adapters(theta, &trained)
}

/// Applies `strategy` to `original`: optionally forget the old facts, then
/// learn the new ones.
pub fn run_editor(strategy: &EditorStrategy, original: &ParamSet, corpus: &Corpus, vocab: &Vocab) -> Result<EditedModel> {
    strategy.validate(original.config())?;
    let new = corpus.new_records();
    let mut timings = Vec::new();

    let (theta, intermediate) = match strategy.rate {
        Some(rate) => {
            let clock = Stopwatch::start();
            let delta = strategy_knowledge_vector(strategy, original, &corpus.old_records(), vocab)
                .map_err(|e| e.in_stage("forget"))?;
            let forgotten = apply_forgetting(original, &delta, rate)?;
            timings.push(StageTiming {
                stage: "forget".into(),
                seconds: clock.seconds(),
            });
            (forgotten.clone(), Some(forgotten))
        }
        None => (original.clone(), None),
    };

    let clock = Stopwatch::start();
    let params = match strategy.kind {
        EditorKind::FullFt | EditorKind::FFt | EditorKind::FLoraFt => {
            fine_tune(&theta, &new, vocab, &strategy.learn_train_config())
        }
        EditorKind::Lora | EditorKind::FLora => lora_learn(strategy, &theta, &new, vocab),
        EditorKind::FtC => fine_tune_constrained(&theta, &new, vocab, strategy.ftc.as_ref().expect("validated")),
    }
    .map_err(|e| e.in_stage("learn"))?;
    timings.push(StageTiming {
        stage: "learn".into(),
        seconds: clock.seconds(),
    });

    Ok(EditedModel {
        params,
        intermediate,
        timings,
        strategy: strategy.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in EditorKind::ALL {
            assert_eq!(EditorKind::parse(k.as_str()), Some(k));
            assert_eq!(k.forgets(), k.default_rate().is_some());
        }
        assert_eq!(EditorKind::parse("rome"), None);
    }

    #[test]
    fn sub_seeds_are_distinct_and_stable() {
        let s: Vec<u64> = [
            SeedStream::ForgetTrain,
            SeedStream::LearnTrain,
            SeedStream::ForgetAdapters,
            SeedStream::LearnAdapters,
        ]
        .into_iter()
        .map(|st| sub_seed(7, st))
        .collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(sub_seed(7, SeedStream::LearnTrain), s[1]);
        assert_ne!(sub_seed(8, SeedStream::LearnTrain), s[1]);
    }

    #[test]
    fn validation_ties_sub_configs_to_kind() {
        let m = ModelConfig::default();
        for k in EditorKind::ALL {
            EditorStrategy::new(k, TrainConfig::default(), 0).validate(&m).unwrap();
        }
        let mut s = EditorStrategy::new(EditorKind::FullFt, TrainConfig::default(), 0);
        s.rate = Some(ForgettingRate::new(0.3).unwrap());
        assert!(s.validate(&m).is_err());
        let mut s = EditorStrategy::new(EditorKind::FLora, TrainConfig::default(), 0);
        s.lora = None;
        assert!(s.validate(&m).is_err());
    }
}
