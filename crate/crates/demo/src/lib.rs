//! A tiny F-Learning lab for the browser: forgetting curves, per-layer
//! parameter distances and single edits, all on a model small enough to
//! train in a page.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use flearn::arith::{apply_forgetting, layer_distances, ForgettingRate, LayerDistanceReport, TaskVector};
use flearn::editors::{run_editor, strategy_knowledge_vector, EditorKind, ForgetMethod, PretrainConfig};
use flearn::eval::{answer, evaluate, EditReport, DEFAULT_MAX_NEW};
use flearn::experiments::{lambda_sweep, DeskLab, DeskSetup, SweepResult};
use flearn::model::ModelConfig;
use flearn::trainer::TrainConfig;
use flearn::Error;

/// How many edited facts an edit result shows side by side.
const SAMPLES: usize = 6;

/// Desk setup scaled down to a few dozen facts and a 32-wide model.
pub fn tiny_setup(seed: u64) -> DeskSetup {
    DeskSetup {
        n_pairs: 24,
        n_background: 24,
        n_control: 8,
        corpus_seed: seed,
        max_vocab: 512,
        model: ModelConfig {
            vocab_size: 0,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 12,
            seed,
        },
        pretrain: PretrainConfig {
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 80,
                batch_size: 8,
                grad_accum_steps: 1,
                ..TrainConfig::default()
            },
            target_accuracy: 95.0,
            check_every: 5,
        },
        original: TrainConfig::default(),
        edit: TrainConfig {
            learning_rate: 3e-3,
            epochs: 6,
            batch_size: 4,
            grad_accum_steps: 1,
            ..TrainConfig::default()
        },
        lora_learning_rate: 1e-2,
        strategy_seed: seed,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub facts: usize,
    pub vocab: usize,
    pub parameters: usize,
    pub pretrain_epochs: usize,
    pub base_old_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub prompt: String,
    pub target: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EditOutcome {
    pub strategy: String,
    pub lambda: Option<f64>,
    pub report: EditReport,
    pub samples: Vec<Sample>,
}

pub struct Lab {
    setup: DeskSetup,
    lab: DeskLab,
    full_ft_delta: Option<TaskVector>,
}

impl Lab {
    pub fn build(seed: u64) -> flearn::Result<Lab> {
        let setup = tiny_setup(seed);
        let lab = setup.build()?;
        Ok(Lab {
            setup,
            lab,
            full_ft_delta: None,
        })
    }

    pub fn summary(&self) -> Summary {
        Summary {
            facts: self.lab.corpus.pairs.len(),
            vocab: self.lab.vocab.len(),
            parameters: self.lab.original.config().num_params(),
            pretrain_epochs: self.lab.pretrain_report.epochs_run,
            base_old_accuracy: self.lab.pretrain_report.old_accuracy,
        }
    }

    /// Old-fact recall after forgetting alone at each rate.
    pub fn forgetting_curve(&self, method: ForgetMethod, lambdas: &[f64]) -> flearn::Result<SweepResult> {
        let kind = match method {
            ForgetMethod::FullFt => EditorKind::FFt,
            ForgetMethod::Lora => EditorKind::FLora,
        };
        let l = &self.lab;
        lambda_sweep(&l.original, &l.corpus, &l.vocab, lambdas, &self.setup.strategy(kind))
    }

    /// Distance between the original model and the model after full
    /// fine-tuning forgetting at `lambda`, per tensor.
    pub fn forgetting_distances(&mut self, lambda: f64) -> flearn::Result<LayerDistanceReport> {
        let rate = ForgettingRate::new(lambda)?;
        let l = &self.lab;
        let delta = match &self.full_ft_delta {
            Some(d) => d,
            None => {
                let s = self.setup.strategy(EditorKind::FFt);
                let d = strategy_knowledge_vector(&s, &l.original, &l.corpus.old_records(), &l.vocab)?;
                self.full_ft_delta.insert(d)
            }
        };
        layer_distances(&apply_forgetting(&l.original, delta, rate)?, &l.original)
    }

    /// One edit of every new fact with `kind`, scored against the original.
    pub fn edit(&self, kind: EditorKind, lambda: Option<f64>) -> flearn::Result<EditOutcome> {
        let mut strategy = self.setup.strategy(kind);
        if let Some(l) = lambda {
            if !kind.forgets() {
                return Err(Error::Config(format!("strategy {kind} does not forget")));
            }
            strategy = strategy.with_rate(ForgettingRate::new(l)?);
        }
        let l = &self.lab;
        let edited = run_editor(&strategy, &l.original, &l.corpus, &l.vocab)?;
        let report = evaluate(
            &l.original,
            &edited.params,
            &l.corpus.eval_records(),
            &l.corpus.control,
            &l.vocab,
            DEFAULT_MAX_NEW,
        )?;
        let samples = l
            .corpus
            .pairs
            .iter()
            .take(SAMPLES)
            .map(|p| {
                Ok(Sample {
                    prompt: p.eval.prompt.clone(),
                    target: p.eval.target.clone(),
                    before: answer(&l.original, &l.vocab, &p.eval.prompt, DEFAULT_MAX_NEW)?,
                    after: answer(&edited.params, &l.vocab, &p.eval.prompt, DEFAULT_MAX_NEW)?,
                })
            })
            .collect::<flearn::Result<_>>()?;
        Ok(EditOutcome {
            strategy: kind.as_str().to_string(),
            lambda: strategy.rate.map(ForgettingRate::value),
            report,
            samples,
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

/// Browser handle on a [`Lab`]. Results are JSON strings.
#[wasm_bindgen(js_name = Lab)]
pub struct WebLab(Lab);

#[wasm_bindgen(js_class = Lab)]
impl WebLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<WebLab, JsError> {
        Lab::build(seed as u64).map(WebLab).map_err(js_err)
    }

    pub fn summary(&self) -> Result<String, JsError> {
        to_json(&self.0.summary())
    }

    /// `method` is `full_ft` or `lora`; `lambdas` a comma-separated list.
    #[wasm_bindgen(js_name = forgettingCurve)]
    pub fn forgetting_curve(&self, method: &str, lambdas: &str) -> Result<String, JsError> {
        let method = ForgetMethod::parse(method).ok_or_else(|| js_err(format!("unknown method `{method}`")))?;
        let lambdas = lambdas
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| js_err(format!("bad rate `{s}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        to_json(&self.0.forgetting_curve(method, &lambdas).map_err(js_err)?.rows)
    }

    #[wasm_bindgen(js_name = forgettingDistances)]
    pub fn forgetting_distances(&mut self, lambda: f64) -> Result<String, JsError> {
        to_json(&self.0.forgetting_distances(lambda).map_err(js_err)?.entries)
    }

    /// A negative `lambda` keeps the strategy's default rate.
    pub fn edit(&self, strategy: &str, lambda: f64) -> Result<String, JsError> {
        let kind = EditorKind::parse(strategy).ok_or_else(|| js_err(format!("unknown strategy `{strategy}`")))?;
        let lambda = (lambda >= 0.0 && kind.forgets()).then_some(lambda);
        to_json(&self.0.edit(kind, lambda).map_err(js_err)?)
    }
}
