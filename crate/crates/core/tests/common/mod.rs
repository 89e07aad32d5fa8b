//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use flearn::data::{generate_corpus, Corpus, Vocab};
use flearn::editors::{build_original_model, pretrain, PretrainConfig};
use flearn::model::{loss, loss_and_grads, ModelConfig, ParamSet, TokenSeq};
use flearn::tensor::NamedTensors;
use flearn::trainer::TrainConfig;

pub const FD_STEP: f32 = 1e-3;
pub const FD_MAX_REL: f64 = 1e-3;
// below this magnitude the comparison is absolute
const FD_FLOOR: f64 = 1e-3;

/// The d_model = 8, two-layer, 16-token model of the gradient checks.
pub fn grad_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        seed,
    }
}

pub fn grad_batch() -> Vec<TokenSeq> {
    vec![
        TokenSeq::new(vec![4, 9, 3, 12, 1], 3),
        TokenSeq::new(vec![7, 7, 2, 3, 5, 6, 1], 4),
        TokenSeq::new(vec![15, 3, 8], 2),
    ]
}

fn with_value(params: &ParamSet, name: &str, i: usize, v: f32) -> ParamSet {
    params
        .map_tensors(|t: &mut NamedTensors| {
            t.get_mut(name).unwrap().data_mut()[i] = v;
            Ok(())
        })
        .unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error per tensor between analytic and central-difference
/// gradients.
pub fn finite_difference_errors(params: &ParamSet, batch: &[TokenSeq]) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_grads(params, batch).unwrap();
    let mut worst = Vec::new();
    for (name, t) in params.tensors().iter() {
        let analytic = grads.get(name).unwrap();
        let mut max_err: f64 = 0.0;
        for i in 0..t.len() {
            let w = t.data()[i];
            let (hi, lo) = (w + FD_STEP, w - FD_STEP);
            let l_hi = loss(&with_value(params, name, i, hi), batch).unwrap();
            let l_lo = loss(&with_value(params, name, i, lo), batch).unwrap();
            let numeric = (l_hi - l_lo) / (hi as f64 - lo as f64);
            max_err = max_err.max(relative_error(analytic.data()[i] as f64, numeric));
        }
        worst.push((name.to_string(), max_err));
    }
    worst
}

pub struct TinyLab {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub base: ParamSet,
    pub original: ParamSet,
}

/// A small corpus and model that train in a fraction of a second.
pub fn tiny_lab() -> TinyLab {
    let corpus = generate_corpus(16, 16, 8, 3).unwrap();
    let vocab = Vocab::build(&corpus, 512).unwrap();
    let model = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 12,
        seed: 9,
    };
    let cfg = PretrainConfig {
        train: TrainConfig {
            learning_rate: 3e-3,
            epochs: 6,
            batch_size: 8,
            grad_accum_steps: 1,
            ..TrainConfig::default()
        },
        target_accuracy: 100.0,
        check_every: 100,
    };
    let (base, _) = pretrain(&model, &corpus, &vocab, &cfg).unwrap();
    let original = build_original_model(&base, &corpus, &vocab, &TrainConfig::default()).unwrap();
    TinyLab {
        corpus,
        vocab,
        base,
        original,
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        epochs: 2,
        ..TrainConfig::default()
    }
}
