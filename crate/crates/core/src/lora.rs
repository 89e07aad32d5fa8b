//! Low-rank adapters on attention projections.
//!
//! Each adapted projection `W` (shape `[out, in]`) gets a down factor `A`
//! (`[rank, in]`) and an up factor `B` (`[out, rank]`). The adapted weight is
//! `W + (alpha / rank) * B A`. `B` starts at zero, so fresh adapters leave the
//! model unchanged.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_all, KnowledgeRecord, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, names, GradScope, Logits, ModelConfig, Overrides, ParamSet, Projection};
use crate::tensor::{NamedTensors, Tensor};
use crate::trainer::{optimize, Objective, TrainConfig, TrainStats};

pub const A_SUFFIX: &str = ".lora_A";
pub const B_SUFFIX: &str = ".lora_B";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Projection>,
    pub seed: u64,
}

impl Default for LoraConfig {
    /// Rank 8, alpha 16, on the query and value projections.
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: [Projection::Query, Projection::Value].into_iter().collect(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        LoraConfig { seed, ..self.clone() }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 || self.rank > model.d_model {
            return Err(Error::config(format!(
                "LoRA rank {} must lie in 1..={}",
                self.rank, model.d_model
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("LoRA alpha must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("LoRA needs at least one target projection"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    config: LoraConfig,
    n_layers: usize,
    d_model: usize,
    tensors: NamedTensors,
}

fn a_name(layer: usize, p: Projection) -> String {
    format!("{}{A_SUFFIX}", names::projection(layer, p))
}

fn b_name(layer: usize, p: Projection) -> String {
    format!("{}{B_SUFFIX}", names::projection(layer, p))
}

impl LoraAdapterSet {
    /// Wraps factor tensors, checking they are keyed exactly by
    /// `targets × layers` with compatible shapes.
    pub fn from_tensors(config: LoraConfig, model: &ModelConfig, tensors: NamedTensors) -> Result<Self> {
        config.validate(model)?;
        let (d, r) = (model.d_model, config.rank);
        let mut expected = NamedTensors::new();
        for l in 0..model.n_layers {
            for &p in &config.targets {
                expected.insert(a_name(l, p), Tensor::zeros(&[r, d]))?;
                expected.insert(b_name(l, p), Tensor::zeros(&[d, r]))?;
            }
        }
        expected.check_layout(&tensors)?;
        if !tensors.is_finite() {
            return Err(Error::config("adapter factors hold non-finite values"));
        }
        Ok(LoraAdapterSet {
            config,
            n_layers: model.n_layers,
            d_model: d,
            tensors,
        })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn bit_eq(&self, other: &LoraAdapterSet) -> bool {
        self.config == other.config && self.tensors.bit_eq(&other.tensors)
    }

    fn factors(&self, layer: usize, p: Projection) -> (&Tensor, &Tensor) {
        (
            self.tensors.get(&a_name(layer, p)).expect("adapter layout"),
            self.tensors.get(&b_name(layer, p)).expect("adapter layout"),
        )
    }

    fn check_compatible(&self, params: &ParamSet) -> Result<()> {
        let cfg = params.config();
        if cfg.n_layers != self.n_layers || cfg.d_model != self.d_model {
            return Err(Error::config(format!(
                "adapters for {} layers of width {} do not fit a model with {} layers of width {}",
                self.n_layers, self.d_model, cfg.n_layers, cfg.d_model
            )));
        }
        Ok(())
    }

    /// Effective `W + s·B·A` in `f64` for every adapted projection.
    fn effective_weights(&self, params: &ParamSet) -> Overrides {
        let (d, r, s) = (self.d_model, self.config.rank, self.config.scale());
        let mut out = Overrides::new();
        for l in 0..self.n_layers {
            for &p in &self.config.targets {
                let name = names::projection(l, p);
                let w = params.get(&name).expect("canonical layout");
                let (a, b) = self.factors(l, p);
                let mut eff: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
                for o in 0..d {
                    for i in 0..d {
                        let mut acc = 0.0;
                        for k in 0..r {
                            acc += b.data()[o * r + k] as f64 * a.data()[k * d + i] as f64;
                        }
                        eff[o * d + i] += s * acc;
                    }
                }
                out.insert(name, eff);
            }
        }
        out
    }
}

/// Fresh adapters: `A` uniform in `±1/sqrt(in_dim)`, `B` zero.
pub fn init_adapters(model: &ModelConfig, cfg: &LoraConfig) -> Result<LoraAdapterSet> {
    model.validate()?;
    cfg.validate(model)?;
    let (d, r) = (model.d_model, cfg.rank);
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = NamedTensors::new();
    for l in 0..model.n_layers {
        for &p in &cfg.targets {
            let a = (0..r * d)
                .map(|_| ((2.0 * rng.random::<f64>() - 1.0) * bound) as f32)
                .collect();
            tensors.insert(a_name(l, p), Tensor::from_vec(&[r, d], a)?)?;
            tensors.insert(b_name(l, p), Tensor::zeros(&[d, r]))?;
        }
    }
    LoraAdapterSet::from_tensors(cfg.clone(), model, tensors)
}

/// Folds adapters into dense weights: `W' = W + (alpha / rank) B A` on each
/// targeted projection; every other tensor is copied unchanged.
pub fn merge_adapters(params: &ParamSet, adapters: &LoraAdapterSet) -> Result<ParamSet> {
    adapters.check_compatible(params)?;
    let (d, r, s) = (adapters.d_model, adapters.config.rank, adapters.config.scale());
    params.map_tensors(|tensors| {
        for l in 0..adapters.n_layers {
            for &p in &adapters.config.targets {
                let (a, b) = adapters.factors(l, p);
                let w = tensors.require(&names::projection(l, p))?;
                if w.shape() != [d, d] {
                    return Err(Error::config(format!(
                        "projection {} has shape {:?}",
                        names::projection(l, p),
                        w.shape()
                    )));
                }
                let w = tensors.get_mut(&names::projection(l, p)).expect("checked");
                let data = w.data_mut();
                for o in 0..d {
                    for i in 0..d {
                        let mut acc = 0.0;
                        for k in 0..r {
                            acc += b.data()[o * r + k] as f64 * a.data()[k * d + i] as f64;
                        }
                        let inc = s * acc;
                        if inc != 0.0 {
                            data[o * d + i] = (data[o * d + i] as f64 + inc) as f32;
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

/// Forward pass through the base weights with adapters applied on the fly,
/// without rounding the adapted weights to `f32`.
pub fn forward_adapted(params: &ParamSet, adapters: &LoraAdapterSet, ids: &[u32]) -> Result<Logits> {
    adapters.check_compatible(params)?;
    model::forward_overridden(params, &adapters.effective_weights(params), ids)
}

/// Mean answer-position loss of the adapted model and its gradient with
/// respect to every adapter factor.
pub fn lora_loss_and_grads(
    params: &ParamSet,
    adapters: &LoraAdapterSet,
    batch: &[crate::model::TokenSeq],
) -> Result<(f64, NamedTensors)> {
    adapters.check_compatible(params)?;
    let (d, r, s) = (adapters.d_model, adapters.config.rank, adapters.config.scale());
    let overrides = adapters.effective_weights(params);
    let (loss, grads) = model::loss_and_grads_overridden(params, Some(&overrides), batch, GradScope::All)?;
    let mut out = NamedTensors::new();
    for l in 0..adapters.n_layers {
        for &p in &adapters.config.targets {
            let dw = grads.tensors().require(&names::projection(l, p))?.data();
            let (a, b) = adapters.factors(l, p);
            let (a, b) = (a.data(), b.data());
            // dA = s Bᵀ dW, dB = s dW Aᵀ
            let mut da = vec![0.0f32; r * d];
            for k in 0..r {
                for i in 0..d {
                    let mut acc = 0.0;
                    for o in 0..d {
                        acc += b[o * r + k] as f64 * dw[o * d + i] as f64;
                    }
                    da[k * d + i] = (s * acc) as f32;
                }
            }
            let mut db = vec![0.0f32; d * r];
            for o in 0..d {
                for k in 0..r {
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += dw[o * d + i] as f64 * a[k * d + i] as f64;
                    }
                    db[o * r + k] = (s * acc) as f32;
                }
            }
            out.insert(a_name(l, p), Tensor::from_vec(&[r, d], da)?)?;
            out.insert(b_name(l, p), Tensor::from_vec(&[d, r], db)?)?;
        }
    }
    Ok((loss, out))
}

/// Trains the adapter factors on `data` with the base weights frozen.
pub fn lora_fine_tune(
    params: &ParamSet,
    adapters: &LoraAdapterSet,
    data: &[KnowledgeRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<LoraAdapterSet> {
    lora_fine_tune_with_stats(params, adapters, data, vocab, cfg).map(|(a, _)| a)
}

pub fn lora_fine_tune_with_stats(
    params: &ParamSet,
    adapters: &LoraAdapterSet,
    data: &[KnowledgeRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(LoraAdapterSet, TrainStats)> {
    adapters.check_compatible(params)?;
    let seqs = encode_all(vocab, data, params.config().max_seq_len)?;
    if seqs.is_empty() {
        return Err(Error::input("no training data"));
    }
    if cfg.epochs == 0 {
        cfg.validate()?;
        return Ok((adapters.clone(), TrainStats::default()));
    }
    let model_cfg = *params.config();
    let wrap = |t: &NamedTensors| LoraAdapterSet::from_tensors(adapters.config.clone(), &model_cfg, t.clone());
    let mut trainable = adapters.tensors.clone();
    let stats = optimize(
        &mut trainable,
        &seqs,
        cfg,
        Objective {
            stage: "lora-fine-tune",
            ascent: false,
        },
        |t, batch| lora_loss_and_grads(params, &wrap(t)?, batch),
        |_, _| Ok(false),
        |_| {},
    )?;
    Ok((wrap(&trainable)?, stats))
}
