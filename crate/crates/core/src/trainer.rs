//! Supervised fine-tuning, the L∞-constrained single-layer baseline and
//! gradient-ascent unlearning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_all, KnowledgeRecord, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, names, GradScope, ParamSet, TokenSeq};
use crate::tensor::NamedTensors;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    /// Three epochs, micro-batches of 4 accumulated over 4 steps, Adam at 1e-3.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 4,
            grad_accum_steps: 4,
            optimizer: Optimizer::adam(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and makes every step a no-op.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::config("batch_size and grad_accum_steps must be at least 1"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::config("adam needs betas in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TrainConfig { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    /// Mean micro-batch loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: usize,
    pub stopped_early: bool,
}

// ---------------------------------------------------------------------------
// optimizer loop

struct OptState {
    kind: Optimizer,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn new(kind: Optimizer, lr: f64, trainable: &NamedTensors) -> Self {
        let zeros = || trainable.tensors().map(|t| vec![0.0; t.len()]).collect();
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (zeros(), zeros()),
        };
        OptState { kind, lr, t: 0, m, v }
    }

    /// Descends along `grads` (already averaged, sign applied by the caller).
    fn step(&mut self, trainable: &mut NamedTensors, grads: &[Vec<f64>]) {
        self.t += 1;
        for (k, ((_, param), g)) in trainable.iter_mut().zip(grads).enumerate() {
            let data = param.data_mut();
            match self.kind {
                Optimizer::Sgd => {
                    for (w, &gi) in data.iter_mut().zip(g) {
                        apply_delta(w, -self.lr * gi);
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..data.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        apply_delta(&mut data[i], -self.lr * update);
                    }
                }
            }
        }
    }
}

// A zero delta leaves the stored bits alone (keeps -0.0 intact).
#[inline]
fn apply_delta(w: &mut f32, delta: f64) {
    if delta != 0.0 {
        *w = (*w as f64 + delta) as f32;
    }
}

/// What the loop optimizes and how.
pub(crate) struct Objective<'a> {
    pub stage: &'a str,
    /// Maximize the loss instead of minimizing it.
    pub ascent: bool,
}

/// Mini-batch loop shared by every trainer: seeded per-epoch shuffling,
/// gradient accumulation, fresh optimizer state, divergence detection.
///
/// `grad_fn` maps the current trainable tensors and a micro-batch to the
/// mean loss and the gradients of the trainable tensors. `before_epoch` runs
/// at the start of every epoch and may end training early. `project` runs
/// after every optimizer step.
pub(crate) fn optimize(
    trainable: &mut NamedTensors,
    seqs: &[TokenSeq],
    cfg: &TrainConfig,
    objective: Objective<'_>,
    mut grad_fn: impl FnMut(&NamedTensors, &[TokenSeq]) -> Result<(f64, NamedTensors)>,
    mut before_epoch: impl FnMut(&NamedTensors, usize) -> Result<bool>,
    mut project: impl FnMut(&mut NamedTensors),
) -> Result<TrainStats> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::input("no training data"));
    }
    let mut stats = TrainStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(cfg.optimizer, cfg.learning_rate, trainable);
    let sign = if objective.ascent { -1.0 } else { 1.0 };
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    for epoch in 0..cfg.epochs {
        if before_epoch(trainable, epoch)? {
            stats.stopped_early = true;
            return Ok(stats);
        }
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut acc: Vec<Vec<f64>> = trainable.tensors().map(|t| vec![0.0; t.len()]).collect();
        let mut pending = 0usize;
        let mut loss_sum = 0.0;
        let mut micro = 0usize;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (i, chunk) in chunks.iter().enumerate() {
            let batch: Vec<TokenSeq> = chunk.iter().map(|&j| seqs[j].clone()).collect();
            let (loss, grads) = grad_fn(trainable, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: objective.stage.to_string(),
                    epoch,
                    step: stats.optimizer_steps,
                    loss,
                });
            }
            loss_sum += loss;
            micro += 1;
            for (a, g) in acc.iter_mut().zip(grads.tensors()) {
                for (ai, &gi) in a.iter_mut().zip(g.data()) {
                    *ai += gi as f64;
                }
            }
            pending += 1;
            if pending == cfg.grad_accum_steps || i + 1 == chunks.len() {
                let scale = sign / pending as f64;
                for a in acc.iter_mut() {
                    for ai in a.iter_mut() {
                        *ai *= scale;
                    }
                }
                opt.step(trainable, &acc);
                project(trainable);
                if !trainable.is_finite() {
                    return Err(Error::Divergence {
                        stage: objective.stage.to_string(),
                        epoch,
                        step: stats.optimizer_steps,
                        loss: f64::NAN,
                    });
                }
                stats.optimizer_steps += 1;
                for a in acc.iter_mut() {
                    a.fill(0.0);
                }
                pending = 0;
            }
        }
        stats.epoch_losses.push(loss_sum / micro as f64);
    }
    Ok(stats)
}

fn rewrap(params: &ParamSet, tensors: NamedTensors) -> ParamSet {
    ParamSet::from_tensors(*params.config(), tensors).expect("layout is preserved by training")
}

// ---------------------------------------------------------------------------
// full fine-tuning

pub fn fine_tune(params: &ParamSet, data: &[KnowledgeRecord], vocab: &Vocab, cfg: &TrainConfig) -> Result<ParamSet> {
    fine_tune_with_stats(params, data, vocab, cfg).map(|(p, _)| p)
}

pub fn fine_tune_with_stats(
    params: &ParamSet,
    data: &[KnowledgeRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainStats)> {
    let seqs = encode_all(vocab, data, params.config().max_seq_len)?;
    fine_tune_seqs(params, &seqs, cfg, "fine-tune", |_, _| Ok(false))
}

/// Full fine-tuning over pre-encoded sequences. `before_epoch` may stop
/// training at an epoch boundary.
pub fn fine_tune_seqs(
    params: &ParamSet,
    seqs: &[TokenSeq],
    cfg: &TrainConfig,
    stage: &str,
    mut before_epoch: impl FnMut(&ParamSet, usize) -> Result<bool>,
) -> Result<(ParamSet, TrainStats)> {
    if seqs.is_empty() {
        return Err(Error::input("no training data"));
    }
    if cfg.epochs == 0 {
        cfg.validate()?;
        return Ok((params.clone(), TrainStats::default()));
    }
    let mut trainable = params.tensors().clone();
    let stats = optimize(
        &mut trainable,
        seqs,
        cfg,
        Objective { stage, ascent: false },
        |t, batch| {
            let p = rewrap(params, t.clone());
            model::loss_and_grads(&p, batch).map(|(l, g)| (l, g.tensors().clone()))
        },
        |t, epoch| before_epoch(&rewrap(params, t.clone()), epoch),
        |_| {},
    )?;
    Ok((rewrap(params, trainable), stats))
}

// ---------------------------------------------------------------------------
// constrained fine-tuning

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtcConfig {
    /// Block whose MLP is trained; `None` selects the last block.
    pub target_layer: Option<usize>,
    /// Passes over the data; every mini-batch is one optimizer step.
    pub steps: usize,
    pub batch_size: usize,
    /// L∞ radius around the initial weights.
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for FtcConfig {
    fn default() -> Self {
        FtcConfig {
            target_layer: None,
            steps: 5,
            batch_size: 1,
            epsilon: 0.1,
            learning_rate: 1e-2,
        }
    }
}

impl FtcConfig {
    pub fn layer(&self, n_layers: usize) -> Result<usize> {
        let layer = self.target_layer.unwrap_or(n_layers - 1);
        if layer >= n_layers {
            return Err(Error::config(format!(
                "target layer {layer} out of range for {n_layers} layers"
            )));
        }
        Ok(layer)
    }

    pub fn validate(&self, n_layers: usize) -> Result<usize> {
        if self.steps == 0 {
            return Err(Error::config("FT-c needs at least one step"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("FT-c batch size must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("FT-c epsilon must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("FT-c learning rate must be finite and non-negative"));
        }
        self.layer(n_layers)
    }
}

/// Nearest `f32` to `w` inside `[w0 - eps, w0 + eps]`, checked in `f64`.
fn clamp_within(w: f32, w0: f32, eps: f64) -> f32 {
    let (w64, c) = (w as f64, w0 as f64);
    if (w64 - c).abs() <= eps {
        return w;
    }
    let mut out = if w64 > c { (c + eps) as f32 } else { (c - eps) as f32 };
    while (out as f64 - c).abs() > eps {
        out = if out > w0 { out.next_down() } else { out.next_up() };
    }
    out
}

/// Trains only the MLP tensors of one block, projecting every weight back
/// into an L∞ ball around its starting value after each step.
pub fn fine_tune_constrained(
    params: &ParamSet,
    data: &[KnowledgeRecord],
    vocab: &Vocab,
    cfg: &FtcConfig,
) -> Result<ParamSet> {
    let layer = cfg.validate(params.config().n_layers)?;
    let seqs = encode_all(vocab, data, params.config().max_seq_len)?;
    if seqs.is_empty() {
        return Err(Error::input("no training data"));
    }
    let mlp = names::mlp_tensors(layer);
    let mut trainable = NamedTensors::new();
    for name in &mlp {
        trainable.insert(name.clone(), params.tensors().require(name)?.clone())?;
    }
    let initial = trainable.clone();
    let train = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.steps,
        batch_size: cfg.batch_size,
        grad_accum_steps: 1,
        optimizer: Optimizer::adam(),
        seed: 0,
        shuffle: false,
    };
    let splice = |t: &NamedTensors| {
        params
            .map_tensors(|all| {
                for (name, tensor) in t.iter() {
                    *all.get_mut(name).expect("mlp tensor") = tensor.clone();
                }
                Ok(())
            })
            .expect("spliced tensors keep the layout")
    };
    optimize(
        &mut trainable,
        &seqs,
        &train,
        Objective {
            stage: "fine-tune-constrained",
            ascent: false,
        },
        |t, batch| {
            let (loss, grads) = model::loss_and_grads_scoped(&splice(t), batch, GradScope::LayerMlp(layer))?;
            let mut out = NamedTensors::new();
            for name in &mlp {
                out.insert(name.clone(), grads.tensors().require(name)?.clone())?;
            }
            Ok((loss, out))
        },
        |_, _| Ok(false),
        |t| {
            for ((_, w), w0) in t.iter_mut().zip(initial.tensors()) {
                for (wi, &w0i) in w.data_mut().iter_mut().zip(w0.data()) {
                    *wi = clamp_within(*wi, w0i, cfg.epsilon);
                }
            }
        },
    )?;
    Ok(splice(&trainable))
}

// ---------------------------------------------------------------------------
// gradient ascent

/// Maximizes the loss on `data`, stopping at the first epoch boundary where
/// the mean loss has reached `loss_cap`.
pub fn gradient_ascent_forget(
    params: &ParamSet,
    data: &[KnowledgeRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    loss_cap: f64,
) -> Result<ParamSet> {
    if !(loss_cap >= 0.0) {
        return Err(Error::config("loss cap must be non-negative"));
    }
    let seqs = encode_all(vocab, data, params.config().max_seq_len)?;
    if seqs.is_empty() {
        return Err(Error::input("no training data"));
    }
    cfg.validate()?;
    if cfg.epochs == 0 || loss_cap == 0.0 {
        return Ok(params.clone());
    }
    let mut trainable = params.tensors().clone();
    optimize(
        &mut trainable,
        &seqs,
        cfg,
        Objective {
            stage: "gradient-ascent",
            ascent: true,
        },
        |t, batch| {
            let p = rewrap(params, t.clone());
            model::loss_and_grads(&p, batch).map(|(l, g)| (l, g.tensors().clone()))
        },
        |t, _| {
            let loss = model::loss(&rewrap(params, t.clone()), &seqs)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "gradient-ascent".into(),
                    epoch: 0,
                    step: 0,
                    loss,
                });
            }
            Ok(loss >= loss_cap)
        },
        |_| {},
    )?;
    Ok(rewrap(params, trainable))
}

/// Default ascent cap: the loss of a uniform predictor.
pub fn default_loss_cap(vocab_size: usize) -> f64 {
    (vocab_size as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (ParamSet, Vec<KnowledgeRecord>, Vocab) {
        let corpus = generate_corpus(12, 4, 2, 3).unwrap();
        let vocab = Vocab::build(&corpus, 512).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            seed: 1,
        };
        (init_model(&cfg).unwrap(), corpus.old_records(), vocab)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (p, data, vocab) = setup();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(fine_tune(&p, &data, &vocab, &cfg).unwrap().bit_eq(&p));
    }

    #[test]
    fn runs_are_reproducible() {
        let (p, data, vocab) = setup();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let a = fine_tune(&p, &data, &vocab, &cfg).unwrap();
        let b = fine_tune(&p, &data, &vocab, &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&p));
        let c = fine_tune(&p, &data, &vocab, &cfg.with_seed(9)).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn empty_data_is_rejected() {
        let (p, _, vocab) = setup();
        assert!(matches!(fine_tune(&p, &[], &vocab, &TrainConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (p, data, vocab) = setup();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        assert!(matches!(fine_tune(&p, &data, &vocab, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn clamp_stays_inside_ball() {
        for (w, w0, eps) in [(1.0f32, 0.1f32, 1e-12), (-3.0, 0.3, 0.05), (0.7, 0.69, 0.1), (0.2, 0.1, 0.1)] {
            let c = clamp_within(w, w0, eps);
            assert!((c as f64 - w0 as f64).abs() <= eps, "{w} {w0} {eps} -> {c}");
        }
    }

    #[test]
    fn constrained_touches_only_target_mlp() {
        let (p, data, vocab) = setup();
        let cfg = FtcConfig { target_layer: Some(0), ..Default::default() };
        let out = fine_tune_constrained(&p, &data, &vocab, &cfg).unwrap();
        let mlp = names::mlp_tensors(0);
        for ((name, a), b) in out.tensors().iter().zip(p.tensors().tensors()) {
            if mlp.iter().any(|n| n == name) {
                assert!(a.max_abs_diff(b) <= cfg.epsilon + 1e-7);
            } else {
                assert!(a.bit_eq(b), "{name} changed");
            }
        }
        let bad = FtcConfig { target_layer: Some(7), ..Default::default() };
        assert!(matches!(fine_tune_constrained(&p, &data, &vocab, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn ascent_edge_cases() {
        let (p, data, vocab) = setup();
        let zero_lr = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(gradient_ascent_forget(&p, &data, &vocab, &zero_lr, 100.0).unwrap().bit_eq(&p));
        assert!(gradient_ascent_forget(&p, &data, &vocab, &TrainConfig::default(), 0.0)
            .unwrap()
            .bit_eq(&p));
    }
}
