//! Desk-scale decoder-only transformer.
//!
//! Pre-norm blocks (RMS norm with a learned gain), learned positional
//! embeddings, multi-head causal self-attention and a tanh-GELU MLP. Parameters
//! are stored as `f32`; all arithmetic runs in `f64` and results are rounded
//! back on the way out, so outputs do not depend on platform FMA or SIMD
//! choices.
//!
//! Projection matrices are stored `[out, in]` and applied as `y = W x`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    /// Equal in every field except the initialization seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        ModelConfig { seed: 0, ..*self } == ModelConfig { seed: 0, ..*other }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn num_params(&self) -> usize {
        layout(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// The four attention projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Projection::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical tensor names.
pub mod names {
    use super::Projection;

    pub const TOKEN_EMBED: &str = "embed.tokens";
    pub const POS_EMBED: &str = "embed.positions";
    pub const FINAL_NORM: &str = "final_norm";
    pub const LM_HEAD: &str = "lm_head";

    pub fn attn_norm(layer: usize) -> String {
        format!("layers.{layer}.attn_norm")
    }

    pub fn projection(layer: usize, p: Projection) -> String {
        format!("layers.{layer}.attn.{}", p.as_str())
    }

    pub fn mlp_norm(layer: usize) -> String {
        format!("layers.{layer}.mlp_norm")
    }

    pub fn mlp_up(layer: usize) -> String {
        format!("layers.{layer}.mlp.up")
    }

    pub fn mlp_up_bias(layer: usize) -> String {
        format!("layers.{layer}.mlp.up_bias")
    }

    pub fn mlp_down(layer: usize) -> String {
        format!("layers.{layer}.mlp.down")
    }

    pub fn mlp_down_bias(layer: usize) -> String {
        format!("layers.{layer}.mlp.down_bias")
    }

    /// The MLP tensors (matrices and biases) of one block.
    pub fn mlp_tensors(layer: usize) -> [String; 4] {
        [
            mlp_up(layer),
            mlp_up_bias(layer),
            mlp_down(layer),
            mlp_down_bias(layer),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let d = cfg.d_model;
    let slot = |name: String, shape: Vec<usize>, init| Slot { name, shape, init };
    let mut out = vec![
        slot(names::TOKEN_EMBED.into(), vec![cfg.vocab_size, d], Init::Uniform),
        slot(names::POS_EMBED.into(), vec![cfg.max_seq_len, d], Init::Uniform),
    ];
    for l in 0..cfg.n_layers {
        out.push(slot(names::attn_norm(l), vec![d], Init::Ones));
        for p in Projection::ALL {
            out.push(slot(names::projection(l, p), vec![d, d], Init::Uniform));
        }
        out.push(slot(names::mlp_norm(l), vec![d], Init::Ones));
        out.push(slot(names::mlp_up(l), vec![cfg.d_ff, d], Init::Uniform));
        out.push(slot(names::mlp_up_bias(l), vec![cfg.d_ff], Init::Zeros));
        out.push(slot(names::mlp_down(l), vec![d, cfg.d_ff], Init::Uniform));
        out.push(slot(names::mlp_down_bias(l), vec![d], Init::Zeros));
    }
    out.push(slot(names::FINAL_NORM.into(), vec![d], Init::Ones));
    out.push(slot(names::LM_HEAD.into(), vec![cfg.vocab_size, d], Init::Uniform));
    out
}

/// Model parameters: a name-indexed tensor collection in the canonical
/// layout for its [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    tensors: NamedTensors,
}

impl ParamSet {
    /// Wraps `tensors`, checking that they form exactly the canonical layout
    /// of `config` and hold only finite values.
    pub fn from_tensors(config: ModelConfig, tensors: NamedTensors) -> Result<Self> {
        config.validate()?;
        let slots = layout(&config);
        if slots.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} tensors for this configuration, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, (name, t)) in slots.iter().zip(tensors.iter()) {
            if slot.name != name {
                return Err(Error::config(format!(
                    "expected tensor `{}`, found `{name}`",
                    slot.name
                )));
            }
            if slot.shape != t.shape() {
                return Err(Error::config(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::config(format!("tensor `{name}` holds non-finite values")));
            }
        }
        Ok(ParamSet { config, tensors })
    }

    /// All-zero parameters (norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = NamedTensors::new();
        for slot in layout(&config) {
            tensors.insert(slot.name, Tensor::zeros(&slot.shape))?;
        }
        Ok(ParamSet { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn into_tensors(self) -> NamedTensors {
        self.tensors
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.config == other.config && self.tensors.bit_eq(&other.tensors)
    }

    /// Applies `f` to a copy of the named tensors and re-validates.
    pub fn map_tensors(&self, f: impl FnOnce(&mut NamedTensors) -> Result<()>) -> Result<Self> {
        let mut tensors = self.tensors.clone();
        f(&mut tensors)?;
        ParamSet::from_tensors(self.config, tensors)
    }
}

/// Gradients with the exact name/shape layout of the [`ParamSet`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    tensors: NamedTensors,
}

impl GradSet {
    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

/// A token sequence with answer-only supervision: positions at or after
/// `answer_start` are trained, the prompt is not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub answer_start: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, answer_start: usize) -> Self {
        TokenSeq { ids, answer_start }
    }

    /// Number of supervised target positions. Position 0 has no context and
    /// is never a target.
    pub fn answer_len(&self) -> usize {
        self.ids.len().saturating_sub(self.answer_start.max(1))
    }
}

/// Builds deterministic initial parameters: uniform in `±1/sqrt(fan_in)` for
/// matrices, ones for norm gains, zeros for biases.
pub fn init_model(config: &ModelConfig) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = NamedTensors::new();
    for slot in layout(config) {
        let t = match slot.init {
            Init::Zeros => Tensor::zeros(&slot.shape),
            Init::Ones => Tensor::filled(&slot.shape, 1.0),
            Init::Uniform => {
                let scale = 1.0 / (slot.shape[1] as f64).sqrt();
                let n = slot.shape.iter().product();
                let data = (0..n)
                    .map(|_| ((2.0 * rng.random::<f64>() - 1.0) * scale) as f32)
                    .collect();
                Tensor::from_vec(&slot.shape, data)?
            }
        };
        tensors.insert(slot.name, t)?;
    }
    Ok(ParamSet {
        config: *config,
        tensors,
    })
}

/// Row-major logits, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    positions: usize,
    vocab: usize,
    data: Vec<f32>,
}

impl Logits {
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.positions, self.vocab]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::input(format!(
            "sequence of length {} exceeds max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Causal forward pass: logits for every input position.
pub fn forward(params: &ParamSet, ids: &[u32]) -> Result<Logits> {
    check_ids(&params.config, ids)?;
    let w = Weights::new(params, None);
    let rows: Vec<usize> = (0..ids.len()).collect();
    let cache = w.run(ids, &rows);
    Ok(Logits {
        positions: ids.len(),
        vocab: params.config.vocab_size,
        data: cache.logits.iter().map(|&v| v as f32).collect(),
    })
}

/// Replacement `f64` values for named tensors, used to evaluate a model whose
/// effective weights are not representable as a stored [`ParamSet`].
pub(crate) type Overrides = std::collections::HashMap<String, Vec<f64>>;

pub(crate) fn forward_overridden(params: &ParamSet, overrides: &Overrides, ids: &[u32]) -> Result<Logits> {
    check_ids(&params.config, ids)?;
    let w = Weights::new(params, Some(overrides));
    let rows: Vec<usize> = (0..ids.len()).collect();
    let cache = w.run(ids, &rows);
    Ok(Logits {
        positions: ids.len(),
        vocab: params.config.vocab_size,
        data: cache.logits.iter().map(|&v| v as f32).collect(),
    })
}

/// Which gradients a backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Only the MLP tensors of one block; the backward pass stops there.
    LayerMlp(usize),
}

/// Mean token-level cross-entropy over the answer positions of `batch`
/// and its exact gradient.
pub fn loss_and_grads(params: &ParamSet, batch: &[TokenSeq]) -> Result<(f64, GradSet)> {
    loss_and_grads_scoped(params, batch, GradScope::All)
}

/// [`loss_and_grads`] restricted to `scope`; gradients outside the scope are zero.
pub fn loss_and_grads_scoped(
    params: &ParamSet,
    batch: &[TokenSeq],
    scope: GradScope,
) -> Result<(f64, GradSet)> {
    loss_and_grads_overridden(params, None, batch, scope)
}

pub(crate) fn loss_and_grads_overridden(
    params: &ParamSet,
    overrides: Option<&Overrides>,
    batch: &[TokenSeq],
    scope: GradScope,
) -> Result<(f64, GradSet)> {
    let cfg = &params.config;
    if let GradScope::LayerMlp(l) = scope {
        if l >= cfg.n_layers {
            return Err(Error::config(format!(
                "layer {l} out of range for {} layers",
                cfg.n_layers
            )));
        }
    }
    let total = check_batch(cfg, batch)?;
    let w = Weights::new(params, overrides);
    let mut grads = w.zeros_like();
    let scale = 1.0 / total as f64;
    let mut loss = 0.0;
    for seq in batch {
        loss += w.accumulate(seq, scale, scope, &mut grads);
    }
    let grads = grads.into_named(cfg);
    Ok((loss * scale, GradSet { tensors: grads }))
}

/// Mean answer-position cross-entropy without gradients.
pub fn loss(params: &ParamSet, batch: &[TokenSeq]) -> Result<f64> {
    let total = check_batch(&params.config, batch)?;
    let w = Weights::new(params, None);
    let mut sum = 0.0;
    for seq in batch {
        let (rows, targets) = answer_rows(seq);
        let cache = w.run(&seq.ids[..seq.ids.len() - 1], &rows);
        let v = params.config.vocab_size;
        for (k, &target) in targets.iter().enumerate() {
            let row = &cache.logits[k * v..(k + 1) * v];
            sum += cross_entropy(row, target as usize);
        }
    }
    Ok(sum / total as f64)
}

fn check_batch(cfg: &ModelConfig, batch: &[TokenSeq]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut total = 0;
    for seq in batch {
        check_ids(cfg, &seq.ids)?;
        if seq.answer_start > seq.ids.len() {
            return Err(Error::input(format!(
                "answer_start {} beyond sequence length {}",
                seq.answer_start,
                seq.ids.len()
            )));
        }
        total += seq.answer_len();
    }
    if total == 0 {
        return Err(Error::input("batch has no answer positions"));
    }
    Ok(total)
}

/// Input rows whose logits are supervised, and the token each must predict.
fn answer_rows(seq: &TokenSeq) -> (Vec<usize>, Vec<u32>) {
    let start = seq.answer_start.max(1);
    let rows = (start - 1..seq.ids.len() - 1).collect();
    let targets = seq.ids[start..].to_vec();
    (rows, targets)
}

fn cross_entropy(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln() - row[target]
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`. Stops at `eos` (not included in the
/// output), after `max_new` tokens, or when the context window is full.
pub fn greedy_decode(params: &ParamSet, prompt: &[u32], max_new: usize, eos: u32) -> Result<Vec<u32>> {
    let cfg = &params.config;
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    if prompt.len() > cfg.max_seq_len - 1 {
        return Err(Error::input(format!(
            "prompt of length {} leaves no room in a context of {}",
            prompt.len(),
            cfg.max_seq_len
        )));
    }
    check_ids(cfg, prompt)?;
    let w = Weights::new(params, None);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ids.len() < cfg.max_seq_len {
        let cache = w.run(&ids, &[ids.len() - 1]);
        let row: Vec<f32> = cache.logits.iter().map(|&v| v as f32).collect();
        let next = argmax(&row) as u32;
        if next == eos {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// f64 compute kernels

struct LayerWeights {
    attn_norm: Vec<f64>,
    proj: [Vec<f64>; 4],
    mlp_norm: Vec<f64>,
    up: Vec<f64>,
    up_bias: Vec<f64>,
    down: Vec<f64>,
    down_bias: Vec<f64>,
}

struct Weights {
    d: usize,
    heads: usize,
    ff: usize,
    vocab: usize,
    tok: Vec<f64>,
    pos: Vec<f64>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f64>,
    head: Vec<f64>,
}

struct LayerCache {
    x_in: Vec<f64>,
    h1: Vec<f64>,
    r1: Vec<f64>,
    qkv: [Vec<f64>; 3],
    // per head, row-major [t][s] over s <= t
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    x_mid: Vec<f64>,
    h2: Vec<f64>,
    r2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hf: Vec<f64>,
    rf: Vec<f64>,
    rows: Vec<usize>,
    logits: Vec<f64>,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `y[t] = W x[t]` for `x` of shape `[n, inp]` and `W` of shape `[out, inp]`.
fn matmul_wt(x: &[f64], w: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for t in 0..n {
        let xt = &x[t * inp..(t + 1) * inp];
        let yt = &mut y[t * out..(t + 1) * out];
        for (o, yo) in yt.iter_mut().enumerate() {
            *yo = dot(xt, &w[o * inp..(o + 1) * inp]);
        }
    }
    y
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Backward of `y = W x`: accumulates `dW` (if given) and returns `dx`.
fn matmul_wt_back(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    n: usize,
    inp: usize,
    out: usize,
    dw: Option<&mut [f64]>,
    want_dx: bool,
) -> Vec<f64> {
    if let Some(dw) = dw {
        for t in 0..n {
            let xt = &x[t * inp..(t + 1) * inp];
            for o in 0..out {
                let g = dy[t * out + o];
                if g != 0.0 {
                    axpy(g, xt, &mut dw[o * inp..(o + 1) * inp]);
                }
            }
        }
    }
    let mut dx = Vec::new();
    if want_dx {
        dx = vec![0.0; n * inp];
        for t in 0..n {
            let dxt = &mut dx[t * inp..(t + 1) * inp];
            for o in 0..out {
                let g = dy[t * out + o];
                if g != 0.0 {
                    axpy(g, &w[o * inp..(o + 1) * inp], dxt);
                }
            }
        }
    }
    dx
}

fn rms_norm(x: &[f64], gain: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut r = vec![0.0; n];
    for t in 0..n {
        let xt = &x[t * d..(t + 1) * d];
        let rt = (dot(xt, xt) / d as f64 + NORM_EPS).sqrt();
        r[t] = rt;
        for i in 0..d {
            y[t * d + i] = gain[i] * xt[i] / rt;
        }
    }
    (y, r)
}

/// Backward of RMS norm; accumulates the gain gradient when asked.
fn rms_norm_back(
    dy: &[f64],
    x: &[f64],
    r: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    dgain: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dgain = dgain;
    for t in 0..n {
        let xt = &x[t * d..(t + 1) * d];
        let dyt = &dy[t * d..(t + 1) * d];
        let rt = r[t];
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyt[i] * xt[i] / rt;
            }
        }
        let mut mean = 0.0;
        for i in 0..d {
            mean += dyt[i] * gain[i] * xt[i] / rt;
        }
        mean /= d as f64;
        for i in 0..d {
            dx[t * d + i] = (dyt[i] * gain[i] - xt[i] / rt * mean) / rt;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

impl Weights {
    fn new(params: &ParamSet, overrides: Option<&Overrides>) -> Self {
        let cfg = &params.config;
        let t = |name: &str| match overrides.and_then(|o| o.get(name)) {
            Some(v) => v.clone(),
            None => to_f64(params.tensors.get(name).expect("canonical layout")),
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerWeights {
                attn_norm: t(&names::attn_norm(l)),
                proj: Projection::ALL.map(|p| t(&names::projection(l, p))),
                mlp_norm: t(&names::mlp_norm(l)),
                up: t(&names::mlp_up(l)),
                up_bias: t(&names::mlp_up_bias(l)),
                down: t(&names::mlp_down(l)),
                down_bias: t(&names::mlp_down_bias(l)),
            })
            .collect();
        Weights {
            d: cfg.d_model,
            heads: cfg.n_heads,
            ff: cfg.d_ff,
            vocab: cfg.vocab_size,
            tok: t(names::TOKEN_EMBED),
            pos: t(names::POS_EMBED),
            layers,
            final_norm: t(names::FINAL_NORM),
            head: t(names::LM_HEAD),
        }
    }

    fn zeros_like(&self) -> Weights {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Weights {
            d: self.d,
            heads: self.heads,
            ff: self.ff,
            vocab: self.vocab,
            tok: z(&self.tok),
            pos: z(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: z(&l.attn_norm),
                    proj: [z(&l.proj[0]), z(&l.proj[1]), z(&l.proj[2]), z(&l.proj[3])],
                    mlp_norm: z(&l.mlp_norm),
                    up: z(&l.up),
                    up_bias: z(&l.up_bias),
                    down: z(&l.down),
                    down_bias: z(&l.down_bias),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            head: z(&self.head),
        }
    }

    fn into_named(self, cfg: &ModelConfig) -> NamedTensors {
        let mut out = NamedTensors::new();
        let mut put = |name: String, v: Vec<f64>| {
            let shape = layout_shape(cfg, &name);
            let data = v.into_iter().map(|x| x as f32).collect();
            out.insert(name, Tensor::from_vec(&shape, data).expect("shape"))
                .expect("unique");
        };
        put(names::TOKEN_EMBED.into(), self.tok);
        put(names::POS_EMBED.into(), self.pos);
        for (l, lw) in self.layers.into_iter().enumerate() {
            put(names::attn_norm(l), lw.attn_norm);
            for (p, v) in Projection::ALL.into_iter().zip(lw.proj) {
                put(names::projection(l, p), v);
            }
            put(names::mlp_norm(l), lw.mlp_norm);
            put(names::mlp_up(l), lw.up);
            put(names::mlp_up_bias(l), lw.up_bias);
            put(names::mlp_down(l), lw.down);
            put(names::mlp_down_bias(l), lw.down_bias);
        }
        put(names::FINAL_NORM.into(), self.final_norm);
        put(names::LM_HEAD.into(), self.head);
        out
    }

    /// Forward pass over `ids`, producing logits only for `rows`.
    fn run(&self, ids: &[u32], rows: &[usize]) -> Cache {
        let (d, ff, n) = (self.d, self.ff, ids.len());
        let mut x = vec![0.0; n * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for i in 0..d {
                x[t * d + i] = self.tok[id * d + i] + self.pos[t * d + i];
            }
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for lw in &self.layers {
            let x_in = x;
            let (h1, r1) = rms_norm(&x_in, &lw.attn_norm, n, d);
            let q = matmul_wt(&h1, &lw.proj[0], n, d, d);
            let k = matmul_wt(&h1, &lw.proj[1], n, d, d);
            let v = matmul_wt(&h1, &lw.proj[2], n, d, d);
            let (att, probs) = self.attention(&q, &k, &v, n);
            let o = matmul_wt(&att, &lw.proj[3], n, d, d);
            let x_mid: Vec<f64> = x_in.iter().zip(&o).map(|(a, b)| a + b).collect();
            let (h2, r2) = rms_norm(&x_mid, &lw.mlp_norm, n, d);
            let mut u = matmul_wt(&h2, &lw.up, n, d, ff);
            for t in 0..n {
                for f in 0..ff {
                    u[t * ff + f] += lw.up_bias[f];
                }
            }
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let m = matmul_wt(&g, &lw.down, n, ff, d);
            let mut x_out = x_mid.clone();
            for t in 0..n {
                for i in 0..d {
                    x_out[t * d + i] += m[t * d + i] + lw.down_bias[i];
                }
            }
            layers.push(LayerCache {
                x_in,
                h1,
                r1,
                qkv: [q, k, v],
                probs,
                att,
                x_mid,
                h2,
                r2,
                u,
                g,
            });
            x = x_out;
        }
        let (hf, rf) = rms_norm(&x, &self.final_norm, n, d);
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &t in rows {
            sel.extend_from_slice(&hf[t * d..(t + 1) * d]);
        }
        let logits = matmul_wt(&sel, &self.head, rows.len(), d, self.vocab);
        Cache {
            layers,
            x_final: x,
            hf,
            rf,
            rows: rows.to_vec(),
            logits,
        }
    }

    fn attention(&self, q: &[f64], k: &[f64], v: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (d, hd) = (self.d, self.d / self.heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut att = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * hd;
            let mut p = vec![0.0; n * n];
            for t in 0..n {
                let qt = &q[t * d + off..t * d + off + hd];
                let row = &mut p[t * n..t * n + t + 1];
                let mut max = f64::NEG_INFINITY;
                for (s, ps) in row.iter_mut().enumerate() {
                    *ps = dot(qt, &k[s * d + off..s * d + off + hd]) * scale;
                    max = max.max(*ps);
                }
                let mut sum = 0.0;
                for ps in row.iter_mut() {
                    *ps = (*ps - max).exp();
                    sum += *ps;
                }
                for ps in row.iter_mut() {
                    *ps /= sum;
                }
                let at = &mut att[t * d + off..t * d + off + hd];
                for (s, &ps) in row.iter().enumerate() {
                    axpy(ps, &v[s * d + off..s * d + off + hd], at);
                }
            }
            probs.push(p);
        }
        (att, probs)
    }

    /// Forward and backward for one sequence; adds `scale`-weighted gradients
    /// into `grads` and returns the summed (unscaled) cross-entropy.
    fn accumulate(&self, seq: &TokenSeq, scale: f64, scope: GradScope, grads: &mut Weights) -> f64 {
        let (d, ff, vocab) = (self.d, self.ff, self.vocab);
        let ids = &seq.ids[..seq.ids.len() - 1];
        let n = ids.len();
        let (rows, targets) = answer_rows(seq);
        let cache = self.run(ids, &rows);
        let all = scope == GradScope::All;

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; rows.len() * vocab];
        for (k, &target) in targets.iter().enumerate() {
            let row = &cache.logits[k * vocab..(k + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            loss += max + sum.ln() - row[target as usize];
            let drow = &mut dlogits[k * vocab..(k + 1) * vocab];
            for (j, dz) in drow.iter_mut().enumerate() {
                *dz = (row[j] - max).exp() / sum * scale;
            }
            drow[target as usize] -= scale;
        }

        // head and final norm
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &t in &cache.rows {
            sel.extend_from_slice(&cache.hf[t * d..(t + 1) * d]);
        }
        let dsel = matmul_wt_back(
            &dlogits,
            &sel,
            &self.head,
            rows.len(),
            d,
            vocab,
            all.then_some(grads.head.as_mut_slice()),
            true,
        );
        let mut dhf = vec![0.0; n * d];
        for (k, &t) in cache.rows.iter().enumerate() {
            dhf[t * d..(t + 1) * d].copy_from_slice(&dsel[k * d..(k + 1) * d]);
        }
        let mut dx = rms_norm_back(
            &dhf,
            &cache.x_final,
            &cache.rf,
            &self.final_norm,
            n,
            d,
            all.then_some(grads.final_norm.as_mut_slice()),
        );

        for (l, (lw, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let gl = &mut grads.layers[l];
            let want = match scope {
                GradScope::All => true,
                GradScope::LayerMlp(target) => target == l,
            };

            // MLP
            if want {
                for t in 0..n {
                    axpy(1.0, &dx[t * d..(t + 1) * d], &mut gl.down_bias);
                }
            }
            let mut du = matmul_wt_back(
                &dx,
                &lc.g,
                &lw.down,
                n,
                ff,
                d,
                want.then_some(gl.down.as_mut_slice()),
                true,
            );
            for (dz, &z) in du.iter_mut().zip(&lc.u) {
                *dz *= gelu_grad(z);
            }
            if want {
                for t in 0..n {
                    axpy(1.0, &du[t * ff..(t + 1) * ff], &mut gl.up_bias);
                }
            }
            let stop_here = matches!(scope, GradScope::LayerMlp(target) if target == l);
            let dh2 = matmul_wt_back(
                &du,
                &lc.h2,
                &lw.up,
                n,
                d,
                ff,
                want.then_some(gl.up.as_mut_slice()),
                !stop_here,
            );
            if stop_here {
                return loss;
            }
            let dmid_norm = rms_norm_back(
                &dh2,
                &lc.x_mid,
                &lc.r2,
                &lw.mlp_norm,
                n,
                d,
                want.then_some(gl.mlp_norm.as_mut_slice()),
            );
            let dx_mid: Vec<f64> = dx.iter().zip(&dmid_norm).map(|(a, b)| a + b).collect();

            // attention
            let datt = matmul_wt_back(
                &dx_mid,
                &lc.att,
                &lw.proj[3],
                n,
                d,
                d,
                want.then_some(gl.proj[3].as_mut_slice()),
                true,
            );
            let [dq, dk, dv] = self.attention_back(&datt, lc, n);
            let mut dh1 = vec![0.0; n * d];
            for (i, dproj) in [dq, dk, dv].iter().enumerate() {
                let part = matmul_wt_back(
                    dproj,
                    &lc.h1,
                    &lw.proj[i],
                    n,
                    d,
                    d,
                    want.then_some(gl.proj[i].as_mut_slice()),
                    true,
                );
                axpy(1.0, &part, &mut dh1);
            }
            let din_norm = rms_norm_back(
                &dh1,
                &lc.x_in,
                &lc.r1,
                &lw.attn_norm,
                n,
                d,
                want.then_some(gl.attn_norm.as_mut_slice()),
            );
            dx = dx_mid.iter().zip(&din_norm).map(|(a, b)| a + b).collect();
        }

        if all {
            for (t, &id) in ids.iter().enumerate() {
                let id = id as usize;
                let dxt = &dx[t * d..(t + 1) * d];
                axpy(1.0, dxt, &mut grads.tok[id * d..(id + 1) * d]);
                axpy(1.0, dxt, &mut grads.pos[t * d..(t + 1) * d]);
            }
        }
        loss
    }

    fn attention_back(&self, datt: &[f64], lc: &LayerCache, n: usize) -> [Vec<f64>; 3] {
        let (d, hd) = (self.d, self.d / self.heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let [q, k, v] = &lc.qkv;
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..self.heads {
            let off = h * hd;
            let p = &lc.probs[h];
            for t in 0..n {
                let dat = &datt[t * d + off..t * d + off + hd];
                let prow = &p[t * n..t * n + t + 1];
                let mut weighted = 0.0;
                for s in 0..=t {
                    dp[s] = dot(dat, &v[s * d + off..s * d + off + hd]);
                    weighted += prow[s] * dp[s];
                    axpy(prow[s], dat, &mut dv[s * d + off..s * d + off + hd]);
                }
                for s in 0..=t {
                    let ds = prow[s] * (dp[s] - weighted) * scale;
                    if ds != 0.0 {
                        axpy(ds, &k[s * d + off..s * d + off + hd], &mut dq[t * d + off..t * d + off + hd]);
                        axpy(ds, &q[t * d + off..t * d + off + hd], &mut dk[s * d + off..s * d + off + hd]);
                    }
                }
            }
        }
        [dq, dk, dv]
    }
}

fn layout_shape(cfg: &ModelConfig, name: &str) -> Vec<usize> {
    layout(cfg)
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| s.shape)
        .expect("canonical name")
}
