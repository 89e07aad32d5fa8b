//! Task-vector arithmetic over parameter sets and per-layer distance reports.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, ModelConfig, ParamSet, Projection};
use crate::tensor::NamedTensors;

/// Parameter difference `θ_ft − θ` in full model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    config: ModelConfig,
    tensors: NamedTensors,
    /// Free-form note on which fine-tune produced the vector.
    pub source: String,
}

impl TaskVector {
    pub fn from_tensors(config: ModelConfig, tensors: NamedTensors, source: impl Into<String>) -> Result<Self> {
        // same validation as parameters: canonical layout, finite values
        let checked = ParamSet::from_tensors(config, tensors)?;
        Ok(TaskVector {
            config,
            tensors: checked.into_tensors(),
            source: source.into(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.tensors().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .tensors()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Non-negative forgetting rate λ.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ForgettingRate(f64);

impl ForgettingRate {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("forgetting rate must be finite and >= 0, got {lambda}")));
        }
        Ok(ForgettingRate(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for ForgettingRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `θ_ft − θ`, elementwise.
pub fn extract_delta(theta_ft: &ParamSet, theta: &ParamSet) -> Result<TaskVector> {
    if !theta_ft.config().same_shape(theta.config()) {
        return Err(Error::config("parameter sets come from different configurations"));
    }
    let tensors = theta_ft
        .tensors()
        .zip_map(theta.tensors(), |a, b| (a as f64 - b as f64) as f32)?;
    TaskVector::from_tensors(*theta.config(), tensors, "")
}

/// `θ − λ·δ`. A rate of exactly zero returns `θ` unchanged.
pub fn apply_forgetting(theta: &ParamSet, delta: &TaskVector, rate: ForgettingRate) -> Result<ParamSet> {
    scaled_subtract(theta, delta, rate.value())
}

/// `θ − scale·δ` for any finite scale; `scale = -1` adds the vector back.
pub fn scaled_subtract(theta: &ParamSet, delta: &TaskVector, scale: f64) -> Result<ParamSet> {
    if !theta.config().same_shape(delta.config()) {
        return Err(Error::config("task vector comes from a different configuration"));
    }
    theta.tensors().check_layout(delta.tensors())?;
    if scale == 0.0 {
        return Ok(theta.clone());
    }
    let tensors = theta.tensors().zip_map(delta.tensors(), |w, d| {
        let step = scale * d as f64;
        if step == 0.0 {
            w
        } else {
            (w as f64 - step) as f32
        }
    })?;
    ParamSet::from_tensors(*theta.config(), tensors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorFamily {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
    Embedding,
    Head,
    Norm,
}

impl TensorFamily {
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            TensorFamily::Query | TensorFamily::Key | TensorFamily::Value | TensorFamily::Output
        )
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, TensorFamily::MlpUp | TensorFamily::MlpDown)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorFamily::Query => "query",
            TensorFamily::Key => "key",
            TensorFamily::Value => "value",
            TensorFamily::Output => "output",
            TensorFamily::MlpUp => "mlp_up",
            TensorFamily::MlpDown => "mlp_down",
            TensorFamily::Embedding => "embedding",
            TensorFamily::Head => "head",
            TensorFamily::Norm => "norm",
        }
    }
}

impl From<Projection> for TensorFamily {
    fn from(p: Projection) -> Self {
        match p {
            Projection::Query => TensorFamily::Query,
            Projection::Key => TensorFamily::Key,
            Projection::Value => TensorFamily::Value,
            Projection::Output => TensorFamily::Output,
        }
    }
}

/// Layer index (if any) and family of a canonical tensor name. MLP biases
/// belong to the family of their matrix.
pub fn classify(name: &str) -> Option<(Option<usize>, TensorFamily)> {
    match name {
        names::TOKEN_EMBED | names::POS_EMBED => return Some((None, TensorFamily::Embedding)),
        names::LM_HEAD => return Some((None, TensorFamily::Head)),
        names::FINAL_NORM => return Some((None, TensorFamily::Norm)),
        _ => {}
    }
    let rest = name.strip_prefix("layers.")?;
    let (layer, tail) = rest.split_once('.')?;
    let layer: usize = layer.parse().ok()?;
    let family = match tail {
        "attn_norm" | "mlp_norm" => TensorFamily::Norm,
        "mlp.up" | "mlp.up_bias" => TensorFamily::MlpUp,
        "mlp.down" | "mlp.down_bias" => TensorFamily::MlpDown,
        other => TensorFamily::from(Projection::parse(other.strip_prefix("attn.")?)?),
    };
    Some((Some(layer), family))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDistance {
    pub tensor: String,
    pub layer: Option<usize>,
    pub family: TensorFamily,
    pub distance: f64,
}

/// Frobenius distance of every named tensor, tagged with layer and family.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerDistanceReport {
    pub entries: Vec<TensorDistance>,
}

impl LayerDistanceReport {
    /// Summed squared distance over the tensors of `family` in `layer`,
    /// square-rooted (the distance of the concatenated family).
    pub fn family_distance(&self, layer: Option<usize>, family: TensorFamily) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.layer == layer && e.family == family)
            .map(|e| e.distance * e.distance)
            .sum::<f64>()
            .sqrt()
    }

    /// Mean over layers of the per-layer distance for each family matching `pred`.
    pub fn mean_distance(&self, pred: impl Fn(TensorFamily) -> bool) -> f64 {
        let mut keys: Vec<(Option<usize>, TensorFamily)> = self
            .entries
            .iter()
            .filter(|e| e.layer.is_some() && pred(e.family))
            .map(|e| (e.layer, e.family))
            .collect();
        keys.sort();
        keys.dedup();
        if keys.is_empty() {
            return 0.0;
        }
        keys.iter().map(|&(l, f)| self.family_distance(l, f)).sum::<f64>() / keys.len() as f64
    }

    pub fn mean_mlp_distance(&self) -> f64 {
        self.mean_distance(TensorFamily::is_mlp)
    }

    pub fn mean_attention_distance(&self) -> f64 {
        self.mean_distance(TensorFamily::is_attention)
    }

    /// Families with any non-zero distance.
    pub fn changed_families(&self) -> Vec<TensorFamily> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.distance > 0.0)
            .map(|e| e.family)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor,layer,family,distance\n");
        for e in &self.entries {
            let layer = e.layer.map(|l| l.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", e.tensor, layer, e.family.as_str(), e.distance));
        }
        s
    }
}

fn distances(a: &NamedTensors, b: &NamedTensors) -> Result<LayerDistanceReport> {
    a.check_layout(b)?;
    let entries = a
        .iter()
        .zip(b.tensors())
        .map(|((name, ta), tb)| {
            let (layer, family) = classify(name)
                .ok_or_else(|| Error::config(format!("unrecognized tensor name `{name}`")))?;
            Ok(TensorDistance {
                tensor: name.to_string(),
                layer,
                family,
                distance: ta.distance(tb),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerDistanceReport { entries })
}

pub fn layer_distances(a: &ParamSet, b: &ParamSet) -> Result<LayerDistanceReport> {
    distances(a.tensors(), b.tensors())
}

/// Per-tensor norms of a task vector, in the same report form.
pub fn delta_norms(delta: &TaskVector) -> Result<LayerDistanceReport> {
    distances(delta.tensors(), &delta.tensors().zeros_like())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::Tensor;

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 6,
            seed,
        }
    }

    fn with_head(p: &ParamSet, first: &[f32]) -> ParamSet {
        p.map_tensors(|t| {
            let head = t.get_mut(names::LM_HEAD).unwrap();
            head.data_mut()[..first.len()].copy_from_slice(first);
            Ok(())
        })
        .unwrap()
    }

    #[test]
    fn delta_of_self_is_zero() {
        let p = init_model(&cfg(1)).unwrap();
        assert!(extract_delta(&p, &p).unwrap().is_zero());
    }

    #[test]
    fn delta_and_forgetting_by_hand() {
        let base = ParamSet::zeros(cfg(0)).unwrap();
        let theta = with_head(&base, &[1.0, 2.0]);
        let ft = with_head(&base, &[3.0, 0.0]);
        let delta = extract_delta(&ft, &theta).unwrap();
        assert_eq!(&delta.tensors().get(names::LM_HEAD).unwrap().data()[..2], &[2.0, -2.0]);
        let out = apply_forgetting(&theta, &delta, ForgettingRate::new(0.5).unwrap()).unwrap();
        assert_eq!(&out.get(names::LM_HEAD).unwrap().data()[..2], &[0.0, 3.0]);
    }

    #[test]
    fn zero_rate_is_identity() {
        let a = init_model(&cfg(1)).unwrap();
        let b = init_model(&cfg(2)).unwrap();
        let d = extract_delta(&b, &a).unwrap();
        assert!(apply_forgetting(&a, &d, ForgettingRate::new(0.0).unwrap()).unwrap().bit_eq(&a));
        assert!(ForgettingRate::new(-0.1).is_err());
        assert!(ForgettingRate::new(3.0).is_ok());
    }

    #[test]
    fn unit_rate_reflects() {
        let theta = init_model(&cfg(1)).unwrap();
        let ft = init_model(&cfg(2)).unwrap();
        let d = extract_delta(&ft, &theta).unwrap();
        let out = apply_forgetting(&theta, &d, ForgettingRate::new(1.0).unwrap()).unwrap();
        for ((o, t), f) in out.tensors().tensors().zip(theta.tensors().tensors()).zip(ft.tensors().tensors()) {
            for ((&o, &t), &f) in o.data().iter().zip(t.data()).zip(f.data()) {
                assert!((o as f64 - (2.0 * t as f64 - f as f64)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn layout_mismatch() {
        let a = init_model(&cfg(1)).unwrap();
        let b = init_model(&ModelConfig { d_ff: 4, ..cfg(1) }).unwrap();
        assert!(matches!(extract_delta(&a, &b), Err(Error::Config(_))));
        assert!(matches!(layer_distances(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn three_four_five() {
        let mut a = NamedTensors::new();
        a.insert(names::LM_HEAD, Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let mut b = NamedTensors::new();
        b.insert(names::LM_HEAD, Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let report = distances(&a, &b).unwrap();
        assert_eq!(report.entries[0].distance, 5.0);
        assert_eq!(report.entries[0].family, TensorFamily::Head);
    }

    #[test]
    fn classification_covers_layout() {
        let p = init_model(&cfg(1)).unwrap();
        let report = layer_distances(&p, &p).unwrap();
        assert_eq!(report.entries.len(), p.tensors().len());
        assert!(report.entries.iter().all(|e| e.distance == 0.0));
        assert_eq!(classify("layers.1.attn.value"), Some((Some(1), TensorFamily::Value)));
        assert_eq!(classify("layers.0.mlp.down_bias"), Some((Some(0), TensorFamily::MlpDown)));
        assert_eq!(classify("layers.0.attn.bogus"), None);
    }
}
