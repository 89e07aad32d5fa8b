//! Dense row-major `f32` tensors and an insertion-ordered, name-indexed
//! collection of them. Every parameter-like structure in the crate
//! (model parameters, gradients, task vectors, adapters) is built on
//! [`NamedTensors`].

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Frobenius norm of `self - other`, accumulated in `f64`.
    pub fn distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Insertion-ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &NamedTensors) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }

    pub fn check_layout(&self, other: &NamedTensors) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::config(format!(
                    "layout mismatch: `{na}` vs `{nb}`"
                )));
            }
            if ta.shape != tb.shape {
                return Err(Error::config(format!(
                    "layout mismatch for `{na}`: {:?} vs {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Err(Error::config(format!(
            "layout mismatch: {} vs {} tensors",
            self.entries.len(),
            other.entries.len()
        )))
    }

    pub fn bit_eq(&self, other: &NamedTensors) -> bool {
        self.same_layout(other)
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// A zero-valued collection with the same layout.
    pub fn zeros_like(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape()))
                .expect("names already unique");
        }
        out
    }

    /// Elementwise combination of two identically laid-out collections.
    pub fn zip_map(
        &self,
        other: &NamedTensors,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<NamedTensors> {
        self.check_layout(other)?;
        let mut out = NamedTensors::new();
        for ((name, a), b) in self.iter().zip(other.tensors()) {
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            out.insert(
                name,
                Tensor {
                    shape: a.shape.clone(),
                    data,
                },
            )?;
        }
        Ok(out)
    }
}
