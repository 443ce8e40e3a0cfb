use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// One named tensor in the store.
#[derive(Clone)]
pub struct Entry {
    pub var: Var,
    /// Buffers (normalization running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Named parameter store with deterministic initialization.
///
/// Names follow `{group}/{stage}/{layer}/{kind}`. Iteration is always in
/// lexicographic name order so reductions over all parameters (global norms,
/// checkpoints) are reproducible bit for bit.
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: Shape, trainable: bool) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::Logic(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn kaiming_normal(&mut self, name: &str, shape: impl Into<Shape>, fan_in: usize) -> Result<Tensor> {
        let shape = shape.into();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Logic(e.to_string()))?;
        let values = (0..shape.elem_count())
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        Ok(self.insert(name, values, shape, true)?.as_tensor().clone())
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Logic(e.to_string()))?;
            (0..shape.elem_count())
                .map(|_| dist.sample(&mut self.rng))
                .collect()
        } else {
            vec![0.0; shape.elem_count()]
        };
        Ok(self.insert(name, values, shape, true)?.as_tensor().clone())
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        Ok(self.insert(name, values, shape, true)?.as_tensor().clone())
    }

    /// Non-trainable buffer. The returned `Var` is updated in place.
    pub fn buffer(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let shape = shape.into();
        let values = vec![value; shape.elem_count()];
        self.insert(name, values, shape, false)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry)> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n, &e.var))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of trainable tensors whose name starts with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Adds `delta` to every element of the named tensor.
    pub fn perturb(&self, name: &str, delta: f64) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Logic(format!("unknown parameter {name}")))?;
        let updated = (entry.var.as_tensor() + delta)?;
        entry.var.set(&updated)?;
        Ok(())
    }

    /// Overwrites the named tensor with `values`; shapes must agree.
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Logic(format!("unknown parameter {name}")))?;
        if entry.var.shape() != values.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                entry.var.shape(),
                values.shape()
            )));
        }
        entry.var.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }
}
