//! Named trainable parameters.
//!
//! All model weights live in one flat store, registered in construction
//! order. The order is what makes optimizer updates and gradient sums
//! deterministic, so lookups by name go through a side map and never drive
//! numeric work.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

/// Stable handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.ids().map(|id| Tensor::zeros(store.get(id).shape.clone())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, id: ParamId, grad: &Tensor) {
        let dst = &mut self.grads[id.0];
        assert_eq!(dst.shape, grad.shape, "gradient shape mismatch");
        for (d, g) in dst.data.iter_mut().zip(&grad.data) {
            *d += g;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.grads {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    /// Global L2 norm over every gradient scalar.
    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Samples a matrix from N(0, std). The instance queries, relation
/// embeddings and lookup tables all use std = 0.02.
pub fn init_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let numel: usize = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| dist.sample(rng)).collect())
}

/// Glorot/Xavier uniform for projection matrices, bound sqrt(6/(fan_in+fan_out)).
pub fn init_xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
}
