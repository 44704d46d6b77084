//! Named parameters and the small set of layers the head is built from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// All learned tensors of a model, keyed by dotted path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    pub fn init_linear(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
        self.insert(format!("{name}.bias"), Tensor::zeros([fan_out]));
    }

    /// A linear layer without bias.
    pub fn init_projection(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gain"), Tensor::full([dim], 1.0));
        self.insert(format!("{name}.bias"), Tensor::zeros([dim]));
    }
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new([fan_in, fan_out], data)
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Binds a [`ParamStore`] into a [`Graph`]. Each parameter becomes a single
/// node the first time it is requested; trainable scopes make them leaves.
pub struct Scope<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Scope<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, trainable: bool) -> Self {
        Scope {
            graph,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    /// Panics on unknown names: a missing parameter is a programming error.
    pub fn param(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let var = if self.trainable {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    /// Gradients of every parameter that was bound in this scope.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn linear(&self, name: &str, x: Var<'g>) -> Var<'g> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        x.matmul(w).add(b)
    }

    pub fn projection(&self, name: &str, x: Var<'g>) -> Var<'g> {
        x.matmul(self.param(&format!("{name}.weight")))
    }

    pub fn layer_norm(&self, name: &str, x: Var<'g>) -> Var<'g> {
        let gain = self.param(&format!("{name}.gain"));
        let bias = self.param(&format!("{name}.bias"));
        normalize_last(x).mul(gain).add(bias)
    }
}

/// Zero-mean, unit-variance along the last axis (no affine part).
pub fn normalize_last<'g>(x: Var<'g>) -> Var<'g> {
    let nd = x.shape().len();
    let mean = x.mean_axis(nd - 1, true);
    let centered = x.sub(mean);
    let var = centered.square().mean_axis(nd - 1, true);
    centered.div(var.add_scalar(LAYER_NORM_EPS).sqrt())
}

/// Rescales each vector along the last axis to unit L2 norm.
pub fn l2_normalize_last<'g>(x: Var<'g>) -> Var<'g> {
    let nd = x.shape().len();
    let norm = x.square().sum_axis(nd - 1, true).sqrt();
    x.div(norm)
}

/// Plain-slice counterpart of [`l2_normalize_last`] with the same arithmetic.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}
