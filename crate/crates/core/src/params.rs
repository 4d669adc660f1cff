//! Named parameter storage and the dense building blocks shared by every
//! component.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// All learnable tensors of a model, keyed and enumerated by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a gradient-requiring leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Registers every parameter as a constant leaf (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(name, t.clone())
                } else {
                    g.input(name, t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} not bound")))
    }

    /// Handles whose names start with `prefix`, in name order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        self.vars
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), *v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Inserts a `[fan_in, fan_out]` weight with `N(0, 1/fan_in)` entries and a
/// zero `[1, fan_out]` bias under `{prefix}.w` / `{prefix}.b`.
pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

pub(crate) fn init_zero_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

/// `x · W + b`
pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Two-layer perceptron with a `tanh` hidden layer: `{prefix}.l1`, `{prefix}.l2`.
pub(crate) fn mlp2(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.l1"), x)?;
    let h = g.tanh(h)?;
    linear(g, p, &format!("{prefix}.l2"), h)
}

pub(crate) fn init_mlp2<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dims: (usize, usize, usize),
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.l1"), dims.0, dims.1, rng);
    init_linear(store, &format!("{prefix}.l2"), dims.1, dims.2, rng);
}

/// Row-wise one-hot matrix `[ids.len(), classes]`.
pub(crate) fn one_hot(ids: &[u32], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), classes]);
    for (i, &id) in ids.iter().enumerate() {
        t.data_mut()[i * classes + id as usize] = 1.0;
    }
    t
}
