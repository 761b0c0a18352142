use crate::tensor::{BatchStats, BnMode, Graph, Scalar, Tensor, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by gradient descent.
    Weight,
    /// State updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(&self.values)
            .map(|((n, k), v)| (n.as_str(), *k, v))
    }

    /// Total number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.iter()
            .filter(|(_, k, _)| *k == ParamKind::Weight)
            .map(|(_, _, v)| v.numel())
            .sum()
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.names == other.names
            && self.kinds == other.kinds
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Euclidean distance between two sets with the same layout, in f64.
    pub fn distance(&self, other: &ParamSet<T>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }

    /// Blends running statistics toward the batch statistics with weight `momentum`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &b) in self.values[id.0].data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// Kaiming-uniform fan-in initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// Batch statistics waiting to be folded into running estimates.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// A parameter set bound onto a graph for one forward pass.
pub struct Forward<'a, T> {
    pub g: &'a Graph<T>,
    pub mode: BnMode,
    params: &'a ParamSet<T>,
    vars: Vec<Var>,
    updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Binds every entry: weights as trainable leaves when `trainable`, buffers as constants.
    pub fn bind(g: &'a Graph<T>, params: &'a ParamSet<T>, trainable: bool, mode: BnMode) -> Self {
        let vars = params
            .iter()
            .map(|(_, kind, v)| {
                if trainable && kind == ParamKind::Weight {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Forward {
            g,
            mode,
            params,
            vars,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Graph variable of every parameter, in declaration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    pub(crate) fn record(&mut self, update: BnUpdate<T>) {
        self.updates.push(update);
    }

    /// Batch statistics gathered by training-mode batch norms.
    pub fn take_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.updates)
    }
}
