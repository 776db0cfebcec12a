//! Named parameter storage and its binding onto a tape.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
///
/// The insertion order is the canonical order used by the optimizer state and
/// by checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform `rows x cols` matrix with `fan_in = cols`, `fan_out = rows`.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        self.add(name, glorot(rows, cols, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let old = &self.tensors[id.0];
        if old.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "ParamStore::set",
                left: old.shape(),
                right: value.shape(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(T::zero());
        }
    }

    /// Zero-filled tensors matching every parameter, in store order.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    }
}

pub fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite Glorot bound");
    let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

/// A tape with every parameter of a store registered as a trainable leaf.
pub struct Graph<'p, T> {
    pub tape: Tape<T>,
    store: &'p ParamStore<T>,
    vars: Vec<Var>,
    transposed: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self::on_tape(store, Tape::new())
    }

    pub fn on_tape(store: &'p ParamStore<T>, mut tape: Tape<T>) -> Self {
        let vars = store.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Self {
            tape,
            store,
            vars,
            transposed: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Transpose of a parameter, recorded at most once per graph.
    pub fn param_t(&mut self, id: ParamId) -> Result<Var, TensorError> {
        if let Some(v) = self.transposed[id.0] {
            return Ok(v);
        }
        let v = self.tape.transpose(self.vars[id.0])?;
        self.transposed[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients in store order after `backward`; unreached parameters get zeros.
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.store.tensors)
            .map(|(&v, t)| {
                self.tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
