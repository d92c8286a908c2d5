use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

/// Named parameter collection. Insertion order is the canonical order used
/// by optimizers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Per-parameter gradients indexed by [`ParamId`]; `None` for parameters that
/// were not reached or are frozen.
pub type Gradients = Vec<Option<Array>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                shapes: vec![p.value.shape().to_vec(), value.shape().to_vec()],
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Binds parameters of a store into a tape on first use.
///
/// Trainable parameters become gradient-tracking leaves when `track_grad` is
/// set; frozen ones always enter as constants.
pub struct Binder<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Tensor<'t>>>>,
    track_grad: bool,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, track_grad: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            track_grad,
            dropout_rng: None,
        }
    }

    /// Enables training-mode dropout driven by `seed`.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&self, id: ParamId) -> Tensor<'t> {
        let mut bound = self.bound.borrow_mut();
        if let Some(t) = bound[id.0] {
            return t;
        }
        let p = self.store.get(id);
        let t = self.tape.leaf(p.value.clone(), self.track_grad && p.trainable);
        bound[id.0] = Some(t);
        t
    }

    pub fn constant(&self, value: Array) -> Tensor<'t> {
        self.tape.constant(value)
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&self, x: Tensor<'t>, p: f64) -> Result<Tensor<'t>, TensorError> {
        let Some(rng) = &self.dropout_rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        x.mul(self.tape.constant(Array::new(shape, mask)?))
    }

    pub fn gradients(&self) -> Gradients {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|t| t.grad()))
            .collect()
    }
}
