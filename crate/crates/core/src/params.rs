//! Named parameter storage and initialization.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Scalar,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Const(f64),
    /// `N(0, std^2)` via Box-Muller.
    Normal(f64),
}

pub trait ParamSink {
    fn declare(&mut self, name: String, shape: [usize; 4], kind: ParamKind, init: Init) -> ParamId;
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

/// Parameters of one network; graph leaves are keyed by `(uid, id)`.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: Arc::new((*e.value).clone()),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            kind,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Element-wise conversion into another scalar type (fresh uid).
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| {
                    let data = e.value.data().iter().map(|&v| f(v)).collect();
                    ParamEntry {
                        name: e.name.clone(),
                        kind: e.kind,
                        value: Arc::new(Tensor::new(e.value.shape(), data).expect("same shape")),
                    }
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        self.map(|v| U::from_f64(v.value()))
    }
}

/// Allocates and initializes parameters into a store.
pub struct StoreBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> ParamSink for StoreBuilder<'_, T> {
    fn declare(&mut self, name: String, shape: [usize; 4], kind: ParamKind, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Const(v) => vec![T::from_f64(v); n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(self.rng.gen_range(-bound..bound)))
                    .collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| T::from_f64(std * standard_normal(self.rng)))
                .collect(),
        };
        self.store
            .push(name, kind, Tensor::new(shape, data).expect("declared shape"))
    }
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Counts parameters without allocating them.
#[derive(Default, Debug)]
pub struct ParamCounter {
    pub total: usize,
    pub tensors: usize,
}

impl ParamSink for ParamCounter {
    fn declare(&mut self, _name: String, shape: [usize; 4], _kind: ParamKind, _init: Init) -> ParamId {
        self.total += shape.iter().product::<usize>();
        self.tensors += 1;
        ParamId(self.tensors - 1)
    }
}
