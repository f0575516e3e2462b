use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter on a [`crate::Tape`]. Clones get a fresh id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor plus its gradient and Adam moments.
#[derive(Debug)]
pub struct Parameter<T: Scalar = f32> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub(crate) first_moment: Tensor<T>,
    pub(crate) second_moment: Tensor<T>,
    pub(crate) steps: u64,
    frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            grad: Tensor::zeros(shape.clone()),
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            value,
            steps: 0,
            frozen: false,
        }
    }

    /// He-normal initialisation scaled by `gain / sqrt(fan_in)`.
    pub fn he_normal(name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape.to_vec(), |_| T::lift(rng.normal() * std));
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Self::new(name, Tensor::full(shape.to_vec(), T::lift(v)))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    /// Drops optimiser state, e.g. when a copied layer starts a new task.
    pub fn reset_optimizer_state(&mut self) {
        self.first_moment = Tensor::zeros(self.value.shape().to_vec());
        self.second_moment = Tensor::zeros(self.value.shape().to_vec());
        self.steps = 0;
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        let mut p = Parameter::new(self.name.clone(), self.value.cast());
        p.frozen = self.frozen;
        p
    }
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
            steps: self.steps,
            frozen: self.frozen,
        }
    }
}

/// Anything that owns parameters in a fixed order.
pub trait Module<T: Scalar = f32> {
    fn parameters(&self) -> Vec<&Parameter<T>>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// All parameter values concatenated in declaration order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for p in self.parameters() {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Inverse of [`Module::flatten`]. Panics on a length mismatch.
    fn load_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_parameters(), "load_flat length mismatch");
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn freeze_all(&mut self) {
        for p in self.parameters_mut() {
            p.freeze();
        }
    }

    fn reset_optimizer_state(&mut self) {
        for p in self.parameters_mut() {
            p.reset_optimizer_state();
        }
    }
}
