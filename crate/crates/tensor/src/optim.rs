use crate::param::Parameter;
use crate::scalar::Scalar;
use crate::tape::Gradients;

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Copies gradients from `grads` into each parameter and applies one step.
    /// Parameters absent from `grads` see a zero gradient. Frozen parameters
    /// are skipped.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Parameter<T>], grads: &Gradients<T>) {
        for p in params.iter_mut() {
            if p.is_frozen() {
                continue;
            }
            match grads.param(p) {
                Some(g) => p.grad.data_mut().copy_from_slice(g.data()),
                None => p.zero_grad(),
            }
            self.apply(p);
        }
    }

    /// One update from whatever is in `p.grad`.
    pub fn apply<T: Scalar>(&self, p: &mut Parameter<T>) {
        p.steps += 1;
        let t = p.steps as i32;
        let b1 = T::lift(self.beta1);
        let b2 = T::lift(self.beta2);
        let one = T::one();
        let bc1 = T::lift(1.0 - self.beta1.powi(t));
        let bc2 = T::lift(1.0 - self.beta2.powi(t));
        let lr = T::lift(self.lr);
        let eps = T::lift(self.eps);
        let Parameter {
            value,
            grad,
            first_moment,
            second_moment,
            ..
        } = p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(first_moment.data_mut())
            .zip(second_moment.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
