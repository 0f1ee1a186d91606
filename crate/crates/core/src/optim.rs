//! Adam with bias correction.

use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed like the store; frozen
    /// parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !store.get(id).trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in store.value_mut(id).data_mut().iter_mut().zip(&grads[i]).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-12);
        adam.step(&mut store, &[vec![3.0, -0.5]]);
        let w = store.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-9 && (w[1] + 0.9).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let w = store.iter().next().unwrap().value.data()[0];
            adam.step(&mut store, &[vec![2.0 * (w - 2.0)]]);
        }
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w - 2.0).abs() < 1e-2, "{w}");
    }
}
