//! Stochastic gradient descent with classical (heavy-ball) momentum.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    /// One zero velocity buffer per parameter, in the order parameters will
    /// be passed to [`OptimizerState::step`].
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v ← momentum·v + grad; p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!(
                    "{} params, {} grads, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    format!("param {} grad {} velocity {}", p.shape(), g.shape(), v.shape()),
                ));
            }
        }
        let (lr, mu) = (T::of(self.learning_rate), T::of(self.momentum));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn two_step_recurrence() {
        let mut p = scalar(1.0);
        let g = scalar(0.5);
        let mut opt = OptimizerState::new([&p], 0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((opt.velocity()[0].data()[0] - 0.5).abs() < 1e-12);
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((opt.velocity()[0].data()[0] - 0.95).abs() < 1e-12);
        assert!((p.data()[0] - 0.855).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |i| i as f64);
        let before = p.clone();
        let g = Tensor::zeros(p.shape());
        let mut opt = OptimizerState::new([&p], 0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = Tensor::<f64>::from_fn(Shape::new(1, 1, 2, 3), |i| (i as f64).sin());
        let g = Tensor::<f64>::from_fn(p.shape(), |i| (i as f64).cos());
        let mut opt = OptimizerState::new([&p], 0.05, 0.0);
        for _ in 0..3 {
            let mut q = p.clone();
            opt.step(&mut [&mut q], &[&g]).unwrap();
            let want: Vec<f64> = p.data().iter().zip(g.data()).map(|(a, b)| a - 0.05 * b).collect();
            assert_eq!(q.data(), &want[..]);
            p = q;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let g = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let mut opt = OptimizerState::new([&p], 0.1, 0.9);
        assert!(opt.step(&mut [&mut p], &[&g]).is_err());
        assert!(opt.step(&mut [], &[]).is_err());
    }
}
