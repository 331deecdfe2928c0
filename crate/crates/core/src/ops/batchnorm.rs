//! Batch normalization with running statistics.
//!
//! Training mode normalizes each channel by the biased batch variance and
//! reports the unbiased variance for the running estimate. Inference mode is
//! a fixed per-channel affine map built from the running statistics.

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub(crate) struct Saved<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_var: Option<Vec<T>>,
    training: bool,
}

fn channel_params<T: Real>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.numel() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{what} has {} values for {c} channels", t.numel()),
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, epsilon: f64, mode: BnMode<'_, T>) -> Result<Var> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let x = self.value(input);
        let s = x.shape();
        channel_params(self.value(gamma), s.c, "gamma")?;
        channel_params(self.value(beta), s.c, "beta")?;
        let m = s.n * s.plane();

        let (mean, var, batch_var, training) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::Contract(format!(
                        "batch norm training needs at least 2 values per channel, got {m}"
                    )));
                }
                let mut mean = Vec::with_capacity(s.c);
                let mut var = Vec::with_capacity(s.c);
                let mut unbiased = Vec::with_capacity(s.c);
                for c in 0..s.c {
                    let (mu, sq) = channel_moments(x, c);
                    mean.push(T::of(mu));
                    var.push(sq / m as f64);
                    unbiased.push(T::of(sq / (m - 1) as f64));
                }
                (mean, var, Some(unbiased), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != s.c || var.len() != s.c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.iter().map(|v| v.as_f64()).collect(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + epsilon).sqrt())).collect();

        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(s);
        let p = s.plane();
        for n in 0..s.n {
            for c in 0..s.c {
                let (scale, mu, shift) = (gm[c] * inv_std[c], mean[c], bt[c]);
                let src = x.plane(n, c);
                let base = (n * s.c + c) * p;
                for (o, &v) in out.data_mut()[base..base + p].iter_mut().zip(src) {
                    *o = (v - mu) * scale + shift;
                }
            }
        }
        let ctx = Saved {
            mean,
            inv_std,
            batch_var,
            training,
        };
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ctx,
            },
            &[input, gamma, beta],
        )
    }

    /// Batch mean and unbiased batch variance of a training-mode batch norm
    /// output.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match self.op_of(v) {
            Op::BatchNorm { ctx, .. } => ctx.batch_var.as_deref().map(|bv| (&ctx.mean[..], bv)),
            _ => None,
        }
    }
}

/// Mean and sum of squared deviations of one channel, accumulated in `f64`
/// in row-major order.
fn channel_moments<T: Real>(x: &Tensor<T>, c: usize) -> (f64, f64) {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut sum = 0.0;
    for n in 0..s.n {
        sum += x.plane(n, c).iter().fold(0.0, |a, v| a + v.as_f64());
    }
    let mean = sum / m;
    let mut sq = 0.0;
    for n in 0..s.n {
        sq += x.plane(n, c).iter().fold(0.0, |a, v| {
            let d = v.as_f64() - mean;
            a + d * d
        });
    }
    (mean, sq)
}

pub(crate) fn backward<T: Real>(
    up: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    ctx: &Saved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let p = s.plane();
    let m = T::of((s.n * p) as f64);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];

    for c in 0..s.c {
        let (mu, is) = (ctx.mean[c], ctx.inv_std[c]);
        let (mut dg, mut db) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &v) in up.plane(n, c).iter().zip(x.plane(n, c)) {
                db += g;
                dg += g * (v - mu) * is;
            }
        }
        dgamma[c] = dg;
        dbeta[c] = db;
        let gc = gamma.data()[c];
        for n in 0..s.n {
            let base = (n * s.c + c) * p;
            let out = &mut dx.data_mut()[base..base + p];
            for ((o, &g), &v) in out.iter_mut().zip(up.plane(n, c)).zip(x.plane(n, c)) {
                *o = if ctx.training {
                    let xhat = (v - mu) * is;
                    gc * is * (g * m - db - xhat * dg) / m
                } else {
                    g * gc * is
                };
            }
        }
    }
    (
        dx,
        Tensor::from_vec(gamma.shape(), dgamma).expect("shape"),
        Tensor::from_vec(gamma.shape(), dbeta).expect("shape"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// A self-contained batch norm layer: affine parameters, running
/// statistics, and mode.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    /// Weight of the old running value: `r ← momentum·r + (1−momentum)·batch`.
    pub running_momentum: f64,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::full(shape, T::one()),
            beta: Tensor::zeros(shape),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: DEFAULT_EPSILON,
            running_momentum: DEFAULT_MOMENTUM,
            mode: Mode::Training,
        }
    }

    /// Applies the layer with `gamma`/`beta` already registered on `g`,
    /// updating running statistics in training mode.
    pub fn apply(&mut self, g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        match self.mode {
            Mode::Training => {
                let y = g.batch_norm(x, gamma, beta, self.epsilon, BnMode::Train)?;
                let (mean, var) = g.batch_stats(y).expect("training batch norm");
                update_running(&mut self.running_mean, mean, self.running_momentum);
                update_running(&mut self.running_var, var, self.running_momentum);
                Ok(y)
            }
            Mode::Inference => g.batch_norm(
                x,
                gamma,
                beta,
                self.epsilon,
                BnMode::Eval {
                    mean: &self.running_mean,
                    var: &self.running_var,
                },
            ),
        }
    }

    /// Convenience wrapper that registers `gamma`/`beta` as trainable leaves.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var, Var)> {
        let gamma = g.param(self.gamma.clone());
        let beta = g.param(self.beta.clone());
        let y = self.apply(g, x, gamma, beta)?;
        Ok((y, gamma, beta))
    }
}

pub fn update_running<T: Real>(running: &mut [T], batch: &[T], momentum: f64) {
    let keep = T::of(momentum);
    let take = T::of(1.0 - momentum);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = keep * *r + take * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> Tensor<f64> {
        Tensor::from_fn(Shape::new(3, 2, 4, 4), |i| ((i * 7919) % 101) as f64 / 13.0 - 2.0)
    }

    #[test]
    fn inference_identity_configuration() {
        let x = input();
        let mut bn = BatchNormState::<f64>::new(2);
        bn.mode = Mode::Inference;
        bn.epsilon = 0.0;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _, _) = bn.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn training_output_moments() {
        let x = input();
        let mut bn = BatchNormState::<f64>::new(2);
        bn.gamma = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.5, -0.5]).unwrap();
        bn.beta = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.3, -2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (y, _, _) = bn.forward(&mut g, xv).unwrap();
        let out = g.value(y);
        for (c, (gm, bt)) in [(1.5, 0.3), (-0.5, -2.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..3).flat_map(|n| out.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - bt).abs() < 1e-5, "mean {mean}");
            assert!((std - f64::abs(gm)).abs() < 1e-5, "std {std}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 3, 3), 4.25);
        let mut bn = BatchNormState::<f64>::new(1);
        bn.beta = Tensor::full(Shape::new(1, 1, 1, 1), 0.75);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (y, _, _) = bn.forward(&mut g, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn running_stats_update() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 1, 1, 2), |i| i as f64);
        let mut bn = BatchNormState::<f64>::new(1);
        let mut g = Graph::new();
        let xv = g.constant(x);
        bn.forward(&mut g, xv).unwrap();
        // mean 1.5, unbiased var 5/3
        assert!((bn.running_mean[0] - 0.15).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn inference_ignores_batch_composition() {
        let mut bn = BatchNormState::<f64>::new(2);
        bn.mode = Mode::Inference;
        bn.running_mean = vec![0.5, -1.0];
        bn.running_var = vec![2.0, 0.25];
        let x = input();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (full, _, _) = bn.forward(&mut g, xv).unwrap();
        let first = g.value(full).sample(0);
        let mut g2 = Graph::new();
        let xv = g2.constant(x.sample(0));
        let (alone, _, _) = bn.forward(&mut g2, xv).unwrap();
        assert_eq!(g2.value(alone), &first);
    }

    #[test]
    fn training_needs_two_values() {
        let mut bn = BatchNormState::<f64>::new(1);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        assert!(bn.forward(&mut g, xv).is_err());
    }
}
