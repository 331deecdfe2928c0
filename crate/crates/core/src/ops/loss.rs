//! Channel softmax and pixel-wise cross-entropy.

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Softmax over the channel axis at every pixel, stabilized by subtracting
/// the per-pixel maximum.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let mut exps = vec![T::zero(); s.c];
    for n in 0..s.n {
        for i in 0..p {
            let at = |c: usize| (n * s.c + c) * p + i;
            let max = (0..s.c)
                .map(|c| logits.data()[at(c)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (c, e) in exps.iter_mut().enumerate() {
                *e = (logits.data()[at(c)] - max).exp();
                total += *e;
            }
            for (c, &e) in exps.iter().enumerate() {
                out.data_mut()[at(c)] = e / total;
            }
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// Mean over all `N·H·W` pixels of `−log softmax(logits)[target]`.
    ///
    /// `target` is `(N,1,H,W)` holding class indices. Returns the scalar
    /// loss and the softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<(Var, Tensor<T>)> {
        self.check(logits)?;
        let x = self.value(logits);
        let s = x.shape();
        let ts = target.shape();
        if ts != Shape::new(s.n, 1, s.h, s.w) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("target {ts} for logits {s}"),
            ));
        }
        let p = s.plane();
        let mut total = 0.0f64;
        for n in 0..s.n {
            for i in 0..p {
                let t = target.data()[n * p + i];
                let class = t.as_f64();
                if class.fract() != 0.0 || class < 0.0 || class >= s.c as f64 {
                    return Err(Error::Contract(format!(
                        "target value {t} is not a class index below {}",
                        s.c
                    )));
                }
                let at = |c: usize| x.data()[(n * s.c + c) * p + i].as_f64();
                let max = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..s.c).map(|c| (at(c) - max).exp()).sum::<f64>().ln() + max;
                total += lse - at(class as usize);
            }
        }
        let loss = Tensor::scalar(T::of(total / (s.n * p) as f64));
        let probs = softmax_channels(x);
        let op = Op::SoftmaxCe {
            logits,
            probs: probs.clone(),
            target: target.clone(),
        };
        let v = self.push("softmax_cross_entropy", loss, op, &[logits])?;
        Ok((v, probs))
    }
}

pub(crate) fn softmax_ce_backward<T: Real>(up: T, probs: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let p = s.plane();
    let scale = up / T::of((s.n * p) as f64);
    let mut g = probs.clone();
    for n in 0..s.n {
        for i in 0..p {
            let class = target.data()[n * p + i].as_f64() as usize;
            g.data_mut()[(n * s.c + class) * p + i] -= T::one();
        }
    }
    g.data_mut().iter_mut().for_each(|v| *v *= scale);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(logits: Vec<f64>, target: Vec<f64>) -> f64 {
        let n = target.len();
        let mut g = Graph::new();
        let mut data = Vec::new();
        // logits given as pixel-major pairs; reorder into channel planes
        data.extend(logits.iter().step_by(2));
        data.extend(logits.iter().skip(1).step_by(2));
        let l = g.param(Tensor::from_vec(Shape::new(1, 2, 1, n), data).unwrap());
        let t = Tensor::from_vec(Shape::new(1, 1, 1, n), target).unwrap();
        let (loss, _) = g.softmax_cross_entropy(l, &t).unwrap();
        g.value(loss).data()[0]
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let v = loss_of(vec![0.3, 0.3, -2.0, -2.0], vec![0.0, 1.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_margin() {
        assert!(loss_of(vec![0.0, 50.0], vec![1.0]) < 1e-9);
        assert!(loss_of(vec![50.0, 0.0], vec![0.0]) < 1e-9);
    }

    #[test]
    fn closed_form_value() {
        let v = loss_of(vec![0.0, 1.0], vec![1.0]);
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn bad_target_rejected() {
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let t = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        assert!(g.softmax_cross_entropy(l, &t).is_err());
        let t = Tensor::full(Shape::new(1, 1, 1, 1), 0.5);
        assert!(g.softmax_cross_entropy(l, &t).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 1), vec![1000.0, -1000.0]).unwrap();
        let p = softmax_channels(&x);
        assert_eq!(p.data(), &[1.0, 0.0]);
    }
}
