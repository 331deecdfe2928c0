//! Elementwise arithmetic, reductions, relu and channel concatenation.

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{} vs {}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{} vs {}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Sum of all elements as a scalar `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let data: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        if self.kink_signature().is_some() {
            let mask: Vec<bool> = self.value(x).data().iter().map(|&a| a > T::zero()).collect();
            self.record_kinks(mask.into_iter());
        }
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Concatenates along channels, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = concat(self.value(a), self.value(b))?;
        self.push("concat_channels", out, Op::Concat(a, b), &[a, b])
    }
}

pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape("concat_channels", format!("{sa} vs {sb}")));
    }
    let per_a = sa.c * sa.plane();
    let per_b = sb.c * sb.plane();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * per_a..(n + 1) * per_a]);
        data.extend_from_slice(&b.data()[n * per_b..(n + 1) * per_b]);
    }
    Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
}

pub(crate) fn mul_backward<T: Real>(
    up: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ga = up.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
    let gb = up.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
    (
        Tensor::from_vec(a.shape(), ga).expect("shape"),
        Tensor::from_vec(b.shape(), gb).expect("shape"),
    )
}

pub(crate) fn relu_backward<T: Real>(up: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = up
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("shape")
}

pub(crate) fn concat_backward<T: Real>(
    up: &Tensor<T>,
    sa: Shape,
    sb: Shape,
) -> (Tensor<T>, Tensor<T>) {
    let per_a = sa.c * sa.plane();
    let per_b = sb.c * sb.plane();
    let mut ga = Vec::with_capacity(sa.numel());
    let mut gb = Vec::with_capacity(sb.numel());
    for n in 0..sa.n {
        let base = n * (per_a + per_b);
        ga.extend_from_slice(&up.data()[base..base + per_a]);
        gb.extend_from_slice(&up.data()[base + per_a..base + per_a + per_b]);
    }
    (
        Tensor::from_vec(sa, ga).expect("shape"),
        Tensor::from_vec(sb, gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(Shape::new(1, 1, 3, 4), 1.0));
        let b = g.constant(Tensor::full(Shape::new(1, 1, 3, 4), 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 2, 3, 4));
        assert_eq!(g.value(c).plane(0, 0), &[1.0; 12]);
        assert_eq!(g.value(c).plane(0, 1), &[2.0; 12]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = Tensor::<f32>::from_fn(Shape::new(2, 3, 2, 2), |i| i as f32);
        let empty = Tensor::<f32>::zeros(Shape::new(2, 0, 2, 2));
        assert_eq!(concat(&a, &empty).unwrap(), a);
        assert_eq!(concat(&empty, &a).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(concat(&a, &b).is_err());
    }

    #[test]
    fn concat_gradient_splits_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(Shape::new(2, 1, 2, 3), 0.5));
        let b = g.param(Tensor::full(Shape::new(2, 2, 2, 3), -0.5));
        let c = g.concat_channels(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
