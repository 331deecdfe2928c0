//! Two-convolution residual unit with an optional projection skip.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BnMode, ConvSpec};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub spec: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct BnVars<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub mode: BnMode<'a, T>,
}

/// Parameters of one block, already registered on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars<'a, T> {
    pub conv1: ConvVars,
    pub bn1: BnVars<'a, T>,
    pub conv2: ConvVars,
    pub bn2: BnVars<'a, T>,
    pub projection: Option<(ConvVars, BnVars<'a, T>)>,
    pub epsilon: f64,
}

impl<T> ResidualVars<'_, T> {
    /// Whether the skip path needs a projection: the first conv changes
    /// stride or channel count.
    pub fn needs_projection(conv1: &ConvSpec, conv2: &ConvSpec) -> bool {
        conv1.stride != 1 || conv1.in_channels != conv2.out_channels
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualOutput {
    pub out: Var,
    /// Batch norm outputs in order: bn1, bn2, projection bn.
    pub bn: [Option<Var>; 3],
}

impl<T: Real> Graph<T> {
    fn conv_bn(&mut self, x: Var, conv: &ConvVars, bn: &BnVars<'_, T>, eps: f64) -> Result<(Var, Var)> {
        let y = self.conv2d(x, conv.weight, None, conv.spec)?;
        let z = self.batch_norm(y, bn.gamma, bn.beta, eps, bn.mode)?;
        Ok((y, z))
    }

    /// `relu(conv-bn-relu-conv-bn(x) + skip(x))`.
    pub fn residual_block(&mut self, x: Var, p: &ResidualVars<'_, T>) -> Result<ResidualOutput> {
        let needs = ResidualVars::<T>::needs_projection(&p.conv1.spec, &p.conv2.spec);
        if needs != p.projection.is_some() {
            return Err(Error::Contract(format!(
                "residual block {} a projection skip",
                if needs { "requires" } else { "must not have" }
            )));
        }
        let (_, b1) = self.conv_bn(x, &p.conv1, &p.bn1, p.epsilon)?;
        let h = self.relu(b1)?;
        let (_, b2) = self.conv_bn(h, &p.conv2, &p.bn2, p.epsilon)?;
        let (skip, bp) = match &p.projection {
            Some((conv, bn)) => {
                let (_, z) = self.conv_bn(x, conv, bn, p.epsilon)?;
                (z, Some(z))
            }
            None => (x, None),
        };
        let sum = self.add(b2, skip)?;
        let out = self.relu(sum)?;
        Ok(ResidualOutput {
            out,
            bn: [Some(b1), Some(b2), bp],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    struct Block {
        w1: Tensor<f64>,
        w2: Tensor<f64>,
        proj: Option<Tensor<f64>>,
        s1: ConvSpec,
        s2: ConvSpec,
        sp: ConvSpec,
    }

    fn build<'a>(g: &mut Graph<f64>, b: &Block, stats: &'a (Vec<f64>, Vec<f64>)) -> ResidualVars<'a, f64> {
        let mode = BnMode::Eval { mean: &stats.0, var: &stats.1 };
        let c = b.s2.out_channels;
        let bn = |g: &mut Graph<f64>| BnVars {
            gamma: g.param(Tensor::full(Shape::new(1, c, 1, 1), 1.0)),
            beta: g.param(Tensor::zeros(Shape::new(1, c, 1, 1))),
            mode,
        };
        let conv1 = ConvVars { weight: g.param(b.w1.clone()), spec: b.s1 };
        let bn1 = bn(g);
        let conv2 = ConvVars { weight: g.param(b.w2.clone()), spec: b.s2 };
        let bn2 = bn(g);
        let projection = b.proj.as_ref().map(|w| {
            (ConvVars { weight: g.param(w.clone()), spec: b.sp }, bn(g))
        });
        ResidualVars { conv1, bn1, conv2, bn2, projection, epsilon: 0.0 }
    }

    #[test]
    fn zero_residual_is_relu_of_input() {
        let s1 = ConvSpec::same(2, 2, 3, 1, 1);
        let block = Block {
            w1: Tensor::zeros(s1.weight_shape()),
            w2: Tensor::zeros(s1.weight_shape()),
            proj: None,
            s1,
            s2: s1,
            sp: s1,
        };
        let stats = (vec![0.0; 2], vec![1.0; 2]);
        let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |i| (i as f64 * 0.7).cos());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = build(&mut g, &block, &stats);
        let out = g.residual_block(xv, &vars).unwrap().out;
        let want: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(g.value(out).data(), &want[..]);
    }

    #[test]
    fn stride_two_halves_extent() {
        let s1 = ConvSpec::same(2, 4, 3, 2, 1);
        let s2 = ConvSpec::same(4, 4, 3, 1, 1);
        let sp = ConvSpec::same(2, 4, 1, 2, 1);
        let block = Block {
            w1: Tensor::full(s1.weight_shape(), 0.1),
            w2: Tensor::full(s2.weight_shape(), 0.1),
            proj: Some(Tensor::full(sp.weight_shape(), 0.1)),
            s1,
            s2,
            sp,
        };
        let stats = (vec![0.0; 4], vec![1.0; 4]);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::full(Shape::new(1, 2, 8, 6), 1.0));
        let vars = build(&mut g, &block, &stats);
        let out = g.residual_block(xv, &vars).unwrap().out;
        assert_eq!(g.shape(out), Shape::new(1, 4, 4, 3));
    }

    #[test]
    fn missing_projection_rejected() {
        let s1 = ConvSpec::same(2, 4, 3, 2, 1);
        let s2 = ConvSpec::same(4, 4, 3, 1, 1);
        let block = Block {
            w1: Tensor::zeros(s1.weight_shape()),
            w2: Tensor::zeros(s2.weight_shape()),
            proj: None,
            s1,
            s2,
            sp: s1,
        };
        let stats = (vec![0.0; 4], vec![1.0; 4]);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::full(Shape::new(1, 2, 8, 6), 1.0));
        let vars = build(&mut g, &block, &stats);
        assert!(g.residual_block(xv, &vars).is_err());
    }
}
