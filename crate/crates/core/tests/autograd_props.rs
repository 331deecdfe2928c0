mod common;

use atroseg::gradcheck::finite_diff_check;
use atroseg::ops::batchnorm::{BatchNormState, DEFAULT_EPSILON};
use atroseg::ops::{bilinear_adjoint, bilinear_resize, softmax_channels, ConvSpec};
use atroseg::rng::SplitMix64;
use atroseg::{Graph, Shape, Tensor};
use common::random_tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `<resize(x), y> = <x, adjoint(y)>`.
    #[test]
    fn bilinear_adjoint_identity(seed in any::<u64>(), ih in 1usize..9, iw in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let mut rng = SplitMix64::new(seed);
        let x = random_tensor(&mut rng, Shape::new(2, 2, ih, iw));
        let y = random_tensor(&mut rng, Shape::new(2, 2, oh, ow));
        let lhs = bilinear_resize(&x, oh, ow).unwrap().dot(&y);
        let rhs = x.dot(&bilinear_adjoint(&y, ih, iw));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn resize_of_constant_is_constant(v in -5.0f64..5.0, ih in 1usize..9, oh in 1usize..17) {
        let x = Tensor::full(Shape::new(1, 1, ih, ih + 1), v);
        let y = bilinear_resize(&x, oh, oh + 2).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() <= 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), c in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let mut x = random_tensor(&mut rng, Shape::new(2, c, 3, 3));
        for v in x.data_mut() {
            *v *= 50.0;
        }
        let p = softmax_channels(&x);
        for n in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..c).map(|k| p.plane(n, k)[i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    /// Convolution gradients for arbitrary geometry, including paddings
    /// other than "same".
    #[test]
    fn conv_gradients_any_geometry(seed in any::<u64>(), k in prop_oneof![Just(1usize), Just(3)], stride in 1usize..=2, rate in 1usize..=3, pad in 0usize..=3, h in 3usize..=8) {
        let spec = ConvSpec { in_channels: 2, out_channels: 2, kernel: k, stride, rate, padding: pad };
        prop_assume!(spec.output_extent(h).is_ok());
        let mut rng = SplitMix64::new(seed);
        let x = random_tensor(&mut rng, Shape::new(2, 2, h, h));
        let w = random_tensor(&mut rng, spec.weight_shape());
        let oh = spec.output_extent(h).unwrap();
        let r = random_tensor(&mut rng, Shape::new(2, 2, oh, oh));
        let loss = |g: &mut Graph<f64>, y| {
            let rv = g.constant(r.clone());
            let p = g.mul(y, rv)?;
            g.sum(p)
        };
        let wx = w.clone();
        let by_input = finite_diff_check(|g, v| {
            let wv = g.constant(wx.clone());
            let y = g.conv2d(v, wv, None, spec)?;
            loss(g, y)
        }, &x, 1e-5).unwrap();
        let by_weight = finite_diff_check(|g, v| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, v, None, spec)?;
            loss(g, y)
        }, &w, 1e-5).unwrap();
        prop_assert!(by_input.max_rel_error < 1e-6, "{:?}", by_input);
        prop_assert!(by_weight.max_rel_error < 1e-6, "{:?}", by_weight);
    }
}

#[test]
fn constant_channel_maps_to_beta() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(Shape::new(4, 3, 5, 5), 2.75));
    let mut bn = BatchNormState::<f32>::new(3);
    bn.beta = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, -1.0, 3.0]).unwrap();
    let (y, _, _) = bn.forward(&mut g, x).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        assert!(y.plane(0, c).iter().all(|&v| v == bn.beta.data()[c]));
    }
    assert_eq!(bn.epsilon, DEFAULT_EPSILON);
}
