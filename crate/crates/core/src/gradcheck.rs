//! Central finite-difference verification of every layer's backward pass,
//! in double precision.
//!
//! Each check perturbs one input tensor coordinate by `±step`, compares
//! `(f(x+h) − f(x−h)) / 2h` with the analytic gradient, and reports the
//! worst relative error `|a − n| / max(|a|, |n|, REL_FLOOR)`. Coordinates
//! where a relu changes state inside `[x−h, x+h]` are skipped: there the
//! function is not differentiable and the difference quotient is
//! meaningless.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BnMode, BnVars, ConvSpec, ConvVars, ResidualVars};
use crate::rng::SplitMix64;
use crate::segnet::{BlockSpec, Model, ModelConfig, Phase};
use crate::tensor::{Shape, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
/// Coordinates checked per tensor at most; larger tensors are sampled.
pub const MAX_COORDS: usize = 96;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    fn merge(&mut self, other: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

struct Eval {
    loss: f64,
    kinks: Option<u64>,
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<(Eval, Graph<f64>, Var, Var)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    g.track_kinks();
    let v = g.param(x.clone());
    let loss = f(&mut g, v)?;
    if g.shape(loss) != Shape::scalar() {
        return Err(Error::shape("finite_diff_check", format!("loss has shape {}", g.shape(loss))));
    }
    let e = Eval {
        loss: g.value(loss).data()[0],
        kinks: g.kink_signature(),
    };
    Ok((e, g, v, loss))
}

fn coordinates(n: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if n > MAX_COORDS {
        rng.shuffle(&mut all);
        all.truncate(MAX_COORDS);
        all.sort_unstable();
    }
    all
}

/// Compares the analytic gradient of `f` with respect to its argument at
/// `input` against central differences. `corrupt` adds an offset to one
/// analytic entry, for exercising the failure path.
pub fn finite_diff_check_with<F>(
    f: F,
    input: &Tensor<f64>,
    step: f64,
    rng: &mut SplitMix64,
    corrupt: bool,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let (base, mut g, x, loss) = evaluate(&f, input)?;
    g.backward(loss)?;
    let mut analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()))
        .into_vec();
    if corrupt {
        analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
    }

    let mut out = GradCheck::default();
    let mut probe = input.clone();
    for i in coordinates(input.numel(), rng) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, ..) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, ..) = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if plus.kinks != base.kinks || minus.kinks != base.kinks {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        out.max_rel_error = out.max_rel_error.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

pub fn finite_diff_check<F>(f: F, input: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_with(f, input, step, &mut SplitMix64::new(0), false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: String,
    pub result: GradCheck,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.result.checked > 0 && self.result.max_rel_error < TOLERANCE
    }
}

/// Every layer name [`run_suite`] reports, in order.
pub const LAYERS: &[&str] = &[
    "add",
    "mul",
    "sum",
    "relu",
    "concat",
    "conv",
    "conv_bias",
    "conv_stride2",
    "conv_atrous_rate2",
    "conv_atrous_rate3",
    "conv_pointwise",
    "batch_norm_train",
    "batch_norm_eval",
    "bilinear_resize",
    "softmax_cross_entropy",
    "residual_identity",
    "residual_projection",
    "segnet_stage1",
    "segnet_stage2",
];

fn normal(rng: &mut SplitMix64, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

/// `Σ out ⊙ r` with a fixed random `r`, so every output coordinate
/// contributes a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(r.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Check<'a> = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a>;

/// One layer: a list of (argument value, closure) pairs, one per
/// differentiable argument.
struct Case<'a> {
    name: &'static str,
    args: Vec<(Tensor<f64>, Check<'a>)>,
}

fn conv_case(name: &'static str, spec: ConvSpec, bias: bool, hw: usize, rng: &mut SplitMix64) -> Case<'static> {
    let x = normal(rng, Shape::new(2, spec.in_channels, hw, hw), 1.0);
    let w = normal(rng, spec.weight_shape(), 0.5);
    let b = normal(rng, Shape::new(1, spec.out_channels, 1, 1), 0.5);
    let oh = spec.output_extent(hw).expect("valid extent");
    let r = normal(rng, Shape::new(2, spec.out_channels, oh, oh), 1.0);
    let build = |which: usize| -> Check<'static> {
        let (x, w, b, r) = (x.clone(), w.clone(), b.clone(), r.clone());
        Box::new(move |g, v| {
            let xv = if which == 0 { v } else { g.constant(x.clone()) };
            let wv = if which == 1 { v } else { g.constant(w.clone()) };
            let bv = match (bias, which) {
                (false, _) => None,
                (true, 2) => Some(v),
                (true, _) => Some(g.constant(b.clone())),
            };
            let y = g.conv2d(xv, wv, bv, spec)?;
            weighted_sum(g, y, &r)
        })
    };
    let mut args = vec![(x.clone(), build(0)), (w.clone(), build(1))];
    if bias {
        args.push((b.clone(), build(2)));
    }
    Case { name, args }
}

fn tiny_segnet() -> ModelConfig {
    let base = ModelConfig::default();
    ModelConfig {
        stem_channels: vec![3, 3, 3],
        blocks: base
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BlockSpec {
                channels: [3, 3, 4, 4, 4, 4][i],
                ..*b
            })
            .collect(),
        input_size: 12,
        ..base
    }
}

fn segnet_case(name: &'static str, stage: usize, rng: &mut SplitMix64) -> Result<Case<'static>> {
    let config = tiny_segnet();
    let mut model = Model::<f64>::build_for_stage(&config, stage, rng.next_u64())?;
    // Non-trivial affine parameters so every path carries gradient.
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    for n in &names {
        if n.ends_with(".gamma") || n.ends_with(".beta") || n == "head.bias" {
            let t = model.get_mut(n).expect("named tensor");
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    let s = config.input_size;
    let input = Tensor::from_fn(Shape::new(2, model.in_channels(), s, s), |_| rng.next_f64());
    let target = Tensor::from_fn(Shape::new(2, 1, s, s), |_| (rng.next_f64() < 0.4) as u8 as f64);
    let model = std::rc::Rc::new(model);

    let checked = [
        "stem.0.conv.weight",
        "stem.2.bn.gamma",
        "block.0.proj.weight",
        "block.2.conv2.weight",
        "block.4.conv1.weight",
        "block.5.bn2.beta",
        "head.weight",
        "head.bias",
    ];
    let build = |param: Option<usize>| -> Check<'static> {
        let (model, input, target) = (model.clone(), input.clone(), target.clone());
        Box::new(move |g, v| {
            let mut reg = model.register(g, false);
            let x = match param {
                Some(i) => {
                    reg.set(i, v);
                    g.constant(input.clone())
                }
                None => v,
            };
            let out = model.forward(g, x, &reg, Phase::Train)?;
            Ok(g.softmax_cross_entropy(out.upsampled, &target)?.0)
        })
    };
    let mut args = vec![(input.clone(), build(None))];
    for n in checked {
        let i = model
            .specs()
            .iter()
            .position(|s| s.name == n)
            .ok_or_else(|| Error::Contract(format!("missing parameter {n}")))?;
        args.push((model.tensors()[i].clone(), build(Some(i))));
    }
    Ok(Case { name, args })
}

fn build_cases(rng: &mut SplitMix64) -> Result<Vec<Case<'static>>> {
    let shape = Shape::new(2, 3, 4, 5);
    let mut cases = Vec::new();

    let (a, b, r) = (normal(rng, shape, 1.0), normal(rng, shape, 1.0), normal(rng, shape, 1.0));
    for (name, op) in [("add", 0), ("mul", 1)] {
        let pair = |first: bool| -> Check<'static> {
            let (a, b, r) = (a.clone(), b.clone(), r.clone());
            Box::new(move |g, v| {
                let other = g.constant(if first { b.clone() } else { a.clone() });
                let (x, y) = if first { (v, other) } else { (other, v) };
                let z = if op == 0 { g.add(x, y)? } else { g.mul(x, y)? };
                weighted_sum(g, z, &r)
            })
        };
        cases.push(Case {
            name,
            args: vec![(a.clone(), pair(true)), (b.clone(), pair(false))],
        });
    }

    // sum(x)² so the upstream adjoint of sum is not constant.
    cases.push(Case {
        name: "sum",
        args: vec![(
            a.clone(),
            Box::new(|g, v| {
                let s = g.sum(v)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            }),
        )],
    });

    let r3 = r.clone();
    cases.push(Case {
        name: "relu",
        args: vec![(
            a.clone(),
            Box::new(move |g, v| {
                let y = g.relu(v)?;
                weighted_sum(g, y, &r3)
            }),
        )],
    });

    let c2 = normal(rng, Shape::new(2, 2, 4, 5), 1.0);
    let rc = normal(rng, Shape::new(2, 5, 4, 5), 1.0);
    let cat = |first: bool| -> Check<'static> {
        let (a, c2, rc) = (a.clone(), c2.clone(), rc.clone());
        Box::new(move |g, v| {
            let other = g.constant(if first { c2.clone() } else { a.clone() });
            let y = if first {
                g.concat_channels(v, other)?
            } else {
                g.concat_channels(other, v)?
            };
            weighted_sum(g, y, &rc)
        })
    };
    cases.push(Case {
        name: "concat",
        args: vec![(a.clone(), cat(true)), (c2.clone(), cat(false))],
    });

    cases.push(conv_case("conv", ConvSpec::same(3, 4, 3, 1, 1), false, 6, rng));
    cases.push(conv_case("conv_bias", ConvSpec::same(2, 3, 3, 1, 1), true, 5, rng));
    cases.push(conv_case("conv_stride2", ConvSpec::same(2, 3, 3, 2, 1), false, 7, rng));
    cases.push(conv_case("conv_atrous_rate2", ConvSpec::same(2, 3, 3, 1, 2), false, 7, rng));
    cases.push(conv_case("conv_atrous_rate3", ConvSpec::same(2, 2, 3, 1, 3), true, 8, rng));
    cases.push(conv_case("conv_pointwise", ConvSpec::same(3, 2, 1, 1, 1), true, 4, rng));

    let bn_x = normal(rng, shape, 1.5);
    let gamma = normal(rng, Shape::new(1, 3, 1, 1), 1.0);
    let beta = normal(rng, Shape::new(1, 3, 1, 1), 1.0);
    let rm: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let rv: Vec<f64> = (0..3).map(|_| rng.uniform(0.5, 2.0)).collect();
    for (name, train) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        let bn = |which: usize| -> Check<'static> {
            let (x, gm, bt, r, rm, rv) = (bn_x.clone(), gamma.clone(), beta.clone(), r.clone(), rm.clone(), rv.clone());
            Box::new(move |g, v| {
                let pick = |g: &mut Graph<f64>, i: usize, t: &Tensor<f64>| if which == i { v } else { g.constant(t.clone()) };
                let (xv, gv, bv) = (pick(g, 0, &x), pick(g, 1, &gm), pick(g, 2, &bt));
                let mode = if train {
                    BnMode::Train
                } else {
                    BnMode::Eval { mean: &rm, var: &rv }
                };
                let y = g.batch_norm(xv, gv, bv, 1e-5, mode)?;
                weighted_sum(g, y, &r)
            })
        };
        cases.push(Case {
            name,
            args: vec![(bn_x.clone(), bn(0)), (gamma.clone(), bn(1)), (beta.clone(), bn(2))],
        });
    }

    let small = normal(rng, Shape::new(2, 2, 3, 4), 1.0);
    let ru = normal(rng, Shape::new(2, 2, 7, 9), 1.0);
    cases.push(Case {
        name: "bilinear_resize",
        args: vec![(
            small,
            Box::new(move |g, v| {
                let y = g.bilinear_resize(v, 7, 9)?;
                weighted_sum(g, y, &ru)
            }),
        )],
    });

    let logits = normal(rng, Shape::new(2, 3, 3, 4), 2.0);
    let target = Tensor::from_fn(Shape::new(2, 1, 3, 4), |_| rng.below(3) as f64);
    cases.push(Case {
        name: "softmax_cross_entropy",
        args: vec![(logits, Box::new(move |g, v| Ok(g.softmax_cross_entropy(v, &target)?.0)))],
    });

    for (name, spec1, spec2) in [
        ("residual_identity", ConvSpec::same(3, 3, 3, 1, 2), ConvSpec::same(3, 3, 3, 1, 2)),
        ("residual_projection", ConvSpec::same(2, 3, 3, 2, 1), ConvSpec::same(3, 3, 3, 1, 1)),
    ] {
        let hw = 6;
        let x = normal(rng, Shape::new(2, spec1.in_channels, hw, hw), 1.0);
        let w1 = normal(rng, spec1.weight_shape(), 0.5);
        let w2 = normal(rng, spec2.weight_shape(), 0.5);
        let proj = ConvSpec::same(spec1.in_channels, spec2.out_channels, 1, spec1.stride, 1);
        let wp = normal(rng, proj.weight_shape(), 0.5);
        let affine: Vec<Tensor<f64>> = (0..6)
            .map(|i| {
                let base = if i % 2 == 0 { 1.0 } else { 0.0 };
                Tensor::from_fn(Shape::new(1, 3, 1, 1), |_| base + 0.3 * rng.normal())
            })
            .collect();
        let oh = spec1.output_extent(hw).expect("extent");
        let r = normal(rng, Shape::new(2, 3, oh, oh), 1.0);
        let with_proj = name == "residual_projection";
        let build = |which: usize| -> Check<'static> {
            let (x, w1, w2, wp, affine, r) = (x.clone(), w1.clone(), w2.clone(), wp.clone(), affine.clone(), r.clone());
            Box::new(move |g, v| {
                let pick = |g: &mut Graph<f64>, i: usize, t: &Tensor<f64>| if which == i { v } else { g.constant(t.clone()) };
                let xv = pick(g, 0, &x);
                let conv1 = ConvVars {
                    weight: pick(g, 1, &w1),
                    spec: spec1,
                };
                let conv2 = ConvVars {
                    weight: pick(g, 2, &w2),
                    spec: spec2,
                };
                let mut bn = |k: usize| BnVars {
                    gamma: pick(g, 4 + 2 * k, &affine[2 * k]),
                    beta: pick(g, 5 + 2 * k, &affine[2 * k + 1]),
                    mode: BnMode::Train,
                };
                let (bn1, bn2, bn3) = (bn(0), bn(1), bn(2));
                let projection = with_proj.then(|| {
                    (
                        ConvVars {
                            weight: pick(g, 3, &wp),
                            spec: proj,
                        },
                        bn3,
                    )
                });
                let vars = ResidualVars {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    projection,
                    epsilon: 1e-5,
                };
                let out = g.residual_block(xv, &vars)?;
                weighted_sum(g, out.out, &r)
            })
        };
        let mut args = vec![(x.clone(), build(0)), (w1.clone(), build(1)), (w2.clone(), build(2))];
        if with_proj {
            args.push((wp.clone(), build(3)));
        }
        for k in 0..if with_proj { 6 } else { 4 } {
            args.push((affine[k].clone(), build(4 + k)));
        }
        cases.push(Case { name, args });
    }

    cases.push(segnet_case("segnet_stage1", 1, rng)?);
    cases.push(segnet_case("segnet_stage2", 2, rng)?);
    debug_assert_eq!(cases.iter().map(|c| c.name).collect::<Vec<_>>(), LAYERS);
    Ok(cases)
}

/// Runs the whole suite. `corrupt_layer` names a layer whose analytic
/// gradient is deliberately perturbed.
pub fn run_suite(seed: u64, corrupt_layer: Option<&str>) -> Result<Vec<LayerReport>> {
    if let Some(l) = corrupt_layer {
        if !LAYERS.contains(&l) {
            return Err(Error::Contract(format!("unknown layer '{l}'")));
        }
    }
    let mut rng = SplitMix64::derive(seed, 0x4743);
    let cases = build_cases(&mut rng)?;
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let mut result = GradCheck::default();
        for (k, (value, f)) in case.args.iter().enumerate() {
            let corrupt = corrupt_layer == Some(case.name) && k == 0;
            result.merge(finite_diff_check_with(f, value, STEP, &mut rng, corrupt)?);
        }
        reports.push(LayerReport {
            layer: case.name.to_string(),
            result,
        });
    }
    Ok(reports)
}
