use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::batchnorm::update_running;
use crate::ops::{softmax_channels, BnMode, BnVars, ConvSpec, ConvVars, ResidualVars};
use crate::optim::OptimizerState;
use crate::rng::SplitMix64;
use crate::segnet::ModelConfig;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Which tensors [`Model::count_parameters`] includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountPolicy {
    /// Convolution kernels only, head included.
    ConvWeights,
    /// Convolution kernels and biases.
    ConvWeightsAndBias,
    /// Everything updated by the optimizer: kernels, biases, batch norm
    /// scale and shift.
    Trainable,
}

impl CountPolicy {
    fn includes(self, kind: ParamKind) -> bool {
        match self {
            CountPolicy::ConvWeights => kind == ParamKind::ConvWeight,
            CountPolicy::ConvWeightsAndBias => matches!(kind, ParamKind::ConvWeight | ParamKind::ConvBias),
            CountPolicy::Trainable => kind.trainable(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    /// `(layer name, count)` in network order.
    pub per_layer: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

fn push_conv(out: &mut Vec<ParamSpec>, layer: &str, spec: &ConvSpec) {
    out.push(ParamSpec {
        name: format!("{layer}.weight"),
        shape: spec.weight_shape(),
        kind: ParamKind::ConvWeight,
    });
}

fn push_bn(out: &mut Vec<ParamSpec>, layer: &str, channels: usize) {
    let shape = Shape::new(1, channels, 1, 1);
    for (suffix, kind) in [
        ("gamma", ParamKind::BnGamma),
        ("beta", ParamKind::BnBeta),
        ("running_mean", ParamKind::RunningMean),
        ("running_var", ParamKind::RunningVar),
    ] {
        out.push(ParamSpec {
            name: format!("{layer}.{suffix}"),
            shape,
            kind,
        });
    }
}

/// Every tensor of a model built from `config`, in network order.
pub fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (i, spec) in config.stem_specs().iter().enumerate() {
        push_conv(&mut out, &format!("stem.{i}.conv"), spec);
        push_bn(&mut out, &format!("stem.{i}.bn"), spec.out_channels);
    }
    for (j, b) in config.block_specs().iter().enumerate() {
        push_conv(&mut out, &format!("block.{j}.conv1"), &b.conv1);
        push_bn(&mut out, &format!("block.{j}.bn1"), b.conv1.out_channels);
        push_conv(&mut out, &format!("block.{j}.conv2"), &b.conv2);
        push_bn(&mut out, &format!("block.{j}.bn2"), b.conv2.out_channels);
        if let Some(p) = &b.projection {
            push_conv(&mut out, &format!("block.{j}.proj"), p);
            push_bn(&mut out, &format!("block.{j}.proj_bn"), p.out_channels);
        }
    }
    let head = config.head_spec();
    push_conv(&mut out, "head", &head);
    if config.head_bias {
        out.push(ParamSpec {
            name: "head.bias".into(),
            shape: Shape::new(1, head.out_channels, 1, 1),
            kind: ParamKind::ConvBias,
        });
    }
    out
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    stage_index: usize,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics only.
    Infer,
}

/// Graph handles for a model's tensors, aligned with its layout.
pub struct Registered {
    vars: Vec<Option<Var>>,
}

impl Registered {
    pub fn get(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    /// Substitutes the handle for layout entry `i`.
    pub fn set(&mut self, i: usize, v: Var) {
        self.vars[i] = Some(v);
    }
}

pub struct ForwardOutput {
    /// `(N, 2, H/stride, W/stride)` head output.
    pub logits: Var,
    /// Logits bilinearly resized to the input resolution.
    pub upsampled: Var,
    /// Stem and residual-branch convolutions executed.
    pub main_convs: usize,
    pub projection_convs: usize,
    pub head_convs: usize,
    /// `(layout index of running_mean, batch norm output)` pairs.
    pub batch_norms: Vec<(usize, Var)>,
}

fn expected_stage_channels(stage_index: usize) -> usize {
    if stage_index > 1 {
        2
    } else {
        1
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with `config.in_channels` deciding the stage: 1 input
    /// channel is stage 1, 2 input channels is stage 2.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let stage = if config.in_channels > 1 { 2 } else { 1 };
        Self::build_for_stage(config, stage, seed)
    }

    /// Builds the model for cascade stage `stage_index` (1-based); the input
    /// channel count is set from the stage.
    pub fn build_for_stage(config: &ModelConfig, stage_index: usize, seed: u64) -> Result<Self> {
        if stage_index == 0 {
            return Err(Error::Config("stage index is 1-based".into()));
        }
        let config = config.with_in_channels(expected_stage_channels(stage_index));
        config.validate()?;
        let specs = layout(&config);
        let mut rng = SplitMix64::new(seed);
        let tensors = specs
            .iter()
            .map(|p| match p.kind {
                ParamKind::ConvWeight => {
                    let fan_in = p.shape.c * p.shape.h * p.shape.w;
                    let std = (2.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(p.shape, |_| T::of(rng.normal() * std))
                }
                ParamKind::BnGamma | ParamKind::RunningVar => Tensor::full(p.shape, T::one()),
                ParamKind::ConvBias | ParamKind::BnBeta | ParamKind::RunningMean => Tensor::zeros(p.shape),
            })
            .collect();
        Ok(Self::assemble(config, stage_index, specs, tensors))
    }

    fn assemble(config: ModelConfig, stage_index: usize, specs: Vec<ParamSpec>, tensors: Vec<Tensor<T>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Model {
            config,
            stage_index,
            specs,
            tensors,
            index,
        }
    }

    /// Model from explicit tensors, checked against the layout of `config`.
    pub fn from_parts(config: ModelConfig, stage_index: usize, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if stage_index == 0 || config.in_channels != expected_stage_channels(stage_index) {
            return Err(Error::Config(format!(
                "stage {stage_index} expects {} input channels, config has {}",
                expected_stage_channels(stage_index),
                config.in_channels
            )));
        }
        config.validate()?;
        let specs = layout(&config);
        if named.len() != specs.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "tensor '{name}' {} does not match layout entry '{}' {}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            tensors.push(t);
        }
        Ok(Self::assemble(config, stage_index, specs, tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            stage_index: self.stage_index,
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.specs
            .iter()
            .zip(&self.tensors)
            .filter(|(s, _)| s.kind.trainable())
            .map(|(_, t)| t)
    }

    pub fn count_parameters(&self, policy: CountPolicy) -> ParameterCount {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        for (spec, t) in self.specs.iter().zip(&self.tensors) {
            if !policy.includes(spec.kind) {
                continue;
            }
            let layer = spec.name.rsplit_once('.').map_or(spec.name.as_str(), |(l, _)| l);
            match per_layer.last_mut() {
                Some((name, n)) if name == layer => *n += t.numel(),
                _ => per_layer.push((layer.to_string(), t.numel())),
            }
        }
        ParameterCount {
            total: per_layer.iter().map(|(_, n)| n).sum(),
            per_layer,
        }
    }

    /// Registers every tensor on `g`: trainable tensors as parameters when
    /// `trainable`, otherwise as constants. Running statistics are never
    /// registered.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Registered {
        let vars = self
            .specs
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| {
                if !s.kind.trainable() {
                    None
                } else if trainable {
                    Some(g.param(t.clone()))
                } else {
                    Some(g.constant(t.clone()))
                }
            })
            .collect();
        Registered { vars }
    }

    fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    fn conv_vars(&self, reg: &Registered, layer: &str, spec: ConvSpec) -> ConvVars {
        ConvVars {
            weight: reg.get(self.idx(&format!("{layer}.weight"))).expect("registered"),
            spec,
        }
    }

    fn bn_vars(&self, reg: &Registered, layer: &str, phase: Phase) -> (usize, BnVars<'_, T>) {
        let rm = self.idx(&format!("{layer}.running_mean"));
        let rv = self.idx(&format!("{layer}.running_var"));
        let mode = match phase {
            Phase::Train => BnMode::Train,
            Phase::Infer => BnMode::Eval {
                mean: self.tensors[rm].data(),
                var: self.tensors[rv].data(),
            },
        };
        let bn = BnVars {
            gamma: reg.get(self.idx(&format!("{layer}.gamma"))).expect("registered"),
            beta: reg.get(self.idx(&format!("{layer}.beta"))).expect("registered"),
            mode,
        };
        (rm, bn)
    }

    pub fn forward(&self, g: &mut Graph<T>, input: Var, reg: &Registered, phase: Phase) -> Result<ForwardOutput> {
        let s = g.shape(input);
        if s.c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {} channels, model expects {}", s.c, self.config.in_channels),
            ));
        }
        let eps = self.config.bn_epsilon;
        let mut batch_norms = Vec::new();
        let (mut main_convs, mut projection_convs) = (0, 0);

        let mut x = input;
        for (i, spec) in self.config.stem_specs().into_iter().enumerate() {
            let conv = self.conv_vars(reg, &format!("stem.{i}.conv"), spec);
            let (rm, bn) = self.bn_vars(reg, &format!("stem.{i}.bn"), phase);
            let y = g.conv2d(x, conv.weight, None, spec)?;
            let z = g.batch_norm(y, bn.gamma, bn.beta, eps, bn.mode)?;
            batch_norms.push((rm, z));
            x = g.relu(z)?;
            main_convs += 1;
        }

        for (j, b) in self.config.block_specs().into_iter().enumerate() {
            let (rm1, bn1) = self.bn_vars(reg, &format!("block.{j}.bn1"), phase);
            let (rm2, bn2) = self.bn_vars(reg, &format!("block.{j}.bn2"), phase);
            let projection = b.projection.map(|p| {
                let (rmp, bnp) = self.bn_vars(reg, &format!("block.{j}.proj_bn"), phase);
                ((self.conv_vars(reg, &format!("block.{j}.proj"), p), bnp), rmp)
            });
            let vars = ResidualVars {
                conv1: self.conv_vars(reg, &format!("block.{j}.conv1"), b.conv1),
                bn1,
                conv2: self.conv_vars(reg, &format!("block.{j}.conv2"), b.conv2),
                bn2,
                projection: projection.map(|(p, _)| p),
                epsilon: eps,
            };
            let out = g.residual_block(x, &vars)?;
            let rms = [Some(rm1), Some(rm2), projection.map(|(_, rm)| rm)];
            for (rm, v) in rms.into_iter().zip(out.bn) {
                if let (Some(rm), Some(v)) = (rm, v) {
                    batch_norms.push((rm, v));
                }
            }
            main_convs += 2;
            projection_convs += usize::from(b.projection.is_some());
            x = out.out;
        }

        let head = self.config.head_spec();
        let weight = reg.get(self.idx("head.weight")).expect("registered");
        let bias = self.config.head_bias.then(|| reg.get(self.idx("head.bias")).expect("registered"));
        let logits = g.conv2d(x, weight, bias, head)?;
        let upsampled = g.bilinear_resize(logits, s.h, s.w)?;
        Ok(ForwardOutput {
            logits,
            upsampled,
            main_convs,
            projection_convs,
            head_convs: 1,
            batch_norms,
        })
    }

    /// Assembles the network input: the image, followed by the previous
    /// stage's foreground probability from stage 2 on.
    pub fn stage_input(&self, image: &Tensor<T>, prev_prob: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if image.shape().c != 1 {
            return Err(Error::shape("predict", format!("image must have 1 channel, got {}", image.shape())));
        }
        match (self.stage_index > 1, prev_prob) {
            (false, None) => Ok(image.clone()),
            (true, Some(p)) => {
                if p.shape() != image.shape() {
                    return Err(Error::shape(
                        "predict",
                        format!("previous probability {} vs image {}", p.shape(), image.shape()),
                    ));
                }
                crate::ops::basic::concat(image, p)
            }
            (false, Some(_)) => Err(Error::Contract(
                "stage-1 model takes no previous-stage probability".into(),
            )),
            (true, None) => Err(Error::Contract(format!(
                "stage-{} model requires the previous stage's probability",
                self.stage_index
            ))),
        }
    }

    /// Full-resolution class probabilities `(N, 2, H, W)` in inference mode.
    pub fn predict(&self, image: &Tensor<T>, prev_prob: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let input = self.stage_input(image, prev_prob)?;
        let mut g = Graph::new();
        let reg = self.register(&mut g, false);
        let x = g.constant(input);
        let out = self.forward(&mut g, x, &reg, Phase::Infer)?;
        Ok(softmax_channels(g.value(out.upsampled)))
    }

    /// One SGD step on a mini-batch. `input` already carries all stage
    /// channels; `target` holds class indices `(N,1,H,W)`. Returns the loss.
    pub fn train_step(&mut self, opt: &mut OptimizerState<T>, input: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let reg = self.register(&mut g, true);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, &reg, Phase::Train)?;
        let (loss, _) = g.softmax_cross_entropy(out.upsampled, target)?;
        g.backward(loss)?;

        let grads: Vec<Tensor<T>> = reg
            .vars
            .iter()
            .flatten()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        let mut params: Vec<&mut Tensor<T>> = self
            .specs
            .iter()
            .zip(self.tensors.iter_mut())
            .filter(|(s, _)| s.kind.trainable())
            .map(|(_, t)| t)
            .collect();
        opt.step(&mut params, &grad_refs)?;

        let momentum = self.config.bn_momentum;
        for (rm, v) in &out.batch_norms {
            let (mean, var) = g.batch_stats(*v).expect("training-mode batch norm");
            update_running(self.tensors[*rm].data_mut(), mean, momentum);
            update_running(self.tensors[*rm + 1].data_mut(), var, momentum);
        }
        Ok(g.value(loss).data()[0].as_f64())
    }
}
