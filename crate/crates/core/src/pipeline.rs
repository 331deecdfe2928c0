//! Single-stage training and the network-wise cascade.
//!
//! Stage 1 sees the image alone. Every later stage trains a fresh network on
//! the image concatenated with the previous stage's full-resolution
//! foreground probability, computed in inference mode. Stages continue
//! until validation JSC stops improving by at least `saturation_delta` or
//! `max_stages` is reached.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{parse_bool, parse_num, KeyValues};
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::{binarize, evaluate, DistanceUnit, MetricsReport};
use crate::ops::bilinear_resize;
use crate::optim::OptimizerState;
use crate::rng::SplitMix64;
use crate::segnet::{save_checkpoint, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_drop_epoch: usize,
    pub dropped_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub max_stages: usize,
    /// Stages always run before the saturation rule may stop the cascade.
    pub min_stages: usize,
    pub saturation_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            initial_lr: 0.1,
            lr_drop_epoch: 70,
            dropped_lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            augment: true,
            max_stages: 3,
            min_stages: 1,
            saturation_delta: 0.001,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "initial_lr",
        "lr_drop_epoch",
        "dropped_lr",
        "momentum",
        "batch_size",
        "seed",
        "augment",
        "max_stages",
        "min_stages",
        "saturation_delta",
    ];

    pub fn to_kv(&self) -> KeyValues {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("initial_lr".into(), self.initial_lr.to_string()),
            ("lr_drop_epoch".into(), self.lr_drop_epoch.to_string()),
            ("dropped_lr".into(), self.dropped_lr.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("augment".into(), self.augment.to_string()),
            ("max_stages".into(), self.max_stages.to_string()),
            ("min_stages".into(), self.min_stages.to_string()),
            ("saturation_delta".into(), self.saturation_delta.to_string()),
        ]
    }

    /// Applies one `key = value` pair; `Ok(false)` for keys not owned here.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "epochs" => self.epochs = parse_num(value)?,
            "initial_lr" => self.initial_lr = parse_num(value)?,
            "lr_drop_epoch" => self.lr_drop_epoch = parse_num(value)?,
            "dropped_lr" => self.dropped_lr = parse_num(value)?,
            "momentum" => self.momentum = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "augment" => self.augment = parse_bool(value)?,
            "max_stages" => self.max_stages = parse_num(value)?,
            "min_stages" => self.min_stages = parse_num(value)?,
            "saturation_delta" => self.saturation_delta = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, lr) in [("initial_lr", self.initial_lr), ("dropped_lr", self.dropped_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.max_stages == 0 {
            return fail("max_stages must be positive".into());
        }
        if self.min_stages == 0 || self.min_stages > self.max_stages {
            return fail(format!(
                "min_stages must lie in 1..={}, got {}",
                self.max_stages, self.min_stages
            ));
        }
        if !(self.saturation_delta >= 0.0) {
            return fail(format!("saturation_delta must be >= 0, got {}", self.saturation_delta));
        }
        Ok(())
    }
}

/// `initial_lr` before `lr_drop_epoch`, `dropped_lr` from then on.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_drop_epoch {
        config.initial_lr
    } else {
        config.dropped_lr
    }
}

/// `clamp(contrast·(x − 0.5) + 0.5 + brightness, 0, 1)`.
pub fn augment_with(image: &Tensor<f32>, contrast: f64, brightness: f64) -> Tensor<f32> {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (contrast * (*v as f64 - 0.5) + 0.5 + brightness).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Contrast from U[0.8, 1.2], then brightness from U[−0.2, 0.2].
pub fn augment(image: &Tensor<f32>, rng: &mut SplitMix64) -> Tensor<f32> {
    let contrast = rng.uniform(0.8, 1.2);
    let brightness = rng.uniform(-0.2, 0.2);
    augment_with(image, contrast, brightness)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationScore {
    pub jsc: f64,
    pub dc: f64,
    /// NaN when no validation sample had a defined distance.
    pub acd: f64,
    pub asd: f64,
}

impl ValidationScore {
    fn of(report: &MetricsReport) -> Self {
        ValidationScore {
            jsc: report.jsc.mean,
            dc: report.dc.mean,
            acd: report.acd.mean,
            asd: report.asd.mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean mini-batch loss.
    pub train_loss: f64,
    pub val: ValidationScore,
}

#[derive(Clone, Debug)]
pub struct StageArtifact {
    pub stage_index: usize,
    /// Weights from the best validation epoch.
    pub model: Model<f32>,
    pub checkpoint: Option<PathBuf>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Foreground probability `(1,1,H,W)` per sample id, from `model` in
    /// inference mode.
    pub probabilities: BTreeMap<String, Tensor<f32>>,
}

impl StageArtifact {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn train_loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_jsc_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val.jsc).collect()
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_jsc\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val.jsc);
        }
        out
    }
}

fn show(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Stage summary CSV. `jsc_gain` is the best validation JSC minus the
/// previous stage's; `saturated` marks a gain below `saturation_delta`.
pub fn summary_csv(artifacts: &[StageArtifact], saturation_delta: f64) -> String {
    let mut out = String::from("stage,best_epoch,val_jsc,val_dc,val_acd,val_asd,jsc_gain,saturated\n");
    let mut prev: Option<f64> = None;
    for a in artifacts {
        let b = a.best();
        let gain = prev.map(|p| b.val.jsc - p);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            a.stage_index,
            a.best_epoch,
            show(b.val.jsc),
            show(b.val.dc),
            show(b.val.acd),
            show(b.val.asd),
            gain.map(show).unwrap_or_default(),
            gain.map(|g| (g < saturation_delta).to_string()).unwrap_or_default()
        );
        prev = Some(b.val.jsc);
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const INFER_CHUNK: usize = 16;

/// Foreground probabilities `(1,1,H,W)` of `model` for every sample, fed
/// with `prev` from stage 2 on.
pub fn stage_probabilities(
    model: &Model<f32>,
    samples: &[SegmentationSample],
    prev: Option<&BTreeMap<String, Tensor<f32>>>,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_CHUNK) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let batch = Tensor::stack(&images)?;
        let prev_batch = match prev {
            Some(map) => {
                let maps = chunk
                    .iter()
                    .map(|s| {
                        map.get(&s.id).cloned().ok_or_else(|| {
                            Error::Contract(format!("no previous-stage probability cached for '{}'", s.id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(Tensor::stack(&maps)?)
            }
            None => None,
        };
        let probs = model.predict(&batch, prev_batch.as_ref())?;
        let fg = probs.channel(1);
        for i in 0..chunk.len() {
            out.push(fg.sample(i));
        }
    }
    Ok(out)
}

/// Runs `models` as a cascade on one `(1,1,H,W)` image and returns the last
/// stage's foreground probability at the image's resolution. Images of
/// another size than the models' input size are bilinearly resized there
/// and the probability resized back.
pub fn cascade_predict(models: &[Model<f32>], image: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_cascade(models)?;
    let s = image.shape();
    let size = models[0].config().input_size;
    let resized = (s.h, s.w) != (size, size);
    let input = if resized {
        bilinear_resize(image, size, size)?
    } else {
        image.clone()
    };
    let mut prev: Option<Tensor<f32>> = None;
    for m in models {
        let probs = m.predict(&input, prev.as_ref())?;
        prev = Some(probs.channel(1));
    }
    let p = prev.expect("non-empty cascade");
    if resized {
        bilinear_resize(&p, s.h, s.w)
    } else {
        Ok(p)
    }
}

/// Models must be stages 1, 2, .. in order.
pub fn check_cascade(models: &[Model<f32>]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Contract("cascade needs at least one model".into()));
    }
    for (i, m) in models.iter().enumerate() {
        let want = if i == 0 { 1 } else { 2 };
        if m.config().input_size != models[0].config().input_size {
            return Err(Error::Contract(format!(
                "checkpoint {} expects input size {}, the first expects {}",
                i + 1,
                m.config().input_size,
                models[0].config().input_size
            )));
        }
        if m.stage_index() != i + 1 || m.in_channels() != want {
            return Err(Error::Contract(format!(
                "checkpoint {} is stage {} with {} input channels; expected stage {} with {want}",
                i + 1,
                m.stage_index(),
                m.in_channels(),
                i + 1
            )));
        }
    }
    Ok(())
}

fn score(
    model: &Model<f32>,
    samples: &[SegmentationSample],
    prev: Option<&BTreeMap<String, Tensor<f32>>>,
) -> Result<ValidationScore> {
    let probs = stage_probabilities(model, samples, prev)?;
    let rows = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| evaluate(&s.id, &binarize(p, 0.5)?, &s.mask, DistanceUnit::Pixels))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationScore::of(&MetricsReport::new(rows, DistanceUnit::Pixels)))
}

/// Trains one cascade stage from scratch and caches its probabilities for
/// every training and validation sample.
pub fn train_stage(
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    stage_index: usize,
    prev: Option<&StageArtifact>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<StageArtifact> {
    config.validate()?;
    if stage_index == 0 || (stage_index > 1) != prev.is_some() {
        return Err(Error::Contract(format!(
            "stage {stage_index} {} a previous-stage artifact",
            if stage_index > 1 { "requires" } else { "takes no" }
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let size = model_config.input_size;
    if let Some(s) = train.iter().chain(val).find(|s| s.size() != (size, size)) {
        return Err(Error::Dataset(format!(
            "sample '{}' is {}x{}; the model expects {size}x{size}",
            s.id,
            s.size().1,
            s.size().0
        )));
    }
    let prev_maps = prev.map(|p| &p.probabilities);

    let mut rng = SplitMix64::derive(config.seed, 0x5354_4147_4500 + stage_index as u64);
    let mut model = Model::<f32>::build_for_stage(model_config, stage_index, rng.next_u64())?;
    let mut opt = OptimizerState::new(model.trainable(), config.initial_lr, config.momentum);

    let prev_of = |s: &SegmentationSample| -> Result<Option<Tensor<f32>>> {
        match prev_maps {
            None => Ok(None),
            Some(m) => m
                .get(&s.id)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::Contract(format!("no previous-stage probability cached for '{}'", s.id))),
        }
    };
    let cached: Vec<Option<Tensor<f32>>> = train.iter().map(prev_of).collect::<Result<_>>()?;
    for s in val {
        prev_of(s)?;
    }
    let targets: Vec<Tensor<f32>> = train.iter().map(|s| s.mask.to_tensor()).collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        opt.learning_rate = lr;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let inputs = idx
                .iter()
                .map(|&i| {
                    let image = if config.augment {
                        augment(&train[i].image, &mut rng)
                    } else {
                        train[i].image.clone()
                    };
                    model.stage_input(&image, cached[i].as_ref())
                })
                .collect::<Result<Vec<_>>>()?;
            let target_batch: Vec<Tensor<f32>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let diverged = |loss: f64| Error::Divergence {
                stage: stage_index,
                epoch,
                batch,
                lr,
                loss,
            };
            let loss = match model.train_step(&mut opt, &Tensor::stack(&inputs)?, &Tensor::stack(&target_batch)?) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(l)),
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            loss_sum += loss * idx.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val: match score(&model, val, prev_maps) {
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        stage: stage_index,
                        epoch,
                        batch: order.len().div_ceil(config.batch_size),
                        lr,
                        loss: f64::NAN,
                    })
                }
                r => r?,
            },
        };
        on_epoch(stage_index, &record);
        if best.as_ref().map_or(true, |(_, j, _)| record.val.jsc > *j) {
            best = Some((epoch, record.val.jsc, model.clone()));
        }
        epochs.push(record);
    }

    let (best_epoch, _, model) = best.expect("at least one epoch");
    let all: Vec<SegmentationSample> = train.iter().chain(val).cloned().collect();
    let probs = stage_probabilities(&model, &all, prev_maps)?;
    let probabilities = all.iter().map(|s| s.id.clone()).zip(probs).collect();
    Ok(StageArtifact {
        stage_index,
        model,
        checkpoint: None,
        epochs,
        best_epoch,
        probabilities,
    })
}

/// Runs stages `1..` until saturation or `max_stages`. With `out_dir`,
/// writes `stage<k>.ckpt`, `stage<k>_epochs.csv` and `stages.csv`.
pub fn networkwise_train(
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<Vec<StageArtifact>> {
    config.validate()?;
    let mut artifacts: Vec<StageArtifact> = Vec::new();
    for stage in 1..=config.max_stages {
        let mut a = train_stage(train, val, stage, artifacts.last(), model_config, config, on_epoch)?;
        if let Some(dir) = out_dir {
            let ckpt = dir.join(format!("stage{stage}.ckpt"));
            save_checkpoint(&a.model, &ckpt)?;
            a.checkpoint = Some(ckpt);
            write_text(&dir.join(format!("stage{stage}_epochs.csv")), &a.epoch_csv())?;
        }
        let gain = artifacts.last().map(|p| a.best().val.jsc - p.best().val.jsc);
        artifacts.push(a);
        if let Some(dir) = out_dir {
            write_text(&dir.join("stages.csv"), &summary_csv(&artifacts, config.saturation_delta))?;
        }
        if gain.is_some_and(|g| g < config.saturation_delta) && stage >= config.min_stages {
            break;
        }
    }
    Ok(artifacts)
}
