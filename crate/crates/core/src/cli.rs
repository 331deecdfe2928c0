//! The `atroseg` command line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, config or I/O
//! error, 3 training divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    load_dataset, read_pgm, resize_sample, split_odd_even, synth_dataset, write_dataset, write_pgm, DatasetManifest,
    Graymap, SegmentationSample, Split,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, TOLERANCE};
use crate::metrics::{binarize, evaluate, BinaryMask, DistanceUnit, MetricsReport};
use crate::ops::bilinear_resize;
use crate::pipeline::{self, check_cascade, networkwise_train};
use crate::segnet::{load_checkpoint, Model};
use crate::tensor::{Shape, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ATROSEG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "atroseg", version, about = "Atrous-convolution lung segmentation with cascaded training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic phantoms and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trailing samples tagged for validation [default: count/4].
        #[arg(long)]
        val_count: Option<usize>,
    },
    /// Train the network-wise cascade.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cascaded inference and metrics over a dataset.
    Eval {
        /// Checkpoints in cascade order.
        #[arg(long = "model", num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Length per pixel; distances are in pixels when omitted.
        #[arg(long)]
        spacing: Option<f64>,
        #[arg(long)]
        report: PathBuf,
        /// Which manifest split to evaluate: all, train or val.
        #[arg(long, default_value = "all")]
        split: String,
        /// Score the ground truth against itself instead of running a model.
        #[arg(long)]
        self_check: bool,
    },
    /// Segment one graymap.
    Predict {
        #[arg(long = "model", num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask output (8-bit, 0/255).
        #[arg(long)]
        out: PathBuf,
        /// Optional 16-bit foreground probability output.
        #[arg(long)]
        prob: Option<PathBuf>,
    },
    /// Finite-difference gradient verification of every layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_layer: Option<String>,
    },
    /// Print a stage summary written by `train`.
    Report {
        /// `stages.csv` or the training output directory.
        #[arg(long)]
        run: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command));
    match result {
        Ok(code) => code,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            EXIT_DIVERGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            val_count,
        } => cmd_synth(&out, count, size, seed, val_count.unwrap_or(count / 4)),
        Command::Train { config, data, out } => cmd_train(config.as_deref(), data, out),
        Command::Eval {
            models,
            data,
            spacing,
            report,
            split,
            self_check,
        } => cmd_eval(&models, &data, spacing, &report, &split, self_check),
        Command::Predict {
            models,
            image,
            out,
            prob,
        } => cmd_predict(&models, &image, &out, prob.as_deref()),
        Command::Gradcheck { seed, corrupt_layer } => cmd_gradcheck(seed, corrupt_layer.as_deref()),
        Command::Report { run } => cmd_report(&run),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64, val_count: usize) -> Result<i32> {
    create_dir(out)?;
    let samples = synth_dataset(count, size, seed, val_count)?;
    write_dataset(out, &samples)?;
    println!(
        "wrote {count} phantoms ({} train, {val_count} val) of {size}x{size} to {}",
        count - val_count,
        out.display()
    );
    Ok(EXIT_OK)
}

/// Train/validation partition from manifest tags, or the odd/even folds
/// when no sample is tagged.
fn partition(
    dir: &Path,
    samples: Vec<(SegmentationSample, Option<Split>)>,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    if samples.iter().any(|(_, s)| s.is_some()) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (s, split) in samples {
            match split {
                Some(Split::Train) => train.push(s),
                Some(Split::Val) => val.push(s),
                None => return Err(Error::Dataset(format!("sample '{}' has no split tag", s.id))),
            }
        }
        return Ok((train, val));
    }
    let (odd, _) = split_odd_even(&DatasetManifest::read(dir)?.entries)?;
    let (train, val) = samples.into_iter().map(|(s, _)| s).partition(|s| odd.iter().any(|e| e.id == s.id));
    Ok((train, val))
}

fn resize_all(samples: Vec<SegmentationSample>, size: usize) -> Result<Vec<SegmentationSample>> {
    samples.iter().map(|s| resize_sample(s, size)).collect()
}

fn cmd_train(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<i32> {
    let mut run: RunConfig = match config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?.parse()?,
        None => RunConfig::default(),
    };
    if data.is_some() {
        run.data_dir = data;
    }
    if out.is_some() {
        run.out_dir = out;
    }
    let data_dir = run
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no data directory (--data or data_dir)".into()))?;
    let out_dir = run
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (--out or out_dir)".into()))?;
    create_dir(&out_dir)?;
    let config_path = out_dir.join("config.txt");
    std::fs::write(&config_path, run.to_string()).map_err(|e| Error::io(&config_path, e))?;

    let (train, val) = partition(&data_dir, load_dataset(&data_dir)?)?;
    let size = run.model.input_size;
    let (train, val) = (resize_all(train, size)?, resize_all(val, size)?);
    eprintln!("training on {} samples, validating on {} at {size}x{size}", train.len(), val.len());
    let started = std::time::Instant::now();
    let artifacts = networkwise_train(
        &train,
        &val,
        &run.model,
        &run.train,
        Some(&out_dir),
        &mut |stage, e| {
            eprintln!(
                "stage {stage} epoch {:>3} lr {} loss {:.5} val_jsc {:.4} ({:.0?})",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val.jsc,
                started.elapsed()
            )
        },
    )?;
    for a in &artifacts {
        println!(
            "stage {} best epoch {} val_jsc {:.4} -> {}",
            a.stage_index,
            a.best_epoch,
            a.best().val.jsc,
            a.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
    }
    Ok(EXIT_OK)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model<f32>>> {
    let models = paths.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    check_cascade(&models)?;
    Ok(models)
}

/// Foreground probability of the cascade at each sample's own resolution.
fn cascade_probabilities(models: &[Model<f32>], samples: &[SegmentationSample]) -> Result<Vec<Tensor<f32>>> {
    let size = models[0].config().input_size;
    let resized = resize_all(samples.to_vec(), size)?;
    let mut prev: Option<BTreeMap<String, Tensor<f32>>> = None;
    let mut probs = Vec::new();
    for m in models {
        probs = pipeline::stage_probabilities(m, &resized, prev.as_ref())?;
        prev = Some(resized.iter().map(|s| s.id.clone()).zip(probs.iter().cloned()).collect());
    }
    samples
        .iter()
        .zip(probs)
        .map(|(s, p)| {
            let (h, w) = s.size();
            if p.shape() == Shape::new(1, 1, h, w) {
                Ok(p)
            } else {
                bilinear_resize(&p, h, w)
            }
        })
        .collect()
}

fn cmd_eval(
    models: &[PathBuf],
    data: &Path,
    spacing: Option<f64>,
    report: &Path,
    split: &str,
    self_check: bool,
) -> Result<i32> {
    let wanted = match split {
        "all" => None,
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let unit = match spacing {
        None => DistanceUnit::Pixels,
        Some(s) if s > 0.0 && s.is_finite() => DistanceUnit::Millimetres(s),
        Some(s) => return Err(Error::Config(format!("spacing must be positive, got {s}"))),
    };
    let samples: Vec<SegmentationSample> = load_dataset(data)?
        .into_iter()
        .filter(|(_, s)| wanted.is_none() || *s == wanted)
        .map(|(s, _)| s)
        .collect();
    let preds: Vec<BinaryMask> = if self_check {
        samples.iter().map(|s| s.mask.clone()).collect()
    } else {
        if models.is_empty() {
            return Err(Error::Config("--model is required unless --self-check is given".into()));
        }
        let models = load_models(models)?;
        cascade_probabilities(&models, &samples)?
            .iter()
            .map(|p| binarize(p, 0.5))
            .collect::<Result<_>>()?
    };
    let rows = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| evaluate(&s.id, p, &s.mask, unit))
        .collect::<Result<Vec<_>>>()?;
    let r = MetricsReport::new(rows, unit);
    r.write_csv(report)?;
    let tag = unit.tag();
    println!("samples {} (distance undefined for {})", r.samples.len(), r.excluded);
    println!("JSC {:.4} ± {:.4}", r.jsc.mean, r.jsc.std);
    println!("DC  {:.4} ± {:.4}", r.dc.mean, r.dc.std);
    println!("ACD {:.4} ± {:.4} {tag}", r.acd.mean, r.acd.std);
    println!("ASD {:.4} ± {:.4} {tag}", r.asd.mean, r.asd.std);
    Ok(EXIT_OK)
}

fn cmd_predict(models: &[PathBuf], image: &Path, out: &Path, prob: Option<&Path>) -> Result<i32> {
    let models = load_models(models)?;
    let g = read_pgm(image)?;
    let (h, w) = (g.height, g.width);
    let img = Tensor::from_vec(Shape::new(1, 1, h, w), g.to_unit())?;
    let size = models[0].config().input_size;
    if (h, w) != (size, size) {
        eprintln!("note: resized {w}x{h} input to {size}x{size} for the model and back");
    }
    let p = pipeline::cascade_predict(&models, &img)?;
    let mask = binarize(&p, 0.5)?;
    let bytes = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(&Graymap::new(w, h, 255, bytes)?, out)?;
    if let Some(path) = prob {
        write_pgm(&Graymap::from_unit(w, h, u16::MAX, p.data())?, path)?;
    }
    println!("foreground pixels {} of {}", mask.count(), w * h);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<i32> {
    let started = std::time::Instant::now();
    let reports = gradcheck::run_suite(seed, corrupt)?;
    let mut failed = Vec::new();
    println!("{:<24} {:>12} {:>8} {:>8}  status", "layer", "max_rel_err", "checked", "skipped");
    for r in &reports {
        let ok = r.passed();
        println!(
            "{:<24} {:>12.3e} {:>8} {:>8}  {}",
            r.layer,
            r.result.max_rel_error,
            r.result.checked,
            r.result.skipped,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.layer.as_str());
        }
    }
    eprintln!("gradcheck finished in {:.1?}", started.elapsed());
    if failed.is_empty() {
        println!("all {} layers within {TOLERANCE:e}", reports.len());
        Ok(EXIT_OK)
    } else {
        println!("failed layers: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

fn cmd_report(run: &Path) -> Result<i32> {
    let path = if run.is_dir() { run.join("stages.csv") } else { run.to_path_buf() };
    let mut reader = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        kind => Error::Dataset(format!("{}: {kind:?}", path.display())),
    })?;
    let headers = reader.headers()?.clone();
    println!("{}", headers.iter().collect::<Vec<_>>().join("\t"));
    let col = |name: &str| headers.iter().position(|h| h == name);
    let jsc_col = col("val_jsc").ok_or_else(|| Error::Dataset("summary has no val_jsc column".into()))?;
    let mut jsc = Vec::new();
    for record in reader.records() {
        let record = record?;
        println!("{}", record.iter().collect::<Vec<_>>().join("\t"));
        jsc.push(record.get(jsc_col).unwrap_or("").parse::<f64>().unwrap_or(f64::NAN));
    }
    let trend = if jsc.windows(2).all(|w| w[1] >= w[0]) {
        "non-decreasing"
    } else {
        "not monotone"
    };
    println!("validation JSC across {} stages: {trend}", jsc.len());
    Ok(EXIT_OK)
}
