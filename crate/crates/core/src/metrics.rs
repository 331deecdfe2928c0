//! Overlap and boundary-distance metrics for binary segmentations.
//!
//! * Jaccard (JSC) and Dice (DC) coefficients.
//! * Average contour distance, the mean of the two directed mean boundary
//!   distances: `½(Σᵢ d(sᵢ,G)/n_S + Σⱼ d(gⱼ,S)/n_G)`.
//! * Average surface distance, all minimum distances pooled:
//!   `(Σᵢ d(sᵢ,G) + Σⱼ d(gⱼ,S)) / (n_S + n_G)`.
//!
//! Boundary pixels are foreground pixels with a 4-neighbour that is
//! background or outside the image. Distances are Euclidean between pixel
//! centres, computed exactly through a squared distance transform.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Boundary convention recorded in reports.
pub const BOUNDARY_CONVENTION: &str = "4-connected";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("mask", format!("{} values for {width}x{height}", data.len())));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        BinaryMask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// `(1,1,H,W)` tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            crate::tensor::Shape::new(1, 1, self.height, self.width),
            self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("shape")
    }
}

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "metrics",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    same_dims(pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(&a, &b)| a && b).count();
    Ok((inter, pred.count(), gt.count()))
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1 when both are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, p, g) = overlap(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2|pred ∩ gt| / (|pred| + |gt|)`; 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, p, g) = overlap(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundarySet {
    /// `(row, col)` in row-major order, no duplicates.
    pub points: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_boundary(mask: &BinaryMask) -> BoundarySet {
    let (w, h) = (mask.width, mask.height);
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                points.push((r, c));
            }
        }
    }
    BoundarySet { points }
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas) of `f`, written to `out`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every cell of a `rows × cols` grid to
/// the nearest of `sites`.
fn squared_distance_map(sites: &[(usize, usize)], rows: usize, cols: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; rows * cols];
    for &(r, c) in sites {
        grid[r * cols + c] = 0.0;
    }
    let n = rows.max(cols);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..cols {
        for r in 0..rows {
            f[r] = grid[r * cols + c];
        }
        if f[..rows].iter().all(|x| x.is_infinite()) {
            continue;
        }
        edt_1d(&f[..rows], &mut out[..rows], &mut v, &mut z);
        for r in 0..rows {
            grid[r * cols + c] = out[r];
        }
    }
    for r in 0..rows {
        let row = &mut grid[r * cols..(r + 1) * cols];
        if row.iter().all(|x| x.is_infinite()) {
            continue;
        }
        f[..cols].copy_from_slice(row);
        edt_1d(&f[..cols], &mut out[..cols], &mut v, &mut z);
        row.copy_from_slice(&out[..cols]);
    }
    grid
}

/// `d(p, to)` for every `p` in `from`, in pixel units.
pub fn min_distances(from: &BoundarySet, to: &BoundarySet) -> Vec<f64> {
    let rows = from.points.iter().chain(&to.points).map(|p| p.0 + 1).max().unwrap_or(0);
    let cols = from.points.iter().chain(&to.points).map(|p| p.1 + 1).max().unwrap_or(0);
    let map = squared_distance_map(&to.points, rows, cols);
    from.points.iter().map(|&(r, c)| map[r * cols + c].sqrt()).collect()
}

fn directed_sums(s: &BoundarySet, g: &BoundarySet) -> Result<(f64, f64)> {
    if s.is_empty() || g.is_empty() {
        return Err(Error::UndefinedMetric("boundary set is empty"));
    }
    let sum = |v: Vec<f64>| v.into_iter().fold(0.0, |a, b| a + b);
    Ok((sum(min_distances(s, g)), sum(min_distances(g, s))))
}

pub fn acd(s: &BoundarySet, g: &BoundarySet, spacing: f64) -> Result<f64> {
    let (sg, gs) = directed_sums(s, g)?;
    Ok(0.5 * (sg / s.len() as f64 + gs / g.len() as f64) * spacing)
}

pub fn asd(s: &BoundarySet, g: &BoundarySet, spacing: f64) -> Result<f64> {
    let (sg, gs) = directed_sums(s, g)?;
    Ok((sg + gs) / (s.len() + g.len()) as f64 * spacing)
}

/// Foreground where `prob ≥ threshold`. `prob` is a single `(1,1,H,W)`
/// map.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    let s = prob.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("binarize", format!("expected one probability map, got {s}")));
    }
    Ok(BinaryMask {
        width: s.w,
        height: s.h,
        data: prob.data().iter().map(|v| v.as_f64() >= threshold).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistanceUnit {
    Pixels,
    /// Millimetres at the given length per pixel.
    Millimetres(f64),
}

impl DistanceUnit {
    pub fn spacing(self) -> f64 {
        match self {
            DistanceUnit::Pixels => 1.0,
            DistanceUnit::Millimetres(s) => s,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DistanceUnit::Pixels => "px",
            DistanceUnit::Millimetres(_) => "mm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub jsc: f64,
    pub dc: f64,
    /// `None` when a boundary is empty and the distance is undefined.
    pub acd: Option<f64>,
    pub asd: Option<f64>,
}

impl SampleMetrics {
    pub fn flags(&self) -> &'static str {
        if self.acd.is_none() {
            "undefined_distance"
        } else {
            ""
        }
    }
}

pub fn evaluate(id: &str, pred: &BinaryMask, gt: &BinaryMask, unit: DistanceUnit) -> Result<SampleMetrics> {
    let jsc = jaccard(pred, gt)?;
    let dc = dice(pred, gt)?;
    let (s, g) = (extract_boundary(pred), extract_boundary(gt));
    let spacing = unit.spacing();
    let (acd, asd) = match (acd(&s, &g, spacing), asd(&s, &g, spacing)) {
        (Ok(a), Ok(b)) => (Some(a), Some(b)),
        (Err(Error::UndefinedMetric(_)), _) | (_, Err(Error::UndefinedMetric(_))) => (None, None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(SampleMetrics {
        id: id.to_string(),
        jsc,
        dc,
        acd,
        asd,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let count = values.clone().count();
        if count == 0 {
            return Aggregate {
                mean: f64::NAN,
                std: f64::NAN,
                count,
            };
        }
        let mean = values.clone().fold(0.0, |a, b| a + b) / count as f64;
        let var = values.fold(0.0, |a, b| a + (b - mean) * (b - mean)) / count as f64;
        Aggregate {
            mean,
            std: var.sqrt(),
            count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub unit: DistanceUnit,
    pub jsc: Aggregate,
    pub dc: Aggregate,
    pub acd: Aggregate,
    pub asd: Aggregate,
    /// Samples left out of the distance aggregates.
    pub excluded: usize,
}

impl MetricsReport {
    pub fn new(samples: Vec<SampleMetrics>, unit: DistanceUnit) -> Self {
        let jsc = Aggregate::of(samples.iter().map(|s| s.jsc));
        let dc = Aggregate::of(samples.iter().map(|s| s.dc));
        let acd = Aggregate::of(samples.iter().filter_map(|s| s.acd));
        let asd = Aggregate::of(samples.iter().filter_map(|s| s.asd));
        let excluded = samples.iter().filter(|s| s.acd.is_none()).count();
        MetricsReport {
            samples,
            unit,
            jsc,
            dc,
            acd,
            asd,
            excluded,
        }
    }

    /// CSV with one row per sample followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let unit = self.unit.tag();
        let mut out = String::from("sample_id,jsc,dc,acd,asd,unit,flags\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{unit},{}",
                s.id,
                s.jsc,
                s.dc,
                opt(s.acd),
                opt(s.asd),
                s.flags()
            );
        }
        let agg = |a: &Aggregate, f: fn(&Aggregate) -> f64| if a.count == 0 { String::new() } else { f(a).to_string() };
        let meta = format!(
            "n={} excluded={} boundary={BOUNDARY_CONVENTION} spacing={}",
            self.samples.len(),
            self.excluded,
            self.unit.spacing()
        );
        for (label, f) in [("mean", (|a: &Aggregate| a.mean) as fn(&Aggregate) -> f64), ("std", |a| a.std)] {
            let _ = writeln!(
                out,
                "{label},{},{},{},{},{unit},{meta}",
                agg(&self.jsc, f),
                agg(&self.dc, f),
                agg(&self.acd, f),
                agg(&self.asd, f)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
