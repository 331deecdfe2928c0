use std::path::{Path, PathBuf};

use crate::data::pgm::{read_pgm, write_pgm, Graymap};
use crate::data::{synth_phantom, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::ops::resize::nearest_source;
use crate::ops::bilinear_resize;
use crate::rng::SplitMix64;

/// Image bilinearly, mask by nearest source pixel, spacing scaled by
/// `original / target`.
pub fn resize_sample(sample: &SegmentationSample, target: usize) -> Result<SegmentationSample> {
    if target == 0 {
        return Err(Error::Contract("resize target must be positive".into()));
    }
    let (h, w) = sample.size();
    if (h, w) == (target, target) {
        return Ok(sample.clone());
    }
    let image = bilinear_resize(&sample.image, target, target)?;
    let mask = BinaryMask::from_fn(target, target, |r, c| {
        sample.mask.get(nearest_source(h, target, r), nearest_source(w, target, c))
    });
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image,
        mask,
        spacing: sample.spacing.map(|s| s * w as f64 / target as f64),
    })
}

/// The integer formed by the trailing ASCII digits of `id`.
pub fn trailing_index(id: &str) -> Result<u64> {
    let digits = id.len() - id.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    id[id.len() - digits..]
        .parse()
        .map_err(|_| Error::Dataset(format!("sample id '{id}' has no trailing index")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub spacing: Option<f64>,
    pub split: Option<Split>,
}

/// `manifest.csv` with columns `id,image_path,mask_path,spacing` and an
/// optional fifth column `split` (`train` or `val`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(&path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(&path, io),
                kind => Error::Dataset(format!("{}: {kind:?}", path.display())),
            })?;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row = i + 2;
            let field = |k: usize| record.get(k).map(str::trim).unwrap_or("");
            if record.len() < 4 || record.len() > 5 {
                return Err(Error::Dataset(format!("manifest row {row}: expected 4 or 5 columns")));
            }
            let spacing = match field(3) {
                "" => None,
                s => Some(s.parse::<f64>().ok().filter(|v| *v > 0.0).ok_or_else(|| {
                    Error::Dataset(format!("manifest row {row}: invalid spacing '{s}'"))
                })?),
            };
            let split = match field(4) {
                "" => None,
                "train" => Some(Split::Train),
                "val" => Some(Split::Val),
                s => return Err(Error::Dataset(format!("manifest row {row}: unknown split '{s}'"))),
            };
            let id = field(0).to_string();
            if id.is_empty() || entries.iter().any(|e| e.id == id) {
                return Err(Error::Dataset(format!("manifest row {row}: empty or duplicate id '{id}'")));
            }
            entries.push(ManifestEntry {
                id,
                image_path: field(1).into(),
                mask_path: field(2).into(),
                spacing,
                split,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&path, io),
            kind => Error::Dataset(format!("{}: {kind:?}", path.display())),
        })?;
        w.write_record(["id", "image_path", "mask_path", "spacing", "split"])?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                &e.image_path.to_string_lossy(),
                &e.mask_path.to_string_lossy(),
                &e.spacing.map(|s| s.to_string()).unwrap_or_default(),
                e.split.map(Split::tag).unwrap_or(""),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Odd trailing indices into the first fold, even into the second.
pub fn split_odd_even(entries: &[ManifestEntry]) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let mut odd = Vec::new();
    let mut even = Vec::new();
    for e in entries {
        if trailing_index(&e.id)? % 2 == 1 {
            odd.push(e.clone());
        } else {
            even.push(e.clone());
        }
    }
    Ok((odd, even))
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<SegmentationSample> {
    let image = read_pgm(dir.join(&e.image_path))?;
    let mask = read_pgm(dir.join(&e.mask_path))?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Dataset(format!(
            "sample '{}': image {}x{} vs mask {}x{}",
            e.id, image.width, image.height, mask.width, mask.height
        )));
    }
    let (w, h) = (image.width, image.height);
    Ok(SegmentationSample {
        id: e.id.clone(),
        image: crate::tensor::Tensor::from_vec(crate::tensor::Shape::new(1, 1, h, w), image.to_unit())?,
        mask: BinaryMask::new(w, h, mask.samples.iter().map(|&v| v > 0).collect())?,
        spacing: e.spacing,
    })
}

/// Every sample of the manifest in `dir`, paired with its split tag.
pub fn load_dataset(dir: &Path) -> Result<Vec<(SegmentationSample, Option<Split>)>> {
    let manifest = DatasetManifest::read(dir)?;
    manifest
        .entries
        .iter()
        .map(|e| Ok((load_entry(dir, e)?, e.split)))
        .collect()
}

/// Writes `images/<id>.pgm` (16-bit), `masks/<id>.pgm` (0/255) and the
/// manifest.
pub fn write_dataset(dir: &Path, samples: &[(SegmentationSample, Option<Split>)]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = DatasetManifest::default();
    for (s, split) in samples {
        let (h, w) = s.size();
        let image_path = PathBuf::from("images").join(format!("{}.pgm", s.id));
        let mask_path = PathBuf::from("masks").join(format!("{}.pgm", s.id));
        write_pgm(&Graymap::from_unit(w, h, u16::MAX, s.image.data())?, dir.join(&image_path))?;
        let mask = s.mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
        write_pgm(&Graymap::new(w, h, 255, mask)?, dir.join(&mask_path))?;
        manifest.entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            mask_path,
            spacing: s.spacing,
            split: *split,
        });
    }
    manifest.write(dir)
}

/// `count` phantoms `phantom_0001 ..`; sample `i` draws from
/// `SplitMix64::derive(seed, i)`. The last `val_count` are validation.
pub fn synth_dataset(
    count: usize,
    size: usize,
    seed: u64,
    val_count: usize,
) -> Result<Vec<(SegmentationSample, Option<Split>)>> {
    if val_count > count {
        return Err(Error::Dataset(format!("{val_count} validation samples requested out of {count}")));
    }
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::derive(seed, i as u64);
            let mut s = synth_phantom(&mut rng, size)?;
            s.id = format!("phantom_{:04}", i + 1);
            let split = if i < count - val_count { Split::Train } else { Split::Val };
            Ok((s, Some(split)))
        })
        .collect()
}
