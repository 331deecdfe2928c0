//! Binary portable graymap (`P5`) reading and writing, 8- and 16-bit.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    /// 1..=65535; above 255 samples are two bytes, big-endian.
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Graymap {
    pub fn new(width: usize, height: usize, maxval: u16, samples: Vec<u16>) -> Result<Self> {
        if maxval == 0 {
            return Err(Error::PgmDepth("maxval must be at least 1".into()));
        }
        if samples.len() != width * height {
            return Err(Error::PgmHeader(format!("{} samples for {width}x{height}", samples.len())));
        }
        if let Some(v) = samples.iter().find(|&&v| v > maxval) {
            return Err(Error::PgmDepth(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Graymap {
            width,
            height,
            maxval,
            samples,
        })
    }

    /// Quantizes `[0,1]` values (clamped) to `0..=maxval`, rounding to nearest.
    pub fn from_unit(width: usize, height: usize, maxval: u16, values: &[f32]) -> Result<Self> {
        let m = maxval as f64;
        let samples = values
            .iter()
            .map(|&v| ((v as f64).clamp(0.0, 1.0) * m).round() as u16)
            .collect();
        Graymap::new(width, height, maxval, samples)
    }

    /// Samples divided by maxval.
    pub fn to_unit(&self) -> Vec<f32> {
        let m = self.maxval as f64;
        self.samples.iter().map(|&v| (v as f64 / m) as f32).collect()
    }

    pub fn bytes_per_sample(&self) -> usize {
        if self.maxval > 255 {
            2
        } else {
            1
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.bytes_per_sample() == 2 {
            for v in &self.samples {
                out.extend_from_slice(&v.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(Error::PgmHeader("missing P5 magic".into()));
        }
        pos += 2;
        let mut fields = [0u64; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            // Whitespace and comments between tokens.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let name = ["width", "height", "maxval"][i];
            if start == pos {
                return Err(Error::PgmHeader(format!("expected {name} at byte {start}")));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
            *field = text
                .parse()
                .map_err(|_| Error::PgmHeader(format!("{name} '{text}' out of range")))?;
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::PgmHeader("expected one whitespace byte after maxval".into())),
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(Error::PgmHeader(format!("empty raster {width}x{height}")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::PgmDepth(format!("maxval {maxval} outside 1..=65535")));
        }
        let count = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| Error::PgmHeader("raster too large".into()))?;
        let bps = if maxval > 255 { 2 } else { 1 };
        let expected = count * bps;
        let payload = &bytes[pos..];
        if payload.len() < expected {
            return Err(Error::PgmTruncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::PgmHeader(format!(
                "{} bytes after the raster; only single-image files are supported",
                payload.len() - expected
            )));
        }
        let samples = if bps == 2 {
            payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            payload.iter().map(|&b| b as u16).collect()
        };
        Graymap::new(width as usize, height as usize, maxval as u16, samples)
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Graymap> {
    let path = path.as_ref();
    Graymap::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(image: &Graymap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, image.to_bytes()).map_err(|e| Error::io(path, e))
}
