//! Synthetic chest-radiograph phantoms: two dark elliptical lung fields on
//! a brighter background with an illumination gradient, horizontal rib
//! texture and pixel noise.

use std::f64::consts::PI;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tensor};

pub const MIN_PHANTOM_SIZE: usize = 32;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn draw(rng: &mut SplitMix64, size: f64, centre: (f64, f64)) -> Self {
        Ellipse {
            cx: rng.uniform(centre.0, centre.1) * size,
            cy: rng.uniform(0.45, 0.55) * size,
            a: rng.uniform(0.11, 0.15) * size,
            b: rng.uniform(0.25, 0.33) * size,
            theta: rng.uniform(-0.15, 0.15),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

/// One phantom of `size × size` pixels. Every random draw comes from `rng`
/// in a fixed order, so the sample is a pure function of its state.
pub fn synth_phantom(rng: &mut SplitMix64, size: usize) -> Result<SegmentationSample> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::Contract(format!("phantom size {size} is below {MIN_PHANTOM_SIZE}")));
    }
    let s = size as f64;
    let left = Ellipse::draw(rng, s, (0.27, 0.33));
    let right = Ellipse::draw(rng, s, (0.67, 0.73));
    let background = rng.uniform(0.65, 0.75);
    let gradient = (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    let rib_period = rng.uniform(0.07, 0.1) * s;
    let rib_phase = rng.uniform(0.0, 2.0 * PI);
    let rib_amplitude = rng.uniform(0.03, 0.06);
    let lung_drop = rng.uniform(0.3, 0.4);

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let inside = left.contains(x, y) || right.contains(x, y);
            let mut v = background
                + gradient.0 * (x / s - 0.5)
                + gradient.1 * (y / s - 0.5)
                + rib_amplitude * (2.0 * PI * y / rib_period + rib_phase).sin();
            if inside {
                v -= lung_drop;
            }
            v += 0.03 * rng.normal();
            image.push(v.clamp(0.0, 1.0) as f32);
            mask.push(inside);
        }
    }
    Ok(SegmentationSample {
        id: String::from("phantom"),
        image: Tensor::from_vec(Shape::new(1, 1, size, size), image)?,
        mask: BinaryMask::new(size, size, mask)?,
        spacing: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_binary() {
        let a = synth_phantom(&mut SplitMix64::new(5), 48).unwrap();
        let b = synth_phantom(&mut SplitMix64::new(5), 48).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask, b.mask);
        let c = synth_phantom(&mut SplitMix64::new(6), 48).unwrap();
        assert_ne!(a.mask, c.mask);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lungs_are_darker() {
        let p = synth_phantom(&mut SplitMix64::new(1), 64).unwrap();
        let (mut fg, mut bg) = ((0.0, 0), (0.0, 0));
        for (v, &m) in p.image.data().iter().zip(p.mask.data()) {
            let acc = if m { &mut fg } else { &mut bg };
            acc.0 += *v as f64;
            acc.1 += 1;
        }
        assert!(bg.0 / bg.1 as f64 - fg.0 / fg.1 as f64 > 0.2);
    }

    #[test]
    fn too_small_rejected() {
        assert!(synth_phantom(&mut SplitMix64::new(0), 31).is_err());
    }
}
