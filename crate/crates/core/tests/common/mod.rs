//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use atroseg::metrics::{BinaryMask, BoundarySet};
use atroseg::ops::ConvSpec;
use atroseg::rng::SplitMix64;
use atroseg::{Shape, Tensor};

/// Direct evaluation of
/// `y[n,o,i,j] = b[o] + Σ_c Σ_u Σ_v w[o,c,u,v] · x[n,c, i·s + r·u − p, j·s + r·v − p]`
/// with zero outside the input.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let k = spec.kernel;
    let eff = spec.rate * (k - 1) + 1;
    let oh = (s.h + 2 * spec.padding - eff) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding - eff) / spec.stride + 1;
    let mut y = Tensor::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..s.c {
                        for u in 0..k {
                            for v in 0..k {
                                let r = (i * spec.stride + spec.rate * u) as isize - spec.padding as isize;
                                let q = (j * spec.stride + spec.rate * v) as isize - spec.padding as isize;
                                if r < 0 || q < 0 || r >= s.h as isize || q >= s.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, u, v) * x.at(n, c, r as usize, q as usize);
                            }
                        }
                    }
                    let idx = y.index(n, o, i, j);
                    y.data_mut()[idx] = acc;
                }
            }
        }
    }
    y
}

/// Dense kernel of extent `rate·(k−1)+1` holding `w` at multiples of
/// `rate` and zeros between.
pub fn zero_inflate<T: atroseg::Real>(w: &Tensor<T>, rate: usize) -> Tensor<T> {
    let s = w.shape();
    let e = rate * (s.h - 1) + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, e, e));
    for o in 0..s.n {
        for c in 0..s.c {
            for u in 0..s.h {
                for v in 0..s.w {
                    let idx = out.index(o, c, u * rate, v * rate);
                    out.data_mut()[idx] = w.at(o, c, u, v);
                }
            }
        }
    }
    out
}

/// All-pairs minimum distances: `(Σ d(s,G), Σ d(g,S))`.
pub fn brute_force_sums(s: &BoundarySet, g: &BoundarySet) -> (f64, f64) {
    let d = |a: (usize, usize), b: (usize, usize)| {
        let dr = a.0 as f64 - b.0 as f64;
        let dc = a.1 as f64 - b.1 as f64;
        (dr * dr + dc * dc).sqrt()
    };
    let directed = |from: &BoundarySet, to: &BoundarySet| -> f64 {
        from.points
            .iter()
            .map(|&p| to.points.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    (directed(s, g), directed(g, s))
}

pub fn brute_force_acd(s: &BoundarySet, g: &BoundarySet, spacing: f64) -> f64 {
    let (a, b) = brute_force_sums(s, g);
    0.5 * (a / s.len() as f64 + b / g.len() as f64) * spacing
}

pub fn brute_force_asd(s: &BoundarySet, g: &BoundarySet, spacing: f64) -> f64 {
    let (a, b) = brute_force_sums(s, g);
    (a + b) / (s.len() + g.len()) as f64 * spacing
}

/// Smooth-ish random blob: thresholded sum of a few random discs, so
/// boundaries are non-trivial. May be empty for small `fill`.
pub fn random_blob(rng: &mut SplitMix64, w: usize, h: usize) -> BinaryMask {
    let discs: Vec<(f64, f64, f64)> = (0..1 + rng.below(4))
        .map(|_| {
            (
                rng.uniform(0.0, h as f64),
                rng.uniform(0.0, w as f64),
                rng.uniform(1.0, (w.min(h) as f64 / 2.0).max(1.5)),
            )
        })
        .collect();
    let noise = rng.uniform(0.0, 0.15);
    BinaryMask::from_fn(w, h, |r, c| {
        let inside = discs.iter().any(|&(cy, cx, rad)| {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            dy * dy + dx * dx <= rad * rad
        });
        inside ^ (rng.next_f64() < noise)
    })
}

pub fn random_mask(rng: &mut SplitMix64, w: usize, h: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(w, h, |_, _| rng.next_f64() < p)
}

pub fn random_tensor(rng: &mut SplitMix64, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}
