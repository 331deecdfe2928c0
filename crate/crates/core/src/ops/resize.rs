//! Bilinear resampling with half-pixel centers.
//!
//! Destination pixel `d` samples source coordinate
//! `(d + 0.5)·(in/out) − 0.5`, clamped to `[0, in−1]`, and blends its two
//! neighbours along each axis.

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: T::of(src - lo as f64),
            }
        })
        .collect()
}

/// Source index sampled by nearest-neighbour resizing under the same
/// half-pixel convention.
pub fn nearest_source(input: usize, output: usize, d: usize) -> usize {
    let src = ((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize;
    src.min(input - 1)
}

pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape(
            "bilinear_resize",
            format!("cannot resize {s} to {out_h}x{out_w}"),
        ));
    }
    let ty = taps::<T>(s.h, out_h);
    let tx = taps::<T>(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let op = out_h * out_w;
    for (pi, dst) in out.data_mut().chunks_mut(op).enumerate() {
        let src = x.plane(pi / s.c, pi % s.c);
        for (oy, row) in dst.chunks_mut(out_w).enumerate() {
            let Tap { lo: y0, hi: y1, frac: fy } = ty[oy];
            let (r0, r1) = (&src[y0 * s.w..(y0 + 1) * s.w], &src[y1 * s.w..(y1 + 1) * s.w]);
            for (o, t) in row.iter_mut().zip(&tx) {
                let top = r0[t.lo] * (T::one() - t.frac) + r0[t.hi] * t.frac;
                let bottom = r1[t.lo] * (T::one() - t.frac) + r1[t.hi] * t.frac;
                *o = top * (T::one() - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_resize`]: scatters each output adjoint onto the
/// four source pixels with the same blend weights.
pub fn bilinear_adjoint<T: Real>(up: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let s = up.shape();
    let ty = taps::<T>(in_h, s.h);
    let tx = taps::<T>(in_w, s.w);
    let mut dx = Tensor::zeros(Shape::new(s.n, s.c, in_h, in_w));
    let ip = in_h * in_w;
    for (pi, dst) in dx.data_mut().chunks_mut(ip).enumerate() {
        let src = up.plane(pi / s.c, pi % s.c);
        for (oy, row) in src.chunks(s.w).enumerate() {
            let Tap { lo: y0, hi: y1, frac: fy } = ty[oy];
            for (&g, t) in row.iter().zip(&tx) {
                let top = g * (T::one() - fy);
                let bottom = g * fy;
                dst[y0 * in_w + t.lo] += top * (T::one() - t.frac);
                dst[y0 * in_w + t.hi] += top * t.frac;
                dst[y1 * in_w + t.lo] += bottom * (T::one() - t.frac);
                dst[y1 * in_w + t.hi] += bottom * t.frac;
            }
        }
    }
    dx
}

impl<T: Real> Graph<T> {
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(x)?;
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        self.push("bilinear_resize", out, Op::Resize(x), &[x])
    }
}
