//! Strided, dilated (atrous) 2-D convolution.
//!
//! For a kernel of extent `2k+1` and rate `r`, each output is
//!
//! ```text
//! y(i, j) = Σ_c Σ_{m=-k..k} Σ_{n=-k..k} x_c(i + r·m, j + r·n) · w_c(m, n)
//! ```
//!
//! evaluated on the output grid `(i, j) = (stride·oy − pad + r·k, …)`, with
//! zeros outside the input. This is cross-correlation: taps are not flipped.
//!
//! The implementation lowers each sample to a column matrix whose rows are
//! `(channel, tap_row, tap_col)` and whose columns are output pixels, then
//! runs a single GEMM against the `(out_channels, in_channels·k·k)` weight
//! matrix.

use rayon::prelude::*;

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub rate: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Spec with "same" padding, `rate·(kernel−1)/2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rate: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            rate,
            padding: rate * kernel.saturating_sub(1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("conv channel counts must be positive: {self:?}")));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd and positive, got {}", self.kernel)));
        }
        if self.stride == 0 || self.rate == 0 {
            return Err(Error::Config(format!("conv stride and rate must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Receptive extent of one filter: `rate·(kernel−1)+1`.
    pub fn effective_kernel(&self) -> usize {
        self.rate * (self.kernel - 1) + 1
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        let eff = self.effective_kernel();
        if padded < eff {
            return Err(Error::shape(
                "conv2d",
                format!("input extent {input} with padding {} smaller than effective kernel {eff}", self.padding),
            ));
        }
        Ok((padded - eff) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self, spec: &ConvSpec) -> usize {
        self.c * spec.kernel * spec.kernel
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Range of output columns `ox` whose source column `ox·stride + offset`
/// falls inside `[0, extent)`.
fn valid_range(out: usize, extent: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = extent as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(out) };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &Geometry, spec: &ConvSpec, cols: &mut [T]) {
    let k = spec.kernel;
    let p = g.pixels();
    let pad = spec.padding as isize;
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let row_off = (ki * spec.rate) as isize - pad;
            for kj in 0..k {
                let col_off = (kj * spec.rate) as isize - pad;
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (x0, x1) = valid_range(g.ow, g.w, spec.stride, col_off);
                for oy in 0..g.oh {
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * spec.stride) as isize + row_off;
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let s = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..x0].fill(T::zero());
                    d[x1..].fill(T::zero());
                    if x0 == x1 {
                        continue;
                    }
                    if spec.stride == 1 {
                        let start = (x0 as isize + col_off) as usize;
                        d[x0..x1].copy_from_slice(&s[start..start + (x1 - x0)]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate().take(x1).skip(x0) {
                            *v = s[((ox * spec.stride) as isize + col_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
fn col2im<T: Real>(cols: &[T], g: &Geometry, spec: &ConvSpec, dx: &mut [T]) {
    let k = spec.kernel;
    let p = g.pixels();
    let pad = spec.padding as isize;
    for c in 0..g.c {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let row_off = (ki * spec.rate) as isize - pad;
            for kj in 0..k {
                let col_off = (kj * spec.rate) as isize - pad;
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (x0, x1) = valid_range(g.ow, g.w, spec.stride, col_off);
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride) as isize + row_off;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    let d = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in s.iter().enumerate().take(x1).skip(x0) {
                        d[((ox * spec.stride) as isize + col_off) as usize] += v;
                    }
                }
            }
        }
    }
}

fn geometry(input: Shape, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    if input.c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, spec expects {}", input.c, spec.in_channels),
        ));
    }
    Ok(Geometry {
        c: input.c,
        h: input.h,
        w: input.w,
        oh: spec.output_extent(input.h)?,
        ow: spec.output_extent(input.w)?,
    })
}

/// Forward convolution without recording a graph node.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = geometry(s, spec)?;
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape {} expected {}", weight.shape(), spec.weight_shape()),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != spec.out_channels {
            return Err(Error::shape("conv2d", format!("bias has {} values", b.numel())));
        }
    }
    let (patch, p) = (g.patch(spec), g.pixels());
    let cout = spec.out_channels;
    let in_per = s.c * s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, cout, g.oh, g.ow));

    out.data_mut()
        .par_chunks_mut(cout * p)
        .enumerate()
        .for_each(|(n, y)| {
            let x = &input.data()[n * in_per..(n + 1) * in_per];
            let mut buf;
            let cols: &[T] = if spec.is_pointwise() {
                x
            } else {
                buf = vec![T::zero(); patch * p];
                im2col(x, &g, spec, &mut buf);
                &buf
            };
            T::gemm(cout, patch, p, weight.data(), (patch as isize, 1), cols, (p as isize, 1), y, false);
            if let Some(b) = bias {
                for (co, row) in y.chunks_mut(p).enumerate() {
                    let bv = b.data()[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

pub(crate) struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Real>(
    up: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    needs: Needs,
) -> ConvGrads<T> {
    let s = input.shape();
    let g = geometry(s, spec).expect("validated in forward");
    let (patch, p) = (g.patch(spec), g.pixels());
    let cout = spec.out_channels;
    let in_per = s.c * s.plane();

    // Per-sample partial results, reduced below in batch order so the sum
    // is independent of thread scheduling.
    let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let x = &input.data()[n * in_per..(n + 1) * in_per];
            let dy = &up.data()[n * cout * p..(n + 1) * cout * p];
            let dw = needs.weight.then(|| {
                let mut buf;
                let cols: &[T] = if spec.is_pointwise() {
                    x
                } else {
                    buf = vec![T::zero(); patch * p];
                    im2col(x, &g, spec, &mut buf);
                    &buf
                };
                let mut dw = vec![T::zero(); cout * patch];
                T::gemm(cout, p, patch, dy, (p as isize, 1), cols, (1, p as isize), &mut dw, false);
                dw
            });
            let dx = needs.input.then(|| {
                let mut dcols = vec![T::zero(); patch * p];
                T::gemm(patch, cout, p, weight.data(), (1, patch as isize), dy, (p as isize, 1), &mut dcols, false);
                if spec.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); in_per];
                    col2im(&dcols, &g, spec, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dw_total: Option<Vec<T>> = None;
    let mut dx_total = needs.input.then(|| Vec::with_capacity(input.numel()));
    for (dw, dx) in partials {
        if let Some(dw) = dw {
            match dw_total.as_mut() {
                None => dw_total = Some(dw),
                Some(acc) => acc.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b),
            }
        }
        if let (Some(acc), Some(dx)) = (dx_total.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }

    let bias = needs.bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for n in 0..s.n {
            for (co, d) in db.iter_mut().enumerate() {
                let row = &up.data()[(n * cout + co) * p..(n * cout + co + 1) * p];
                *d += row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        Tensor::from_vec(Shape::new(1, cout, 1, 1), db).expect("shape")
    });

    ConvGrads {
        input: dx_total.map(|d| Tensor::from_vec(s, d).expect("shape")),
        weight: dw_total.map(|d| Tensor::from_vec(spec.weight_shape(), d).expect("shape")),
        bias,
    }
}

impl<T: Real> Graph<T> {
    /// Records a convolution. `bias`, when given, holds `out_channels`
    /// values in any shape.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            &inputs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(input: Tensor<f64>, weight: Tensor<f64>, spec: ConvSpec) -> Result<Tensor<f64>> {
        conv2d_forward(&input, &weight, None, &spec)
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::from_fn(Shape::new(2, 1, 4, 5), |i| i as f64 - 3.0);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        assert_eq!(run(x.clone(), w, ConvSpec::same(1, 1, 1, 1, 1)).unwrap(), x);
    }

    #[test]
    fn dilated_all_ones_counts_taps() {
        let x = Tensor::full(Shape::new(1, 1, 5, 5), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let spec = ConvSpec {
            padding: 0,
            ..ConvSpec::same(1, 1, 3, 1, 2)
        };
        let y = run(x, w, spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn sum_of_one_to_nine() {
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |i| (i + 1) as f64);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let spec = ConvSpec {
            padding: 0,
            ..ConvSpec::same(1, 1, 3, 1, 1)
        };
        assert_eq!(run(x, w, spec).unwrap().data(), &[45.0]);
    }

    #[test]
    fn output_extent_too_small_is_error() {
        let spec = ConvSpec {
            padding: 0,
            ..ConvSpec::same(1, 1, 3, 1, 3)
        };
        assert_eq!(spec.effective_kernel(), 7);
        assert!(spec.output_extent(6).is_err());
        assert_eq!(spec.output_extent(7).unwrap(), 1);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(run(x, w, ConvSpec::same(1, 1, 3, 1, 1)).is_err());
    }

    #[test]
    fn stride_two_same_padding_halves() {
        let spec = ConvSpec::same(1, 1, 3, 2, 1);
        assert_eq!(spec.output_extent(64).unwrap(), 32);
        assert_eq!(spec.output_extent(7).unwrap(), 4);
        let proj = ConvSpec::same(1, 1, 1, 2, 1);
        assert_eq!(proj.output_extent(64).unwrap(), 32);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvSpec::same(1, 1, 2, 1, 1).validate().is_err());
    }
}
