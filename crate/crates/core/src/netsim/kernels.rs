//! Dense reference kernels on `f64` buffers.
//!
//! The tensor-level wrappers in the parent module widen `f32` storage to
//! `f64`, run these, and narrow the result once.

use crate::error::{Error, Result};
use crate::par::Exec;

/// `y[r, o] = sum_i w[o, i] * a[r, i]`
pub fn linear(exec: Exec, w: &[f64], out_features: usize, in_features: usize, a: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_features * in_features);
    debug_assert_eq!(a.len() % in_features, 0);
    let rows = a.len() / in_features;
    let mut y = vec![0.0; rows * out_features];
    exec.for_chunks(&mut y, out_features, |off, yr| {
        let ar = &a[(off / out_features) * in_features..][..in_features];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * in_features..][..in_features];
            *yo = wr.iter().zip(ar).map(|(x, y)| x * y).sum();
        }
    });
    y
}

/// `dw[o, i] = sum_r g[r, o] * a[r, i]`
pub fn linear_weight_grad(g: &[f64], out_features: usize, in_features: usize, a: &[f64]) -> Vec<f64> {
    let rows = a.len() / in_features;
    let mut dw = vec![0.0; out_features * in_features];
    for r in 0..rows {
        let ar = &a[r * in_features..][..in_features];
        for o in 0..out_features {
            let go = g[r * out_features + o];
            if go == 0.0 {
                continue;
            }
            for (d, x) in dw[o * in_features..][..in_features].iter_mut().zip(ar) {
                *d += go * x;
            }
        }
    }
    dw
}

/// Shapes of a zero-padded strided 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Weight `(co, ci, kh, kw)`, input `(b, ci, h, w)`.
    pub fn new(weight: &[usize], input: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [c_out, wc_in, kh, kw] = weight else {
            return Err(Error::Shape(format!("conv weight must be rank 4, got {weight:?}")));
        };
        let [batch, c_in, h, w] = input else {
            return Err(Error::Shape(format!("conv input must be rank 4, got {input:?}")));
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be at least 1".into()));
        }
        if h + 2 * padding < *kh || w + 2 * padding < *kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            batch: *batch,
            c_in: *c_in,
            h: *h,
            w: *w,
            c_out: *c_out,
            kh: *kh,
            kw: *kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.oh, self.ow]
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    /// Input index feeding output `(oy, ox)` through kernel tap `(ky, kx)`, if
    /// it lands inside the unpadded input.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

pub fn conv2d(exec: Exec, wt: &[f64], a: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut y = vec![0.0; g.batch * g.c_out * plane];
    exec.for_chunks(&mut y, plane, |off, out| {
        let n = off / plane / g.c_out;
        let co = off / plane % g.c_out;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    let abase = (n * g.c_in + ci) * g.h * g.w;
                    let wbase = (co * g.c_in + ci) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                acc += wt[wbase + ky * g.kw + kx] * a[abase + iy * g.w + ix];
                            }
                        }
                    }
                }
                out[oy * g.ow + ox] = acc;
            }
        }
    });
    y
}

/// Gradient of `sum(gy * conv2d(w, a))` with respect to `w`.
pub fn conv2d_weight_grad(exec: Exec, gy: &[f64], a: &[f64], g: &ConvGeom) -> Vec<f64> {
    let taps = g.kh * g.kw;
    let mut dw = vec![0.0; g.weight_len()];
    // one work item per (co, ci) kernel slice
    exec.for_chunks(&mut dw, taps, |off, dk| {
        let co = off / taps / g.c_in;
        let ci = off / taps % g.c_in;
        for n in 0..g.batch {
            let abase = (n * g.c_in + ci) * g.h * g.w;
            let gbase = (n * g.c_out + co) * g.oh * g.ow;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let go = gy[gbase + oy * g.ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                dk[ky * g.kw + kx] += go * a[abase + iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    });
    dw
}
