//! Reference forward implementations and the quantized pipeline runner.
//!
//! Storage is `f32`; every kernel accumulates in `f64` and narrows once.

pub mod kernels;
mod pipeline;

pub use pipeline::{
    capture_calib, quantize_activation, quantize_weight, run_pipeline, run_pipeline_with, Layer, LayerReport, PipelineDesc,
    Probe, RunReport, StepReport, TensorSlot, CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensorstore::Tensor;
use kernels::ConvGeom;

pub(crate) fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn narrow(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn add_bias(y: &mut [f64], bias: Option<&Tensor>, channels: usize, inner: usize) -> Result<()> {
    let Some(b) = bias else { return Ok(()) };
    if b.numel() != channels {
        return Err(Error::Shape(format!(
            "bias {} has {} elements, layer has {channels} output channels",
            b.name(),
            b.numel()
        )));
    }
    for (i, v) in y.iter_mut().enumerate() {
        *v += b.data()[(i / inner) % channels] as f64;
    }
    Ok(())
}

/// Affine map over the last axis: weight `(out, in)`, input `(..., in)`,
/// output `(..., out)`.
pub fn linear_forward(w: &Tensor, bias: Option<&Tensor>, a: &Tensor) -> Result<Tensor> {
    let [out_f, in_f] = w.shape() else {
        return Err(Error::Shape(format!("linear weight {} must be rank 2, got {:?}", w.name(), w.shape())));
    };
    let (out_f, in_f) = (*out_f, *in_f);
    if a.shape().last() != Some(&in_f) {
        return Err(Error::Shape(format!(
            "linear {} expects last axis {in_f}, input has shape {:?}",
            w.name(),
            a.shape()
        )));
    }
    let mut y = kernels::linear(Exec::default(), &widen(w.data()), out_f, in_f, &widen(a.data()));
    add_bias(&mut y, bias, out_f, 1)?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new("linear", shape, narrow(y))
}

/// Zero-padded strided cross-correlation: weight `(co, ci, kh, kw)`, input
/// `(b, ci, h, w)`.
pub fn conv2d_forward(w: &Tensor, bias: Option<&Tensor>, a: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(w.shape(), a.shape(), stride, padding)?;
    let mut y = kernels::conv2d(Exec::default(), &widen(w.data()), &widen(a.data()), &g);
    add_bias(&mut y, bias, g.c_out, g.oh * g.ow)?;
    Tensor::new("conv2d", g.output_shape(), narrow(y))
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            (v / (1.0 + (-v).exp())) as f32
        })
        .collect();
    x.with_data(data).expect("silu preserves shape")
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Normalizes each (sample, channel group) of a `(b, c, ...)` tensor to zero
/// mean and unit variance, then applies per-channel `gamma`/`beta`.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::Shape(format!("group norm input must be at least rank 2, got {:?}", x.shape())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{groups} groups do not divide {c} channels")));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "group norm affine parameters need {c} elements, got {} and {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let per_group = c / groups * inner;
    let mut out = vec![0f32; x.numel()];
    for n in 0..b {
        for gi in 0..groups {
            let start = (n * c + gi * (c / groups)) * inner;
            let xs = &x.data()[start..start + per_group];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per_group as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in xs.iter().enumerate() {
                let ch = gi * (c / groups) + j / inner;
                let y = (v as f64 - mean) * inv * gamma.data()[ch] as f64 + beta.data()[ch] as f64;
                out[start + j] = y as f32;
            }
        }
    }
    x.with_data(out)
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if a.rank() != b.rank() || axis >= a.rank() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?} along axis {axis}",
            a.shape(),
            b.shape()
        )));
    }
    for d in 0..a.rank() {
        if d != axis && a.shape()[d] != b.shape()[d] {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along axis {axis}",
                a.shape(),
                b.shape()
            )));
        }
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let (ka, kb) = (a.shape()[axis] * inner, b.shape()[axis] * inner);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * ka..(o + 1) * ka]);
        data.extend_from_slice(&b.data()[o * kb..(o + 1) * kb]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] += b.shape()[axis];
    Tensor::new("concat", shape, data)
}
