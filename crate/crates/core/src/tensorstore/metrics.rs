use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{} {:?} vs {} {:?}",
            a.name(),
            a.shape(),
            b.name(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference, accumulated in `f64` in index order.
pub fn mse_slices(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(mse_slices(a.data(), b.data()))
}

/// `10 log10(sum ref^2 / sum (ref - test)^2)`, `+inf` when identical.
pub fn sqnr_db(reference: &Tensor, test: &Tensor) -> Result<f64> {
    same_shape(reference, test)?;
    let (mut signal, mut noise) = (0.0f64, 0.0f64);
    for (&r, &t) in reference.data().iter().zip(test.data()) {
        signal += r as f64 * r as f64;
        let d = r as f64 - t as f64;
        noise += d * d;
    }
    if signal == 0.0 {
        return Err(Error::Config(format!("{}: all-zero reference", reference.name())));
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Fraction of elements that are exactly zero (either sign).
pub fn sparsity(t: &Tensor) -> f64 {
    t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.numel() as f64
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(if aa == bb { 1.0 } else { 0.0 });
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}
