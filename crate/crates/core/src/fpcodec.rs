//! Simulated low-bitwidth floating-point and uniform integer quantization.
//!
//! A minifloat with `e` exponent bits, `m` mantissa bits and a real-valued
//! exponent bias `b` has the magnitudes
//!
//! * subnormal: `2^(1-b) * k / 2^m` for `k in 0..2^m`
//! * normal: `2^(p-b) * (1 + k / 2^m)` for `p in 1..2^e`, `k in 0..2^m`
//!
//! with no codes reserved for infinity or NaN, so the largest magnitude is
//! `c = (2 - 2^-m) * 2^(2^e - b - 1)`.
//!
//! Internally every magnitude is handled in the "unbiased" domain `|x| * 2^b`,
//! where the grid is dyadic and every step of rounding is exact. The bias only
//! enters through one multiplication by `2^-b` at the end, shared by the
//! quantizer and [`FpFormat::enumerate_codes`], so both produce bit-identical
//! code values even for non-integer biases.

use std::fmt;

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensorstore::Tensor;

pub const MAX_EXPONENT_BITS: i32 = 8;
pub const MAX_MANTISSA_BITS: i32 = 23;

/// Elements per parallel work item when quantizing tensors.
const CHUNK: usize = 4096;

/// `2^k` for an integer exponent, built from the bit pattern where possible.
pub(crate) fn exp2i(k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        2f64.powi(k)
    }
}

/// `2^x` for real `x`, split as `2^frac * 2^floor` so that shifting `x` by an
/// integer scales the result exactly.
pub(crate) fn pow2(x: f64) -> f64 {
    // nearest-integer split keeps `x - i` exact
    let i = (x + 0.5).floor();
    let f = x - i;
    let frac = if f == 0.0 { 1.0 } else { f.exp2() };
    frac * exp2i(i as i32)
}

/// `floor(log2(t))` for positive finite `t`, exact at binade boundaries.
fn floor_log2(t: f64) -> i32 {
    let mut q = t.log2().floor() as i32;
    if exp2i(q) > t {
        q -= 1;
    } else if exp2i(q + 1) <= t {
        q += 1;
    }
    q
}

/// A minifloat encoding: exponent bits, mantissa bits and exponent bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpFormat {
    e_bits: u32,
    m_bits: u32,
    bias: f64,
    /// `2^-bias`
    scale: f64,
    /// `2^bias`
    inv_scale: f64,
    /// Largest magnitude in the unbiased domain, `(2 - 2^-m) * 2^(2^e - 1)`.
    top: f64,
}

impl FpFormat {
    /// Validates the fields. `bias = None` selects the conventional `2^(e-1)`.
    pub fn new(e_bits: i32, m_bits: i32, bias: Option<f64>) -> Result<Self> {
        if !(1..=MAX_EXPONENT_BITS).contains(&e_bits) {
            return Err(Error::InvalidFormat(format!(
                "exponent bits must be in 1..={MAX_EXPONENT_BITS}, got {e_bits}"
            )));
        }
        if !(0..=MAX_MANTISSA_BITS).contains(&m_bits) {
            return Err(Error::InvalidFormat(format!(
                "mantissa bits must be in 0..={MAX_MANTISSA_BITS}, got {m_bits}"
            )));
        }
        let bias = bias.unwrap_or_else(|| Self::default_bias(e_bits as u32));
        if !bias.is_finite() {
            return Err(Error::InvalidFormat(format!("bias must be finite, got {bias}")));
        }
        let (e, m) = (e_bits as u32, m_bits as u32);
        let top = (2.0 - exp2i(-(m as i32))) * exp2i((1i32 << e) - 1);
        Ok(Self {
            e_bits: e,
            m_bits: m,
            bias,
            scale: pow2(-bias),
            inv_scale: pow2(bias),
            top,
        })
    }

    /// Same encoding with a different bias.
    pub fn with_bias(&self, bias: f64) -> Result<Self> {
        Self::new(self.e_bits as i32, self.m_bits as i32, Some(bias))
    }

    pub fn default_bias(e_bits: u32) -> f64 {
        exp2i(e_bits as i32 - 1)
    }

    pub fn e_bits(&self) -> u32 {
        self.e_bits
    }

    pub fn m_bits(&self) -> u32 {
        self.m_bits
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Total width including the sign bit.
    pub fn bitwidth(&self) -> u32 {
        1 + self.e_bits + self.m_bits
    }

    /// `c = (2 - 2^-m) * 2^(2^e - b - 1)`.
    pub fn max_representable(&self) -> f64 {
        self.top * self.scale
    }

    /// Spacing of the grid around `x` (which is assumed already clipped):
    /// `2^(floor(log2|x| + b) - b - m)` above the subnormal range and
    /// `2^(1 - b - m)` otherwise. Zero takes the subnormal branch.
    pub fn element_scale(&self, x: f64) -> f64 {
        exp2i(self.unbiased_exponent(x.abs() * self.inv_scale) - self.m_bits as i32) * self.scale
    }

    /// Exponent of the binade containing `t` in the unbiased domain, with the
    /// subnormal range folded into exponent 1.
    fn unbiased_exponent(&self, t: f64) -> i32 {
        if t > 0.0 {
            let q = floor_log2(t);
            if q > 1 {
                q
            } else {
                1
            }
        } else {
            1
        }
    }

    /// Round-to-nearest (ties to even grid index) after clipping to `[-c, c]`.
    pub fn quantize(&self, x: f64) -> f64 {
        let t = x.abs() * self.inv_scale;
        let mag = if t >= self.top {
            self.top
        } else {
            let step = exp2i(self.unbiased_exponent(t) - self.m_bits as i32);
            ((t / step).round_ties_even() * step).min(self.top)
        };
        (mag * self.scale).copysign(x)
    }

    /// All representable values in ascending order, without duplicates.
    pub fn enumerate_codes(&self) -> Vec<f64> {
        let m = self.m_bits as i32;
        let mantissas = 1u64 << m;
        let mut mags = Vec::with_capacity((mantissas << self.e_bits) as usize);
        for p in 0..(1i32 << self.e_bits) {
            for k in 0..mantissas {
                // integer mantissa times the grid step of binade p
                let (n, step) = if p == 0 {
                    (k, exp2i(1 - m))
                } else {
                    (mantissas + k, exp2i(p - m))
                };
                mags.push(n as f64 * step * self.scale);
            }
        }
        mags.sort_by(f64::total_cmp);
        mags.dedup();
        let mut codes: Vec<f64> = mags.iter().rev().filter(|&&v| v > 0.0).map(|v| -v).collect();
        codes.extend(mags);
        codes
    }

    /// Short `ExMy` tag.
    pub fn encoding_name(&self) -> String {
        format!("E{}M{}", self.e_bits, self.m_bits)
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}M{}(b={})", self.e_bits, self.m_bits, self.bias)
    }
}

/// Bias that makes the format's largest magnitude equal `cmax`:
/// `b = (2^e - 1) - log2(cmax / (2 - 2^-m))`.
///
/// The closed form is refined to the bias whose
/// [`max_representable`](FpFormat::max_representable) lands closest to
/// `cmax`, so `cmax -> bias -> cmax` loses as little as the bias
/// representation allows.
pub fn bias_from_cmax(e_bits: u32, m_bits: u32, cmax: f64) -> Result<f64> {
    if !(cmax > 0.0 && cmax.is_finite()) {
        return Err(Error::InvalidFormat(format!(
            "clipping maximum must be positive and finite, got {cmax}"
        )));
    }
    let top = (2.0 - exp2i(-(m_bits as i32))) * exp2i((1i32 << e_bits) - 1);
    // split off the exact binary exponent so log2 only sees a ratio near 1
    let k = floor_log2(cmax);
    let ratio = (cmax / exp2i(k)) / top;
    let guess = -(k as f64) - ratio.log2();
    Ok(refine_bias(top, cmax, guess))
}

/// Bisects a few ulps around `guess` for the bias whose largest code is
/// nearest `cmax`. The largest code `top * 2^-b` falls as `b` grows.
fn refine_bias(top: f64, cmax: f64, guess: f64) -> f64 {
    let c = |b: f64| top * pow2(-b);
    let width = 64.0 * f64::EPSILON * guess.abs().max(1.0);
    let (mut lo, mut hi) = (guess - width, guess + width);
    if !(c(lo) >= cmax && c(hi) <= cmax) {
        return guess;
    }
    loop {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if c(mid) >= cmax {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // the closed form wins ties, the range of equivalent biases can be wide
    let err = |b: f64| (c(b) - cmax).abs();
    [lo, hi].into_iter().fold(guess, |best, b| if err(b) < err(best) { b } else { best })
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index] as f64,
        }),
        None => Ok(()),
    }
}

/// Quantizes a slice with the given execution policy.
pub fn quantize_fp_slice_with(exec: Exec, data: &[f32], fmt: &FpFormat) -> Result<Vec<f32>> {
    check_finite(data)?;
    let mut out = data.to_vec();
    exec.for_chunks(&mut out, CHUNK, |_, chunk| {
        for v in chunk {
            *v = fmt.quantize(*v as f64) as f32;
        }
    });
    Ok(out)
}

pub fn quantize_fp_slice(data: &[f32], fmt: &FpFormat) -> Result<Vec<f32>> {
    quantize_fp_slice_with(Exec::default(), data, fmt)
}

/// Element-wise minifloat quantization; keeps the tensor's name and shape.
pub fn quantize_fp(x: &Tensor, fmt: &FpFormat) -> Result<Tensor> {
    let data = quantize_fp_slice(x.data(), fmt)?;
    x.with_data(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntQuantConfig {
    bits: u32,
}

impl IntQuantConfig {
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidFormat(format!(
                "integer bitwidth must be in 2..=16, got {bits}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }
}

/// Affine integer grid fitted to a data range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntGrid {
    pub scale: f64,
    pub zero_point: f64,
    pub levels: f64,
}

impl IntGrid {
    /// `s = (max - min) / (2^b - 1)`, `z = -round(min / s)`. `None` for a
    /// zero-width range.
    pub fn fit(min: f64, max: f64, cfg: IntQuantConfig) -> Option<Self> {
        // also rejects NaN bounds
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(max > min) {
            return None;
        }
        let levels = exp2i(cfg.bits as i32) - 1.0;
        let scale = (max - min) / levels;
        let zero_point = -(min / scale).round_ties_even();
        Some(Self {
            scale,
            zero_point,
            levels,
        })
    }

    pub fn quantize(&self, x: f64) -> f64 {
        let q = ((x / self.scale).round_ties_even() + self.zero_point).clamp(0.0, self.levels);
        self.scale * (q - self.zero_point)
    }
}

#[derive(Debug, Clone)]
pub struct IntQuantized {
    pub tensor: Tensor,
    pub grid: Option<IntGrid>,
}

impl IntQuantized {
    /// The input had `max == min` and was returned unchanged.
    pub fn degenerate(&self) -> bool {
        self.grid.is_none()
    }
}

/// Slice form of [`quantize_int`]; `None` grid marks a degenerate range.
pub fn quantize_int_slice(data: &[f32], cfg: IntQuantConfig) -> Result<(Vec<f32>, Option<IntGrid>)> {
    check_finite(data)?;
    if data.is_empty() {
        return Ok((Vec::new(), None));
    }
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    match IntGrid::fit(lo, hi, cfg) {
        None => Ok((data.to_vec(), None)),
        Some(grid) => Ok((
            data.iter().map(|&v| grid.quantize(v as f64) as f32).collect(),
            Some(grid),
        )),
    }
}

/// Uniform integer quantization over the tensor's own min/max range.
pub fn quantize_int(x: &Tensor, cfg: IntQuantConfig) -> Result<IntQuantized> {
    let (data, grid) = quantize_int_slice(x.data(), cfg)?;
    if grid.is_none() {
        log::warn!("tensor {}: degenerate range, left unquantized", x.name());
    }
    Ok(IntQuantized {
        tensor: x.with_data(data)?,
        grid,
    })
}
