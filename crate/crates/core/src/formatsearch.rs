//! Per-tensor encoding and bias selection by exhaustive MSE grid search, and
//! greedy layer-by-layer assignment across a network.
//!
//! For every candidate encoding the bias grid comes from clipping maxima
//! evenly spaced in `(0, max|x|]`: `c_k = k * max|x| / n` for `k = 1..=n`,
//! each turned into a bias through [`bias_from_cmax`]. All
//! `encodings x biases` pairs are scored by the MSE between the quantized and
//! original values and the first minimum in enumeration order wins.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fpcodec::{bias_from_cmax, FpFormat};
use crate::netsim::{PipelineDesc, Probe, TensorSlot};
use crate::par::Exec;
use crate::tensorstore::{CalibSet, QuantManifest, QuantRecord, Tensor, TensorKind};

pub const DEFAULT_BIAS_CANDIDATES: usize = 111;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub encodings: Vec<(u32, u32)>,
    pub n_bias: usize,
}

impl SearchSpace {
    /// E2M5, E3M4, E4M3, E5M2.
    pub fn fp8() -> Self {
        Self {
            encodings: vec![(2, 5), (3, 4), (4, 3), (5, 2)],
            n_bias: DEFAULT_BIAS_CANDIDATES,
        }
    }

    /// E1M2, E2M1.
    pub fn fp4() -> Self {
        Self {
            encodings: vec![(1, 2), (2, 1)],
            n_bias: DEFAULT_BIAS_CANDIDATES,
        }
    }

    /// The space for a total bitwidth of 4 or 8.
    pub fn for_bitwidth(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(Self::fp4()),
            8 => Ok(Self::fp8()),
            _ => Err(Error::Config(format!("bitwidth must be 4 or 8, got {bits}"))),
        }
    }

    pub fn with_bias_candidates(mut self, n: usize) -> Self {
        self.n_bias = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bias == 0 {
            return Err(Error::Config("need at least one bias candidate".into()));
        }
        if self.encodings.is_empty() {
            return Err(Error::Config("need at least one encoding".into()));
        }
        for &(e, m) in &self.encodings {
            FpFormat::new(e as i32, m as i32, None)?;
        }
        Ok(())
    }

    /// Candidate count for non-degenerate data.
    pub fn combinations(&self) -> usize {
        self.encodings.len() * self.n_bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasCandidates {
    pub biases: Vec<f64>,
    /// Set when the data was all zeros and only the default bias is offered.
    pub degenerate: bool,
}

pub fn max_abs(data: &[f32]) -> f64 {
    data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

/// Biases for clipping maxima `k * max|x| / n`, `k = 1..=n` (strictly
/// decreasing). All-zero data gets the single default bias.
pub fn bias_candidates(data: &[f32], encoding: (u32, u32), n: usize) -> Result<BiasCandidates> {
    if n == 0 {
        return Err(Error::Config("need at least one bias candidate".into()));
    }
    let (e, m) = encoding;
    let a = max_abs(data);
    if a == 0.0 {
        log::warn!("all-zero tensor: using the default bias for E{e}M{m}");
        return Ok(BiasCandidates {
            biases: vec![FpFormat::default_bias(e)],
            degenerate: true,
        });
    }
    let biases = (1..=n)
        .map(|k| bias_from_cmax(e, m, k as f64 * a / n as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(BiasCandidates {
        biases,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub format: FpFormat,
    pub mse: f64,
    /// Position of the winner in enumeration order (encoding-major).
    pub candidate_index: usize,
    pub evaluated: usize,
}

/// MSE between `data` and its quantization, with the quantized values
/// narrowed to `f32` as a quantized tensor would store them. Matches
/// `mse(quantize_fp(t), t)` bit for bit.
pub fn quantization_mse(data: &[f32], fmt: &FpFormat) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let sum: f64 = data
        .iter()
        .map(|&x| {
            let d = fmt.quantize(x as f64) as f32 as f64 - x as f64;
            d * d
        })
        .sum();
    sum / data.len() as f64
}

/// Every candidate format in enumeration order.
pub fn candidates(data: &[f32], space: &SearchSpace) -> Result<Vec<FpFormat>> {
    let mut out = Vec::with_capacity(space.combinations());
    for &(e, m) in &space.encodings {
        for b in bias_candidates(data, (e, m), space.n_bias)?.biases {
            out.push(FpFormat::new(e as i32, m as i32, Some(b))?);
        }
    }
    Ok(out)
}

pub fn search_tensor_with(exec: Exec, data: &[f32], space: &SearchSpace) -> Result<SearchResult> {
    if data.is_empty() {
        return Err(Error::Empty("cannot search a format for an empty tensor".into()));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: data[index] as f64,
        });
    }
    space.validate()?;
    let cands = candidates(data, space)?;
    let scores = exec.map(cands.len(), |i| quantization_mse(data, &cands[i]));
    let mut best = (f64::INFINITY, 0usize);
    for (i, &s) in scores.iter().enumerate() {
        if s < best.0 {
            best = (s, i);
        }
    }
    log::debug!("evaluated {} candidates", cands.len());
    Ok(SearchResult {
        format: cands[best.1],
        mse: best.0,
        candidate_index: best.1,
        evaluated: cands.len(),
    })
}

/// Grid search over `space`; candidate scores may be computed in parallel
/// but the reduction runs in enumeration order, so ties keep the earliest.
pub fn search_tensor(data: &[f32], space: &SearchSpace) -> Result<SearchResult> {
    search_tensor_with(Exec::default(), data, space)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssignMode {
    /// Minifloat search with separate spaces for weights and activations.
    Fp { weights: SearchSpace, activations: SearchSpace },
    /// Uniform integer baseline at fixed bitwidths.
    Int { weight_bits: u32, activation_bits: u32 },
}

/// What the greedy pass decided for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub name: String,
    pub result: Option<SearchResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assigned {
    pub manifest: QuantManifest,
    pub assignments: Vec<Assignment>,
}

fn decide(slot: &TensorSlot, data: &[f32], mode: &AssignMode) -> Result<(QuantRecord, Option<SearchResult>)> {
    if !slot.quantize {
        return Ok((QuantRecord::passthrough(&slot.name, slot.kind), None));
    }
    match mode {
        AssignMode::Fp { weights, activations } => {
            let space = match slot.kind {
                TensorKind::Weight => weights,
                TensorKind::Activation => activations,
            };
            let r = search_tensor(data, space)?;
            log::info!(
                "{}: {} mse {:.6e} ({} candidates)",
                slot.name,
                r.format,
                r.mse,
                r.evaluated
            );
            Ok((QuantRecord::fp(&slot.name, slot.kind, &r.format), Some(r)))
        }
        AssignMode::Int { weight_bits, activation_bits } => {
            let bits = match slot.kind {
                TensorKind::Weight => *weight_bits,
                TensorKind::Activation => *activation_bits,
            };
            Ok((QuantRecord::int(&slot.name, slot.kind, bits), None))
        }
    }
}

/// Walks `order` layer by layer, fixing each tensor's format before moving on.
/// Weights are searched against their own values; activations against the
/// pooled initialization samples captured in full precision. Tensors marked
/// as not quantized are recorded as passthrough.
pub fn assign_model(
    weights: &HashMap<String, Tensor>,
    init_acts: &CalibSet,
    order: &[TensorSlot],
    mode: &AssignMode,
) -> Result<Assigned> {
    let mut manifest = QuantManifest::new();
    let mut assignments = Vec::with_capacity(order.len());
    for slot in order {
        let data: Vec<f32> = match slot.kind {
            TensorKind::Weight => weights
                .get(&slot.name)
                .ok_or_else(|| Error::Missing(format!("weight {}", slot.name)))?
                .data()
                .to_vec(),
            TensorKind::Activation if slot.quantize => init_acts.pooled(&slot.name)?,
            TensorKind::Activation => Vec::new(),
        };
        let (record, result) = decide(slot, &data, mode)?;
        manifest.upsert(record);
        assignments.push(Assignment {
            name: slot.name.clone(),
            result,
        });
    }
    Ok(Assigned { manifest, assignments })
}

struct Capture<'a> {
    point: &'a str,
    out: Vec<f32>,
}

impl Probe for Capture<'_> {
    fn activation(&mut self, point: &str, value: &Tensor) {
        if point == self.point {
            self.out.extend_from_slice(value.data());
        }
    }
}

/// Greedy assignment where each activation is re-captured by running the
/// network inputs through the pipeline quantized with every decision made so
/// far, so upstream quantization error feeds into downstream choices.
pub fn assign_model_propagated(
    desc: &PipelineDesc,
    tensors: &HashMap<String, Tensor>,
    inputs: &[&Tensor],
    mode: &AssignMode,
) -> Result<Assigned> {
    if inputs.is_empty() {
        return Err(Error::Empty("propagated search needs network input samples".into()));
    }
    desc.validate(tensors)?;
    let mut manifest = QuantManifest::new();
    let mut assignments = Vec::new();
    for slot in desc.tensor_order() {
        let data = match slot.kind {
            TensorKind::Weight => tensors[&slot.name].data().to_vec(),
            TensorKind::Activation if slot.quantize => {
                let mut cap = Capture {
                    point: &slot.name,
                    out: Vec::new(),
                };
                for x in inputs {
                    desc.forward(tensors, Some(&manifest), x, &mut cap)?;
                }
                cap.out
            }
            TensorKind::Activation => Vec::new(),
        };
        let (record, result) = decide(&slot, &data, mode)?;
        manifest.upsert(record);
        assignments.push(Assignment { name: slot.name, result });
    }
    Ok(Assigned { manifest, assignments })
}
