//! Gradient-based rounding learning for low-bitwidth weights.
//!
//! Each weight element is pinned between the two grid points that bracket its
//! clipped full-precision value, `s * floor(w / s)` and one step above. A free
//! parameter `alpha` picks a point in between through `sigmoid(alpha)`:
//!
//! ```text
//! w_soft = clamp(s * (floor + sigmoid(alpha)), -c, c)
//! ```
//!
//! The objective is the layer-output MSE between soft-quantized and
//! full-precision weights over calibration activations, plus
//! `reg_weight * sum(1 - |2 sigmoid(alpha) - 1|^20)` which pushes every
//! `sigmoid(alpha)` toward 0 or 1. After training, `sigmoid(alpha) >= 0.5`
//! rounds up and anything lower rounds down.
//!
//! Scales and floors are frozen from the clipped weights before learning, so
//! every element only ever chooses between two fixed neighbouring codes.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fpcodec::{quantize_fp_slice, FpFormat};
use crate::netsim::kernels::{self, ConvGeom};
use crate::netsim::{widen, Layer, PipelineDesc};
use crate::par::Exec;
use crate::tensorstore::{CalibSet, QuantManifest, QuantRecord, Tensor, TensorKind};

const FRAC_CLAMP: f64 = 1e-4;
const REG_EXPONENT: i32 = 20;

/// Unconditional-generation batch size; text-to-image runs used 8.
pub const DEFAULT_BATCH_UNCONDITIONAL: usize = 16;
pub const DEFAULT_BATCH_TEXT_TO_IMAGE: usize = 8;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub reg_weight: f64,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            step_size: 1e-3,
            batch_size: DEFAULT_BATCH_UNCONDITIONAL,
            reg_weight: 1.0,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!("regularizer weight must be non-negative, got {}", self.reg_weight)));
        }
        Ok(())
    }
}

/// The layer the weight belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    /// Weight `(out, in)` applied over the last axis of the input.
    Linear,
    Conv2d { stride: usize, padding: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundingState {
    shape: Vec<usize>,
    pub alpha: Vec<f64>,
    fmt: FpFormat,
    scale: Vec<f64>,
    floor: Vec<f64>,
    clipped: Vec<bool>,
}

/// Per-element grid scale and floor of the clipped weight, plus whether the
/// element was clipped.
fn frozen_grid(w: &[f32], fmt: &FpFormat) -> (Vec<f64>, Vec<f64>, Vec<bool>, Vec<f64>) {
    let c = fmt.max_representable();
    let n = w.len();
    let (mut scale, mut floor, mut clipped, mut frac) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for &v in w {
        let v = v as f64;
        let wc = v.clamp(-c, c);
        let s = fmt.element_scale(wc);
        let r = wc / s;
        let f = r.floor();
        scale.push(s);
        floor.push(f);
        clipped.push(v.abs() > c);
        frac.push(r - f);
    }
    (scale, floor, clipped, frac)
}

impl RoundingState {
    /// Freezes scales and floors from the clipped weight and sets
    /// `alpha = logit(frac)`, with `frac` clamped to `[1e-4, 1 - 1e-4]`, so the
    /// soft weight starts at the full-precision value.
    pub fn init(w: &Tensor, fmt: &FpFormat) -> Self {
        let (scale, floor, clipped, frac) = frozen_grid(w.data(), fmt);
        let alpha = frac
            .into_iter()
            .map(|f| {
                let f = f.clamp(FRAC_CLAMP, 1.0 - FRAC_CLAMP);
                (f / (1.0 - f)).ln()
            })
            .collect();
        Self {
            shape: w.shape().to_vec(),
            alpha,
            fmt: *fmt,
            scale,
            floor,
            clipped,
        }
    }

    pub fn format(&self) -> &FpFormat {
        &self.fmt
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn floor(&self) -> &[f64] {
        &self.floor
    }

    pub fn clip_mask(&self) -> Vec<f32> {
        self.clipped.iter().map(|&c| c as u8 as f32).collect()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| sigmoid(a)).collect()
    }

    fn unclamped(&self, i: usize, sig: f64) -> f64 {
        self.scale[i] * (self.floor[i] + sig)
    }

    pub fn soft_quantize(&self) -> Vec<f64> {
        let c = self.fmt.max_representable();
        (0..self.alpha.len())
            .map(|i| {
                if self.clipped[i] {
                    c.copysign(self.floor[i])
                } else {
                    self.unclamped(i, sigmoid(self.alpha[i])).clamp(-c, c)
                }
            })
            .collect()
    }

    /// Regularizer over the elements that were not clipped.
    pub fn reg_term(&self, reg_weight: f64) -> f64 {
        let active: Vec<f64> = self
            .alpha
            .iter()
            .zip(&self.clipped)
            .filter(|(_, &c)| !c)
            .map(|(&a, _)| a)
            .collect();
        reg_term(&active, reg_weight)
    }

    /// Fraction of unclipped elements with `|sigmoid(alpha) - 0.5| > margin`.
    pub fn polarized_fraction(&self, margin: f64) -> f64 {
        let mut total = 0usize;
        let mut hit = 0usize;
        for (&a, &c) in self.alpha.iter().zip(&self.clipped) {
            if c {
                continue;
            }
            total += 1;
            if (sigmoid(a) - 0.5).abs() > margin {
                hit += 1;
            }
        }
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Hard rounding: `mask = 1` where `sigmoid(alpha) >= 0.5`, and the
    /// quantized weight `clamp(s * (floor + mask), -c, c)`.
    pub fn finalize(&self) -> (Vec<f32>, Vec<f32>) {
        let mask: Vec<f32> = self
            .alpha
            .iter()
            .map(|&a| if sigmoid(a) >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        (self.hard_values(&mask), mask)
    }

    fn hard_values(&self, mask: &[f32]) -> Vec<f32> {
        let c = self.fmt.max_representable();
        (0..mask.len())
            .map(|i| {
                if self.clipped[i] {
                    c.copysign(self.floor[i]) as f32
                } else {
                    self.unclamped(i, mask[i] as f64).clamp(-c, c) as f32
                }
            })
            .collect()
    }

    /// [`finalize`](Self::finalize) as named tensors: `<name>` and `<name>.mask`.
    pub fn finalize_tensors(&self, name: &str) -> Result<(Tensor, Tensor)> {
        let (w, m) = self.finalize();
        Ok((
            Tensor::new(name, self.shape.clone(), w)?,
            Tensor::new(format!("{name}.mask"), self.shape.clone(), m)?,
        ))
    }
}

/// `reg_weight * sum_i (1 - |2 sigmoid(alpha_i) - 1|^20)`
pub fn reg_term(alpha: &[f64], reg_weight: f64) -> f64 {
    reg_weight
        * alpha
            .iter()
            .map(|&a| 1.0 - (2.0 * (sigmoid(a) - 0.5).abs()).powi(REG_EXPONENT))
            .sum::<f64>()
}

/// Re-applies a stored rounding mask: the grid neighbours of each clipped
/// weight are recomputed and `mask` picks floor (0) or floor + 1 (1).
pub fn apply_mask(w: &[f32], fmt: &FpFormat, mask: &[f32]) -> Result<Vec<f32>> {
    if w.len() != mask.len() {
        return Err(Error::Shape(format!("mask has {} elements, weight {}", mask.len(), w.len())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Config("rounding mask must hold only 0 and 1".into()));
    }
    let (scale, floor, clipped, _) = frozen_grid(w, fmt);
    let state = RoundingState {
        shape: vec![w.len()],
        alpha: vec![0.0; w.len()],
        fmt: *fmt,
        scale,
        floor,
        clipped,
    };
    Ok(state.hard_values(mask))
}

/// A batch of layer inputs stacked along the first axis.
struct Batch {
    data: Vec<f64>,
    shape: Vec<usize>,
}

fn stack(samples: &[&Tensor]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Empty("activation batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "batch samples disagree: {:?} vs {:?}",
                first.shape(),
                s.shape()
            )));
        }
        data.extend(s.data().iter().map(|&v| v as f64));
    }
    let mut shape = first.shape().to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    shape[0] *= samples.len();
    Ok(Batch { data, shape })
}

/// Forward and weight-gradient closures for one layer and batch.
enum Plan {
    Linear { out_f: usize, in_f: usize },
    Conv(ConvGeom),
}

impl Plan {
    fn new(op: LayerOp, weight_shape: &[usize], batch: &Batch) -> Result<Self> {
        match op {
            LayerOp::Linear => {
                let [out_f, in_f] = weight_shape else {
                    return Err(Error::Shape(format!("linear weight must be rank 2, got {weight_shape:?}")));
                };
                if batch.shape.last() != Some(in_f) {
                    return Err(Error::Shape(format!(
                        "linear weight {weight_shape:?} cannot take input {:?}",
                        batch.shape
                    )));
                }
                Ok(Plan::Linear { out_f: *out_f, in_f: *in_f })
            }
            LayerOp::Conv2d { stride, padding } => Ok(Plan::Conv(ConvGeom::new(weight_shape, &batch.shape, stride, padding)?)),
        }
    }

    fn forward(&self, w: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            Plan::Linear { out_f, in_f } => kernels::linear(Exec::default(), w, *out_f, *in_f, a),
            Plan::Conv(g) => kernels::conv2d(Exec::default(), w, a, g),
        }
    }

    fn weight_grad(&self, gy: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            Plan::Linear { out_f, in_f } => kernels::linear_weight_grad(gy, *out_f, *in_f, a),
            Plan::Conv(g) => kernels::conv2d_weight_grad(Exec::default(), gy, a, g),
        }
    }
}

/// Objective and its exact gradient with respect to `alpha`.
///
/// The data term is the mean squared difference between the layer outputs
/// of the soft-quantized and full-precision weights over the whole batch.
/// Additive layer biases cancel in that difference and are not needed.
pub fn loss_and_grad(
    state: &RoundingState,
    w: &Tensor,
    batch: &[&Tensor],
    op: LayerOp,
    reg_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if w.shape() != state.shape() {
        return Err(Error::Shape(format!(
            "weight {:?} does not match rounding state {:?}",
            w.shape(),
            state.shape()
        )));
    }
    let batch = stack(batch)?;
    let plan = Plan::new(op, w.shape(), &batch)?;
    let y_ref = plan.forward(&widen(w.data()), &batch.data);
    data_loss_and_grad(state, &plan, &batch, &y_ref, reg_weight)
}

fn data_loss_and_grad(
    state: &RoundingState,
    plan: &Plan,
    batch: &Batch,
    y_ref: &[f64],
    reg_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let c = state.fmt.max_representable();
    let sig = state.sigma();
    let soft = state.soft_quantize();
    let y = plan.forward(&soft, &batch.data);
    let n = y.len() as f64;
    let mut data_loss = 0.0;
    let gy: Vec<f64> = y
        .iter()
        .zip(y_ref)
        .map(|(a, b)| {
            let d = a - b;
            data_loss += d * d;
            2.0 * d / n
        })
        .collect();
    data_loss /= n;
    let gw = plan.weight_grad(&gy, &batch.data);

    let mut reg = 0.0;
    let grad = (0..sig.len())
        .map(|i| {
            if state.clipped[i] {
                return 0.0;
            }
            let s = sig[i];
            let ds = s * (1.0 - s);
            let u = 2.0 * (s - 0.5);
            reg += 1.0 - u.abs().powi(REG_EXPONENT);
            let inside = state.unclamped(i, s).abs() <= c;
            let data = if inside { gw[i] * state.scale[i] * ds } else { 0.0 };
            let reg_grad = -reg_weight * REG_EXPONENT as f64 * u.abs().powi(REG_EXPONENT - 1) * 2.0 * u.signum() * ds;
            data + reg_grad
        })
        .collect();
    Ok((data_loss + reg_weight * reg, grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: RoundingState,
    /// Objective on each iteration's batch, evaluated before the update.
    pub trace: Vec<f64>,
    /// Running minimum of `trace`.
    pub best: Vec<f64>,
}

impl TrainOutcome {
    pub fn best_objective(&self) -> f64 {
        *self.best.last().expect("at least one iteration")
    }
}

/// Plain SGD on `alpha` for `cfg.iterations` steps, each over `cfg.batch_size`
/// samples drawn without replacement by a generator seeded with `cfg.seed`.
pub fn train_on_samples(
    mut state: RoundingState,
    w: &Tensor,
    samples: &[&Tensor],
    op: LayerOp,
    cfg: &LearnConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    if w.shape() != state.shape() {
        return Err(Error::Shape(format!(
            "weight {:?} does not match rounding state {:?}",
            w.shape(),
            state.shape()
        )));
    }
    let wf = widen(w.data());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let take = cfg.batch_size.min(samples.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut idx = rand::seq::index::sample(&mut rng, samples.len(), take).into_vec();
        idx.sort_unstable();
        let picked: Vec<&Tensor> = idx.iter().map(|&i| samples[i]).collect();
        let batch = stack(&picked)?;
        let plan = Plan::new(op, w.shape(), &batch)?;
        let y_ref = plan.forward(&wf, &batch.data);
        let (loss, grad) = data_loss_and_grad(&state, &plan, &batch, &y_ref, cfg.reg_weight)?;
        for (a, g) in state.alpha.iter_mut().zip(&grad) {
            *a -= cfg.step_size * g;
        }
        let prev = best.last().copied().unwrap_or(f64::INFINITY);
        trace.push(loss);
        best.push(prev.min(loss));
    }
    Ok(TrainOutcome { state, trace, best })
}

/// [`train_on_samples`] over every calibration sample captured for `point`.
pub fn train(
    state: RoundingState,
    w: &Tensor,
    calib: &CalibSet,
    point: &str,
    op: LayerOp,
    cfg: &LearnConfig,
) -> Result<TrainOutcome> {
    let samples = calib.entries_for(point);
    if samples.is_empty() {
        return Err(Error::Empty(format!("calibration set has no samples for {point}")));
    }
    train_on_samples(state, w, &samples, op, cfg)
}

/// Outcome of learning one layer's rounding inside a pipeline.
#[derive(Debug, Clone)]
pub struct LayerRounding {
    pub layer: String,
    pub weight: String,
    pub mask: Tensor,
    pub best_objective: f64,
    /// Share of non-clipped elements with `|sigmoid(alpha) - 0.5| > 0.49`.
    pub polarized: f64,
    /// Elements whose learned rounding differs from round-to-nearest.
    pub flipped: usize,
}

/// Learns rounding masks for the FP4 weights of every conv/linear layer in
/// `desc`, training each on the full-precision inputs captured for that
/// layer (`<layer>.in`). With `only`, exactly the named records are learned
/// and each must be an FP4 weight record. Returns the manifest with
/// `rounding_mask_ref` set and the masks, named `<weight>.mask`.
pub fn learn_pipeline_rounding(
    desc: &PipelineDesc,
    tensors: &HashMap<String, Tensor>,
    manifest: &QuantManifest,
    calib: &CalibSet,
    cfg: &LearnConfig,
    only: Option<&[String]>,
) -> Result<(QuantManifest, Vec<LayerRounding>)> {
    cfg.validate()?;
    desc.validate(tensors)?;
    let fp4 = |r: &QuantRecord| -> Result<Option<FpFormat>> {
        Ok(r.fp_format()?.filter(|f| f.bitwidth() == 4))
    };
    if let Some(names) = only {
        for n in names {
            let r = manifest
                .get(n)
                .ok_or_else(|| Error::Missing(format!("manifest record {n}")))?;
            if r.kind == TensorKind::Activation {
                return Err(Error::Config(format!("{n}: rounding is learned for weights only")));
            }
            if fp4(r)?.is_none() {
                return Err(Error::Config(format!(
                    "{n}: rounding is learned for FP4 records only, got {}",
                    r.format_label()
                )));
            }
            if !desc.layers.iter().any(|l| l.weight() == Some(n.as_str())) {
                return Err(Error::Missing(format!("no conv/linear layer uses weight {n}")));
            }
        }
    }
    let mut out = manifest.clone();
    let mut learned = Vec::new();
    for (i, layer) in desc.layers.iter().enumerate() {
        let (w_name, op) = match layer {
            Layer::Linear { w, .. } => (w, LayerOp::Linear),
            Layer::Conv2d { w, stride, padding, .. } => (w, LayerOp::Conv2d { stride: *stride, padding: *padding }),
            _ => continue,
        };
        if only.is_some_and(|names| !names.contains(w_name)) {
            continue;
        }
        let Some(record) = manifest.get(w_name) else { continue };
        let Some(fmt) = fp4(record)? else {
            log::info!("{w_name}: {} keeps round-to-nearest", record.format_label());
            continue;
        };
        let lname = desc.layer_name(i);
        let w = &tensors[w_name];
        let point = PipelineDesc::input_point(&lname);
        let layer_cfg = LearnConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let outcome = train(RoundingState::init(w, &fmt), w, calib, &point, op, &layer_cfg)?;
        let (hard, mask) = outcome.state.finalize_tensors(w_name)?;
        let rtn = quantize_fp_slice(w.data(), &fmt)?;
        let flipped = hard.data().iter().zip(&rtn).filter(|(a, b)| a != b).count();
        let mask_name = mask.name().to_string();
        if let Some(r) = out.get_mut(w_name) {
            r.rounding_mask_ref = Some(mask_name);
        }
        log::info!("{w_name}: best objective {:.6e}, {flipped} flips", outcome.best_objective());
        learned.push(LayerRounding {
            layer: lname,
            weight: w_name.clone(),
            mask,
            best_objective: outcome.best_objective(),
            polarized: outcome.state.polarized_fraction(0.49),
            flipped,
        });
    }
    Ok((out, learned))
}
