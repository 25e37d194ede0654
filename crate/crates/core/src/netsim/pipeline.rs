use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{concat, conv2d_forward, group_norm, linear_forward, silu, GROUP_NORM_EPS};
use crate::adaround::apply_mask;
use crate::error::{Error, Result};
use crate::fpcodec::{quantize_fp, quantize_int};
use crate::tensorstore::{mse, CalibSet, sparsity, sqnr_db, write_atomic, QuantManifest, QuantMode, QuantRecord, Tensor, TensorKind};

fn one() -> usize {
    1
}

/// One pipeline stage. Weight-carrying stages reference container tensors by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum Layer {
    #[serde(rename = "linear")]
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        w: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "conv2d")]
    Conv2d {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        w: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "silu")]
    Silu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    #[serde(rename = "groupnorm")]
    GroupNorm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        groups: usize,
        gamma: String,
        beta: String,
    },
    #[serde(rename = "skip_save")]
    SkipSave {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        slot: String,
    },
    #[serde(rename = "skip_concat")]
    SkipConcat {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        slot: String,
        #[serde(default = "one")]
        axis: usize,
    },
}

impl Layer {
    fn op(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Silu { .. } => "silu",
            Layer::GroupNorm { .. } => "groupnorm",
            Layer::SkipSave { .. } => "skip_save",
            Layer::SkipConcat { .. } => "skip_concat",
        }
    }

    fn explicit_name(&self) -> Option<&str> {
        match self {
            Layer::Linear { name, .. }
            | Layer::Conv2d { name, .. }
            | Layer::Silu { name }
            | Layer::GroupNorm { name, .. }
            | Layer::SkipSave { name, .. }
            | Layer::SkipConcat { name, .. } => name.as_deref(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Layer::Linear { .. } | Layer::Conv2d { .. })
    }

    pub fn weight(&self) -> Option<&str> {
        match self {
            Layer::Linear { w, .. } | Layer::Conv2d { w, .. } => Some(w),
            _ => None,
        }
    }

    fn tensor_refs(&self) -> Vec<&str> {
        match self {
            Layer::Linear { w, bias, .. } | Layer::Conv2d { w, bias, .. } => {
                std::iter::once(w.as_str()).chain(bias.as_deref()).collect()
            }
            Layer::GroupNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }
}

/// A tensor the quantizer has to decide on, in network order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    /// Weight tensor name, or activation point name.
    pub name: String,
    pub kind: TensorKind,
    pub layer: String,
    /// False for tensors that always stay in full precision.
    pub quantize: bool,
}

/// Observer for intermediate values of a forward pass.
pub trait Probe {
    /// An activation point, before any quantization is applied to it.
    fn activation(&mut self, _point: &str, _value: &Tensor) {}
    /// Output of a conv/linear layer.
    fn layer_output(&mut self, _layer: &str, _value: &Tensor) {}
}

impl Probe for () {}

struct Outputs(Vec<(String, Tensor)>);

impl Probe for Outputs {
    fn layer_output(&mut self, layer: &str, value: &Tensor) {
        self.0.push((layer.to_string(), value.clone()));
    }
}

/// Ordered layer list of a small U-Net-style network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDesc {
    pub layers: Vec<Layer>,
}

impl PipelineDesc {
    pub fn from_json(s: &str) -> Result<Self> {
        let desc: Self = serde_json::from_str(s)?;
        desc.check_structure()?;
        Ok(desc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    /// Explicit name, or `<op><index>`.
    pub fn layer_name(&self, index: usize) -> String {
        let layer = &self.layers[index];
        layer
            .explicit_name()
            .map(str::to_string)
            .unwrap_or_else(|| format!("{}{index}", layer.op()))
    }

    /// Activation point at the input of a conv/linear layer.
    pub fn input_point(layer: &str) -> String {
        format!("{layer}.in")
    }

    /// Saved-skip half of a concatenation.
    pub fn skip_point(layer: &str) -> String {
        format!("{layer}.skip")
    }

    /// Incoming half of a concatenation.
    pub fn main_point(layer: &str) -> String {
        format!("{layer}.main")
    }

    fn check_structure(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut saved = HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = self.layer_name(i);
            if !names.insert(name.clone()) {
                return Err(Error::Pipeline(format!("duplicate layer name {name}")));
            }
            match layer {
                Layer::SkipSave { slot, .. } => {
                    saved.insert(slot.as_str());
                }
                Layer::SkipConcat { slot, .. } if !saved.contains(slot.as_str()) => {
                    return Err(Error::Pipeline(format!("{name}: slot {slot} concatenated before it is saved")));
                }
                Layer::Conv2d { stride: 0, .. } => {
                    return Err(Error::Pipeline(format!("{name}: stride must be at least 1")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Structure checks plus resolution of every referenced tensor.
    pub fn validate(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.check_structure()?;
        for (i, layer) in self.layers.iter().enumerate() {
            for r in layer.tensor_refs() {
                if !tensors.contains_key(r) {
                    return Err(Error::Missing(format!("{r} (referenced by layer {})", self.layer_name(i))));
                }
            }
        }
        Ok(())
    }

    /// Every tensor in breadth-first (layer) order: conv/linear weights and
    /// their input activations are quantized; biases and normalization
    /// parameters stay in full precision; a concatenation contributes its two
    /// halves. A conv/linear fed directly by a concatenation takes its input
    /// as already split-quantized.
    pub fn tensor_order(&self) -> Vec<TensorSlot> {
        let mut slots = Vec::new();
        let slot = |name: &str, kind, layer: &str, quantize| TensorSlot {
            name: name.to_string(),
            kind,
            layer: layer.to_string(),
            quantize,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let lname = self.layer_name(i);
            let after_concat = i > 0 && matches!(self.layers[i - 1], Layer::SkipConcat { .. });
            match layer {
                Layer::Linear { w, bias, .. } | Layer::Conv2d { w, bias, .. } => {
                    slots.push(slot(w, TensorKind::Weight, &lname, true));
                    slots.push(slot(&Self::input_point(&lname), TensorKind::Activation, &lname, !after_concat));
                    if let Some(b) = bias {
                        slots.push(slot(b, TensorKind::Weight, &lname, false));
                    }
                }
                Layer::GroupNorm { gamma, beta, .. } => {
                    slots.push(slot(gamma, TensorKind::Weight, &lname, false));
                    slots.push(slot(beta, TensorKind::Weight, &lname, false));
                }
                Layer::SkipConcat { .. } => {
                    slots.push(slot(&Self::skip_point(&lname), TensorKind::Activation, &lname, true));
                    slots.push(slot(&Self::main_point(&lname), TensorKind::Activation, &lname, true));
                }
                Layer::Silu { .. } | Layer::SkipSave { .. } => {}
            }
        }
        slots
    }

    /// Effective weights: each conv/linear weight replaced by its quantized
    /// version per `manifest`.
    fn prepare(&self, tensors: &HashMap<String, Tensor>, manifest: Option<&QuantManifest>) -> Result<HashMap<String, Tensor>> {
        self.validate(tensors)?;
        let mut out = HashMap::new();
        for layer in &self.layers {
            if let Some(w) = layer.weight() {
                let t = &tensors[w];
                let record = manifest.and_then(|m| m.get(w));
                out.insert(w.to_string(), quantize_weight(record, t, tensors)?);
            }
        }
        Ok(out)
    }

    fn forward_prepared(
        &self,
        tensors: &HashMap<String, Tensor>,
        weights: &HashMap<String, Tensor>,
        manifest: Option<&QuantManifest>,
        input: &Tensor,
        probe: &mut dyn Probe,
    ) -> Result<Tensor> {
        let record = |point: &str| manifest.and_then(|m| m.get(point));
        let mut slots: HashMap<&str, Tensor> = HashMap::new();
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let lname = self.layer_name(i);
            let wrap = |e: Error| match e {
                Error::Shape(msg) => Error::Pipeline(format!("layer {lname}: {msg}")),
                other => other,
            };
            x = match layer {
                Layer::Linear { w, bias, .. } | Layer::Conv2d { w, bias, .. } => {
                    let point = Self::input_point(&lname);
                    probe.activation(&point, &x);
                    let xq = quantize_activation(record(&point), &x)?;
                    let b = bias.as_ref().map(|b| &tensors[b]);
                    let y = match layer {
                        Layer::Conv2d { stride, padding, .. } => conv2d_forward(&weights[w], b, &xq, *stride, *padding),
                        _ => linear_forward(&weights[w], b, &xq),
                    }
                    .map_err(wrap)?
                    .renamed(lname.clone());
                    probe.layer_output(&lname, &y);
                    y
                }
                Layer::Silu { .. } => silu(&x),
                Layer::GroupNorm { groups, gamma, beta, .. } => {
                    group_norm(&x, *groups, &tensors[gamma], &tensors[beta], GROUP_NORM_EPS).map_err(wrap)?
                }
                Layer::SkipSave { slot, .. } => {
                    slots.insert(slot.as_str(), x.clone());
                    x
                }
                Layer::SkipConcat { slot, axis, .. } => {
                    let skip = slots
                        .get(slot.as_str())
                        .ok_or_else(|| Error::Pipeline(format!("slot {slot} was never saved")))?;
                    let (sp, mp) = (Self::skip_point(&lname), Self::main_point(&lname));
                    probe.activation(&sp, skip);
                    probe.activation(&mp, &x);
                    let skip_q = quantize_activation(record(&sp), skip)?;
                    let main_q = quantize_activation(record(&mp), &x)?;
                    // [incoming, skip] along the channel axis
                    concat(&main_q, &skip_q, *axis).map_err(wrap)?
                }
            };
        }
        Ok(x)
    }

    /// One pass over the pipeline. Without a manifest everything runs in full
    /// precision.
    pub fn forward(
        &self,
        tensors: &HashMap<String, Tensor>,
        manifest: Option<&QuantManifest>,
        input: &Tensor,
        probe: &mut dyn Probe,
    ) -> Result<Tensor> {
        let weights = self.prepare(tensors, manifest)?;
        self.forward_prepared(tensors, &weights, manifest, input, probe)
    }
}

/// Quantizes an activation per its record; missing and passthrough records
/// leave it unchanged.
pub fn quantize_activation(record: Option<&QuantRecord>, x: &Tensor) -> Result<Tensor> {
    let Some(r) = record else { return Ok(x.clone()) };
    match &r.mode {
        QuantMode::Fp { .. } => quantize_fp(x, &r.fp_format()?.expect("fp record")),
        QuantMode::Int { .. } => Ok(quantize_int(x, r.int_config()?.expect("int record"))?.tensor),
        QuantMode::Passthrough => Ok(x.clone()),
    }
}

/// Quantizes a weight per its record, applying the learned rounding mask when
/// the record references one.
pub fn quantize_weight(record: Option<&QuantRecord>, w: &Tensor, tensors: &HashMap<String, Tensor>) -> Result<Tensor> {
    let Some(r) = record else { return Ok(w.clone()) };
    match (&r.mode, &r.rounding_mask_ref) {
        (QuantMode::Fp { .. }, Some(mask_name)) => {
            let mask = tensors
                .get(mask_name)
                .ok_or_else(|| Error::Missing(format!("rounding mask {mask_name} for {}", r.name)))?;
            if mask.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "mask {mask_name} {:?} does not match weight {} {:?}",
                    mask.shape(),
                    w.name(),
                    w.shape()
                )));
            }
            let fmt = r.fp_format()?.expect("fp record");
            w.with_data(apply_mask(w.data(), &fmt, mask.data())?)
        }
        (_, Some(_)) => Err(Error::Config(format!(
            "{}: rounding masks only apply to fp records",
            r.name
        ))),
        (_, None) => quantize_activation(Some(r), w),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub mse: f64,
    /// NaN when the full-precision output is all zeros.
    pub sqnr_db: f64,
    /// Sparsity of the quantized run's output.
    pub output_sparsity: f64,
    pub format: String,
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub layers: Vec<LayerReport>,
    pub output_mse: f64,
    pub output_sqnr_db: f64,
    pub output_sparsity: f64,
}

/// Quantized run compared against a full-precision run on identical inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub steps: Vec<StepReport>,
    pub output_fp: Tensor,
    pub output_q: Tensor,
}

pub const CSV_HEADER: &str = "layer_name,mse,sqnr_db,sparsity,format,bias";

impl RunReport {
    pub fn last(&self) -> &StepReport {
        self.steps.last().expect("at least one step")
    }

    /// Per-step output MSE, step 1 first.
    pub fn step_mse(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.output_mse).collect()
    }

    /// `layer_name,mse,sqnr_db,sparsity,format,bias`. Multi-step runs suffix
    /// names with `@step<k>`; each step ends with an `output` row.
    pub fn to_csv(&self) -> String {
        let multi = self.steps.len() > 1;
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for step in &self.steps {
            let suffix = if multi { format!("@step{}", step.step) } else { String::new() };
            for l in &step.layers {
                let bias = l.bias.map(|b| format!("{b:.17e}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{}{suffix},{},{},{},{},{bias}",
                    l.name, l.mse, l.sqnr_db, l.output_sparsity, l.format
                );
            }
            let _ = writeln!(
                s,
                "output{suffix},{},{},{},,",
                step.output_mse, step.output_sqnr_db, step.output_sparsity
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for step in &self.steps {
            let _ = writeln!(
                s,
                "step {:>3}: output mse {:.6e}  sqnr {:.2} dB  sparsity {:.4}",
                step.step, step.output_mse, step.output_sqnr_db, step.output_sparsity
            );
        }
        let last = self.last();
        for l in &last.layers {
            let _ = writeln!(
                s,
                "  {:<16} {:<12} mse {:.6e}  sqnr {:>8.2} dB  sparsity {:.4}",
                l.name, l.format, l.mse, l.sqnr_db, l.output_sparsity
            );
        }
        s
    }
}

fn sqnr_or_nan(reference: &Tensor, test: &Tensor) -> Result<f64> {
    match sqnr_db(reference, test) {
        Ok(v) => Ok(v),
        Err(Error::Config(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Runs the pipeline `steps` times, feeding each output back as the next
/// input, once in full precision and once quantized per `manifest`, and
/// compares them layer by layer.
pub fn run_pipeline(
    desc: &PipelineDesc,
    tensors: &HashMap<String, Tensor>,
    manifest: Option<&QuantManifest>,
    input: &Tensor,
    steps: usize,
) -> Result<RunReport> {
    run_pipeline_with(desc, tensors, manifest, input, steps, &mut ())
}

/// [`run_pipeline`] with a probe observing the quantized run.
pub fn run_pipeline_with(
    desc: &PipelineDesc,
    tensors: &HashMap<String, Tensor>,
    manifest: Option<&QuantManifest>,
    input: &Tensor,
    steps: usize,
    probe: &mut dyn Probe,
) -> Result<RunReport> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let fp_weights = desc.prepare(tensors, None)?;
    let q_weights = desc.prepare(tensors, manifest)?;
    let mut x_fp = input.clone();
    let mut x_q = input.clone();
    let mut reports = Vec::with_capacity(steps);
    for step in 1..=steps {
        let mut fp_out = Outputs(Vec::new());
        let mut q_out = Outputs(Vec::new());
        let y_fp = desc.forward_prepared(tensors, &fp_weights, None, &x_fp, &mut fp_out)?;
        let y_q = {
            let mut both = Tee(&mut q_out, probe);
            desc.forward_prepared(tensors, &q_weights, manifest, &x_q, &mut both)?
        };
        let mut layers = Vec::with_capacity(fp_out.0.len());
        for ((name, a), (_, b)) in fp_out.0.iter().zip(&q_out.0) {
            let weight_record = desc
                .layers
                .iter()
                .enumerate()
                .find(|(i, _)| &desc.layer_name(*i) == name)
                .and_then(|(_, l)| l.weight())
                .and_then(|w| manifest.and_then(|m| m.get(w)));
            layers.push(LayerReport {
                name: name.clone(),
                mse: mse(a, b)?,
                sqnr_db: sqnr_or_nan(a, b)?,
                output_sparsity: sparsity(b),
                format: weight_record.map(QuantRecord::format_label).unwrap_or_else(|| "fp32".into()),
                bias: weight_record.and_then(QuantRecord::bias),
            });
        }
        reports.push(StepReport {
            step,
            layers,
            output_mse: mse(&y_fp, &y_q)?,
            output_sqnr_db: sqnr_or_nan(&y_fp, &y_q)?,
            output_sparsity: sparsity(&y_q),
        });
        if step < steps && y_fp.shape() != input.shape() {
            return Err(Error::Pipeline(format!(
                "cannot iterate: output shape {:?} differs from input shape {:?}",
                y_fp.shape(),
                input.shape()
            )));
        }
        x_fp = y_fp.renamed(input.name());
        x_q = y_q.renamed(input.name());
    }
    Ok(RunReport {
        steps: reports,
        output_fp: x_fp,
        output_q: x_q,
    })
}

struct CaptureAll<'a> {
    set: &'a mut CalibSet,
    timestep: u32,
    sample: u32,
    error: Option<Error>,
}

impl Probe for CaptureAll<'_> {
    fn activation(&mut self, point: &str, value: &Tensor) {
        if self.error.is_none() {
            if let Err(e) = self.set.insert(point, self.timestep, self.sample, value.clone()) {
                self.error = Some(e);
            }
        }
    }
}

/// Runs each input through `steps` full-precision iterations and records
/// every activation point as `point@t<step>#<sample>`. The pipeline input of
/// each step is recorded under `input_name`.
pub fn capture_calib(
    desc: &PipelineDesc,
    tensors: &HashMap<String, Tensor>,
    inputs: &[&Tensor],
    steps: usize,
    input_name: &str,
) -> Result<CalibSet> {
    let mut set = CalibSet::new();
    for (j, x0) in inputs.iter().enumerate() {
        let mut x = (*x0).clone();
        for t in 0..steps {
            set.insert(input_name, t as u32, j as u32, x.clone())?;
            let mut cap = CaptureAll {
                set: &mut set,
                timestep: t as u32,
                sample: j as u32,
                error: None,
            };
            let y = desc.forward(tensors, None, &x, &mut cap)?;
            if let Some(e) = cap.error {
                return Err(e);
            }
            if t + 1 < steps && y.shape() != x.shape() {
                return Err(Error::Pipeline(format!(
                    "cannot iterate: output shape {:?} differs from input shape {:?}",
                    y.shape(),
                    x.shape()
                )));
            }
            x = y.renamed(x0.name());
        }
    }
    Ok(set)
}

struct Tee<'a, 'b>(&'a mut dyn Probe, &'b mut dyn Probe);

impl Probe for Tee<'_, '_> {
    fn activation(&mut self, point: &str, value: &Tensor) {
        self.0.activation(point, value);
        self.1.activation(point, value);
    }

    fn layer_output(&mut self, layer: &str, value: &Tensor) {
        self.0.layer_output(layer, value);
        self.1.layer_output(layer, value);
    }
}
