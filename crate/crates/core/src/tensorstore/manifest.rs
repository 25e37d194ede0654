use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use super::{write_atomic, Tensor};
use crate::error::{Error, Result};
use crate::fpcodec::{FpFormat, IntQuantConfig};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Activation,
}

/// Biases are written with 17 significant digits so they survive any JSON reader.
fn ser_bias<S: Serializer>(bias: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    let raw = RawValue::from_string(format!("{bias:.16e}")).map_err(S::Error::custom)?;
    raw.serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum QuantMode {
    Fp {
        e_bits: u32,
        m_bits: u32,
        #[serde(serialize_with = "ser_bias")]
        bias: f64,
    },
    Int {
        bits: u32,
    },
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub name: String,
    pub kind: TensorKind,
    #[serde(flatten)]
    pub mode: QuantMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding_mask_ref: Option<String>,
}

impl QuantRecord {
    pub fn fp(name: impl Into<String>, kind: TensorKind, fmt: &FpFormat) -> Self {
        Self {
            name: name.into(),
            kind,
            mode: QuantMode::Fp {
                e_bits: fmt.e_bits(),
                m_bits: fmt.m_bits(),
                bias: fmt.bias(),
            },
            rounding_mask_ref: None,
        }
    }

    pub fn int(name: impl Into<String>, kind: TensorKind, bits: u32) -> Self {
        Self {
            name: name.into(),
            kind,
            mode: QuantMode::Int { bits },
            rounding_mask_ref: None,
        }
    }

    pub fn passthrough(name: impl Into<String>, kind: TensorKind) -> Self {
        Self {
            name: name.into(),
            kind,
            mode: QuantMode::Passthrough,
            rounding_mask_ref: None,
        }
    }

    /// The minifloat format of an `fp` record.
    pub fn fp_format(&self) -> Result<Option<FpFormat>> {
        match self.mode {
            QuantMode::Fp { e_bits, m_bits, bias } => {
                Ok(Some(FpFormat::new(e_bits as i32, m_bits as i32, Some(bias))?))
            }
            _ => Ok(None),
        }
    }

    pub fn int_config(&self) -> Result<Option<IntQuantConfig>> {
        match self.mode {
            QuantMode::Int { bits } => Ok(Some(IntQuantConfig::new(bits)?)),
            _ => Ok(None),
        }
    }

    /// `ExMy`, `INTb` or `passthrough`.
    pub fn format_label(&self) -> String {
        match self.mode {
            QuantMode::Fp { e_bits, m_bits, .. } => format!("E{e_bits}M{m_bits}"),
            QuantMode::Int { bits } => format!("INT{bits}"),
            QuantMode::Passthrough => "passthrough".into(),
        }
    }

    pub fn bias(&self) -> Option<f64> {
        match self.mode {
            QuantMode::Fp { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

/// Per-tensor quantization decisions, in insertion (network) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub version: u32,
    pub records: Vec<QuantRecord>,
}

impl QuantManifest {
    pub fn new() -> Self {
        Self {
            version: MANIFEST_VERSION,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&QuantRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut QuantRecord> {
        self.records.iter_mut().find(|r| r.name == name)
    }

    /// Inserts or replaces the record with the same name.
    pub fn upsert(&mut self, record: QuantRecord) {
        match self.get_mut(&record.name) {
            Some(r) => *r = record,
            None => self.records.push(record),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        for r in &m.records {
            r.fp_format()?;
            r.int_config()?;
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    /// Every referenced rounding mask exists, matches its weight's shape and
    /// holds only 0/1.
    pub fn validate_masks(&self, weights: &HashMap<String, Tensor>, masks: &HashMap<String, Tensor>) -> Result<()> {
        for r in &self.records {
            let Some(mask_name) = &r.rounding_mask_ref else { continue };
            let mask = masks
                .get(mask_name)
                .ok_or_else(|| Error::Missing(format!("rounding mask {mask_name} for {}", r.name)))?;
            let w = weights
                .get(&r.name)
                .ok_or_else(|| Error::Missing(format!("weight {}", r.name)))?;
            if mask.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "mask {mask_name} has shape {:?}, weight {} has {:?}",
                    mask.shape(),
                    r.name,
                    w.shape()
                )));
            }
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config(format!("mask {mask_name} holds values other than 0/1")));
            }
        }
        Ok(())
    }
}
