use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_container, write_container, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CalibKey {
    pub tensor: String,
    pub timestep: u32,
    pub sample: u32,
}

/// Container entry name for a captured sample: `tensor@t<timestep>#<sample>`.
pub fn calib_entry_name(tensor: &str, timestep: u32, sample: u32) -> String {
    format!("{tensor}@t{timestep}#{sample}")
}

pub fn parse_calib_name(name: &str) -> Option<CalibKey> {
    let (head, sample) = name.rsplit_once('#')?;
    let (tensor, timestep) = head.rsplit_once("@t")?;
    if tensor.is_empty() {
        return None;
    }
    Some(CalibKey {
        tensor: tensor.to_string(),
        timestep: timestep.parse().ok()?,
        sample: sample.parse().ok()?,
    })
}

/// Captured activation samples indexed by tensor name, timestep and sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibSet {
    entries: BTreeMap<CalibKey, Tensor>,
}

impl CalibSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a sample. All samples of one tensor must share a shape.
    pub fn insert(&mut self, tensor: &str, timestep: u32, sample: u32, data: Tensor) -> Result<()> {
        if let Some(existing) = self.entries_for(tensor).first() {
            if existing.shape() != data.shape() {
                return Err(Error::Shape(format!(
                    "calibration samples of {tensor} must share shape {:?}, got {:?}",
                    existing.shape(),
                    data.shape()
                )));
            }
        }
        let key = CalibKey {
            tensor: tensor.to_string(),
            timestep,
            sample,
        };
        let data = data.renamed(calib_entry_name(tensor, timestep, sample));
        self.entries.insert(key, data);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CalibKey, &Tensor)> {
        self.entries.iter()
    }

    /// Distinct tensor names, sorted.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.keys().map(|k| k.tensor.clone()).collect();
        names.dedup();
        names
    }

    pub fn contains(&self, tensor: &str) -> bool {
        self.entries.keys().any(|k| k.tensor == tensor)
    }

    /// Samples of one tensor ordered by (timestep, sample).
    pub fn entries_for(&self, tensor: &str) -> Vec<&Tensor> {
        self.entries
            .iter()
            .filter(|(k, _)| k.tensor == tensor)
            .map(|(_, t)| t)
            .collect()
    }

    /// Concatenation of every sample of `tensor`, in key order.
    pub fn pooled(&self, tensor: &str) -> Result<Vec<f32>> {
        let entries = self.entries_for(tensor);
        if entries.is_empty() {
            return Err(Error::Missing(format!("no calibration entries for {tensor}")));
        }
        Ok(entries.iter().flat_map(|t| t.data().iter().copied()).collect())
    }

    /// Picks `n` samples of `tensor` spread evenly over its timesteps.
    ///
    /// While at least as many picks remain as there are timesteps with unused
    /// samples, every such timestep contributes one sample (round robin).
    /// The final partial pass over `A` timesteps takes `r` of them at indices
    /// `floor(k * (A - 1) / (r - 1))`. Within a timestep samples are consumed in
    /// an order shuffled by `seed`; the timestep choice does not depend on it.
    pub fn sample_uniform(&self, tensor: &str, n: usize, seed: u64) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let mut by_step: BTreeMap<u32, Vec<&Tensor>> = BTreeMap::new();
        for (k, t) in self.entries.iter().filter(|(k, _)| k.tensor == tensor) {
            by_step.entry(k.timestep).or_default().push(t);
        }
        if by_step.is_empty() {
            return Err(Error::Missing(format!("no calibration entries for {tensor}")));
        }
        let total: usize = by_step.values().map(Vec::len).sum();
        if n > total {
            return Err(Error::Config(format!(
                "requested {n} samples of {tensor}, only {total} captured"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps: Vec<Vec<&Tensor>> = by_step.into_values().collect();
        for s in &mut steps {
            s.shuffle(&mut rng);
        }
        let mut cursor = vec![0usize; steps.len()];
        let mut picked = Vec::with_capacity(n);
        while picked.len() < n {
            let open: Vec<usize> = (0..steps.len()).filter(|&i| cursor[i] < steps[i].len()).collect();
            let remaining = n - picked.len();
            let chosen: Vec<usize> = if open.len() <= remaining {
                open
            } else if remaining == 1 {
                vec![open[0]]
            } else {
                (0..remaining)
                    .map(|k| open[k * (open.len() - 1) / (remaining - 1)])
                    .collect()
            };
            for i in chosen {
                picked.push(steps[i][cursor[i]].clone());
                cursor[i] += 1;
            }
        }
        Ok(picked)
    }

    /// Entries as container tensors named `tensor@t<k>#<j>`.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.entries.values().cloned().collect()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut set = Self::new();
        for t in tensors {
            let key = parse_calib_name(t.name()).ok_or_else(|| {
                Error::Malformed(format!(
                    "calibration entry {:?} is not named tensor@t<step>#<sample>",
                    t.name()
                ))
            })?;
            set.insert(&key.tensor, key.timestep, key.sample, t)?;
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(read_container(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(path, &self.to_tensors())
    }
}
