//! Synthetic models for tests, benchmarks and `fpq synth`.
//!
//! The mini U-Net maps `(1, 4, 6, 6)` to the same shape, so it can be
//! iterated like a denoising loop:
//!
//! ```text
//! save x0 -> conv_in 3x3 -> silu -> save h1 -> conv_mid 3x3 -> groupnorm
//!   -> concat h1 -> conv_out 1x1 -> concat x0 -> conv_res 1x1 -> linear head
//! ```
//!
//! `conv_res` carries an identity path for `x0`, so each pass is a small
//! update of its input.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::netsim::{Layer, PipelineDesc};
use crate::tensorstore::Tensor;

pub const CHANNELS: usize = 4;
pub const SIDE: usize = 6;
pub const INPUT_NAME: &str = "input";

pub struct Toy {
    pub desc: PipelineDesc,
    pub tensors: HashMap<String, Tensor>,
}

impl Toy {
    pub fn weights(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.tensors.values().cloned().collect();
        v.sort_by(|a, b| a.name().cmp(b.name()));
        v
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(name, shape, data).expect("finite gaussian samples")
}

fn conv(name: &str, stride: usize, padding: usize) -> Layer {
    Layer::Conv2d {
        name: Some(name.into()),
        w: format!("{name}.w"),
        bias: Some(format!("{name}.b")),
        stride,
        padding,
    }
}

pub fn mini_unet(seed: u64) -> Toy {
    let c = CHANNELS;
    let hidden = 2 * c;
    let layers = vec![
        Layer::SkipSave { name: Some("save_x0".into()), slot: "x0".into() },
        conv("conv_in", 1, 1),
        Layer::Silu { name: Some("act_in".into()) },
        Layer::SkipSave { name: Some("save_h1".into()), slot: "h1".into() },
        conv("conv_mid", 1, 1),
        Layer::GroupNorm {
            name: Some("norm_mid".into()),
            groups: 2,
            gamma: "norm_mid.gamma".into(),
            beta: "norm_mid.beta".into(),
        },
        Layer::SkipConcat { name: Some("cat_h".into()), slot: "h1".into(), axis: 1 },
        conv("conv_out", 1, 0),
        Layer::SkipConcat { name: Some("cat_x".into()), slot: "x0".into(), axis: 1 },
        conv("conv_res", 1, 0),
        Layer::Linear { name: Some("head".into()), w: "head.w".into(), bias: None },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = vec![
        gaussian(&mut rng, "conv_in.w", vec![hidden, c, 3, 3], 1.0 / (c as f64 * 9.0).sqrt()),
        gaussian(&mut rng, "conv_in.b", vec![hidden], 0.1),
        gaussian(&mut rng, "conv_mid.w", vec![hidden, hidden, 3, 3], 1.0 / (hidden as f64 * 9.0).sqrt()),
        gaussian(&mut rng, "conv_mid.b", vec![hidden], 0.1),
        Tensor::new("norm_mid.gamma", vec![hidden], vec![1.0; hidden]).unwrap(),
        Tensor::new("norm_mid.beta", vec![hidden], vec![0.0; hidden]).unwrap(),
        gaussian(&mut rng, "conv_out.w", vec![c, 2 * hidden, 1, 1], 1.0 / (2.0 * hidden as f64).sqrt()),
        gaussian(&mut rng, "conv_out.b", vec![c], 0.05),
    ];
    // [update (c) | identity on x0 (c)]
    let upd = gaussian(&mut rng, "", vec![c * c], 0.1);
    let mut res = vec![0f32; c * 2 * c];
    for o in 0..c {
        for i in 0..c {
            res[o * 2 * c + i] = upd.data()[o * c + i];
        }
        res[o * 2 * c + c + o] = 1.0;
    }
    t.push(Tensor::new("conv_res.w", vec![c, 2 * c, 1, 1], res).unwrap());
    t.push(Tensor::new("conv_res.b", vec![c], vec![0.0; c]).unwrap());
    // slightly contractive, so iterating settles instead of blowing up
    let noise = gaussian(&mut rng, "", vec![SIDE * SIDE], 0.03);
    let head: Vec<f32> = (0..SIDE * SIDE)
        .map(|i| noise.data()[i] + if i / SIDE == i % SIDE { 0.9 } else { 0.0 })
        .collect();
    t.push(Tensor::new("head.w", vec![SIDE, SIDE], head).unwrap());
    Toy {
        desc: PipelineDesc { layers },
        tensors: t.into_iter().map(|t| (t.name().to_string(), t)).collect(),
    }
}

/// Standard-normal network input of shape `(1, 4, 6, 6)`.
pub fn mini_unet_input(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(&mut rng, INPUT_NAME, vec![1, CHANNELS, SIDE, SIDE], 1.0)
}

/// Seed of the `index`-th input derived from a run seed; index 0 is the
/// held-out input, calibration inputs start at 1.
pub fn input_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}
