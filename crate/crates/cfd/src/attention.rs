//! Channel and spatial attention used as decomposition gates.
//!
//! Channel attention is the squeeze-excitation form
//! `σ(W₂·δ(W₁·avgpool(x)))` with reduction ratio `r` and no biases.
//! Spatial attention follows the CBAM recipe: channel-wise mean and max
//! maps, a 7×7 convolution, sigmoid. `SC` multiplies the two gates.

use crate::error::shape_err;
use crate::float::Float;
use crate::norm::Binder;
use crate::tensor::{TensorData, Var};
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Channel gate `n×c×1×1`.
    C,
    /// Spatial gate `n×1×h×w`.
    S,
    /// Elementwise product of both, `n×c×h×w`.
    Sc,
}

/// Squeeze-excitation weights. `w1: [c, c/r]` acts on the pooled vector,
/// `w2: [c/r, c]` projects back.
#[derive(Clone, Debug)]
pub struct ChannelAttention<F> {
    pub w1: TensorData<F>,
    pub w2: TensorData<F>,
    /// Output-layer bias; initialized away from zero it biases the gate
    /// toward pass-through (positive) or block (negative), so a freshly
    /// built module starts close to the identity map.
    pub bias: TensorData<F>,
}

impl<F: Float> ChannelAttention<F> {
    /// `r` is clipped so the bottleneck keeps at least one unit.
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        Self::with_bias(channels, reduction, 0.0, rng)
    }

    pub fn with_bias(
        channels: usize,
        reduction: usize,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            w1: init_uniform(&[channels, hidden], channels, rng),
            w2: init_uniform(&[hidden, channels], hidden, rng),
            bias: TensorData::full(&[1, channels], F::from_f64(bias)),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape[0]
    }
}

/// CBAM-style spatial projector: a 7×7 conv over the concatenated
/// channel-mean and channel-max maps.
#[derive(Clone, Debug)]
pub struct SpatialAttention<F> {
    pub kernel: TensorData<F>,
    /// Pre-sigmoid bias, same role as [`ChannelAttention::bias`].
    pub bias: TensorData<F>,
}

impl<F: Float> SpatialAttention<F> {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self::with_bias(0.0, rng)
    }

    pub fn with_bias(bias: f64, rng: &mut impl Rng) -> Self {
        Self {
            kernel: init_uniform(&[1, 2, 7, 7], 2 * 7 * 7, rng),
            bias: TensorData::full(&[1, 1, 1, 1], F::from_f64(bias)),
        }
    }
}

/// Symmetric uniform init scaled by fan-in.
pub fn init_uniform<F: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> TensorData<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    init_bound(shape, bound, rng)
}

/// He-uniform init for layers followed by a ReLU, preserving activation
/// variance through deep unnormalized stacks.
pub fn init_he_uniform<F: Float>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> TensorData<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    init_bound(shape, bound, rng)
}

fn init_bound<F: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> TensorData<F> {
    let n: usize = shape.iter().product();
    TensorData {
        shape: shape.to_vec(),
        data: (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect(),
    }
}

/// Channel attention vector per sample, shaped `n×c×1×1` for gating.
pub fn channel_attention<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    p: &ChannelAttention<F>,
) -> Result<Var> {
    let s = bd.tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err(format!("channel_attention expects 4-d input, got {:?}", s)));
    }
    let (n, c) = (s[0], s[1]);
    if p.channels() != c {
        return Err(shape_err(format!(
            "attention weights for {} channels applied to {} channels",
            p.channels(),
            c
        )));
    }
    let pooled = bd.tape.reduce_mean(x, &[2, 3])?;
    let pooled = bd.tape.reshape(pooled, &[n, c])?;
    let w1 = bd.bind(format!("{prefix}.w1"), &p.w1);
    let w2 = bd.bind(format!("{prefix}.w2"), &p.w2);
    let b = bd.bind(format!("{prefix}.bias"), &p.bias);
    let h = bd.tape.matmul(pooled, w1)?;
    let h = bd.tape.relu(h);
    let z = bd.tape.matmul(h, w2)?;
    let z = bd.tape.add(z, b)?;
    let a = bd.tape.sigmoid(z);
    bd.tape.reshape(a, &[n, c, 1, 1])
}

/// Spatial attention mask `n×1×h×w`.
pub fn spatial_attention<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    p: &SpatialAttention<F>,
) -> Result<Var> {
    let s = bd.tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err(format!("spatial_attention expects 4-d input, got {:?}", s)));
    }
    let mean_map = bd.tape.reduce_mean(x, &[1])?;
    let max_map = bd.tape.reduce_max(x, &[1])?;
    let cat = bd.tape.concat(mean_map, max_map, 1)?;
    let k = bd.bind(format!("{prefix}.kernel"), &p.kernel);
    let b = bd.bind(format!("{prefix}.bias"), &p.bias);
    let proj = bd.tape.conv2d(cat, k, 1, 3)?;
    let proj = bd.tape.add(proj, b)?;
    Ok(bd.tape.sigmoid(proj))
}

/// The effective per-element gate for the requested attention kind.
pub fn attention_gate<F: Float>(
    bd: &mut Binder<F>,
    prefix: &str,
    x: Var,
    kind: AttentionKind,
    channel: &ChannelAttention<F>,
    spatial: Option<&SpatialAttention<F>>,
) -> Result<Var> {
    match kind {
        AttentionKind::C => channel_attention(bd, &format!("{prefix}.c"), x, channel),
        AttentionKind::S => {
            let sp = spatial
                .ok_or_else(|| shape_err("spatial attention requested without parameters".to_string()))?;
            spatial_attention(bd, &format!("{prefix}.s"), x, sp)
        }
        AttentionKind::Sc => {
            let cg = channel_attention(bd, &format!("{prefix}.c"), x, channel)?;
            let sp = spatial
                .ok_or_else(|| shape_err("spatial attention requested without parameters".to_string()))?;
            let sg = spatial_attention(bd, &format!("{prefix}.s"), x, sp)?;
            bd.tape.mul(cg, sg)
        }
    }
}
