//! Speaker-verification head: layer aggregation, statistics pooling, the
//! linear and TDNN backends, and the training classifier.
//!
//! The embedding is the output of the second affine layer; the classifier is
//! used only for cross-entropy training and never at scoring time.

use crate::backbone::HiddenStack;
use crate::error::{Error, Result};
use crate::params::{Binder, Init, LrGroup, ParamSpec};
use crate::pet::{self, Aggregation, MethodSpec, PetContext};
use crate::tensor::tape::Var;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Epsilon under the square root of the pooled standard deviation.
const STD_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Linear,
    Tdnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Frame-layer channel width (TDNN only; the last frame layer uses 3x).
    pub channels: usize,
    pub embed_dim: usize,
}

impl BackendConfig {
    pub fn desk() -> Self {
        Self { kind: BackendKind::Linear, channels: 128, embed_dim: 512 }
    }

    pub fn desk_tdnn() -> Self {
        Self { kind: BackendKind::Tdnn, channels: 128, embed_dim: 512 }
    }

    pub fn full_tdnn() -> Self {
        Self { kind: BackendKind::Tdnn, channels: 512, embed_dim: 512 }
    }

    pub fn micro() -> Self {
        Self { kind: BackendKind::Linear, channels: 8, embed_dim: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("backend widths must be positive".into()));
        }
        Ok(())
    }
}

/// TDNN frame-layer plan: (kernel, dilation, out-channel multiplier).
const TDNN_LAYERS: [(usize, usize); 5] = [(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)];

fn tdnn_channels(cfg: &BackendConfig) -> [usize; 5] {
    let c = cfg.channels;
    [c, c, c, c, 3 * c]
}

/// Head parameter specs (`head.*`), all trainable in every method and all in
/// the fast learning-rate group.
pub fn backend_param_specs(
    cfg: &BackendConfig,
    input_dim: usize,
    num_speakers: usize,
) -> Vec<ParamSpec> {
    let e = cfg.embed_dim;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        out.push(ParamSpec::new(name, shape, init, true, LrGroup::A));
    };
    let pooled = match cfg.kind {
        BackendKind::Linear => 2 * input_dim,
        BackendKind::Tdnn => {
            let chans = tdnn_channels(cfg);
            let mut c_in = input_dim;
            for (i, ((k, _), c_out)) in TDNN_LAYERS.iter().zip(chans).enumerate() {
                push(
                    format!("head.tdnn{i}.w"),
                    vec![c_out, *k, c_in],
                    Init::XavierUniform { fan_in: k * c_in, fan_out: c_out },
                );
                push(format!("head.tdnn{i}.b"), vec![c_out], Init::Zeros);
                c_in = c_out;
            }
            2 * chans[4]
        }
    };
    push(
        "head.fc1.w".into(),
        vec![pooled, e],
        Init::XavierUniform { fan_in: pooled, fan_out: e },
    );
    push("head.fc1.b".into(), vec![e], Init::Zeros);
    push("head.fc2.w".into(), vec![e, e], Init::XavierUniform { fan_in: e, fan_out: e });
    push("head.fc2.b".into(), vec![e], Init::Zeros);
    push(
        "head.classifier.w".into(),
        vec![e, num_speakers],
        Init::XavierUniform { fan_in: e, fan_out: num_speakers },
    );
    push("head.classifier.b".into(), vec![num_speakers], Init::Zeros);
    out
}

/// Frames the backend consumes: delegate to the inter adapter, take the
/// softmax-weighted sum of `H_1..H_N`, or pass through the last layer.
pub fn aggregate<F: Scalar>(
    b: &mut Binder<F>,
    stack: &HiddenStack,
    spec: &MethodSpec,
    ctx: &PetContext,
) -> Result<Var> {
    match spec.method.aggregation() {
        Aggregation::LastLayer => Ok(stack.last()),
        Aggregation::WeightedSum { .. } => {
            pet::weighted_layer_sum(b, "pet.layer_weights", stack.layers())
        }
        Aggregation::Inter => pet::inter_adapter(b, stack.layers(), |b, sum| {
            ctx.inter_gate(b, sum)
        }),
    }
}

/// Concatenated per-channel mean and population standard deviation.
pub fn stats_pool<F: Scalar>(b: &mut Binder<F>, frames: Var) -> Result<Var> {
    let shape = b.tape.value(frames).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Input(format!(
            "statistics pooling needs a nonempty [T, c] input, got {shape:?}"
        )));
    }
    let c = shape[1];
    let mean = b.tape.mean_axis0(frames)?;
    let sq = b.tape.mul(frames, frames)?;
    let mean_sq = b.tape.mean_axis0(sq)?;
    let mean2 = b.tape.mul(mean, mean)?;
    let var = b.tape.sub(mean_sq, mean2)?;
    let eps = b.tape.constant(Tensor::filled(vec![c], F::fl(STD_EPS)));
    let var = b.tape.add(var, eps)?;
    let std = b.tape.sqrt(var);
    let mean_col = b.tape.reshape(mean, vec![c, 1])?;
    let std_col = b.tape.reshape(std, vec![c, 1])?;
    let cat = b.tape.concat0(&[mean_col, std_col])?;
    b.tape.reshape(cat, vec![2 * c])
}

/// Frame layers (TDNN only), statistics pooling, then two affine layers; the
/// second affine output is the speaker embedding.
pub fn embed<F: Scalar>(b: &mut Binder<F>, cfg: &BackendConfig, frames: Var) -> Result<Var> {
    let frames = match cfg.kind {
        BackendKind::Linear => frames,
        BackendKind::Tdnn => {
            let mut x = frames;
            for (i, (_, dil)) in TDNN_LAYERS.iter().enumerate() {
                let w = b.var(&format!("head.tdnn{i}.w"))?;
                let bias = b.var(&format!("head.tdnn{i}.b"))?;
                x = b.tape.conv1d(x, w, bias, 1, *dil)?;
                x = b.tape.relu(x);
            }
            x
        }
    };
    let pooled = stats_pool(b, frames)?;
    let n = b.tape.value(pooled).numel();
    let row = b.tape.reshape(pooled, vec![1, n])?;
    let w1 = b.var("head.fc1.w")?;
    let b1 = b.var("head.fc1.b")?;
    let h = b.tape.matmul(row, w1)?;
    let h = b.tape.add_bias(h, b1)?;
    let h = b.tape.relu(h);
    let w2 = b.var("head.fc2.w")?;
    let b2 = b.var("head.fc2.b")?;
    let e = b.tape.matmul(h, w2)?;
    let e = b.tape.add_bias(e, b2)?;
    b.tape.reshape(e, vec![cfg.embed_dim])
}

/// Class logits for training; scoring never touches these weights.
pub fn classify<F: Scalar>(b: &mut Binder<F>, cfg: &BackendConfig, embedding: Var) -> Result<Var> {
    let row = b.tape.reshape(embedding, vec![1, cfg.embed_dim])?;
    let w = b.var("head.classifier.w")?;
    let bias = b.var("head.classifier.b")?;
    let y = b.tape.matmul(row, w)?;
    let y = b.tape.add_bias(y, bias)?;
    let n = b.tape.value(y).numel();
    b.tape.reshape(y, vec![n])
}
