//! Frozen pre-trained stand-in: a strided convolutional feature encoder
//! followed by `N` post-LN Transformer blocks.
//!
//! Every block exposes the insertion points used by the tuning modules in
//! [`crate::pet`]: LoRA on the query/value projections, bottleneck adapters
//! after MHSA and/or the FFN, a gated parallel branch fused into the final
//! residual, and prompt rows prepended to the layer input. The speech part of
//! every layer's output is collected into a [`HiddenStack`].

use crate::error::{Error, Result};
use crate::params::{Binder, Init, LrGroup, ParamRegistry, ParamSpec};
use crate::pet::{self, BlockPlan, InnerMode, PetContext};
use crate::tensor::tape::Var;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv: Vec<ConvLayer>,
    pub sample_rate: u32,
}

fn conv(kernel: usize, stride: usize, channels: usize) -> ConvLayer {
    ConvLayer { kernel, stride, channels }
}

impl BackboneConfig {
    /// Desk-scale preset: 40x downsampling at 4 kHz, 4 blocks of width 64.
    pub fn desk() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            conv: vec![conv(10, 5, 64), conv(8, 4, 64), conv(4, 2, 64)],
            sample_rate: 4000,
        }
    }

    /// Full-scale preset matching a 12-layer, 768-wide speech encoder.
    pub fn full() -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            heads: 8,
            ffn_dim: 3072,
            conv: vec![
                conv(10, 5, 512),
                conv(3, 2, 512),
                conv(3, 2, 512),
                conv(3, 2, 512),
                conv(3, 2, 512),
                conv(2, 2, 512),
                conv(2, 2, 512),
            ],
            sample_rate: 16000,
        }
    }

    /// Tiny configuration for gradient-check suites.
    pub fn micro() -> Self {
        Self {
            num_layers: 2,
            hidden: 16,
            heads: 2,
            ffn_dim: 32,
            conv: vec![conv(4, 2, 8)],
            sample_rate: 400,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.conv.is_empty() {
            return Err(Error::Config("conv_spec must have at least one layer".into()));
        }
        if self.conv.iter().any(|c| c.kernel == 0 || c.stride == 0 || c.channels == 0) {
            return Err(Error::Config("conv layers need positive kernel/stride/channels".into()));
        }
        Ok(())
    }

    /// Smallest waveform length that yields one output frame.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1;
        for c in self.conv.iter().rev() {
            need = (need - 1) * c.stride + c.kernel;
        }
        need
    }

    /// Frame count after the conv stack: floor((len - kernel)/stride) + 1 per layer.
    pub fn conv_out_len(&self, samples: usize) -> Result<usize> {
        if samples < self.min_input_len() {
            return Err(Error::Input(format!(
                "waveform of {samples} samples is shorter than the encoder minimum of {}",
                self.min_input_len()
            )));
        }
        let mut len = samples;
        for c in &self.conv {
            len = (len - c.kernel) / c.stride + 1;
        }
        Ok(len)
    }

    /// Specs for every backbone parameter. The conv encoder and the blocks
    /// carry independent trainable flags: pseudo-pretraining trains both, full
    /// fine-tuning trains blocks only, every PET method freezes both.
    pub fn param_specs(&self, conv_trainable: bool, blocks_trainable: bool) -> Vec<ParamSpec> {
        let d = self.hidden;
        let f = self.ffn_dim;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init, trainable: bool| {
            out.push(ParamSpec::new(name, shape, init, trainable, LrGroup::B));
        };
        let mut c_in = 1;
        for (i, c) in self.conv.iter().enumerate() {
            push(
                format!("backbone.conv{i}.w"),
                vec![c.channels, c.kernel, c_in],
                Init::XavierUniform { fan_in: c.kernel * c_in, fan_out: c.channels },
                conv_trainable,
            );
            push(format!("backbone.conv{i}.b"), vec![c.channels], Init::Zeros, conv_trainable);
            c_in = c.channels;
        }
        push(
            "backbone.proj.w".into(),
            vec![c_in, d],
            Init::XavierUniform { fan_in: c_in, fan_out: d },
            conv_trainable,
        );
        push("backbone.proj.b".into(), vec![d], Init::Zeros, conv_trainable);
        for i in 0..self.num_layers {
            let p = format!("backbone.block{i}");
            for proj in ["wq", "wk", "wv", "wo"] {
                push(
                    format!("{p}.attn.{proj}"),
                    vec![d, d],
                    Init::XavierUniform { fan_in: d, fan_out: d },
                    blocks_trainable,
                );
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                push(format!("{p}.attn.{bias}"), vec![d], Init::Zeros, blocks_trainable);
            }
            for ln in ["ln1", "ln2"] {
                push(format!("{p}.{ln}.gamma"), vec![d], Init::Ones, blocks_trainable);
                push(format!("{p}.{ln}.beta"), vec![d], Init::Zeros, blocks_trainable);
            }
            push(
                format!("{p}.ffn.w1"),
                vec![d, f],
                Init::XavierUniform { fan_in: d, fan_out: f },
                blocks_trainable,
            );
            push(format!("{p}.ffn.b1"), vec![f], Init::Zeros, blocks_trainable);
            push(
                format!("{p}.ffn.w2"),
                vec![f, d],
                Init::XavierUniform { fan_in: f, fan_out: d },
                blocks_trainable,
            );
            push(format!("{p}.ffn.b2"), vec![d], Init::Zeros, blocks_trainable);
        }
        out
    }

    /// Total backbone parameter count; the denominator of trainable fractions.
    pub fn total_params(&self) -> u64 {
        self.param_specs(false, false).iter().map(ParamSpec::numel).sum()
    }

    /// Element count of the Transformer blocks alone (full-FT trainables,
    /// conv encoder excluded).
    pub fn block_params(&self) -> u64 {
        self.param_specs(false, true)
            .iter()
            .filter(|s| s.trainable)
            .map(ParamSpec::numel)
            .sum()
    }
}

/// Per-layer speech outputs `H_0..H_N` plus any prompt-part outputs `Z_i`.
/// `Z_i` rows are produced by the blocks but excluded from everything
/// downstream.
pub struct HiddenStack {
    pub h: Vec<Var>,
    pub z: Vec<Var>,
}

impl HiddenStack {
    /// `H_1..H_N`, the states eligible for layer-weighted aggregation.
    pub fn layers(&self) -> &[Var] {
        &self.h[1..]
    }

    pub fn last(&self) -> Var {
        *self.h.last().expect("stack has at least H_0")
    }
}

/// Conv feature encoder: strided conv + GELU per layer, then a linear
/// projection to the model width. Input is a rank-1 waveform.
pub fn conv_encode<F: Scalar>(
    b: &mut Binder<F>,
    cfg: &BackboneConfig,
    waveform: Var,
) -> Result<Var> {
    let samples = b.tape.value(waveform).numel();
    cfg.conv_out_len(samples)?;
    let mut x = b.tape.reshape(waveform, vec![samples, 1])?;
    for i in 0..cfg.conv.len() {
        let w = b.var(&format!("backbone.conv{i}.w"))?;
        let bias = b.var(&format!("backbone.conv{i}.b"))?;
        x = b.tape.conv1d(x, w, bias, cfg.conv[i].stride, 1)?;
        x = b.tape.activation(x, crate::Activation::Gelu);
    }
    let w = b.var("backbone.proj.w")?;
    let bias = b.var("backbone.proj.b")?;
    let y = b.tape.matmul(x, w)?;
    b.tape.add_bias(y, bias)
}

fn linear<F: Scalar>(b: &mut Binder<F>, x: Var, w: &str, bias: &str) -> Result<Var> {
    let w = b.var(w)?;
    let bias = b.var(bias)?;
    let y = b.tape.matmul(x, w)?;
    b.tape.add_bias(y, bias)
}

/// Multi-head self-attention over the whole (prompt + speech) sequence,
/// unmasked and bidirectional. Query/value projections are LoRA-wrapped when
/// the plan says so.
fn mhsa<F: Scalar>(
    b: &mut Binder<F>,
    cfg: &BackboneConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let p = format!("backbone.block{layer}.attn");
    let q = linear(b, x, &format!("{p}.wq"), &format!("{p}.bq"))?;
    let k = linear(b, x, &format!("{p}.wk"), &format!("{p}.bk"))?;
    let v = linear(b, x, &format!("{p}.wv"), &format!("{p}.bv"))?;
    mhsa_core(b, cfg, layer, q, k, v)
}

fn mhsa_core<F: Scalar>(
    b: &mut Binder<F>,
    cfg: &BackboneConfig,
    layer: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let dh = cfg.hidden / cfg.heads;
    let inv_sqrt = F::fl(1.0 / (dh as f64).sqrt());
    let mut head_ctx_t = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = b.tape.narrow(q, 1, h * dh, dh)?;
        let kh = b.tape.narrow(k, 1, h * dh, dh)?;
        let vh = b.tape.narrow(v, 1, h * dh, dh)?;
        let kht = b.tape.transpose(kh)?;
        let scores = b.tape.matmul(qh, kht)?;
        let scores = b.tape.scale(scores, inv_sqrt);
        let attn = b.tape.softmax(scores, 1)?;
        let ctx = b.tape.matmul(attn, vh)?;
        // concat along columns via transpose: stack [dh x S] slabs on axis 0
        head_ctx_t.push(b.tape.transpose(ctx)?);
    }
    let stacked = b.tape.concat0(&head_ctx_t)?;
    let ctx = b.tape.transpose(stacked)?;
    let p = format!("backbone.block{layer}.attn");
    linear(b, ctx, &format!("{p}.wo"), &format!("{p}.bo"))
}

fn mhsa_with_plan<F: Scalar>(
    b: &mut Binder<F>,
    cfg: &BackboneConfig,
    layer: usize,
    x: Var,
    plan: &BlockPlan,
) -> Result<Var> {
    if plan.lora.is_none() || plan.disabled {
        return mhsa(b, cfg, layer, x);
    }
    let rank = plan.lora.unwrap();
    let p = format!("backbone.block{layer}.attn");
    let q = pet::lora_linear(
        b,
        x,
        &format!("{p}.wq"),
        &format!("{p}.bq"),
        &format!("pet.lora.block{layer}.q"),
        rank,
    )?;
    let k = linear(b, x, &format!("{p}.wk"), &format!("{p}.bk"))?;
    let v = pet::lora_linear(
        b,
        x,
        &format!("{p}.wv"),
        &format!("{p}.bv"),
        &format!("pet.lora.block{layer}.v"),
        rank,
    )?;
    mhsa_core(b, cfg, layer, q, k, v)
}

/// One Transformer block over a `[(m+T), d]` sequence, applying whatever the
/// plan activates: LoRA inside attention, bottleneck adapters after MHSA
/// and/or the FFN, and the gated parallel branch fused into the final
/// residual + layer-norm.
pub fn block_forward<F: Scalar>(
    b: &mut Binder<F>,
    cfg: &BackboneConfig,
    layer: usize,
    input: Var,
    plan: &BlockPlan,
) -> Result<Var> {
    if plan.layer != layer {
        return Err(Error::Contract(format!(
            "block plan for layer {} applied to layer {layer}",
            plan.layer
        )));
    }
    let p = format!("backbone.block{layer}");
    let mut attn_out = mhsa_with_plan(b, cfg, layer, input, plan)?;
    if plan.houlsby && !plan.disabled {
        attn_out = pet::houlsby_adapter(b, &format!("pet.houlsby.block{layer}.attn"), attn_out)?;
    }
    let res1 = b.tape.add(input, attn_out)?;
    let g1 = b.var(&format!("{p}.ln1.gamma"))?;
    let b1 = b.var(&format!("{p}.ln1.beta"))?;
    let x1 = b.tape.layer_norm(res1, g1, b1, LN_EPS)?;

    let h = linear(b, x1, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"))?;
    let h = b.tape.activation(h, crate::Activation::Gelu);
    let mut ffn = linear(b, h, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"))?;

    let g2 = b.var(&format!("{p}.ln2.gamma"))?;
    let b2 = b.var(&format!("{p}.ln2.beta"))?;

    if plan.disabled {
        return pet::fuse_block_output(&mut b.tape, ffn, None, x1, g2, b2, LN_EPS);
    }
    if plan.houlsby {
        ffn = pet::houlsby_adapter(b, &format!("pet.houlsby.block{layer}.ffn"), ffn)?;
    }
    match plan.inner {
        None => pet::fuse_block_output(&mut b.tape, ffn, None, x1, g2, b2, LN_EPS),
        Some(InnerMode::Sequential) => {
            let z = pet::inner_sequential(b, &format!("pet.inner{layer}"), ffn)?;
            pet::fuse_block_output(&mut b.tape, z, None, x1, g2, b2, LN_EPS)
        }
        Some(InnerMode::Parallel) => {
            let z = pet::inner_parallel(b, &format!("pet.inner{layer}"), x1)?;
            let z = pet::apply_scale(b, z, &plan.scale)?;
            let gate = plan.adapter_gate(b, x1, layer)?;
            let z = pet::apply_factor(&mut b.tape, z, &gate)?;
            pet::fuse_block_output(&mut b.tape, ffn, z, x1, g2, b2, LN_EPS)
        }
    }
}

/// Full encoder pass: conv front-end, then the block stack with optional
/// gated prompt rows prepended per layer. Prompt-part outputs `Z_i` are
/// split off and never fed forward.
pub fn encode<F: Scalar>(
    b: &mut Binder<F>,
    cfg: &BackboneConfig,
    waveform: Var,
    ctx: &PetContext,
) -> Result<HiddenStack> {
    let h0 = conv_encode(b, cfg, waveform)?;
    let t = b.tape.value(h0).shape()[0];
    let m = ctx.prompt_rows();
    let mut stack = HiddenStack { h: vec![h0], z: Vec::new() };
    let mut prev = h0;
    for i in 0..cfg.num_layers {
        let input = if m > 0 {
            let rows = ctx.prompt_input(b, i, prev)?;
            b.tape.concat0(&[rows, prev])?
        } else {
            prev
        };
        let plan = ctx.block_plan(i);
        let out = block_forward(b, cfg, i, input, &plan)?;
        let h = if m > 0 {
            stack.z.push(b.tape.narrow(out, 0, 0, m)?);
            b.tape.narrow(out, 0, m, t)?
        } else {
            out
        };
        stack.h.push(h);
        prev = h;
    }
    Ok(stack)
}

/// One pseudo-pretraining step: zero out a random contiguous span of conv
/// frames, run the blocks, and regress the masked span back to the (detached)
/// unmasked conv features through a linear head named `pretrain.head.*`.
///
/// Returns the batch-mean loss and the gradients of every trainable
/// parameter that was touched.
pub fn pseudo_pretrain_step<F: Scalar>(
    reg: &ParamRegistry<F>,
    cfg: &BackboneConfig,
    waves: &[Tensor<F>],
    mask_fraction: f64,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<(String, Tensor<F>)>)> {
    use crate::data::{rng_tags, seeded_rng};
    use rand::Rng;

    if waves.is_empty() {
        return Err(Error::Input("pseudo-pretraining batch is empty".into()));
    }
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::Config(format!("mask fraction {mask_fraction} outside [0,1]")));
    }
    let mut b = Binder::new(reg, true);
    let mut terms = Vec::new();
    for (u, wave) in waves.iter().enumerate() {
        let wv = b.tape.constant(wave.clone());
        let h0 = conv_encode(&mut b, cfg, wv)?;
        let t = b.tape.value(h0).shape()[0];
        let d = cfg.hidden;
        let span = ((t as f64) * mask_fraction).round() as usize;
        if span == 0 {
            continue;
        }
        let mut rng = seeded_rng(seed, rng_tags::MASK, step.wrapping_mul(0x1_0000).wrapping_add(u as u64));
        let start = rng.gen_range(0..=t - span);
        let target = b.tape.value(h0).clone();
        let target = b.tape.constant(target);
        let mut mask = vec![F::one(); t * d];
        for row in start..start + span {
            mask[row * d..(row + 1) * d].fill(F::zero());
        }
        let mask = b.tape.constant(Tensor::new(vec![t, d], mask)?);
        let masked = b.tape.mul(h0, mask)?;
        let mut x = masked;
        let plan_ctx = PetContext::none();
        for i in 0..cfg.num_layers {
            x = block_forward(&mut b, cfg, i, x, &plan_ctx.block_plan(i))?;
        }
        let pred = linear(&mut b, x, "pretrain.head.w", "pretrain.head.b")?;
        let pred_span = b.tape.narrow(pred, 0, start, span)?;
        let tgt_span = b.tape.narrow(target, 0, start, span)?;
        let diff = b.tape.sub(pred_span, tgt_span)?;
        let sq = b.tape.mul(diff, diff)?;
        let sum = b.tape.sum_all(sq);
        terms.push(b.tape.scale(sum, F::fl(1.0 / (span * d) as f64)));
    }
    if terms.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = b.tape.add(total, t)?;
    }
    let loss = b.tape.scale(total, F::fl(1.0 / waves.len() as f64));
    let loss_val = b.tape.value(loss).item()?.to_f64().unwrap();
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!("pretraining loss is {loss_val}")));
    }
    let grads = b.tape.backward(loss)?;
    let mut out = Vec::new();
    for (name, var) in b.bound() {
        if let Some(g) = grads.get(var) {
            out.push((name.to_string(), g.clone()));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((loss_val, out))
}

/// Parameter specs for the pseudo-pretraining prediction head.
pub fn pretrain_head_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    vec![
        ParamSpec::new(
            "pretrain.head.w",
            vec![d, d],
            Init::XavierUniform { fan_in: d, fan_out: d },
            true,
            LrGroup::B,
        ),
        ParamSpec::new("pretrain.head.b", vec![d], Init::Zeros, true, LrGroup::B),
    ]
}
