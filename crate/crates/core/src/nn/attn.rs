use super::init::{self, InitRng};
use super::{param_fields, Geometry};
use crate::autodiff::{Parameter, Tape, Var};
use crate::error::Result;

/// Pre-norm transformer block: multi-head self-attention and a two-layer
/// GELU feed-forward, each wrapped in a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock {
    pub ln1_g: Parameter,
    pub ln1_b: Parameter,
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln2_g: Parameter,
    pub ln2_b: Parameter,
    pub fc1_w: Parameter,
    pub fc1_b: Parameter,
    pub fc2_w: Parameter,
    pub fc2_b: Parameter,
    heads: usize,
}

param_fields!(AttnBlock { ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b });

impl AttnBlock {
    fn new(prefix: &str, g: &Geometry, rng: &mut InitRng) -> Self {
        let (d, m) = (g.embed_dim, g.mlp_hidden);
        let lin = |name: &str, i: usize, o: usize, rng: &mut InitRng| init::fan_in(format!("{prefix}.{name}"), &[i, o], i, rng);
        let zero = |name: &str, n: usize| init::zeros(format!("{prefix}.{name}"), &[n]);
        AttnBlock {
            ln1_g: init::ones(format!("{prefix}.ln1.g"), &[d]),
            ln1_b: zero("ln1.b", d),
            wq: lin("attn.wq", d, d, rng),
            bq: zero("attn.bq", d),
            wk: lin("attn.wk", d, d, rng),
            bk: zero("attn.bk", d),
            wv: lin("attn.wv", d, d, rng),
            bv: zero("attn.bv", d),
            wo: lin("attn.wo", d, d, rng),
            bo: zero("attn.bo", d),
            ln2_g: init::ones(format!("{prefix}.ln2.g"), &[d]),
            ln2_b: zero("ln2.b", d),
            fc1_w: lin("mlp.fc1.w", d, m, rng),
            fc1_b: zero("mlp.fc1.b", m),
            fc2_w: lin("mlp.fc2.w", m, d, rng),
            fc2_b: zero("mlp.fc2.b", d),
            heads: g.attn_heads,
        }
    }

    fn linear(tape: &mut Tape, x: Var, w: &Parameter, b: &Parameter) -> Result<Var> {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// `x: [n, t, d]` to `[n, t, d]`.
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x)?.to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);

        let (g1, b1) = (tape.param(&self.ln1_g), tape.param(&self.ln1_b));
        let normed = tape.layernorm(x, g1, b1)?;
        let flat = tape.reshape(normed, &[n * t, d])?;
        let split_heads = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[n, t, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[n * h, t, dh])
        };
        let q = Self::linear(tape, flat, &self.wq, &self.bq)?;
        let q = split_heads(tape, q)?;
        let k = Self::linear(tape, flat, &self.wk, &self.bk)?;
        let k = split_heads(tape, k)?;
        let v = Self::linear(tape, flat, &self.wv, &self.bv)?;
        let v = split_heads(tape, v)?;

        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[n, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n * t, d])?;
        let attn = Self::linear(tape, ctx, &self.wo, &self.bo)?;
        let attn = tape.reshape(attn, &[n, t, d])?;
        let x = tape.add(x, attn)?;

        let (g2, b2) = (tape.param(&self.ln2_g), tape.param(&self.ln2_b));
        let normed = tape.layernorm(x, g2, b2)?;
        let flat = tape.reshape(normed, &[n * t, d])?;
        let hidden = Self::linear(tape, flat, &self.fc1_w, &self.fc1_b)?;
        let hidden = tape.gelu(hidden)?;
        let out = Self::linear(tape, hidden, &self.fc2_w, &self.fc2_b)?;
        let out = tape.reshape(out, &[n, t, d])?;
        tape.add(x, out)
    }
}

/// Patch-token transformer encoder with learned position embeddings and
/// mean pooling over tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnEncoder {
    pub patch_w: Parameter,
    pub patch_b: Parameter,
    pub pos: Parameter,
    pub norm_g: Parameter,
    pub norm_b: Parameter,
    pub blocks: Vec<AttnBlock>,
    patch: usize,
}

param_fields!(AttnEncoder { patch_w, patch_b, pos, norm_g, norm_b }, blocks);

impl AttnEncoder {
    pub(crate) fn new(prefix: &str, g: &Geometry, rng: &mut InitRng) -> Self {
        let (d, p, c) = (g.embed_dim, g.patch_size, g.channels);
        let patch_w = init::fan_in(format!("{prefix}.patch.w"), &[d, c, p, p], c * p * p, rng);
        let pos = init::normal(format!("{prefix}.pos"), &[g.tokens(), d], 0.02, rng);
        let blocks = (0..g.attn_blocks).map(|i| AttnBlock::new(&format!("{prefix}.block{i}"), g, rng)).collect();
        AttnEncoder {
            patch_w,
            patch_b: init::zeros(format!("{prefix}.patch.b"), &[d]),
            pos,
            norm_g: init::ones(format!("{prefix}.norm.g"), &[d]),
            norm_b: init::zeros(format!("{prefix}.norm.b"), &[d]),
            blocks,
            patch: p,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        // non-overlapping patches as a strided convolution
        let (w, b) = (tape.param(&self.patch_w), tape.param(&self.patch_b));
        let tokens = tape.conv2d(x, w, Some(b), self.patch, 0)?;
        let s = tape.shape(tokens)?.to_vec();
        let (n, d, t) = (s[0], s[1], s[2] * s[3]);
        let tokens = tape.reshape(tokens, &[n, d, t])?;
        let tokens = tape.permute(tokens, &[0, 2, 1])?;
        let pos = tape.param(&self.pos);
        let mut h = tape.add(tokens, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, h)?;
        }
        let (g, b) = (tape.param(&self.norm_g), tape.param(&self.norm_b));
        let h = tape.layernorm(h, g, b)?;
        tape.mean_axis(h, 1)
    }
}
