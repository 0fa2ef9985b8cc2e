use super::init::{self, InitRng};
use super::{param_fields, Geometry};
use crate::autodiff::{Parameter, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub w: Parameter,
    pub b: Parameter,
}

param_fields!(ConvStage { w, b });

/// Stages of `3x3 conv -> relu -> 2x2 average pool`, then global average
/// pooling and one linear map to the feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub stages: Vec<ConvStage>,
    pub proj_w: Parameter,
    pub proj_b: Parameter,
}

param_fields!(ConvEncoder { proj_w, proj_b }, stages);

impl ConvEncoder {
    pub(crate) fn new(prefix: &str, g: &Geometry, rng: &mut InitRng) -> Self {
        let mut stages = Vec::with_capacity(g.conv_channels.len());
        let mut c_in = g.channels;
        for (i, &c_out) in g.conv_channels.iter().enumerate() {
            stages.push(ConvStage {
                w: init::fan_in(format!("{prefix}.stage{i}.conv.w"), &[c_out, c_in, 3, 3], c_in * 9, rng),
                b: init::zeros(format!("{prefix}.stage{i}.conv.b"), &[c_out]),
            });
            c_in = c_out;
        }
        ConvEncoder {
            stages,
            proj_w: init::fan_in(format!("{prefix}.proj.w"), &[c_in, g.embed_dim], c_in, rng),
            proj_b: init::zeros(format!("{prefix}.proj.b"), &[g.embed_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for stage in &self.stages {
            let (w, b) = (tape.param(&stage.w), tape.param(&stage.b));
            h = tape.conv2d(h, w, Some(b), 1, 1)?;
            h = tape.relu(h)?;
            h = tape.avg_pool2(h)?;
        }
        let s = tape.shape(h)?.to_vec();
        let flat = tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = tape.mean_axis(flat, 2)?;
        let (w, b) = (tape.param(&self.proj_w), tape.param(&self.proj_b));
        let feat = tape.matmul(pooled, w)?;
        tape.add(feat, b)
    }
}
