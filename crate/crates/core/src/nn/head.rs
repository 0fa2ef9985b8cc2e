use super::init::{self, InitRng};
use super::{param_fields, Geometry};
use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};

/// Two fully connected layers, `d -> h` with ReLU, then `h -> K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub fc1_w: Parameter,
    pub fc1_b: Parameter,
    pub fc2_w: Parameter,
    pub fc2_b: Parameter,
}

param_fields!(ClassifierHead { fc1_w, fc1_b, fc2_w, fc2_b });

impl ClassifierHead {
    pub(crate) fn new(prefix: &str, g: &Geometry, rng: &mut InitRng) -> Self {
        let (d, h, k) = (g.embed_dim, g.head_hidden, g.classes);
        ClassifierHead {
            fc1_w: init::fan_in(format!("{prefix}.fc1.w"), &[d, h], d, rng),
            fc1_b: init::zeros(format!("{prefix}.fc1.b"), &[h]),
            fc2_w: init::fan_in(format!("{prefix}.fc2.w"), &[h, k], h, rng),
            fc2_b: init::zeros(format!("{prefix}.fc2.b"), &[k]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1_w.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.fc2_w.shape()[1]
    }

    /// `[n, d]` features to `[n, K]` logits.
    pub fn forward_logits(&self, tape: &mut Tape, feat: Var) -> Result<Var> {
        let s = tape.shape(feat)?;
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::Dimension(format!(
                "classifier expects [n, {}] features, got {s:?}",
                self.input_dim()
            )));
        }
        let (w1, b1) = (tape.param(&self.fc1_w), tape.param(&self.fc1_b));
        let (w2, b2) = (tape.param(&self.fc2_w), tape.param(&self.fc2_b));
        let h = tape.matmul(feat, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, w2)?;
        tape.add(out, b2)
    }
}
