//! Encoders, classifier heads and the two-branch model pieces.
//!
//! Both encoders map `[n, c, h, w]` images to `[n, d]` features with the
//! same `d`, so any [`ClassifierHead`] can consume either encoder's output.

mod attn;
pub mod checkpoint;
mod conv;
mod head;
mod init;

use serde::{Deserialize, Serialize};

pub use attn::AttnEncoder;
pub use conv::ConvEncoder;
pub use head::ClassifierHead;

use crate::autodiff::{ParamSet, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Encoder family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Attn,
    Conv,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Attn => "attn",
            Arch::Conv => "conv",
        })
    }
}

/// Which slot of the hybrid model a branch fills. The first branch owns
/// parameter groups `e1`/`f1`, the second `e2`/`f2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Vit,
    Cnn,
}

impl Role {
    pub fn encoder_group(self) -> &'static str {
        match self {
            Role::Vit => "e1",
            Role::Cnn => "e2",
        }
    }

    pub fn head_group(self) -> &'static str {
        match self {
            Role::Vit => "f1",
            Role::Cnn => "f2",
        }
    }
}

/// Image and model geometry shared by both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub attn_blocks: usize,
    pub attn_heads: usize,
    pub mlp_hidden: usize,
    pub conv_channels: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            channels: 1,
            side: 16,
            classes: 5,
            embed_dim: 32,
            patch_size: 4,
            attn_blocks: 2,
            attn_heads: 2,
            mlp_hidden: 64,
            conv_channels: vec![8, 16],
            head_hidden: 32,
        }
    }
}

impl Geometry {
    pub fn validate(&self, arch: Arch) -> Result<()> {
        let nonzero = [
            ("channels", self.channels),
            ("side", self.side),
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        match arch {
            Arch::Attn => {
                if self.patch_size == 0 || self.side % self.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "patch size {} does not divide image side {}",
                        self.patch_size, self.side
                    )));
                }
                if self.attn_heads == 0 || self.embed_dim % self.attn_heads != 0 {
                    return Err(Error::Config(format!(
                        "{} heads do not divide embedding width {}",
                        self.attn_heads, self.embed_dim
                    )));
                }
                if self.mlp_hidden == 0 {
                    return Err(Error::Config("mlp_hidden must be positive".into()));
                }
            }
            Arch::Conv => {
                if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
                    return Err(Error::Config("conv_channels must be a non-empty list of positive widths".into()));
                }
                if self.side >> self.conv_channels.len() == 0 {
                    return Err(Error::Config(format!(
                        "{} pooling stages leave no spatial extent from side {}",
                        self.conv_channels.len(),
                        self.side
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.side / self.patch_size.max(1);
        g * g
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.side, self.side]
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.image_shape() {
            return Err(Error::Dimension(format!(
                "input {shape:?} does not match geometry [n, {}, {}, {}]",
                self.channels, self.side, self.side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Attn(AttnEncoder),
    Conv(ConvEncoder),
}

impl Encoder {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Encoder::Attn(e) => e.forward(tape, x),
            Encoder::Conv(e) => e.forward(tape, x),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Encoder::Attn(e) => e.params(),
            Encoder::Conv(e) => e.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Encoder::Attn(e) => e.params_mut(),
            Encoder::Conv(e) => e.params_mut(),
        }
    }
}

/// One encoder plus one classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    arch: Arch,
    role: Role,
    geometry: Geometry,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Branch {
    /// A freshly initialized branch, reproducible from `seed`.
    pub fn new(arch: Arch, role: Role, geometry: &Geometry, seed: u64) -> Result<Self> {
        geometry.validate(arch)?;
        let mut rng = init::rng(seed);
        let enc = role.encoder_group();
        let encoder = match arch {
            Arch::Attn => Encoder::Attn(AttnEncoder::new(enc, geometry, &mut rng)),
            Arch::Conv => Encoder::Conv(ConvEncoder::new(enc, geometry, &mut rng)),
        };
        let head = ClassifierHead::new(role.head_group(), geometry, &mut rng);
        Ok(Branch { arch, role, geometry: geometry.clone(), encoder, head })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// `[n, c, h, w]` images to `[n, d]` features.
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.geometry.check_input(tape.shape(x)?)?;
        self.encoder.forward(tape, x)
    }

    /// Class probabilities `softmax(F(E(x)))`.
    pub fn forward_probs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let feat = self.forward_features(tape, x)?;
        let logits = self.head.forward_logits(tape, feat)?;
        tape.softmax(logits)
    }

    pub fn encoder_params(&self) -> Vec<&Parameter> {
        self.encoder.params()
    }

    pub fn head_params(&self) -> Vec<&Parameter> {
        self.head.params()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut all = self.encoder.params();
        all.extend(self.head.params());
        all
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut all = self.encoder.params_mut();
        all.extend(self.head.params_mut());
        all
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl ParamSet for Branch {
    fn params(&self) -> Vec<&Parameter> {
        Branch::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Branch::params_mut(self)
    }
}

/// Convenience for the common pattern of running a branch on a batch value.
pub fn predict_probs(branch: &Branch, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let p = branch.forward_probs(&mut tape, x)?;
    Ok(tape.value(p)?.clone())
}

macro_rules! param_fields {
    ($ty:ty { $($field:ident),* $(,)? } $(, $nested:ident)?) => {
        impl $ty {
            pub fn params(&self) -> Vec<&Parameter> {
                #[allow(unused_mut)]
                let mut out: Vec<&Parameter> = vec![$(&self.$field),*];
                $(for n in &self.$nested { out.extend(n.params()); })?
                out
            }

            pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
                #[allow(unused_mut)]
                let mut out: Vec<&mut Parameter> = vec![$(&mut self.$field),*];
                $(for n in &mut self.$nested { out.extend(n.params_mut()); })?
                out
            }
        }
    };
}
pub(crate) use param_fields;
