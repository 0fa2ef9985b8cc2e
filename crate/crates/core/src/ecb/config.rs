//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Arch, Geometry};

/// Which co-training directions run after the FTC stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CotrainMode {
    Both,
    Vit2Cnn,
    Cnn2Vit,
    Off,
}

impl CotrainMode {
    pub const ALL: [CotrainMode; 4] = [CotrainMode::Both, CotrainMode::Vit2Cnn, CotrainMode::Cnn2Vit, CotrainMode::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            CotrainMode::Both => "both",
            CotrainMode::Vit2Cnn => "vit2cnn",
            CotrainMode::Cnn2Vit => "cnn2vit",
            CotrainMode::Off => "off",
        }
    }

    pub fn teaches_cnn(self) -> bool {
        matches!(self, CotrainMode::Both | CotrainMode::Vit2Cnn)
    }

    pub fn teaches_vit(self) -> bool {
        matches!(self, CotrainMode::Both | CotrainMode::Cnn2Vit)
    }
}

impl FromStr for CotrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CotrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown cotrain_mode {s:?} (both, vit2cnn, cnn2vit, off)")))
    }
}

/// Encoder architectures of the first (`e1`/`f1`) and second (`e2`/`f2`)
/// branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchPair {
    AttnConv,
    ConvConv,
    AttnAttn,
}

impl ArchPair {
    pub const ALL: [ArchPair; 3] = [ArchPair::AttnConv, ArchPair::ConvConv, ArchPair::AttnAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchPair::AttnConv => "attn+conv",
            ArchPair::ConvConv => "conv+conv",
            ArchPair::AttnAttn => "attn+attn",
        }
    }

    pub fn archs(self) -> (Arch, Arch) {
        match self {
            ArchPair::AttnConv => (Arch::Attn, Arch::Conv),
            ArchPair::ConvConv => (Arch::Conv, Arch::Conv),
            ArchPair::AttnAttn => (Arch::Attn, Arch::Attn),
        }
    }
}

impl FromStr for ArchPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchPair::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arch_pair {s:?} (attn+conv, conv+conv, attn+attn)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcbConfig {
    pub lr_vit: f64,
    pub lr_cnn: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau_vit: f64,
    pub tau_cnn: f64,
    pub warmup_iters: usize,
    pub train_iters: usize,
    pub sched_gamma: f64,
    pub sched_power: f64,
    pub cotrain_mode: CotrainMode,
    pub arch_pair: ArchPair,
    pub seed: u64,
    /// Run the Finding and Conquering stages after warmup.
    pub ftc: bool,
    pub log_interval: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub attn_blocks: usize,
    pub attn_heads: usize,
    pub mlp_hidden: usize,
    pub conv_channels: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for EcbConfig {
    fn default() -> Self {
        let g = Geometry::default();
        EcbConfig {
            lr_vit: 1e-3,
            lr_cnn: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            tau_vit: 0.6,
            tau_cnn: 0.9,
            warmup_iters: 2000,
            train_iters: 3000,
            sched_gamma: 1e-4,
            sched_power: 0.75,
            cotrain_mode: CotrainMode::Both,
            arch_pair: ArchPair::AttnConv,
            seed: 1,
            ftc: true,
            log_interval: 250,
            embed_dim: g.embed_dim,
            patch_size: g.patch_size,
            attn_blocks: g.attn_blocks,
            attn_heads: g.attn_heads,
            mlp_hidden: g.mlp_hidden,
            conv_channels: g.conv_channels,
            head_hidden: g.head_hidden,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl EcbConfig {
    /// The published learning rates (1e-4 / 1e-3). They assume pretrained
    /// backbones; the defaults scale both by 10 for from-scratch training.
    pub fn published() -> Self {
        EcbConfig { lr_vit: 1e-4, lr_cnn: 1e-3, ..Default::default() }
    }

    /// The supervised-only reference: same schedule, no FTC, no co-training.
    pub fn baseline(&self) -> Self {
        EcbConfig { ftc: false, cotrain_mode: CotrainMode::Off, ..self.clone() }
    }

    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.train_iters
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, tau) in [("tau_vit", self.tau_vit), ("tau_cnn", self.tau_cnn)] {
            if !(0.0..=1.0).contains(&tau) {
                return fail(format!("{name} = {tau} is outside [0, 1]"));
            }
        }
        for (name, lr) in [("lr_vit", self.lr_vit), ("lr_cnn", self.lr_cnn)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} = {lr} must be positive"));
            }
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size = {} must be at least 2", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay be nonnegative".into());
        }
        if !(self.sched_gamma >= 0.0 && self.sched_power >= 0.0) {
            return fail("sched_gamma and sched_power must be nonnegative".into());
        }
        if self.log_interval == 0 {
            return fail("log_interval must be positive".into());
        }
        Ok(())
    }

    /// Model geometry for images of `[channels, side, side]` and `classes`.
    pub fn geometry(&self, channels: usize, side: usize, classes: usize) -> Geometry {
        Geometry {
            channels,
            side,
            classes,
            embed_dim: self.embed_dim,
            patch_size: self.patch_size,
            attn_blocks: self.attn_blocks,
            attn_heads: self.attn_heads,
            mlp_hidden: self.mlp_hidden,
            conv_channels: self.conv_channels.clone(),
            head_hidden: self.head_hidden,
        }
    }

    /// One `key = value` line per field, in declaration order.
    pub fn to_text(&self) -> String {
        let channels = self.conv_channels.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let fields: [(&str, String); 23] = [
            ("lr_vit", self.lr_vit.to_string()),
            ("lr_cnn", self.lr_cnn.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("tau_vit", self.tau_vit.to_string()),
            ("tau_cnn", self.tau_cnn.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("train_iters", self.train_iters.to_string()),
            ("sched_gamma", self.sched_gamma.to_string()),
            ("sched_power", self.sched_power.to_string()),
            ("cotrain_mode", self.cotrain_mode.as_str().into()),
            ("arch_pair", self.arch_pair.as_str().into()),
            ("seed", self.seed.to_string()),
            ("ftc", self.ftc.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("attn_blocks", self.attn_blocks.to_string()),
            ("attn_heads", self.attn_heads.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("conv_channels", channels),
            ("head_hidden", self.head_hidden.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parse a config document. Keys not mentioned keep their defaults;
    /// unknown or repeated keys are errors. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = EcbConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Overwrite the fields named in a config document, as [`EcbConfig::from_text`]
    /// does starting from the defaults.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", n + 1)));
            }
            self.set(key, value)?;
        }
        self.validate()
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr_vit" => self.lr_vit = parse(key, value)?,
            "lr_cnn" => self.lr_cnn = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "tau_vit" => self.tau_vit = parse(key, value)?,
            "tau_cnn" => self.tau_cnn = parse(key, value)?,
            "warmup_iters" => self.warmup_iters = parse(key, value)?,
            "train_iters" => self.train_iters = parse(key, value)?,
            "sched_gamma" => self.sched_gamma = parse(key, value)?,
            "sched_power" => self.sched_power = parse(key, value)?,
            "cotrain_mode" => self.cotrain_mode = value.parse()?,
            "arch_pair" => self.arch_pair = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "ftc" => self.ftc = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "attn_blocks" => self.attn_blocks = parse(key, value)?,
            "attn_heads" => self.attn_heads = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "conv_channels" => {
                self.conv_channels = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
            }
            "head_hidden" => self.head_hidden = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
