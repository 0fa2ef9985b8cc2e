//! The ECB objective and training procedure.
//!
//! Each iteration runs up to six sub-steps, and every one of them updates a
//! fixed set of parameter groups:
//!
//! | stage        | loss                                            | updates     | lr    |
//! |--------------|-------------------------------------------------|-------------|-------|
//! | `SupVit`     | CE of F1(E1(x))                                 | `e1`, `f1`  | vit   |
//! | `SupCnn`     | CE of F2(E2(x))                                 | `e2`, `f2`  | cnn   |
//! | `Finding`    | sup_vit + sup_cnn - disc(F1(E1 xu), F2(E1 xu))  | `f1`, `f2`  | vit   |
//! | `Conquering` | disc(F1(E2 xu), F2(E2 xu))                      | `e2`        | cnn   |
//! | `CotrainV2c` | ViT pseudo labels teach the CNN branch          | `e2`, `f2`  | cnn   |
//! | `CotrainC2v` | CNN pseudo labels teach the ViT branch          | `e1`, `f1`  | vit   |
//!
//! The update set is enforced structurally: a stage's tape only registers
//! parameters of its groups as differentiable, and only those are handed to
//! the optimizer.

mod config;
mod losses;
mod metrics;
mod optim;
mod trainer;

pub use config::{ArchPair, CotrainMode, EcbConfig};
pub use losses::{
    argmax, discrepancy, loss_conq, loss_cotrain, loss_find, loss_sup, Cotrain, FindTerms, LabeledBatch, PseudoLabels,
};
pub use metrics::{MetricsRecord, StepLosses, METRICS_COLUMNS};
pub use optim::{lr_schedule, Sgd};
pub use trainer::{train, Phase, StageEvent, Trainer};

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autodiff::{ParamSet, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, CheckpointHeader};
use crate::nn::{Branch, Geometry, Role};
use crate::rng;

/// One training sub-step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    SupVit,
    SupCnn,
    Finding,
    Conquering,
    CotrainV2c,
    CotrainC2v,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::SupVit, Stage::SupCnn, Stage::Finding, Stage::Conquering, Stage::CotrainV2c, Stage::CotrainC2v];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SupVit => "supervised-vit",
            Stage::SupCnn => "supervised-cnn",
            Stage::Finding => "finding",
            Stage::Conquering => "conquering",
            Stage::CotrainV2c => "cotrain-vit2cnn",
            Stage::CotrainC2v => "cotrain-cnn2vit",
        }
    }

    /// Parameter groups this stage may change.
    pub fn update_groups(self) -> &'static [&'static str] {
        match self {
            Stage::SupVit | Stage::CotrainC2v => &["e1", "f1"],
            Stage::SupCnn | Stage::CotrainV2c => &["e2", "f2"],
            Stage::Finding => &["f1", "f2"],
            Stage::Conquering => &["e2"],
        }
    }

    /// Whether the stage steps with the ViT-side learning rate.
    pub fn vit_lr(self) -> bool {
        matches!(self, Stage::SupVit | Stage::Finding | Stage::CotrainC2v)
    }
}

/// The two branches and the iteration counter. Optimizer state lives in
/// each [`Parameter`]'s momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct EcbState {
    pub vit: Branch,
    pub cnn: Branch,
    pub iter: usize,
}

impl EcbState {
    /// Fresh branches for `config.arch_pair`, initialized from named streams
    /// of `config.seed`.
    pub fn new(config: &EcbConfig, geometry: &Geometry) -> Result<Self> {
        let (a1, a2) = config.arch_pair.archs();
        let vit_seed = rng::stream(config.seed, "init.vit").random();
        let cnn_seed = rng::stream(config.seed, "init.cnn").random();
        Ok(EcbState {
            vit: Branch::new(a1, Role::Vit, geometry, vit_seed)?,
            cnn: Branch::new(a2, Role::Cnn, geometry, cnn_seed)?,
            iter: 0,
        })
    }

    /// Snapshot of all parameter values. The config text and iteration are
    /// stored in the header metadata next to any caller-supplied `meta`.
    pub fn to_checkpoint(&self, config: &EcbConfig, mut meta: BTreeMap<String, String>) -> Checkpoint {
        meta.insert("config".into(), config.to_text());
        meta.insert("iter".into(), self.iter.to_string());
        let header = CheckpointHeader {
            geometry: self.vit.geometry().clone(),
            archs: vec![self.vit.arch(), self.cnn.arch()],
            seed: config.seed,
            meta,
        };
        Checkpoint::from_params(header, self.params())
    }

    /// Rebuild a state (momentum buffers zeroed) and its config from a
    /// checkpoint written by [`EcbState::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, EcbConfig)> {
        let meta = &ckpt.header.meta;
        let text = meta.get("config").ok_or_else(|| Error::Format("checkpoint has no config metadata".into()))?;
        let config = EcbConfig::from_text(text)?;
        let (a1, a2) = config.arch_pair.archs();
        if ckpt.header.archs != [a1, a2] {
            return Err(Error::Format(format!(
                "checkpoint architectures {:?} disagree with its config ({})",
                ckpt.header.archs,
                config.arch_pair.as_str()
            )));
        }
        let mut state = EcbState::new(&config, &ckpt.header.geometry)?;
        ckpt.restore(state.params_mut())?;
        state.iter = match meta.get("iter") {
            Some(v) => v.parse().map_err(|_| Error::Format(format!("bad iter metadata {v:?}")))?,
            None => 0,
        };
        Ok((state, config))
    }

    /// Mutable parameters belonging to `groups`.
    pub fn group_params_mut(&mut self, groups: &[&str]) -> Vec<&mut Parameter> {
        self.params_mut().into_iter().filter(|p| groups.contains(&p.group())).collect()
    }
}

impl ParamSet for EcbState {
    fn params(&self) -> Vec<&Parameter> {
        let mut all = self.vit.params();
        all.extend(self.cnn.params());
        all
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut all = self.vit.params_mut();
        all.extend(self.cnn.params_mut());
        all
    }
}

/// Build `stage`'s loss on a tape that only differentiates its groups,
/// back-propagate, and take one SGD step on those groups. Returns the loss
/// value. `build` returns `None` for a defined zero loss, in which case no
/// update (not even weight decay) happens.
pub fn apply_stage<F>(state: &mut EcbState, stage: Stage, sgd: &Sgd, lr: f64, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &EcbState) -> Result<Option<Var>>,
{
    let groups = stage.update_groups();
    let mut tape = Tape::with_groups(groups);
    let Some(loss) = build(&mut tape, state)? else {
        return Ok(0.0);
    };
    let value = tape.value(loss)?.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("{} loss is {value}", stage.name())));
    }
    let mut params = state.group_params_mut(groups);
    tape.backward(loss, &mut params)?;
    sgd.step(&mut params, lr)?;
    Ok(value)
}

pub fn step_supervised(state: &mut EcbState, role: Role, batch: &LabeledBatch, sgd: &Sgd, lr: f64) -> Result<f64> {
    let stage = if role == Role::Vit { Stage::SupVit } else { Stage::SupCnn };
    apply_stage(state, stage, sgd, lr, |tape, s| {
        let branch = if role == Role::Vit { &s.vit } else { &s.cnn };
        loss_sup(tape, branch, batch).map(Some)
    })
}

pub fn step_finding(state: &mut EcbState, labeled: &LabeledBatch, unlabeled: &crate::autodiff::Tensor, sgd: &Sgd, lr: f64) -> Result<f64> {
    apply_stage(state, Stage::Finding, sgd, lr, |tape, s| {
        loss_find(tape, &s.vit, &s.cnn, labeled, unlabeled).map(|t| Some(t.total))
    })
}

pub fn step_conquering(state: &mut EcbState, unlabeled: &crate::autodiff::Tensor, sgd: &Sgd, lr: f64) -> Result<f64> {
    apply_stage(state, Stage::Conquering, sgd, lr, |tape, s| loss_conq(tape, &s.vit, &s.cnn, unlabeled).map(Some))
}

/// One co-training direction. `teacher` is the role that produces pseudo
/// labels; the other branch is updated. Returns `(loss, selected)`.
pub fn step_cotrain(
    state: &mut EcbState,
    teacher: Role,
    weak: &crate::autodiff::Tensor,
    strong: &crate::autodiff::Tensor,
    tau: f64,
    sgd: &Sgd,
    lr: f64,
) -> Result<(f64, usize)> {
    let stage = if teacher == Role::Vit { Stage::CotrainV2c } else { Stage::CotrainC2v };
    let mut selected = 0;
    let loss = apply_stage(state, stage, sgd, lr, |tape, s| {
        let (t, st) = if teacher == Role::Vit { (&s.vit, &s.cnn) } else { (&s.cnn, &s.vit) };
        let c = loss_cotrain(tape, t, st, weak, strong, tau)?;
        selected = c.pseudo.selected;
        Ok(c.loss)
    })?;
    Ok((loss, selected))
}
