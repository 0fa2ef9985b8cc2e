//! The iteration loop: batch streams, stage order, metric logging.

use rand::seq::SliceRandom;

use super::{
    lr_schedule, step_conquering, step_cotrain, step_finding, step_supervised, EcbConfig, EcbState, LabeledBatch,
    MetricsRecord, Sgd, Stage, StepLosses,
};
use crate::autodiff::Tensor;
use crate::data::{augment, stack_images, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::TargetProbe;
use crate::nn::Role;
use crate::rng::{self, Rng};

/// Endless shuffled pass over `0..len`, reshuffled at every epoch.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchStream {
    fn new(len: usize, rng: Rng) -> Self {
        BatchStream { order: (0..len).collect(), pos: len, rng }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Index streams plus the augmentation streams of one sub-step. `batches`
/// walks the source (labeled stages) or unlabeled target split; `shots`
/// walks the labeled target split.
struct StageInput {
    batches: BatchStream,
    shots: BatchStream,
    weak: Rng,
    strong: Rng,
}

impl StageInput {
    fn new(seed: u64, name: &str, len: usize, shots: usize) -> Self {
        StageInput {
            batches: BatchStream::new(len, rng::stream(seed, &format!("batch.{name}"))),
            shots: BatchStream::new(shots, rng::stream(seed, &format!("shots.{name}"))),
            weak: rng::stream(seed, &format!("aug.weak.{name}")),
            strong: rng::stream(seed, &format!("aug.strong.{name}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Before,
    After,
}

/// Passed to the observer around every sub-step.
pub struct StageEvent<'a> {
    pub stage: Stage,
    pub phase: Phase,
    pub iter: usize,
    pub state: &'a EcbState,
}

type Observer<'a> = Box<dyn FnMut(&StageEvent<'_>) + 'a>;

pub struct Trainer<'a> {
    config: EcbConfig,
    data: &'a DomainDataset,
    state: EcbState,
    sgd: Sgd,
    sup_vit: StageInput,
    sup_cnn: StageInput,
    find_lab: StageInput,
    find_unl: StageInput,
    conq: StageInput,
    v2c: StageInput,
    c2v: StageInput,
    probe: TargetProbe,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &EcbConfig, data: &'a DomainDataset) -> Result<Self> {
        config.validate()?;
        let shape = data.image_shape();
        let geometry = config.geometry(shape[0], shape[1], data.classes);
        if shape[1] != shape[2] {
            return Err(Error::Dimension(format!("images must be square, got {shape:?}")));
        }
        let state = EcbState::new(config, &geometry)?;
        let seed = config.seed;
        let (ns, nt, nu) = (data.source.len(), data.target_labeled.len(), data.target_unlabeled.len());
        Ok(Trainer {
            sgd: Sgd { momentum: config.momentum, weight_decay: config.weight_decay },
            sup_vit: StageInput::new(seed, "sup_vit", ns, nt),
            sup_cnn: StageInput::new(seed, "sup_cnn", ns, nt),
            find_lab: StageInput::new(seed, "find_lab", ns, nt),
            find_unl: StageInput::new(seed, "find_unl", nu, 0),
            conq: StageInput::new(seed, "conq", nu, 0),
            v2c: StageInput::new(seed, "v2c", nu, 0),
            c2v: StageInput::new(seed, "c2v", nu, 0),
            probe: TargetProbe::new(&data.target_unlabeled, seed)?,
            config: config.clone(),
            data,
            state,
            observer: None,
        })
    }

    /// Call `f` before and after every sub-step.
    pub fn set_observer(&mut self, f: impl FnMut(&StageEvent<'_>) + 'a) {
        self.observer = Some(Box::new(f));
    }

    pub fn state(&self) -> &EcbState {
        &self.state
    }

    pub fn into_state(self) -> EcbState {
        self.state
    }

    pub fn config(&self) -> &EcbConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.iter >= self.config.total_iters()
    }

    /// Half source, half labeled target (all source when there are no
    /// shots), weakly augmented.
    fn labeled_batch(data: &DomainDataset, input: &mut StageInput, n: usize) -> Result<LabeledBatch> {
        let n_shots = if data.target_labeled.is_empty() { 0 } else { n / 2 };
        let src = input.batches.next(n - n_shots).into_iter().map(|i| &data.source[i]);
        let shots = input.shots.next(n_shots).into_iter().map(|i| &data.target_labeled[i]);
        let samples: Vec<_> = src.chain(shots).collect();
        let views: Vec<Tensor> = samples.iter().map(|s| augment::weak(&s.image, &mut input.weak)).collect();
        Ok(LabeledBatch { images: stack_images(&views)?, labels: samples.iter().map(|s| s.label).collect() })
    }

    fn unlabeled_batch(data: &DomainDataset, input: &mut StageInput, n: usize) -> Result<Tensor> {
        let idx = input.batches.next(n);
        stack_images(idx.iter().map(|&i| &data.target_unlabeled[i].image))
    }

    fn view_pair(data: &DomainDataset, input: &mut StageInput, n: usize) -> Result<(Tensor, Tensor)> {
        let idx = input.batches.next(n);
        let mut weak = Vec::with_capacity(n);
        let mut strong = Vec::with_capacity(n);
        for &i in &idx {
            let img = &data.target_unlabeled[i].image;
            weak.push(augment::weak(img, &mut input.weak));
            strong.push(augment::strong(img, &mut input.strong));
        }
        Ok((stack_images(&weak)?, stack_images(&strong)?))
    }

    fn notify(&mut self, stage: Stage, phase: Phase) {
        if let Some(f) = self.observer.as_mut() {
            f(&StageEvent { stage, phase, iter: self.state.iter, state: &self.state });
        }
    }

    fn run_stage<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.notify(stage, Phase::Before);
        let iter = self.state.iter;
        let out = f(self).map_err(|e| Error::Stage { stage: stage.name(), iter, source: Box::new(e) })?;
        self.notify(stage, Phase::After);
        Ok(out)
    }

    pub fn lrs(&self) -> (f64, f64) {
        let c = &self.config;
        let it = self.state.iter;
        (lr_schedule(c.lr_vit, c.sched_gamma, c.sched_power, it), lr_schedule(c.lr_cnn, c.sched_gamma, c.sched_power, it))
    }

    /// Run one iteration: supervised sub-steps always, then after warmup
    /// the FTC pair and the enabled co-training directions.
    pub fn step(&mut self) -> Result<StepLosses> {
        let (lr_vit, lr_cnn) = self.lrs();
        let n = self.config.batch_size;
        let data = self.data;
        let sgd = self.sgd;
        let mut out = StepLosses::default();

        out.sup_vit = self.run_stage(Stage::SupVit, |t| {
            let b = Self::labeled_batch(data, &mut t.sup_vit, n)?;
            step_supervised(&mut t.state, Role::Vit, &b, &sgd, lr_vit)
        })?;
        out.sup_cnn = self.run_stage(Stage::SupCnn, |t| {
            let b = Self::labeled_batch(data, &mut t.sup_cnn, n)?;
            step_supervised(&mut t.state, Role::Cnn, &b, &sgd, lr_cnn)
        })?;

        if self.state.iter >= self.config.warmup_iters {
            if self.config.ftc {
                out.find = self.run_stage(Stage::Finding, |t| {
                    let lab = Self::labeled_batch(data, &mut t.find_lab, n)?;
                    let unl = Self::unlabeled_batch(data, &mut t.find_unl, n)?;
                    step_finding(&mut t.state, &lab, &unl, &sgd, lr_vit)
                })?;
                out.conq = self.run_stage(Stage::Conquering, |t| {
                    let unl = Self::unlabeled_batch(data, &mut t.conq, n)?;
                    step_conquering(&mut t.state, &unl, &sgd, lr_cnn)
                })?;
            }
            let mode = self.config.cotrain_mode;
            if mode.teaches_cnn() {
                let tau = self.config.tau_vit;
                (out.v2c, out.selected_v2c) = self.run_stage(Stage::CotrainV2c, |t| {
                    let (weak, strong) = Self::view_pair(data, &mut t.v2c, n)?;
                    step_cotrain(&mut t.state, Role::Vit, &weak, &strong, tau, &sgd, lr_cnn)
                })?;
            }
            if mode.teaches_vit() {
                let tau = self.config.tau_cnn;
                (out.c2v, out.selected_c2v) = self.run_stage(Stage::CotrainC2v, |t| {
                    let (weak, strong) = Self::view_pair(data, &mut t.c2v, n)?;
                    step_cotrain(&mut t.state, Role::Cnn, &weak, &strong, tau, &sgd, lr_vit)
                })?;
            }
        }
        self.state.iter += 1;
        Ok(out)
    }

    /// Whether a metrics row is due after `done` completed iterations.
    pub fn log_due(&self, done: usize) -> bool {
        let c = &self.config;
        done > 0 && (done % c.log_interval == 0 || done == c.warmup_iters || done == c.total_iters())
    }

    /// Measure the current state into a metrics row labelled `iter = done`.
    pub fn record(&self, losses: &StepLosses, lrs: (f64, f64)) -> Result<MetricsRecord> {
        let c = &self.config;
        let (tv, cv) = self.probe.pseudo_stats(&self.state.vit, c.tau_vit)?;
        let (tc, cc) = self.probe.pseudo_stats(&self.state.cnn, c.tau_cnn)?;
        Ok(MetricsRecord {
            iter: self.state.iter,
            lr_vit: lrs.0,
            lr_cnn: lrs.1,
            loss_sup_vit: losses.sup_vit,
            loss_sup_cnn: losses.sup_cnn,
            loss_find: losses.find,
            loss_conq: losses.conq,
            loss_v2c: losses.v2c,
            loss_c2v: losses.c2v,
            pseudo_total_v2c: tv,
            pseudo_correct_v2c: cv,
            pseudo_total_c2v: tc,
            pseudo_correct_c2v: cc,
            acc_target_cnn: self.probe.accuracy(&self.state.cnn)?,
            acc_target_vit: self.probe.accuracy(&self.state.vit)?,
        })
    }

    /// Train to completion. `on_log` sees every metrics row with the state
    /// it was measured on.
    pub fn run(&mut self, mut on_log: impl FnMut(&MetricsRecord, &EcbState) -> Result<()>) -> Result<Vec<MetricsRecord>> {
        let mut history = Vec::new();
        while !self.is_done() {
            let lrs = self.lrs();
            let losses = self.step()?;
            if self.log_due(self.state.iter) {
                let rec = self.record(&losses, lrs)?;
                if !rec.losses_finite() {
                    return Err(Error::Numeric(format!("non-finite loss logged at iteration {}", rec.iter)));
                }
                on_log(&rec, &self.state)?;
                history.push(rec);
            }
        }
        Ok(history)
    }
}

/// Build, train and return the final state with its metrics history.
pub fn train(config: &EcbConfig, data: &DomainDataset) -> Result<(EcbState, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(config, data)?;
    let history = t.run(|_, _| Ok(()))?;
    Ok((t.into_state(), history))
}
