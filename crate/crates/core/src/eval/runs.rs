//! Whole-run drivers: single runs, ablations and threshold sweeps.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_pair, DomainDataset, GenSpec};
use crate::ecb::{train, ArchPair, CotrainMode, EcbConfig, EcbState, MetricsRecord};
use crate::error::{Error, Result};

/// Everything needed to reproduce one run: training config, generator
/// spec and the number of labeled target shots per class.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub config: EcbConfig,
    pub gen: GenSpec,
    pub k_shot: usize,
}

impl RunSpec {
    /// The same run with `seed` driving both data generation and training.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.config.seed = seed;
        s.gen.seed = seed;
        s
    }

    pub fn dataset(&self) -> Result<DomainDataset> {
        DomainDataset::from_pair(&generate_pair(&self.gen)?, self.k_shot, self.gen.seed)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: EcbState,
    pub history: Vec<MetricsRecord>,
    pub acc_cnn: f64,
    pub acc_vit: f64,
    pub wall_secs: f64,
}

/// Train on an existing dataset and measure both branches on its unlabeled
/// target split.
pub fn run_on(config: &EcbConfig, data: &DomainDataset) -> Result<RunOutcome> {
    let start = Instant::now();
    let (state, history) = train(config, data)?;
    let acc_cnn = super::accuracy(&state.cnn, &data.target_unlabeled)?;
    let acc_vit = super::accuracy(&state.vit, &data.target_unlabeled)?;
    Ok(RunOutcome { state, history, acc_cnn, acc_vit, wall_secs: start.elapsed().as_secs_f64() })
}

pub fn run_one(spec: &RunSpec) -> Result<RunOutcome> {
    run_on(&spec.config, &spec.dataset()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    CotrainDirection,
    ArchPair,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cotrain_direction" => Ok(AblationMode::CotrainDirection),
            "arch_pair" => Ok(AblationMode::ArchPair),
            other => Err(Error::Config(format!("unknown ablation mode {other:?} (cotrain_direction, arch_pair)"))),
        }
    }
}

impl AblationMode {
    /// `(variant name, config)` for every variant of this ablation.
    pub fn variants(self, base: &EcbConfig) -> Vec<(String, EcbConfig)> {
        match self {
            AblationMode::CotrainDirection => [CotrainMode::Both, CotrainMode::Vit2Cnn, CotrainMode::Cnn2Vit]
                .into_iter()
                .map(|m| (m.as_str().to_string(), EcbConfig { cotrain_mode: m, ..base.clone() }))
                .collect(),
            AblationMode::ArchPair => ArchPair::ALL
                .into_iter()
                .map(|a| (a.as_str().to_string(), EcbConfig { arch_pair: a, ..base.clone() }))
                .collect(),
        }
    }
}

/// One ablation result. `error` is set (and accuracies are NaN) when the
/// variant failed; siblings still run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub acc_cnn: f64,
    pub acc_vit: f64,
    pub seed: u64,
    #[serde(skip)]
    pub error: Option<String>,
}

/// Run every variant of `mode` for every seed, at most `jobs` at a time.
/// Rows come back ordered by seed, then variant.
pub fn run_ablation(mode: AblationMode, base: &RunSpec, seeds: &[u64], jobs: usize) -> Result<Vec<AblationRow>> {
    let tasks: Vec<(u64, String, EcbConfig)> = seeds
        .iter()
        .flat_map(|&seed| {
            let spec = base.with_seed(seed);
            mode.variants(&spec.config).into_iter().map(move |(name, cfg)| (seed, name, cfg))
        })
        .collect();
    let run = || {
        tasks
            .par_iter()
            .map(|(seed, variant, cfg)| {
                let spec = RunSpec { config: cfg.clone(), ..base.with_seed(*seed) };
                match run_one(&spec) {
                    Ok(o) => AblationRow { variant: variant.clone(), acc_cnn: o.acc_cnn, acc_vit: o.acc_vit, seed: *seed, error: None },
                    Err(e) => AblationRow {
                        variant: variant.clone(),
                        acc_cnn: f64::NAN,
                        acc_vit: f64::NAN,
                        seed: *seed,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    };
    Ok(pool(jobs)?.install(run))
}

/// One threshold-sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub tau_vit: f64,
    pub tau_cnn: f64,
    pub acc_cnn: f64,
    pub acc_vit: f64,
    pub seed: u64,
    #[serde(skip)]
    pub error: Option<String>,
}

impl SweepCell {
    /// Identity of a cell for resume bookkeeping.
    pub fn key(&self) -> (u64, u64, u64) {
        (self.tau_vit.to_bits(), self.tau_cnn.to_bits(), self.seed)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    pub jobs: usize,
    /// Seeds per cell; one by default.
    pub seeds: Vec<u64>,
    /// Cells already finished in an earlier invocation.
    pub completed: HashSet<(u64, u64, u64)>,
    /// Stop after this many new cells (simulates an interrupted sweep).
    pub max_cells: Option<usize>,
}

/// Every `(tau_vit, tau_cnn)` pair of `taus` for every seed, skipping
/// completed cells. `on_cell` is called once per finished cell, in
/// completion order, so callers can persist progress. Returns the newly
/// run cells in grid order.
pub fn run_threshold_sweep(
    taus: &[f64],
    base: &RunSpec,
    opts: &SweepOptions,
    on_cell: impl Fn(&SweepCell) + Sync,
) -> Result<Vec<SweepCell>> {
    if let Some(bad) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("threshold {bad} outside [0, 1]")));
    }
    let seeds = if opts.seeds.is_empty() { vec![base.config.seed] } else { opts.seeds.clone() };
    let mut todo: Vec<(f64, f64, u64)> = Vec::new();
    for &seed in &seeds {
        for &tv in taus {
            for &tc in taus {
                if !opts.completed.contains(&(tv.to_bits(), tc.to_bits(), seed)) {
                    todo.push((tv, tc, seed));
                }
            }
        }
    }
    if let Some(m) = opts.max_cells {
        todo.truncate(m);
    }
    // one dataset per seed, shared by that seed's cells
    let datasets: Vec<(u64, DomainDataset)> = seeds
        .iter()
        .filter(|s| todo.iter().any(|t| t.2 == **s))
        .map(|&s| base.with_seed(s).dataset().map(|d| (s, d)))
        .collect::<Result<_>>()?;
    let run = || {
        todo.par_iter()
            .map(|&(tau_vit, tau_cnn, seed)| {
                let data = &datasets.iter().find(|(s, _)| *s == seed).expect("generated above").1;
                let cfg = EcbConfig { tau_vit, tau_cnn, ..base.with_seed(seed).config };
                let cell = match run_on(&cfg, data) {
                    Ok(o) => SweepCell { tau_vit, tau_cnn, acc_cnn: o.acc_cnn, acc_vit: o.acc_vit, seed, error: None },
                    Err(e) => SweepCell {
                        tau_vit,
                        tau_cnn,
                        acc_cnn: f64::NAN,
                        acc_vit: f64::NAN,
                        seed,
                        error: Some(e.to_string()),
                    },
                };
                on_cell(&cell);
                cell
            })
            .collect()
    };
    Ok(pool(opts.jobs)?.install(run))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
