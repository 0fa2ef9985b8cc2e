//! `ecb` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, config, data or
//! I/O error, 3 numeric abort.

mod commands;
mod files;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ecb_core::data::{GenSpec, ShiftSpec};
use ecb_core::ecb::{ArchPair, CotrainMode, EcbConfig};
use ecb_core::Error;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "ECB_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "ecb", version, about = "Hybrid attention/convolution domain adaptation on synthetic glyphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a source/target dataset container.
    GenData(GenDataArgs),
    /// Train one run into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Grid over (tau_vit, tau_cnn), resumable at cell granularity.
    Sweep(SweepArgs),
    /// Co-training direction or architecture-pair ablation.
    Ablate(AblateArgs),
    /// Gradient checks, discrepancy properties and stage routing.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct DataShape {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    n_src: usize,
    #[arg(long, default_value_t = 1000)]
    n_tgt: usize,
    /// `default` or `identity`.
    #[arg(long, default_value = "default")]
    shift_preset: String,
}

impl DataShape {
    fn spec(&self, seed: u64) -> Result<GenSpec, Error> {
        Ok(GenSpec::new(seed, self.classes, self.n_src, self.n_tgt, ShiftSpec::preset(&self.shift_preset)?))
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    shape: DataShape,
    /// Output file; defaults to `$ECB_OUT_ROOT/data/seed<seed>.ecbd`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a PGM contact sheet of the first source and target images.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk` (defaults) or `published` (published learning rates).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override one config key, e.g. `--set train_iters=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    cotrain_mode: Option<CotrainMode>,
    #[arg(long)]
    arch_pair: Option<ArchPair>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<EcbConfig, Error> {
        let mut cfg = match self.preset.as_str() {
            "desk" => EcbConfig::default(),
            "published" => EcbConfig::published(),
            other => return Err(Error::Config(format!("unknown preset {other:?} (desk, published)"))),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.overrides {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(m) = self.cotrain_mode {
            cfg.cotrain_mode = m;
        }
        if let Some(a) = self.arch_pair {
            cfg.arch_pair = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset container from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Labeled target samples per class; 0 is the unsupervised setting.
    #[arg(long, default_value_t = 3)]
    k_shot: usize,
    /// Run directory; defaults to `$ECB_OUT_ROOT/train/<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Instead of a normal run, check that both thresholds at 1.0 give
    /// bit-identical parameters to co-training off.
    #[arg(long)]
    gate_smoke: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `cnn` (the deployed predictor) or `vit`.
    #[arg(long, default_value = "cnn")]
    branch: String,
    /// `target-unlabeled`, `target-labeled` or `source`.
    #[arg(long, default_value = "target-unlabeled")]
    split: String,
    /// Override the k-shot split recorded in the checkpoint.
    #[arg(long)]
    k_shot: Option<usize>,
}

#[derive(Debug, Args)]
struct RunGrid {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    shape: DataShape,
    #[arg(long, default_value_t = 3)]
    k_shot: usize,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    grid: RunGrid,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8,0.85,0.9,0.95")]
    tau_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Stop after this many new cells; rerun to continue.
    #[arg(long)]
    max_cells: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    grid: RunGrid,
    /// `cotrain_direction` or `arch_pair`.
    #[arg(long)]
    mode: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Deliberately break an operator to show the suite catches it.
    /// Supported: `discrepancy-sign`.
    #[arg(long)]
    inject_fault: Option<String>,
    /// Write the report as JSON here as well.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            CliError::Verify(_) => 1,
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
