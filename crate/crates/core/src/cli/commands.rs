use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{json, Value};

use ecb_core::autodiff::fault;
use ecb_core::data::{write_pgm, DomainDataset, GeneratedPair, generate_pair};
use ecb_core::ecb::{train as train_run, CotrainMode, EcbConfig, EcbState, MetricsRecord, Trainer};
use ecb_core::eval::{self, run_ablation, run_threshold_sweep, AblationMode, AblationRow, RunSpec, SweepCell, SweepOptions};
use ecb_core::nn::checkpoint::Checkpoint;
use ecb_core::verify::{self, CheckReport};
use ecb_core::Error;

use super::files::{create_dir, ensure_parent, read_json, sha256_file, unix_now, write_atomic, write_csv, write_json};
use super::{out_root, AblateArgs, CliError, EvalArgs, GenDataArgs, RunGrid, SweepArgs, TrainArgs, VerifyArgs};

type CmdResult = Result<(), CliError>;

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

/// Config as a JSON object of its text fields.
fn config_json(cfg: &EcbConfig) -> Value {
    let map: serde_json::Map<String, Value> = cfg
        .to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
        .collect();
    Value::Object(map)
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let spec = a.shape.spec(a.seed)?;
    let out = a.out.unwrap_or_else(|| out_root().join("data").join(format!("seed{}.ecbd", a.seed)));
    let pair = generate_pair(&spec)?;
    ensure_parent(&out)?;
    pair.save(&out)?;
    if let Some(path) = &a.preview {
        let per_domain = spec.classes * 2;
        let images: Vec<_> =
            pair.source.iter().take(per_domain).chain(pair.target.iter().take(per_domain)).map(|s| &s.image).collect();
        ensure_parent(path)?;
        write_pgm(path, &images, per_domain)?;
    }
    print_json(&json!({
        "out": out,
        "sha256": sha256_file(&out)?,
        "classes": spec.classes,
        "n_source": pair.source.len(),
        "n_target": pair.target.len(),
        "seed": spec.seed,
        "shift": to_value(&spec.shift),
    }));
    Ok(())
}

fn write_metrics(path: &Path, history: &[MetricsRecord]) -> Result<(), Error> {
    let mut bytes = Vec::new();
    MetricsRecord::write_csv(history, &mut bytes)?;
    write_atomic(path, &bytes)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = a.config.resolve()?;
    let pair = GeneratedPair::load(&a.data)?;
    let split_seed = pair.spec.seed;
    let data = DomainDataset::from_pair(&pair, a.k_shot, split_seed)?;
    if a.gate_smoke {
        return gate_smoke(&cfg, &data);
    }
    let dir = a.out.unwrap_or_else(|| out_root().join("train").join(&cfg.content_hash()[..12]));
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;

    let data_hash = sha256_file(&a.data)?;
    let mut manifest = json!({
        "config": config_json(&cfg),
        "config_hash": cfg.content_hash(),
        "data": {
            "path": a.data,
            "sha256": data_hash,
            "spec": to_value(&pair.spec),
        },
        "k_shot": a.k_shot,
        "split_seed": split_seed,
        "out_dir": dir,
        "started_unix": unix_now(),
        "finished_unix": Value::Null,
        "status": "running",
    });
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let meta: BTreeMap<String, String> = [
        ("k_shot".to_string(), a.k_shot.to_string()),
        ("split_seed".to_string(), split_seed.to_string()),
        ("data_seed".to_string(), pair.spec.seed.to_string()),
        ("data_sha256".to_string(), data_hash),
    ]
    .into();
    let start = Instant::now();
    let metrics_path = dir.join("metrics.csv");
    let mut logged: Vec<MetricsRecord> = Vec::new();
    let outcome = Trainer::new(&cfg, &data).and_then(|mut trainer| {
        let history = trainer.run(|rec, state| {
            logged.push(rec.clone());
            write_metrics(&metrics_path, &logged)?;
            state.to_checkpoint(&cfg, meta.clone()).save(&ckpt_dir.join(format!("iter_{:06}.ckpt", rec.iter)))?;
            eprintln!(
                "iter {:>6}  acc cnn {:6.2} vit {:6.2}  pseudo v2c {}/{}  {:.0}s",
                rec.iter,
                rec.acc_target_cnn,
                rec.acc_target_vit,
                rec.pseudo_correct_v2c,
                rec.pseudo_total_v2c,
                start.elapsed().as_secs_f64()
            );
            Ok(())
        })?;
        Ok((trainer.into_state(), history))
    });
    let (state, history) = match outcome {
        Ok(v) => v,
        Err(e) => {
            manifest["status"] = json!(format!("failed: {e}"));
            manifest["finished_unix"] = json!(unix_now());
            write_json(&manifest_path, &manifest)?;
            return Err(e.into());
        }
    };
    write_metrics(&metrics_path, &history)?;
    state.to_checkpoint(&cfg, meta).save(&dir.join("final.ckpt"))?;
    let wall = start.elapsed().as_secs_f64();
    let last = history.last();
    let summary = json!({
        "config": config_json(&cfg),
        "config_hash": cfg.content_hash(),
        "iterations": state.iter,
        "acc_target_cnn": last.map(|r| r.acc_target_cnn),
        "acc_target_vit": last.map(|r| r.acc_target_vit),
        "wall_secs": wall,
        "out_dir": dir,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    manifest["status"] = json!("completed");
    manifest["finished_unix"] = json!(unix_now());
    write_json(&manifest_path, &manifest)?;
    print_json(&summary);
    Ok(())
}

/// Both thresholds at 1.0 must make co-training a no-op.
fn gate_smoke(cfg: &EcbConfig, data: &DomainDataset) -> CmdResult {
    let gated = EcbConfig { tau_vit: 1.0, tau_cnn: 1.0, cotrain_mode: CotrainMode::Both, ..cfg.clone() };
    let off = EcbConfig { cotrain_mode: CotrainMode::Off, ..cfg.clone() };
    let (a, _) = train_run(&gated, data)?;
    let (b, _) = train_run(&off, data)?;
    let (sa, sb) = (verify::snapshot(&a), verify::snapshot(&b));
    let differing: Vec<&String> = sa.iter().filter(|(k, v)| sb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    print_json(&json!({
        "gate_smoke": differing.is_empty(),
        "iterations": cfg.total_iters(),
        "differing_parameters": differing,
    }));
    if differing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(format!("gate property: {} parameters differ", differing.len())))
    }
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (state, _) = EcbState::from_checkpoint(&ckpt)?;
    let meta = &ckpt.header.meta;
    let pair = GeneratedPair::load(&a.data)?;
    let g = &ckpt.header.geometry;
    let spec = &pair.spec;
    if (g.channels, g.side, g.classes) != (spec.channels, spec.side, spec.classes) {
        return Err(Error::Dimension(format!(
            "checkpoint expects {}x{}x{} images over {} classes, dataset has {}x{}x{} over {}",
            g.channels, g.side, g.side, g.classes, spec.channels, spec.side, spec.side, spec.classes
        ))
        .into());
    }
    let parse_meta = |key: &str| -> Result<Option<u64>, Error> {
        meta.get(key)
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad {key} metadata {v:?}"))))
            .transpose()
    };
    let k_shot = match (a.k_shot, parse_meta("k_shot")?) {
        (Some(k), _) => k,
        (None, Some(k)) => k as usize,
        (None, None) => return Err(Error::Config("checkpoint records no k_shot; pass --k-shot".into()).into()),
    };
    let split_seed = parse_meta("split_seed")?.unwrap_or(spec.seed);
    let data = DomainDataset::from_pair(&pair, k_shot, split_seed)?;
    let branch = match a.branch.as_str() {
        "cnn" => &state.cnn,
        "vit" => &state.vit,
        other => return Err(Error::Config(format!("unknown branch {other:?} (cnn, vit)")).into()),
    };
    let (n, acc) = match a.split.as_str() {
        "target-unlabeled" => (data.target_unlabeled.len(), eval::accuracy(branch, &data.target_unlabeled)?),
        "target-labeled" => (data.target_labeled.len(), eval::accuracy_labeled(branch, &data.target_labeled)?),
        "source" => (data.source.len(), eval::accuracy_labeled(branch, &data.source)?),
        other => {
            return Err(Error::Config(format!("unknown split {other:?} (target-unlabeled, target-labeled, source)")).into())
        }
    };
    print_json(&json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "branch": a.branch,
        "split": a.split,
        "k_shot": k_shot,
        "n": n,
        "accuracy": acc,
    }));
    Ok(())
}

fn run_spec(grid: &RunGrid) -> Result<RunSpec, Error> {
    let config = grid.config.resolve()?;
    let gen = grid.shape.spec(config.seed)?;
    Ok(RunSpec { config, gen, k_shot: grid.k_shot })
}

fn grid_dir(grid: &RunGrid, kind: &str, base: &RunSpec) -> PathBuf {
    grid.out.clone().unwrap_or_else(|| out_root().join(kind).join(&base.config.content_hash()[..12]))
}

/// Identity of a sweep: a resumed sweep must match it exactly.
fn sweep_identity(base: &RunSpec) -> Value {
    json!({
        "config_hash": base.config.content_hash(),
        "data": {
            "classes": base.gen.classes,
            "n_source": base.gen.n_source,
            "n_target": base.gen.n_target,
            "shift": to_value(&base.gen.shift),
        },
        "k_shot": base.k_shot,
    })
}

#[derive(serde::Serialize)]
struct LongRow {
    tau_vit: f64,
    tau_cnn: f64,
    seed: u64,
    branch: &'static str,
    accuracy: f64,
}

fn write_sweep_outputs(dir: &Path, cells: &[SweepCell]) -> Result<(), Error> {
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| (a.seed, a.tau_vit, a.tau_cnn).partial_cmp(&(b.seed, b.tau_vit, b.tau_cnn)).expect("finite taus"));
    write_csv(&dir.join("sweep.csv"), &sorted)?;
    let long: Vec<LongRow> = sorted
        .iter()
        .flat_map(|c| {
            [("cnn", c.acc_cnn), ("vit", c.acc_vit)].map(|(branch, accuracy)| LongRow {
                tau_vit: c.tau_vit,
                tau_cnn: c.tau_cnn,
                seed: c.seed,
                branch,
                accuracy,
            })
        })
        .collect();
    write_csv(&dir.join("sweep_long.csv"), &long)
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let base = run_spec(&a.grid)?;
    let dir = grid_dir(&a.grid, "sweep", &base);
    create_dir(&dir)?;
    let manifest_path = dir.join("manifest.json");
    let identity = sweep_identity(&base);
    let mut prior: Vec<SweepCell> = Vec::new();
    let mut started = unix_now();
    if manifest_path.exists() {
        let old = read_json(&manifest_path)?;
        if old.get("identity") != Some(&identity) {
            return Err(Error::Config(format!("{} holds a different sweep", dir.display())).into());
        }
        prior = serde_json::from_value(old["cells"].clone())
            .map_err(|e| Error::Format(format!("{}: cells: {e}", manifest_path.display())))?;
        started = old["started_unix"].as_u64().unwrap_or(started);
    }
    let completed: HashSet<_> = prior.iter().map(SweepCell::key).collect();
    let mut skipped = 0;
    for &seed in &a.seeds {
        for &tv in &a.tau_list {
            for &tc in &a.tau_list {
                skipped += usize::from(completed.contains(&(tv.to_bits(), tc.to_bits(), seed)));
            }
        }
    }
    let opts = SweepOptions { jobs: a.grid.jobs, seeds: a.seeds.clone(), completed, max_cells: a.max_cells };

    let manifest = |cells: &[SweepCell]| {
        json!({
            "kind": "sweep",
            "identity": identity,
            "config": config_json(&base.config),
            "tau_list": a.tau_list,
            "seeds": a.seeds,
            "started_unix": started,
            "updated_unix": unix_now(),
            "cells": to_value(&cells),
        })
    };
    write_json(&manifest_path, &manifest(&prior))?;
    let done = Mutex::new(prior);
    let write_error = Mutex::new(None);
    let fresh = run_threshold_sweep(&a.tau_list, &base, &opts, |cell| {
        match &cell.error {
            Some(e) => eprintln!("cell tau_vit={} tau_cnn={} seed={} failed: {e}", cell.tau_vit, cell.tau_cnn, cell.seed),
            None => {
                eprintln!(
                    "cell tau_vit={} tau_cnn={} seed={}: cnn {:.2} vit {:.2}",
                    cell.tau_vit, cell.tau_cnn, cell.seed, cell.acc_cnn, cell.acc_vit
                );
                let mut cells = done.lock().expect("no panics while held");
                cells.push(cell.clone());
                let saved = write_json(&manifest_path, &manifest(&cells)).and_then(|_| write_sweep_outputs(&dir, &cells));
                if let Err(e) = saved {
                    *write_error.lock().expect("no panics while held") = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = write_error.into_inner().expect("no panics while held") {
        return Err(e.into());
    }
    let cells = done.into_inner().expect("no panics while held");
    write_sweep_outputs(&dir, &cells)?;
    write_json(&manifest_path, &manifest(&cells))?;
    let failed = fresh.iter().filter(|c| c.error.is_some()).count();
    print_json(&json!({
        "out_dir": dir,
        "cells_completed": cells.len(),
        "cells_run": fresh.len(),
        "cells_skipped": skipped,
        "cells_failed": failed,
    }));
    if failed > 0 {
        return Err(Error::Data(format!("{failed} sweep cells failed; rerun to retry them")).into());
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let mode: AblationMode = a.mode.parse()?;
    let base = run_spec(&a.grid)?;
    let dir = grid_dir(&a.grid, &format!("ablate-{}", a.mode), &base);
    create_dir(&dir)?;
    let start = Instant::now();
    let rows: Vec<AblationRow> = run_ablation(mode, &base, &a.seeds, a.grid.jobs)?;
    write_csv(&dir.join("ablation.csv"), &rows)?;
    let mut medians = serde_json::Map::new();
    for (variant, _) in mode.variants(&base.config) {
        let of = |f: fn(&AblationRow) -> f64| median(rows.iter().filter(|r| r.variant == variant).map(f).collect());
        medians.insert(variant.clone(), json!({ "acc_cnn": of(|r| r.acc_cnn), "acc_vit": of(|r| r.acc_vit) }));
    }
    let failures: Vec<Value> = rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| json!({ "variant": r.variant, "seed": r.seed, "error": e })))
        .collect();
    let summary = json!({
        "mode": a.mode,
        "config": config_json(&base.config),
        "config_hash": base.config.content_hash(),
        "seeds": a.seeds,
        "medians": medians,
        "failures": failures,
        "wall_secs": start.elapsed().as_secs_f64(),
    });
    write_json(&dir.join("manifest.json"), &summary)?;
    print_json(&summary);
    if !failures.is_empty() {
        return Err(Error::Data(format!("{} ablation runs failed", failures.len())).into());
    }
    Ok(())
}

fn report_line(r: &CheckReport) -> String {
    let err = r.max_rel_err.map(|e| format!("{e:.2e}")).unwrap_or_else(|| "-".into());
    format!(
        "{:<4} {:<34} {:>6} {:>10}  {}",
        if r.passed { "ok" } else { "FAIL" },
        r.name,
        r.instances,
        err,
        r.detail
    )
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    match a.inject_fault.as_deref() {
        None => {}
        Some("discrepancy-sign") => fault::set_flip_abs_diff_sign(true),
        Some(other) => return Err(Error::Config(format!("unknown fault {other:?} (discrepancy-sign)")).into()),
    }
    let start = Instant::now();
    let reports = verify::full_suite(a.seed)?;
    println!("{:<4} {:<34} {:>6} {:>10}  detail", "", "check", "n", "max rel err");
    for r in &reports {
        println!("{}", report_line(r));
    }
    let wall = start.elapsed().as_secs_f64();
    println!("{} checks in {wall:.1}s", reports.len());
    if let Some(path) = &a.json {
        let rows: Vec<Value> = reports
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "instances": r.instances,
                    "max_rel_err": r.max_rel_err,
                    "passed": r.passed,
                    "detail": r.detail,
                })
            })
            .collect();
        ensure_parent(path)?;
        write_json(path, &json!({ "seed": a.seed, "wall_secs": wall, "checks": rows }))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
