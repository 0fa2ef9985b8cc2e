//! Self-verification: finite-difference gradient checks of every operator
//! and composite loss, discrepancy metric properties, and stage routing.
//!
//! Used by `ecb verify` and by the integration tests.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::gradcheck::{self, Coords, GradCheck};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{generate_pair, DomainDataset, GenSpec, ShiftSpec};
use crate::ecb::{
    discrepancy, loss_conq, loss_cotrain, loss_find, loss_sup, ArchPair, CotrainMode, EcbConfig, EcbState, LabeledBatch,
    Phase, Stage, Trainer,
};
use crate::error::Result;
use crate::nn::Geometry;
use crate::rng::{self, Rng as StreamRng};

/// Analytic and numeric gradients must agree to this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Composite instances whose ReLU inputs come closer than this to zero are
/// redrawn: a finite-difference step there can straddle the kink.
pub const KINK_MARGIN: f64 = 1e-4;

/// Slack allowed on the triangle inequality.
pub const TRIANGLE_SLACK: f64 = 1e-12;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Largest relative gradient error, for gradient checks.
    pub max_rel_err: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn gradient(name: &str, instances: usize, redrawn: usize, g: &GradCheck) -> Self {
        let passed = g.max_rel_err < GRAD_TOLERANCE && g.checked > 0;
        let mut detail = format!("{} coordinates", g.checked);
        if redrawn > 0 {
            detail.push_str(&format!(", {redrawn} draws near a relu kink redrawn"));
        }
        CheckReport { name: name.to_string(), instances, max_rel_err: Some(g.max_rel_err), passed, detail }
    }

    fn property(name: &str, instances: usize, failures: usize, detail: String) -> Self {
        CheckReport { name: name.to_string(), instances, max_rel_err: None, passed: failures == 0, detail }
    }
}

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn normal(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.5, 1.5)
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 1.5);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// Reduce `y` to a scalar through fixed random weights, so every output
/// coordinate contributes to the checked gradient.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

type OpCase = Box<dyn Fn(&mut StreamRng) -> Result<GradCheck>>;

/// One gradient check of an op: `inputs` are the differentiable arguments,
/// `out_shape` the op's output shape and `f` the op itself.
fn op_check(
    rng: &mut StreamRng,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let weights = normal(rng, out_shape);
    let mut probe = rng::stream(rng.random(), "coords");
    gradcheck::check(&inputs, Coords::Sample(8), &mut probe, |tape, v| {
        let y = f(tape, v)?;
        project(tape, y, &weights)
    })
}

fn dims(rng: &mut StreamRng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    let mut cases: Vec<(&'static str, OpCase)> = Vec::new();
    cases.push((
        "matmul",
        Box::new(|r| {
            let d = dims(r, 3, 1, 5);
            let ins = vec![normal(r, &[d[0], d[1]]), normal(r, &[d[1], d[2]])];
            op_check(r, ins, &[d[0], d[2]], |t, v| t.matmul(v[0], v[1]))
        }),
    ));
    cases.push((
        "bmm",
        Box::new(|r| {
            let d = dims(r, 4, 1, 4);
            let trans = r.random_bool(0.5);
            let b_shape = if trans { [d[0], d[3], d[2]] } else { [d[0], d[2], d[3]] };
            let ins = vec![normal(r, &[d[0], d[1], d[2]]), normal(r, &b_shape)];
            op_check(r, ins, &[d[0], d[1], d[3]], move |t, v| t.bmm(v[0], v[1], trans))
        }),
    ));
    cases.push((
        "conv2d",
        Box::new(|r| {
            let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let (k, stride, pad) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(0..=1));
            let side = r.random_range(k.max(3)..=6);
            let out = (side + 2 * pad - k) / stride + 1;
            let bias = r.random_bool(0.5);
            let mut ins = vec![normal(r, &[n, c, side, side]), normal(r, &[o, c, k, k])];
            if bias {
                ins.push(normal(r, &[o]));
            }
            op_check(r, ins, &[n, o, out, out], move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
        }),
    ));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        cases.push((
            name,
            Box::new(move |r| {
                let d = dims(r, 3, 1, 4);
                let lead = r.random_range(0..=2);
                let ins = vec![normal(r, &d), normal(r, &d[lead..])];
                op_check(r, ins, &d, move |t, v| match which {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                })
            }),
        ));
    }
    cases.push((
        "scale",
        Box::new(|r| {
            let d = dims(r, 2, 1, 5);
            let f = r.random_range(-3.0..3.0);
            let x = vec![normal(r, &d)];
            op_check(r, x, &d, move |t, v| t.scale(v[0], f))
        }),
    ));
    cases.push((
        "relu",
        Box::new(|r| {
            let d = dims(r, 2, 1, 6);
            let x = vec![off_zero(r, &d)];
            op_check(r, x, &d, |t, v| t.relu(v[0]))
        }),
    ));
    cases.push((
        "gelu",
        Box::new(|r| {
            let d = dims(r, 2, 1, 6);
            let x = vec![uniform(r, &d, -4.0, 4.0)];
            op_check(r, x, &d, |t, v| t.gelu(v[0]))
        }),
    ));
    cases.push((
        "log",
        Box::new(|r| {
            let d = dims(r, 2, 1, 6);
            let x = vec![uniform(r, &d, 0.2, 3.0)];
            op_check(r, x, &d, |t, v| t.log(v[0]))
        }),
    ));
    cases.push((
        "sum",
        Box::new(|r| {
            let d = dims(r, 3, 1, 4);
            let x = vec![normal(r, &d)];
            op_check(r, x, &[], |t, v| t.sum(v[0]))
        }),
    ));
    cases.push((
        "mean",
        Box::new(|r| {
            let d = dims(r, 3, 1, 4);
            let x = vec![normal(r, &d)];
            op_check(r, x, &[], |t, v| t.mean(v[0]))
        }),
    ));
    cases.push((
        "mean_axis",
        Box::new(|r| {
            let d = dims(r, 3, 1, 4);
            let axis = r.random_range(0..3);
            let mut out = d.clone();
            out.remove(axis);
            let x = vec![normal(r, &d)];
            op_check(r, x, &out, move |t, v| t.mean_axis(v[0], axis))
        }),
    ));
    cases.push((
        "reshape",
        Box::new(|r| {
            let d = dims(r, 3, 1, 4);
            let flat = [d[0] * d[1], d[2]];
            let x = vec![normal(r, &d)];
            op_check(r, x, &flat, move |t, v| t.reshape(v[0], &flat))
        }),
    ));
    cases.push((
        "permute",
        Box::new(|r| {
            let rank = r.random_range(2..=4);
            let d = dims(r, rank, 1, 4);
            let mut axes: Vec<usize> = (0..rank).collect();
            axes.shuffle(r);
            let out: Vec<usize> = axes.iter().map(|&a| d[a]).collect();
            let x = vec![normal(r, &d)];
            op_check(r, x, &out, move |t, v| t.permute(v[0], &axes))
        }),
    ));
    cases.push((
        "softmax",
        Box::new(|r| {
            let d = dims(r, 2, 1, 6);
            let x = vec![uniform(r, &d, -4.0, 4.0)];
            op_check(r, x, &d, |t, v| t.softmax(v[0]))
        }),
    ));
    cases.push((
        "cross_entropy",
        Box::new(|r| {
            let (n, k) = (r.random_range(1..=5), r.random_range(2..=6));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let x = vec![uniform(r, &[n, k], 0.05, 1.0)];
            op_check(r, x, &[], move |t, v| t.cross_entropy(v[0], &labels))
        }),
    ));
    cases.push((
        "weighted_cross_entropy",
        Box::new(|r| {
            let (n, k) = (r.random_range(1..=5), r.random_range(2..=6));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let weights: Vec<f64> = (0..n).map(|_| if r.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
            let ins = vec![uniform(r, &[n, k], 0.05, 1.0)];
            op_check(r, ins, &[], move |t, v| t.weighted_cross_entropy(v[0], &labels, &weights, n as f64))
        }),
    ));
    cases.push((
        "abs_mean_diff",
        Box::new(|r| {
            let d = dims(r, 2, 1, 5);
            let a = normal(r, &d);
            let gap = off_zero(r, &d);
            let b = Tensor::new(d.clone(), a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect())?;
            op_check(r, vec![a, b], &[], |t, v| t.abs_mean_diff(v[0], v[1]))
        }),
    ));
    cases.push((
        "layernorm",
        Box::new(|r| {
            let (n, d) = (r.random_range(1..=4), r.random_range(2..=6));
            let ins = vec![normal(r, &[n, d]), uniform(r, &[d], 0.5, 1.5), normal(r, &[d])];
            op_check(r, ins, &[n, d], |t, v| t.layernorm(v[0], v[1], v[2]))
        }),
    ));
    cases.push((
        "avg_pool2",
        Box::new(|r| {
            let (n, c, h, w) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(2..=5), r.random_range(2..=5));
            let x = vec![normal(r, &[n, c, h, w])];
            op_check(r, x, &[n, c, h / 2, w / 2], |t, v| t.avg_pool2(v[0]))
        }),
    ));
    cases
}

/// Small geometry for the composite checks.
fn tiny_geometry() -> Geometry {
    Geometry {
        channels: 1,
        side: 8,
        classes: 3,
        embed_dim: 8,
        patch_size: 4,
        attn_blocks: 1,
        attn_heads: 2,
        mlp_hidden: 16,
        conv_channels: vec![4, 4],
        head_hidden: 8,
    }
}

fn tiny_state(seed: u64) -> Result<EcbState> {
    let cfg = EcbConfig { seed, ..EcbConfig::default() };
    EcbState::new(&cfg, &tiny_geometry())
}

fn images(rng: &mut StreamRng, n: usize) -> Tensor {
    uniform(rng, &[n, 1, 8, 8], 0.0, 1.0)
}

fn labeled(rng: &mut StreamRng, n: usize) -> LabeledBatch {
    LabeledBatch { images: images(rng, n), labels: (0..n).map(|_| rng.random_range(0..3)).collect() }
}

/// A composite check; `None` when the drawn instance sits too close to a
/// ReLU kink to be checked by finite differences.
type CompositeCase = Box<dyn Fn(&mut StreamRng) -> Result<Option<GradCheck>>>;

fn model_check(
    rng: &mut StreamRng,
    state: &EcbState,
    groups: &'static [&'static str],
    loss: impl Fn(&EcbState, &mut Tape) -> Result<Var>,
) -> Result<Option<GradCheck>> {
    let mut probe = rng::stream(rng.random(), "coords");
    let mut tape = Tape::inference();
    loss(state, &mut tape)?;
    if tape.kink_margin() < KINK_MARGIN {
        return Ok(None);
    }
    let select = |name: &str| groups.iter().any(|g| name.split('.').next() == Some(*g));
    gradcheck::check_model(state, select, Coords::Sample(3), &mut probe, loss).map(Some)
}

fn composite_cases() -> Vec<(&'static str, CompositeCase)> {
    let mut cases: Vec<(&'static str, CompositeCase)> = Vec::new();
    cases.push((
        "loss_sup (attention branch)",
        Box::new(|r| {
            let s = tiny_state(r.random())?;
            let b = labeled(r, 3);
            model_check(r, &s, &["e1", "f1"], |m, t| loss_sup(t, &m.vit, &b))
        }),
    ));
    cases.push((
        "loss_sup (conv branch)",
        Box::new(|r| {
            let s = tiny_state(r.random())?;
            let b = labeled(r, 3);
            model_check(r, &s, &["e2", "f2"], |m, t| loss_sup(t, &m.cnn, &b))
        }),
    ));
    cases.push((
        "discrepancy",
        Box::new(|r| {
            let (n, k) = (r.random_range(1..=4), r.random_range(2..=6));
            let weights = [uniform(r, &[n, k], -3.0, 3.0), uniform(r, &[n, k], -3.0, 3.0)];
            let mut probe = rng::stream(r.random(), "coords");
            gradcheck::check(&weights, Coords::All, &mut probe, |t, v| {
                let (p, q) = (t.softmax(v[0])?, t.softmax(v[1])?);
                discrepancy(t, p, q)
            })
            .map(Some)
        }),
    ));
    cases.push((
        "loss_find",
        Box::new(|r| {
            let s = tiny_state(r.random())?;
            let (b, u) = (labeled(r, 2), images(r, 3));
            model_check(r, &s, &["f1", "f2"], |m, t| Ok(loss_find(t, &m.vit, &m.cnn, &b, &u)?.total))
        }),
    ));
    cases.push((
        "loss_conq",
        Box::new(|r| {
            let s = tiny_state(r.random())?;
            let u = images(r, 3);
            model_check(r, &s, &["e2", "f1", "f2"], |m, t| loss_conq(t, &m.vit, &m.cnn, &u))
        }),
    ));
    for (name, vit_teaches) in [("loss_cotrain (vit teaches cnn)", true), ("loss_cotrain (cnn teaches vit)", false)] {
        cases.push((
            name,
            Box::new(move |r| {
                let s = tiny_state(r.random())?;
                let (w, st) = (images(r, 4), images(r, 4));
                let groups: &'static [&'static str] = if vit_teaches { &["e2", "f2"] } else { &["e1", "f1"] };
                model_check(r, &s, groups, |m, t| {
                    let (teacher, student) = if vit_teaches { (&m.vit, &m.cnn) } else { (&m.cnn, &m.vit) };
                    // gate fully open so the loss is never the constant zero
                    let c = loss_cotrain(t, teacher, student, &w, &st, 0.0)?;
                    Ok(c.loss.expect("tau 0 selects every sample"))
                })
            }),
        ));
    }
    cases
}

/// Finite-difference check of every operator and composite loss on
/// `instances` random draws each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        let mut rng = rng::stream(seed, &format!("verify.op.{name}"));
        let mut total = GradCheck::default();
        for _ in 0..instances {
            total.merge(&case(&mut rng)?);
        }
        out.push(CheckReport::gradient(name, instances, 0, &total));
    }
    for (name, case) in composite_cases() {
        let mut rng = rng::stream(seed, &format!("verify.loss.{name}"));
        let mut total = GradCheck::default();
        let (mut accepted, mut redrawn) = (0, 0);
        while accepted < instances && redrawn < 20 * instances.max(1) {
            match case(&mut rng)? {
                Some(g) => {
                    total.merge(&g);
                    accepted += 1;
                }
                None => redrawn += 1,
            }
        }
        let mut report = CheckReport::gradient(name, accepted, redrawn, &total);
        if accepted < instances {
            report.passed = false;
            report.detail.push_str(&format!(", only {accepted} of {instances} instances drawn"));
        }
        out.push(report);
    }
    Ok(out)
}

fn random_probs(rng: &mut StreamRng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = if rng.random_bool(0.1) {
            // one-hot rows exercise the boundary of the range
            let hot = rng.random_range(0..k);
            (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
        } else {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = raw.iter().sum::<f64>().max(1e-300);
            raw.iter().map(|v| v / s).collect()
        };
        data.extend(row);
    }
    Tensor::new(vec![n, k], data).expect("sized")
}

fn disc_value(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(p.clone()), tape.constant(q.clone()));
    let d = discrepancy(&mut tape, a, b)?;
    tape.value(d)?.item()
}

/// Range, symmetry, identity and triangle inequality of the discrepancy on
/// `trials` random probability triples.
pub fn discrepancy_suite(trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = rng::stream(seed, "verify.discrepancy");
    let mut fails: BTreeMap<&str, usize> = BTreeMap::new();
    let mut worst_triangle = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=8));
        let (p, q, r) = (random_probs(&mut rng, n, k), random_probs(&mut rng, n, k), random_probs(&mut rng, n, k));
        let (pq, qp, qr, pr) = (disc_value(&p, &q)?, disc_value(&q, &p)?, disc_value(&q, &r)?, disc_value(&p, &r)?);
        let pp = disc_value(&p, &p)?;
        *fails.entry("range").or_default() += [pq, qr, pr].iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        *fails.entry("symmetry").or_default() += usize::from(pq.to_bits() != qp.to_bits());
        *fails.entry("identity").or_default() += usize::from(pp != 0.0);
        let excess = pr - (pq + qr);
        worst_triangle = worst_triangle.max(excess);
        *fails.entry("triangle").or_default() += usize::from(excess > TRIANGLE_SLACK);
    }
    Ok(fails
        .into_iter()
        .map(|(prop, f)| {
            let detail = if prop == "triangle" {
                format!("{f} violations, worst excess {worst_triangle:.3e}")
            } else {
                format!("{f} violations")
            };
            CheckReport::property(&format!("discrepancy {prop}"), trials, f, detail)
        })
        .collect())
}

/// Bit patterns of every parameter value and momentum buffer, by name.
pub type Snapshot = BTreeMap<String, (Vec<u64>, Vec<u64>)>;

pub fn snapshot(state: &EcbState) -> Snapshot {
    use crate::autodiff::ParamSet;
    state
        .params()
        .into_iter()
        .map(|p| {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect();
            (p.name().to_string(), (bits(&p.value), bits(&p.momentum)))
        })
        .collect()
}

/// Group of a parameter name (`e1.block0...` -> `e1`).
fn group(name: &str) -> &str {
    name.split('.').next().unwrap_or("")
}

/// A small dataset for routing and smoke checks.
pub fn tiny_dataset(seed: u64) -> Result<DomainDataset> {
    let pair = generate_pair(&GenSpec::new(seed, 5, 60, 120, ShiftSpec::default()))?;
    DomainDataset::from_pair(&pair, 1, seed)
}

/// Train `steps` full iterations (no warmup, gates open, both co-training
/// directions) and check after every sub-step that parameters and momentum
/// outside its update groups are bitwise unchanged, and that the stage did
/// move something inside them.
pub fn routing_suite(steps: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let data = tiny_dataset(seed)?;
    let cfg = EcbConfig {
        seed,
        warmup_iters: 0,
        train_iters: steps,
        batch_size: 8,
        tau_vit: 0.0,
        tau_cnn: 0.0,
        cotrain_mode: CotrainMode::Both,
        arch_pair: ArchPair::AttnConv,
        log_interval: steps.max(1),
        ..EcbConfig::default()
    };
    let mut leaks: HashMap<Stage, (usize, usize, Vec<String>)> = HashMap::new();
    {
        let mut before: Option<Snapshot> = None;
        let mut trainer = Trainer::new(&cfg, &data)?;
        trainer.set_observer(|ev| match ev.phase {
            Phase::Before => before = Some(snapshot(ev.state)),
            Phase::After => {
                let after = snapshot(ev.state);
                let prev = before.take().expect("before precedes after");
                let allowed = ev.stage.update_groups();
                let entry = leaks.entry(ev.stage).or_default();
                entry.0 += 1;
                let mut moved = false;
                for (name, vals) in &after {
                    let changed = prev.get(name) != Some(vals);
                    if allowed.contains(&group(name)) {
                        moved |= changed;
                    } else if changed && entry.2.len() < 5 {
                        entry.2.push(format!("{name} @ iter {}", ev.iter));
                    }
                    if changed && !allowed.contains(&group(name)) {
                        entry.1 += 1;
                    }
                }
                if !moved {
                    entry.2.push(format!("no update inside {allowed:?} @ iter {}", ev.iter));
                    entry.1 += 1;
                }
            }
        });
        trainer.run(|_, _| Ok(()))?;
    }
    Ok(Stage::ALL
        .iter()
        .map(|stage| {
            let (runs, bad, examples) = leaks.remove(stage).unwrap_or_default();
            let detail = if bad == 0 {
                format!("updates confined to {:?}", stage.update_groups())
            } else {
                format!("{bad} violations, e.g. {}", examples.join(", "))
            };
            CheckReport::property(&format!("routing {}", stage.name()), runs, bad + usize::from(runs == 0), detail)
        })
        .collect())
}

fn group_values(state: &EcbState, groups: &[&str]) -> Vec<f64> {
    use crate::autodiff::ParamSet;
    state.params().into_iter().filter(|p| groups.contains(&p.group())).flat_map(|p| p.value.data().to_vec()).collect()
}

fn group_grads(state: &EcbState, groups: &[&str]) -> Vec<f64> {
    use crate::autodiff::ParamSet;
    state.params().into_iter().filter(|p| groups.contains(&p.group())).flat_map(|p| p.grad.data().to_vec()).collect()
}

fn delta(after: &EcbState, before: &[f64], groups: &[&str]) -> Vec<f64> {
    group_values(after, groups).iter().zip(before).map(|(a, b)| a - b).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of the discrepancy with respect to `groups`. `through_cnn`
/// selects the E2 features (Conquering) instead of the E1 features (Finding).
fn disc_grad(state: &EcbState, unlabeled: &Tensor, groups: &[&str], through_cnn: bool) -> Result<Vec<f64>> {
    let mut work = state.clone();
    let mut tape = Tape::with_groups(groups);
    let x = tape.constant(unlabeled.clone());
    let enc = if through_cnn { &work.cnn } else { &work.vit };
    let feats = enc.forward_features(&mut tape, x)?;
    let l1 = work.vit.head.forward_logits(&mut tape, feats)?;
    let l2 = work.cnn.head.forward_logits(&mut tape, feats)?;
    let (p1, p2) = (tape.softmax(l1)?, tape.softmax(l2)?);
    let d = discrepancy(&mut tape, p1, p2)?;
    let mut params = work.group_params_mut(groups);
    params.iter_mut().for_each(|p| p.zero_grad());
    tape.backward(d, &mut params)?;
    Ok(group_grads(&work, groups))
}

/// Sign of the Finding and Conquering updates relative to the discrepancy
/// gradient on `states` random models with frozen batches. Finding must
/// ascend the discrepancy in {F1, F2}: its update minus the update of the
/// supervised terms alone has a nonnegative inner product with the
/// discrepancy gradient. Conquering must descend it in E2.
pub fn sign_suite(states: usize, seed: u64, tolerance: f64) -> Result<Vec<CheckReport>> {
    let sgd = crate::ecb::Sgd { momentum: 0.0, weight_decay: 0.0 };
    let lr = 0.1;
    let mut rng = rng::stream(seed, "verify.sign");
    let (mut find_bad, mut conq_bad) = (0, 0);
    let (mut find_min, mut conq_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..states {
        let state = tiny_state(rng.random())?;
        let lab = labeled(&mut rng, 4);
        let unl = images(&mut rng, 6);

        let heads: &[&str] = &["f1", "f2"];
        let start = group_values(&state, heads);
        let mut found = state.clone();
        crate::ecb::step_finding(&mut found, &lab, &unl, &sgd, lr)?;
        let mut sup_only = state.clone();
        crate::ecb::apply_stage(&mut sup_only, Stage::Finding, &sgd, lr, |tape, s| {
            let a = loss_sup(tape, &s.vit, &lab)?;
            let b = loss_sup(tape, &s.cnn, &lab)?;
            Ok(Some(tape.add(a, b)?))
        })?;
        let from_disc: Vec<f64> =
            delta(&found, &start, heads).iter().zip(delta(&sup_only, &start, heads)).map(|(f, s)| f - s).collect();
        let ip = dot(&from_disc, &disc_grad(&state, &unl, heads, false)?);
        find_min = find_min.min(ip);
        find_bad += usize::from(ip < -tolerance);

        let enc: &[&str] = &["e2"];
        let start = group_values(&state, enc);
        let mut conquered = state.clone();
        crate::ecb::step_conquering(&mut conquered, &unl, &sgd, lr)?;
        let ip = dot(&delta(&conquered, &start, enc), &disc_grad(&state, &unl, enc, true)?);
        conq_max = conq_max.max(ip);
        conq_bad += usize::from(ip > tolerance);
    }
    Ok(vec![
        CheckReport::property(
            "finding ascends discrepancy",
            states,
            find_bad,
            format!("{find_bad} violations, min inner product {find_min:.3e}"),
        ),
        CheckReport::property(
            "conquering descends discrepancy",
            states,
            conq_bad,
            format!("{conq_bad} violations, max inner product {conq_max:.3e}"),
        ),
    ])
}

/// Every check `ecb verify` runs, with the sizes the acceptance suite uses.
pub fn full_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut all = gradient_suite(20, seed)?;
    all.extend(discrepancy_suite(10_000, seed)?);
    all.extend(sign_suite(20, seed, 1e-10)?);
    all.extend(routing_suite(50, seed)?);
    Ok(all)
}
