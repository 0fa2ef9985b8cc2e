use ecb_core::autodiff::{Parameter, Tape, Tensor};
use ecb_core::data::{generate_pair, DomainDataset, GenSpec, ShiftSpec};
use ecb_core::ecb::{
    apply_stage, discrepancy, loss_conq, loss_cotrain, loss_find, loss_sup, lr_schedule, step_conquering,
    step_supervised, train, ArchPair, CotrainMode, EcbConfig, EcbState, LabeledBatch, MetricsRecord, PseudoLabels,
    Sgd, Stage, Trainer,
};
use ecb_core::nn::{Branch, Encoder, Role};
use ecb_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 8;
const K: usize = 3;

/// A small conv/conv state with every parameter (biases included) drawn at
/// random, so the oracles below exercise all of them.
fn small_state(seed: u64) -> (EcbConfig, EcbState) {
    let cfg = EcbConfig {
        arch_pair: ArchPair::ConvConv,
        embed_dim: 4,
        head_hidden: 5,
        conv_channels: vec![2, 3],
        seed,
        ..EcbConfig::default()
    };
    let mut state = EcbState::new(&cfg, &cfg.geometry(1, SIDE, K)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in ecb_core::autodiff::ParamSet::params_mut(&mut state) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    (cfg, state)
}

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, 1, SIDE, SIDE], (0..n * SIDE * SIDE).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn copy_head(from: &Branch, to: &mut Branch) {
    let src: Vec<Tensor> = from.head_params().iter().map(|p| p.value.clone()).collect();
    let dst: Vec<&mut Parameter> = to.params_mut().into_iter().filter(|p| p.name().starts_with("f")).collect();
    assert_eq!(src.len(), dst.len());
    for (d, s) in dst.into_iter().zip(src) {
        d.value = s;
    }
}

fn scalar_of(tape: &Tape, v: ecb_core::autodiff::Var) -> f64 {
    tape.value(v).unwrap().item().unwrap()
}

/// Plain-loop re-implementation of the conv branch and its head.
mod oracle {
    use super::*;

    fn at(t: &Tensor, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, &d) in idx.iter().zip(t.shape()) {
            flat = flat * d + i;
        }
        t.data()[flat]
    }

    /// `[c][y][x]` planes of sample `n`.
    fn sample(x: &Tensor, n: usize) -> Vec<Vec<Vec<f64>>> {
        let (c, s) = (x.shape()[1], x.shape()[2]);
        (0..c).map(|ch| (0..s).map(|y| (0..s).map(|xx| at(x, &[n, ch, y, xx])).collect()).collect()).collect()
    }

    pub fn features(branch: &Branch, x: &Tensor, n: usize) -> Vec<f64> {
        let Encoder::Conv(enc) = &branch.encoder else { panic!("oracle covers the conv encoder only") };
        let mut h = sample(x, n);
        for st in &enc.stages {
            let (w, b) = (&st.w.value, &st.b.value);
            let (co, ci, s) = (w.shape()[0], w.shape()[1], h[0].len());
            let mut out = vec![vec![vec![0.0; s / 2]; s / 2]; co];
            for o in 0..co {
                let mut full = vec![vec![0.0; s]; s];
                for (y, row) in full.iter_mut().enumerate() {
                    for (xx, cell) in row.iter_mut().enumerate() {
                        let mut acc = b.data()[o];
                        for i in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                                        acc += at(w, &[o, i, ky, kx]) * h[i][sy as usize][sx as usize];
                                    }
                                }
                            }
                        }
                        *cell = acc.max(0.0);
                    }
                }
                for y in 0..s / 2 {
                    for xx in 0..s / 2 {
                        let quad = full[2 * y][2 * xx] + full[2 * y][2 * xx + 1] + full[2 * y + 1][2 * xx] + full[2 * y + 1][2 * xx + 1];
                        out[o][y][xx] = quad / 4.0;
                    }
                }
            }
            h = out;
        }
        let pooled: Vec<f64> = h.iter().map(|p| p.iter().flatten().sum::<f64>() / (p.len() * p.len()) as f64).collect();
        let d = enc.proj_w.shape()[1];
        (0..d)
            .map(|j| enc.proj_b.value.data()[j] + pooled.iter().enumerate().map(|(i, v)| v * at(&enc.proj_w.value, &[i, j])).sum::<f64>())
            .collect()
    }

    pub fn probs(head_of: &Branch, feat: &[f64]) -> Vec<f64> {
        let h = &head_of.head;
        let hid = h.fc1_w.shape()[1];
        let hidden: Vec<f64> = (0..hid)
            .map(|j| (h.fc1_b.value.data()[j] + feat.iter().enumerate().map(|(i, v)| v * at(&h.fc1_w.value, &[i, j])).sum::<f64>()).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..h.classes())
            .map(|k| h.fc2_b.value.data()[k] + hidden.iter().enumerate().map(|(j, v)| v * at(&h.fc2_w.value, &[j, k])).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    pub fn sup(branch: &Branch, x: &Tensor, labels: &[usize]) -> f64 {
        let n = labels.len();
        (0..n).map(|i| -probs(branch, &features(branch, x, i))[labels[i]].ln()).sum::<f64>() / n as f64
    }

    /// Heads of `vit` and `cnn` on the features of `encoder_of`.
    pub fn disc(encoder_of: &Branch, vit: &Branch, cnn: &Branch, x: &Tensor) -> f64 {
        let n = x.shape()[0];
        let mut total = 0.0;
        for i in 0..n {
            let f = features(encoder_of, x, i);
            let (p1, p2) = (probs(vit, &f), probs(cnn, &f));
            total += p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).sum::<f64>() / p1.len() as f64;
        }
        total / n as f64
    }
}

// ---- loss_sup ----

#[test]
fn sup_loss_of_an_exact_one_hot_prediction_is_zero() {
    let (_, mut state) = small_state(1);
    let head = &mut state.cnn.head;
    head.fc2_w.value = Tensor::zeros(head.fc2_w.shape());
    head.fc2_b.value = Tensor::new(vec![K], vec![0.0, 0.0, 900.0]).unwrap();
    let batch = LabeledBatch { images: images(4, 2), labels: vec![2; 4] };
    let mut tape = Tape::inference();
    let l = loss_sup(&mut tape, &state.cnn, &batch).unwrap();
    assert_eq!(scalar_of(&tape, l), 0.0);
}

#[test]
fn sup_loss_with_zero_final_layer_is_ln_k() {
    let (_, mut state) = small_state(2);
    let head = &mut state.cnn.head;
    head.fc2_w.value = Tensor::zeros(head.fc2_w.shape());
    head.fc2_b.value = Tensor::zeros(head.fc2_b.shape());
    let batch = LabeledBatch { images: images(4, 3), labels: vec![0, 1, 2, 1] };
    let mut tape = Tape::inference();
    let l = loss_sup(&mut tape, &state.cnn, &batch).unwrap();
    assert!((scalar_of(&tape, l) - (K as f64).ln()).abs() < 1e-12);
}

#[test]
fn sup_loss_matches_scalar_oracle() {
    let (_, state) = small_state(3);
    let batch = LabeledBatch { images: images(4, 4), labels: vec![2, 0, 1, 2] };
    for branch in [&state.vit, &state.cnn] {
        let mut tape = Tape::inference();
        let l = loss_sup(&mut tape, branch, &batch).unwrap();
        let expected = oracle::sup(branch, &batch.images, &batch.labels);
        assert!((scalar_of(&tape, l) - expected).abs() < 1e-12, "{} vs {expected}", scalar_of(&tape, l));
    }
}

// ---- discrepancy ----

fn disc_of(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut tape = Tape::inference();
    let p = tape.constant(Tensor::from_rows(a).unwrap());
    let q = tape.constant(Tensor::from_rows(b).unwrap());
    let d = discrepancy(&mut tape, p, q).unwrap();
    scalar_of(&tape, d)
}

#[test]
fn discrepancy_examples() {
    let p: &[f64] = &[0.4, 0.3, 0.2, 0.1];
    assert_eq!(disc_of(&[p], &[p]), 0.0);
    assert_eq!(disc_of(&[&[1.0, 0.0]], &[&[0.0, 1.0]]), 1.0);
    assert!((disc_of(&[p], &[&[0.1, 0.2, 0.3, 0.4]]) - 0.2).abs() < 1e-15);
}

#[test]
fn discrepancy_rejects_mismatched_shapes() {
    let mut tape = Tape::inference();
    let p = tape.constant(Tensor::from_rows(&[&[0.5, 0.5]]).unwrap());
    let q = tape.constant(Tensor::from_rows(&[&[0.2, 0.3, 0.5]]).unwrap());
    assert!(matches!(discrepancy(&mut tape, p, q), Err(Error::Dimension(_))));
}

// ---- Finding ----

fn labeled(n: usize, seed: u64) -> LabeledBatch {
    LabeledBatch { images: images(n, seed), labels: (0..n).map(|i| i % K).collect() }
}

#[test]
fn find_with_identical_heads_is_the_supervised_sum() {
    let (_, mut state) = small_state(4);
    let cnn = state.cnn.clone();
    copy_head(&cnn, &mut state.vit);
    let mut tape = Tape::inference();
    let t = loss_find(&mut tape, &state.vit, &state.cnn, &labeled(3, 5), &images(3, 6)).unwrap();
    assert_eq!(scalar_of(&tape, t.disc), 0.0);
    assert_eq!(scalar_of(&tape, t.total), scalar_of(&tape, t.sup_vit) + scalar_of(&tape, t.sup_cnn));
}

#[test]
fn find_matches_scalar_oracle() {
    let (_, state) = small_state(5);
    let (lab, unl) = (labeled(2, 7), images(2, 8));
    let mut tape = Tape::inference();
    let t = loss_find(&mut tape, &state.vit, &state.cnn, &lab, &unl).unwrap();
    let expected = oracle::sup(&state.vit, &lab.images, &lab.labels) + oracle::sup(&state.cnn, &lab.images, &lab.labels)
        - oracle::disc(&state.vit, &state.vit, &state.cnn, &unl);
    assert!((scalar_of(&tape, t.total) - expected).abs() < 1e-12);
}

fn disc_e1(state: &EcbState, unl: &Tensor) -> f64 {
    let mut tape = Tape::inference();
    let t = loss_find(&mut tape, &state.vit, &state.cnn, &labeled(2, 1), unl).unwrap();
    scalar_of(&tape, t.disc)
}

#[test]
fn discrepancy_ascent_step_does_not_decrease_discrepancy() {
    let sgd = Sgd { momentum: 0.0, weight_decay: 0.0 };
    for seed in 0..5 {
        let (_, mut state) = small_state(10 + seed);
        let unl = images(6, 20 + seed);
        let before = disc_e1(&state, &unl);
        apply_stage(&mut state, Stage::Finding, &sgd, 1e-3, |tape, s| {
            let t = loss_find(tape, &s.vit, &s.cnn, &labeled(2, 1), &unl)?;
            tape.neg(t.disc).map(Some)
        })
        .unwrap();
        let after = disc_e1(&state, &unl);
        assert!(after >= before - 1e-8, "seed {seed}: {before} -> {after}");
    }
}

// ---- Conquering ----

#[test]
fn conq_with_identical_heads_is_zero() {
    let (_, mut state) = small_state(6);
    let cnn = state.cnn.clone();
    copy_head(&cnn, &mut state.vit);
    let mut tape = Tape::inference();
    let l = loss_conq(&mut tape, &state.vit, &state.cnn, &images(4, 9)).unwrap();
    assert_eq!(scalar_of(&tape, l), 0.0);
}

#[test]
fn conq_matches_scalar_oracle() {
    let (_, state) = small_state(7);
    let unl = images(3, 10);
    let mut tape = Tape::inference();
    let l = loss_conq(&mut tape, &state.vit, &state.cnn, &unl).unwrap();
    let expected = oracle::disc(&state.cnn, &state.vit, &state.cnn, &unl);
    assert!((scalar_of(&tape, l) - expected).abs() < 1e-12);
}

#[test]
fn conquering_step_does_not_increase_its_loss() {
    let sgd = Sgd { momentum: 0.0, weight_decay: 0.0 };
    let conq = |s: &EcbState, x: &Tensor| {
        let mut tape = Tape::inference();
        let l = loss_conq(&mut tape, &s.vit, &s.cnn, x).unwrap();
        scalar_of(&tape, l)
    };
    for seed in 0..5 {
        let (_, mut state) = small_state(30 + seed);
        let unl = images(6, 40 + seed);
        let before = conq(&state, &unl);
        let heads = (state.vit.head.clone(), state.cnn.head.clone());
        step_conquering(&mut state, &unl, &sgd, 1e-3).unwrap();
        assert_eq!((state.vit.head.clone(), state.cnn.head.clone()), heads);
        let after = conq(&state, &unl);
        assert!(after <= before + 1e-8, "seed {seed}: {before} -> {after}");
    }
}

// ---- co-training ----

#[test]
fn gate_at_one_selects_nothing_from_a_soft_teacher() {
    let (_, state) = small_state(8);
    let (weak, strong) = (images(5, 11), images(5, 12));
    let mut tape = Tape::new();
    let c = loss_cotrain(&mut tape, &state.vit, &state.cnn, &weak, &strong, 1.0).unwrap();
    assert_eq!(c.pseudo.selected, 0);
    assert!(c.loss.is_none());
    assert_eq!(c.value(&tape).unwrap(), 0.0);
}

#[test]
fn confident_row_passes_a_lower_gate_with_its_argmax() {
    let probs = Tensor::from_rows(&[&[0.7, 0.3], &[0.45, 0.55]]).unwrap();
    let p = PseudoLabels::from_probs(&probs, 0.6);
    assert_eq!(p.labels, vec![0, 1]);
    assert_eq!(p.mask, vec![1.0, 0.0]);
    assert_eq!(p.selected, 1);
    // ties go to the lowest index
    let tie = PseudoLabels::from_probs(&Tensor::from_rows(&[&[0.5, 0.5]]).unwrap(), 0.5);
    assert_eq!((tie.labels[0], tie.selected), (0, 1));
}

#[test]
fn cotrain_matches_masked_mean_oracle() {
    let (_, state) = small_state(9);
    let (weak, strong) = (images(3, 13), images(3, 14));
    let teacher: Vec<Vec<f64>> = (0..3).map(|i| oracle::probs(&state.vit, &oracle::features(&state.vit, &weak, i))).collect();
    let mut conf: Vec<(f64, usize)> = teacher
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().copied().fold(0.0, f64::max), i))
        .collect();
    conf.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(conf[0].0 < conf[1].0, "need distinct confidences");
    let tau = (conf[0].0 + conf[1].0) / 2.0;

    let mut expected = 0.0;
    for (i, p) in teacher.iter().enumerate() {
        let (label, max) = p.iter().enumerate().fold((0, f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
        if max >= tau {
            expected -= oracle::probs(&state.cnn, &oracle::features(&state.cnn, &strong, i))[label].ln();
        }
    }
    expected /= 3.0;

    let mut tape = Tape::inference();
    let c = loss_cotrain(&mut tape, &state.vit, &state.cnn, &weak, &strong, tau).unwrap();
    assert_eq!(c.pseudo.selected, 2);
    assert!((c.value(&tape).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn cotrain_gradient_reaches_only_the_student() {
    let (_, mut state) = small_state(10);
    let (weak, strong) = (images(4, 15), images(4, 16));
    let mut tape = Tape::new();
    let c = loss_cotrain(&mut tape, &state.vit, &state.cnn, &weak, &strong, 0.0).unwrap();
    let loss = c.loss.unwrap();
    let mut all = ecb_core::autodiff::ParamSet::params_mut(&mut state);
    tape.backward(loss, &mut all).unwrap();
    for p in state.vit.params() {
        assert!(p.grad.data().iter().all(|&g| g == 0.0), "teacher {} got gradient", p.name());
    }
    assert!(state.cnn.params().iter().any(|p| p.grad.data().iter().any(|&g| g != 0.0)));
}

// ---- optimizer and schedule ----

fn param(value: &[f64], grad: &[f64]) -> Parameter {
    let mut p = Parameter::new("e2.x", Tensor::new(vec![value.len()], value.to_vec()).unwrap());
    p.grad = Tensor::new(vec![grad.len()], grad.to_vec()).unwrap();
    p
}

#[test]
fn weight_decay_alone_shrinks_by_lr_wd_p() {
    let mut p = param(&[2.0, -4.0], &[0.0, 0.0]);
    Sgd { momentum: 0.9, weight_decay: 0.5 }.step(&mut [&mut p], 0.1).unwrap();
    assert_eq!(p.value.data(), &[2.0 - 0.1 * 0.5 * 2.0, -4.0 + 0.1 * 0.5 * 4.0]);
}

#[test]
fn plain_sgd_is_gradient_descent() {
    let mut p = param(&[1.0, 3.0], &[0.5, -2.0]);
    Sgd { momentum: 0.0, weight_decay: 0.0 }.step(&mut [&mut p], 0.1).unwrap();
    assert_eq!(p.value.data(), &[1.0 - 0.05, 3.0 + 0.2]);
    assert!(p.grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn two_momentum_steps_on_a_quadratic_match_reference() {
    // f(w) = a w^2 / 2, gradient a w
    let (a, lr, m, wd) = (3.0, 0.05, 0.9, 0.01);
    let mut p = param(&[1.5], &[0.0]);
    let (mut w, mut v) = (1.5f64, 0.0f64);
    for _ in 0..2 {
        p.grad = Tensor::new(vec![1], vec![a * p.value.data()[0]]).unwrap();
        Sgd { momentum: m, weight_decay: wd }.step(&mut [&mut p], lr).unwrap();
        v = m * v + a * w + wd * w;
        w -= lr * v;
    }
    assert!((p.value.data()[0] - w).abs() < 1e-12);
    assert!((p.momentum.data()[0] - v).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_aborts_before_any_update() {
    let mut good = param(&[1.0], &[1.0]);
    let mut bad = param(&[1.0], &[f64::NAN]);
    let r = Sgd { momentum: 0.0, weight_decay: 0.0 }.step(&mut [&mut good, &mut bad], 0.1);
    assert!(matches!(r, Err(Error::Numeric(_))));
    assert_eq!(good.value.data(), &[1.0]);
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_schedule(1e-3, 1e-4, 0.75, 0), 1e-3);
    assert_eq!(lr_schedule(1e-3, 0.0, 0.75, 50_000), 1e-3);
    let lr = lr_schedule(1e-3, 1e-4, 0.75, 10_000);
    assert!((lr - 0.0005946035575013606).abs() < 1e-18, "{lr}");
}

// ---- config ----

#[test]
fn config_text_roundtrips_and_rejects_bad_input() {
    let cfg = EcbConfig { tau_vit: 0.7, cotrain_mode: CotrainMode::Vit2Cnn, conv_channels: vec![4, 6, 8], ..EcbConfig::default() };
    assert_eq!(EcbConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(EcbConfig::from_text("").unwrap(), EcbConfig::default());
    for bad in ["nonsense = 1", "tau_vit = 0.6\ntau_vit = 0.7", "tau_vit = 1.5", "lr_cnn = 0", "batch_size = 1", "seed = x"] {
        assert!(matches!(EcbConfig::from_text(bad), Err(Error::Config(_))), "{bad:?} accepted");
    }
    assert_ne!(cfg.content_hash(), EcbConfig::default().content_hash());
}

#[test]
fn stage_update_groups_partition_the_model() {
    let groups = |s: Stage| s.update_groups().to_vec();
    assert_eq!(groups(Stage::SupVit), ["e1", "f1"]);
    assert_eq!(groups(Stage::SupCnn), ["e2", "f2"]);
    assert_eq!(groups(Stage::Finding), ["f1", "f2"]);
    assert_eq!(groups(Stage::Conquering), ["e2"]);
    assert_eq!(groups(Stage::CotrainV2c), ["e2", "f2"]);
    assert_eq!(groups(Stage::CotrainC2v), ["e1", "f1"]);
}

// ---- training loop ----

fn tiny_data(seed: u64, k: usize) -> DomainDataset {
    let pair = generate_pair(&GenSpec::new(seed, 5, 60, 120, ShiftSpec::default())).unwrap();
    DomainDataset::from_pair(&pair, k, seed).unwrap()
}

fn short(warmup: usize, iters: usize) -> EcbConfig {
    EcbConfig { warmup_iters: warmup, train_iters: iters, batch_size: 8, log_interval: 2, tau_vit: 0.3, tau_cnn: 0.3, ..EcbConfig::default() }
}

#[test]
fn zero_iterations_return_the_initial_state() {
    let data = tiny_data(1, 1);
    let cfg = short(0, 0);
    let (state, history) = train(&cfg, &data).unwrap();
    assert!(history.is_empty());
    assert_eq!(state, EcbState::new(&cfg, &cfg.geometry(1, 16, 5)).unwrap());
}

#[test]
fn same_config_and_seed_give_identical_history() {
    let data = tiny_data(2, 1);
    let cfg = short(3, 5);
    let (s1, h1) = train(&cfg, &data).unwrap();
    let (s2, h2) = train(&cfg, &data).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
    let mut a = Vec::new();
    MetricsRecord::write_csv(&h1, &mut a).unwrap();
    assert_eq!(MetricsRecord::read_csv(a.as_slice()).unwrap(), h1);
    let (_, h3) = train(&EcbConfig { seed: 3, ..cfg }, &data).unwrap();
    assert_ne!(h1, h3);
}

#[test]
fn history_is_logged_at_intervals_warmup_end_and_finish() {
    let data = tiny_data(3, 0);
    let (_, history) = train(&EcbConfig { log_interval: 4, ..short(3, 4) }, &data).unwrap();
    let iters: Vec<usize> = history.iter().map(|r| r.iter).collect();
    assert_eq!(iters, [3, 4, 7]);
    assert!(history.iter().all(MetricsRecord::losses_finite));
    // warmup rows have no FTC or co-training losses
    assert_eq!((history[0].loss_find, history[0].loss_v2c), (0.0, 0.0));
}

#[test]
fn gate_closed_at_one_equals_cotraining_off() {
    let data = tiny_data(4, 1);
    let on = EcbConfig { tau_vit: 1.0, tau_cnn: 1.0, ..short(2, 6) };
    let off = EcbConfig { cotrain_mode: CotrainMode::Off, ..on.clone() };
    let (a, ha) = train(&on, &data).unwrap();
    let (b, hb) = train(&off, &data).unwrap();
    assert_eq!(a, b);
    assert!(ha.iter().all(|r| r.loss_v2c == 0.0 && r.loss_c2v == 0.0));
    assert_eq!(ha.last().unwrap().acc_target_cnn, hb.last().unwrap().acc_target_cnn);
}

#[test]
fn exploding_learning_rate_aborts_with_stage_context() {
    let data = tiny_data(5, 1);
    let cfg = EcbConfig { lr_cnn: 1e300, ..short(3, 0) };
    match train(&cfg, &data) {
        Err(e @ Error::Stage { .. }) => {
            assert!(e.is_numeric(), "{e}");
            assert!(e.to_string().contains("supervised-cnn"), "{e}");
        }
        other => panic!("expected a stage error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn unsupervised_target_setting_trains() {
    let data = tiny_data(6, 0);
    assert!(data.target_labeled.is_empty());
    let (_, history) = train(&short(2, 2), &data).unwrap();
    assert_eq!(history.last().unwrap().iter, 4);
}

/// With two identical conv branches, equal learning rates and both
/// supervised sub-steps fed the same batch, the two branches stay equal
/// through warmup, so both discrepancy terms stay exactly zero.
#[test]
fn identical_branches_keep_zero_discrepancy_through_warmup() {
    let (cfg, mut state) = small_state(11);
    let cnn = state.cnn.clone();
    for (dst, src) in state.vit.params_mut().into_iter().zip(cnn.params()) {
        assert_eq!(dst.name()[2..], src.name()[2..]);
        dst.value = src.value.clone();
    }
    let sgd = Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let unl = images(6, 50);
    for it in 0..20 {
        let batch = labeled(6, 100 + it);
        step_supervised(&mut state, Role::Vit, &batch, &sgd, 1e-2).unwrap();
        step_supervised(&mut state, Role::Cnn, &batch, &sgd, 1e-2).unwrap();
        let mut tape = Tape::inference();
        let find = loss_find(&mut tape, &state.vit, &state.cnn, &batch, &unl).unwrap();
        let conq = loss_conq(&mut tape, &state.vit, &state.cnn, &unl).unwrap();
        assert_eq!((scalar_of(&tape, find.disc), scalar_of(&tape, conq)), (0.0, 0.0), "iteration {it}");
    }
}

#[test]
fn trainer_rejects_invalid_config() {
    let data = tiny_data(7, 1);
    let bad = EcbConfig { tau_cnn: -0.1, ..short(1, 1) };
    assert!(matches!(Trainer::new(&bad, &data), Err(Error::Config(_))));
}
