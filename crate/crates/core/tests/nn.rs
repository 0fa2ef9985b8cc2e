use ecb_core::autodiff::gradcheck::{check_model, Coords};
use ecb_core::autodiff::{ParamSet, Parameter, Tape, Tensor};
use ecb_core::ecb::{EcbConfig, EcbState};
use ecb_core::nn::checkpoint::Checkpoint;
use ecb_core::nn::{Arch, Branch, Encoder, Geometry, Role};
use ecb_core::verify::{GRAD_TOLERANCE, KINK_MARGIN};
use ecb_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, 1, 16, 16], (0..n * 256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn features(branch: &Branch, x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let f = branch.forward_features(&mut tape, v).unwrap();
    tape.value(f).unwrap().clone()
}

/// Lets `check_model` perturb one branch.
#[derive(Clone)]
struct One(Branch);

impl ParamSet for One {
    fn params(&self) -> Vec<&Parameter> {
        self.0.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.params_mut()
    }
}

#[test]
fn attention_features_have_shape_n_by_d() {
    let g = Geometry::default();
    let b = Branch::new(Arch::Attn, Role::Vit, &g, 7).unwrap();
    let f = features(&b, &images(2, 1));
    assert_eq!(f.shape(), &[2, 32]);
}

#[test]
fn zero_input_through_conv_encoder_with_zero_biases_is_zero() {
    let g = Geometry::default();
    let mut b = Branch::new(Arch::Conv, Role::Cnn, &g, 7).unwrap();
    for p in b.params_mut().into_iter().filter(|p| p.name().ends_with(".b")) {
        p.value = Tensor::zeros(p.shape());
    }
    let f = features(&b, &Tensor::zeros(&[3, 1, 16, 16]));
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_geometry_is_a_dimension_error() {
    let b = Branch::new(Arch::Attn, Role::Vit, &Geometry::default(), 7).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 1, 12, 12]));
    assert!(matches!(b.forward_features(&mut tape, x), Err(Error::Dimension(_))));
}

fn encoder_gradcheck(arch: Arch, seed: u64) {
    let g = Geometry::default();
    let branch = One(Branch::new(arch, Role::Vit, &g, seed).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::new(vec![1, 32], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    // The check is only meaningful away from relu kinks, so redraw the
    // input until every pre-activation clears the margin.
    for draw in 0..200 {
        let x = images(1, seed * 1000 + draw);
        let loss = |m: &One, tape: &mut Tape| {
            let v = tape.constant(x.clone());
            let f = m.0.forward_features(tape, v)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(f, w)?;
            tape.sum(y)
        };
        let mut probe = Tape::inference();
        loss(&branch, &mut probe).unwrap();
        if probe.kink_margin() <= KINK_MARGIN {
            continue;
        }
        let encoder_only = |name: &str| name.starts_with("e1.");
        let report = check_model(&branch, encoder_only, Coords::Sample(6), &mut rng, loss).unwrap();
        assert!(report.checked >= 20);
        assert!(report.max_rel_err < GRAD_TOLERANCE, "{report:?}");
        return;
    }
    panic!("no input cleared the kink margin");
}

#[test]
fn attention_encoder_matches_finite_differences() {
    encoder_gradcheck(Arch::Attn, 11);
}

#[test]
fn conv_encoder_matches_finite_differences() {
    encoder_gradcheck(Arch::Conv, 11);
}

fn logits(branch: &Branch, feat: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let f = tape.constant(feat.clone());
    let l = branch.head.forward_logits(&mut tape, f).unwrap();
    tape.value(l).unwrap().clone()
}

#[test]
fn zero_feature_and_zero_biases_give_uniform_prediction() {
    let b = Branch::new(Arch::Conv, Role::Cnn, &Geometry::default(), 3).unwrap();
    let l = logits(&b, &Tensor::zeros(&[2, 32]));
    assert!(l.data().iter().all(|&v| v == 0.0));
    let mut tape = Tape::inference();
    let x = tape.constant(l);
    let p = tape.softmax(x).unwrap();
    assert!(tape.value(p).unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn identity_head_passes_features_through() {
    let g = Geometry { embed_dim: 2, head_hidden: 2, classes: 2, ..Geometry::default() };
    let mut b = Branch::new(Arch::Conv, Role::Cnn, &g, 3).unwrap();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    b.head.fc1_w.value = eye.clone();
    b.head.fc2_w.value = eye;
    let feat = Tensor::new(vec![2, 2], vec![0.3, 1.5, 2.0, 0.25]).unwrap();
    assert_eq!(logits(&b, &feat).data(), feat.data());
}

#[test]
fn head_matches_finite_differences() {
    let branch = One(Branch::new(Arch::Conv, Role::Cnn, &Geometry::default(), 5).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feat = Tensor::new(vec![3, 32], (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let loss = |m: &One, tape: &mut Tape| {
        let f = tape.constant(feat.clone());
        let l = m.0.head.forward_logits(tape, f)?;
        let p = tape.softmax(l)?;
        tape.cross_entropy(p, &[0, 3, 4])
    };
    let mut probe = Tape::inference();
    loss(&branch, &mut probe).unwrap();
    assert!(probe.kink_margin() > 1e-4);
    let report = check_model(&branch, |n| n.starts_with("f2."), Coords::All, &mut rng, loss).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn same_seed_gives_bit_identical_branches() {
    let g = Geometry::default();
    let a = Branch::new(Arch::Attn, Role::Vit, &g, 7).unwrap();
    let b = Branch::new(Arch::Attn, Role::Vit, &g, 7).unwrap();
    assert_eq!(a, b);
    let c = Branch::new(Arch::Attn, Role::Vit, &g, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn forward_is_pure() {
    let b = Branch::new(Arch::Attn, Role::Vit, &Geometry::default(), 7).unwrap();
    let x = images(4, 9);
    let (f1, f2) = (features(&b, &x), features(&b, &x));
    assert!(f1.data().iter().zip(f2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn conv_branch_groups_are_disjoint_and_exhaustive() {
    let b = Branch::new(Arch::Conv, Role::Cnn, &Geometry::default(), 7).unwrap();
    let enc: Vec<&str> = b.encoder_params().iter().map(|p| p.name()).collect();
    let head: Vec<&str> = b.head_params().iter().map(|p| p.name()).collect();
    assert!(enc.iter().all(|n| n.starts_with("e2.")));
    assert!(head.iter().all(|n| n.starts_with("f2.")));
    assert_eq!(enc.len() + head.len(), b.params().len());
}

/// Counting oracle for the default attention branch, from the layer list:
/// patch embedding, positional table, blocks of (layernorm, q/k/v/o
/// projections, layernorm, two-layer MLP), a final layernorm and the
/// two-layer head.
fn attention_branch_count(g: &Geometry) -> usize {
    let (c, p, d, m, h, k) = (g.channels, g.patch_size, g.embed_dim, g.mlp_hidden, g.head_hidden, g.classes);
    let tokens = (g.side / p) * (g.side / p);
    let linear = |i: usize, o: usize| i * o + o;
    let layernorm = 2 * d;
    let block = layernorm + 4 * linear(d, d) + layernorm + linear(d, m) + linear(m, d);
    let encoder = linear(c * p * p, d) + tokens * d + g.attn_blocks * block + layernorm;
    encoder + linear(d, h) + linear(h, k)
}

#[test]
fn default_attention_branch_parameter_count() {
    let g = Geometry::default();
    let b = Branch::new(Arch::Attn, Role::Vit, &g, 7).unwrap();
    assert_eq!(attention_branch_count(&g), 19_429);
    assert_eq!(b.param_count(), 19_429);
}

#[test]
fn heads_can_be_swapped_between_encoders() {
    let g = Geometry::default();
    let vit = Branch::new(Arch::Attn, Role::Vit, &g, 1).unwrap();
    let cnn = Branch::new(Arch::Conv, Role::Cnn, &g, 2).unwrap();
    let x = images(3, 4);
    let mut tape = Tape::inference();
    let v = tape.constant(x);
    let f1 = vit.forward_features(&mut tape, v).unwrap();
    let f2 = cnn.forward_features(&mut tape, v).unwrap();
    for (head, feat) in [(&cnn.head, f1), (&vit.head, f2)] {
        let l = head.forward_logits(&mut tape, feat).unwrap();
        assert_eq!(tape.shape(l).unwrap(), &[3, 5]);
    }
}

#[test]
fn encoder_variant_matches_architecture() {
    let g = Geometry::default();
    assert!(matches!(Branch::new(Arch::Attn, Role::Vit, &g, 1).unwrap().encoder, Encoder::Attn(_)));
    assert!(matches!(Branch::new(Arch::Conv, Role::Vit, &g, 1).unwrap().encoder, Encoder::Conv(_)));
}

#[test]
fn state_checkpoint_roundtrip_is_bit_exact() {
    let cfg = EcbConfig { seed: 4, ..EcbConfig::default() };
    let mut state = EcbState::new(&cfg, &cfg.geometry(1, 16, 5)).unwrap();
    state.iter = 17;
    let ckpt = state.to_checkpoint(&cfg, Default::default());
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let (restored, cfg2) = EcbState::from_checkpoint(&back).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(restored, state);
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(again, bytes);
}
