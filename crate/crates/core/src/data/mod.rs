//! Synthetic two-domain glyph data, k-shot splitting and augmentation.
//!
//! Source images are rendered class glyphs; target images come from the same
//! renderer followed by a [`ShiftSpec`]. Ground-truth labels of the unlabeled
//! target split are kept behind [`EvalOnly`] so training code cannot use them
//! without being caught by the read audit.

pub mod augment;
mod container;
mod glyph;
mod image;

use std::cell::Cell;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use container::{write_pgm, DATA_MAGIC};
pub use glyph::{render_glyph, GlyphPose, ShiftSpec, GLYPH_CLASSES, GLYPH_NAMES};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One labeled image, `[c, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub domain: Domain,
}

thread_local! {
    static EVAL_DEPTH: Cell<usize> = const { Cell::new(0) };
    static UNSCOPED_READS: Cell<u64> = const { Cell::new(0) };
}

/// A value that only evaluation code may read.
///
/// Reads outside [`eval_scope`] still succeed but are counted per thread;
/// tests assert that training performs none.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct EvalOnly<T>(T);

impl<T: Copy> EvalOnly<T> {
    pub fn new(value: T) -> Self {
        EvalOnly(value)
    }

    pub fn read(&self) -> T {
        if EVAL_DEPTH.with(Cell::get) == 0 {
            UNSCOPED_READS.with(|c| c.set(c.get() + 1));
        }
        self.0
    }
}

impl<T> std::fmt::Debug for EvalOnly<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EvalOnly(..)")
    }
}

/// Run `f` with eval-only reads permitted on this thread.
pub fn eval_scope<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            EVAL_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    EVAL_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

/// Eval-only reads made outside [`eval_scope`] on this thread so far.
pub fn unscoped_label_reads() -> u64 {
    UNSCOPED_READS.with(Cell::get)
}

/// A target image whose label is retained for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub image: Tensor,
    pub label: EvalOnly<usize>,
}

/// Generator settings recorded alongside a generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub channels: usize,
    pub side: usize,
    pub shift: ShiftSpec,
}

impl GenSpec {
    pub fn new(seed: u64, classes: usize, n_source: usize, n_target: usize, shift: ShiftSpec) -> Self {
        GenSpec { seed, classes, n_source, n_target, channels: 1, side: 16, shift }
    }
}

/// Source and (not yet split) target samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPair {
    pub spec: GenSpec,
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

/// Render a balanced source set and a shifted target set, reproducibly from
/// `spec.seed`.
pub fn generate_pair(spec: &GenSpec) -> Result<GeneratedPair> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.classes > GLYPH_CLASSES {
        return Err(Error::Config(format!(
            "{} classes requested but only {GLYPH_CLASSES} glyphs are built in",
            spec.classes
        )));
    }
    if spec.n_source < spec.classes || spec.n_target < spec.classes {
        return Err(Error::Config(format!(
            "split sizes {} / {} must be at least the class count {}",
            spec.n_source, spec.n_target, spec.classes
        )));
    }
    if spec.channels == 0 || spec.side < 4 {
        return Err(Error::Config(format!("image geometry {}x{}x{} too small", spec.channels, spec.side, spec.side)));
    }
    spec.shift.validate()?;
    let render = |n: usize, domain: Domain| {
        let mut rng = rng::stream(spec.seed, if domain == Domain::Source { "gen.source" } else { "gen.target" });
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .map(|label| {
                let pose = GlyphPose::sample(spec.side, &mut rng);
                let plane = render_glyph(label, &pose, spec.side);
                let mut img: Vec<f64> = plane.iter().copied().cycle().take(plane.len() * spec.channels).collect();
                if domain == Domain::Target {
                    spec.shift.apply(&mut img, spec.channels, spec.side, &mut rng);
                }
                let image = Tensor::new(vec![spec.channels, spec.side, spec.side], img).expect("sized above");
                Sample { image, label, domain }
            })
            .collect::<Vec<_>>()
    };
    Ok(GeneratedPair {
        spec: spec.clone(),
        source: render(spec.n_source, Domain::Source),
        target: render(spec.n_target, Domain::Target),
    })
}

/// Take exactly `k` labeled samples per class from `target`; the rest become
/// the unlabeled split. Relative order is preserved in both parts.
pub fn split_kshot(target: &[Sample], classes: usize, k: usize, seed: u64) -> Result<(Vec<Sample>, Vec<UnlabeledSample>)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in target.iter().enumerate() {
        let slot = by_class
            .get_mut(s.label)
            .ok_or_else(|| Error::Data(format!("target sample {i} has label {} outside {classes} classes", s.label)))?;
        slot.push(i);
    }
    let mut rng = rng::stream(seed, "split.kshot");
    let mut chosen = vec![false; target.len()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() <= k {
            return Err(Error::Data(format!(
                "class {class} has {} target samples, need more than k = {k}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        idx[..k].iter().for_each(|&i| chosen[i] = true);
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (s, pick) in target.iter().zip(chosen) {
        if pick {
            labeled.push(s.clone());
        } else {
            unlabeled.push(UnlabeledSample { image: s.image.clone(), label: EvalOnly::new(s.label) });
        }
    }
    Ok((labeled, unlabeled))
}

/// Labeled source, k-shot labeled target and unlabeled target splits.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub classes: usize,
    pub source: Vec<Sample>,
    pub target_labeled: Vec<Sample>,
    pub target_unlabeled: Vec<UnlabeledSample>,
}

impl DomainDataset {
    pub fn new(classes: usize, source: Vec<Sample>, target_labeled: Vec<Sample>, target_unlabeled: Vec<UnlabeledSample>) -> Result<Self> {
        if source.is_empty() || target_unlabeled.is_empty() {
            return Err(Error::Data("source and unlabeled target splits must be non-empty".into()));
        }
        if target_labeled.len() * 10 > target_unlabeled.len() {
            return Err(Error::Data(format!(
                "{} labeled target samples is too many for {} unlabeled (limit one tenth)",
                target_labeled.len(),
                target_unlabeled.len()
            )));
        }
        let shape = source[0].image.shape().to_vec();
        let images = source.iter().chain(&target_labeled).map(|s| (&s.image, Some(s.label)));
        let images = images.chain(target_unlabeled.iter().map(|s| (&s.image, None)));
        for (img, label) in images {
            if img.shape() != shape {
                return Err(Error::Dimension(format!("image {:?} differs from {shape:?}", img.shape())));
            }
            if label.is_some_and(|l| l >= classes) {
                return Err(Error::Data(format!("label {} outside {classes} classes", label.unwrap_or(0))));
            }
        }
        Ok(DomainDataset { classes, source, target_labeled, target_unlabeled })
    }

    /// Split a generated pair with `k` labeled target samples per class.
    pub fn from_pair(pair: &GeneratedPair, k: usize, split_seed: u64) -> Result<Self> {
        let (labeled, unlabeled) = split_kshot(&pair.target, pair.spec.classes, k, split_seed)?;
        DomainDataset::new(pair.spec.classes, pair.source.clone(), labeled, unlabeled)
    }

    /// `[c, h, w]` of every image.
    pub fn image_shape(&self) -> &[usize] {
        self.source[0].image.shape()
    }

    /// The labeled pool: source followed by labeled target.
    pub fn labeled(&self) -> impl Iterator<Item = &Sample> {
        self.source.iter().chain(&self.target_labeled)
    }

    pub fn labeled_len(&self) -> usize {
        self.source.len() + self.target_labeled.len()
    }

    pub fn labeled_at(&self, i: usize) -> &Sample {
        if i < self.source.len() {
            &self.source[i]
        } else {
            &self.target_labeled[i - self.source.len()]
        }
    }
}

/// Stack `[c, h, w]` images into a `[n, c, h, w]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let items: Vec<&Tensor> = images.into_iter().collect();
    Tensor::stack(&items)
}
