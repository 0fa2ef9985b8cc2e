//! Inference, accuracy and pseudo-label statistics, plus the ablation and
//! threshold-sweep drivers.

mod runs;

pub use runs::{
    run_ablation, run_on, run_one, run_threshold_sweep, AblationMode, AblationRow, RunOutcome, RunSpec, SweepCell,
    SweepOptions,
};

use crate::autodiff::Tensor;
use crate::data::{augment, eval_scope, stack_images, EvalOnly, Sample, UnlabeledSample};
use crate::ecb::{argmax, EcbState};
use crate::error::{Error, Result};
use crate::nn::{predict_probs, Branch};
use crate::rng;

/// Rows per inference chunk.
const CHUNK: usize = 256;

/// Class probabilities of `branch` on `[n, c, h, w]` images, evaluated in
/// chunks to bound memory.
pub fn branch_probs(branch: &Branch, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [n, c, h, w] images, got {s:?}")));
    }
    let n = s[0];
    let per = images.len() / n.max(1);
    let mut out = Vec::with_capacity(n * branch.geometry().classes);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        out.extend_from_slice(predict_probs(branch, &chunk)?.data());
    }
    Tensor::new(vec![n, branch.geometry().classes], out)
}

/// Argmax class of each row of `branch`'s output; lowest index wins ties.
pub fn predict_branch(branch: &Branch, images: &Tensor) -> Result<Vec<usize>> {
    let p = branch_probs(branch, images)?;
    Ok((0..p.shape()[0]).map(|i| argmax(p.row(i)).0).collect())
}

/// Test-time prediction, which uses the CNN branch `F2(E2(x))` only.
pub fn predict(state: &EcbState, images: &Tensor) -> Result<Vec<usize>> {
    predict_branch(&state.cnn, images)
}

/// `100 * correct / total`.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// Accuracy of `branch` on a labeled split.
pub fn accuracy_labeled(branch: &Branch, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    let images = stack_images(split.iter().map(|s| &s.image))?;
    let labels: Vec<usize> = split.iter().map(|s| s.label).collect();
    accuracy_of(&predict_branch(branch, &images)?, &labels)
}

/// Accuracy of `branch` on the unlabeled split, reading its eval-only labels.
pub fn accuracy(branch: &Branch, split: &[UnlabeledSample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    let images = stack_images(split.iter().map(|s| &s.image))?;
    let labels = eval_labels(split.iter().map(|s| &s.label));
    accuracy_of(&predict_branch(branch, &images)?, &labels)
}

fn eval_labels<'a>(labels: impl Iterator<Item = &'a EvalOnly<usize>>) -> Vec<usize> {
    eval_scope(|| labels.map(EvalOnly::read).collect())
}

/// Gate counts from teacher probabilities: how many rows reach `tau`, and
/// how many of those have the correct argmax.
pub fn pseudo_counts(probs: &Tensor, labels: &[usize], tau: f64) -> (usize, usize) {
    let mut total = 0;
    let mut correct = 0;
    for (i, &l) in labels.iter().enumerate() {
        let (arg, max) = argmax(probs.row(i));
        if max >= tau {
            total += 1;
            correct += usize::from(arg == l);
        }
    }
    (total, correct)
}

/// Pseudo-label quantity and quality of `teacher` on weak views of `split`.
/// The weak views are drawn from `view_seed`, so repeated calls see the
/// same images.
pub fn pseudo_stats(teacher: &Branch, split: &[UnlabeledSample], tau: f64, view_seed: u64) -> Result<(usize, usize)> {
    TargetProbe::new(split, view_seed)?.pseudo_stats(teacher, tau)
}

/// The unlabeled target split prepared once for repeated measurement: clean
/// images, one fixed weak view per image, and the eval-only labels.
#[derive(Clone, Debug)]
pub struct TargetProbe {
    clean: Tensor,
    weak: Tensor,
    labels: Vec<usize>,
}

impl TargetProbe {
    pub fn new(split: &[UnlabeledSample], view_seed: u64) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Contract("empty unlabeled split".into()));
        }
        let mut rng = rng::stream(view_seed, "eval.weak");
        let weak: Vec<Tensor> = split.iter().map(|s| augment::weak(&s.image, &mut rng)).collect();
        Ok(TargetProbe {
            clean: stack_images(split.iter().map(|s| &s.image))?,
            weak: stack_images(&weak)?,
            labels: eval_labels(split.iter().map(|s| &s.label)),
        })
    }

    pub fn accuracy(&self, branch: &Branch) -> Result<f64> {
        accuracy_of(&predict_branch(branch, &self.clean)?, &self.labels)
    }

    pub fn pseudo_stats(&self, teacher: &Branch, tau: f64) -> Result<(usize, usize)> {
        Ok(pseudo_counts(&branch_probs(teacher, &self.weak)?, &self.labels, tau))
    }
}
