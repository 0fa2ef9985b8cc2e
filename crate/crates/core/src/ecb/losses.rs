//! The supervised, discrepancy, Finding, Conquering and co-training losses.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{predict_probs, Branch};

/// Images and labels of one labeled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn nonempty(images: &Tensor, what: &str) -> Result<()> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract(format!("{what} batch is empty")));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(F(E(x)))` against the labels.
pub fn loss_sup(tape: &mut Tape, branch: &Branch, batch: &LabeledBatch) -> Result<Var> {
    nonempty(&batch.images, "labeled")?;
    let x = tape.constant(batch.images.clone());
    let p = branch.forward_probs(tape, x)?;
    tape.cross_entropy(p, &batch.labels)
}

/// Mean over rows of `(1/K) sum_k |p1_k - p2_k|`; lies in `[0, 1]` for
/// probability rows.
pub fn discrepancy(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    let (s1, s2) = (tape.shape(p1)?.to_vec(), tape.shape(p2)?.to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::Dimension(format!("discrepancy needs equal [n, K] inputs, got {s1:?} and {s2:?}")));
    }
    tape.abs_mean_diff(p1, p2)
}

/// Both heads' probabilities on one feature batch.
fn head_pair(tape: &mut Tape, vit: &Branch, cnn: &Branch, feat: Var) -> Result<(Var, Var)> {
    let l1 = vit.head.forward_logits(tape, feat)?;
    let l2 = cnn.head.forward_logits(tape, feat)?;
    Ok((tape.softmax(l1)?, tape.softmax(l2)?))
}

/// The scalar pieces of the Finding objective.
#[derive(Clone, Copy, Debug)]
pub struct FindTerms {
    pub total: Var,
    pub sup_vit: Var,
    pub sup_cnn: Var,
    pub disc: Var,
}

/// `L_sup_vit + L_sup_cnn - disc(F1(E1 xu), F2(E1 xu))`.
pub fn loss_find(tape: &mut Tape, vit: &Branch, cnn: &Branch, labeled: &LabeledBatch, unlabeled: &Tensor) -> Result<FindTerms> {
    nonempty(unlabeled, "unlabeled")?;
    let sup_vit = loss_sup(tape, vit, labeled)?;
    let sup_cnn = loss_sup(tape, cnn, labeled)?;
    let xu = tape.constant(unlabeled.clone());
    let feat = vit.forward_features(tape, xu)?;
    let (p1, p2) = head_pair(tape, vit, cnn, feat)?;
    let disc = discrepancy(tape, p1, p2)?;
    let sup = tape.add(sup_vit, sup_cnn)?;
    let total = tape.sub(sup, disc)?;
    Ok(FindTerms { total, sup_vit, sup_cnn, disc })
}

/// `disc(F1(E2 xu), F2(E2 xu))`.
pub fn loss_conq(tape: &mut Tape, vit: &Branch, cnn: &Branch, unlabeled: &Tensor) -> Result<Var> {
    nonempty(unlabeled, "unlabeled")?;
    let xu = tape.constant(unlabeled.clone());
    let feat = cnn.forward_features(tape, xu)?;
    let (p1, p2) = head_pair(tape, vit, cnn, feat)?;
    discrepancy(tape, p1, p2)
}

/// Hard pseudo labels from teacher probabilities `[n, K]`: the argmax
/// (lowest index on ties) of every row, with a 0/1 mask of rows whose
/// maximum probability reaches `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub mask: Vec<f64>,
    pub selected: usize,
}

impl PseudoLabels {
    pub fn from_probs(probs: &Tensor, tau: f64) -> Self {
        let n = probs.shape()[0];
        let mut labels = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for i in 0..n {
            let (arg, max) = argmax(probs.row(i));
            labels.push(arg);
            mask.push(if max >= tau { 1.0 } else { 0.0 });
        }
        let selected = mask.iter().filter(|&&m| m > 0.0).count();
        PseudoLabels { labels, mask, selected }
    }
}

/// Index and value of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Result of building a co-training loss.
#[derive(Clone, Debug)]
pub struct Cotrain {
    /// `None` when no sample passes the gate: the loss is the zero scalar
    /// and there is nothing to back-propagate.
    pub loss: Option<Var>,
    pub pseudo: PseudoLabels,
}

impl Cotrain {
    pub fn value(&self, tape: &Tape) -> Result<f64> {
        match self.loss {
            Some(v) => tape.value(v)?.item(),
            None => Ok(0.0),
        }
    }
}

/// The teacher labels weak views (no gradient reaches it); the student is
/// trained on strong views of the same samples against the gated pseudo
/// labels, `(1/n) sum_i mask_i * CE(student_i, label_i)`.
pub fn loss_cotrain(tape: &mut Tape, teacher: &Branch, student: &Branch, weak: &Tensor, strong: &Tensor, tau: f64) -> Result<Cotrain> {
    nonempty(weak, "unlabeled")?;
    if weak.shape() != strong.shape() {
        return Err(Error::Dimension(format!("weak {:?} and strong {:?} views differ", weak.shape(), strong.shape())));
    }
    let teacher_probs = predict_probs(teacher, weak)?;
    let pseudo = PseudoLabels::from_probs(&teacher_probs, tau);
    if pseudo.selected == 0 {
        return Ok(Cotrain { loss: None, pseudo });
    }
    let xs = tape.constant(strong.clone());
    let p = student.forward_probs(tape, xs)?;
    let n = pseudo.labels.len() as f64;
    let loss = tape.weighted_cross_entropy(p, &pseudo.labels, &pseudo.mask, n)?;
    Ok(Cotrain { loss: Some(loss), pseudo })
}
