//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamSet, Parameter, Tape, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error of near-zero gradients, per
/// unit of loss magnitude.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_at(analytic, numeric, 0.0)
}

/// Relative error for a loss of value `loss`. Central-difference round-off
/// grows like `eps * |loss| / FD_STEP`, so the floor grows with `|loss|`
/// once it exceeds 1; a gradient that is exactly zero (a key bias under
/// softmax, say) is otherwise judged on round-off alone.
pub fn relative_error_at(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_ERR_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: &GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
    }
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many coordinates per input, chosen by the rng.
    Sample(usize),
}

/// Compare the tape gradient of `f` with respect to every input against
/// central finite differences.
pub fn check<F, R>(inputs: &[Tensor], coords: Coords, rng: &mut R, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut params: Vec<Parameter> =
        inputs.iter().enumerate().map(|(i, t)| Parameter::new(format!("x{i}"), t.clone())).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let scale = tape.value(loss)?.item()?;
    {
        let mut refs: Vec<&mut Parameter> = params.iter_mut().collect();
        tape.backward(loss, &mut refs)?;
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)?.item()
    };
    let mut values: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck::default();
    for (i, p) in params.iter().enumerate() {
        let n = p.value.len();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample(m) if m >= n => (0..n).collect(),
            Coords::Sample(m) => sample(rng, n, m).into_vec(),
        };
        for j in picks {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error_at(p.grad.data()[j], numeric, scale);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Finite-difference check of `loss` with respect to the parameters of a
/// model. `select` filters which parameters (by name) are probed.
pub fn check_model<M, F, R>(
    model: &M,
    select: impl Fn(&str) -> bool,
    coords: Coords,
    rng: &mut R,
    loss: F,
) -> Result<GradCheck>
where
    M: ParamSet + Clone,
    F: Fn(&M, &mut Tape) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut work = model.clone();
    for p in work.params_mut() {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let l = loss(&work, &mut tape)?;
    let scale = tape.value(l)?.item()?;
    let mut analytic = work.clone();
    tape.backward(l, &mut analytic.params_mut())?;
    let grads: Vec<Tensor> = analytic.params().iter().map(|p| p.grad.clone()).collect();

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = loss(m, &mut tape)?;
        tape.value(out)?.item()
    };
    let mut report = GradCheck::default();
    let count = work.params().len();
    for i in 0..count {
        let (name, n) = {
            let ps = work.params();
            (ps[i].name().to_string(), ps[i].value.len())
        };
        if !select(&name) {
            continue;
        }
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample(m) if m >= n => (0..n).collect(),
            Coords::Sample(m) => sample(rng, n, m).into_vec(),
        };
        for j in picks {
            let orig = work.params()[i].value.data()[j];
            work.params_mut()[i].value.data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.params_mut()[i].value.data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.params_mut()[i].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(relative_error_at(grads[i].data()[j], numeric, scale));
            report.checked += 1;
        }
    }
    Ok(report)
}
