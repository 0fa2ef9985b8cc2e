//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live in [`Tensor`]s. A forward pass registers parameters and
//! inputs on a [`Tape`], every operator records its backward rule, and
//! [`Tape::backward`] walks the record once in reverse order, accumulating
//! into the gradients of the parameters passed to it.
//!
//! ```
//! use ecb_core::autodiff::{Parameter, Tape, Tensor};
//!
//! let mut p = Parameter::new("w", Tensor::full(&[2, 2], 3.0));
//! let mut tape = Tape::new();
//! let w = tape.param(&p);
//! let loss = tape.sum(w).unwrap();
//! tape.backward(loss, &mut [&mut p]).unwrap();
//! assert_eq!(p.grad.data(), &[1.0; 4]);
//! ```

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var, LAYERNORM_EPS, PROB_FLOOR};
pub use tensor::{Parameter, Tensor};

/// Anything that owns a list of named parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
}

impl ParamSet for Vec<Parameter> {
    fn params(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

/// Mutation hooks for exercising the verification suite itself.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static FLIP_ABS_DIFF: Cell<bool> = const { Cell::new(false) };
    }

    /// Flip the sign of the absolute-difference backward rule on this thread.
    pub fn set_flip_abs_diff_sign(on: bool) {
        FLIP_ABS_DIFF.with(|f| f.set(on));
    }

    pub(crate) fn abs_diff_sign() -> f64 {
        if FLIP_ABS_DIFF.with(Cell::get) {
            -1.0
        } else {
            1.0
        }
    }
}
