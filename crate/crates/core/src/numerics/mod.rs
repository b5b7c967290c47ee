//! Dense numerics: matrices, layers with forward/backward passes, the
//! cross-entropy loss, optimizers and a finite-difference gradient check.

mod gradcheck;
mod layer;
mod loss;
mod matrix;
mod optim;

pub use gradcheck::grad_check;
pub use layer::{
    Activation, Layer, LayerGrad, Mlp, MlpGrads, Parameters, Tape, DEFAULT_LEAKY_SLOPE,
};
pub use loss::softmax_cross_entropy;
pub use matrix::{argmax, argmin, dot, softmax, Matrix};
pub use optim::{OptimizerKind, OptimizerState};

use crate::error::Result;

/// Applies one optimizer step to any flat-parameter model.
pub fn optimizer_step<P: Parameters + ?Sized>(
    state: &mut OptimizerState,
    params: &mut P,
    grads: &[f64],
) -> Result<()> {
    let mut flat = params.flatten_params();
    state.step(&mut flat, grads)?;
    params.assign_params(&flat)
}
