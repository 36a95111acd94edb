//! Reverse-mode tape over a closed set of primitives, plus finite-difference
//! helpers used to check it and to probe Jacobians.

mod check;
mod tape;

pub use check::{check_gradient, fd_step, jvp_fd, GradientReport, ABS_FLOOR, EPS0_GRADIENT, EPS0_JACOBIAN};
pub use tape::{Gradients, Mask, Tape, Var};



use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;

/// Records `program` on a fresh tape with `inputs` as differentiable leaves
/// and returns the values of the variables it reports as outputs.
pub fn record_forward<F>(program: F, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let outs = program(&mut tape, &vars)?;
    let values = outs.iter().map(|v| tape.value(*v).clone()).collect();
    Ok((values, tape))
}
