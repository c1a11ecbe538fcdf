//! Training objectives.
//!
//! The alignment term pulls video embeddings toward sensor embeddings. By
//! default the sensor side is a fixed target for that term and learns only
//! from its own probe loss.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Var};
use crate::video::LEVELS;

/// `(1/N) sum_i ||z_v_i - z_p_i||^2`. Gradient reaches `z_p` only when
/// `bidirectional` is set.
pub fn align_loss<T: Scalar>(tape: &mut Tape<T>, z_v: Var, z_p: Var, bidirectional: bool) -> Result<Var> {
    let target = if bidirectional { z_p } else { tape.stop_gradient(z_p) };
    tape.mse(z_v, target)
}

/// Cross entropy plus `beta` times the alignment regulariser between `x_c`
/// and `x_cr`. With `beta == 0` the regulariser is not evaluated at all.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    x_c: Var,
    x_cr: Var,
    beta: f64,
    bidirectional: bool,
) -> Result<Var> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::config("loss.beta", format!("must be non-negative, got {beta}")));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    if beta == 0.0 {
        return Ok(ce);
    }
    let reg = align_loss(tape, x_c, x_cr, bidirectional)?;
    let reg = tape.scale(reg, beta);
    tape.add(ce, reg)
}

/// Linear probe `d -> 11` on sensor embeddings and its cross entropy.
pub fn sensor_probe<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, z_p: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(z_p, w)?;
    let logits = tape.add(y, b)?;
    debug_assert_eq!(tape.shape(logits)[1], LEVELS);
    Ok(logits)
}

pub fn sensor_branch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    z_p: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = sensor_probe(tape, store, prefix, z_p)?;
    tape.cross_entropy(logits, labels)
}
