//! Finite-difference gradient verification.
//!
//! `check` evaluates a scalar-valued graph builder twice per input
//! coordinate (central differences) and compares against the tape's
//! reverse-mode gradients. The numeric side uses forward evaluations only,
//! so it is independent of every backward rule it verifies.

use crate::{Error, Result};

use super::{Tape, Tensor};

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Relative error of `a` vs `b` with a floored denominator, so near-zero
/// gradient pairs are compared absolutely at the floor scale.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Verify reverse-mode gradients of `build` at `inputs`.
///
/// `build` must construct a scalar loss from tracked leaves handed to it in
/// input order. Returns the worst relative error over all coordinates of
/// all inputs, using `floor` as the denominator floor.
pub fn check<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = xs.iter().map(|t| tape.var(t)).collect();
        let loss = build(&mut tape, &leaves)?;
        if !loss.is_scalar() {
            return Err(Error::BadLoss {
                shape: loss.shape().to_vec(),
            });
        }
        Ok(loss.item())
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect();
    let loss = build(&mut tape, &leaves)?;
    if !loss.is_scalar() {
        return Err(Error::BadLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|l| grads.wrt(l).expect("leaf registered on this tape"))
        .collect();

    let mut worst: f64 = 0.0;
    for ti in 0..inputs.len() {
        for ci in 0..inputs[ti].numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[ti].data_mut()[ci] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[ti].data_mut()[ci] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti].data()[ci], numeric, floor));
        }
    }
    Ok(worst)
}
