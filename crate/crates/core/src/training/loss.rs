//! Masked error metrics and the joint imputation + forecasting objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::WindowBatch;
use crate::error::{Error, Result};
use crate::model::Forward;
use crate::tensor::Tensor;

/// A masked mean error. `degenerate` is set when nothing was observed, in
/// which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedError {
    pub value: f64,
    pub count: f64,
    pub degenerate: bool,
}

fn masked_reduce(
    pred: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    f: impl Fn(f64) -> f64,
) -> Result<MaskedError> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "masked error of {:?}, {:?} and mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0.0;
    for ((p, t), m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        sum += m * f(t - p);
        count += m;
    }
    Ok(if count == 0.0 {
        MaskedError {
            value: 0.0,
            count,
            degenerate: true,
        }
    } else {
        MaskedError {
            value: sum / count,
            count,
            degenerate: false,
        }
    })
}

/// `Σ mask ⊙ |target − pred| / Σ mask`.
pub fn masked_mae(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<MaskedError> {
    masked_reduce(pred, target, mask, f64::abs)
}

/// `Σ mask ⊙ (target − pred)² / Σ mask`.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<MaskedError> {
    masked_reduce(pred, target, mask, |r| r * r)
}

/// Masked MAE recorded on the tape. Degenerate masks give a constant 0.
pub fn masked_mae_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    mask: &Tensor,
) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if target.shape() != &shape[..] || mask.shape() != &shape[..] {
        return Err(Error::Dimension(format!(
            "masked error of {:?}, {:?} and mask {:?}",
            shape,
            target.shape(),
            mask.shape()
        )));
    }
    let count = mask.sum();
    if count == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let t = tape.constant(target.clone());
    let m = tape.constant(mask.clone());
    let resid = tape.sub(pred, t)?;
    let abs = tape.abs(resid)?;
    let masked = tape.mul(abs, m)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / count)
}

/// Values of the two loss terms and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub imputation: f64,
    pub forecast: f64,
    pub total: f64,
}

/// `(1 − λ)·L_I + λ·L_F`; `L_I` is 0 when the head emits no reconstruction.
pub fn coifnet_loss(
    tape: &mut Tape,
    fwd: &Forward,
    batch: &WindowBatch,
    lambda: f64,
) -> Result<(Var, LossTerms)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let lf = masked_mae_on_tape(tape, fwd.yhat, &batch.y, &batch.my)?;
    let li = match fwd.xhat {
        Some(xhat) => masked_mae_on_tape(tape, xhat, &batch.x, &batch.mx)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let wi = tape.scale(li, 1.0 - lambda)?;
    let wf = tape.scale(lf, lambda)?;
    let loss = tape.add(wi, wf)?;
    let terms = LossTerms {
        imputation: tape.value(li).item(),
        forecast: tape.value(lf).item(),
        total: tape.value(loss).item(),
    };
    Ok((loss, terms))
}

/// Combines precomputed term values exactly as [`coifnet_loss`] does.
pub fn combine(imputation: f64, forecast: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * imputation + lambda * forecast
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn mae_examples() {
        assert_eq!(
            masked_mae(&v(&[2.0, 2.0]), &v(&[1.0, 2.0]), &v(&[1.0, 1.0]))
                .unwrap()
                .value,
            0.5
        );
        assert_eq!(
            masked_mae(&v(&[2.0, 2.0]), &v(&[1.0, 2.0]), &v(&[0.0, 1.0]))
                .unwrap()
                .value,
            0.0
        );
        let d = masked_mae(&v(&[2.0, 2.0]), &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(
            masked_mse(&v(&[2.0, 2.0]), &v(&[1.0, 2.0]), &v(&[1.0, 1.0]))
                .unwrap()
                .value,
            0.5
        );
        assert_eq!(
            masked_mse(&v(&[1.0, 5.0]), &v(&[1.0, 5.0]), &v(&[1.0, 1.0]))
                .unwrap()
                .value,
            0.0
        );
        assert_eq!(
            masked_mse(&v(&[4.0, 0.0]), &v(&[1.0, 9.0]), &v(&[1.0, 0.0]))
                .unwrap()
                .value,
            9.0
        );
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            masked_mae(&v(&[1.0]), &v(&[1.0, 2.0]), &v(&[1.0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn combine_weights() {
        assert!((combine(1.0, 2.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(combine(3.0, 2.0, 1.0), 2.0);
        assert_eq!(combine(3.0, 2.0, 0.0), 3.0);
    }

    #[test]
    fn tape_mae_matches_plain() {
        let pred = v(&[0.5, -1.0, 2.0, 3.0]);
        let target = v(&[1.0, 1.0, 1.0, 1.0]);
        let mask = v(&[1.0, 0.0, 1.0, 1.0]);
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let l = masked_mae_on_tape(&mut tape, p, &target, &mask).unwrap();
        let plain = masked_mae(&pred, &target, &mask).unwrap().value;
        assert!((tape.value(l).item() - plain).abs() < 1e-15);
    }
}
