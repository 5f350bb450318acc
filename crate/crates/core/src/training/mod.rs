//! Joint training loop with early stopping, evaluation, the λ sweep and the
//! two-stage baseline.

pub mod adam;
pub mod baseline;
pub mod loss;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::dataset::{make_windows, SeriesDataset, Splits, Windows};
use crate::error::{Error, Result};
use crate::model::{forward, predict, CoifNetParams, ModelConfig};
use crate::rng::{derive_seed, Rng, Stream};
use crate::tensor::Tensor;

pub use adam::{AdamConfig, AdamState};
pub use baseline::{baseline_two_stage, BaselineOutcome};
pub use loss::{coifnet_loss, masked_mae, masked_mse, LossTerms, MaskedError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the forecast term; `1 − λ` weights the imputation term.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Window stride for every split.
    pub stride: usize,
    /// Windows per forward pass during evaluation (does not affect results).
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.2,
            lr: 1e-3,
            batch_size: 512,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: None,
            stride: 1,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.stride == 0 {
            return Err(Error::Config("batch sizes and stride must be >= 1".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1)
            || !(0.0..1.0).contains(&b2)
            || !(self.adam_eps > 0.0 && self.adam_eps.is_finite())
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

/// Prepared splits for one experiment. `test_reference`, when present,
/// supplies complete forecast targets for the test split.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub splits: Splits,
    pub test_reference: Option<SeriesDataset>,
}

impl ExperimentData {
    pub fn train_windows(&self, cfg: &ModelConfig, stride: usize) -> Result<Windows<'_>> {
        make_windows(&self.splits.train, cfg.lookback, cfg.horizon, stride)
    }

    pub fn val_windows(&self, cfg: &ModelConfig, stride: usize) -> Result<Windows<'_>> {
        make_windows(&self.splits.val, cfg.lookback, cfg.horizon, stride)
    }

    pub fn test_windows(&self, cfg: &ModelConfig, stride: usize) -> Result<Windows<'_>> {
        let w = make_windows(&self.splits.test, cfg.lookback, cfg.horizon, stride)?;
        match &self.test_reference {
            Some(r) => w.with_targets(r),
            None => Ok(w),
        }
    }
}

/// Masked forecast errors over a set of windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    /// Number of observed target entries.
    pub count: f64,
}

impl Metrics {
    fn from_sums(abs: f64, sq: f64, count: f64) -> Metrics {
        if count == 0.0 {
            Metrics {
                mae: 0.0,
                mse: 0.0,
                count,
            }
        } else {
            Metrics {
                mae: abs / count,
                mse: sq / count,
                count,
            }
        }
    }
}

/// Accumulates masked absolute and squared residuals.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct ErrorSums {
    abs: f64,
    sq: f64,
    count: f64,
}

impl ErrorSums {
    pub(crate) fn add(&mut self, pred: &Tensor, target: &Tensor, mask: &Tensor) {
        for ((p, t), m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
            if *m != 0.0 {
                let r = t - p;
                self.abs += m * r.abs();
                self.sq += m * r * r;
                self.count += m;
            }
        }
    }

    pub(crate) fn metrics(&self) -> Metrics {
        Metrics::from_sums(self.abs, self.sq, self.count)
    }
}

/// Forecast metrics of `params` on every window, in window order.
pub fn evaluate(
    params: &CoifNetParams,
    cfg: &ModelConfig,
    windows: &Windows<'_>,
    eval_batch: usize,
) -> Result<Metrics> {
    let mut sums = ErrorSums::default();
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(eval_batch.max(1)) {
        let batch = windows.batch(chunk);
        let (_, yhat) = predict(params, cfg, &batch)?;
        sums.add(&yhat, &batch.y, &batch.my);
    }
    Ok(sums.metrics())
}

/// Imputation MAE of `X̂` on entries that are observed in `reference` but
/// missing from the model inputs.
pub fn evaluate_imputation(
    params: &CoifNetParams,
    cfg: &ModelConfig,
    windows: &Windows<'_>,
    reference: &SeriesDataset,
    eval_batch: usize,
) -> Result<Option<Metrics>> {
    if cfg.ablations.forecast_only_head {
        return Ok(None);
    }
    let src = windows.source();
    if reference.len() != src.len() || reference.width() != src.width() {
        return Err(Error::Dimension(
            "reference does not match the evaluated split".into(),
        ));
    }
    let (l, d) = (cfg.lookback, cfg.width);
    let mut sums = ErrorSums::default();
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(eval_batch.max(1)) {
        let batch = windows.batch(chunk);
        let (xhat, _) = predict(params, cfg, &batch)?;
        let xhat = xhat.expect("reconstruction head");
        let mut target = Vec::with_capacity(batch.x.len());
        let mut held_out = Vec::with_capacity(batch.x.len());
        for &s in &batch.starts {
            for t in s..s + l {
                for j in 0..d {
                    target.push(reference.value(t, j));
                    let hidden = reference.is_observed(t, j) && !src.is_observed(t, j);
                    held_out.push(if hidden { 1.0 } else { 0.0 });
                }
            }
        }
        let shape = batch.x.shape().to_vec();
        sums.add(
            &xhat,
            &Tensor::new(shape.clone(), target)?,
            &Tensor::new(shape, held_out)?,
        );
    }
    Ok(Some(sums.metrics()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub test: Metrics,
    pub param_count: usize,
    /// Kept out of the serialized report so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_mae,val_mse` rows.
    pub fn write_epoch_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,train_loss,val_mae,val_mse")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{}",
                e.epoch, e.train_loss, e.val_mae, e.val_mse
            )?;
        }
        Ok(())
    }
}

/// Training state captured at the best validation epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CoifNetParams,
    pub optimizer: AdamState,
    pub rng: Rng,
    pub report: TrainReport,
}

/// Runs the joint training loop and returns the best-validation snapshot.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &ExperimentData,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let clock = Instant::now();
    let train_w = data.train_windows(model_cfg, train_cfg.stride)?;
    let val_w = data.val_windows(model_cfg, train_cfg.stride)?;
    let test_w = data.test_windows(model_cfg, train_cfg.stride)?;

    let mut init_rng = Rng::seed_from(derive_seed(train_cfg.seed, Stream::Init));
    let mut params = CoifNetParams::init(model_cfg, &mut init_rng)?;
    let mut optimizer = AdamState::new(&params);
    let mut rng = Rng::seed_from(derive_seed(train_cfg.seed, Stream::Train));
    let adam_cfg = train_cfg.adam();

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, CoifNetParams, AdamState, Rng)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_w.len()).collect();

    for epoch in 1..=train_cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut weighted_loss = 0.0;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch = train_w.batch(chunk);
            let diag = |e: Error| Error::Training(format!("epoch {epoch}, batch {b}: {e}"));
            let mut tape = Tape::new();
            let fwd =
                forward(&mut tape, &params, model_cfg, &batch, true, &mut rng).map_err(diag)?;
            let (loss, terms) =
                coifnet_loss(&mut tape, &fwd, &batch, train_cfg.lambda).map_err(diag)?;
            if !terms.total.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}, batch {b}: non-finite loss (imputation {}, forecast {})",
                    terms.imputation, terms.forecast
                )));
            }
            let mut grads = tape.backward(loss).map_err(diag)?;
            if let Some(max_norm) = train_cfg.grad_clip {
                let mut map = grads.into_map();
                adam::clip_global_norm(&mut map, max_norm);
                grads = Gradients::from_map(map);
            }
            optimizer
                .step(&mut params, &grads, &adam_cfg)
                .map_err(diag)?;
            weighted_loss += terms.total * chunk.len() as f64;
        }
        let val = evaluate(&params, model_cfg, &val_w, train_cfg.eval_batch)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: weighted_loss / train_w.len() as f64,
            val_mae: val.mae,
            val_mse: val.mse,
        });
        let improved = best.as_ref().is_none_or(|(_, mae, ..)| val.mae < *mae);
        if improved {
            best = Some((
                epoch,
                val.mae,
                params.clone(),
                optimizer.clone(),
                rng.clone(),
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_mae, best_params, best_opt, best_rng) =
        best.ok_or_else(|| Error::Config("max_epochs must be >= 1".into()))?;
    let test = evaluate(&best_params, model_cfg, &test_w, train_cfg.eval_batch)?;
    let report = TrainReport {
        epochs,
        best_epoch,
        best_val_mae,
        test,
        param_count: best_params.count(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        params: best_params,
        optimizer: best_opt,
        rng: best_rng,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mae: f64,
    pub mse: f64,
}

/// One training run per λ with everything else shared.
pub fn lambda_sweep(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &ExperimentData,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
        }
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda,
                ..*train_cfg
            };
            let out = train(model_cfg, &cfg, data)?;
            Ok(SweepRow {
                lambda,
                mae: out.report.test.mae,
                mse: out.report.test.mse,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "lambda,mae,mse")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.lambda, r.mae, r.mse)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn error_sums_pool_counts() {
        let mut s = ErrorSums::default();
        let p = Tensor::vector(vec![1.0, 2.0]);
        let t = Tensor::vector(vec![0.0, 0.0]);
        s.add(&p, &t, &Tensor::vector(vec![1.0, 0.0]));
        s.add(&p, &t, &Tensor::vector(vec![1.0, 1.0]));
        let m = s.metrics();
        assert_eq!(m.count, 3.0);
        assert!((m.mae - 4.0 / 3.0).abs() < 1e-15);
        assert!((m.mse - 6.0 / 3.0).abs() < 1e-15);
    }
}
