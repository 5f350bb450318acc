//! Two-stage reference: mean imputation followed by a per-variate ridge
//! forecaster from the lookback window to the horizon.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_windows, SeriesDataset, Windows};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{ErrorSums, ExperimentData, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    /// Per-variate means of the observed training entries.
    pub fill: Vec<f64>,
    /// Per-variate `(L+1)×H` weights; the last row is the intercept.
    pub weights: Vec<Vec<f64>>,
    pub test: Metrics,
}

/// Fills every missing entry of `ds` with the per-variate value in `fill`.
pub fn mean_impute(ds: &SeriesDataset, fill: &[f64]) -> Vec<f64> {
    let d = ds.width();
    (0..ds.len() * d)
        .map(|i| {
            let (t, j) = (i / d, i % d);
            if ds.is_observed(t, j) {
                ds.value(t, j)
            } else {
                fill[j]
            }
        })
        .collect()
}

fn observed_means(ds: &SeriesDataset) -> Vec<f64> {
    let d = ds.width();
    let mut sum = vec![0.0; d];
    let mut n = vec![0usize; d];
    for t in 0..ds.len() {
        for j in 0..d {
            if ds.is_observed(t, j) {
                sum[j] += ds.value(t, j);
                n[j] += 1;
            }
        }
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

fn design_row(values: &[f64], width: usize, start: usize, lookback: usize, j: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (start..start + lookback)
        .map(|t| values[t * width + j])
        .collect();
    row.push(1.0);
    row
}

fn fit_variate(
    values: &[f64],
    width: usize,
    windows: &Windows<'_>,
    j: usize,
    penalty: f64,
) -> Result<Vec<f64>> {
    let (l, h) = (windows.lookback(), windows.horizon());
    let n = windows.len();
    let mut x = DMatrix::<f64>::zeros(n, l + 1);
    let mut y = DMatrix::<f64>::zeros(n, h);
    for (r, &s) in windows.starts().iter().enumerate() {
        for (c, v) in design_row(values, width, s, l, j).into_iter().enumerate() {
            x[(r, c)] = v;
        }
        for k in 0..h {
            y[(r, k)] = values[(s + l + k) * width + j];
        }
    }
    let mut gram = x.transpose() * &x;
    for c in 0..l {
        gram[(c, c)] += penalty;
    }
    // A tiny ridge on the intercept keeps the system positive definite.
    gram[(l, l)] += 1e-12;
    let rhs = x.transpose() * y;
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "ridge system for variate {j} is not positive definite"
        ))
    })?;
    let w = chol.solve(&rhs);
    Ok(w.as_slice().to_vec())
}

/// Fits on the training split and scores the test split with the same
/// targets and masks the joint model is scored against.
pub fn baseline_two_stage(
    cfg: &ModelConfig,
    data: &ExperimentData,
    stride: usize,
    penalty: f64,
) -> Result<BaselineOutcome> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::Config(format!(
            "ridge penalty must be >= 0, got {penalty}"
        )));
    }
    let train = &data.splits.train;
    let fill = observed_means(train);
    let train_values = mean_impute(train, &fill);
    let train_w = make_windows(train, cfg.lookback, cfg.horizon, stride)?;
    let d = train.width();
    let (l, h) = (cfg.lookback, cfg.horizon);
    let weights = (0..d)
        .map(|j| fit_variate(&train_values, d, &train_w, j, penalty))
        .collect::<Result<Vec<_>>>()?;

    let test_w = data.test_windows(cfg, stride)?;
    let test_values = mean_impute(test_w.source(), &fill);
    let targets = test_w.targets();
    let mut sums = ErrorSums::default();
    for &s in test_w.starts() {
        let mut pred = Vec::with_capacity(h * d);
        let mut tgt = Vec::with_capacity(h * d);
        let mut msk = Vec::with_capacity(h * d);
        for k in 0..h {
            for (j, w) in weights.iter().enumerate() {
                let row = design_row(&test_values, d, s, l, j);
                // Column-major (L+1)×H storage.
                let col = &w[k * (l + 1)..(k + 1) * (l + 1)];
                pred.push(row.iter().zip(col).map(|(a, b)| a * b).sum());
                tgt.push(targets.value(s + l + k, j));
                msk.push(if targets.is_observed(s + l + k, j) {
                    1.0
                } else {
                    0.0
                });
            }
        }
        sums.add(
            &crate::Tensor::vector(pred),
            &crate::Tensor::vector(tgt),
            &crate::Tensor::vector(msk),
        );
    }
    Ok(BaselineOutcome {
        fill,
        weights,
        test: sums.metrics(),
    })
}
