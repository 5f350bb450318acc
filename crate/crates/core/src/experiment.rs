//! Config-driven runs: data preparation, training with artifact output,
//! evaluation of a checkpoint, forecast-curve emission and the λ sweep.
//!
//! Every random stream of a run derives from [`RunConfig::seed`]. The
//! resolved config written next to the outputs reproduces the run alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{chronological_split, load_csv, Scaler, SeriesDataset, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, Mask, MaskSpec, Pattern};
use crate::model::{predict, ModelConfig};
use crate::rng::{derive_seed, Stream};
use crate::training::{
    evaluate, evaluate_imputation, lambda_sweep, train, write_sweep_csv, ExperimentData, Metrics,
    SweepRow, TrainConfig, TrainReport,
};

fn date_column() -> String {
    "date".into()
}

fn yes() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "date_column")]
    pub time_column: String,
    /// Variate columns; empty selects every non-time column.
    #[serde(default)]
    pub columns: Vec<String>,
    /// Complete copy of the data used for test targets and imputation
    /// scoring; defaults to the loaded data before artificial masking.
    #[serde(default)]
    pub reference: Option<PathBuf>,
}

/// Artificial missingness. `seed` is derived from the root seed when absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub pattern: Pattern,
    pub rate: f64,
    #[serde(default = "default_lt")]
    pub l_t: usize,
    #[serde(default = "default_lc")]
    pub l_c: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_lt() -> usize {
    10
}

fn default_lc() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub mask: Option<MaskConfig>,
    /// Precomputed mask; takes precedence over `mask`.
    #[serde(default)]
    pub mask_file: Option<PathBuf>,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Fills derived fields: the model width from the data, the training
    /// seed and the mask seed from the root seed. Validates the result.
    pub fn resolve(mut self, width: usize) -> Result<RunConfig> {
        if self.model.width != width {
            self.model.width = width;
        }
        self.train.seed = self.seed;
        if let Some(m) = self.mask.as_mut() {
            if m.seed.is_none() {
                m.seed = Some(derive_seed(self.seed, Stream::Mask));
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(spec) = self.mask_spec() {
            spec.validate(self.model.width)?;
        }
        Ok(())
    }

    pub fn mask_spec(&self) -> Option<MaskSpec> {
        self.mask.map(|m| MaskSpec {
            pattern: m.pattern,
            rate: m.rate,
            l_t: m.l_t,
            l_c: m.l_c,
            seed: m
                .seed
                .unwrap_or_else(|| derive_seed(self.seed, Stream::Mask)),
        })
    }
}

/// Data ready for training or evaluation, in scaled units.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub mask: Mask,
    pub scaler: Scaler,
    pub data: ExperimentData,
    /// Row of the loaded series where the test split starts.
    pub test_offset: usize,
}

fn load_series(cfg: &DataConfig, path: &Path) -> Result<SeriesDataset> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    load_csv(path, &cfg.time_column, &cfg.columns)
}

fn scaled_splits(splits: Splits, scaler: &Scaler) -> Splits {
    Splits {
        train: scaler.transform(&splits.train),
        val: scaler.transform(&splits.val),
        test: scaler.transform(&splits.test),
    }
}

/// Loads, masks, splits and scales the data of `config`. A given `scaler`
/// is reused instead of fitting one on the training split.
pub fn prepare(config: RunConfig, scaler: Option<Scaler>) -> Result<Prepared> {
    let raw = load_series(&config.data, &config.data.path)?;
    let config = config.resolve(raw.width())?;
    let mask = match (&config.mask_file, config.mask_spec()) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(Error::Usage(format!(
                    "mask file {} does not exist",
                    path.display()
                )));
            }
            Mask::load(path)?
        }
        (None, Some(spec)) => spec.generate(raw.len(), raw.width())?,
        (None, None) => Mask::all_observed(raw.len(), raw.width()),
    };
    let masked = apply_mask(&raw, &mask)?;
    let reference = match &config.data.reference {
        Some(path) => {
            let r = load_series(&config.data, path)?;
            if r.len() != raw.len() || r.width() != raw.width() {
                return Err(Error::Dimension(format!(
                    "reference is {}x{} but the dataset is {}x{}",
                    r.len(),
                    r.width(),
                    raw.len(),
                    raw.width()
                )));
            }
            r
        }
        None => raw,
    };
    let min_len = config.model.lookback + config.model.horizon;
    let splits = chronological_split(&masked, &config.split, min_len)?;
    let ref_splits = chronological_split(&reference, &config.split, min_len)?;
    let scaler = match scaler {
        Some(s) => {
            if s.mean.len() != masked.width() {
                return Err(Error::Usage(format!(
                    "checkpoint scaler covers {} variates but the dataset has {}",
                    s.mean.len(),
                    masked.width()
                )));
            }
            s
        }
        None if config.standardize => Scaler::fit(&splits.train),
        None => Scaler {
            mean: vec![0.0; masked.width()],
            std: vec![1.0; masked.width()],
        },
    };
    let test_offset = splits.train.len() + splits.val.len();
    let data = ExperimentData {
        splits: scaled_splits(splits, &scaler),
        test_reference: Some(scaler.transform(&ref_splits.test)),
    };
    Ok(Prepared {
        config,
        mask,
        scaler,
        data,
        test_offset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

/// Trains and writes `config.json`, `mask.cfmk`, `checkpoint.bin`,
/// `report.json`, `epochs.csv` and `timing.json` into the output directory.
pub fn run_train(config: RunConfig) -> Result<TrainReport> {
    let prep = prepare(config, None)?;
    let cfg = &prep.config;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    prep.mask.save(out.join("mask.cfmk"))?;
    let outcome = train(&cfg.model, &cfg.train, &prep.data)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        scaler: prep.scaler.clone(),
        epoch: outcome.report.best_epoch,
        params: outcome.params,
        optimizer: outcome.optimizer,
        rng: outcome.rng,
    };
    ckpt.save(out.join("checkpoint.bin"))?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)? + "\n",
    )?;
    outcome.report.write_epoch_csv(out.join("epochs.csv"))?;
    let timing = Timing {
        wall_clock_seconds: outcome.report.wall_clock_seconds,
    };
    fs::write(
        out.join("timing.json"),
        serde_json::to_string_pretty(&timing)? + "\n",
    )?;
    Ok(outcome.report)
}

/// Replacement inputs for evaluating a checkpoint on other data.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub data: Option<PathBuf>,
    pub mask_file: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub test: Metrics,
    /// Error of the reconstruction on entries hidden by the artificial mask.
    pub imputation: Option<Metrics>,
}

fn checkpoint_inputs(ckpt: &Checkpoint, inputs: &EvalInputs) -> RunConfig {
    let mut cfg = ckpt.config.clone();
    if let Some(p) = &inputs.data {
        cfg.data.path = p.clone();
        cfg.data.reference = None;
    }
    if let Some(p) = &inputs.mask_file {
        cfg.mask_file = Some(p.clone());
    }
    if let Some(p) = &inputs.reference {
        cfg.data.reference = Some(p.clone());
    }
    cfg
}

fn prepare_for_checkpoint(ckpt: &Checkpoint, inputs: &EvalInputs) -> Result<Prepared> {
    let prep = prepare(checkpoint_inputs(ckpt, inputs), Some(ckpt.scaler.clone()))?;
    if prep.config.model != ckpt.config.model {
        return Err(Error::Usage(format!(
            "data has {} variates but the checkpoint expects {}",
            prep.config.model.width, ckpt.config.model.width
        )));
    }
    Ok(prep)
}

/// Test metrics of a checkpoint, and imputation error when some test
/// entries are hidden by the mask but present in the reference.
pub fn run_eval(checkpoint: impl AsRef<Path>, inputs: &EvalInputs) -> Result<EvalMetrics> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let prep = prepare_for_checkpoint(&ckpt, inputs)?;
    let cfg = &prep.config;
    let windows = prep.data.test_windows(&cfg.model, cfg.train.stride)?;
    let test = evaluate(&ckpt.params, &cfg.model, &windows, cfg.train.eval_batch)?;
    let reference = prep
        .data
        .test_reference
        .as_ref()
        .expect("prepared reference");
    let imputation = evaluate_imputation(
        &ckpt.params,
        &cfg.model,
        &windows,
        reference,
        cfg.train.eval_batch,
    )?
    .filter(|m| m.count > 0.0);
    Ok(EvalMetrics { test, imputation })
}

/// Which test windows and variates to emit curves for.
#[derive(Debug, Clone, Default)]
pub struct CurveSelection {
    pub windows: Vec<usize>,
    /// Empty selects every variate.
    pub variates: Vec<usize>,
}

/// Writes `curve_w{window}_v{variate}.csv` files with columns
/// `t,ground_truth,prediction,observed_flag` in original units; `t` is the
/// row index in the loaded series. Returns the written paths.
pub fn run_report(
    run_dir: impl AsRef<Path>,
    selection: &CurveSelection,
    out: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let run_dir = run_dir.as_ref();
    let ckpt_path = run_dir.join("checkpoint.bin");
    if !ckpt_path.exists() {
        return Err(Error::Usage(format!(
            "no checkpoint in {}",
            run_dir.display()
        )));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let prep = prepare_for_checkpoint(&ckpt, &EvalInputs::default())?;
    let cfg = &prep.config;
    let windows = prep.data.test_windows(&cfg.model, cfg.train.stride)?;
    let d = cfg.model.width;
    let variates: Vec<usize> = if selection.variates.is_empty() {
        (0..d).collect()
    } else {
        selection.variates.clone()
    };
    for &w in &selection.windows {
        if w >= windows.len() {
            return Err(Error::Usage(format!(
                "window {w} out of range; the test split has {} windows",
                windows.len()
            )));
        }
    }
    for &j in &variates {
        if j >= d {
            return Err(Error::Usage(format!(
                "variate {j} out of range; the data has {d}"
            )));
        }
    }
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let (l, h) = (cfg.model.lookback, cfg.model.horizon);
    let masked = windows.source();
    let targets = windows.targets();
    let mut written = Vec::new();
    for &w in &selection.windows {
        let batch = windows.sample(w);
        let (_, yhat) = predict(&ckpt.params, &cfg.model, &batch)?;
        let start = batch.starts[0];
        for &j in &variates {
            let (mu, sd) = (prep.scaler.mean[j], prep.scaler.std[j]);
            let mut text = String::from("t,ground_truth,prediction,observed_flag\n");
            for k in 0..h {
                let row = start + l + k;
                let truth = targets.value(row, j) * sd + mu;
                let pred = yhat.at(&[0, k, j]) * sd + mu;
                let flag = u8::from(masked.is_observed(row, j));
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    prep.test_offset + row,
                    truth,
                    pred,
                    flag
                ));
            }
            let path = out.join(format!("curve_w{w}_v{j}.csv"));
            fs::write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Trains once per λ on the same prepared data and writes `sweep.csv`.
pub fn run_sweep(config: RunConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Usage("no lambda values given".into()));
    }
    let prep = prepare(config, None)?;
    let cfg = &prep.config;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json()?)?;
    let rows = lambda_sweep(&cfg.model, &cfg.train, &prep.data, lambdas)?;
    write_sweep_csv(&rows, cfg.out_dir.join("sweep.csv"))?;
    Ok(rows)
}
