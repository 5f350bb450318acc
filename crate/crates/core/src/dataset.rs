//! Series ingestion, calendar features, chronological splits and windowing.

use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `T×D` multivariate series with its observation mask.
///
/// Missing entries always hold `0.0` in `values`; only `observed`
/// distinguishes them from true zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    time_column: String,
    variate_names: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    day_of_week: Vec<usize>,
    hour_of_day: Vec<usize>,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl SeriesDataset {
    /// Builds a dataset; entries that are unobserved or non-finite become
    /// missing with value 0.
    pub fn new(
        time_column: impl Into<String>,
        variate_names: Vec<String>,
        timestamps: Vec<NaiveDateTime>,
        mut values: Vec<f64>,
        mut observed: Vec<bool>,
    ) -> Result<Self> {
        let t = timestamps.len();
        let d = variate_names.len();
        if values.len() != t * d || observed.len() != t * d {
            return Err(Error::Dimension(format!(
                "dataset of {t} rows x {d} variates needs {} values and mask entries, got {} and {}",
                t * d,
                values.len(),
                observed.len()
            )));
        }
        for (v, o) in values.iter_mut().zip(observed.iter_mut()) {
            if !v.is_finite() {
                *o = false;
            }
            if !*o {
                *v = 0.0;
            }
        }
        let day_of_week = timestamps
            .iter()
            .map(|ts| ts.weekday().num_days_from_monday() as usize)
            .collect();
        let hour_of_day = timestamps.iter().map(|ts| ts.hour() as usize).collect();
        Ok(SeriesDataset {
            time_column: time_column.into(),
            variate_names,
            timestamps,
            day_of_week,
            hour_of_day,
            values,
            observed,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.variate_names.len()
    }

    pub fn time_column(&self) -> &str {
        &self.time_column
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variate_names
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    /// Monday = 0 … Sunday = 6.
    pub fn day_of_week(&self) -> &[usize] {
        &self.day_of_week
    }

    pub fn hour_of_day(&self) -> &[usize] {
        &self.hour_of_day
    }

    /// Row-major `T×D` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row-major `T×D` observation flags.
    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.width() + d]
    }

    pub fn is_observed(&self, t: usize, d: usize) -> bool {
        self.observed[t * self.width() + d]
    }

    pub fn observed_fraction(&self) -> f64 {
        if self.observed.is_empty() {
            return 0.0;
        }
        self.observed.iter().filter(|&&o| o).count() as f64 / self.observed.len() as f64
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> SeriesDataset {
        let d = self.width();
        SeriesDataset {
            time_column: self.time_column.clone(),
            variate_names: self.variate_names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            day_of_week: self.day_of_week[start..end].to_vec(),
            hour_of_day: self.hour_of_day[start..end].to_vec(),
            values: self.values[start * d..end * d].to_vec(),
            observed: self.observed[start * d..end * d].to_vec(),
        }
    }

    /// Same timestamps and mask, transformed observed values.
    pub fn map_observed(&self, f: impl Fn(usize, f64) -> f64) -> SeriesDataset {
        let d = self.width();
        let mut out = self.clone();
        for (i, (v, &o)) in out.values.iter_mut().zip(&self.observed).enumerate() {
            if o {
                *v = f(i % d, *v);
            }
        }
        out
    }

    /// Replaces the observation mask; values at newly missing entries become 0.
    pub(crate) fn with_observed(&self, observed: Vec<bool>) -> SeriesDataset {
        let mut out = self.clone();
        for (v, &o) in out.values.iter_mut().zip(&observed) {
            if !o {
                *v = 0.0;
            }
        }
        out.observed = observed;
        out
    }

    /// Writes the dataset in the ingest CSV format (missing = empty cell).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::Ingest(format!("{}: {e}", path.as_ref().display())))?;
        let csv_err = |e: csv::Error| Error::Ingest(e.to_string());
        let mut header = vec![self.time_column.clone()];
        header.extend(self.variate_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let d = self.width();
        let mut record = Vec::with_capacity(d + 1);
        for (t, ts) in self.timestamps.iter().enumerate() {
            record.clear();
            record.push(ts.format("%Y-%m-%d %H:%M:%S%.f").to_string());
            for j in 0..d {
                let i = t * d + j;
                record.push(if self.observed[i] {
                    format!("{}", self.values[i])
                } else {
                    String::new()
                });
            }
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M:%S%.f",
    "%Y/%m/%d %H:%M",
];

/// Parses ISO-8601 / `YYYY-MM-DD HH:MM[:SS]` timestamps. Offsets are
/// dropped (local wall-clock time is kept); date-only values mean midnight.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for f in DATETIME_FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, f) {
            return Some(ts);
        }
    }
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Some(ts.naive_local());
    }
    for f in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, f) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    None
}

/// Loads a CSV with a header row. `value_columns` empty selects every
/// non-time column. Empty cells and `NaN` are missing.
pub fn load_csv(
    path: impl AsRef<Path>,
    time_column: &str,
    value_columns: &[String],
) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let time_idx = headers
        .iter()
        .position(|h| h == time_column)
        .ok_or_else(|| Error::Ingest(format!("time column '{time_column}' not in header")))?;
    let names: Vec<String> = if value_columns.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != time_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        value_columns.to_vec()
    };
    let col_idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::Ingest(format!("value column '{n}' not in header")))
        })
        .collect::<Result<_>>()?;

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header line.
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
        let raw_ts = rec.get(time_idx).unwrap_or("");
        let ts = parse_timestamp(raw_ts)
            .ok_or_else(|| Error::Ingest(format!("row {row}: unparseable timestamp '{raw_ts}'")))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(Error::Ingest(format!(
                    "row {row}: timestamp {ts} is not after {prev}"
                )));
            }
        }
        timestamps.push(ts);
        for &c in &col_idx {
            let cell = rec.get(c).unwrap_or("").trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                values.push(0.0);
                observed.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Ingest(format!("row {row}: value '{cell}' is not a number"))
                })?;
                values.push(v);
                observed.push(v.is_finite());
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Ingest(format!("{}: no data rows", path.display())));
    }
    SeriesDataset::new(time_column, names, timestamps, values, observed)
}

/// Chronological train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be >= 0: {fr:?}"
            )));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1: {fr:?}"
            )));
        }
        Ok(())
    }

    /// Row counts: floor for train and val, remainder to test.
    pub fn lengths(&self, t: usize) -> (usize, usize, usize) {
        // The small epsilon keeps exact products like 0.29*100 from flooring down.
        let n_train = ((t as f64) * self.train + 1e-9).floor() as usize;
        let n_val = ((t as f64) * self.val + 1e-9).floor() as usize;
        let n_train = n_train.min(t);
        let n_val = n_val.min(t - n_train);
        (n_train, n_val, t - n_train - n_val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
}

/// Contiguous train → val → test split; every part must fit one window of
/// `min_len` rows.
pub fn chronological_split(ds: &SeriesDataset, spec: &SplitSpec, min_len: usize) -> Result<Splits> {
    spec.validate()?;
    let (a, b, c) = spec.lengths(ds.len());
    for (name, n) in [("train", a), ("val", b), ("test", c)] {
        if n < min_len {
            return Err(Error::Config(format!(
                "{name} split has {n} rows; at least {min_len} (L+H) are required"
            )));
        }
    }
    Ok(Splits {
        train: ds.slice(0, a),
        val: ds.slice(a, a + b),
        test: ds.slice(a + b, a + b + c),
    })
}

/// One aligned batch of lookback/forecast windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `B×L×D` lookback values (zero where missing).
    pub x: Tensor,
    /// `B×L×D` lookback mask.
    pub mx: Tensor,
    /// `B×H×D` forecast targets.
    pub y: Tensor,
    /// `B×H×D` forecast mask.
    pub my: Tensor,
    /// `B·L` day-of-week indices, row-major by sample.
    pub dow: Vec<usize>,
    /// `B·L` hour-of-day indices.
    pub hod: Vec<usize>,
    /// Start row of each window in its source split.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn lookback(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.x.shape()[2]
    }
}

/// Sliding windows over a split. Inputs come from `source`; forecast
/// targets from `targets` (the same dataset unless a clean reference is
/// attached with [`Windows::with_targets`]).
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    source: &'a SeriesDataset,
    targets: &'a SeriesDataset,
    lookback: usize,
    horizon: usize,
    starts: Vec<usize>,
}

/// Windows start at `0, stride, 2·stride, …`; there are
/// `floor((T − L − H) / stride) + 1` of them.
pub fn make_windows(
    ds: &SeriesDataset,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Windows<'_>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("L, H and stride must be positive".into()));
    }
    let span = lookback + horizon;
    if ds.len() < span {
        return Err(Error::Config(format!(
            "series of {} rows is shorter than L+H = {span}",
            ds.len()
        )));
    }
    let count = (ds.len() - span) / stride + 1;
    Ok(Windows {
        source: ds,
        targets: ds,
        lookback,
        horizon,
        starts: (0..count).map(|i| i * stride).collect(),
    })
}

impl<'a> Windows<'a> {
    /// Forecast targets and their mask are read from `targets` instead.
    pub fn with_targets(mut self, targets: &'a SeriesDataset) -> Result<Self> {
        if targets.len() != self.source.len() || targets.width() != self.source.width() {
            return Err(Error::Dimension(format!(
                "target dataset {}x{} does not match inputs {}x{}",
                targets.len(),
                targets.width(),
                self.source.len(),
                self.source.width()
            )));
        }
        self.targets = targets;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn source(&self) -> &SeriesDataset {
        self.source
    }

    pub fn targets(&self) -> &SeriesDataset {
        self.targets
    }

    pub fn sample(&self, i: usize) -> WindowBatch {
        self.batch(&[i])
    }

    /// Materializes the windows with the given indices, in order.
    pub fn batch(&self, indices: &[usize]) -> WindowBatch {
        let (l, h, d) = (self.lookback, self.horizon, self.source.width());
        let b = indices.len();
        let mut x = Vec::with_capacity(b * l * d);
        let mut mx = Vec::with_capacity(b * l * d);
        let mut y = Vec::with_capacity(b * h * d);
        let mut my = Vec::with_capacity(b * h * d);
        let mut dow = Vec::with_capacity(b * l);
        let mut hod = Vec::with_capacity(b * l);
        let mut starts = Vec::with_capacity(b);
        for &i in indices {
            let s = self.starts[i];
            starts.push(s);
            let src = self.source;
            x.extend_from_slice(&src.values[s * d..(s + l) * d]);
            mx.extend(
                src.observed[s * d..(s + l) * d]
                    .iter()
                    .map(|&o| f64::from(u8::from(o))),
            );
            dow.extend_from_slice(&src.day_of_week[s..s + l]);
            hod.extend_from_slice(&src.hour_of_day[s..s + l]);
            let tgt = self.targets;
            y.extend_from_slice(&tgt.values[(s + l) * d..(s + l + h) * d]);
            my.extend(
                tgt.observed[(s + l) * d..(s + l + h) * d]
                    .iter()
                    .map(|&o| f64::from(u8::from(o))),
            );
        }
        WindowBatch {
            x: Tensor::new(vec![b, l, d], x).expect("window shape"),
            mx: Tensor::new(vec![b, l, d], mx).expect("window shape"),
            y: Tensor::new(vec![b, h, d], y).expect("window shape"),
            my: Tensor::new(vec![b, h, d], my).expect("window shape"),
            dow,
            hod,
            starts,
        }
    }

    pub fn all(&self) -> WindowBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Per-variate z-scoring fitted on observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Variates with no observations or zero spread get `(0, 1)`.
    pub fn fit(ds: &SeriesDataset) -> Scaler {
        let d = ds.width();
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        for (i, (&v, &o)) in ds.values.iter().zip(&ds.observed).enumerate() {
            if o {
                sum[i % d] += v;
                count[i % d] += 1;
            }
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| {
                if count[j] > 0 {
                    sum[j] / count[j] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut ss = vec![0.0; d];
        for (i, (&v, &o)) in ds.values.iter().zip(&ds.observed).enumerate() {
            if o {
                ss[i % d] += (v - mean[i % d]).powi(2);
            }
        }
        let std = (0..d)
            .map(|j| {
                let s = if count[j] > 0 {
                    (ss[j] / count[j] as f64).sqrt()
                } else {
                    0.0
                };
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Scaler { mean, std }
    }

    pub fn transform(&self, ds: &SeriesDataset) -> SeriesDataset {
        ds.map_observed(|j, v| (v - self.mean[j]) / self.std[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn hourly(n: usize, d: usize) -> SeriesDataset {
        let start = parse_timestamp("2024-01-01 00:00").unwrap();
        let ts = (0..n)
            .map(|i| start + chrono::Duration::hours(i as i64))
            .collect();
        let names = (0..d).map(|j| format!("v{j}")).collect();
        let values = (0..n * d).map(|i| i as f64).collect();
        SeriesDataset::new("date", names, ts, values, vec![true; n * d]).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_cell_is_missing() {
        let f = write_tmp(
            "date,a,b\n2020-07-01 00:00,1,2\n2020-07-01 01:00,,4\n2020-07-01 02:00,5,NaN\n",
        );
        let ds = load_csv(f.path(), "date", &[]).unwrap();
        let missing: Vec<usize> = ds
            .observed()
            .iter()
            .enumerate()
            .filter(|(_, o)| !**o)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(missing, vec![2, 5]);
        assert_eq!(ds.value(1, 0), 0.0);
    }

    #[test]
    fn minute_timestamp_quantizes_to_hour() {
        let f = write_tmp("date,a\n2020-07-01 00:10,1\n");
        let ds = load_csv(f.path(), "date", &[]).unwrap();
        assert_eq!(ds.hour_of_day(), &[0]);
    }

    #[test]
    fn calendar_of_two_days_from_monday() {
        // 2024-01-01 is a Monday.
        let ds = hourly(48, 1);
        let expected: Vec<usize> = (0..48).map(|i| i / 24).collect();
        assert_eq!(ds.day_of_week(), &expected[..]);
        let hours: Vec<usize> = (0..48).map(|i| i % 24).collect();
        assert_eq!(ds.hour_of_day(), &hours[..]);
    }

    #[test]
    fn ingest_errors() {
        let bad_ts = write_tmp("date,a\n2020-07-01 00:00,1\nyesterday,2\n");
        let msg = load_csv(bad_ts.path(), "date", &[])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("row 3"), "{msg}");

        let backwards = write_tmp("date,a\n2020-07-01 01:00,1\n2020-07-01 00:00,2\n");
        assert!(matches!(
            load_csv(backwards.path(), "date", &[]),
            Err(Error::Ingest(_))
        ));

        let empty = write_tmp("date,a\n");
        assert!(matches!(
            load_csv(empty.path(), "date", &[]),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn selects_named_columns() {
        let f = write_tmp("date,a,b,c\n2020-07-01,1,2,3\n");
        let ds = load_csv(f.path(), "date", &["c".into(), "a".into()]).unwrap();
        assert_eq!(ds.values(), &[3.0, 1.0]);
        assert_eq!(ds.variate_names(), &["c".to_string(), "a".to_string()]);
    }

    #[test]
    fn split_lengths() {
        let spec = SplitSpec::default();
        assert_eq!(spec.lengths(100), (60, 20, 20));
        assert_eq!(spec.lengths(101), (60, 20, 21));
        let ds = hourly(10, 1);
        let err = chronological_split(&ds, &spec, 96 + 96).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("192"));
    }

    #[test]
    fn split_spec_validation() {
        let bad = SplitSpec {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(bad.validate().is_err());
        let neg = SplitSpec {
            train: 1.2,
            val: -0.2,
            test: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn window_counts() {
        let ds = hourly(200, 2);
        assert_eq!(make_windows(&ds, 96, 96, 1).unwrap().len(), 9);
        let exact = hourly(192, 2);
        assert_eq!(make_windows(&exact, 96, 96, 1).unwrap().len(), 1);
        assert_eq!(
            make_windows(&ds, 10, 10, 7).unwrap().len(),
            (200 - 20) / 7 + 1
        );
        assert!(matches!(
            make_windows(&ds, 150, 96, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fully_observed_windows_have_unit_masks() {
        let ds = hourly(30, 3);
        let w = make_windows(&ds, 8, 4, 1).unwrap();
        let b = w.all();
        assert!(b.mx.data().iter().all(|&m| m == 1.0));
        assert!(b.my.data().iter().all(|&m| m == 1.0));
        assert_eq!(b.x.shape(), &[w.len(), 8, 3]);
        assert_eq!(b.y.shape(), &[w.len(), 4, 3]);
    }

    #[test]
    fn scaler_standardizes_observed() {
        let ds = hourly(50, 2);
        let sc = Scaler::fit(&ds);
        let z = sc.transform(&ds);
        let col0: Vec<f64> = (0..50).map(|t| z.value(t, 0)).collect();
        let mean = col0.iter().sum::<f64>() / 50.0;
        let var = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}
