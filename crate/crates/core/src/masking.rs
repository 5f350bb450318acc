//! Synthetic missingness: point and block patterns, application to a
//! dataset, and the `CFMK` mask file.
//!
//! Draw order (part of the reproducibility contract, see [`crate::rng`]):
//! point masks draw one `uniform()` per entry in row-major order and mark
//! the entry missing when it is `< rate`; block masks draw, per block,
//! `t0 = below(T)`, `d0 = below(D)`, `len_t = 1 + below(l_t)`,
//! `len_c = 1 + below(l_c)` and stop once the missing fraction reaches the
//! target.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SeriesDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"CFMK";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 8 + 8 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Point,
    Block,
}

impl Pattern {
    fn code(self) -> u8 {
        match self {
            Pattern::Point => 0,
            Pattern::Block => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Pattern::Point),
            1 => Some(Pattern::Block),
            _ => None,
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Pattern::Point),
            "block" => Ok(Pattern::Block),
            other => Err(Error::Usage(format!(
                "unknown pattern '{other}' (point|block)"
            ))),
        }
    }
}

fn default_lt() -> usize {
    10
}

fn default_lc() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub pattern: Pattern,
    pub rate: f64,
    /// Maximum block length in time steps.
    #[serde(default = "default_lt")]
    pub l_t: usize,
    /// Maximum block width in variates.
    #[serde(default = "default_lc")]
    pub l_c: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn point(rate: f64, seed: u64) -> Self {
        MaskSpec {
            pattern: Pattern::Point,
            rate,
            l_t: default_lt(),
            l_c: default_lc(),
            seed,
        }
    }

    pub fn block(rate: f64, l_t: usize, l_c: usize, seed: u64) -> Self {
        MaskSpec {
            pattern: Pattern::Block,
            rate,
            l_t,
            l_c,
            seed,
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "missing rate {} outside [0, 1]",
                self.rate
            )));
        }
        if self.pattern == Pattern::Block {
            if self.l_t == 0 || self.l_c == 0 {
                return Err(Error::Config(
                    "block extents l_t and l_c must be >= 1".into(),
                ));
            }
            if self.l_c > width {
                return Err(Error::Config(format!(
                    "block width l_c = {} exceeds {width} variates",
                    self.l_c
                )));
            }
        }
        Ok(())
    }

    pub fn generate(&self, t: usize, d: usize) -> Result<Mask> {
        self.validate(d)?;
        let mut mask = match self.pattern {
            Pattern::Point => generate_point_mask(t, d, self.rate, self.seed),
            Pattern::Block => generate_block_mask(t, d, self.rate, self.l_t, self.l_c, self.seed),
        };
        mask.rate = self.rate;
        Ok(mask)
    }
}

/// A `T×D` binary matrix (true = observed) with the settings that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub pattern: Pattern,
    /// Target missing rate.
    pub rate: f64,
    pub seed: u64,
    rows: usize,
    cols: usize,
    observed: Vec<bool>,
}

impl Mask {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        Mask {
            pattern: Pattern::Point,
            rate: 0.0,
            seed: 0,
            rows,
            cols,
            observed: vec![true; rows * cols],
        }
    }

    pub fn from_observed(rows: usize, cols: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} mask entries for a {rows}x{cols} mask",
                observed.len()
            )));
        }
        Ok(Mask {
            pattern: Pattern::Point,
            rate: 0.0,
            seed: 0,
            rows,
            cols,
            observed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, t: usize, d: usize) -> bool {
        self.observed[t * self.cols + d]
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    /// Achieved missing fraction.
    pub fn missing_fraction(&self) -> f64 {
        if self.observed.is_empty() {
            return 0.0;
        }
        self.missing_count() as f64 / self.observed.len() as f64
    }

    /// Writes the `CFMK` file: magic, version, pattern, rate, achieved rate,
    /// seed, T, D (little-endian) and the row-major LSB-first bitmap.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.observed.len().div_ceil(8));
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(self.pattern.code());
        buf.extend_from_slice(&self.rate.to_le_bytes());
        buf.extend_from_slice(&self.missing_fraction().to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u64).to_le_bytes());
        let mut bits = vec![0u8; self.observed.len().div_ceil(8)];
        for (i, &o) in self.observed.iter().enumerate() {
            if o {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bits);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mask> {
        let mut buf = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
        Mask::decode(&buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Mask> {
        let corrupt = |what: &str| Error::Ingest(format!("mask file: {what}"));
        if buf.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        if &buf[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if buf[4] != VERSION {
            return Err(corrupt(&format!("unsupported version {}", buf[4])));
        }
        let pattern = Pattern::from_code(buf[5]).ok_or_else(|| corrupt("unknown pattern"))?;
        let word = |at: usize| <[u8; 8]>::try_from(&buf[at..at + 8]).expect("8 bytes");
        let rate = f64::from_le_bytes(word(6));
        let achieved = f64::from_le_bytes(word(14));
        let seed = u64::from_le_bytes(word(22));
        let rows = u64::from_le_bytes(word(30)) as usize;
        let cols = u64::from_le_bytes(word(38)) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| corrupt("shape overflow"))?;
        if buf.len() != HEADER_LEN + n.div_ceil(8) {
            return Err(corrupt(&format!(
                "expected {} bitmap bytes for {rows}x{cols}, found {}",
                n.div_ceil(8),
                buf.len() - HEADER_LEN
            )));
        }
        let bits = &buf[HEADER_LEN..];
        let observed: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let mask = Mask {
            pattern,
            rate,
            seed,
            rows,
            cols,
            observed,
        };
        if mask.missing_fraction().to_bits() != achieved.to_bits() {
            return Err(corrupt("achieved rate does not match bitmap"));
        }
        Ok(mask)
    }
}

/// Each entry is independently missing with probability `rate`.
pub fn generate_point_mask(t: usize, d: usize, rate: f64, seed: u64) -> Mask {
    let mut rng = Rng::seed_from(seed);
    let observed = (0..t * d).map(|_| rng.uniform() >= rate).collect();
    Mask {
        pattern: Pattern::Point,
        rate,
        seed,
        rows: t,
        cols: d,
        observed,
    }
}

/// Drops random `len_t × len_c` rectangles (clipped at the edges) until the
/// missing fraction first reaches `rate`.
pub fn generate_block_mask(
    t: usize,
    d: usize,
    rate: f64,
    l_t: usize,
    l_c: usize,
    seed: u64,
) -> Mask {
    let mut rng = Rng::seed_from(seed);
    let n = t * d;
    let mut observed = vec![true; n];
    let mut missing = 0usize;
    if n > 0 {
        while (missing as f64) / (n as f64) < rate {
            let t0 = rng.below(t);
            let d0 = rng.below(d);
            let len_t = 1 + rng.below(l_t);
            let len_c = 1 + rng.below(l_c);
            for row in t0..(t0 + len_t).min(t) {
                for col in d0..(d0 + len_c).min(d) {
                    let i = row * d + col;
                    if observed[i] {
                        observed[i] = false;
                        missing += 1;
                    }
                }
            }
        }
    }
    Mask {
        pattern: Pattern::Block,
        rate,
        seed,
        rows: t,
        cols: d,
        observed,
    }
}

/// Intersects the dataset's observation mask with `mask`; newly missing
/// values are zeroed. The input dataset is left untouched.
pub fn apply_mask(ds: &SeriesDataset, mask: &Mask) -> Result<SeriesDataset> {
    if mask.rows != ds.len() || mask.cols != ds.width() {
        return Err(Error::Dimension(format!(
            "mask is {}x{} but dataset is {}x{}",
            mask.rows,
            mask.cols,
            ds.len(),
            ds.width()
        )));
    }
    let observed = ds
        .observed()
        .iter()
        .zip(&mask.observed)
        .map(|(&a, &b)| a && b)
        .collect();
    Ok(ds.with_observed(observed))
}
