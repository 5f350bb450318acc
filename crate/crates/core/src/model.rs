//! The forecaster: observed-value normalization, timestamp embeddings,
//! gated cross-timestep and cross-variate fusion, joint projection of the
//! reconstructed lookback and the forecast, and de-normalization.
//!
//! All functions operate on batches (`B` leading axis). Normalization
//! statistics are always per sample and per variate, never pooled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::WindowBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound on `|γ|` used when de-normalizing.
pub const GAMMA_FLOOR: f64 = 1e-8;

fn yes() -> bool {
    true
}

/// Switches for the component ablations. The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Feed the mask slab; off replaces it with ones.
    #[serde(default = "yes")]
    pub use_mask_input: bool,
    /// Feed the timestamp-embedding slab.
    #[serde(default = "yes")]
    pub use_timestamps: bool,
    /// Gated cross-timestep block; off uses one linear map `L → h`.
    #[serde(default = "yes")]
    pub use_ctf: bool,
    /// Gated cross-variate block; off uses one linear map `(2D+C) → D`.
    #[serde(default = "yes")]
    pub use_cvf: bool,
    /// Off skips both normalization and de-normalization.
    #[serde(default = "yes")]
    pub use_revon: bool,
    /// Statistics over all lookback entries, ignoring the mask.
    #[serde(default)]
    pub revin_mode: bool,
    /// Project `h → H` and emit only the forecast.
    #[serde(default)]
    pub forecast_only_head: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            use_mask_input: true,
            use_timestamps: true,
            use_ctf: true,
            use_cvf: true,
            use_revon: true,
            revin_mode: false,
            forecast_only_head: false,
        }
    }
}

impl Ablations {
    pub const NAMES: [&'static str; 9] = [
        "no_mask",
        "no_timestamps",
        "no_mask_timestamps",
        "no_ctf",
        "no_cvf",
        "no_ctf_cvf",
        "no_revon",
        "revin",
        "forecast_only",
    ];

    /// Applies one named ablation on top of `self`.
    pub fn with(mut self, name: &str) -> Result<Self> {
        match name {
            "full" => {}
            "no_mask" => self.use_mask_input = false,
            "no_timestamps" => self.use_timestamps = false,
            "no_mask_timestamps" => {
                self.use_mask_input = false;
                self.use_timestamps = false;
            }
            "no_ctf" => self.use_ctf = false,
            "no_cvf" => self.use_cvf = false,
            "no_ctf_cvf" => {
                self.use_ctf = false;
                self.use_cvf = false;
            }
            "no_revon" => self.use_revon = false,
            "revin" => self.revin_mode = true,
            "forecast_only" => self.forecast_only_head = true,
            other => {
                return Err(Error::Usage(format!(
                    "unknown ablation '{other}'; expected one of {:?}",
                    Self::NAMES
                )))
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub width: usize,
    pub hidden: usize,
    pub day_embed: usize,
    pub hour_embed: usize,
    pub dropout: f64,
    pub eps: f64,
    #[serde(default)]
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 96,
            width: 7,
            hidden: 256,
            day_embed: 8,
            hour_embed: 8,
            dropout: 0.1,
            eps: 1e-5,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config("L, H, D and h must all be >= 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Embedding width `C` actually fed to the fusion blocks.
    pub fn embed_width(&self) -> usize {
        if self.ablations.use_timestamps {
            self.day_embed + self.hour_embed
        } else {
            0
        }
    }

    /// Feature width of the composed input, `2D + C`.
    pub fn feature_width(&self) -> usize {
        2 * self.width + self.embed_width()
    }

    /// Output positions of the head: `L + H`, or `H` for a forecast-only head.
    pub fn head_width(&self) -> usize {
        if self.ablations.forecast_only_head {
            self.horizon
        } else {
            self.lookback + self.horizon
        }
    }

    /// Name → shape of every learnable tensor for this configuration.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (l, d, h) = (self.lookback, self.width, self.hidden);
        let f = self.feature_width();
        let a = &self.ablations;
        let mut s = BTreeMap::new();
        let mut put = |name: &str, shape: Vec<usize>| {
            s.insert(name.to_string(), shape);
        };
        if a.use_revon {
            put("revon.gamma", vec![d]);
            put("revon.beta", vec![d]);
        }
        if a.use_timestamps {
            put("embed.day", vec![7, self.day_embed]);
            put("embed.hour", vec![24, self.hour_embed]);
        }
        put("ctf.w_value", vec![l, h]);
        put("ctf.b_value", vec![h]);
        if a.use_ctf {
            put("ctf.w_gate", vec![l, h]);
            put("ctf.b_gate", vec![h]);
            put("ctf.w_out", vec![h, h]);
            put("ctf.b_out", vec![h]);
        }
        put("cvf.w_value", vec![f, d]);
        put("cvf.b_value", vec![d]);
        if a.use_cvf {
            put("cvf.w_gate", vec![f, d]);
            put("cvf.b_gate", vec![d]);
            put("cvf.w_out", vec![d, d]);
            put("cvf.b_out", vec![d]);
        }
        put("head.w", vec![h, self.head_width()]);
        put("head.b", vec![self.head_width()]);
        s
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (l, d, h) = (self.lookback, self.width, self.hidden);
        let f = self.feature_width();
        let a = &self.ablations;
        let revon = if a.use_revon { 2 * d } else { 0 };
        let embed = if a.use_timestamps {
            7 * self.day_embed + 24 * self.hour_embed
        } else {
            0
        };
        let ctf = if a.use_ctf {
            2 * (l * h + h) + h * h + h
        } else {
            l * h + h
        };
        let cvf = if a.use_cvf {
            2 * (f * d + d) + d * d + d
        } else {
            f * d + d
        };
        let head = h * self.head_width() + self.head_width();
        revon + embed + ctf + cvf + head
    }
}

/// Every learnable tensor of the model, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct CoifNetParams {
    tensors: BTreeMap<String, Tensor>,
}

impl CoifNetParams {
    /// Initializes parameters: `γ = 1`, `β = 0`, embeddings `U[-0.1, 0.1]`,
    /// weight matrices `U[-1/√fan_in, 1/√fan_in]`, biases zero. Tensors are
    /// drawn in name order from one stream.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match name.as_str() {
                "revon.gamma" => vec![1.0; n],
                "revon.beta" => vec![0.0; n],
                "embed.day" | "embed.hour" => (0..n).map(|_| rng.range(-0.1, 0.1)).collect(),
                _ if shape.len() == 1 => vec![0.0; n],
                _ => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.range(-bound, bound)).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(CoifNetParams { tensors })
    }

    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let shapes = cfg.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &shapes {
            match tensors.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => return Err(Error::Dimension(format!("missing parameter {name}"))),
            }
        }
        Ok(CoifNetParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Sum of all tensor sizes.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.param(name, t.clone())?);
        }
        Ok(ParamVars { vars })
    }
}

/// Tape handles of the registered parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter {name} not registered")))
    }
}

/// How lookback statistics are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Observed entries only, output masked.
    Observed,
    /// All entries, mask ignored.
    Full,
}

/// Per-sample, per-variate lookback statistics, each `B×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RevonStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub obs_count: Tensor,
}

impl RevonStats {
    /// Statistics of `x` (`B×L×D`). In [`NormMode::Observed`] only entries
    /// with `mx = 1` count; a variate with none falls back to `(0, 1)`.
    pub fn compute(x: &Tensor, mx: &Tensor, mode: NormMode) -> Result<RevonStats> {
        check_bld(x, mx)?;
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (xd, md) = (x.data(), mx.data());
        let mut mean = vec![0.0; b * d];
        let mut var = vec![0.0; b * d];
        let mut count = vec![0.0; b * d];
        for s in 0..b {
            for j in 0..d {
                let weight = |t: usize| match mode {
                    NormMode::Observed => md[(s * l + t) * d + j],
                    NormMode::Full => 1.0,
                };
                let mut n = 0.0;
                let mut sum = 0.0;
                for t in 0..l {
                    let w = weight(t);
                    n += w;
                    sum += w * xd[(s * l + t) * d + j];
                }
                let k = s * d + j;
                count[k] = n;
                if n == 0.0 {
                    mean[k] = 0.0;
                    var[k] = 1.0;
                    continue;
                }
                let mu = sum / n;
                let mut ss = 0.0;
                for t in 0..l {
                    let r = xd[(s * l + t) * d + j] - mu;
                    ss += weight(t) * r * r;
                }
                mean[k] = mu;
                var[k] = ss / n;
            }
        }
        Ok(RevonStats {
            mean: Tensor::new(vec![b, d], mean)?,
            var: Tensor::new(vec![b, d], var)?,
            obs_count: Tensor::new(vec![b, d], count)?,
        })
    }

    fn broadcast_shape(&self) -> Vec<usize> {
        vec![self.mean.shape()[0], 1, self.mean.shape()[1]]
    }

    /// `√(var + ε)` shaped `B×1×D`.
    pub fn scale(&self, eps: f64) -> Tensor {
        self.var
            .map(|v| (v + eps).sqrt())
            .reshape(self.broadcast_shape())
            .expect("stats shape")
    }

    /// Mean shaped `B×1×D`.
    pub fn shift(&self) -> Tensor {
        self.mean
            .clone()
            .reshape(self.broadcast_shape())
            .expect("stats shape")
    }
}

fn check_bld(x: &Tensor, mx: &Tensor) -> Result<()> {
    if x.rank() != 3 || x.shape() != mx.shape() {
        return Err(Error::Dimension(format!(
            "expected matching B×L×D values and mask, got {:?} and {:?}",
            x.shape(),
            mx.shape()
        )));
    }
    Ok(())
}

/// `X̄ = (γ ⊙ (X − mean)/√(var + ε) + β) ⊙ Mx` per sample and variate.
/// In [`NormMode::Full`] the final mask product is skipped.
pub fn revon_normalize(
    tape: &mut Tape,
    x: &Tensor,
    mx: &Tensor,
    gamma: Var,
    beta: Var,
    eps: f64,
    mode: NormMode,
) -> Result<(Var, RevonStats)> {
    let stats = RevonStats::compute(x, mx, mode)?;
    let (l, d) = (x.shape()[1], x.shape()[2]);
    let mean = stats.mean.data();
    let scale = stats.var.map(|v| (v + eps).sqrt());
    let scale = scale.data();
    let standardized: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = (i / (l * d)) * d + i % d;
            (v - mean[k]) / scale[k]
        })
        .collect();
    let z = tape.constant(Tensor::new(x.shape().to_vec(), standardized)?);
    let scaled = tape.mul(z, gamma)?;
    let shifted = tape.add(scaled, beta)?;
    let out = match mode {
        NormMode::Observed => {
            let m = tape.constant(mx.clone());
            tape.mul(shifted, m)?
        }
        NormMode::Full => shifted,
    };
    Ok((out, stats))
}

/// `E_τ` rows: `[E_day[dow[t]] ∥ E_hour[hod[t]]]`, shaped `B×L×C`.
pub fn embed_timestamps(
    tape: &mut Tape,
    dow: &[usize],
    hod: &[usize],
    e_day: Var,
    e_hour: Var,
    batch: usize,
    lookback: usize,
) -> Result<Var> {
    if dow.len() != batch * lookback || hod.len() != batch * lookback {
        return Err(Error::Dimension(format!(
            "expected {} timestamps, got {} day and {} hour indices",
            batch * lookback,
            dow.len(),
            hod.len()
        )));
    }
    let day = tape.gather_rows(e_day, dow)?;
    let hour = tape.gather_rows(e_hour, hod)?;
    let both = tape.concat_last(&[day, hour])?;
    let c = tape.value(both).shape()[1];
    tape.reshape(both, vec![batch, lookback, c])
}

/// `Z_in = [X̄ ∥ Mx ∥ E_τ]` along the feature axis. Without mask input the
/// middle slab is all ones; `e_tau = None` drops the last slab.
pub fn compose_input(
    tape: &mut Tape,
    xbar: Var,
    mx: &Tensor,
    e_tau: Option<Var>,
    ablations: &Ablations,
) -> Result<Var> {
    let slab = if ablations.use_mask_input {
        mx.clone()
    } else {
        Tensor::ones(mx.shape())
    };
    let m = tape.constant(slab);
    let mut parts = vec![xbar, m];
    parts.extend(e_tau);
    tape.concat_last(&parts)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// `σ(x·W_gate + b_gate) ⊙ (x·W_value + b_value)`, then dropout and the
/// output map. Mixes along the last axis of `x`.
#[allow(clippy::too_many_arguments)]
fn gated_block(
    tape: &mut Tape,
    x: Var,
    vars: &ParamVars,
    prefix: &str,
    gated: bool,
    dropout: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let value = affine(
        tape,
        x,
        vars.get(&format!("{prefix}.w_value"))?,
        vars.get(&format!("{prefix}.b_value"))?,
    )?;
    if !gated {
        return Ok(value);
    }
    let pre_gate = affine(
        tape,
        x,
        vars.get(&format!("{prefix}.w_gate"))?,
        vars.get(&format!("{prefix}.b_gate"))?,
    )?;
    let gate = tape.sigmoid(pre_gate)?;
    let fused = tape.mul(gate, value)?;
    let dropped = tape.dropout(fused, dropout, training, rng)?;
    affine(
        tape,
        dropped,
        vars.get(&format!("{prefix}.w_out"))?,
        vars.get(&format!("{prefix}.b_out"))?,
    )
}

/// Cross-timestep fusion: `B×L×F → B×h×F`, mixing along time.
pub fn ctf_forward(
    tape: &mut Tape,
    z_in: Var,
    vars: &ParamVars,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let along_time = tape.transpose(z_in)?;
    let mixed = gated_block(
        tape,
        along_time,
        vars,
        "ctf",
        cfg.ablations.use_ctf,
        cfg.dropout,
        training,
        rng,
    )?;
    tape.transpose(mixed)
}

/// Cross-variate fusion: `B×h×F → B×h×D`, mixing along features.
pub fn cvf_forward(
    tape: &mut Tape,
    z_ctf: Var,
    vars: &ParamVars,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    gated_block(
        tape,
        z_ctf,
        vars,
        "cvf",
        cfg.ablations.use_cvf,
        cfg.dropout,
        training,
        rng,
    )
}

/// Maps `B×T×D` values from normalized to data scale:
/// `√(var + ε) ⊙ (p − β)/γ + mean`, with `|γ|` floored at [`GAMMA_FLOOR`].
pub fn revon_denormalize(
    tape: &mut Tape,
    p: Var,
    stats: &RevonStats,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let gamma = tape.clamp_away_from_zero(gamma, GAMMA_FLOOR)?;
    let centered = tape.sub(p, beta)?;
    let unscaled = tape.div(centered, gamma)?;
    let scale = tape.constant(stats.scale(eps));
    let shift = tape.constant(stats.shift());
    let rescaled = tape.mul(unscaled, scale)?;
    tape.add(rescaled, shift)
}

/// Projects `h → L+H` per variate (first `L` positions reconstruct the
/// lookback) and maps back to data scale with [`revon_denormalize`]. Returns `(X̂, Ŷ)`; `X̂` is `None`
/// for a forecast-only head.
pub fn project_and_denorm(
    tape: &mut Tape,
    z_cvf: Var,
    stats: Option<&RevonStats>,
    vars: &ParamVars,
    cfg: &ModelConfig,
) -> Result<(Option<Var>, Var)> {
    let per_variate = tape.transpose(z_cvf)?;
    let projected = affine(tape, per_variate, vars.get("head.w")?, vars.get("head.b")?)?;
    let mut out = tape.transpose(projected)?;
    if let Some(stats) = stats {
        out = revon_denormalize(
            tape,
            out,
            stats,
            vars.get("revon.gamma")?,
            vars.get("revon.beta")?,
            cfg.eps,
        )?;
    }
    if cfg.ablations.forecast_only_head {
        return Ok((None, out));
    }
    let xhat = tape.narrow(out, 1, 0, cfg.lookback)?;
    let yhat = tape.narrow(out, 1, cfg.lookback, cfg.horizon)?;
    Ok((Some(xhat), yhat))
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `B×L×D` reconstruction, absent for a forecast-only head.
    pub xhat: Option<Var>,
    /// `B×H×D` forecast.
    pub yhat: Var,
    pub stats: Option<RevonStats>,
    pub params: ParamVars,
}

/// Full forward pass of a batch, recorded on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &CoifNetParams,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    training: bool,
    rng: &mut Rng,
) -> Result<Forward> {
    let (b, l, d) = (batch.batch_size(), batch.lookback(), batch.width());
    if l != cfg.lookback || d != cfg.width || batch.horizon() != cfg.horizon {
        return Err(Error::Dimension(format!(
            "batch has L={l}, H={}, D={d} but the model expects L={}, H={}, D={}",
            batch.horizon(),
            cfg.lookback,
            cfg.horizon,
            cfg.width
        )));
    }
    let vars = params.register(tape)?;
    let a = &cfg.ablations;
    let (xbar, stats) = if a.use_revon {
        let mode = if a.revin_mode {
            NormMode::Full
        } else {
            NormMode::Observed
        };
        let (xbar, stats) = revon_normalize(
            tape,
            &batch.x,
            &batch.mx,
            vars.get("revon.gamma")?,
            vars.get("revon.beta")?,
            cfg.eps,
            mode,
        )?;
        (xbar, Some(stats))
    } else {
        (tape.constant(batch.x.clone()), None)
    };
    let e_tau = if a.use_timestamps {
        Some(embed_timestamps(
            tape,
            &batch.dow,
            &batch.hod,
            vars.get("embed.day")?,
            vars.get("embed.hour")?,
            b,
            l,
        )?)
    } else {
        None
    };
    let z_in = compose_input(tape, xbar, &batch.mx, e_tau, a)?;
    let z_ctf = ctf_forward(tape, z_in, &vars, cfg, training, rng)?;
    let z_cvf = cvf_forward(tape, z_ctf, &vars, cfg, training, rng)?;
    let (xhat, yhat) = project_and_denorm(tape, z_cvf, stats.as_ref(), &vars, cfg)?;
    Ok(Forward {
        xhat,
        yhat,
        stats,
        params: vars,
    })
}

/// Forecast (and reconstruction) values for a batch, without dropout.
pub fn predict(
    params: &CoifNetParams,
    cfg: &ModelConfig,
    batch: &WindowBatch,
) -> Result<(Option<Tensor>, Tensor)> {
    let mut tape = Tape::new();
    // Eval mode never draws from the stream.
    let mut rng = Rng::seed_from(0);
    let fwd = forward(&mut tape, params, cfg, batch, false, &mut rng)?;
    let xhat = fwd.xhat.map(|v| tape.value(v).clone());
    Ok((xhat, tape.value(fwd.yhat).clone()))
}
