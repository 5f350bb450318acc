//! Shared helpers for the integration suites: central finite differences
//! and small random fixtures.

#![allow(dead_code)]

use std::collections::BTreeMap;

use coifnet::dataset::WindowBatch;
use coifnet::model::{forward, Ablations, CoifNetParams, ModelConfig};
use coifnet::training::coifnet_loss;
use coifnet::{Result, Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct amount to the gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = Rng::seed_from(0x5eed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `build` with respect to each named input.
pub fn check_op<F>(inputs: &[(&str, Tensor)], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> (f64, Option<BTreeMap<String, Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((n, _), v)| tape.param(n, v.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = weighted_sum(&mut tape, out).unwrap();
        let value = tape.value(loss).item();
        (value, Some(tape.backward(loss).unwrap().into_map()))
    };
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let grads = eval(&base).1.unwrap();
    let mut worst = 0.0f64;
    for (k, (name, t)) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = base.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = base.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[*name].data()[i], numeric));
        }
    }
    worst
}

/// A random batch with roughly 30% of lookback and horizon entries missing.
pub fn random_batch(rng: &mut Rng, b: usize, l: usize, h: usize, d: usize) -> WindowBatch {
    let mask = |rng: &mut Rng, t: usize| {
        let data = (0..b * t * d)
            .map(|_| if rng.uniform() < 0.3 { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(vec![b, t, d], data).unwrap()
    };
    let mx = mask(rng, l);
    let my = mask(rng, h);
    let x = random_tensor(rng, &[b, l, d]);
    let x = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(mx.data()).map(|(v, m)| v * m).collect(),
    )
    .unwrap();
    let y = random_tensor(rng, &[b, h, d]);
    WindowBatch {
        x,
        mx,
        y,
        my,
        dow: (0..b * l).map(|_| rng.below(7)).collect(),
        hod: (0..b * l).map(|_| rng.below(24)).collect(),
        starts: (0..b).collect(),
    }
}

/// A small random model configuration with one of the named variants.
pub fn random_config(rng: &mut Rng, variant: &str) -> ModelConfig {
    ModelConfig {
        lookback: 2 + rng.below(7),
        horizon: 1 + rng.below(8),
        width: 1 + rng.below(3),
        hidden: 1 + rng.below(6),
        day_embed: 1 + rng.below(3),
        hour_embed: 1 + rng.below(3),
        dropout: 0.2,
        eps: 1e-5,
        ablations: Ablations::default().with(variant).unwrap(),
    }
}

fn loss_value(
    params: &CoifNetParams,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    lambda: f64,
    seed: u64,
) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new();
    let mut rng = Rng::seed_from(seed);
    let fwd = forward(&mut tape, params, cfg, batch, true, &mut rng).unwrap();
    let (loss, _) = coifnet_loss(&mut tape, &fwd, batch, lambda).unwrap();
    let value = tape.value(loss).item();
    (value, tape.backward(loss).unwrap().into_map())
}

/// Worst relative error of the full training loss gradient over
/// `per_tensor` random entries of every parameter tensor. Dropout is active
/// with a fixed stream so every evaluation sees the same mask.
pub fn check_end_to_end(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> f64 {
    let mut rng = Rng::seed_from(seed);
    let mut params = CoifNetParams::init(cfg, &mut rng).unwrap();
    // Move away from the symmetric initial point.
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let batch = random_batch(&mut rng, 2, cfg.lookback, cfg.horizon, cfg.width);
    let lambda = rng.uniform();
    let dropout_seed = rng.next_u64();
    let (_, grads) = loss_value(&params, cfg, &batch, lambda, dropout_seed);
    let names: Vec<String> = params.names().cloned().collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = params.get(&name).unwrap().len();
        for _ in 0..per_tensor.min(n) {
            let i = rng.below(n);
            let original = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = original + STEP;
            let up = loss_value(&params, cfg, &batch, lambda, dropout_seed).0;
            params.get_mut(&name).unwrap().data_mut()[i] = original - STEP;
            let down = loss_value(&params, cfg, &batch, lambda, dropout_seed).0;
            params.get_mut(&name).unwrap().data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[&name].data()[i], numeric));
        }
    }
    worst
}

/// Per-primitive gradient checks: `(name, worst relative error)`.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::seed_from(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let positive = |t: Tensor| t.map(|v| v.abs() + 0.5);
    let mut out = Vec::new();
    out.push((
        "matmul",
        check_op(&[("a", r(&[3, 4])), ("b", r(&[4, 2]))], |t, v| {
            t.matmul(v[0], v[1])
        }),
    ));
    out.push((
        "matmul_batched",
        check_op(&[("a", r(&[2, 3, 4])), ("b", r(&[4, 5]))], |t, v| {
            t.matmul(v[0], v[1])
        }),
    ));
    out.push((
        "add_same",
        check_op(&[("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| {
            t.add(v[0], v[1])
        }),
    ));
    out.push((
        "add_trailing",
        check_op(&[("a", r(&[2, 3, 4])), ("b", r(&[4]))], |t, v| {
            t.add(v[0], v[1])
        }),
    ));
    out.push((
        "sub_mapped",
        check_op(&[("a", r(&[2, 3, 4])), ("b", r(&[2, 1, 4]))], |t, v| {
            t.sub(v[0], v[1])
        }),
    ));
    out.push((
        "mul_mapped",
        check_op(&[("a", r(&[2, 3, 4])), ("b", r(&[2, 3, 1]))], |t, v| {
            t.mul(v[0], v[1])
        }),
    ));
    out.push((
        "div",
        check_op(&[("a", r(&[2, 3])), ("b", positive(r(&[2, 3])))], |t, v| {
            t.div(v[0], v[1])
        }),
    ));
    out.push((
        "div_broadcast",
        check_op(&[("a", r(&[2, 3, 2])), ("b", positive(r(&[2])))], |t, v| {
            t.div(v[0], v[1])
        }),
    ));
    out.push((
        "sigmoid",
        check_op(&[("a", r(&[3, 3]))], |t, v| t.sigmoid(v[0])),
    ));
    out.push((
        "abs",
        check_op(
            &[("a", positive(r(&[5])).map(|x| if x > 1.0 { -x } else { x }))],
            |t, v| t.abs(v[0]),
        ),
    ));
    out.push((
        "scale",
        check_op(&[("a", r(&[4]))], |t, v| t.scale(v[0], -2.5)),
    ));
    out.push(("sum", check_op(&[("a", r(&[2, 3]))], |t, v| t.sum(v[0]))));
    out.push((
        "transpose",
        check_op(&[("a", r(&[2, 3, 4]))], |t, v| t.transpose(v[0])),
    ));
    out.push((
        "reshape",
        check_op(&[("a", r(&[2, 6]))], |t, v| t.reshape(v[0], vec![3, 4])),
    ));
    out.push((
        "concat_last",
        check_op(&[("a", r(&[2, 3, 2])), ("b", r(&[2, 3, 1]))], |t, v| {
            t.concat_last(&[v[0], v[1]])
        }),
    ));
    out.push((
        "narrow_mid",
        check_op(&[("a", r(&[2, 5, 3]))], |t, v| t.narrow(v[0], 1, 1, 3)),
    ));
    out.push((
        "narrow_last",
        check_op(&[("a", r(&[2, 5, 3]))], |t, v| t.narrow(v[0], 2, 2, 1)),
    ));
    out.push((
        "gather_rows",
        check_op(&[("a", r(&[4, 3]))], |t, v| {
            t.gather_rows(v[0], &[3, 0, 3, 1, 1])
        }),
    ));
    out.push((
        "clamp_away_from_zero",
        check_op(&[("a", positive(r(&[4])))], |t, v| {
            t.clamp_away_from_zero(v[0], 1e-8)
        }),
    ));
    out.push((
        "dropout",
        check_op(&[("a", r(&[3, 4]))], |t, v| {
            t.dropout(v[0], 0.3, true, &mut Rng::seed_from(11))
        }),
    ));
    out
}
