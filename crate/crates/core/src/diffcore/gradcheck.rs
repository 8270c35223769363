//! Central finite-difference oracle for the reverse sweep.
//!
//! The oracle only ever reads forward values, so it stays independent of the
//! backward rules it checks. Errors are reported per input tensor as
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, NORM_FLOOR)`.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{BnMode, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::{child_rng, Rng};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradient norms below this are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-6;

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    // gradients that vanish analytically leave only rounding noise
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Worst relative error over all inputs of `f` at the given point.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward_grads(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item().expect("scalar loss"))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            numeric[j] = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst relative error over every parameter tensor in `store` for the loss
/// built by `f`. Perturbations bypass the `f32` rounding of parameter values.
pub fn check_param_gradients<F>(store: &ParamStore, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(param_gradient_errors(store, step, f)?
        .into_iter()
        .fold(0.0, |worst, (_, e)| worst.max(e)))
}

/// Relative error per parameter tensor, by parameter name.
pub fn param_gradient_errors<F>(store: &ParamStore, step: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, &analytic_store)?;
        g.backward(loss, &mut analytic_store)?;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item().expect("scalar loss"))
    };
    let mut work = store.clone();
    let mut errors = Vec::new();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value().len();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let x = store.get(id).value().data()[j];
            work.get_mut(id).value_mut().data_mut()[j] = x + step;
            let plus = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[j] = x - step;
            let minus = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[j] = x;
            numeric[j] = (plus - minus) / (2.0 * step);
        }
        let analytic = analytic_store.get(id).grad().data();
        errors.push((
            store.get(id).name().to_string(),
            relative_error(analytic, &numeric),
        ));
    }
    Ok(errors)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Standard normal values pushed away from zero, for kinked primitives.
fn randn_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 } + *v;
        }
    }
    t
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Names of the primitives covered by [`primitive_suite`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "add_channel",
    "conv2d",
    "conv_transpose2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "tanh",
    "softplus",
    "sin",
    "cos",
    "mean",
    "squared_error",
    "reshape",
    "repeat",
    "select",
    "stack",
    "mix_axis",
];

/// Runs a finite-difference check of one primitive at a random point.
pub fn check_primitive(name: &str, rng: &mut Rng) -> Result<f64> {
    let step = DEFAULT_STEP;
    match name {
        "add" | "sub" | "mul" => {
            let shape = [2, 3];
            let (a, b, w) = (randn(rng, &shape), randn(rng, &shape), randn(rng, &shape));
            check_gradients(&[a, b], step, |g, v| {
                let y = match name {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                weighted_sum(g, y, &w)
            })
        }
        "scale" | "add_scalar" => {
            let c: f64 = rng.gen_range(-2.0..2.0);
            let (a, w) = (randn(rng, &[5]), randn(rng, &[5]));
            check_gradients(&[a], step, |g, v| {
                let y = if name == "scale" {
                    g.scale(v[0], c)
                } else {
                    g.add_scalar(v[0], c)
                };
                weighted_sum(g, y, &w)
            })
        }
        "matmul" => {
            let (a, b, w) = (
                randn(rng, &[3, 4]),
                randn(rng, &[4, 2]),
                randn(rng, &[3, 2]),
            );
            check_gradients(&[a, b], step, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, &w)
            })
        }
        "add_channel" => {
            let (x, b, w) = (
                randn(rng, &[2, 3, 2]),
                randn(rng, &[3]),
                randn(rng, &[2, 3, 2]),
            );
            check_gradients(&[x, b], step, |g, v| {
                let y = g.add_channel(v[0], v[1])?;
                weighted_sum(g, y, &w)
            })
        }
        "conv2d" => {
            let stride = rng.gen_range(1..=2);
            let (x, k) = (randn(rng, &[2, 2, 5, 5]), randn(rng, &[3, 2, 3, 3]));
            let ho = (5 + 2 - 3) / stride + 1;
            let w = randn(rng, &[2, 3, ho, ho]);
            check_gradients(&[x, k], step, |g, v| {
                let y = g.conv2d(v[0], v[1], stride, 1)?;
                weighted_sum(g, y, &w)
            })
        }
        "conv_transpose2d" => {
            let (x, k) = (randn(rng, &[2, 3, 3, 3]), randn(rng, &[3, 2, 4, 4]));
            let w = randn(rng, &[2, 2, 6, 6]);
            check_gradients(&[x, k], step, |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], 2, 1)?;
                weighted_sum(g, y, &w)
            })
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let x = randn(rng, &[3, 2, 2, 2]);
            let (gamma, beta) = (randn(rng, &[2]), randn(rng, &[2]));
            let w = randn(rng, &[3, 2, 2, 2]);
            let mean = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let var = vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
            let train = name == "batch_norm_train";
            check_gradients(&[x, gamma, beta], step, |g, v| {
                let mode = if train {
                    BnMode::Train
                } else {
                    BnMode::Eval {
                        mean: &mean,
                        var: &var,
                    }
                };
                let (y, _) = g.batch_norm(v[0], v[1], v[2], mode)?;
                weighted_sum(g, y, &w)
            })
        }
        "relu" | "tanh" | "softplus" | "sin" | "cos" => {
            let x = randn_away_from_zero(rng, &[2, 4]);
            let x = if name == "softplus" {
                let mut t = x;
                t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
                t
            } else {
                x
            };
            let w = randn(rng, &[2, 4]);
            check_gradients(&[x], step, |g, v| {
                let y = match name {
                    "relu" => g.relu(v[0]),
                    "tanh" => g.tanh(v[0]),
                    "softplus" => g.softplus(v[0]),
                    "sin" => g.sin(v[0]),
                    _ => g.cos(v[0]),
                };
                weighted_sum(g, y, &w)
            })
        }
        "mean" => {
            let x = randn(rng, &[2, 3, 4]);
            let axes: &[usize] = match rng.gen_range(0..3) {
                0 => &[1],
                1 => &[0, 2],
                _ => &[0, 1, 2],
            };
            let mut out_shape: Vec<usize> = [2, 3, 4]
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if out_shape.is_empty() {
                out_shape = vec![];
            }
            let w = randn(rng, &out_shape);
            check_gradients(&[x], step, |g, v| {
                let y = g.mean(v[0], axes)?;
                weighted_sum(g, y, &w)
            })
        }
        "squared_error" => {
            let (a, b) = (randn(rng, &[2, 3]), randn(rng, &[2, 3]));
            check_gradients(&[a, b], step, |g, v| g.squared_error(v[0], v[1]))
        }
        "reshape" => {
            let (x, w) = (randn(rng, &[2, 6]), randn(rng, &[3, 4]));
            check_gradients(&[x], step, |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                weighted_sum(g, y, &w)
            })
        }
        "repeat" => {
            let (x, w) = (randn(rng, &[2, 3]), randn(rng, &[2, 4, 3]));
            check_gradients(&[x], step, |g, v| {
                let y = g.repeat(v[0], 1, 4)?;
                weighted_sum(g, y, &w)
            })
        }
        "select" => {
            let index = rng.gen_range(0..3);
            let (x, w) = (randn(rng, &[2, 3, 2]), randn(rng, &[2, 2]));
            check_gradients(&[x], step, |g, v| {
                let y = g.select(v[0], 1, index)?;
                weighted_sum(g, y, &w)
            })
        }
        "stack" => {
            let (a, b, w) = (
                randn(rng, &[2, 3]),
                randn(rng, &[2, 3]),
                randn(rng, &[2, 2, 3]),
            );
            check_gradients(&[a, b], step, |g, v| {
                let y = g.stack(&[v[0], v[1]], 1)?;
                weighted_sum(g, y, &w)
            })
        }
        "mix_axis" => {
            let m = Arc::new(randn(rng, &[5, 3]));
            let (x, w) = (randn(rng, &[2, 3, 2]), randn(rng, &[2, 5, 2]));
            check_gradients(&[x], step, |g, v| {
                let y = g.mix_axis(v[0], 1, m.clone())?;
                weighted_sum(g, y, &w)
            })
        }
        other => Err(crate::Error::invalid(format!("unknown primitive {other}"))),
    }
}

/// Worst relative error per primitive over `points` random evaluation points.
pub fn primitive_suite(points: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = child_rng(seed, 0x6772_6164, i as u64);
            let mut worst = 0.0f64;
            for _ in 0..points {
                worst = worst.max(check_primitive(name, &mut rng)?);
            }
            Ok((name, worst))
        })
        .collect()
}
