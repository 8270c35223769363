//! Fixed-step RK4 integration of `dz/dt = f(z, t) ⊙ V'(t)` on the graph.
//!
//! Every stage is recorded as ordinary graph operations, so gradients reach
//! the initial state, the field parameters and (for latent controls) the
//! control values by differentiating through the discrete solver.

use std::sync::Arc;

use crate::diffcore::{BatchStats, BnMode, Graph, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::spline::{derivative_basis, ControlPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CdeConfig {
    pub substeps_per_interval: usize,
}

impl Default for CdeConfig {
    fn default() -> Self {
        Self {
            substeps_per_interval: 4,
        }
    }
}

impl CdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_interval == 0 {
            return Err(Error::invalid("substeps_per_interval must be at least 1"));
        }
        Ok(())
    }
}

/// `f(z, t)`; the output must have the shape of `state`. `stage` indexes
/// `t` within the solver's stage grid (see [`stage_count`]).
pub trait VectorField {
    fn eval(&mut self, g: &mut Graph, state: Var, t: f64, stage: usize) -> Result<Var>;
}

/// `f(z, t) = z`.
pub struct IdentityField;

impl VectorField for IdentityField {
    fn eval(&mut self, _g: &mut Graph, state: Var, _t: f64, _stage: usize) -> Result<Var> {
        Ok(state)
    }
}

/// Two-layer perceptron on a flat state: `W₂ tanh(W_z z + t·w_t + b₁) + b₂`.
///
/// The state is `[D]` or `[B, D]`. `w_z` is `D × H`, `w_t` and `b1` are
/// `[H]`, `w2` is `H × D` and `b2` is `[D]`. The `(D+1) × H` input layer is
/// stored split into its state and time columns.
pub struct MlpField {
    pub w_z: Var,
    pub w_t: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl VectorField for MlpField {
    fn eval(&mut self, g: &mut Graph, state: Var, t: f64, _stage: usize) -> Result<Var> {
        let shape = g.shape(state).to_vec();
        let d = *shape.last().unwrap_or(&0);
        let rows = g.value(state).len() / d.max(1);
        let flat = g.reshape(state, &[rows, d])?;
        let pre = g.matmul(flat, self.w_z)?;
        let tw = g.scale(self.w_t, t);
        let bias = g.add(self.b1, tw)?;
        let pre = g.add_channel(pre, bias)?;
        let hidden = g.tanh(pre);
        let out = g.matmul(hidden, self.w2)?;
        let out = g.add_channel(out, self.b2)?;
        g.reshape(out, &shape)
    }
}

/// Per-location field on `B × c × h × w` states, shared across positions:
/// `W₂ tanh(BN(W₁ z) + t·w_t) + b₂` with 1×1 convolutions. Time is added
/// after normalization, where batch statistics cannot cancel it.
///
/// The input distribution drifts along the trajectory, so normalization
/// statistics are kept per stage: the running table has one row of
/// channel statistics for every stage time.
pub struct PointwiseField<'a> {
    pub w1: Var,
    pub w_t: Var,
    pub gamma: Var,
    pub beta: Var,
    pub w2: Var,
    pub b2: Var,
    /// `None` normalizes with batch statistics and records them.
    pub running: Option<&'a RunningStats>,
    /// Batch statistics of every call, tagged with its stage.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl PointwiseField<'_> {
    /// Running-table layout of the recorded batch statistics: each stage row
    /// holds the mean over that stage's calls. `None` if nothing was
    /// recorded or a stage was never visited.
    pub fn stage_table(&self, stages: usize) -> Option<BatchStats> {
        let c = self.batch_stats.first()?.1.mean.len();
        let mut mean = vec![0.0; stages * c];
        let mut var = vec![0.0; stages * c];
        let mut counts = vec![0usize; stages];
        for (stage, s) in &self.batch_stats {
            let row = *stage * c..(*stage + 1) * c;
            mean.get_mut(row.clone())?
                .iter_mut()
                .zip(&s.mean)
                .for_each(|(a, b)| *a += b);
            var[row]
                .iter_mut()
                .zip(&s.var_unbiased)
                .for_each(|(a, b)| *a += b);
            counts[*stage] += 1;
        }
        for (stage, &n) in counts.iter().enumerate() {
            if n == 0 {
                return None;
            }
            let row = stage * c..(stage + 1) * c;
            mean[row.clone()].iter_mut().for_each(|a| *a /= n as f64);
            var[row].iter_mut().for_each(|a| *a /= n as f64);
        }
        Some(BatchStats {
            mean,
            var_unbiased: var,
        })
    }
}

impl VectorField for PointwiseField<'_> {
    fn eval(&mut self, g: &mut Graph, state: Var, t: f64, stage: usize) -> Result<Var> {
        let pre = g.conv2d(state, self.w1, 1, 0)?;
        let c = g.shape(pre)[1];
        let mode = match self.running {
            Some(rs) => {
                let row = stage * c..(stage + 1) * c;
                match (rs.mean.get(row.clone()), rs.var.get(row)) {
                    (Some(mean), Some(var)) => BnMode::Eval { mean, var },
                    _ => {
                        return Err(Error::Shape {
                            op: "field running stats",
                            lhs: vec![rs.mean.len()],
                            rhs: vec![stage + 1, c],
                        })
                    }
                }
            }
            None => BnMode::Train,
        };
        let (normed, stats) = g.batch_norm(pre, self.gamma, self.beta, mode)?;
        if let Some(s) = stats {
            self.batch_stats.push((stage, s));
        }
        let tw = g.scale(self.w_t, t);
        let shifted = g.add_channel(normed, tw)?;
        let hidden = g.tanh(shifted);
        let out = g.conv2d(hidden, self.w2, 1, 0)?;
        g.add_channel(out, self.b2)
    }
}

/// Source of the control derivative `V'(t)`.
pub enum Control<'a> {
    /// A fitted path whose channel count equals the state size.
    Path(&'a ControlPath),
    /// Knot values on the graph, with time along `time_axis`; the spline fit
    /// is linear in the values, so `V'` stays differentiable w.r.t. them.
    Latent { values: Var, time_axis: usize },
}

/// Number of distinct stage times for `knots` knots and `substeps` RK4
/// substeps per interval.
pub fn stage_count(knots: usize, substeps: usize) -> usize {
    knots.saturating_sub(1) * 2 * substeps + 1
}

/// Stage times `t_i + j·h/2` for every interval and half-substep, in order.
fn stage_times(times: &[f64], substeps: usize) -> Vec<f64> {
    let per = 2 * substeps;
    let mut out = Vec::with_capacity((times.len() - 1) * per + 1);
    for w in times.windows(2) {
        let dt = (w[1] - w[0]) / per as f64;
        out.extend((0..per).map(|j| w[0] + j as f64 * dt));
    }
    out.push(*times.last().expect("at least two knots"));
    out
}

/// Integrates from `z0` at `times[0]` and returns the state at every knot
/// time; entry 0 is `z0` itself.
pub fn integrate_trajectory(
    g: &mut Graph,
    field: &mut dyn VectorField,
    control: &Control,
    z0: Var,
    times: &[f64],
    cfg: &CdeConfig,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    if times.len() < 2 {
        return Err(Error::invalid("integration needs at least two knot times"));
    }
    let state_shape = g.shape(z0).to_vec();
    let state_len = g.value(z0).len();
    let m = cfg.substeps_per_interval;
    let stages = stage_times(times, m);

    // All control derivatives at once, indexed by stage along `axis`.
    let (derivs, axis) = match control {
        Control::Path(path) => {
            if path.knot_times() != times {
                return Err(Error::invalid("times do not match the control path knots"));
            }
            if path.channels() != state_len {
                return Err(Error::Shape {
                    op: "integrate_trajectory",
                    lhs: vec![path.channels()],
                    rhs: state_shape,
                });
            }
            let mut data = Vec::with_capacity(stages.len() * state_len);
            for &t in &stages {
                data.extend(path.eval_derivative(t)?);
            }
            (
                g.constant(Tensor::new(&[stages.len(), state_len], data)?),
                0,
            )
        }
        Control::Latent { values, time_axis } => {
            let vshape = g.shape(*values).to_vec();
            if vshape.get(*time_axis) != Some(&times.len()) {
                return Err(Error::invalid(format!(
                    "control has {:?} knots along axis {time_axis}, expected {}",
                    vshape.get(*time_axis),
                    times.len()
                )));
            }
            let mut expect = vshape.clone();
            expect.remove(*time_axis);
            if expect != state_shape {
                return Err(Error::Shape {
                    op: "integrate_trajectory",
                    lhs: expect,
                    rhs: state_shape,
                });
            }
            let basis = derivative_basis(times, &stages)?;
            (
                g.mix_axis(*values, *time_axis, Arc::new(basis))?,
                *time_axis,
            )
        }
    };
    let control_at = |g: &mut Graph, s: usize| -> Result<Var> {
        let d = g.select(derivs, axis, s)?;
        if g.shape(d) == state_shape.as_slice() {
            Ok(d)
        } else {
            g.reshape(d, &state_shape)
        }
    };

    let mut trajectory = Vec::with_capacity(times.len());
    trajectory.push(z0);
    let mut z = z0;
    for (interval, w) in times.windows(2).enumerate() {
        let h = (w[1] - w[0]) / m as f64;
        for sub in 0..m {
            let base = interval * 2 * m + 2 * sub;
            let t0 = stages[base];
            let (tm, t1) = (t0 + 0.5 * h, t0 + h);

            let v0 = control_at(g, base)?;
            let vm = control_at(g, base + 1)?;
            let v1 = control_at(g, base + 2)?;

            let f1 = field.eval(g, z, t0, base)?;
            let k1 = g.mul(f1, v0)?;
            let dz = g.scale(k1, 0.5 * h);
            let z2 = g.add(z, dz)?;
            let f2 = field.eval(g, z2, tm, base + 1)?;
            let k2 = g.mul(f2, vm)?;
            let dz = g.scale(k2, 0.5 * h);
            let z3 = g.add(z, dz)?;
            let f3 = field.eval(g, z3, tm, base + 1)?;
            let k3 = g.mul(f3, vm)?;
            let dz = g.scale(k3, h);
            let z4 = g.add(z, dz)?;
            let f4 = field.eval(g, z4, t1, base + 2)?;
            let k4 = g.mul(f4, v1)?;

            let k23 = g.add(k2, k3)?;
            let k23 = g.scale(k23, 2.0);
            let k14 = g.add(k1, k4)?;
            let sum = g.add(k14, k23)?;
            let dz = g.scale(sum, h / 6.0);
            z = g.add(z, dz)?;
            if !g.value(z).all_finite() {
                return Err(Error::NonFinite(format!(
                    "CDE state at interval {interval}, substep {sub} (t = {t1:.6})"
                )));
            }
        }
        trajectory.push(z);
    }
    Ok(trajectory)
}
