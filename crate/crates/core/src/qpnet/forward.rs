use std::f64::consts::PI;

use super::{BnSlot, QpNet, FREQ_FLOOR};
use crate::cdesolver::{integrate_trajectory, stage_count, Control, PointwiseField};
use crate::diffcore::{BatchStats, BnMode, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which statistics batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnState {
    /// Batch statistics, recorded for a later running-stat update.
    Train,
    /// Running statistics; the pass has no side effects.
    Eval,
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    BatchNormOnly,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn: BnState,
    pub trainable: Trainable,
    /// Skip the helix/CDE decomposition and pass `z` straight through.
    pub bypass_decomposition: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            bn: BnState::Train,
            trainable: Trainable::All,
            bypass_decomposition: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            bn: BnState::Eval,
            trainable: Trainable::None,
            bypass_decomposition: false,
        }
    }
}

/// Helix parameter fields, each `B × c × h × w`.
#[derive(Clone, Copy, Debug)]
pub struct HelixVars {
    pub f: Var,
    pub phi: Var,
    pub b: Var,
    pub v: Var,
}

/// Graph handles for one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B]` predictions in percent.
    pub y_hat: Var,
    /// `B × T × 1 × H × W`.
    pub x_rec: Var,
    pub z: Var,
    pub helix: Option<HelixVars>,
    pub z_period: Option<Var>,
    pub z_aperiod: Option<Var>,
    pub loss_rec: Var,
    pub loss_reg: Option<Var>,
    /// `loss_reg + loss_rec`, or `loss_rec` without targets.
    pub loss_total: Var,
    /// Batch statistics per batch-norm slot, empty in eval mode.
    pub bn_updates: Vec<(usize, BatchStats)>,
}

/// `cos(2π(ft − φ)) + sin(2π(ft − φ)) + vt + b` for each time, stacked along
/// a new axis 1.
pub fn helix_eval(g: &mut Graph, p: &HelixVars, times: &[f64]) -> Result<Var> {
    let mut frames = Vec::with_capacity(times.len());
    for &t in times {
        let ft = g.scale(p.f, t);
        let cycles = g.sub(ft, p.phi)?;
        let angle = g.scale(cycles, 2.0 * PI);
        let c = g.cos(angle);
        let s = g.sin(angle);
        let osc = g.add(c, s)?;
        let vt = g.scale(p.v, t);
        let drift = g.add(vt, p.b)?;
        frames.push(g.add(osc, drift)?);
    }
    g.stack(&frames, 1)
}

/// Forward-pass context: parameter nodes for one graph plus the recorded
/// batch statistics.
pub struct Forward<'m> {
    model: &'m QpNet,
    opts: ForwardOptions,
    params: Vec<Var>,
    bn_updates: Vec<(usize, BatchStats)>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m QpNet, g: &mut Graph, opts: ForwardOptions) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(id, p)| {
                let trainable = match opts.trainable {
                    Trainable::All => true,
                    Trainable::BatchNormOnly => p.group().is_batch_norm(),
                    Trainable::None => false,
                };
                g.param(model.params(), id, trainable)
            })
            .collect();
        Self {
            model,
            opts,
            params,
            bn_updates: Vec::new(),
        }
    }

    fn p(&self, id: crate::diffcore::ParamId) -> Var {
        self.params[id.0]
    }

    fn bn(&mut self, g: &mut Graph, slot: BnSlot, x: Var) -> Result<Var> {
        let layer = &self.model.bn[slot.index()];
        let (gamma, beta) = (self.p(layer.gamma), self.p(layer.beta));
        let mode = match self.opts.bn {
            BnState::Train => BnMode::Train,
            BnState::Eval => BnMode::Eval {
                mean: &layer.running.mean,
                var: &layer.running.var,
            },
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, mode)?;
        if let Some(s) = stats {
            self.bn_updates.push((slot.index(), s));
        }
        Ok(y)
    }

    fn dims(&self, g: &Graph, x: Var) -> Result<usize> {
        let cfg = self.model.config();
        let s = g.shape(x);
        let expect = cfg.sample_shape();
        if s.len() != 5 || s[1..] != expect {
            let mut want = vec![0];
            want.extend(expect);
            return Err(Error::Shape {
                op: "qpnet input",
                lhs: s.to_vec(),
                rhs: want,
            });
        }
        Ok(s[0])
    }

    /// `B × T × 1 × H × W` frames to the `B × T × c × h × w` latent sequence.
    pub fn encode(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let b = self.dims(g, x)?;
        let cfg = self.model.config().clone();
        let ids = &self.model.ids;
        let (w1, w2) = (self.p(ids.enc_conv1), self.p(ids.enc_conv2));
        let frames = g.reshape(x, &[b * cfg.frames, 1, cfg.frame_size, cfg.frame_size])?;
        let h = g.conv2d(frames, w1, 2, 1)?;
        let h = self.bn(g, BnSlot::Enc1, h)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w2, 2, 1)?;
        let h = self.bn(g, BnSlot::Enc2, h)?;
        let h = g.relu(h);
        let l = cfg.latent_size;
        g.reshape(h, &[b, cfg.frames, cfg.channels, l, l])
    }

    /// Temporal mean of `z`, then one head per helix field.
    pub fn project_periodic_params(&mut self, g: &mut Graph, z: Var) -> Result<HelixVars> {
        let pooled = g.mean(z, &[1])?;
        let mut out = [pooled; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let ids = &self.model.ids;
            let (w1, w2, bias) = (
                self.p(ids.head_conv1[k]),
                self.p(ids.head_conv2[k]),
                self.p(ids.head_bias[k]),
            );
            let h = g.conv2d(pooled, w1, 1, 0)?;
            let h = self.bn(g, BnSlot::Head(k), h)?;
            let h = g.relu(h);
            let h = g.conv2d(h, w2, 1, 0)?;
            *slot = g.add_channel(h, bias)?;
        }
        let sp = g.softplus(out[0]);
        let f = g.add_scalar(sp, FREQ_FLOOR);
        Ok(HelixVars {
            f,
            phi: out[1],
            b: out[2],
            v: out[3],
        })
    }

    /// Integrates the CDE driven by the spline of `z_res` from `z_res[:, 0]`.
    pub fn aperiodic_encode(&mut self, g: &mut Graph, z_res: Var, times: &[f64]) -> Result<Var> {
        let ids = &self.model.ids;
        let layer = &self.model.bn[BnSlot::Field.index()];
        let running = match self.opts.bn {
            BnState::Train => None,
            BnState::Eval => Some(&layer.running),
        };
        let mut field = PointwiseField {
            w1: self.p(ids.field_w1),
            w_t: self.p(ids.field_wt),
            gamma: self.p(layer.gamma),
            beta: self.p(layer.beta),
            w2: self.p(ids.field_w2),
            b2: self.p(ids.field_b2),
            running,
            batch_stats: Vec::new(),
        };
        let z0 = g.select(z_res, 1, 0)?;
        let control = Control::Latent {
            values: z_res,
            time_axis: 1,
        };
        let traj =
            integrate_trajectory(g, &mut field, &control, z0, times, &self.model.config().cde)?;
        if !field.batch_stats.is_empty() {
            let stages = stage_count(times.len(), self.model.config().cde.substeps_per_interval);
            let table = field
                .stage_table(stages)
                .ok_or_else(|| Error::invalid("field batch statistics do not cover every stage"))?;
            self.bn_updates.push((BnSlot::Field.index(), table));
        }
        g.stack(&traj, 1)
    }

    /// `B × T × c × h × w` latents to `B × T × 1 × H × W` frames.
    pub fn decode(&mut self, g: &mut Graph, z_sum: Var) -> Result<Var> {
        let cfg = self.model.config().clone();
        let b = g.shape(z_sum)[0];
        let ids = &self.model.ids;
        let (w1, w2, bias) = (
            self.p(ids.dec_convt1),
            self.p(ids.dec_convt2),
            self.p(ids.dec_bias),
        );
        let l = cfg.latent_size;
        let flat = g.reshape(z_sum, &[b * cfg.frames, cfg.channels, l, l])?;
        let h = g.conv_transpose2d(flat, w1, 2, 1)?;
        let h = self.bn(g, BnSlot::Dec, h)?;
        let h = g.relu(h);
        let h = g.conv_transpose2d(h, w2, 2, 1)?;
        let h = g.add_channel(h, bias)?;
        g.reshape(h, &[b, cfg.frames, 1, cfg.frame_size, cfg.frame_size])
    }

    /// Average over time and space, then a two-layer perceptron: `[B]`.
    pub fn predict_ef(&mut self, g: &mut Graph, z_sum: Var) -> Result<Var> {
        let b = g.shape(z_sum)[0];
        let ids = &self.model.ids;
        let (fc1, b1, fc2, b2) = (
            self.p(ids.fc1),
            self.p(ids.fc1_bias),
            self.p(ids.fc2),
            self.p(ids.fc2_bias),
        );
        let pooled = g.mean(z_sum, &[1, 3, 4])?;
        let h = g.matmul(pooled, fc1)?;
        let h = g.add_channel(h, b1)?;
        let h = g.relu(h);
        let y = g.matmul(h, fc2)?;
        let y = g.add_channel(y, b2)?;
        g.reshape(y, &[b])
    }

    /// The full pipeline on a `B × T × 1 × H × W` batch. With `targets`,
    /// the regression loss is the batch mean of `(ŷ − y)²`.
    pub fn run(
        mut self,
        g: &mut Graph,
        x: &Tensor,
        targets: Option<&[f64]>,
    ) -> Result<ModelOutput> {
        let xv = g.constant(x.clone());
        let b = self.dims(g, xv)?;
        let z = self.encode(g, xv)?;
        let decompose = self.model.config().decomposition && !self.opts.bypass_decomposition;
        let (z_sum, helix, z_period, z_aperiod) = if decompose {
            let times = self.model.config().times();
            let helix = self.project_periodic_params(g, z)?;
            let z_period = helix_eval(g, &helix, &times)?;
            let z_res = g.sub(z, z_period)?;
            let z_aperiod = self.aperiodic_encode(g, z_res, &times)?;
            let z_sum = g.add(z_period, z_aperiod)?;
            (z_sum, Some(helix), Some(z_period), Some(z_aperiod))
        } else {
            (z, None, None, None)
        };
        let x_rec = self.decode(g, z_sum)?;
        let y_hat = self.predict_ef(g, z_sum)?;
        let loss_rec = g.squared_error(x_rec, xv)?;
        let loss_reg = match targets {
            Some(y) => {
                if y.len() != b {
                    return Err(Error::Shape {
                        op: "regression targets",
                        lhs: vec![y.len()],
                        rhs: vec![b],
                    });
                }
                let yv = g.constant(Tensor::new(&[b], y.to_vec())?);
                Some(g.squared_error(y_hat, yv)?)
            }
            None => None,
        };
        let loss_total = match loss_reg {
            Some(r) => g.add(r, loss_rec)?,
            None => loss_rec,
        };
        Ok(ModelOutput {
            y_hat,
            x_rec,
            z,
            helix,
            z_period,
            z_aperiod,
            loss_rec,
            loss_reg,
            loss_total,
            bn_updates: self.bn_updates,
        })
    }
}
