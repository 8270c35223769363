//! The quasi-periodic network.
//!
//! A per-frame convolutional encoder produces a latent sequence `z`. Four
//! projection heads read its temporal mean and emit helix parameters
//! `f, φ, b, v`; the helix trajectory is subtracted from `z` and the residual
//! drives a controlled differential equation whose solution is the aperiodic
//! component. The sum of both components feeds a transposed-convolution
//! decoder (reconstruction) and a pooled regression head (EF in percent).

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    helix_eval, BnState, Forward, ForwardOptions, HelixVars, ModelOutput, Trainable,
};
pub use train::{
    batch_tensor, predict, train, train_step, train_with, EpochStats, StepConfig, StepLosses,
    TrainConfig, TrainReport, CLIP_NORM,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cdesolver::{stage_count, CdeConfig};
use crate::diffcore::{BatchStats, Param, ParamGroup, ParamId, ParamStore, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::rng::child_rng;

/// Lower bound added to the softplus of the frequency head.
pub const FREQ_FLOOR: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frames: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub latent_size: usize,
    pub field_hidden: usize,
    pub head_hidden: usize,
    pub cde: CdeConfig,
    /// `false` skips the helix/CDE decomposition and uses `z` directly.
    pub decomposition: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            frame_size: 16,
            channels: 8,
            latent_size: 4,
            field_hidden: 64,
            head_hidden: 32,
            cde: CdeConfig::default(),
            decomposition: true,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            frames: 4,
            frame_size: 8,
            channels: 2,
            latent_size: 2,
            field_hidden: 4,
            head_hidden: 4,
            cde: CdeConfig {
                substeps_per_interval: 2,
            },
            decomposition: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("frame_size", self.frame_size),
            ("channels", self.channels),
            ("latent_size", self.latent_size),
            ("field_hidden", self.field_hidden),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.frames < 2 {
            return Err(Error::invalid("frames must be at least 2"));
        }
        if self.frame_size != 4 * self.latent_size {
            return Err(Error::invalid(format!(
                "two stride-2 stages map frame_size {} to {}, not latent_size {}",
                self.frame_size,
                self.frame_size / 4,
                self.latent_size
            )));
        }
        self.cde.validate()
    }

    /// Normalized frame times `k / T`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|k| k as f64 / self.frames as f64)
            .collect()
    }

    /// Shape of one input sequence: `T × 1 × H × W`.
    pub fn sample_shape(&self) -> [usize; 4] {
        [self.frames, 1, self.frame_size, self.frame_size]
    }
}

/// Batch-norm layers in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BnSlot {
    Enc1,
    Enc2,
    Head(usize),
    Field,
    Dec,
}

impl BnSlot {
    pub(crate) fn index(self) -> usize {
        match self {
            BnSlot::Enc1 => 0,
            BnSlot::Enc2 => 1,
            BnSlot::Head(k) => 2 + k,
            BnSlot::Field => 6,
            BnSlot::Dec => 7,
        }
    }
}

pub const HELIX_FIELDS: [&str; 4] = ["f", "phi", "b", "v"];

#[derive(Clone, Debug)]
pub(crate) struct BnLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats,
}

#[derive(Clone, Debug)]
pub(crate) struct WeightIds {
    pub enc_conv1: ParamId,
    pub enc_conv2: ParamId,
    pub head_conv1: [ParamId; 4],
    pub head_conv2: [ParamId; 4],
    pub head_bias: [ParamId; 4],
    pub field_w1: ParamId,
    pub field_wt: ParamId,
    pub field_w2: ParamId,
    pub field_b2: ParamId,
    pub dec_convt1: ParamId,
    pub dec_convt2: ParamId,
    pub dec_bias: ParamId,
    pub fc1: ParamId,
    pub fc1_bias: ParamId,
    pub fc2: ParamId,
    pub fc2_bias: ParamId,
}

/// Parameters, running statistics and configuration of one model replica.
#[derive(Clone, Debug)]
pub struct QpNet {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    pub(crate) bn: Vec<BnLayer>,
    pub(crate) ids: WeightIds,
}

struct Init {
    rng: crate::rng::Rng,
    params: ParamStore,
}

impl Init {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape, data).expect("positive dims");
        self.params.push(Param::new(name, t, ParamGroup::Backbone))
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup) -> ParamId {
        self.params
            .push(Param::new(name, Tensor::full(shape, value), group))
    }

    fn bn(&mut self, name: &str, channels: usize, group: ParamGroup) -> BnLayer {
        BnLayer {
            name: name.to_string(),
            gamma: self.constant(&format!("{name}.gamma"), &[channels], 1.0, group),
            beta: self.constant(&format!("{name}.beta"), &[channels], 0.0, group),
            running: RunningStats::new(channels),
        }
    }
}

/// `softplus⁻¹(y)` for the frequency head's initial bias.
fn inverse_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

impl QpNet {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let hf = config.field_hidden;
        let hh = config.head_hidden;
        let mut init = Init {
            rng: child_rng(seed, 0x696e_6974, 0),
            params: ParamStore::new(),
        };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let lecun = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

        let enc_conv1 = init.normal("enc.conv1", &[c, 1, 3, 3], he(9));
        let bn_enc1 = init.bn("enc.bn1", c, ParamGroup::BaseBn);
        let enc_conv2 = init.normal("enc.conv2", &[c, c, 3, 3], he(9 * c));
        let bn_enc2 = init.bn("enc.bn2", c, ParamGroup::BaseBn);

        let mut head_conv1 = [ParamId(0); 4];
        let mut head_conv2 = [ParamId(0); 4];
        let mut head_bias = [ParamId(0); 4];
        let mut bn_heads = Vec::with_capacity(4);
        for (k, field) in HELIX_FIELDS.iter().enumerate() {
            head_conv1[k] = init.normal(&format!("head.{field}.conv1"), &[c, c, 1, 1], he(c));
            bn_heads.push(init.bn(&format!("head.{field}.bn"), c, ParamGroup::PeriodicBn));
            head_conv2[k] = init.normal(
                &format!("head.{field}.conv2"),
                &[c, c, 1, 1],
                0.5 * lecun(c),
            );
            let bias = if *field == "f" {
                inverse_softplus(2.0 - FREQ_FLOOR)
            } else {
                0.0
            };
            head_bias[k] = init.constant(
                &format!("head.{field}.bias"),
                &[c],
                bias,
                ParamGroup::Backbone,
            );
        }

        let field_w1 = init.normal("field.w1", &[hf, c, 1, 1], lecun(c));
        let mut bn_field = init.bn("field.bn", hf, ParamGroup::AperiodicBn);
        bn_field.running =
            RunningStats::new(stage_count(config.frames, config.cde.substeps_per_interval) * hf);
        let field_wt = init.normal("field.wt", &[hf], 0.1);
        let field_w2 = init.normal("field.w2", &[c, hf, 1, 1], 0.1 * lecun(hf));
        let field_b2 = init.constant("field.b2", &[c], 0.0, ParamGroup::Backbone);

        let dec_convt1 = init.normal("dec.convt1", &[c, c, 4, 4], he(4 * c));
        let bn_dec = init.bn("dec.bn", c, ParamGroup::BaseBn);
        let dec_convt2 = init.normal("dec.convt2", &[c, 1, 4, 4], 0.1 * lecun(4 * c));
        let dec_bias = init.constant("dec.bias", &[1], 0.3, ParamGroup::Backbone);

        let fc1 = init.normal("reg.fc1", &[c, hh], he(c));
        let fc1_bias = init.constant("reg.fc1_bias", &[hh], 0.0, ParamGroup::Backbone);
        let fc2 = init.normal("reg.fc2", &[hh, 1], lecun(hh));
        let fc2_bias = init.constant("reg.fc2_bias", &[1], 50.0, ParamGroup::Backbone);

        let mut bn = vec![bn_enc1, bn_enc2];
        bn.extend(bn_heads);
        bn.push(bn_field);
        bn.push(bn_dec);

        Ok(Self {
            config,
            seed,
            params: init.params,
            bn,
            ids: WeightIds {
                enc_conv1,
                enc_conv2,
                head_conv1,
                head_conv2,
                head_bias,
                field_w1,
                field_wt,
                field_w2,
                field_b2,
                dec_convt1,
                dec_convt2,
                dec_bias,
                fc1,
                fc1_bias,
                fc2,
                fc2_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Running statistics of every batch-norm layer, by layer name.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.bn.iter().map(|l| (l.name.as_str(), &l.running))
    }

    /// `(layer name, γ, β)` of every batch-norm layer.
    pub fn batch_norm_params(&self) -> impl Iterator<Item = (&str, ParamId, ParamId)> {
        self.bn.iter().map(|l| (l.name.as_str(), l.gamma, l.beta))
    }

    /// Folds batch statistics recorded by a train-mode forward into the
    /// running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        for (slot, stats) in updates {
            self.bn[*slot].running.update(stats);
        }
    }

    /// Bitwise equality of parameter values and running statistics.
    pub fn same_state(&self, other: &QpNet) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((_, a), (_, b))| a.name() == b.name() && a.value() == b.value())
            && self
                .bn
                .iter()
                .zip(&other.bn)
                .all(|(a, b)| a.running == b.running)
    }

    /// Copies parameter values and running statistics from `other`, which
    /// must share this model's configuration.
    pub fn restore_from(&mut self, other: &QpNet) -> Result<()> {
        if self.config != other.config {
            return Err(Error::invalid(
                "cannot restore from a model with a different config",
            ));
        }
        self.params = other.params.clone();
        for (dst, src) in self.bn.iter_mut().zip(&other.bn) {
            dst.running = src.running.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
