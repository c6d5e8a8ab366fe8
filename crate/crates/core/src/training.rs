//! Adam, Xavier initialisation and staged training.
//!
//! A schedule is a list of stages, each with its own loss, learning rate and
//! epoch count. The usual progression is MSE, then interval tolerance loss,
//! then symbolic loss with growing `κ`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{loss_and_gradients, LossKind};
use crate::network::{LayerKind, Network};
use crate::tensor::Tensor;

/// Generator streams fanned out from one seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DATA: u64 = 2;
}

/// Seeded generator on a given stream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::contract("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Uniform Xavier/Glorot weights and zero biases, deterministic in `seed`.
///
/// Dense `[out × in]` uses `fan_in = in`, `fan_out = out`; a conv kernel
/// `[kh × kw × c × f]` uses `kh·kw·c` and `kh·kw·f`.
pub fn init_weights(net: &mut Network, seed: u64) {
    let mut rng = seeded_rng(seed, streams::INIT);
    for layer in net.layers_mut() {
        let (weight, bias, fan_in, fan_out) = match &mut layer.kind {
            LayerKind::Dense { weight, bias } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                (weight, bias, i, o)
            }
            LayerKind::Conv2d { kernel, bias, .. } => {
                let s = kernel.shape();
                let area = s[0] * s[1];
                let (fi, fo) = (area * s[2], area * s[3]);
                (kernel, bias, fi, fo)
            }
            _ => continue,
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in weight.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        bias.data_mut().fill(0.0);
    }
}

/// Sets the bias of the final dense layer to the mean training label, so
/// regression in pixel units does not start hundreds of pixels off.
pub fn init_output_bias(net: &mut Network, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::contract("need samples to compute the label mean"));
    }
    let d = net.output_dim();
    let mut mean = vec![0.0; d];
    for s in samples {
        if s.label.len() != d {
            return Err(Error::contract("label width does not match network output"));
        }
        for (m, l) in mean.iter_mut().zip(&s.label) {
            *m += l;
        }
    }
    for m in &mut mean {
        *m /= samples.len() as f64;
    }
    let last = net
        .layers_mut()
        .iter_mut()
        .rev()
        .find(|l| matches!(l.kind, LayerKind::Dense { .. }))
        .ok_or_else(|| Error::contract("network has no dense output layer"))?;
    if let LayerKind::Dense { bias, .. } = &mut last.kind {
        *bias = Tensor::vector(mean);
    }
    Ok(())
}

/// Adam first/second moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `learning_rate`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &OptimizerConfig,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "Adam got {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// One block of epochs with a fixed loss and learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub loss: LossKind,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    /// Ramp `κ` linearly from 0 over the first half of each symbolic stage.
    pub kappa_warmup: bool,
    /// Start every stage with fresh Adam moments.
    pub reset_optimizer_per_stage: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stages: Vec::new(),
            batch_size: 32,
            kappa_warmup: true,
            reset_optimizer_per_stage: true,
        }
    }
}

impl Schedule {
    /// MSE at 0.01 for 20 epochs, then at 0.001 for 10.
    pub fn baseline() -> Self {
        Self {
            stages: vec![
                Stage {
                    loss: LossKind::Mse,
                    epochs: 20,
                    learning_rate: 0.01,
                },
                Stage {
                    loss: LossKind::Mse,
                    epochs: 10,
                    learning_rate: 0.001,
                },
            ],
            ..Self::default()
        }
    }

    /// The baseline followed by 10 symbolic epochs at 0.001.
    pub fn robust(spec: crate::interval::RobustSpec) -> Self {
        let mut s = Self::baseline();
        s.stages.push(Stage {
            loss: LossKind::Symbolic { spec },
            epochs: 10,
            learning_rate: 0.001,
        });
        s
    }

    pub fn validate_for(&self, net: &Network) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::contract("schedule has no stages"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 {
                return Err(Error::contract(format!("stage {i} has zero epochs")));
            }
            if !(s.learning_rate > 0.0) {
                return Err(Error::contract(format!("stage {i} has a nonpositive learning rate")));
            }
            s.loss.validate_for(net)?;
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: usize,
    pub loss_kind: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub wall_time_s: f64,
}

/// `κ` in effect at optimizer step `step` of a stage with `total` steps.
pub fn warmup_kappa(target: f64, step: usize, total: usize) -> f64 {
    let warm = total / 2;
    if warm == 0 || step >= warm {
        target
    } else {
        target * step as f64 / warm as f64
    }
}

/// Runs every stage of `schedule` on `net`, returning the per-epoch log.
pub fn run_schedule(
    net: &mut Network,
    train_set: &[Sample],
    schedule: &Schedule,
    config: &OptimizerConfig,
) -> Result<Vec<EpochMetrics>> {
    run_schedule_with(net, train_set, schedule, config, |_| {})
}

/// [`run_schedule`] with a callback after every epoch.
pub fn run_schedule_with(
    net: &mut Network,
    train_set: &[Sample],
    schedule: &Schedule,
    config: &OptimizerConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    schedule.validate_for(net)?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let started = Instant::now();
    let mut rng = seeded_rng(config.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batches_per_epoch = train_set.len().div_ceil(schedule.batch_size);
    let mut state = AdamState::for_params(net.parameters());
    let mut log = Vec::new();

    for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        if schedule.reset_optimizer_per_stage {
            state = AdamState::for_params(net.parameters());
        }
        let total_steps = stage.epochs * batches_per_epoch;
        let mut step_in_stage = 0;
        for epoch in 0..stage.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut kappa_now = None;
            for (batch_idx, chunk) in order.chunks(schedule.batch_size).enumerate() {
                let loss = match &stage.loss {
                    LossKind::Symbolic { spec } if schedule.kappa_warmup => {
                        let mut spec = spec.clone();
                        spec.kappa = warmup_kappa(spec.kappa, step_in_stage, total_steps);
                        LossKind::Symbolic { spec }
                    }
                    other => other.clone(),
                };
                if let LossKind::Symbolic { spec } = &loss {
                    kappa_now = Some(spec.kappa);
                }
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
                let (report, grads) = loss_and_gradients(net, &batch, &loss)?;
                if !report.value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "stage {stage_idx} epoch {epoch} batch {batch_idx}: loss {}",
                        report.value
                    )));
                }
                sum += report.per_sample.iter().sum::<f64>();
                let mut params = net.parameters_mut();
                adam_step(&mut params, &grads, &mut state, config, stage.learning_rate)?;
                step_in_stage += 1;
            }
            let metrics = EpochMetrics {
                stage: stage_idx,
                loss_kind: stage.loss.label().to_string(),
                epoch,
                loss: sum / train_set.len() as f64,
                kappa: kappa_now,
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            on_epoch(&metrics);
            log.push(metrics);
        }
    }
    Ok(log)
}

/// Indices of the `k` smallest scores, ties broken by index.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
