//! Spatio-temporal backpropagation with a rectangular surrogate derivative,
//! minibatch SGD with momentum, and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_io::{prepare_frames, EventError, EventSample, SpikeFrames, WindowMode};
use crate::ops::{self, ConvGeom};
use crate::spiking::{decode, forward, forward_with, ForwardOptions, ForwardOutput, LayerKind, NetError, NetworkSpec, ResetMode, SpikeFn, WeightSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("forward pass was run without recording a trace")]
    MissingTrace,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    /// Radius `a` of the rectangular window around the threshold.
    pub half_width: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { half_width: 0.5 }
    }
}

/// `1/(2a)` inside `|v - v_th| <= a`, zero elsewhere.
#[inline]
pub fn surrogate_derivative(v: f64, v_threshold: f64, params: &SurrogateParams) -> f64 {
    let a = params.half_width;
    if (v - v_threshold).abs() <= a {
        1.0 / (2.0 * a)
    } else {
        0.0
    }
}

/// Mean squared error between firing rates and the one-hot target.
pub fn loss(rates: &[f64], label: usize) -> f64 {
    let n = rates.len() as f64;
    rates
        .iter()
        .enumerate()
        .map(|(c, r)| {
            let target = if c == label { 1.0 } else { 0.0 };
            (r - target).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`loss`] with respect to each output spike at any timestep.
fn output_spike_grad(counts: &[f64], timesteps: usize, label: usize) -> Vec<f64> {
    let (n, t) = (counts.len() as f64, timesteps as f64);
    counts
        .iter()
        .enumerate()
        .map(|(c, count)| {
            let target = if c == label { 1.0 } else { 0.0 };
            2.0 * (count / t - target) / (n * t)
        })
        .collect()
}

/// Backpropagates through all timesteps and layers of a recorded forward
/// pass. The reset path `(1 - S)` is differentiated as well.
pub fn backward(spec: &NetworkSpec, weights: &WeightSet, output: &ForwardOutput, label: usize, surrogate: &SurrogateParams) -> Result<WeightSet, TrainError> {
    let trace = output.trace.as_ref().ok_or(TrainError::MissingTrace)?;
    let shapes = spec.layer_shapes()?;
    let lif = spec.lif;
    let first_spiking = spec.layers.iter().position(|l| l.is_spiking()).unwrap_or(spec.layers.len());
    let mut grads = WeightSet::zeros(spec);
    let mut dv_next: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.output.len()]).collect();
    let out_grad = output_spike_grad(&output.counts, output.timesteps, label);

    for t in (0..output.timesteps).rev() {
        let mut g = out_grad.clone();
        for i in (0..spec.layers.len()).rev() {
            let layer = &spec.layers[i];
            if i < first_spiking {
                break;
            }
            if layer.kind == LayerKind::AvgPool {
                g = ops::avg_pool_backward(&g, shapes[i].input, layer.kernel);
                continue;
            }
            let lt = trace[i].as_ref().ok_or(TrainError::MissingTrace)?;
            if lt.potentials.len() != output.timesteps {
                return Err(TrainError::MissingTrace);
            }
            let (v, s) = (&lt.potentials[t], &lt.spikes[t]);
            let carry = &dv_next[i];
            let mut dv = vec![0.0; v.len()];
            for j in 0..v.len() {
                let (through_v, through_s) = match lif.reset_mode {
                    ResetMode::Zero => (lif.leak * (1.0 - s[j]), -lif.leak * v[j]),
                    ResetMode::Subtract => (lif.leak, -lif.leak * lif.v_threshold),
                };
                let ds = g[j] + carry[j] * through_s;
                dv[j] = ds * surrogate_derivative(v[j], lif.v_threshold, surrogate) + carry[j] * through_v;
            }

            let want_input = i > first_spiking;
            let p = weights.layers[i].as_ref().ok_or(TrainError::MissingTrace)?;
            let gp = grads.layers[i].as_mut().expect("zeros mirrors spec");
            let input = &lt.inputs[t];
            let g_in = match layer.kind {
                LayerKind::Conv => {
                    let geom = ConvGeom::new(shapes[i].input, layer.out_channels, layer.kernel, layer.padding, layer.stride);
                    ops::conv2d_backward(&dv, input, &geom, &p.weight, &mut gp.weight, &mut gp.bias, want_input)
                }
                LayerKind::FullyConnected => ops::linear_backward(&dv, input, &p.weight, &mut gp.weight, &mut gp.bias, want_input),
                LayerKind::AvgPool => unreachable!(),
            };
            dv_next[i] = dv;
            match g_in {
                Some(next) => g = next,
                None => break,
            }
        }
    }
    Ok(grads)
}

/// Per-sample result of a forward/backward pass.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub grads: WeightSet,
    pub loss: f64,
    pub predicted: usize,
}

pub fn sample_gradient(spec: &NetworkSpec, weights: &WeightSet, frames: &SpikeFrames, label: usize, surrogate: &SurrogateParams, spike_fn: SpikeFn) -> Result<SampleGradient, TrainError> {
    let out = forward_with(spec, weights, frames, ForwardOptions { spike_fn, record: true })?;
    let decoded = decode(&out.counts, out.timesteps);
    let grads = backward(spec, weights, &out, label, surrogate)?;
    Ok(SampleGradient {
        grads,
        loss: loss(&decoded.rates, label),
        predicted: decoded.class,
    })
}

/// Loss of one sample under the given spike function.
pub fn sample_loss(spec: &NetworkSpec, weights: &WeightSet, frames: &SpikeFrames, label: usize, spike_fn: SpikeFn) -> Result<f64, TrainError> {
    let out = forward_with(spec, weights, frames, ForwardOptions { spike_fn, record: false })?;
    Ok(loss(&decode(&out.counts, out.timesteps).rates, label))
}

/// One network input with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrames {
    pub frames: SpikeFrames,
    pub label: usize,
}

/// Windows, crops and bins every sample in parallel, preserving order.
pub fn prepare_split(samples: &[EventSample], window: u32, timesteps: usize, mode: WindowMode) -> Result<Vec<LabeledFrames>, TrainError> {
    samples
        .par_iter()
        .map(|s| {
            Ok(LabeledFrames {
                frames: prepare_frames(s, window, timesteps, mode)?,
                label: s.label as usize,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub window: u32,
    /// Epoch (1-based) from which the learning rate is multiplied by `lr_decay`.
    #[serde(default = "default_decay_epoch")]
    pub lr_decay_epoch: usize,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub surrogate: SurrogateParams,
    /// When false, biases keep their initial (zero) value.
    #[serde(default)]
    pub train_biases: bool,
}

fn default_decay_epoch() -> usize {
    120
}

fn default_decay() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 10,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            timesteps: 10,
            window: 50,
            lr_decay_epoch: default_decay_epoch(),
            lr_decay: default_decay(),
            surrogate: SurrogateParams::default(),
            train_biases: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be non-negative and momentum in [0, 1)");
        }
        if !(self.surrogate.half_width > 0.0) {
            return bad("surrogate half_width must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub loss: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_acc,test_acc,loss";

/// CSV body of the training log; missing test accuracy is an empty field.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for e in log {
        let test = e.test_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_acc, test, e.loss));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: WeightSet,
    pub log: Vec<EpochLog>,
}

/// Sums per-sample gradients in index order so the result does not depend on
/// the number of worker threads.
fn batch_gradient(spec: &NetworkSpec, weights: &WeightSet, batch: &[&LabeledFrames], surrogate: &SurrogateParams) -> Result<(WeightSet, f64, usize), TrainError> {
    let per_sample: Vec<SampleGradient> = batch
        .par_iter()
        .map(|s| sample_gradient(spec, weights, &s.frames, s.label, surrogate, SpikeFn::Heaviside))
        .collect::<Result<_, _>>()?;
    let mut total = WeightSet::zeros(spec);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (sg, s) in per_sample.iter().zip(batch) {
        total.add_scaled(&sg.grads, 1.0);
        loss_sum += sg.loss;
        correct += usize::from(sg.predicted == s.label);
    }
    Ok((total, loss_sum, correct))
}

/// In-place momentum SGD update: `v = mu*v + g; w -= lr*v`.
pub fn sgd_step(weights: &mut WeightSet, velocity: &mut WeightSet, grads: &WeightSet, learning_rate: f64, momentum: f64) {
    velocity.scale(momentum);
    velocity.add_scaled(grads, 1.0);
    weights.add_scaled(velocity, -learning_rate);
}

pub fn train(spec: &NetworkSpec, train_set: &[LabeledFrames], test_set: Option<&[LabeledFrames]>, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_hook(spec, train_set, test_set, config, None, |_, _| {})
}

/// Training loop. `on_epoch` sees the weights after every epoch (used for
/// periodic checkpoints). `init` overrides the seeded initialisation.
pub fn train_with_hook(
    spec: &NetworkSpec,
    train_set: &[LabeledFrames],
    test_set: Option<&[LabeledFrames]>,
    config: &TrainConfig,
    init: Option<WeightSet>,
    mut on_epoch: impl FnMut(usize, &WeightSet),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    spec.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut weights = match init {
        Some(w) => {
            w.check(spec)?;
            w
        }
        None => WeightSet::init(spec, config.seed),
    };
    let mut velocity = WeightSet::zeros(spec);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledFrames> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut grads, l, c) = batch_gradient(spec, &weights, &batch, &config.surrogate)?;
            grads.scale(1.0 / batch.len() as f64);
            if !config.train_biases {
                for (_, p) in grads.params_mut() {
                    p.bias.iter_mut().for_each(|b| *b = 0.0);
                }
            }
            sgd_step(&mut weights, &mut velocity, &grads, lr, config.momentum);
            loss_sum += l;
            correct += c;
        }
        let test_acc = match test_set {
            Some(ts) if !ts.is_empty() => Some(evaluate(spec, &weights, ts)?),
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            loss: loss_sum / train_set.len() as f64,
        });
        on_epoch(epoch, &weights);
    }
    Ok(TrainOutcome { weights, log })
}

/// Fraction of samples whose decoded class equals the label.
pub fn evaluate(spec: &NetworkSpec, weights: &WeightSet, data: &[LabeledFrames]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let correct: usize = data
        .par_iter()
        .map(|s| {
            let out = forward(spec, weights, &s.frames)?;
            Ok(usize::from(decode(&out.counts, out.timesteps).class == s.label))
        })
        .collect::<Result<Vec<usize>, NetError>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}
