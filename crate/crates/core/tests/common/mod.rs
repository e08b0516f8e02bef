//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnopt::event_io::SpikeFrames;
use snnopt::spiking::{forward_with, ForwardOptions, LayerSpec, LifParams, NetworkSpec, ResetMode, SpikeFn, WeightSet};
use snnopt::training::{sample_gradient, sample_loss, SurrogateParams};

const H: f64 = 1e-4;

pub fn toy_spec(reset_mode: ResetMode) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::conv(2, 4, 3, 1, 1),
            LayerSpec::avg_pool(4, 2),
            LayerSpec::fully_connected(4 * 4 * 4, 6),
            LayerSpec::fully_connected(6, 2),
        ],
        input_window: 8,
        lif: LifParams {
            reset_mode,
            ..LifParams::default()
        },
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, timesteps: usize, window: usize, density: f64) -> SpikeFrames {
    let mut f = SpikeFrames::zeros(timesteps, window);
    f.data.iter_mut().for_each(|v| *v = u8::from(rng.gen_bool(density)));
    f
}

pub fn random_weights(spec: &NetworkSpec, rng: &mut ChaCha8Rng, scale: f64) -> WeightSet {
    let mut w = WeightSet::init(spec, rng.gen());
    for (_, p) in w.params_mut() {
        p.weight.iter_mut().for_each(|x| *x *= scale);
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(0.0..0.3));
    }
    w
}

const HALF_WIDTH: f64 = 0.5;

/// Which piece of the clipped ramp every recorded membrane potential is on.
fn ramp_regimes(spec: &NetworkSpec, weights: &WeightSet, frames: &SpikeFrames) -> Vec<u8> {
    let opts = ForwardOptions {
        spike_fn: SpikeFn::Relaxed { half_width: HALF_WIDTH },
        record: true,
    };
    let out = forward_with(spec, weights, frames, opts).unwrap();
    let vth = spec.lif.v_threshold;
    out.trace
        .unwrap()
        .iter()
        .flatten()
        .flat_map(|l| l.potentials.iter().flatten())
        .map(|&v| u8::from(v >= vth - HALF_WIDTH) + u8::from(v > vth + HALF_WIDTH))
        .collect()
}

/// Returns (max relative error, parameters compared, parameters skipped).
/// A parameter is skipped when its +-h perturbation moves some potential
/// across a ramp corner: the loss is not differentiable inside that interval
/// and a central difference there measures the kink, not the gradient.
pub fn check(spec: &NetworkSpec, weights: &WeightSet, frames: &SpikeFrames, label: usize) -> (f64, usize, usize) {
    let spike_fn = SpikeFn::Relaxed { half_width: HALF_WIDTH };
    let surrogate = SurrogateParams { half_width: HALF_WIDTH };
    let analytic = sample_gradient(spec, weights, frames, label, &surrogate, spike_fn).unwrap().grads;
    let loss_at = |w: &WeightSet| sample_loss(spec, w, frames, label, spike_fn).unwrap();
    let base_regimes = ramp_regimes(spec, weights, frames);
    let mut skipped = 0;

    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (li, params) in analytic.params() {
        let n_w = params.weight.len();
        for idx in 0..n_w + params.bias.len() {
            let perturbed = |delta: f64| {
                let mut w = weights.clone();
                let p = w.layers[li].as_mut().unwrap();
                if idx < n_w {
                    p.weight[idx] += delta;
                } else {
                    p.bias[idx - n_w] += delta;
                }
                w
            };
            let (up, down) = (perturbed(H), perturbed(-H));
            if ramp_regimes(spec, &up, frames) != base_regimes || ramp_regimes(spec, &down, frames) != base_regimes {
                skipped += 1;
                continue;
            }
            let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * H);
            let a = if idx < n_w { params.weight[idx] } else { params.bias[idx - n_w] };
            let scale = a.abs().max(numeric.abs());
            // entries that are zero in both up to round-off carry no relative information
            let err = if scale < 1e-8 { (a - numeric).abs() / 1e-8 } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
            compared += 1;
        }
    }
    (worst, compared, skipped)
}

/// Relaxed-mode gradient check over both reset modes and T = 1..=3.
/// Returns the worst relative error seen.
pub fn toy_gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for reset in [ResetMode::Zero, ResetMode::Subtract] {
        let spec = toy_spec(reset);
        spec.validate().unwrap();
        for timesteps in 1..=3 {
            let frames = random_frames(&mut rng, timesteps, 8, 0.35);
            let weights = random_weights(&spec, &mut rng, 1.5);
            let label = rng.gen_range(0..2);
            let (err, n, skipped) = check(&spec, &weights, &frames, label);
            assert!(n > 400 && skipped * 20 < n + skipped, "compared {n}, skipped {skipped}");
            worst = worst.max(err);
        }
    }
    worst
}
