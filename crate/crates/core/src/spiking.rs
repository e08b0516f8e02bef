//! LIF spiking network: layer graph, parameters, membrane dynamics, the
//! timestep-unrolled forward pass and rate decoding.
//!
//! Membrane update per timestep (zero reset):
//!
//! ```text
//! V[t] = leak * V[t-1] * (1 - S[t-1]) + I[t]
//! S[t] = V[t] >= v_threshold
//! ```
//!
//! Subtract reset replaces the mask with `leak * (V[t-1] - v_threshold * S[t-1])`.
//! Pooling layers are stateless; LIF neurons follow every conv and
//! fully-connected layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_io::SpikeFrames;
use crate::ops::{self, ConvGeom, MapShape};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch at {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("unsupported attention window {0} (strict mode accepts 100 or 50)")]
    UnsupportedWindow(u32),
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("invalid LIF parameters: {0}")]
    InvalidLif(String),
}

fn mismatch(context: impl Into<String>, expected: usize, got: usize) -> NetError {
    NetError::ShapeMismatch {
        context: context.into(),
        expected,
        got,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    Zero,
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub v_threshold: f64,
    /// Multiplicative decay per timestep, in `[0, 1)`.
    pub leak: f64,
    #[serde(default)]
    pub reset_mode: ResetMode,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            v_threshold: 0.4,
            leak: 0.25,
            reset_mode: ResetMode::Zero,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.v_threshold > 0.0) {
            return Err(NetError::InvalidLif(format!("v_threshold {} must be positive", self.v_threshold)));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(NetError::InvalidLif(format!("leak {} outside [0, 1)", self.leak)));
        }
        Ok(())
    }
}

/// Spike nonlinearity used by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SpikeFn {
    /// Hard threshold, `V >= v_threshold`.
    #[default]
    Heaviside,
    /// Clipped linear ramp of slope `1/(2a)` over `[v_th - a, v_th + a]`.
    /// Only used to check gradients: it is the primitive of the rectangular
    /// surrogate derivative.
    Relaxed { half_width: f64 },
}

impl SpikeFn {
    #[inline]
    pub fn apply(&self, v: f64, v_threshold: f64) -> f64 {
        match *self {
            SpikeFn::Heaviside => {
                if v >= v_threshold {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Relaxed { half_width } => ((v - v_threshold + half_width) / (2.0 * half_width)).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    AvgPool,
    Conv,
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub stride: usize,
}

impl LayerSpec {
    pub fn avg_pool(channels: usize, kernel: usize) -> Self {
        Self {
            kind: LayerKind::AvgPool,
            in_channels: channels,
            out_channels: channels,
            kernel,
            padding: 0,
            stride: kernel,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel,
            padding,
            stride,
        }
    }

    pub fn fully_connected(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            in_channels,
            out_channels,
            kernel: 0,
            padding: 0,
            stride: 0,
        }
    }

    pub fn is_spiking(&self) -> bool {
        self.kind != LayerKind::AvgPool
    }

    /// Weight count (biases excluded).
    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::AvgPool => 0,
            LayerKind::Conv => self.out_channels * self.in_channels * self.kernel * self.kernel,
            LayerKind::FullyConnected => self.out_channels * self.in_channels,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::AvgPool => vec![],
            LayerKind::Conv => vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::FullyConnected => vec![self.out_channels, self.in_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::AvgPool => self.kernel * self.kernel,
            LayerKind::Conv => self.in_channels * self.kernel * self.kernel,
            LayerKind::FullyConnected => self.in_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input_window: usize,
    #[serde(default)]
    pub lif: LifParams,
}

/// Input and output shape of one layer; fully-connected outputs are `n x 1 x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: MapShape,
    pub output: MapShape,
}

impl NetworkSpec {
    pub fn input_shape(&self) -> MapShape {
        MapShape::new(2, self.input_window, self.input_window)
    }

    /// Propagates shapes through the graph, checking every channel count.
    pub fn layer_shapes(&self) -> Result<Vec<LayerShapes>, NetError> {
        let mut shape = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match layer.kind {
                LayerKind::AvgPool => {
                    if layer.in_channels != shape.c || layer.out_channels != shape.c {
                        return Err(mismatch(format!("layer {i} (avg_pool) channels"), shape.c, layer.in_channels));
                    }
                    if layer.kernel == 0 || shape.h / layer.kernel == 0 {
                        return Err(NetError::InvalidSpec(format!("layer {i}: pooling kernel {} too large", layer.kernel)));
                    }
                    shape.pooled(layer.kernel)
                }
                LayerKind::Conv => {
                    if layer.in_channels != shape.c {
                        return Err(mismatch(format!("layer {i} (conv) channels"), shape.c, layer.in_channels));
                    }
                    if layer.kernel == 0 || layer.stride == 0 || shape.h + 2 * layer.padding < layer.kernel {
                        return Err(NetError::InvalidSpec(format!("layer {i}: bad conv geometry")));
                    }
                    shape.convolved(layer.out_channels, layer.kernel, layer.padding, layer.stride)
                }
                LayerKind::FullyConnected => {
                    if layer.in_channels != shape.len() {
                        return Err(mismatch(format!("layer {i} (fully_connected) flattened input"), shape.len(), layer.in_channels));
                    }
                    MapShape::new(layer.out_channels, 1, 1)
                }
            };
            out.push(LayerShapes { input: shape, output: next });
            shape = next;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.lif.validate()?;
        if !self.layers.last().is_some_and(LayerSpec::is_spiking) {
            return Err(NetError::InvalidSpec("last layer must be conv or fully_connected".into()));
        }
        self.layer_shapes().map(|_| ())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::weight_count).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_spiking()).map(|l| l.out_channels).sum()
    }
}

fn reference_layers(flatten: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::avg_pool(2, 4),
        LayerSpec::conv(2, 32, 3, 1, 1),
        LayerSpec::avg_pool(32, 2),
        LayerSpec::conv(32, 32, 3, 1, 1),
        LayerSpec::avg_pool(32, 2),
        LayerSpec::fully_connected(flatten, hidden),
        LayerSpec::fully_connected(hidden, 2),
    ]
}

fn flatten_size(window: usize) -> usize {
    let side = window / 4 / 2 / 2;
    32 * side * side
}

/// One of the two reference car-recognition architectures (window 100 or 50).
pub fn build_network(window: u32) -> Result<NetworkSpec, NetError> {
    let hidden = match window {
        100 => 512,
        50 => 144,
        other => return Err(NetError::UnsupportedWindow(other)),
    };
    let w = window as usize;
    Ok(NetworkSpec {
        layers: reference_layers(flatten_size(w), hidden),
        input_window: w,
        lif: LifParams::default(),
    })
}

/// Same topology for an arbitrary window; the hidden width is half the
/// flattened size unless the window is one of the reference sizes.
pub fn build_network_extended(window: u32) -> Result<NetworkSpec, NetError> {
    if let Ok(spec) = build_network(window) {
        return Ok(spec);
    }
    let w = window as usize;
    let flatten = flatten_size(w);
    if flatten == 0 {
        return Err(NetError::UnsupportedWindow(window));
    }
    Ok(NetworkSpec {
        layers: reference_layers(flatten, (flatten / 2).max(2)),
        input_window: w,
        lif: LifParams::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters aligned with `NetworkSpec::layers`; pooling entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub layers: Vec<Option<LayerParams>>,
}

impl WeightSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            layers: spec
                .layers
                .iter()
                .map(|l| {
                    l.is_spiking().then(|| LayerParams {
                        weight: vec![0.0; l.weight_count()],
                        bias: vec![0.0; l.out_channels],
                    })
                })
                .collect(),
        }
    }

    /// Uniform in `±sqrt(1/fan_in)` per layer, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = Self::zeros(spec);
        for (layer, params) in spec.layers.iter().zip(ws.layers.iter_mut()) {
            if let Some(p) = params {
                let bound = (1.0 / layer.fan_in() as f64).sqrt();
                p.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
            }
        }
        ws
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<(), NetError> {
        if self.layers.len() != spec.layers.len() {
            return Err(mismatch("weight set layer count", spec.layers.len(), self.layers.len()));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            match (layer.is_spiking(), params) {
                (false, None) => {}
                (true, Some(p)) => {
                    if p.weight.len() != layer.weight_count() {
                        return Err(mismatch(format!("layer {i} weights"), layer.weight_count(), p.weight.len()));
                    }
                    if p.bias.len() != layer.out_channels {
                        return Err(mismatch(format!("layer {i} biases"), layer.out_channels, p.bias.len()));
                    }
                    if p.weight.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                        return Err(NetError::InvalidSpec(format!("layer {i}: non-finite parameter")));
                    }
                }
                _ => return Err(NetError::InvalidSpec(format!("layer {i}: parameters do not match layer kind"))),
            }
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.layers.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (usize, &mut LayerParams)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, p)| p.as_mut().map(|p| (i, p)))
    }

    /// `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &WeightSet, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += scale * y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, p) in self.params_mut() {
            p.weight.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }
}

/// Membrane state of one spiking layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub potential: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl LayerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            potential: vec![0.0; n],
            spikes: vec![0.0; n],
        }
    }
}

/// Per-layer state, reset to zeros for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState {
    pub layers: Vec<Option<LayerState>>,
}

impl MembraneState {
    pub fn new(spec: &NetworkSpec, shapes: &[LayerShapes]) -> Self {
        Self {
            layers: spec
                .layers
                .iter()
                .zip(shapes)
                .map(|(l, s)| l.is_spiking().then(|| LayerState::zeros(s.output.len())))
                .collect(),
        }
    }
}

/// One LIF update; returns the new spike tensor (also kept in `state`).
pub fn lif_step<'a>(state: &'a mut LayerState, current: &[f64], params: &LifParams, spike_fn: SpikeFn) -> Result<&'a [f64], NetError> {
    if current.len() != state.potential.len() {
        return Err(mismatch("lif_step input current", state.potential.len(), current.len()));
    }
    let (leak, vth) = (params.leak, params.v_threshold);
    for ((v, s), &i) in state.potential.iter_mut().zip(state.spikes.iter_mut()).zip(current) {
        *v = match params.reset_mode {
            ResetMode::Zero => leak * *v * (1.0 - *s) + i,
            ResetMode::Subtract => leak * (*v - vth * *s) + i,
        };
        *s = spike_fn.apply(*v, vth);
    }
    Ok(&state.spikes)
}

/// Synaptic current (or pooled map) produced by one layer.
pub fn layer_forward(layer: &LayerSpec, params: Option<&LayerParams>, input: &[f64], in_shape: MapShape) -> Result<Vec<f64>, NetError> {
    if input.len() != in_shape.len() {
        return Err(mismatch("layer input", in_shape.len(), input.len()));
    }
    let need = || params.ok_or_else(|| NetError::InvalidSpec("missing layer parameters".into()));
    match layer.kind {
        LayerKind::AvgPool => Ok(ops::avg_pool(input, in_shape, layer.kernel)),
        LayerKind::Conv => {
            let p = need()?;
            if in_shape.c != layer.in_channels {
                return Err(mismatch("conv input channels", layer.in_channels, in_shape.c));
            }
            let geom = ConvGeom::new(in_shape, layer.out_channels, layer.kernel, layer.padding, layer.stride);
            Ok(ops::conv2d(input, &geom, &p.weight, &p.bias))
        }
        LayerKind::FullyConnected => {
            let p = need()?;
            if input.len() != layer.in_channels {
                return Err(mismatch("fully_connected input", layer.in_channels, input.len()));
            }
            Ok(ops::linear(input, &p.weight, &p.bias))
        }
    }
}

/// Per-timestep record of one spiking layer, kept for backpropagation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace {
    /// Input presented to the layer's synapses at each timestep.
    pub inputs: Vec<Vec<f64>>,
    pub potentials: Vec<Vec<f64>>,
    pub spikes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Output spikes summed over time, one entry per class.
    pub counts: Vec<f64>,
    pub timesteps: usize,
    /// Present when recording was requested; `None` entries are pooling layers.
    pub trace: Option<Vec<Option<LayerTrace>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    pub spike_fn: SpikeFn,
    pub record: bool,
}

/// Runs the network over all timesteps of `frames` with fresh membrane state.
pub fn forward(spec: &NetworkSpec, weights: &WeightSet, frames: &SpikeFrames) -> Result<ForwardOutput, NetError> {
    forward_with(spec, weights, frames, ForwardOptions::default())
}

pub fn forward_with(spec: &NetworkSpec, weights: &WeightSet, frames: &SpikeFrames, opts: ForwardOptions) -> Result<ForwardOutput, NetError> {
    if frames.window != spec.input_window {
        return Err(mismatch("input window", spec.input_window, frames.window));
    }
    if weights.layers.len() != spec.layers.len() {
        return Err(mismatch("weight set layer count", spec.layers.len(), weights.layers.len()));
    }
    let shapes = spec.layer_shapes()?;
    let mut state = MembraneState::new(spec, &shapes);
    let mut trace: Option<Vec<Option<LayerTrace>>> = opts
        .record
        .then(|| spec.layers.iter().map(|l| l.is_spiking().then(LayerTrace::default)).collect());
    let mut counts = vec![0.0; spec.num_classes()];

    for t in 0..frames.timesteps {
        let mut x: Vec<f64> = frames.frame(t).iter().map(|&v| f64::from(v)).collect();
        for (i, layer) in spec.layers.iter().enumerate() {
            let current = layer_forward(layer, weights.layers[i].as_ref(), &x, shapes[i].input)?;
            match state.layers[i].as_mut() {
                None => x = current,
                Some(ls) => {
                    let spikes = lif_step(ls, &current, &spec.lif, opts.spike_fn)?.to_vec();
                    if let Some(Some(lt)) = trace.as_mut().map(|tr| tr[i].as_mut()) {
                        lt.inputs.push(std::mem::take(&mut x));
                        lt.potentials.push(ls.potential.clone());
                        lt.spikes.push(spikes.clone());
                    }
                    x = spikes;
                }
            }
        }
        counts.iter_mut().zip(&x).for_each(|(c, s)| *c += s);
    }
    Ok(ForwardOutput {
        counts,
        timesteps: frames.timesteps,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub class: usize,
    pub rates: Vec<f64>,
}

/// Rate decoding: `rate = count / T`, argmax with ties to the lowest class.
pub fn decode(counts: &[f64], timesteps: usize) -> Decoded {
    assert!(timesteps >= 1, "timesteps must be at least 1");
    let rates: Vec<f64> = counts.iter().map(|c| c / timesteps as f64).collect();
    let mut class = 0;
    for (i, r) in rates.iter().enumerate() {
        if *r > rates[class] {
            class = i;
        }
    }
    Decoded { class, rates }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(vth: f64, leak: f64) -> LifParams {
        LifParams {
            v_threshold: vth,
            leak,
            reset_mode: ResetMode::Zero,
        }
    }

    #[test]
    fn reference_architectures() {
        let n100 = build_network(100).unwrap();
        assert_eq!((n100.layers[5].in_channels, n100.layers[5].out_channels), (1152, 512));
        let n50 = build_network(50).unwrap();
        assert_eq!((n50.layers[5].in_channels, n50.layers[5].out_channels), (288, 144));
        n100.validate().unwrap();
        n50.validate().unwrap();
        assert_eq!(build_network(64), Err(NetError::UnsupportedWindow(64)));
        let ext = build_network_extended(64).unwrap();
        ext.validate().unwrap();
        assert_eq!(ext.layers[5].in_channels, 32 * 4 * 4);
    }

    #[test]
    fn spatial_trace_for_window_100() {
        let shapes = build_network(100).unwrap().layer_shapes().unwrap();
        let sides: Vec<usize> = shapes.iter().take(5).map(|s| s.output.h).collect();
        assert_eq!(sides, vec![25, 25, 12, 12, 6]);
        assert_eq!(shapes[4].output.len(), 32 * 6 * 6);
    }

    #[test]
    fn lif_step_cases() {
        let p = params(1.0, 0.5);
        let mut st = LayerState::zeros(1);
        assert_eq!(lif_step(&mut st, &[0.0], &p, SpikeFn::Heaviside).unwrap(), &[0.0]);
        assert_eq!(st.potential[0], 0.0);

        let p0 = params(1.0, 0.0);
        let mut st = LayerState::zeros(1);
        assert_eq!(lif_step(&mut st, &[1.0], &p0, SpikeFn::Heaviside).unwrap(), &[1.0]);
        // the spike mask clears the potential on the next step
        lif_step(&mut st, &[0.2], &p0, SpikeFn::Heaviside).unwrap();
        assert_eq!(st.potential[0], 0.2);

        let mut st = LayerState::zeros(1);
        assert_eq!(lif_step(&mut st, &[0.6], &p, SpikeFn::Heaviside).unwrap(), &[0.0]);
        assert!((st.potential[0] - 0.6).abs() < 1e-15);
        assert_eq!(lif_step(&mut st, &[0.8], &p, SpikeFn::Heaviside).unwrap(), &[1.0]);
        assert!((st.potential[0] - 1.1).abs() < 1e-15);

        assert!(matches!(lif_step(&mut st, &[0.0, 1.0], &p, SpikeFn::Heaviside), Err(NetError::ShapeMismatch { .. })));
    }

    #[test]
    fn subtract_reset_keeps_residual() {
        let p = LifParams {
            v_threshold: 1.0,
            leak: 0.5,
            reset_mode: ResetMode::Subtract,
        };
        let mut st = LayerState::zeros(1);
        lif_step(&mut st, &[1.5], &p, SpikeFn::Heaviside).unwrap();
        lif_step(&mut st, &[0.0], &p, SpikeFn::Heaviside).unwrap();
        assert!((st.potential[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lif_params_validation() {
        assert!(params(0.0, 0.5).validate().is_err());
        assert!(params(1.0, 1.0).validate().is_err());
        assert!(params(1.0, 0.0).validate().is_ok());
    }

    #[test]
    fn decode_cases() {
        let d = decode(&[3.0, 7.0], 10);
        assert_eq!(d.class, 1);
        assert!((d.rates[0] - 0.3).abs() < 1e-15 && (d.rates[1] - 0.7).abs() < 1e-15);
        assert_eq!(decode(&[5.0, 5.0], 10).class, 0);
        assert_eq!(decode(&[0.0, 0.0], 10).class, 0);
    }

    #[test]
    fn zero_frames_give_zero_counts() {
        let spec = build_network(50).unwrap();
        let w = WeightSet::init(&spec, 1);
        let frames = SpikeFrames::zeros(4, 50);
        let out = forward(&spec, &w, &frames).unwrap();
        assert_eq!(out.counts, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_window() {
        let spec = build_network(50).unwrap();
        let w = WeightSet::init(&spec, 1);
        assert!(matches!(forward(&spec, &w, &SpikeFrames::zeros(2, 100)), Err(NetError::ShapeMismatch { .. })));
    }

    #[test]
    fn single_timestep_matches_manual_pipeline() {
        let spec = build_network(50).unwrap();
        let w = WeightSet::init(&spec, 4);
        let mut frames = SpikeFrames::zeros(1, 50);
        for (i, v) in frames.data.iter_mut().enumerate() {
            *v = u8::from(i % 7 == 0);
        }
        let out = forward(&spec, &w, &frames).unwrap();

        let shapes = spec.layer_shapes().unwrap();
        let mut x: Vec<f64> = frames.frame(0).iter().map(|&v| f64::from(v)).collect();
        for (i, layer) in spec.layers.iter().enumerate() {
            let cur = layer_forward(layer, w.layers[i].as_ref(), &x, shapes[i].input).unwrap();
            x = if layer.is_spiking() {
                let mut st = LayerState::zeros(cur.len());
                lif_step(&mut st, &cur, &spec.lif, SpikeFn::Heaviside).unwrap().to_vec()
            } else {
                cur
            };
        }
        assert_eq!(out.counts, x);
    }

    #[test]
    fn weight_set_checks() {
        let spec = build_network(50).unwrap();
        let mut w = WeightSet::init(&spec, 2);
        w.check(&spec).unwrap();
        w.layers[1].as_mut().unwrap().weight[0] = f64::NAN;
        assert!(w.check(&spec).is_err());
        let bound = (1.0f64 / 18.0).sqrt();
        let w = WeightSet::init(&spec, 2);
        assert!(w.layers[1].as_ref().unwrap().weight.iter().all(|v| v.abs() <= bound));
    }
}
