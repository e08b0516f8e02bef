//! Analytic cost models: synaptic/neuron operation counts, memory, latency
//! and energy in model units.
//!
//! Latency and energy are not measurements. They are linear models over the
//! operation counts whose constants are fitted to reported speed-up and
//! energy-improvement targets; see [`calibrate`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::memory_of;
use crate::spiking::{build_network_extended, LayerKind, NetError, NetworkSpec};

#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid cost constants: {0}")]
    InvalidConstants(String),
    #[error("cannot read constants {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub kind: LayerKind,
    pub synaptic_ops: u64,
    pub neuron_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub synaptic_ops: u64,
    pub neuron_ops: u64,
    pub per_layer: Vec<LayerOps>,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.synaptic_ops + self.neuron_ops
    }
}

/// Operation counts over `timesteps`:
/// conv `out_c * H_out * W_out * in_c * k^2`, fully-connected `in * out`,
/// average pooling `out_elements * k^2`; one neuron op per LIF output element.
pub fn count_ops(spec: &NetworkSpec, timesteps: u64) -> Result<OpCount, CostError> {
    let shapes = spec.layer_shapes()?;
    let per_layer: Vec<LayerOps> = spec
        .layers
        .iter()
        .zip(&shapes)
        .enumerate()
        .map(|(i, (layer, s))| {
            let out_elems = s.output.len() as u64;
            let k2 = (layer.kernel * layer.kernel) as u64;
            let (syn, neuron) = match layer.kind {
                LayerKind::AvgPool => (out_elems * k2, 0),
                LayerKind::Conv => (out_elems * layer.in_channels as u64 * k2, out_elems),
                LayerKind::FullyConnected => ((layer.in_channels * layer.out_channels) as u64, out_elems),
            };
            LayerOps {
                layer: i,
                kind: layer.kind,
                synaptic_ops: syn * timesteps,
                neuron_ops: neuron * timesteps,
            }
        })
        .collect();
    Ok(OpCount {
        synaptic_ops: per_layer.iter().map(|l| l.synaptic_ops).sum(),
        neuron_ops: per_layer.iter().map(|l| l.neuron_ops).sum(),
        per_layer,
    })
}

/// Estimated complexity reduction `(w0/w1)^2 * (t0/t1)`.
pub fn reduction_factor(w0: f64, w1: f64, t0: f64, t1: f64) -> f64 {
    (w0 / w1).powi(2) * (t0 / t1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    /// Per-sample latency overhead.
    pub latency_fixed: f64,
    pub latency_per_op: f64,
    pub energy_per_synop_32b: f64,
    /// Bit-independent share of synaptic-op energy.
    pub alpha: f64,
    pub energy_per_neuron_update: f64,
}

/// Shipped calibration (see [`calibrate`] and `data/cost_constants.json`).
pub const DEFAULT_CONSTANTS: CostConstants = CostConstants {
    latency_fixed: 0.0,
    latency_per_op: 1.0e-6,
    energy_per_synop_32b: 1.0e-6,
    alpha: 0.989_054_919_159_110_5,
    energy_per_neuron_update: 1.0e-6,
};

impl Default for CostConstants {
    fn default() -> Self {
        DEFAULT_CONSTANTS
    }
}

impl CostConstants {
    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("latency_fixed", self.latency_fixed),
            ("latency_per_op", self.latency_per_op),
            ("energy_per_synop_32b", self.energy_per_synop_32b),
            ("alpha", self.alpha),
            ("energy_per_neuron_update", self.energy_per_neuron_update),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(CostError::InvalidConstants(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.latency_per_op == 0.0 || self.energy_per_synop_32b == 0.0 {
            return Err(CostError::InvalidConstants("per-op latency and energy must be positive".into()));
        }
        if self.alpha > 1.0 {
            return Err(CostError::InvalidConstants(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let io = |reason: String| CostError::Io {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// `latency_fixed + latency_per_op * synaptic_ops`.
pub fn latency_estimate(ops: &OpCount, constants: &CostConstants) -> f64 {
    constants.latency_fixed + constants.latency_per_op * ops.synaptic_ops as f64
}

/// Energy multiplier of one synaptic op at `bits` relative to 32-bit.
pub fn synop_energy_scale(bits: u32, alpha: f64) -> f64 {
    alpha + (1.0 - alpha) * f64::from(bits) / 32.0
}

/// `syn_ops * e_syn * (alpha + (1 - alpha) * B/32) + neuron_ops * e_neuron`.
pub fn energy_estimate(ops: &OpCount, bits: u32, constants: &CostConstants) -> f64 {
    ops.synaptic_ops as f64 * constants.energy_per_synop_32b * synop_energy_scale(bits, constants.alpha)
        + ops.neuron_ops as f64 * constants.energy_per_neuron_update
}

/// Settings label `{B}b_{T}t_{W}w`.
pub fn settings_tag(bits: u32, timesteps: u64, window: u32) -> String {
    format!("{bits}b_{timesteps}t_{window}w")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tag: String,
    pub bits: u32,
    pub timesteps: u64,
    pub window: u32,
    pub memory_bits: u64,
    pub latency_units: f64,
    pub energy_units: f64,
    pub op_count: OpCount,
}

pub fn full_report(spec: &NetworkSpec, bits: u32, timesteps: u64, constants: &CostConstants) -> Result<CostReport, CostError> {
    let ops = count_ops(spec, timesteps)?;
    Ok(CostReport {
        tag: settings_tag(bits, timesteps, spec.input_window as u32),
        bits,
        timesteps,
        window: spec.input_window as u32,
        memory_bits: memory_of(spec, bits, false),
        latency_units: latency_estimate(&ops, constants),
        energy_units: energy_estimate(&ops, bits, constants),
        op_count: ops,
    })
}

/// Report for a reference architecture identified by window size.
pub fn report_for(bits: u32, timesteps: u64, window: u32, constants: &CostConstants) -> Result<CostReport, CostError> {
    full_report(&build_network_extended(window)?, bits, timesteps, constants)
}

/// Targets the constants are fitted to, all relative to the 32-bit,
/// `reference_timesteps` network at `window`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub window: u32,
    pub reference_timesteps: u64,
    pub reduced_timesteps: u64,
    /// Latency speed-up at `reduced_timesteps`.
    pub speedup: f64,
    /// Energy improvement at `reduced_timesteps` and `reduced_bits`.
    pub energy_improvement: f64,
    pub reduced_bits: u32,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            window: 100,
            reference_timesteps: 20,
            reduced_timesteps: 5,
            speedup: 4.0,
            energy_improvement: 4.03,
            reduced_bits: 10,
        }
    }
}

/// Solves the two linear models for `latency_fixed` and `alpha`, keeping the
/// per-op scales of `base`.
///
/// Latency: `(F + k*S0) / (F + k*S1) = speedup` gives `F = k*(S0 - speedup*S1)/(speedup - 1)`.
/// Energy: with `q = (E0/improvement - N1*e_n) / (S1*e_s)` the bit scale must
/// equal `q`, so `alpha = (q - b) / (1 - b)` with `b = B/32`.
pub fn calibrate(targets: &CalibrationTargets, base: &CostConstants) -> Result<CostConstants, CostError> {
    let spec = build_network_extended(targets.window)?;
    let ref_ops = count_ops(&spec, targets.reference_timesteps)?;
    let red_ops = count_ops(&spec, targets.reduced_timesteps)?;
    let (s0, s1) = (ref_ops.synaptic_ops as f64, red_ops.synaptic_ops as f64);
    let k = base.latency_per_op;
    let latency_fixed = k * (s0 - targets.speedup * s1) / (targets.speedup - 1.0);
    if latency_fixed < 0.0 {
        return Err(CostError::InvalidConstants(format!(
            "speed-up {} exceeds the pure op-count ratio {}",
            targets.speedup,
            s0 / s1
        )));
    }

    let (es, en) = (base.energy_per_synop_32b, base.energy_per_neuron_update);
    let e_ref = s0 * es + ref_ops.neuron_ops as f64 * en;
    let q = (e_ref / targets.energy_improvement - red_ops.neuron_ops as f64 * en) / (s1 * es);
    let b = f64::from(targets.reduced_bits) / 32.0;
    let alpha = (q - b) / (1.0 - b);
    let out = CostConstants {
        latency_fixed,
        alpha,
        ..*base
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spiking::build_network;

    #[test]
    fn conv2_ops_window_100() {
        let ops = count_ops(&build_network(100).unwrap(), 1).unwrap();
        assert_eq!(ops.per_layer[3].synaptic_ops, 32 * 12 * 12 * 32 * 9);
        assert_eq!(ops.per_layer[3].synaptic_ops, 1_327_104);
        assert_eq!(ops.synaptic_ops, ops.per_layer.iter().map(|l| l.synaptic_ops).sum::<u64>());
        assert_eq!(ops.neuron_ops, 32 * 25 * 25 + 32 * 12 * 12 + 512 + 2);
    }

    #[test]
    fn ops_are_linear_in_timesteps() {
        let spec = build_network(50).unwrap();
        let one = count_ops(&spec, 1).unwrap();
        for t in [2, 5, 10, 20] {
            let many = count_ops(&spec, t).unwrap();
            assert_eq!(many.synaptic_ops, t * one.synaptic_ops);
            assert_eq!(many.neuron_ops, t * one.neuron_ops);
        }
        assert_eq!(count_ops(&spec, 10).unwrap().total(), 2 * count_ops(&spec, 5).unwrap().total());
    }

    #[test]
    fn reduction_factor_cases() {
        assert_eq!(reduction_factor(100.0, 100.0, 20.0, 10.0), 2.0);
        assert_eq!(reduction_factor(100.0, 50.0, 20.0, 20.0), 4.0);
        assert_eq!(reduction_factor(100.0, 50.0, 20.0, 5.0), 16.0);
    }

    #[test]
    fn latency_and_energy_shapes() {
        let c = CostConstants {
            latency_fixed: 2.0,
            ..CostConstants::default()
        };
        let zero = OpCount {
            synaptic_ops: 0,
            neuron_ops: 0,
            per_layer: vec![],
        };
        assert_eq!(latency_estimate(&zero, &c), 2.0);
        assert_eq!(synop_energy_scale(32, 0.7), 1.0);

        let spec = build_network(100).unwrap();
        let lat: Vec<f64> = [5, 10, 15, 20].iter().map(|&t| latency_estimate(&count_ops(&spec, t).unwrap(), &c)).collect();
        assert!(lat.windows(2).all(|w| w[0] < w[1]));

        let ops = count_ops(&spec, 10).unwrap();
        let energies: Vec<f64> = [4, 10, 12, 16, 32].iter().map(|&b| energy_estimate(&ops, b, &c)).collect();
        assert!(energies.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn report_composition() {
        let c = CostConstants::default();
        let spec = build_network(100).unwrap();
        let r = full_report(&spec, 32, 20, &c).unwrap();
        assert_eq!(r.tag, "32b_20t_100w");
        assert_eq!(r.memory_bits, 600_640 * 32);
        let ops = count_ops(&spec, 20).unwrap();
        assert_eq!(r.op_count, ops);
        assert_eq!(r.latency_units, latency_estimate(&ops, &c));
        assert_eq!(r.energy_units, energy_estimate(&ops, 32, &c));
        assert_eq!(r, full_report(&spec, 32, 20, &c).unwrap());
    }

    #[test]
    fn shipped_constants_match_calibration() {
        let fitted = calibrate(&CalibrationTargets::default(), &CostConstants::default()).unwrap();
        let d = CostConstants::default();
        assert!((fitted.alpha - d.alpha).abs() < 1e-12, "{}", fitted.alpha);
        assert!(fitted.latency_fixed.abs() < 1e-9);
        let file: CostConstants = serde_json::from_str(include_str!("../data/cost_constants.json")).unwrap();
        assert_eq!(file, d);
    }

    #[test]
    fn calibration_hits_intermediate_speedup() {
        let targets = CalibrationTargets {
            speedup: 3.58,
            ..CalibrationTargets::default()
        };
        let c = calibrate(&targets, &CostConstants::default()).unwrap();
        let lat = |t| latency_estimate(&count_ops(&build_network(100).unwrap(), t).unwrap(), &c);
        assert!((lat(20) / lat(5) - 3.58).abs() < 1e-12);
        let too_fast = CalibrationTargets {
            speedup: 4.5,
            ..targets
        };
        assert!(calibrate(&too_fast, &CostConstants::default()).is_err());
    }

    #[test]
    fn constants_validation() {
        assert!(CostConstants::default().validate().is_ok());
        let bad = CostConstants {
            alpha: 1.5,
            ..CostConstants::default()
        };
        assert!(bad.validate().is_err());
        let bad = CostConstants {
            latency_per_op: 0.0,
            ..CostConstants::default()
        };
        assert!(bad.validate().is_err());
    }
}
