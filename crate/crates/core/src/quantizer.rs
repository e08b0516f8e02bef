//! Post-training quantization of a trained [`WeightSet`] onto signed
//! fixed-point grids, with truncation, round-to-nearest and stochastic
//! rounding, plus the analytic weight-memory model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spiking::{NetworkSpec, WeightSet};

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("precision {0} bits outside 2..=32")]
    UnsupportedBits(u32),
    #[error("fractional bits {frac} exceed {bits} - 1")]
    BadFormat { bits: u32, frac: u32 },
    #[error("cannot choose a format for an empty or non-finite tensor")]
    InvalidTensor,
}

/// Signed fixed point: `total_bits` including sign, `frac_bits` after the
/// binary point. The grid step is `2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
}

impl FixedPointFormat {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, QuantError> {
        if !(2..=32).contains(&total_bits) {
            return Err(QuantError::UnsupportedBits(total_bits));
        }
        if frac_bits > total_bits - 1 {
            return Err(QuantError::BadFormat {
                bits: total_bits,
                frac: frac_bits,
            });
        }
        Ok(Self { total_bits, frac_bits })
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Integer code range `[-2^(B-1), 2^(B-1) - 1]`.
    pub fn code_range(&self) -> (f64, f64) {
        let half = ((self.total_bits - 1) as f64).exp2();
        (-half, half - 1.0)
    }

    pub fn min_value(&self) -> f64 {
        self.code_range().0 * self.step()
    }

    pub fn max_value(&self) -> f64 {
        self.code_range().1 * self.step()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rounding {
    /// Truncation: floor of the scaled value (two's-complement bit drop).
    #[default]
    #[serde(rename = "TR")]
    Truncate,
    /// Round to nearest, halves away from zero.
    #[serde(rename = "RN")]
    Nearest,
    /// Stochastic rounding, unbiased in expectation.
    #[serde(rename = "SR")]
    Stochastic,
}

impl std::str::FromStr for Rounding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TR" => Ok(Rounding::Truncate),
            "RN" => Ok(Rounding::Nearest),
            "SR" => Ok(Rounding::Stochastic),
            other => Err(format!("unknown rounding scheme {other:?} (expected TR, RN or SR)")),
        }
    }
}

impl std::fmt::Display for Rounding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rounding::Truncate => "TR",
            Rounding::Nearest => "RN",
            Rounding::Stochastic => "SR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    #[serde(default)]
    pub rounding: Rounding,
    /// Generator seed; only stochastic rounding draws from it.
    #[serde(default)]
    pub seed: u64,
    /// Quantize biases on the weight grid of their layer.
    #[serde(default = "yes")]
    pub quantize_biases: bool,
}

fn yes() -> bool {
    true
}

impl QuantConfig {
    pub fn new(bits: u32, rounding: Rounding) -> Self {
        Self {
            bits,
            rounding,
            seed: 0,
            quantize_biases: true,
        }
    }
}

const FORMAT_EPS: f64 = 1e-12;

/// Fraction bits for a tensor: `n = B - 1 - max(0, ceil(log2(max_abs + eps)))`,
/// clamped to `[0, B - 1]`, except that a negative extreme of exactly `-2^k`
/// counts as needing only `k` integer bits. An all-zero tensor gets `n = B - 1`.
pub fn choose_format(values: &[f64], bits: u32) -> Result<FixedPointFormat, QuantError> {
    if !(2..=32).contains(&bits) {
        return Err(QuantError::UnsupportedBits(bits));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::InvalidTensor);
    }
    // Integer bits needed per value. The code range is [-2^(B-1), 2^(B-1) - 1],
    // so -2^k fits in k integer bits while +2^k needs k + 1; without the
    // distinction a truncated tensor whose minimum hit -2^k would get a coarser
    // format on a second pass.
    let int_bits = values
        .iter()
        .map(|&v| {
            if v > 0.0 {
                (v + FORMAT_EPS).log2().ceil()
            } else if v < 0.0 {
                (-v).log2().ceil()
            } else {
                0.0
            }
        })
        .fold(0.0f64, f64::max) as i64;
    let frac = (i64::from(bits) - 1 - int_bits).clamp(0, i64::from(bits) - 1);
    FixedPointFormat::new(bits, frac as u32)
}

/// Running count of values clipped to the format's range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationStats {
    pub saturated: u64,
    pub total: u64,
}

/// Maps `w` onto the grid of `format`. Out-of-range results saturate silently
/// and are counted in `stats`.
pub fn quantize_value(w: f64, format: &FixedPointFormat, rounding: Rounding, rng: &mut ChaCha8Rng, stats: &mut SaturationStats) -> f64 {
    let scaled = w * format.scale();
    let code = match rounding {
        Rounding::Truncate => scaled.floor(),
        Rounding::Nearest => scaled.round(),
        Rounding::Stochastic => {
            let lo = scaled.floor();
            let frac = scaled - lo;
            if rng.gen::<f64>() < frac {
                lo + 1.0
            } else {
                lo
            }
        }
    };
    let (min, max) = format.code_range();
    stats.total += 1;
    let clipped = if code < min {
        min
    } else if code > max {
        max
    } else {
        code
    };
    if clipped != code {
        stats.saturated += 1;
    }
    clipped * format.step()
}

/// Per-layer outcome of a quantization pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub layer: usize,
    pub format: FixedPointFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub config: QuantConfig,
    pub layers: Vec<LayerQuant>,
    pub saturation: SaturationStats,
}

/// Post-training quantization: per layer, choose a format from the weights,
/// then round every weight (and bias, if enabled) onto that grid. Stochastic
/// rounding seeds each layer with `seed ^ layer_index`.
pub fn ptq(weights: &WeightSet, config: &QuantConfig) -> Result<(WeightSet, QuantReport), QuantError> {
    let mut out = weights.clone();
    let mut layers = Vec::new();
    let mut saturation = SaturationStats::default();
    for (i, p) in out.params_mut() {
        let format = choose_format(&p.weight, config.bits)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ i as u64);
        for w in p.weight.iter_mut() {
            *w = quantize_value(*w, &format, config.rounding, &mut rng, &mut saturation);
        }
        if config.quantize_biases {
            for b in p.bias.iter_mut() {
                *b = quantize_value(*b, &format, config.rounding, &mut rng, &mut saturation);
            }
        }
        layers.push(LayerQuant { layer: i, format });
    }
    Ok((
        out,
        QuantReport {
            config: config.clone(),
            layers,
            saturation,
        },
    ))
}

/// Weight memory in bits at precision `bits`. Biases are excluded unless
/// `include_biases` is set.
pub fn memory_of(spec: &NetworkSpec, bits: u32, include_biases: bool) -> u64 {
    let mut count = spec.weight_count() as u64;
    if include_biases {
        count += spec.bias_count() as u64;
    }
    count * u64::from(bits)
}

/// Percentage of memory saved relative to `reference` bits.
pub fn memory_saving_percent(bits: u64, reference: u64) -> f64 {
    100.0 * (1.0 - bits as f64 / reference as f64)
}
