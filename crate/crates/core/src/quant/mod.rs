//! Symmetric uniform quantization, RTN calibration, and fake-quantized
//! policies trained with straight-through / learned-step-size gradients.
//!
//! Codes are `clip(round(w / gamma), -2^(b-1), 2^(b-1) - 1)` with ties rounded
//! away from zero. There is no zero point.

mod fake;

pub use fake::{FakeQuantPolicy, QuantGradients, QuantTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2D;

/// Smallest scale handed out by calibration (all-zero tensors).
pub const GAMMA_FLOOR: f64 = 1e-12;
/// Bit width at or above which fake quantization is an exact passthrough.
pub const PASSTHROUGH_BITS: u32 = 32;

#[inline]
pub fn qmin(bits: u32) -> i64 {
    -(1i64 << (bits - 1))
}

#[inline]
pub fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::usage(format!("bit width {bits} outside 2..=16")));
    }
    Ok(())
}

/// Integer code of `w` at scale `gamma`.
pub fn quantize(w: f64, gamma: f64, bits: u32) -> Result<i32> {
    check_bits(bits)?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::usage(format!("quantization scale must be > 0, got {gamma}")));
    }
    if !w.is_finite() {
        return Err(Error::numeric("quantize: non-finite input"));
    }
    Ok(quantize_unchecked(w, gamma, bits) as i32)
}

#[inline]
pub(crate) fn quantize_unchecked(w: f64, gamma: f64, bits: u32) -> i64 {
    let q = (w / gamma).round();
    q.clamp(qmin(bits) as f64, qmax(bits) as f64) as i64
}

#[inline]
pub fn dequantize(code: i32, gamma: f64) -> f64 {
    code as f64 * gamma
}

/// `dequantize(quantize(w))` without range checks.
#[inline]
pub fn fake_quant(w: f64, gamma: f64, bits: u32) -> f64 {
    quantize_unchecked(w, gamma, bits) as f64 * gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    /// One scale per output row of a weight matrix.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Scales fixed at their round-to-nearest calibration.
    Rtn,
    /// Scales trained with the learned-step-size rule.
    Lsq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    WeightsOnly,
    /// Weights plus the inputs of every layer after the first.
    WeightsActivations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
    pub scheme: Scheme,
    pub targets: Targets,
}

impl QuantSpec {
    /// 4-bit weights and activations, per-tensor LSQ.
    pub fn w4a4_lsq() -> Self {
        Self {
            bits: 4,
            granularity: Granularity::PerTensor,
            scheme: Scheme::Lsq,
            targets: Targets::WeightsActivations,
        }
    }

    pub fn weight_only(bits: u32, granularity: Granularity) -> Self {
        Self {
            bits,
            granularity,
            scheme: Scheme::Rtn,
            targets: Targets::WeightsOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits >= PASSTHROUGH_BITS {
            return Ok(());
        }
        check_bits(self.bits)
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= PASSTHROUGH_BITS
    }

    pub fn quantizes_activations(&self) -> bool {
        self.targets == Targets::WeightsActivations
    }

    pub(crate) fn code(&self) -> [u8; 4] {
        [
            self.bits.min(255) as u8,
            match self.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => 1,
            },
            match self.scheme {
                Scheme::Rtn => 0,
                Scheme::Lsq => 1,
            },
            match self.targets {
                Targets::WeightsOnly => 0,
                Targets::WeightsActivations => 1,
            },
        ]
    }

    pub(crate) fn from_code(c: [u8; 4]) -> Result<Self> {
        let spec = Self {
            bits: c[0] as u32,
            granularity: match c[1] {
                0 => Granularity::PerTensor,
                1 => Granularity::PerChannel,
                x => return Err(Error::format(format!("granularity tag {x}"))),
            },
            scheme: match c[2] {
                0 => Scheme::Rtn,
                1 => Scheme::Lsq,
                x => return Err(Error::format(format!("scheme tag {x}"))),
            },
            targets: match c[3] {
                0 => Targets::WeightsOnly,
                1 => Targets::WeightsActivations,
                x => return Err(Error::format(format!("targets tag {x}"))),
            },
        };
        spec.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(spec)
    }
}

/// Learned or calibrated scales of a fake-quantized policy.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    /// Per layer: one scale (per-tensor) or one per output row.
    pub weight_scales: Vec<Vec<f64>>,
    /// Scale of the input of layer `i + 1`; empty for weight-only specs.
    pub act_scales: Vec<f64>,
    /// LSQ gradient-scale factor per weight scale group, per layer.
    pub weight_grad_scale: Vec<f64>,
    pub act_grad_scale: Vec<f64>,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .weight_scales
            .iter()
            .flatten()
            .chain(&self.act_scales)
            .all(|g| *g > 0.0 && g.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::usage("quantization scales must be positive and finite"))
        }
    }
}

/// LSQ gradient-scale factor `1 / sqrt(n * (2^(b-1) - 1))`.
pub fn lsq_grad_scale(n_elements: usize, bits: u32) -> f64 {
    1.0 / ((n_elements.max(1) as f64) * qmax(bits.min(16)) as f64).sqrt()
}

/// Round-to-nearest calibration: `gamma = max|w| / (2^(b-1) - 1)` over the
/// whole tensor or per output row, floored at [`GAMMA_FLOOR`].
pub fn calibrate_rtn(tensor: &Tensor2D, spec: &QuantSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if tensor.data().is_empty() {
        return Err(Error::usage("cannot calibrate an empty tensor"));
    }
    let denom = qmax(spec.bits.min(16)) as f64;
    let scale = |vals: &[f64]| {
        let m = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (m / denom).max(GAMMA_FLOOR)
    };
    Ok(match spec.granularity {
        Granularity::PerTensor => vec![scale(tensor.data())],
        Granularity::PerChannel => (0..tensor.rows()).map(|r| scale(tensor.row(r))).collect(),
    })
}

/// LSQ activation-scale initialisation `2 * mean|a| / sqrt(2^(b-1) - 1)`.
pub fn lsq_activation_init(samples: &[f64], bits: u32) -> f64 {
    if samples.is_empty() {
        return GAMMA_FLOOR;
    }
    let mean = samples.iter().map(|a| a.abs()).sum::<f64>() / samples.len() as f64;
    (2.0 * mean / (qmax(bits.min(16)) as f64).sqrt()).max(GAMMA_FLOOR)
}
