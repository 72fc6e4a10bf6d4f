use super::{dot_i8, pack_int4, Int8Matrix, PackedInt4Matrix};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::Policy;
use crate::quant::{quantize, FakeQuantPolicy, QuantSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedWeights {
    Int8(Int8Matrix),
    Int4(PackedInt4Matrix),
}

impl QuantizedWeights {
    pub fn rows(&self) -> usize {
        match self {
            QuantizedWeights::Int8(m) => m.rows(),
            QuantizedWeights::Int4(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            QuantizedWeights::Int8(m) => m.cols(),
            QuantizedWeights::Int4(m) => m.cols(),
        }
    }

    pub fn scales(&self) -> &[f64] {
        match self {
            QuantizedWeights::Int8(m) => m.scales(),
            QuantizedWeights::Int4(m) => m.scales(),
        }
    }

    pub fn weight_bytes(&self) -> usize {
        match self {
            QuantizedWeights::Int8(m) => m.weight_bytes(),
            QuantizedWeights::Int4(m) => m.weight_bytes(),
        }
    }

    fn row_codes(&self, r: usize) -> Vec<i8> {
        match self {
            QuantizedWeights::Int8(m) => m.row(r).to_vec(),
            QuantizedWeights::Int4(m) => m.unpack_row(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub weights: QuantizedWeights,
    pub bias: Vec<f64>,
    /// Activation scale of this layer's input when activations are integer.
    pub input_scale: Option<f64>,
}

/// Integer deployment form of a fake-quantized policy.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: QuantSpec,
    pub action_sigma: f64,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    /// Exports weight codes and scales; needs a calibrated policy with at most
    /// 8 bits. Four-bit weights are stored packed.
    pub fn from_fake_quant(fq: &FakeQuantPolicy) -> Result<Self> {
        let spec = *fq.spec();
        if spec.is_passthrough() || spec.bits > 8 {
            return Err(Error::usage(format!("cannot export {}-bit weights as integers", spec.bits)));
        }
        let params = fq
            .params()
            .ok_or_else(|| Error::usage("policy must be calibrated before export"))?;
        let mut layers = Vec::new();
        for (i, l) in fq.base().layers().iter().enumerate() {
            let (rows, cols) = (l.weight.rows(), l.weight.cols());
            let g = &params.weight_scales[i];
            let scales: Vec<f64> = (0..rows).map(|r| g[if g.len() == 1 { 0 } else { r }]).collect();
            let codes = fq.weight_codes(i)?;
            let weights = if spec.bits <= 4 {
                let codes: Vec<i8> = codes.iter().map(|c| *c as i8).collect();
                QuantizedWeights::Int4(pack_int4(rows, cols, &codes, scales)?)
            } else {
                QuantizedWeights::Int8(Int8Matrix::from_codes(rows, cols, &codes, scales)?)
            };
            let input_scale = (i > 0 && spec.quantizes_activations()).then(|| params.act_scales[i - 1]);
            layers.push(QuantizedLayer {
                weights,
                bias: l.bias.clone(),
                input_scale,
            });
        }
        let model = Self {
            spec,
            action_sigma: fq.base().action_sigma(),
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::usage("quantized model has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows() || l.weights.scales().len() != l.weights.rows() {
                return Err(Error::format(format!("layer {i} buffers disagree")));
            }
            if i > 0 && self.layers[i - 1].weights.rows() != l.weights.cols() {
                return Err(Error::format(format!("layer {i} input width does not chain")));
            }
            if let Some(g) = l.input_scale {
                if !(g > 0.0) || !g.is_finite() {
                    return Err(Error::format(format!("layer {i} activation scale is invalid")));
                }
            }
        }
        Ok(())
    }

    /// Bytes of packed weight codes over all layers.
    pub fn weight_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.weights.weight_bytes()).sum()
    }

    /// Integer forward pass: activation codes times weight codes with i32
    /// accumulation where activations are quantized, dequantize-on-read
    /// elsewhere.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.layers[0].weights.cols() {
            return Err(Error::usage(format!(
                "state has {} entries, model expects {}",
                state.len(),
                self.layers[0].weights.cols()
            )));
        }
        let n = self.layers.len();
        let mut x = state.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let w = &l.weights;
            let scales = w.scales();
            let mut y: Vec<f64> = match l.input_scale {
                Some(g) => {
                    let xc: Vec<i8> = x
                        .iter()
                        .map(|v| quantize(*v, g, self.spec.bits).map(|c| c as i8))
                        .collect::<Result<_>>()?;
                    (0..w.rows())
                        .map(|r| dot_i8(&w.row_codes(r), &xc) as f64 * g * scales[r])
                        .collect()
                }
                None => (0..w.rows())
                    .map(|r| {
                        let s: f64 = w.row_codes(r).iter().zip(&x).map(|(c, v)| *c as f64 * v).sum();
                        s * scales[r]
                    })
                    .collect(),
            };
            for (v, b) in y.iter_mut().zip(&l.bias) {
                *v += b;
                if i + 1 < n {
                    *v = v.max(0.0);
                }
            }
            x = y;
        }
        ensure_finite(&x, "quantized forward produced a non-finite action")?;
        Ok(x)
    }
}

impl Policy for QuantizedModel {
    fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows())
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.forward(obs)
    }
}
