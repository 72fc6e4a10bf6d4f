use super::{
    calibrate_rtn, fake_quant, lsq_activation_init, lsq_grad_scale, qmax, qmin, Granularity,
    QuantParams, QuantSpec, GAMMA_FLOOR,
};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{adam_step, AdamState, Gradients, MlpPolicy, Policy, Tensor2D};

/// A policy whose forward pass replaces weights (and optionally hidden
/// activations) by their quantize-dequantize images. The latent full-precision
/// weights in `base` are what training updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantPolicy {
    base: MlpPolicy,
    spec: QuantSpec,
    params: Option<QuantParams>,
    /// Dequantized weights for the current latent weights and scales.
    cache: Vec<Tensor2D>,
}

/// Activations recorded by [`FakeQuantPolicy::forward_traced`].
#[derive(Debug, Clone)]
pub struct QuantTrace {
    /// Layer inputs before activation quantization.
    pub inputs: Vec<Vec<f64>>,
    /// Layer inputs as consumed by the layer.
    pub inputs_hat: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl QuantTrace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gradients of a loss with respect to the trainable state of a
/// [`FakeQuantPolicy`]: latent weights and biases, then scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGradients {
    pub weights: Gradients,
    pub weight_scales: Vec<Vec<f64>>,
    pub act_scales: Vec<f64>,
}

impl QuantGradients {
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut g = self.weights.groups();
        g.extend(self.weight_scales.iter().map(Vec::as_slice));
        g.push(&self.act_scales);
        g
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups().concat()
    }
}

/// Per-batch accumulator: gradients with respect to the dequantized weights
/// and the activation scales, before the straight-through mapping.
#[derive(Debug, Clone)]
pub struct QuantAccumulator {
    hat: Gradients,
    act: Vec<f64>,
}

impl FakeQuantPolicy {
    /// Wraps `base` without scales; call [`calibrate`](Self::calibrate) before use.
    pub fn new(base: MlpPolicy, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            base,
            spec,
            params: None,
            cache: Vec::new(),
        })
    }

    pub fn from_parts(base: MlpPolicy, spec: QuantSpec, params: QuantParams) -> Result<Self> {
        let mut p = Self::new(base, spec)?;
        p.check_params(&params)?;
        p.params = Some(params);
        p.refresh();
        Ok(p)
    }

    /// Round-to-nearest calibration of every weight tensor plus LSQ
    /// initialisation of activation scales from `calib_states`.
    pub fn ptq(base: MlpPolicy, spec: QuantSpec, calib_states: &[Vec<f64>]) -> Result<Self> {
        let mut p = Self::new(base, spec)?;
        p.calibrate(calib_states)?;
        Ok(p)
    }

    pub fn calibrate(&mut self, calib_states: &[Vec<f64>]) -> Result<()> {
        let bits = self.spec.bits;
        let mut weight_scales = Vec::new();
        let mut weight_grad_scale = Vec::new();
        for l in self.base.layers() {
            let g = calibrate_rtn(&l.weight, &self.spec)?;
            let per = l.weight.data().len() / g.len();
            weight_grad_scale.push(lsq_grad_scale(per, bits));
            weight_scales.push(g);
        }
        let mut act_scales = Vec::new();
        let mut act_grad_scale = Vec::new();
        if self.spec.quantizes_activations() {
            if calib_states.is_empty() {
                return Err(Error::usage("activation calibration needs at least one state"));
            }
            let n = self.base.layers().len();
            let mut samples: Vec<Vec<f64>> = vec![Vec::new(); n.saturating_sub(1)];
            for s in calib_states {
                let trace = self.base.forward_traced(s)?;
                for (i, buf) in samples.iter_mut().enumerate() {
                    buf.extend_from_slice(&trace.inputs[i + 1]);
                }
            }
            for (i, buf) in samples.iter().enumerate() {
                act_scales.push(lsq_activation_init(buf, bits));
                act_grad_scale.push(lsq_grad_scale(self.base.layers()[i + 1].input_dim(), bits));
            }
        }
        self.params = Some(QuantParams {
            weight_scales,
            act_scales,
            weight_grad_scale,
            act_grad_scale,
        });
        self.refresh();
        Ok(())
    }

    fn check_params(&self, params: &QuantParams) -> Result<()> {
        params.validate()?;
        let layers = self.base.layers();
        if params.weight_scales.len() != layers.len() || params.weight_grad_scale.len() != layers.len() {
            return Err(Error::usage("weight scale count does not match layer count"));
        }
        for (l, g) in layers.iter().zip(&params.weight_scales) {
            let want = match self.spec.granularity {
                Granularity::PerTensor => 1,
                Granularity::PerChannel => l.output_dim(),
            };
            if g.len() != want {
                return Err(Error::usage("weight scale shape does not match granularity"));
            }
        }
        let want_act = if self.spec.quantizes_activations() {
            layers.len() - 1
        } else {
            0
        };
        if params.act_scales.len() != want_act || params.act_grad_scale.len() != want_act {
            return Err(Error::usage("activation scale count does not match spec"));
        }
        Ok(())
    }

    pub fn base(&self) -> &MlpPolicy {
        &self.base
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn params(&self) -> Option<&QuantParams> {
        self.params.as_ref()
    }

    pub fn is_calibrated(&self) -> bool {
        self.params.is_some()
    }

    fn params_checked(&self) -> Result<&QuantParams> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::usage("fake-quantized policy used before calibration"))
    }

    /// Dequantized weight matrices currently used by the forward pass.
    pub fn dequantized_weights(&self) -> Result<&[Tensor2D]> {
        self.params_checked()?;
        Ok(&self.cache)
    }

    /// Integer weight codes of layer `layer`, row-major.
    pub fn weight_codes(&self, layer: usize) -> Result<Vec<i32>> {
        let params = self.params_checked()?;
        if self.spec.is_passthrough() {
            return Err(Error::usage("passthrough spec has no integer codes"));
        }
        let w = &self.base.layers()[layer].weight;
        let g = &params.weight_scales[layer];
        let bits = self.spec.bits;
        let mut out = Vec::with_capacity(w.data().len());
        for r in 0..w.rows() {
            let gamma = g[if g.len() == 1 { 0 } else { r }];
            out.extend(w.row(r).iter().map(|v| super::quantize_unchecked(*v, gamma, bits) as i32));
        }
        Ok(out)
    }

    /// Recomputes the dequantized weight cache; floors scales at the minimum.
    fn refresh(&mut self) {
        let Some(params) = self.params.as_mut() else {
            return;
        };
        params
            .weight_scales
            .iter_mut()
            .flatten()
            .chain(params.act_scales.iter_mut())
            .for_each(|g| *g = g.max(GAMMA_FLOOR));
        let bits = self.spec.bits;
        let passthrough = self.spec.is_passthrough();
        self.cache = self
            .base
            .layers()
            .iter()
            .zip(&params.weight_scales)
            .map(|(l, g)| {
                let mut w = l.weight.clone();
                if !passthrough {
                    let cols = w.cols();
                    for (i, v) in w.data_mut().iter_mut().enumerate() {
                        let gamma = g[if g.len() == 1 { 0 } else { i / cols }];
                        *v = fake_quant(*v, gamma, bits);
                    }
                }
                w
            })
            .collect();
    }

    #[inline]
    fn quant_act(&self, x: f64, layer: usize, params: &QuantParams) -> f64 {
        if layer == 0 || !self.spec.quantizes_activations() || self.spec.is_passthrough() {
            x
        } else {
            fake_quant(x, params.act_scales[layer - 1], self.spec.bits)
        }
    }

    fn check_input(&self, state: &[f64]) -> Result<&QuantParams> {
        let params = self.params_checked()?;
        if state.len() != self.base.input_dim() {
            return Err(Error::usage(format!(
                "state has {} entries, policy expects {}",
                state.len(),
                self.base.input_dim()
            )));
        }
        Ok(params)
    }

    /// Fake-quantized action mean.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        let params = self.check_input(state)?;
        let n = self.cache.len();
        let mut x = state.to_vec();
        for (i, (w, l)) in self.cache.iter().zip(self.base.layers()).enumerate() {
            for v in x.iter_mut() {
                *v = self.quant_act(*v, i, params);
            }
            let mut z = vec![0.0; w.rows()];
            w.matvec_into(&x, &mut z);
            for (zi, b) in z.iter_mut().zip(&l.bias) {
                *zi += b;
                if i + 1 < n {
                    *zi = zi.max(0.0);
                }
            }
            x = z;
        }
        ensure_finite(&x, "fake-quantized forward produced a non-finite action")?;
        Ok(x)
    }

    pub fn forward_traced(&self, state: &[f64]) -> Result<QuantTrace> {
        let params = self.check_input(state)?;
        let n = self.cache.len();
        let mut inputs = Vec::with_capacity(n);
        let mut inputs_hat = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = state.to_vec();
        for (i, (w, l)) in self.cache.iter().zip(self.base.layers()).enumerate() {
            let xh: Vec<f64> = x.iter().map(|v| self.quant_act(*v, i, params)).collect();
            let mut z = vec![0.0; w.rows()];
            w.matvec_into(&xh, &mut z);
            z.iter_mut().zip(&l.bias).for_each(|(zi, b)| *zi += b);
            let next = if i + 1 < n {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut x, next));
            inputs_hat.push(xh);
            pre.push(z);
        }
        ensure_finite(pre.last().unwrap(), "fake-quantized forward produced a non-finite action")?;
        Ok(QuantTrace {
            inputs,
            inputs_hat,
            pre,
        })
    }

    pub fn accumulator(&self) -> QuantAccumulator {
        QuantAccumulator {
            hat: Gradients::zeros_like(&self.base),
            act: vec![0.0; self.params.as_ref().map_or(0, |p| p.act_scales.len())],
        }
    }

    /// Accumulates `d loss / d mu` for one trace into `acc`.
    pub fn backprop(&self, trace: &QuantTrace, grad_out: &[f64], acc: &mut QuantAccumulator) {
        let Some(params) = self.params.as_ref() else {
            return;
        };
        let quant_acts = self.spec.quantizes_activations() && !self.spec.is_passthrough();
        let bits = self.spec.bits;
        let mut delta = grad_out.to_vec();
        for i in (0..self.cache.len()).rev() {
            let w = &self.cache[i];
            let g = &mut acc.hat.layers[i];
            let xh = &trace.inputs_hat[i];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                for (gw, xv) in g.weight.row_mut(r).iter_mut().zip(xh) {
                    *gw += d * xv;
                }
            }
            if i == 0 {
                break;
            }
            let mut dx = vec![0.0; w.cols()];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (n, wv) in dx.iter_mut().zip(w.row(r)) {
                    *n += d * wv;
                }
            }
            if quant_acts {
                let gamma = params.act_scales[i - 1];
                let (lo, hi) = (qmin(bits), qmax(bits));
                let mut dgamma = 0.0;
                for (d, x) in dx.iter_mut().zip(&trace.inputs[i]) {
                    let v = x / gamma;
                    let q = v.round();
                    if q > hi as f64 {
                        dgamma += hi as f64 * *d;
                        *d = 0.0;
                    } else if q < lo as f64 {
                        dgamma += lo as f64 * *d;
                        *d = 0.0;
                    } else {
                        dgamma += (q - v) * *d;
                    }
                }
                acc.act[i - 1] += dgamma * params.act_grad_scale[i - 1];
            }
            for (d, z) in dx.iter_mut().zip(&trace.pre[i - 1]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = dx;
        }
    }

    /// Straight-through mapping of the accumulated gradients: in-range weights
    /// pass the gradient unchanged, clipped weights get zero, and each weight
    /// scale receives the learned-step-size gradient times its gradient scale.
    pub fn finish(&self, acc: QuantAccumulator) -> QuantGradients {
        let mut weights = acc.hat;
        let mut weight_scales: Vec<Vec<f64>> = Vec::new();
        let Some(params) = self.params.as_ref() else {
            return QuantGradients {
                weights,
                weight_scales,
                act_scales: acc.act,
            };
        };
        let bits = self.spec.bits;
        let passthrough = self.spec.is_passthrough();
        for (li, (layer, gl)) in self.base.layers().iter().zip(&mut weights.layers).enumerate() {
            let scales = &params.weight_scales[li];
            let mut dg = vec![0.0; scales.len()];
            if !passthrough {
                let cols = layer.weight.cols();
                let (lo, hi) = (qmin(bits) as f64, qmax(bits) as f64);
                for (idx, (w, d)) in layer
                    .weight
                    .data()
                    .iter()
                    .zip(gl.weight.data_mut())
                    .enumerate()
                {
                    let si = if scales.len() == 1 { 0 } else { idx / cols };
                    let v = w / scales[si];
                    let q = v.round();
                    if q > hi {
                        dg[si] += hi * *d;
                        *d = 0.0;
                    } else if q < lo {
                        dg[si] += lo * *d;
                        *d = 0.0;
                    } else {
                        dg[si] += (q - v) * *d;
                    }
                }
                dg.iter_mut().for_each(|v| *v *= params.weight_grad_scale[li]);
            }
            weight_scales.push(dg);
        }
        QuantGradients {
            weights,
            weight_scales,
            act_scales: acc.act,
        }
    }

    /// One Adam step on latent weights, biases and (for LSQ) scales.
    pub fn apply_adam(&mut self, grads: &QuantGradients, state: &mut AdamState) -> Result<()> {
        let lsq = self.spec.scheme == super::Scheme::Lsq;
        let params = self
            .params
            .as_mut()
            .ok_or_else(|| Error::usage("fake-quantized policy used before calibration"))?;
        let mut groups = self.base.param_groups_mut();
        let mut grad_groups = grads.weights.groups();
        if lsq {
            groups.extend(params.weight_scales.iter_mut().map(Vec::as_mut_slice));
            groups.push(params.act_scales.as_mut_slice());
            grad_groups.extend(grads.weight_scales.iter().map(Vec::as_slice));
            grad_groups.push(&grads.act_scales);
        }
        adam_step(&mut groups, &grad_groups, state)?;
        self.refresh();
        if !self.base.is_finite() {
            return Err(Error::numeric("latent weights diverged"));
        }
        Ok(())
    }

    /// Parameter group sizes matching [`apply_adam`](Self::apply_adam).
    pub fn adam_group_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self
            .base
            .layers()
            .iter()
            .flat_map(|l| [l.weight.data().len(), l.bias.len()])
            .collect();
        if self.spec.scheme == super::Scheme::Lsq {
            if let Some(p) = &self.params {
                sizes.extend(p.weight_scales.iter().map(Vec::len));
                sizes.push(p.act_scales.len());
            }
        }
        sizes
    }
}

impl Policy for FakeQuantPolicy {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.base.output_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.forward(obs)
    }
}
