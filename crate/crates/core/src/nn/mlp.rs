use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use super::Policy;
use crate::error::{ensure_finite, Error, Result};

/// One affine layer, `z = W x + b`, with `W` stored as (out, in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Multi-layer perceptron policy: ReLU hidden layers, identity output giving
/// the action mean, and a fixed Gaussian standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    layers: Vec<Dense>,
    action_sigma: f64,
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer (`inputs[0]` is the state).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

/// Gradients with the same shapes as an [`MlpPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
}

impl Gradients {
    pub fn zeros_like(policy: &MlpPolicy) -> Self {
        Self {
            layers: policy
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Tensor2D::zeros(l.output_dim(), l.input_dim()),
                    bias: vec![0.0; l.output_dim()],
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Parameter groups in the same order as [`MlpPolicy::param_groups_mut`].
    pub fn groups(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups().concat()
    }
}

/// A training sample with a non-negative weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub state: &'a [f64],
    pub target: &'a [f64],
    pub weight: f64,
}

impl MlpPolicy {
    /// He-uniform initialised network with the given layer widths
    /// (`dims[0]` is the state dimension, the last entry the action dimension).
    pub fn new<R: Rng + ?Sized>(dims: &[usize], action_sigma: f64, rng: &mut R) -> Result<Self> {
        let mut policy = Self::zeros(dims, action_sigma)?;
        for layer in &mut policy.layers {
            let limit = (6.0 / layer.input_dim() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(policy)
    }

    pub fn zeros(dims: &[usize], action_sigma: f64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self::from_layers(layers, action_sigma)
    }

    pub fn from_layers(layers: Vec<Dense>, action_sigma: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::usage("policy needs at least one layer"));
        }
        if !(action_sigma > 0.0 && action_sigma.is_finite()) {
            return Err(Error::usage(format!("action_sigma must be > 0, got {action_sigma}")));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::usage(format!("layer {i}: bias length mismatch")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::usage(format!(
                    "layer {} output {} does not feed layer {} input {}",
                    i,
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            action_sigma,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn action_sigma(&self) -> f64 {
        self.action_sigma
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].input_dim()];
        dims.extend(self.layers.iter().map(Dense::output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Dense { weight, bias } = l;
                [weight.data_mut(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_input(&self, state: &[f64]) -> Result<()> {
        let want = self.layers[0].input_dim();
        if state.len() != want {
            return Err(Error::usage(format!(
                "state has {} entries, policy expects {}",
                state.len(),
                want
            )));
        }
        Ok(())
    }

    /// Action mean `mu(s)`.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_input(state)?;
        let mut x = state.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; l.output_dim()];
            l.weight.matvec_into(&x, &mut z);
            for (zi, b) in z.iter_mut().zip(&l.bias) {
                *zi += b;
                if i < last {
                    *zi = zi.max(0.0);
                }
            }
            x = z;
        }
        ensure_finite(&x, "policy forward produced a non-finite action")?;
        Ok(x)
    }

    pub fn forward_traced(&self, state: &[f64]) -> Result<Trace> {
        self.check_input(state)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = state.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; l.output_dim()];
            l.weight.matvec_into(&x, &mut z);
            z.iter_mut().zip(&l.bias).for_each(|(zi, b)| *zi += b);
            let next = if i + 1 < n {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        ensure_finite(pre.last().unwrap(), "policy forward produced a non-finite action")?;
        Ok(Trace { inputs, pre })
    }

    /// Accumulates parameter gradients given `d loss / d mu` for one trace.
    pub fn backprop(&self, trace: &Trace, grad_out: &[f64], grads: &mut Gradients) {
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let x = &trace.inputs[i];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                for (gw, xv) in g.weight.row_mut(r).iter_mut().zip(x) {
                    *gw += d * xv;
                }
            }
            if i == 0 {
                break;
            }
            let prev_pre = &trace.pre[i - 1];
            let mut next = vec![0.0; layer.input_dim()];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(layer.weight.row(r)) {
                    *n += d * w;
                }
            }
            for (n, z) in next.iter_mut().zip(prev_pre) {
                if *z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    /// Negative Gaussian log-likelihood of `target` without the constant term.
    pub fn nll(&self, mean: &[f64], target: &[f64]) -> f64 {
        let sq: f64 = mean.iter().zip(target).map(|(m, a)| (m - a) * (m - a)).sum();
        sq / (2.0 * self.action_sigma * self.action_sigma)
    }
}

impl Policy for MlpPolicy {
    fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.forward(obs)
    }
}

/// Weighted behaviour-cloning loss `sum_i w_i * nll_i / sum_i w_i` and its
/// gradient. A batch whose weights sum to zero yields zero loss and gradient.
pub fn backward(policy: &MlpPolicy, batch: &[WeightedSample<'_>]) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(Error::usage("backward called with an empty batch"));
    }
    if batch.iter().any(|s| !(s.weight >= 0.0)) {
        return Err(Error::usage("per-sample weights must be >= 0"));
    }
    let out_dim = policy.output_dim();
    let total: f64 = batch.iter().map(|s| s.weight).sum();
    let mut grads = Gradients::zeros_like(policy);
    if total == 0.0 {
        return Ok((grads, 0.0));
    }
    let inv_var = 1.0 / (policy.action_sigma * policy.action_sigma);
    let mut loss = 0.0;
    for s in batch {
        if s.target.len() != out_dim {
            return Err(Error::usage("target dimension mismatch"));
        }
        if s.weight == 0.0 {
            continue;
        }
        let trace = policy.forward_traced(s.state)?;
        let mu = trace.output();
        loss += s.weight * policy.nll(mu, s.target);
        let g: Vec<f64> = mu
            .iter()
            .zip(s.target)
            .map(|(m, a)| s.weight * (m - a) * inv_var / total)
            .collect();
        policy.backprop(&trace, &g, &mut grads);
    }
    let loss = loss / total;
    if !loss.is_finite() {
        return Err(Error::numeric("behaviour cloning loss"));
    }
    ensure_finite(&grads.flatten(), "behaviour cloning gradient")?;
    Ok((grads, loss))
}
