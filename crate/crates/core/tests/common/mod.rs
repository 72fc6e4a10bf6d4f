//! Reference implementations shared by the integration tests. Nothing here
//! calls into the library's forward or backward passes.
#![allow(dead_code)]

pub mod grad;
pub mod identities;
pub mod kernels;
pub mod quant;

use rand::Rng;
use sqil::nn::MlpPolicy;
use sqil::quant::{FakeQuantPolicy, QuantSpec, Targets};

pub fn qmax(bits: u32) -> f64 {
    ((1i64 << (bits - 1)) - 1) as f64
}

pub fn qmin(bits: u32) -> f64 {
    -((1i64 << (bits - 1)) as f64)
}

/// Symmetric quantizer written from the definition: scale, round half away
/// from zero, clamp.
pub fn quantize_ref(x: f64, gamma: f64, bits: u32) -> i64 {
    let v = x / gamma;
    let r = v.signum() * (v.abs() + 0.5).floor();
    r.clamp(qmin(bits), qmax(bits)) as i64
}

pub fn gemm_i32_ref(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Vec<i32> {
    let mut c = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0i64;
            for p in 0..k {
                s += a[i * k + p] as i64 * b[p * n + j] as i64;
            }
            c[i * n + j] = i32::try_from(s).unwrap();
        }
    }
    c
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs())) / scale
}

/// Plain ReLU MLP forward from raw row-major weights.
pub fn mlp_ref(weights: &[Vec<f64>], biases: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        let cols = h.len();
        let mut z: Vec<f64> = b.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += (0..cols).map(|c| w[r * cols + c] * h[c]).sum::<f64>();
        }
        if l + 1 < weights.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    h
}

pub fn raw_params(p: &MlpPolicy) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        p.layers().iter().map(|l| l.weight.data().to_vec()).collect(),
        p.layers().iter().map(|l| l.bias.clone()).collect(),
    )
}

/// Distillation metric of the oracle.
#[derive(Debug, Clone, Copy)]
pub enum Metric {
    L2,
    Kl,
}

pub fn nll_ref(mu: &[f64], a: &[f64], sigma: f64) -> f64 {
    mu.iter().zip(a).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / (2.0 * sigma * sigma)
}

/// `KL(N(mu_q, sq^2 I) || N(mu_f, sf^2 I))`, or half the squared distance.
pub fn dist_ref(metric: Metric, mu_q: &[f64], mu_f: &[f64], sq: f64, sf: f64) -> f64 {
    let d2: f64 = mu_q.iter().zip(mu_f).map(|(a, b)| (a - b).powi(2)).sum();
    match metric {
        Metric::L2 => 0.5 * d2,
        Metric::Kl => mu_q
            .iter()
            .zip(mu_f)
            .map(|(a, b)| (sf / sq).ln() + (sq * sq + (a - b).powi(2)) / (2.0 * sf * sf) - 0.5)
            .sum(),
    }
}

#[derive(Debug, Clone, Copy)]
enum Frozen {
    In(f64),
    Hi,
    Lo,
}

fn freeze(x: f64, gamma: f64, bits: u32) -> Frozen {
    let v = x / gamma;
    let q = v.round();
    if q > qmax(bits) {
        Frozen::Hi
    } else if q < qmin(bits) {
        Frozen::Lo
    } else {
        Frozen::In(q - v)
    }
}

fn thaw(f: Frozen, x: f64, gamma: f64, bits: u32) -> f64 {
    match f {
        Frozen::In(r) => x + r * gamma,
        Frozen::Hi => qmax(bits) * gamma,
        Frozen::Lo => qmin(bits) * gamma,
    }
}

/// Flat parameter vector of a fake-quantized network: weights and biases of
/// every layer, then weight scales, then activation scales.
#[derive(Debug, Clone)]
pub struct QNet {
    pub dims: Vec<usize>,
    pub bits: u32,
    pub per_channel: bool,
    pub quant_acts: bool,
    pub sigma: f64,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub wg: Vec<Vec<f64>>,
    pub ag: Vec<f64>,
}

/// Residuals of every rounding at the expansion point; the surrogate is the
/// straight-through linearisation of the quantizer around it.
pub struct Residuals {
    w: Vec<Vec<Frozen>>,
    /// Per sample, per quantized layer input.
    a: Vec<Vec<Vec<Frozen>>>,
}

impl QNet {
    pub fn from_policy(p: &FakeQuantPolicy) -> Self {
        let params = p.params().unwrap();
        let (w, b) = raw_params(p.base());
        let spec: &QuantSpec = p.spec();
        Self {
            dims: p.base().layer_dims(),
            bits: spec.bits,
            per_channel: params.weight_scales[0].len() > 1,
            quant_acts: spec.targets == Targets::WeightsActivations,
            sigma: p.base().action_sigma(),
            w,
            b,
            wg: params.weight_scales.clone(),
            ag: params.act_scales.clone(),
        }
    }

    fn scale_of(&self, l: usize, idx: usize) -> f64 {
        let cols = self.dims[l];
        if self.per_channel {
            self.wg[l][idx / cols]
        } else {
            self.wg[l][0]
        }
    }

    fn forward_with(&self, x: &[f64], res_w: &[Vec<Frozen>], res_a: Option<&[Vec<Frozen>]>, record: Option<&mut Vec<Vec<Frozen>>>, pre: &mut Vec<f64>) -> Vec<f64> {
        let mut rec = record;
        let mut h = x.to_vec();
        let layers = self.w.len();
        for l in 0..layers {
            if l > 0 && self.quant_acts {
                let g = self.ag[l - 1];
                let frozen: Vec<Frozen> = match res_a {
                    Some(r) => r[l - 1].clone(),
                    None => h.iter().map(|v| freeze(*v, g, self.bits)).collect(),
                };
                h = h.iter().zip(&frozen).map(|(v, f)| thaw(*f, *v, g, self.bits)).collect();
                if let Some(r) = rec.as_deref_mut() {
                    r.push(frozen);
                }
            }
            let cols = h.len();
            let mut z = self.b[l].clone();
            for (r, zr) in z.iter_mut().enumerate() {
                for c in 0..cols {
                    let idx = r * cols + c;
                    let wh = thaw(res_w[l][idx], self.w[l][idx], self.scale_of(l, idx), self.bits);
                    *zr += wh * h[c];
                }
            }
            if l + 1 < layers {
                pre.extend_from_slice(&z);
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        h
    }

    /// Freezes residuals at the current parameters for the given states and
    /// returns the hidden pre-activations seen on the way.
    pub fn freeze(&self, states: &[Vec<f64>]) -> (Residuals, Vec<f64>) {
        let w = self
            .w
            .iter()
            .enumerate()
            .map(|(l, wl)| {
                wl.iter()
                    .enumerate()
                    .map(|(i, v)| freeze(*v, self.scale_of(l, i), self.bits))
                    .collect()
            })
            .collect::<Vec<_>>();
        let mut pre = Vec::new();
        let mut a = Vec::new();
        for s in states {
            let mut rec = Vec::new();
            self.forward_with(s, &w, None, Some(&mut rec), &mut pre);
            a.push(rec);
        }
        (Residuals { w, a }, pre)
    }

    pub fn forward(&self, res: &Residuals, sample: usize, x: &[f64]) -> Vec<f64> {
        self.forward_with(x, &res.w, Some(&res.a[sample]), None, &mut Vec::new())
    }

    pub fn n_params(&self) -> usize {
        self.w.iter().chain(&self.b).chain(&self.wg).map(Vec::len).sum::<usize>() + self.ag.len()
    }

    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for group in self.w.iter_mut().zip(self.b.iter_mut()).flat_map(|(w, b)| [w, b]) {
            if i < group.len() {
                return &mut group[i];
            }
            i -= group.len();
        }
        for group in &mut self.wg {
            if i < group.len() {
                return &mut group[i];
            }
            i -= group.len();
        }
        &mut self.ag[i]
    }

    /// LSQ gradient scale of parameter `i` when it is a scale, else 1.
    pub fn grad_scale(&self, mut i: usize) -> f64 {
        let wb: usize = self.w.iter().chain(&self.b).map(Vec::len).sum();
        if i < wb {
            return 1.0;
        }
        i -= wb;
        for (l, group) in self.wg.iter().enumerate() {
            if i < group.len() {
                let n = if self.per_channel { self.dims[l] } else { self.dims[l] * self.dims[l + 1] };
                return 1.0 / (n as f64 * qmax(self.bits)).sqrt();
            }
            i -= group.len();
        }
        1.0 / (self.dims[i + 1] as f64 * qmax(self.bits)).sqrt()
    }

    /// Index ranges of the parameter groups in the flat layout.
    pub fn groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut at = 0;
        let lens = self
            .w
            .iter()
            .zip(&self.b)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .chain(self.wg.iter().map(Vec::len))
            .chain(std::iter::once(self.ag.len()));
        for n in lens {
            out.push(at..at + n);
            at += n;
        }
        out
    }

    pub fn is_scale(&self, i: usize) -> bool {
        i >= self.w.iter().chain(&self.b).map(Vec::len).sum::<usize>()
    }
}

/// One sample of an oracle batch.
pub struct Sample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub weight: f64,
    pub flagged: bool,
    pub teacher: Vec<f64>,
}

pub struct LossSpec {
    pub qat: f64,
    pub qrd: f64,
    pub beta: f64,
    pub metric: Metric,
    pub teacher_sigma: f64,
}

pub fn surrogate_loss(net: &QNet, res: &Residuals, batch: &[Sample], spec: &LossSpec) -> (f64, f64) {
    let total: f64 = batch.iter().map(|s| s.weight).sum();
    let (mut qat, mut qrd) = (0.0, 0.0);
    for (i, s) in batch.iter().enumerate() {
        let mu = net.forward(res, i, &s.state);
        qat += s.weight * nll_ref(&mu, &s.action, net.sigma);
        let alpha = if s.flagged { spec.beta } else { 1.0 };
        qrd += alpha * s.weight * dist_ref(spec.metric, &mu, &s.teacher, net.sigma, spec.teacher_sigma);
    }
    (spec.qat * qat / total, spec.qrd * qrd / total)
}

/// Central differences of the surrogate, multiplied by each parameter's LSQ
/// gradient scale.
pub fn surrogate_fd(net: &QNet, res: &Residuals, batch: &[Sample], spec: &LossSpec, h: f64) -> Vec<f64> {
    let mut work = net.clone();
    (0..net.n_params())
        .map(|i| {
            let x0 = *work.param_mut(i);
            *work.param_mut(i) = x0 + h;
            let (a, b) = surrogate_loss(&work, res, batch, spec);
            *work.param_mut(i) = x0 - h;
            let (c, d) = surrogate_loss(&work, res, batch, spec);
            *work.param_mut(i) = x0;
            ((a + b) - (c + d)) / (2.0 * h) * net.grad_scale(i)
        })
        .collect()
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
