//! Integer kernels and export against materialised references.

use rand::Rng;
use sqil::nn::MlpPolicy;
use sqil::qkernels::{gemm_i8i8_i32, matvec_w4_f32, pack_int4, QuantizedModel, QuantizedWeights};
use sqil::quant::{FakeQuantPolicy, Granularity, QuantSpec, Scheme, Targets};
use sqil::rng::rng_for;

use super::{max_rel_err, quantize_ref, uniform_vec};

fn codes<R: Rng>(rng: &mut R, n: usize, lo: i8, hi: i8) -> Vec<i8> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// `cases` random shapes with every side in `1..=max_side`; returns the
/// number of shapes whose product differs from the i64 reference.
pub fn gemm_mismatches(cases: u64, max_side: usize) -> usize {
    (0..cases)
        .filter(|c| {
            let mut rng = rng_for(&[0x6e, *c]);
            let (m, k, n) = if *c == 0 {
                (max_side, max_side, max_side)
            } else {
                (rng.random_range(1..=max_side), rng.random_range(1..=max_side), rng.random_range(1..=max_side))
            };
            let (a, b) = if *c == 1 {
                (vec![-128i8; m * k], vec![-128i8; k * n])
            } else {
                (codes(&mut rng, m * k, -128, 127), codes(&mut rng, k * n, -128, 127))
            };
            gemm_i8i8_i32(&a, &b, m, k, n).unwrap() != super::gemm_i32_ref(&a, &b, m, k, n)
        })
        .count()
}

/// Worst relative error of the packed weight-only matvec against a dense
/// f64 product with the dequantized matrix.
pub fn matvec_worst(cases: u64) -> f64 {
    (0..cases)
        .map(|c| {
            let mut rng = rng_for(&[0x4d, c]);
            let (rows, cols) = (rng.random_range(1..=256), rng.random_range(1..=256));
            let q = codes(&mut rng, rows * cols, -8, 7);
            let scales = uniform_vec(&mut rng, rows, 1e-3, 0.5);
            let w = pack_int4(rows, cols, &q, scales.clone()).unwrap();
            let x: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let got: Vec<f64> = matvec_w4_f32(&w, &x).unwrap().into_iter().map(f64::from).collect();
            let want: Vec<f64> = (0..rows)
                .map(|r| (0..cols).map(|j| q[r * cols + j] as f64 * scales[r] * x[j] as f64).sum())
                .collect();
            max_rel_err(&got, &want)
        })
        .fold(0.0, f64::max)
}

pub fn export_specs() -> Vec<QuantSpec> {
    let lsq = |bits, granularity, targets| QuantSpec { bits, granularity, scheme: Scheme::Lsq, targets };
    vec![
        QuantSpec::w4a4_lsq(),
        lsq(4, Granularity::PerChannel, Targets::WeightsActivations),
        QuantSpec::weight_only(4, Granularity::PerChannel),
        QuantSpec::weight_only(3, Granularity::PerTensor),
        lsq(8, Granularity::PerTensor, Targets::WeightsActivations),
        QuantSpec::weight_only(6, Granularity::PerChannel),
    ]
}

pub fn calibrated(spec: QuantSpec, seed: u64, dims: &[usize]) -> (FakeQuantPolicy, Vec<Vec<f64>>) {
    let mut rng = rng_for(&[0xe7, seed]);
    let base = MlpPolicy::new(dims, 0.1, &mut rng).unwrap();
    let states: Vec<Vec<f64>> = (0..64).map(|_| uniform_vec(&mut rng, dims[0], 0.0, 1.0)).collect();
    (FakeQuantPolicy::ptq(base, spec, &states[..32]).unwrap(), states)
}

/// Forward pass with weights and hidden activations rounded by the
/// reference quantizer.
pub fn fake_quant_ref(fq: &FakeQuantPolicy, x: &[f64]) -> Vec<f64> {
    let p = fq.params().unwrap();
    let bits = fq.spec().bits;
    let acts = fq.spec().quantizes_activations();
    let mut h = x.to_vec();
    let layers = fq.base().layers();
    for (l, layer) in layers.iter().enumerate() {
        if l > 0 && acts {
            let g = p.act_scales[l - 1];
            h = h.iter().map(|v| quantize_ref(*v, g, bits) as f64 * g).collect();
        }
        let cols = layer.weight.cols();
        let g = &p.weight_scales[l];
        let mut z = layer.bias.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            let s = g[if g.len() == 1 { 0 } else { r }];
            for c in 0..cols {
                *zr += quantize_ref(layer.weight.get(r, c), s, bits) as f64 * s * h[c];
            }
        }
        if l + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    h
}

/// Worst relative error of the exported model and of the fake-quantized
/// forward against [`fake_quant_ref`].
pub fn export_worst(seeds: u64) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for spec in export_specs() {
        for s in 0..seeds {
            let (fq, states) = calibrated(spec, s, &[11, 64, 64, 3]);
            let model = QuantizedModel::from_fake_quant(&fq).unwrap();
            for x in &states {
                let want = fake_quant_ref(&fq, x);
                worst.0 = worst.0.max(max_rel_err(&model.forward(x).unwrap(), &want));
                worst.1 = worst.1.max(max_rel_err(&fq.forward(x).unwrap(), &want));
            }
        }
    }
    worst
}

/// Packed int4 weight bytes, scale bytes and f32 bytes of the same matrices.
pub fn int4_bytes(model: &QuantizedModel) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for l in &model.layers {
        let QuantizedWeights::Int4(w) = &l.weights else {
            panic!("expected packed int4 weights");
        };
        out.0 += w.weight_bytes();
        out.1 += w.scale_bytes();
        out.2 += 4 * w.rows() * w.cols();
    }
    out
}
