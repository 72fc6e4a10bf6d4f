//! Integer inference kernels: int8 and packed int4 weight storage, i8 x i8
//! GEMM with i32 accumulation, weight-only int4 matvec with on-the-fly
//! dequantization, and latency benchmarks against a naive f32 GEMM.

mod bench;
mod export;

pub use bench::{bench, format_reports, naive_gemm_f32, BenchConfig, GemmBenchReport};
pub use export::{QuantizedLayer, QuantizedModel, QuantizedWeights};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Int8 weight matrix with one scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scales: Vec<f64>,
}

impl Int8Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, scales: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || scales.len() != rows {
            return Err(Error::usage("int8 matrix buffers do not match its shape"));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scales,
        })
    }

    /// From integer codes; every code must fit in `i8`.
    pub fn from_codes(rows: usize, cols: usize, codes: &[i32], scales: Vec<f64>) -> Result<Self> {
        let data = codes
            .iter()
            .map(|c| i8::try_from(*c).map_err(|_| Error::usage(format!("code {c} does not fit in 8 bits"))))
            .collect::<Result<_>>()?;
        Self::new(rows, cols, data, scales)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn weight_bytes(&self) -> usize {
        self.data.len()
    }
}

/// Two signed 4-bit codes per byte, low nibble first (even column), with one
/// scale per row. Rows are padded to a whole byte.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInt4Matrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
    scales: Vec<f64>,
}

#[inline]
fn nibble(code: i8) -> u8 {
    (code as u8) & 0x0F
}

#[inline]
fn sign_extend(n: u8) -> i8 {
    ((n << 4) as i8) >> 4
}

/// Packs row-major codes in `[-8, 7]`.
pub fn pack_int4(rows: usize, cols: usize, codes: &[i8], scales: Vec<f64>) -> Result<PackedInt4Matrix> {
    if codes.len() != rows * cols || scales.len() != rows {
        return Err(Error::usage("int4 codes do not match the matrix shape"));
    }
    if let Some(c) = codes.iter().find(|c| !(-8..=7).contains(*c)) {
        return Err(Error::usage(format!("code {c} does not fit in 4 bits")));
    }
    let stride = cols.div_ceil(2);
    let mut bytes = vec![0u8; rows * stride];
    for r in 0..rows {
        for c in 0..cols {
            let b = &mut bytes[r * stride + c / 2];
            let v = nibble(codes[r * cols + c]);
            *b |= if c % 2 == 0 { v } else { v << 4 };
        }
    }
    Ok(PackedInt4Matrix {
        rows,
        cols,
        bytes,
        scales,
    })
}

/// Inverse of [`pack_int4`].
pub fn unpack_int4(m: &PackedInt4Matrix) -> Vec<i8> {
    let mut out = Vec::with_capacity(m.rows * m.cols);
    for r in 0..m.rows {
        out.extend_from_slice(&m.unpack_row(r));
    }
    out
}

impl PackedInt4Matrix {
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>, scales: Vec<f64>) -> Result<Self> {
        if bytes.len() != rows * cols.div_ceil(2) || scales.len() != rows {
            return Err(Error::usage("packed int4 buffers do not match the matrix shape"));
        }
        Ok(Self {
            rows,
            cols,
            bytes,
            scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn row_bytes(&self, r: usize) -> &[u8] {
        let stride = self.cols.div_ceil(2);
        &self.bytes[r * stride..(r + 1) * stride]
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        let b = self.row_bytes(r)[c / 2];
        sign_extend(if c % 2 == 0 { b & 0x0F } else { b >> 4 })
    }

    pub fn unpack_row(&self, r: usize) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.cols + 1);
        for b in self.row_bytes(r) {
            out.push(sign_extend(b & 0x0F));
            out.push(sign_extend(b >> 4));
        }
        out.truncate(self.cols);
        out
    }

    /// Packed weight bytes, excluding scales.
    pub fn weight_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn scale_bytes(&self) -> usize {
        self.scales.len() * std::mem::size_of::<f64>()
    }
}

#[inline]
fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(x, y)| *x as i32 * *y as i32).sum()
}

fn check_gemm(a: usize, b: usize, m: usize, k: usize, n: usize) -> Result<()> {
    if a != m * k || b != k * n {
        return Err(Error::usage(format!("gemm operands do not match {m}x{k} * {k}x{n}")));
    }
    if k > 1 << 23 {
        return Err(Error::usage("inner dimension too large for i32 accumulation"));
    }
    Ok(())
}

fn transpose_i8(b: &[i8], k: usize, n: usize) -> Vec<i8> {
    let mut t = vec![0i8; k * n];
    for i in 0..k {
        for j in 0..n {
            t[j * k + i] = b[i * n + j];
        }
    }
    t
}

/// `A (m x k) * B (k x n)` with exact i32 accumulation, row-major.
pub fn gemm_i8i8_i32(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Result<Vec<i32>> {
    check_gemm(a.len(), b.len(), m, k, n)?;
    let bt = transpose_i8(b, k, n);
    let mut c = vec![0i32; m * n];
    if k == 0 {
        return Ok(c);
    }
    for (row, out) in a.chunks_exact(k).zip(c.chunks_exact_mut(n.max(1))) {
        for (o, col) in out.iter_mut().zip(bt.chunks_exact(k)) {
            *o = dot_i8(row, col);
        }
    }
    Ok(c)
}

/// Row-parallel [`gemm_i8i8_i32`].
pub fn gemm_i8i8_i32_parallel(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Result<Vec<i32>> {
    check_gemm(a.len(), b.len(), m, k, n)?;
    let bt = transpose_i8(b, k, n);
    let mut c = vec![0i32; m * n];
    if k == 0 || n == 0 {
        return Ok(c);
    }
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out, row)| {
            for (o, col) in out.iter_mut().zip(bt.chunks_exact(k)) {
                *o = dot_i8(row, col);
            }
        });
    Ok(c)
}

/// `Y = X * W^T` for int8 activations `x` (`n x cols`, one per-tensor
/// scale) and int8 weights, dequantized to f32.
pub fn gemm_w8a8(w: &Int8Matrix, x: &[i8], n: usize, x_scale: f64) -> Result<Vec<f32>> {
    if x.len() != n * w.cols {
        return Err(Error::usage("activation matrix does not match the weight columns"));
    }
    let mut y = vec![0f32; n * w.rows];
    for (xi, out) in x.chunks_exact(w.cols.max(1)).zip(y.chunks_exact_mut(w.rows.max(1))) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (dot_i8(w.row(r), xi) as f64 * x_scale * w.scales[r]) as f32;
        }
    }
    Ok(y)
}

/// Integer accumulators of packed int4 weights times 4-bit activation codes
/// (`x` holds `n x cols` codes in `[-8, 7]`).
pub fn gemm_w4a4_i32(w: &PackedInt4Matrix, x: &[i8], n: usize) -> Result<Vec<i32>> {
    if x.len() != n * w.cols {
        return Err(Error::usage("activation matrix does not match the weight columns"));
    }
    let mut acc = vec![0i32; n * w.rows];
    let mut row = vec![0i8; w.cols];
    for r in 0..w.rows {
        row.copy_from_slice(&w.unpack_row(r));
        for (i, xi) in x.chunks_exact(w.cols.max(1)).enumerate().take(n) {
            acc[i * w.rows + r] = dot_i8(&row, xi);
        }
    }
    Ok(acc)
}

/// [`gemm_w4a4_i32`] dequantized with the activation and per-row weight scales.
pub fn gemm_w4a4(w: &PackedInt4Matrix, x: &[i8], n: usize, x_scale: f64) -> Result<Vec<f32>> {
    let acc = gemm_w4a4_i32(w, x, n)?;
    Ok(acc
        .iter()
        .enumerate()
        .map(|(i, a)| (*a as f64 * x_scale * w.scales[i % w.rows]) as f32)
        .collect())
}

/// Weight-only int4 matvec: weights are decoded and scaled while reading.
pub fn matvec_w4_f32(w: &PackedInt4Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols {
        return Err(Error::usage("vector length does not match the weight columns"));
    }
    Ok((0..w.rows)
        .map(|r| {
            let mut acc = 0f32;
            for (pair, b) in x.chunks(2).zip(w.row_bytes(r)) {
                acc += sign_extend(b & 0x0F) as f32 * pair[0];
                if let Some(x1) = pair.get(1) {
                    acc += sign_extend(b >> 4) as f32 * x1;
                }
            }
            acc * w.scales[r] as f32
        })
        .collect())
}

/// Symmetric codes of `x` at `bits` with scale `gamma`, as `i8`.
pub fn quantize_activations(x: &[f64], gamma: f64, bits: u32) -> Result<Vec<i8>> {
    if bits > 8 {
        return Err(Error::usage("integer activations need at most 8 bits"));
    }
    x.iter()
        .map(|v| crate::quant::quantize(*v, gamma, bits).map(|c| c as i8))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_layout_low_nibble_first() {
        let m = pack_int4(1, 2, &[-8, 7], vec![1.0]).unwrap();
        assert_eq!(m.bytes(), &[0x78]);
        assert_eq!(unpack_int4(&m), vec![-8, 7]);
    }

    #[test]
    fn odd_columns_pad_each_row() {
        let codes = [1, -2, 3, -4, 5, -6];
        let m = pack_int4(2, 3, &codes, vec![1.0, 1.0]).unwrap();
        assert_eq!(m.weight_bytes(), 4);
        assert_eq!(unpack_int4(&m), codes.to_vec());
        assert_eq!(m.get(1, 2), -6);
    }

    #[test]
    fn out_of_range_code_rejected() {
        assert!(pack_int4(1, 1, &[8], vec![1.0]).is_err());
        assert!(Int8Matrix::from_codes(1, 1, &[128], vec![1.0]).is_err());
    }

    #[test]
    fn two_by_two_gemm() {
        let c = gemm_i8i8_i32(&[1, 2, 3, 4], &[5, 6, 7, 8], 2, 2, 2).unwrap();
        assert_eq!(c, vec![19, 22, 43, 50]);
        assert_eq!(c, gemm_i8i8_i32_parallel(&[1, 2, 3, 4], &[5, 6, 7, 8], 2, 2, 2).unwrap());
    }

    #[test]
    fn identity_gemm() {
        let m: Vec<i8> = (0..9).map(|v| v as i8 - 4).collect();
        let id = [1, 0, 0, 0, 1, 0, 0, 0, 1];
        let c = gemm_i8i8_i32(&id, &m, 3, 3, 3).unwrap();
        assert_eq!(c, m.iter().map(|v| *v as i32).collect::<Vec<_>>());
    }

    #[test]
    fn extreme_codes_do_not_overflow() {
        let k = 4096;
        let a = vec![-128i8; k];
        let c = gemm_i8i8_i32(&a, &a, 1, k, 1).unwrap();
        assert_eq!(c[0], 128 * 128 * k as i32);
    }

    #[test]
    fn zero_codes_zero_output_and_one_hot_column() {
        let z = pack_int4(3, 4, &[0; 12], vec![0.5; 3]).unwrap();
        assert_eq!(matvec_w4_f32(&z, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        let codes: Vec<i8> = (0..12).map(|v| (v % 16 - 8) as i8).collect();
        let m = pack_int4(3, 4, &codes, vec![0.5, 0.25, 2.0]).unwrap();
        let y = matvec_w4_f32(&m, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        for r in 0..3 {
            assert_eq!(y[r], codes[r * 4 + 2] as f32 * m.scales()[r] as f32);
        }
    }

    #[test]
    fn w4a4_matches_w8a8_on_same_codes() {
        let w: Vec<i8> = (0..6).map(|v| v as i8 - 3).collect();
        let x: Vec<i8> = vec![1, -2, 3, 7, -8, 0];
        let p = pack_int4(2, 3, &w, vec![0.5, 0.25]).unwrap();
        let q = Int8Matrix::new(2, 3, w, vec![0.5, 0.25]).unwrap();
        assert_eq!(gemm_w4a4(&p, &x, 2, 0.1).unwrap(), gemm_w8a8(&q, &x, 2, 0.1).unwrap());
    }
}
