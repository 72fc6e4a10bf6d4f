//! 32x32 grayscale rasters of arena positions.

pub const SIDE: usize = 32;

/// Gaussian blob width in pixels.
const BLOB_SIGMA: f64 = 1.0;

/// Draws each `(x, y, amplitude)` blob and combines them by maximum.
pub fn render(blobs: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut img = vec![0.0f64; SIDE * SIDE];
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    for &(x, y, amp) in blobs {
        let cx = x * SIDE as f64 - 0.5;
        let cy = y * SIDE as f64 - 0.5;
        for r in 0..SIDE {
            let dy = r as f64 - cy;
            for c in 0..SIDE {
                let dx = c as f64 - cx;
                let v = amp * (-(dx * dx + dy * dy) * inv).exp();
                let px = &mut img[r * SIDE + c];
                *px = (*px).max(v);
            }
        }
    }
    img
}
