/// Separable Gaussian blur of a square `side x side` image with standard
/// deviation `sigma` pixels, truncated at three sigma and edge-replicated.
pub fn gaussian_blur(img: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clamp = |v: isize| v.clamp(0, side as isize - 1) as usize;

    let mut tmp = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            tmp[r * side + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * img[r * side + clamp(c as isize + j as isize - half)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp(r as isize + j as isize - half) * side + c])
                .sum();
        }
    }
    out
}
