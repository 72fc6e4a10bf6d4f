use crate::error::{Error, Result};

/// Adam optimiser state over a list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, group_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::usage("adam: parameter group count mismatch"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != m.len() || g.len() != m.len() {
            return Err(Error::usage("adam: parameter shape mismatch"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(0.1, &[3]);
        adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let g = vec![0.3, -5.0, 1e-3];
        let mut st = AdamState::new(0.01, &[3]);
        adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &mut st).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            assert!((pi + 0.01 * gi.signum()).abs() < 1e-7, "{pi}");
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.5; 4];
            let mut st = AdamState::new(0.05, &[4]);
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * 2.0 - k as f64 * 0.1).collect();
                adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &mut st).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut p = vec![0.0; 2];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(0.1, &[2]);
        assert!(adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], &mut st).is_err());
    }
}
