//! Dense tensors, the MLP policy with a fixed-sigma Gaussian head, hand-written
//! backpropagation for that topology, and Adam.

mod adam;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use mlp::{backward, Dense, DenseGrad, Gradients, MlpPolicy, Trace, WeightedSample};
pub use tensor::Tensor2D;

/// Default fixed standard deviation of the Gaussian action head.
pub const DEFAULT_ACTION_SIGMA: f64 = 0.1;
/// Default hidden layer widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Anything that maps an observation to an action mean.
pub trait Policy: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn act(&self, obs: &[f64]) -> crate::Result<Vec<f64>>;
}
