//! Behaviour-cloning, quantization-aware and saliency-weighted distillation
//! losses, and the training loops for every experiment arm.

mod losses;
mod run;

pub use losses::{
    loss_il, loss_qat, loss_qrd, loss_sqil, quant_gradients, Batch, BatchSample, LossBreakdown,
    TermWeights,
};
pub use run::{
    calibration_states, ptq, train_bc_fp, train_bc_fp_with, train_quantized, train_quantized_with, write_log_csv,
    TrainRun,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extra weight on flagged (high-SIS) states.
pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH: usize = 64;
/// States used to initialise activation scales.
pub const CALIBRATION_STATES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Fp,
    Ptq,
    Qat,
    Qrd,
    Sqil,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Fp, Arm::Ptq, Arm::Qat, Arm::Qrd, Arm::Sqil];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Fp => "fp",
            Arm::Ptq => "ptq",
            Arm::Qat => "qat",
            Arm::Qrd => "qrd",
            Arm::Sqil => "sqil",
        }
    }

    /// Weights on the (task, distillation) terms for the trained quantized arms.
    pub fn term_weights(self) -> Option<TermWeights> {
        match self {
            Arm::Qat => Some(TermWeights { qat: 1.0, qrd: 0.0 }),
            Arm::Qrd => Some(TermWeights { qat: 0.0, qrd: 1.0 }),
            Arm::Sqil => Some(TermWeights { qat: 1.0, qrd: 1.0 }),
            Arm::Fp | Arm::Ptq => None,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage(format!("unknown arm '{s}' (fp, ptq, qat, qrd, sqil)")))
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Distance between the quantized and full-precision action distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discrepancy {
    /// `0.5 * ||mu_q - mu_fp||^2`
    #[default]
    L2,
    /// KL between the two Gaussian heads.
    Kl,
}

impl std::str::FromStr for Discrepancy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Discrepancy::L2),
            "kl" => Ok(Discrepancy::Kl),
            _ => Err(Error::usage(format!("unknown discrepancy '{s}' (l2, kl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta: f64,
    pub top_p: f64,
    pub discrepancy: Discrepancy,
    pub arm: Arm,
    pub hidden: Vec<usize>,
    pub action_sigma: f64,
    /// Weight each sample by `1 / |trajectory|` instead of uniformly.
    pub per_trajectory_mean: bool,
    /// Invoke the checkpoint hook every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            steps: 20_000,
            batch_size: DEFAULT_BATCH,
            seed: 0,
            beta: DEFAULT_BETA,
            top_p: crate::saliency::DEFAULT_TOP_P,
            discrepancy: Discrepancy::L2,
            arm: Arm::Sqil,
            hidden: crate::nn::DEFAULT_HIDDEN.to_vec(),
            action_sigma: crate::nn::DEFAULT_ACTION_SIGMA,
            per_trajectory_mean: false,
            checkpoint_every: 0,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::usage("learning rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be >= 1"));
        }
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(Error::usage("beta must be >= 1"));
        }
        if !(self.top_p > 0.0 && self.top_p < 1.0) {
            return Err(Error::usage("top-p must lie in (0, 1)"));
        }
        if !(self.action_sigma > 0.0) {
            return Err(Error::usage("action sigma must be > 0"));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Learning rate used at `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_decay && self.steps > 0 {
            let frac = (step - 1) as f64 / self.steps as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.lr
        }
    }
}
