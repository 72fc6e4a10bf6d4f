//! TOML experiment configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::envs::{EnvId, ObsMode};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_EPISODES, DEFAULT_ROUNDS};
use crate::quant::QuantSpec;
use crate::saliency::{PerturbationSpec, DEFAULT_FRAME_STRIDE, DEFAULT_GRID, DEFAULT_BLUR_RADIUS, DEFAULT_VECTOR_SIGMA};
use crate::training::{Arm, TrainConfig};

pub const DEFAULT_DATASET_EPISODES: usize = 400;
pub const DEFAULT_FP_STEPS: usize = 60_000;
pub const DEFAULT_QUANT_STEPS: usize = 30_000;
pub const DEFAULT_QUANT_LR: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Existing dataset file to use instead of `<out_dir>/dataset.bin`.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_DATASET_EPISODES,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SisSection {
    /// Perturbation; defaults to vector noise or image blur to match `obs_mode`.
    pub perturbation: Option<PerturbationSpec>,
    pub frame_stride: usize,
}

impl Default for SisSection {
    fn default() -> Self {
        Self {
            perturbation: None,
            frame_stride: DEFAULT_FRAME_STRIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Episodes whose discrepancy timelines are recorded.
    pub timeline_episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EPISODES,
            rounds: DEFAULT_ROUNDS,
            seed: 0,
            timeline_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub obs_mode: ObsMode,
    pub out_dir: PathBuf,
    pub quant: QuantSpec,
    pub data: DataConfig,
    /// Full-precision behaviour cloning. Keys left out keep their
    /// experiment defaults rather than the generic training defaults.
    #[serde(deserialize_with = "fp_section")]
    pub fp: TrainConfig,
    /// Quantized arms; `arm` is chosen by the subcommand.
    #[serde(deserialize_with = "train_section")]
    pub train: TrainConfig,
    pub sis: SisSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Pickplace,
            obs_mode: ObsMode::Vector,
            out_dir: PathBuf::from("runs/default"),
            quant: QuantSpec::w4a4_lsq(),
            data: DataConfig::default(),
            fp: TrainConfig {
                steps: DEFAULT_FP_STEPS,
                arm: Arm::Fp,
                ..Default::default()
            },
            train: TrainConfig {
                steps: DEFAULT_QUANT_STEPS,
                lr: DEFAULT_QUANT_LR,
                ..Default::default()
            },
            sis: SisSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Deserializes a partial table on top of `base`.
fn overlay<'de, D: Deserializer<'de>>(d: D, base: TrainConfig) -> std::result::Result<TrainConfig, D::Error> {
    let user = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(&base).map_err(D::Error::custom)?;
    table.extend(user);
    table.try_into().map_err(D::Error::custom)
}

fn fp_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    overlay(d, ExperimentConfig::default().fp)
}

fn train_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    overlay(d, ExperimentConfig::default().train)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.fp.validate()?;
        self.train.validate()?;
        self.perturbation().validate()?;
        if self.data.episodes == 0 {
            return Err(Error::usage("data.episodes must be >= 1"));
        }
        if self.sis.frame_stride == 0 {
            return Err(Error::usage("sis.frame_stride must be >= 1"));
        }
        if self.eval.episodes == 0 || self.eval.rounds == 0 {
            return Err(Error::usage("eval needs at least one episode and one round"));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::usage(format!("dataset {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn perturbation(&self) -> PerturbationSpec {
        self.sis.perturbation.unwrap_or(match self.obs_mode {
            ObsMode::Vector => PerturbationSpec::vector(DEFAULT_VECTOR_SIGMA),
            ObsMode::Image32 => PerturbationSpec::image(DEFAULT_GRID, DEFAULT_BLUR_RADIUS),
        })
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out_dir.join("dataset.bin"))
    }

    pub fn checkpoint_path(&self, arm: Arm) -> PathBuf {
        self.out_dir.join(format!("{arm}.ckpt"))
    }

    pub fn sis_path(&self) -> PathBuf {
        self.out_dir.join("sis.bin")
    }

    /// Copy of the resolved configuration written next to a stage's outputs.
    pub fn write_resolved(&self, stage: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let p = self.out_dir.join(format!("{stage}.config.toml"));
        std::fs::write(&p, self.to_toml())?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_toml("bogus = 1").unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
        let e = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1").unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.obs_mode = ObsMode::Image32;
        c.train.beta = 3.0;
        c.sis.perturbation = Some(PerturbationSpec::image(4, 2));
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_experiment_defaults() {
        let c = ExperimentConfig::from_toml("[fp]\nseed = 3\n[train]\nsteps = 10").unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(c.fp, TrainConfig { seed: 3, ..d.fp });
        assert_eq!(c.train, TrainConfig { steps: 10, ..d.train });
    }

    #[test]
    fn missing_dataset_path_rejected() {
        let e = ExperimentConfig::from_toml("[data]\npath = \"/nonexistent/x.bin\"").unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
    }
}
