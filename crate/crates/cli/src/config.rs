use std::path::{Path, PathBuf};

use blapose::augment::{AlignMode, AugmentationConfig};
use blapose::bench::BenchConfig;
use blapose::camera::CameraIntrinsics;
use blapose::corpus::CorpusConfig;
use blapose::eval::{EvalConfig, FinetuneConfig, LifterConfig};
use blapose::model::train::TrainConfig;
use blapose::skeleton::SkeletonTopology;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. Every field has a default, so
/// `{}` is a valid configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every module that does not set its own; `--seed` overrides
    /// all of them.
    pub seed: Option<u64>,
    /// Topology JSON; the bundled 17-joint skeleton when absent.
    pub topology: Option<PathBuf>,
    /// Camera JSON; the bundled camera when absent.
    pub camera: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub augmentation: AugmentationConfig,
    /// Disable training-time length augmentation.
    pub no_augmentation: bool,
    /// Per-bone sigmas of the normal strategy; the training set's standard
    /// deviations when absent.
    pub normal_sigmas: Option<Vec<f64>>,
    pub align_mode: AlignModeConfig,
    pub train: TrainConfig,
    pub lifter: LifterConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignModeConfig {
    #[default]
    Additive,
    Multiplicative,
}

impl From<AlignModeConfig> for AlignMode {
    fn from(m: AlignModeConfig) -> Self {
        match m {
            AlignModeConfig::Additive => AlignMode::Additive,
            AlignModeConfig::Multiplicative => AlignMode::Multiplicative,
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory and must exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.topology, &mut cfg.camera].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(CliError::Validation(format!(
                    "{}: referenced file {} does not exist",
                    path.display(),
                    p.display()
                )));
            }
        }
        Ok(cfg)
    }

    /// Pushes the effective seed into every module config.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.corpus.seed = s;
            self.augmentation.seed = s;
            self.train.seed = s;
            self.finetune.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.augmentation.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn topology(&self) -> Result<SkeletonTopology, CliError> {
        Ok(match &self.topology {
            Some(p) => SkeletonTopology::load(p)?,
            None => SkeletonTopology::h36m17(),
        })
    }

    pub fn camera(&self) -> Result<CameraIntrinsics, CliError> {
        Ok(match &self.camera {
            Some(p) => CameraIntrinsics::load(p)?,
            None => CameraIntrinsics::default_fixture(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
