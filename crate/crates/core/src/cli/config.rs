use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::CohortSpec;
use crate::diffusion::{DiffusionConfig, PairingPolicy, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::PointEstimate;

/// U-net channel widths per resolution level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub months: Vec<u32>,
    pub realizations: usize,
    /// Sampler intervals; null uses the checkpoint's NFE budget.
    pub steps: Option<usize>,
    pub threads: usize,
    /// Predict the held-out split only, or every subject of the cohort file.
    pub test_split_only: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            months: vec![6, 12, 24, 36],
            realizations: 10,
            steps: None,
            threads: 1,
            test_split_only: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub point_estimate: PointEstimate,
}

/// Files a run reads and writes. Command-line flags fill these in, so the
/// echoed config names every artifact of the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub cohort: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Complete run configuration. Every field has a default; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed for weight init, batch order, training noise and sampling.
    /// The cohort generator has its own seed in `cohort.seed`.
    pub seed: u64,
    pub cohort: CohortSpec,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pairing: PairingPolicy,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            cohort: CohortSpec::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pairing: PairingPolicy::default(),
            predict: PredictConfig::default(),
            evaluate: EvaluateConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.display().to_string(),
                    line: e.line(),
                    reason: e.to_string(),
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.diffusion.validate()?;
        self.train.validate()?;
        if self.model.widths.contains(&0) {
            return Err(Error::invalid("model.widths", "must be positive"));
        }
        if self.predict.threads == 0 {
            return Err(Error::invalid("predict.threads", "must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the effective config next to `output` as
    /// `<output file name>.config.json`.
    pub fn echo(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".config.json");
        let path = output.with_file_name(name);
        fs::write(&path, self.to_json()?)?;
        Ok(path)
    }
}
