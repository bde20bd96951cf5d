use std::path::{Path, PathBuf};

use clicktomo::detector::sample_detector;
use clicktomo::{DetectorConfig, ProbePlan, SolverOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Where the ground-truth detector comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectorSpec {
    Config(DetectorConfig),
    Sample(SampleSpec),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub n_pixels: usize,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Sample(SampleSpec { n_pixels: 10 })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProbeRule {
    /// Photon-number tail above N exceeds the threshold.
    #[default]
    Standard,
    /// Expected number of clicking pixels reaches the threshold fraction of N.
    Saturating,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub rule: ProbeRule,
    pub alpha_max: Option<u64>,
    pub truncation: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub detector: DetectorSpec,
    pub probe: ProbeSpec,
    pub gamma: f64,
    pub lambda: f64,
    pub pulses: u64,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub solver: SolverOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            detector: DetectorSpec::default(),
            probe: ProbeSpec::default(),
            gamma: clicktomo::tomography::DEFAULT_GAMMA,
            lambda: 0.02,
            pulses: 100_000,
            seed: None,
            output_dir: None,
            solver: SolverOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        // Relative detector files resolve against the config's directory.
        if let DetectorSpec::File(p) = &mut cfg.detector {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required: pass --seed or set \"seed\" in the config".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(CliError::Usage(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CliError::Usage(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.pulses == 0 {
            return Err(CliError::Usage("pulses must be at least 1".into()));
        }
        Ok(())
    }

    pub fn detector(&self) -> CliResult<DetectorConfig> {
        match &self.detector {
            DetectorSpec::Config(c) => {
                c.validate()?;
                Ok(c.clone())
            }
            DetectorSpec::Sample(s) => Ok(sample_detector(s.n_pixels, self.seed()?)?),
            DetectorSpec::File(p) => {
                if !p.exists() {
                    return Err(CliError::Usage(format!("detector file {} does not exist", p.display())));
                }
                Ok(DetectorConfig::read_json(p)?)
            }
        }
    }

    pub fn probe_plan(&self, detector: &DetectorConfig) -> CliResult<ProbePlan> {
        let n = detector.n_pixels;
        let mut plan = match (self.probe.alpha_max, self.probe.rule) {
            (Some(a), _) => ProbePlan::from_alpha_max(a, self.pulses)?,
            (None, ProbeRule::Standard) => ProbePlan::standard(n, self.pulses)?,
            (None, ProbeRule::Saturating) => ProbePlan::saturating(n, detector.total_efficiency(), self.pulses)?,
        };
        if let Some(m) = self.probe.truncation {
            plan = ProbePlan::new(plan.alpha_sq_values, m, self.pulses)?;
        }
        Ok(plan)
    }

    /// The config without the fields that cannot change results: where
    /// outputs go and the thread count.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.output_dir = None;
        c.solver.threads = None;
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
