//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use ncg_core::model::{ModelSpec, NOISE_DEFAULT};
use ncg_core::rng::SeedSource;
use ncg_core::signals::{ColumnSelector, MixtureConfig, NoiseSpec, DEFAULT_SAMPLES, DEFAULT_TAU};
use ncg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelChoice,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelChoice::Preset(NOISE_DEFAULT.to_owned()),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: PathBuf::from("ncg-out"),
        }
    }
}

/// Where the train/test signals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Two-source mixture generated on the fly.
    Noise {
        #[serde(default = "default_a")]
        a: NoiseSpec,
        #[serde(default = "default_b")]
        b: NoiseSpec,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "default_n")]
        n: usize,
        /// Data seed; defaults to the training seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Directory written by `ncg generate`.
    Dir { path: PathBuf },
    /// Plain CSV files. `columns` lists the input channels (all non-truth
    /// columns when omitted).
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        columns: Option<Vec<ColumnSelector>>,
        #[serde(default)]
        truth_column: Option<ColumnSelector>,
    },
}

fn default_a() -> NoiseSpec {
    MixtureConfig::default().a
}
fn default_b() -> NoiseSpec {
    NoiseSpec::Gaussian
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_n() -> usize {
    DEFAULT_SAMPLES
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Noise {
            a: default_a(),
            b: default_b(),
            tau: default_tau(),
            n: default_n(),
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> Option<MixtureConfig> {
        match self {
            DataConfig::Noise { a, b, tau, n, .. } => Some(MixtureConfig {
                a: *a,
                b: *b,
                tau: *tau,
                n: *n,
            }),
            _ => None,
        }
    }

    /// Train and test seeds for generated data.
    pub fn seeds(&self, train_seed: u64) -> (u64, u64) {
        let base = match self {
            DataConfig::Noise { seed: Some(s), .. } => *s,
            _ => train_seed,
        };
        let src = SeedSource::new(base);
        (src.split("data", 0).seed(), src.split("data", 1).seed())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Spec(ModelSpec),
}

impl ModelChoice {
    pub fn resolve(&self) -> ncg_core::Result<ModelSpec> {
        let spec = match self {
            ModelChoice::Preset(name) => ModelSpec::preset(name)?,
            ModelChoice::Spec(spec) => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub correlation: bool,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            correlation: true,
            threshold: ncg_core::analysis::DEFAULT_TRANSITION_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked without doing work.
    pub fn validate(&self) -> Result<ModelSpec, CliError> {
        let bad = |e: ncg_core::NcgError| CliError::Config(e.to_string());
        if let Some(m) = self.data.mixture() {
            m.validate().map_err(bad)?;
        }
        match &self.data {
            DataConfig::Dir { path } => {
                for f in [ncg_core::signals::TRAIN_FILE, ncg_core::signals::TEST_FILE] {
                    require_file(&path.join(f))?;
                }
            }
            DataConfig::Csv { train, test, .. } => {
                require_file(train)?;
                if let Some(t) = test {
                    require_file(t)?;
                }
            }
            DataConfig::Noise { .. } => {}
        }
        let spec = self.model.resolve().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        if !(0.0..1.0).contains(&self.eval.threshold) {
            return Err(CliError::Config("eval.threshold must lie in [0, 1)".into()));
        }
        Ok(spec)
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("data file {} not found", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"trian": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"lr": 0.1, "momentum": 1}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"data": {"source": "noise", "tua": 5}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"data": {"source": "noise", "a": {"kind": "ar1_cos", "cos_theta": 0.3}, "n": 1000},
                "model": "noise-default", "train": {"epochs": 3}}"#,
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 2e-3);
        assert_eq!(c.data.mixture().unwrap().tau, 2000.0);
        c.validate().unwrap();
    }

    #[test]
    fn inline_model_spec() {
        let spec = serde_json::to_value(ModelSpec::noise_with_filters(&[3, 1, 1])).unwrap();
        let c: ExperimentConfig = serde_json::from_value(serde_json::json!({ "model": spec })).unwrap();
        assert_eq!(c.model.resolve().unwrap().transformer[0].width, 3);
    }

    #[test]
    fn zero_tau_is_a_config_error() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"data": {"source": "noise", "tau": 0}}"#).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
