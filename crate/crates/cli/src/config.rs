//! TOML run configuration. Unknown keys are rejected; missing keys take the
//! documented defaults.

use std::path::{Path, PathBuf};

use fairgen::dataset::{Amplitudes, DatasetSpec, ImageShape, SubgroupSpec};
use fairgen::losses::LossConfig;
use fairgen::model::{ModelConfig, ADAIN_EPS};
use fairgen::trainer::{Perturbation, TrainMode, TrainRunConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub landscape: LandscapeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupEntry {
    pub name: String,
    pub weight: f64,
    #[serde(default)]
    pub artifact_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmplitudeSection {
    pub domain_specific: f64,
    pub domain_agnostic: f64,
    pub demographic: f64,
    pub background: f64,
    pub noise: f64,
}

impl Default for AmplitudeSection {
    fn default() -> Self {
        let a = Amplitudes::default();
        Self {
            domain_specific: a.domain_specific,
            domain_agnostic: a.domain_agnostic,
            demographic: a.demographic,
            background: a.background,
            noise: a.noise,
        }
    }
}

/// Either a CSV file or a synthetic recipe. The last `holdout` fraction of
/// rows is kept out of training and used by `eval` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub holdout: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
    pub domains: Vec<String>,
    pub subgroups: Vec<SubgroupEntry>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub amplitudes: AmplitudeSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = DatasetSpec::default();
        Self {
            csv: None,
            holdout: 0.0,
            n_real: s.n_real,
            n_fake: s.n_fake,
            seed: s.seed,
            domains: s.domains,
            subgroups: s
                .subgroups
                .into_iter()
                .map(|g| SubgroupEntry {
                    name: g.name,
                    weight: g.weight,
                    artifact_bias: g.artifact_bias,
                })
                .collect(),
            channels: s.image.channels,
            height: s.image.height,
            width: s.image.width,
            amplitudes: AmplitudeSection::default(),
        }
    }
}

impl DatasetSection {
    pub fn image(&self) -> ImageShape {
        ImageShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn spec(&self) -> DatasetSpec {
        let a = &self.amplitudes;
        DatasetSpec {
            subgroups: self
                .subgroups
                .iter()
                .map(|g| SubgroupSpec {
                    name: g.name.clone(),
                    weight: g.weight,
                    artifact_bias: g.artifact_bias,
                })
                .collect(),
            domains: self.domains.clone(),
            n_real: self.n_real,
            n_fake: self.n_fake,
            image: self.image(),
            amplitudes: Amplitudes {
                domain_specific: a.domain_specific,
                domain_agnostic: a.domain_agnostic,
                demographic: a.demographic,
                background: a.background,
                noise: a.noise,
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_channels: usize,
    pub hidden_channels: usize,
    pub head_hidden: usize,
    pub adain_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            feature_channels: m.feature_channels,
            hidden_channels: m.hidden_channels,
            head_hidden: m.head_hidden,
            adain_eps: ADAIN_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub rho4: f64,
    pub b: f64,
    pub delta: f64,
    pub alpha: f64,
    pub alpha_prime: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            rho1: l.rho1,
            rho2: l.rho2,
            rho3: l.rho3,
            rho4: l.rho4,
            b: l.margin,
            delta: l.delta,
            alpha: l.alpha,
            alpha_prime: l.alpha_prime,
            lambda: l.lambda,
            gamma: l.gamma,
            beta: l.lr,
        }
    }
}

impl LossSection {
    pub fn to_core(&self) -> LossConfig {
        LossConfig {
            rho1: self.rho1,
            rho2: self.rho2,
            rho3: self.rho3,
            rho4: self.rho4,
            margin: self.b,
            delta: self.delta,
            alpha: self.alpha,
            alpha_prime: self.alpha_prime,
            lambda: self.lambda,
            gamma: self.gamma,
            lr: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    pub seed: u64,
    /// `full` or `baseline`.
    pub mode: String,
    /// `sign` or `l2`.
    pub perturbation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainRunConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_iterations: None,
            seed: t.seed,
            mode: t.mode.name().into(),
            perturbation: t.perturbation.name().into(),
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: fairgen::metrics::DEFAULT_THRESHOLD,
            report: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSection {
    pub extent: f64,
    pub resolution: usize,
    /// Evaluation samples taken from the front of the dataset.
    pub samples: usize,
    pub seed: u64,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            extent: 1.0,
            resolution: 11,
            samples: 64,
            seed: 0,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| CliError::Config(e.message().to_string() + &span_hint(text, e.span())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> Result<TrainMode> {
        self.train.mode.parse().map_err(|_| {
            CliError::Config(format!("train.mode: unknown value `{}`", self.train.mode))
        })
    }

    pub fn perturbation(&self) -> Result<Perturbation> {
        self.train.perturbation.parse().map_err(|_| {
            CliError::Config(format!(
                "train.perturbation: unknown value `{}`",
                self.train.perturbation
            ))
        })
    }

    /// Core run configuration for a dataset with the given vocabulary sizes.
    pub fn run_config(&self, num_subgroups: usize, num_domains: usize) -> Result<TrainRunConfig> {
        if !(0.0..1.0).contains(&self.dataset.holdout) {
            return Err(CliError::Config(
                "dataset.holdout: must lie in [0, 1)".into(),
            ));
        }
        let m = &self.model;
        let cfg = TrainRunConfig {
            loss: self.loss.to_core(),
            model: ModelConfig {
                image: self.dataset.image(),
                feature_channels: m.feature_channels,
                hidden_channels: m.hidden_channels,
                head_hidden: m.head_hidden,
                num_domains,
                num_subgroups,
                adain_eps: m.adain_eps,
            },
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            max_iterations: self.train.max_iterations,
            seed: self.train.seed,
            mode: self.mode()?,
            perturbation: self.perturbation()?,
            checkpoint_every: self.train.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => format!(
            " (line {})",
            text[..s.start.min(text.len())].lines().count().max(1)
        ),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfigFile::parse("[loss]\nlambda = 0.4\n").unwrap();
        assert_eq!(c.loss.lambda, 0.4);
        assert_eq!(c.loss.rho3, 0.05);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.loss.beta, 5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfigFile::parse("[loss]\nlamda = 0.4\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("lamda"));
        assert!(RunConfigFile::parse("[trian]\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfigFile::default();
        assert_eq!(RunConfigFile::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let c = RunConfigFile::parse("[loss]\nalpha = 0.0\n").unwrap();
        let e = c.run_config(2, 4).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("alpha"));
        let c = RunConfigFile::parse("[train]\nmode = \"fast\"\n").unwrap();
        assert!(c
            .run_config(2, 4)
            .unwrap_err()
            .to_string()
            .contains("train.mode"));
    }
}
