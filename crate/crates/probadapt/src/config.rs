//! Run configuration: the method grid, the TOML config file, and its
//! validation. A config plus a seed fully determines a run.

use crate::consensus::FilterMode;
use crate::error::{Error, Result};
use crate::model::PUNetConfig;
use serde::{Deserialize, Serialize};

/// How pseudo-label targets relate to the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Teacher = EMA of the student; weak augmentation on both views.
    MeanTeacher,
    /// Teacher shares the student's weights; strong student view, weak
    /// teacher view.
    FixMatch,
}

/// When adaptation happens relative to source training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Source and target batches in every iteration.
    Joint,
    /// Source pretraining first, then target-only fine-tuning.
    Separate,
}

/// One cell of the method grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    pub strategy: Strategy,
    pub filter: FilterMode,
}

impl MethodSpec {
    /// All 12 grid cells: {fm, mt} x {j, s} x {none, m, w}.
    pub fn grid() -> Vec<MethodSpec> {
        let mut out = Vec::with_capacity(12);
        for method in [Method::FixMatch, Method::MeanTeacher] {
            for strategy in [Strategy::Joint, Strategy::Separate] {
                for filter in [FilterMode::NoFilter, FilterMode::Mask, FilterMode::Weight] {
                    out.push(MethodSpec {
                        method,
                        strategy,
                        filter,
                    });
                }
            }
        }
        out
    }

    /// Short name like `fm_j_m`: method, strategy, optional filter suffix.
    pub fn abbreviation(&self) -> String {
        let m = match self.method {
            Method::FixMatch => "fm",
            Method::MeanTeacher => "mt",
        };
        let s = match self.strategy {
            Strategy::Joint => "j",
            Strategy::Separate => "s",
        };
        match self.filter {
            FilterMode::NoFilter => format!("{m}_{s}"),
            FilterMode::Mask => format!("{m}_{s}_m"),
            FilterMode::Weight => format!("{m}_{s}_w"),
        }
    }

    pub fn parse(text: &str) -> Result<MethodSpec> {
        let mut parts = text.split('_');
        let method = match parts.next() {
            Some("fm") => Method::FixMatch,
            Some("mt") => Method::MeanTeacher,
            _ => return Err(Self::unknown(text)),
        };
        let strategy = match parts.next() {
            Some("j") => Strategy::Joint,
            Some("s") => Strategy::Separate,
            _ => return Err(Self::unknown(text)),
        };
        let filter = match parts.next() {
            None => FilterMode::NoFilter,
            Some("m") => FilterMode::Mask,
            Some("w") => FilterMode::Weight,
            _ => return Err(Self::unknown(text)),
        };
        if parts.next().is_some() {
            return Err(Self::unknown(text));
        }
        Ok(MethodSpec {
            method,
            strategy,
            filter,
        })
    }

    fn unknown(text: &str) -> Error {
        let valid: Vec<String> = Self::grid().iter().map(|m| m.abbreviation()).collect();
        Error::Config(format!(
            "unknown method {text:?}; valid cells: {}",
            valid.join(", ")
        ))
    }
}

/// What a `train` invocation does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    /// Supervised source training only.
    Source,
    /// One of the twelve adaptation methods.
    Adapt(MethodSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root containing `<domain>/{images,labels}` and
    /// `dataset.json`.
    pub root: String,
    /// Labeled domain name; absent for separate adaptation, which must not
    /// touch source data.
    #[serde(default)]
    pub source: Option<String>,
    /// Unlabeled domain name; absent for source-only training.
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Weight of the variational term in the training loss.
    pub kl_weight: f64,
    pub plateau_factor: f64,
    /// Validation rounds without improvement before the rate drops.
    pub plateau_patience: u32,
    pub plateau_min_delta: f64,
    pub min_learning_rate: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            kl_weight: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            min_learning_rate: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_iterations: u64,
    pub batch_size: usize,
    pub patch_shape: (usize, usize),
    /// Iterations between validation passes.
    pub val_interval: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_iterations: 2000,
            batch_size: 2,
            patch_shape: (64, 64),
            val_interval: 50,
        }
    }
}

/// Which teacher output becomes the pseudo-label target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoTarget {
    /// The first prior sample's probabilities; the remaining samples feed
    /// only the consensus map.
    #[default]
    FirstSample,
    /// Mean probabilities over all samples.
    MeanOfSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainConfig {
    /// Consensus response threshold.
    pub theta: f64,
    /// Latent samples per pseudo-label.
    pub n_samples: usize,
    /// EMA coefficient for the mean-teacher.
    pub alpha: f64,
    pub pseudo_target: PseudoTarget,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            n_samples: 8,
            alpha: 0.999,
            pseudo_target: PseudoTarget::FirstSample,
        }
    }
}

/// The whole run configuration as stored in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// `"source"` or a method abbreviation such as `"fm_j_m"`.
    pub run: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: PUNetConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub selftrain: SelfTrainConfig,
}

impl TrainConfig {
    pub fn run_kind(&self) -> Result<RunKind> {
        if self.run == "source" {
            Ok(RunKind::Source)
        } else {
            Ok(RunKind::Adapt(MethodSpec::parse(&self.run)?))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.run_kind()?;
        self.model.validate()?;
        if self.model.classes != 1 {
            return Err(Error::Config(
                "training targets are single-class masks; model.classes must be 1".into(),
            ));
        }
        let (ph, pw) = self.schedule.patch_shape;
        let div = self.model.divisor();
        if ph == 0 || pw == 0 || ph % div != 0 || pw % div != 0 {
            return Err(Error::Config(format!(
                "patch shape ({ph}, {pw}) must be positive and divisible by {div}"
            )));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.schedule.val_interval == 0 {
            return Err(Error::Config("val_interval must be >= 1".into()));
        }
        if self.optim.learning_rate <= 0.0 || !self.optim.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.optim.kl_weight < 0.0 || !self.optim.kl_weight.is_finite() {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.selftrain.theta) {
            return Err(Error::Config("theta must lie in [0, 1]".into()));
        }
        if self.selftrain.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if !(0.0 < self.selftrain.alpha && self.selftrain.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        match kind {
            RunKind::Source => {
                if self.data.source.is_none() {
                    return Err(Error::Config("source training needs data.source".into()));
                }
            }
            RunKind::Adapt(spec) => {
                if self.data.target.is_none() {
                    return Err(Error::Config("adaptation needs data.target".into()));
                }
                match spec.strategy {
                    Strategy::Joint => {
                        if self.data.source.is_none() {
                            return Err(Error::Config(
                                "joint adaptation needs data.source".into(),
                            ));
                        }
                    }
                    Strategy::Separate => {
                        if self.data.source.is_some() {
                            return Err(Error::Config(
                                "separate adaptation must not list data.source; it runs without source access".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }
}

/// Config for the dataset generator command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Output root for the PGM tree and `dataset.json`.
    pub root: String,
    pub images_per_domain: usize,
    pub domains: Vec<crate::data::DomainSpec>,
}

impl GenerateConfig {
    /// The standard two-domain shift at the given image size.
    pub fn default_pair(root: impl Into<String>, image_size: (usize, usize), n: usize, seed: u64) -> Self {
        Self {
            root: root.into(),
            images_per_domain: n,
            domains: vec![
                crate::data::DomainSpec::source(image_size, seed),
                crate::data::DomainSpec::target(image_size, seed.wrapping_add(1)),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("generate config parse: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }
}
