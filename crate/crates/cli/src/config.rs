//! Experiment configuration: a TOML document with `[data]`, `[loss]`, `[train]`, `[study]` and
//! `[output]` sections. Every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use fscl_core::synth::{BiasSpec, FeatureSpec};
use fscl_core::theorem::StudyConfig;
use fscl_core::trainer::{Activation, Architecture, LossReduction, TrainConfig};
use fscl_core::{EmptyNegativePolicy, LossConfig, LossKind, RngSeed};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const OUTPUT_DIR_ENV: &str = "FSCL_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "fscl-out";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub study: StudySection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Two classes, two groups, class/group imbalance `alpha`, balanced test split.
    Imbalanced,
    /// `m` classes and groups with bias ratio `r` and base cell count `C`.
    Ideal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: Generator,
    pub alpha: f64,
    pub train_total: usize,
    pub test_total: usize,
    pub m: usize,
    pub r: f64,
    #[serde(rename = "C")]
    pub c: usize,
    pub dim: usize,
    pub class_signal: f64,
    pub sensitive_signal: f64,
    pub noise_sigma: f64,
    /// Fraction of training samples whose sensitive label is withheld.
    pub hide_sensitive_fraction: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            generator: Generator::Imbalanced,
            alpha: 4.0,
            train_total: 2000,
            test_total: 400,
            m: 2,
            r: 4.0,
            c: 1,
            dim: 16,
            class_signal: 1.0,
            sensitive_signal: 2.0,
            noise_sigma: 4.0,
            hide_sensitive_fraction: 0.0,
            seed: 0,
        }
    }
}

impl DataSection {
    pub fn features(&self) -> FeatureSpec {
        FeatureSpec {
            dim: self.dim,
            class_signal: self.class_signal,
            sensitive_signal: self.sensitive_signal,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn bias(&self) -> BiasSpec {
        BiasSpec {
            m: self.m,
            r: self.r,
            c: self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub temperature: f64,
    pub empty_negative_policy: EmptyNegativePolicy,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: LossKind::FsclPlus,
            temperature: 0.1,
            empty_negative_policy: EmptyNegativePolicy::SkipAnchor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_repr: usize,
    pub epochs_clf: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clf_learning_rate: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub loss_reduction: LossReduction,
    pub jitter_sigma: f64,
    pub partial_sensitive: bool,
    pub probe_every_epoch: bool,
    pub track_v: bool,
    pub hidden: usize,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub clf_hidden: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = t.architecture;
        Self {
            epochs_repr: t.epochs_repr,
            epochs_clf: t.epochs_clf,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            clf_learning_rate: t.clf_learning_rate,
            weight_decay: t.weight_decay,
            max_grad_norm: t.max_grad_norm.unwrap_or(0.0),
            seed: t.seed.0,
            loss_reduction: t.loss_reduction,
            jitter_sigma: t.jitter_sigma,
            partial_sensitive: t.partial_sensitive,
            probe_every_epoch: true,
            track_v: t.track_v,
            hidden: a.hidden,
            repr_dim: a.repr_dim,
            proj_hidden: a.proj_hidden,
            proj_dim: a.proj_dim,
            clf_hidden: a.clf_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub m: usize,
    pub r: f64,
    #[serde(rename = "C")]
    pub c: usize,
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seeds: usize,
    pub temperature: f64,
    pub base_seed: u64,
    pub views_per_sample: usize,
    /// Fail instead of flagging rows when `r < m²`.
    pub strict: bool,
    /// Class counts swept by the counting check; `r` runs over `m², m²+1, 2m²` and `C` over 1..=3.
    pub grid_m: Vec<usize>,
}

impl Default for StudySection {
    fn default() -> Self {
        let s = StudyConfig::default();
        Self {
            m: s.bias.m,
            r: s.bias.r,
            c: s.bias.c,
            lambda_low: s.lambda_low,
            lambda_high: s.lambda_high,
            dim: s.dim,
            noise_sigma: s.noise_sigma,
            seeds: s.seeds,
            temperature: s.temperature,
            base_seed: s.base_seed,
            views_per_sample: s.views_per_sample,
            strict: s.strict,
            grid_m: vec![2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Falls back to `$FSCL_OUTPUT_DIR`, then `fscl-out`.
    pub dir: Option<PathBuf>,
    pub export_per_group: usize,
    pub export_z: bool,
    pub export_seed: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            export_per_group: 50,
            export_z: false,
            export_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `section.key=value` overrides and fills
    /// the output directory from the environment when unset.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        let origin = path.map_or("<defaults>".to_string(), |p| p.display().to_string());
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        if !overrides.is_empty() {
            let mut table: toml::Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
            for raw in overrides {
                apply_override(&mut table, raw)?;
                config = ExperimentConfig::deserialize(toml::Value::Table(table.clone()))
                    .map_err(|e| CliError::Config(format!("--set {raw}: {e}")))?;
            }
        }
        if config.output.dir.is_none() {
            let dir = std::env::var_os(OUTPUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR), PathBuf::from);
            config.output.dir = Some(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn output_dir(&self) -> &Path {
        self.output.dir.as_deref().unwrap_or(Path::new(FALLBACK_OUTPUT_DIR))
    }

    fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.hide_sensitive_fraction) {
            return Err(CliError::Config(format!(
                "data.hide_sensitive_fraction must lie in [0, 1], got {}",
                d.hide_sensitive_fraction
            )));
        }
        if self.output.export_per_group == 0 {
            return Err(CliError::Config("output.export_per_group must be positive".into()));
        }
        self.train_config(self.loss.kind)?;
        Ok(())
    }

    pub fn loss_config(&self, kind: LossKind) -> Result<LossConfig> {
        Ok(LossConfig::new(kind, self.loss.temperature)
            .map_err(|e| CliError::Config(format!("loss.temperature: {e}")))?
            .with_policy(self.loss.empty_negative_policy))
    }

    pub fn train_config(&self, kind: LossKind) -> Result<TrainConfig> {
        let t = &self.train;
        let config = TrainConfig {
            loss: self.loss_config(kind)?,
            epochs_repr: t.epochs_repr,
            epochs_clf: t.epochs_clf,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            clf_learning_rate: t.clf_learning_rate,
            weight_decay: t.weight_decay,
            max_grad_norm: (t.max_grad_norm > 0.0).then_some(t.max_grad_norm),
            seed: RngSeed(t.seed),
            loss_reduction: t.loss_reduction,
            architecture: Architecture {
                hidden: t.hidden,
                repr_dim: t.repr_dim,
                proj_hidden: t.proj_hidden,
                proj_dim: t.proj_dim,
                clf_hidden: t.clf_hidden,
                activation: Activation::Tanh,
            },
            jitter_sigma: t.jitter_sigma,
            partial_sensitive: t.partial_sensitive,
            probe_every_epoch: t.probe_every_epoch,
            track_v: t.track_v,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(format!("[train]: {e}")))?;
        Ok(config)
    }

    pub fn study_config(&self) -> StudyConfig {
        let s = &self.study;
        StudyConfig {
            bias: BiasSpec {
                m: s.m,
                r: s.r,
                c: s.c,
            },
            lambda_low: s.lambda_low,
            lambda_high: s.lambda_high,
            dim: s.dim,
            noise_sigma: s.noise_sigma,
            seeds: s.seeds,
            temperature: s.temperature,
            base_seed: s.base_seed,
            views_per_sample: s.views_per_sample,
            strict: s.strict,
        }
    }

    /// Single-line JSON echo for file headers.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<()> {
    let bad = || CliError::Config(format!("--set {raw}: expected section.key=value"));
    let (key, value) = raw.split_once('=').ok_or_else(bad)?;
    let (section, field) = key.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || field.is_empty() {
        return Err(bad());
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), parsed);
            Ok(())
        }
        _ => Err(CliError::Config(format!("--set {raw}: `{section}` is not a section"))),
    }
}
