//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{generate_synthetic, load_csv, load_exds, Dataset, SyntheticKind, SyntheticSpec};
use crate::distillation::DistillConfig;
use crate::error::{Error, Result};
use crate::exemplar::SelectionStrategy;
use crate::network::{NetworkConfig, StageSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Patches,
    Csv,
    Exds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// File to load for `csv` and `exds`; relative paths resolve against
    /// the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub stages: Vec<StageSpec>,
    pub embed_dim: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_eta() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub alpha: f64,
    /// 1-based stages; absent means every conv stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub include_new: bool,
    #[serde(default = "one")]
    pub new_class_significance: f64,
    #[serde(default = "yes")]
    pub frobenius_normalize: bool,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignificanceSection {
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExemplarSection {
    pub strategy: SelectionStrategy,
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub base_classes: usize,
    pub increment: usize,
    pub ordering_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exacfs,
    UniformSignificance,
    FinetuneOnly,
    LastStageOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exacfs => "exacfs",
            Self::UniformSignificance => "uniform_significance",
            Self::FinetuneOnly => "finetune_only",
            Self::LastStageOnly => "last_stage_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub optimizer: OptimizerSection,
    pub distill: DistillSection,
    #[serde(default = "default_significance")]
    pub significance: SignificanceSection,
    pub exemplars: ExemplarSection,
    pub stream: StreamSection,
    #[serde(default = "default_finetune")]
    pub finetune: FinetuneSection,
    pub method: Method,
    pub seed: u64,
}

fn default_significance() -> SignificanceSection {
    SignificanceSection {
        beta: default_beta(),
    }
}

fn default_finetune() -> FinetuneSection {
    FinetuneSection { epochs: 0 }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses JSON; unknown keys and type errors report their field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative dataset paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(p), Some(dir)) = (cfg.dataset.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let need = |v: bool, key: &str| {
            if v {
                Ok(())
            } else {
                Err(config_err(
                    &format!("dataset.{key}"),
                    format!("required for kind {:?}", d.kind),
                ))
            }
        };
        match d.kind {
            DatasetKind::Blobs | DatasetKind::Patches => {
                need(d.classes.is_some(), "classes")?;
                need(d.samples_per_class.is_some(), "samples_per_class")?;
                need(d.separation.is_some(), "separation")?;
                need(d.noise.is_some(), "noise")?;
                if d.kind == DatasetKind::Blobs {
                    need(d.dims.is_some(), "dims")?;
                } else {
                    need(d.shape.is_some(), "shape")?;
                }
                if d.classes.unwrap_or(0) < 2 {
                    return Err(config_err("dataset.classes", "must be >= 2"));
                }
                if d.samples_per_class.unwrap_or(0) < 5 {
                    return Err(config_err("dataset.samples_per_class", "must be >= 5"));
                }
                if d.noise.unwrap_or(0.0) < 0.0 {
                    return Err(config_err("dataset.noise", "must be >= 0"));
                }
            }
            DatasetKind::Csv | DatasetKind::Exds => need(d.path.is_some(), "path")?,
        }
        if self.network.stages.is_empty() {
            return Err(config_err("network.stages", "need at least one stage"));
        }
        for (i, s) in self.network.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(config_err(
                    &format!("network.stages[{i}]"),
                    "channels, kernel and stride must be >= 1",
                ));
            }
        }
        if self.network.embed_dim == 0 {
            return Err(config_err("network.embed_dim", "must be >= 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(config_err("optimizer.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(config_err("optimizer.momentum", "must lie in [0, 1)"));
        }
        if o.weight_decay < 0.0 {
            return Err(config_err("optimizer.weight_decay", "must be >= 0"));
        }
        if o.epochs == 0 {
            return Err(config_err("optimizer.epochs", "must be >= 1"));
        }
        if o.batch_size == 0 {
            return Err(config_err("optimizer.batch_size", "must be >= 1"));
        }
        if !(self.distill.alpha >= 0.0) {
            return Err(config_err("distill.alpha", "must be >= 0"));
        }
        let n_stages = self.network.stages.len() + 1;
        if let Some(stages) = &self.distill.stages {
            if stages.is_empty() {
                return Err(config_err("distill.stages", "must list at least one stage"));
            }
            if let Some(j) = stages.iter().find(|&&j| j == 0 || j > n_stages) {
                return Err(config_err(
                    "distill.stages",
                    format!("stage {j} outside 1..={n_stages}"),
                ));
            }
        }
        if !(self.distill.new_class_significance >= 0.0) {
            return Err(config_err("distill.new_class_significance", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.significance.beta) {
            return Err(config_err("significance.beta", "must lie in [0, 1]"));
        }
        if self.exemplars.budget == 0 {
            return Err(config_err("exemplars.budget", "must be >= 1"));
        }
        if self.stream.base_classes == 0 {
            return Err(config_err("stream.base_classes", "must be >= 1"));
        }
        if self.stream.increment == 0 {
            return Err(config_err("stream.increment", "must be >= 1"));
        }
        if let Some(k) = d.classes {
            if self.stream.base_classes > k
                || !(k - self.stream.base_classes).is_multiple_of(self.stream.increment)
            {
                return Err(config_err(
                    "stream",
                    format!(
                        "{k} classes do not split into base {} plus increments of {}",
                        self.stream.base_classes, self.stream.increment
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Builds or loads the dataset. Synthetic data and file splits are
    /// seeded by the master seed.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        let spec = |kind| SyntheticSpec {
            kind,
            classes: d.classes.unwrap_or(0),
            samples_per_class: d.samples_per_class.unwrap_or(0),
            separation: d.separation.unwrap_or(0.0),
            noise: d.noise.unwrap_or(0.0),
            seed: self.seed,
        };
        let path = || d.path.as_deref().expect("validated");
        match d.kind {
            DatasetKind::Blobs => generate_synthetic(&spec(SyntheticKind::Blobs {
                dims: d.dims.expect("validated"),
            })),
            DatasetKind::Patches => generate_synthetic(&spec(SyntheticKind::Patches {
                shape: d.shape.expect("validated"),
            })),
            DatasetKind::Csv => load_csv(path(), self.seed),
            DatasetKind::Exds => load_exds(path(), self.seed),
        }
    }

    pub fn network_config(&self, input_shape: [usize; 3]) -> NetworkConfig {
        NetworkConfig {
            stages: self.network.stages.clone(),
            embed_dim: self.network.embed_dim,
            input_shape,
            eta: self.network.eta,
            eta_learnable: true,
        }
    }

    /// Distillation settings after applying the method: `finetune_only`
    /// zeroes α and `last_stage_only` keeps only the highest configured
    /// stage.
    pub fn distill_config(&self) -> DistillConfig {
        let conv = self.network.stages.len();
        let mut cfg = DistillConfig::for_conv_stages(conv, self.distill.alpha);
        if let Some(s) = &self.distill.stages {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            cfg.stages_enabled = s;
        }
        cfg.include_new_class_samples = self.distill.include_new;
        cfg.new_class_significance = self.distill.new_class_significance;
        cfg.frobenius_normalize = self.distill.frobenius_normalize;
        match self.method {
            Method::FinetuneOnly => cfg.alpha = 0.0,
            Method::LastStageOnly => {
                let last = *cfg
                    .stages_enabled
                    .iter()
                    .max()
                    .expect("validated non-empty");
                cfg.stages_enabled = vec![last];
            }
            Method::Exacfs | Method::UniformSignificance => {}
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
        "dataset": {"kind": "blobs", "classes": 4, "dims": 4, "samples_per_class": 10,
                    "separation": 3.0, "noise": 0.3},
        "network": {"stages": [{"channels": 2, "kernel": 1, "stride": 1}], "embed_dim": 4, "eta": 10.0},
        "optimizer": {"lr": 0.1, "momentum": 0.9, "weight_decay": 0.0005, "epochs": 2, "batch_size": 8},
        "distill": {"alpha": 1.0, "stages": [1], "include_new": true,
                    "new_class_significance": 1.0, "frobenius_normalize": true},
        "significance": {"beta": 0.4},
        "exemplars": {"strategy": "herding", "budget": 3},
        "stream": {"base_classes": 2, "increment": 1, "ordering_seed": 1},
        "finetune": {"epochs": 1},
        "method": "exacfs",
        "seed": 1
    }"#;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = RunConfig::from_json(SAMPLE).unwrap();
        assert_eq!(cfg.exemplars.strategy, SelectionStrategy::Herding);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.distill_config().stages_enabled, vec![1]);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let bad = SAMPLE.replace("\"budget\": 3", "\"budgte\": 3");
        match RunConfig::from_json(&bad).unwrap_err() {
            Error::Config { path, message } => {
                assert_eq!(path, "exemplars.budgte", "{message}");
                assert!(message.contains("budgte"));
            }
            e => panic!("{e}"),
        }
        let bad = SAMPLE.replace("\"lr\": 0.1", "\"lr\": \"fast\"");
        match RunConfig::from_json(&bad).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "optimizer.lr"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn semantic_errors() {
        let cases = [
            ("\"epochs\": 2", "\"epochs\": 0", "optimizer.epochs"),
            (
                "\"batch_size\": 8",
                "\"batch_size\": 0",
                "optimizer.batch_size",
            ),
            ("\"method\": \"exacfs\"", "\"method\": \"magic\"", "method"),
            ("\"increment\": 1", "\"increment\": 3", "stream"),
            ("\"dims\": 4,", "", "dataset.dims"),
            ("\"stages\": [1]", "\"stages\": [3]", "distill.stages"),
        ];
        for (from, to, want) in cases {
            match RunConfig::from_json(&SAMPLE.replace(from, to)).unwrap_err() {
                Error::Config { path, .. } => assert_eq!(path, want, "{to}"),
                e => panic!("{e}"),
            }
        }
    }

    #[test]
    fn method_adjusts_distillation() {
        let mut cfg = RunConfig::from_json(SAMPLE).unwrap();
        cfg.distill.stages = Some(vec![2, 1]);
        assert_eq!(cfg.distill_config().stages_enabled, vec![1, 2]);
        cfg.method = Method::LastStageOnly;
        assert_eq!(cfg.distill_config().stages_enabled, vec![2]);
        cfg.method = Method::FinetuneOnly;
        assert_eq!(cfg.distill_config().alpha, 0.0);
        cfg.distill.stages = None;
        cfg.method = Method::Exacfs;
        assert_eq!(cfg.distill_config().stages_enabled, vec![1]);
    }
}
