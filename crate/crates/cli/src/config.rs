//! Experiment configuration files.
//!
//! Precedence, highest first: command-line flags, values in the file, built-in
//! defaults. The top-level `seed` always replaces `model.seed`.

use std::path::{Path, PathBuf};

use forgetnet_core::analysis::{AblationOrder, PruneScope, PruneStrategy};
use forgetnet_core::continual::Strategy;
use forgetnet_core::MlpConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Sparsity,
    Ablate,
    Prune,
    Perturb,
    Continual,
    Gradcheck,
    ExportFeatures,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Sparsity => "sparsity",
            ExperimentKind::Ablate => "ablate",
            ExperimentKind::Prune => "prune",
            ExperimentKind::Perturb => "perturb",
            ExperimentKind::Continual => "continual",
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::ExportFeatures => "export-features",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureSet {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Root holding one directory per dataset; falls back to
    /// `$FORGETNET_DATA`, then `./data`.
    pub dir: Option<PathBuf>,
    pub dataset: String,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// `name,sha256` list inside the dataset directory, checked when present.
    pub digests: Option<String>,
    /// Split used to measure neuron importance.
    pub importance_set: MeasureSet,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            dataset: "fashion".into(),
            train_limit: None,
            test_limit: None,
            digests: Some("digests.csv".into()),
            importance_set: MeasureSet::Test,
        }
    }
}

/// Named model overrides, e.g. `{"name": "l1", "model": {"forgetting": false, "l1": 1e-5}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub model: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: MlpConfig,
    pub variants: Vec<Variant>,
    /// Hidden layers to probe; all hidden layers when absent.
    pub layers: Option<Vec<usize>>,
    pub fractions: Vec<f64>,
    pub ablation_modes: Vec<AblationOrder>,
    pub repeats: Option<usize>,
    pub topk: Vec<usize>,
    pub keep_ratios: Vec<f64>,
    pub prune_strategies: Vec<PruneStrategy>,
    pub prune_scope: PruneScope,
    /// Ω used for the input pixels and output logits in connection importance.
    pub boundary_importance: f64,
    pub scale: f64,
    pub tasks: usize,
    pub task_seed: u64,
    pub strategies: Vec<Strategy>,
    pub lambda_ewc: f64,
    pub fisher_samples: usize,
    pub bins: usize,
    pub threshold: f64,
    pub gradcheck_nets: usize,
    pub gradcheck_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            model: MlpConfig::default(),
            variants: Vec::new(),
            layers: None,
            fractions: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            ablation_modes: vec![AblationOrder::Positive, AblationOrder::Negative, AblationOrder::Random],
            repeats: None,
            topk: vec![1, 10],
            keep_ratios: vec![1.0, 0.8, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05],
            prune_strategies: vec![PruneStrategy::Random, PruneStrategy::Importance],
            prune_scope: PruneScope::Layer,
            boundary_importance: 1.0,
            scale: 1.0,
            tasks: 10,
            task_seed: 1000,
            strategies: vec![Strategy::Sgd, Strategy::Joint, Strategy::Ewc, Strategy::EwcF],
            lambda_ewc: 100.0,
            fisher_samples: 2000,
            bins: 20,
            threshold: 0.0,
            gradcheck_nets: 1,
            gradcheck_batch: 4,
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn kind(&self) -> ExperimentKind {
        self.experiment.expect("validated config has an experiment")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        if let Some(d) = &o.data_dir {
            self.data.dir = Some(d.clone());
        }
        self.model.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.experiment.is_none() {
            return Err(CliError::Config("missing field `experiment`".into()));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for v in &self.variants {
            self.variant_model(v)?;
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("variant names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(CliError::Config("variant names must be non-empty file-name safe strings".into()));
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CliError::Config("fractions must lie in [0, 1]".into()));
        }
        if self.keep_ratios.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return Err(CliError::Config("keep_ratios must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.boundary_importance) {
            return Err(CliError::Config("boundary_importance must lie in [0, 1]".into()));
        }
        if self.tasks == 0 || self.bins == 0 {
            return Err(CliError::Config("tasks and bins must be at least 1".into()));
        }
        if !(self.scale >= 0.0) || !(self.lambda_ewc >= 0.0) {
            return Err(CliError::Config("scale and lambda_ewc must be non-negative".into()));
        }
        Ok(())
    }

    /// The base model with one variant's overrides merged in.
    pub fn variant_model(&self, v: &Variant) -> Result<MlpConfig, CliError> {
        let mut base = serde_json::to_value(&self.model).map_err(|e| CliError::Config(e.to_string()))?;
        let obj = base.as_object_mut().expect("model serializes to an object");
        for (k, val) in &v.model {
            obj.insert(k.clone(), val.clone());
        }
        let mut m: MlpConfig = serde_json::from_value(base)
            .map_err(|e| CliError::Config(format!("variant `{}`: {e}", v.name)))?;
        m.seed = self.model.seed;
        m.validate()
            .map_err(|e| CliError::Config(format!("variant `{}`: {e}", v.name)))?;
        Ok(m)
    }

    /// Variants to run; the base model alone when none are listed.
    pub fn resolved_variants(&self) -> Result<Vec<(String, MlpConfig)>, CliError> {
        if self.variants.is_empty() {
            return Ok(vec![("model".into(), self.model.clone())]);
        }
        self.variants
            .iter()
            .map(|v| Ok((v.name.clone(), self.variant_model(v)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"experiment": "train", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "train", "model": {"widht": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "train", "data": {"path": "x"}}"#).is_err());
    }

    #[test]
    fn experiment_required() {
        assert!(ExperimentConfig::from_json("{}").is_err());
        let c = ExperimentConfig::from_json(r#"{"experiment": "export-features"}"#).unwrap();
        assert_eq!(c.kind(), ExperimentKind::ExportFeatures);
    }

    #[test]
    fn variant_overrides_merge() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment": "train", "model": {"lr": 0.1},
                "variants": [{"name": "l1", "model": {"forgetting": false, "l1": 1e-5}}]}"#,
        )
        .unwrap();
        let v = c.resolved_variants().unwrap();
        assert_eq!(v[0].0, "l1");
        assert_eq!(v[0].1.lr, 0.1);
        assert_eq!(v[0].1.l1, 1e-5);
        assert!(!v[0].1.forgetting);
        let bad = r#"{"experiment": "train", "variants": [{"name": "x", "model": {"nope": 1}}]}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut c = ExperimentConfig::from_json(r#"{"experiment": "train", "seed": 3, "model": {"seed": 9}}"#).unwrap();
        c.apply(&Overrides::default());
        assert_eq!(c.model.seed, 3);
        c.apply(&Overrides {
            seed: Some(11),
            out_dir: Some("o".into()),
            data_dir: None,
        });
        assert_eq!((c.seed, c.model.seed), (11, 11));
        assert_eq!(c.out_dir, Some(PathBuf::from("o")));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"experiment": "ablate", "fractions": [1.5]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "prune", "keep_ratios": [0.0]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "train", "model": {"rho": 0}}"#).is_err());
    }
}
