//! Experiment configuration: defaults, JSON layering and seed derivation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use segdetect::attacks::{AttackConfig, AttackSpec, DnnmConfig, PatchConfig, SsmmConfig};
use segdetect::detectors::DetectorSpec;
use segdetect::evalmetrics::MIN_CLEAN_FOR_TPR;
use segdetect::refmodel::{GradCheckConfig, TrainConfig};
use segdetect::rng::derive_seed;
use segdetect::synthdata::DatasetConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_OUT: &str = "segdetect-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckStage {
    /// Number of validation images checked.
    pub images: usize,
    pub check: GradCheckConfig,
}

impl Default for GradCheckStage {
    fn default() -> Self {
        Self {
            images: 3,
            check: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub folds: usize,
    /// Attack tag whose features train the supervised detectors.
    pub train_attack: String,
    /// Decision threshold used by the `detect` stage.
    pub kappa: f64,
    /// Validation images exported as entropy heatmaps.
    pub heatmaps: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            train_attack: AttackConfig::ifgsm(2, true).tag(),
            kappa: 0.5,
            heatmaps: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every component seed is derived from this value.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckStage,
    pub attacks: Vec<AttackSpec>,
    pub detectors: Vec<DetectorSpec>,
    pub evaluation: EvaluationConfig,
}

pub fn default_attacks() -> Vec<AttackSpec> {
    let mut out = Vec::new();
    for targeted in [false, true] {
        for eps in [4, 8, 16] {
            out.push(AttackSpec::Gradient(AttackConfig::fgsm(eps, targeted)));
            out.push(AttackSpec::Gradient(AttackConfig::ifgsm(eps, targeted)));
        }
    }
    out.push(AttackSpec::Gradient(AttackConfig::ifgsm(2, true)));
    out.push(AttackSpec::Ssmm(SsmmConfig::default()));
    out.push(AttackSpec::Dnnm(DnnmConfig::default()));
    out.push(AttackSpec::Patch(PatchConfig::default()));
    out
}

pub fn default_detectors() -> Vec<DetectorSpec> {
    vec![
        DetectorSpec::Entropy,
        DetectorSpec::lasso(),
        DetectorSpec::ocsvm(),
        DetectorSpec::ellipse(),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradCheckStage::default(),
            attacks: default_attacks(),
            detectors: default_detectors(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Recursively merges `overlay` into `base`; objects merge key by key,
/// everything else is replaced.
pub fn merge_json(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an inline JSON object or, failing that, reads one from a file.
pub fn json_argument(arg: &str) -> Result<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(arg) {
        return Ok(v);
    }
    let text = fs::read_to_string(arg).with_context(|| format!("reading overrides from {arg}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing overrides in {arg}"))
}

impl ExperimentConfig {
    /// Defaults, then each layer in order, deep-merged.
    pub fn from_layers(layers: impl IntoIterator<Item = Value>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        for layer in layers {
            ensure!(layer.is_object(), "configuration layers must be JSON objects");
            merge_json(&mut value, layer);
        }
        serde_json::from_value(value).context("invalid configuration")
    }

    pub fn load(path: &Path) -> Result<Value> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Copy with all component seeds derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        let g = self.seed;
        cfg.dataset.seed = derive_seed(g, "dataset", 0);
        cfg.train.seed = derive_seed(g, "train", 0);
        cfg.gradcheck.check.seed = derive_seed(g, "gradcheck", 0);
        cfg.evaluation.seed = derive_seed(g, "evaluation", 0);
        for (i, spec) in cfg.attacks.iter_mut().enumerate() {
            match spec {
                AttackSpec::Ssmm(c) => c.seed = derive_seed(g, "ssmm", i as u64),
                AttackSpec::Patch(c) => c.seed = derive_seed(g, "patch", i as u64),
                AttackSpec::Gradient(_) | AttackSpec::Dnnm(_) => {}
            }
        }
        cfg
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        let classes = self.dataset.classes;
        let mut tags = BTreeSet::new();
        for spec in &self.attacks {
            spec.validate(classes).with_context(|| format!("attack {}", spec.tag()))?;
            let tag = spec.tag();
            ensure!(tag != segdetect::uncertainty::CLEAN_TAG, "attack tag {tag:?} is reserved");
            ensure!(tags.insert(tag.clone()), "attack {tag} is configured twice");
        }
        let mut names = BTreeSet::new();
        for d in &self.detectors {
            ensure!(names.insert(d.name()), "detector {} is configured twice", d.name());
        }
        let ev = &self.evaluation;
        ensure!(ev.folds >= 2, "evaluation needs at least 2 folds, got {}", ev.folds);
        ensure!((0.0..=1.0).contains(&ev.kappa), "κ must lie in [0, 1], got {}", ev.kappa);
        ensure!(
            self.gradcheck.images <= self.dataset.val_size,
            "gradcheck asks for {} images but only {} validation images exist",
            self.gradcheck.images,
            self.dataset.val_size
        );
        if !self.attacks.is_empty() && !self.detectors.is_empty() {
            if self.detectors.iter().any(DetectorSpec::is_supervised) && !tags.contains(&ev.train_attack) {
                bail!("training attack {} is not among the configured attacks", ev.train_attack);
            }
            let need = MIN_CLEAN_FOR_TPR * ev.folds;
            ensure!(
                self.dataset.val_size >= need,
                "{} folds need at least {need} validation images, got {}",
                ev.folds,
                self.dataset.val_size
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.attacks.len(), 16);
        assert!(cfg.attacks.iter().any(|a| a.tag() == cfg.evaluation.train_attack));
    }

    #[test]
    fn layers_merge_deeply() {
        let cfg = ExperimentConfig::from_layers([
            json!({"dataset": {"height": 32, "width": 32}, "seed": 4}),
            json!({"dataset": {"width": 40}, "train": {"epochs": 2}}),
        ])
        .unwrap();
        assert_eq!((cfg.dataset.height, cfg.dataset.width), (32, 40));
        assert_eq!(cfg.dataset.classes, 4);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn arrays_are_replaced() {
        let cfg = ExperimentConfig::from_layers([json!({"attacks": [], "detectors": [{"kind": "entropy"}]})]).unwrap();
        assert!(cfg.attacks.is_empty());
        assert_eq!(cfg.detectors, vec![DetectorSpec::Entropy]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_kinds_are_rejected() {
        assert!(ExperimentConfig::from_layers([json!({"datset": {}})]).is_err());
        assert!(ExperimentConfig::from_layers([json!({"detectors": [{"kind": "forest"}]})]).is_err());
        assert!(ExperimentConfig::from_layers([json!({"attacks": [{"family": "deepfool"}]})]).is_err());
        assert!(ExperimentConfig::from_layers([json!([1, 2])]).is_err());
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut cfg = ExperimentConfig::default();
        cfg.attacks.push(cfg.attacks[0].clone());
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.evaluation.train_attack = "FGSM_3".into();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.dataset.val_size = 60;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.evaluation.folds = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeds_follow_the_global_seed() {
        let a = ExperimentConfig::default().resolved();
        let b = ExperimentConfig { seed: 1, ..Default::default() }.resolved();
        assert_eq!(a, ExperimentConfig::default().resolved());
        assert_ne!(a.dataset.seed, b.dataset.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.dataset.seed, a.train.seed);
    }

    #[test]
    fn inline_and_file_arguments() {
        assert_eq!(json_argument(r#"{"seed": 3}"#).unwrap(), json!({"seed": 3}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.json");
        fs::write(&path, r#"{"seed": 5}"#).unwrap();
        assert_eq!(json_argument(path.to_str().unwrap()).unwrap(), json!({"seed": 5}));
        assert!(json_argument("/no/such/file.json").is_err());
    }
}
