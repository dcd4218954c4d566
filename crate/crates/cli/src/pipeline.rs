//! Stage runner. Each stage writes its artifacts into its own directory under
//! the output root together with a `.stamp` holding a fingerprint of its
//! configuration and of the stamps of the stages it depends on. A stage whose
//! stamp matches is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use segdetect::attacks::{
    apply_universal, dnnm_attack, patch_attack, run_gradient_attack, ssmm_selection, ssmm_train, AttackSpec,
    PerturbedSample,
};
use segdetect::container::{read_tensor, write_labels, write_tensor};
use segdetect::detectors::{classify, Detector, Verdict};
use segdetect::evalmetrics::{apsr, cross_validate, EvalReport, FeatureTable};
use segdetect::heatmap::export_entropy_heatmap;
use segdetect::refmodel::{grad_check, pixel_accuracy, train_with_history, CheckReport, GradCheckConfig, ModelParams};
use segdetect::rng::derive_seed;
use segdetect::synthdata::{read_manifest, read_split, write_dataset, SegSample, Split};
use segdetect::uncertainty::{feature_vector, read_features, write_features, FeatureVector, SampleLabel, CLEAN_TAG};
use segdetect::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const STAMP: &str = ".stamp";
pub const THREADS_ENV: &str = "SEGDETECT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    TrainModel,
    Gradcheck,
    Attack,
    ExtractFeatures,
    TrainDetector,
    Detect,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainModel,
        Stage::Gradcheck,
        Stage::Attack,
        Stage::ExtractFeatures,
        Stage::TrainDetector,
        Stage::Detect,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainModel => "train-model",
            Stage::Gradcheck => "gradcheck",
            Stage::Attack => "attack",
            Stage::ExtractFeatures => "extract-features",
            Stage::TrainDetector => "train-detector",
            Stage::Detect => "detect",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Directory below the output root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainModel => "model",
            Stage::Gradcheck => "gradcheck",
            Stage::Attack => "attacks",
            Stage::ExtractFeatures => "features",
            Stage::TrainDetector => "detectors",
            Stage::Detect => "detect",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::TrainModel => &[Stage::GenData],
            Stage::Gradcheck | Stage::Attack => &[Stage::TrainModel],
            Stage::ExtractFeatures => &[Stage::Attack],
            Stage::TrainDetector | Stage::Evaluate => &[Stage::ExtractFeatures],
            Stage::Detect => &[Stage::TrainDetector],
            Stage::Report => &[Stage::Gradcheck, Stage::Evaluate, Stage::Detect],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCheck {
    pub id: String,
    pub report: CheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub images: Vec<ImageCheck>,
}

/// Contents of `attacks/<tag>/attack.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub spec: AttackSpec,
    pub ids: Vec<String>,
    /// `‖x_adv − x‖∞` per image, in `ids` order.
    pub linf: Vec<f64>,
    /// Patch top-left corners, in `ids` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locations: Option<Vec<(usize, usize)>>,
    /// Images the universal perturbation or patch was optimised on.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_ids: Vec<String>,
}

/// Applies the `SEGDETECT_THREADS` override to the global thread pool.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn fingerprint(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    keys: Mutex<BTreeMap<Stage, String>>,
}

impl Pipeline {
    /// Validates `cfg`, derives the component seeds and writes the resolved
    /// configuration to `<out>/config.json`.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let out = cfg.out_dir();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("config.json"), &cfg)?;
        Ok(Self {
            cfg,
            out,
            keys: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    /// Runs `stage` after bringing its prerequisites up to date.
    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        self.ensure(stage).map(|(_, outcome)| outcome)
    }

    pub fn run_all(&self) -> Result<EvalReport> {
        self.run(Stage::Report)?;
        self.report()
    }

    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport::read_json(&self.stage_dir(Stage::Evaluate).join("eval.json"))?)
    }

    fn section(&self, stage: Stage) -> Value {
        let c = &self.cfg;
        let ev = &c.evaluation;
        match stage {
            Stage::GenData => json!(c.dataset),
            Stage::TrainModel => json!(c.train),
            Stage::Gradcheck => json!(c.gradcheck),
            Stage::Attack => json!(c.attacks),
            Stage::ExtractFeatures => Value::Null,
            Stage::TrainDetector => json!({"detectors": c.detectors, "train_attack": ev.train_attack}),
            Stage::Detect => json!({"kappa": ev.kappa}),
            Stage::Evaluate => json!({
                "detectors": c.detectors,
                "folds": ev.folds,
                "train_attack": ev.train_attack,
                "seed": ev.seed,
            }),
            Stage::Report => json!({"heatmaps": ev.heatmaps}),
        }
    }

    fn ensure(&self, stage: Stage) -> Result<(String, Outcome)> {
        if let Some(key) = self.keys.lock().expect("stage lock").get(&stage) {
            return Ok((key.clone(), Outcome::Skipped));
        }
        let deps = stage
            .deps()
            .iter()
            .map(|&d| self.ensure(d).map(|(k, _)| k))
            .collect::<Result<Vec<_>>>()?;
        let key = fingerprint(&json!({
            "stage": stage.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.section(stage),
            "deps": deps,
        }));
        let dir = self.stage_dir(stage);
        let stamp = dir.join(STAMP);
        let outcome = if fs::read_to_string(&stamp).is_ok_and(|s| s == key) {
            info!("stage {}: up to date", stage.name());
            Outcome::Skipped
        } else {
            info!("stage {}: running", stage.name());
            self.execute(stage, &dir)
                .with_context(|| format!("stage {}", stage.name()))?;
            fs::write(&stamp, &key).with_context(|| format!("stage {}: writing stamp", stage.name()))?;
            Outcome::Ran
        };
        self.keys.lock().expect("stage lock").insert(stage, key.clone());
        Ok((key, outcome))
    }

    fn execute(&self, stage: Stage, dir: &Path) -> Result<()> {
        if stage != Stage::Attack && dir.exists() {
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::remove_file(dir.join(STAMP)).ok();
        match stage {
            Stage::GenData => self.gen_data(dir),
            Stage::TrainModel => self.train_model(dir),
            Stage::Gradcheck => self.gradcheck(dir),
            Stage::Attack => self.attack(dir),
            Stage::ExtractFeatures => self.extract_features(dir),
            Stage::TrainDetector => self.train_detector(dir),
            Stage::Detect => self.detect(dir),
            Stage::Evaluate => self.evaluate(dir),
            Stage::Report => self.write_report(dir),
        }
    }

    pub fn split(&self, split: Split) -> Result<Vec<SegSample>> {
        let dir = self.stage_dir(Stage::GenData);
        Ok(read_split(&dir, &read_manifest(&dir)?, split)?)
    }

    pub fn model(&self) -> Result<ModelParams> {
        Ok(ModelParams::load(&self.stage_dir(Stage::TrainModel))?)
    }

    pub fn attack_dir(&self, tag: &str) -> PathBuf {
        self.stage_dir(Stage::Attack).join(tag)
    }

    pub fn attack_record(&self, tag: &str) -> Result<AttackRecord> {
        read_json(&self.attack_dir(tag).join("attack.json"))
    }

    pub fn attacked_image(&self, tag: &str, id: &str) -> Result<Tensor> {
        Ok(read_tensor(&self.attack_dir(tag).join("images").join(format!("{id}.ten")))?)
    }

    pub fn features(&self) -> Result<Vec<FeatureVector>> {
        Ok(read_features(&self.stage_dir(Stage::ExtractFeatures).join("features.csv"))?)
    }

    pub fn apsr(&self) -> Result<BTreeMap<String, f64>> {
        read_json(&self.stage_dir(Stage::ExtractFeatures).join("apsr.json"))
    }

    fn gen_data(&self, dir: &Path) -> Result<()> {
        let manifest = write_dataset(dir, &self.cfg.dataset)?;
        if manifest.config.seed != self.cfg.dataset.seed {
            info!("dataset re-seeded to {} for class coverage", manifest.config.seed);
        }
        info!("wrote {} images", manifest.entries.len());
        Ok(())
    }

    fn train_model(&self, dir: &Path) -> Result<()> {
        let train = self.split(Split::Train)?;
        let val = self.split(Split::Val)?;
        let (model, epoch_loss) = train_with_history(&train, self.cfg.dataset.classes, &self.cfg.train)?;
        model.save(dir)?;
        let metrics = ModelMetrics {
            train_accuracy: pixel_accuracy(&model, &train)?,
            val_accuracy: pixel_accuracy(&model, &val)?,
            epoch_loss,
        };
        info!(
            "train accuracy {:.4}, validation accuracy {:.4}",
            metrics.train_accuracy, metrics.val_accuracy
        );
        write_json(&dir.join("metrics.json"), &metrics)
    }

    fn gradcheck(&self, dir: &Path) -> Result<()> {
        let model = self.model()?;
        let stage = &self.cfg.gradcheck;
        let mut val = self.split(Split::Val)?;
        val.truncate(stage.images);
        let images = val
            .par_iter()
            .map(|s| {
                let cfg = GradCheckConfig {
                    seed: derive_seed(stage.check.seed, &s.id, 0),
                    ..stage.check.clone()
                };
                let report = grad_check(&model, &s.image, &s.labels, &cfg)?;
                Ok(ImageCheck { id: s.id.clone(), report })
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = GradCheckSummary {
            passed: images.iter().all(|c| c.report.passed),
            images,
        };
        if !summary.passed {
            warn!("gradient check failed on at least one image");
        }
        write_json(&dir.join("report.json"), &summary)
    }

    fn attack(&self, dir: &Path) -> Result<()> {
        let tags: Vec<String> = self.cfg.attacks.iter().map(AttackSpec::tag).collect();
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_dir() && !tags.contains(&name) {
                fs::remove_dir_all(entry.path())?;
            }
        }
        let model = self.model()?;
        let val = self.split(Split::Val)?;
        for spec in &self.cfg.attacks {
            let tag = spec.tag();
            let sub = self.attack_dir(&tag);
            let sub_key = fingerprint(&json!({"spec": spec, "model": self.model_key()?}));
            if fs::read_to_string(sub.join(STAMP)).is_ok_and(|s| s == sub_key) {
                info!("attack {tag}: up to date");
                continue;
            }
            info!("attack {tag}: running on {} images", val.len());
            if sub.exists() {
                fs::remove_dir_all(&sub)?;
            }
            fs::create_dir_all(&sub)?;
            self.run_attack(&model, &val, spec, &sub)
                .with_context(|| format!("attack {tag}"))?;
            fs::write(sub.join(STAMP), sub_key)?;
        }
        Ok(())
    }

    fn model_key(&self) -> Result<String> {
        self.keys
            .lock()
            .expect("stage lock")
            .get(&Stage::TrainModel)
            .cloned()
            .context("model stage has not been resolved")
    }

    fn run_attack(&self, model: &ModelParams, val: &[SegSample], spec: &AttackSpec, dir: &Path) -> Result<()> {
        let mut train_ids = Vec::new();
        let mut locations = None;
        let perturbed: Vec<PerturbedSample> = match spec {
            AttackSpec::Gradient(cfg) => val
                .par_iter()
                .map(|s| run_gradient_attack(model, s, cfg))
                .collect::<segdetect::Result<_>>()?,
            AttackSpec::Dnnm(cfg) => val
                .par_iter()
                .map(|s| dnnm_attack(model, s, cfg))
                .collect::<segdetect::Result<_>>()?,
            AttackSpec::Ssmm(cfg) => {
                let (picked, target) = ssmm_selection(val, cfg)?;
                let subset: Vec<SegSample> = picked.iter().map(|&i| val[i].clone()).collect();
                train_ids = subset.iter().map(|s| s.id.clone()).collect();
                let u = ssmm_train(model, &subset, &vec![target; subset.len()], cfg)?;
                write_tensor(&dir.join("xi.ten"), &u.xi)?;
                write_labels(&dir.join("target.ten"), &u.target)?;
                val.par_iter()
                    .map(|s| apply_universal(s, &u))
                    .collect::<segdetect::Result<_>>()?
            }
            AttackSpec::Patch(cfg) => {
                let train = self.split(Split::Train)?;
                let patch = patch_attack(model, &train, cfg)?;
                train_ids = train.iter().map(|s| s.id.clone()).collect();
                write_tensor(&dir.join("patch.ten"), &patch.pixels)?;
                let mut locs = Vec::with_capacity(val.len());
                let mut out = Vec::with_capacity(val.len());
                for s in val {
                    let (h, w, _) = s.image.hwc()?;
                    let (row, col) = patch.location(&s.id, h, w)?;
                    locs.push((row, col));
                    out.push(patch.apply_at(s, row, col)?);
                }
                locations = Some(locs);
                out
            }
        };
        let images = dir.join("images");
        let targets = dir.join("targets");
        fs::create_dir_all(&images)?;
        let mut linf = Vec::with_capacity(val.len());
        for (p, s) in perturbed.iter().zip(val) {
            write_tensor(&images.join(format!("{}.ten", p.id)), &p.image)?;
            if let (Some(t), AttackSpec::Gradient(_) | AttackSpec::Dnnm(_)) = (&p.target, spec) {
                fs::create_dir_all(&targets)?;
                write_labels(&targets.join(format!("{}.ten", p.id)), t)?;
            }
            linf.push(p.image.linf_distance(&s.image)?);
        }
        let record = AttackRecord {
            spec: spec.clone(),
            ids: val.iter().map(|s| s.id.clone()).collect(),
            linf,
            locations,
            train_ids,
        };
        write_json(&dir.join("attack.json"), &record)
    }

    fn extract_features(&self, dir: &Path) -> Result<()> {
        let model = self.model()?;
        let val = self.split(Split::Val)?;
        let mut features = Vec::new();
        let mut apsr_means = BTreeMap::new();
        let tags = std::iter::once(CLEAN_TAG.to_string()).chain(self.cfg.attacks.iter().map(AttackSpec::tag));
        for tag in tags {
            let rows = val
                .par_iter()
                .map(|s| -> Result<(FeatureVector, f64)> {
                    let (image, label) = if tag == CLEAN_TAG {
                        (s.image.clone(), SampleLabel::Clean)
                    } else {
                        (self.attacked_image(&tag, &s.id)?, SampleLabel::Attacked)
                    };
                    let probs = model.predict(&image)?;
                    let rate = apsr(&probs.argmax(), &s.labels)?;
                    Ok((feature_vector(&probs, &s.id, label, &tag)?, rate))
                })
                .collect::<Result<Vec<_>>>()
                .with_context(|| format!("features for {tag}"))?;
            let rates: Vec<f64> = rows.iter().map(|r| r.1).collect();
            apsr_means.insert(tag, mean(&rates));
            features.extend(rows.into_iter().map(|r| r.0));
        }
        write_features(&dir.join("features.csv"), &features)?;
        write_json(&dir.join("apsr.json"), &apsr_means)
    }

    fn train_detector(&self, dir: &Path) -> Result<()> {
        let table = FeatureTable::from_vectors(self.features()?);
        let clean: Vec<Vec<f64>> = table.clean.iter().map(|f| f.values.clone()).collect();
        let adv: Vec<Vec<f64>> = table
            .attacked
            .get(&self.cfg.evaluation.train_attack)
            .map(|v| v.iter().map(|f| f.values.clone()).collect())
            .unwrap_or_default();
        for spec in &self.cfg.detectors {
            if spec.is_supervised() && adv.is_empty() {
                warn!("skipping {}: no training attack features", spec.name());
                continue;
            }
            let detector = spec.fit(&clean, &adv).with_context(|| format!("detector {}", spec.name()))?;
            let path = dir.join(format!("{}.json", spec.name()));
            fs::write(&path, detector.to_json()?).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }

    pub fn detectors(&self) -> Result<Vec<Detector>> {
        let dir = self.stage_dir(Stage::TrainDetector);
        let mut out = Vec::new();
        for spec in &self.cfg.detectors {
            let path = dir.join(format!("{}.json", spec.name()));
            if path.exists() {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                out.push(Detector::from_json(&text)?);
            }
        }
        Ok(out)
    }

    fn detect(&self, dir: &Path) -> Result<()> {
        let features = self.features()?;
        let detectors = self.detectors()?;
        let path = dir.join("scores.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["id", "label", "attack", "detector", "score", "verdict"])?;
        for d in &detectors {
            let scores = features
                .par_iter()
                .map(|f| d.score_vector(f))
                .collect::<segdetect::Result<Vec<_>>>()?;
            for (f, p) in features.iter().zip(scores) {
                let verdict = match classify(p, self.cfg.evaluation.kappa) {
                    Verdict::Clean => "clean",
                    Verdict::Perturbed => "perturbed",
                };
                w.write_record([
                    f.id.as_str(),
                    &f.label.to_string(),
                    f.attack.as_str(),
                    d.name(),
                    &p.to_string(),
                    verdict,
                ])?;
            }
        }
        w.flush().with_context(|| format!("writing {}", path.display()))
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let ev = &self.cfg.evaluation;
        let table = FeatureTable::from_vectors(self.features()?);
        let mut rows = Vec::new();
        if !table.attacked.is_empty() {
            for spec in &self.cfg.detectors {
                let r = cross_validate(&table, spec, &ev.train_attack, ev.folds, ev.seed)
                    .with_context(|| format!("detector {}", spec.name()))?;
                rows.extend(r);
            }
        }
        let report = EvalReport {
            folds: ev.folds,
            seed: ev.seed,
            train_attack: ev.train_attack.clone(),
            apsr: self.apsr()?,
            rows,
        };
        report.write_json(&dir.join("eval.json"))?;
        Ok(())
    }

    fn write_report(&self, dir: &Path) -> Result<()> {
        let report = self.report()?;
        report.write_csv(&dir.join("report.csv"))?;
        let metrics: ModelMetrics = read_json(&self.stage_dir(Stage::TrainModel).join("metrics.json"))?;
        let check: GradCheckSummary = read_json(&self.stage_dir(Stage::Gradcheck).join("report.json"))?;
        let rows: Vec<Value> = report
            .rows
            .iter()
            .map(|r| {
                json!({
                    "detector": r.detector,
                    "attack": r.attack,
                    "ada_star": r.ada_star.mean,
                    "auroc": r.auroc.mean,
                    "tpr5": r.tpr5.mean,
                })
            })
            .collect();
        write_json(
            &dir.join("summary.json"),
            &json!({
                "train_accuracy": metrics.train_accuracy,
                "val_accuracy": metrics.val_accuracy,
                "gradcheck_passed": check.passed,
                "apsr": report.apsr,
                "detection": rows,
            }),
        )?;
        self.export_heatmaps(&dir.join("heatmaps"))
    }

    fn export_heatmaps(&self, dir: &Path) -> Result<()> {
        let n = self.cfg.evaluation.heatmaps;
        if n == 0 {
            return Ok(());
        }
        fs::create_dir_all(dir)?;
        let model = self.model()?;
        let mut val = self.split(Split::Val)?;
        val.truncate(n);
        let tags: Vec<String> = std::iter::once(CLEAN_TAG.to_string())
            .chain(self.cfg.attacks.iter().map(AttackSpec::tag))
            .collect();
        for s in &val {
            for tag in &tags {
                let image = if tag == CLEAN_TAG {
                    s.image.clone()
                } else {
                    self.attacked_image(tag, &s.id)?
                };
                export_entropy_heatmap(&model.predict(&image)?, &dir.join(format!("{}_{tag}.pgm", s.id)))?;
            }
        }
        Ok(())
    }
}
