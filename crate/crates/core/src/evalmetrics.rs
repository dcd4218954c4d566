//! Attack strength (APSR) and detection quality (ADA*, AUROC, TPR at a
//! fixed clean false positive rate), plus the k-fold evaluation harness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::DetectorSpec;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::LabelMap;
use crate::uncertainty::FeatureVector;

/// Fraction of pixels whose prediction differs from the ground truth.
pub fn apsr(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(1.0 - pred.agreement(gt)?)
}

/// Detector scores `p(x)` of clean and perturbed images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub clean: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub detector: String,
    pub attack: String,
}

impl ScoreSet {
    pub fn new(clean: Vec<f64>, perturbed: Vec<f64>, detector: &str, attack: &str) -> Result<Self> {
        if clean.is_empty() || perturbed.is_empty() {
            return Err(Error::Input("score sets need clean and perturbed scores".into()));
        }
        if let Some(bad) = clean.iter().chain(&perturbed).find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("score {bad} outside [0, 1]")));
        }
        Ok(Self {
            clean,
            perturbed,
            detector: detector.to_string(),
            attack: attack.to_string(),
        })
    }

    fn total(&self) -> f64 {
        (self.clean.len() + self.perturbed.len()) as f64
    }
}

pub const KAPPA_GRID: usize = 40;

/// `κ_i = i / 39`, `i = 0..39`.
pub fn kappa_grid() -> impl Iterator<Item = f64> {
    (0..KAPPA_GRID).map(|i| i as f64 / (KAPPA_GRID - 1) as f64)
}

/// Accuracy of the rule "clean iff `p ≥ κ`".
pub fn ada(scores: &ScoreSet, kappa: f64) -> f64 {
    let clean_ok = scores.clean.iter().filter(|&&p| p >= kappa).count();
    let adv_ok = scores.perturbed.iter().filter(|&&p| p < kappa).count();
    (clean_ok + adv_ok) as f64 / scores.total()
}

/// Best accuracy over the κ grid and the smallest κ attaining it.
pub fn ada_star(scores: &ScoreSet) -> (f64, f64) {
    let mut clean = scores.clean.clone();
    let mut adv = scores.perturbed.clone();
    clean.sort_by(f64::total_cmp);
    adv.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for kappa in kappa_grid() {
        let clean_ok = clean.len() - clean.partition_point(|&p| p < kappa);
        let adv_ok = adv.partition_point(|&p| p < kappa);
        let acc = (clean_ok + adv_ok) as f64 / scores.total();
        if acc > best.0 {
            best = (acc, kappa);
        }
    }
    best
}

/// Probability that a clean score exceeds a perturbed one, ties counted ½,
/// via midranks.
pub fn auroc(scores: &ScoreSet) -> f64 {
    let mut all: Vec<(f64, bool)> = scores
        .clean
        .iter()
        .map(|&p| (p, true))
        .chain(scores.perturbed.iter().map(|&p| (p, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * all[i..j].iter().filter(|(_, c)| *c).count() as f64;
        i = j;
    }
    let (nc, na) = (scores.clean.len() as f64, scores.perturbed.len() as f64);
    (rank_sum - nc * (nc + 1.0) / 2.0) / (nc * na)
}

pub const MIN_CLEAN_FOR_TPR: usize = 20;

/// Threshold flagging at most `fpr_cap` of the clean scores: the
/// `(k+1)`-th smallest clean score with `k = ⌊fpr_cap · n⌋`, or `+∞` when
/// every clean score may be flagged.
pub fn fpr_threshold(clean: &[f64], fpr_cap: f64) -> Result<f64> {
    if clean.len() < MIN_CLEAN_FOR_TPR {
        return Err(Error::Input(format!(
            "at least {MIN_CLEAN_FOR_TPR} clean scores needed, got {}",
            clean.len()
        )));
    }
    if !(0.0..=1.0).contains(&fpr_cap) {
        return Err(Error::Input(format!("false positive cap {fpr_cap} outside [0, 1]")));
    }
    let mut sorted = clean.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (fpr_cap * sorted.len() as f64 + 1e-9).floor() as usize;
    Ok(sorted.get(k).copied().unwrap_or(f64::INFINITY))
}

/// Fraction of perturbed scores below [`fpr_threshold`].
pub fn tpr_at_fpr(scores: &ScoreSet, fpr_cap: f64) -> Result<f64> {
    let kappa = fpr_threshold(&scores.clean, fpr_cap)?;
    let hits = scores.perturbed.iter().filter(|&&p| p < kappa).count();
    Ok(hits as f64 / scores.perturbed.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ada_star: f64,
    pub kappa: f64,
    pub auroc: f64,
    pub tpr5: f64,
}

pub fn detection_metrics(scores: &ScoreSet) -> Result<DetectionMetrics> {
    let (ada_star, kappa) = ada_star(scores);
    Ok(DetectionMetrics {
        ada_star,
        kappa,
        auroc: auroc(scores),
        tpr5: tpr_at_fpr(scores, 0.05)?,
    })
}

/// Splits the sorted unique ids into `k` folds after a seeded shuffle;
/// position `i` of the shuffled list goes to fold `i mod k`.
pub fn folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let unique: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if unique.len() < k {
        return Err(Error::Input(format!("{} images cannot fill {k} folds", unique.len())));
    }
    let mut order = unique;
    order.shuffle(&mut rng_from_seed(derive_seed(seed, "folds", 0)));
    let mut out = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        out[i % k].push(id);
    }
    out.iter_mut().for_each(|f| f.sort());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub detector: String,
    pub attack: String,
    pub ada_star: Summary,
    pub kappa: Summary,
    pub auroc: Summary,
    pub tpr5: Summary,
    pub per_fold: Vec<DetectionMetrics>,
}

/// Input to [`cross_validate`]: one clean feature vector per image id and,
/// per attack tag, the features of the attacked versions.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub clean: Vec<FeatureVector>,
    pub attacked: BTreeMap<String, Vec<FeatureVector>>,
}

impl FeatureTable {
    pub fn from_vectors(vectors: Vec<FeatureVector>) -> Self {
        let mut table = FeatureTable::default();
        for f in vectors {
            if f.label == crate::uncertainty::SampleLabel::Clean {
                table.clean.push(f);
            } else {
                table.attacked.entry(f.attack.clone()).or_default().push(f);
            }
        }
        table
    }
}

fn by_ids(vectors: &[FeatureVector], ids: &BTreeSet<&str>) -> Vec<Vec<f64>> {
    let mut rows: Vec<&FeatureVector> = vectors.iter().filter(|f| ids.contains(f.id.as_str())).collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    rows.into_iter().map(|f| f.values.clone()).collect()
}

/// Trains `spec` on the clean images of every training fold (plus the
/// `train_attack` features for supervised detectors) and evaluates each
/// attack on the held-out images. Rows follow the attack tag order.
pub fn cross_validate(
    table: &FeatureTable,
    spec: &DetectorSpec,
    train_attack: &str,
    runs: usize,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let ids: Vec<String> = table.clean.iter().map(|f| f.id.clone()).collect();
    let parts = folds(&ids, runs, seed)?;
    let supervised_data = table.attacked.get(train_attack);
    if spec.is_supervised() && supervised_data.is_none() {
        return Err(Error::Input(format!("no features for training attack {train_attack}")));
    }
    let per_fold: Vec<Vec<DetectionMetrics>> = (0..runs)
        .into_par_iter()
        .map(|k| -> Result<Vec<DetectionMetrics>> {
            let test: BTreeSet<&str> = parts[k].iter().map(String::as_str).collect();
            let train: BTreeSet<&str> = parts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .flat_map(|(_, p)| p.iter().map(String::as_str))
                .collect();
            let clean_train = by_ids(&table.clean, &train);
            let adv_train = supervised_data.map(|v| by_ids(v, &train)).unwrap_or_default();
            let model = spec.fit(&clean_train, &adv_train)?;
            let clean_scores = by_ids(&table.clean, &test)
                .iter()
                .map(|r| model.score(r))
                .collect::<Result<Vec<_>>>()?;
            table
                .attacked
                .iter()
                .map(|(tag, vectors)| {
                    let adv_scores = by_ids(vectors, &test)
                        .iter()
                        .map(|r| model.score(r))
                        .collect::<Result<Vec<_>>>()?;
                    detection_metrics(&ScoreSet::new(clean_scores.clone(), adv_scores, spec.name(), tag)?)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(table
        .attacked
        .keys()
        .enumerate()
        .map(|(a, tag)| {
            let metrics: Vec<DetectionMetrics> = per_fold.iter().map(|f| f[a]).collect();
            let pick = |f: fn(&DetectionMetrics) -> f64| Summary::of(&metrics.iter().map(f).collect::<Vec<_>>());
            ReportRow {
                detector: spec.name().to_string(),
                attack: tag.clone(),
                ada_star: pick(|m| m.ada_star),
                kappa: pick(|m| m.kappa),
                auroc: pick(|m| m.auroc),
                tpr5: pick(|m| m.tpr5),
                per_fold: metrics,
            }
        })
        .collect())
}

/// Final evaluation output: mean APSR per attack (including `clean`) and the
/// cross-validated detection rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: usize,
    pub seed: u64,
    pub train_attack: String,
    pub apsr: BTreeMap<String, f64>,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: [&str; 12] = [
    "detector",
    "attack",
    "apsr",
    "ada_star_mean",
    "ada_star_std",
    "kappa_mean",
    "kappa_std",
    "auroc_mean",
    "auroc_std",
    "tpr5_mean",
    "tpr5_std",
    "folds",
];

impl EvalReport {
    pub fn row(&self, detector: &str, attack: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.detector == detector && r.attack == attack)
    }

    /// APSR rows (`detector = -`) first, then one row per detector × attack.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_HEADER)?;
        let blank = || vec![String::new(); 8];
        for (attack, v) in &self.apsr {
            let mut rec = vec!["-".to_string(), attack.clone(), v.to_string()];
            rec.extend(blank());
            rec.push(String::new());
            w.write_record(&rec[..REPORT_HEADER.len()])?;
        }
        for r in &self.rows {
            let apsr = self.apsr.get(&r.attack).map(f64::to_string).unwrap_or_default();
            let mut rec = vec![r.detector.clone(), r.attack.clone(), apsr];
            for s in [r.ada_star, r.kappa, r.auroc, r.tpr5] {
                rec.push(s.mean.to_string());
                rec.push(s.std.to_string());
            }
            rec.push(self.folds.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::SampleLabel;
    use proptest::prelude::*;

    fn set(clean: &[f64], adv: &[f64]) -> ScoreSet {
        ScoreSet::new(clean.to_vec(), adv.to_vec(), "d", "a").unwrap()
    }

    #[test]
    fn apsr_examples() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(apsr(&gt, &gt).unwrap(), 0.0);
        assert_eq!(apsr(&LabelMap::new(2, 2, vec![1, 0, 3, 2]).unwrap(), &gt).unwrap(), 1.0);
        assert_eq!(apsr(&LabelMap::new(2, 2, vec![0, 1, 0, 0]).unwrap(), &gt).unwrap(), 0.5);
        assert!(apsr(&LabelMap::filled(1, 4, 0), &gt).is_err());
    }

    #[test]
    fn ada_star_examples() {
        let (a, k) = ada_star(&set(&[0.9, 0.8], &[0.2, 0.1]));
        assert_eq!(a, 1.0);
        assert!((k - 8.0 / 39.0).abs() < 1e-15, "smallest perfect κ is 8/39, got {k}");
        assert!(ada(&set(&[0.9, 0.8], &[0.2, 0.1]), 20.0 / 39.0) == 1.0);
        let s = set(&[0.3, 0.6, 0.1], &[0.3, 0.6, 0.1]);
        assert!(ada_star(&s).0 >= 0.5);
        assert_eq!(ada(&s, 0.0), 0.5);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8], &[0.2, 0.1])), 1.0);
        assert_eq!(auroc(&set(&[0.9, 0.4], &[0.6, 0.1])), 0.75);
        assert_eq!(auroc(&set(&[0.5, 0.2, 0.7], &[0.5, 0.2, 0.7])), 0.5);
    }

    #[test]
    fn tpr_examples() {
        let clean: Vec<f64> = (0..20).map(|i| 0.5 + i as f64 * 0.02).collect();
        assert_eq!(tpr_at_fpr(&set(&clean, &[0.1, 0.2]), 0.05).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&set(&clean, &[0.95, 0.99]), 0.05).unwrap(), 0.0);
        // κ lands on the 2nd-smallest clean score (0.52): one clean score (5%)
        // lies below it.
        assert_eq!(fpr_threshold(&clean, 0.05).unwrap(), 0.52);
        let adv = [0.49, 0.5, 0.51, 0.52, 0.53];
        assert_eq!(tpr_at_fpr(&set(&clean, &adv), 0.05).unwrap(), 3.0 / 5.0);
        assert!(matches!(tpr_at_fpr(&set(&clean[..19], &adv), 0.05), Err(Error::Input(_))));
    }

    #[test]
    fn score_set_validation() {
        assert!(ScoreSet::new(vec![], vec![0.5], "d", "a").is_err());
        assert!(ScoreSet::new(vec![1.5], vec![0.5], "d", "a").is_err());
    }

    fn brute_auroc(s: &ScoreSet) -> f64 {
        let mut wins = 0.0;
        for &c in &s.clean {
            for &a in &s.perturbed {
                wins += if c > a {
                    1.0
                } else if c == a {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (s.clean.len() * s.perturbed.len()) as f64
    }

    fn brute_ada_star(s: &ScoreSet) -> (f64, f64) {
        let mut best = (-1.0, 0.0);
        for i in 0..40 {
            let kappa = i as f64 / 39.0;
            let correct = s.clean.iter().filter(|&&p| p >= kappa).count() + s.perturbed.iter().filter(|&&p| p < kappa).count();
            let acc = correct as f64 / (s.clean.len() + s.perturbed.len()) as f64;
            if acc > best.0 {
                best = (acc, kappa);
            }
        }
        best
    }

    fn score_lists() -> impl Strategy<Value = ScoreSet> {
        let score = prop_oneof![0.0f64..=1.0, (0u8..=10).prop_map(|v| f64::from(v) / 10.0)];
        (
            prop::collection::vec(score.clone(), 1..200),
            prop::collection::vec(score, 1..200),
        )
            .prop_map(|(c, a)| ScoreSet::new(c, a, "d", "a").unwrap())
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(s in score_lists()) {
            prop_assert!((auroc(&s) - brute_auroc(&s)).abs() <= 1e-12);
        }

        #[test]
        fn ada_star_matches_grid_scan(s in score_lists()) {
            prop_assert_eq!(ada_star(&s), brute_ada_star(&s));
            let base = s.clean.len() as f64 / (s.clean.len() + s.perturbed.len()) as f64;
            prop_assert!(ada_star(&s).0 >= base);
        }

        #[test]
        fn auroc_is_rank_invariant(s in score_lists()) {
            let t = ScoreSet::new(
                s.clean.iter().map(|p| p.powi(3)).collect(),
                s.perturbed.iter().map(|p| p.powi(3)).collect(),
                "d",
                "a",
            ).unwrap();
            prop_assert!((auroc(&s) - auroc(&t)).abs() <= 1e-12);
        }

        #[test]
        fn tpr_threshold_caps_false_positives(
            clean in prop::collection::vec(0.0f64..=1.0, 20..120),
            adv in prop::collection::vec(0.0f64..=1.0, 1..50),
        ) {
            let kappa = fpr_threshold(&clean, 0.05).unwrap();
            let fp = clean.iter().filter(|&&p| p < kappa).count() as f64 / clean.len() as f64;
            prop_assert!(fp <= 0.05);
            let tpr = tpr_at_fpr(&ScoreSet::new(clean, adv, "d", "a").unwrap(), 0.05).unwrap();
            prop_assert!((0.0..=1.0).contains(&tpr));
        }
    }

    #[test]
    fn folds_partition_ids() {
        let ids: Vec<String> = (0..10).map(|i| format!("val-{i:05}")).collect();
        let f = folds(&ids, 5, 3).unwrap();
        assert!(f.iter().all(|p| p.len() == 2));
        let mut union: Vec<String> = f.concat();
        union.sort();
        assert_eq!(union, ids);
        assert_eq!(f, folds(&ids, 5, 3).unwrap());
        assert_ne!(f, folds(&ids, 5, 4).unwrap());
        assert!(matches!(folds(&ids[..4], 5, 3), Err(Error::Input(_))));
    }

    fn fv(id: &str, label: SampleLabel, attack: &str, entropy: f64) -> FeatureVector {
        FeatureVector {
            id: id.into(),
            label,
            attack: attack.into(),
            values: vec![entropy, 0.1, 0.2, 0.4, 0.3, 0.2, 0.1],
        }
    }

    fn constructed_table() -> FeatureTable {
        let ln4 = 4f64.ln();
        let mut vectors = Vec::new();
        for i in 0..100 {
            let id = format!("val-{i:05}");
            vectors.push(fv(&id, SampleLabel::Clean, "clean", 0.1 * ln4));
            vectors.push(fv(&id, SampleLabel::Attacked, "A", 0.9 * ln4));
        }
        FeatureTable::from_vectors(vectors)
    }

    #[test]
    fn entropy_cross_validation_reproduces_single_run() {
        let table = constructed_table();
        let rows = cross_validate(&table, &DetectorSpec::Entropy, "A", 5, 0).unwrap();
        assert_eq!(rows.len(), 1);
        let single = ada_star(&set(&[0.9; 20], &[0.1; 20]));
        for m in &rows[0].per_fold {
            assert_eq!((m.ada_star, m.kappa), single);
            assert_eq!(m.auroc, 1.0);
            assert_eq!(m.tpr5, 1.0);
        }
        assert_eq!(rows[0].ada_star.std, 0.0);
        assert_eq!(rows, cross_validate(&table, &DetectorSpec::Entropy, "A", 5, 0).unwrap());
    }

    #[test]
    fn supervised_detector_needs_training_attack() {
        let table = constructed_table();
        assert!(matches!(
            cross_validate(&table, &DetectorSpec::lasso(), "missing", 5, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn report_files() {
        let table = constructed_table();
        let rows = cross_validate(&table, &DetectorSpec::Entropy, "A", 5, 0).unwrap();
        let report = EvalReport {
            folds: 5,
            seed: 0,
            train_attack: "A".into(),
            apsr: BTreeMap::from([("clean".to_string(), 0.05), ("A".to_string(), 0.4)]),
            rows,
        };
        let dir = tempfile::tempdir().unwrap();
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER.join(","));
        assert_eq!(lines[1], "-,A,0.4,,,,,,,,,");
        assert_eq!(lines[2], "-,clean,0.05,,,,,,,,,");
        assert!(lines[3].starts_with("entropy,A,0.4,1,0,"));
        report.write_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::read_json(&dir.path().join("r.json")).unwrap(), report);
    }
}
