//! Image-level attack detectors. Each maps a feature vector to `p(x)`, the
//! probability that the image is clean; `x` is flagged as perturbed iff
//! `p(x) < κ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::FeatureVector;

/// Per-feature affine normalisation fitted on clean data. Features with zero
/// spread are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Input dimension before dropping.
    pub dim: usize,
    /// Indices of the retained features.
    pub kept: Vec<usize>,
    #[serde(with = "hex_f64")]
    pub mean: Vec<f64>,
    #[serde(with = "hex_f64")]
    pub std: Vec<f64>,
}

const CONSTANT_STD: f64 = 1e-12;

impl Standardizer {
    /// Population mean and standard deviation of every column.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Input("cannot standardise an empty feature set".into()))?;
        let dim = first.len();
        check_rows(rows, dim)?;
        let n = rows.len() as f64;
        let (mut kept, mut mean, mut std) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..dim {
            let mu = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mu).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > CONSTANT_STD * mu.abs().max(1.0) {
                kept.push(k);
                mean.push(mu);
                std.push(sd);
            }
        }
        if kept.is_empty() {
            return Err(Error::Detector("every feature is constant on the training set".into()));
        }
        Ok(Self { dim, kept, mean, std })
    }

    pub fn output_dim(&self) -> usize {
        self.kept.len()
    }

    pub fn dropped(&self) -> Vec<usize> {
        (0..self.dim).filter(|k| !self.kept.contains(k)).collect()
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim {
            return Err(Error::Input(format!(
                "feature vector has {} entries, detector expects {}",
                row.len(),
                self.dim
            )));
        }
        Ok(self
            .kept
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&k, (m, s))| (row[k] - m) / s)
            .collect())
    }

    fn transform_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for r in rows {
        if r.len() != dim {
            return Err(Error::Input(format!("feature rows of length {} and {dim} mixed", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature rows must be finite".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Clean,
    Perturbed,
}

/// Perturbed iff `p < κ`.
pub fn classify(p: f64, kappa: f64) -> Verdict {
    if p >= kappa {
        Verdict::Clean
    } else {
        Verdict::Perturbed
    }
}

/// Detector kind with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    Entropy,
    Lasso {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Ocsvm {
        #[serde(default = "default_nu")]
        nu: f64,
        /// Median heuristic when absent.
        #[serde(default)]
        gamma: Option<f64>,
    },
    Ellipse {
        #[serde(default = "default_shrinkage")]
        shrinkage: f64,
    },
}

fn default_lambda() -> f64 {
    0.01
}

fn default_nu() -> f64 {
    0.1
}

fn default_shrinkage() -> f64 {
    1e-3
}

impl DetectorSpec {
    pub fn lasso() -> Self {
        DetectorSpec::Lasso { lambda: default_lambda() }
    }

    pub fn ocsvm() -> Self {
        DetectorSpec::Ocsvm {
            nu: default_nu(),
            gamma: None,
        }
    }

    pub fn ellipse() -> Self {
        DetectorSpec::Ellipse {
            shrinkage: default_shrinkage(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DetectorSpec::Entropy => "entropy",
            DetectorSpec::Lasso { .. } => "lasso",
            DetectorSpec::Ocsvm { .. } => "ocsvm",
            DetectorSpec::Ellipse { .. } => "ellipse",
        }
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self, DetectorSpec::Lasso { .. })
    }

    /// `adv` is only used by supervised kinds.
    pub fn fit(&self, clean: &[Vec<f64>], adv: &[Vec<f64>]) -> Result<Detector> {
        match *self {
            DetectorSpec::Entropy => train_entropy(clean).map(Detector::Entropy),
            DetectorSpec::Lasso { lambda } => train_lasso(clean, adv, lambda).map(Detector::Lasso),
            DetectorSpec::Ocsvm { nu, gamma } => train_ocsvm(clean, nu, gamma).map(Detector::Ocsvm),
            DetectorSpec::Ellipse { shrinkage } => train_ellipse(clean, shrinkage).map(Detector::Ellipse),
        }
    }
}

/// A fitted detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Entropy(EntropyDetector),
    Lasso(LassoDetector),
    Ocsvm(OcsvmDetector),
    Ellipse(EllipseDetector),
}

impl Detector {
    /// `p(x) ∈ [0, 1]`.
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        match self {
            Detector::Entropy(d) => d.score(features),
            Detector::Lasso(d) => d.score(features),
            Detector::Ocsvm(d) => d.score(features),
            Detector::Ellipse(d) => d.score(features),
        }
    }

    pub fn score_vector(&self, f: &FeatureVector) -> Result<f64> {
        self.score(&f.values)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Detector::Entropy(_) => "entropy",
            Detector::Lasso(_) => "lasso",
            Detector::Ocsvm(_) => "ocsvm",
            Detector::Ellipse(_) => "ellipse",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `p = 1 − Ē / ln C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDetector {
    pub classes: usize,
}

pub fn train_entropy(clean: &[Vec<f64>]) -> Result<EntropyDetector> {
    if clean.len() < 2 {
        return Err(Error::Input("entropy detector needs at least two clean images".into()));
    }
    let dim = clean[0].len();
    check_rows(clean, dim)?;
    if dim < 5 {
        return Err(Error::Input(format!("feature vectors of length {dim} hold fewer than two classes")));
    }
    Ok(EntropyDetector { classes: dim - 3 })
}

impl EntropyDetector {
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.classes + 3 {
            return Err(Error::Input(format!(
                "feature vector has {} entries, detector expects {}",
                features.len(),
                self.classes + 3
            )));
        }
        Ok((1.0 - features[0] / (self.classes as f64).ln()).clamp(0.0, 1.0))
    }
}

pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const LASSO_MAX_ITERATIONS: usize = 10_000;

/// L1-penalised logistic regression, clean = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoDetector {
    pub lambda: f64,
    pub standardizer: Standardizer,
    #[serde(with = "hex_f64")]
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Largest eigenvalue of the symmetric PSD matrix `g` by power iteration.
fn power_iteration(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = g * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Accelerated proximal gradient (FISTA with gradient restart) on the mean
/// logistic loss plus `λ‖w‖₁`; the intercept is not penalised.
pub fn train_lasso(clean: &[Vec<f64>], adv: &[Vec<f64>], lambda: f64) -> Result<LassoDetector> {
    if clean.is_empty() || adv.is_empty() {
        return Err(Error::Input("LASSO needs clean and attacked examples".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("λ must be finite and non-negative, got {lambda}")));
    }
    let standardizer = Standardizer::fit(clean)?;
    check_rows(adv, standardizer.dim)?;
    let d = standardizer.output_dim();
    let mut rows = standardizer.transform_all(clean)?;
    rows.extend(standardizer.transform_all(adv)?);
    let labels: Vec<f64> = (0..rows.len()).map(|i| if i < clean.len() { 1.0 } else { 0.0 }).collect();
    let n = rows.len();
    // Centring on the pooled mean only shifts the unpenalised intercept.
    let centre: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { rows[i][j] - centre[j] } else { 1.0 });
    let gram = x.transpose() * &x / n as f64;
    let lipschitz = 1.01 * power_iteration(&gram) / 4.0;
    let step = 1.0 / lipschitz.max(f64::MIN_POSITIVE);
    let threshold = lambda * step;
    let y = DVector::from_vec(labels);
    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut probe = theta.clone();
    let mut momentum = 1.0f64;
    for it in 1..=LASSO_MAX_ITERATIONS {
        let margin = &x * &probe;
        let residual = DVector::from_fn(n, |i, _| sigmoid(margin[i]) - y[i]);
        let grad = x.transpose() * residual / n as f64;
        let mut next = &probe - grad * step;
        for j in 0..d {
            next[j] = soft_threshold(next[j], threshold);
        }
        let change = (&next - &theta).amax();
        if !change.is_finite() {
            return Err(Error::Detector("LASSO iterates became non-finite".into()));
        }
        if (&probe - &next).dot(&(&next - &theta)) > 0.0 {
            probe = next.clone();
            momentum = 1.0;
        } else {
            let following = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            probe = &next + (&next - &theta) * ((momentum - 1.0) / following);
            momentum = following;
        }
        theta = next;
        if change < LASSO_TOLERANCE {
            let weights = theta.as_slice()[..d].to_vec();
            let shift: f64 = weights.iter().zip(&centre).map(|(w, c)| w * c).sum();
            return Ok(LassoDetector {
                lambda,
                standardizer,
                weights,
                bias: theta[d] - shift,
                iterations: it,
            });
        }
    }
    Err(Error::NotConverged {
        solver: "LASSO proximal gradient",
        iterations: LASSO_MAX_ITERATIONS,
    })
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

impl LassoDetector {
    pub fn decision(&self, features: &[f64]) -> Result<f64> {
        let z = self.standardizer.transform(features)?;
        Ok(z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(features)?))
    }
}

pub const OCSVM_TOLERANCE: f64 = 1e-6;
pub const OCSVM_MAX_ITERATIONS: usize = 100_000;

/// RBF one-class SVM; `p` is the empirical CDF of the training decision
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmDetector {
    pub nu: f64,
    pub gamma: f64,
    pub standardizer: Standardizer,
    /// Support vectors, row-major `n_sv × d`.
    #[serde(with = "hex_f64")]
    pub support: Vec<f64>,
    #[serde(with = "hex_f64")]
    pub alpha: Vec<f64>,
    pub rho: f64,
    /// Sorted training decision values.
    #[serde(with = "hex_f64")]
    pub calibration: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `1 / (d · median pairwise squared distance)`.
pub fn median_gamma(rows: &[Vec<f64>]) -> f64 {
    let d = rows.first().map_or(1, Vec::len).max(1);
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = match dists.len() {
        0 => 0.0,
        m if m % 2 == 1 => dists[m / 2],
        m => 0.5 * (dists[m / 2 - 1] + dists[m / 2]),
    };
    if median > 0.0 {
        1.0 / (d as f64 * median)
    } else {
        1.0 / d as f64
    }
}

/// Result of the one-class dual `min ½ αᵀKα, 0 ≤ α ≤ 1/(νn), Σα = 1`.
#[derive(Debug, Clone)]
pub struct OcsvmDual {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub gap: f64,
}

/// Pairwise coordinate descent on the maximal violating pair.
pub fn solve_ocsvm_dual(kernel: &DMatrix<f64>, nu: f64) -> Result<OcsvmDual> {
    let n = kernel.nrows();
    let c = 1.0 / (nu * n as f64);
    let mut alpha = vec![0.0; n];
    let mut remaining = 1.0f64;
    for a in alpha.iter_mut() {
        let v = remaining.min(c);
        *a = v;
        remaining -= v;
        if remaining <= 0.0 {
            break;
        }
    }
    let mut grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| kernel[(i, j)] * alpha[j]).sum()).collect();
    let at_upper = |a: f64| a >= c * (1.0 - 1e-12);
    let at_lower = |a: f64| a <= c * 1e-12;
    for it in 0..=OCSVM_MAX_ITERATIONS {
        let mut up: Option<usize> = None;
        let mut down: Option<usize> = None;
        for k in 0..n {
            if !at_upper(alpha[k]) && up.is_none_or(|u| grad[k] < grad[u]) {
                up = Some(k);
            }
            if !at_lower(alpha[k]) && down.is_none_or(|d| grad[k] > grad[d]) {
                down = Some(k);
            }
        }
        let (Some(i), Some(j)) = (up, down) else {
            return Err(Error::Internal("one-class SVM lost feasibility".into()));
        };
        let gap = grad[j] - grad[i];
        if gap < OCSVM_TOLERANCE {
            let rho = ocsvm_rho(&alpha, &grad, c, grad[i], grad[j]);
            return Ok(OcsvmDual {
                alpha,
                rho,
                iterations: it,
                gap,
            });
        }
        let curvature = (kernel[(i, i)] + kernel[(j, j)] - 2.0 * kernel[(i, j)]).max(1e-12);
        let delta = (gap / curvature).min(c - alpha[i]).min(alpha[j]);
        alpha[i] += delta;
        alpha[j] -= delta;
        for (k, g) in grad.iter_mut().enumerate() {
            *g += delta * (kernel[(k, i)] - kernel[(k, j)]);
        }
    }
    Err(Error::NotConverged {
        solver: "one-class SVM",
        iterations: OCSVM_MAX_ITERATIONS,
    })
}

/// Mean gradient over free variables, or the midpoint of the feasible range.
fn ocsvm_rho(alpha: &[f64], grad: &[f64], c: f64, low: f64, high: f64) -> f64 {
    let free: Vec<f64> = alpha
        .iter()
        .zip(grad)
        .filter(|(&a, _)| a > c * 1e-12 && a < c * (1.0 - 1e-12))
        .map(|(_, &g)| g)
        .collect();
    if free.is_empty() {
        0.5 * (low + high)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    }
}

pub fn train_ocsvm(clean: &[Vec<f64>], nu: f64, gamma: Option<f64>) -> Result<OcsvmDetector> {
    if clean.len() < 10 {
        return Err(Error::Input(format!(
            "one-class SVM needs at least 10 clean images, got {}",
            clean.len()
        )));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::Config(format!("ν must lie in (0, 1), got {nu}")));
    }
    let standardizer = Standardizer::fit(clean)?;
    let rows = standardizer.transform_all(clean)?;
    let gamma = match gamma {
        Some(g) if g > 0.0 && g.is_finite() => g,
        Some(g) => return Err(Error::Config(format!("γ must be positive, got {g}"))),
        None => median_gamma(&rows),
    };
    let n = rows.len();
    let kernel = DMatrix::from_fn(n, n, |i, j| (-gamma * sq_dist(&rows[i], &rows[j])).exp());
    let dual = solve_ocsvm_dual(&kernel, nu)?;
    let d = standardizer.output_dim();
    let mut support = Vec::new();
    let mut alpha = Vec::new();
    for (row, &a) in rows.iter().zip(&dual.alpha) {
        if a > 0.0 {
            support.extend_from_slice(row);
            alpha.push(a);
        }
    }
    let mut model = OcsvmDetector {
        nu,
        gamma,
        standardizer,
        support,
        alpha,
        rho: dual.rho,
        calibration: Vec::new(),
        iterations: dual.iterations,
    };
    let mut calibration: Vec<f64> = rows.iter().map(|z| model.decision_standardized(z, d)).collect();
    calibration.sort_by(f64::total_cmp);
    model.calibration = calibration;
    Ok(model)
}

impl OcsvmDetector {
    fn decision_standardized(&self, z: &[f64], d: usize) -> f64 {
        self.support
            .chunks_exact(d)
            .zip(&self.alpha)
            .map(|(sv, a)| a * (-self.gamma * sq_dist(sv, z)).exp())
            .sum::<f64>()
            - self.rho
    }

    /// `Σ αᵢ k(zᵢ, z) − ρ`; positive inside the estimated support.
    pub fn decision(&self, features: &[f64]) -> Result<f64> {
        let z = self.standardizer.transform(features)?;
        Ok(self.decision_standardized(&z, self.standardizer.output_dim()))
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        let d = self.decision(features)?;
        let below = self.calibration.partition_point(|&v| v <= d);
        Ok(below as f64 / self.calibration.len() as f64)
    }
}

/// Gaussian fit with shrinkage; `p` is the empirical survival function of
/// the training Mahalanobis distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseDetector {
    pub shrinkage: f64,
    pub standardizer: Standardizer,
    #[serde(with = "hex_f64")]
    pub mean: Vec<f64>,
    /// Lower Cholesky factor of the shrunk covariance, row-major `d × d`.
    #[serde(with = "hex_f64")]
    pub cholesky: Vec<f64>,
    /// Sorted training Mahalanobis distances.
    #[serde(with = "hex_f64")]
    pub calibration: Vec<f64>,
}

/// Population covariance `Σ + s · tr(Σ)/d · I` of the rows.
pub fn shrunk_covariance(rows: &[Vec<f64>], mean: &[f64], shrinkage: f64) -> DMatrix<f64> {
    let d = mean.len();
    let n = rows.len() as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let c = DVector::from_iterator(d, r.iter().zip(mean).map(|(a, m)| a - m));
        cov += &c * c.transpose();
    }
    cov /= n;
    let ridge = shrinkage * cov.trace() / d as f64;
    for k in 0..d {
        cov[(k, k)] += ridge;
    }
    cov
}

pub fn train_ellipse(clean: &[Vec<f64>], shrinkage: f64) -> Result<EllipseDetector> {
    if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
        return Err(Error::Config(format!("shrinkage must be non-negative, got {shrinkage}")));
    }
    let standardizer = Standardizer::fit(clean)?;
    let d = standardizer.output_dim();
    if clean.len() < d + 2 {
        return Err(Error::Input(format!(
            "ellipse fit in {d} dimensions needs at least {} clean images, got {}",
            d + 2,
            clean.len()
        )));
    }
    let rows = standardizer.transform_all(clean)?;
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect();
    let cov = shrunk_covariance(&rows, &mean, shrinkage);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Detector("covariance is singular after shrinkage".into()))?;
    let l = chol.l();
    let mut model = EllipseDetector {
        shrinkage,
        standardizer,
        mean,
        cholesky: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect(),
        calibration: Vec::new(),
    };
    let mut calibration: Vec<f64> = rows.iter().map(|z| model.mahalanobis_standardized(z)).collect();
    calibration.sort_by(f64::total_cmp);
    model.calibration = calibration;
    Ok(model)
}

impl EllipseDetector {
    /// Forward substitution with the stored factor.
    fn mahalanobis_standardized(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let row = &self.cholesky[i * d..(i + 1) * d];
            let acc: f64 = (0..i).map(|j| row[j] * y[j]).sum();
            y[i] = (z[i] - self.mean[i] - acc) / row[i];
        }
        y.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mahalanobis(&self, features: &[f64]) -> Result<f64> {
        Ok(self.mahalanobis_standardized(&self.standardizer.transform(features)?))
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        let m = self.mahalanobis(features)?;
        let below = self.calibration.partition_point(|&v| v < m);
        Ok((self.calibration.len() - below) as f64 / self.calibration.len() as f64)
    }
}

/// `Vec<f64>` as a hex string of little-endian IEEE-754 bytes.
mod hex_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom("hex block is not a whole number of f64 values"));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
