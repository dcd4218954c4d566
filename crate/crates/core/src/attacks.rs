//! Adversarial attacks on the segmentation model: FGSM, I-FGSM (untargeted
//! and least-likely targeted), the universal stationary-mask attack (SSMM),
//! the dynamic nearest-neighbour attack (DNNM) and an EOT patch attack.
//!
//! Every attack returns images clamped to `[0, 255]`. Budgeted attacks clip
//! against per-pixel `f32` bounds rounded inward, so `‖x_adv − x‖∞ ≤ ε` holds
//! exactly when the difference is evaluated in `f64`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::{unit_weights, ModelParams};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synthdata::{SegSample, CIRCLE};
use crate::tensor::{LabelMap, ProbabilityMap, Tensor};

pub const PIXEL_MAX: f32 = 255.0;

/// `n = min(ε + 4, ⌊1.25 ε⌋)`.
pub fn iteration_count(epsilon: u32) -> usize {
    let by_offset = u64::from(epsilon) + 4;
    let by_ratio = u64::from(epsilon) * 5 / 4;
    by_offset.min(by_ratio) as usize
}

/// Per-pixel least likely class; ties go to the smallest class id.
pub fn least_likely_target(probs: &ProbabilityMap) -> LabelMap {
    let data = probs
        .rows()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p < row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(probs.height(), probs.width(), data).expect("dimensions come from the map")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientAttack {
    Fgsm,
    Ifgsm,
}

/// Configuration of the FGSM family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: GradientAttack,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub targeted: bool,
}

impl AttackConfig {
    pub fn fgsm(epsilon: u32, targeted: bool) -> Self {
        Self {
            kind: GradientAttack::Fgsm,
            epsilon: f64::from(epsilon),
            alpha: f64::from(epsilon),
            iterations: 1,
            targeted,
        }
    }

    /// Step size 1 and the iteration rule of [`iteration_count`].
    pub fn ifgsm(epsilon: u32, targeted: bool) -> Self {
        Self {
            kind: GradientAttack::Ifgsm,
            epsilon: f64::from(epsilon),
            alpha: 1.0,
            iterations: iteration_count(epsilon),
            targeted,
        }
    }

    /// E.g. `FGSM_16`, `I-FGSM-ll_2`.
    pub fn tag(&self) -> String {
        let base = match self.kind {
            GradientAttack::Fgsm => "FGSM",
            GradientAttack::Ifgsm => "I-FGSM",
        };
        let ll = if self.targeted { "-ll" } else { "" };
        format!("{base}{ll}_{}", fmt_number(self.epsilon))
    }

    pub fn validate(&self) -> Result<()> {
        check_budget(self.epsilon, self.alpha, self.iterations, 1)
    }
}

fn fmt_number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn check_budget(epsilon: f64, alpha: f64, iterations: usize, min_iterations: usize) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Config(format!("ε must be positive, got {epsilon}")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("α must be positive, got {alpha}")));
    }
    if iterations < min_iterations {
        return Err(Error::Config(format!(
            "at least {min_iterations} iteration(s) required, got {iterations}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmmConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Confidence above which pixels already on target stop contributing.
    pub tau: f64,
    /// Number of training images `m`.
    pub train_size: usize,
    /// Drives the choice of training images and of the target segmentation.
    pub seed: u64,
}

impl Default for SsmmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1 * 255.0,
            alpha: 0.01 * 255.0,
            iterations: 60,
            tau: 0.75,
            train_size: 20,
            seed: 0,
        }
    }
}

impl SsmmConfig {
    pub fn validate(&self) -> Result<()> {
        check_budget(self.epsilon, self.alpha, self.iterations, 0)?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("τ must lie in (0, 1), got {}", self.tau)));
        }
        if self.train_size == 0 {
            return Err(Error::Config("SSMM needs at least one training image".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnnmConfig {
    /// Class to hide.
    pub class: u8,
    /// Weight on pixels of the hidden class; the rest get `1 − ω`.
    pub omega: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for DnnmConfig {
    fn default() -> Self {
        Self {
            class: CIRCLE,
            omega: 0.9,
            epsilon: 0.1 * 255.0,
            alpha: 0.01 * 255.0,
            iterations: 60,
        }
    }
}

impl DnnmConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        check_budget(self.epsilon, self.alpha, self.iterations, 1)?;
        if usize::from(self.class) >= classes {
            return Err(Error::Config(format!(
                "hidden class {} out of range for {classes} classes",
                self.class
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("ω must lie in [0, 1], got {}", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub alpha: f64,
    /// Random placements averaged per iteration.
    pub placements: usize,
    pub init: f32,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            iterations: 100,
            alpha: 4.0,
            placements: 8,
            init: 127.5,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("patch must be non-empty".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("α must be positive, got {}", self.alpha)));
        }
        if self.placements == 0 {
            return Err(Error::Config("at least one placement per iteration required".into()));
        }
        if !(0.0..=PIXEL_MAX).contains(&self.init) {
            return Err(Error::Config(format!("patch init {} outside [0, 255]", self.init)));
        }
        Ok(())
    }
}

/// Any attack together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AttackSpec {
    Gradient(AttackConfig),
    Ssmm(SsmmConfig),
    Dnnm(DnnmConfig),
    Patch(PatchConfig),
}

impl AttackSpec {
    pub fn tag(&self) -> String {
        match self {
            AttackSpec::Gradient(c) => c.tag(),
            AttackSpec::Ssmm(_) => "SSMM".into(),
            AttackSpec::Dnnm(_) => "DNNM".into(),
            AttackSpec::Patch(_) => "patch".into(),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            AttackSpec::Gradient(c) => c.validate(),
            AttackSpec::Ssmm(c) => c.validate(),
            AttackSpec::Dnnm(c) => c.validate(classes),
            AttackSpec::Patch(c) => c.validate(),
        }
    }

    /// `None` for the patch attack, whose budget is spatial.
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            AttackSpec::Gradient(c) => Some(c.epsilon),
            AttackSpec::Ssmm(c) => Some(c.epsilon),
            AttackSpec::Dnnm(c) => Some(c.epsilon),
            AttackSpec::Patch(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSample {
    pub id: String,
    pub image: Tensor,
    pub spec: AttackSpec,
    /// Target segmentation for targeted attacks.
    pub target: Option<LabelMap>,
}

impl PerturbedSample {
    pub fn tag(&self) -> String {
        self.spec.tag()
    }
}

/// Per-element bounds of the ℓ∞ ball around an image intersected with the
/// pixel range.
#[derive(Debug, Clone)]
pub struct Budget {
    lo: Vec<f32>,
    hi: Vec<f32>,
}

fn round_down(v: f64) -> f32 {
    let f = v as f32;
    if f64::from(f) > v {
        f.next_down()
    } else {
        f
    }
}

fn round_up(v: f64) -> f32 {
    let f = v as f32;
    if f64::from(f) < v {
        f.next_up()
    } else {
        f
    }
}

impl Budget {
    pub fn new(x: &Tensor, epsilon: f64) -> Result<Self> {
        check_pixels(x)?;
        let (lo, hi) = x
            .data()
            .iter()
            .map(|&v| {
                let v = f64::from(v);
                (round_up(v - epsilon).max(0.0), round_down(v + epsilon).min(PIXEL_MAX))
            })
            .unzip();
        Ok(Self { lo, hi })
    }

    pub fn project(&self, t: &mut Tensor) {
        for ((v, &lo), &hi) in t.data_mut().iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(lo, hi);
        }
    }
}

fn check_pixels(x: &Tensor) -> Result<()> {
    let (_, _, c) = x.hwc()?;
    if c != 3 {
        return Err(Error::Input(format!("attacks expect 3-channel images, got {c}")));
    }
    if x.data().iter().any(|v| !(0.0..=PIXEL_MAX).contains(v)) {
        return Err(Error::Input("image pixels must lie in [0, 255]".into()));
    }
    Ok(())
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn checked_grad(model: &ModelParams, x: &Tensor, target: &LabelMap, weights: &Tensor) -> Result<(f64, Tensor)> {
    let lg = model.loss_input_grad(x, target, weights)?;
    if !lg.grad.is_finite() || !lg.loss.is_finite() {
        return Err(Error::Attack("non-finite input gradient".into()));
    }
    Ok((lg.loss, lg.grad))
}

/// Ascent (`direction = 1`) or descent (`-1`) of a fixed-target loss with
/// sign steps clipped to `budget`.
#[allow(clippy::too_many_arguments)]
fn sign_iterations(
    model: &ModelParams,
    clean: &Tensor,
    budget: &Budget,
    target: &LabelMap,
    weights: &Tensor,
    step: f32,
    iterations: usize,
    mut observe: impl FnMut(usize, &Tensor, f64),
) -> Result<Tensor> {
    let mut x = clean.clone();
    for t in 0..iterations {
        let (loss, grad) = checked_grad(model, &x, target, weights)?;
        observe(t, &x, loss);
        for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += step * sign(g);
        }
        budget.project(&mut x);
    }
    Ok(x)
}

fn gradient_attack(
    model: &ModelParams,
    sample: &SegSample,
    cfg: &AttackConfig,
    observe: impl FnMut(usize, &Tensor, f64),
) -> Result<PerturbedSample> {
    cfg.validate()?;
    let budget = Budget::new(&sample.image, cfg.epsilon)?;
    let (h, w, _) = sample.image.hwc()?;
    let (target, direction) = if cfg.targeted {
        (least_likely_target(&model.predict(&sample.image)?), -1.0)
    } else {
        (sample.labels.clone(), 1.0)
    };
    let image = sign_iterations(
        model,
        &sample.image,
        &budget,
        &target,
        &unit_weights(h, w),
        direction * cfg.alpha as f32,
        cfg.iterations,
        observe,
    )?;
    Ok(PerturbedSample {
        id: sample.id.clone(),
        image,
        spec: AttackSpec::Gradient(cfg.clone()),
        target: cfg.targeted.then_some(target),
    })
}

/// Single step of size ε: ascent on the ground-truth loss, or descent on the
/// least-likely-class loss when targeted.
pub fn fgsm(model: &ModelParams, sample: &SegSample, cfg: &AttackConfig) -> Result<PerturbedSample> {
    let single = AttackConfig {
        alpha: cfg.epsilon,
        iterations: 1,
        ..cfg.clone()
    };
    gradient_attack(model, sample, &single, |_, _, _| {})
}

pub fn ifgsm(model: &ModelParams, sample: &SegSample, cfg: &AttackConfig) -> Result<PerturbedSample> {
    gradient_attack(model, sample, cfg, |_, _, _| {})
}

/// As [`ifgsm`], calling `observe(t, x_t, loss(x_t))` before every step.
pub fn ifgsm_observed(
    model: &ModelParams,
    sample: &SegSample,
    cfg: &AttackConfig,
    observe: impl FnMut(usize, &Tensor, f64),
) -> Result<PerturbedSample> {
    gradient_attack(model, sample, cfg, observe)
}

/// Dispatches on [`AttackConfig::kind`].
pub fn run_gradient_attack(model: &ModelParams, sample: &SegSample, cfg: &AttackConfig) -> Result<PerturbedSample> {
    match cfg.kind {
        GradientAttack::Fgsm => fgsm(model, sample, cfg),
        GradientAttack::Ifgsm => ifgsm(model, sample, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalPerturbation {
    /// `H×W×3`.
    pub xi: Tensor,
    pub config: SsmmConfig,
    pub iterations_run: usize,
    pub target: LabelMap,
}

/// Picks `m` training images and, from the remaining ones, the image whose
/// ground truth serves as the common target segmentation.
pub fn ssmm_selection(samples: &[SegSample], cfg: &SsmmConfig) -> Result<(Vec<usize>, LabelMap)> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Input("SSMM needs at least two images to pick a target".into()));
    }
    let m = cfg.train_size.min(samples.len() - 1);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "ssmm-select", 0));
    let mut order = index::sample(&mut rng, samples.len(), samples.len()).into_vec();
    let target = samples[order.pop().expect("non-empty")].labels.clone();
    order.truncate(m);
    order.sort_unstable();
    Ok((order, target))
}

/// Universal noise `ξ` driving all `samples` toward their `targets`.
pub fn ssmm_train(
    model: &ModelParams,
    samples: &[SegSample],
    targets: &[LabelMap],
    cfg: &SsmmConfig,
) -> Result<UniversalPerturbation> {
    ssmm_train_observed(model, samples, targets, cfg, |_, _| {})
}

/// As [`ssmm_train`], calling `observe(t, ξ_t)` after every update.
pub fn ssmm_train_observed(
    model: &ModelParams,
    samples: &[SegSample],
    targets: &[LabelMap],
    cfg: &SsmmConfig,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<UniversalPerturbation> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("SSMM training set is empty".into()))?;
    if targets.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} targets for {} training images",
            targets.len(),
            samples.len()
        )));
    }
    let dims = first.image.dims().to_vec();
    let (h, w, _) = first.image.hwc()?;
    for (s, t) in samples.iter().zip(targets) {
        check_pixels(&s.image)?;
        if s.image.dims() != dims.as_slice() || t.height() != h || t.width() != w {
            return Err(Error::Input(format!("sample {} does not match the common size", s.id)));
        }
    }
    let bound = round_down(cfg.epsilon);
    let step = cfg.alpha as f32;
    let tau = cfg.tau as f32;
    let mut xi = Tensor::zeros(dims.clone());
    let mut mean = vec![0.0f64; xi.len()];
    for t in 0..cfg.iterations {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for (s, target) in samples.iter().zip(targets) {
            let x = perturb(&s.image, &xi);
            let pass = model.forward(&x, true, false)?;
            let probs = pass.probabilities()?;
            let weights = confidence_mask(&probs, target, tau);
            let lg = pass.loss_and_input_grad(target, &weights)?;
            if !lg.grad.is_finite() {
                return Err(Error::Attack(format!("non-finite gradient on {}", s.id)));
            }
            for (m, &g) in mean.iter_mut().zip(lg.grad.data()) {
                *m += f64::from(g);
            }
        }
        for (v, &g) in xi.data_mut().iter_mut().zip(&mean) {
            *v = (*v - step * sign(g as f32)).clamp(-bound, bound);
        }
        observe(t, &xi);
    }
    Ok(UniversalPerturbation {
        xi,
        config: cfg.clone(),
        iterations_run: cfg.iterations,
        target: targets[0].clone(),
    })
}

fn perturb(x: &Tensor, xi: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (v, &d) in out.data_mut().iter_mut().zip(xi.data()) {
        *v = (*v + d).clamp(0.0, PIXEL_MAX);
    }
    out
}

/// Zero weight where the prediction already equals the target with
/// probability above `tau`.
fn confidence_mask(probs: &ProbabilityMap, target: &LabelMap, tau: f32) -> Tensor {
    let data = probs
        .rows()
        .zip(target.data())
        .map(|(row, &y)| {
            let y = usize::from(y);
            let on_target = row.iter().enumerate().all(|(k, &p)| k == y || p < row[y] || (p == row[y] && k > y));
            if on_target && row[y] > tau {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Tensor::new(vec![probs.height(), probs.width()], data).expect("dimensions come from the map")
}

/// `clamp(x + ξ, 0, 255)`, kept inside the ε-ball of the perturbation.
pub fn apply_universal(sample: &SegSample, universal: &UniversalPerturbation) -> Result<PerturbedSample> {
    if !sample.image.same_shape(&universal.xi) {
        return Err(Error::Input(format!(
            "perturbation {:?} does not match image {:?}",
            universal.xi.dims(),
            sample.image.dims()
        )));
    }
    let budget = Budget::new(&sample.image, universal.config.epsilon)?;
    let mut image = perturb(&sample.image, &universal.xi);
    budget.project(&mut image);
    Ok(PerturbedSample {
        id: sample.id.clone(),
        image,
        spec: AttackSpec::Ssmm(universal.config.clone()),
        target: Some(universal.target.clone()),
    })
}

/// Nearest-neighbour retargeting that hides class `o`.
///
/// Pixels predicted as `o` take the prediction of the nearest pixel (squared
/// Euclidean grid distance, ties to the lexicographically smallest position)
/// not predicted as `o`; all other pixels keep their prediction. Weights are
/// `ω` on the hidden pixels and `1 − ω` elsewhere.
pub fn dnnm_target(pred: &LabelMap, o: u8, omega: f64) -> Result<(LabelMap, Tensor)> {
    let (h, w) = (pred.height(), pred.width());
    if pred.data().iter().all(|&c| c == o) {
        return Err(Error::Attack(format!("every pixel is predicted as class {o}")));
    }
    let mut target = pred.clone();
    let mut weights = vec![(1.0 - omega) as f32; h * w];
    for i in 0..h {
        for j in 0..w {
            if pred.get(i, j) != o {
                continue;
            }
            weights[i * w + j] = omega as f32;
            let (ni, nj) = nearest_other(pred, o, i, j);
            target.set(i, j, pred.get(ni, nj));
        }
    }
    Ok((target, Tensor::new(vec![h, w], weights)?))
}

/// Searches square rings of growing Chebyshev radius around `(i, j)`. A ring
/// of radius `r` only holds points at squared distance `≥ r²`, so the search
/// stops once that exceeds the best distance found.
fn nearest_other(pred: &LabelMap, o: u8, i: usize, j: usize) -> (usize, usize) {
    let (h, w) = (pred.height() as isize, pred.width() as isize);
    let (i, j) = (i as isize, j as isize);
    let mut best: Option<(isize, isize, isize)> = None;
    let max_r = h.max(w);
    for r in 1..=max_r {
        if let Some((d, _, _)) = best {
            if r * r > d {
                break;
            }
        }
        for di in -r..=r {
            let ii = i + di;
            if ii < 0 || ii >= h {
                continue;
            }
            let on_edge = di.abs() == r;
            let step = if on_edge { 1 } else { 2 * r };
            let mut dj = -r;
            while dj <= r {
                let jj = j + dj;
                if jj >= 0 && jj < w && pred.get(ii as usize, jj as usize) != o {
                    let cand = (di * di + dj * dj, ii, jj);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
                dj += step;
            }
        }
    }
    let (_, ii, jj) = best.expect("a pixel outside the hidden class exists");
    (ii as usize, jj as usize)
}

pub fn dnnm_attack(model: &ModelParams, sample: &SegSample, cfg: &DnnmConfig) -> Result<PerturbedSample> {
    let probs = model.predict(&sample.image)?;
    cfg.validate(probs.classes())?;
    let budget = Budget::new(&sample.image, cfg.epsilon)?;
    let (target, weights) = dnnm_target(&probs.argmax(), cfg.class, cfg.omega)?;
    let image = sign_iterations(
        model,
        &sample.image,
        &budget,
        &target,
        &weights,
        -(cfg.alpha as f32),
        cfg.iterations,
        |_, _, _| {},
    )?;
    Ok(PerturbedSample {
        id: sample.id.clone(),
        image,
        spec: AttackSpec::Dnnm(cfg.clone()),
        target: Some(target),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `ph×pw×3`.
    pub pixels: Tensor,
    pub config: PatchConfig,
}

impl Patch {
    /// Pastes the patch with its top-left corner at `(row, col)`.
    pub fn apply_at(&self, sample: &SegSample, row: usize, col: usize) -> Result<PerturbedSample> {
        let (h, w, _) = sample.image.hwc()?;
        let (ph, pw) = (self.config.height, self.config.width);
        if row + ph > h || col + pw > w {
            return Err(Error::Input(format!(
                "{ph}×{pw} patch at ({row}, {col}) leaves the {h}×{w} image"
            )));
        }
        Ok(PerturbedSample {
            id: sample.id.clone(),
            image: paste(&sample.image, &self.pixels, row, col),
            spec: AttackSpec::Patch(self.config.clone()),
            target: None,
        })
    }

    /// Location drawn from the patch seed and the sample id.
    pub fn apply(&self, sample: &SegSample) -> Result<PerturbedSample> {
        let (h, w, _) = sample.image.hwc()?;
        let (row, col) = self.location(&sample.id, h, w)?;
        self.apply_at(sample, row, col)
    }

    pub fn location(&self, id: &str, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (self.config.height, self.config.width);
        if ph > h || pw > w {
            return Err(Error::Input(format!("{ph}×{pw} patch exceeds the {h}×{w} image")));
        }
        let mut rng = rng_from_seed(derive_seed(self.config.seed, id, 1));
        Ok((rng.random_range(0..=h - ph), rng.random_range(0..=w - pw)))
    }
}

fn paste(image: &Tensor, patch: &Tensor, row: usize, col: usize) -> Tensor {
    let w = image.dims()[1];
    let pw = patch.dims()[1];
    let mut out = image.clone();
    for (pi, prow) in patch.data().chunks_exact(pw * 3).enumerate() {
        let start = ((row + pi) * w + col) * 3;
        out.data_mut()[start..start + pw * 3].copy_from_slice(prow);
    }
    out
}

/// Sign-gradient ascent of the ground-truth loss on the patch pixels,
/// averaging each step over random (sample, position) placements.
pub fn patch_attack(model: &ModelParams, samples: &[SegSample], cfg: &PatchConfig) -> Result<Patch> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("patch training set is empty".into()))?;
    let (h, w, _) = first.image.hwc()?;
    let (ph, pw) = (cfg.height, cfg.width);
    if ph > h || pw > w {
        return Err(Error::Input(format!("{ph}×{pw} patch exceeds the {h}×{w} image")));
    }
    let weights = unit_weights(h, w);
    let mut patch = Tensor::full(vec![ph, pw, 3], cfg.init);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "patch", 0));
    let mut acc = vec![0.0f64; patch.len()];
    for _ in 0..cfg.iterations {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..cfg.placements {
            let s = &samples[rng.random_range(0..samples.len())];
            if s.image.hwc()? != (h, w, 3) {
                return Err(Error::Input(format!("sample {} does not match the common size", s.id)));
            }
            let (row, col) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
            let x = paste(&s.image, &patch, row, col);
            let (_, grad) = checked_grad(model, &x, &s.labels, &weights)?;
            for pi in 0..ph {
                let src = &grad.data()[((row + pi) * w + col) * 3..][..pw * 3];
                for (a, &g) in acc[pi * pw * 3..][..pw * 3].iter_mut().zip(src) {
                    *a += f64::from(g);
                }
            }
        }
        let step = cfg.alpha as f32;
        for (v, &g) in patch.data_mut().iter_mut().zip(&acc) {
            *v = (*v + step * sign(g as f32)).clamp(0.0, PIXEL_MAX);
        }
    }
    Ok(Patch {
        pixels: patch,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{train, Normalization, TrainConfig};
    use crate::synthdata::{generate_split, DatasetConfig, Split};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn fixture() -> &'static (ModelParams, Vec<SegSample>) {
        static CELL: OnceLock<(ModelParams, Vec<SegSample>)> = OnceLock::new();
        CELL.get_or_init(|| {
            let cfg = DatasetConfig {
                height: 32,
                width: 32,
                train_size: 40,
                val_size: 0,
                seed: 11,
                ..DatasetConfig::default()
            };
            let samples = generate_split(&cfg, Split::Train).unwrap();
            let tc = TrainConfig {
                epochs: 60,
                learning_rate: 0.1,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let model = train(&samples, cfg.classes, &tc).unwrap();
            (model, samples)
        })
    }

    fn loss(model: &ModelParams, x: &Tensor, target: &LabelMap) -> f64 {
        let (h, w, _) = x.hwc().unwrap();
        model.loss_input_grad(x, target, &unit_weights(h, w)).unwrap().loss
    }

    #[test]
    fn iteration_rule() {
        assert_eq!(iteration_count(4), 5);
        assert_eq!(iteration_count(8), 10);
        assert_eq!(iteration_count(16), 20);
        assert_eq!(iteration_count(2), 2);
        assert_eq!(iteration_count(1), 1);
        assert_eq!(iteration_count(20), 24);
    }

    #[test]
    fn tags() {
        assert_eq!(AttackConfig::fgsm(16, false).tag(), "FGSM_16");
        assert_eq!(AttackConfig::ifgsm(2, true).tag(), "I-FGSM-ll_2");
        assert_eq!(AttackSpec::Ssmm(SsmmConfig::default()).tag(), "SSMM");
    }

    #[test]
    fn least_likely_simple_cases() {
        let p = ProbabilityMap::new(Tensor::new(vec![1, 2, 2], vec![0.9, 0.1, 0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(least_likely_target(&p).data(), &[1, 0]);
        assert_eq!(least_likely_target(&ProbabilityMap::uniform(2, 2, 4)).data(), &[0; 4]);
    }

    fn prob_strategy() -> impl Strategy<Value = ProbabilityMap> {
        (1usize..5, 1usize..5, 2usize..6).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(0u8..4, h * w * c).prop_map(move |raw| {
                let mut data: Vec<f32> = raw.iter().map(|&v| f32::from(v) + 1.0).collect();
                for row in data.chunks_exact_mut(c) {
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                ProbabilityMap::new(Tensor::new(vec![h, w, c], data).unwrap()).unwrap()
            })
        })
    }

    fn brute_nearest(pred: &LabelMap, o: u8, i: usize, j: usize) -> (usize, usize) {
        let mut best = None;
        for ii in 0..pred.height() {
            for jj in 0..pred.width() {
                if pred.get(ii, jj) == o {
                    continue;
                }
                let d = (ii as i64 - i as i64).pow(2) + (jj as i64 - j as i64).pow(2);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, ii, jj));
                }
            }
        }
        let (_, ii, jj) = best.unwrap();
        (ii, jj)
    }

    proptest! {
        #[test]
        fn least_likely_matches_scan(p in prob_strategy()) {
            let ll = least_likely_target(&p);
            for (row, &got) in p.rows().zip(ll.data()) {
                let min = row.iter().cloned().fold(f32::INFINITY, f32::min);
                let first = row.iter().position(|&v| v == min).unwrap();
                prop_assert_eq!(usize::from(got), first);
            }
        }

        #[test]
        fn dnnm_target_matches_brute_force(
            data in prop::collection::vec(prop_oneof![3 => Just(1u8), 1 => 0u8..4], 256),
            omega in 0.0f64..=1.0,
        ) {
            let pred = LabelMap::new(16, 16, data).unwrap();
            prop_assume!(pred.data().iter().any(|&c| c != 1));
            let (target, weights) = dnnm_target(&pred, 1, omega).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    if pred.get(i, j) == 1 {
                        let (ni, nj) = brute_nearest(&pred, 1, i, j);
                        prop_assert_eq!(target.get(i, j), pred.get(ni, nj));
                        prop_assert_eq!(weights.data()[i * 16 + j], omega as f32);
                    } else {
                        prop_assert_eq!(target.get(i, j), pred.get(i, j));
                        prop_assert_eq!(weights.data()[i * 16 + j], (1.0 - omega) as f32);
                    }
                }
            }
        }

        #[test]
        fn budget_projection_is_exact(
            pixels in prop::collection::vec(0.0f32..=255.0, 12),
            noise in prop::collection::vec(-400.0f32..400.0, 12),
            eps in prop_oneof![Just(25.5f64), Just(2.55), 0.01f64..40.0],
        ) {
            let x = Tensor::new(vec![2, 2, 3], pixels).unwrap();
            let mut y = x.clone();
            for (v, n) in y.data_mut().iter_mut().zip(&noise) {
                *v += n;
            }
            Budget::new(&x, eps).unwrap().project(&mut y);
            prop_assert!(y.linf_distance(&x).unwrap() <= eps);
            prop_assert!(y.data().iter().all(|v| (0.0..=255.0).contains(v)));
        }
    }

    #[test]
    fn dnnm_tie_break_prefers_smallest_position() {
        let mut pred = LabelMap::new(3, 3, vec![0, 2, 0, 3, 1, 0, 0, 0, 0]).unwrap();
        let (target, _) = dnnm_target(&pred, 1, 0.9).unwrap();
        assert_eq!(target.get(1, 1), 2);
        pred.set(0, 1, 1);
        let (target, _) = dnnm_target(&pred, 1, 0.9).unwrap();
        assert_eq!(target.get(1, 1), 3);
        assert_eq!(target.get(0, 1), 0);
    }

    #[test]
    fn dnnm_without_hidden_class_keeps_prediction() {
        let pred = LabelMap::new(2, 2, vec![0, 2, 3, 0]).unwrap();
        let (target, weights) = dnnm_target(&pred, 1, 0.9).unwrap();
        assert_eq!(target, pred);
        assert!(weights.data().iter().all(|&v| v == (1.0f64 - 0.9) as f32));
        assert!(matches!(dnnm_target(&LabelMap::filled(2, 2, 1), 1, 0.5), Err(Error::Attack(_))));
    }

    #[test]
    fn zero_gradient_model_leaves_image_unchanged() {
        let (_, samples) = fixture();
        let model = ModelParams::init(4, 0, Normalization::default()).unwrap();
        for targeted in [false, true] {
            let adv = fgsm(&model, &samples[0], &AttackConfig::fgsm(16, targeted)).unwrap();
            assert_eq!(adv.image, samples[0].image);
        }
    }

    #[test]
    fn fgsm_respects_budget_and_range() {
        let (model, samples) = fixture();
        for s in samples.iter().take(4) {
            for targeted in [false, true] {
                let adv = fgsm(model, s, &AttackConfig::fgsm(16, targeted)).unwrap();
                assert!(adv.image.linf_distance(&s.image).unwrap() <= 16.0);
                assert!(adv.image.data().iter().all(|v| (0.0..=255.0).contains(v)));
                assert_eq!(adv.target.is_some(), targeted);
            }
        }
    }

    #[test]
    fn single_step_ifgsm_equals_fgsm() {
        let (model, samples) = fixture();
        for targeted in [false, true] {
            let f = fgsm(model, &samples[1], &AttackConfig::fgsm(8, targeted)).unwrap();
            let cfg = AttackConfig {
                alpha: 8.0,
                iterations: 1,
                ..AttackConfig::ifgsm(8, targeted)
            };
            let i = ifgsm(model, &samples[1], &cfg).unwrap();
            assert_eq!(f.image, i.image);
        }
    }

    #[test]
    fn ifgsm_iterates_stay_in_budget() {
        let (model, samples) = fixture();
        let cfg = AttackConfig::ifgsm(4, false);
        let mut seen = 0;
        let adv = ifgsm_observed(model, &samples[2], &cfg, |_, x, _| {
            seen += 1;
            assert!(x.linf_distance(&samples[2].image).unwrap() <= 4.0);
        })
        .unwrap();
        assert_eq!(seen, 5);
        assert!(adv.image.linf_distance(&samples[2].image).unwrap() <= 4.0);
    }

    #[test]
    fn untargeted_fgsm_does_not_lower_mean_loss() {
        let (model, samples) = fixture();
        let mut diff = 0.0;
        for s in samples {
            let adv = fgsm(model, s, &AttackConfig::fgsm(8, false)).unwrap();
            diff += loss(model, &adv.image, &s.labels) - loss(model, &s.image, &s.labels);
        }
        assert!(diff / samples.len() as f64 >= -1e-3, "{diff}");
    }

    #[test]
    fn targeted_ifgsm_lowers_mean_target_loss() {
        let (model, samples) = fixture();
        let mut before = 0.0;
        let mut after = 0.0;
        for s in samples.iter().take(8) {
            let adv = ifgsm(model, s, &AttackConfig::ifgsm(8, true)).unwrap();
            let t = adv.target.as_ref().unwrap();
            before += loss(model, &s.image, t);
            after += loss(model, &adv.image, t);
        }
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (model, samples) = fixture();
        let mut bad = samples[0].clone();
        bad.image.data_mut()[0] = 300.0;
        assert!(matches!(fgsm(model, &bad, &AttackConfig::fgsm(4, false)), Err(Error::Input(_))));
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::fgsm(4, false)
        };
        assert!(matches!(fgsm(model, &samples[0], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn ssmm_zero_iterations_give_zero_noise() {
        let (model, samples) = fixture();
        let cfg = SsmmConfig {
            iterations: 0,
            ..SsmmConfig::default()
        };
        let targets = vec![samples[5].labels.clone(); 2];
        let u = ssmm_train(model, &samples[..2], &targets, &cfg).unwrap();
        assert!(u.xi.data().iter().all(|&v| v == 0.0));
        let adv = apply_universal(&samples[0], &u).unwrap();
        assert_eq!(adv.image, samples[0].image);
    }

    #[test]
    fn ssmm_noise_stays_in_budget_and_moves_toward_target() {
        let (model, samples) = fixture();
        let cfg = SsmmConfig {
            iterations: 15,
            train_size: 6,
            ..SsmmConfig::default()
        };
        let (idx, target) = ssmm_selection(samples, &cfg).unwrap();
        assert_eq!(idx.len(), 6);
        assert!(!idx.iter().any(|&i| samples[i].labels == target));
        let train: Vec<SegSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let targets = vec![target.clone(); train.len()];
        let mut norms = Vec::new();
        let u = ssmm_train_observed(model, &train, &targets, &cfg, |_, xi| {
            norms.push(xi.data().iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs())));
        })
        .unwrap();
        assert!(norms.iter().all(|&n| n <= 25.5));
        let agree = |img: &Tensor| model.predict(img).unwrap().argmax().agreement(&target).unwrap();
        let mut gain = 0.0;
        for s in &train {
            let adv = apply_universal(s, &u).unwrap();
            assert!(adv.image.linf_distance(&s.image).unwrap() <= 25.5);
            gain += agree(&adv.image) - agree(&s.image);
        }
        assert!(gain > 0.0, "{gain}");
    }

    #[test]
    fn ssmm_rejects_empty_and_mismatched_sets() {
        let (model, samples) = fixture();
        let cfg = SsmmConfig::default();
        assert!(matches!(ssmm_train(model, &[], &[], &cfg), Err(Error::Input(_))));
        assert!(ssmm_train(model, &samples[..2], &[samples[0].labels.clone()], &cfg).is_err());
        let u = UniversalPerturbation {
            xi: Tensor::zeros(vec![4, 4, 3]),
            config: cfg,
            iterations_run: 0,
            target: LabelMap::filled(4, 4, 0),
        };
        assert!(matches!(apply_universal(&samples[0], &u), Err(Error::Input(_))));
    }

    #[test]
    fn confidence_mask_zeroes_confident_on_target_pixels() {
        let p = ProbabilityMap::new(
            Tensor::new(vec![1, 3, 2], vec![0.9, 0.1, 0.6, 0.4, 0.1, 0.9]).unwrap(),
        )
        .unwrap();
        let t = LabelMap::new(1, 3, vec![0, 0, 0]).unwrap();
        assert_eq!(confidence_mask(&p, &t, 0.75).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn dnnm_respects_budget_and_shrinks_hidden_class() {
        let (model, samples) = fixture();
        let cfg = DnnmConfig {
            iterations: 20,
            ..DnnmConfig::default()
        };
        let mut before = 0;
        let mut after = 0;
        for s in samples.iter().take(6) {
            let pred = model.predict(&s.image).unwrap().argmax();
            let adv = dnnm_attack(model, s, &cfg).unwrap();
            assert!(adv.image.linf_distance(&s.image).unwrap() <= cfg.epsilon);
            let adv_pred = model.predict(&adv.image).unwrap().argmax();
            before += pred.data().iter().filter(|&&c| c == CIRCLE).count();
            after += adv_pred.data().iter().filter(|&&c| c == CIRCLE).count();
        }
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn patch_with_zero_iterations_is_gray_and_paste_is_local() {
        let (model, samples) = fixture();
        let cfg = PatchConfig {
            height: 8,
            width: 10,
            iterations: 0,
            ..PatchConfig::default()
        };
        let patch = patch_attack(model, samples, &cfg).unwrap();
        assert!(patch.pixels.data().iter().all(|&v| v == 127.5));
        let s = &samples[0];
        let adv = patch.apply_at(s, 3, 20).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..3 {
                    let k = (i * 32 + j) * 3 + c;
                    let inside = (3..11).contains(&i) && (20..30).contains(&j);
                    let expected = if inside { 127.5 } else { s.image.data()[k] };
                    assert_eq!(adv.image.data()[k], expected);
                }
            }
        }
        assert!(patch.apply_at(s, 30, 0).is_err());
        let (r, c) = patch.location(&s.id, 32, 32).unwrap();
        assert!(r + 8 <= 32 && c + 10 <= 32);
        assert_eq!(patch.apply(s).unwrap(), patch.apply(s).unwrap());
    }

    #[test]
    fn patch_training_raises_loss() {
        let (model, samples) = fixture();
        let cfg = PatchConfig {
            height: 16,
            width: 16,
            iterations: 10,
            ..PatchConfig::default()
        };
        let patch = patch_attack(model, samples, &cfg).unwrap();
        assert!(patch.pixels.data().iter().all(|v| (0.0..=255.0).contains(v)));
        let gray = Patch {
            pixels: Tensor::full(vec![16, 16, 3], 127.5),
            config: cfg.clone(),
        };
        let mut trained = 0.0;
        let mut baseline = 0.0;
        for s in samples.iter().take(8) {
            trained += loss(model, &patch.apply(s).unwrap().image, &s.labels);
            baseline += loss(model, &gray.apply(s).unwrap().image, &s.labels);
        }
        assert!(trained > baseline, "{baseline} -> {trained}");
        let big = PatchConfig {
            height: 40,
            ..cfg
        };
        assert!(matches!(patch_attack(model, samples, &big), Err(Error::Input(_))));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let specs = vec![
            AttackSpec::Gradient(AttackConfig::ifgsm(2, true)),
            AttackSpec::Ssmm(SsmmConfig::default()),
            AttackSpec::Dnnm(DnnmConfig::default()),
            AttackSpec::Patch(PatchConfig::default()),
        ];
        let json = serde_json::to_string(&specs).unwrap();
        let back: Vec<AttackSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, specs);
    }
}
