//! Pixel-wise dispersion measures and the image-level feature vector built
//! from them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ProbabilityMap, Tensor};

/// Entropy (natural log), variation ratio and probability margin per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionMaps {
    pub entropy: Tensor,
    pub variation_ratio: Tensor,
    pub margin: Tensor,
}

/// `(E, V, M)` of a single probability row, clamped to their ranges.
pub fn pixel_dispersion(row: &[f32]) -> (f64, f64, f64) {
    let c = row.len() as f64;
    let mut entropy = 0.0;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in row {
        let p = f64::from(p);
        if p > 0.0 {
            entropy -= p * p.ln();
        }
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    if row.len() < 2 {
        second = 0.0;
    }
    let v = (1.0 - first).clamp(0.0, 1.0 - 1.0 / c);
    let m = (v + second).clamp(0.0, 1.0);
    (entropy.clamp(0.0, c.ln()), v, m)
}

/// Fails if `probs` does not hold normalised rows. Maps built through
/// [`ProbabilityMap::new`] always pass.
pub fn dispersion_maps(probs: &ProbabilityMap) -> Result<DispersionMaps> {
    validate(probs)?;
    let n = probs.pixels();
    let (mut e, mut v, mut m) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for row in probs.rows() {
        let (pe, pv, pm) = pixel_dispersion(row);
        e.push(pe as f32);
        v.push(pv as f32);
        m.push(pm as f32);
    }
    let dims = vec![probs.height(), probs.width()];
    Ok(DispersionMaps {
        entropy: Tensor::new(dims.clone(), e)?,
        variation_ratio: Tensor::new(dims.clone(), v)?,
        margin: Tensor::new(dims, m)?,
    })
}

fn validate(probs: &ProbabilityMap) -> Result<()> {
    ProbabilityMap::new(probs.tensor().clone()).map(|_| ())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleLabel {
    Clean,
    Attacked,
}

impl fmt::Display for SampleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleLabel::Clean => "clean",
            SampleLabel::Attacked => "attacked",
        })
    }
}

impl FromStr for SampleLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(SampleLabel::Clean),
            "attacked" => Ok(SampleLabel::Attacked),
            other => Err(Error::Format(format!("unknown sample label {other:?}"))),
        }
    }
}

/// `(Ē, V̄, M̄, P(0), …, P(C−1))` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub label: SampleLabel,
    /// Attack tag, `clean` for unperturbed images.
    pub attack: String,
    pub values: Vec<f64>,
}

pub const CLEAN_TAG: &str = "clean";

impl FeatureVector {
    pub fn classes(&self) -> usize {
        self.values.len() - 3
    }

    pub fn mean_entropy(&self) -> f64 {
        self.values[0]
    }

    pub fn mean_variation_ratio(&self) -> f64 {
        self.values[1]
    }

    pub fn mean_margin(&self) -> f64 {
        self.values[2]
    }

    pub fn class_means(&self) -> &[f64] {
        &self.values[3..]
    }
}

/// Spatial means of the dispersion measures followed by the per-class mean
/// probabilities. Accumulated in `f64`.
pub fn feature_values(probs: &ProbabilityMap) -> Result<Vec<f64>> {
    validate(probs)?;
    let c = probs.classes();
    let mut sums = vec![0.0f64; 3 + c];
    for row in probs.rows() {
        let (e, v, m) = pixel_dispersion(row);
        sums[0] += e;
        sums[1] += v;
        sums[2] += m;
        for (s, &p) in sums[3..].iter_mut().zip(row) {
            *s += f64::from(p);
        }
    }
    let n = probs.pixels() as f64;
    sums.iter_mut().for_each(|s| *s /= n);
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("feature vector is not finite".into()));
    }
    Ok(sums)
}

pub fn feature_vector(probs: &ProbabilityMap, id: &str, label: SampleLabel, attack: &str) -> Result<FeatureVector> {
    Ok(FeatureVector {
        id: id.to_string(),
        label,
        attack: attack.to_string(),
        values: feature_values(probs)?,
    })
}

fn sort_key(f: &FeatureVector) -> (&str, SampleLabel, &str) {
    (&f.id, f.label, &f.attack)
}

/// Writes `id,label,attack,E,V,M,P0..P{C-1}`, rows ordered by id.
pub fn write_features(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let classes = features.first().map_or(0, FeatureVector::classes);
    if features.iter().any(|f| f.classes() != classes) {
        return Err(Error::Input("feature vectors disagree on the class count".into()));
    }
    let mut sorted: Vec<&FeatureVector> = features.iter().collect();
    sorted.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["id", "label", "attack", "E", "V", "M"].map(String::from).to_vec();
    header.extend((0..classes).map(|k| format!("P{k}")));
    w.write_record(&header)?;
    for f in sorted {
        let mut rec = vec![f.id.clone(), f.label.to_string(), f.attack.clone()];
        rec.extend(f.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 6 || &header[0] != "id" || &header[3] != "E" {
        return Err(Error::Format(format!("{} is not a feature table", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(3)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad feature value {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureVector {
            id: rec[0].to_string(),
            label: rec[1].parse()?,
            attack: rec[2].to_string(),
            values,
        });
    }
    Ok(out)
}
