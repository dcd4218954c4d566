//! Dense row-major `f32` tensors and the two image-shaped domain types built on
//! them: integer label maps and per-pixel probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "tensor dims {dims:?} require {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: Vec<usize>, value: f32) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(height, width, channels)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::Config(format!(
                "expected an H×W×C tensor, got dims {other:?}"
            ))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    /// Adds `other * scale` in place.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Largest absolute elementwise difference, evaluated in `f64` so the
    /// comparison against an `f32` budget is exact.
    pub fn linf_distance(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Input(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max))
    }
}

/// Per-pixel class ids, row-major `H×W`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Config(format!(
                "label map {height}×{width} requires {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, class: u8) {
        self.data[i * self.width + j] = class;
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| usize::from(c) >= classes) {
            Some(c) => Err(Error::Input(format!(
                "label {c} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Fraction of pixels where the two maps agree.
    pub fn agreement(&self, other: &LabelMap) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Input("label map shape mismatch".into()));
        }
        let same = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.data.len() as f64)
    }
}

/// Softmax output `f(x; w)` of shape `H×W×C`; every pixel row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Tensor);

/// Maximum deviation of a pixel's probability row from unit sum.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

impl ProbabilityMap {
    /// Wraps a tensor after checking shape, range and row normalisation.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, _, c) = tensor.hwc()?;
        if c == 0 {
            return Err(Error::Input("probability map without classes".into()));
        }
        for row in tensor.data().chunks_exact(c) {
            let sum: f64 = row.iter().map(|&p| f64::from(p)).sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE
            {
                return Err(Error::Input(format!(
                    "probability row {row:?} is not normalised"
                )));
            }
        }
        Ok(Self(tensor))
    }

    /// Wraps a tensor produced by a softmax without re-validating it.
    pub(crate) fn from_softmax(tensor: Tensor) -> Self {
        Self(tensor)
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self(Tensor::full(
            vec![height, width, classes],
            1.0 / classes as f32,
        ))
    }

    pub fn height(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn classes(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Probability row of pixel `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> &[f32] {
        let c = self.classes();
        let start = (i * self.width() + j) * c;
        &self.0.data()[start..start + c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.0.data().chunks_exact(self.classes())
    }

    /// Predicted label map `ŷ(x)`; ties go to the smallest class id.
    pub fn argmax(&self) -> LabelMap {
        let data = self
            .rows()
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height(),
            width: self.width(),
            data,
        }
    }
}
