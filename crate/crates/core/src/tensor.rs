//! Dense row-major `f32` tensors and per-stage representation sets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-example shape of a stage output: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Chw {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Chw { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_positive(&self) -> bool {
        self.c > 0 && self.h > 0 && self.w > 0
    }
}

impl From<[usize; 3]> for Chw {
    fn from([c, h, w]: [usize; 3]) -> Self {
        Chw { c, h, w }
    }
}

impl From<Chw> for [usize; 3] {
    fn from(s: Chw) -> Self {
        [s.c, s.h, s.w]
    }
}

impl fmt::Display for Chw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<f32> {
        self.offset(index).map(|o| self.data[o])
    }

    /// Rank-1 view of the same elements in row-major order.
    pub fn flatten(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Leading (batch) dimension; 1 for scalars.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Errors on the first NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Normalizes a batch to `(n, C, H, W)`. Rank-4 input is kept as is;
    /// lower ranks fold every trailing dimension into channels, giving
    /// `(n, C, 1, 1)` for vector features.
    pub fn into_nchw(self) -> Result<Tensor> {
        match self.shape.len() {
            4 => Ok(self),
            1..=3 => {
                let n = self.shape[0];
                let c: usize = self.shape[1..].iter().product();
                Tensor::new(vec![n, c, 1, 1], self.data)
            }
            r => Err(Error::Shape(format!(
                "expected a batch of rank 1-4, got rank {r}"
            ))),
        }
    }

    /// Per-example shape of an `(n, C, H, W)` batch.
    pub fn example_shape(&self) -> Result<Chw> {
        match self.shape[..] {
            [_, c, h, w] => Ok(Chw::new(c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected (n, C, H, W), got {:?}",
                self.shape
            ))),
        }
    }
}

/// Stage outputs of one model over a single evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub model: String,
    n: usize,
    stages: BTreeMap<usize, Tensor>,
}

impl RepresentationSet {
    pub fn new(model: impl Into<String>, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::DegenerateInput(format!(
                "representation sets need n >= 2 examples, got {n}"
            )));
        }
        Ok(RepresentationSet {
            model: model.into(),
            n,
            stages: BTreeMap::new(),
        })
    }

    /// Adds a stage dump, normalizing it to `(n, C, H, W)`.
    pub fn insert(&mut self, stage: usize, rep: Tensor) -> Result<()> {
        let rep = rep.into_nchw()?;
        if rep.batch() != self.n {
            return Err(Error::Shape(format!(
                "stage {stage} has n={}, representation set has n={}",
                rep.batch(),
                self.n
            )));
        }
        rep.check_finite()?;
        self.stages.insert(stage, rep);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, stage: usize) -> Option<&Tensor> {
        self.stages.get(&stage)
    }

    pub fn stage_ids(&self) -> Vec<usize> {
        self.stages.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.stages.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}
