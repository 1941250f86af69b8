//! Linear centered kernel alignment between stage representations.
//!
//! Each example's `(C, H, W)` block is flattened row-major into one feature
//! row, the linear Gram matrix `K = X Xᵀ` is double-centered, and similarity
//! is the normalized HSIC
//!
//! ```text
//! S = HSIC(K, L) / sqrt(HSIC(K, K) · HSIC(L, L)),  HSIC(K, L) = tr(K'L') / (n-1)²
//! ```
//!
//! Arithmetic is `f64`. Every inner product accumulates sequentially over the
//! feature index, so results are bit-reproducible regardless of how rows are
//! scheduled across threads.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RepresentationSet, Tensor};

/// A centered Gram matrix whose self-HSIC is this small relative to the raw
/// Gram's energy is treated as identically zero.
const ZERO_VARIANCE_RATIO: f64 = 1e-24;

/// `n × p` example-by-feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if n * p != data.len() || p == 0 {
            return Err(Error::Shape(format!(
                "feature matrix {n}x{p} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Features { n, p, data })
    }

    /// Flattens every example of a batch (leading axis) into one row.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() == 0 {
            return Err(Error::Shape("scalar has no example axis".into()));
        }
        let n = t.batch();
        let p = t.numel() / n;
        Features::new(n, p, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }
}

/// Symmetric `n × n` matrix of pairwise example inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `H K H` with `H = I - J/n`, computed by subtracting row and column
    /// means and adding back the grand mean.
    pub fn centered(&self) -> GramMatrix {
        let n = self.n;
        let nf = n as f64;
        let row_means: Vec<f64> = (0..n)
            .map(|i| self.values[i * n..(i + 1) * n].iter().sum::<f64>() / nf)
            .collect();
        let col_means: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| self.values[i * n + j]).sum::<f64>() / nf)
            .collect();
        let grand = row_means.iter().sum::<f64>() / nf;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = self.values[i * n + j] - row_means[i] - col_means[j] + grand;
            }
        }
        GramMatrix { n, values }
    }

    /// Frobenius inner product `tr(A Bᵀ)`, equal to `tr(A B)` for symmetric operands.
    fn frobenius(&self, other: &GramMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn gram_linear(x: &Features) -> Result<GramMatrix> {
    let n = x.n;
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "Gram centering needs n >= 2 examples, got {n}"
        )));
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| dot(x.row(i), x.row(j))).collect())
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let j = i + k;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(GramMatrix { n, values })
}

/// Biased HSIC estimate `tr(K'L') / (n-1)²` of two already-centered Gram matrices.
pub fn hsic(k_centered: &GramMatrix, l_centered: &GramMatrix) -> f64 {
    let m = (k_centered.n - 1) as f64;
    k_centered.frobenius(l_centered) / (m * m)
}

/// Centered Gram matrix plus the quantities needed to normalize against it.
#[derive(Debug, Clone)]
struct CenteredKernel {
    centered: GramMatrix,
    self_hsic: f64,
}

impl CenteredKernel {
    fn new(x: &Features, label: &str) -> Result<Self> {
        let gram = gram_linear(x)?;
        let centered = gram.centered();
        let self_hsic = hsic(&centered, &centered);
        let m = (x.n - 1) as f64;
        let raw_energy = gram.frobenius(&gram) / (m * m);
        if self_hsic <= ZERO_VARIANCE_RATIO * raw_energy {
            return Err(Error::UndefinedSimilarity(format!(
                "{label} has zero variance across examples"
            )));
        }
        Ok(CenteredKernel { centered, self_hsic })
    }

    fn alignment(&self, other: &CenteredKernel) -> f64 {
        let s = hsic(&self.centered, &other.centered) / (self.self_hsic * other.self_hsic).sqrt();
        s.clamp(0.0, 1.0)
    }
}

/// Linear CKA of two feature matrices with the same number of examples.
/// Feature widths may differ.
pub fn cka_features(x: &Features, y: &Features) -> Result<f64> {
    if x.n != y.n {
        return Err(Error::Shape(format!(
            "example counts differ: x has n={}, y has n={}",
            x.n, y.n
        )));
    }
    let k = CenteredKernel::new(x, "x")?;
    let l = CenteredKernel::new(y, "y")?;
    Ok(k.alignment(&l))
}

/// Linear CKA of two batches; every example is flattened to one feature row.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    cka_features(&Features::from_tensor(x)?, &Features::from_tensor(y)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    /// Stage i of one model against stage i of the other.
    Same,
    /// Every stage of one model against every stage of the other.
    Cross,
}

impl FromStr for SharingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "same" | "same-stage" => Ok(SharingMode::Same),
            "cross" | "cross-stage" => Ok(SharingMode::Cross),
            other => Err(format!("unknown mode '{other}', expected same or cross")),
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingMode::Same => "same",
            SharingMode::Cross => "cross",
        })
    }
}

/// Grid of similarity scores; `None` marks pairs that were not computed
/// (the off-diagonal of a same-stage matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub stages_a: Vec<usize>,
    pub stages_b: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    pub fn get(&self, stage_a: usize, stage_b: usize) -> Option<f64> {
        let i = self.stages_a.iter().position(|&s| s == stage_a)?;
        let j = self.stages_b.iter().position(|&s| s == stage_b)?;
        self.values.get(i)?.get(j).copied().flatten()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("similarity matrix serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_json(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if m.values.len() != m.stages_a.len()
            || m.values.iter().any(|row| row.len() != m.stages_b.len())
        {
            return Err(Error::Shape(format!(
                "{}: values grid does not match stage lists",
                path.display()
            )));
        }
        Ok(m)
    }

    /// CSV with a header of target stages and one row per donor stage;
    /// uncomputed cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["stage".to_string()];
        header.extend(self.stages_b.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (sa, row) in self.stages_a.iter().zip(&self.values) {
            let mut rec = vec![sa.to_string()];
            rec.extend(row.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Similarity between the stages of two representation sets built from the
/// same evaluation batch.
pub fn similarity_matrix(
    a: &RepresentationSet,
    b: &RepresentationSet,
    mode: SharingMode,
) -> Result<SimilarityMatrix> {
    if a.n() != b.n() {
        return Err(Error::Shape(format!(
            "example counts differ: {} has n={}, {} has n={}",
            a.model,
            a.n(),
            b.model,
            b.n()
        )));
    }
    let stages_a = a.stage_ids();
    let stages_b = b.stage_ids();
    if mode == SharingMode::Same && stages_a.len() != stages_b.len() {
        return Err(Error::Shape(format!(
            "same-stage mode needs equal stage counts, {} has {} and {} has {}",
            a.model,
            stages_a.len(),
            b.model,
            stages_b.len()
        )));
    }

    let kernels = |set: &RepresentationSet, ids: &[usize]| -> Result<Vec<CenteredKernel>> {
        ids.par_iter()
            .map(|&id| {
                let rep = set.get(id).expect("stage id listed by the set");
                CenteredKernel::new(
                    &Features::from_tensor(rep)?,
                    &format!("{} stage {id}", set.model),
                )
            })
            .collect()
    };
    let ka = kernels(a, &stages_a)?;
    let kb = kernels(b, &stages_b)?;

    let values = ka
        .par_iter()
        .enumerate()
        .map(|(i, k)| {
            kb.iter()
                .enumerate()
                .map(|(j, l)| match mode {
                    SharingMode::Cross => Some(k.alignment(l)),
                    SharingMode::Same if i == j => Some(k.alignment(l)),
                    SharingMode::Same => None,
                })
                .collect()
        })
        .collect();

    Ok(SimilarityMatrix {
        stages_a,
        stages_b,
        values,
    })
}
