//! Per-stage cost metrics, prefix memory savings, Pearson correlation and
//! the piecewise similarity-to-accuracy estimator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, StageOp};

pub const BYTES_PER_ELEMENT: u64 = 4;
/// Similarity below which merged accuracy was observed to collapse.
pub const DEFAULT_THRESHOLD: f64 = 0.4;
/// Accuracy observed below [`DEFAULT_THRESHOLD`].
pub const DEFAULT_FLOOR: f64 = 0.031;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage_id: usize,
    /// Multiply-accumulates count as two operations.
    pub flops: u64,
    pub rep_size_bytes: u64,
    pub param_count: u64,
    pub param_bytes: u64,
}

pub fn stage_metrics(g: &ModelGraph) -> Vec<StageMetrics> {
    g.stages
        .iter()
        .map(|s| {
            let out = s.out_shape;
            let out_elems = out.numel() as u64;
            let (flops, params) = match s.op {
                StageOp::Conv2d {
                    c_in,
                    c_out,
                    k_h,
                    k_w,
                    ..
                } => {
                    let macs = (c_in * k_h * k_w * c_out) as u64 * (out.h * out.w) as u64;
                    (2 * macs, (c_out * c_in * k_h * k_w + c_out) as u64)
                }
                StageOp::Dense { in_dim, out_dim } => {
                    (2 * (in_dim * out_dim) as u64, (in_dim * out_dim + out_dim) as u64)
                }
                StageOp::Relu
                | StageOp::MaxPool2d { .. }
                | StageOp::AvgPool2d { .. }
                | StageOp::GlobalAvgPool
                | StageOp::Add => (out_elems, 0),
                StageOp::ConcatChannels => (0, 0),
                StageOp::Opaque { params_count } => (0, params_count as u64),
            };
            StageMetrics {
                stage_id: s.id,
                flops,
                rep_size_bytes: out_elems * BYTES_PER_ELEMENT,
                param_count: params,
                param_bytes: params * BYTES_PER_ELEMENT,
            }
        })
        .collect()
}

/// Parameter bytes of stages `0..=t`, which stay unloaded when stage `t`'s
/// output is shared in from another model.
pub fn memory_savings(g: &ModelGraph, t: usize) -> Result<u64> {
    g.stage(t)?;
    Ok(stage_metrics(g)[..=t].iter().map(|m| m.param_bytes).sum())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Piecewise model: a constant floor below the threshold, a line at or above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimator {
    pub threshold: f64,
    pub floor_value: f64,
    pub slope: f64,
    pub intercept: f64,
}

/// Unfitted default: the floor below [`DEFAULT_THRESHOLD`], then a line
/// from the floor at the threshold up to 1 at `S = 1`.
impl Default for AccuracyEstimator {
    fn default() -> Self {
        let slope = (1.0 - DEFAULT_FLOOR) / (1.0 - DEFAULT_THRESHOLD);
        AccuracyEstimator {
            threshold: DEFAULT_THRESHOLD,
            floor_value: DEFAULT_FLOOR,
            slope,
            intercept: 1.0 - slope,
        }
    }
}

impl AccuracyEstimator {
    /// Estimated accuracy for similarity `s`, clamped to `[0, 1]`.
    pub fn estimate(&self, s: f64) -> f64 {
        let raw = if s < self.threshold {
            self.floor_value
        } else {
            self.slope * s + self.intercept
        };
        raw.clamp(0.0, 1.0)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }
}

/// Least-squares line through `(s, acc)` points, or `None` when the
/// similarities do not vary.
fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    let ms = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ma = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sss, mut ssa) = (0.0, 0.0);
    for &(s, a) in points {
        sss += (s - ms) * (s - ms);
        ssa += (s - ms) * (a - ma);
    }
    if sss == 0.0 {
        return None;
    }
    let slope = ssa / sss;
    let intercept = ma - slope * ms;
    let sse = points
        .iter()
        .map(|&(s, a)| (a - (slope * s + intercept)).powi(2))
        .sum();
    Some((slope, intercept, sse))
}

/// Fits an [`AccuracyEstimator`] by scanning candidate thresholds (every
/// observed similarity plus [`DEFAULT_THRESHOLD`]) and keeping the one with
/// the least total squared error. Near-equal errors go to the smaller threshold.
pub fn fit_estimator(pairs: &[(f64, f64)]) -> Result<AccuracyEstimator> {
    if pairs.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 pairs, got {}", pairs.len())));
    }
    if let Some(&(s, _)) = pairs.iter().find(|(s, _)| !(0.0..=1.0).contains(s)) {
        return Err(Error::Fit(format!("similarity {s} outside [0, 1]")));
    }
    if pairs.iter().any(|(_, a)| !a.is_finite()) {
        return Err(Error::Fit("non-finite accuracy".into()));
    }
    let mut candidates: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    candidates.push(DEFAULT_THRESHOLD);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best: Option<(f64, AccuracyEstimator)> = None;
    for &threshold in &candidates {
        let (below, above): (Vec<_>, Vec<_>) =
            pairs.iter().copied().partition(|(s, _)| *s < threshold);
        if above.len() < 2 {
            continue;
        }
        let Some((slope, intercept, line_sse)) = fit_line(&above) else {
            continue;
        };
        let floor_value = if below.is_empty() {
            DEFAULT_FLOOR
        } else {
            below.iter().map(|p| p.1).sum::<f64>() / below.len() as f64
        };
        let floor_sse: f64 = below.iter().map(|p| (p.1 - floor_value).powi(2)).sum();
        let sse = line_sse + floor_sse;
        let est = AccuracyEstimator {
            threshold,
            floor_value,
            slope,
            intercept,
        };
        let improves = match best {
            None => true,
            Some((best_sse, _)) => sse < best_sse - 1e-12 * (1.0 + best_sse),
        };
        if improves {
            best = Some((sse, est));
        }
    }
    if let Some((sse, e)) = &best {
        log::debug!("estimator threshold {} with sse {sse:.3e}", e.threshold);
    }
    best.map(|(_, e)| e).ok_or_else(|| {
        Error::Fit("no threshold leaves two distinct similarities for the line".into())
    })
}

/// One merge experiment: measured accuracy plus the candidate predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "FLOPs")]
    pub flops: f64,
    #[serde(rename = "Size")]
    pub size: f64,
    #[serde(rename = "Params")]
    pub params: f64,
}

pub fn read_experiment_csv(path: impl AsRef<Path>) -> Result<Vec<ExperimentRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.into(),
        source: e,
    })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<ExperimentRow>, _>>()
        .map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })
}

/// Reads `(S, accuracy)` pairs from a CSV with an `S` column and an accuracy
/// column named `Acc`, `accuracy` or `fidelity` (first match wins).
pub fn read_accuracy_pairs(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.into(),
        source: e,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let s_col = find("S").ok_or_else(|| Error::Fit(format!("{}: no 'S' column", path.display())))?;
    let acc_col = ["Acc", "accuracy", "fidelity"]
        .iter()
        .find_map(|n| find(n))
        .ok_or_else(|| {
            Error::Fit(format!("{}: no 'Acc', 'accuracy' or 'fidelity' column", path.display()))
        })?;
    let mut pairs = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let parse = |col: usize| -> Result<f64> {
            let field = record.get(col).unwrap_or("");
            field.trim().parse().map_err(|_| {
                Error::Fit(format!("{}: row {}: '{field}' is not a number", path.display(), i + 1))
            })
        };
        pairs.push((parse(s_col)?, parse(acc_col)?));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    /// `|r|` against accuracy, `None` when undefined for this column.
    pub abs_r: Option<f64>,
}

/// `|r|` of accuracy against each metric, strongest first; undefined
/// correlations sort last.
pub fn correlate_table(rows: &[ExperimentRow]) -> Result<Vec<MetricCorrelation>> {
    if rows.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 rows, got {}",
            rows.len()
        )));
    }
    let acc: Vec<f64> = rows.iter().map(|r| r.acc).collect();
    type Column = (&'static str, fn(&ExperimentRow) -> f64);
    let columns: [Column; 4] = [
        ("S", |r| r.s),
        ("FLOPs", |r| r.flops),
        ("Size", |r| r.size),
        ("Params", |r| r.params),
    ];
    let mut out: Vec<MetricCorrelation> = columns
        .iter()
        .map(|(name, get)| {
            let col: Vec<f64> = rows.iter().map(get).collect();
            MetricCorrelation {
                metric: name.to_string(),
                abs_r: pearson(&acc, &col).ok().map(f64::abs),
            }
        })
        .collect();
    out.sort_by(|a, b| match (a.abs_r, b.abs_r) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(out)
}

/// JSON object `{"metric": |r| or null}` in ranked order.
pub fn correlation_report_json(report: &[MetricCorrelation]) -> String {
    let mut map = serde_json::Map::new();
    for m in report {
        map.insert(m.metric.clone(), serde_json::json!(m.abs_r));
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("report serializes")
}
