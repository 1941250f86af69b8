//! Stage-level model graphs: manifest I/O, shape inference and the
//! structural rule deciding where a model's prefix can be replaced.
//!
//! A graph is a list of stages in topological order. Stage `i` may only read
//! stages with a lower id, or the model input when its input list is empty.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::Chw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOp {
    Conv2d {
        c_in: usize,
        c_out: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    AvgPool2d {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Add,
    ConcatChannels,
    /// Stage exported from an external framework: shape and size are known,
    /// the computation is not.
    Opaque {
        params_count: usize,
    },
}

impl StageOp {
    pub fn kind(&self) -> &'static str {
        match self {
            StageOp::Conv2d { .. } => "conv2d",
            StageOp::Relu => "relu",
            StageOp::MaxPool2d { .. } => "maxpool2d",
            StageOp::AvgPool2d { .. } => "avgpool2d",
            StageOp::GlobalAvgPool => "global_avg_pool",
            StageOp::Dense { .. } => "dense",
            StageOp::Add => "add",
            StageOp::ConcatChannels => "concat_channels",
            StageOp::Opaque { .. } => "opaque",
        }
    }

    /// Shapes of the `(kernel, bias)` parameter tensors, for kinds that have them.
    pub fn weight_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            StageOp::Conv2d {
                c_in,
                c_out,
                k_h,
                k_w,
                ..
            } => Some((vec![c_out, c_in, k_h, k_w], vec![c_out])),
            StageOp::Dense { in_dim, out_dim } => Some((vec![out_dim, in_dim], vec![out_dim])),
            _ => None,
        }
    }

    fn is_variadic(&self) -> bool {
        matches!(self, StageOp::Add | StageOp::ConcatChannels)
    }

    fn params_json(&self) -> Value {
        match *self {
            StageOp::Conv2d {
                c_in,
                c_out,
                k_h,
                k_w,
                stride,
                pad,
            } => json!({"c_in": c_in, "c_out": c_out, "k_h": k_h, "k_w": k_w, "stride": stride, "pad": pad}),
            StageOp::MaxPool2d { window, stride } | StageOp::AvgPool2d { window, stride } => {
                json!({"window": window, "stride": stride})
            }
            StageOp::Dense { in_dim, out_dim } => json!({"in_dim": in_dim, "out_dim": out_dim}),
            StageOp::Opaque { params_count } => json!({"params_count": params_count}),
            StageOp::Relu | StageOp::GlobalAvgPool | StageOp::Add | StageOp::ConcatChannels => {
                json!({})
            }
        }
    }

    fn from_json(stage: usize, kind: &str, params: &Map<String, Value>) -> Result<StageOp> {
        let get = |key: &str, default: Option<usize>| -> Result<usize> {
            match params.get(key) {
                Some(v) => v
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| Error::graph(stage, format!("param '{key}' must be a non-negative integer"))),
                None => default.ok_or_else(|| Error::graph(stage, format!("missing param '{key}'"))),
            }
        };
        let op = match kind {
            "conv2d" => StageOp::Conv2d {
                c_in: get("c_in", None)?,
                c_out: get("c_out", None)?,
                k_h: get("k_h", None)?,
                k_w: get("k_w", None)?,
                stride: get("stride", Some(1))?,
                pad: get("pad", Some(0))?,
            },
            "relu" => StageOp::Relu,
            "maxpool2d" | "avgpool2d" => {
                let window = get("window", None)?;
                let stride = get("stride", Some(window))?;
                if kind == "maxpool2d" {
                    StageOp::MaxPool2d { window, stride }
                } else {
                    StageOp::AvgPool2d { window, stride }
                }
            }
            "global_avg_pool" => StageOp::GlobalAvgPool,
            "dense" => StageOp::Dense {
                in_dim: get("in_dim", None)?,
                out_dim: get("out_dim", None)?,
            },
            "add" => StageOp::Add,
            "concat_channels" => StageOp::ConcatChannels,
            "opaque" => StageOp::Opaque {
                params_count: get("params_count", Some(0))?,
            },
            other => return Err(Error::graph(stage, format!("unknown stage kind '{other}'"))),
        };
        Ok(op)
    }
}

/// Paths (relative to the manifest) of a stage's parameter tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWeights {
    pub kernel: PathBuf,
    pub bias: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub id: usize,
    pub name: String,
    pub op: StageOp,
    /// Producer ids; empty means the stage reads the model input.
    pub inputs: Vec<usize>,
    pub out_shape: Chw,
    pub weights: Option<StageWeights>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Chw,
    pub output_stage: usize,
    pub stages: Vec<StageSpec>,
    /// Directory that relative weight paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct RawManifest {
    name: String,
    input_shape: Chw,
    output_stage: usize,
    stages: Vec<RawStage>,
}

#[derive(Deserialize)]
struct RawStage {
    id: usize,
    #[serde(default)]
    name: Option<String>,
    kind: String,
    #[serde(default)]
    params: Map<String, Value>,
    #[serde(default)]
    inputs: Vec<usize>,
    out_shape: Chw,
    #[serde(default)]
    weights: Option<StageWeights>,
}

impl ModelGraph {
    /// Builds a graph and runs the structural and shape checks. Weight files
    /// are not touched.
    pub fn new(
        name: impl Into<String>,
        input_shape: Chw,
        stages: Vec<StageSpec>,
        output_stage: usize,
    ) -> Result<Self> {
        let g = ModelGraph {
            name: name.into(),
            input_shape,
            output_stage,
            stages,
            base_dir: PathBuf::from("."),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage(&self, id: usize) -> Result<&StageSpec> {
        self.stages
            .get(id)
            .ok_or_else(|| Error::graph(id, format!("no such stage in model '{}'", self.name)))
    }

    pub fn stage_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.stages.iter().map(|s| s.id)
    }

    /// Absolute (or base-relative) path of a manifest-relative weight path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text)
            .map_err(|e| Error::Manifest(format!("invalid manifest JSON: {e}")))?;
        let mut stages = Vec::with_capacity(raw.stages.len());
        for s in raw.stages {
            let op = StageOp::from_json(s.id, &s.kind, &s.params)?;
            stages.push(StageSpec {
                id: s.id,
                name: s.name.unwrap_or_else(|| format!("{}_{}", s.kind, s.id)),
                op,
                inputs: s.inputs,
                out_shape: s.out_shape,
                weights: s.weights,
            });
        }
        let g = ModelGraph {
            name: raw.name,
            input_shape: raw.input_shape,
            output_stage: raw.output_stage,
            stages,
            base_dir: base_dir.into(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        let stages: Vec<Value> = self
            .stages
            .iter()
            .map(|s| {
                let mut obj = json!({
                    "id": s.id,
                    "name": s.name,
                    "kind": s.op.kind(),
                    "params": s.op.params_json(),
                    "inputs": s.inputs,
                    "out_shape": s.out_shape,
                });
                if let Some(w) = &s.weights {
                    obj["weights"] = json!(w);
                }
                obj
            })
            .collect();
        let doc = json!({
            "name": self.name,
            "input_shape": self.input_shape,
            "output_stage": self.output_stage,
            "stages": stages,
        });
        serde_json::to_string_pretty(&doc).expect("manifest serializes")
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Structural and shape validation, without I/O.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Manifest(format!("model '{}' has no stages", self.name)));
        }
        if !self.input_shape.is_positive() {
            return Err(Error::Manifest(format!(
                "input shape {} must be positive",
                self.input_shape
            )));
        }
        for (idx, s) in self.stages.iter().enumerate() {
            if s.id != idx {
                return Err(Error::graph(
                    s.id,
                    format!("stage listed at position {idx}; ids must be 0..n in order"),
                ));
            }
            if let Some(&p) = s.inputs.iter().find(|&&p| p >= s.id) {
                return Err(Error::graph(
                    s.id,
                    format!("input {p} does not precede the stage (dangling or cyclic edge)"),
                ));
            }
            match s.op {
                StageOp::Opaque { .. } => {}
                op if op.is_variadic() => {
                    if s.inputs.len() < 2 {
                        return Err(Error::graph(s.id, format!("{} needs at least two inputs", op.kind())));
                    }
                }
                op => {
                    if s.inputs.len() > 1 {
                        return Err(Error::graph(s.id, format!("{} takes a single input", op.kind())));
                    }
                }
            }
            if s.op.weight_shapes().is_some() && s.weights.is_none() {
                return Err(Error::graph(s.id, format!("{} stage lists no weights", s.op.kind())));
            }
        }
        let last = self.stages.len() - 1;
        if self.output_stage != last {
            return Err(Error::Manifest(format!(
                "output_stage {} must be the last stage ({last})",
                self.output_stage
            )));
        }
        let inferred = infer_shapes(self)?;
        for (s, shape) in self.stages.iter().zip(inferred) {
            if s.out_shape != shape {
                return Err(Error::graph(
                    s.id,
                    format!("declared out_shape {} but {} produces {shape}", s.out_shape, s.op.kind()),
                ));
            }
        }
        Ok(())
    }

    /// Checks that every referenced weight file exists and stores the shape
    /// its stage expects. Only NPY headers are read.
    pub fn check_weight_files(&self) -> Result<()> {
        for s in &self.stages {
            let (Some(w), Some((kshape, bshape))) = (&s.weights, s.op.weight_shapes()) else {
                continue;
            };
            for (rel, expected) in [(&w.kernel, kshape), (&w.bias, bshape)] {
                let path = self.resolve(rel);
                let got = npy::read_shape(&path)?;
                if got != expected {
                    return Err(Error::graph(
                        s.id,
                        format!("{} has shape {got:?}, expected {expected:?}", path.display()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Loads a manifest, validates it, and checks its weight files.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let g = ModelGraph::from_json(&text, base).map_err(|e| Error::in_file(path, e))?;
    g.check_weight_files()?;
    log::debug!("loaded model '{}' ({} stages) from {}", g.name, g.len(), path.display());
    Ok(g)
}

fn window_out(stage: usize, len: usize, pad: usize, window: usize, stride: usize) -> Result<usize> {
    if stride == 0 || window == 0 {
        return Err(Error::graph(stage, "window and stride must be positive"));
    }
    let padded = len + 2 * pad;
    if padded < window {
        return Err(Error::graph(
            stage,
            format!("window {window} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - window) / stride + 1)
}

/// Recomputes every stage's output shape from the graph structure.
/// Opaque stages contribute their declared shape.
pub fn infer_shapes(g: &ModelGraph) -> Result<Vec<Chw>> {
    let mut shapes: Vec<Chw> = Vec::with_capacity(g.stages.len());
    for s in &g.stages {
        let producer_shapes: Vec<Chw> = if s.inputs.is_empty() {
            vec![g.input_shape]
        } else {
            s.inputs
                .iter()
                .map(|&p| {
                    shapes
                        .get(p)
                        .copied()
                        .ok_or_else(|| Error::graph(s.id, format!("input {p} is not an earlier stage")))
                })
                .collect::<Result<_>>()?
        };
        let first = producer_shapes[0];
        let out = match s.op {
            StageOp::Conv2d {
                c_in,
                c_out,
                k_h,
                k_w,
                stride,
                pad,
            } => {
                if first.c != c_in {
                    return Err(Error::graph(
                        s.id,
                        format!("conv expects {c_in} input channels, producer gives {}", first.c),
                    ));
                }
                Chw::new(
                    c_out,
                    window_out(s.id, first.h, pad, k_h, stride)?,
                    window_out(s.id, first.w, pad, k_w, stride)?,
                )
            }
            StageOp::Relu => first,
            StageOp::MaxPool2d { window, stride } | StageOp::AvgPool2d { window, stride } => Chw::new(
                first.c,
                window_out(s.id, first.h, 0, window, stride)?,
                window_out(s.id, first.w, 0, window, stride)?,
            ),
            StageOp::GlobalAvgPool => Chw::new(first.c, 1, 1),
            StageOp::Dense { in_dim, out_dim } => {
                if first.numel() != in_dim {
                    return Err(Error::graph(
                        s.id,
                        format!("dense expects {in_dim} inputs, producer gives {}", first.numel()),
                    ));
                }
                Chw::new(out_dim, 1, 1)
            }
            StageOp::Add => {
                if let Some(bad) = producer_shapes.iter().find(|&&p| p != first) {
                    return Err(Error::graph(
                        s.id,
                        format!("add inputs disagree: {first} vs {bad}"),
                    ));
                }
                first
            }
            StageOp::ConcatChannels => {
                if let Some(bad) = producer_shapes.iter().find(|p| (p.h, p.w) != (first.h, first.w)) {
                    return Err(Error::graph(
                        s.id,
                        format!("concat inputs disagree spatially: {first} vs {bad}"),
                    ));
                }
                Chw::new(producer_shapes.iter().map(|p| p.c).sum(), first.h, first.w)
            }
            StageOp::Opaque { .. } => s.out_shape,
        };
        if !out.is_positive() {
            return Err(Error::graph(s.id, format!("computed shape {out} is empty")));
        }
        shapes.push(out);
    }
    Ok(shapes)
}

/// An edge into the suffix of a cut that does not come from the cut stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrossingEdge {
    /// `None` is the model input.
    pub producer: Option<usize>,
    pub consumer: usize,
}

impl fmt::Display for CrossingEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.producer {
            Some(p) => write!(f, "{p} -> {}", self.consumer),
            None => write!(f, "input -> {}", self.consumer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutCheck {
    pub cut: usize,
    pub crossing: Vec<CrossingEdge>,
}

impl CutCheck {
    pub fn is_valid(&self) -> bool {
        self.crossing.is_empty()
    }

    pub fn diagnostic(&self) -> Option<String> {
        if self.is_valid() {
            return None;
        }
        let edges: Vec<String> = self.crossing.iter().map(|e| e.to_string()).collect();
        Some(format!(
            "edges crossing the cut at stage {}: {}",
            self.cut,
            edges.join(", ")
        ))
    }
}

/// A cut at `t` offloads stages `0..=t`. It is executable when every stage
/// after `t` reads only stage `t` or later stages; anything else would read
/// an offloaded slot.
pub fn valid_cut(g: &ModelGraph, t: usize) -> Result<CutCheck> {
    g.stage(t)?;
    let mut crossing = Vec::new();
    for s in &g.stages[t + 1..] {
        if s.inputs.is_empty() {
            crossing.push(CrossingEdge {
                producer: None,
                consumer: s.id,
            });
        }
        for &p in &s.inputs {
            if p < t {
                crossing.push(CrossingEdge {
                    producer: Some(p),
                    consumer: s.id,
                });
            }
        }
    }
    Ok(CutCheck { cut: t, crossing })
}
