//! Reference CPU executor for stage graphs, including merged execution in
//! which a donor representation stands in for a target model's prefix.
//!
//! Every output element is accumulated in a fixed order, so results are
//! bit-identical across runs and thread counts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;

use crate::adapt::{apply_adapt, plan_adapt, AdaptSpec};
use crate::error::{Error, Result};
use crate::graph::{valid_cut, ModelGraph, StageOp, StageSpec};
use crate::npy;
use crate::tensor::{Chw, RepresentationSet, Tensor};

/// Where a donor representation enters a target model.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPoint {
    pub target_stage: usize,
    /// Donor batch, `(n, C_s, H_s, W_s)`.
    pub donor_rep: Tensor,
    pub adapt: AdaptSpec,
}

impl InjectionPoint {
    /// Plans the shape adapter and checks that the cut at `target_stage` is
    /// executable.
    pub fn new(target: &ModelGraph, target_stage: usize, donor_rep: Tensor) -> Result<Self> {
        let check = valid_cut(target, target_stage)?;
        if let Some(diag) = check.diagnostic() {
            return Err(Error::graph(target_stage, diag));
        }
        let donor_rep = donor_rep.into_nchw()?;
        let src = donor_rep.example_shape()?;
        let dst = target.stage(target_stage)?.out_shape;
        Ok(InjectionPoint {
            target_stage,
            donor_rep,
            adapt: plan_adapt(src, dst),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(n, classes)` output of the graph's output stage.
    pub predictions: Tensor,
    pub dumps: RepresentationSet,
}

enum Slot {
    /// Offloaded prefix stage; reading it is a cut violation.
    Placeholder,
    Ready(Tensor),
}

/// Runs one graph, loading stage weights lazily and remembering which
/// weight files were read.
pub struct Executor<'g> {
    graph: &'g ModelGraph,
    weights: BTreeMap<usize, (Tensor, Tensor)>,
    touched: BTreeSet<PathBuf>,
}

impl<'g> Executor<'g> {
    pub fn new(graph: &'g ModelGraph) -> Self {
        Executor {
            graph,
            weights: BTreeMap::new(),
            touched: BTreeSet::new(),
        }
    }

    /// Weight files read so far, as resolved paths.
    pub fn touched_files(&self) -> &BTreeSet<PathBuf> {
        &self.touched
    }

    pub fn forward(&mut self, inputs: &Tensor) -> Result<ForwardOutput> {
        let g = self.graph;
        let inputs = inputs.clone().into_nchw()?;
        if inputs.example_shape()? != g.input_shape {
            return Err(Error::Shape(format!(
                "model '{}' expects inputs of shape {}, got {:?}",
                g.name,
                g.input_shape,
                inputs.shape()
            )));
        }
        let n = inputs.batch();
        let mut slots: Vec<Slot> = Vec::with_capacity(g.len());
        let input_slot = Slot::Ready(inputs);
        for s in &g.stages {
            let out = self.run_stage(s, &slots, &input_slot)?;
            slots.push(Slot::Ready(out));
        }
        let mut dumps = RepresentationSet::new(g.name.clone(), n)?;
        let mut predictions = None;
        for (id, slot) in slots.into_iter().enumerate() {
            if let Slot::Ready(t) = slot {
                if id == g.output_stage {
                    predictions = Some(as_predictions(&t)?);
                }
                dumps.insert(id, t)?;
            }
        }
        Ok(ForwardOutput {
            predictions: predictions.expect("output stage is executed"),
            dumps,
        })
    }

    /// Executes only the stages after the injection point. Earlier stages
    /// are placeholders: their weights are never loaded and any read of
    /// them (or of the model input) fails with a cut violation.
    pub fn forward_merged(&mut self, inj: &InjectionPoint) -> Result<Tensor> {
        let g = self.graph;
        let t = inj.target_stage;
        let target = g.stage(t)?;
        if inj.adapt.dst_shape != target.out_shape {
            return Err(Error::Shape(format!(
                "adapter produces {} but stage {t} outputs {}",
                inj.adapt.dst_shape, target.out_shape
            )));
        }
        let injected = apply_adapt(&inj.adapt, &inj.donor_rep)?;

        let mut slots: Vec<Slot> = Vec::with_capacity(g.len());
        slots.extend((0..t).map(|_| Slot::Placeholder));
        slots.push(Slot::Ready(injected));
        let input_slot = Slot::Placeholder;
        for s in &g.stages[t + 1..] {
            let out = self.run_stage(s, &slots, &input_slot)?;
            slots.push(Slot::Ready(out));
        }
        match &slots[g.output_stage] {
            Slot::Ready(out) => as_predictions(out),
            Slot::Placeholder => Err(Error::CutViolation {
                consumer: g.output_stage,
                slot: format!("stage {}", g.output_stage),
            }),
        }
    }

    fn load_weights(&mut self, s: &StageSpec) -> Result<&(Tensor, Tensor)> {
        if !self.weights.contains_key(&s.id) {
            let w = s.weights.as_ref().ok_or_else(|| Error::NotExecutable {
                stage: s.id,
                reason: "no weight files".into(),
            })?;
            let kernel_path = self.graph.resolve(&w.kernel);
            let bias_path = self.graph.resolve(&w.bias);
            let kernel = npy::read_tensor(&kernel_path)?;
            let bias = npy::read_tensor(&bias_path)?;
            if let Some((ks, bs)) = s.op.weight_shapes() {
                if kernel.shape() != ks.as_slice() || bias.shape() != bs.as_slice() {
                    return Err(Error::graph(
                        s.id,
                        format!(
                            "weights have shapes {:?}/{:?}, expected {ks:?}/{bs:?}",
                            kernel.shape(),
                            bias.shape()
                        ),
                    ));
                }
            }
            self.touched.insert(kernel_path);
            self.touched.insert(bias_path);
            self.weights.insert(s.id, (kernel, bias));
        }
        Ok(&self.weights[&s.id])
    }

    fn run_stage(&mut self, s: &StageSpec, slots: &[Slot], input: &Slot) -> Result<Tensor> {
        let read = |slot: &Slot, name: String| -> Result<Tensor> {
            match slot {
                Slot::Ready(t) => Ok(t.clone()),
                Slot::Placeholder => Err(Error::CutViolation {
                    consumer: s.id,
                    slot: name,
                }),
            }
        };
        let args: Vec<Tensor> = if s.inputs.is_empty() {
            vec![read(input, "model input".into())?]
        } else {
            s.inputs
                .iter()
                .map(|&p| read(&slots[p], format!("stage {p}")))
                .collect::<Result<_>>()?
        };
        let shapes: Vec<Chw> = args.iter().map(Tensor::example_shape).collect::<Result<_>>()?;
        let out = match s.op {
            StageOp::Conv2d { stride, pad, .. } => {
                let (k, b) = self.load_weights(s)?;
                conv2d(&args[0], shapes[0], k, b, s.out_shape, stride, pad)
            }
            StageOp::Dense { .. } => {
                let (k, b) = self.load_weights(s)?;
                dense(&args[0], k, b)
            }
            StageOp::Relu => relu(&args[0]),
            StageOp::MaxPool2d { window, stride } => {
                pool(&args[0], shapes[0], s.out_shape, window, stride, PoolKind::Max)
            }
            StageOp::AvgPool2d { window, stride } => {
                pool(&args[0], shapes[0], s.out_shape, window, stride, PoolKind::Avg)
            }
            StageOp::GlobalAvgPool => global_avg_pool(&args[0], shapes[0]),
            StageOp::Add => add(&args),
            StageOp::ConcatChannels => concat_channels(&args, &shapes),
            StageOp::Opaque { .. } => {
                return Err(Error::NotExecutable {
                    stage: s.id,
                    reason: "opaque stages carry no computation".into(),
                })
            }
        };
        let n = args[0].batch();
        let out = out.reshape(vec![n, s.out_shape.c, s.out_shape.h, s.out_shape.w])?;
        Ok(out)
    }
}

fn as_predictions(t: &Tensor) -> Result<Tensor> {
    let n = t.batch();
    t.clone().reshape(vec![n, t.numel() / n])
}

/// Unmerged forward pass returning logits and every stage's output.
pub fn forward(g: &ModelGraph, inputs: &Tensor) -> Result<ForwardOutput> {
    Executor::new(g).forward(inputs)
}

/// Merged forward pass; see [`Executor::forward_merged`].
pub fn forward_merged(g: &ModelGraph, inj: &InjectionPoint) -> Result<Tensor> {
    Executor::new(g).forward_merged(inj)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose top class agrees between two prediction
/// batches. Ties resolve to the lowest class index.
pub fn fidelity(merged: &Tensor, original: &Tensor) -> Result<f64> {
    if merged.shape() != original.shape() || merged.rank() != 2 {
        return Err(Error::Shape(format!(
            "prediction shapes differ or are not (n, classes): {:?} vs {:?}",
            merged.shape(),
            original.shape()
        )));
    }
    let n = merged.batch();
    let classes = merged.shape()[1];
    let agree = merged
        .data()
        .chunks_exact(classes)
        .zip(original.data().chunks_exact(classes))
        .filter(|(a, b)| argmax(a) == argmax(b))
        .count();
    Ok(agree as f64 / n as f64)
}

fn conv2d(
    x: &Tensor,
    src: Chw,
    kernel: &Tensor,
    bias: &Tensor,
    dst: Chw,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (k_h, k_w) = (kernel.shape()[2], kernel.shape()[3]);
    let n = x.batch();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; n * dst.numel()];
    out.par_chunks_mut(dst.numel())
        .zip(x.data().par_chunks(src.numel()))
        .for_each(|(o, xin)| {
            for oc in 0..dst.c {
                let plane = &mut o[oc * dst.h * dst.w..(oc + 1) * dst.h * dst.w];
                plane.fill(bd[oc]);
                for ic in 0..src.c {
                    let xplane = &xin[ic * src.h * src.w..(ic + 1) * src.h * src.w];
                    for ky in 0..k_h {
                        for kx in 0..k_w {
                            let wv = kd[((oc * src.c + ic) * k_h + ky) * k_w + kx];
                            for oy in 0..dst.h {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= src.h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * src.w..(iy as usize + 1) * src.w];
                                let orow = &mut plane[oy * dst.w..(oy + 1) * dst.w];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < src.w as isize {
                                        *ov += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![n * dst.numel()], out).expect("conv output sized")
}

fn dense(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.batch();
    let in_dim = x.numel() / n;
    let out_dim = kernel.shape()[0];
    let kd = kernel.data();
    let mut out = vec![0.0f32; n * out_dim];
    out.par_chunks_mut(out_dim)
        .zip(x.data().par_chunks(in_dim))
        .for_each(|(o, xin)| {
            for (j, ov) in o.iter_mut().enumerate() {
                let row = &kd[j * in_dim..(j + 1) * in_dim];
                let mut acc = bias.data()[j];
                for (w, v) in row.iter().zip(xin) {
                    acc += w * v;
                }
                *ov = acc;
            }
        });
    Tensor::new(vec![n * out_dim], out).expect("dense output sized")
}

fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Copy)]
enum PoolKind {
    Max,
    Avg,
}

fn pool(x: &Tensor, src: Chw, dst: Chw, window: usize, stride: usize, kind: PoolKind) -> Tensor {
    let n = x.batch();
    let xd = x.data();
    let area = (window * window) as f32;
    let mut out = Vec::with_capacity(n * dst.numel());
    for b in 0..n {
        for c in 0..src.c {
            let plane = &xd[(b * src.c + c) * src.h * src.w..(b * src.c + c + 1) * src.h * src.w];
            for oy in 0..dst.h {
                for ox in 0..dst.w {
                    let mut acc = match kind {
                        PoolKind::Max => f32::NEG_INFINITY,
                        PoolKind::Avg => 0.0,
                    };
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = plane[(oy * stride + ky) * src.w + ox * stride + kx];
                            match kind {
                                PoolKind::Max => acc = acc.max(v),
                                PoolKind::Avg => acc += v,
                            }
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => acc,
                        PoolKind::Avg => acc / area,
                    });
                }
            }
        }
    }
    Tensor::new(vec![out.len()], out).expect("pool output sized")
}

fn global_avg_pool(x: &Tensor, src: Chw) -> Tensor {
    let hw = src.h * src.w;
    let out: Vec<f32> = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(vec![out.len()], out).expect("gap output sized")
}

fn add(args: &[Tensor]) -> Tensor {
    let mut acc = args[0].data().to_vec();
    for t in &args[1..] {
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    Tensor::new(args[0].shape().to_vec(), acc).expect("same shape")
}

fn concat_channels(args: &[Tensor], shapes: &[Chw]) -> Tensor {
    let n = args[0].batch();
    let mut out = Vec::with_capacity(args.iter().map(Tensor::numel).sum());
    for b in 0..n {
        for (t, s) in args.iter().zip(shapes) {
            out.extend_from_slice(&t.data()[b * s.numel()..(b + 1) * s.numel()]);
        }
    }
    Tensor::new(vec![out.len()], out).expect("concat output sized")
}
