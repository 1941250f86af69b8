//! Deterministic desk-scale model pair for experiments and tests.
//!
//! Both models take `(3, 32, 32)` inputs and emit 10 logits. They share the
//! architecture of their first three stages (conv, relu, maxpool) with
//! weights drawn from a common base and perturbed independently. Model B
//! carries a residual add whose skip edge makes one of its cuts invalid.
//!
//! ```text
//! A: conv3x3(3->16) relu maxpool2 conv3x3(16->32) relu gap dense(32->10)
//! B: conv3x3(3->16) relu maxpool2 conv3x3(16->16) add(2,3) gap dense(16->10)
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::executor::forward;
use crate::graph::{load_manifest, ModelGraph, StageOp, StageSpec, StageWeights};
use crate::npy;
use crate::tensor::{Chw, Tensor};

pub const DEFAULT_EVAL_SIZE: usize = 64;
pub const INPUT_SHAPE: Chw = Chw::new(3, 32, 32);
pub const CLASSES: usize = 10;
/// Relative scale of the per-model perturbation applied to shared prefix weights.
const PREFIX_PERTURBATION: f32 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyPaths {
    pub manifest_a: PathBuf,
    pub manifest_b: PathBuf,
    pub inputs: PathBuf,
}

/// Loaded form of a generated pair.
#[derive(Debug, Clone)]
pub struct ToyPair {
    pub a: ModelGraph,
    pub b: ModelGraph,
    pub inputs: Tensor,
    pub paths: ToyPaths,
}

impl ToyPair {
    pub fn load(paths: ToyPaths) -> Result<Self> {
        Ok(ToyPair {
            a: load_manifest(&paths.manifest_a)?,
            b: load_manifest(&paths.manifest_b)?,
            inputs: npy::read_tensor(&paths.inputs)?,
            paths,
        })
    }
}

fn conv(c_in: usize, c_out: usize) -> StageOp {
    StageOp::Conv2d {
        c_in,
        c_out,
        k_h: 3,
        k_w: 3,
        stride: 1,
        pad: 1,
    }
}

fn spec(id: usize, name: &str, op: StageOp, inputs: Vec<usize>, out: Chw) -> StageSpec {
    let weights = op.weight_shapes().map(|_| StageWeights {
        kernel: format!("weights/{id}_{name}_kernel.npy").into(),
        bias: format!("weights/{id}_{name}_bias.npy").into(),
    });
    StageSpec {
        id,
        name: name.to_string(),
        op,
        inputs,
        out_shape: out,
        weights,
    }
}

fn prefix() -> Vec<StageSpec> {
    vec![
        spec(0, "stem", conv(3, 16), vec![], Chw::new(16, 32, 32)),
        spec(1, "stem_relu", StageOp::Relu, vec![0], Chw::new(16, 32, 32)),
        spec(2, "pool", StageOp::MaxPool2d { window: 2, stride: 2 }, vec![1], Chw::new(16, 16, 16)),
    ]
}

fn graph_a() -> Result<ModelGraph> {
    let mut stages = prefix();
    stages.extend([
        spec(3, "block", conv(16, 32), vec![2], Chw::new(32, 16, 16)),
        spec(4, "block_relu", StageOp::Relu, vec![3], Chw::new(32, 16, 16)),
        spec(5, "gap", StageOp::GlobalAvgPool, vec![4], Chw::new(32, 1, 1)),
        spec(6, "head", StageOp::Dense { in_dim: 32, out_dim: CLASSES }, vec![5], Chw::new(CLASSES, 1, 1)),
    ]);
    ModelGraph::new("toy_a", INPUT_SHAPE, stages, 6)
}

fn graph_b() -> Result<ModelGraph> {
    let mut stages = prefix();
    stages.extend([
        spec(3, "block", conv(16, 16), vec![2], Chw::new(16, 16, 16)),
        spec(4, "residual", StageOp::Add, vec![2, 3], Chw::new(16, 16, 16)),
        spec(5, "gap", StageOp::GlobalAvgPool, vec![4], Chw::new(16, 1, 1)),
        spec(6, "head", StageOp::Dense { in_dim: 16, out_dim: CLASSES }, vec![5], Chw::new(CLASSES, 1, 1)),
    ]);
    ModelGraph::new("toy_b", INPUT_SHAPE, stages, 6)
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

fn fan_in_std(shape: &[usize]) -> f32 {
    let fan_in: usize = shape[1..].iter().product();
    (2.0 / fan_in as f32).sqrt()
}

/// Smooth random images: a few coloured sinusoidal gratings plus pixel noise.
fn eval_inputs(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let Chw { c, h, w } = INPUT_SHAPE;
    let mut data = Vec::with_capacity(n * INPUT_SHAPE.numel());
    for _ in 0..n {
        let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                let amp: f64 = rng.sample(StandardNormal);
                let fy = rng.random_range(0.5..4.0) * std::f64::consts::TAU / h as f64;
                let fx = rng.random_range(0.5..4.0) * std::f64::consts::TAU / w as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let colour = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                (amp, fy, fx, phase, colour)
            })
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for (amp, fy, fx, phase, colour) in &waves {
                        v += amp * colour[ch] * (fy * y as f64 + fx * x as f64 + phase).sin();
                    }
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((v + 0.1 * noise) as f32);
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data).expect("input sized")
}

fn write_weights(dir: &Path, g: &ModelGraph, id: usize, kernel: Vec<f32>, bias: Vec<f32>) -> Result<()> {
    let s = &g.stages[id];
    let (kshape, bshape) = s.op.weight_shapes().expect("parameterised stage");
    let w = s.weights.as_ref().expect("weights listed");
    npy::write_tensor(&Tensor::new(kshape, kernel)?, dir.join(&w.kernel))?;
    npy::write_tensor(&Tensor::new(bshape, bias)?, dir.join(&w.bias))
}

fn emit_model(
    dir: &Path,
    g: &ModelGraph,
    rng: &mut ChaCha8Rng,
    shared_stem: &[f32],
    inputs: &Tensor,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("weights")).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.json");
    g.save_manifest(&manifest)?;

    for s in &g.stages {
        let Some((kshape, bshape)) = s.op.weight_shapes() else {
            continue;
        };
        let std = fan_in_std(&kshape);
        let numel: usize = kshape.iter().product();
        let kernel = if s.id == 0 {
            let delta = gaussian(rng, numel, std * PREFIX_PERTURBATION);
            shared_stem.iter().zip(delta).map(|(b, d)| b + d).collect()
        } else {
            gaussian(rng, numel, std)
        };
        let bias = if s.id == g.output_stage {
            vec![0.0; bshape[0]]
        } else {
            gaussian(rng, bshape[0], 0.05)
        };
        write_weights(dir, g, s.id, kernel, bias)?;
    }

    // Head bias: minus each class's mean logit over the evaluation batch.
    let loaded = load_manifest(&manifest)?;
    let logits = forward(&loaded, inputs)?.predictions;
    let n = logits.batch();
    let mut mean = [0.0f64; CLASSES];
    for row in logits.data().chunks_exact(CLASSES) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let head = &g.stages[g.output_stage];
    let bias: Vec<f32> = mean.iter().map(|m| (-m / n as f64) as f32).collect();
    let bias_path = dir.join(&head.weights.as_ref().expect("head has weights").bias);
    npy::write_tensor(&Tensor::new(vec![CLASSES], bias)?, bias_path)?;
    Ok(manifest)
}

/// Generates the model pair and `n` evaluation inputs under `out_dir`.
/// Equal seeds produce byte-identical trees.
pub fn gen_toy_pair(seed: u64, n: usize, out_dir: impl AsRef<Path>) -> Result<ToyPaths> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let inputs = eval_inputs(&mut rng, n);
    let inputs_path = out.join("inputs.npy");
    npy::write_tensor(&inputs, &inputs_path)?;

    let (a, b) = (graph_a()?, graph_b()?);
    let stem_shape = a.stages[0].op.weight_shapes().expect("conv stem").0;
    let stem = gaussian(&mut rng, stem_shape.iter().product(), fan_in_std(&stem_shape));

    let manifest_a = emit_model(&out.join("a"), &a, &mut rng, &stem, &inputs)?;
    let manifest_b = emit_model(&out.join("b"), &b, &mut rng, &stem, &inputs)?;
    Ok(ToyPaths {
        manifest_a,
        manifest_b,
        inputs: inputs_path,
    })
}
