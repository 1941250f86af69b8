//! Sharing sweeps over a model pair and the controlled noise sweep.
//!
//! Fidelity (top-1 agreement with the unmerged target) stands in for
//! labelled accuracy throughout.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::{cka, similarity_matrix, SharingMode, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::executor::{fidelity, forward, Executor, InjectionPoint};
use crate::graph::{valid_cut, ModelGraph};
use crate::metrics::{memory_savings, stage_metrics, ExperimentRow};
use crate::tensor::{RepresentationSet, Tensor};
use crate::toy::{gen_toy_pair, ToyPair, DEFAULT_EVAL_SIZE};

pub const DEFAULT_SIGMAS: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s: usize,
    pub t: usize,
    #[serde(rename = "S")]
    pub similarity: f64,
    pub fidelity: f64,
    pub savings_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub similarity: SimilarityMatrix,
    pub donor_dumps: RepresentationSet,
    pub target_dumps: RepresentationSet,
}

impl Sweep {
    /// Rows in the `Acc,S,FLOPs,Size,Params` layout consumed by the
    /// correlation report. FLOPs and Params total the target prefix that the
    /// merge skips; Size is the shared representation's byte size.
    pub fn experiment_rows(&self, target: &ModelGraph) -> Vec<ExperimentRow> {
        let metrics = stage_metrics(target);
        self.rows
            .iter()
            .map(|r| {
                let prefix = &metrics[..=r.t];
                ExperimentRow {
                    acc: r.fidelity,
                    s: r.similarity,
                    flops: prefix.iter().map(|m| m.flops).sum::<u64>() as f64,
                    size: metrics[r.t].rep_size_bytes as f64,
                    params: prefix.iter().map(|m| m.param_count).sum::<u64>() as f64,
                }
            })
            .collect()
    }
}

/// Shares each donor stage into the target (same-stage: the matching stage;
/// cross-stage: every stage) and records similarity, fidelity and savings.
/// Pairs whose target cut is invalid are skipped.
pub fn run_sweep(
    donor: &ModelGraph,
    target: &ModelGraph,
    mode: SharingMode,
    inputs: &Tensor,
) -> Result<Sweep> {
    let donor_out = forward(donor, inputs)?;
    let target_out = forward(target, inputs)?;
    let sim = similarity_matrix(&donor_out.dumps, &target_out.dumps, mode)?;

    let mut pairs = Vec::new();
    for (i, &s) in sim.stages_a.iter().enumerate() {
        for (j, &t) in sim.stages_b.iter().enumerate() {
            if (mode == SharingMode::Same && i != j) || !valid_cut(target, t)?.is_valid() {
                continue;
            }
            pairs.push((s, t));
        }
    }

    log::info!("sweep {} -> {}: {} valid pairs", donor.name, target.name, pairs.len());
    let rows = pairs
        .par_iter()
        .map(|&(s, t)| {
            let donor_rep = donor_out.dumps.get(s).expect("donor stage dumped").clone();
            let inj = InjectionPoint::new(target, t, donor_rep)?;
            let merged = Executor::new(target).forward_merged(&inj)?;
            Ok(SweepRow {
                s,
                t,
                similarity: sim.get(s, t).expect("pair computed"),
                fidelity: fidelity(&merged, &target_out.predictions)?,
                savings_bytes: memory_savings(target, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Sweep {
        rows,
        similarity: sim,
        donor_dumps: donor_out.dumps,
        target_dumps: target_out.dumps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    #[serde(rename = "S")]
    pub similarity: f64,
    pub fidelity: f64,
}

/// Deepest valid cut before the output stage.
pub fn default_noise_stage(g: &ModelGraph) -> Result<usize> {
    for t in (0..g.output_stage).rev() {
        if valid_cut(g, t)?.is_valid() {
            return Ok(t);
        }
    }
    Err(Error::InvalidArgument(format!(
        "model '{}' has no valid cut before its output stage",
        g.name
    )))
}

fn std_dev(data: &[f32]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Injects the target's own stage output plus Gaussian noise scaled by
/// `sigma` times the output's standard deviation. One noise draw (from
/// `seed`) is shared by every sigma, so rows differ only in scale.
pub fn run_noise_sweep(
    target: &ModelGraph,
    inputs: &Tensor,
    stage: usize,
    seed: u64,
    sigmas: &[f64],
) -> Result<Vec<NoiseRow>> {
    if !sigmas.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument("sigmas must be sorted ascending".into()));
    }
    if !sigmas.contains(&0.0) {
        return Err(Error::InvalidArgument("sigmas must include 0".into()));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidArgument("sigmas must be finite and non-negative".into()));
    }
    let check = valid_cut(target, stage)?;
    if let Some(diag) = check.diagnostic() {
        return Err(Error::graph(stage, diag));
    }

    let base = forward(target, inputs)?;
    let clean = base.dumps.get(stage).expect("stage dumped").clone();
    let scale = std_dev(clean.data());
    log::info!("noise sweep on '{}' stage {stage}: {} sigmas, rep std {scale:.4}", target.name, sigmas.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..clean.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();

    sigmas
        .par_iter()
        .map(|&sigma| {
            let data: Vec<f32> = clean
                .data()
                .iter()
                .zip(&z)
                .map(|(&v, &e)| v + (sigma * scale * e) as f32)
                .collect();
            let donor = Tensor::new(clean.shape().to_vec(), data)?;
            let similarity = cka(&donor, &clean)?;
            let inj = InjectionPoint::new(target, stage, donor)?;
            let merged = Executor::new(target).forward_merged(&inj)?;
            Ok(NoiseRow {
                sigma,
                similarity,
                fidelity: fidelity(&merged, &base.predictions)?,
            })
        })
        .collect()
}

/// Generates the toy pair for `seed` under `workdir` and runs the noise
/// sweep on model B at its default stage.
pub fn noise_sweep_toy(seed: u64, sigmas: &[f64], workdir: impl AsRef<Path>) -> Result<Vec<NoiseRow>> {
    let pair = ToyPair::load(gen_toy_pair(seed, DEFAULT_EVAL_SIZE, workdir)?)?;
    let stage = default_noise_stage(&pair.b)?;
    run_noise_sweep(&pair.b, &pair.inputs, stage, seed, sigmas)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_noise_csv<W: Write>(rows: &[NoiseRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_experiment_csv<W: Write>(rows: &[ExperimentRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
