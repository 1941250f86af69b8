//! Enumeration and constrained selection of sharing points.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapt::{plan_adapt, AdaptSpec};
use crate::cka::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::graph::{valid_cut, ModelGraph};
use crate::metrics::{memory_savings, AccuracyEstimator};
use crate::tensor::RepresentationSet;

/// Candidate: feed donor stage `donor_stage`'s output into the target model
/// in place of stage `target_stage`, unloading the target's prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub donor_model: String,
    pub donor_stage: usize,
    pub target_model: String,
    pub target_stage: usize,
    pub similarity: f64,
    pub adapt: AdaptSpec,
    pub savings_bytes: u64,
    pub estimated_accuracy: f64,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// One plan per (donor stage, target stage) pair, donor-major. Invalid cuts
/// are kept with `valid = false` and a diagnostic.
pub fn enumerate_plans(
    donor: &ModelGraph,
    donor_dumps: &RepresentationSet,
    target: &ModelGraph,
    sim: &SimilarityMatrix,
    est: &AccuracyEstimator,
) -> Result<Vec<MergePlan>> {
    let cuts = target
        .stage_ids()
        .map(|t| Ok((valid_cut(target, t)?, memory_savings(target, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut plans = Vec::with_capacity(donor.len() * target.len());
    for s in donor.stage_ids() {
        let rep = donor_dumps.get(s).ok_or_else(|| {
            Error::Plan(format!("no dump for donor stage {s} of '{}'", donor.name))
        })?;
        let src = rep.example_shape()?;
        for (t, (cut, savings)) in cuts.iter().enumerate() {
            let similarity = sim.get(s, t).ok_or_else(|| {
                Error::Plan(format!("similarity matrix has no entry for ({s}, {t}); planning needs a cross-stage matrix"))
            })?;
            plans.push(MergePlan {
                donor_model: donor.name.clone(),
                donor_stage: s,
                target_model: target.name.clone(),
                target_stage: t,
                similarity,
                adapt: plan_adapt(src, target.stages[t].out_shape),
                savings_bytes: *savings,
                estimated_accuracy: est.estimate(similarity),
                valid: cut.is_valid(),
                diagnostic: cut.diagnostic(),
            });
        }
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SelectMode {
    /// Largest savings among valid plans with similarity at least `min_similarity`.
    MaxSavings { min_similarity: f64 },
    /// Highest estimated accuracy among valid plans saving at least `budget_bytes`.
    MaxAccuracy { budget_bytes: u64 },
}

impl SelectMode {
    pub fn feasible(&self, p: &MergePlan) -> bool {
        p.valid
            && match *self {
                SelectMode::MaxSavings { min_similarity } => p.similarity >= min_similarity,
                SelectMode::MaxAccuracy { budget_bytes } => p.savings_bytes >= budget_bytes,
            }
    }

    /// Total order on feasible plans: `Greater` means preferred.
    fn rank(&self, a: &MergePlan, b: &MergePlan) -> Ordering {
        let primary = match self {
            SelectMode::MaxSavings { .. } => a.savings_bytes.cmp(&b.savings_bytes),
            SelectMode::MaxAccuracy { .. } => a.estimated_accuracy.total_cmp(&b.estimated_accuracy),
        };
        primary
            .then(a.similarity.total_cmp(&b.similarity))
            .then((b.donor_stage, b.target_stage).cmp(&(a.donor_stage, a.target_stage)))
    }
}

/// Best feasible plan, or `None` when nothing meets the constraint. The
/// result does not depend on the order of `plans`.
pub fn select_plan(plans: &[MergePlan], mode: SelectMode) -> Option<&MergePlan> {
    plans
        .iter()
        .filter(|p| mode.feasible(p))
        .max_by(|a, b| mode.rank(a, b))
}

/// Writes plans as JSON lines.
pub fn write_plans_jsonl<W: Write>(plans: &[MergePlan], mut out: W) -> std::io::Result<()> {
    for p in plans {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Summary document: counts, the selection mode, and the chosen plan marked
/// with `"selected": true` (or `null`).
pub fn summary_json(plans: &[MergePlan], mode: SelectMode, selected: Option<&MergePlan>) -> String {
    let selected = selected.map(|p| {
        let mut v = serde_json::to_value(p).expect("plan serializes");
        v["selected"] = serde_json::Value::Bool(true);
        v
    });
    let doc = serde_json::json!({
        "selection": mode,
        "plans": plans.len(),
        "valid_plans": plans.iter().filter(|p| p.valid).count(),
        "selected": selected,
    });
    serde_json::to_string_pretty(&doc).expect("summary serializes")
}
