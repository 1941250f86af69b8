//! Representation-similarity guided layer sharing.
//!
//! Measures linear CKA between the stage outputs of two models, executes a
//! target model with a donor model's (shape-adapted) representation injected
//! in place of its prefix, and searches for sharing points that trade memory
//! against similarity.
//!
//! Module map:
//! - [`tensor`], [`npy`], [`dumps`]: tensors and their on-disk formats
//! - [`cka`]: Gram matrices, CKA and similarity matrices
//! - [`adapt`]: channel sampling and nearest resizing between stage shapes
//! - [`graph`]: stage graphs, manifests, shape inference and cut validity
//! - [`executor`]: forward and merged execution, fidelity
//! - [`metrics`]: FLOPs/size/params, memory savings, Pearson r, accuracy estimator
//! - [`planner`]: plan enumeration and constrained selection
//! - [`experiment`]: same/cross-stage sweeps and the noise sweep
//! - [`toy`]: deterministic desk-scale model pair

pub mod adapt;
pub mod cka;
pub mod dumps;
pub mod error;
pub mod executor;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod npy;
pub mod planner;
pub mod tensor;
pub mod toy;

pub use adapt::{apply_adapt, plan_adapt, AdaptSpec, SpatialMode};
pub use cka::{cka, cka_features, gram_linear, similarity_matrix, Features, GramMatrix, SharingMode, SimilarityMatrix};
pub use dumps::{read_dumps, write_dumps};
pub use error::{Error, Result};
pub use executor::{fidelity, forward, forward_merged, Executor, ForwardOutput, InjectionPoint};
pub use graph::{infer_shapes, load_manifest, valid_cut, CutCheck, ModelGraph, StageOp, StageSpec};
pub use metrics::{correlate_table, fit_estimator, memory_savings, pearson, stage_metrics, AccuracyEstimator};
pub use npy::{read_tensor, write_tensor};
pub use planner::{enumerate_plans, select_plan, MergePlan, SelectMode};
pub use tensor::{Chw, RepresentationSet, Tensor};
pub use toy::{gen_toy_pair, ToyPair, ToyPaths};
