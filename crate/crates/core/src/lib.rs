//! Drift-resistant world-model machinery for navigation, exercised against a
//! synthetic pinhole-camera world.
//!
//! The crate is organized around the pieces needed to build and verify
//! anchor-guided rollout with bidirectional epipolar attention masks:
//!
//! - [`geometry`] — homogeneous two-view geometry: epipolar lines, line
//!   intersections, fundamental-matrix estimation (normalized 8-point +
//!   RANSAC), Sampson error.
//! - [`world`] — a deterministic synthetic world (pinhole cameras, planar
//!   poses, point-splat renderer, labeled correspondence sampling) that
//!   serves as the ground-truth oracle for every geometric claim.
//! - [`mask`] — token-grid discretization and construction of the
//!   bidirectional epipolar attention masks, with reliability gating and
//!   temporal smoothing.
//! - [`triplet`] — the pipeline tying world + geometry + mask together:
//!   match filtering, robust estimation, gating, per-chunk mask sequences.
//! - [`rollout`] — autoregressive and anchor-guided rollout over a generic
//!   frame-generator contract.
//! - [`generators`] — frame generators for experiments: a perfect oracle and
//!   a context-coupled noisy generator that reproduces compounding drift.
//! - [`acdit`] — desk-scale numerics of the anchor-conditioned transformer
//!   block: scalar embeddings, gated masked attention, chunk attention, the
//!   diffusion forward process and loss, and analytic gradients verified by
//!   finite differences.
//! - [`metrics`] — epipolar distance / Sampson statistics, ATE/FDE/RPE, and
//!   pixel-space drift curves.
//! - [`planner`] — a deterministic Cross-Entropy Method planner scoring
//!   candidate action sequences through the world model.

pub mod acdit;
pub mod generators;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod planner;
pub mod rollout;
pub mod triplet;
pub mod world;
