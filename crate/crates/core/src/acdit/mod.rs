//! Desk-scale numerics of the anchor-conditioned transformer block: scalar
//! condition embeddings, gated masked cross-attention with chunk attention,
//! the diffusion forward process and denoising loss, analytic gradients
//! checked against central finite differences, a parameter checkpoint
//! format, and a toy trainer.
//!
//! Everything runs in double precision on explicit matrices; there is no
//! autodiff framework behind it. The claims under test are structural
//! (identity at initialization, mask semantics, gradient correctness), not
//! capacity-dependent, so a single block with one attention head is enough.

mod attention;
mod block;
mod checkpoint;
mod embed;
mod schedule;
mod train;

pub use attention::masked_cross_attention;
pub use block::{
    block_forward, finite_diff_grad_check, forward_loss, loss_and_grads, sa_only_forward,
    AcDitBatch, AcDitParams, AttentionLayerParams, FrameScalars, GatedBlockParams,
};
pub use checkpoint::{load_params, save_params};
pub use embed::{combine_conditions, embed_scalar, ConditionVector, ScalarEmbedder};
pub use schedule::{denoising_loss, diffuse_forward, DiffusionSchedule};
pub use train::{train_demo, TrainReport};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcditError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention query row {row} has no allowed keys")]
    EmptyAttentionRow { row: usize },
    #[error("diffusion timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid diffusion schedule: {0}")]
    BadSchedule(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Block dimensions. `l` is the spatial token count (a [`crate::mask::TokenGrid`]
/// side squared) and `k` the chunk length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcDitConfig {
    pub d: usize,
    pub l: usize,
    pub k: usize,
    pub mlp_hidden: usize,
    pub freq_count: usize,
}

impl AcDitConfig {
    /// Desk-scale defaults: d = 32, L = 196, K = 3.
    pub fn default_desk() -> Self {
        Self {
            d: 32,
            l: 196,
            k: 3,
            mlp_hidden: 64,
            freq_count: 8,
        }
    }

    /// Reduced dimensions for fast tests (L = 16).
    pub fn small() -> Self {
        Self {
            d: 8,
            l: 16,
            k: 3,
            mlp_hidden: 16,
            freq_count: 4,
        }
    }
}

/// K frames of L x d token features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub frames: Vec<DMatrix<f64>>,
}

impl TokenTensor {
    pub fn new(frames: Vec<DMatrix<f64>>) -> Result<Self, AcditError> {
        let Some(first) = frames.first() else {
            return Err(AcditError::Shape("token tensor needs at least one frame".into()));
        };
        let (l, d) = (first.nrows(), first.ncols());
        for (i, f) in frames.iter().enumerate() {
            if f.nrows() != l || f.ncols() != d {
                return Err(AcditError::Shape(format!(
                    "frame {i} is {}x{}, expected {l}x{d}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(AcditError::NonFinite("token tensor"));
            }
        }
        Ok(Self { frames })
    }

    pub fn zeros(k: usize, l: usize, d: usize) -> Self {
        Self {
            frames: (0..k).map(|_| DMatrix::zeros(l, d)).collect(),
        }
    }

    pub fn random<R: Rng>(k: usize, l: usize, d: usize, rng: &mut R) -> Self {
        Self {
            frames: (0..k)
                .map(|_| DMatrix::from_fn(l, d, |_, _| StandardNormal.sample(rng)))
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn l(&self) -> usize {
        self.frames.first().map(|f| f.nrows()).unwrap_or(0)
    }

    pub fn d(&self) -> usize {
        self.frames.first().map(|f| f.ncols()).unwrap_or(0)
    }

    pub fn entry_count(&self) -> usize {
        self.k() * self.l() * self.d()
    }

    pub fn same_shape(&self, other: &TokenTensor) -> bool {
        self.k() == other.k() && self.l() == other.l() && self.d() == other.d()
    }

    /// a*self + b*other, elementwise.
    pub fn scaled_add(&self, a: f64, other: &TokenTensor, b: f64) -> Result<TokenTensor, AcditError> {
        if !self.same_shape(other) {
            return Err(AcditError::Shape("scaled_add operands differ".into()));
        }
        Ok(TokenTensor {
            frames: self
                .frames
                .iter()
                .zip(&other.frames)
                .map(|(x, y)| x * a + y * b)
                .collect(),
        })
    }
}
