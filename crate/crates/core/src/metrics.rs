//! Evaluation metrics: epipolar distance / Sampson statistics over
//! correspondence sets, trajectory errors (ATE, FDE, RPE) and pixel-space
//! drift curves over rollout horizons.

use nalgebra::Point2;
use thiserror::Error;

use crate::geometry::{
    point_line_distance, project_epipolar_line, sampson_error, Correspondence,
    FundamentalMatrix, GeometryError, HomoPoint2,
};
use crate::rollout::RolloutResult;

/// PSNR is reported in dB and capped here so CSV values stay finite.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no valid correspondences")]
    NoCorrespondences,
    #[error("trajectory length mismatch: {pred} predicted vs {gt} ground truth")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("trajectories need at least 2 positions, got {0}")]
    TooShort(usize),
    #[error("rollout carries no per-step MSE; attach reference frames first")]
    MissingStepMse,
    #[error("horizon {0} exceeds the rollout length {1}")]
    HorizonOutOfRange(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Planar positions over time, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Point2<f64>>,
}

impl Trajectory {
    pub fn new(positions: Vec<Point2<f64>>) -> Self {
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Mean epipolar distance (pixels) and mean Sampson error over the valid
/// correspondences of a set, under one fundamental matrix.
pub fn epipolar_stats(
    corrs: &[Correspondence],
    f: &FundamentalMatrix,
) -> Result<(f64, f64), MetricsError> {
    let mut n = 0usize;
    let mut ed_sum = 0.0;
    let mut se_sum = 0.0;
    for c in corrs.iter().filter(|c| c.valid) {
        let x = HomoPoint2::from_point(&c.a);
        let xp = HomoPoint2::from_point(&c.b);
        let line = project_epipolar_line(f, &x)?;
        ed_sum += point_line_distance(&line, &xp)?;
        se_sum += sampson_error(f, &x, &xp)?;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoCorrespondences);
    }
    Ok((ed_sum / n as f64, se_sum / n as f64))
}

/// Trajectory errors:
/// ATE = (1/T) sum ||p̂_t − p_t||, FDE = ||p̂_T − p_T||,
/// RPE = (1/(T−1)) sum ||Δp̂_t − Δp_t||.
pub fn trajectory_errors(
    pred: &Trajectory,
    gt: &Trajectory,
) -> Result<(f64, f64, f64), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let t = pred.len();
    if t < 2 {
        return Err(MetricsError::TooShort(t));
    }
    let ate = pred
        .positions
        .iter()
        .zip(&gt.positions)
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / t as f64;
    let fde = (pred.positions[t - 1] - gt.positions[t - 1]).norm();
    let rpe = pred
        .positions
        .windows(2)
        .zip(gt.positions.windows(2))
        .map(|(p, g)| ((p[1] - p[0]) - (g[1] - g[0])).norm())
        .sum::<f64>()
        / (t - 1) as f64;
    Ok((ate, fde, rpe))
}

/// MSE → PSNR in dB with the cap applied (MSE 0 maps to the cap).
pub fn psnr_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

/// Per-horizon-bucket drift summary of one rollout strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftCurve {
    pub strategy: String,
    pub horizon_steps: Vec<usize>,
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
}

/// Aggregate a rollout's per-step MSE into horizon buckets: bucket i covers
/// steps (h_{i-1}, h_i] and reports their mean MSE and the PSNR of that
/// mean. The rollout must carry per-step MSE (see
/// [`RolloutResult::attach_reference`]).
pub fn drift_curve(
    result: &RolloutResult,
    horizons: &[usize],
    strategy: &str,
) -> Result<DriftCurve, MetricsError> {
    let step_mse = result.step_mse.as_ref().ok_or(MetricsError::MissingStepMse)?;
    let mut mse = Vec::with_capacity(horizons.len());
    let mut psnr = Vec::with_capacity(horizons.len());
    let mut prev = 0usize;
    for &h in horizons {
        if h == 0 || h > step_mse.len() {
            return Err(MetricsError::HorizonOutOfRange(h, step_mse.len()));
        }
        let bucket = &step_mse[prev..h];
        let mean = bucket.iter().sum::<f64>() / bucket.len() as f64;
        mse.push(mean);
        psnr.push(psnr_db(mean));
        prev = h;
    }
    Ok(DriftCurve {
        strategy: strategy.to_string(),
        horizon_steps: horizons.to_vec(),
        mse,
        psnr,
    })
}
