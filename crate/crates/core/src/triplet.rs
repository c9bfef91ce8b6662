//! Mask-construction pipeline for (past, goal, future) view triplets:
//! correspondence sampling, confidence/validity filtering, robust pairwise
//! geometry, reliability gating and temporal smoothing over a chunk.

use nalgebra::Point2;
use thiserror::Error;

use crate::geometry::{ransac_fundamental, Correspondence, RansacResult};
use crate::mask::{
    build_triplet_masks, gate_triplet, smooth_mask_sequence, AttentionMask, MaskError,
    MaskSequence, TokenGrid, TripletGeometry,
};
use crate::world::{sample_correspondences, CameraIntrinsics, Pose, Scene, WorldError};

#[derive(Debug, Error)]
pub enum TripletError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Correspondence source settings.
#[derive(Debug, Clone, Copy)]
pub struct MatcherConfig {
    pub noise_px: f64,
    pub outlier_rate: f64,
    /// Matches below this confidence are discarded.
    pub tau_match: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            noise_px: 0.0,
            outlier_rate: 0.0,
            tau_match: 0.8,
        }
    }
}

/// Robust estimation settings.
#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            iterations: 2000,
        }
    }
}

/// Reliability gate settings.
#[derive(Debug, Clone, Copy)]
pub struct GateConfig {
    pub n_min: usize,
    pub n_sat: usize,
    pub tau_rel: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            n_min: 16,
            n_sat: 64,
            tau_rel: 0.1,
        }
    }
}

/// Temporal smoothing settings.
#[derive(Debug, Clone, Copy)]
pub struct SmoothConfig {
    pub alpha: f64,
    pub tau_temp: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            tau_temp: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TripletConfig {
    pub matcher: MatcherConfig,
    pub ransac: RansacConfig,
    pub gate: GateConfig,
    pub smooth: SmoothConfig,
}

/// Keep matches that are regionual-valid and confident enough.
pub fn filter_matches(corrs: &[Correspondence], tau_match: f64) -> Vec<Correspondence> {
    corrs
        .iter()
        .copied()
        .filter(|c| c.valid && c.confidence >= tau_match)
        .collect()
}

/// Everything the mask builder needs for one goal frame, plus the per-pair
/// statistics the experiment reports consume.
#[derive(Debug, Clone)]
pub struct TripletOutcome {
    pub geometry: TripletGeometry,
    pub gated: bool,
    /// Filtered past-future match endpoints (index-aligned pairs).
    pub past_pts: Vec<Point2<f64>>,
    pub fut_pts: Vec<Point2<f64>>,
    /// Filtered past-goal correspondences, for epipolar statistics.
    pub corrs_pg: Vec<Correspondence>,
    pub masks: (AttentionMask, AttentionMask),
}

/// Pipeline over the synthetic world. All randomness is derived from the
/// seed passed to each call.
pub struct TripletPipeline<'a> {
    pub scene: &'a Scene,
    pub intrinsics: CameraIntrinsics,
    pub grid: TokenGrid,
    pub config: TripletConfig,
}

impl<'a> TripletPipeline<'a> {
    pub fn new(
        scene: &'a Scene,
        intrinsics: CameraIntrinsics,
        grid: TokenGrid,
        config: TripletConfig,
    ) -> Self {
        Self {
            scene,
            intrinsics,
            grid,
            config,
        }
    }

    fn pair_matches(
        &self,
        a: &Pose,
        b: &Pose,
        seed: u64,
    ) -> Result<Vec<Correspondence>, TripletError> {
        let sampled = sample_correspondences(
            self.scene,
            &self.intrinsics,
            a,
            b,
            self.config.matcher.noise_px,
            self.config.matcher.outlier_rate,
            seed,
        )?;
        Ok(filter_matches(
            &sampled.correspondences,
            self.config.matcher.tau_match,
        ))
    }

    fn robust_pair(&self, corrs: &[Correspondence], seed: u64) -> RansacResult {
        ransac_fundamental(
            corrs,
            self.config.ransac.threshold_px,
            self.config.ransac.iterations,
            seed,
        )
    }

    /// Match, estimate and gate one triplet. The reference observation is the
    /// last frame of the past context; the future view is the chunk's anchor.
    pub fn triplet(
        &self,
        past: &Pose,
        goal: &Pose,
        fut: &Pose,
        seed: u64,
    ) -> Result<TripletOutcome, TripletError> {
        let corrs_pg = self.pair_matches(past, goal, mix(seed, 1))?;
        let corrs_pf = self.pair_matches(past, fut, mix(seed, 2))?;
        let corrs_fg = self.pair_matches(fut, goal, mix(seed, 3))?;

        let f_pg = self.robust_pair(&corrs_pg, mix(seed, 4));
        let f_pf = self.robust_pair(&corrs_pf, mix(seed, 5));
        let f_fg = self.robust_pair(&corrs_fg, mix(seed, 6));

        let geometry = TripletGeometry::from_results(
            f_pg,
            f_fg,
            f_pf,
            self.config.gate.n_min,
            self.config.gate.n_sat,
        )?;
        let gated = gate_triplet(&geometry, self.config.gate.tau_rel);

        let past_pts: Vec<Point2<f64>> = corrs_pf.iter().map(|c| c.a).collect();
        let fut_pts: Vec<Point2<f64>> = corrs_pf.iter().map(|c| c.b).collect();

        let l = self.grid.token_count();
        let masks = if gated {
            build_triplet_masks(&past_pts, &fut_pts, &geometry, &self.grid)?
        } else {
            (AttentionMask::all_true(l), AttentionMask::all_true(l))
        };

        Ok(TripletOutcome {
            geometry,
            gated,
            past_pts,
            fut_pts,
            corrs_pg,
            masks,
        })
    }

    /// Mask sequence for the goal frames of one chunk, smoothed over time.
    ///
    /// Frames that fail the reliability gate never enter the moving average;
    /// they keep all-true masks and the average carries across them.
    pub fn chunk_masks(
        &self,
        past: &Pose,
        goals: &[Pose],
        fut: &Pose,
        seed: u64,
    ) -> Result<MaskSequence, TripletError> {
        let l = self.grid.token_count();
        let mut outcomes = Vec::with_capacity(goals.len());
        for (i, goal) in goals.iter().enumerate() {
            outcomes.push(self.triplet(past, goal, fut, mix(seed, 100 + i as u64))?);
        }

        let gated_idx: Vec<usize> = outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.gated)
            .map(|(i, _)| i)
            .collect();

        let smooth_past = smooth_mask_sequence(
            &gated_idx
                .iter()
                .map(|&i| outcomes[i].masks.0.clone())
                .collect::<Vec<_>>(),
            self.config.smooth.alpha,
            self.config.smooth.tau_temp,
        )?;
        let smooth_fut = smooth_mask_sequence(
            &gated_idx
                .iter()
                .map(|&i| outcomes[i].masks.1.clone())
                .collect::<Vec<_>>(),
            self.config.smooth.alpha,
            self.config.smooth.tau_temp,
        )?;

        let mut masks: Vec<(AttentionMask, AttentionMask)> = (0..goals.len())
            .map(|_| (AttentionMask::all_true(l), AttentionMask::all_true(l)))
            .collect();
        for (k, &i) in gated_idx.iter().enumerate() {
            masks[i] = (smooth_past[k].clone(), smooth_fut[k].clone());
        }
        Ok(MaskSequence {
            masks,
            gated: !gated_idx.is_empty(),
        })
    }
}

/// Mask source for anchor-guided rollouts: builds each chunk's mask
/// sequence from the commanded pose track (predicted frames carry the
/// commanded pose, so the chunk boundaries map directly onto the track).
pub struct PoseTrackMaskSource<'a> {
    pub pipeline: &'a TripletPipeline<'a>,
    /// Pose per step, index 0 = rollout start.
    pub poses: Vec<Pose>,
    pub seed: u64,
}

impl<'a> PoseTrackMaskSource<'a> {
    pub fn from_actions(
        pipeline: &'a TripletPipeline<'a>,
        start: Pose,
        actions: &[crate::world::Action],
        seed: u64,
    ) -> PoseTrackMaskSource<'a> {
        let mut poses = Vec::with_capacity(actions.len() + 1);
        poses.push(start);
        let mut p = start;
        for a in actions {
            p = crate::world::apply_action(p, *a);
            poses.push(p);
        }
        PoseTrackMaskSource {
            pipeline,
            poses,
            seed,
        }
    }
}

impl crate::rollout::ChunkMaskSource for PoseTrackMaskSource<'_> {
    fn chunk_masks(
        &self,
        _past_reference: &crate::world::Frame,
        _future_anchor: &crate::world::Frame,
        chunk: (usize, usize),
    ) -> Result<MaskSequence, String> {
        let (lo, hi) = chunk;
        if hi >= self.poses.len() + 1 || hi <= lo {
            return Err(format!("chunk ({lo}, {hi}) outside the pose track"));
        }
        let goals: Vec<Pose> = ((lo + 1)..hi).map(|s| self.poses[s]).collect();
        self.pipeline
            .chunk_masks(
                &self.poses[lo],
                &goals,
                &self.poses[hi],
                mix(self.seed, lo as u64),
            )
            .map_err(|e| e.to_string())
    }
}

/// Stable per-purpose seed derivation.
pub fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .rotate_left(17)
        .wrapping_mul(0xD1B5_4A32_D192_ED03)
}
