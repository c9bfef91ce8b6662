//! Experiment stages: scene synthesis, mask construction, the AR vs
//! anchor-guided drift sweep, the component ablation matrix, and planning.
//! Every stage is a pure function of the config and seed; reruns produce
//! byte-identical artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use drnm_core::generators::{oracle_images, stationary_history, ContextCoupledGenerator};
use drnm_core::mask::{write_mask_bytes, TokenGrid};
use drnm_core::metrics::{psnr_db, trajectory_errors, Trajectory};
use drnm_core::planner::{cem_plan, PlanGroundTruth, RolloutStrategy};
use drnm_core::rollout::{
    rollout_anchor_guided, rollout_anchor_guided_with, rollout_autoregressive,
    schedule_anchors, AnchorRolloutOptions,
};
use drnm_core::triplet::{mix, PoseTrackMaskSource, TripletPipeline};
use drnm_core::world::{apply_action_sequence, render, Action, CameraIntrinsics, Pose, Scene};

use crate::config::ExperimentConfig;
use crate::parallel::parallel_map_indexed;

/// Stage seeds are derived from the master seed with fixed salts.
const SALT_SCENE: u64 = 1;
const SALT_NOMINAL_ACTIONS: u64 = 2;
const SALT_MASKS: u64 = 3;
const SALT_ROLLOUT: u64 = 4;
const SALT_ABLATE: u64 = 5;
const SALT_PLAN: u64 = 6;

#[derive(Debug)]
pub struct RunError(pub String);

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for RunError {}

fn fail(e: impl std::fmt::Display) -> RunError {
    RunError(e.to_string())
}

/// One row of the metrics CSV; empty fields where a metric does not apply.
#[derive(Debug, Clone, Default)]
pub struct MetricsRow {
    pub strategy: String,
    pub horizon: Option<usize>,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub mean_ed: Option<f64>,
    pub mean_se: Option<f64>,
    pub ate: Option<f64>,
    pub fde: Option<f64>,
    pub rpe: Option<f64>,
}

pub const METRICS_HEADER: &str = "strategy,horizon,mse,psnr,mean_ed,mean_se,ate,fde,rpe";

impl MetricsRow {
    fn csv_line(&self) -> String {
        let num = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let int = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.strategy,
            int(self.horizon),
            num(self.mse),
            num(self.psnr),
            num(self.mean_ed),
            num(self.mean_se),
            num(self.ate),
            num(self.fde),
            num(self.rpe),
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Accumulates written files plus metrics rows across stages.
pub struct StageSink {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub metrics: Vec<MetricsRow>,
}

impl StageSink {
    pub fn new(dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir).map_err(fail)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            metrics: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        std::fs::write(self.dir.join(name), bytes).map_err(fail)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.canonical_text().as_bytes());
    digest.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

fn scene_for(cfg: &ExperimentConfig) -> Scene {
    Scene::random(
        mix(cfg.seed, SALT_SCENE),
        cfg.scene_points,
        Scene::default_bounds(),
    )
}

/// Nominal gently-curving action sequence used by the mask stage.
fn nominal_actions(cfg: &ExperimentConfig, n: usize) -> Vec<Action> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_NOMINAL_ACTIONS));
    (0..n)
        .map(|_| {
            Action::new(
                0.35 + rng.random_range(-0.05..0.05),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.04..0.04),
            )
            .expect("bounded action")
        })
        .collect()
}

/// Per-seed action sequence for the drift sweep.
fn sweep_actions(cfg: &ExperimentConfig, seed_index: usize, n: usize) -> Vec<Action> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(
        mix(cfg.seed, SALT_ROLLOUT),
        seed_index as u64,
    ));
    (0..n)
        .map(|_| {
            Action::new(
                0.3 + rng.random_range(-0.05..0.05),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.03..0.03),
            )
            .expect("bounded action")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Write the scene and the nominal trajectory.
pub fn stage_simulate(cfg: &ExperimentConfig, sink: &mut StageSink) -> Result<(), RunError> {
    let scene = scene_for(cfg);
    sink.write("scene.txt", scene.to_text().as_bytes())?;

    let n = cfg.max_horizon();
    let actions = nominal_actions(cfg, n);
    let mut pose = Pose::origin();
    let mut csv = String::from("step,x,y,yaw\n");
    let _ = writeln!(csv, "0,{:.9},{:.9},{:.9}", pose.x, pose.y, pose.yaw);
    for (i, a) in actions.iter().enumerate() {
        pose = drnm_core::world::apply_action(pose, *a);
        let _ = writeln!(csv, "{},{:.9},{:.9},{:.9}", i + 1, pose.x, pose.y, pose.yaw);
    }
    sink.write("trajectory.csv", csv.as_bytes())?;
    Ok(())
}

/// Build the mask sequence for the first chunk of the nominal trajectory and
/// report per-frame statistics.
pub fn stage_masks(cfg: &ExperimentConfig, sink: &mut StageSink) -> Result<(), RunError> {
    let scene = scene_for(cfg);
    let intr = CameraIntrinsics::default_224();
    let grid = TokenGrid::new(intr.width, intr.height, cfg.grid_side).map_err(fail)?;
    let pipeline = TripletPipeline::new(&scene, intr, grid, cfg.triplet_config());

    let span = cfg.interval.max(2);
    let actions = nominal_actions(cfg, span);
    let mut poses = vec![Pose::origin()];
    for a in &actions {
        poses.push(drnm_core::world::apply_action(*poses.last().unwrap(), *a));
    }
    let goals: Vec<Pose> = poses[1..span].to_vec();
    let seed = mix(cfg.seed, SALT_MASKS);

    let mut stats_csv =
        String::from("frame,gated,constrained_past,constrained_fut,mean_ed,mean_se\n");
    for (i, goal) in goals.iter().enumerate() {
        let outcome = pipeline
            .triplet(&poses[0], goal, &poses[span], mix(seed, 100 + i as u64))
            .map_err(fail)?;
        let (mean_ed, mean_se) = match &outcome.geometry.f_pg.f {
            Some(f) => {
                let (ed, se) =
                    drnm_core::metrics::epipolar_stats(&outcome.corrs_pg, f).map_err(fail)?;
                (Some(ed), Some(se))
            }
            None => (None, None),
        };
        let _ = writeln!(
            stats_csv,
            "{},{},{},{},{},{}",
            i + 1,
            outcome.gated as u8,
            outcome.masks.0.constrained_rows().count(),
            outcome.masks.1.constrained_rows().count(),
            mean_ed.map(|v| format!("{v:.9}")).unwrap_or_default(),
            mean_se.map(|v| format!("{v:.9}")).unwrap_or_default(),
        );
        sink.metrics.push(MetricsRow {
            strategy: "masks".into(),
            horizon: Some(i + 1),
            mean_ed,
            mean_se,
            ..Default::default()
        });
    }

    // Smoothed sequence over the gated frames, exactly as the rollout
    // integration consumes it.
    let seq = pipeline
        .chunk_masks(&poses[0], &goals, &poses[span], seed)
        .map_err(fail)?;
    sink.write("masks.drnm", &write_mask_bytes(&seq).map_err(fail)?)?;
    sink.write("mask_stats.csv", stats_csv.as_bytes())?;
    Ok(())
}

struct SweepOutcome {
    ar_mse: Vec<f64>,
    anchor_mse: Vec<f64>,
    traces: Option<(String, String)>,
}

/// Shared-seed A/B drift sweep between autoregressive and anchor-guided
/// rollout under the context-coupled noisy generator.
pub fn stage_rollout(
    cfg: &ExperimentConfig,
    workers: usize,
    sink: &mut StageSink,
) -> Result<(), RunError> {
    let scene = scene_for(cfg);
    let intr = CameraIntrinsics::default_224();
    let horizon = cfg.max_horizon();
    let plan = schedule_anchors(horizon, cfg.interval);
    let start = Pose::origin();
    let history = stationary_history(&scene, &intr, &start, cfg.history);

    let outcomes: Vec<Result<SweepOutcome, RunError>> =
        parallel_map_indexed(cfg.rollout_seeds, workers, |i| {
            let actions = sweep_actions(cfg, i, horizon);
            let oracle = oracle_images(&scene, &intr, &start, &actions);
            let gen = ContextCoupledGenerator::new(
                scene.clone(),
                intr,
                cfg.sigma_base,
                cfg.lambda,
                mix(mix(cfg.seed, SALT_ROLLOUT), 7_000 + i as u64),
            );
            let mut ar =
                rollout_autoregressive(&gen, &history, &actions, cfg.history).map_err(fail)?;
            ar.attach_reference(&oracle).map_err(fail)?;
            let mut anchor =
                rollout_anchor_guided(&gen, &history, &actions, &plan, cfg.history, None)
                    .map_err(fail)?;
            anchor.attach_reference(&oracle).map_err(fail)?;
            let traces = (i == 0).then(|| (ar.trace_csv(), anchor.trace_csv()));
            Ok(SweepOutcome {
                ar_mse: ar.step_mse.expect("attached"),
                anchor_mse: anchor.step_mse.expect("attached"),
                traces,
            })
        });

    let mut ar_mean = vec![0.0f64; horizon];
    let mut anchor_mean = vec![0.0f64; horizon];
    let mut traces = None;
    let seeds = cfg.rollout_seeds as f64;
    for outcome in outcomes {
        let o = outcome?;
        for (acc, v) in ar_mean.iter_mut().zip(&o.ar_mse) {
            *acc += v / seeds;
        }
        for (acc, v) in anchor_mean.iter_mut().zip(&o.anchor_mse) {
            *acc += v / seeds;
        }
        if let Some(t) = o.traces {
            traces = Some(t);
        }
    }

    let (ar_trace, anchor_trace) = traces.expect("at least one seed");
    sink.write("rollout_ar.csv", ar_trace.as_bytes())?;
    sink.write("rollout_anchor.csv", anchor_trace.as_bytes())?;

    let mut drift = String::from("step,ar_mse,anchor_mse\n");
    for s in 0..horizon {
        let _ = writeln!(drift, "{},{:.12},{:.12}", s + 1, ar_mean[s], anchor_mean[s]);
    }
    sink.write("drift_curve.csv", drift.as_bytes())?;

    let mut prev = 0usize;
    for &h in &cfg.horizon_steps() {
        let ar_bucket = ar_mean[prev..h].iter().sum::<f64>() / (h - prev) as f64;
        let anchor_bucket = anchor_mean[prev..h].iter().sum::<f64>() / (h - prev) as f64;
        sink.metrics.push(MetricsRow {
            strategy: "ar".into(),
            horizon: Some(h),
            mse: Some(ar_bucket),
            psnr: Some(psnr_db(ar_bucket)),
            ..Default::default()
        });
        sink.metrics.push(MetricsRow {
            strategy: "anchor".into(),
            horizon: Some(h),
            mse: Some(anchor_bucket),
            psnr: Some(psnr_db(anchor_bucket)),
            ..Default::default()
        });
        prev = h;
    }
    Ok(())
}

/// Terminal error of every (future-anchor, epipolar-mask, chunk) toggle
/// combination per anchor interval.
pub fn stage_ablate(
    cfg: &ExperimentConfig,
    workers: usize,
    sink: &mut StageSink,
) -> Result<(), RunError> {
    let scene = scene_for(cfg);
    let intr = CameraIntrinsics::default_224();
    let grid = TokenGrid::new(intr.width, intr.height, cfg.grid_side).map_err(fail)?;
    let pipeline = TripletPipeline::new(&scene, intr, grid, cfg.triplet_config());
    let horizon = cfg.ablate_horizon;
    let start = Pose::origin();
    let history = stationary_history(&scene, &intr, &start, cfg.history);

    let mut csv = String::from("interval,future_anchor,epi_mask,chunk,mean_mse,psnr\n");
    for &interval in &cfg.ablate_intervals {
        let plan = schedule_anchors(horizon, interval);
        for combo in 0..8u32 {
            let fa = combo & 1 != 0;
            let epi_mask = combo & 2 != 0;
            let chunk = combo & 4 != 0;
            let options = AnchorRolloutOptions {
                use_future_anchor: fa,
                joint_chunks: chunk,
            };
            let per_seed: Vec<Result<f64, RunError>> =
                parallel_map_indexed(cfg.ablate_seeds, workers, |i| {
                    let actions = sweep_actions(cfg, 50_000 + i, horizon);
                    let oracle = oracle_images(&scene, &intr, &start, &actions);
                    let gen = ContextCoupledGenerator::new(
                        scene.clone(),
                        intr,
                        cfg.sigma_base,
                        cfg.lambda,
                        mix(mix(cfg.seed, SALT_ABLATE), i as u64),
                    );
                    let source = PoseTrackMaskSource::from_actions(
                        &pipeline,
                        start,
                        &actions,
                        mix(mix(cfg.seed, SALT_ABLATE), 900 + i as u64),
                    );
                    let mask_source = epi_mask
                        .then_some(&source as &dyn drnm_core::rollout::ChunkMaskSource);
                    let mut result = rollout_anchor_guided_with(
                        &gen,
                        &history,
                        &actions,
                        &plan,
                        cfg.history,
                        mask_source,
                        options,
                    )
                    .map_err(fail)?;
                    result.attach_reference(&oracle).map_err(fail)?;
                    let mse = result.step_mse.expect("attached");
                    Ok(mse.iter().sum::<f64>() / mse.len() as f64)
                });
            let mut mean = 0.0;
            for t in per_seed {
                mean += t? / cfg.ablate_seeds as f64;
            }
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.12},{:.6}",
                interval,
                fa as u8,
                epi_mask as u8,
                chunk as u8,
                mean,
                psnr_db(mean)
            );
        }
    }
    sink.write("ablate.csv", csv.as_bytes())?;
    Ok(())
}

/// CEM planning toward a rendered goal image, under both rollout strategies.
pub fn stage_plan(cfg: &ExperimentConfig, sink: &mut StageSink) -> Result<(), RunError> {
    let scene = scene_for(cfg);
    let intr = CameraIntrinsics::default_224();
    let start = Pose::origin();
    let gen = ContextCoupledGenerator::noiseless(scene.clone(), intr);
    let history = stationary_history(&scene, &intr, &start, cfg.history);

    let truth: Vec<Action> = (0..cfg.plan_horizon)
        .map(|_| Action::new(0.4, 0.0, 0.0).expect("valid action"))
        .collect();
    let goal_pose = apply_action_sequence(start, &truth);
    let goal = render(&scene, &intr, &goal_pose).image;
    let mut pose = start;
    let gt_positions: Vec<nalgebra::Point2<f64>> = truth
        .iter()
        .map(|a| {
            pose = drnm_core::world::apply_action(pose, *a);
            pose.position()
        })
        .collect();
    let ground_truth = PlanGroundTruth {
        goal_pose,
        trajectory: Some(Trajectory::new(gt_positions)),
    };

    let cem = cfg.cem_config(mix(cfg.seed, SALT_PLAN));
    for (strategy, label, file) in [
        (RolloutStrategy::Autoregressive, "plan_ar", "plan_ar.csv"),
        (
            RolloutStrategy::AnchorGuided {
                interval: cfg.interval.min(cfg.plan_horizon),
            },
            "plan_anchor",
            "plan_anchor.csv",
        ),
    ] {
        let result = cem_plan(
            &gen,
            &history,
            &goal,
            &ground_truth,
            strategy,
            cfg.history,
            &cem,
        )
        .map_err(fail)?;
        sink.write(file, result.report_csv().as_bytes())?;
        let gt_traj = ground_truth.trajectory.as_ref().expect("present");
        let (ate, _, rpe) = trajectory_errors(&result.trajectory, gt_traj).map_err(fail)?;
        sink.metrics.push(MetricsRow {
            strategy: label.into(),
            horizon: Some(cfg.plan_horizon),
            ate: Some(ate),
            fde: Some(result.fde),
            rpe: Some(rpe),
            ..Default::default()
        });
    }
    Ok(())
}

/// Manifest: config hash, seed, and the produced files in creation order.
pub fn write_manifest(cfg: &ExperimentConfig, sink: &mut StageSink) -> Result<(), RunError> {
    let mut text = String::new();
    let _ = writeln!(text, "config_sha256 = {}", config_hash(cfg));
    let _ = writeln!(text, "seed = {}", cfg.seed);
    for f in sink.files.clone() {
        let _ = writeln!(text, "file = {f}");
    }
    let _ = writeln!(text, "file = manifest.txt");
    sink.write("manifest.txt", text.as_bytes())?;
    Ok(())
}

/// Run every stage into `out`. Identical config and seed produce
/// byte-identical CSV artifacts.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: usize,
) -> Result<Vec<String>, RunError> {
    let mut sink = StageSink::new(out)?;
    stage_simulate(cfg, &mut sink)?;
    stage_masks(cfg, &mut sink)?;
    stage_rollout(cfg, workers, &mut sink)?;
    stage_ablate(cfg, workers, &mut sink)?;
    stage_plan(cfg, &mut sink)?;
    let metrics = metrics_csv(&sink.metrics);
    sink.write("metrics.csv", metrics.as_bytes())?;
    write_manifest(cfg, &mut sink)?;
    Ok(sink.files)
}
