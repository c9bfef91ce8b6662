//! Frame generators for rollout experiments.
//!
//! [`ContextCoupledGenerator`] is the workhorse: it renders the ground-truth
//! view commanded by the actions, then corrupts it with the conditioning
//! context's own accumulated error plus fresh Gaussian noise whose strength
//! is coupled to the context quality. Feeding predictions back as context
//! therefore compounds error, which is exactly the failure mode the
//! anchor-guided strategy is designed to avoid. With zero noise settings it
//! degenerates to a perfect oracle that reproduces rendered frames
//! bit-exactly.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rollout::{FrameGenerator, GenerateRequest};
use crate::triplet::mix;
use crate::world::{apply_action_sequence, render, CameraIntrinsics, Frame, Image, Pose, Scene};

/// Cache key: exact bit pattern of a pose.
type PoseKey = [u64; 3];

fn pose_key(p: &Pose) -> PoseKey {
    [p.x.to_bits(), p.y.to_bits(), p.yaw.to_bits()]
}

/// Renders ground truth for the commanded pose and couples its output noise
/// to the conditioning quality: sigma_s = sigma_base + lambda * contextMSE,
/// where contextMSE is the mean pixel MSE of the conditioning frames against
/// their own ground-truth renders. The mean residual of the conditioning
/// frames is carried into the output, so recursive conditioning accumulates
/// error while anchor-bounded conditioning does not.
pub struct ContextCoupledGenerator {
    scene: Scene,
    intrinsics: CameraIntrinsics,
    pub sigma_base: f64,
    pub lambda: f64,
    seed: u64,
    render_cache: Mutex<HashMap<PoseKey, Image>>,
}

impl ContextCoupledGenerator {
    pub fn new(
        scene: Scene,
        intrinsics: CameraIntrinsics,
        sigma_base: f64,
        lambda: f64,
        seed: u64,
    ) -> Self {
        Self {
            scene,
            intrinsics,
            sigma_base,
            lambda,
            seed,
            render_cache: Mutex::new(HashMap::new()),
        }
    }

    /// Perfect oracle: zero fresh noise and zero context coupling.
    pub fn noiseless(scene: Scene, intrinsics: CameraIntrinsics) -> Self {
        Self::new(scene, intrinsics, 0.0, 0.0, 0)
    }

    /// Ground-truth render for a pose, cached by exact pose bits.
    pub fn truth(&self, pose: &Pose) -> Image {
        let key = pose_key(pose);
        let mut cache = self.render_cache.lock().expect("render cache poisoned");
        cache
            .entry(key)
            .or_insert_with(|| render(&self.scene, &self.intrinsics, pose).image)
            .clone()
    }
}

impl FrameGenerator for ContextCoupledGenerator {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Frame, String> {
        let last = request
            .context
            .last()
            .ok_or_else(|| "empty context".to_string())?;
        let target_pose = apply_action_sequence(last.pose, request.forward_actions);
        let target_step = request.target_step();

        // Conditioning set: context window plus the future anchor when given.
        let conditioning: Vec<&Frame> = request
            .context
            .iter()
            .chain(request.future_anchor.into_iter())
            .collect();
        let count = conditioning.len() as f64;

        let truth_target = self.truth(&target_pose);
        let npx = truth_target.data.len();
        let mut carry = vec![0.0f64; npx];
        let mut context_mse = 0.0;
        for frame in &conditioning {
            let truth = self.truth(&frame.pose);
            let mut acc = 0.0;
            for (i, (observed, expected)) in
                frame.image.data.iter().zip(&truth.data).enumerate()
            {
                let r = observed - expected;
                carry[i] += r;
                acc += r * r;
            }
            context_mse += acc / npx as f64;
        }
        context_mse /= count;
        let sigma = self.sigma_base + self.lambda * context_mse;

        let mut data = truth_target.data.clone();
        if carry.iter().any(|&c| c != 0.0) {
            for (v, c) in data.iter_mut().zip(&carry) {
                *v += c / count;
            }
        }
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, target_step as u64));
            for v in data.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }

        Ok(Frame {
            image: Image {
                width: truth_target.width,
                height: truth_target.height,
                data,
            },
            pose: target_pose,
            step: target_step,
        })
    }
}

/// Returns the last context frame unchanged (at the commanded pose/step).
/// Useful as a trivially predictable fixture.
pub struct IdentityGenerator;

impl FrameGenerator for IdentityGenerator {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Frame, String> {
        let last = request
            .context
            .last()
            .ok_or_else(|| "empty context".to_string())?;
        Ok(Frame {
            image: last.image.clone(),
            pose: apply_action_sequence(last.pose, request.forward_actions),
            step: request.target_step(),
        })
    }
}

/// What one generator call saw; used to audit context provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub target_step: i64,
    pub context_steps: Vec<i64>,
    pub has_future_anchor: bool,
    pub has_inverse_actions: bool,
    pub has_masks: bool,
}

/// Wraps a generator and records every call.
pub struct RecordingGenerator<G> {
    inner: G,
    calls: Mutex<Vec<CallRecord>>,
}

impl<G> RecordingGenerator<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned").clone()
    }
}

impl<G: FrameGenerator> FrameGenerator for RecordingGenerator<G> {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Frame, String> {
        self.calls.lock().expect("call log poisoned").push(CallRecord {
            target_step: request.target_step(),
            context_steps: request.context.iter().map(|f| f.step).collect(),
            has_future_anchor: request.future_anchor.is_some(),
            has_inverse_actions: request.inverse_actions.is_some(),
            has_masks: request.masks.is_some(),
        });
        self.inner.generate(request)
    }
}

/// Observed history for a rollout: `n` copies of the start view at steps
/// -(n-1)..=0 (the agent sits still before the rollout begins).
pub fn stationary_history(
    scene: &Scene,
    intrinsics: &CameraIntrinsics,
    start: &Pose,
    n: usize,
) -> Vec<Frame> {
    let base = render(scene, intrinsics, start);
    (0..n)
        .map(|i| Frame {
            image: base.image.clone(),
            pose: *start,
            step: i as i64 - n as i64 + 1,
        })
        .collect()
}

/// Ground-truth images for steps 1..=len(actions) commanded from `start`.
pub fn oracle_images(
    scene: &Scene,
    intrinsics: &CameraIntrinsics,
    start: &Pose,
    actions: &[crate::world::Action],
) -> Vec<Image> {
    let mut pose = *start;
    actions
        .iter()
        .map(|a| {
            pose = crate::world::apply_action(pose, *a);
            render(scene, intrinsics, &pose).image
        })
        .collect()
}
