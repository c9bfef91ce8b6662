//! Rollout strategies over a generic frame-generator contract: conventional
//! autoregressive rollout and anchor-guided rollout (sparse anchors first,
//! then chunk interiors under bidirectional conditions).

use thiserror::Error;

use crate::mask::{AttentionMask, MaskSequence};
use crate::world::{invert_action_sequence, Action, Frame, Image};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("history must contain at least one frame")]
    EmptyHistory,
    #[error("history ({have} frames) is shorter than the context window ({need})")]
    ShortHistory { have: usize, need: usize },
    #[error("plan horizon {plan} does not match {actions} actions")]
    PlanActionMismatch { plan: usize, actions: usize },
    #[error("generator failed at step {step}: {message}")]
    Generator { step: usize, message: String },
    #[error("mask source failed for chunk {chunk}: {message}")]
    MaskSource { chunk: usize, message: String },
    #[error("reference frame count {got} does not match horizon {expected}")]
    ReferenceMismatch { expected: usize, got: usize },
}

/// Everything a generator may condition on for one predicted frame.
///
/// `forward_actions` always spans from the last context frame to the target,
/// so the target step is `context.last().step + forward_actions.len()`.
/// `inverse_actions`, when present, walks from the future anchor back to the
/// target.
pub struct GenerateRequest<'a> {
    pub context: &'a [Frame],
    pub forward_actions: &'a [Action],
    pub future_anchor: Option<&'a Frame>,
    pub inverse_actions: Option<&'a [Action]>,
    pub masks: Option<&'a (AttentionMask, AttentionMask)>,
}

impl GenerateRequest<'_> {
    pub fn target_step(&self) -> i64 {
        let last = self.context.last().map(|f| f.step).unwrap_or(0);
        last + self.forward_actions.len() as i64
    }
}

/// World-model contract: produce the frame reached by `forward_actions`
/// from the context. Implementations must be deterministic given their own
/// explicit seed channel.
pub trait FrameGenerator {
    fn generate(&self, request: &GenerateRequest<'_>) -> Result<Frame, String>;
}

/// Supplies per-chunk mask sequences to the anchor-guided rollout.
pub trait ChunkMaskSource {
    /// One (past, future) mask pair per interior frame of the chunk
    /// `(start, end]`, ordered by step.
    fn chunk_masks(
        &self,
        past_reference: &Frame,
        future_anchor: &Frame,
        chunk: (usize, usize),
    ) -> Result<MaskSequence, String>;
}

/// Anchor schedule over a horizon: anchor steps, and the chunk spans
/// `(k_{m-1}, k_m]` they induce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutPlan {
    pub horizon: usize,
    pub interval: usize,
    pub anchors: Vec<usize>,
    pub chunks: Vec<(usize, usize)>,
}

impl RolloutPlan {
    pub fn is_anchor(&self, step: usize) -> bool {
        self.anchors.binary_search(&step).is_ok()
    }

    /// Index of the chunk containing `step` (anchors belong to the chunk
    /// they terminate).
    pub fn chunk_of(&self, step: usize) -> Option<usize> {
        self.chunks
            .iter()
            .position(|&(lo, hi)| step > lo && step <= hi)
    }
}

/// Anchors at interval, 2*interval, ... with the final anchor forced to the
/// horizon, so the chunk spans cover (0, S] disjointly. The last chunk may
/// be shorter than the interval.
pub fn schedule_anchors(horizon: usize, interval: usize) -> RolloutPlan {
    assert!(horizon >= 1, "horizon must be at least 1");
    assert!(interval >= 1, "interval must be at least 1");
    let mut anchors: Vec<usize> = (1..)
        .map(|m| m * interval)
        .take_while(|&k| k <= horizon)
        .collect();
    if anchors.last() != Some(&horizon) {
        anchors.push(horizon);
    }
    let mut chunks = Vec::with_capacity(anchors.len());
    let mut prev = 0;
    for &k in &anchors {
        chunks.push((prev, k));
        prev = k;
    }
    RolloutPlan {
        horizon,
        interval,
        anchors,
        chunks,
    }
}

/// Frames produced by one rollout, with anchor flags and chunk membership
/// per step. Per-step MSE is filled in when reference frames are attached.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub frames: Vec<Frame>,
    pub anchor_flags: Vec<bool>,
    pub chunk_index: Vec<Option<usize>>,
    pub step_mse: Option<Vec<f64>>,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.frames.len()
    }

    /// Compute per-step pixel MSE against reference images (index 0 is
    /// step 1).
    pub fn attach_reference(&mut self, reference: &[Image]) -> Result<(), RolloutError> {
        if reference.len() != self.frames.len() {
            return Err(RolloutError::ReferenceMismatch {
                expected: self.frames.len(),
                got: reference.len(),
            });
        }
        self.step_mse = Some(
            self.frames
                .iter()
                .zip(reference)
                .map(|(f, r)| f.image.mse(r))
                .collect(),
        );
        Ok(())
    }

    /// Rollout trace rows: `step,is_anchor,mse,chunk_index` (empty fields
    /// where not applicable).
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,is_anchor,mse,chunk_index\n");
        for (i, frame) in self.frames.iter().enumerate() {
            let mse = self
                .step_mse
                .as_ref()
                .map(|m| format!("{:.12}", m[i]))
                .unwrap_or_default();
            let chunk = self.chunk_index[i]
                .map(|c| c.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                frame.step, self.anchor_flags[i] as u8, mse, chunk
            ));
        }
        out
    }
}

fn call_generator(
    gen: &dyn FrameGenerator,
    request: &GenerateRequest<'_>,
    step: usize,
) -> Result<Frame, RolloutError> {
    gen.generate(request).map_err(|message| RolloutError::Generator {
        step,
        message,
    })
}

/// Conventional autoregressive rollout: step s conditions on the last
/// `n_history` frames of (history ++ predictions) and the single action a_s.
pub fn rollout_autoregressive(
    gen: &dyn FrameGenerator,
    history: &[Frame],
    actions: &[Action],
    n_history: usize,
) -> Result<RolloutResult, RolloutError> {
    if history.is_empty() || n_history == 0 {
        return Err(RolloutError::EmptyHistory);
    }
    if history.len() < n_history {
        return Err(RolloutError::ShortHistory {
            have: history.len(),
            need: n_history,
        });
    }
    let horizon = actions.len();
    let mut timeline: Vec<Frame> = history.to_vec();
    let mut frames = Vec::with_capacity(horizon);
    for (i, action) in actions.iter().enumerate() {
        let step = i + 1;
        let context = &timeline[timeline.len() - n_history..];
        let request = GenerateRequest {
            context,
            forward_actions: std::slice::from_ref(action),
            future_anchor: None,
            inverse_actions: None,
            masks: None,
        };
        let frame = call_generator(gen, &request, step)?;
        timeline.push(frame.clone());
        frames.push(frame);
    }
    Ok(RolloutResult {
        anchor_flags: vec![false; horizon],
        chunk_index: vec![None; horizon],
        step_mse: None,
        frames,
    })
}

/// Anchor-guided rollout behavior switches used by the ablation experiments.
/// The defaults reproduce the plain two-phase strategy.
#[derive(Debug, Clone, Copy)]
pub struct AnchorRolloutOptions {
    /// Condition interior frames on the chunk's future anchor.
    pub use_future_anchor: bool,
    /// Generate interior frames jointly from the chunk boundary context
    /// (true) or recursively inside the chunk (false).
    pub joint_chunks: bool,
}

impl Default for AnchorRolloutOptions {
    fn default() -> Self {
        Self {
            use_future_anchor: true,
            joint_chunks: true,
        }
    }
}

/// Anchor-guided rollout.
///
/// Phase 1 generates every anchor directly from the observed history and the
/// action prefix up to the anchor step; anchors never see predicted frames.
/// Phase 2 fills each chunk interior conditioned on the trailing context
/// window ending at the past anchor, the future anchor, the forward action
/// prefix and the inverse action suffix for the target step, plus the
/// per-frame masks when a mask source is supplied.
pub fn rollout_anchor_guided(
    gen: &dyn FrameGenerator,
    history: &[Frame],
    actions: &[Action],
    plan: &RolloutPlan,
    n_history: usize,
    mask_source: Option<&dyn ChunkMaskSource>,
) -> Result<RolloutResult, RolloutError> {
    rollout_anchor_guided_with(
        gen,
        history,
        actions,
        plan,
        n_history,
        mask_source,
        AnchorRolloutOptions::default(),
    )
}

pub fn rollout_anchor_guided_with(
    gen: &dyn FrameGenerator,
    history: &[Frame],
    actions: &[Action],
    plan: &RolloutPlan,
    n_history: usize,
    mask_source: Option<&dyn ChunkMaskSource>,
    options: AnchorRolloutOptions,
) -> Result<RolloutResult, RolloutError> {
    if history.is_empty() || n_history == 0 {
        return Err(RolloutError::EmptyHistory);
    }
    if history.len() < n_history {
        return Err(RolloutError::ShortHistory {
            have: history.len(),
            need: n_history,
        });
    }
    if plan.horizon != actions.len() {
        return Err(RolloutError::PlanActionMismatch {
            plan: plan.horizon,
            actions: actions.len(),
        });
    }

    let horizon = plan.horizon;
    let mut predictions: Vec<Option<Frame>> = vec![None; horizon];

    // Phase 1: anchors jump directly from the observed history.
    let observed = &history[history.len() - n_history..];
    for &k in &plan.anchors {
        let request = GenerateRequest {
            context: observed,
            forward_actions: &actions[..k],
            future_anchor: None,
            inverse_actions: None,
            masks: None,
        };
        predictions[k - 1] = Some(call_generator(gen, &request, k)?);
    }

    // Phase 2: chunk interiors under past and future conditions.
    for (m, &(lo, hi)) in plan.chunks.iter().enumerate() {
        if hi - lo <= 1 {
            continue;
        }
        let anchor = predictions[hi - 1]
            .clone()
            .expect("future anchor generated in phase 1");

        let masks = match mask_source {
            Some(source) => {
                let past_ref: Frame = if lo == 0 {
                    observed.last().expect("nonempty context").clone()
                } else {
                    predictions[lo - 1].clone().expect("past anchor generated")
                };
                let seq = source
                    .chunk_masks(&past_ref, &anchor, (lo, hi))
                    .map_err(|message| RolloutError::MaskSource { chunk: m, message })?;
                Some(seq)
            }
            None => None,
        };

        let chunk_forward = &actions[lo..hi];
        let chunk_inverse = invert_action_sequence(chunk_forward);

        for s in (lo + 1)..hi {
            // Trailing window of N frames ending at the chunk start. The
            // first chunk reads observed history; later chunks read earlier
            // predictions.
            let context: Vec<Frame> = if options.joint_chunks {
                collect_window(history, &predictions, lo, n_history)
            } else {
                collect_window(history, &predictions, s - 1, n_history)
            };
            let forward = &actions[lo..s];
            let inverse = &chunk_inverse[..hi - s];
            let mask_pair = masks
                .as_ref()
                .map(|seq| &seq.masks[s - lo - 1]);
            let request = GenerateRequest {
                context: &context,
                forward_actions: if options.joint_chunks {
                    forward
                } else {
                    std::slice::from_ref(&actions[s - 1])
                },
                future_anchor: options.use_future_anchor.then_some(&anchor),
                inverse_actions: options.use_future_anchor.then_some(inverse),
                masks: mask_pair,
            };
            predictions[s - 1] = Some(call_generator(gen, &request, s)?);
        }
    }

    let frames: Vec<Frame> = predictions
        .into_iter()
        .map(|f| f.expect("all steps generated"))
        .collect();
    let anchor_flags = (1..=horizon).map(|s| plan.is_anchor(s)).collect();
    let chunk_index = (1..=horizon).map(|s| plan.chunk_of(s)).collect();
    Ok(RolloutResult {
        frames,
        anchor_flags,
        chunk_index,
        step_mse: None,
    })
}

/// Last `n` frames of (history ++ predictions[..=end-1]) where `end` is a
/// 1-based step.
fn collect_window(history: &[Frame], predictions: &[Option<Frame>], end: usize, n: usize) -> Vec<Frame> {
    let mut window = Vec::with_capacity(n);
    let mut need = n;
    let mut s = end;
    while need > 0 && s >= 1 {
        window.push(
            predictions[s - 1]
                .clone()
                .expect("window step generated before use"),
        );
        need -= 1;
        s -= 1;
    }
    let mut h = history.len();
    while need > 0 && h >= 1 {
        window.push(history[h - 1].clone());
        need -= 1;
        h -= 1;
    }
    window.reverse();
    window
}
