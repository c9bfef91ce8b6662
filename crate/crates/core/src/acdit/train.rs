//! Toy training loop: plain gradient descent on the denoising loss over
//! synthetic chunks. Demonstration only; nothing downstream depends on the
//! trained quality.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mask::AttentionMask;

use super::block::{loss_and_grads, AcDitBatch, AcDitParams, FrameScalars};
use super::schedule::{diffuse_forward, DiffusionSchedule};
use super::{AcDitConfig, AcditError, TokenTensor};

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

fn synthetic_batch(
    config: &AcDitConfig,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<AcDitBatch, AcditError> {
    let (k, l, d) = (config.k, config.l, config.d);
    let x0 = TokenTensor::random(k, l, d, rng);
    let eps = TokenTensor::random(k, l, d, rng);
    let t = rng.random_range(1..=schedule.steps());
    let x_t = diffuse_forward(&x0, t, &eps, schedule)?;
    let z_past = DMatrix::from_fn(l, d, |_, _| StandardNormal.sample(rng));
    let z_fut = DMatrix::from_fn(l, d, |_, _| StandardNormal.sample(rng));
    let masks = (0..k)
        .map(|_| (AttentionMask::all_true(l), AttentionMask::all_true(l)))
        .collect();
    let scalars = (0..k)
        .map(|f| FrameScalars {
            t: t as f64 / schedule.steps() as f64,
            k_offset: f as f64 + 1.0,
            action: [0.3, 0.0, 0.01],
            inv_action: [-0.3, 0.0, -0.01],
            k_future: (k - f) as f64,
        })
        .collect();
    Ok(AcDitBatch {
        x_t,
        z_past,
        z_fut,
        masks,
        scalars,
        eps,
    })
}

/// Run `steps` gradient-descent steps cycling over a small fixed pool of
/// synthetic chunks and report the per-step losses.
pub fn train_demo(
    params: &mut AcDitParams,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainReport, AcditError> {
    let schedule = DiffusionSchedule::default_100();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<AcDitBatch> = (0..4)
        .map(|_| synthetic_batch(&params.config, &schedule, &mut rng))
        .collect::<Result<_, _>>()?;
    let mut losses = Vec::with_capacity(steps);
    for i in 0..steps {
        let batch = &pool[i % pool.len()];
        let (loss, grads) = loss_and_grads(params, batch)?;
        params.axpy(-learning_rate, &grads);
        losses.push(loss);
    }
    Ok(TrainReport { losses })
}
