//! Diffusion forward process: cumulative noise schedule, the noising map
//! x(t) = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, and the
//! mean-squared denoising loss.

use super::{AcditError, TokenTensor};

/// Per-step cumulative signal fractions alpha_bar, indexed 0..=T with
/// alpha_bar[0] = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, AcditError> {
        if steps == 0 {
            return Err(AcditError::BadSchedule("zero steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(AcditError::BadSchedule(format!(
                "beta range ({beta_start}, {beta_end}) invalid"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    /// Test-scale default: 100 steps, beta 1e-4 to 0.02.
    pub fn default_100() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, AcditError> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(AcditError::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
    }
}

/// x(t) = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. `t = 0` is the
/// identity extension.
pub fn diffuse_forward(
    x0: &TokenTensor,
    t: usize,
    eps: &TokenTensor,
    schedule: &DiffusionSchedule,
) -> Result<TokenTensor, AcditError> {
    if !x0.same_shape(eps) {
        return Err(AcditError::Shape("x0 and eps differ in shape".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    x0.scaled_add(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Mean squared error between the drawn noise and the prediction.
pub fn denoising_loss(eps: &TokenTensor, eps_pred: &TokenTensor) -> Result<f64, AcditError> {
    if !eps.same_shape(eps_pred) {
        return Err(AcditError::Shape("eps and prediction differ in shape".into()));
    }
    let n = eps.entry_count() as f64;
    let sum: f64 = eps
        .frames
        .iter()
        .zip(&eps_pred.frames)
        .map(|(a, b)| (a - b).iter().map(|&x| x * x).sum::<f64>())
        .sum();
    Ok(sum / n)
}
