//! Noise schedules, the forward process, Tweedie denoising, and the
//! deterministic DDIM update.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Linear variance schedule with derived cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// alpha_bar at timestep t, with the convention alpha_bar(0) = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(CoreError::InvalidInput(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Linear interpolation of beta over T steps; alpha and alpha_bar derived.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 || beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end {
        return Err(CoreError::InvalidInput(format!(
            "schedule T={t_max} beta=[{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
    })
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar_at(t);
    x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
pub fn tweedie_denoise(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar_at(t);
    if ab == 0.0 {
        return Err(CoreError::InvalidInput("alpha_bar is zero".into()));
    }
    Ok(x_t
        .sub(&eps_hat.scale((1.0 - ab).sqrt()))?
        .scale(1.0 / ab.sqrt()))
}

/// Deterministic (eta = 0) DDIM update from t to t_prev.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(CoreError::InvalidInput(format!(
            "ddim_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    sched.check_t(t)?;
    let x0_hat = tweedie_denoise(x_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar_at(t_prev);
    x0_hat
        .scale(ab_prev.sqrt())
        .add(&eps_hat.scale((1.0 - ab_prev).sqrt()))
}

/// Mean squared error between noise prediction and target.
pub fn dsm_loss(model_eps: &Tensor, true_eps: &Tensor) -> Result<f64> {
    if model_eps.shape != true_eps.shape {
        return Err(CoreError::Dimension(format!(
            "dsm_loss {:?} vs {:?}",
            model_eps.shape, true_eps.shape
        )));
    }
    let n = model_eps.numel() as f64;
    Ok(model_eps
        .data
        .iter()
        .zip(&true_eps.data)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// The decreasing timestep subsequence used for `steps`-step sampling:
/// uniform stride over {1..T}, largest first, ending at 0.
pub fn timestep_subsequence(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(t_max).max(1);
    let mut ts: Vec<usize> = (0..steps)
        .map(|k| {
            let t = t_max as f64 - k as f64 * t_max as f64 / steps as f64;
            (t.round() as usize).clamp(1, t_max)
        })
        .collect();
    ts.dedup();
    ts.push(0);
    ts
}
