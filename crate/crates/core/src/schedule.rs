//! Cosine noise schedule and forward-diffusion utilities.
//!
//! The table stores the signal-retention product alpha_bar(t) for
//! t = 0..=T under alpha_bar(t) = f(t)/f(0) with
//! f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2). Per-step noise is capped at
//! 0.999, which only bites near t = T and keeps every table entry
//! strictly positive. Indexing convention: t = 0 is the clean image,
//! t = T is maximal noise.

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
const MAX_STEP_NOISE: f64 = 0.999;

/// Precomputed alpha_bar table for a cosine forward process.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    total_steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(Error::parameter(
                "timestep",
                format!("t = {t} outside [0, {}]", self.total_steps),
            ));
        }
        Ok(())
    }
}

/// Closed-form cosine envelope f(t) used to build the table.
pub fn cosine_envelope(t: f64, total: f64, offset: f64) -> f64 {
    let angle = ((t / total) + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

/// Build the cosine schedule for `total_steps` steps with offset `s`.
pub fn build_cosine_schedule(total_steps: usize, s: f64) -> Result<NoiseSchedule> {
    if total_steps < 1 {
        return Err(Error::parameter("T", "must be >= 1"));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::parameter("s", format!("must be positive, got {s}")));
    }
    let f0 = cosine_envelope(0.0, total_steps as f64, s);
    let mut alpha_bar = Vec::with_capacity(total_steps + 1);
    alpha_bar.push(1.0);
    for t in 1..=total_steps {
        let exact = cosine_envelope(t as f64, total_steps as f64, s) / f0;
        let prev = alpha_bar[t - 1];
        let ratio = (exact / prev).max(1.0 - MAX_STEP_NOISE);
        alpha_bar.push(prev * ratio);
    }
    Ok(NoiseSchedule {
        total_steps,
        offset: s,
        alpha_bar,
    })
}

/// Forward diffusion: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample noise", &[x0.len()], &[eps.len()]));
    }
    let a = sched.sqrt_alpha_bar(t);
    let b = sched.sqrt_one_minus_alpha_bar(t);
    Ok(x0.iter().zip(eps.iter()).map(|(&x, &e)| a * x + b * e).collect())
}

/// Invert the forward parameterization:
/// (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t).
pub fn predict_x0_from_eps(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_timestep(t)?;
    if t == 0 {
        return Ok(x_t.to_vec());
    }
    if x_t.len() != eps_hat.len() {
        return Err(Error::shape("predict_x0 noise", &[x_t.len()], &[eps_hat.len()]));
    }
    let a = sched.sqrt_alpha_bar(t);
    let b = sched.sqrt_one_minus_alpha_bar(t);
    Ok(x_t
        .iter()
        .zip(eps_hat.iter())
        .map(|(&x, &e)| (x - b * e) / a)
        .collect())
}
