//! Analytic denoiser for an independent Gaussian prior.
//!
//! For x0 ~ N(mean, std^2) per pixel and x_t = sqrt(ab)*x0 +
//! sqrt(1-ab)*eps, the posterior mean is available in closed form:
//!
//!   E[x0 | x_t] = (std^2 * sqrt(ab) * x_t + (1 - ab) * mean)
//!                 / (ab * std^2 + 1 - ab)
//!
//! The denoiser returns the noise estimate consistent with that mean,
//! which makes the whole reverse process exactly checkable.

use ndarray::Array4;

use super::{Denoiser, SliceBatch};
use crate::error::Result;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct GaussianOracleDenoiser {
    mean: f64,
    std: f64,
    schedule: NoiseSchedule,
    contrasts: usize,
}

impl GaussianOracleDenoiser {
    pub fn new(mean: f64, std: f64, schedule: NoiseSchedule, contrasts: usize) -> Self {
        GaussianOracleDenoiser {
            mean,
            std,
            schedule,
            contrasts,
        }
    }

    /// Standard-normal prior, the configuration used by the sampler checks.
    pub fn standard(schedule: NoiseSchedule, contrasts: usize) -> Self {
        Self::new(0.0, 1.0, schedule, contrasts)
    }

    /// Closed-form posterior mean for one noisy value at timestep `t`.
    pub fn posterior_mean(&self, x_t: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        let var = self.std * self.std;
        (var * ab.sqrt() * x_t + (1.0 - ab) * self.mean) / (ab * var + (1.0 - ab))
    }
}

impl Denoiser for GaussianOracleDenoiser {
    fn contrasts(&self) -> usize {
        self.contrasts
    }

    fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }

    fn denoise(&self, batch: &SliceBatch) -> Result<Array4<f64>> {
        batch.validate(self.schedule.total_steps())?;
        let mut eps_hat = batch.images.clone();
        for (item, &t) in batch.timesteps.iter().enumerate() {
            let a = self.schedule.sqrt_alpha_bar(t);
            let b = self.schedule.sqrt_one_minus_alpha_bar(t);
            for v in eps_hat
                .index_axis_mut(ndarray::Axis(0), item)
                .iter_mut()
            {
                let x0_hat = self.posterior_mean(*v, t);
                *v = (*v - a * x0_hat) / b;
            }
        }
        Ok(eps_hat)
    }
}
