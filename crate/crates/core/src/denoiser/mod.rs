//! Noise-prediction interface and its two implementations: an analytic
//! Gaussian-posterior denoiser used to verify the sampler exactly, and a
//! small trainable time-embedded convolutional network.
//!
//! A denoiser consumes a [`SliceBatch`] (noisy multicontrast 2D slices,
//! conditioning masks, per-slice timesteps) and predicts the noise that
//! was added to each slice.

mod checkpoint;
mod net;
mod oracle;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{ModelConfig, TimeUnet};
pub use oracle::GaussianOracleDenoiser;
pub use train::{train, Adam, TrainConfig, TrainReport, TrainingSlice};

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, MultiContrastVolume, Orientation};

/// A stack of 2D multicontrast slices with aligned conditioning masks,
/// per-slice timesteps, and per-channel presence flags. The unit of
/// denoiser I/O.
#[derive(Debug, Clone)]
pub struct SliceBatch {
    /// Noisy images, `(B, C, H, W)`, dropped channels exactly zero.
    pub images: Array4<f64>,
    /// Conditioning masks, `(B, H, W)`, values in {0, 1}.
    pub masks: Array3<f64>,
    /// Timestep per item, each in `[1, T]`.
    pub timesteps: Vec<usize>,
    /// `(B, C)` presence flags; false marks a dropped/missing channel.
    pub channel_present: Array2<bool>,
}

impl SliceBatch {
    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let (b, c, h, w) = (
            self.batch_size(),
            self.channels(),
            self.height(),
            self.width(),
        );
        if self.masks.shape() != [b, h, w] {
            return Err(Error::shape("batch masks", &[b, h, w], self.masks.shape()));
        }
        if self.timesteps.len() != b {
            return Err(Error::shape("batch timesteps", &[b], &[self.timesteps.len()]));
        }
        if self.channel_present.shape() != [b, c] {
            return Err(Error::shape(
                "batch presence flags",
                &[b, c],
                self.channel_present.shape(),
            ));
        }
        for (item, &t) in self.timesteps.iter().enumerate() {
            if t < 1 || t > total_steps {
                return Err(Error::parameter(
                    "timestep",
                    format!("item {item}: t = {t} outside [1, {total_steps}]"),
                ));
            }
        }
        for item in 0..b {
            if !(0..c).any(|ch| self.channel_present[[item, ch]]) {
                return Err(Error::Validation(format!(
                    "batch item {item} has no present channel"
                )));
            }
            for ch in 0..c {
                if !self.channel_present[[item, ch]] {
                    let zeroed = self
                        .images
                        .index_axis(ndarray::Axis(0), item)
                        .index_axis(ndarray::Axis(0), ch)
                        .iter()
                        .all(|&v| v == 0.0);
                    if !zeroed {
                        return Err(Error::Validation(format!(
                            "batch item {item} channel {ch} is dropped but not zeroed"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Noise predictor over slice batches.
pub trait Denoiser: Send + Sync {
    fn contrasts(&self) -> usize;
    fn total_steps(&self) -> usize;
    /// Predict the noise component of each slice; output has the shape of
    /// `batch.images`.
    fn denoise(&self, batch: &SliceBatch) -> Result<Array4<f64>>;
}

/// Zero a random subset of contrast channels across the whole batch.
///
/// Each contrast is dropped independently with probability `p`; if the
/// draw would drop every contrast, one (uniformly chosen) is retained.
/// Presence flags are updated alongside the data.
pub fn apply_contrast_dropout(batch: &mut SliceBatch, p: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::parameter(
            "dropout_prob",
            format!("must satisfy 0 <= p < 1, got {p}"),
        ));
    }
    let c = batch.channels();
    let mut dropped: Vec<bool> = (0..c).map(|_| rng.random::<f64>() < p).collect();
    if dropped.iter().all(|&d| d) {
        let keep = rng.random_range(0..c);
        dropped[keep] = false;
    }
    for (ch, &drop) in dropped.iter().enumerate() {
        if !drop {
            continue;
        }
        batch
            .images
            .index_axis_mut(ndarray::Axis(1), ch)
            .fill(0.0);
        for item in 0..batch.batch_size() {
            batch.channel_present[[item, ch]] = false;
        }
    }
    Ok(())
}

/// One extracted training slice: a multicontrast image stack with its
/// aligned mask slice, in normalized intensity space.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
    pub presence: Vec<bool>,
    pub view: Orientation,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Extract 2D training slices from all three cardinal views, skipping
/// slices whose body (positive raw intensity) fraction is below
/// `min_body_fraction`.
pub fn extract_training_slices(
    vol: &MultiContrastVolume,
    mask: &MaskVolume,
    min_body_fraction: f64,
) -> Result<Vec<SliceSample>> {
    if mask.shape() != vol.shape() {
        return Err(Error::shape(
            "training mask",
            &[vol.shape().0, vol.shape().1, vol.shape().2],
            &[mask.shape().0, mask.shape().1, mask.shape().2],
        ));
    }
    let mut out = Vec::new();
    for view in Orientation::ALL {
        let v = vol.reorient(view);
        let m = mask.reorient(view);
        let body = v.body();
        let (nx, ny, _) = v.shape();
        let plane = nx * ny;
        for k in 0..v.volume(0).slice_count() {
            let body_count = body.slice_plane(k).iter().filter(|&&b| b == 1).count();
            if (body_count as f64) < min_body_fraction * plane as f64 || body_count == 0 {
                continue;
            }
            let c = v.contrasts();
            let mut image = Array3::<f64>::zeros((c, ny, nx));
            for ch in 0..c {
                let p = v.volume(ch).slice_plane(k);
                image
                    .index_axis_mut(ndarray::Axis(0), ch)
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(&p);
            }
            let mp = m.slice_plane(k);
            let mask_arr =
                Array2::from_shape_vec((ny, nx), mp.iter().map(|&b| b as f64).collect()).unwrap();
            out.push(SliceSample {
                image,
                mask: mask_arr,
                presence: v.presence().to_vec(),
                view,
                slice_index: k,
            });
        }
    }
    Ok(out)
}
