//! Multi-view video diffusion: noise schedule, denoiser, training loop, and
//! DDIM sampling.
//!
//! Latent batches are six-axis tensors `[B, F, N, C, H, W]`: batch, frame,
//! view slot, channel, height, width. Slot 0 carries the monocular
//! conditioning view, slots 1..=4 the four orthogonal target views. The
//! denoiser alternates between two foldings of that layout: a spatial one
//! that folds frames into the batch so every frame is handled by the same
//! per-frame network, and a temporal one that lines up each spatial location
//! across frames for the motion modules.

mod model;
mod sample;
mod train;

pub use model::{CheckpointMeta, Denoiser, DenoiserConfig};
pub use sample::{
    ddim_sample, denoise, guided_eps, guided_x0, predict_x0, NoisePredictor, OraclePredictor,
    ZeroPredictor,
};
pub use train::{
    assemble_batch, load_training_cache, train_denoiser, train_loss, Batch, SceneCache,
    SceneClip, TrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// View-slot index of the monocular conditioning video.
pub const MONO_SLOT: usize = 0;

/// Which parameter family a training run updates: the per-frame spatial
/// network, or the temporal motion modules added on top of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Spatial,
    Motion,
}

/// Noise schedule constants plus the guidance settings tied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Classifier-free guidance scale used at sampling time.
    pub cfg_scale: f32,
    /// Probability of replacing a sample's conditioning with the learned
    /// null tokens during training.
    pub drop_p: f32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            cfg_scale: 5.0,
            drop_p: 0.1,
        }
    }
}

/// Precomputed linear-beta schedule. `alpha_bar(t)` is the cumulative
/// product of `1 - beta` and must be strictly decreasing, which the
/// constructor verifies after rounding to f32.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    betas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<DiffusionSchedule> {
        if config.t_steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(config.beta_start > 0.0 && config.beta_start <= config.beta_end && config.beta_end < 1.0)
        {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                config.beta_start, config.beta_end
            )));
        }
        if !(0.0..1.0).contains(&config.drop_p) {
            return Err(Error::Config(format!(
                "drop probability {} outside [0, 1)",
                config.drop_p
            )));
        }
        if config.cfg_scale <= 0.0 {
            return Err(Error::Config(format!(
                "guidance scale {} must be positive",
                config.cfg_scale
            )));
        }
        let t = config.t_steps;
        let mut betas = Vec::with_capacity(t);
        let mut alpha_bars = Vec::with_capacity(t);
        let mut prod = 1.0f64;
        for i in 0..t {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            let beta = config.beta_start + (config.beta_end - config.beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta as f32);
            alpha_bars.push(prod as f32);
        }
        for i in 1..t {
            if alpha_bars[i] >= alpha_bars[i - 1] {
                return Err(Error::Config(format!(
                    "alpha-bar not strictly decreasing at timestep {i}"
                )));
            }
        }
        Ok(DiffusionSchedule {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn t_steps(&self) -> usize {
        self.config.t_steps
    }

    pub fn beta(&self, t: usize) -> Result<f32> {
        self.betas
            .get(t)
            .copied()
            .ok_or_else(|| self.range_error(t))
    }

    /// Fraction of signal variance remaining after `t + 1` noising steps.
    pub fn alpha_bar(&self, t: usize) -> Result<f32> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| self.range_error(t))
    }

    fn range_error(&self, t: usize) -> Error {
        Error::Config(format!(
            "timestep {t} outside schedule range 0..{}",
            self.config.t_steps
        ))
    }
}

/// Per-element `sqrt(alpha_bar)` and `sqrt(1 - alpha_bar)`, shaped to
/// broadcast over a latent batch of rank `ndim`.
pub fn noising_coefs(
    sched: &DiffusionSchedule,
    ts: &[usize],
    ndim: usize,
) -> Result<(Tensor, Tensor)> {
    let mut signal = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in ts {
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![1; ndim];
    shape[0] = ts.len();
    Ok((
        Tensor::from_vec(signal, &shape)?,
        Tensor::from_vec(noise, &shape)?,
    ))
}

/// Conditioning for one batch: the clean monocular clip plus one camera row
/// per view slot.
#[derive(Debug, Clone)]
pub struct Condition {
    /// Monocular video in signed pixel range, `[B, F, C, H, W]`.
    pub mono: Tensor,
    /// Camera features from [`camera_feature`], `[B, N, 3]`.
    pub cams: Tensor,
}

/// Maps unit-range pixels into the signed range the denoiser works in.
/// With pixel-space latents this pair is the whole encoder/decoder.
pub fn to_signed(x: &Tensor) -> Tensor {
    x.scale(2.0).add_scalar(-1.0)
}

/// Inverse of [`to_signed`].
pub fn to_unit(x: &Tensor) -> Tensor {
    x.scale(0.5).add_scalar(0.5)
}

/// Packs a pose into camera features: azimuth wrapped to `[-pi, pi)`,
/// elevation in radians, distance as-is.
pub fn camera_feature(azimuth_deg: f32, elevation_deg: f32, distance: f32) -> [f32; 3] {
    let mut az = azimuth_deg.rem_euclid(360.0);
    if az >= 180.0 {
        az -= 360.0;
    }
    [az.to_radians(), elevation_deg.to_radians(), distance]
}

/// Folds frames into the batch and flattens each frame's view slots into a
/// single token sequence: `[B, F, N, C, H, W] -> [B*F, N*H*W, C]`. Element
/// `(b, f, n, c, h, w)` lands in row `b*F + f` at token `n*H*W + h*W + w`.
pub fn reshape_spatial(x: &Tensor) -> Result<Tensor> {
    let [b, f, n, c, h, w] = six_dims(x, "reshape_spatial")?;
    x.permute(&[0, 1, 2, 4, 5, 3])?
        .reshape(&[b * f, n * h * w, c])
}

/// Inverse of [`reshape_spatial`] for the given original shape.
pub fn reshape_spatial_inv(x: &Tensor, dims: &[usize; 6]) -> Result<Tensor> {
    let [b, f, n, c, h, w] = *dims;
    x.reshape(&[b, f, n, h, w, c])?
        .permute(&[0, 1, 2, 5, 3, 4])
}

/// Lines up each spatial location across frames:
/// `[B, F, N, C, H, W] -> [B*N*H*W, F, C]`. Element `(b, f, n, c, h, w)`
/// lands in row `((b*N + n)*H + h)*W + w` at position `f`.
pub fn reshape_temporal(x: &Tensor) -> Result<Tensor> {
    let [b, f, n, c, h, w] = six_dims(x, "reshape_temporal")?;
    x.permute(&[0, 2, 4, 5, 1, 3])?
        .reshape(&[b * n * h * w, f, c])
}

/// Inverse of [`reshape_temporal`] for the given original shape.
pub fn reshape_temporal_inv(x: &Tensor, dims: &[usize; 6]) -> Result<Tensor> {
    let [b, f, n, c, h, w] = *dims;
    x.reshape(&[b, n, h, w, f, c])?
        .permute(&[0, 4, 1, 5, 2, 3])
}

fn six_dims(x: &Tensor, who: &str) -> Result<[usize; 6]> {
    match *x.shape() {
        [b, f, n, c, h, w] => Ok([b, f, n, c, h, w]),
        ref s => Err(Error::Shape(format!(
            "{who} expects [B, F, N, C, H, W], got {s:?}"
        ))),
    }
}
