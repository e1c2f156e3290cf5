//! 4D score distillation: lifting a trained multi-view video denoiser into
//! a dynamic field.
//!
//! Each iteration renders the field from the four orthogonal views, pulls
//! the render toward the (frozen) denoiser's clean-video estimate, pins the
//! anchor view to a generated reference clip, and shapes geometry with
//! orientation, opacity, and sparsity penalties under scheduled weights.
//! The whole run is one stage: no static pretraining pass, no separate
//! motion phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod loss;
mod sds;

pub use loss::{
    anchor_loss, ms_ssim_distance_t, opacity_loss, orient_coeffs, orientation_loss,
    orientation_loss_from, sparsity_loss, ssim_t,
};
pub use sds::{
    clip_condition, make_anchor, pool_to, rig_cams, sds_step, DiffusionGuidance, Guidance,
    OracleGuidance, SdsOutcome,
};

/// Which loss terms drive the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Score distillation plus anchor supervision plus regularizers.
    Full,
    /// Anchor supervision and regularizers only.
    AnchorOnly,
    /// Score distillation and regularizers only.
    SdsOnly,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<DistillMode> {
        match s {
            "full" => Ok(DistillMode::Full),
            "anchor_only" => Ok(DistillMode::AnchorOnly),
            "sds_only" => Ok(DistillMode::SdsOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected full, anchor_only, or sds_only"
            ))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillMode::Full => "full",
            DistillMode::AnchorOnly => "anchor_only",
            DistillMode::SdsOnly => "sds_only",
        })
    }
}

/// Weights, schedules, and sizes for one distillation run.
///
/// The orientation weight ramps linearly and the timestep window anneals
/// linearly per endpoint, both over the first `ramp_iters` iterations and
/// frozen afterwards. The sparsity weight switches on at `sparse_after`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iters: usize,
    /// Anchor perceptual weight (multi-scale SSIM distance).
    pub w_perceptual: f32,
    /// Anchor D-SSIM weight.
    pub w_dssim: f32,
    pub w_orient_start: f32,
    pub w_orient_end: f32,
    pub w_opacity: f32,
    pub w_sparse: f32,
    /// Iterations over which the orientation weight and the timestep window
    /// move from their start values to their end values.
    pub ramp_iters: usize,
    /// First iteration at which the sparsity penalty is active.
    pub sparse_after: usize,
    /// Diffusion timestep window endpoints as fractions of the schedule.
    pub window_start: [f32; 2],
    pub window_end: [f32; 2],
    pub lr_grid: f32,
    pub lr_mlp: f32,
    pub cfg_scale: f32,
    /// Frames per rendered clip; must match the guidance clip length.
    pub frames: usize,
    /// Square render resolution; pooled down to the guidance resolution.
    pub render_size: usize,
    pub samples_per_ray: usize,
    /// DDIM steps used when generating the anchor videos.
    pub anchor_ddim_steps: usize,
    pub occupancy_every: usize,
    pub occupancy_res: usize,
    /// Cap on orientation-normal probes per iteration; 0 disables the cap.
    pub orient_samples: usize,
    /// Snapshot PNG cadence; 0 disables snapshots.
    pub snapshot_every: usize,
    /// FDCK checkpoint cadence; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl DistillConfig {
    /// CPU-scale profile: short run, every schedule constant unchanged, so
    /// the run ends mid-anneal and the sparsity term never activates.
    pub fn desk() -> DistillConfig {
        DistillConfig {
            iters: 3000,
            w_perceptual: 200.0,
            w_dssim: 100.0,
            w_orient_start: 10.0,
            w_orient_end: 1000.0,
            w_opacity: 100.0,
            w_sparse: 100.0,
            ramp_iters: 5000,
            sparse_after: 10_000,
            window_start: [0.98, 0.98],
            window_end: [0.02, 0.25],
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            cfg_scale: 5.0,
            frames: 8,
            render_size: 64,
            samples_per_ray: 64,
            anchor_ddim_steps: 30,
            occupancy_every: 16,
            occupancy_res: 32,
            orient_samples: 4096,
            snapshot_every: 500,
            checkpoint_every: 1000,
        }
    }

    /// Full-scale reference profile.
    pub fn paper() -> DistillConfig {
        DistillConfig {
            iters: 35_000,
            render_size: 256,
            samples_per_ray: 128,
            anchor_ddim_steps: 50,
            ..DistillConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("distill: iters must be nonzero".into()));
        }
        for (name, w) in [
            ("w_perceptual", self.w_perceptual),
            ("w_dssim", self.w_dssim),
            ("w_orient_start", self.w_orient_start),
            ("w_orient_end", self.w_orient_end),
            ("w_opacity", self.w_opacity),
            ("w_sparse", self.w_sparse),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("distill: {name} = {w} must be >= 0")));
            }
        }
        for (name, pair) in [
            ("window_start", self.window_start),
            ("window_end", self.window_end),
        ] {
            let [lo, hi] = pair;
            if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
                return Err(Error::Config(format!(
                    "distill: {name} = [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"
                )));
            }
        }
        if !(self.lr_grid > 0.0 && self.lr_mlp > 0.0) {
            return Err(Error::Config("distill: learning rates must be positive".into()));
        }
        if self.lr_mlp >= self.lr_grid {
            return Err(Error::Config(format!(
                "distill: lr_mlp {} must be below lr_grid {}",
                self.lr_mlp, self.lr_grid
            )));
        }
        if self.cfg_scale <= 0.0 {
            return Err(Error::Config("distill: cfg_scale must be positive".into()));
        }
        if self.ramp_iters == 0 {
            return Err(Error::Config("distill: ramp_iters must be nonzero".into()));
        }
        if self.frames == 0
            || self.render_size == 0
            || self.samples_per_ray == 0
            || self.anchor_ddim_steps == 0
            || self.occupancy_every == 0
            || self.occupancy_res == 0
        {
            return Err(Error::Config(
                "distill: frames, sizes, sample counts, and cadences must be nonzero".into(),
            ));
        }
        Ok(())
    }

    /// Diffusion timestep window at `iter`, linear per endpoint and held at
    /// the end values once the ramp completes.
    pub fn anneal_window(&self, iter: usize) -> (f32, f32) {
        if iter >= self.ramp_iters {
            return (self.window_end[0], self.window_end[1]);
        }
        let a = iter as f32 / self.ramp_iters as f32;
        (
            self.window_start[0] + (self.window_end[0] - self.window_start[0]) * a,
            self.window_start[1] + (self.window_end[1] - self.window_start[1]) * a,
        )
    }

    /// Orientation weight at `iter`, on the same ramp as the window.
    pub fn lambda_orient(&self, iter: usize) -> f32 {
        if iter >= self.ramp_iters {
            return self.w_orient_end;
        }
        let a = iter as f32 / self.ramp_iters as f32;
        self.w_orient_start + (self.w_orient_end - self.w_orient_start) * a
    }

    /// Sparsity weight at `iter`: zero until `sparse_after`.
    pub fn lambda_sparse(&self, iter: usize) -> f32 {
        if iter >= self.sparse_after {
            self.w_sparse
        } else {
            0.0
        }
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig::desk()
    }
}

/// The conditioning clip driving one distillation run: frames at the
/// diffusion resolution, their timestamps, and the viewpoint they were
/// captured from.
pub struct InputClip {
    /// `[F, 3, H, W]` in unit range.
    pub video: Tensor,
    /// Ascending frame timestamps in `[0, 1]`.
    pub times: Vec<f32>,
    pub azimuth_deg: f32,
}

impl InputClip {
    pub fn frames(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.video.shape().to_vec();
        let &[f, c, _h, _w] = shape.as_slice() else {
            return Err(Error::Shape(format!(
                "input clip must be [F, 3, H, W], got {shape:?}"
            )));
        };
        if c != 3 || f == 0 {
            return Err(Error::Shape(format!(
                "input clip must be [F, 3, H, W], got {shape:?}"
            )));
        }
        if f != self.times.len() {
            return Err(Error::Shape(format!(
                "input clip has {f} frames but {} timestamps",
                self.times.len()
            )));
        }
        let ascending = self.times.windows(2).all(|p| p[0] < p[1]);
        if !ascending || self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Data(format!(
                "input timestamps must ascend within [0, 1], got {:?}",
                self.times
            )));
        }
        Ok(())
    }
}

/// The generated reference clip for one view, fixed for the whole run.
pub struct AnchorSet {
    /// `[F, 3, H, W]` in unit range at the guidance resolution.
    pub video: Tensor,
    /// Which of the four orthogonal views the clip depicts.
    pub view: usize,
    pub seed: u64,
}
