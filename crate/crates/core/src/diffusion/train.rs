//! Denoiser training: scene cache, batch assembly, and the stage loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::scenes::{DatasetHandle, Split};
use crate::tensor::{no_grad, Tensor};

use super::{
    camera_feature, noising_coefs, to_signed, Condition, Denoiser, DiffusionSchedule,
    NoisePredictor, Stage,
};

/// Knobs for one denoiser training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Frames drawn per sample in the spatial stage; 0 keeps the full clip.
    /// The motion stage always sees full clips.
    pub frame_subset: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale profile: small batches, subsampled frames for the
    /// per-frame stage.
    pub fn desk(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            steps: 5000,
            batch_size: 8,
            lr: 1e-4,
            frame_subset: if stage == Stage::Spatial { 4 } else { 0 },
            seed: 0,
        }
    }

    /// Full-scale reference profile.
    pub fn paper(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            steps: 30_000,
            batch_size: 32,
            lr: 1e-4,
            frame_subset: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "training needs nonzero steps and batch size".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} unusable", self.lr)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(Stage::Spatial)
    }
}

/// One scene's clip stack and camera rows, decoded once.
pub struct SceneClip {
    /// `[F, N, C, H, W]`, monocular slot first, values in `[-1, 1]`.
    pub z0: Tensor,
    /// `[N, 3]` camera features.
    pub cams: Tensor,
}

/// Every clip of one dataset split held in memory.
pub struct SceneCache {
    pub entries: Vec<SceneClip>,
}

/// Loads a split into a [`SceneCache`]: slot 0 is the scene's monocular
/// view, slots 1..=4 the four orthogonal views in rig order, pixels mapped
/// from unit range to `[-1, 1]`.
pub fn load_training_cache(data: &DatasetHandle, split: Split) -> Result<SceneCache> {
    let manifest = &data.manifest;
    let ids = match split {
        Split::Train => &manifest.train_ids,
        Split::Test => &manifest.test_ids,
    };
    let (el, dist) = (manifest.rig.elevation_deg, manifest.rig.distance);
    let mut entries = Vec::with_capacity(ids.len());
    for &id in ids {
        let sample = data.load_sample(id)?;
        let mut cams = Vec::with_capacity(5 * 3);
        cams.extend(camera_feature(sample.mono_azimuth, el, dist));
        for &view in &manifest.ortho_views {
            cams.extend(camera_feature(manifest.view_azimuths[view], el, dist));
        }
        let mut slots = vec![sample.mono];
        slots.extend(sample.ortho);
        let n = slots.len();
        let &[f, c, h, w] = slots[0].shape() else {
            return Err(Error::Data(format!("scene {id}: bad clip rank")));
        };
        let parts = slots
            .iter()
            .map(|s| s.reshape(&[f, 1, c, h, w]))
            .collect::<Result<Vec<_>>>()?;
        let z0 = to_signed(&Tensor::concat(&parts, 1)?);
        entries.push(SceneClip {
            z0,
            cams: Tensor::from_vec(cams, &[n, 3])?,
        });
    }
    Ok(SceneCache { entries })
}

/// One training minibatch.
pub struct Batch {
    /// Clean latents `[B, F', N, C, H, W]`.
    pub z0: Tensor,
    pub cond: Condition,
}

/// Draws `batch_size` scenes with replacement. A nonzero `frame_subset`
/// resamples that many frames per scene (also with replacement); the
/// conditioning clip is cut from the same frames so it stays aligned.
pub fn assemble_batch(
    cache: &SceneCache,
    batch_size: usize,
    frame_subset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if cache.entries.is_empty() {
        return Err(Error::Data("scene cache is empty".into()));
    }
    no_grad(|| {
        let mut zs = Vec::with_capacity(batch_size);
        let mut monos = Vec::with_capacity(batch_size);
        let mut cams = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let clip = &cache.entries[rng.gen_range(0..cache.entries.len())];
            let &[f, n, c, h, w] = clip.z0.shape() else {
                return Err(Error::Data("cached clip lost its rank".into()));
            };
            let z = if frame_subset > 0 && frame_subset < f {
                let idx: Vec<usize> = (0..frame_subset).map(|_| rng.gen_range(0..f)).collect();
                clip.z0.gather_rows(&idx)?
            } else {
                clip.z0.clone()
            };
            let fs = z.shape()[0];
            monos.push(z.narrow(1, 0, 1)?.reshape(&[1, fs, c, h, w])?);
            zs.push(z.reshape(&[1, fs, n, c, h, w])?);
            cams.push(clip.cams.reshape(&[1, n, 3])?);
        }
        Ok(Batch {
            z0: Tensor::concat(&zs, 0)?,
            cond: Condition {
                mono: Tensor::concat(&monos, 0)?,
                cams: Tensor::concat(&cams, 0)?,
            },
        })
    })
}

/// Denoising loss for one batch: noise `z0` to the given timesteps with
/// `eps`, predict, and score the prediction against the true noise.
pub fn train_loss(
    pred: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    z0: &Tensor,
    cond: Option<&Condition>,
    drop: &[bool],
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let (signal, noise) = noising_coefs(sched, ts, z0.ndim())?;
    let z_noisy = z0.mul(&signal)?.add(&eps.mul(&noise)?)?;
    pred.predict(&z_noisy, ts, cond, drop)?.mse(eps)
}

/// Routes through the motion modules only when the stage trains them.
struct StagePredictor<'a> {
    model: &'a Denoiser,
    motion: bool,
}

impl NoisePredictor for StagePredictor<'_> {
    fn predict(
        &self,
        z: &Tensor,
        ts: &[usize],
        cond: Option<&Condition>,
        drop: &[bool],
    ) -> Result<Tensor> {
        self.model.forward(z, ts, cond, drop, self.motion)
    }
}

/// Runs one training stage over the cache, calling `on_step` after every
/// update, and returns the per-step losses. Parameters outside the stage
/// are detached from the graph for the duration, so they cannot move.
pub fn train_denoiser(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    cache: &SceneCache,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    cfg.validate()?;
    for (name, t) in model.params.iter() {
        t.set_requires_grad(name.contains(".motion.") == (cfg.stage == Stage::Motion));
    }
    let result = train_stage(model, sched, cache, cfg, &mut on_step);
    model.params.set_requires_grad(true);
    result
}

fn train_stage(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    cache: &SceneCache,
    cfg: &TrainConfig,
    on_step: &mut impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    let mut opt = AdamW::single_group(model.stage_params(cfg.stage), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pred = StagePredictor {
        model,
        motion: cfg.stage == Stage::Motion,
    };
    let frame_subset = match cfg.stage {
        Stage::Spatial => cfg.frame_subset,
        Stage::Motion => 0,
    };
    let drop_p = sched.config().drop_p;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = assemble_batch(cache, cfg.batch_size, frame_subset, &mut rng)?;
        let b = cfg.batch_size;
        let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(0..sched.t_steps())).collect();
        let drop: Vec<bool> = (0..b).map(|_| rng.gen::<f32>() < drop_p).collect();
        let eps = Tensor::randn(batch.z0.shape(), &mut rng);
        let loss = train_loss(&pred, sched, &batch.z0, Some(&batch.cond), &drop, &ts, &eps)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {value} at step {step}"
            )));
        }
        loss.backward()?;
        opt.step();
        opt.zero_grad();
        losses.push(value);
        on_step(step, value);
    }
    Ok(losses)
}
