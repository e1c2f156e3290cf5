//! The multi-view video denoiser.
//!
//! A patch-token transformer over the five view slots of each frame. Every
//! block runs viewpoint self-attention, cross-attention into the encoded
//! monocular clip, and a convolutional residual path, then hands the tokens
//! to a temporal motion module whose output projection starts at zero: a
//! fresh model is bitwise identical to its per-frame spatial network, and
//! the temporal pathway only participates once that projection moves.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    reshape_spatial, reshape_spatial_inv, reshape_temporal, reshape_temporal_inv, Condition,
    ScheduleConfig, Stage,
};

const LN_EPS: f32 = 1e-5;
const GN_EPS: f32 = 1e-5;

/// Architecture of the denoiser. The defaults are the desk-scale profile:
/// 32x32 pixel-space latents, width 128, four blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    /// View slots per frame, monocular slot included.
    pub views: usize,
    /// Nominal clip length; forward passes accept any frame count.
    pub frames: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub gn_groups: usize,
    pub ffn_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            channels: 3,
            views: 5,
            frames: 8,
            width: 128,
            blocks: 4,
            heads: 4,
            patch: 8,
            gn_groups: 8,
            ffn_mult: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("views", self.views),
            ("frames", self.frames),
            ("width", self.width),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("patch", self.patch),
            ("gn_groups", self.gn_groups),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("denoiser {name} must be nonzero")));
            }
        }
        if self.views < 2 {
            return Err(Error::Config(
                "denoiser needs the monocular slot plus at least one target view".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % self.gn_groups != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} norm groups",
                self.width, self.gn_groups
            )));
        }
        if self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "width {} must be a multiple of 4 for the conditioning encoder",
                self.width
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 8 for the conditioning encoder",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Patch tokens per side of one view.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Patch tokens per view.
    pub fn tokens_per_view(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Monocular feature tokens per frame after the conditioning encoder's
    /// three stride-2 stages.
    pub fn cond_tokens(&self) -> usize {
        let side = self.image_size / 8;
        side * side
    }

    /// Flattened value count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

struct LinearP {
    w: Tensor,
    b: Tensor,
}

struct NormP {
    g: Tensor,
    b: Tensor,
}

struct AttnP {
    ln: NormP,
    q: LinearP,
    k: LinearP,
    v: LinearP,
    o: LinearP,
}

struct FfnP {
    ln: NormP,
    up: LinearP,
    down: LinearP,
}

struct ConvP {
    gn: NormP,
    dw_w: Tensor,
    dw_b: Tensor,
    pw_w: Tensor,
    pw_b: Tensor,
}

struct MotionP {
    gn: NormP,
    inp: LinearP,
    attn1: AttnP,
    attn2: AttnP,
    ffn: FfnP,
    out: LinearP,
}

struct BlockP {
    attn: AttnP,
    cross: AttnP,
    conv: ConvP,
    motion: MotionP,
}

struct ConvLayerP {
    w: Tensor,
    b: Tensor,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

fn linear_p(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> LinearP {
    LinearP {
        w: ps.register(&format!("{name}.w"), he_uniform(&[d_in, d_out], d_in, rng)),
        b: ps.register(&format!("{name}.b"), Tensor::zeros(&[d_out])),
    }
}

fn norm_p(ps: &mut ParamSet, name: &str, dim: usize) -> NormP {
    NormP {
        g: ps.register(&format!("{name}.g"), Tensor::full(&[dim], 1.0)),
        b: ps.register(&format!("{name}.b"), Tensor::zeros(&[dim])),
    }
}

fn attn_p(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> AttnP {
    AttnP {
        ln: norm_p(ps, &format!("{name}.ln"), dim),
        q: linear_p(ps, &format!("{name}.q"), dim, dim, rng),
        k: linear_p(ps, &format!("{name}.k"), dim, dim, rng),
        v: linear_p(ps, &format!("{name}.v"), dim, dim, rng),
        o: linear_p(ps, &format!("{name}.o"), dim, dim, rng),
    }
}

fn ffn_p(ps: &mut ParamSet, name: &str, dim: usize, mult: usize, rng: &mut ChaCha8Rng) -> FfnP {
    FfnP {
        ln: norm_p(ps, &format!("{name}.ln"), dim),
        up: linear_p(ps, &format!("{name}.up"), dim, dim * mult, rng),
        down: linear_p(ps, &format!("{name}.down"), dim * mult, dim, rng),
    }
}

fn conv_layer_p(
    ps: &mut ParamSet,
    name: &str,
    co: usize,
    ci: usize,
    rng: &mut ChaCha8Rng,
) -> ConvLayerP {
    ConvLayerP {
        w: ps.register(&format!("{name}.w"), he_uniform(&[co, ci, 3, 3], ci * 9, rng)),
        b: ps.register(&format!("{name}.b"), Tensor::zeros(&[co])),
    }
}

fn block_p(ps: &mut ParamSet, name: &str, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> BlockP {
    let w = cfg.width;
    BlockP {
        attn: attn_p(ps, &format!("{name}.attn"), w, rng),
        cross: attn_p(ps, &format!("{name}.cross"), w, rng),
        conv: ConvP {
            gn: norm_p(ps, &format!("{name}.conv.gn"), w),
            dw_w: ps.register(&format!("{name}.conv.dw.w"), he_uniform(&[w, 3, 3], 9, rng)),
            dw_b: ps.register(&format!("{name}.conv.dw.b"), Tensor::zeros(&[w])),
            pw_w: ps.register(&format!("{name}.conv.pw.w"), he_uniform(&[w, w, 1, 1], w, rng)),
            pw_b: ps.register(&format!("{name}.conv.pw.b"), Tensor::zeros(&[w])),
        },
        motion: MotionP {
            gn: norm_p(ps, &format!("{name}.motion.gn"), w),
            inp: linear_p(ps, &format!("{name}.motion.in"), w, w, rng),
            attn1: attn_p(ps, &format!("{name}.motion.attn1"), w, rng),
            attn2: attn_p(ps, &format!("{name}.motion.attn2"), w, rng),
            ffn: ffn_p(ps, &format!("{name}.motion.ffn"), w, cfg.ffn_mult, rng),
            out: LinearP {
                w: ps.register(&format!("{name}.motion.out.w"), Tensor::zeros(&[w, w])),
                b: ps.register(&format!("{name}.motion.out.b"), Tensor::zeros(&[w])),
            },
        },
    }
}

/// The denoiser with all parameters registered in a fixed order.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    patch_in: LinearP,
    patch_pos: Tensor,
    time_in: LinearP,
    time_out: LinearP,
    cam_in: LinearP,
    cam_out: LinearP,
    cam_null: Tensor,
    cond_c1: ConvLayerP,
    cond_c2: ConvLayerP,
    cond_c3: ConvLayerP,
    cond_pos: Tensor,
    cond_null: Tensor,
    blocks: Vec<BlockP>,
    head_ln: NormP,
    head_out: LinearP,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Denoiser> {
        config.validate()?;
        let w = config.width;
        let mut ps = ParamSet::new();
        let patch_in = linear_p(&mut ps, "patch", config.patch_dim(), w, rng);
        let patch_pos = ps.register(
            "patch.pos",
            Tensor::randn(&[config.tokens_per_view(), w], rng).scale(0.02),
        );
        let time_in = linear_p(&mut ps, "time.in", w, w, rng);
        let time_out = linear_p(&mut ps, "time.out", w, w, rng);
        let cam_in = linear_p(&mut ps, "cam.in", 3, w, rng);
        let cam_out = linear_p(&mut ps, "cam.out", w, w, rng);
        let cam_null = ps.register("cam.null", Tensor::randn(&[w], rng).scale(0.02));
        let (mid1, mid2) = (w / 4, w / 2);
        let cond_c1 = conv_layer_p(&mut ps, "cond.conv1", mid1, config.channels, rng);
        let cond_c2 = conv_layer_p(&mut ps, "cond.conv2", mid2, mid1, rng);
        let cond_c3 = conv_layer_p(&mut ps, "cond.conv3", w, mid2, rng);
        let cond_pos = ps.register(
            "cond.pos",
            Tensor::randn(&[config.cond_tokens(), w], rng).scale(0.02),
        );
        let cond_null = ps.register(
            "cond.null",
            Tensor::randn(&[config.cond_tokens(), w], rng).scale(0.02),
        );
        let blocks = (0..config.blocks)
            .map(|i| block_p(&mut ps, &format!("block{i}"), &config, rng))
            .collect();
        let head_ln = norm_p(&mut ps, "head.ln", w);
        let head_out = linear_p(&mut ps, "head.out", w, config.patch_dim(), rng);
        Ok(Denoiser {
            config,
            params: ps,
            patch_in,
            patch_pos,
            time_in,
            time_out,
            cam_in,
            cam_out,
            cam_null,
            cond_c1,
            cond_c2,
            cond_c3,
            cond_pos,
            cond_null,
            blocks,
            head_ln,
            head_out,
        })
    }

    /// Predicts the noise content of `z`, `[B, F, N, C, H, W]`. `ts` and
    /// `drop` hold one timestep and one conditioning-drop flag per batch
    /// element; dropped elements see the learned null tokens instead of
    /// their monocular clip and camera rows. `use_motion` routes through the
    /// temporal motion modules; with their projections still at zero the
    /// result is identical either way.
    pub fn forward(
        &self,
        z: &Tensor,
        ts: &[usize],
        cond: Option<&Condition>,
        drop: &[bool],
        use_motion: bool,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, f) = match *z.shape() {
            [b, f, n, c, h, w]
                if n == cfg.views && c == cfg.channels && h == cfg.image_size && w == h =>
            {
                (b, f)
            }
            ref s => {
                return Err(Error::Shape(format!(
                    "denoiser expects [B, F, {}, {}, {}, {}], got {s:?}",
                    cfg.views, cfg.channels, cfg.image_size, cfg.image_size
                )))
            }
        };
        if ts.len() != b || drop.len() != b {
            return Err(Error::Shape(format!(
                "batch {b} needs {b} timesteps and drop flags, got {} and {}",
                ts.len(),
                drop.len()
            )));
        }
        let (n, c, size, p) = (cfg.views, cfg.channels, cfg.image_size, cfg.patch);
        let (hp, hv, w) = (cfg.grid(), cfg.tokens_per_view(), cfg.width);

        let tokens = z
            .reshape(&[b, f, n, c, hp, p, hp, p])?
            .permute(&[0, 1, 2, 4, 6, 3, 5, 7])?
            .reshape(&[b * f * n * hv, cfg.patch_dim()])?
            .linear(&self.patch_in.w, Some(&self.patch_in.b))?
            .reshape(&[b, f, n, hv, w])?;
        let t_emb = self.time_embedding(ts)?.reshape(&[b, 1, 1, 1, w])?;
        let cam_emb = self.camera_embedding(cond, drop, b)?.reshape(&[b, 1, n, 1, w])?;
        let tokens = tokens.add(&self.patch_pos)?.add(&t_emb)?.add(&cam_emb)?;

        let ctx = self.cond_context(cond, drop, b, f)?;
        let dims = [b, f, n, w, hp, hp];
        let mut h = tokens
            .reshape(&[b, f, n, hp, hp, w])?
            .permute(&[0, 1, 2, 5, 3, 4])?;
        for blk in &self.blocks {
            h = self.block_forward(blk, &h, &ctx, &dims, use_motion)?;
        }

        let out = h
            .permute(&[0, 1, 2, 4, 5, 3])?
            .reshape(&[b * f * n * hv, w])?
            .layer_norm(&self.head_ln.g, &self.head_ln.b, LN_EPS)?
            .linear(&self.head_out.w, Some(&self.head_out.b))?;
        out.reshape(&[b, f, n, hp, hp, c, p, p])?
            .permute(&[0, 1, 2, 5, 3, 6, 4, 7])?
            .reshape(&[b, f, n, c, size, size])
    }

    fn block_forward(
        &self,
        blk: &BlockP,
        h: &Tensor,
        ctx: &Tensor,
        dims: &[usize; 6],
        use_motion: bool,
    ) -> Result<Tensor> {
        let heads = self.config.heads;
        let mut s = reshape_spatial(h)?;
        s = s.add(&self_attention(&blk.attn, &s, heads)?)?;
        s = s.add(&cross_attention(&blk.cross, &s, ctx, heads)?)?;
        s = s.add(&self.conv_path(&blk.conv, &s, dims)?)?;
        let h = reshape_spatial_inv(&s, dims)?;
        if !use_motion {
            return Ok(h);
        }
        let m = reshape_temporal(&h)?;
        let y = self.motion_forward(&blk.motion, &m)?;
        reshape_temporal_inv(&m.add(&y)?, dims)
    }

    /// Depthwise 3x3 over each view's token grid followed by a pointwise
    /// mix, on group-normalized tokens.
    fn conv_path(&self, cp: &ConvP, s: &Tensor, dims: &[usize; 6]) -> Result<Tensor> {
        let [b, f, n, w, hp, _] = *dims;
        let y = s.group_norm(self.config.gn_groups, &cp.gn.g, &cp.gn.b, GN_EPS)?;
        let g = y
            .reshape(&[b * f * n, hp, hp, w])?
            .permute(&[0, 3, 1, 2])?
            .depthwise3x3(&cp.dw_w, &cp.dw_b)?
            .silu()
            .conv2d(&cp.pw_w, Some(&cp.pw_b), 1, 0)?;
        g.permute(&[0, 2, 3, 1])?.reshape(&[b * f, n * hp * hp, w])
    }

    /// Temporal residual for rows of `[rows, F, width]`. Returns the
    /// contribution to add, which is exactly zero while the output
    /// projection is.
    fn motion_forward(&self, mp: &MotionP, m: &Tensor) -> Result<Tensor> {
        let (f, w, heads) = (m.shape()[1], self.config.width, self.config.heads);
        let mut y = m.group_norm(self.config.gn_groups, &mp.gn.g, &mp.gn.b, GN_EPS)?;
        y = y.linear(&mp.inp.w, Some(&mp.inp.b))?;
        y = y.add(&frame_positions(f, w))?;
        y = y.add(&self_attention(&mp.attn1, &y, heads)?)?;
        y = y.add(&self_attention(&mp.attn2, &y, heads)?)?;
        y = y.add(&ffn(&mp.ffn, &y)?)?;
        y.linear(&mp.out.w, Some(&mp.out.b))
    }

    fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let vals: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        let base = Tensor::from_vec(
            sinusoidal_rows(&vals, self.config.width),
            &[ts.len(), self.config.width],
        )?;
        base.linear(&self.time_in.w, Some(&self.time_in.b))?
            .silu()
            .linear(&self.time_out.w, Some(&self.time_out.b))
    }

    /// Per-slot camera embedding, `[B, N, width]`, blended to the null row
    /// for dropped batch elements.
    fn camera_embedding(&self, cond: Option<&Condition>, drop: &[bool], b: usize) -> Result<Tensor> {
        let (n, w) = (self.config.views, self.config.width);
        let null = self.cam_null.reshape(&[1, 1, w])?;
        let Some(c) = cond else {
            return Tensor::zeros(&[b, n, w]).add(&null);
        };
        if c.cams.shape() != [b, n, 3] {
            return Err(Error::Shape(format!(
                "camera rows must be [{b}, {n}, 3], got {:?}",
                c.cams.shape()
            )));
        }
        let emb = c
            .cams
            .linear(&self.cam_in.w, Some(&self.cam_in.b))?
            .silu()
            .linear(&self.cam_out.w, Some(&self.cam_out.b))?;
        let keep = keep_mask(drop, 1)?;
        emb.mul(&keep)?
            .add(&null.mul(&keep.neg().add_scalar(1.0))?)
    }

    /// Encodes the monocular clip into per-frame context tokens,
    /// `[B*F, cond_tokens, width]`, with dropped elements replaced by the
    /// learned null tokens.
    fn cond_context(&self, cond: Option<&Condition>, drop: &[bool], b: usize, f: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let (tc, w) = (cfg.cond_tokens(), cfg.width);
        let null = self.cond_null.reshape(&[1, tc, w])?;
        let Some(c) = cond else {
            return Tensor::zeros(&[b * f, tc, w]).add(&null);
        };
        if c.mono.shape() != [b, f, cfg.channels, cfg.image_size, cfg.image_size] {
            return Err(Error::Shape(format!(
                "monocular clip must be [{b}, {f}, {}, {}, {}], got {:?}",
                cfg.channels,
                cfg.image_size,
                cfg.image_size,
                c.mono.shape()
            )));
        }
        let side = cfg.image_size / 8;
        let x = c
            .mono
            .reshape(&[b * f, cfg.channels, cfg.image_size, cfg.image_size])?
            .conv2d(&self.cond_c1.w, Some(&self.cond_c1.b), 2, 1)?
            .silu()
            .conv2d(&self.cond_c2.w, Some(&self.cond_c2.b), 2, 1)?
            .silu()
            .conv2d(&self.cond_c3.w, Some(&self.cond_c3.b), 2, 1)?;
        let tokens = x
            .reshape(&[b * f, w, side * side])?
            .permute(&[0, 2, 1])?
            .add(&self.cond_pos)?;
        let keep = keep_mask(drop, f)?;
        tokens
            .mul(&keep)?
            .add(&null.mul(&keep.neg().add_scalar(1.0))?)
    }

    /// Parameters the given stage trains: motion modules for
    /// [`Stage::Motion`], everything else for [`Stage::Spatial`].
    pub fn stage_params(&self, stage: Stage) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|(name, _)| is_motion_param(name) == (stage == Stage::Motion))
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// FNV-1a checksum over the spatial (non-motion) parameters.
    pub fn spatial_checksum(&self) -> u64 {
        self.subset_checksum(false)
    }

    /// FNV-1a checksum over the motion-module parameters.
    pub fn motion_checksum(&self) -> u64 {
        self.subset_checksum(true)
    }

    fn subset_checksum(&self, motion: bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.params.iter() {
            if is_motion_param(name) != motion {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in t.data().iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Writes the weights to `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if meta.config != self.config {
            return Err(Error::Checkpoint(
                "checkpoint metadata describes a different architecture".into(),
            ));
        }
        self.params.save(path)?;
        let json = serde_json::to_string_pretty(meta)
            .map_err(|e| Error::Checkpoint(format!("metadata encode: {e}")))?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    /// Rebuilds a denoiser from a weight file and its JSON sidecar.
    pub fn load(path: &Path) -> Result<(Denoiser, CheckpointMeta)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Denoiser::new(meta.config.clone(), &mut rng)?;
        model.params.load(path)?;
        Ok((model, meta))
    }
}

use rand::SeedableRng;

fn is_motion_param(name: &str) -> bool {
    name.contains(".motion.")
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Provenance stored next to a weight file: the architecture, the schedule
/// it was trained against, and how far which stage got.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub stage: Stage,
    pub steps: usize,
}

/// Sinusoidal rows for arbitrary scalar positions, `[len, dim]`,
/// sine half then cosine half.
fn sinusoidal_rows(vals: &[f32], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(vals.len() * dim);
    for &v in vals {
        for i in 0..dim {
            let idx = i % half;
            let exponent = if half > 1 {
                idx as f32 / (half - 1) as f32
            } else {
                0.0
            };
            let freq = (-exponent * (10_000.0f32).ln()).exp();
            let angle = v * freq;
            out.push(if i < half { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Fixed positional rows marking frame order inside the motion modules.
fn frame_positions(frames: usize, dim: usize) -> Tensor {
    let vals: Vec<f32> = (0..frames).map(|f| f as f32).collect();
    Tensor::from_vec(sinusoidal_rows(&vals, dim), &[frames, dim]).unwrap()
}

/// 1.0 for kept batch elements, 0.0 for dropped ones, each flag repeated
/// `repeat` times along the row axis: `[B*repeat, 1, 1]`.
fn keep_mask(drop: &[bool], repeat: usize) -> Result<Tensor> {
    let mut v = Vec::with_capacity(drop.len() * repeat);
    for &d in drop {
        let x = if d { 0.0 } else { 1.0 };
        for _ in 0..repeat {
            v.push(x);
        }
    }
    Tensor::from_vec(v, &[drop.len() * repeat, 1, 1])
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let &[b, t, c] = x.shape() else {
        return Err(Error::Shape(format!("attention expects [B, T, C], got {:?}", x.shape())));
    };
    x.reshape(&[b, t, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, t, c / heads])
}

fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let &[bh, t, d] = x.shape() else {
        return Err(Error::Shape(format!("merge expects [B*h, T, d], got {:?}", x.shape())));
    };
    x.reshape(&[bh / heads, heads, t, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[bh / heads, t, heads * d])
}

fn attend(p: &AttnP, q_src: &Tensor, kv_src: &Tensor, heads: usize) -> Result<Tensor> {
    let d = q_src.shape()[2] / heads;
    let q = split_heads(&q_src.linear(&p.q.w, Some(&p.q.b))?, heads)?;
    let k = split_heads(&kv_src.linear(&p.k.w, Some(&p.k.b))?, heads)?;
    let v = split_heads(&kv_src.linear(&p.v.w, Some(&p.v.b))?, heads)?;
    let scores = q
        .matmul(&k.transpose_last()?)?
        .scale(1.0 / (d as f32).sqrt());
    let mixed = scores.softmax_lastaxis().matmul(&v)?;
    merge_heads(&mixed, heads)?.linear(&p.o.w, Some(&p.o.b))
}

fn self_attention(p: &AttnP, x: &Tensor, heads: usize) -> Result<Tensor> {
    let h = x.layer_norm(&p.ln.g, &p.ln.b, LN_EPS)?;
    attend(p, &h, &h, heads)
}

fn cross_attention(p: &AttnP, x: &Tensor, ctx: &Tensor, heads: usize) -> Result<Tensor> {
    let h = x.layer_norm(&p.ln.g, &p.ln.b, LN_EPS)?;
    attend(p, &h, ctx, heads)
}

fn ffn(p: &FfnP, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(&p.ln.g, &p.ln.b, LN_EPS)?
        .linear(&p.up.w, Some(&p.up.b))?
        .silu()
        .linear(&p.down.w, Some(&p.down.b))
}
