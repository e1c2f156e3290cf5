//! Procedural animated scenes and the multi-view video dataset.
//!
//! Scenes are unions of rigid primitives on smooth periodic trajectories,
//! with analytic density and color so every render has an exact ground
//! truth. The dataset generator sweeps a ring of azimuths around each scene
//! and writes clips plus JSON descriptions that regenerate byte-identically
//! from the same spec.

use std::f32::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::UnitSphere;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render_image_azimuth, CameraRig, SampleJitter, SceneField};
use crate::tensor::Tensor;
use crate::video::{ImageBuf, VideoBuf};

/// A rigid solid described by a signed distance in its local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { radius: f32 },
    Cuboid { half: [f32; 3] },
    /// Capsule along the local z axis.
    Capsule { half_len: f32, radius: f32 },
}

impl Shape {
    /// Signed distance from a point in the local frame.
    pub fn sdf(&self, q: &[f32; 3]) -> f32 {
        match *self {
            Shape::Sphere { radius } => norm(q) - radius,
            Shape::Cuboid { half } => {
                let d = [
                    q[0].abs() - half[0],
                    q[1].abs() - half[1],
                    q[2].abs() - half[2],
                ];
                let outside = norm(&[d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
                outside + d[0].max(d[1]).max(d[2]).min(0.0)
            }
            Shape::Capsule { half_len, radius } => {
                let z = q[2] - q[2].clamp(-half_len, half_len);
                norm(&[q[0], q[1], z]) - radius
            }
        }
    }

    /// Radius of the smallest origin-centered ball containing the shape.
    pub fn bounding_radius(&self) -> f32 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Cuboid { half } => norm(&half),
            Shape::Capsule { half_len, radius } => half_len + radius,
        }
    }

    fn scaled(&self, s: f32) -> Shape {
        match *self {
            Shape::Sphere { radius } => Shape::Sphere { radius: radius * s },
            Shape::Cuboid { half } => Shape::Cuboid {
                half: [half[0] * s, half[1] * s, half[2] * s],
            },
            Shape::Capsule { half_len, radius } => Shape::Capsule {
                half_len: half_len * s,
                radius: radius * s,
            },
        }
    }
}

/// One rigid body on a periodic trajectory: the center follows
/// `base + amp * sin(TAU*t + phase)` per axis while the body makes a whole
/// number of turns about `spin_axis`, so the motion has period exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Density inside the body; zero outside.
    pub tau: f32,
    pub base: [f32; 3],
    pub amp: [f32; 3],
    pub phase: [f32; 3],
    /// Unit rotation axis.
    pub spin_axis: [f32; 3],
    pub spin_turns: i32,
}

impl Primitive {
    pub fn position(&self, t: f32) -> [f32; 3] {
        let mut p = [0.0f32; 3];
        for i in 0..3 {
            p[i] = self.base[i] + self.amp[i] * (TAU * t + self.phase[i]).sin();
        }
        p
    }

    /// Row-major local-to-world rotation at time `t`.
    pub fn rotation(&self, t: f32) -> [[f32; 3]; 3] {
        rodrigues(&self.spin_axis, TAU * self.spin_turns as f32 * t)
    }

    /// Signed world-space distance to the body at time `t`.
    pub fn sdf_at(&self, p: &[f32; 3], t: f32) -> f32 {
        let pos = self.position(t);
        let d = [p[0] - pos[0], p[1] - pos[1], p[2] - pos[2]];
        let r = self.rotation(t);
        let q = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        self.shape.sdf(&q)
    }

    /// `tau` strictly inside the surface, zero on and outside it.
    pub fn density(&self, p: &[f32; 3], t: f32) -> f32 {
        if self.sdf_at(p, t) < 0.0 {
            self.tau
        } else {
            0.0
        }
    }

    /// Radius of the ball around `base` containing the body at every time.
    pub fn swept_radius(&self) -> f32 {
        self.shape.bounding_radius() + norm(&self.amp)
    }
}

/// A set of non-overlapping primitives; density is the per-point maximum and
/// color comes from the densest primitive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnimatedScene {
    pub prims: Vec<Primitive>,
    pub seed: u64,
}

impl SceneField for AnimatedScene {
    fn density_color(&self, p: &[f32; 3], t: f32) -> (f32, [f32; 3]) {
        let mut best = (0.0f32, [0.0f32; 3]);
        for prim in &self.prims {
            let dx = [p[0] - prim.base[0], p[1] - prim.base[1], p[2] - prim.base[2]];
            let reach = prim.swept_radius() + 1e-4;
            if dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2] > reach * reach {
                continue;
            }
            let tau = prim.density(p, t);
            if tau > best.0 {
                best = (tau, prim.color);
            }
        }
        best
    }
}

/// Draws 1-4 separated primitives with distinct hues and periodic motion.
/// Primitives sit on a ring with their swept footprints capped below half
/// the ring chord, so they can never touch; trajectory speed is bounded by
/// `TAU * |amp| <= 1` box-units per unit time.
pub fn sample_scene(seed: u64) -> AnimatedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4usize);
    let scale = 1.0 / (n as f32).sqrt();
    let ring_r = match n {
        1 => 0.0,
        2 => 0.18,
        3 => 0.20,
        _ => 0.22,
    };
    let theta0 = rng.gen_range(0.0..TAU);
    let hue0: f32 = rng.gen_range(0.0..1.0);
    let foot_cap = if n == 1 {
        0.30
    } else {
        (2.0 * ring_r * (PI / n as f32).sin() - 0.06) * 0.5
    };

    let mut prims = Vec::with_capacity(n);
    for k in 0..n {
        let mut shape = match rng.gen_range(0..3u32) {
            0 => Shape::Sphere {
                radius: rng.gen_range(0.07..0.14) * scale,
            },
            1 => Shape::Cuboid {
                half: [
                    rng.gen_range(0.05..0.11) * scale,
                    rng.gen_range(0.05..0.11) * scale,
                    rng.gen_range(0.05..0.11) * scale,
                ],
            },
            _ => Shape::Capsule {
                half_len: rng.gen_range(0.07..0.12) * scale,
                radius: rng.gen_range(0.04..0.08) * scale,
            },
        };
        let color = hsv_to_rgb(hue0 + k as f32 * 0.618_034, 0.75, 0.95);
        let tau = rng.gen_range(15.0..40.0);

        let theta = theta0 + TAU * k as f32 / n as f32;
        let rad = ring_r + rng.gen_range(-0.015..0.015);
        let base = [
            rad * theta.cos(),
            rad * theta.sin(),
            rng.gen_range(-0.08..0.08),
        ];

        let dir: [f32; 3] = rng.sample(UnitSphere);
        let mag = rng.gen_range(0.03..0.10) * scale;
        let mut amp = [dir[0] * mag, dir[1] * mag, dir[2] * mag];
        let phase = [
            rng.gen_range(0.0..TAU),
            rng.gen_range(0.0..TAU),
            rng.gen_range(0.0..TAU),
        ];
        let spin_axis: [f32; 3] = rng.sample(UnitSphere);
        let spin_turns = rng.gen_range(-1..=1i32);

        let foot = shape.bounding_radius() + mag;
        if foot > foot_cap {
            let s = foot_cap / foot * 0.98;
            shape = shape.scaled(s);
            for a in &mut amp {
                *a *= s;
            }
        }

        prims.push(Primitive {
            shape,
            color,
            tau,
            base,
            amp,
            phase,
            spin_axis,
            spin_turns,
        });
    }
    AnimatedScene { prims, seed }
}

/// Generation recipe for the multi-view video dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Azimuth ring size; must be a positive multiple of 4 so the four
    /// orthogonal views land on ring members.
    pub views: usize,
    /// Frames in the master render each clip is strided from.
    pub master_frames: usize,
    pub clip_frames: usize,
    /// Master-frame stride between consecutive clip frames.
    pub stride: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Ray-march samples per pixel.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_scenes: 64,
            test_scenes: 8,
            views: 32,
            master_frames: 32,
            clip_frames: 8,
            stride: 4,
            size: 32,
            n_samples: 96,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.views % 4 != 0 {
            return Err(Error::Config(format!(
                "views must be a positive multiple of 4, got {}",
                self.views
            )));
        }
        if self.train_scenes == 0 {
            return Err(Error::Config("train_scenes must be at least 1".into()));
        }
        if self.master_frames < 2 {
            return Err(Error::Config(format!(
                "master_frames must be at least 2, got {}",
                self.master_frames
            )));
        }
        if self.clip_frames == 0 || self.stride == 0 {
            return Err(Error::Config("clip_frames and stride must be positive".into()));
        }
        if (self.clip_frames - 1) * self.stride >= self.master_frames {
            return Err(Error::Config(format!(
                "clip of {} frames at stride {} overruns the {}-frame master",
                self.clip_frames, self.stride, self.master_frames
            )));
        }
        if self.size == 0 || self.n_samples == 0 {
            return Err(Error::Config("size and n_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn scene_count(&self) -> usize {
        self.train_scenes + self.test_scenes
    }

    /// Azimuth of ring view `v`, uniform over [-180, 180).
    pub fn azimuth_of_view(&self, v: usize) -> f32 {
        -180.0 + 360.0 * v as f32 / self.views as f32
    }

    /// Ring indices at azimuths 0, 90, 180, 270, in camera-rig slot order.
    pub fn ortho_views(&self) -> [usize; 4] {
        [self.views / 2, 3 * self.views / 4, 0, self.views / 4]
    }

    /// Master-frame indices a clip keeps: `{0, stride, 2*stride, ...}`.
    pub fn clip_indices(&self) -> Vec<usize> {
        (0..self.clip_frames).map(|i| i * self.stride).collect()
    }

    /// Time of a master frame, uniform over [0, 1].
    pub fn frame_time(&self, master_index: usize) -> f32 {
        master_index as f32 / (self.master_frames - 1) as f32
    }

    pub fn clip_times(&self) -> Vec<f32> {
        self.clip_indices().iter().map(|&i| self.frame_time(i)).collect()
    }

    pub fn scene_seed(&self, id: usize) -> u64 {
        splitmix64(self.seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Scene content, split tag, and conditioning view for one scene id.
    pub fn scene_record(&self, id: usize) -> SceneRecord {
        let seed = self.scene_seed(id);
        let mut view_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
        SceneRecord {
            id,
            split: if id < self.train_scenes {
                Split::Train
            } else {
                Split::Test
            },
            mono_view: view_rng.gen_range(0..self.views),
            scene: sample_scene(seed),
        }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::default().with_size(self.size, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Everything needed to re-create and interpret one scene directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub split: Split,
    /// Ring view used as the monocular conditioning clip.
    pub mono_view: usize,
    pub scene: AnimatedScene,
}

/// Root description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub rig: CameraRig,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub view_azimuths: Vec<f32>,
    pub ortho_views: [usize; 4],
    pub clip_indices: Vec<usize>,
    pub clip_times: Vec<f32>,
}

/// Renders every scene from the full azimuth ring and writes the dataset
/// tree: `scenes/{id}/view{v}/frame{f}.png` clip frames named by master
/// index, a `scene.json` per scene, and a root `manifest.json` last, so a
/// readable manifest implies a complete dataset.
pub fn build_dataset(spec: &DatasetSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let rig = spec.rig();
    let clip_indices = spec.clip_indices();
    let clip_times = spec.clip_times();
    let manifest = Manifest {
        spec: spec.clone(),
        rig: rig.clone(),
        train_ids: (0..spec.train_scenes).collect(),
        test_ids: (spec.train_scenes..spec.scene_count()).collect(),
        view_azimuths: (0..spec.views).map(|v| spec.azimuth_of_view(v)).collect(),
        ortho_views: spec.ortho_views(),
        clip_indices: clip_indices.clone(),
        clip_times: clip_times.clone(),
    };

    for id in 0..spec.scene_count() {
        let record = spec.scene_record(id);
        let dir = scene_dir(root, id);
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("scene.json"), &record)?;
        for v in 0..spec.views {
            let az = spec.azimuth_of_view(v);
            let vdir = dir.join(format!("view{v:02}"));
            for (&mi, &t) in clip_indices.iter().zip(&clip_times) {
                let img = render_image_azimuth(
                    &rig,
                    az,
                    &record.scene,
                    None,
                    t,
                    spec.n_samples,
                    &mut SampleJitter::Midpoint,
                );
                img.save_png(&vdir.join(format!("frame{mi:02}.png")))?;
            }
        }
    }
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// One conditioning clip plus its four orthogonal target clips, each
/// `[F, 3, H, W]`.
pub struct TrainingSample {
    pub id: usize,
    pub mono_view: usize,
    pub mono_azimuth: f32,
    pub mono: Tensor,
    pub ortho: Vec<Tensor>,
}

/// Read access to a dataset directory.
pub struct DatasetHandle {
    root: PathBuf,
    pub manifest: Manifest,
}

impl DatasetHandle {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        Ok(DatasetHandle {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn scene_dir(&self, id: usize) -> PathBuf {
        scene_dir(&self.root, id)
    }

    pub fn load_record(&self, id: usize) -> Result<SceneRecord> {
        read_json(&self.scene_dir(id).join("scene.json"))
    }

    /// Clip frames of one ring view as `[F, 3, H, W]`.
    pub fn load_view_clip(&self, id: usize, view: usize) -> Result<Tensor> {
        let vdir = self.scene_dir(id).join(format!("view{view:02}"));
        let frames = self
            .manifest
            .clip_indices
            .iter()
            .map(|mi| ImageBuf::load_png(&vdir.join(format!("frame{mi:02}.png"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoBuf::new(frames).to_tensor())
    }

    /// The five clips of one scene: the monocular view plus the four
    /// orthogonal views in rig slot order.
    pub fn load_sample(&self, id: usize) -> Result<TrainingSample> {
        let record = self.load_record(id)?;
        let mono = self.load_view_clip(id, record.mono_view)?;
        let ortho = self
            .manifest
            .ortho_views
            .iter()
            .map(|&v| self.load_view_clip(id, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSample {
            id,
            mono_view: record.mono_view,
            mono_azimuth: self.manifest.spec.azimuth_of_view(record.mono_view),
            mono,
            ortho,
        })
    }
}

fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join("scenes").join(format!("{id:04}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn norm(v: &[f32; 3]) -> f32 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn rodrigues(axis: &[f32; 3], angle: f32) -> [[f32; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = *axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_view_video;

    fn static_prim(shape: Shape, color: [f32; 3], tau: f32, base: [f32; 3]) -> Primitive {
        Primitive {
            shape,
            color,
            tau,
            base,
            amp: [0.0; 3],
            phase: [0.0; 3],
            spin_axis: [0.0, 0.0, 1.0],
            spin_turns: 0,
        }
    }

    #[test]
    fn same_seed_reproduces_the_scene() {
        let a = serde_json::to_string(&sample_scene(7)).unwrap();
        let b = serde_json::to_string(&sample_scene(7)).unwrap();
        let c = serde_json::to_string(&sample_scene(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trajectories_are_slow_periodic_and_inside_the_box() {
        let mut seen = [false; 4];
        for seed in 0..60u64 {
            let scene = sample_scene(seed);
            assert!((1..=4).contains(&scene.prims.len()));
            seen[scene.prims.len() - 1] = true;
            for prim in &scene.prims {
                assert!(TAU * norm(&prim.amp) <= 1.0, "speed bound violated");
                let bound = prim.shape.bounding_radius();
                let p0 = prim.position(0.0);
                let p1 = prim.position(1.0);
                for i in 0..3 {
                    assert!((p0[i] - p1[i]).abs() < 1e-5, "translation not periodic");
                }
                let (r0, r1) = (prim.rotation(0.0), prim.rotation(1.0));
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((r0[i][j] - r1[i][j]).abs() < 1e-5, "rotation not periodic");
                    }
                }
                for step in 0..=32 {
                    let t = step as f32 / 32.0;
                    let pos = prim.position(t);
                    for x in pos {
                        assert!(x.abs() + bound <= 1.0, "geometry leaves the box");
                    }
                    let off = [
                        pos[0] - prim.base[0],
                        pos[1] - prim.base[1],
                        pos[2] - prim.base[2],
                    ];
                    assert!(norm(&off) + bound <= prim.swept_radius() + 1e-6);
                    let h = 1e-3;
                    let (pa, pb) = (prim.position(t - h), prim.position(t + h));
                    let v = [
                        (pb[0] - pa[0]) / (2.0 * h),
                        (pb[1] - pa[1]) / (2.0 * h),
                        (pb[2] - pa[2]) / (2.0 * h),
                    ];
                    assert!(norm(&v) <= 1.0 + 1e-3, "numeric speed {} > 1", norm(&v));
                }
            }
        }
        assert_eq!(seen, [true; 4], "60 seeds should cover 1-4 primitives");
    }

    #[test]
    fn sampled_primitives_never_touch_and_keep_distinct_colors() {
        for seed in 0..60u64 {
            let scene = sample_scene(seed);
            let n = scene.prims.len();
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (&scene.prims[i], &scene.prims[j]);
                    for step in 0..=16 {
                        let t = step as f32 / 16.0;
                        let (pa, pb) = (a.position(t), b.position(t));
                        let d = [pa[0] - pb[0], pa[1] - pb[1], pa[2] - pb[2]];
                        let min_gap = a.shape.bounding_radius() + b.shape.bounding_radius();
                        assert!(
                            norm(&d) > min_gap,
                            "seed {seed}: primitives {i} and {j} overlap at t={t}"
                        );
                    }
                    let cd = (0..3)
                        .map(|c| (a.color[c] - b.color[c]).abs())
                        .fold(0.0f32, f32::max);
                    assert!(cd >= 0.1, "seed {seed}: colors too close");
                }
            }
        }
    }

    #[test]
    fn sphere_density_matches_the_distance_oracle() {
        let prim = Primitive {
            shape: Shape::Sphere { radius: 0.1 },
            color: [0.9, 0.2, 0.1],
            tau: 25.0,
            base: [0.05, -0.02, 0.03],
            amp: [0.03, 0.01, -0.02],
            phase: [0.4, 1.3, 2.2],
            spin_axis: [0.0, 0.0, 1.0],
            spin_turns: 1,
        };
        let dirs = [
            [1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.577_35, 0.577_35, 0.577_35],
        ];
        for &t in &[0.0, 0.3, 0.77] {
            let mut pos = [0.0f32; 3];
            for i in 0..3 {
                pos[i] = prim.base[i] + prim.amp[i] * (TAU * t + prim.phase[i]).sin();
            }
            for dir in dirs {
                let inside = [
                    pos[0] + 0.095 * dir[0],
                    pos[1] + 0.095 * dir[1],
                    pos[2] + 0.095 * dir[2],
                ];
                let outside = [
                    pos[0] + 0.105 * dir[0],
                    pos[1] + 0.105 * dir[1],
                    pos[2] + 0.105 * dir[2],
                ];
                assert_eq!(prim.density(&inside, t), 25.0);
                assert_eq!(prim.density(&outside, t), 0.0);
            }
        }
    }

    #[test]
    fn cuboid_sdf_matches_the_clamp_point_oracle() {
        let half = [0.12, 0.05, 0.08];
        let prim = Primitive {
            shape: Shape::Cuboid { half },
            color: [0.1, 0.8, 0.3],
            tau: 20.0,
            base: [-0.1, 0.06, 0.0],
            amp: [0.02, -0.03, 0.01],
            phase: [2.0, 0.1, 4.4],
            spin_axis: [0.408_248, 0.816_497, -0.408_248],
            spin_turns: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &[0.0, 0.3, 0.9] {
            let pos = prim.position(t);
            let rot = rodrigues(&prim.spin_axis, TAU * t);
            for _ in 0..200 {
                let q = [
                    rng.gen_range(-0.2..0.2f32),
                    rng.gen_range(-0.2..0.2f32),
                    rng.gen_range(-0.2..0.2f32),
                ];
                let p = [
                    pos[0] + rot[0][0] * q[0] + rot[0][1] * q[1] + rot[0][2] * q[2],
                    pos[1] + rot[1][0] * q[0] + rot[1][1] * q[1] + rot[1][2] * q[2],
                    pos[2] + rot[2][0] * q[0] + rot[2][1] * q[1] + rot[2][2] * q[2],
                ];
                let sdf = prim.sdf_at(&p, t);
                let inside = (0..3).all(|i| q[i].abs() < half[i]);
                if inside {
                    let depth = (0..3).map(|i| half[i] - q[i].abs()).fold(f32::MAX, f32::min);
                    assert!((sdf + depth).abs() < 1e-5);
                    assert_eq!(prim.density(&p, t), 20.0);
                } else {
                    let cp = [
                        q[0].clamp(-half[0], half[0]),
                        q[1].clamp(-half[1], half[1]),
                        q[2].clamp(-half[2], half[2]),
                    ];
                    let d = [q[0] - cp[0], q[1] - cp[1], q[2] - cp[2]];
                    assert!((sdf - norm(&d)).abs() < 1e-5);
                    assert_eq!(prim.density(&p, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn capsule_sdf_matches_the_segment_oracle() {
        let (half_len, radius) = (0.11, 0.06);
        let prim = static_prim(
            Shape::Capsule { half_len, radius },
            [0.5, 0.5, 0.1],
            18.0,
            [0.0, 0.0, 0.0],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let q = [
                rng.gen_range(-0.3..0.3f32),
                rng.gen_range(-0.3..0.3f32),
                rng.gen_range(-0.3..0.3f32),
            ];
            let axial = if q[2].abs() <= half_len {
                (q[0] * q[0] + q[1] * q[1]).sqrt()
            } else {
                let end = [0.0, 0.0, half_len.copysign(q[2])];
                norm(&[q[0] - end[0], q[1] - end[1], q[2] - end[2]])
            };
            let oracle = axial - radius;
            assert!((prim.sdf_at(&q, 0.5) - oracle).abs() < 1e-5);
        }
    }

    #[test]
    fn a_full_turn_midway_reorients_the_cuboid() {
        let prim = Primitive {
            shape: Shape::Cuboid {
                half: [0.2, 0.05, 0.05],
            },
            color: [1.0, 0.5, 0.0],
            tau: 30.0,
            base: [0.0; 3],
            amp: [0.0; 3],
            phase: [0.0; 3],
            spin_axis: [0.0, 0.0, 1.0],
            spin_turns: 1,
        };
        // Quarter turn about z swings the long x axis onto y.
        assert_eq!(prim.density(&[0.18, 0.0, 0.0], 0.0), 30.0);
        assert_eq!(prim.density(&[0.0, 0.18, 0.0], 0.0), 0.0);
        assert_eq!(prim.density(&[0.0, 0.18, 0.0], 0.25), 30.0);
        assert_eq!(prim.density(&[0.18, 0.0, 0.0], 0.25), 0.0);
    }

    #[test]
    fn overlapping_primitives_take_the_densest_color() {
        let a = static_prim(
            Shape::Sphere { radius: 0.2 },
            [1.0, 0.0, 0.0],
            10.0,
            [0.0; 3],
        );
        let b = static_prim(
            Shape::Sphere { radius: 0.2 },
            [0.0, 0.0, 1.0],
            30.0,
            [0.15, 0.0, 0.0],
        );
        let scene = AnimatedScene {
            prims: vec![a, b],
            seed: 0,
        };
        let (tau, color) = scene.density_color(&[0.08, 0.0, 0.0], 0.0);
        assert_eq!(tau, 30.0);
        assert_eq!(color, [0.0, 0.0, 1.0]);
        let (tau, color) = scene.density_color(&[-0.12, 0.0, 0.0], 0.0);
        assert_eq!(tau, 10.0);
        assert_eq!(color, [1.0, 0.0, 0.0]);
        assert_eq!(scene.density_color(&[0.0, 0.5, 0.0], 0.0).0, 0.0);
    }

    #[test]
    fn empty_scene_is_white_and_static_scene_is_constant() {
        let rig = CameraRig::default().with_size(5, 5);
        let times = [0.0, 0.33, 0.9];
        let empty = AnimatedScene::default();
        let video =
            render_view_video(&rig, 0, &empty, None, &times, 8, &mut SampleJitter::Midpoint)
                .unwrap();
        assert!(video.data().iter().all(|&v| v == 1.0));

        let scene = AnimatedScene {
            prims: vec![static_prim(
                Shape::Sphere { radius: 0.2 },
                [0.8, 0.3, 0.1],
                25.0,
                [0.05, 0.0, 0.0],
            )],
            seed: 0,
        };
        let video =
            render_view_video(&rig, 0, &scene, None, &times, 32, &mut SampleJitter::Midpoint)
                .unwrap();
        let d = video.data();
        let frame = 3 * 5 * 5;
        assert!(d[..frame].iter().any(|&v| v != 1.0), "sphere not visible");
        for f in 1..times.len() {
            assert_eq!(d[..frame], d[f * frame..(f + 1) * frame]);
        }
    }

    #[test]
    fn quarter_turn_view_centers_an_x_offset_sphere() {
        let scene = AnimatedScene {
            prims: vec![static_prim(
                Shape::Sphere { radius: 0.12 },
                [0.2, 0.3, 0.8],
                30.0,
                [0.15, 0.0, 0.0],
            )],
            seed: 0,
        };
        let rig = CameraRig::default().with_size(33, 33);
        let centroid = |az: f32| -> (f32, f32) {
            let img = render_image_azimuth(
                &rig,
                az,
                &scene,
                None,
                0.0,
                96,
                &mut SampleJitter::Midpoint,
            );
            let (mut wx, mut wy, mut total) = (0.0f64, 0.0f64, 0.0f64);
            for y in 0..33 {
                for x in 0..33 {
                    let luma = (img.pixel(0, y, x) + img.pixel(1, y, x) + img.pixel(2, y, x)) / 3.0;
                    let w = (1.0 - luma) as f64;
                    wx += w * x as f64;
                    wy += w * y as f64;
                    total += w;
                }
            }
            assert!(total > 0.0, "sphere not visible at azimuth {az}");
            ((wx / total) as f32, (wy / total) as f32)
        };
        let (cx, cy) = centroid(90.0);
        assert!((cx - 16.0).abs() < 0.5, "az 90 column centroid {cx}");
        assert!((cy - 16.0).abs() < 0.5, "az 90 row centroid {cy}");
        let (cx, _) = centroid(0.0);
        assert!((cx - 16.0).abs() > 3.0, "az 0 should be off-center, got {cx}");
    }

    #[test]
    fn default_spec_follows_the_stride_protocol() {
        let spec = DatasetSpec::default();
        spec.validate().unwrap();
        assert_eq!(
            spec.clip_indices(),
            vec![0, 4, 8, 12, 16, 20, 24, 28],
            "stride-4 clip from the 32-frame master"
        );
        assert_eq!(spec.ortho_views(), [16, 24, 0, 8]);
        assert_eq!(spec.azimuth_of_view(16), 0.0);
        assert_eq!(spec.azimuth_of_view(24), 90.0);
        assert_eq!(spec.azimuth_of_view(0), -180.0);
        assert_eq!(spec.azimuth_of_view(8), -90.0);
        assert_eq!(spec.frame_time(0), 0.0);

        let mut bad = spec.clone();
        bad.views = 30;
        assert!(bad.validate().is_err());
        bad = spec.clone();
        bad.stride = 5;
        assert!(bad.validate().is_err(), "8 frames at stride 5 overrun 32");
    }

    #[test]
    fn scene_records_split_train_before_test() {
        let spec = DatasetSpec {
            train_scenes: 3,
            test_scenes: 2,
            ..DatasetSpec::default()
        };
        for id in 0..5 {
            let rec = spec.scene_record(id);
            assert_eq!(rec.id, id);
            assert_eq!(rec.split, if id < 3 { Split::Train } else { Split::Test });
            assert!(rec.mono_view < spec.views);
            assert_eq!(rec.scene, sample_scene(spec.scene_seed(id)));
        }
        let seeds: std::collections::HashSet<u64> =
            (0..5).map(|id| spec.scene_seed(id)).collect();
        assert_eq!(seeds.len(), 5, "scene seeds must be distinct");
    }
}
