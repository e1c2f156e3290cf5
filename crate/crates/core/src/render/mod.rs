//! Volumetric rendering of space-time fields.
//!
//! A fixed camera rig looks at the origin from distance 1.1; rays are
//! clipped to the [-1, 1]^3 scene box and marched with stratified samples.
//! Compositing follows C = sum_i w_i c_i + (1 - alpha) * white with
//! w_i = T_i (1 - exp(-tau_i d_i)) and T_i the accumulated transmittance.
//! An occupancy grid caching the maximum opacity over all frame times culls
//! empty cells. Two routes share the sampling rules: a plain f32 marcher for
//! inference and a slab-batched differentiable renderer for optimization.

mod diff;
mod march;
mod occupancy;

pub use diff::{
    render_rays_diff, render_video_diff, segment_sum, segment_weighted_sum, transmit_slab,
    DiffRender, DiffRenderConfig, SlabSamples,
};
pub use march::{
    march_scalar, render_image, render_image_azimuth, render_video, render_view_video, RayResult,
};
pub use occupancy::OccupancyGrid;

use serde::{Deserialize, Serialize};

use crate::field::FieldParams;

/// Transmittance below which a ray stops marching; the discarded tail can
/// contribute at most this fraction of a pixel value.
pub const EARLY_STOP_T: f32 = 1e-4;

/// Anything a ray can march through: density and view-independent color as
/// plain functions of a space-time point.
pub trait SceneField {
    fn density_color(&self, p: &[f32; 3], t: f32) -> (f32, [f32; 3]);

    fn density(&self, p: &[f32; 3], t: f32) -> f32 {
        self.density_color(p, t).0
    }
}

impl SceneField for FieldParams {
    fn density_color(&self, p: &[f32; 3], t: f32) -> (f32, [f32; 3]) {
        self.eval_density_color(p, t)
    }

    fn density(&self, p: &[f32; 3], t: f32) -> f32 {
        self.eval_density(p, t)
    }
}

/// The canonical camera set: four orthogonal generation views plus one free
/// conditioning view, all looking at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub distance: f32,
    pub elevation_deg: f32,
    pub azimuths_deg: [f32; 4],
    /// Azimuth of the conditioning (input) view, selectable per scene.
    pub cond_azimuth_deg: f32,
    pub fov_y_deg: f32,
    pub height: usize,
    pub width: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            distance: 1.1,
            elevation_deg: 0.0,
            azimuths_deg: [0.0, 90.0, 180.0, 270.0],
            cond_azimuth_deg: 0.0,
            fov_y_deg: 40.0,
            height: 64,
            width: 64,
        }
    }
}

/// Index of the conditioning view in `make_rays`.
pub const COND_VIEW: usize = 4;

impl CameraRig {
    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.height = h;
        self.width = w;
        self
    }

    /// Azimuth for a view index: 0..3 are the orthogonal generation views,
    /// [`COND_VIEW`] is the conditioning view.
    pub fn azimuth_of_view(&self, view_index: usize) -> f32 {
        if view_index == COND_VIEW {
            self.cond_azimuth_deg
        } else {
            self.azimuths_deg[view_index]
        }
    }

    /// Camera center for an azimuth: azimuth 0 sits on the -y axis and
    /// increases toward +x, elevation lifts toward +z.
    pub fn camera_position(&self, azimuth_deg: f32) -> [f32; 3] {
        let az = azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        let r = self.distance * el.cos();
        [r * az.sin(), -r * az.cos(), self.distance * el.sin()]
    }

    /// Pinhole rays through every pixel center, row-major, clipped to the
    /// scene box. Rays that miss the box carry near == far.
    pub fn make_rays(&self, view_index: usize, frame_time: f32) -> Vec<Ray> {
        self.make_rays_azimuth(self.azimuth_of_view(view_index), frame_time)
    }

    /// Same ray construction for an arbitrary azimuth, used by the dataset
    /// generator's view sweep.
    pub fn make_rays_azimuth(&self, azimuth_deg: f32, frame_time: f32) -> Vec<Ray> {
        let pos = self.camera_position(azimuth_deg);
        let fwd = normalize(&[-pos[0], -pos[1], -pos[2]]);
        let world_up = if fwd[2].abs() > 0.999 {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let right = normalize(&cross(&fwd, &world_up));
        let up = cross(&right, &fwd);

        let tan_half = (self.fov_y_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f32 / self.height as f32;
        let mut rays = Vec::with_capacity(self.height * self.width);
        for i in 0..self.height {
            let y = (1.0 - (i as f32 + 0.5) / self.height as f32 * 2.0) * tan_half;
            for j in 0..self.width {
                let x = ((j as f32 + 0.5) / self.width as f32 * 2.0 - 1.0) * tan_half * aspect;
                let dir = normalize(&[
                    fwd[0] + x * right[0] + y * up[0],
                    fwd[1] + x * right[1] + y * up[1],
                    fwd[2] + x * right[2] + y * up[2],
                ]);
                let (near, far) = ray_box(&pos, &dir).unwrap_or((0.0, 0.0));
                rays.push(Ray {
                    origin: pos,
                    dir,
                    near,
                    far,
                    t_stamp: frame_time,
                });
            }
        }
        rays
    }
}

/// One camera ray with its box clip interval and the frame time it samples.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f32; 3],
    pub dir: [f32; 3],
    pub near: f32,
    pub far: f32,
    pub t_stamp: f32,
}

impl Ray {
    pub fn point_at(&self, t: f32) -> [f32; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Slab intersection with the [-1, 1]^3 box; entry clamped to 0 for origins
/// inside the box.
pub fn ray_box(o: &[f32; 3], d: &[f32; 3]) -> Option<(f32, f32)> {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-9 {
            if o[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut ta = (-1.0 - o[a]) * inv;
        let mut tb = (1.0 - o[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

fn normalize(v: &[f32; 3]) -> [f32; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: &[f32; 3], b: &[f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// How stratified sample offsets are drawn.
pub enum SampleJitter<'a> {
    /// Deterministic bin midpoints; used by tests and evaluation renders.
    Midpoint,
    /// Seeded per-ray, per-bin offsets in [0, 1).
    Seeded(&'a mut rand_chacha::ChaCha8Rng),
}

impl SampleJitter<'_> {
    /// Offsets for `rays.len() * n` bins, ray-major.
    pub(crate) fn draw(&mut self, n_rays: usize, n: usize) -> Vec<f32> {
        match self {
            SampleJitter::Midpoint => vec![0.5; n_rays * n],
            SampleJitter::Seeded(rng) => {
                use rand::Rng;
                (0..n_rays * n).map(|_| rng.gen::<f32>()).collect()
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_pixel_ray_passes_through_origin() {
        let rig = CameraRig::default().with_size(9, 9);
        for v in 0..4 {
            let rays = rig.make_rays(v, 0.0);
            let hit = rays[4 * 9 + 4].point_at(rig.distance);
            let miss = (hit[0] * hit[0] + hit[1] * hit[1] + hit[2] * hit[2]).sqrt();
            assert!(miss < 1e-6, "view {v} center ray misses origin by {miss}");
        }
    }

    #[test]
    fn opposite_azimuth_cameras_are_mirror_images() {
        let rig = CameraRig::default();
        let a = rig.camera_position(0.0);
        let b = rig.camera_position(180.0);
        for k in 0..3 {
            assert!((a[k] + b[k]).abs() < 1e-6, "axis {k}: {} vs {}", a[k], b[k]);
        }
        assert!((a[1] + rig.distance).abs() < 1e-6, "azimuth 0 sits on -y");
    }

    #[test]
    fn ray_directions_are_unit_norm() {
        let rig = CameraRig::default().with_size(16, 16);
        for v in [0, 1, 2, 3, COND_VIEW] {
            for ray in rig.make_rays(v, 0.5) {
                let n2 = ray.dir[0] * ray.dir[0] + ray.dir[1] * ray.dir[1] + ray.dir[2] * ray.dir[2];
                assert!((n2.sqrt() - 1.0).abs() < 1e-6);
                assert_eq!(ray.t_stamp, 0.5);
            }
        }
    }

    #[test]
    fn conditioning_view_uses_the_free_azimuth() {
        let rig = CameraRig {
            cond_azimuth_deg: 45.0,
            ..CameraRig::default()
        };
        assert_eq!(rig.azimuth_of_view(COND_VIEW), 45.0);
        assert_eq!(rig.azimuth_of_view(2), 180.0);
        let p = rig.camera_position(45.0);
        assert!(p[0] > 0.0 && p[1] < 0.0);
    }

    #[test]
    fn box_clipping_brackets_the_scene() {
        let (near, far) = ray_box(&[0.0, -1.1, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((near - 0.1).abs() < 1e-6 && (far - 2.1).abs() < 1e-6);

        let (near, far) = ray_box(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(near, 0.0, "entry clamps to zero inside the box");
        assert!((far - 1.0).abs() < 1e-6);

        assert!(ray_box(&[0.0, -1.1, 2.0], &[0.0, 1.0, 0.0]).is_none());
        assert!(ray_box(&[0.0, 2.0, 0.0], &[1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn rig_rays_clip_near_before_far() {
        let rig = CameraRig::default().with_size(24, 24);
        let mut hits = 0;
        for ray in rig.make_rays(0, 0.0) {
            if ray.far > ray.near {
                hits += 1;
                assert!(ray.near > 0.0, "camera sits outside the box");
            } else {
                assert_eq!((ray.near, ray.far), (0.0, 0.0));
            }
        }
        assert!(hits > 0);
    }
}
