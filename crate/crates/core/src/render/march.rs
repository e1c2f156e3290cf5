//! Plain f32 ray marching: inference renders and dataset ground truth.

use crate::error::Result;
use crate::tensor::Tensor;
use crate::video::ImageBuf;

use super::{CameraRig, OccupancyGrid, Ray, SampleJitter, SceneField, EARLY_STOP_T};

/// Composited color and accumulated opacity of one ray. `alpha` is the exact
/// sum of the sample weights.
#[derive(Debug, Clone, Copy)]
pub struct RayResult {
    pub rgb: [f32; 3],
    pub alpha: f32,
}

/// Marches one ray with `n_samples` stratified bins and white-background
/// compositing. `jitter` holds one offset in [0, 1) per bin.
pub fn march_scalar(
    ray: &Ray,
    scene: &dyn SceneField,
    occ: Option<&OccupancyGrid>,
    n_samples: usize,
    jitter: &[f32],
) -> RayResult {
    let mut rgb = [0.0f32; 3];
    let mut alpha = 0.0f32;
    let mut trans = 1.0f32;
    if ray.far > ray.near {
        let delta = (ray.far - ray.near) / n_samples as f32;
        for (k, &u) in jitter.iter().enumerate().take(n_samples) {
            let p = ray.point_at(ray.near + (k as f32 + u) * delta);
            if let Some(grid) = occ {
                if !grid.is_occupied_at(&p) {
                    continue;
                }
            }
            let (tau, c) = scene.density_color(&p, ray.t_stamp);
            if tau <= 0.0 {
                continue;
            }
            let e = (-tau * delta).exp();
            let w = trans * (1.0 - e);
            for ch in 0..3 {
                rgb[ch] += w * c[ch];
            }
            alpha += w;
            trans *= e;
            if trans < EARLY_STOP_T {
                break;
            }
        }
    }
    for ch in 0..3 {
        rgb[ch] = (rgb[ch] + (1.0 - alpha)).clamp(0.0, 1.0);
    }
    RayResult { rgb, alpha }
}

/// Renders one view at one frame time into a 3xHxW image.
pub fn render_image(
    rig: &CameraRig,
    view_index: usize,
    scene: &dyn SceneField,
    occ: Option<&OccupancyGrid>,
    frame_time: f32,
    n_samples: usize,
    jitter: &mut SampleJitter,
) -> ImageBuf {
    render_image_azimuth(
        rig,
        rig.azimuth_of_view(view_index),
        scene,
        occ,
        frame_time,
        n_samples,
        jitter,
    )
}

/// Renders an arbitrary-azimuth view at one frame time into a 3xHxW image.
pub fn render_image_azimuth(
    rig: &CameraRig,
    azimuth_deg: f32,
    scene: &dyn SceneField,
    occ: Option<&OccupancyGrid>,
    frame_time: f32,
    n_samples: usize,
    jitter: &mut SampleJitter,
) -> ImageBuf {
    let rays = rig.make_rays_azimuth(azimuth_deg, frame_time);
    let offs = jitter.draw(rays.len(), n_samples);
    let mut img = ImageBuf::new(3, rig.height, rig.width);
    for (ri, ray) in rays.iter().enumerate() {
        let out = march_scalar(
            ray,
            scene,
            occ,
            n_samples,
            &offs[ri * n_samples..(ri + 1) * n_samples],
        );
        let (y, x) = (ri / rig.width, ri % rig.width);
        for ch in 0..3 {
            img.set_pixel(ch, y, x, out.rgb[ch]);
        }
    }
    img
}

/// Renders the four orthogonal views at every timestamp: `[F, 4, 3, H, W]`.
pub fn render_video(
    rig: &CameraRig,
    scene: &dyn SceneField,
    occ: Option<&OccupancyGrid>,
    timestamps: &[f32],
    n_samples: usize,
    jitter: &mut SampleJitter,
) -> Result<Tensor> {
    let (h, w) = (rig.height, rig.width);
    let mut data = Vec::with_capacity(timestamps.len() * 4 * 3 * h * w);
    for &t in timestamps {
        for v in 0..4 {
            let img = render_image(rig, v, scene, occ, t, n_samples, jitter);
            data.extend_from_slice(img.plane(0));
            data.extend_from_slice(img.plane(1));
            data.extend_from_slice(img.plane(2));
        }
    }
    Tensor::from_vec(data, &[timestamps.len(), 4, 3, h, w])
}

/// Renders a single view at every timestamp: `[F, 3, H, W]`.
pub fn render_view_video(
    rig: &CameraRig,
    view_index: usize,
    scene: &dyn SceneField,
    occ: Option<&OccupancyGrid>,
    timestamps: &[f32],
    n_samples: usize,
    jitter: &mut SampleJitter,
) -> Result<Tensor> {
    let (h, w) = (rig.height, rig.width);
    let mut data = Vec::with_capacity(timestamps.len() * 3 * h * w);
    for &t in timestamps {
        let img = render_image(rig, view_index, scene, occ, t, n_samples, jitter);
        for c in 0..3 {
            data.extend_from_slice(img.plane(c));
        }
    }
    Tensor::from_vec(data, &[timestamps.len(), 3, h, w])
}
