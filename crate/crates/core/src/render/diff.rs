//! Slab-batched differentiable rendering.
//!
//! Samples advance through the volume in slabs of consecutive bins. Each
//! slab evaluates the field only for rays that are still transmissive and
//! only in occupied cells, then a custom op turns densities into compositing
//! weights while carrying per-ray log-transmittance forward in the graph, so
//! gradients flow across slab boundaries. Rays whose transmittance falls
//! below [`EARLY_STOP_T`] stop generating samples; the truncated tail can
//! move a pixel by at most that amount.

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::tensor::{ParentGrads, Tensor};

use super::{CameraRig, OccupancyGrid, Ray, SampleJitter, EARLY_STOP_T};

#[derive(Debug, Clone)]
pub struct DiffRenderConfig {
    /// Stratified bins per ray before culling.
    pub n_samples: usize,
    /// Bins advanced per slab.
    pub slab: usize,
}

impl Default for DiffRenderConfig {
    fn default() -> Self {
        DiffRenderConfig {
            n_samples: 128,
            slab: 16,
        }
    }
}

impl DiffRenderConfig {
    pub fn desk() -> Self {
        DiffRenderConfig {
            n_samples: 64,
            slab: 16,
        }
    }
}

/// Sample bookkeeping for one slab, kept for the regularizers.
pub struct SlabSamples {
    /// Compositing weights, `[S]`.
    pub weights: Tensor,
    pub positions: Vec<[f32; 3]>,
    pub times: Vec<f32>,
    /// Sample-to-ray map, ascending.
    pub seg: Vec<usize>,
}

/// Differentiable render of a ray batch.
pub struct DiffRender {
    /// White-composited colors, `[R, 3]`.
    pub rgb: Tensor,
    /// Accumulated opacity per ray (exact sum of weights), `[R]`.
    pub alpha: Tensor,
    pub slabs: Vec<SlabSamples>,
}

/// Renders rays through the field with gradients to every field parameter.
pub fn render_rays_diff(
    field: &FieldParams,
    rays: &[Ray],
    occ: Option<&OccupancyGrid>,
    cfg: &DiffRenderConfig,
    jitter: &mut SampleJitter,
) -> Result<DiffRender> {
    let r_count = rays.len();
    let n = cfg.n_samples;
    let offs = jitter.draw(r_count, n);
    let log_stop = EARLY_STOP_T.ln();

    let mut log_t = Tensor::zeros(&[r_count]);
    let mut color_acc: Option<Tensor> = None;
    let mut alpha_acc: Option<Tensor> = None;
    let mut slabs = Vec::new();

    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + cfg.slab).min(n);
        let live = log_t.data().clone();

        let mut positions = Vec::new();
        let mut times = Vec::new();
        let mut seg = Vec::new();
        let mut deltas = Vec::new();
        for (ri, ray) in rays.iter().enumerate() {
            if ray.far <= ray.near || live[ri] < log_stop {
                continue;
            }
            let delta = (ray.far - ray.near) / n as f32;
            for k in k0..k1 {
                let p = ray.point_at(ray.near + (k as f32 + offs[ri * n + k]) * delta);
                if let Some(grid) = occ {
                    if !grid.is_occupied_at(&p) {
                        continue;
                    }
                }
                positions.push(p);
                times.push(ray.t_stamp);
                seg.push(ri);
                deltas.push(delta);
            }
        }
        k0 = k1;
        if positions.is_empty() {
            continue;
        }

        let (tau, geo) = field.query_density(&positions, &times)?;
        let color = field.query_color(&geo)?;
        let (omega, log_t_next) = transmit_slab(&tau, &log_t, &seg, &deltas, r_count)?;
        let c_slab = segment_weighted_sum(&omega, &color, &seg, r_count)?;
        let a_slab = segment_sum(&omega, &seg, r_count)?;

        color_acc = Some(match color_acc {
            Some(acc) => acc.add(&c_slab)?,
            None => c_slab,
        });
        alpha_acc = Some(match alpha_acc {
            Some(acc) => acc.add(&a_slab)?,
            None => a_slab,
        });
        log_t = log_t_next;
        slabs.push(SlabSamples {
            weights: omega,
            positions,
            times,
            seg,
        });
    }

    let alpha = alpha_acc.unwrap_or_else(|| Tensor::zeros(&[r_count]));
    let color = color_acc.unwrap_or_else(|| Tensor::zeros(&[r_count, 3]));
    let bg = alpha.neg().add_scalar(1.0).reshape(&[r_count, 1])?;
    let rgb = color.add(&bg)?;
    Ok(DiffRender { rgb, alpha, slabs })
}

/// Renders several views at several timestamps as one ray batch:
/// `[F, N, 3, H, W]` plus the flat render for regularizer access. Ray order
/// is frame-major, then view, then row-major pixels.
pub fn render_video_diff(
    field: &FieldParams,
    rig: &CameraRig,
    view_indices: &[usize],
    timestamps: &[f32],
    occ: Option<&OccupancyGrid>,
    cfg: &DiffRenderConfig,
    jitter: &mut SampleJitter,
) -> Result<(Tensor, DiffRender)> {
    let (h, w) = (rig.height, rig.width);
    let (f_n, v_n) = (timestamps.len(), view_indices.len());
    let mut rays = Vec::with_capacity(f_n * v_n * h * w);
    for &t in timestamps {
        for &v in view_indices {
            rays.extend(rig.make_rays(v, t));
        }
    }
    let out = render_rays_diff(field, &rays, occ, cfg, jitter)?;
    let video = out
        .rgb
        .reshape(&[f_n, v_n, h, w, 3])?
        .permute(&[0, 1, 4, 2, 3])?;
    Ok((video, out))
}

/// Compositing weights for one slab. Consumes per-sample densities and per-ray
/// incoming log-transmittance; returns the weights `[S]` and the outgoing
/// log-transmittance `[R]` (identity for rays without samples). Samples of
/// one ray must be contiguous and ordered.
pub fn transmit_slab(
    tau: &Tensor,
    log_t: &Tensor,
    seg: &[usize],
    deltas: &[f32],
    r_count: usize,
) -> Result<(Tensor, Tensor)> {
    let s = tau.numel();
    if seg.len() != s || deltas.len() != s {
        return Err(Error::Shape(format!(
            "transmit_slab: {s} taus vs {} segs / {} deltas",
            seg.len(),
            deltas.len()
        )));
    }

    let mut out = vec![0.0f32; s + r_count];
    {
        let tau_d = tau.data();
        let lt = log_t.data();
        out[s..].copy_from_slice(&lt);
        let mut j = 0;
        while j < s {
            let ray = seg[j];
            let base = lt[ray];
            let mut prefix = 0.0f32;
            while j < s && seg[j] == ray {
                let a = tau_d[j] * deltas[j];
                out[j] = (base - prefix).exp() * (1.0 - (-a).exp());
                prefix += a;
                j += 1;
            }
            out[s + ray] = base - prefix;
        }
    }

    let tau_c = tau.clone();
    let lt_c = log_t.clone();
    let seg_c = seg.to_vec();
    let del_c = deltas.to_vec();
    let full = Tensor::from_op(
        vec![s + r_count],
        out,
        vec![tau.clone(), log_t.clone()],
        move |up| -> ParentGrads {
            let tau_d = tau_c.data();
            let lt = lt_c.data();
            let mut dtau = vec![0.0f32; s];
            let mut dlt = vec![0.0f32; r_count];
            for (ri, d) in dlt.iter_mut().enumerate() {
                *d = up[s + ri];
            }
            let mut j = 0;
            while j < s {
                let ray = seg_c[j];
                let start = j;
                while j < s && seg_c[j] == ray {
                    j += 1;
                }
                let base = lt[ray];
                let mut prefix = 0.0f32;
                let mut fwd = Vec::with_capacity(j - start);
                for q in start..j {
                    let a = tau_d[q] * del_c[q];
                    let t_here = (base - prefix).exp();
                    let e = (-a).exp();
                    fwd.push((t_here, e));
                    prefix += a;
                }
                // d w_i / d a_j = -w_i for j < i; T_i e_i at j = i; the
                // outgoing log-transmittance contributes -up_logT to every a.
                let up_l = up[s + ray];
                let mut suffix = 0.0f32;
                for q in (start..j).rev() {
                    let (t_here, e) = fwd[q - start];
                    let w = t_here * (1.0 - e);
                    let da = up[q] * t_here * e - suffix - up_l;
                    dtau[q] = da * del_c[q];
                    suffix += up[q] * w;
                    dlt[ray] += up[q] * w;
                }
            }
            vec![Some(dtau), Some(dlt)]
        },
    );
    let omega = full.narrow(0, 0, s)?;
    let log_t_next = full.narrow(0, s, r_count)?;
    Ok((omega, log_t_next))
}

/// Per-ray weighted color sum: `out[r] = sum_j w_j c_j` over this slab.
pub fn segment_weighted_sum(
    w: &Tensor,
    c: &Tensor,
    seg: &[usize],
    r_count: usize,
) -> Result<Tensor> {
    let s = w.numel();
    if c.shape() != [s, 3] {
        return Err(Error::Shape(format!(
            "segment_weighted_sum: colors {:?} for {s} weights",
            c.shape()
        )));
    }
    let mut out = vec![0.0f32; r_count * 3];
    {
        let wd = w.data();
        let cd = c.data();
        for j in 0..s {
            let ray = seg[j];
            for ch in 0..3 {
                out[ray * 3 + ch] += wd[j] * cd[j * 3 + ch];
            }
        }
    }
    let w_c = w.clone();
    let c_c = c.clone();
    let seg_c = seg.to_vec();
    Ok(Tensor::from_op(
        vec![r_count, 3],
        out,
        vec![w.clone(), c.clone()],
        move |up| -> ParentGrads {
            let wd = w_c.data();
            let cd = c_c.data();
            let mut dw = vec![0.0f32; s];
            let mut dc = vec![0.0f32; s * 3];
            for j in 0..s {
                let ray = seg_c[j];
                for ch in 0..3 {
                    let u = up[ray * 3 + ch];
                    dw[j] += u * cd[j * 3 + ch];
                    dc[j * 3 + ch] = u * wd[j];
                }
            }
            vec![Some(dw), Some(dc)]
        },
    ))
}

/// Per-ray sum of weights: the accumulated opacity contribution of a slab.
pub fn segment_sum(w: &Tensor, seg: &[usize], r_count: usize) -> Result<Tensor> {
    let s = w.numel();
    if seg.len() != s {
        return Err(Error::Shape("segment_sum: seg length mismatch".into()));
    }
    let mut out = vec![0.0f32; r_count];
    {
        let wd = w.data();
        for j in 0..s {
            out[seg[j]] += wd[j];
        }
    }
    let seg_c = seg.to_vec();
    Ok(Tensor::from_op(
        vec![r_count],
        out,
        vec![w.clone()],
        move |up| -> ParentGrads {
            let dw = seg_c.iter().map(|&ray| up[ray]).collect();
            vec![Some(dw)]
        },
    ))
}
