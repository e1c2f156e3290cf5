//! Image quality metrics on unit-range buffers.

use crate::error::{Error, Result};
use crate::video::{ImageBuf, VideoBuf};

/// PSNR is capped here so identical images stay finite.
pub const PSNR_CAP_DB: f32 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB over all channels, data range 1.0.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f32> {
    check_same(a, b)?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB as f64) as f32)
}

/// The 11-tap Gaussian window used by SSIM, normalized to sum 1.
pub fn ssim_kernel() -> [f32; SSIM_WINDOW] {
    let mut k = [0.0f32; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f32;
    let mut sum = 0.0f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f32 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v as f64;
    }
    for v in k.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
    k
}

fn blur_valid(src: &[f32], h: usize, w: usize, k: &[f32]) -> Vec<f32> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0f32; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0f32;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0f32; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0f32;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean SSIM over the valid region of one plane.
fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let k = ssim_kernel();
    let mu_a = blur_valid(a, h, w, &k);
    let mu_b = blur_valid(b, h, w, &k);
    let aa: Vec<f32> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<f32> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f32> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let m_aa = blur_valid(&aa, h, w, &k);
    let m_bb = blur_valid(&bb, h, w, &k);
    let m_ab = blur_valid(&ab, h, w, &k);

    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i] as f64, mu_b[i] as f64);
        let va = m_aa[i] as f64 - ma * ma;
        let vb = m_bb[i] as f64 - mb * mb;
        let cov = m_ab[i] as f64 - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over channels, Gaussian 11x11 window, valid region only.
/// Images must be at least 11x11.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f32> {
    check_same(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim: image {}x{} smaller than the {SSIM_WINDOW}-tap window",
            a.h, a.w
        )));
    }
    let mut total = 0.0f64;
    for c in 0..a.channels {
        total += ssim_plane(a.plane(c), b.plane(c), a.h, a.w);
    }
    Ok((total / a.channels as f64) as f32)
}

fn downsample2(img: &ImageBuf) -> ImageBuf {
    let (ho, wo) = (img.h / 2, img.w / 2);
    let mut out = ImageBuf::new(img.channels, ho, wo);
    for c in 0..img.channels {
        for y in 0..ho {
            for x in 0..wo {
                let v = 0.25
                    * (img.pixel(c, 2 * y, 2 * x)
                        + img.pixel(c, 2 * y, 2 * x + 1)
                        + img.pixel(c, 2 * y + 1, 2 * x)
                        + img.pixel(c, 2 * y + 1, 2 * x + 1));
                out.set_pixel(c, y, x, v);
            }
        }
    }
    out
}

/// Multi-scale SSIM distance: `(1 - ssim) / 2` averaged over a dyadic
/// pyramid. Scales stop once the image would drop below the SSIM window.
pub fn ms_ssim_distance(a: &ImageBuf, b: &ImageBuf) -> Result<f32> {
    check_same(a, b)?;
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    let mut total = 0.0f64;
    let mut scales = 0usize;
    loop {
        total += (1.0 - ssim(&cur_a, &cur_b)? as f64) / 2.0;
        scales += 1;
        if cur_a.h / 2 < SSIM_WINDOW || cur_a.w / 2 < SSIM_WINDOW {
            break;
        }
        cur_a = downsample2(&cur_a);
        cur_b = downsample2(&cur_b);
    }
    Ok((total / scales as f64) as f32)
}

/// Mean SSIM between adjacent frame pairs; 1.0 for single-frame clips.
pub fn temporal_consistency(v: &VideoBuf) -> Result<f32> {
    if v.frames.len() < 2 {
        return Ok(1.0);
    }
    let mut total = 0.0f64;
    for pair in v.frames.windows(2) {
        total += ssim(&pair[0], &pair[1])? as f64;
    }
    Ok((total / (v.frames.len() - 1) as f64) as f32)
}

/// Mean PSNR between corresponding frames of two clips.
pub fn video_psnr(a: &VideoBuf, b: &VideoBuf) -> Result<f32> {
    if a.frames.len() != b.frames.len() {
        return Err(Error::Shape(format!(
            "video psnr: {} vs {} frames",
            a.frames.len(),
            b.frames.len()
        )));
    }
    let mut total = 0.0f64;
    for (x, y) in a.frames.iter().zip(&b.frames) {
        total += psnr(x, y)? as f64;
    }
    Ok((total / a.frames.len() as f64) as f32)
}

/// Mean SSIM between corresponding frames of two clips.
pub fn video_ssim(a: &VideoBuf, b: &VideoBuf) -> Result<f32> {
    if a.frames.len() != b.frames.len() {
        return Err(Error::Shape(format!(
            "video ssim: {} vs {} frames",
            a.frames.len(),
            b.frames.len()
        )));
    }
    let mut total = 0.0f64;
    for (x, y) in a.frames.iter().zip(&b.frames) {
        total += ssim(x, y)? as f64;
    }
    Ok((total / a.frames.len() as f64) as f32)
}

fn check_same(a: &ImageBuf, b: &ImageBuf) -> Result<()> {
    if a.channels != b.channels || a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "image metric: {}x{}x{} vs {}x{}x{}",
            a.channels, a.h, a.w, b.channels, b.h, b.w
        )));
    }
    Ok(())
}
