//! Image and video buffers plus PNG round-tripping.
//!
//! Pixel data is planar CHW f32 in [0, 1]. Files are 8-bit RGB PNG; the
//! quantization is round-to-nearest, so save/load round-trips to within one
//! half step of 1/255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// CHW, channel-major.
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        ImageBuf {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn from_data(channels: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::Shape(format!(
                "image buffer: {} values for {channels}x{h}x{w}",
                data.len()
            )));
        }
        Ok(ImageBuf { channels, h, w, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set_pixel(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[self.channels, self.h, self.w])
            .expect("buffer length matches its own shape")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Data(format!(
                "png save expects 3 channels, got {}",
                self.channels
            )));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut rgb = vec![0u8; self.h * self.w * 3];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let v = self.pixel(c, y, x).clamp(0.0, 1.0);
                    rgb[(y * self.w + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(self.w as u32, self.h as u32, rgb)
                .expect("raw buffer sized for dimensions");
        img.save(path)
            .map_err(|e| Error::Data(format!("png save {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("png load {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut buf = ImageBuf::new(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    buf.set_pixel(c, y, x, p.0[c] as f32 / 255.0);
                }
            }
        }
        Ok(buf)
    }
}

/// A clip of frames with identical dimensions.
#[derive(Debug, Clone, Default)]
pub struct VideoBuf {
    pub frames: Vec<ImageBuf>,
}

impl VideoBuf {
    pub fn new(frames: Vec<ImageBuf>) -> Self {
        VideoBuf { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Flattens to `[F, C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        assert!(!self.frames.is_empty(), "empty video has no shape");
        let f0 = &self.frames[0];
        let mut data = Vec::with_capacity(self.frames.len() * f0.data.len());
        for f in &self.frames {
            data.extend_from_slice(&f.data);
        }
        Tensor::from_vec(data, &[self.frames.len(), f0.channels, f0.h, f0.w])
            .expect("frames share dimensions")
    }

    pub fn from_tensor(t: &Tensor) -> Result<VideoBuf> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("video tensor must be [F,C,H,W], got {s:?}")));
        }
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = t.data();
        let frames = (0..f)
            .map(|fi| ImageBuf {
                channels: c,
                h,
                w,
                data: data[fi * c * h * w..(fi + 1) * c * h * w].to_vec(),
            })
            .collect();
        Ok(VideoBuf { frames })
    }

    /// Loads `frame0000.png`-style numbered frames in ascending order.
    pub fn load_dir(dir: &Path) -> Result<VideoBuf> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("no png frames in {}", dir.display())));
        }
        let frames = paths
            .iter()
            .map(|p| ImageBuf::load_png(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoBuf { frames })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            f.save_png(&dir.join(format!("frame{i:04}.png")))?;
        }
        Ok(())
    }

    /// Resamples to `count` frames by uniform index selection.
    pub fn resample(&self, count: usize) -> VideoBuf {
        let n = self.frames.len();
        let frames = (0..count)
            .map(|i| {
                let src = if count == 1 { 0 } else { i * (n - 1) / (count - 1) };
                self.frames[src].clone()
            })
            .collect();
        VideoBuf { frames }
    }
}
