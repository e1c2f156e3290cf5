//! Convolution, pooling and separable blur ops for small feature maps.

use super::{ParentGrads, Tensor};
use crate::error::{Error, Result};

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl Tensor {
    /// 2-D convolution, `x [B, Ci, H, W] * w [Co, Ci, kh, kw] -> [B, Co, Ho, Wo]`.
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d: input {xs:?} with weight {ws:?}"
            )));
        }
        let (bsz, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if let Some(b) = b {
            if b.shape() != [co] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} does not match {co} output channels",
                    b.shape()
                )));
            }
        }
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);

        let x = self.data();
        let wv = w.data();
        let mut out = vec![0.0f32; bsz * co * ho * wo];
        if let Some(b) = b {
            let bv = b.data();
            for bi in 0..bsz {
                for c in 0..co {
                    let base = (bi * co + c) * ho * wo;
                    out[base..base + ho * wo].fill(bv[c]);
                }
            }
        }
        for bi in 0..bsz {
            for c in 0..co {
                for ic in 0..ci {
                    let xoff = (bi * ci + ic) * h * wd;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wval = wv[((c * ci + ic) * kh + ky) * kw + kx];
                            if wval == 0.0 {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let xrow = xoff + (iy - pad) * wd;
                                let orow = ((bi * co + c) * ho + oy) * wo;
                                for ox in 0..wo {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    out[orow + ox] += wval * x[xrow + ix - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop((x, wv));

        let xc = self.clone();
        let wc = w.clone();
        let bc = b.cloned();
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![bsz, co, ho, wo],
            out,
            parents,
            move |up| -> ParentGrads {
                let x = xc.data();
                let wv = wc.data();
                let mut gx = xc.is_tracked().then(|| vec![0.0f32; x.len()]);
                let mut gw = wc.is_tracked().then(|| vec![0.0f32; wv.len()]);
                let mut gb = match &bc {
                    Some(b) if b.is_tracked() => Some(vec![0.0f32; co]),
                    _ => None,
                };
                for bi in 0..bsz {
                    for c in 0..co {
                        let ubase = (bi * co + c) * ho * wo;
                        if let Some(gb) = gb.as_mut() {
                            gb[c] += up[ubase..ubase + ho * wo].iter().sum::<f32>();
                        }
                        for ic in 0..ci {
                            let xoff = (bi * ci + ic) * h * wd;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let widx = ((c * ci + ic) * kh + ky) * kw + kx;
                                    let wval = wv[widx];
                                    let mut wacc = 0.0f32;
                                    for oy in 0..ho {
                                        let iy = oy * stride + ky;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let xrow = xoff + (iy - pad) * wd;
                                        let urow = ubase + oy * wo;
                                        for ox in 0..wo {
                                            let ix = ox * stride + kx;
                                            if ix < pad || ix - pad >= wd {
                                                continue;
                                            }
                                            let u = up[urow + ox];
                                            wacc += u * x[xrow + ix - pad];
                                            if let Some(gx) = gx.as_mut() {
                                                gx[xrow + ix - pad] += u * wval;
                                            }
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[widx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if bc.is_some() {
                    grads.push(gb);
                }
                grads
            },
        ))
    }

    /// Depthwise 3x3 convolution with pad 1, `x [B, C, H, W]`, `w [C, 3, 3]`,
    /// `b [C]`.
    pub fn depthwise3x3(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 || w.shape() != [xs[1], 3, 3] || b.shape() != [xs[1]] {
            return Err(Error::Shape(format!(
                "depthwise3x3: input {:?}, weight {:?}, bias {:?}",
                xs,
                w.shape(),
                b.shape()
            )));
        }
        let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let x = self.data();
        let wv = w.data();
        let bv = b.data();
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * h * wd;
                let kern = &wv[ch * 9..ch * 9 + 9];
                for y in 0..h {
                    for xp in 0..wd {
                        let mut acc = bv[ch];
                        for ky in 0..3usize {
                            let iy = (y + ky).wrapping_sub(1);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (xp + kx).wrapping_sub(1);
                                if ix >= wd {
                                    continue;
                                }
                                acc += kern[ky * 3 + kx] * x[off + iy * wd + ix];
                            }
                        }
                        out[off + y * wd + xp] = acc;
                    }
                }
            }
        }
        drop((x, wv, bv));

        let xc = self.clone();
        let wc = w.clone();
        let bc = b.clone();
        Ok(Tensor::from_op(
            xs.to_vec(),
            out,
            vec![self.clone(), w.clone(), b.clone()],
            move |up| -> ParentGrads {
                let x = xc.data();
                let wv = wc.data();
                let mut gx = xc.is_tracked().then(|| vec![0.0f32; x.len()]);
                let mut gw = wc.is_tracked().then(|| vec![0.0f32; wv.len()]);
                let mut gb = bc.is_tracked().then(|| vec![0.0f32; c]);
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * h * wd;
                        let kern = &wv[ch * 9..ch * 9 + 9];
                        for y in 0..h {
                            for xp in 0..wd {
                                let u = up[off + y * wd + xp];
                                if let Some(gb) = gb.as_mut() {
                                    gb[ch] += u;
                                }
                                for ky in 0..3usize {
                                    let iy = (y + ky).wrapping_sub(1);
                                    if iy >= h {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = (xp + kx).wrapping_sub(1);
                                        if ix >= wd {
                                            continue;
                                        }
                                        if let Some(gw) = gw.as_mut() {
                                            gw[ch * 9 + ky * 3 + kx] += u * x[off + iy * wd + ix];
                                        }
                                        if let Some(gx) = gx.as_mut() {
                                            gx[off + iy * wd + ix] += u * kern[ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            },
        ))
    }

    /// 2x2 average pooling over the two trailing axes (must be even).
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let rank = self.ndim();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2: trailing dims must be even, got {h}x{w}"
            )));
        }
        let batch = self.numel() / (h * w);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data();
        let mut out = vec![0.0f32; batch * ho * wo];
        for bi in 0..batch {
            let xoff = bi * h * w;
            let ooff = bi * ho * wo;
            for y in 0..ho {
                for x in 0..wo {
                    let p = xoff + 2 * y * w + 2 * x;
                    out[ooff + y * wo + x] =
                        0.25 * (src[p] + src[p + 1] + src[p + w] + src[p + w + 1]);
                }
            }
        }
        drop(src);

        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 2] = ho;
        out_shape[rank - 1] = wo;
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |up| {
                let mut g = vec![0.0f32; total];
                for bi in 0..batch {
                    let xoff = bi * h * w;
                    let ooff = bi * ho * wo;
                    for y in 0..ho {
                        for x in 0..wo {
                            let u = 0.25 * up[ooff + y * wo + x];
                            let p = xoff + 2 * y * w + 2 * x;
                            g[p] += u;
                            g[p + 1] += u;
                            g[p + w] += u;
                            g[p + w + 1] += u;
                        }
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Separable blur over the two trailing axes with a constant kernel,
    /// valid region only: output dims shrink by `kernel.len() - 1`.
    pub fn blur2d_valid(&self, kernel: &[f32]) -> Result<Tensor> {
        let rank = self.ndim();
        let k = kernel.len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "blur2d_valid needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        if h < k || w < k {
            return Err(Error::Shape(format!(
                "blur2d_valid: {h}x{w} image smaller than {k}-tap kernel"
            )));
        }
        let batch = self.numel() / (h * w);
        let (ho, wo) = (h - k + 1, w - k + 1);
        let src = self.data();
        let mut tmp = vec![0.0f32; batch * h * wo];
        for bi in 0..batch {
            for y in 0..h {
                let row = &src[bi * h * w + y * w..bi * h * w + (y + 1) * w];
                let dst = &mut tmp[bi * h * wo + y * wo..bi * h * wo + (y + 1) * wo];
                for (x, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (i, &kv) in kernel.iter().enumerate() {
                        acc += kv * row[x + i];
                    }
                    *d = acc;
                }
            }
        }
        let mut out = vec![0.0f32; batch * ho * wo];
        for bi in 0..batch {
            for y in 0..ho {
                let dst = &mut out[bi * ho * wo + y * wo..bi * ho * wo + (y + 1) * wo];
                for (i, &kv) in kernel.iter().enumerate() {
                    let row = &tmp[bi * h * wo + (y + i) * wo..bi * h * wo + (y + i + 1) * wo];
                    for (d, &s) in dst.iter_mut().zip(row) {
                        *d += kv * s;
                    }
                }
            }
        }
        drop(src);

        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 2] = ho;
        out_shape[rank - 1] = wo;
        let kern = kernel.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |up| {
                // Transposed convolution: scatter each output grad through
                // both kernel passes.
                let mut gtmp = vec![0.0f32; batch * h * wo];
                for bi in 0..batch {
                    for y in 0..ho {
                        let urow = &up[bi * ho * wo + y * wo..bi * ho * wo + (y + 1) * wo];
                        for (i, &kv) in kern.iter().enumerate() {
                            let dst = &mut gtmp
                                [bi * h * wo + (y + i) * wo..bi * h * wo + (y + i + 1) * wo];
                            for (d, &u) in dst.iter_mut().zip(urow) {
                                *d += kv * u;
                            }
                        }
                    }
                }
                let mut g = vec![0.0f32; total];
                for bi in 0..batch {
                    for y in 0..h {
                        let trow = &gtmp[bi * h * wo + y * wo..bi * h * wo + (y + 1) * wo];
                        let dst = &mut g[bi * h * w + y * w..bi * h * w + (y + 1) * w];
                        for (x, &t) in trow.iter().enumerate() {
                            for (i, &kv) in kern.iter().enumerate() {
                                dst[x + i] += kv * t;
                            }
                        }
                    }
                }
                vec![Some(g)]
            },
        ))
    }
}
