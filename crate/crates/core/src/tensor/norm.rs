//! Fused row-wise normalizations with analytic backward passes.
//!
//! Row statistics accumulate in f64 so values and gradients are independent
//! of chunking and identical run to run.

use super::{ParentGrads, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Softmax over the trailing axis. Rows are shifted by their max before
    /// exponentiation.
    pub fn softmax_lastaxis(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax on rank-0 tensor");
        let rows = self.numel() / d;
        let src = self.data();
        let mut out = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let x = &src[r * d..(r + 1) * d];
            let y = &mut out[r * d..(r + 1) * d];
            let m = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - m).exp();
                sum += *yi as f64;
            }
            let inv = (1.0 / sum) as f32;
            for yi in y.iter_mut() {
                *yi *= inv;
            }
        }
        drop(src);

        let saved = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |up| -> ParentGrads {
                let mut g = vec![0.0f32; saved.len()];
                for r in 0..saved.len() / d {
                    let y = &saved[r * d..(r + 1) * d];
                    let u = &up[r * d..(r + 1) * d];
                    let s: f64 = y.iter().zip(u).map(|(&yi, &ui)| (yi * ui) as f64).sum();
                    let s = s as f32;
                    for ((gi, &yi), &ui) in g[r * d..(r + 1) * d].iter_mut().zip(y).zip(u) {
                        *gi = yi * (ui - s);
                    }
                }
                vec![Some(g)]
            },
        )
    }

    /// Layer normalization over the trailing axis with affine parameters
    /// `gamma`, `beta` of shape `[C]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} needs gamma/beta of shape [{c}], got {:?}/{:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / c;
        let src = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut out = vec![0.0f32; self.numel()];
        let mut xhat = vec![0.0f32; self.numel()];
        let mut invstd = vec![0.0f32; rows];
        for r in 0..rows {
            let x = &src[r * c..(r + 1) * c];
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            invstd[r] = istd as f32;
            for i in 0..c {
                let xh = ((x[i] as f64 - mean) * istd) as f32;
                xhat[r * c + i] = xh;
                out[r * c + i] = g[i] * xh + b[i];
            }
        }
        drop((src, g, b));

        let gc = gamma.clone();
        let need = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |up| -> ParentGrads {
                let g = gc.data();
                let mut gx = need.0.then(|| vec![0.0f32; xhat.len()]);
                let mut gg = need.1.then(|| vec![0.0f32; c]);
                let mut gb = need.2.then(|| vec![0.0f32; c]);
                for r in 0..xhat.len() / c {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let u = &up[r * c..(r + 1) * c];
                    if let Some(gg) = gg.as_mut() {
                        for i in 0..c {
                            gg[i] += u[i] * xh[i];
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for i in 0..c {
                            gb[i] += u[i];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for i in 0..c {
                            let dxh = (u[i] * g[i]) as f64;
                            m1 += dxh;
                            m2 += dxh * xh[i] as f64;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for i in 0..c {
                            let dxh = (u[i] * g[i]) as f64;
                            gx[r * c + i] =
                                (invstd[r] as f64 * (dxh - m1 - xh[i] as f64 * m2)) as f32;
                        }
                    }
                }
                vec![gx, gg, gb]
            },
        ))
    }

    /// Group normalization for sequences shaped `[B, T, C]`: channels split
    /// into `groups`, statistics taken per (batch, group) over `T x C/groups`
    /// elements. Affine parameters have shape `[C]`.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "group_norm expects [B, T, C], got {shape:?}"
            )));
        }
        let (bsz, t, c) = (shape[0], shape[1], shape[2]);
        if c % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "group_norm: gamma/beta must be [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let cg = c / groups;
        let src = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut out = vec![0.0f32; self.numel()];
        let mut xhat = vec![0.0f32; self.numel()];
        let mut invstd = vec![0.0f32; bsz * groups];
        let count = (t * cg) as f64;
        for bi in 0..bsz {
            for gi in 0..groups {
                let mut mean = 0.0f64;
                for ti in 0..t {
                    let base = bi * t * c + ti * c + gi * cg;
                    mean += src[base..base + cg].iter().map(|&v| v as f64).sum::<f64>();
                }
                mean /= count;
                let mut var = 0.0f64;
                for ti in 0..t {
                    let base = bi * t * c + ti * c + gi * cg;
                    var += src[base..base + cg]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                var /= count;
                let istd = 1.0 / (var + eps as f64).sqrt();
                invstd[bi * groups + gi] = istd as f32;
                for ti in 0..t {
                    let base = bi * t * c + ti * c + gi * cg;
                    for i in 0..cg {
                        let xh = ((src[base + i] as f64 - mean) * istd) as f32;
                        xhat[base + i] = xh;
                        out[base + i] = g[gi * cg + i] * xh + b[gi * cg + i];
                    }
                }
            }
        }
        drop((src, g, b));

        let gc = gamma.clone();
        let need = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |up| -> ParentGrads {
                let g = gc.data();
                let mut gx = need.0.then(|| vec![0.0f32; xhat.len()]);
                let mut gg = need.1.then(|| vec![0.0f32; c]);
                let mut gb = need.2.then(|| vec![0.0f32; c]);
                if gg.is_some() || gb.is_some() {
                    for bi in 0..bsz {
                        for ti in 0..t {
                            let base = bi * t * c + ti * c;
                            for i in 0..c {
                                if let Some(gg) = gg.as_mut() {
                                    gg[i] += up[base + i] * xhat[base + i];
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[i] += up[base + i];
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    for bi in 0..bsz {
                        for gi in 0..groups {
                            let mut m1 = 0.0f64;
                            let mut m2 = 0.0f64;
                            for ti in 0..t {
                                let base = bi * t * c + ti * c + gi * cg;
                                for i in 0..cg {
                                    let dxh = (up[base + i] * g[gi * cg + i]) as f64;
                                    m1 += dxh;
                                    m2 += dxh * xhat[base + i] as f64;
                                }
                            }
                            m1 /= count;
                            m2 /= count;
                            let istd = invstd[bi * groups + gi] as f64;
                            for ti in 0..t {
                                let base = bi * t * c + ti * c + gi * cg;
                                for i in 0..cg {
                                    let dxh = (up[base + i] * g[gi * cg + i]) as f64;
                                    gx[base + i] =
                                        (istd * (dxh - m1 - xhat[base + i] as f64 * m2)) as f32;
                                }
                            }
                        }
                    }
                }
                vec![gx, gg, gb]
            },
        ))
    }
}
