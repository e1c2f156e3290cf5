//! Elementwise, broadcast, movement and reduction ops.

use super::Tensor;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Broadcasting machinery

/// Shape produced by numpy-style broadcasting, aligning trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"
            )));
        };
    }
    Ok(out)
}

/// Row-major strides, with 0 on axes the operand broadcasts over.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every output index of `out_shape`, handing the callback the linear
/// offsets into the two operands. The odometer keeps the walk allocation-free.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut offa = 0usize;
    let mut offb = 0usize;
    for o in 0..total {
        f(o, offa, offb);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offa += sa[ax];
            offb += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offa -= sa[ax] * out_shape[ax];
            offb -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    f: fn(f32, f32) -> f32,
    dfa: fn(f32, f32) -> f32,
    dfb: fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let total: usize = out_shape.iter().product();
    let mut data = vec![0.0f32; total];

    if a.shape() == b.shape() {
        let (da, db) = (a.data(), b.data());
        for ((o, &x), &y) in data.iter_mut().zip(da.iter()).zip(db.iter()) {
            *o = f(x, y);
        }
    } else if b.numel() == 1 {
        let y = b.data()[0];
        for (o, &x) in data.iter_mut().zip(a.data().iter()) {
            *o = f(x, y);
        }
    } else if a.numel() == 1 {
        let x = a.data()[0];
        for (o, &y) in data.iter_mut().zip(b.data().iter()) {
            *o = f(x, y);
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let (da, db) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = f(da[ia], db[ib]);
        });
    }

    let (ac, bc) = (a.clone(), b.clone());
    let shape_for_bwd = out_shape.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        move |up| {
            let (da, db) = (ac.data(), bc.data());
            let need_a = ac.is_tracked();
            let need_b = bc.is_tracked();
            let mut ga = need_a.then(|| vec![0.0f32; da.len()]);
            let mut gb = need_b.then(|| vec![0.0f32; db.len()]);
            let sa = broadcast_strides(ac.shape(), &shape_for_bwd);
            let sb = broadcast_strides(bc.shape(), &shape_for_bwd);
            for_each_broadcast(&shape_for_bwd, &sa, &sb, |o, ia, ib| {
                let (x, y, u) = (da[ia], db[ib], up[o]);
                if let Some(g) = ga.as_mut() {
                    g[ia] += u * dfa(x, y);
                }
                if let Some(g) = gb.as_mut() {
                    g[ib] += u * dfb(x, y);
                }
            });
            vec![ga, gb]
        },
    ))
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    let saved_y = data.clone();
    let xc = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |up| {
        let dx = xc.data();
        let g = up
            .iter()
            .zip(dx.iter())
            .zip(saved_y.iter())
            .map(|((&u, &xi), &yi)| u * df(xi, yi))
            .collect();
        vec![Some(g)]
    })
}

// ---------------------------------------------------------------------------
// Public op surface

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f32::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f32::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self) -> Tensor {
        unary(
            self,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamps values; gradient passes through only where unclamped.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements as a `[1]` tensor. Accumulates in f64 in a single
    /// fixed order, so the result is identical run to run.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s as f32], vec![self.clone()], move |up| {
            vec![Some(vec![up[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let count = self.numel();
        Tensor::from_op(vec![1], vec![(s / n) as f32], vec![self.clone()], move |up| {
            let g = up[0] / count as f32;
            vec![Some(vec![g; count])]
        })
    }

    /// Mean squared error against `target`, a `[1]` tensor.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        Ok(self.sub(target)?.square().mean_all())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} elements) into {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |up| vec![Some(up.to_vec())],
        ))
    }

    /// Reorders axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "permute: {:?} is not a permutation of 0..{}",
                axes, rank
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let data = permute_copy(&self.data(), &in_shape, axes);

        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            move |up| vec![Some(permute_copy(up, &out_shape, &inverse))],
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let rank = self.ndim();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "transpose_last needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other axes must match.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0usize;
        for t in tensors {
            if t.ndim() != rank
                || (0..rank).any(|i| i != axis && t.shape()[i] != first.shape()[i])
            {
                return Err(Error::Shape(format!(
                    "concat: shape {:?} incompatible with {:?} on axis {axis}",
                    t.shape(),
                    first.shape()
                )));
            }
            axis_total += t.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;

        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0f32; out_shape.iter().product()];
        let mut cursor = 0usize;
        let row = axis_total * inner;
        for t in tensors {
            let len = t.shape()[axis] * inner;
            let src = t.data();
            for o in 0..outer {
                data[o * row + cursor..o * row + cursor + len]
                    .copy_from_slice(&src[o * len..(o + 1) * len]);
            }
            cursor += len;
        }

        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            tensors.to_vec(),
            move |up| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut cursor = 0usize;
                for &len in &sizes {
                    let mut g = vec![0.0f32; outer * len];
                    for o in 0..outer {
                        g[o * len..(o + 1) * len]
                            .copy_from_slice(&up[o * row + cursor..o * row + cursor + len]);
                    }
                    grads.push(Some(g));
                    cursor += len;
                }
                grads
            },
        ))
    }

    /// A contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.ndim();
        if axis >= rank || start + len > self.shape()[axis] {
            return Err(Error::Shape(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis] * inner;
        let take = len * inner;
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;

        let src = self.data();
        let mut data = vec![0.0f32; outer * take];
        for o in 0..outer {
            data[o * take..(o + 1) * take]
                .copy_from_slice(&src[o * full + start * inner..o * full + start * inner + take]);
        }
        drop(src);

        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |up| {
                let mut g = vec![0.0f32; total];
                for o in 0..outer {
                    g[o * full + start * inner..o * full + start * inner + take]
                        .copy_from_slice(&up[o * take..(o + 1) * take]);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Selects rows along axis 0 (duplicates allowed; gradients scatter-add).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(Error::Shape("gather_rows on rank-0 tensor".into()));
        }
        let rows = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();

        let src = self.data();
        let mut data = vec![0.0f32; indices.len() * inner];
        for (o, &i) in indices.iter().enumerate() {
            data[o * inner..(o + 1) * inner].copy_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        drop(src);

        let idx = indices.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |up| {
                let mut g = vec![0.0f32; total];
                for (o, &i) in idx.iter().enumerate() {
                    for (d, u) in g[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&up[o * inner..(o + 1) * inner])
                    {
                        *d += u;
                    }
                }
                vec![Some(g)]
            },
        ))
    }
}

fn permute_copy(src: &[f32], in_shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = in_shape.len();
    let total: usize = in_shape.iter().product();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let out_strides_in: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    let mut out = vec![0.0f32; total];
    if rank == 0 {
        out.copy_from_slice(src);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for item in out.iter_mut() {
        *item = src[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += out_strides_in[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= out_strides_in[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
