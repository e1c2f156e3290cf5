//! Batched matrix multiplication.
//!
//! Three kernels cover forward and both gradients without materializing
//! transposes. Loop orders are chosen so the inner loop is a contiguous
//! slice walk the compiler can vectorize; the `nt` kernel uses eight partial
//! accumulators to vectorize its dot products while keeping a fixed
//! summation order.

use super::{ParentGrads, Tensor};
use crate::error::{Error, Result};

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T
pub(crate) fn mm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (kk, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn mm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Per-batch element strides; 0 when the operand is rank-2 and shared.
    stride_a: usize,
    stride_b: usize,
    out_shape: Vec<usize>,
}

fn plan(a_shape: &[usize], b_shape: &[usize]) -> Result<MatmulPlan> {
    let err = || {
        Error::Shape(format!(
            "matmul: incompatible shapes {a_shape:?} x {b_shape:?}"
        ))
    };
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(err());
    }
    let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if ka != kb {
        return Err(err());
    }
    let batch_a = &a_shape[..a_shape.len() - 2];
    let batch_b = &b_shape[..b_shape.len() - 2];
    let (batch_dims, stride_a0, stride_b0) = if batch_a == batch_b {
        (batch_a.to_vec(), m * ka, kb * n)
    } else if batch_b.is_empty() {
        (batch_a.to_vec(), m * ka, 0)
    } else if batch_a.is_empty() {
        (batch_b.to_vec(), 0, kb * n)
    } else {
        return Err(err());
    };
    let batch = batch_dims.iter().product::<usize>();
    let mut out_shape = batch_dims;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        batch,
        m,
        k: ka,
        n,
        stride_a: stride_a0,
        stride_b: stride_b0,
        out_shape,
    })
}

impl Tensor {
    /// Batched matmul `[.., m, k] x [.., k, n] -> [.., m, n]`. Leading batch
    /// dims must match exactly, or one operand may be rank-2 and is then
    /// shared across the other's batches (its gradient sums over them).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let p = plan(self.shape(), rhs.shape())?;
        let mut data = vec![0.0f32; p.batch * p.m * p.n];
        {
            let (da, db) = (self.data(), rhs.data());
            for bi in 0..p.batch {
                mm_nn(
                    &da[bi * p.stride_a..bi * p.stride_a + p.m * p.k],
                    &db[bi * p.stride_b..bi * p.stride_b + p.k * p.n],
                    &mut data[bi * p.m * p.n..(bi + 1) * p.m * p.n],
                    p.m,
                    p.k,
                    p.n,
                );
            }
        }
        let (ac, bc) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            p.out_shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            move |up| -> ParentGrads {
                let (da, db) = (ac.data(), bc.data());
                let mut ga = ac.is_tracked().then(|| vec![0.0f32; da.len()]);
                let mut gb = bc.is_tracked().then(|| vec![0.0f32; db.len()]);
                for bi in 0..p.batch {
                    let u = &up[bi * p.m * p.n..(bi + 1) * p.m * p.n];
                    if let Some(g) = ga.as_mut() {
                        mm_nt(
                            u,
                            &db[bi * p.stride_b..bi * p.stride_b + p.k * p.n],
                            &mut g[bi * p.stride_a..bi * p.stride_a + p.m * p.k],
                            p.m,
                            p.n,
                            p.k,
                        );
                    }
                    if let Some(g) = gb.as_mut() {
                        mm_tn(
                            &da[bi * p.stride_a..bi * p.stride_a + p.m * p.k],
                            u,
                            &mut g[bi * p.stride_b..bi * p.stride_b + p.k * p.n],
                            p.m,
                            p.k,
                            p.n,
                        );
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// `x [.., in] * w [in, out] + b [out]`, the dense-layer composite.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let rank = self.ndim();
        if rank < 1 || w.ndim() != 2 {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}",
                self.shape(),
                w.shape()
            )));
        }
        // Flatten leading axes so the rank-2 broadcast path applies.
        let in_dim = self.shape()[rank - 1];
        let rows = self.numel() / in_dim;
        let out_dim = w.shape()[1];
        let flat = self.reshape(&[rows, in_dim])?;
        let y = flat.matmul(w)?;
        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 1] = out_dim;
        let y = y.reshape(&out_shape)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}
