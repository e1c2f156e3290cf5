//! Hash-encoded dynamic neural field.
//!
//! Geometry lives in the [-1, 1]^3 box with time in [0, 1]. A point is
//! encoded by a static multi-resolution 3-D hash grid plus three 2-D
//! spatio-temporal planes (x,t), (y,t), (z,t) whose per-level features are
//! combined by elementwise product. A one-hidden-layer MLP maps the
//! concatenated features to density and a geometry vector; a second MLP maps
//! the geometry vector to view-independent color.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{ParentGrads, Tensor};

/// Multiplicative hash constants, one per dimension. Products wrap in u32
/// before the XOR, matching the usual spatial-hash construction.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features_per_level: usize,
    pub coarsest_res: usize,
    pub finest_res: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            table_size: 1 << 19,
            features_per_level: 2,
            coarsest_res: 16,
            finest_res: 4096,
        }
    }
}

impl HashGridConfig {
    /// A small configuration for CPU-scale runs.
    pub fn desk() -> Self {
        HashGridConfig {
            levels: 8,
            table_size: 1 << 15,
            features_per_level: 2,
            coarsest_res: 16,
            finest_res: 256,
        }
    }

    /// Per-level growth factor b = exp((ln finest - ln coarsest) / (L - 1)).
    pub fn growth(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        ((self.finest_res as f64 / self.coarsest_res as f64).ln()
            / (self.levels - 1) as f64)
            .exp()
    }

    /// Grid resolution at `level`: floor(coarsest * b^level). A half-ulp
    /// epsilon absorbs rounding so the last level lands exactly on
    /// `finest_res`.
    pub fn level_res(&self, level: usize) -> usize {
        let r = self.coarsest_res as f64 * self.growth().powi(level as i32);
        (r + 1e-6).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.table_size == 0 || self.features_per_level == 0 {
            return Err(Error::Config("hash grid dimensions must be nonzero".into()));
        }
        if self.features_per_level > 8 {
            return Err(Error::Config("features_per_level is limited to 8".into()));
        }
        if self.coarsest_res < 1 || self.finest_res < self.coarsest_res {
            return Err(Error::Config(format!(
                "resolution ladder {}..{} is not increasing",
                self.coarsest_res, self.finest_res
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    /// Width of both MLP hidden layers.
    pub hidden: usize,
    /// Geometry feature dimension passed from density to color.
    pub geo_dim: usize,
    /// Added to the raw density output before softplus; negative values bias
    /// fresh fields toward empty space.
    pub density_bias: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid: HashGridConfig::default(),
            hidden: 64,
            geo_dim: 15,
            density_bias: -1.0,
        }
    }
}

impl FieldConfig {
    pub fn desk() -> Self {
        FieldConfig {
            grid: HashGridConfig::desk(),
            ..FieldConfig::default()
        }
    }

    /// Width of the encoded feature vector: grid levels plus plane levels,
    /// `features_per_level` each.
    pub fn encode_dim(&self) -> usize {
        2 * self.grid.levels * self.grid.features_per_level
    }
}

/// All trainable parameters of the field, registered in a fixed order.
pub struct FieldParams {
    pub config: FieldConfig,
    pub params: ParamSet,
    grid_tables: Vec<Tensor>,
    plane_tables: [Vec<Tensor>; 3],
    psi_w1: Tensor,
    psi_b1: Tensor,
    psi_w2: Tensor,
    psi_b2: Tensor,
    phi_w1: Tensor,
    phi_b1: Tensor,
    phi_w2: Tensor,
    phi_b2: Tensor,
    phi_w3: Tensor,
    phi_b3: Tensor,
}

const PLANE_NAMES: [&str; 3] = ["plane_xt", "plane_yt", "plane_zt"];

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

impl FieldParams {
    pub fn new(config: FieldConfig, rng: &mut ChaCha8Rng) -> Result<FieldParams> {
        config.grid.validate()?;
        let mut params = ParamSet::new();
        let g = &config.grid;
        let mut grid_tables = Vec::with_capacity(g.levels);
        for l in 0..g.levels {
            let t = Tensor::rand_uniform(&[g.table_size, g.features_per_level], -1e-4, 1e-4, rng);
            grid_tables.push(params.register(&format!("grid_xyz.level{l}"), t));
        }
        let mut plane_tables: [Vec<Tensor>; 3] = Default::default();
        for (axis, name) in PLANE_NAMES.iter().enumerate() {
            for l in 0..g.levels {
                let t = Tensor::rand_uniform(
                    &[g.table_size, g.features_per_level],
                    -1e-4,
                    1e-4,
                    rng,
                );
                plane_tables[axis].push(params.register(&format!("{name}.level{l}"), t));
            }
        }

        let enc = config.encode_dim();
        let (hidden, geo) = (config.hidden, config.geo_dim);
        let psi_w1 = params.register("psi.w1", he_uniform(&[enc, hidden], enc, rng));
        let psi_b1 = params.register("psi.b1", Tensor::zeros(&[hidden]));
        let psi_w2 = params.register("psi.w2", he_uniform(&[hidden, 1 + geo], hidden, rng));
        let psi_b2 = params.register("psi.b2", Tensor::zeros(&[1 + geo]));
        let phi_w1 = params.register("phi.w1", he_uniform(&[geo, hidden], geo, rng));
        let phi_b1 = params.register("phi.b1", Tensor::zeros(&[hidden]));
        let phi_w2 = params.register("phi.w2", he_uniform(&[hidden, hidden], hidden, rng));
        let phi_b2 = params.register("phi.b2", Tensor::zeros(&[hidden]));
        let phi_w3 = params.register("phi.w3", he_uniform(&[hidden, 3], hidden, rng));
        let phi_b3 = params.register("phi.b3", Tensor::zeros(&[3]));

        Ok(FieldParams {
            config,
            params,
            grid_tables,
            plane_tables,
            psi_w1,
            psi_b1,
            psi_w2,
            psi_b2,
            phi_w1,
            phi_b1,
            phi_w2,
            phi_b2,
            phi_w3,
            phi_b3,
        })
    }

    /// Hash-table tensors, which train at the grid learning rate.
    pub fn table_params(&self) -> Vec<Tensor> {
        let mut out = self.grid_tables.clone();
        for axis in &self.plane_tables {
            out.extend(axis.iter().cloned());
        }
        out
    }

    /// MLP tensors, which train at the (slower) network learning rate.
    pub fn mlp_params(&self) -> Vec<Tensor> {
        vec![
            self.psi_w1.clone(),
            self.psi_b1.clone(),
            self.psi_w2.clone(),
            self.psi_b2.clone(),
            self.phi_w1.clone(),
            self.phi_b1.clone(),
            self.phi_w2.clone(),
            self.phi_b2.clone(),
            self.phi_w3.clone(),
            self.phi_b3.clone(),
        ]
    }
}

// ---------------------------------------------------------------------------
// Encoding

#[inline]
fn hash3(x: u32, y: u32, z: u32, table: usize) -> usize {
    let h = x.wrapping_mul(HASH_PRIMES[0])
        ^ y.wrapping_mul(HASH_PRIMES[1])
        ^ z.wrapping_mul(HASH_PRIMES[2]);
    h as usize % table
}

#[inline]
fn hash2(x: u32, y: u32, table: usize) -> usize {
    let h = x.wrapping_mul(HASH_PRIMES[0]) ^ y.wrapping_mul(HASH_PRIMES[1]);
    h as usize % table
}

/// Cell index and fractional offset for a coordinate in [0, 1] on a grid
/// with `res` cells. The cell clamps to `res - 1` so u = 1 lands on the last
/// vertex with weight 1.
#[inline]
fn cell_of(u: f32, res: usize) -> (u32, f32) {
    let scaled = u.clamp(0.0, 1.0) * res as f32;
    let cell = (scaled.floor() as i64).clamp(0, res as i64 - 1) as u32;
    (cell, scaled - cell as f32)
}

#[inline]
fn in_box(p: &[f32; 3]) -> bool {
    p.iter().all(|v| (-1.0..=1.0).contains(v))
}

struct LevelPlan {
    res: usize,
}

fn level_plans(g: &HashGridConfig) -> Vec<LevelPlan> {
    (0..g.levels).map(|l| LevelPlan { res: g.level_res(l) }).collect()
}

fn ensure_finite(t: &Tensor, layer: &str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite activation after {layer}")))
    }
}

/// Accumulates `w * table[row]` into `dst`.
#[inline]
fn add_row(dst: &mut [f32], table: &[f32], row: usize, f: usize, w: f32) {
    let src = &table[row * f..row * f + f];
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Bilinear corner visitor for one plane at one level.
#[inline]
fn plane_corners(u: f32, t: f32, res: usize, table: usize, mut f: impl FnMut(usize, f32)) {
    let (cu, fu) = cell_of(u, res);
    let (ct, ft) = cell_of(t, res);
    for du in 0..2u32 {
        let wu = if du == 0 { 1.0 - fu } else { fu };
        for dt in 0..2u32 {
            let wt = if dt == 0 { 1.0 - ft } else { ft };
            f(hash2(cu + du, ct + dt, table), wu * wt);
        }
    }
}

/// Trilinear corner visitor for the spatial grid at one level.
#[inline]
fn grid_corners(p: &[f32; 3], res: usize, table: usize, mut f: impl FnMut(usize, f32)) {
    let (cx, fx) = cell_of((p[0] + 1.0) * 0.5, res);
    let (cy, fy) = cell_of((p[1] + 1.0) * 0.5, res);
    let (cz, fz) = cell_of((p[2] + 1.0) * 0.5, res);
    for dx in 0..2u32 {
        let wx = if dx == 0 { 1.0 - fx } else { fx };
        for dy in 0..2u32 {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            for dz in 0..2u32 {
                let wz = if dz == 0 { 1.0 - fz } else { fz };
                f(hash3(cx + dx, cy + dy, cz + dz, table), wx * wy * wz);
            }
        }
    }
}

impl FieldParams {
    /// Encodes a batch of space-time points into `[P, encode_dim]` features.
    /// Columns hold grid levels first, then plane levels; points outside the
    /// box encode to zero. Differentiable with respect to every table.
    pub fn encode(&self, points: &[[f32; 3]], times: &[f32]) -> Result<Tensor> {
        if points.len() != times.len() {
            return Err(Error::Shape(format!(
                "encode: {} points vs {} times",
                points.len(),
                times.len()
            )));
        }
        let g = &self.config.grid;
        let (levels, fpl, table) = (g.levels, g.features_per_level, g.table_size);
        let dim = self.config.encode_dim();
        let plans = level_plans(g);
        let plane_base = levels * fpl;

        let mut out = vec![0.0f32; points.len() * dim];
        {
            let grid_data: Vec<_> = self.grid_tables.iter().map(|t| t.data()).collect();
            let plane_data: Vec<Vec<_>> = self
                .plane_tables
                .iter()
                .map(|axis| axis.iter().map(|t| t.data()).collect())
                .collect();
            let mut pf = vec![0.0f32; fpl];
            for (pi, (p, &t)) in points.iter().zip(times).enumerate() {
                if !in_box(p) {
                    continue;
                }
                let row = &mut out[pi * dim..(pi + 1) * dim];
                for (l, plan) in plans.iter().enumerate() {
                    let dst = &mut row[l * fpl..(l + 1) * fpl];
                    grid_corners(p, plan.res, table, |idx, w| {
                        add_row(dst, &grid_data[l], idx, fpl, w);
                    });
                }
                for (l, plan) in plans.iter().enumerate() {
                    let dst = &mut row[plane_base + l * fpl..plane_base + (l + 1) * fpl];
                    dst.iter_mut().for_each(|d| *d = 1.0);
                    for (axis, tables) in plane_data.iter().enumerate() {
                        pf.fill(0.0);
                        let u = (p[axis] + 1.0) * 0.5;
                        plane_corners(u, t, plan.res, table, |idx, w| {
                            add_row(&mut pf, &tables[l], idx, fpl, w);
                        });
                        for (d, &v) in dst.iter_mut().zip(&pf) {
                            *d *= v;
                        }
                    }
                }
            }
        }

        let mut parents = self.grid_tables.clone();
        for axis in &self.plane_tables {
            parents.extend(axis.iter().cloned());
        }
        let points_c = points.to_vec();
        let times_c = times.to_vec();
        let plane_c = self.plane_tables.clone();
        let plans_shapes: Vec<usize> = plans.iter().map(|p| p.res).collect();

        Ok(Tensor::from_op(
            vec![points.len(), dim],
            out,
            parents,
            move |up| -> ParentGrads {
                let mut ggrid: Vec<Vec<f32>> =
                    (0..levels).map(|_| vec![0.0f32; table * fpl]).collect();
                let mut gplane: Vec<Vec<Vec<f32>>> = (0..3)
                    .map(|_| (0..levels).map(|_| vec![0.0f32; table * fpl]).collect())
                    .collect();
                let plane_data: Vec<Vec<_>> = plane_c
                    .iter()
                    .map(|axis| axis.iter().map(|t| t.data()).collect())
                    .collect();

                let mut feats = [[0.0f32; 8]; 3];
                for (pi, (p, &t)) in points_c.iter().zip(&times_c).enumerate() {
                    if !in_box(p) {
                        continue;
                    }
                    let urow = &up[pi * dim..(pi + 1) * dim];
                    for (l, &res) in plans_shapes.iter().enumerate() {
                        let u = &urow[l * fpl..(l + 1) * fpl];
                        grid_corners(p, res, table, |idx, w| {
                            for (fi, &uv) in u.iter().enumerate() {
                                ggrid[l][idx * fpl + fi] += w * uv;
                            }
                        });
                    }
                    for (l, &res) in plans_shapes.iter().enumerate() {
                        let u = &urow[plane_base + l * fpl..plane_base + (l + 1) * fpl];
                        // Recompute the three per-axis features for the
                        // product rule.
                        for (axis, tables) in plane_data.iter().enumerate() {
                            let f = &mut feats[axis];
                            f[..fpl].fill(0.0);
                            let uc = (p[axis] + 1.0) * 0.5;
                            plane_corners(uc, t, res, table, |idx, w| {
                                for (fi, item) in f.iter_mut().enumerate().take(fpl) {
                                    *item += w * tables[l][idx * fpl + fi];
                                }
                            });
                        }
                        for axis in 0..3 {
                            let (o1, o2) = ((axis + 1) % 3, (axis + 2) % 3);
                            let uc = (p[axis] + 1.0) * 0.5;
                            plane_corners(uc, t, res, table, |idx, w| {
                                for fi in 0..fpl {
                                    gplane[axis][l][idx * fpl + fi] +=
                                        w * u[fi] * feats[o1][fi] * feats[o2][fi];
                                }
                            });
                        }
                    }
                }

                let mut grads: ParentGrads = Vec::with_capacity(4 * levels);
                grads.extend(ggrid.into_iter().map(Some));
                for axis in gplane {
                    grads.extend(axis.into_iter().map(Some));
                }
                grads
            },
        ))
    }

    /// Density and geometry features for a batch: `tau [P]`, `geo [P, geo_dim]`.
    /// Points outside the box carry zero density.
    pub fn query_density(&self, points: &[[f32; 3]], times: &[f32]) -> Result<(Tensor, Tensor)> {
        let enc = self.encode(points, times)?;
        let (tau, geo) = self.density_from_encoding(&enc)?;
        if points.iter().all(in_box) {
            return Ok((tau, geo));
        }
        let mask: Vec<f32> = points
            .iter()
            .map(|p| if in_box(p) { 1.0 } else { 0.0 })
            .collect();
        let tau = tau.mul(&Tensor::from_vec(mask, &[points.len()])?)?;
        Ok((tau, geo))
    }

    /// Runs the density MLP on precomputed encodings.
    pub fn density_from_encoding(&self, enc: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = enc.linear(&self.psi_w1, Some(&self.psi_b1))?.relu();
        ensure_finite(&h, "psi layer 1")?;
        let out = h.linear(&self.psi_w2, Some(&self.psi_b2))?;
        ensure_finite(&out, "psi layer 2")?;
        let p = out.shape()[0];
        let raw = out.narrow(1, 0, 1)?.reshape(&[p])?;
        let tau = raw.add_scalar(self.config.density_bias).softplus();
        let geo = out.narrow(1, 1, self.config.geo_dim)?;
        Ok((tau, geo))
    }

    /// View-independent color in (0, 1) from geometry features: `[P, 3]`.
    pub fn query_color(&self, geo: &Tensor) -> Result<Tensor> {
        let h = geo.linear(&self.phi_w1, Some(&self.phi_b1))?.relu();
        ensure_finite(&h, "phi layer 1")?;
        let h = h.linear(&self.phi_w2, Some(&self.phi_b2))?.relu();
        ensure_finite(&h, "phi layer 2")?;
        let out = h.linear(&self.phi_w3, Some(&self.phi_b3))?;
        ensure_finite(&out, "phi layer 3")?;
        Ok(out.sigmoid())
    }

    // -- plain f32 inference route ------------------------------------------

    /// Scalar encode used by the inference path; matches [`FieldParams::encode`]
    /// exactly (same arithmetic order).
    pub fn encode_scalar(&self, p: &[f32; 3], t: f32, out: &mut [f32]) {
        let g = &self.config.grid;
        let (fpl, table) = (g.features_per_level, g.table_size);
        out.fill(0.0);
        if !in_box(p) {
            return;
        }
        let plane_base = g.levels * fpl;
        let mut pf = [0.0f32; 8];
        for l in 0..g.levels {
            let res = g.level_res(l);
            let grid = self.grid_tables[l].data();
            let dst = &mut out[l * fpl..(l + 1) * fpl];
            grid_corners(p, res, table, |idx, w| {
                add_row(dst, &grid, idx, fpl, w);
            });
        }
        for l in 0..g.levels {
            let res = g.level_res(l);
            let dst = &mut out[plane_base + l * fpl..plane_base + (l + 1) * fpl];
            dst.iter_mut().for_each(|d| *d = 1.0);
            for axis in 0..3 {
                let tables = self.plane_tables[axis][l].data();
                pf[..fpl].fill(0.0);
                let u = (p[axis] + 1.0) * 0.5;
                plane_corners(u, t, res, table, |idx, w| {
                    for fi in 0..fpl {
                        pf[fi] += w * tables[idx * fpl + fi];
                    }
                });
                for (d, &v) in dst.iter_mut().zip(pf.iter().take(fpl)) {
                    *d *= v;
                }
            }
        }
    }

    fn linear_scalar(x: &[f32], w: &Tensor, b: &Tensor, out: &mut [f32]) {
        let wd = w.data();
        let bd = b.data();
        let (_n_in, n_out) = (w.shape()[0], w.shape()[1]);
        out[..n_out].copy_from_slice(&bd);
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &wd[i * n_out..(i + 1) * n_out];
            for (o, &wv) in out[..n_out].iter_mut().zip(row) {
                *o += xv * wv;
            }
        }
    }

    /// Plain f32 density evaluation for one point.
    pub fn eval_density(&self, p: &[f32; 3], t: f32) -> f32 {
        self.eval_raw(p, t).0
    }

    /// Plain f32 density and color for one point.
    pub fn eval_density_color(&self, p: &[f32; 3], t: f32) -> (f32, [f32; 3]) {
        let (tau, geo) = self.eval_raw(p, t);
        let mut h1 = vec![0.0f32; self.config.hidden];
        Self::linear_scalar(&geo, &self.phi_w1, &self.phi_b1, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = vec![0.0f32; self.config.hidden];
        Self::linear_scalar(&h1, &self.phi_w2, &self.phi_b2, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut rgb = [0.0f32; 3];
        Self::linear_scalar(&h2, &self.phi_w3, &self.phi_b3, &mut rgb);
        rgb.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        (tau, rgb)
    }

    fn eval_raw(&self, p: &[f32; 3], t: f32) -> (f32, Vec<f32>) {
        if !in_box(p) {
            return (0.0, vec![0.0; self.config.geo_dim]);
        }
        let mut enc = vec![0.0f32; self.config.encode_dim()];
        self.encode_scalar(p, t, &mut enc);
        let mut h = vec![0.0f32; self.config.hidden];
        Self::linear_scalar(&enc, &self.psi_w1, &self.psi_b1, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = vec![0.0f32; 1 + self.config.geo_dim];
        Self::linear_scalar(&h, &self.psi_w2, &self.psi_b2, &mut out);
        let x = out[0] + self.config.density_bias;
        let tau = x.max(0.0) + (-x.abs()).exp().ln_1p();
        (tau, out[1..].to_vec())
    }

    /// Density gradient over space by central differences, step h = 1e-3 in
    /// box units. Second-order autodiff is out of scope, so this is the
    /// source of normals for the orientation regularizer.
    pub fn spatial_gradient(&self, points: &[[f32; 3]], times: &[f32]) -> Vec<[f32; 3]> {
        const H: f32 = 1e-3;
        points
            .iter()
            .zip(times)
            .map(|(p, &t)| {
                let mut g = [0.0f32; 3];
                for axis in 0..3 {
                    let mut hi = *p;
                    let mut lo = *p;
                    hi[axis] += H;
                    lo[axis] -= H;
                    g[axis] = (self.eval_density(&hi, t) - self.eval_density(&lo, t)) / (2.0 * H);
                }
                g
            })
            .collect()
    }
}

/// Outward surface normal from a density gradient: `-g / (|g| + 1e-8)`.
pub fn normal_from_gradient(g: &[f32; 3]) -> [f32; 3] {
    let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt() + 1e-8;
    [-g[0] / norm, -g[1] / norm, -g[2] / norm]
}
