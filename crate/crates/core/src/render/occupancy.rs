//! Shared occupancy grid over the scene box.
//!
//! Each cell stores the maximum opacity seen across sampled frame times,
//! decayed between updates. A cell's density is probed at its center and its
//! eight corners so smooth fields cannot hide inside a cell.

use serde::{Deserialize, Serialize};

use super::SceneField;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub res: usize,
    pub decay: f32,
    pub threshold: f32,
    opacity: Vec<f32>,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// A fresh grid marks everything occupied so nothing is culled before
    /// the first update; stored opacity starts at zero so a single update
    /// fully determines the bits.
    pub fn new(res: usize) -> OccupancyGrid {
        OccupancyGrid {
            res,
            decay: 0.95,
            threshold: 0.01,
            opacity: vec![0.0; res * res * res],
            occupied: vec![true; res * res * res],
        }
    }

    #[inline]
    fn cell_index(&self, p: &[f32; 3]) -> Option<usize> {
        let r = self.res as f32;
        let mut idx = 0usize;
        for a in 0..3 {
            let u = (p[a] + 1.0) * 0.5;
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            let c = ((u * r) as usize).min(self.res - 1);
            idx = idx * self.res + c;
        }
        Some(idx)
    }

    /// Whether a point's cell may contain density. Out-of-box points are
    /// always empty.
    #[inline]
    pub fn is_occupied_at(&self, p: &[f32; 3]) -> bool {
        match self.cell_index(p) {
            Some(i) => self.occupied[i],
            None => false,
        }
    }

    pub fn opacity_at(&self, p: &[f32; 3]) -> f32 {
        self.cell_index(p).map_or(0.0, |i| self.opacity[i])
    }

    pub fn occupied_fraction(&self) -> f32 {
        let n = self.occupied.iter().filter(|&&b| b).count();
        n as f32 / self.occupied.len() as f32
    }

    pub fn occupied_bits(&self) -> &[bool] {
        &self.occupied
    }

    /// Intersection over union of occupied cells against another grid of the
    /// same resolution.
    pub fn iou(&self, other: &OccupancyGrid) -> f32 {
        assert_eq!(self.res, other.res, "iou: resolution mismatch");
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.occupied.iter().zip(&other.occupied) {
            if *a && *b {
                inter += 1;
            }
            if *a || *b {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f32 / union as f32
        }
    }

    /// Refreshes every cell: opacity <- max(decay * old, max over frame
    /// times of 1 - exp(-tau * step)), occupied iff opacity > threshold.
    /// The per-cell tau is the maximum over the center and the 8 corners.
    pub fn update(&mut self, scene: &dyn SceneField, frame_times: &[f32], step: f32) {
        let res = self.res;
        let cell = 2.0 / res as f32;
        let corner = |i: usize| -1.0 + i as f32 * cell;
        let mut max_tau = vec![0.0f32; res * res * res];

        for &t in frame_times {
            // Corner lattice evaluated once, shared by the 8 adjacent cells.
            let n = res + 1;
            let mut corners = vec![0.0f32; n * n * n];
            for ix in 0..n {
                for iy in 0..n {
                    for iz in 0..n {
                        let p = [corner(ix), corner(iy), corner(iz)];
                        corners[(ix * n + iy) * n + iz] = scene.density(&p, t);
                    }
                }
            }
            let mut idx = 0usize;
            for ix in 0..res {
                for iy in 0..res {
                    for iz in 0..res {
                        let center = [
                            corner(ix) + 0.5 * cell,
                            corner(iy) + 0.5 * cell,
                            corner(iz) + 0.5 * cell,
                        ];
                        let mut tau = scene.density(&center, t);
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    tau = tau.max(
                                        corners[((ix + dx) * n + iy + dy) * n + iz + dz],
                                    );
                                }
                            }
                        }
                        max_tau[idx] = max_tau[idx].max(tau);
                        idx += 1;
                    }
                }
            }
        }

        for (i, tau) in max_tau.iter().enumerate() {
            let fresh = 1.0 - (-tau * step).exp();
            self.opacity[i] = (self.decay * self.opacity[i]).max(fresh);
            self.occupied[i] = self.opacity[i] > self.threshold;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::SceneField;
    use super::*;

    #[test]
    fn zero_field_empties_the_grid_after_one_update() {
        let mut g = OccupancyGrid::new(8);
        assert_eq!(g.occupied_fraction(), 1.0, "fresh grid culls nothing");
        g.update(&ZeroField, &[0.0, 0.5, 1.0], 0.5);
        assert_eq!(g.occupied_fraction(), 0.0);
    }

    #[test]
    fn late_frame_density_keeps_its_cell_occupied() {
        let ball = BallField {
            center: [-0.6, 0.0, 0.0],
            velocity: [4.0 / 3.0, 0.0, 0.0],
            radius: 0.25,
            tau: 10.0,
            color: [1.0; 3],
        };
        let late_pos = [0.6f32, 0.0, 0.0];

        let mut g = OccupancyGrid::new(16);
        g.update(&ball, &[0.0, 0.9], 0.5);
        assert!(g.is_occupied_at(&[-0.6, 0.0, 0.0]));
        assert!(g.is_occupied_at(&late_pos), "t=0.9 position must survive");

        let mut g0 = OccupancyGrid::new(16);
        g0.update(&ball, &[0.0], 0.5);
        assert!(g0.is_occupied_at(&[-0.6, 0.0, 0.0]));
        assert!(!g0.is_occupied_at(&late_pos), "unsampled time leaves no trace");
    }

    #[test]
    fn out_of_box_points_are_never_occupied() {
        let g = OccupancyGrid::new(4);
        assert!(!g.is_occupied_at(&[1.2, 0.0, 0.0]));
        assert!(!g.is_occupied_at(&[0.0, -1.01, 0.0]));
        assert!(g.is_occupied_at(&[0.99, -0.99, 0.0]));
    }

    #[test]
    fn update_applies_the_decay_and_max_rule_exactly() {
        let ball = BallField {
            center: [0.1, -0.2, 0.3],
            velocity: [0.0; 3],
            radius: 0.5,
            tau: 3.0,
            color: [1.0; 3],
        };
        let mut g = OccupancyGrid::new(4);
        g.update(&ball, &[0.0], 0.2);
        let warm = g.clone();

        // A zero field leaves exactly the decayed opacities behind.
        g.update(&ZeroField, &[0.0], 0.2);
        for i in 0..g.opacity.len() {
            assert_eq!(g.opacity[i], 0.95 * warm.opacity[i]);
            assert_eq!(g.occupied[i], g.opacity[i] > g.threshold);
        }

        // Updating with the same field again floors at the fresh opacity.
        let mut g2 = warm.clone();
        g2.update(&ball, &[0.0], 0.2);
        for (after, before) in g2.opacity.iter().zip(&warm.opacity) {
            let expect = (0.95 * *before).max(*before);
            assert_eq!(*after, expect);
        }
    }

    #[test]
    fn added_density_never_flips_occupied_to_empty() {
        let thin = BlobField {
            amp: 1.5,
            sharp: 8.0,
        };
        let dense = BlobField {
            amp: 4.0,
            sharp: 8.0,
        };
        let mut ga = OccupancyGrid::new(16);
        let mut gb = OccupancyGrid::new(16);
        ga.update(&thin, &[0.0, 0.5], 0.4);
        gb.update(&dense, &[0.0, 0.5], 0.4);
        for (a, b) in ga.occupied_bits().iter().zip(gb.occupied_bits()) {
            assert!(*b || !*a, "denser field lost a cell");
        }
        assert!(gb.occupied_fraction() > ga.occupied_fraction());
    }

    #[test]
    fn probes_are_conservative_against_a_dense_oracle() {
        let blob = BlobField {
            amp: 3.0,
            sharp: 10.0,
        };
        let step = 0.5f32;
        let mut g = OccupancyGrid::new(16);
        g.update(&blob, &[0.0], step);

        // Oracle: densest value over a 5^3 lattice inside each cell. Cells
        // comfortably above threshold must never be culled; a 1.5x margin
        // absorbs the finite probe resolution near the decision boundary.
        let res = 16usize;
        let cell = 2.0 / res as f32;
        for ix in 0..res {
            for iy in 0..res {
                for iz in 0..res {
                    let mut tau_max = 0.0f32;
                    for dx in 0..5 {
                        for dy in 0..5 {
                            for dz in 0..5 {
                                let p = [
                                    -1.0 + (ix as f32 + dx as f32 / 4.0) * cell,
                                    -1.0 + (iy as f32 + dy as f32 / 4.0) * cell,
                                    -1.0 + (iz as f32 + dz as f32 / 4.0) * cell,
                                ];
                                tau_max = tau_max.max(blob.density(&p, 0.0));
                            }
                        }
                    }
                    let oracle = 1.0 - (-tau_max * step).exp();
                    if oracle > g.threshold * 1.5 {
                        let center = [
                            -1.0 + (ix as f32 + 0.5) * cell,
                            -1.0 + (iy as f32 + 0.5) * cell,
                            -1.0 + (iz as f32 + 0.5) * cell,
                        ];
                        assert!(
                            g.is_occupied_at(&center),
                            "cell ({ix},{iy},{iz}) culled with oracle opacity {oracle}"
                        );
                    }
                }
            }
        }
    }
}
