//! Exact K-nearest-neighbor queries over occupied voxel centers.
//!
//! Uniform-grid ring expansion: rings of cells at growing Chebyshev radius
//! are scanned until the Kth best squared distance is provably closer than
//! anything a further ring could hold. Exactness is enforced against the
//! brute-force oracle in the tests.

use crate::voxel::grid::SparseVoxelGrid;

#[derive(Debug, Clone)]
pub struct NeighborQuery {
    pub k: usize,
    /// Squared-distance threshold τ.
    pub tau: f64,
    pub point: [f64; 3],
}

impl NeighborQuery {
    pub fn new(k: usize, tau: f64, point: [f64; 3]) -> Self {
        assert!(k >= 1, "K must be at least 1");
        assert!(tau > 0.0, "tau must be positive");
        NeighborQuery { k, tau, point }
    }
}

impl SparseVoxelGrid {
    /// The K nearest occupied voxel centers by Euclidean distance, then
    /// filtered by `‖v_k − q‖² < τ`. Returns `(record slot, d²)` pairs
    /// sorted ascending; ties broken by slot. An empty result is legal.
    pub fn knn_filtered(&self, q: &NeighborQuery) -> Vec<(usize, f64)> {
        let mut best = self.knn(q.point, q.k);
        best.retain(|&(_, d2)| d2 < q.tau);
        best
    }

    /// Unfiltered K nearest occupied voxel centers.
    pub fn knn(&self, point: [f64; 3], k: usize) -> Vec<(usize, f64)> {
        let c = self.cell_coords(&point);
        let (ci, cj, ck) = (
            c[0].floor() as i64,
            c[1].floor() as i64,
            c[2].floor() as i64,
        );
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let mut push = |slot: usize, d2: f64, best: &mut Vec<(usize, f64)>| {
            let pos = best
                .binary_search_by(|probe| {
                    probe.1.total_cmp(&d2).then(probe.0.cmp(&slot))
                })
                .unwrap_or_else(|e| e);
            best.insert(pos, (slot, d2));
            if best.len() > k {
                best.pop();
            }
        };
        let d2_to = |slot: usize| -> f64 {
            let r = self.record(slot);
            let mut d2 = 0.0;
            for d in 0..3 {
                let diff = r.center[d] - point[d];
                d2 += diff * diff;
            }
            d2
        };
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as i64 + 2;
        // clamp the search origin into the grid so out-of-bound queries
        // still terminate against the nearest face
        let ci = ci.clamp(0, self.dims[0] as i64 - 1);
        let cj = cj.clamp(0, self.dims[1] as i64 - 1);
        let ck = ck.clamp(0, self.dims[2] as i64 - 1);
        for ring in 0..=max_ring {
            // a cell at Chebyshev ring ρ is at least (ρ−1)·voxel away
            if best.len() == k && ring >= 2 {
                let lower = (ring - 1) as f64 * self.voxel_size;
                if lower * lower > best[k - 1].1 {
                    break;
                }
            }
            let r = ring;
            for i in (ci - r)..=(ci + r) {
                for j in (cj - r)..=(cj + r) {
                    for l in (ck - r)..=(ck + r) {
                        let on_shell = (i - ci).abs() == r
                            || (j - cj).abs() == r
                            || (l - ck).abs() == r;
                        if !on_shell {
                            continue;
                        }
                        if let Some(slot) = self.slot_at(i, j, l) {
                            push(slot, d2_to(slot), &mut best);
                        }
                    }
                }
            }
        }
        best
    }

    /// Nearest occupied voxel center and its squared distance.
    pub fn nearest_center(&self, point: [f64; 3]) -> Option<(usize, f64)> {
        self.knn(point, 1).first().copied()
    }
}

/// Brute-force KNN oracle: full scan over occupied voxels. Test harnesses
/// and the acceptance suite compare the ring search against this.
pub fn knn_brute_force(grid: &SparseVoxelGrid, q: &NeighborQuery) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = grid
        .records()
        .iter()
        .enumerate()
        .map(|(slot, r)| {
            let mut d2 = 0.0;
            for d in 0..3 {
                let diff = r.center[d] - q.point[d];
                d2 += diff * diff;
            }
            (slot, d2)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(q.k);
    all.retain(|&(_, d2)| d2 < q.tau);
    all
}
