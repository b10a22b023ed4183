//! Spatial condition vector: positional encoding of the query concatenated
//! with the mean geometric and appearance features of its valid neighbors.

use crate::autodiff::encoding::PosEnc;
use crate::voxel::grid::SparseVoxelGrid;
use crate::voxel::knn::NeighborQuery;
use crate::voxel::{APP_DIM, GEO_DIM};

#[derive(Debug, Clone)]
pub struct ConditionVector {
    /// concat(γ(q_d), mean f_geo, mean f_app).
    pub values: Vec<f64>,
    /// Number of valid neighbors K′.
    pub k_prime: usize,
    /// Cleared when K′ = 0 (feature means are zeros).
    pub valid: bool,
}

/// Width of the condition vector for a given encoder.
pub fn condition_dim(enc: &PosEnc) -> usize {
    enc.output_dim(3) + GEO_DIM + APP_DIM
}

/// Assemble η for a dynamic query point against a grid of deformed voxels.
/// With no valid neighbors the feature means are zero and `valid` is
/// cleared, degrading to pure positional conditioning.
pub fn condition_vector(
    grid: &SparseVoxelGrid,
    q_d: &[f64; 3],
    enc: &PosEnc,
    k: usize,
    tau: f64,
) -> ConditionVector {
    let mut values = enc.encode(q_d);
    let neighbors = grid.knn_filtered(&NeighborQuery::new(k, tau, *q_d));
    let k_prime = neighbors.len();
    let mut geo = [0.0; GEO_DIM];
    let mut app = [0.0; APP_DIM];
    if k_prime > 0 {
        for &(slot, _) in &neighbors {
            let r = grid.record(slot);
            for d in 0..GEO_DIM {
                geo[d] += r.geo[d];
            }
            for d in 0..APP_DIM {
                app[d] += r.app[d];
            }
        }
        let inv = 1.0 / k_prime as f64;
        geo.iter_mut().for_each(|v| *v *= inv);
        app.iter_mut().for_each(|v| *v *= inv);
    }
    values.extend_from_slice(&geo);
    values.extend_from_slice(&app);
    ConditionVector {
        values,
        k_prime,
        valid: k_prime > 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::GaussianSet;
    use crate::voxel::grid::{GridConfig, SparseVoxelGrid};

    fn grid_with_features(points: &[[f64; 3]], scales: &[f64]) -> SparseVoxelGrid {
        let n = points.len();
        let set = GaussianSet::new(
            points.iter().flatten().cloned().collect(),
            scales.to_vec(),
            (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect(),
            vec![1.0; n],
            vec![0.0; n * 27],
            2,
        )
        .unwrap();
        let cfg = GridConfig {
            voxel_size: 0.05,
            ..GridConfig::default()
        };
        SparseVoxelGrid::voxelize(&set, &cfg).unwrap()
    }

    #[test]
    fn single_neighbor_mean_is_that_voxel() {
        let grid = grid_with_features(&[[0.0, 0.0, 0.0]], &[0.3, 0.2, 0.1]);
        let enc = PosEnc::new(6, true);
        let q = grid.record(0).center;
        let cv = condition_vector(&grid, &q, &enc, 4, 1.0);
        assert!(cv.valid);
        assert_eq!(cv.k_prime, 1);
        let geo = &cv.values[enc.output_dim(3)..enc.output_dim(3) + GEO_DIM];
        assert!((geo[0] - 0.3).abs() < 1e-12);
        assert!((geo[1] - 0.2).abs() < 1e-12);
        assert!((geo[3] - 1.0).abs() < 1e-12); // quaternion w mean
    }

    #[test]
    fn two_neighbors_average() {
        let grid = grid_with_features(
            &[[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]],
            &[0.1, 0.1, 0.1, 0.3, 0.3, 0.3],
        );
        assert_eq!(grid.len(), 2);
        let enc = PosEnc::new(6, true);
        let mid = [
            0.5 * (grid.record(0).center[0] + grid.record(1).center[0]),
            grid.record(0).center[1],
            grid.record(0).center[2],
        ];
        let cv = condition_vector(&grid, &mid, &enc, 2, 10.0);
        assert_eq!(cv.k_prime, 2);
        let geo = &cv.values[enc.output_dim(3)..enc.output_dim(3) + GEO_DIM];
        assert!((geo[0] - 0.2).abs() < 1e-12); // (0.1 + 0.3)/2
    }

    #[test]
    fn empty_neighborhood_gives_zero_features_and_cleared_flag() {
        let grid = grid_with_features(&[[0.0, 0.0, 0.0]], &[0.3, 0.2, 0.1]);
        let enc = PosEnc::new(6, true);
        let q = [3.0, 3.0, 3.0];
        let cv = condition_vector(&grid, &q, &enc, 4, 1e-9);
        assert!(!cv.valid);
        assert_eq!(cv.k_prime, 0);
        let tail = &cv.values[enc.output_dim(3)..];
        assert!(tail.iter().all(|&v| v == 0.0));
        // γ block still present
        assert_eq!(cv.values.len(), condition_dim(&enc));
    }

    #[test]
    fn translation_changes_only_gamma_block() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.05, -0.02], [0.2, 0.1, 0.0]];
        let scales = [0.1, 0.2, 0.3, 0.2, 0.1, 0.05, 0.3, 0.3, 0.3];
        let grid_a = grid_with_features(&pts, &scales);
        let shift = [0.37, -0.21, 0.14];
        let shifted: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
            .collect();
        let grid_b = grid_with_features(&shifted, &scales);
        let enc = PosEnc::new(6, true);
        let qa = [0.05, 0.02, 0.01];
        let qb = [qa[0] + shift[0], qa[1] + shift[1], qa[2] + shift[2]];
        let ca = condition_vector(&grid_a, &qa, &enc, 3, 1.0);
        let cb = condition_vector(&grid_b, &qb, &enc, 3, 1.0);
        assert_eq!(ca.k_prime, cb.k_prime);
        let gdim = enc.output_dim(3);
        for (a, b) in ca.values[gdim..].iter().zip(&cb.values[gdim..]) {
            // feature means agree up to the grid's box-dependent alignment
            assert!((a - b).abs() < 1e-9);
        }
    }
}
