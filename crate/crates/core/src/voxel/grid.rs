//! Occupancy-pruned voxel lattice carrying aggregated Gaussian features.

use std::collections::HashMap;
use std::path::Path;

use crate::splat::GaussianSet;
use crate::voxel::{APP_DIM, GEO_DIM, LATENT_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GridConfig {
    /// Requested voxel edge length in scene units. The effective size grows
    /// if the bounding box would exceed the resolution cap.
    pub voxel_size: f64,
    /// Maximum cells per axis.
    pub max_resolution: usize,
    /// Cells with accumulated opacity below this are pruned.
    pub occupancy_threshold: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            voxel_size: 0.002,
            max_resolution: 256,
            occupancy_threshold: 0.001,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VoxelRecord {
    pub index: [u32; 3],
    /// Cell center: origin + (index + 0.5) · voxel_size.
    pub center: [f64; 3],
    /// Opacity-weighted mean of (scale, rotation).
    pub geo: [f64; GEO_DIM],
    /// Opacity-weighted mean DC color.
    pub app: [f64; APP_DIM],
    /// Learned latent (rows of the forward field's latent table).
    pub latent: [f64; LATENT_DIM],
    /// Accumulated opacity mass.
    pub occupancy: f64,
}

/// Occupancy-pruned sparse voxel grid. Construction is single-owner; after
/// that, concurrent read-only queries are safe.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub occupancy_threshold: f64,
    cells: HashMap<u64, u32>,
    records: Vec<VoxelRecord>,
}

impl SparseVoxelGrid {
    /// Discretize a Gaussian set: each primitive accumulates its opacity
    /// into its containing cell; under-threshold cells are pruned; features
    /// are opacity-weighted attribute means.
    pub fn voxelize(set: &GaussianSet, cfg: &GridConfig) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::InvalidInput("voxelize: empty point set".into()));
        }
        let (lo, hi) = set.bounds();
        // bounding box expanded 5%, resolution cap wins over voxel size
        let mut origin = [0.0; 3];
        let mut extent = [0.0; 3];
        for d in 0..3 {
            let e = (hi[d] - lo[d]).max(1e-9);
            origin[d] = lo[d] - 0.05 * e;
            extent[d] = 1.1 * e;
        }
        let max_extent = extent.iter().cloned().fold(0.0, f64::max);
        let voxel_size = cfg
            .voxel_size
            .max(max_extent / cfg.max_resolution as f64);
        let mut dims = [0usize; 3];
        for d in 0..3 {
            dims[d] = ((extent[d] / voxel_size).ceil() as usize + 1).min(cfg.max_resolution);
        }

        let pack = |i: usize, j: usize, k: usize| -> u64 {
            ((i as u64 * dims[1] as u64) + j as u64) * dims[2] as u64 + k as u64
        };
        struct Acc {
            occ: f64,
            geo: [f64; GEO_DIM],
            app: [f64; APP_DIM],
        }
        let mut acc: HashMap<u64, ([u32; 3], Acc)> = HashMap::new();
        let bands = set.sh_bands();
        for n in 0..set.len() {
            let p = set.mean(n);
            let mut ijk = [0usize; 3];
            let mut inside = true;
            for d in 0..3 {
                let c = ((p[d] - origin[d]) / voxel_size).floor();
                if c < 0.0 || c as usize >= dims[d] {
                    inside = false;
                    break;
                }
                ijk[d] = c as usize;
            }
            if !inside {
                continue;
            }
            let w = set.opacities[n];
            let e = acc
                .entry(pack(ijk[0], ijk[1], ijk[2]))
                .or_insert_with(|| {
                    (
                        [ijk[0] as u32, ijk[1] as u32, ijk[2] as u32],
                        Acc {
                            occ: 0.0,
                            geo: [0.0; GEO_DIM],
                            app: [0.0; APP_DIM],
                        },
                    )
                });
            e.1.occ += w;
            for d in 0..3 {
                e.1.geo[d] += w * set.scales[n * 3 + d];
            }
            for d in 0..4 {
                e.1.geo[3 + d] += w * set.rotations[n * 4 + d];
            }
            // evaluated DC color: Y₀·c₀ + 0.5
            for ch in 0..3 {
                let dc = 0.282_094_791_773_878_14 * set.sh_coeffs[n * bands * 3 + ch] + 0.5;
                e.1.app[ch] += w * dc;
            }
        }

        let mut keyed: Vec<(u64, [u32; 3], Acc)> = acc
            .into_iter()
            .filter(|(_, (_, a))| a.occ >= cfg.occupancy_threshold)
            .map(|(k, (ijk, a))| (k, ijk, a))
            .collect();
        if keyed.is_empty() {
            return Err(Error::InvalidInput(format!(
                "voxelize: all {} cells pruned at occupancy threshold {} \
                 (scene/threshold mismatch)",
                set.len(),
                cfg.occupancy_threshold
            )));
        }
        keyed.sort_by_key(|(k, _, _)| *k);

        let mut cells = HashMap::with_capacity(keyed.len());
        let mut records = Vec::with_capacity(keyed.len());
        for (slot, (key, ijk, a)) in keyed.into_iter().enumerate() {
            cells.insert(key, slot as u32);
            let inv = 1.0 / a.occ;
            let mut geo = a.geo;
            let mut app = a.app;
            geo.iter_mut().for_each(|v| *v *= inv);
            app.iter_mut().for_each(|v| *v *= inv);
            records.push(VoxelRecord {
                index: ijk,
                center: [
                    origin[0] + (ijk[0] as f64 + 0.5) * voxel_size,
                    origin[1] + (ijk[1] as f64 + 0.5) * voxel_size,
                    origin[2] + (ijk[2] as f64 + 0.5) * voxel_size,
                ],
                geo,
                app,
                latent: [0.0; LATENT_DIM],
                occupancy: a.occ,
            });
        }
        Ok(SparseVoxelGrid {
            voxel_size,
            origin,
            dims,
            occupancy_threshold: cfg.occupancy_threshold,
            cells,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[VoxelRecord] {
        &self.records
    }

    pub fn record(&self, slot: usize) -> &VoxelRecord {
        &self.records[slot]
    }

    pub fn records_mut(&mut self) -> &mut [VoxelRecord] {
        &mut self.records
    }

    pub(crate) fn pack(&self, i: i64, j: i64, k: i64) -> Option<u64> {
        if i < 0
            || j < 0
            || k < 0
            || i as usize >= self.dims[0]
            || j as usize >= self.dims[1]
            || k as usize >= self.dims[2]
        {
            return None;
        }
        Some(((i as u64 * self.dims[1] as u64) + j as u64) * self.dims[2] as u64 + k as u64)
    }

    /// Record slot of the cell at integer coordinates, if occupied.
    pub fn slot_at(&self, i: i64, j: i64, k: i64) -> Option<usize> {
        let key = self.pack(i, j, k)?;
        self.cells.get(&key).map(|&s| s as usize)
    }

    /// Continuous cell coordinates of a point (0.5 offsets are centers).
    pub fn cell_coords(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.voxel_size,
            (p[1] - self.origin[1]) / self.voxel_size,
            (p[2] - self.origin[2]) / self.voxel_size,
        ]
    }

    /// Trilinear pooling entries over the 8 enclosing occupied voxels of the
    /// center lattice; missing voxels contribute nothing (zeros).
    /// `deriv_axis` swaps interpolation weights for their spatial derivative.
    pub fn latent_pool_entries(
        &self,
        p: &[f64; 3],
        deriv_axis: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let c = self.cell_coords(p);
        let g = [c[0] - 0.5, c[1] - 0.5, c[2] - 0.5];
        let base = [g[0].floor(), g[1].floor(), g[2].floor()];
        let frac = [g[0] - base[0], g[1] - base[1], g[2] - base[2]];
        let mut out = Vec::with_capacity(8);
        for corner in 0..8usize {
            let offs = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w = match deriv_axis {
                None => {
                    let mut w = 1.0;
                    for d in 0..3 {
                        w *= if offs[d] == 1 { frac[d] } else { 1.0 - frac[d] };
                    }
                    w
                }
                Some(a) => {
                    let mut w =
                        if offs[a] == 1 { 1.0 } else { -1.0 } / self.voxel_size;
                    for d in 0..3 {
                        if d != a {
                            w *= if offs[d] == 1 { frac[d] } else { 1.0 - frac[d] };
                        }
                    }
                    w
                }
            };
            if w == 0.0 {
                continue;
            }
            if let Some(slot) = self.slot_at(
                base[0] as i64 + offs[0] as i64,
                base[1] as i64 + offs[1] as i64,
                base[2] as i64 + offs[2] as i64,
            ) {
                out.push((slot, w));
            }
        }
        out
    }

    /// Grid snapshot for debugging visualizers.
    pub fn export_json(&self, path: &Path) -> Result<()> {
        #[derive(serde::Serialize)]
        struct Cell<'a> {
            index: &'a [u32; 3],
            center: &'a [f64; 3],
            occupancy: f64,
        }
        #[derive(serde::Serialize)]
        struct Snapshot<'a> {
            voxel_size: f64,
            origin: [f64; 3],
            dims: [usize; 3],
            cells: Vec<Cell<'a>>,
        }
        let snap = Snapshot {
            voxel_size: self.voxel_size,
            origin: self.origin,
            dims: self.dims,
            cells: self
                .records
                .iter()
                .map(|r| Cell {
                    index: &r.index,
                    center: &r.center,
                    occupancy: r.occupancy,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&snap)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
