//! Forward transformation field: per-voxel learned latents pooled
//! trilinearly into a global feature, a positional encoding of the offset
//! from the nearest voxel center as the local feature, and an MLP decoder
//! predicting time-dependent attribute residuals.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::encoding::PosEnc;
use crate::autodiff::mlp::{Activation, Mlp};
use crate::autodiff::params::{BoundParams, ParamGroup, ParamStore};
use crate::autodiff::tape::{GatherEntry, Tape, Var};
use crate::deform::{RESIDUAL_DIM, SCALE_FLOOR};
use crate::splat::GaussianSet;
use crate::voxel::{SparseVoxelGrid, LATENT_DIM};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ForwardField {
    pub prefix: String,
    pub decoder: Mlp,
    pub local_enc: PosEnc,
    pub time_enc: PosEnc,
}

impl ForwardField {
    /// Decoder input: pooled latent (6) ++ γ(offset) ++ γ(t).
    pub fn new(prefix: impl Into<String>) -> Self {
        let prefix = prefix.into();
        let local_enc = PosEnc::new(4, true);
        let time_enc = PosEnc::new(4, true);
        let in_dim = LATENT_DIM + local_enc.output_dim(3) + time_enc.output_dim(1);
        let decoder = Mlp::new(
            format!("{prefix}.mlp"),
            &[in_dim, 128, 128, 128, RESIDUAL_DIM],
            Activation::Relu,
            Activation::None,
            false,
        );
        ForwardField {
            prefix,
            decoder,
            local_enc,
            time_enc,
        }
    }

    pub fn latents_name(&self) -> String {
        format!("{}.latents", self.prefix)
    }

    /// Allocate voxel latents (small random) and the decoder; the final
    /// decoder layer is zeroed so all deformations start at identity.
    pub fn alloc_params(
        &self,
        store: &mut ParamStore,
        grid: &SparseVoxelGrid,
        rng: &mut impl Rng,
    ) {
        let n = grid.len();
        let latents: Vec<f64> = (0..n * LATENT_DIM)
            .map(|_| rng.gen_range(-1e-2..1e-2))
            .collect();
        store.insert(
            self.latents_name(),
            latents,
            vec![n, LATENT_DIM],
            ParamGroup::Deformation,
            false,
        );
        self.decoder
            .alloc_params(store, ParamGroup::Deformation, rng);
        self.decoder.zero_final_layer(store);
    }

    /// Constant (non-latent) part of the decoder input for a query.
    fn local_time_input(&self, grid: &SparseVoxelGrid, x: &[f64; 3], t: f64) -> Vec<f64> {
        let offset = match grid.nearest_center([x[0], x[1], x[2]]) {
            Some((slot, _)) => {
                let c = grid.record(slot).center;
                [x[0] - c[0], x[1] - c[1], x[2] - c[2]]
            }
            None => [x[0], x[1], x[2]],
        };
        let mut v = self.local_enc.encode(&offset);
        v.extend(self.time_enc.encode(&[t]));
        v
    }

    /// Plain residual query (frozen-field paths, mesh transfer).
    pub fn residuals_plain(
        &self,
        store: &ParamStore,
        grid: &SparseVoxelGrid,
        x: &[f64; 3],
        t: f64,
    ) -> Result<Vec<f64>> {
        let latents = store.data(&self.latents_name());
        let mut f_global = [0.0; LATENT_DIM];
        for (slot, w) in grid.latent_pool_entries(x, None) {
            for d in 0..LATENT_DIM {
                f_global[d] += w * latents[slot * LATENT_DIM + d];
            }
        }
        let mut input = f_global.to_vec();
        input.extend(self.local_time_input(grid, x, t));
        self.decoder.forward_plain(store, &input)
    }

    /// Plain residuals plus the spatial Jacobian of the Δμ block (3×3,
    /// row-major d Δμ_i / d x_j). Used by the cycle loss to linearize the
    /// frozen forward field around the mapped canonical point.
    pub fn mu_residual_with_jacobian(
        &self,
        store: &ParamStore,
        grid: &SparseVoxelGrid,
        x: &[f64; 3],
        t: f64,
    ) -> Result<([f64; 3], [[f64; 3]; 3])> {
        let latents = store.data(&self.latents_name());
        let mut f_global = [0.0; LATENT_DIM];
        for (slot, w) in grid.latent_pool_entries(x, None) {
            for d in 0..LATENT_DIM {
                f_global[d] += w * latents[slot * LATENT_DIM + d];
            }
        }
        let local_time = self.local_time_input(grid, x, t);
        let mut input = f_global.to_vec();
        input.extend_from_slice(&local_time);

        // input tangents per spatial axis: pooled-latent derivative plus the
        // γ(offset) Jacobian (nearest center is constant within a cell)
        let offset = match grid.nearest_center(*x) {
            Some((slot, _)) => {
                let c = grid.record(slot).center;
                [x[0] - c[0], x[1] - c[1], x[2] - c[2]]
            }
            None => *x,
        };
        let jac_local = self.local_enc.jacobian(&offset);
        let local_dim = self.local_enc.output_dim(3);
        let mut tangents = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut tan = vec![0.0; input.len()];
            for (slot, dw) in grid.latent_pool_entries(x, Some(axis)) {
                for d in 0..LATENT_DIM {
                    tan[d] += dw * latents[slot * LATENT_DIM + d];
                }
            }
            for r in 0..local_dim {
                tan[LATENT_DIM + r] = jac_local[r * 3 + axis];
            }
            tangents.push(tan);
        }
        let (out, dout) = self
            .decoder
            .forward_tangents_plain(store, &input, &tangents)?;
        let mu = [out[0], out[1], out[2]];
        let mut jac = [[0.0; 3]; 3];
        for (axis, d) in dout.iter().enumerate() {
            for r in 0..3 {
                jac[r][axis] = d[r];
            }
        }
        Ok((mu, jac))
    }

    /// Move mesh vertices with the spatial component only:
    /// `v_d = v_c + [T(v_c, t)]_μ`.
    pub fn transfer_vertices_plain(
        &self,
        store: &ParamStore,
        grid: &SparseVoxelGrid,
        vertices: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(vertices.len());
        for v in vertices.chunks_exact(3) {
            let res = self.residuals_plain(store, grid, &[v[0], v[1], v[2]], t)?;
            out.extend([v[0] + res[0], v[1] + res[1], v[2] + res[2]]);
        }
        Ok(out)
    }

    pub fn bind<'f>(
        &'f self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &mut BoundParams,
        grid: &'f SparseVoxelGrid,
    ) -> BoundForwardField<'f> {
        let latents = bound.bind(tape, store, &self.latents_name());
        let decoder = self.decoder.bind(tape, store, bound);
        BoundForwardField {
            field: self,
            grid,
            latents,
            decoder,
        }
    }
}

pub struct BoundForwardField<'f> {
    field: &'f ForwardField,
    grid: &'f SparseVoxelGrid,
    latents: Var,
    decoder: crate::autodiff::mlp::BoundMlp,
}

impl BoundForwardField<'_> {
    /// Taped residual query. The query position enters as a constant; the
    /// output is differentiable w.r.t. the decoder weights and voxel
    /// latents.
    pub fn residuals(&self, tape: &mut Tape, x: &[f64; 3], t: f64) -> Result<Var> {
        let entries: Vec<GatherEntry> = self
            .grid
            .latent_pool_entries(x, None)
            .into_iter()
            .map(|(slot, w)| GatherEntry {
                out_base: 0,
                row: slot as u32,
                weight: w,
            })
            .collect();
        let f_global = tape.gather_weighted(
            self.latents,
            Arc::from(entries),
            LATENT_DIM,
            LATENT_DIM,
        );
        let lt = self.field.local_time_input(self.grid, x, t);
        let lt_node = tape.leaf(&lt);
        let input = tape.concat(&[f_global, lt_node]);
        self.decoder.forward(tape, input)
    }
}

/// Apply per-Gaussian residuals: `μ_d = μ_c + Δμ`, `s_d = s_c + Δs` clamped
/// to a positive floor, `r_d` renormalized; opacity and SH unchanged. A
/// near-zero deformed quaternion keeps the canonical rotation and logs the
/// incident.
pub fn apply_deformation(set: &GaussianSet, residuals: &[f64]) -> Result<GaussianSet> {
    let n = set.len();
    if residuals.len() != n * RESIDUAL_DIM {
        return Err(Error::shape(
            "deformation residuals",
            n * RESIDUAL_DIM,
            residuals.len(),
        ));
    }
    let mut means = set.means.clone();
    let mut scales = set.scales.clone();
    let mut rotations = set.rotations.clone();
    for i in 0..n {
        let r = &residuals[i * RESIDUAL_DIM..(i + 1) * RESIDUAL_DIM];
        for d in 0..3 {
            means[i * 3 + d] += r[d];
            scales[i * 3 + d] = (scales[i * 3 + d] + r[3 + d]).max(SCALE_FLOOR);
        }
        let mut q = [0.0; 4];
        for d in 0..4 {
            q[d] = set.rotations[i * 4 + d] + r[6 + d];
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            log::warn!("apply_deformation: degenerate quaternion at {i}, keeping canonical");
        } else {
            for d in 0..4 {
                rotations[i * 4 + d] = q[d] / norm;
            }
        }
    }
    GaussianSet::new(
        means,
        scales,
        rotations,
        set.opacities.clone(),
        set.sh_coeffs.clone(),
        set.sh_degree,
    )
}

/// Deformed attribute nodes for the taped Gaussian branch.
pub struct DeformedNodes {
    pub means: Var,
    pub scales: Var,
    pub rotations: Var,
}

/// Tape version of [`apply_deformation`] over stacked residual nodes
/// (one 10-wide node per Gaussian, in index order).
pub fn apply_deformation_nodes(
    tape: &mut Tape,
    means_c: Var,
    scales_c: Var,
    rots_c: Var,
    residuals: &[Var],
) -> DeformedNodes {
    let mu_parts: Vec<Var> = residuals.iter().map(|&r| tape.slice(r, 0, 3)).collect();
    let s_parts: Vec<Var> = residuals.iter().map(|&r| tape.slice(r, 3, 3)).collect();
    let q_parts: Vec<Var> = residuals.iter().map(|&r| tape.slice(r, 6, 4)).collect();
    let dmu = tape.concat(&mu_parts);
    let ds = tape.concat(&s_parts);
    let dq = tape.concat(&q_parts);
    let means = tape.add(means_c, dmu);
    let scales_raw = tape.add(scales_c, ds);
    let scales = tape.clamp_min(scales_raw, SCALE_FLOOR);
    let rots_raw = tape.add(rots_c, dq);
    let rotations = tape.normalize_groups(rots_raw, 4, 1e-8);
    DeformedNodes {
        means,
        scales,
        rotations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::grid::GridConfig;
    use rand::SeedableRng;

    fn toy_scene() -> (GaussianSet, SparseVoxelGrid) {
        let pts: Vec<[f64; 3]> = vec![
            [0.0, 0.0, 0.0],
            [0.12, 0.0, 0.0],
            [0.0, 0.15, 0.0],
            [0.0, 0.0, 0.2],
            [-0.1, -0.1, 0.05],
        ];
        let n = pts.len();
        let set = GaussianSet::new(
            pts.iter().flatten().cloned().collect(),
            vec![0.02; n * 3],
            (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect(),
            vec![0.8; n],
            vec![0.0; n * 27],
            2,
        )
        .unwrap();
        let cfg = GridConfig {
            voxel_size: 0.05,
            ..GridConfig::default()
        };
        let grid = SparseVoxelGrid::voxelize(&set, &cfg).unwrap();
        (set, grid)
    }

    fn field_with_params(grid: &SparseVoxelGrid) -> (ForwardField, ParamStore) {
        let field = ForwardField::new("fwd_field");
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        field.alloc_params(&mut store, grid, &mut rng);
        (field, store)
    }

    #[test]
    fn zero_init_gives_zero_residuals_everywhere() {
        let (_, grid) = toy_scene();
        let (field, store) = field_with_params(&grid);
        for &(x, t) in &[([0.0, 0.0, 0.0], 0.0), ([0.1, 0.05, 0.1], 0.7)] {
            let r = field.residuals_plain(&store, &grid, &x, t).unwrap();
            assert!(r.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn time_reaches_the_decoder() {
        let (_, grid) = toy_scene();
        let (field, mut store) = field_with_params(&grid);
        // un-zero the final layer so the decoder is a generic function
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for v in store.data_mut("fwd_field.mlp.w3") {
            *v = rng.gen_range(-0.1..0.1);
        }
        let x = [0.05, 0.02, 0.0];
        let a = field.residuals_plain(&store, &grid, &x, 0.1).unwrap();
        let b = field.residuals_plain(&store, &grid, &x, 0.9).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-9, "residuals identical across time");
    }

    #[test]
    fn latent_at_voxel_center_is_that_voxel() {
        let (_, grid) = toy_scene();
        let latents: Vec<f64> = (0..grid.len() * LATENT_DIM)
            .map(|i| i as f64 * 0.1)
            .collect();
        let center = grid.record(2).center;
        let entries = grid.latent_pool_entries(&center, None);
        let mut pooled = [0.0; LATENT_DIM];
        for (slot, w) in entries {
            for d in 0..LATENT_DIM {
                pooled[d] += w * latents[slot * LATENT_DIM + d];
            }
        }
        for d in 0..LATENT_DIM {
            assert!(
                (pooled[d] - latents[2 * LATENT_DIM + d]).abs() < 1e-9,
                "dim {d}"
            );
        }
    }

    #[test]
    fn identity_residuals_leave_set_unchanged() {
        let (set, _) = toy_scene();
        let res = vec![0.0; set.len() * RESIDUAL_DIM];
        let out = apply_deformation(&set, &res).unwrap();
        assert_eq!(out.means, set.means);
        assert_eq!(out.scales, set.scales);
        assert_eq!(out.rotations, set.rotations);
    }

    #[test]
    fn collinear_quaternion_residual_normalizes_back() {
        let (set, _) = toy_scene();
        let mut res = vec![0.0; set.len() * RESIDUAL_DIM];
        res[6] = 1.0; // Δr = (1,0,0,0) on top of r_c = (1,0,0,0)
        let out = apply_deformation(&set, &res).unwrap();
        assert_eq!(&out.rotations[0..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn translation_residual_moves_mean() {
        let (set, _) = toy_scene();
        let mut res = vec![0.0; set.len() * RESIDUAL_DIM];
        res[0] = 0.1;
        let out = apply_deformation(&set, &res).unwrap();
        assert!((out.means[0] - (set.means[0] + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn scale_floor_applies() {
        let (set, _) = toy_scene();
        let mut res = vec![0.0; set.len() * RESIDUAL_DIM];
        res[3] = -10.0;
        let out = apply_deformation(&set, &res).unwrap();
        assert_eq!(out.scales[0], SCALE_FLOOR);
    }

    #[test]
    fn deformed_quaternions_unit_norm_under_random_residuals() {
        use rand::Rng;
        let (set, _) = toy_scene();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let res: Vec<f64> = (0..set.len() * RESIDUAL_DIM)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect();
            let out = apply_deformation(&set, &res).unwrap();
            for q in out.rotations.chunks_exact(4) {
                let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            for s in &out.scales {
                assert!(*s >= SCALE_FLOOR);
            }
        }
    }

    #[test]
    fn taped_residuals_match_plain_and_grads_match_fd() {
        let (_, grid) = toy_scene();
        let (field, mut store) = field_with_params(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for name in ["fwd_field.mlp.w3", "fwd_field.mlp.b3"] {
            for v in store.data_mut(name) {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        let x = [0.06, 0.03, 0.08];
        let t = 0.4;
        let plain = field.residuals_plain(&store, &grid, &x, t).unwrap();

        let mut tape = Tape::new();
        let mut bp = BoundParams::new();
        let bf = field.bind(&mut tape, &store, &mut bp, &grid);
        let r = bf.residuals(&mut tape, &x, t).unwrap();
        for (a, b) in tape.value(r).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }

        // gradient w.r.t. decoder weights and voxel latents vs FD
        let weights: Vec<f64> = (0..RESIDUAL_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_arc: Arc<[f64]> = weights.clone().into();
        let loss = tape.dot_const(r, w_arc);
        tape.backward(loss);

        let loss_of = |store: &ParamStore| -> f64 {
            let r = field.residuals_plain(store, &grid, &x, t).unwrap();
            r.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for name in ["fwd_field.latents", "fwd_field.mlp.w0", "fwd_field.mlp.w3"] {
            let n_params = store.data(name).len();
            let grad_var = {
                let mut gm = crate::autodiff::params::GradMap::new();
                bp.accumulate_grads(&tape, &mut gm);
                gm.get(name).unwrap().to_vec()
            };
            let mut checked = 0;
            let stride = (n_params / 17).max(1);
            for i in (0..n_params).step_by(stride) {
                let mut s2 = store.clone();
                s2.data_mut(name)[i] += h;
                let fp = loss_of(&s2);
                s2.data_mut(name)[i] -= 2.0 * h;
                let fm = loss_of(&s2);
                let fd = (fp - fm) / (2.0 * h);
                let err = (grad_var[i] - fd).abs() / grad_var[i].abs().max(1.0);
                assert!(err < 1e-4, "{name}[{i}]: {} vs {fd}", grad_var[i]);
                checked += 1;
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn mu_jacobian_matches_fd() {
        let (_, grid) = toy_scene();
        let (field, mut store) = field_with_params(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for l in 0..4 {
            for v in store.data_mut(&format!("fwd_field.mlp.w{l}")) {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let x = [0.04, 0.01, 0.03];
        let t = 0.6;
        let (_, jac) = field
            .mu_residual_with_jacobian(&store, &grid, &x, t)
            .unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let rp = field.residuals_plain(&store, &grid, &xp, t).unwrap();
            let rm = field.residuals_plain(&store, &grid, &xm, t).unwrap();
            for r in 0..3 {
                let fd = (rp[r] - rm[r]) / (2.0 * h);
                assert!(
                    (jac[r][axis] - fd).abs() < 1e-5,
                    "jac[{r}][{axis}]: {} vs {fd}",
                    jac[r][axis]
                );
            }
        }
    }

    #[test]
    fn vertex_transfer_equals_mu_residual_at_same_query() {
        let (_, grid) = toy_scene();
        let (field, mut store) = field_with_params(&grid);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for v in store.data_mut("fwd_field.mlp.w3") {
            *v = rng.gen_range(-0.1..0.1);
        }
        let p = [0.12, 0.0, 0.0];
        let t = 0.8;
        let res = field.residuals_plain(&store, &grid, &p, t).unwrap();
        let moved = field
            .transfer_vertices_plain(&store, &grid, &p, t)
            .unwrap();
        for d in 0..3 {
            assert!((moved[d] - (p[d] + res[d])).abs() < 1e-15);
        }
    }
}
