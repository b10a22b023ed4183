//! Input encoders: sinusoidal positional encoding, multi-resolution hash
//! grid, and real spherical harmonics for view directions.

use std::sync::Arc;

use crate::autodiff::tape::{GatherEntry, Tape, Var};
use crate::{Error, Result};

// ── positional encoding ──────────────────────────────────────────────

/// Sinusoidal positional encoding. Output is laid out per input dimension:
/// `[x_i (if identity), sin(2^0 π x_i), cos(2^0 π x_i), ..., sin(2^{L-1} π x_i), cos(...)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosEnc {
    pub num_freqs: usize,
    pub include_identity: bool,
}

impl PosEnc {
    pub fn new(num_freqs: usize, include_identity: bool) -> Self {
        PosEnc {
            num_freqs,
            include_identity,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_freqs + usize::from(self.include_identity))
    }

    /// Encode a finite input vector.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        for &xi in x {
            if self.include_identity {
                out.push(xi);
            }
            for k in 0..self.num_freqs {
                let arg = (1u64 << k) as f64 * std::f64::consts::PI * xi;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
        out
    }

    /// Dense Jacobian of the encoding, row-major `output_dim × input_dim`.
    pub fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let m = self.output_dim(d);
        let mut jac = vec![0.0; m * d];
        let per_dim = 2 * self.num_freqs + usize::from(self.include_identity);
        for (i, &xi) in x.iter().enumerate() {
            let base = i * per_dim;
            let mut row = base;
            if self.include_identity {
                jac[row * d + i] = 1.0;
                row += 1;
            }
            for k in 0..self.num_freqs {
                let f = (1u64 << k) as f64 * std::f64::consts::PI;
                let arg = f * xi;
                jac[row * d + i] = f * arg.cos();
                jac[(row + 1) * d + i] = -f * arg.sin();
                row += 2;
            }
        }
        jac
    }
}

// ── multi-resolution hash grid ───────────────────────────────────────

/// Spatial-hash prime multipliers (Teschner et al. style), XOR-folded
/// modulo the table size. Levels small enough to be stored densely are
/// indexed directly, which is injective by construction.
const HASH_PRIMES: [u64; 3] = [73_856_093, 19_349_663, 83_492_791];

/// Multi-resolution hash grid over the unit cube `[-1, 1]³`. Out-of-bound
/// queries clamp to the cube. The feature table itself lives in a parameter
/// block of shape `[total_rows, features_per_level]`; this struct only holds
/// the lookup configuration.
#[derive(Debug, Clone)]
pub struct HashGrid {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size: usize,
    resolutions: Vec<usize>,
    level_rows: Vec<usize>,
    level_row_offset: Vec<usize>,
    total_rows: usize,
}

impl HashGrid {
    /// Geometric per-level growth from `base_resolution` so that the last
    /// level reaches at least `max_resolution`.
    pub fn new(
        levels: usize,
        base_resolution: usize,
        max_resolution: usize,
        features_per_level: usize,
        table_size: usize,
    ) -> Self {
        assert!(levels >= 1 && base_resolution >= 2);
        let growth = if levels > 1 {
            ((max_resolution as f64) / (base_resolution as f64)).powf(1.0 / (levels as f64 - 1.0))
        } else {
            1.0
        };
        let mut resolutions = Vec::with_capacity(levels);
        let mut prev = 0usize;
        for l in 0..levels {
            let r = ((base_resolution as f64) * growth.powi(l as i32)).round() as usize;
            let r = r.max(prev + 1); // strictly increasing
            resolutions.push(r);
            prev = r;
        }
        let mut level_rows = Vec::with_capacity(levels);
        let mut level_row_offset = Vec::with_capacity(levels);
        let mut total = 0usize;
        for &r in &resolutions {
            let dense = (r + 1).pow(3);
            let rows = dense.min(table_size);
            level_row_offset.push(total);
            level_rows.push(rows);
            total += rows;
        }
        HashGrid {
            levels,
            features_per_level,
            table_size,
            resolutions,
            level_rows,
            level_row_offset,
            total_rows: total,
        }
    }

    /// Paper-scale configuration: 16 levels, base 32, top level ≥ 2048,
    /// 2 features per level, 2^21 hash entries.
    pub fn paper() -> Self {
        HashGrid::new(16, 32, 2048, 2, 1 << 21)
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Total feature dimension of one encoded point.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    fn row_index(&self, level: usize, ix: usize, iy: usize, iz: usize) -> usize {
        let res = self.resolutions[level];
        let rows = self.level_rows[level];
        let dense = (res + 1).pow(3);
        let local = if dense <= self.table_size {
            (ix * (res + 1) + iy) * (res + 1) + iz
        } else {
            let h = (ix as u64).wrapping_mul(HASH_PRIMES[0])
                ^ (iy as u64).wrapping_mul(HASH_PRIMES[1])
                ^ (iz as u64).wrapping_mul(HASH_PRIMES[2]);
            (h % rows as u64) as usize
        };
        self.level_row_offset[level] + local
    }

    /// Per-level cell coordinates and trilinear weights for a query point.
    /// `deriv_axis = None` gives interpolation weights; `Some(a)` gives their
    /// derivative with respect to `x[a]` (zero where the query clamps).
    fn corner_entries(
        &self,
        x: &[f64; 3],
        deriv_axis: Option<usize>,
        out: &mut Vec<GatherEntry>,
    ) {
        for level in 0..self.levels {
            let res = self.resolutions[level] as f64;
            let mut cell = [0usize; 3];
            let mut frac = [0.0f64; 3];
            let mut dscale = [0.0f64; 3]; // d(frac)/d(x) per axis
            for d in 0..3 {
                let clamped = x[d].clamp(-1.0, 1.0);
                let p = (clamped + 1.0) * 0.5 * res;
                let c = (p.floor() as usize).min(self.resolutions[level] - 1);
                cell[d] = c;
                frac[d] = p - c as f64;
                dscale[d] = if x[d] > -1.0 && x[d] < 1.0 { 0.5 * res } else { 0.0 };
            }
            let out_base = (level * self.features_per_level) as u32;
            for corner in 0..8usize {
                let ox = corner & 1;
                let oy = (corner >> 1) & 1;
                let oz = (corner >> 2) & 1;
                let offs = [ox, oy, oz];
                let weight = match deriv_axis {
                    None => {
                        let mut w = 1.0;
                        for d in 0..3 {
                            w *= if offs[d] == 1 { frac[d] } else { 1.0 - frac[d] };
                        }
                        w
                    }
                    Some(a) => {
                        let mut w = if offs[a] == 1 { 1.0 } else { -1.0 } * dscale[a];
                        for d in 0..3 {
                            if d != a {
                                w *= if offs[d] == 1 { frac[d] } else { 1.0 - frac[d] };
                            }
                        }
                        w
                    }
                };
                if weight == 0.0 {
                    continue;
                }
                let row = self.row_index(level, cell[0] + ox, cell[1] + oy, cell[2] + oz);
                out.push(GatherEntry {
                    out_base,
                    row: row as u32,
                    weight,
                });
            }
        }
    }

    /// Encode on the tape: per-level trilinear interpolation of the hashed
    /// corner features, concatenated. Differentiable w.r.t. the table node.
    pub fn encode(&self, tape: &mut Tape, table: Var, x: &[f64; 3]) -> Var {
        let mut entries = Vec::with_capacity(self.levels * 8);
        self.corner_entries(x, None, &mut entries);
        tape.gather_weighted(
            table,
            Arc::from(entries),
            self.features_per_level,
            self.output_dim(),
        )
    }

    /// Tape node for the spatial derivative of the encoding along one axis.
    pub fn encode_grad_axis(&self, tape: &mut Tape, table: Var, x: &[f64; 3], axis: usize) -> Var {
        let mut entries = Vec::with_capacity(self.levels * 8);
        self.corner_entries(x, Some(axis), &mut entries);
        tape.gather_weighted(
            table,
            Arc::from(entries),
            self.features_per_level,
            self.output_dim(),
        )
    }

    /// Plain (untaped) encoding used by value-only evaluation paths.
    pub fn encode_plain(&self, table: &[f64], x: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        let mut entries = Vec::with_capacity(self.levels * 8);
        self.corner_entries(x, None, &mut entries);
        for e in &entries {
            let src = e.row as usize * self.features_per_level;
            let dst = e.out_base as usize;
            for c in 0..self.features_per_level {
                out[dst + c] += e.weight * table[src + c];
            }
        }
        out
    }

    /// Plain encoding plus its spatial derivatives (`3 × output_dim`).
    pub fn encode_with_grad_plain(
        &self,
        table: &[f64],
        x: &[f64; 3],
    ) -> (Vec<f64>, [Vec<f64>; 3]) {
        let value = self.encode_plain(table, x);
        let mut grads = [
            vec![0.0; self.output_dim()],
            vec![0.0; self.output_dim()],
            vec![0.0; self.output_dim()],
        ];
        let mut entries = Vec::with_capacity(self.levels * 8);
        for (axis, g) in grads.iter_mut().enumerate() {
            entries.clear();
            self.corner_entries(x, Some(axis), &mut entries);
            for e in &entries {
                let src = e.row as usize * self.features_per_level;
                let dst = e.out_base as usize;
                for c in 0..self.features_per_level {
                    g[dst + c] += e.weight * table[src + c];
                }
            }
        }
        (value, grads)
    }
}

// ── real spherical harmonics ─────────────────────────────────────────

/// Basis length for real spherical harmonics up to `degree`: `(degree+1)²`.
pub fn sh_basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real spherical-harmonics basis values up to `degree` (max 4) in the
/// standard `(l, m)` ordering with `m = -l..l`. Non-unit directions are
/// normalized with a warning.
pub fn sh_encode(dir: &[f64; 3], degree: usize) -> Result<Vec<f64>> {
    if degree > 4 {
        return Err(Error::InvalidInput(format!(
            "spherical harmonics degree {degree} unsupported (max 4)"
        )));
    }
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::InvalidInput(
            "spherical harmonics direction must be finite and nonzero".into(),
        ));
    }
    let (x, y, z) = if (norm - 1.0).abs() > 1e-6 {
        log::warn!("sh_encode: normalizing non-unit direction (norm {norm})");
        (dir[0] / norm, dir[1] / norm, dir[2] / norm)
    } else {
        (dir[0], dir[1], dir[2])
    };
    Ok(sh_basis_unit(x, y, z, degree))
}

/// Basis for an already-unit direction.
pub fn sh_basis_unit(x: f64, y: f64, z: f64, degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(sh_basis_len(degree));
    out.push(0.282_094_791_773_878_14);
    if degree >= 1 {
        out.push(-0.488_602_511_902_919_9 * y);
        out.push(0.488_602_511_902_919_9 * z);
        out.push(-0.488_602_511_902_919_9 * x);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(1.092_548_430_592_079_2 * x * y);
        out.push(-1.092_548_430_592_079_2 * y * z);
        out.push(0.315_391_565_252_520_05 * (2.0 * zz - xx - yy));
        out.push(-1.092_548_430_592_079_2 * x * z);
        out.push(0.546_274_215_296_039_6 * (xx - yy));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(-0.590_043_589_926_643_5 * y * (3.0 * xx - yy));
        out.push(2.890_611_442_640_554 * x * y * z);
        out.push(-0.457_045_799_464_465_8 * y * (4.0 * zz - xx - yy));
        out.push(0.373_176_332_590_115_4 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy));
        out.push(-0.457_045_799_464_465_8 * x * (4.0 * zz - xx - yy));
        out.push(1.445_305_721_320_277 * z * (xx - yy));
        out.push(-0.590_043_589_926_643_5 * x * (xx - 3.0 * yy));
    }
    if degree >= 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(2.503_342_941_796_704_6 * x * y * (xx - yy));
        out.push(-1.770_130_769_779_930_4 * y * z * (3.0 * xx - yy));
        out.push(0.946_174_695_757_560_1 * x * y * (7.0 * zz - 1.0));
        out.push(-0.669_046_543_557_289_2 * y * z * (7.0 * zz - 3.0));
        out.push(0.105_785_546_915_204_31 * (zz * (35.0 * zz - 30.0) + 3.0));
        out.push(-0.669_046_543_557_289_2 * x * z * (7.0 * zz - 3.0));
        out.push(0.473_087_347_878_780_04 * (xx - yy) * (7.0 * zz - 1.0));
        out.push(-1.770_130_769_779_930_4 * x * z * (xx - 3.0 * yy));
        out.push(0.625_835_735_449_176_1 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)));
    }
    out
}

/// Derivatives of [`sh_basis_unit`] with respect to the (unconstrained)
/// direction components; callers chain through normalization themselves.
pub fn sh_basis_grad_unit(x: f64, y: f64, z: f64, degree: usize) -> [Vec<f64>; 3] {
    let len = sh_basis_len(degree);
    let mut gx = Vec::with_capacity(len);
    let mut gy = Vec::with_capacity(len);
    let mut gz = Vec::with_capacity(len);
    let mut push = |a: f64, b: f64, c: f64| {
        gx.push(a);
        gy.push(b);
        gz.push(c);
    };
    push(0.0, 0.0, 0.0);
    if degree >= 1 {
        let c = 0.488_602_511_902_919_9;
        push(0.0, -c, 0.0);
        push(0.0, 0.0, c);
        push(-c, 0.0, 0.0);
    }
    if degree >= 2 {
        let (c20, c21, c22) = (
            1.092_548_430_592_079_2,
            0.315_391_565_252_520_05,
            0.546_274_215_296_039_6,
        );
        push(c20 * y, c20 * x, 0.0);
        push(0.0, -c20 * z, -c20 * y);
        push(-2.0 * c21 * x, -2.0 * c21 * y, 4.0 * c21 * z);
        push(-c20 * z, 0.0, -c20 * x);
        push(2.0 * c22 * x, -2.0 * c22 * y, 0.0);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c30 = -0.590_043_589_926_643_5;
        let c31 = 2.890_611_442_640_554;
        let c32 = -0.457_045_799_464_465_8;
        let c33 = 0.373_176_332_590_115_4;
        let c35 = 1.445_305_721_320_277;
        push(c30 * 6.0 * x * y, c30 * 3.0 * (xx - yy), 0.0);
        push(c31 * y * z, c31 * x * z, c31 * x * y);
        push(
            -2.0 * c32 * x * y,
            c32 * (4.0 * zz - xx - 3.0 * yy),
            8.0 * c32 * y * z,
        );
        push(
            -6.0 * c33 * x * z,
            -6.0 * c33 * y * z,
            c33 * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        );
        push(
            c32 * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * c32 * x * y,
            8.0 * c32 * x * z,
        );
        push(2.0 * c35 * x * z, -2.0 * c35 * y * z, c35 * (xx - yy));
        push(c30 * 3.0 * (xx - yy), -6.0 * c30 * x * y, 0.0);
    }
    if degree >= 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c40 = 2.503_342_941_796_704_6;
        let c41 = -1.770_130_769_779_930_4;
        let c42 = 0.946_174_695_757_560_1;
        let c43 = -0.669_046_543_557_289_2;
        let c44 = 0.105_785_546_915_204_31;
        let c46 = 0.473_087_347_878_780_04;
        let c48 = 0.625_835_735_449_176_1;
        push(
            c40 * y * (3.0 * xx - yy),
            c40 * x * (xx - 3.0 * yy),
            0.0,
        );
        push(
            6.0 * c41 * x * y * z,
            3.0 * c41 * z * (xx - yy),
            c41 * y * (3.0 * xx - yy),
        );
        push(
            c42 * y * (7.0 * zz - 1.0),
            c42 * x * (7.0 * zz - 1.0),
            14.0 * c42 * x * y * z,
        );
        push(
            0.0,
            c43 * z * (7.0 * zz - 3.0),
            c43 * y * (21.0 * zz - 3.0),
        );
        push(0.0, 0.0, c44 * (140.0 * zz * z - 60.0 * z));
        push(
            c43 * z * (7.0 * zz - 3.0),
            0.0,
            c43 * x * (21.0 * zz - 3.0),
        );
        push(
            2.0 * c46 * x * (7.0 * zz - 1.0),
            -2.0 * c46 * y * (7.0 * zz - 1.0),
            14.0 * c46 * z * (xx - yy),
        );
        push(
            3.0 * c41 * z * (xx - yy),
            -6.0 * c41 * x * y * z,
            c41 * x * (xx - 3.0 * yy),
        );
        push(
            c48 * (4.0 * xx * x - 12.0 * x * yy),
            c48 * (4.0 * yy * y - 12.0 * xx * y),
            0.0,
        );
    }
    [gx, gy, gz]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posenc_at_zero() {
        // sin 0 = 0, cos 0 = 1 for every band
        let enc = PosEnc::new(2, false);
        assert_eq!(enc.encode(&[0.0]), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn posenc_first_band_at_half() {
        let enc = PosEnc::new(1, false);
        let v = enc.encode(&[0.5]);
        assert!((v[0] - 1.0).abs() < 1e-12); // sin(π/2)
        assert!(v[1].abs() < 1e-12); // cos(π/2)
    }

    #[test]
    fn posenc_output_dim_formula() {
        // 3-D input, L=6, with identity → 3 × (12 + 1) = 39
        let enc = PosEnc::new(6, true);
        assert_eq!(enc.output_dim(3), 39);
        assert_eq!(enc.encode(&[0.1, 0.2, 0.3]).len(), 39);
    }

    #[test]
    fn posenc_bounded() {
        let enc = PosEnc::new(6, false);
        for i in 0..100 {
            let x = -1.0 + 0.02 * i as f64;
            for v in enc.encode(&[x]) {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn posenc_jacobian_matches_fd() {
        let enc = PosEnc::new(4, true);
        let x = [0.137, -0.52, 0.81];
        let jac = enc.jacobian(&x);
        let h = 1e-6;
        let m = enc.output_dim(3);
        for d in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            let (fp, fm) = (enc.encode(&xp), enc.encode(&xm));
            for r in 0..m {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!(
                    (jac[r * 3 + d] - fd).abs() < 1e-5,
                    "jacobian row {r} axis {d}"
                );
            }
        }
    }

    #[test]
    fn hashgrid_zero_table_is_zero() {
        let grid = HashGrid::new(16, 32, 2048, 2, 1 << 15);
        let table = vec![0.0; grid.total_rows() * 2];
        let v = grid.encode_plain(&table, &[0.3, -0.2, 0.7]);
        assert_eq!(v.len(), 32);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hashgrid_corner_query_returns_corner_feature() {
        // query exactly on a grid corner → weights (1, 0, ...)
        let grid = HashGrid::new(1, 4, 4, 2, 1 << 15);
        let mut table = vec![0.0; grid.total_rows() * 2];
        // corner (1,1,1) of the level-0 grid = x = -1 + 2*(1/4)
        let row = grid.row_index(0, 1, 1, 1);
        table[row * 2] = 3.5;
        table[row * 2 + 1] = -1.25;
        let p = -1.0 + 2.0 * (1.0 / 4.0);
        let v = grid.encode_plain(&table, &[p, p, p]);
        assert!((v[0] - 3.5).abs() < 1e-12);
        assert!((v[1] + 1.25).abs() < 1e-12);
    }

    #[test]
    fn hashgrid_edge_midpoint_averages() {
        // midpoint of an edge between corner features a and b (others zero)
        // → (a + b) / 2 per channel
        let grid = HashGrid::new(1, 4, 4, 2, 1 << 15);
        let mut table = vec![0.0; grid.total_rows() * 2];
        let ra = grid.row_index(0, 1, 1, 1);
        let rb = grid.row_index(0, 2, 1, 1);
        table[ra * 2] = 2.0;
        table[rb * 2] = 6.0;
        let corner = -1.0 + 2.0 * (1.0 / 4.0);
        let mid = corner + 0.5 * (2.0 / 4.0);
        let v = grid.encode_plain(&table, &[mid, corner, corner]);
        assert!((v[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hashgrid_weights_sum_to_one_per_level() {
        let grid = HashGrid::new(8, 16, 512, 2, 1 << 12);
        let mut entries = Vec::new();
        for &q in &[[0.1, -0.4, 0.9], [-1.5, 0.2, 0.0], [0.999, 0.999, -0.999]] {
            entries.clear();
            grid.corner_entries(&q, None, &mut entries);
            let mut per_level = vec![0.0; grid.levels];
            for e in &entries {
                per_level[e.out_base as usize / grid.features_per_level] += e.weight;
            }
            for (l, s) in per_level.iter().enumerate() {
                assert!((s - 1.0).abs() < 1e-9, "level {l} weights sum to {s}");
            }
        }
    }

    #[test]
    fn hashgrid_resolutions_strictly_increasing() {
        let grid = HashGrid::paper();
        assert_eq!(grid.levels, 16);
        for w in grid.resolutions().windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(grid.resolutions()[15] >= 2048);
    }

    #[test]
    fn sh_degree0_constant() {
        // Y₀⁰ = 1/(2√π) = 0.2820948 for any direction
        for dir in [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0]] {
            let v = sh_encode(&dir, 0).unwrap();
            assert!((v[0] - 0.282_094_8).abs() < 1e-6);
        }
    }

    #[test]
    fn sh_z_axis_kills_m_nonzero_degree1() {
        let v = sh_encode(&[0.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!(v[2] > 0.0);
    }

    #[test]
    fn sh_degree4_len() {
        let v = sh_encode(&[0.0, 1.0, 0.0], 4).unwrap();
        assert_eq!(v.len(), 25);
    }

    #[test]
    fn sh_basis_grad_matches_fd() {
        let (x, y, z) = (0.42, -0.31, 0.68);
        let g = sh_basis_grad_unit(x, y, z, 4);
        let h = 1e-6;
        let fd_axis = |axis: usize| -> Vec<f64> {
            let mut p = [x, y, z];
            let mut m = [x, y, z];
            p[axis] += h;
            m[axis] -= h;
            let bp = sh_basis_unit(p[0], p[1], p[2], 4);
            let bm = sh_basis_unit(m[0], m[1], m[2], 4);
            bp.iter().zip(&bm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        };
        for axis in 0..3 {
            let fd = fd_axis(axis);
            for (i, (a, b)) in g[axis].iter().zip(&fd).enumerate() {
                assert!((a - b).abs() < 1e-6, "band {i} axis {axis}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sh_orthonormal_monte_carlo() {
        // E[Y_i Y_j] over the unit sphere = δ_ij / (4π)
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let len = sh_basis_len(4);
        let mut acc = vec![0.0f64; len * len];
        for _ in 0..n {
            let dir = loop {
                let v = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n2: f64 = v.iter().map(|x| x * x).sum();
                if n2 > 1e-6 && n2 <= 1.0 {
                    let n = n2.sqrt();
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let b = sh_basis_unit(dir[0], dir[1], dir[2], 4);
            for i in 0..len {
                for j in i..len {
                    acc[i * len + j] += b[i] * b[j];
                }
            }
        }
        let quarter_pi_inv = 1.0 / (4.0 * std::f64::consts::PI);
        for i in 0..len {
            for j in i..len {
                let mean = acc[i * len + j] / n as f64;
                let expect = if i == j { quarter_pi_inv } else { 0.0 };
                assert!(
                    (mean - expect).abs() < 6e-3,
                    "SH orthonormality ({i},{j}): {mean} vs {expect}"
                );
            }
        }
    }
}
