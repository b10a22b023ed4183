//! Gaussian primitive storage and the de-facto splatting PLY layout.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::{Error, Result};

/// Explicit Gaussian primitives. Quaternions are `(w, x, y, z)` and
/// unit-norm; scales are strictly positive; opacities lie in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussianSet {
    /// N×3 positions.
    pub means: Vec<f64>,
    /// N×3 per-axis standard deviations.
    pub scales: Vec<f64>,
    /// N×4 unit quaternions.
    pub rotations: Vec<f64>,
    /// N opacities.
    pub opacities: Vec<f64>,
    /// N×bands×3 spherical-harmonics coefficients, band-major per point.
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianSet {
    pub fn new(
        means: Vec<f64>,
        scales: Vec<f64>,
        rotations: Vec<f64>,
        opacities: Vec<f64>,
        sh_coeffs: Vec<f64>,
        sh_degree: usize,
    ) -> Result<Self> {
        let n = opacities.len();
        let bands = (sh_degree + 1) * (sh_degree + 1);
        if means.len() != n * 3
            || scales.len() != n * 3
            || rotations.len() != n * 4
            || sh_coeffs.len() != n * bands * 3
        {
            return Err(Error::shape(
                "gaussian set",
                format!("{n} points"),
                format!(
                    "means {} scales {} rots {} sh {}",
                    means.len(),
                    scales.len(),
                    rotations.len(),
                    sh_coeffs.len()
                ),
            ));
        }
        for (i, q) in rotations.chunks_exact(4).enumerate() {
            let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "quaternion {i} has norm {norm}"
                )));
            }
        }
        if let Some(i) = scales.iter().position(|&s| s <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "scale component {i} is not strictly positive"
            )));
        }
        if let Some(i) = opacities.iter().position(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidInput(format!(
                "opacity {i} outside [0, 1]"
            )));
        }
        Ok(GaussianSet {
            means,
            scales,
            rotations,
            opacities,
            sh_coeffs,
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn sh_bands(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn mean(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.means[i * 3], self.means[i * 3 + 1], self.means[i * 3 + 2])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.scales[i * 3],
            self.scales[i * 3 + 1],
            self.scales[i * 3 + 2],
        )
    }

    /// Rotation matrix of primitive `i`.
    pub fn rotation_matrix(&self, i: usize) -> Matrix3<f64> {
        quat_to_matrix(&self.rotations[i * 4..i * 4 + 4])
    }

    /// World covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = self.rotation_matrix(i);
        let s = self.scale(i);
        let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }

    /// Axis-aligned bounding box of the means.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.means.chunks_exact(3) {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }
}

/// Rotation matrix from a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion from a rotation matrix (for tests and dataset init).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(m);
    [q.w, q.i, q.j, q.k]
}

#[inline]
fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

#[inline]
fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── PLY io (de-facto splatting layout) ───────────────────────────────
//
// binary_little_endian, one vertex element with float properties:
//   x y z nx ny nz f_dc_0..2 f_rest_0..(3*(bands-1)-1) opacity scale_0..2
//   rot_0..3
// Scales are stored as logs, opacity as a logit, f_rest channel-major.

impl GaussianSet {
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let bands = self.sh_bands();
        let rest = 3 * (bands - 1);
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        let mut header = String::new();
        header.push_str("ply\nformat binary_little_endian 1.0\n");
        header.push_str(&format!("element vertex {n}\n"));
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            header.push_str(&format!("property float {p}\n"));
        }
        for i in 0..3 {
            header.push_str(&format!("property float f_dc_{i}\n"));
        }
        for i in 0..rest {
            header.push_str(&format!("property float f_rest_{i}\n"));
        }
        header.push_str("property float opacity\n");
        for i in 0..3 {
            header.push_str(&format!("property float scale_{i}\n"));
        }
        for i in 0..4 {
            header.push_str(&format!("property float rot_{i}\n"));
        }
        header.push_str("end_header\n");
        w.write_all(header.as_bytes()).map_err(io_err)?;

        let mut put = |v: f64, w: &mut BufWriter<std::fs::File>| -> Result<()> {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)
        };
        for i in 0..n {
            for d in 0..3 {
                put(self.means[i * 3 + d], &mut w)?;
            }
            for _ in 0..3 {
                put(0.0, &mut w)?; // normals unused in this layout
            }
            let sh = &self.sh_coeffs[i * bands * 3..(i + 1) * bands * 3];
            for ch in 0..3 {
                put(sh[ch], &mut w)?; // f_dc
            }
            for ch in 0..3 {
                for b in 1..bands {
                    put(sh[b * 3 + ch], &mut w)?; // f_rest, channel-major
                }
            }
            put(logit(self.opacities[i]), &mut w)?;
            for d in 0..3 {
                put(self.scales[i * 3 + d].ln(), &mut w)?;
            }
            for d in 0..4 {
                put(self.rotations[i * 4 + d], &mut w)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            what: "gaussian PLY",
            path: path.to_path_buf(),
            detail,
        };
        let header_end = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .ok_or_else(|| bad("missing end_header".into()))?
            + 11;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|e| bad(format!("header utf8: {e}")))?;
        if !header.contains("format binary_little_endian") {
            return Err(bad("expected binary_little_endian".into()));
        }
        let mut n = 0usize;
        let mut props: Vec<String> = Vec::new();
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("element vertex ") {
                n = rest
                    .trim()
                    .parse()
                    .map_err(|e| bad(format!("vertex count: {e}")))?;
            } else if let Some(rest) = line.strip_prefix("property float ") {
                props.push(rest.trim().to_string());
            }
        }
        let rest_count = props.iter().filter(|p| p.starts_with("f_rest_")).count();
        if rest_count % 3 != 0 {
            return Err(bad(format!("f_rest count {rest_count} not divisible by 3")));
        }
        let bands = rest_count / 3 + 1;
        let sh_degree = (bands as f64).sqrt() as usize - 1;
        if (sh_degree + 1) * (sh_degree + 1) != bands {
            return Err(bad(format!("band count {bands} is not a square")));
        }
        let stride = props.len() * 4;
        if bytes.len() < header_end + n * stride {
            return Err(bad("truncated vertex data".into()));
        }
        let col = |name: &str| -> Result<usize> {
            props
                .iter()
                .position(|p| p == name)
                .ok_or_else(|| bad(format!("missing property {name}")))
        };
        let read_f = |row: usize, c: usize| -> f64 {
            let at = header_end + row * stride + c * 4;
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
        };

        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        let cop = col("opacity")?;
        let cs0 = col("scale_0")?;
        let cr0 = col("rot_0")?;
        let cdc = col("f_dc_0")?;
        let crest = if rest_count > 0 { col("f_rest_0")? } else { 0 };

        let mut means = Vec::with_capacity(n * 3);
        let mut scales = Vec::with_capacity(n * 3);
        let mut rotations = Vec::with_capacity(n * 4);
        let mut opacities = Vec::with_capacity(n);
        let mut sh = Vec::with_capacity(n * bands * 3);
        for i in 0..n {
            means.extend([read_f(i, cx), read_f(i, cy), read_f(i, cz)]);
            for d in 0..3 {
                scales.push(read_f(i, cs0 + d).exp().max(1e-9));
            }
            let mut q = [0.0; 4];
            for d in 0..4 {
                q[d] = read_f(i, cr0 + d);
            }
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            rotations.extend(q.iter().map(|v| v / qn));
            opacities.push(inv_logit(read_f(i, cop)));
            for b in 0..bands {
                for ch in 0..3 {
                    let v = if b == 0 {
                        read_f(i, cdc + ch)
                    } else {
                        read_f(i, crest + ch * (bands - 1) + (b - 1))
                    };
                    sh.push(v);
                }
            }
        }
        GaussianSet::new(means, scales, rotations, opacities, sh, sh_degree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> GaussianSet {
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        GaussianSet::new(
            vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0],
            vec![0.5, 0.25, 0.125, 1.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0, s2, s2, 0.0, 0.0],
            vec![0.8, 0.25],
            (0..2 * 9 * 3).map(|i| i as f64 * 0.01 - 0.2).collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn invariants_enforced() {
        let bad_scale = GaussianSet::new(
            vec![0.0; 3],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5],
            vec![0.0; 27],
            2,
        );
        assert!(bad_scale.is_err());
        let bad_quat = GaussianSet::new(
            vec![0.0; 3],
            vec![1.0; 3],
            vec![2.0, 0.0, 0.0, 0.0],
            vec![0.5],
            vec![0.0; 27],
            2,
        );
        assert!(bad_quat.is_err());
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let set = sample_set();
        let r = set.rotation_matrix(0);
        assert!((r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn covariance_is_diag_of_squared_scales_for_identity_rotation() {
        let set = sample_set();
        let c = set.covariance(0);
        assert!((c[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((c[(1, 1)] - 0.0625).abs() < 1e-12);
        assert!((c[(2, 2)] - 0.015625).abs() < 1e-12);
        assert!(c[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn ply_round_trip() {
        let set = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splats.ply");
        set.save_ply(&path).unwrap();
        let loaded = GaussianSet::load_ply(&path).unwrap();
        assert_eq!(loaded.len(), set.len());
        assert_eq!(loaded.sh_degree, 2);
        for (a, b) in loaded.means.iter().zip(&set.means) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in loaded.scales.iter().zip(&set.scales) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in loaded.opacities.iter().zip(&set.opacities) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in loaded.sh_coeffs.iter().zip(&set.sh_coeffs) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
