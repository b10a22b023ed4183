//! Software rasterizer: EWA projection of Gaussians and front-to-back alpha
//! compositing of color, depth, normal, and accumulated opacity.
//!
//! The forward pass is shared between the plain entry point [`render_maps`]
//! and the taped [`rasterize`], which records a custom op whose backward is
//! the hand-derived vector-Jacobian product. Color and mask gradients flow
//! to every Gaussian attribute; the depth and normal maps are emitted as
//! detached distillation targets.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::autodiff::encoding::{sh_basis_grad_unit, sh_basis_unit};
use crate::autodiff::tape::{CustomOp, Tape, Var};
use crate::splat::camera::Camera;
use crate::splat::gaussians::GaussianSet;
use crate::{Error, Result};

/// 3σ falloff cutoff: skip pixels with dᵀΣ⁻¹d > 9 (power > 4.5).
const POWER_CUTOFF: f64 = 4.5;
/// Anti-aliasing floor added to the 2D covariance diagonal, in px².
const COV2D_FLOOR: f64 = 0.3;
/// Contributions below this effective alpha are skipped.
const ALPHA_SKIP: f64 = 1e-5;
/// Effective alpha ceiling, keeps 1-α bounded away from zero.
const ALPHA_CLAMP: f64 = 0.999;
/// Stop compositing once transmittance falls below this.
const T_STOP: f64 = 1e-4;
/// Pixels with mask below this get zero depth/normal.
const MASK_THRESHOLD: f64 = 1e-3;
const TILE: usize = 16;

/// Rendered maps of one view.
#[derive(Debug, Clone)]
pub struct RenderMaps {
    pub width: usize,
    pub height: usize,
    /// H×W×3 in [0, 1].
    pub color: Vec<f64>,
    /// H×W alpha-weighted camera-space z, zero where mask < threshold.
    pub depth: Vec<f64>,
    /// H×W×3 unit vectors or zero.
    pub normal: Vec<f64>,
    /// H×W accumulated alpha.
    pub mask: Vec<f64>,
}

/// EWA projection of a single Gaussian.
#[derive(Debug, Clone)]
pub struct Projected2d {
    pub mean: Vector2<f64>,
    /// Raw J Σ Jᵀ upper-left 2×2 block, before the anti-aliasing floor.
    pub cov: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
}

/// Project Gaussian `i`; `None` when its center is behind the near plane.
pub fn project_gaussian(set: &GaussianSet, i: usize, cam: &Camera) -> Option<Projected2d> {
    let mu = set.mean(i);
    let t = cam.world_to_cam(&mu);
    if t.z <= 1e-4 {
        return None;
    }
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let j = perspective_jacobian(cam, &t);
    let p = j * cam.rotation;
    let cov = p * set.covariance(i) * p.transpose();
    Some(Projected2d {
        mean,
        cov,
        depth: t.z,
    })
}

fn perspective_jacobian(cam: &Camera, t: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let inv_z = 1.0 / t.z;
    nalgebra::Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    )
}

/// Shortest principal axis oriented toward the camera; nearly isotropic
/// Gaussians fall back to the viewing direction.
fn splat_normal(set: &GaussianSet, i: usize, to_cam: &Vector3<f64>) -> Vector3<f64> {
    let s = set.scale(i);
    let mut axes = [(s.x, 0usize), (s.y, 1), (s.z, 2)];
    axes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (smin, kmin) = axes[0];
    let smid = axes[1].0;
    if smin > 0.9 * smid {
        return to_cam.normalize();
    }
    let r = set.rotation_matrix(i);
    let mut n = r.column(kmin).into_owned();
    if n.dot(to_cam) < 0.0 {
        n = -n;
    }
    n
}

struct Splat {
    gauss: usize,
    mean2: Vector2<f64>,
    /// Inverse of (cov2d + floor), symmetric: (a, b, c).
    inv: (f64, f64, f64),
    z: f64,
    opacity: f64,
    color: [f64; 3],
    color_clamped: [bool; 3],
    normal: Vector3<f64>,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    /// camera→mean direction and distance (SH view path).
    dir: Vector3<f64>,
    dist: f64,
}

fn prepare_splats(set: &GaussianSet, cam: &Camera) -> Vec<Splat> {
    let cam_pos = cam.position();
    let mut splats: Vec<Splat> = Vec::new();
    for i in 0..set.len() {
        let Some(proj) = project_gaussian(set, i, cam) else {
            continue;
        };
        let cov = proj.cov + Matrix2::identity() * COV2D_FLOOR;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
        if det <= 0.0 {
            continue;
        }
        let inv_det = 1.0 / det;
        let inv = (
            cov[(1, 1)] * inv_det,
            -cov[(0, 1)] * inv_det,
            cov[(0, 0)] * inv_det,
        );
        // 3σ radius from the larger eigenvalue
        let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
        let disc = (mid * mid - det).max(0.0).sqrt();
        let radius = 3.0 * (mid + disc).max(1e-12).sqrt();
        let x0 = ((proj.mean.x - radius).floor().max(0.0)) as usize;
        let y0 = ((proj.mean.y - radius).floor().max(0.0)) as usize;
        let x1 = ((proj.mean.x + radius).ceil().min(cam.width as f64)) as usize;
        let y1 = ((proj.mean.y + radius).ceil().min(cam.height as f64)) as usize;
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let mu = set.mean(i);
        let to_cam = cam_pos - mu;
        let dist = to_cam.norm().max(1e-9);
        let dir = -to_cam / dist;
        let bands = set.sh_bands();
        let basis = sh_basis_unit(dir.x, dir.y, dir.z, set.sh_degree);
        let sh = &set.sh_coeffs[i * bands * 3..(i + 1) * bands * 3];
        let mut raw = [0.5; 3];
        for b in 0..bands {
            for ch in 0..3 {
                raw[ch] += sh[b * 3 + ch] * basis[b];
            }
        }
        let color_clamped = raw.map(|v| !(0.0..=1.0).contains(&v));
        splats.push(Splat {
            gauss: i,
            mean2: proj.mean,
            inv,
            z: proj.depth,
            opacity: set.opacities[i],
            color: raw.map(|v| v.clamp(0.0, 1.0)),
            color_clamped,
            normal: splat_normal(set, i, &to_cam),
            x0,
            x1,
            y0,
            y1,
            dir,
            dist,
        });
    }
    // front-to-back, ties broken by stable input index
    splats.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.gauss.cmp(&b.gauss)));
    splats
}

fn tile_bins(splats: &[Splat], width: usize, height: usize) -> (usize, usize, Vec<Vec<u32>>) {
    let tx = width.div_ceil(TILE);
    let ty = height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tx * ty];
    for (si, s) in splats.iter().enumerate() {
        let t0 = s.x0 / TILE;
        let t1 = (s.x1 - 1) / TILE;
        let u0 = s.y0 / TILE;
        let u1 = (s.y1 - 1) / TILE;
        for uy in u0..=u1 {
            for ux in t0..=t1 {
                bins[uy * tx + ux].push(si as u32);
            }
        }
    }
    (tx, ty, bins)
}

/// Effective alpha of a splat at a pixel center, with the shared cutoffs.
#[inline]
fn effective_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64)> {
    let dx = px - s.mean2.x;
    let dy = py - s.mean2.y;
    let power = 0.5 * (s.inv.0 * dx * dx + 2.0 * s.inv.1 * dx * dy + s.inv.2 * dy * dy);
    if power > POWER_CUTOFF || power < 0.0 {
        return None;
    }
    let g = (-power).exp();
    let alpha = (s.opacity * g).min(ALPHA_CLAMP);
    if alpha < ALPHA_SKIP {
        return None;
    }
    Some((alpha, g))
}

fn forward(set: &GaussianSet, cam: &Camera) -> RenderMaps {
    let (w, h) = (cam.width, cam.height);
    let splats = prepare_splats(set, cam);
    let (tx, _ty, bins) = tile_bins(&splats, w, h);
    let mut color = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![0.0; w * h * 3];
    let mut mask = vec![0.0; w * h];
    for py in 0..h {
        for px in 0..w {
            let bin = &bins[(py / TILE) * tx + px / TILE];
            if bin.is_empty() {
                continue;
            }
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let pix = py * w + px;
            let mut t = 1.0;
            let mut acc_c = [0.0; 3];
            let mut acc_d = 0.0;
            let mut acc_n = [0.0; 3];
            let mut acc_m = 0.0;
            for &si in bin {
                let s = &splats[si as usize];
                if cx < s.x0 as f64 || cx > s.x1 as f64 || cy < s.y0 as f64 || cy > s.y1 as f64 {
                    continue;
                }
                let Some((alpha, _)) = effective_alpha(s, cx, cy) else {
                    continue;
                };
                let wgt = t * alpha;
                for ch in 0..3 {
                    acc_c[ch] += wgt * s.color[ch];
                    acc_n[ch] += wgt * s.normal[ch];
                }
                acc_d += wgt * s.z;
                acc_m += wgt;
                t *= 1.0 - alpha;
                if t < T_STOP {
                    break;
                }
            }
            for ch in 0..3 {
                color[pix * 3 + ch] = acc_c[ch];
            }
            mask[pix] = acc_m;
            if acc_m >= MASK_THRESHOLD {
                depth[pix] = acc_d / acc_m.max(1e-6);
                let nn = (acc_n[0] * acc_n[0] + acc_n[1] * acc_n[1] + acc_n[2] * acc_n[2]).sqrt();
                if nn > 1e-9 {
                    for ch in 0..3 {
                        normal[pix * 3 + ch] = acc_n[ch] / nn;
                    }
                }
            }
        }
    }
    RenderMaps {
        width: w,
        height: h,
        color,
        depth,
        normal,
        mask,
    }
}

/// Plain rendering of a Gaussian set (no tape).
pub fn render_maps(set: &GaussianSet, cam: &Camera) -> Result<RenderMaps> {
    if set.is_empty() {
        return Err(Error::InvalidInput("rasterize: empty Gaussian set".into()));
    }
    Ok(forward(set, cam))
}

/// Alpha-composited depth and normal maps (distillation targets).
pub fn composited_depth_normal(set: &GaussianSet, cam: &Camera) -> Result<(Vec<f64>, Vec<f64>)> {
    let maps = render_maps(set, cam)?;
    Ok((maps.depth, maps.normal))
}

// ── taped path ───────────────────────────────────────────────────────

/// Gaussian attribute nodes feeding the rasterizer.
pub struct GaussianNodes {
    pub means: Var,
    pub scales: Var,
    pub rotations: Var,
    pub opacities: Var,
    pub sh: Var,
    pub sh_degree: usize,
    pub count: usize,
}

/// Rendered maps as tape nodes.
pub struct RasterMaps {
    pub color: Var,
    pub depth: Var,
    pub normal: Var,
    pub mask: Var,
    pub width: usize,
    pub height: usize,
}

struct RasterizeOp {
    cam: Camera,
    sh_degree: usize,
    count: usize,
}

fn set_from_slices(
    means: &[f64],
    scales: &[f64],
    rotations: &[f64],
    opacities: &[f64],
    sh: &[f64],
    sh_degree: usize,
) -> GaussianSet {
    GaussianSet {
        means: means.to_vec(),
        scales: scales.to_vec(),
        rotations: rotations.to_vec(),
        opacities: opacities.to_vec(),
        sh_coeffs: sh.to_vec(),
        sh_degree,
    }
}

/// Rasterize Gaussian attribute nodes, recording a custom op. Color and mask
/// outputs are differentiable w.r.t. all five attribute nodes; depth and
/// normal are detached targets.
pub fn rasterize(tape: &mut Tape, nodes: &GaussianNodes, cam: &Camera) -> Result<RasterMaps> {
    if nodes.count == 0 {
        return Err(Error::InvalidInput("rasterize: empty Gaussian set".into()));
    }
    let set = set_from_slices(
        tape.value(nodes.means),
        tape.value(nodes.scales),
        tape.value(nodes.rotations),
        tape.value(nodes.opacities),
        tape.value(nodes.sh),
        nodes.sh_degree,
    );
    let maps = forward(&set, cam);
    let op = Arc::new(RasterizeOp {
        cam: cam.clone(),
        sh_degree: nodes.sh_degree,
        count: nodes.count,
    });
    let outs = tape.custom(
        op,
        &[
            nodes.means,
            nodes.scales,
            nodes.rotations,
            nodes.opacities,
            nodes.sh,
        ],
        &[&maps.color, &maps.depth, &maps.normal, &maps.mask],
    );
    Ok(RasterMaps {
        color: outs[0],
        depth: outs[1],
        normal: outs[2],
        mask: outs[3],
        width: cam.width,
        height: cam.height,
    })
}

impl CustomOp for RasterizeOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        _outputs: &[&[f64]],
        d_outputs: &[&[f64]],
        d_inputs: &mut [Vec<f64>],
    ) {
        let set = set_from_slices(
            inputs[0],
            inputs[1],
            inputs[2],
            inputs[3],
            inputs[4],
            self.sh_degree,
        );
        debug_assert_eq!(set.len(), self.count);
        let cam = &self.cam;
        let (w, h) = (cam.width, cam.height);
        let d_color = d_outputs[0];
        let d_mask = d_outputs[3];

        let splats = prepare_splats(&set, cam);
        let (tx, _ty, bins) = tile_bins(&splats, w, h);

        // per-splat accumulators over all pixels
        let ns = splats.len();
        let mut acc_mean2 = vec![[0.0f64; 2]; ns];
        let mut acc_inv = vec![[0.0f64; 3]; ns]; // d power/d (a, b, c) pulled back
        let mut acc_opac = vec![0.0f64; ns];
        let mut acc_col = vec![[0.0f64; 3]; ns];

        let mut contribs: Vec<(u32, f64, f64, f64)> = Vec::new(); // (splat, alpha, g, T_i)
        for py in 0..h {
            for px in 0..w {
                let pix = py * w + px;
                let dc = [
                    d_color[pix * 3],
                    d_color[pix * 3 + 1],
                    d_color[pix * 3 + 2],
                ];
                let dm = d_mask[pix];
                if dc == [0.0; 3] && dm == 0.0 {
                    continue;
                }
                let bin = &bins[(py / TILE) * tx + px / TILE];
                if bin.is_empty() {
                    continue;
                }
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                contribs.clear();
                let mut t = 1.0;
                for &si in bin {
                    let s = &splats[si as usize];
                    if cx < s.x0 as f64
                        || cx > s.x1 as f64
                        || cy < s.y0 as f64
                        || cy > s.y1 as f64
                    {
                        continue;
                    }
                    let Some((alpha, g)) = effective_alpha(s, cx, cy) else {
                        continue;
                    };
                    contribs.push((si, alpha, g, t));
                    t *= 1.0 - alpha;
                    if t < T_STOP {
                        break;
                    }
                }
                // reverse walk with suffix sums
                let mut s_c = [0.0f64; 3];
                let mut s_m = 0.0f64;
                for &(si, alpha, g, t_i) in contribs.iter().rev() {
                    let s = &splats[si as usize];
                    let wgt = t_i * alpha;
                    let inv_rest = 1.0 / (1.0 - alpha);
                    let mut d_alpha = dm * (t_i - s_m * inv_rest);
                    for ch in 0..3 {
                        d_alpha += dc[ch] * (t_i * s.color[ch] - s_c[ch] * inv_rest);
                        acc_col[si as usize][ch] += dc[ch] * wgt;
                    }
                    // α = min(opacity · g, clamp): zero grad in the clamped branch
                    if s.opacity * g < ALPHA_CLAMP {
                        acc_opac[si as usize] += g * d_alpha;
                        let d_g = s.opacity * d_alpha;
                        let d_power = -g * d_g;
                        let dx = cx - s.mean2.x;
                        let dy = cy - s.mean2.y;
                        // d power/d d = A d ; d = pix − mean2
                        let adx = s.inv.0 * dx + s.inv.1 * dy;
                        let ady = s.inv.1 * dx + s.inv.2 * dy;
                        acc_mean2[si as usize][0] -= d_power * adx;
                        acc_mean2[si as usize][1] -= d_power * ady;
                        acc_inv[si as usize][0] += d_power * 0.5 * dx * dx;
                        acc_inv[si as usize][1] += d_power * dx * dy;
                        acc_inv[si as usize][2] += d_power * 0.5 * dy * dy;
                    }
                    for ch in 0..3 {
                        s_c[ch] += wgt * s.color[ch];
                    }
                    s_m += wgt;
                }
            }
        }

        // pull per-splat accumulators back to Gaussian attributes
        let (d_means, rest) = d_inputs.split_at_mut(1);
        let (d_scales, rest) = rest.split_at_mut(1);
        let (d_rots, rest) = rest.split_at_mut(1);
        let (d_opac, d_sh) = rest.split_at_mut(1);
        let bands = set.sh_bands();
        for (si, s) in splats.iter().enumerate() {
            let gi = s.gauss;
            d_opac[0][gi] += acc_opac[si];

            // color → SH coefficients and view-direction path to the mean
            let basis = sh_basis_unit(s.dir.x, s.dir.y, s.dir.z, self.sh_degree);
            let gbasis = sh_basis_grad_unit(s.dir.x, s.dir.y, s.dir.z, self.sh_degree);
            let sh = &set.sh_coeffs[gi * bands * 3..(gi + 1) * bands * 3];
            let mut d_dir = Vector3::zeros();
            for ch in 0..3 {
                let dch = acc_col[si][ch];
                if dch == 0.0 || s.color_clamped[ch] {
                    continue;
                }
                for b in 0..bands {
                    d_sh[0][(gi * bands + b) * 3 + ch] += dch * basis[b];
                    let coeff = sh[b * 3 + ch];
                    d_dir.x += dch * coeff * gbasis[0][b];
                    d_dir.y += dch * coeff * gbasis[1][b];
                    d_dir.z += dch * coeff * gbasis[2][b];
                }
            }
            // dir = (μ − cam_pos)/dist: dμ = (I − dir dirᵀ)/dist · d_dir
            let proj = d_dir - s.dir * s.dir.dot(&d_dir);
            let mut d_mu = proj / s.dist;

            // footprint: A = C⁻¹ → dC = −A dA A
            let a_mat = Matrix2::new(s.inv.0, s.inv.1, s.inv.1, s.inv.2);
            let d_a = Matrix2::new(
                acc_inv[si][0],
                0.5 * acc_inv[si][1],
                0.5 * acc_inv[si][1],
                acc_inv[si][2],
            );
            let d_cov2 = -a_mat * d_a * a_mat;

            let mu = set.mean(gi);
            let t = cam.world_to_cam(&mu);
            let j = perspective_jacobian(cam, &t);
            let p = j * cam.rotation;
            let sigma = set.covariance(gi);

            // Σ2 = P Σ Pᵀ: dΣ = Pᵀ dC P ; dP = 2 dC P Σ
            let d_sigma = p.transpose() * d_cov2 * p;
            let d_p = 2.0 * d_cov2 * p * sigma;
            let d_j = d_p * cam.rotation.transpose();

            // J entries and the projection both depend on t
            let inv_z = 1.0 / t.z;
            let inv_z2 = inv_z * inv_z;
            let mut d_t = Vector3::zeros();
            d_t.x += acc_mean2[si][0] * cam.fx * inv_z;
            d_t.y += acc_mean2[si][1] * cam.fy * inv_z;
            d_t.z -= acc_mean2[si][0] * cam.fx * t.x * inv_z2
                + acc_mean2[si][1] * cam.fy * t.y * inv_z2;
            d_t.x += d_j[(0, 2)] * (-cam.fx * inv_z2);
            d_t.y += d_j[(1, 2)] * (-cam.fy * inv_z2);
            d_t.z += d_j[(0, 0)] * (-cam.fx * inv_z2)
                + d_j[(1, 1)] * (-cam.fy * inv_z2)
                + d_j[(0, 2)] * (2.0 * cam.fx * t.x * inv_z2 * inv_z)
                + d_j[(1, 2)] * (2.0 * cam.fy * t.y * inv_z2 * inv_z);
            d_mu += cam.rotation.transpose() * d_t;

            for d in 0..3 {
                d_means[0][gi * 3 + d] += d_mu[d];
            }

            // Σ = R D Rᵀ with D = diag(s²)
            let r = set.rotation_matrix(gi);
            let sc = set.scale(gi);
            let dmat = Matrix3::from_diagonal(&Vector3::new(
                sc.x * sc.x,
                sc.y * sc.y,
                sc.z * sc.z,
            ));
            let d_r = 2.0 * d_sigma * r * dmat;
            let rt_ds_r = r.transpose() * d_sigma * r;
            for k in 0..3 {
                d_scales[0][gi * 3 + k] += 2.0 * sc[k] * rt_ds_r[(k, k)];
            }
            let q = &set.rotations[gi * 4..gi * 4 + 4];
            let dq = rotation_quat_vjp(q, &d_r);
            for k in 0..4 {
                d_rots[0][gi * 4 + k] += dq[k];
            }
        }
    }
}

/// VJP of the quaternion-to-rotation map for q = (w, x, y, z).
fn rotation_quat_vjp(q: &[f64], d_r: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn axis_camera(f: f64, size: usize) -> Camera {
        Camera::new(
            f,
            f,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    fn single_gaussian(mean: [f64; 3], scale: [f64; 3], opacity: f64) -> GaussianSet {
        let mut sh = vec![0.0; 27];
        // DC white-ish color: 0.5 offset already gives gray
        sh[0] = 0.8;
        sh[1] = 0.8;
        sh[2] = 0.8;
        GaussianSet::new(
            mean.to_vec(),
            scale.to_vec(),
            vec![1.0, 0.0, 0.0, 0.0],
            vec![opacity],
            sh,
            2,
        )
        .unwrap()
    }

    #[test]
    fn on_axis_projection_lands_on_principal_point() {
        // Gaussian on the optical axis at z=2, f=100, cx=cy=64 → (64, 64)
        let cam = axis_camera(100.0, 128);
        let set = single_gaussian([0.0, 0.0, 2.0], [0.1, 0.1, 0.1], 1.0);
        let p = project_gaussian(&set, 0, &cam).unwrap();
        assert!((p.mean.x - 64.0).abs() < 1e-12);
        assert!((p.mean.y - 64.0).abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_on_axis_cov_is_scaled_identity() {
        let cam = axis_camera(100.0, 128);
        let s = 0.2;
        let set = single_gaussian([0.0, 0.0, 2.0], [s, s, s], 1.0);
        let p = project_gaussian(&set, 0, &cam).unwrap();
        let expect = (100.0f64 / 2.0).powi(2) * s * s;
        assert!((p.cov[(0, 0)] - expect).abs() < 1e-9);
        assert!((p.cov[(1, 1)] - expect).abs() < 1e-9);
        assert!(p.cov[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn doubling_scales_quadruples_cov() {
        let cam = axis_camera(90.0, 64);
        let a = single_gaussian([0.3, -0.2, 2.5], [0.1, 0.05, 0.2], 1.0);
        let b = single_gaussian([0.3, -0.2, 2.5], [0.2, 0.1, 0.4], 1.0);
        let pa = project_gaussian(&a, 0, &cam).unwrap();
        let pb = project_gaussian(&b, 0, &cam).unwrap();
        assert!((pb.cov - pa.cov * 4.0).norm() < 1e-9);
    }

    #[test]
    fn behind_camera_excluded() {
        let cam = axis_camera(100.0, 64);
        let set = single_gaussian([0.0, 0.0, -1.0], [0.1, 0.1, 0.1], 1.0);
        assert!(project_gaussian(&set, 0, &cam).is_none());
    }

    #[test]
    fn opaque_center_pixel_has_sh_color_and_full_mask() {
        let cam = axis_camera(100.0, 128);
        let set = single_gaussian([0.0, 0.0, 2.0], [0.3, 0.3, 0.3], 1.0);
        let maps = render_maps(&set, &cam).unwrap();
        let pix = 64 * 128 + 64;
        // SH color: 0.8·Y₀ + 0.5
        let expect = 0.8 * 0.282_094_791_773_878_14 + 0.5;
        assert!((maps.mask[pix] - 1.0).abs() < 2e-3);
        for ch in 0..3 {
            assert!((maps.color[pix * 3 + ch] - expect).abs() < 2e-3);
        }
        // single opaque Gaussian at z=2 → composited depth 2
        assert!((maps.depth[pix] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn front_half_white_back_black_gives_half() {
        let cam = axis_camera(100.0, 64);
        let mut sh = vec![0.0; 54];
        let dc_white = 0.5 / 0.282_094_791_773_878_14; // color 1.0
        let dc_black = -0.5 / 0.282_094_791_773_878_14; // color 0.0
        sh[0] = dc_white;
        sh[1] = dc_white;
        sh[2] = dc_white;
        sh[27] = dc_black;
        sh[28] = dc_black;
        sh[29] = dc_black;
        let set = GaussianSet::new(
            vec![0.0, 0.0, 2.0, 0.0, 0.0, 3.0],
            vec![0.5; 6],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.5, 1.0],
            sh,
            2,
        )
        .unwrap();
        let maps = render_maps(&set, &cam).unwrap();
        let pix = 32 * 64 + 32;
        assert!(
            (maps.color[pix * 3] - 0.5).abs() < 5e-3,
            "got {}",
            maps.color[pix * 3]
        );
    }

    #[test]
    fn empty_pixel_is_zero() {
        let cam = axis_camera(100.0, 64);
        let set = single_gaussian([0.0, 0.0, 2.0], [0.01, 0.01, 0.01], 1.0);
        let maps = render_maps(&set, &cam).unwrap();
        let pix = 2 * 64 + 2; // far corner
        assert_eq!(maps.color[pix * 3], 0.0);
        assert_eq!(maps.mask[pix], 0.0);
        assert_eq!(maps.depth[pix], 0.0);
        assert_eq!(&maps.normal[pix * 3..pix * 3 + 3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn flat_disc_normal_faces_camera() {
        let cam = axis_camera(100.0, 64);
        let set = single_gaussian([0.0, 0.0, 2.0], [0.3, 0.3, 1e-3], 1.0);
        let maps = render_maps(&set, &cam).unwrap();
        let pix = 32 * 64 + 32;
        let n = &maps.normal[pix * 3..pix * 3 + 3];
        // camera at origin looking +z → normal points back at the camera (−z)
        assert!(n[2] < -0.99, "normal = {n:?}");
    }

    #[test]
    fn compositing_is_order_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cam = axis_camera(80.0, 48);
        let n = 12;
        let mut means = Vec::new();
        let mut scales = Vec::new();
        let mut rots = Vec::new();
        let mut opac = Vec::new();
        let mut sh = Vec::new();
        for _ in 0..n {
            means.extend([
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(1.5..3.5),
            ]);
            scales.extend([rng.gen_range(0.05..0.3); 3]);
            rots.extend([1.0, 0.0, 0.0, 0.0]);
            opac.push(rng.gen_range(0.2..0.9));
            sh.extend((0..27).map(|_| rng.gen_range(-0.5..0.5)));
        }
        let set = GaussianSet::new(means.clone(), scales.clone(), rots.clone(), opac.clone(), sh.clone(), 2).unwrap();
        let a = render_maps(&set, &cam).unwrap();
        // reverse the list
        let perm: Vec<usize> = (0..n).rev().collect();
        let pick3 = |v: &[f64], i: usize| [v[i * 3], v[i * 3 + 1], v[i * 3 + 2]];
        let mut m2 = Vec::new();
        let mut s2 = Vec::new();
        let mut r2 = Vec::new();
        let mut o2 = Vec::new();
        let mut h2 = Vec::new();
        for &i in &perm {
            m2.extend(pick3(&means, i));
            s2.extend(pick3(&scales, i));
            r2.extend_from_slice(&rots[i * 4..i * 4 + 4]);
            o2.push(opac[i]);
            h2.extend_from_slice(&sh[i * 27..(i + 1) * 27]);
        }
        let set2 = GaussianSet::new(m2, s2, r2, o2, h2, 2).unwrap();
        let b = render_maps(&set2, &cam).unwrap();
        for (x, y) in a.color.iter().zip(&b.color) {
            assert_eq!(x, y);
        }
        for (x, y) in a.mask.iter().zip(&b.mask) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn mask_monotone_in_opacity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let cam = axis_camera(80.0, 32);
            let n = 6;
            let mut means = Vec::new();
            let mut scales = Vec::new();
            let mut rots = Vec::new();
            let mut opac = Vec::new();
            let sh = vec![0.1; n * 27];
            for _ in 0..n {
                means.extend([
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(1.5..3.0),
                ]);
                scales.extend([rng.gen_range(0.1..0.4); 3]);
                rots.extend([1.0, 0.0, 0.0, 0.0]);
                opac.push(rng.gen_range(0.1..0.8));
            }
            let set = GaussianSet::new(means.clone(), scales.clone(), rots.clone(), opac.clone(), sh.clone(), 2).unwrap();
            let base = render_maps(&set, &cam).unwrap();
            let k = rng.gen_range(0..n);
            let mut opac2 = opac.clone();
            opac2[k] = (opac2[k] + 0.15).min(1.0);
            let set2 = GaussianSet::new(means, scales, rots, opac2, sh, 2).unwrap();
            let bumped = render_maps(&set2, &cam).unwrap();
            for (m0, m1) in base.mask.iter().zip(&bumped.mask) {
                assert!(*m1 >= *m0 - 1e-12);
                assert!((0.0..=1.0 + 1e-12).contains(m1));
            }
        }
    }

    /// Color and mask gradients w.r.t. every attribute match central finite
    /// differences on a small scene.
    #[test]
    fn raster_gradients_match_fd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let cam = axis_camera(40.0, 24);
        let n = 3;
        let mut means = Vec::new();
        let mut scales = Vec::new();
        let mut rots = Vec::new();
        let mut opac = Vec::new();
        let mut sh = Vec::new();
        for i in 0..n {
            means.extend([
                -0.15 + 0.17 * i as f64,
                0.1 - 0.13 * i as f64,
                2.0 + 0.4 * i as f64,
            ]);
            scales.extend([0.25 + 0.03 * i as f64, 0.2, 0.15]);
            let q = [1.0, 0.1 * i as f64, 0.05, -0.02];
            let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            rots.extend(q.iter().map(|v| v / qn));
            opac.push(0.4 + 0.15 * i as f64);
            sh.extend((0..27).map(|_| rng.gen_range(-0.3..0.3)));
        }
        // random fixed loss weights over color + mask
        let wc: Vec<f64> = (0..cam.width * cam.height * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let wm: Vec<f64> = (0..cam.width * cam.height)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let loss_of = |m: &[f64], s: &[f64], r: &[f64], o: &[f64], c: &[f64]| -> f64 {
            let set = set_from_slices(m, s, r, o, c, 2);
            let maps = forward(&set, &cam);
            let lc: f64 = maps.color.iter().zip(&wc).map(|(a, b)| a * b).sum();
            let lm: f64 = maps.mask.iter().zip(&wm).map(|(a, b)| a * b).sum();
            lc + lm
        };

        // analytic grads through the tape custom op
        let mut tape = Tape::new();
        let vm = tape.leaf(&means);
        let vs = tape.leaf(&scales);
        let vr = tape.leaf(&rots);
        let vo = tape.leaf(&opac);
        let vc = tape.leaf(&sh);
        let nodes = GaussianNodes {
            means: vm,
            scales: vs,
            rotations: vr,
            opacities: vo,
            sh: vc,
            sh_degree: 2,
            count: n,
        };
        let maps = rasterize(&mut tape, &nodes, &cam).unwrap();
        let wc_arc: Arc<[f64]> = wc.clone().into();
        let wm_arc: Arc<[f64]> = wm.clone().into();
        let lc = tape.dot_const(maps.color, wc_arc);
        let lm = tape.dot_const(maps.mask, wm_arc);
        let loss = tape.add(lc, lm);
        tape.backward(loss);

        let h = 1e-6;
        let check = |name: &str, analytic: &[f64], data: &[f64], which: usize| {
            let mut worst = 0.0f64;
            for i in 0..data.len() {
                let mut p = data.to_vec();
                let mut q = data.to_vec();
                p[i] += h;
                q[i] -= h;
                let args: [&[f64]; 5] = [&means, &scales, &rots, &opac, &sh];
                let fp = {
                    let mut a = args;
                    a[which] = &p;
                    loss_of(a[0], a[1], a[2], a[3], a[4])
                };
                let fm = {
                    let mut a = args;
                    a[which] = &q;
                    loss_of(a[0], a[1], a[2], a[3], a[4])
                };
                let fd = (fp - fm) / (2.0 * h);
                let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
                worst = worst.max(err);
                assert!(
                    err < 1e-4,
                    "{name}[{i}]: analytic {} vs fd {fd} (err {err})",
                    analytic[i]
                );
            }
            worst
        };
        check("means", tape.grad(vm), &means, 0);
        check("scales", tape.grad(vs), &scales, 1);
        check("rotations", tape.grad(vr), &rots, 2);
        check("opacities", tape.grad(vo), &opac, 3);
        check("sh", tape.grad(vc), &sh, 4);
    }
}
