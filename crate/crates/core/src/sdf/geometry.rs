//! Geometry network: hash-grid features concatenated with a positional
//! encoding of the query, through a weight-normalized softplus MLP that
//! outputs the SDF value and a geometric feature vector.
//!
//! Queries carry spatial tangents through the whole stack, so the returned
//! SDF gradient is an ordinary tape node: eikonal penalties and composited
//! normals backpropagate into the table and MLP with one reverse sweep.

use rand::Rng;

use crate::autodiff::encoding::{HashGrid, PosEnc};
use crate::autodiff::mlp::{gauss, Activation, BoundMlp, Mlp};
use crate::autodiff::params::{AdamW, BoundParams, GradMap, ParamGroup, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::sdf::FEATURE_DIM;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GeometryNet {
    pub grid: HashGrid,
    pub pos_enc: PosEnc,
    pub mlp: Mlp,
}

/// One taped geometry query.
pub struct SdfQuery {
    /// SDF value (length-1 node).
    pub sdf: Var,
    /// Geometric feature (length-128 node).
    pub feature: Var,
    /// Spatial SDF gradient (length-3 node).
    pub grad: Var,
}

impl GeometryNet {
    pub const HASH_BLOCK: &'static str = "geometry_net.hash";

    /// One hidden layer of 128 softplus units with weight normalization;
    /// outputs 1 + 128 values.
    pub fn new(grid: HashGrid) -> Self {
        let pos_enc = PosEnc::new(6, true);
        let in_dim = pos_enc.output_dim(3) + grid.output_dim();
        let mlp = Mlp::new(
            "geometry_net.mlp",
            &[in_dim, 128, 1 + FEATURE_DIM],
            Activation::Softplus,
            Activation::None,
            true,
        );
        GeometryNet { grid, pos_enc, mlp }
    }

    /// Hash features start near zero so the MLP bias dominates early.
    pub fn alloc_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let rows = self.grid.total_rows();
        let feats = self.grid.features_per_level;
        let table: Vec<f64> = (0..rows * feats)
            .map(|_| rng.gen_range(-1e-4..1e-4))
            .collect();
        store.insert(
            Self::HASH_BLOCK,
            table,
            vec![rows, feats],
            ParamGroup::Geometry,
            false,
        );
        self.mlp.alloc_params(store, ParamGroup::Geometry, rng);
    }

    fn clamp_point(x: &[f64; 3]) -> [f64; 3] {
        [
            x[0].clamp(-1.0, 1.0),
            x[1].clamp(-1.0, 1.0),
            x[2].clamp(-1.0, 1.0),
        ]
    }

    fn assemble_plain(&self, store: &ParamStore, x: &[f64; 3]) -> Vec<f64> {
        let x = Self::clamp_point(x);
        let mut input = self.pos_enc.encode(&x);
        input.extend(self.grid.encode_plain(store.data(Self::HASH_BLOCK), &x));
        input
    }

    /// Plain SDF + feature evaluation.
    pub fn eval_plain(&self, store: &ParamStore, x: &[f64; 3]) -> Result<(f64, Vec<f64>)> {
        let out = self.mlp.forward_plain(store, &self.assemble_plain(store, x))?;
        Ok((out[0], out[1..].to_vec()))
    }

    pub fn sdf_plain(&self, store: &ParamStore, x: &[f64; 3]) -> f64 {
        self.eval_plain(store, x).expect("geometry net shape").0
    }

    /// Plain SDF with its spatial gradient (value path only).
    pub fn sdf_with_grad_plain(&self, store: &ParamStore, x: &[f64; 3]) -> (f64, [f64; 3]) {
        let xc = Self::clamp_point(x);
        let table = store.data(Self::HASH_BLOCK);
        let gamma = self.pos_enc.encode(&xc);
        let gamma_jac = self.pos_enc.jacobian(&xc);
        let gdim = self.pos_enc.output_dim(3);
        let (enc, enc_grads) = self.grid.encode_with_grad_plain(table, &xc);
        let mut input = gamma;
        input.extend(enc);
        let mut tangents = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut t = vec![0.0; input.len()];
            for r in 0..gdim {
                t[r] = gamma_jac[r * 3 + axis];
            }
            for (r, g) in enc_grads[axis].iter().enumerate() {
                t[gdim + r] = *g;
            }
            tangents.push(t);
        }
        let (out, dout) = self
            .mlp
            .forward_tangents_plain(store, &input, &tangents)
            .expect("geometry net shape");
        (out[0], [dout[0][0], dout[1][0], dout[2][0]])
    }

    pub fn bind<'n>(
        &'n self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &mut BoundParams,
    ) -> BoundGeometryNet<'n> {
        let table = bound.bind(tape, store, Self::HASH_BLOCK);
        let mlp = self.mlp.bind(tape, store, bound);
        BoundGeometryNet {
            net: self,
            table,
            mlp,
        }
    }

    /// SAL/IDR-style sphere initialization adapted to this architecture
    /// (single softplus hidden layer, encoded inputs): identity input
    /// columns carry random projections, the output row starts at the
    /// radial mean with bias −radius, and a short seeded calibration fit
    /// against `‖x‖ − radius` settles the remaining offset. The hash table
    /// stays near zero throughout.
    pub fn geometric_init(&self, store: &mut ParamStore, radius: f64, rng: &mut impl Rng) {
        let gdim = self.pos_enc.output_dim(3);
        let in_dim = self.mlp.input_dim();
        let hidden = 128;
        let per_dim = gdim / 3;

        // hidden layer: random projections on the identity columns only
        {
            let v0 = store.data_mut("geometry_net.mlp.v0");
            v0.fill(0.0);
            let std = std::f64::consts::SQRT_2 / (hidden as f64).sqrt();
            for r in 0..hidden {
                for d in 0..3 {
                    v0[r * in_dim + d * per_dim] = gauss(rng) * std * 16.0;
                }
            }
        }
        {
            let rows: Vec<f64> = (0..hidden)
                .map(|r| {
                    let v0 = store.data(&"geometry_net.mlp.v0".to_string());
                    v0[r * in_dim..(r + 1) * in_dim]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-12)
                })
                .collect();
            store.data_mut("geometry_net.mlp.g0").copy_from_slice(&rows);
            store.data_mut("geometry_net.mlp.b0").fill(0.0);
        }
        // output layer: sdf row at the radial mean, feature rows small
        {
            let v1 = store.data_mut("geometry_net.mlp.v1");
            let mean = std::f64::consts::PI.sqrt() / (hidden as f64).sqrt();
            for c in 0..hidden {
                v1[c] = mean + gauss(rng) * 1e-4;
            }
            for r in 1..=FEATURE_DIM {
                for c in 0..hidden {
                    v1[r * hidden + c] = gauss(rng) * 0.05;
                }
            }
        }
        {
            let norms: Vec<f64> = (0..1 + FEATURE_DIM)
                .map(|r| {
                    let v1 = store.data(&"geometry_net.mlp.v1".to_string());
                    v1[r * hidden..(r + 1) * hidden]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-12)
                })
                .collect();
            store.data_mut("geometry_net.mlp.g1").copy_from_slice(&norms);
            let b1 = store.data_mut("geometry_net.mlp.b1");
            b1.fill(0.0);
            b1[0] = -radius;
        }
        // closed-form affine pre-calibration: least-squares (a, b) so that
        // a·sdf_raw + b ≈ ‖x‖ − radius over sampled points, absorbed into
        // the output row's gain and bias
        {
            let n = 512;
            let mut sxx = 0.0;
            let mut sx = 0.0;
            let mut sxy = 0.0;
            let mut sy = 0.0;
            for _ in 0..n {
                let x: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let raw = self.sdf_plain(store, &x);
                let target = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - radius;
                sxx += raw * raw;
                sx += raw;
                sxy += raw * target;
                sy += target;
            }
            let nf = n as f64;
            let det = sxx * nf - sx * sx;
            if det.abs() > 1e-9 {
                let a = (sxy * nf - sx * sy) / det;
                let b = (sxx * sy - sx * sxy) / det;
                store.data_mut("geometry_net.mlp.g1")[0] *= a;
                let b1 = store.data_mut("geometry_net.mlp.b1");
                b1[0] = a * b1[0] + b;
            }
        }
        self.calibrate_sphere(store, radius, rng);
    }

    /// Short full-tape fit of the sdf output against `‖x‖ − radius` on
    /// seeded sample points (hash table frozen).
    fn calibrate_sphere(&self, store: &mut ParamStore, radius: f64, rng: &mut impl Rng) {
        let steps = 1200;
        let batch = 256;
        let mut opt = AdamW::new(0.0);
        let mut tape = Tape::new();
        for _ in 0..steps {
            tape.clear();
            let mut bound = BoundParams::new();
            let mlp = self.mlp.bind(&mut tape, store, &mut bound);
            let mut sdf_nodes = Vec::with_capacity(batch);
            let mut targets = Vec::with_capacity(batch);
            for k in 0..batch {
                // uniform in the cube plus two tighter buckets: the cone
                // tip near the center is the hardest region to fit
                let scale = match k % 3 {
                    0 => 1.0,
                    1 => 0.35,
                    _ => 0.12,
                };
                let x = [
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                ];
                let input = self.assemble_plain(store, &x);
                let leaf = tape.leaf(&input);
                let out = mlp.forward(&mut tape, leaf).expect("geometry net shape");
                sdf_nodes.push(tape.slice(out, 0, 1));
                targets.push((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - radius);
            }
            let stacked = tape.concat(&sdf_nodes);
            let tnode = tape.leaf(&targets);
            let diff = tape.sub(stacked, tnode);
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            tape.backward(loss);
            let mut grads = GradMap::new();
            bound.accumulate_grads(&tape, &mut grads);
            opt.step(store, &grads, |g| {
                if g == ParamGroup::Geometry {
                    1e-2
                } else {
                    0.0
                }
            });
        }
        // the fit must not touch the hash table
        debug_assert!(store
            .data(Self::HASH_BLOCK)
            .iter()
            .all(|v| v.abs() < 1e-3));
    }
}

pub struct BoundGeometryNet<'n> {
    net: &'n GeometryNet,
    table: Var,
    mlp: BoundMlp,
}

impl BoundGeometryNet<'_> {
    /// Query at a constant point. The SDF gradient is computed through the
    /// tape (hash grid and MLP tangents), not by finite differences.
    pub fn query(&self, tape: &mut Tape, x: &[f64; 3]) -> SdfQuery {
        let (out, dout) = self.forward_with_tangents(tape, x);
        let sdf = tape.slice(out, 0, 1);
        let feature = tape.slice(out, 1, FEATURE_DIM);
        let gparts: Vec<Var> = dout.iter().map(|&d| tape.slice(d, 0, 1)).collect();
        let grad = tape.concat(&gparts);
        SdfQuery { sdf, feature, grad }
    }

    /// Query at a position node (value `x_val`): the output value matches
    /// `query(x_val)` and the position receives first-order gradients via a
    /// linearized correction. Second-order terms (Hessian through the
    /// position) are not propagated.
    pub fn query_at_node(&self, tape: &mut Tape, x_node: Var, x_val: &[f64; 3]) -> SdfQuery {
        let (out, dout) = self.forward_with_tangents(tape, x_val);
        let sdf0 = tape.slice(out, 0, 1);
        let feat0 = tape.slice(out, 1, FEATURE_DIM);
        let gparts: Vec<Var> = dout.iter().map(|&d| tape.slice(d, 0, 1)).collect();
        let grad = tape.concat(&gparts);

        let anchor = tape.leaf(x_val);
        let dx = tape.sub(x_node, anchor); // zero-valued at evaluation
        let sdf_corr = tape.dot(grad, dx);
        let sdf = tape.add(sdf0, sdf_corr);
        let mut feature = feat0;
        for (axis, &d) in dout.iter().enumerate() {
            let fcol = tape.slice(d, 1, FEATURE_DIM);
            let dxa = tape.slice(dx, axis, 1);
            let corr = tape.mul_scalar(fcol, dxa);
            feature = tape.add(feature, corr);
        }
        SdfQuery { sdf, feature, grad }
    }

    fn forward_with_tangents(&self, tape: &mut Tape, x: &[f64; 3]) -> (Var, Vec<Var>) {
        let xc = GeometryNet::clamp_point(x);
        let net = self.net;
        let gamma = net.pos_enc.encode(&xc);
        let gamma_jac = net.pos_enc.jacobian(&xc);
        let gdim = net.pos_enc.output_dim(3);
        let gamma_leaf = tape.leaf(&gamma);
        let enc = net.grid.encode(tape, self.table, &xc);
        let input = tape.concat(&[gamma_leaf, enc]);
        let tangents: Vec<Var> = (0..3)
            .map(|axis| {
                let jcol: Vec<f64> = (0..gdim).map(|r| gamma_jac[r * 3 + axis]).collect();
                let jleaf = tape.leaf(&jcol);
                let enc_g = net.grid.encode_grad_axis(tape, self.table, &xc, axis);
                tape.concat(&[jleaf, enc_g])
            })
            .collect();
        self.mlp
            .forward_with_tangents(tape, input, &tangents)
            .expect("geometry net shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_net() -> (GeometryNet, ParamStore) {
        let grid = HashGrid::new(8, 16, 256, 2, 1 << 13);
        let net = GeometryNet::new(grid);
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        net.alloc_params(&mut store, &mut rng);
        (net, store)
    }

    fn sphere_net() -> (GeometryNet, ParamStore) {
        use std::sync::OnceLock;
        static CACHE: OnceLock<(GeometryNet, ParamStore)> = OnceLock::new();
        CACHE
            .get_or_init(|| {
                let (net, mut store) = small_net();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
                net.geometric_init(&mut store, 0.8, &mut rng);
                (net, store)
            })
            .clone()
    }

    #[test]
    fn sphere_init_center_value() {
        let (net, store) = sphere_net();
        let s0 = net.sdf_plain(&store, &[0.0, 0.0, 0.0]);
        assert!((s0 + 0.8).abs() < 0.05, "sdf(0) = {s0}");
        assert!(s0 < 0.0);
    }

    #[test]
    fn sphere_init_zero_level_near_radius() {
        let (net, store) = sphere_net();
        let s = net.sdf_plain(&store, &[0.0, 0.0, 0.8]);
        assert!(s.abs() < 0.05, "sdf at radius = {s}");
        assert!(net.sdf_plain(&store, &[0.0, 0.0, 0.95]) > 0.0);
    }

    #[test]
    fn sphere_init_mean_error_and_eikonal() {
        use rand::Rng;
        let (net, store) = sphere_net();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let mut abs_err = 0.0;
        let mut eik = 0.0;
        let n = 500;
        for _ in 0..n {
            let x: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let (s, g) = net.sdf_with_grad_plain(&store, &x);
            abs_err += (s - (r - 0.8)).abs();
            let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            eik += (gn - 1.0) * (gn - 1.0);
        }
        abs_err /= n as f64;
        eik /= n as f64;
        assert!(abs_err < 0.1, "mean |sdf − sphere| = {abs_err}");
        assert!(eik < 0.3, "eikonal residual mean = {eik}");
    }

    #[test]
    fn taped_query_matches_plain_and_fd_gradient() {
        use rand::Rng;
        let (net, store) = sphere_net();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let x = [
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            ];
            let mut tape = Tape::new();
            let mut bp = BoundParams::new();
            let b = net.bind(&mut tape, &store, &mut bp);
            let q = b.query(&mut tape, &x);
            let (s_plain, feat) = net.eval_plain(&store, &x).unwrap();
            assert!((tape.scalar(q.sdf) - s_plain).abs() < 1e-12);
            assert_eq!(tape.len(q.feature), FEATURE_DIM);
            for (a, b) in tape.value(q.feature).iter().zip(&feat) {
                assert!((a - b).abs() < 1e-12);
            }
            // ∇sdf vs finite differences
            let h = 1e-5;
            for axis in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[axis] += h;
                xm[axis] -= h;
                let fd = (net.sdf_plain(&store, &xp) - net.sdf_plain(&store, &xm)) / (2.0 * h);
                let g = tape.value(q.grad)[axis];
                assert!(
                    (g - fd).abs() / fd.abs().max(1.0) < 1e-3,
                    "axis {axis}: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn eikonal_loss_gradient_matches_fd() {
        // the tangent-of-weights path: d/dθ of (‖∇s‖−1)² must match FD
        use rand::Rng;
        let (net, store) = sphere_net();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let x = [
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
        ];
        let eik_of = |store: &ParamStore| -> f64 {
            let (_, g) = net.sdf_with_grad_plain(store, &x);
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            (n - 1.0) * (n - 1.0)
        };
        let mut tape = Tape::new();
        let mut bp = BoundParams::new();
        let b = net.bind(&mut tape, &store, &mut bp);
        let q = b.query(&mut tape, &x);
        let norm = tape.l2_norm(q.grad);
        let shifted = tape.add_const(norm, &[-1.0]);
        let loss = tape.square(shifted);
        let loss = tape.sum(loss);
        tape.backward(loss);
        let mut gm = GradMap::new();
        bp.accumulate_grads(&tape, &mut gm);

        let h = 1e-5;
        for name in ["geometry_net.mlp.v0", "geometry_net.mlp.g1", GeometryNet::HASH_BLOCK] {
            let g = gm.get(name).unwrap().to_vec();
            let len = store.data(name).len();
            let stride = (len / 13).max(1);
            for i in (0..len).step_by(stride) {
                let mut s2 = store.clone();
                s2.data_mut(name)[i] += h;
                let fp = eik_of(&s2);
                s2.data_mut(name)[i] -= 2.0 * h;
                let fm = eik_of(&s2);
                let fd = (fp - fm) / (2.0 * h);
                let err = (g[i] - fd).abs() / g[i].abs().max(1.0);
                assert!(err < 1e-4, "{name}[{i}]: analytic {} vs fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn position_node_receives_first_order_gradient() {
        let (net, store) = sphere_net();
        let x = [0.21, -0.34, 0.55];
        let mut tape = Tape::new();
        let mut bp = BoundParams::new();
        let b = net.bind(&mut tape, &store, &mut bp);
        let x_node = tape.leaf(&x);
        let q = b.query_at_node(&mut tape, x_node, &x);
        tape.backward(q.sdf);
        let grad_pos = tape.grad(x_node).to_vec();
        let (_, g) = net.sdf_with_grad_plain(&store, &x);
        for d in 0..3 {
            assert!(
                (grad_pos[d] - g[d]).abs() < 1e-10,
                "axis {d}: {} vs {}",
                grad_pos[d],
                g[d]
            );
        }
    }
}
