//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Nodes are flat `f64` arrays stored in a single arena, so clearing a tape
//! between ray batches keeps its allocations. Ops record their input/output
//! handles during the forward pass and are replayed in reverse to accumulate
//! vector-Jacobian products. Tapes are single-owner: parallelism happens at
//! the batch level with one tape per worker, and gradient maps are reduced by
//! summation afterwards.

use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One `out[out_base..out_base+row_dim] += weight * table[row]` term of a
/// weighted gather (hash-grid corners, voxel latent pooling).
#[derive(Debug, Clone, Copy)]
pub struct GatherEntry {
    pub out_base: u32,
    pub row: u32,
    pub weight: f64,
}

/// Constant sparse matrix in CSR form for linear mesh operators.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
    }

    fn apply_transpose_add(&self, y: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let g = y[r];
            if g == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * g;
            }
        }
    }
}

/// A block whose forward pass is opaque to the tape but which provides a
/// hand-written vector-Jacobian product (software rasterizer, soft
/// silhouette). Output values are computed by the caller before recording.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Accumulate input gradients. `d_inputs` slots are pre-zeroed and sized
    /// like the corresponding inputs.
    fn backward(
        &self,
        inputs: &[&[f64]],
        outputs: &[&[f64]],
        d_outputs: &[&[f64]],
        d_inputs: &mut [Vec<f64>],
    );
}

#[derive(Clone)]
enum Op {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Div { a: Var, b: Var, out: Var },
    Neg { x: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    AddConst { x: Var, out: Var },
    Abs { x: Var, out: Var },
    Square { x: Var, out: Var },
    Sqrt { x: Var, out: Var },
    Exp { x: Var, out: Var },
    Ln { x: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Softplus { x: Var, out: Var },
    Relu { x: Var, out: Var },
    ClampMin { x: Var, floor: f64, out: Var },
    ClampBox { x: Var, lo: f64, hi: f64, out: Var },
    MatVec { w: Var, x: Var, m: usize, n: usize, out: Var },
    MatVecConst { w: Arc<[f64]>, x: Var, m: usize, n: usize, out: Var },
    WeightNorm { v: Var, g: Var, rows: usize, cols: usize, out: Var },
    MulScalar { x: Var, s: Var, out: Var },
    Dot { a: Var, b: Var, out: Var },
    DotConst { x: Var, c: Arc<[f64]>, out: Var },
    Sum { x: Var, out: Var },
    Mean { x: Var, out: Var },
    SumSquares { x: Var, out: Var },
    L2Norm { x: Var, out: Var },
    Concat { parts: Vec<Var>, out: Var },
    Slice { x: Var, offset: usize, out: Var },
    NormalizeGroups { x: Var, group: usize, eps: f64, out: Var },
    Gather { table: Var, entries: Arc<[GatherEntry]>, row_dim: usize, out: Var },
    SpmvConst { mat: Arc<CsrMatrix>, x: Var, out: Var },
    NeusAlpha { s: Var, beta: Var, out: Var },
    CompositeWeights { alpha: Var, out: Var },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<Var>, outputs: Vec<Var> },
}

#[derive(Clone, Copy)]
struct Span {
    offset: usize,
    len: usize,
}

/// Reverse-mode tape over flat `f64` arrays.
pub struct Tape {
    data: Vec<f64>,
    grad: Vec<f64>,
    spans: Vec<Span>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            data: Vec::new(),
            grad: Vec::new(),
            spans: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Drop all nodes and ops but keep allocations.
    pub fn clear(&mut self) {
        self.data.clear();
        self.grad.clear();
        self.spans.clear();
        self.ops.clear();
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    #[inline]
    fn span(&self, v: Var) -> Span {
        self.spans[v.index()]
    }

    /// Value slice of a node.
    #[inline]
    pub fn value(&self, v: Var) -> &[f64] {
        let s = self.span(v);
        &self.data[s.offset..s.offset + s.len]
    }

    /// Scalar value of a length-1 node.
    #[inline]
    pub fn scalar(&self, v: Var) -> f64 {
        let s = self.span(v);
        debug_assert_eq!(s.len, 1);
        self.data[s.offset]
    }

    #[inline]
    pub fn len(&self, v: Var) -> usize {
        self.span(v).len
    }

    /// Gradient slice of a node; valid after [`Tape::backward`].
    #[inline]
    pub fn grad(&self, v: Var) -> &[f64] {
        let s = self.span(v);
        &self.grad[s.offset..s.offset + s.len]
    }

    fn alloc(&mut self, len: usize) -> Var {
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        let id = self.spans.len() as u32;
        self.spans.push(Span { offset, len });
        Var(id)
    }

    /// Leaf node with given values. Gradients accumulate but are not tracked
    /// past the leaf.
    pub fn leaf(&mut self, values: &[f64]) -> Var {
        let v = self.alloc(values.len());
        let s = self.span(v);
        self.data[s.offset..s.offset + s.len].copy_from_slice(values);
        v
    }

    /// Leaf node holding a single scalar.
    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(&[value])
    }

    // ── op builders ──────────────────────────────────────────────────

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(Var, Var) -> Op) -> Var {
        let sx = self.span(x);
        let out = self.alloc(sx.len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let xs = &head[sx.offset..sx.offset + sx.len];
        for (o, &v) in tail[..sx.len].iter_mut().zip(xs) {
            *o = f(v);
        }
        self.ops.push(op(x, out));
        out
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var, Var) -> Op,
    ) -> Var {
        let sa = self.span(a);
        let sb = self.span(b);
        assert_eq!(sa.len, sb.len, "elementwise op on mismatched lengths");
        let out = self.alloc(sa.len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        for i in 0..sa.len {
            tail[i] = f(head[sa.offset + i], head[sb.offset + i]);
        }
        self.ops.push(op(a, b, out));
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |a, b, out| Op::Div { a, b, out })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |x, out| Op::Neg { x, out })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, |x, out| Op::Scale { x, c, out })
    }

    /// out = x + c with a constant offset vector (or broadcast scalar).
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        let sx = self.span(x);
        assert!(c.len() == sx.len || c.len() == 1);
        let out = self.alloc(sx.len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        for i in 0..sx.len {
            tail[i] = head[sx.offset + i] + if c.len() == 1 { c[0] } else { c[i] };
        }
        self.ops.push(Op::AddConst { x, out });
        out
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, out| Op::Abs { x, out })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, out| Op::Square { x, out })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |x, out| Op::Sqrt { x, out })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |x, out| Op::Exp { x, out })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, out| Op::Ln { x, out })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |x, out| Op::Sigmoid { x, out })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, out| Op::Softplus { x, out })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, out| Op::Relu { x, out })
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), |x, out| Op::ClampMin { x, floor, out })
    }

    pub fn clamp_box(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            |v| v.clamp(lo, hi),
            |x, out| Op::ClampBox { x, lo, hi, out },
        )
    }

    /// out = W x with W an m×n row-major node.
    pub fn matvec(&mut self, w: Var, x: Var, m: usize, n: usize) -> Var {
        let sw = self.span(w);
        let sx = self.span(x);
        assert_eq!(sw.len, m * n, "matvec weight size");
        assert_eq!(sx.len, n, "matvec input size");
        let out = self.alloc(m);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let ws = &head[sw.offset..sw.offset + sw.len];
        let xs = &head[sx.offset..sx.offset + sx.len];
        for i in 0..m {
            let row = &ws[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(xs.iter()) {
                acc += wv * xv;
            }
            tail[i] = acc;
        }
        self.ops.push(Op::MatVec { w, x, m, n, out });
        out
    }

    /// out = W x with a constant matrix (linearized corrections).
    pub fn matvec_const(&mut self, w: Arc<[f64]>, x: Var, m: usize, n: usize) -> Var {
        let sx = self.span(x);
        assert_eq!(w.len(), m * n);
        assert_eq!(sx.len, n);
        let out = self.alloc(m);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let xs = &head[sx.offset..sx.offset + sx.len];
        for i in 0..m {
            let row = &w[i * n..(i + 1) * n];
            tail[i] = row.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
        }
        self.ops.push(Op::MatVecConst { w, x, m, n, out });
        out
    }

    /// Row-wise weight normalization: out[i,:] = g[i] * v[i,:] / ||v[i,:]||.
    pub fn weight_norm(&mut self, v: Var, g: Var, rows: usize, cols: usize) -> Var {
        let sv = self.span(v);
        let sg = self.span(g);
        assert_eq!(sv.len, rows * cols);
        assert_eq!(sg.len, rows);
        let out = self.alloc(rows * cols);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let vs = &head[sv.offset..sv.offset + sv.len];
        let gs = &head[sg.offset..sg.offset + sg.len];
        for r in 0..rows {
            let row = &vs[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let s = gs[r] / norm;
            for c in 0..cols {
                tail[r * cols + c] = s * row[c];
            }
        }
        self.ops.push(Op::WeightNorm { v, g, rows, cols, out });
        out
    }

    /// out = x * s with a length-1 scalar node broadcast over x.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sx = self.span(x);
        let ss = self.span(s);
        assert_eq!(ss.len, 1, "mul_scalar takes a scalar node");
        let out = self.alloc(sx.len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let sv = head[ss.offset];
        for i in 0..sx.len {
            tail[i] = head[sx.offset + i] * sv;
        }
        self.ops.push(Op::MulScalar { x, s, out });
        out
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let sa = self.span(a);
        let sb = self.span(b);
        assert_eq!(sa.len, sb.len);
        let out = self.alloc(1);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[0] = (0..sa.len)
            .map(|i| head[sa.offset + i] * head[sb.offset + i])
            .sum();
        self.ops.push(Op::Dot { a, b, out });
        out
    }

    pub fn dot_const(&mut self, x: Var, c: Arc<[f64]>) -> Var {
        let sx = self.span(x);
        assert_eq!(sx.len, c.len());
        let out = self.alloc(1);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[0] = (0..sx.len).map(|i| head[sx.offset + i] * c[i]).sum();
        self.ops.push(Op::DotConst { x, c, out });
        out
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let sx = self.span(x);
        let out = self.alloc(1);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[0] = head[sx.offset..sx.offset + sx.len].iter().sum();
        self.ops.push(Op::Sum { x, out });
        out
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let sx = self.span(x);
        assert!(sx.len > 0);
        let out = self.alloc(1);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[0] = head[sx.offset..sx.offset + sx.len].iter().sum::<f64>() / sx.len as f64;
        self.ops.push(Op::Mean { x, out });
        out
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let sx = self.span(x);
        let out = self.alloc(1);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[0] = head[sx.offset..sx.offset + sx.len]
            .iter()
            .map(|v| v * v)
            .sum();
        self.ops.push(Op::SumSquares { x, out });
        out
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let sx = self.span(x);
        let out = self.alloc(1);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[0] = head[sx.offset..sx.offset + sx.len]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.ops.push(Op::L2Norm { x, out });
        out
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let total: usize = parts.iter().map(|&p| self.span(p).len).sum();
        let out = self.alloc(total);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let mut at = 0;
        for &p in parts {
            let sp = self.spans[p.index()];
            tail[at..at + sp.len].copy_from_slice(&head[sp.offset..sp.offset + sp.len]);
            at += sp.len;
        }
        self.ops.push(Op::Concat {
            parts: parts.to_vec(),
            out,
        });
        out
    }

    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Var {
        let sx = self.span(x);
        assert!(offset + len <= sx.len, "slice out of range");
        let out = self.alloc(len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        tail[..len].copy_from_slice(&head[sx.offset + offset..sx.offset + offset + len]);
        self.ops.push(Op::Slice { x, offset, out });
        out
    }

    /// Normalize each consecutive `group`-length block to unit norm. Blocks
    /// with norm below `eps` pass through unchanged.
    pub fn normalize_groups(&mut self, x: Var, group: usize, eps: f64) -> Var {
        let sx = self.span(x);
        assert_eq!(sx.len % group, 0);
        let out = self.alloc(sx.len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let xs = &head[sx.offset..sx.offset + sx.len];
        for gi in 0..sx.len / group {
            let blk = &xs[gi * group..(gi + 1) * group];
            let n = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < eps {
                tail[gi * group..(gi + 1) * group].copy_from_slice(blk);
            } else {
                for c in 0..group {
                    tail[gi * group + c] = blk[c] / n;
                }
            }
        }
        self.ops
            .push(Op::NormalizeGroups { x, group, eps, out });
        out
    }

    /// Weighted gather from a table node: each entry accumulates
    /// `weight * table[row]` into `out[out_base..out_base+row_dim]`.
    pub fn gather_weighted(
        &mut self,
        table: Var,
        entries: Arc<[GatherEntry]>,
        row_dim: usize,
        out_len: usize,
    ) -> Var {
        let st = self.span(table);
        let out = self.alloc(out_len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let tbl = &head[st.offset..st.offset + st.len];
        for e in entries.iter() {
            let src = e.row as usize * row_dim;
            let dst = e.out_base as usize;
            debug_assert!(src + row_dim <= tbl.len());
            debug_assert!(dst + row_dim <= out_len);
            for c in 0..row_dim {
                tail[dst + c] += e.weight * tbl[src + c];
            }
        }
        self.ops.push(Op::Gather {
            table,
            entries,
            row_dim,
            out,
        });
        out
    }

    /// out = A x with a constant sparse matrix.
    pub fn spmv_const(&mut self, mat: Arc<CsrMatrix>, x: Var) -> Var {
        let sx = self.span(x);
        assert_eq!(sx.len, mat.cols);
        let out = self.alloc(mat.rows);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        mat.apply(&head[sx.offset..sx.offset + sx.len], &mut tail[..mat.rows]);
        self.ops.push(Op::SpmvConst { mat, x, out });
        out
    }

    /// SDF-to-alpha conversion along a ray: for consecutive SDF samples
    /// `s_i, s_{i+1}` and sharpness `beta` (scalar node),
    /// `alpha_i = max((sig(beta*s_i) - sig(beta*s_{i+1})) / sig(beta*s_i), 0)`
    /// with the increasing logistic `sig`. Alphas are clamped to
    /// `[0, 1 - 1e-7]` and an underflowing denominator yields 0.
    pub fn neus_alpha(&mut self, s: Var, beta: Var) -> Var {
        let ss = self.span(s);
        assert!(ss.len >= 2, "need at least two SDF samples");
        let n = ss.len - 1;
        let b = self.scalar(beta);
        let out = self.alloc(n);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let sv = &head[ss.offset..ss.offset + ss.len];
        for i in 0..n {
            tail[i] = neus_alpha_value(sv[i], sv[i + 1], b);
        }
        self.ops.push(Op::NeusAlpha { s, beta, out });
        out
    }

    /// Compositing weights from alphas: `w_i = T_i * alpha_i` with
    /// `T_i = prod_{j<i} (1 - alpha_j)`.
    pub fn composite_weights(&mut self, alpha: Var) -> Var {
        let sa = self.span(alpha);
        let out = self.alloc(sa.len);
        let so = self.span(out);
        let (head, tail) = self.data.split_at_mut(so.offset);
        let av = &head[sa.offset..sa.offset + sa.len];
        let mut t = 1.0;
        for i in 0..sa.len {
            tail[i] = t * av[i];
            t *= 1.0 - av[i];
        }
        self.ops.push(Op::CompositeWeights { alpha, out });
        out
    }

    /// Record an opaque block. `outputs` values are supplied by the caller.
    pub fn custom(
        &mut self,
        op: Arc<dyn CustomOp>,
        inputs: &[Var],
        output_values: &[&[f64]],
    ) -> Vec<Var> {
        let outputs: Vec<Var> = output_values.iter().map(|v| self.leaf(v)).collect();
        self.ops.push(Op::Custom {
            op,
            inputs: inputs.to_vec(),
            outputs: outputs.clone(),
        });
        outputs
    }

    // ── backward pass ────────────────────────────────────────────────

    /// Reverse sweep seeding `d loss = 1` for a scalar loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.len(loss), 1, "backward seeds a scalar loss");
        self.backward_seeded(&[(loss, 1.0)]);
    }

    /// Reverse sweep with several scalar seeds (weighted loss terms).
    pub fn backward_seeded(&mut self, seeds: &[(Var, f64)]) {
        self.grad.clear();
        self.grad.resize(self.data.len(), 0.0);
        for &(v, s) in seeds {
            let sp = self.span(v);
            assert_eq!(sp.len, 1);
            self.grad[sp.offset] += s;
        }
        for oi in (0..self.ops.len()).rev() {
            let op = self.ops[oi].clone();
            self.backward_op(&op);
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Add { a, b, out } => {
                let (sa, sb, so) = (self.span(*a), self.span(*b), self.span(*out));
                for i in 0..so.len {
                    let g = self.grad[so.offset + i];
                    self.grad[sa.offset + i] += g;
                    self.grad[sb.offset + i] += g;
                }
            }
            Op::Sub { a, b, out } => {
                let (sa, sb, so) = (self.span(*a), self.span(*b), self.span(*out));
                for i in 0..so.len {
                    let g = self.grad[so.offset + i];
                    self.grad[sa.offset + i] += g;
                    self.grad[sb.offset + i] -= g;
                }
            }
            Op::Mul { a, b, out } => {
                let (sa, sb, so) = (self.span(*a), self.span(*b), self.span(*out));
                for i in 0..so.len {
                    let g = self.grad[so.offset + i];
                    let av = self.data[sa.offset + i];
                    let bv = self.data[sb.offset + i];
                    self.grad[sa.offset + i] += g * bv;
                    self.grad[sb.offset + i] += g * av;
                }
            }
            Op::Div { a, b, out } => {
                let (sa, sb, so) = (self.span(*a), self.span(*b), self.span(*out));
                for i in 0..so.len {
                    let g = self.grad[so.offset + i];
                    let bv = self.data[sb.offset + i];
                    let ov = self.data[so.offset + i];
                    self.grad[sa.offset + i] += g / bv;
                    self.grad[sb.offset + i] -= g * ov / bv;
                }
            }
            Op::Neg { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] -= self.grad[so.offset + i];
                }
            }
            Op::Scale { x, c, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] += c * self.grad[so.offset + i];
                }
            }
            Op::AddConst { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] += self.grad[so.offset + i];
                }
            }
            Op::Abs { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    let xv = self.data[sx.offset + i];
                    let s = if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    self.grad[sx.offset + i] += s * self.grad[so.offset + i];
                }
            }
            Op::Square { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] +=
                        2.0 * self.data[sx.offset + i] * self.grad[so.offset + i];
                }
            }
            Op::Sqrt { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    let ov = self.data[so.offset + i];
                    if ov > 1e-12 {
                        self.grad[sx.offset + i] += 0.5 / ov * self.grad[so.offset + i];
                    }
                }
            }
            Op::Exp { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] +=
                        self.data[so.offset + i] * self.grad[so.offset + i];
                }
            }
            Op::Ln { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] +=
                        self.grad[so.offset + i] / self.data[sx.offset + i];
                }
            }
            Op::Sigmoid { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    let ov = self.data[so.offset + i];
                    self.grad[sx.offset + i] += ov * (1.0 - ov) * self.grad[so.offset + i];
                }
            }
            Op::Softplus { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + i] +=
                        sigmoid(self.data[sx.offset + i]) * self.grad[so.offset + i];
                }
            }
            Op::Relu { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    if self.data[sx.offset + i] > 0.0 {
                        self.grad[sx.offset + i] += self.grad[so.offset + i];
                    }
                }
            }
            Op::ClampMin { x, floor, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    if self.data[sx.offset + i] > *floor {
                        self.grad[sx.offset + i] += self.grad[so.offset + i];
                    }
                }
            }
            Op::ClampBox { x, lo, hi, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    let xv = self.data[sx.offset + i];
                    if xv > *lo && xv < *hi {
                        self.grad[sx.offset + i] += self.grad[so.offset + i];
                    }
                }
            }
            Op::MatVec { w, x, m, n, out } => {
                let (sw, sx, so) = (self.span(*w), self.span(*x), self.span(*out));
                for i in 0..*m {
                    let g = self.grad[so.offset + i];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..*n {
                        self.grad[sw.offset + i * n + j] += g * self.data[sx.offset + j];
                        self.grad[sx.offset + j] += g * self.data[sw.offset + i * n + j];
                    }
                }
            }
            Op::MatVecConst { w, x, m, n, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..*m {
                    let g = self.grad[so.offset + i];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..*n {
                        self.grad[sx.offset + j] += g * w[i * n + j];
                    }
                }
            }
            Op::WeightNorm { v, g, rows, cols, out } => {
                let (sv, sg, so) = (self.span(*v), self.span(*g), self.span(*out));
                for r in 0..*rows {
                    let row = &self.data[sv.offset + r * cols..sv.offset + (r + 1) * cols];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let gv = self.data[sg.offset + r];
                    // d_g[r] = sum_j dW[r,j] v[r,j] / n
                    // d_v[r,k] = g/n * (dW[r,k] - (sum_j dW[r,j] v[r,j]) v[r,k] / n^2)
                    let mut dot = 0.0;
                    for j in 0..*cols {
                        dot += self.grad[so.offset + r * cols + j]
                            * self.data[sv.offset + r * cols + j];
                    }
                    self.grad[sg.offset + r] += dot / norm;
                    let inv_n = 1.0 / norm;
                    let corr = dot * inv_n * inv_n;
                    for k in 0..*cols {
                        let dw = self.grad[so.offset + r * cols + k];
                        let vk = self.data[sv.offset + r * cols + k];
                        self.grad[sv.offset + r * cols + k] += gv * inv_n * (dw - corr * vk);
                    }
                }
            }
            Op::MulScalar { x, s, out } => {
                let (sx, ss, so) = (self.span(*x), self.span(*s), self.span(*out));
                let sv = self.data[ss.offset];
                let mut gs = 0.0;
                for i in 0..so.len {
                    let g = self.grad[so.offset + i];
                    self.grad[sx.offset + i] += g * sv;
                    gs += g * self.data[sx.offset + i];
                }
                self.grad[ss.offset] += gs;
            }
            Op::Dot { a, b, out } => {
                let (sa, sb, so) = (self.span(*a), self.span(*b), self.span(*out));
                let g = self.grad[so.offset];
                if g != 0.0 {
                    for i in 0..sa.len {
                        self.grad[sa.offset + i] += g * self.data[sb.offset + i];
                        self.grad[sb.offset + i] += g * self.data[sa.offset + i];
                    }
                }
            }
            Op::DotConst { x, c, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                let g = self.grad[so.offset];
                if g != 0.0 {
                    for i in 0..sx.len {
                        self.grad[sx.offset + i] += g * c[i];
                    }
                }
            }
            Op::Sum { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                let g = self.grad[so.offset];
                for i in 0..sx.len {
                    self.grad[sx.offset + i] += g;
                }
            }
            Op::Mean { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                let g = self.grad[so.offset] / sx.len as f64;
                for i in 0..sx.len {
                    self.grad[sx.offset + i] += g;
                }
            }
            Op::SumSquares { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                let g = self.grad[so.offset];
                for i in 0..sx.len {
                    self.grad[sx.offset + i] += 2.0 * g * self.data[sx.offset + i];
                }
            }
            Op::L2Norm { x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                let g = self.grad[so.offset];
                let norm = self.data[so.offset];
                if norm > 1e-12 && g != 0.0 {
                    for i in 0..sx.len {
                        self.grad[sx.offset + i] += g * self.data[sx.offset + i] / norm;
                    }
                }
            }
            Op::Concat { parts, out } => {
                let so = self.span(*out);
                let mut at = 0;
                for &p in parts {
                    let sp = self.span(p);
                    for i in 0..sp.len {
                        self.grad[sp.offset + i] += self.grad[so.offset + at + i];
                    }
                    at += sp.len;
                }
            }
            Op::Slice { x, offset, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for i in 0..so.len {
                    self.grad[sx.offset + offset + i] += self.grad[so.offset + i];
                }
            }
            Op::NormalizeGroups { x, group, eps, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                for gi in 0..sx.len / group {
                    let base = gi * group;
                    let blk = &self.data[sx.offset + base..sx.offset + base + group];
                    let n = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < *eps {
                        for c in 0..*group {
                            self.grad[sx.offset + base + c] += self.grad[so.offset + base + c];
                        }
                    } else {
                        let mut dot = 0.0;
                        for c in 0..*group {
                            dot += self.grad[so.offset + base + c]
                                * self.data[so.offset + base + c];
                        }
                        for c in 0..*group {
                            let gy = self.grad[so.offset + base + c];
                            let y = self.data[so.offset + base + c];
                            self.grad[sx.offset + base + c] += (gy - y * dot) / n;
                        }
                    }
                }
            }
            Op::Gather { table, entries, row_dim, out } => {
                let (st, so) = (self.span(*table), self.span(*out));
                for e in entries.iter() {
                    let src = st.offset + e.row as usize * row_dim;
                    let dst = so.offset + e.out_base as usize;
                    for c in 0..*row_dim {
                        self.grad[src + c] += e.weight * self.grad[dst + c];
                    }
                }
            }
            Op::SpmvConst { mat, x, out } => {
                let (sx, so) = (self.span(*x), self.span(*out));
                let go: Vec<f64> = self.grad[so.offset..so.offset + so.len].to_vec();
                let mut gx = vec![0.0; sx.len];
                mat.apply_transpose_add(&go, &mut gx);
                for i in 0..sx.len {
                    self.grad[sx.offset + i] += gx[i];
                }
            }
            Op::NeusAlpha { s, beta, out } => {
                let (ss, sb, so) = (self.span(*s), self.span(*beta), self.span(*out));
                let b = self.data[sb.offset];
                for i in 0..so.len {
                    let g = self.grad[so.offset + i];
                    if g == 0.0 {
                        continue;
                    }
                    let si = self.data[ss.offset + i];
                    let si1 = self.data[ss.offset + i + 1];
                    let gi = sigmoid(b * si);
                    let gi1 = sigmoid(b * si1);
                    if gi <= ALPHA_DENOM_TINY {
                        continue;
                    }
                    let raw = (gi - gi1) / gi;
                    if raw <= 0.0 || raw >= ALPHA_MAX {
                        continue;
                    }
                    let ratio = gi1 / gi;
                    self.grad[ss.offset + i] += g * b * ratio * (1.0 - gi);
                    self.grad[ss.offset + i + 1] -= g * b * gi1 * (1.0 - gi1) / gi;
                    self.grad[sb.offset] +=
                        g * ratio * (si * (1.0 - gi) - si1 * (1.0 - gi1));
                }
            }
            Op::CompositeWeights { alpha, out } => {
                let (sa, so) = (self.span(*alpha), self.span(*out));
                // suffix sum of go_k * w_k, walked back to front
                let mut suffix = 0.0;
                let mut t_after: Vec<f64> = Vec::with_capacity(sa.len);
                let mut t = 1.0;
                for i in 0..sa.len {
                    t_after.push(t);
                    t *= 1.0 - self.data[sa.offset + i];
                }
                for i in (0..sa.len).rev() {
                    let a = self.data[sa.offset + i];
                    let w = self.data[so.offset + i];
                    let go = self.grad[so.offset + i];
                    self.grad[sa.offset + i] += go * t_after[i] - suffix / (1.0 - a);
                    suffix += go * w;
                }
            }
            Op::Custom { op, inputs, outputs } => {
                let in_vals: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let out_vals: Vec<&[f64]> = outputs.iter().map(|&v| self.value(v)).collect();
                let d_out: Vec<&[f64]> = outputs
                    .iter()
                    .map(|&v| {
                        let s = self.spans[v.index()];
                        // SAFETY-free: plain reborrow from grad vec
                        &self.grad[s.offset..s.offset + s.len]
                    })
                    .collect();
                let mut d_in: Vec<Vec<f64>> =
                    inputs.iter().map(|&v| vec![0.0; self.len(v)]).collect();
                op.backward(&in_vals, &out_vals, &d_out, &mut d_in);
                drop(in_vals);
                drop(out_vals);
                drop(d_out);
                for (k, &v) in inputs.iter().enumerate() {
                    let s = self.span(v);
                    for i in 0..s.len {
                        self.grad[s.offset + i] += d_in[k][i];
                    }
                }
            }
        }
    }
}

const ALPHA_DENOM_TINY: f64 = 1e-300;
const ALPHA_MAX: f64 = 1.0 - 1e-7;

/// Plain-value SDF-to-alpha conversion, shared with the non-taped path.
#[inline]
pub fn neus_alpha_value(s_i: f64, s_next: f64, beta: f64) -> f64 {
    let gi = sigmoid(beta * s_i);
    if gi <= ALPHA_DENOM_TINY {
        return 0.0;
    }
    let gi1 = sigmoid(beta * s_next);
    ((gi - gi1) / gi).clamp(0.0, ALPHA_MAX)
}
