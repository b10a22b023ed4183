//! Small fully connected networks evaluated on the tape or as plain values.
//!
//! An [`Mlp`] describes the architecture and owns the naming of its weight
//! blocks inside a [`ParamStore`]; the actual numbers live in the store so
//! checkpoints and the optimizer see one flat namespace.

use rand::Rng;

use crate::autodiff::params::{BoundParams, ParamGroup, ParamStore};
use crate::autodiff::tape::{sigmoid, softplus, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Softplus => softplus(v),
        }
    }

    /// Local derivative at a pre-activation value.
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weight_norm: bool,
}

/// Architecture plus the parameter-block prefix. Block names are
/// `{prefix}.w{i}` / `{prefix}.b{i}`, or `{prefix}.v{i}` / `{prefix}.g{i}` /
/// `{prefix}.b{i}` for weight-normalized layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Plain feed-forward stack: `widths = [in, h1, ..., out]`, the given
    /// activation on hidden layers, `out_activation` on the last.
    pub fn new(
        prefix: impl Into<String>,
        widths: &[usize],
        hidden: Activation,
        out_activation: Activation,
        weight_norm: bool,
    ) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0));
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                in_dim: widths[i],
                out_dim: widths[i + 1],
                activation: if i + 1 == n { out_activation } else { hidden },
                weight_norm,
            })
            .collect();
        Mlp {
            prefix: prefix.into(),
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    fn weight_name(&self, i: usize) -> String {
        if self.layers[i].weight_norm {
            format!("{}.v{i}", self.prefix)
        } else {
            format!("{}.w{i}", self.prefix)
        }
    }

    fn gain_name(&self, i: usize) -> String {
        format!("{}.g{i}", self.prefix)
    }

    fn bias_name(&self, i: usize) -> String {
        format!("{}.b{i}", self.prefix)
    }

    /// Allocate this network's blocks with He/Xavier-style init
    /// (`N(0, sqrt(2/in_dim))` weights, zero biases, unit gains).
    pub fn alloc_params(&self, store: &mut ParamStore, group: ParamGroup, rng: &mut impl Rng) {
        for (i, layer) in self.layers.iter().enumerate() {
            let std = (2.0 / layer.in_dim as f64).sqrt();
            let w: Vec<f64> = (0..layer.out_dim * layer.in_dim)
                .map(|_| gauss(rng) * std)
                .collect();
            store.insert(
                self.weight_name(i),
                w,
                vec![layer.out_dim, layer.in_dim],
                group,
                true,
            );
            if layer.weight_norm {
                store.insert(
                    self.gain_name(i),
                    vec![1.0; layer.out_dim],
                    vec![layer.out_dim],
                    group,
                    false,
                );
            }
            store.insert(
                self.bias_name(i),
                vec![0.0; layer.out_dim],
                vec![layer.out_dim],
                group,
                false,
            );
        }
    }

    /// Zero the last layer's weights and bias so the network starts as the
    /// constant-zero function (identity deformation at init).
    pub fn zero_final_layer(&self, store: &mut ParamStore) {
        let i = self.layers.len() - 1;
        store.data_mut(&self.weight_name(i)).fill(0.0);
        store.data_mut(&self.bias_name(i)).fill(0.0);
        if self.layers[i].weight_norm {
            store.data_mut(&self.gain_name(i)).fill(0.0);
        }
    }

    /// Effective weight matrix of layer `i` (materializes weight norm).
    pub fn effective_weights(&self, store: &ParamStore, i: usize) -> Vec<f64> {
        let layer = &self.layers[i];
        let w = store.data(&self.weight_name(i));
        if !layer.weight_norm {
            return w.to_vec();
        }
        let g = store.data(&self.gain_name(i));
        let mut out = vec![0.0; w.len()];
        for r in 0..layer.out_dim {
            let row = &w[r * layer.in_dim..(r + 1) * layer.in_dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let s = g[r] / norm;
            for c in 0..layer.in_dim {
                out[r * layer.in_dim + c] = s * row[c];
            }
        }
        out
    }

    /// Plain (untaped) forward pass.
    pub fn forward_plain(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.effective_weights(store, i);
            let b = store.data(&self.bias_name(i));
            let mut y = vec![0.0; layer.out_dim];
            for r in 0..layer.out_dim {
                let row = &w[r * layer.in_dim..(r + 1) * layer.in_dim];
                let mut acc = b[r];
                for (wv, xv) in row.iter().zip(&x) {
                    acc += wv * xv;
                }
                y[r] = layer.activation.apply(acc);
            }
            x = y;
        }
        Ok(x)
    }

    /// Plain forward pass carrying tangent columns: returns the output and
    /// `d output / d direction_k` for each input tangent.
    pub fn forward_tangents_plain(
        &self,
        store: &ParamStore,
        input: &[f64],
        tangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_input(input.len())?;
        for t in tangents {
            if t.len() != input.len() {
                return Err(Error::shape("mlp tangent", input.len(), t.len()));
            }
        }
        let mut x = input.to_vec();
        let mut dx: Vec<Vec<f64>> = tangents.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.effective_weights(store, i);
            let b = store.data(&self.bias_name(i));
            let mut y = vec![0.0; layer.out_dim];
            let mut dy = vec![vec![0.0; layer.out_dim]; dx.len()];
            for r in 0..layer.out_dim {
                let row = &w[r * layer.in_dim..(r + 1) * layer.in_dim];
                let mut pre = b[r];
                for (wv, xv) in row.iter().zip(&x) {
                    pre += wv * xv;
                }
                let d = layer.activation.derivative(pre);
                y[r] = layer.activation.apply(pre);
                for (k, dxk) in dx.iter().enumerate() {
                    let mut acc = 0.0;
                    for (wv, dv) in row.iter().zip(dxk) {
                        acc += wv * dv;
                    }
                    dy[k][r] = d * acc;
                }
            }
            x = y;
            dx = dy;
        }
        Ok((x, dx))
    }

    /// Bind this network's weights onto a tape. The returned handle is valid
    /// for the lifetime of the tape contents.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, bound: &mut BoundParams) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let b = bound.bind(tape, store, &self.bias_name(i));
                let w = if layer.weight_norm {
                    let v = bound.bind(tape, store, &self.weight_name(i));
                    let g = bound.bind(tape, store, &self.gain_name(i));
                    tape.weight_norm(v, g, layer.out_dim, layer.in_dim)
                } else {
                    bound.bind(tape, store, &self.weight_name(i))
                };
                BoundLayer {
                    w,
                    b,
                    out_dim: layer.out_dim,
                    in_dim: layer.in_dim,
                    activation: layer.activation,
                }
            })
            .collect();
        BoundMlp { layers }
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), got));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayer {
    w: Var,
    b: Var,
    out_dim: usize,
    in_dim: usize,
    activation: Activation,
}

/// Tape-resident network: weight nodes are created once per tape and reused
/// across every query recorded on it.
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
}

impl BoundMlp {
    /// Forward pass on the tape.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let got = tape.len(input);
        if got != self.layers[0].in_dim {
            return Err(Error::shape("mlp input", self.layers[0].in_dim, got));
        }
        let mut x = input;
        for layer in &self.layers {
            let lin = tape.matvec(layer.w, x, layer.out_dim, layer.in_dim);
            let pre = tape.add(lin, layer.b);
            x = match layer.activation {
                Activation::None => pre,
                Activation::Relu => tape.relu(pre),
                Activation::Sigmoid => tape.sigmoid(pre),
                Activation::Softplus => tape.softplus(pre),
            };
        }
        Ok(x)
    }

    /// Forward pass carrying tangent nodes through the network. The chain
    /// rule for the activation is recorded with tape primitives, so the
    /// tangent outputs stay differentiable w.r.t. the weights (this is what
    /// makes eikonal-style losses trainable with one reverse sweep). Only
    /// smooth activations are supported here.
    pub fn forward_with_tangents(
        &self,
        tape: &mut Tape,
        input: Var,
        tangents: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let got = tape.len(input);
        if got != self.layers[0].in_dim {
            return Err(Error::shape("mlp input", self.layers[0].in_dim, got));
        }
        let mut x = input;
        let mut dx: Vec<Var> = tangents.to_vec();
        for layer in &self.layers {
            assert!(
                matches!(
                    layer.activation,
                    Activation::None | Activation::Softplus | Activation::Sigmoid
                ),
                "tangent propagation requires a smooth activation"
            );
            let lin = tape.matvec(layer.w, x, layer.out_dim, layer.in_dim);
            let pre = tape.add(lin, layer.b);
            let dpre: Vec<Var> = dx
                .iter()
                .map(|&t| tape.matvec(layer.w, t, layer.out_dim, layer.in_dim))
                .collect();
            match layer.activation {
                Activation::None => {
                    x = pre;
                    dx = dpre;
                }
                Activation::Softplus => {
                    let s = tape.sigmoid(pre); // softplus' = σ
                    x = tape.softplus(pre);
                    dx = dpre.iter().map(|&t| tape.mul(s, t)).collect();
                }
                Activation::Sigmoid => {
                    let y = tape.sigmoid(pre);
                    let one_minus = tape.neg(y);
                    let one_minus = tape.add_const(one_minus, &[1.0]);
                    let dy = tape.mul(y, one_minus);
                    x = y;
                    dx = dpre.iter().map(|&t| tape.mul(dy, t)).collect();
                }
                Activation::Relu => unreachable!(),
            }
        }
        Ok((x, dx))
    }
}

/// Standard normal via Box-Muller (keeps us off rand_distr for one draw).
pub fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
