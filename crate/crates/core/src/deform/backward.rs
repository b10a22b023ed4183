//! Backward mapping field: an MLP over the spatial condition vector and a
//! time encoding, predicting the displacement that maps a dynamic ray
//! sample back to canonical space.

use rand::Rng;

use crate::autodiff::encoding::PosEnc;
use crate::autodiff::mlp::{Activation, BoundMlp, Mlp};
use crate::autodiff::params::{BoundParams, ParamGroup, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::voxel::condition::condition_dim;
use crate::Result;

#[derive(Debug, Clone)]
pub struct BackwardField {
    pub mlp: Mlp,
    pub time_enc: PosEnc,
    pub cond_dim: usize,
}

impl BackwardField {
    /// Input: condition vector (γ of the query plus neighbor feature means)
    /// ++ γ(t); output: 3-vector displacement.
    pub fn new(spatial_enc: &PosEnc) -> Self {
        let time_enc = PosEnc::new(4, true);
        let cond_dim = condition_dim(spatial_enc);
        let in_dim = cond_dim + time_enc.output_dim(1);
        BackwardField {
            mlp: Mlp::new(
                "bwd_field.mlp",
                &[in_dim, 128, 128, 128, 3],
                Activation::Relu,
                Activation::None,
                false,
            ),
            time_enc,
            cond_dim,
        }
    }

    /// Allocate weights; the zeroed final layer makes the field start as the
    /// identity mapping.
    pub fn alloc_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mlp.alloc_params(store, ParamGroup::Deformation, rng);
        self.mlp.zero_final_layer(store);
    }

    fn assemble_input(&self, eta: &[f64], t: f64) -> Vec<f64> {
        debug_assert_eq!(eta.len(), self.cond_dim);
        let mut input = eta.to_vec();
        input.extend(self.time_enc.encode(&[t]));
        input
    }

    /// Plain displacement query.
    pub fn delta_plain(&self, store: &ParamStore, eta: &[f64], t: f64) -> Result<[f64; 3]> {
        let out = self.mlp.forward_plain(store, &self.assemble_input(eta, t))?;
        Ok([out[0], out[1], out[2]])
    }

    /// Plain backward mapping: `q_c = q_d + Φ(η, t)`.
    pub fn map_plain(
        &self,
        store: &ParamStore,
        q_d: &[f64; 3],
        eta: &[f64],
        t: f64,
    ) -> Result<[f64; 3]> {
        let d = self.delta_plain(store, eta, t)?;
        Ok([q_d[0] + d[0], q_d[1] + d[1], q_d[2] + d[2]])
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &mut BoundParams,
    ) -> BoundBackwardField {
        BoundBackwardField {
            mlp: self.mlp.bind(tape, store, bound),
            field: self.clone(),
        }
    }
}

pub struct BoundBackwardField {
    mlp: BoundMlp,
    field: BackwardField,
}

impl BoundBackwardField {
    /// Taped displacement node for a constant condition vector and time.
    pub fn delta(&self, tape: &mut Tape, eta: &[f64], t: f64) -> Result<Var> {
        let input = self.field.assemble_input(eta, t);
        let leaf = tape.leaf(&input);
        self.mlp.forward(tape, leaf)
    }
}
