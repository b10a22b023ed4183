//! View-dependent color network over the geometric feature, a time
//! encoding, and spherical-harmonics-encoded view directions.

use rand::Rng;

use crate::autodiff::encoding::{sh_encode, PosEnc};
use crate::autodiff::mlp::{Activation, BoundMlp, Mlp};
use crate::autodiff::params::{BoundParams, ParamGroup, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::sdf::FEATURE_DIM;
use crate::Result;

/// View-direction encoding degree.
pub const SH_DEGREE: usize = 4;

#[derive(Debug, Clone)]
pub struct ColorNet {
    pub mlp: Mlp,
    pub time_enc: PosEnc,
}

impl ColorNet {
    /// Two ReLU hidden layers of 128 with a sigmoid RGB output.
    pub fn new() -> Self {
        let time_enc = PosEnc::new(4, true);
        let in_dim = FEATURE_DIM + time_enc.output_dim(1) + (SH_DEGREE + 1) * (SH_DEGREE + 1);
        ColorNet {
            mlp: Mlp::new(
                "color_net.mlp",
                &[in_dim, 128, 128, 3],
                Activation::Relu,
                Activation::Sigmoid,
                false,
            ),
            time_enc,
        }
    }

    pub fn alloc_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mlp.alloc_params(store, ParamGroup::Texture, rng);
    }

    fn tail_input(&self, t: f64, view_dir: &[f64; 3]) -> Result<Vec<f64>> {
        let mut tail = self.time_enc.encode(&[t]);
        tail.extend(sh_encode(view_dir, SH_DEGREE)?);
        Ok(tail)
    }

    /// Plain color query; `view_dir` must be (near) unit.
    pub fn color_plain(
        &self,
        store: &ParamStore,
        feature: &[f64],
        t: f64,
        view_dir: &[f64; 3],
    ) -> Result<[f64; 3]> {
        let mut input = feature.to_vec();
        input.extend(self.tail_input(t, view_dir)?);
        let out = self.mlp.forward_plain(store, &input)?;
        Ok([out[0], out[1], out[2]])
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, bound: &mut BoundParams) -> BoundColorNet {
        BoundColorNet {
            mlp: self.mlp.bind(tape, store, bound),
            net: self.clone(),
        }
    }
}

impl Default for ColorNet {
    fn default() -> Self {
        Self::new()
    }
}

pub struct BoundColorNet {
    mlp: BoundMlp,
    net: ColorNet,
}

impl BoundColorNet {
    /// Taped color query over a feature node; time and view direction enter
    /// as constants.
    pub fn color(&self, tape: &mut Tape, feature: Var, t: f64, view_dir: &[f64; 3]) -> Result<Var> {
        let tail = self.net.tail_input(t, view_dir)?;
        let tail_leaf = tape.leaf(&tail);
        let input = tape.concat(&[feature, tail_leaf]);
        self.mlp.forward(tape, input)
    }
}
