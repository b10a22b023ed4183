//! Canonical geometry network (SDF + geometric feature), view-dependent
//! color network, and the trainable surface-sharpness parameter.

pub mod color;
pub mod geometry;

pub use color::ColorNet;
pub use geometry::{GeometryNet, SdfQuery};

use crate::autodiff::params::{BoundParams, ParamGroup, ParamStore};
use crate::autodiff::tape::{Tape, Var};

/// Feature width produced by the geometry network.
pub const FEATURE_DIM: usize = 128;

/// Surface sharpness β, kept positive through an exponential
/// parameterization of a free scalar.
pub struct Sharpness;

impl Sharpness {
    pub const BLOCK: &'static str = "beta.rho";

    /// Allocate ρ with β = 1 / inv_beta_init.
    pub fn alloc(store: &mut ParamStore, inv_beta_init: f64) {
        assert!(inv_beta_init > 0.0);
        store.insert(
            Self::BLOCK,
            vec![(1.0 / inv_beta_init).ln()],
            vec![1],
            ParamGroup::Sharpness,
            false,
        );
    }

    pub fn beta_plain(store: &ParamStore) -> f64 {
        store.data(Self::BLOCK)[0].exp()
    }

    /// β as a tape node (always positive by construction).
    pub fn beta_node(tape: &mut Tape, store: &ParamStore, bound: &mut BoundParams) -> Var {
        let rho = bound.bind(tape, store, Self::BLOCK);
        tape.exp(rho)
    }
}
