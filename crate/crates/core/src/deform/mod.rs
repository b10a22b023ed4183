//! Deformation fields: the forward transformation field (canonical →
//! dynamic) driving the Gaussian branch and mesh transfer, and the backward
//! mapping field (dynamic → canonical) used by volume rendering.

pub mod backward;
pub mod forward;

pub use backward::BackwardField;
pub use forward::{apply_deformation, apply_deformation_nodes, DeformedNodes, ForwardField};

/// Residual layout per query: Δμ (3) + Δs (3) + Δr (4).
pub const RESIDUAL_DIM: usize = 10;
/// Scale clamping floor in scene units.
pub const SCALE_FLOOR: f64 = 1e-6;
