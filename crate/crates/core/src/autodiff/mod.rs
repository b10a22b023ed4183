//! Reverse-mode automatic differentiation over dense parameter blocks, plus
//! the shared encoders and MLP evaluation used by every trainable field.

pub mod encoding;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;

pub use encoding::{HashGrid, PosEnc};
pub use gradcheck::grad_check;
pub use mlp::{Activation, Mlp};
pub use params::{AdamW, ParamStore};
pub use tape::{CustomOp, Tape, Var};
