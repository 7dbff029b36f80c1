//! Dense matrix math with reverse-mode differentiation, restricted to the
//! operations the scoring head and the projection finetuning need, plus Adam.

mod adam;
mod attention;
mod matrix;
mod tape;

pub use adam::{adam_step, AdamState};
pub use attention::{multi_head_attention, AttentionParams, AttentionVars};
pub(crate) use attention::{gaussian, xavier};
pub use matrix::{dot, Matrix, Scalar};
pub use tape::{Gradients, Graph, ScalarLoss, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
