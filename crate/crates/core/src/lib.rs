//! Contextual-sparsity inference for decoder-only transformers.
//!
//! A dense reference model, fused sparse kernels, learned per-layer sparsity
//! predictors, a lookahead execution pipeline, and executable checks for the
//! supporting nearest-neighbor, sketching and depth-rewiring mathematics.

pub mod depth;
pub mod error;
pub mod format;
pub mod lookahead;
pub mod model;
pub mod nns;
pub mod oracle;
pub mod predictor;
pub mod sketch;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
