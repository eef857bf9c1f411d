//! Low-rank adaptation with a frozen projection-down matrix.
//!
//! The crate covers the adapted linear layer and its activation-retention
//! policy, a small GPT-style transformer built from those layers, optimizers,
//! an analytic and measured memory model, numerical checks of the update's
//! equivalence to low-rank gradient compression, and the experiment harness.

pub mod adapters;
pub mod equivalence;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod memory;
pub mod model;
pub mod optim;
pub mod tensor;

pub use adapters::{AdaptationMode, AdaptedLinear, AdapterInit, LayerGrads, LayerParam, RetainedActivations};
pub use error::{Error, Result};
pub use model::{build_model, ModelConfig, ParamId, TokenBatch, TransformerModel};
pub use optim::{Optimizer, OptimizerConfig, ParamStore};
pub use tensor::{Precision, RngState, Tensor};
