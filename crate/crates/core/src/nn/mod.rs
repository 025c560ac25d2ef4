//! The dual-stream network: tensors, autodiff, matched cross-attention, the
//! model, its loss, optimizer and gradient verification.

pub mod attention;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::matched_cross_attention;
pub use gradcheck::{grad_check, GradCheckExample, GradCheckReport};
pub use loss::silog_loss;
pub use model::{
    project_context_patches, project_input_patches, AttentionConfig, DualStreamModel, Features, ModelConfig,
    TokenTensor,
};
pub use optim::{AdamW, AdamWConfig, PlateauScheduler};
pub use params::{Gradients, ParamGroup, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
