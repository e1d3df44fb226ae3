//! A discretized operator-splitting time stepper whose substeps realize the
//! components of a transformer block: attention as a non-local integral
//! operator, layer normalization as the nearest point in a fixed mean and
//! variance set, feedforward layers as linear substeps projected onto the
//! nonnegative orthant, and the skip connection as a relaxation step.
//!
//! The crate is generic over the scalar type through [`Scalar`] (f32 or f64);
//! all defaults and the command-line tooling use f64.

pub mod adapters;
pub mod attention;
mod conv;
pub mod error;
pub mod feedforward;
pub mod grid;
pub mod projection;
pub mod reference;
mod scalar;
pub mod splitting;
pub mod training;

pub use adapters::{
    conv_token_embed_substep, extract_patches, read_pgm, vit_forward, vit_post, vit_pre,
    ConvTokenEmbedParams, VitParams,
};
pub use attention::{
    attention_substep, conv_attention_substep, conv_qkv, multihead_substep, qkv, scores,
    ConvHeadWeights, MultiHeadWeights, SingleHeadWeights,
};
pub use error::{Error, Result};
pub use feedforward::{ffn_stack, ffn_substep, FfnLayerParams};
pub use grid::{inner_product_y, matmul, softmax2, GridFunction, Kernel};
pub use projection::{oracle_s1, project_s1, project_s2, NormTarget, S1Certificate};
pub use scalar::Scalar;
pub use splitting::{
    block_step, expm, lie_solve, parallel_solve, propagate, propagate_traced, AttentionParams,
    BlockParams, ModelMode, ModelParams, SkipMode, SplitTrace, SubstepLabel, SubstepSolver,
};
pub use training::{fd_gradient, loss, train, Dataset, FlatParams, LossKind, Sample, TrainOptions};

/// f32 instantiations of the core data types.
pub type GridFunction32 = grid::GridFunction<f32>;
pub type Kernel32 = grid::Kernel<f32>;
pub type BlockParams32 = splitting::BlockParams<f32>;
pub type ModelParams32 = splitting::ModelParams<f32>;

/// f64 instantiations, identical to the defaults.
pub type GridFunction64 = grid::GridFunction<f64>;
pub type Kernel64 = grid::Kernel<f64>;
pub type BlockParams64 = splitting::BlockParams<f64>;
pub type ModelParams64 = splitting::ModelParams<f64>;
