//! Few-shot classification of patch-token embeddings.
//!
//! Support and query images are represented by grids of patch tokens.
//! A query is classified by aggregating the temperature-scaled cosine
//! similarities between its tokens and each class's support tokens with a
//! LogSumExp, after adding a learned importance weight to every support
//! token. The weights are fitted at inference time by classifying the
//! support set against itself under masks that prevent self-matching.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod io;
pub mod par;
pub mod pnm;
pub mod reweighting;
pub mod similarity;
pub mod synth;
pub mod token_model;

pub use error::{Error, Result};
pub use par::Execution;
pub use reweighting::{
    build_mask, optimize_importance, support_loss, support_loss_gradient, support_self_logits,
    InnerLoopTrace, Mask, MaskMode, SupportProblem,
};
pub use similarity::{
    apply_reweighting, build_similarity, class_logits, cosine, predict, ClassPrediction,
    ImportanceWeights, SimilarityTensor,
};
pub use token_model::{flatten_support, ClassifierConfig, Episode, GridShape, TokenGrid};
