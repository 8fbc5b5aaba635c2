//! The attention back-end: residual multi-head self-attention over the stacked
//! enrollment embeddings, multi-head feed-forward attention pooling, and a
//! logistic-calibrated cosine score.

mod attention;
mod params;

pub use attention::{
    aggregate, aggregate_backward, backend_backward, backend_forward, ffsa_backward, ffsa_forward,
    score, score_backward, score_traced, sdsa_backward, sdsa_forward, AggregateTrace,
    BackendGradients, ForwardTrace, PoolHeadTrace, PoolTrace, ScoreTrace, SdsaHeadTrace, SdsaTrace,
};
pub use params::{
    AttentionBackendParams, BackendConfig, INIT_OFFSET, INIT_SCALE, MIN_SCALE, PARAMS_MAGIC,
};
