//! Embedding sets, trial lists, their file formats, and the synthetic
//! embedding generator.

mod embeddings;
mod synthetic;
mod trials;

pub use embeddings::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingRecord,
    EmbeddingSet, EMBEDDINGS_MAGIC,
};
pub use synthetic::{
    generate_synthetic, speaker_id, split_train_eval, utterance_id, ScaleScope, Split,
    SyntheticData, SyntheticSpec,
};
pub use trials::{format_trials, parse_trials, read_trials, write_trials, Label, Trial, TrialList};
