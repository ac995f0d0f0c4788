//! Dataset ingestion and generation: the manifest format, the binary
//! embedding-file format, conversation/utterance batching, embedding
//! stores produced by frozen-model extraction, and synthetic datasets
//! with analytically known Bayes accuracies.

mod batch;
mod embfile;
mod manifest;
mod store;
mod synth;

pub use batch::{conversation_batches, utterance_batches, ConversationBatch};
pub use embfile::{read_embedding_file, validate_embedding_header, write_embedding_file};
pub use manifest::{load_manifest, write_manifest, Conversation, Manifest, Split, UtteranceRecord};
pub use store::{EmbeddingStore, StoreMeta};
pub use synth::{
    bayes_modality_marginal, bayes_single_utterance, generate_synthetic, load_dataset_meta,
    BayesSummary, DatasetMeta, Regime, SyntheticSpec,
};
