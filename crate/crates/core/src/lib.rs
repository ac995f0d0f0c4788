//! Hierarchical multi-modal conversational emotion classification.
//!
//! The crate trains a three-stage model over precomputed per-frame audio
//! embeddings and per-token text embeddings:
//!
//! 1. context-free utterance encoders per modality (1-D CNN for audio,
//!    bi-GRU for text),
//! 2. a contextual bi-GRU with self-attention over each conversation,
//! 3. co-attention fusion of the two modalities,
//!
//! each stage frozen before the next trains on its embeddings. Training
//! uses a convex combination of cross-entropy and a supervised contrastive
//! loss; inference ensembles the stages' softmax outputs with weights
//! picked on validation data.
//!
//! Everything is built on a small reverse-mode autodiff engine ([`graph`])
//! verified by finite differences ([`gradcheck`]).

pub mod attention;
pub mod checkpoint;
pub mod context;
pub mod data;
pub mod encoders;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod init;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod ops;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

/// Which input stream a model consumes; `Fused` marks the multi-modal
/// stage-3 model in checkpoints and prediction stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Fused,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "audio" => Some(Modality::Audio),
            "text" => Some(Modality::Text),
            "fused" => Some(Modality::Fused),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
