//! On-disk embedding stores: the hand-off medium between training stages.
//!
//! A store is a directory holding one embedding file per conversation
//! (`<conversation_id>.emb`, rows in utterance order) plus a `store.toml`
//! describing stage, modality, width and the hash of the checkpoint that
//! produced it. Keeping the hand-off on disk makes each stage
//! independently re-runnable and the frozen-stage contract auditable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::embfile::{read_embedding_file, write_embedding_file};
use crate::data::manifest::Manifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Modality;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreMeta {
    pub schema_version: u32,
    pub stage: u8,
    pub modality: Modality,
    pub d_model: usize,
    /// Hex hash of the checkpoint the embeddings were extracted with.
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub meta: StoreMeta,
    conversations: BTreeMap<String, Tensor<f32>>,
}

impl EmbeddingStore {
    pub fn new(meta: StoreMeta) -> Self {
        EmbeddingStore {
            meta,
            conversations: BTreeMap::new(),
        }
    }

    pub fn insert_conversation(&mut self, conversation_id: &str, embeddings: Tensor<f32>) {
        debug_assert_eq!(embeddings.cols(), self.meta.d_model);
        self.conversations
            .insert(conversation_id.to_string(), embeddings);
    }

    pub fn conversation(&self, conversation_id: &str) -> Result<&Tensor<f32>> {
        self.conversations
            .get(conversation_id)
            .ok_or_else(|| Error::StoreLookup(conversation_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn conversation_ids(&self) -> impl Iterator<Item = &String> {
        self.conversations.keys()
    }

    /// Embedding row for one utterance, located through the manifest.
    pub fn utterance_vector(&self, manifest: &Manifest, utterance_id: &str) -> Result<Vec<f32>> {
        let idx = manifest
            .utterance_index(utterance_id)
            .ok_or_else(|| Error::StoreLookup(utterance_id.to_string()))?;
        let record = &manifest.records[idx];
        let conv = self.conversation(&record.conversation_id)?;
        if record.order_index >= conv.rows() {
            return Err(Error::StoreLookup(utterance_id.to_string()));
        }
        Ok(conv.row(record.order_index).to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_text = toml::to_string_pretty(&self.meta)
            .map_err(|e| Error::Config(format!("store meta serialization: {e}")))?;
        let meta_path = dir.join("store.toml");
        fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;
        for (conv_id, embs) in &self.conversations {
            write_embedding_file(&dir.join(format!("{conv_id}.emb")), embs)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("store.toml");
        if !meta_path.exists() {
            return Err(Error::MissingStore {
                stage: 0,
                modality: "unknown".into(),
                path: dir.into(),
            });
        }
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StoreMeta = toml::from_str(&meta_text)
            .map_err(|e| Error::Config(format!("bad store meta: {e}")))?;
        let mut conversations = BTreeMap::new();
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("emb") {
                let conv_id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Config(format!("bad store file name {path:?}")))?
                    .to_string();
                conversations.insert(conv_id, read_embedding_file(&path)?);
            }
        }
        Ok(EmbeddingStore {
            meta,
            conversations,
        })
    }
}
