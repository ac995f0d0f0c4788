//! Line-delimited manifest format.
//!
//! One utterance per line, seven tab-separated fields in this order:
//!
//! ```text
//! conversation_id  utterance_id  order_index  split  label  audio_path  text_path
//! ```
//!
//! `split` is `train`, `val` or `test`; paths are relative to the manifest
//! file's directory. Validation is eager and total: order indices within a
//! conversation must be exactly `0..len` with no gaps or duplicates, every
//! utterance of a conversation must share its split, labels must be below
//! the class count, and every referenced embedding file must exist with a
//! parseable header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::embfile::validate_embedding_header;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct UtteranceRecord {
    pub conversation_id: String,
    pub utterance_id: String,
    pub order_index: usize,
    pub split: Split,
    pub label: usize,
    /// Resolved (manifest-relative) path to the audio frame embeddings.
    pub audio_path: PathBuf,
    /// Resolved path to the text token embeddings.
    pub text_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Conversation {
    pub id: String,
    pub split: Split,
    /// Indices into `Manifest::records`, sorted by `order_index`.
    pub utterances: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    /// Conversations in order of first appearance.
    pub conversations: Vec<Conversation>,
    pub num_classes: usize,
    by_utterance_id: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn utterance_index(&self, utterance_id: &str) -> Option<usize> {
        self.by_utterance_id.get(utterance_id).copied()
    }

    pub fn conversations_in_split(&self, split: Split) -> Vec<usize> {
        self.conversations
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn utterances_in_split(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::new();
    let mut by_utterance_id = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::ManifestParse {
                line: line_no + 1,
                detail: format!("expected 7 tab-separated fields, got {}", fields.len()),
            });
        }
        let order_index: usize = fields[2].parse().map_err(|_| Error::ManifestParse {
            line: line_no + 1,
            detail: format!("bad order_index `{}`", fields[2]),
        })?;
        let split = Split::parse(fields[3]).ok_or_else(|| Error::ManifestParse {
            line: line_no + 1,
            detail: format!("bad split `{}`", fields[3]),
        })?;
        let label: usize = fields[4].parse().map_err(|_| Error::ManifestParse {
            line: line_no + 1,
            detail: format!("bad label `{}`", fields[4]),
        })?;
        if label >= num_classes {
            return Err(Error::LabelRange {
                label,
                num_classes,
                context: format!("manifest line {}", line_no + 1),
            });
        }
        let record = UtteranceRecord {
            conversation_id: fields[0].to_string(),
            utterance_id: fields[1].to_string(),
            order_index,
            split,
            label,
            audio_path: base.join(fields[5]),
            text_path: base.join(fields[6]),
        };
        if by_utterance_id
            .insert(record.utterance_id.clone(), records.len())
            .is_some()
        {
            return Err(Error::DuplicateUtterance(record.utterance_id));
        }
        records.push(record);
    }

    // Group into conversations preserving first-appearance order.
    let mut conv_order: Vec<String> = Vec::new();
    let mut conv_members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let entry = conv_members.entry(r.conversation_id.clone()).or_default();
        if entry.is_empty() {
            conv_order.push(r.conversation_id.clone());
        }
        entry.push(i);
    }

    let mut conversations = Vec::with_capacity(conv_order.len());
    for id in conv_order {
        let mut members = conv_members.remove(&id).expect("collected above");
        members.sort_by_key(|&i| records[i].order_index);
        for (expected, &i) in members.iter().enumerate() {
            let got = records[i].order_index;
            if got != expected {
                // sorted ascending: seeing less than expected means a repeat
                let detail = if got < expected {
                    format!("duplicate order_index {got}")
                } else {
                    format!("gap before order_index {got} (expected {expected})")
                };
                return Err(Error::ConversationOrder {
                    conversation: id,
                    detail,
                });
            }
        }
        let split = records[members[0]].split;
        if members.iter().any(|&i| records[i].split != split) {
            return Err(Error::Contract(format!(
                "conversation `{id}` mixes splits; a conversation must live in one split"
            )));
        }
        conversations.push(Conversation {
            id,
            split,
            utterances: members,
        });
    }

    // Referenced files must exist and carry a valid header.
    for r in &records {
        for path in [&r.audio_path, &r.text_path] {
            if !path.exists() {
                return Err(Error::MissingEmbeddingFile {
                    utterance: r.utterance_id.clone(),
                    path: path.clone(),
                });
            }
            validate_embedding_header(path)?;
        }
    }

    Ok(Manifest {
        records,
        conversations,
        num_classes,
        by_utterance_id,
    })
}

/// Serialize records in the normative field order. Paths are written as
/// given (callers pass manifest-relative paths).
pub fn write_manifest(
    path: &Path,
    rows: &[(String, String, usize, Split, usize, String, String)],
) -> Result<()> {
    let mut out = String::new();
    for (conv, utt, order, split, label, audio, text) in rows {
        out.push_str(&format!(
            "{conv}\t{utt}\t{order}\t{split}\t{label}\t{audio}\t{text}\n"
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::embfile::write_embedding_file;
    use crate::tensor::Tensor;

    fn write_fixture(
        dir: &Path,
        rows: &[(&str, &str, usize, &str, usize)],
    ) -> PathBuf {
        let mut lines = String::new();
        for (conv, utt, order, split, label) in rows {
            let audio = format!("{utt}_a.emb");
            let text = format!("{utt}_t.emb");
            write_embedding_file(&dir.join(&audio), &Tensor::from_raw(2, 3, vec![0.1; 6]))
                .unwrap();
            write_embedding_file(&dir.join(&text), &Tensor::from_raw(2, 2, vec![0.2; 4]))
                .unwrap();
            lines.push_str(&format!(
                "{conv}\t{utt}\t{order}\t{split}\t{label}\t{audio}\t{text}\n"
            ));
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, lines).unwrap();
        path
    }

    #[test]
    fn well_formed_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            &[
                ("c0", "c0_u0", 0, "train", 0),
                ("c0", "c0_u1", 1, "train", 1),
                ("c1", "c1_u0", 0, "val", 2),
            ],
        );
        let m = load_manifest(&path, 3).unwrap();
        assert_eq!(m.conversations.len(), 2);
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.conversations[0].utterances, vec![0, 1]);
        assert_eq!(m.utterance_index("c1_u0"), Some(2));
        assert_eq!(m.conversations_in_split(Split::Val), vec![1]);
    }

    #[test]
    fn order_gap_names_the_conversation() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            &[("c0", "c0_u0", 0, "train", 0), ("c0", "c0_u2", 2, "train", 0)],
        );
        match load_manifest(&path, 3) {
            Err(Error::ConversationOrder { conversation, .. }) => assert_eq!(conversation, "c0"),
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_order_index_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            &[("c0", "c0_u0", 0, "train", 0), ("c0", "c0_u1", 0, "train", 0)],
        );
        assert!(matches!(
            load_manifest(&path, 3),
            Err(Error::ConversationOrder { .. })
        ));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &[("c0", "c0_u0", 0, "train", 3)]);
        assert!(matches!(
            load_manifest(&path, 3),
            Err(Error::LabelRange { label: 3, .. })
        ));
    }

    #[test]
    fn duplicate_utterance_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            &[("c0", "dup", 0, "train", 0), ("c1", "dup", 0, "train", 0)],
        );
        assert!(matches!(
            load_manifest(&path, 3),
            Err(Error::DuplicateUtterance(id)) if id == "dup"
        ));
    }

    #[test]
    fn missing_embedding_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &[("c0", "c0_u0", 0, "train", 0)]);
        fs::remove_file(dir.path().join("c0_u0_a.emb")).unwrap();
        assert!(matches!(
            load_manifest(&path, 3),
            Err(Error::MissingEmbeddingFile { .. })
        ));
    }

    #[test]
    fn mixed_split_conversation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            &[("c0", "c0_u0", 0, "train", 0), ("c0", "c0_u1", 1, "val", 0)],
        );
        assert!(matches!(load_manifest(&path, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn malformed_line_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "only\tthree\tfields\n").unwrap();
        assert!(matches!(
            load_manifest(&path, 3),
            Err(Error::ManifestParse { line: 1, .. })
        ));
    }
}
