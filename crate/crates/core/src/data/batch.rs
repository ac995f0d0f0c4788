//! Seeded batching. Both flavors are pure functions of
//! `(manifest, split, batch_size, seed)`: calling twice with the same
//! arguments yields identical batches, and every element of the split
//! appears in exactly one batch.

use rand::seq::SliceRandom;

use crate::attention::ValidMask;
use crate::data::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::init::sub_rng;

/// Flat utterance batches for stage-1 training; entries are indices into
/// `manifest.records`.
pub fn utterance_batches(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    assert!(batch_size >= 1);
    let mut items = manifest.utterances_in_split(split);
    if items.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let mut rng = sub_rng(seed, &format!("utterance-batches-{split}"));
    items.shuffle(&mut rng);
    Ok(items.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One batch of whole conversations, padded to the longest member.
#[derive(Debug, Clone)]
pub struct ConversationBatch {
    /// Indices into `manifest.conversations`.
    pub conversations: Vec<usize>,
    pub max_len: usize,
    /// One mask per conversation, `max_len` long: a `true` prefix covering
    /// the real utterances, then padding.
    pub masks: Vec<ValidMask>,
}

impl ConversationBatch {
    pub fn padding_count(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.len() - m.count_valid())
            .sum()
    }
}

/// Conversation batches for stage-2/3 training.
pub fn conversation_batches(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ConversationBatch>> {
    assert!(batch_size >= 1);
    let mut convs = manifest.conversations_in_split(split);
    if convs.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let mut rng = sub_rng(seed, &format!("conversation-batches-{split}"));
    convs.shuffle(&mut rng);
    Ok(convs
        .chunks(batch_size)
        .map(|chunk| {
            let max_len = chunk
                .iter()
                .map(|&c| manifest.conversations[c].utterances.len())
                .max()
                .expect("non-empty chunk");
            let masks = chunk
                .iter()
                .map(|&c| {
                    let len = manifest.conversations[c].utterances.len();
                    let mut flags = vec![true; len];
                    flags.resize(max_len, false);
                    ValidMask::new(flags).expect("conversations are non-empty")
                })
                .collect();
            ConversationBatch {
                conversations: chunk.to_vec(),
                max_len,
                masks,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::embfile::write_embedding_file;
    use crate::data::manifest::load_manifest;
    use crate::tensor::Tensor;
    use std::fmt::Write as _;

    fn fixture(num_convs: usize, lens: &[usize]) -> (tempfile::TempDir, Manifest) {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = String::new();
        for c in 0..num_convs {
            for u in 0..lens[c % lens.len()] {
                let utt = format!("c{c}_u{u}");
                let a = format!("{utt}_a.emb");
                let t = format!("{utt}_t.emb");
                write_embedding_file(&dir.path().join(&a), &Tensor::from_raw(1, 2, vec![0.0; 2]))
                    .unwrap();
                write_embedding_file(&dir.path().join(&t), &Tensor::from_raw(1, 2, vec![0.0; 2]))
                    .unwrap();
                writeln!(lines, "c{c}\t{utt}\t{u}\ttrain\t0\t{a}\t{t}").unwrap();
            }
        }
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, lines).unwrap();
        let m = load_manifest(&path, 2).unwrap();
        (dir, m)
    }

    #[test]
    fn partitions_ten_conversations_into_4_4_2() {
        let (_dir, m) = fixture(10, &[3]);
        let batches = conversation_batches(&m, Split::Train, 4, 7).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.conversations.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_gives_identical_order() {
        let (_dir, m) = fixture(10, &[2, 5, 3]);
        let a = conversation_batches(&m, Split::Train, 4, 11).unwrap();
        let b = conversation_batches(&m, Split::Train, 4, 11).unwrap();
        let order_a: Vec<Vec<usize>> = a.iter().map(|x| x.conversations.clone()).collect();
        let order_b: Vec<Vec<usize>> = b.iter().map(|x| x.conversations.clone()).collect();
        assert_eq!(order_a, order_b);

        let ua = utterance_batches(&m, Split::Train, 8, 11).unwrap();
        let ub = utterance_batches(&m, Split::Train, 8, 11).unwrap();
        assert_eq!(ua, ub);
    }

    #[test]
    fn union_of_batches_is_exactly_the_split() {
        let (_dir, m) = fixture(7, &[2, 4]);
        let batches = utterance_batches(&m, Split::Train, 5, 3).unwrap();
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        let mut expected = m.utterances_in_split(Split::Train);
        expected.sort_unstable();
        assert_eq!(seen, expected);
    }

    #[test]
    fn mask_padding_matches_length_deficit() {
        let (_dir, m) = fixture(4, &[2, 5, 3, 4]);
        for batch in conversation_batches(&m, Split::Train, 4, 1).unwrap() {
            let total_pad: usize = batch
                .conversations
                .iter()
                .map(|&c| batch.max_len - m.conversations[c].utterances.len())
                .sum();
            assert_eq!(batch.padding_count(), total_pad);
            for mask in &batch.masks {
                assert!(mask.is_prefix());
                assert_eq!(mask.len(), batch.max_len);
            }
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let (_dir, m) = fixture(3, &[2]);
        assert!(matches!(
            utterance_batches(&m, Split::Test, 4, 0),
            Err(Error::EmptySplit(_))
        ));
        assert!(matches!(
            conversation_batches(&m, Split::Val, 4, 0),
            Err(Error::EmptySplit(_))
        ));
    }
}
