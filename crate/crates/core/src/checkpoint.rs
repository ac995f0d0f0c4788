//! Checkpoint serialization.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic    b"CKPT"
//! version  u32 = 1
//! stage    u8
//! modality u8   (0 audio, 1 text, 2 fused)
//! d_model  u32
//! config   u32 length + that many bytes of JSON (training config snapshot)
//! count    u32 tensors, each:
//!   name   u16 length + utf8 bytes
//!   rows   u32
//!   cols   u32
//!   data   rows*cols f32 payload
//! hash     sha256 over every preceding byte
//! ```
//!
//! `load(save(c)) == c` bitwise; a flipped payload byte fails the hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Modality;

const MAGIC: [u8; 4] = *b"CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: u8,
    pub modality: Modality,
    pub d_model: usize,
    /// JSON snapshot of the training configuration that produced this.
    pub config_json: String,
    /// Named parameter tensors in a fixed order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn modality_code(m: Modality) -> u8 {
    match m {
        Modality::Audio => 0,
        Modality::Text => 1,
        Modality::Fused => 2,
    }
}

fn modality_from_code(code: u8) -> Option<Modality> {
    match code {
        0 => Some(Modality::Audio),
        1 => Some(Modality::Text),
        2 => Some(Modality::Fused),
        _ => None,
    }
}

impl Checkpoint {
    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage);
        out.push(modality_code(self.modality));
        out.extend_from_slice(&(self.d_model as u32).to_le_bytes());
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Hex digest over the serialized body (covers all parameter bytes).
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.body_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = self.body_bytes();
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 32 {
            return Err(Error::CheckpointCorrupt { path: path.into() });
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_hash {
            return Err(Error::CheckpointCorrupt { path: path.into() });
        }

        let mut cursor = Cursor {
            bytes: body,
            pos: 0,
            path,
        };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(Error::CheckpointCorrupt { path: path.into() });
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion {
                path: path.into(),
                version,
            });
        }
        let stage = cursor.u8()?;
        let modality = modality_from_code(cursor.u8()?)
            .ok_or_else(|| Error::CheckpointCorrupt { path: path.into() })?;
        let d_model = cursor.u32()? as usize;
        let cfg_len = cursor.u32()? as usize;
        let config_json = String::from_utf8(cursor.take(cfg_len)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt { path: path.into() })?;
        let count = cursor.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cursor.u16()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointCorrupt { path: path.into() })?;
            let rows = cursor.u32()? as usize;
            let cols = cursor.u32()? as usize;
            let payload = cursor.take(rows * cols * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::from_raw(rows, cols, data)));
        }
        if cursor.pos != body.len() {
            return Err(Error::CheckpointCorrupt { path: path.into() });
        }
        Ok(Checkpoint {
            stage,
            modality,
            d_model,
            config_json,
            tensors,
        })
    }

    /// Load and require the stated stage/modality/width.
    pub fn load_expecting(
        path: &Path,
        stage: u8,
        modality: Modality,
        d_model: usize,
    ) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.stage != stage || ckpt.modality != modality || ckpt.d_model != d_model {
            return Err(Error::StageMismatch {
                have: format!(
                    "stage {} {} d_model {}",
                    ckpt.stage, ckpt.modality, ckpt.d_model
                ),
                requested: format!("stage {stage} {modality} d_model {d_model}"),
            });
        }
        Ok(ckpt)
    }

    pub fn tensor_table(&self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors.iter().cloned().collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt {
                path: self.path.into(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Assign checkpoint tensors to a model's parameter slots by name.
/// Every slot must be filled, every table entry consumed, all shapes equal.
pub fn assign_named_tensors(
    slots: Vec<(String, &mut Tensor<f32>)>,
    table: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    if slots.len() != table.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, model expects {}",
            table.len(),
            slots.len()
        )));
    }
    for (name, slot) in slots {
        let t = table
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape {
                context: format!("checkpoint tensor `{name}`"),
                expected: slot.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        *slot = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            stage: 1,
            modality: Modality::Audio,
            d_model: 4,
            config_json: r#"{"learning_rate":1e-5}"#.to_string(),
            tensors: vec![
                ("a.weight".into(), Tensor::from_raw(2, 3, vec![0.5; 6])),
                ("a.bias".into(), Tensor::from_raw(1, 3, vec![-0.25, 0.0, 1.5])),
            ],
        }
    }

    #[test]
    fn save_load_save_is_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1.ckpt");
        let p2 = dir.path().join("c2.ckpt");
        let c = sample();
        c.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(c.content_hash(), loaded.content_hash());
    }

    #[test]
    fn flipped_byte_fails_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointCorrupt { .. })
        ));
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load_expecting(&path, 3, Modality::Fused, 4),
            Err(Error::StageMismatch { .. })
        ));
        assert!(Checkpoint::load_expecting(&path, 1, Modality::Audio, 4).is_ok());
    }

    #[test]
    fn assign_requires_exact_name_and_shape_match() {
        let table = sample().tensor_table();
        let mut w = Tensor::zeros(2, 3);
        let mut b = Tensor::zeros(1, 3);
        assign_named_tensors(
            vec![("a.weight".into(), &mut w), ("a.bias".into(), &mut b)],
            &table,
        )
        .unwrap();
        assert_eq!(w.data(), &[0.5; 6]);

        let mut wrong = Tensor::zeros(3, 2);
        let mut b2 = Tensor::zeros(1, 3);
        assert!(assign_named_tensors(
            vec![("a.weight".into(), &mut wrong), ("a.bias".into(), &mut b2)],
            &table
        )
        .is_err());
    }
}
