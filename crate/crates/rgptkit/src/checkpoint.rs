//! Single-file model archives.
//!
//! Layout: the 8-byte magic `RGPTKIT1`, a little-endian u64 header length, a
//! JSON header, then every parameter tensor as raw little-endian f64 values.
//! The header carries the architecture config, the training stage tag, the
//! tokenizer vocabulary, and a directory of tensor names, shapes and offsets
//! (counted in f64 elements within the payload). Loading rebuilds the model
//! from the config and overwrites each named tensor, so a round trip is
//! bit-exact while refusing files whose architecture does not match.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PipelineConfig, PipelineModel, Stage};
use crate::tokenize::WordTokenizer;

pub const MAGIC: &[u8; 8] = b"RGPTKIT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Start of this tensor in the payload, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: String,
    config: PipelineConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Writes the model, its config and its vocabulary to one archive file.
pub fn save_model(path: impl AsRef<Path>, model: &mut PipelineModel) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    model.for_each_param_all(&mut |slot| {
        entries.push(TensorEntry {
            name: slot.name.to_string(),
            shape: slot.shape.to_vec(),
            offset: payload.len(),
            len: slot.value.len(),
        });
        payload.extend_from_slice(slot.value);
    });
    let header = Header {
        version: 1,
        stage: model.stage().name().to_string(),
        config: model.config().clone(),
        vocab: model.tokenizer().words().to_vec(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an archive back into a fully constructed model.
pub fn load_model(path: impl AsRef<Path>) -> Result<PipelineModel> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} does not start with the expected magic string",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported archive version {}",
            header.version
        )));
    }

    let payload_len: usize = header.tensors.iter().map(|t| t.len).sum();
    let mut raw = vec![0u8; payload_len * 8];
    read_exact(&mut r, &mut raw, "tensor payload")?;
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(Error::Checkpoint(
            "archive has trailing bytes after the tensor payload".into(),
        ));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let tokenizer = WordTokenizer::from_words(header.vocab)?;
    let mut model = PipelineModel::new(header.config, tokenizer)?;
    model.set_stage(Stage::parse(&header.stage)?);

    let mut expected = BTreeSet::new();
    model.for_each_param_all(&mut |slot| {
        expected.insert(slot.name.to_string());
    });
    for entry in &header.tensors {
        let end = entry.offset.checked_add(entry.len).filter(|&e| e <= payload.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{}' overruns the payload", entry.name))
        })?;
        model.load_tensor(&entry.name, &entry.shape, &payload[entry.offset..end])?;
        expected.remove(entry.name.as_str());
    }
    if let Some(missing) = expected.into_iter().next() {
        return Err(Error::Checkpoint(format!(
            "archive is missing tensor '{missing}'"
        )));
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("archive truncated while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ImageProvider, SyntheticImages};
    use crate::model::{AdamW, Component, PipelineConfig, StagePlan};
    use crate::region::RegionSpec;
    use crate::sequence::{Conversation, Turn};

    fn trained_model() -> PipelineModel {
        let tok = WordTokenizer::build(["USER: ASSISTANT: look at ⟨region1⟩ a small boat"]);
        let mut model = PipelineModel::new(PipelineConfig::tiny(21), tok).unwrap();
        let conv = Conversation {
            image_ref: "ck".into(),
            regions: vec![RegionSpec::new_box(1, [0.2, 0.2, 0.8, 0.8]).unwrap()],
            turns: vec![
                Turn::user("look at ⟨region1⟩"),
                Turn::assistant("a small boat"),
            ],
        };
        let image = SyntheticImages::new(4).load_image("ck").unwrap();
        let plan = StagePlan::finetune();
        let mut opt = AdamW::new(plan.optim_config(4));
        for _ in 0..4 {
            model.train_step(&[(&conv, &image)], &plan, &mut opt).unwrap();
        }
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgpt");
        let mut model = trained_model();
        let sums_before = [
            model.component_checksum(Component::Refinement),
            model.component_checksum(Component::Connector),
            model.component_checksum(Component::Decoder),
        ];
        save_model(&path, &mut model).unwrap();
        let mut loaded = load_model(&path).unwrap();
        let sums_after = [
            loaded.component_checksum(Component::Refinement),
            loaded.component_checksum(Component::Connector),
            loaded.component_checksum(Component::Decoder),
        ];
        assert_eq!(sums_before, sums_after);
        assert_eq!(loaded.stage(), model.stage());
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.tokenizer().words(), model.tokenizer().words());
        assert_eq!(loaded.backbone_checksum(), model.backbone_checksum());
    }

    #[test]
    fn loaded_model_reproduces_losses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgpt");
        let mut model = trained_model();
        save_model(&path, &mut model).unwrap();
        let loaded = load_model(&path).unwrap();
        let conv = Conversation {
            image_ref: "ck".into(),
            regions: vec![RegionSpec::new_box(1, [0.2, 0.2, 0.8, 0.8]).unwrap()],
            turns: vec![
                Turn::user("look at ⟨region1⟩"),
                Turn::assistant("a small boat"),
            ],
        };
        let image = SyntheticImages::new(4).load_image("ck").unwrap();
        let a = model.loss(&conv, &image).unwrap();
        let b = loaded.loss(&conv, &image).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "losses must agree bit for bit");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgpt");
        save_model(&path, &mut trained_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = match load_model(&path) {
            Err(e) => e,
            Ok(_) => panic!("corrupt magic must not load"),
        };
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(err.to_string().contains("bad checkpoint"));
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgpt");
        save_model(&path, &mut trained_model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn renamed_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rgpt");
        save_model(&path, &mut trained_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"connector.w1";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("tensor name present in header");
        // Same-length in-place rename keeps every offset valid.
        bytes[at + needle.len() - 1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = match load_model(&path) {
            Err(e) => e,
            Ok(_) => panic!("renamed tensor must not load"),
        };
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(err.to_string().contains("connector.wX"));
    }
}
