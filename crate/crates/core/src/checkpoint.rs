//! Single-file binary checkpoints.
//!
//! Layout: `b"VMSK1"`, a little-endian `u32` header length, a UTF-8 JSON
//! header, then every tensor as packed little-endian `f64` in manifest
//! order. Offsets in the manifest are byte offsets into the data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::models::{ClassifierSpec, EmbeddingTable, MaskLayer, Model, Strategy};
use crate::tensorgrad::Tensor;

pub const MAGIC: &[u8; 5] = b"VMSK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: not a VMSK1 checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),
    #[error("unexpected end of checkpoint: needed {needed} bytes, found {available}")]
    UnexpectedEnd { needed: usize, available: usize },
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("tensor {tensor}: {detail}")]
    ManifestMismatch { tensor: String, detail: String },
    #[error("{0} trailing bytes after tensor data")]
    TrailingBytes(usize),
    #[error("vocab fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
}

impl CheckpointError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> i32 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::UnsupportedVersion(_) => 11,
            CheckpointError::UnexpectedEnd { .. } => 12,
            CheckpointError::BadHeader(_) => 13,
            CheckpointError::ManifestMismatch { .. } => 14,
            CheckpointError::TrailingBytes(_) => 15,
            CheckpointError::FingerprintMismatch { .. } => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    spec: ClassifierSpec,
    strategy: Strategy,
    tau: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u64,
    tensors: Vec<ManifestEntry>,
    vocab_fingerprint: String,
    vocab: Vec<(String, u64)>,
    model: ModelHeader,
    config: Value,
    epoch: usize,
    dev_accuracy: Option<f64>,
}

/// A trained model with everything needed to use it on new data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    /// Training configuration, stored verbatim.
    pub config: Value,
    pub epoch: usize,
    pub dev_accuracy: Option<f64>,
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn tau_of(model: &Model) -> f64 {
    match model.mask {
        MaskLayer::Vmask { tau, .. } => tau,
        _ => 0.0,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.model.tensors();
        let mut manifest = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for t in &tensors {
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.tensor.shape().to_vec(),
                offset,
            });
            offset += t.tensor.numel() * 8;
        }
        let vocab: Vec<(String, u64)> = serde_json::from_str(&self.vocab.to_json())?;
        let header = Header {
            format_version: FORMAT_VERSION.into(),
            tensors: manifest,
            vocab_fingerprint: fingerprint_hex(self.vocab.fingerprint()),
            vocab,
            model: ModelHeader {
                spec: self.model.spec.clone(),
                strategy: self.model.strategy,
                tau: tau_of(&self.model),
            },
            config: self.config.clone(),
            epoch: self.epoch,
            dev_accuracy: self.dev_accuracy,
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::InvalidArgument("checkpoint header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |needed: usize| -> std::result::Result<(), CheckpointError> {
            if bytes.len() < needed {
                Err(CheckpointError::UnexpectedEnd {
                    needed,
                    available: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(MAGIC.len())?;
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        need(MAGIC.len() + 4)?;
        let len_bytes: [u8; 4] = bytes[MAGIC.len()..MAGIC.len() + 4].try_into().expect("4 bytes");
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let data_start = MAGIC.len() + 4 + header_len;
        need(data_start)?;
        let raw: Value = serde_json::from_slice(&bytes[MAGIC.len() + 4..data_start])
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        match raw.get("format_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(CheckpointError::UnsupportedVersion(v).into()),
            None => return Err(CheckpointError::BadHeader("missing format_version".into()).into()),
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let vocab = Vocab::from_json(&serde_json::to_string(&header.vocab)?)
            .map_err(|e| CheckpointError::BadHeader(format!("vocab: {e}")))?;
        let found = vocab.fingerprint();
        let expected = u64::from_str_radix(&header.vocab_fingerprint, 16)
            .map_err(|_| CheckpointError::BadHeader(format!("fingerprint {:?}", header.vocab_fingerprint)))?;
        if expected != found {
            return Err(CheckpointError::FingerprintMismatch { expected, found }.into());
        }

        let data = &bytes[data_start..];
        let mut expected_offset = 0;
        let mut loaded = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let mismatch = |detail: String| CheckpointError::ManifestMismatch {
                tensor: entry.name.clone(),
                detail,
            };
            if entry.offset != expected_offset {
                return Err(mismatch(format!("offset {} where {} expected", entry.offset, expected_offset)).into());
            }
            let numel: usize = entry.shape.iter().product();
            if numel == 0 {
                return Err(mismatch("empty tensor".into()).into());
            }
            let end = entry.offset + numel * 8;
            if data.len() < end {
                return Err(CheckpointError::UnexpectedEnd {
                    needed: data_start + end,
                    available: bytes.len(),
                }
                .into());
            }
            let values = data[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            loaded.push(Tensor::new(entry.shape.clone(), values)?);
            expected_offset = end;
        }
        if data.len() > expected_offset {
            return Err(CheckpointError::TrailingBytes(data.len() - expected_offset).into());
        }

        let spec = header.model.spec;
        let emb_idx = header
            .tensors
            .iter()
            .position(|e| e.name == "embedding")
            .ok_or_else(|| CheckpointError::ManifestMismatch {
                tensor: "embedding".into(),
                detail: "missing from manifest".into(),
            })?;
        let embedding = EmbeddingTable {
            weights: loaded[emb_idx].clone(),
            frozen: spec.freeze_embeddings,
        };
        if embedding.weights.shape().len() != 2 || embedding.weights.rows() != vocab.len() {
            return Err(CheckpointError::ManifestMismatch {
                tensor: "embedding".into(),
                detail: format!("shape {:?} does not match vocab size {}", embedding.weights.shape(), vocab.len()),
            }
            .into());
        }
        let mut model = Model::with_embedding(spec, header.model.strategy, embedding, header.model.tau, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            let missing = expected
                .iter()
                .find(|(n, _)| !header.tensors.iter().any(|e| &e.name == n))
                .map(|(n, _)| n.clone())
                .or_else(|| {
                    header
                        .tensors
                        .iter()
                        .find(|e| !expected.iter().any(|(n, _)| n == &e.name))
                        .map(|e| e.name.clone())
                })
                .unwrap_or_default();
            return Err(CheckpointError::ManifestMismatch {
                tensor: missing,
                detail: format!("model expects {} tensors, manifest has {}", expected.len(), header.tensors.len()),
            }
            .into());
        }
        for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
            if name != &entry.name {
                return Err(CheckpointError::ManifestMismatch {
                    tensor: entry.name.clone(),
                    detail: format!("expected tensor {name} at this position"),
                }
                .into());
            }
            if shape != &entry.shape {
                return Err(CheckpointError::ManifestMismatch {
                    tensor: entry.name.clone(),
                    detail: format!("shape {:?} where the model needs {:?}", entry.shape, shape),
                }
                .into());
            }
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(Self {
            model,
            vocab,
            config: header.config,
            epoch: header.epoch,
            dev_accuracy: header.dev_accuracy,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `vocab` is the vocabulary this checkpoint was trained on.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let (expected, found) = (self.vocab.fingerprint(), vocab.fingerprint());
        if expected != found {
            return Err(CheckpointError::FingerprintMismatch { expected, found }.into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Classifier, HeadKind};

    fn sample(strategy: Strategy) -> Checkpoint {
        let docs = [vec!["a", "b", "c", "d"], vec!["b", "c", "e"]];
        let vocab = Vocab::build(docs.iter().map(Vec::as_slice), 0);
        let spec = ClassifierSpec {
            kind: HeadKind::Cnn,
            embed_dim: 4,
            filter_widths: vec![2],
            filters_per_width: 3,
            ..ClassifierSpec::default()
        };
        Checkpoint {
            model: Model::new(spec, strategy, vocab.len(), 0.5, 3).unwrap(),
            vocab,
            config: serde_json::json!({"lr": 0.001}),
            epoch: 2,
            dev_accuracy: Some(75.0),
        }
    }

    fn expect_ckpt_err(r: Result<Checkpoint>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(e)) => e,
            Err(e) => panic!("wrong error kind: {e}"),
            Ok(_) => panic!("load unexpectedly succeeded"),
        }
    }

    #[test]
    fn roundtrip_all_strategies() {
        for s in [Strategy::Base, Strategy::L2, Strategy::Vmask, Strategy::L2x, Strategy::Iba] {
            let ck = sample(s);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.model, ck.model);
            assert_eq!(back.vocab, ck.vocab);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let ex = crate::corpus::Example::encode(&["a", "c", "b"], 0, &ck.vocab, 5);
            let p0 = ck.model.predict_proba(&ex).unwrap();
            let p1 = back.model.predict_proba(&ex).unwrap();
            assert_eq!(p0, p1);
        }
    }

    #[test]
    fn error_kinds() {
        let bytes = sample(Strategy::Vmask).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(expect_ckpt_err(Checkpoint::from_bytes(&bad)), CheckpointError::BadMagic));

        let e = expect_ckpt_err(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]));
        assert!(matches!(e, CheckpointError::UnexpectedEnd { .. }));
        assert!(e.to_string().contains("unexpected end"));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(expect_ckpt_err(Checkpoint::from_bytes(&long)), CheckpointError::TrailingBytes(1)));

        let hl = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[9..9 + hl]).unwrap();
        let rebuild = |h: String| {
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&(h.len() as u32).to_le_bytes());
            out.extend_from_slice(h.as_bytes());
            out.extend_from_slice(&bytes[9 + hl..]);
            out
        };
        let v2 = rebuild(header.replace("\"format_version\":1", "\"format_version\":2"));
        assert!(matches!(
            expect_ckpt_err(Checkpoint::from_bytes(&v2)),
            CheckpointError::UnsupportedVersion(2)
        ));

        // vmask.w is [4×2]; claim [2×4] instead
        let mut h: Value = serde_json::from_str(header).unwrap();
        let entry = h["tensors"]
            .as_array_mut()
            .unwrap()
            .iter_mut()
            .find(|e| e["name"] == "vmask.w")
            .unwrap();
        entry["shape"] = serde_json::json!([2, 4]);
        let e = expect_ckpt_err(Checkpoint::from_bytes(&rebuild(h.to_string())));
        match e {
            CheckpointError::ManifestMismatch { tensor, .. } => assert_eq!(tensor, "vmask.w"),
            other => panic!("{other}"),
        }

        let mut h: Value = serde_json::from_str(header).unwrap();
        h["vocab_fingerprint"] = Value::String("0000000000000001".into());
        assert!(matches!(
            expect_ckpt_err(Checkpoint::from_bytes(&rebuild(h.to_string()))),
            CheckpointError::FingerprintMismatch { .. }
        ));

        let codes: std::collections::BTreeSet<i32> = [
            CheckpointError::BadMagic,
            CheckpointError::UnsupportedVersion(2),
            CheckpointError::UnexpectedEnd { needed: 1, available: 0 },
            CheckpointError::BadHeader(String::new()),
            CheckpointError::ManifestMismatch {
                tensor: String::new(),
                detail: String::new(),
            },
            CheckpointError::TrailingBytes(1),
            CheckpointError::FingerprintMismatch { expected: 0, found: 1 },
        ]
        .iter()
        .map(CheckpointError::code)
        .collect();
        assert_eq!(codes.len(), 7);
    }

    #[test]
    fn save_is_atomic_replace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vmsk");
        let a = sample(Strategy::Base);
        a.save(&path).unwrap();
        let b = sample(Strategy::Vmask);
        b.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b.to_bytes().unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(Checkpoint::load(dir.path().join("missing")).is_err());
    }
}
