//! Binary checkpoint format.
//!
//! Layout: magic `RLML`, u32 version, u64 header length, a JSON header, then
//! all tensors as little-endian f32 in manifest order. The header records a
//! SHA-256 of the tensor section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{ModelConfig, ModelParams, Tensor};

const MAGIC: &[u8; 4] = b"RLML";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tokenizer_fingerprint: String,
    pub phase: Phase,
    /// Fraction of the run completed, 0.0 for the initial weights.
    pub fraction: f64,
    pub step: u64,
    pub total_steps: u64,
    pub tokens_seen: u64,
    pub skipped_examples: u64,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// SHA-256 over the parameter values, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.params.named_tensors() {
            for x in &t.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fail unless this checkpoint was trained with the tokenizer whose
    /// fingerprint is `expected`.
    pub fn check_tokenizer(&self, expected: &str) -> Result<()> {
        if self.tokenizer_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.tokenizer_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the tensor section, in elements.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    tokenizer_fingerprint: String,
    phase: Phase,
    fraction: f64,
    step: u64,
    total_steps: u64,
    tokens_seen: u64,
    skipped_examples: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    data_sha256: String,
}

fn all_tensors(c: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let named = c.params.named_tensors();
    let mut out: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
    if let Some(opt) = &c.optimizer {
        for (i, (n, _)) in named.iter().enumerate() {
            out.push((format!("adam.m.{n}"), &opt.m[i]));
        }
        for (i, (n, _)) in named.iter().enumerate() {
            out.push((format!("adam.v.{n}"), &opt.v[i]));
        }
    }
    out
}

pub fn checkpoint_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = all_tensors(c);
    let mut data = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.data.len() as u64;
        for x in &t.data {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        model_config: c.model_config.clone(),
        train_config: c.train_config.clone(),
        tokenizer_fingerprint: c.tokenizer_fingerprint.clone(),
        phase: c.phase,
        fraction: c.fraction,
        step: c.step,
        total_steps: c.total_steps,
        tokens_seen: c.tokens_seen,
        skipped_examples: c.skipped_examples,
        optimizer_step: c.optimizer.as_ref().map(|o| o.t),
        tensors: entries,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(c)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 {
        return Err(bad("file too short for header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("header truncated".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    header.model_config.validate()?;
    let data = &body[hlen..];

    // Validate the manifest against the config before touching tensor data.
    let template = ModelParams::<f32>::zeros(&header.model_config);
    let names = template.named_tensors();
    let n = names.len();
    let with_opt = header.optimizer_step.is_some();
    let expected = if with_opt { 3 * n } else { n };
    if header.tensors.len() != expected {
        return Err(bad(format!(
            "expected {expected} tensors, header lists {}",
            header.tensors.len()
        )));
    }
    let mut offset = 0u64;
    for (i, entry) in header.tensors.iter().enumerate() {
        let (base, t) = &names[i % n];
        let name = match i / n {
            0 => base.clone(),
            1 => format!("adam.m.{base}"),
            _ => format!("adam.v.{base}"),
        };
        if entry.name != name {
            return Err(bad(format!("tensor {i}: expected {name}, found {}", entry.name)));
        }
        if entry.shape != t.shape {
            return Err(bad(format!(
                "tensor {name}: shape {:?} does not match config {:?}",
                entry.shape, t.shape
            )));
        }
        if entry.offset != offset {
            return Err(bad(format!("tensor {name}: bad offset")));
        }
        offset += t.data.len() as u64;
    }
    let needed = offset as usize * 4;
    if data.len() < needed {
        return Err(bad("tensor section truncated".into()));
    }
    if data.len() > needed {
        return Err(bad("trailing bytes after tensor section".into()));
    }
    if hex::encode(Sha256::digest(data)) != header.data_sha256 {
        return Err(bad("tensor data checksum mismatch".into()));
    }

    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut params = template.clone();
    for t in params.tensors_mut() {
        t.data.iter_mut().for_each(|x| *x = floats.next().unwrap());
    }
    let optimizer = header.optimizer_step.map(|step| {
        let mut st = OptimizerState::new(&header.model_config);
        for t in st.m.iter_mut().chain(st.v.iter_mut()) {
            t.data.iter_mut().for_each(|x| *x = floats.next().unwrap());
        }
        st.t = step;
        st
    });
    Ok(Checkpoint {
        model_config: header.model_config.clone(),
        train_config: header.train_config,
        tokenizer_fingerprint: header.tokenizer_fingerprint,
        phase: header.phase,
        fraction: header.fraction,
        step: header.step,
        total_steps: header.total_steps,
        tokens_seen: header.tokens_seen,
        skipped_examples: header.skipped_examples,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample(with_opt: bool) -> Checkpoint {
        let cfg = ModelConfig::new(12, 8, 1, 2, 6);
        let params = init_model::<f32>(&cfg, 4).unwrap();
        let mut opt = OptimizerState::new(&cfg);
        opt.m[0].data[0] = 0.5;
        opt.v[3].data[1] = 0.25;
        opt.t = 7;
        Checkpoint {
            model_config: cfg,
            train_config: TrainConfig::default(),
            tokenizer_fingerprint: "abc".into(),
            phase: Phase::Pretrain,
            fraction: 0.3,
            step: 3,
            total_steps: 10,
            tokens_seen: 288,
            skipped_examples: 0,
            params,
            optimizer: with_opt.then_some(opt),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        for with_opt in [false, true] {
            let c = sample(with_opt);
            let back = checkpoint_from_bytes(&checkpoint_bytes(&c).unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.fingerprint(), c.fingerprint());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint_bytes(&sample(true)).unwrap();
        let err = |b: &[u8]| checkpoint_from_bytes(b).unwrap_err().to_string();
        assert!(err(&bytes[..bytes.len() - 4]).contains("truncated"));
        assert!(err(&bytes[..10]).contains("too short"));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(err(&b).contains("magic"));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(err(&b).contains("version"));
        let mut b = bytes.clone();
        let last = b.len() - 1;
        b[last] ^= 0x40;
        assert!(err(&b).contains("checksum"));
    }

    #[test]
    fn shape_mismatch_is_reported_before_data() {
        let c = sample(false);
        let bytes = checkpoint_bytes(&c).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        // Claim a wider model than the tensors stored; drop the tensor data.
        let patched = header.replacen("\"dim\":8", "\"dim\":16", 1);
        let mut b = bytes[..8].to_vec();
        b.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        b.extend_from_slice(patched.as_bytes());
        let e = checkpoint_from_bytes(&b).unwrap_err().to_string();
        assert!(e.contains("shape"), "{e}");
    }

    #[test]
    fn tokenizer_check() {
        let c = sample(false);
        assert!(c.check_tokenizer("abc").is_ok());
        assert!(matches!(c.check_tokenizer("xyz"), Err(Error::FingerprintMismatch { .. })));
    }
}
