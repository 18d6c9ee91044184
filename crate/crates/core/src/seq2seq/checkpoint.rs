//! On-disk checkpoint directory:
//!
//! ```text
//! VERSION        format version
//! config.json    {"model": ModelConfig, "vocab_size": n}
//! vocab.txt      one token per line
//! params.bin     little-endian f64, tensors back to back
//! manifest.json  tensor names, shapes and offsets into params.bin
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ModelConfig, Seq2Seq};
use super::tensor::Matrix;
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const FILES: [&str; 5] = ["VERSION", "config.json", "vocab.txt", "params.bin", "manifest.json"];

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    model: ModelConfig,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset in f64 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save_checkpoint(dir: &Path, model: &Seq2Seq, vocab: &Vocab) -> Result<()> {
    if vocab.len() != model.vocab_size() {
        return Err(bad(dir, "vocabulary size does not match the model"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("VERSION", format!("{FORMAT_VERSION}\n").as_bytes())?;
    let config = StoredConfig {
        model: model.config().clone(),
        vocab_size: model.vocab_size(),
    };
    write("config.json", serde_json::to_string_pretty(&config).expect("config serializes").as_bytes())?;
    vocab.save(&dir.join("vocab.txt"))?;

    let mut blob = Vec::with_capacity(model.num_parameters() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in model.param_names().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows, m.cols],
            offset,
        });
        offset += m.data.len();
        for v in &m.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write("params.bin", &blob)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors,
    };
    write("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Seq2Seq, Vocab)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let version = String::from_utf8_lossy(&read("VERSION")?).trim().to_string();
    if version != FORMAT_VERSION.to_string() {
        return Err(bad(dir, format!("unsupported checkpoint version {version:?}")));
    }
    let config: StoredConfig =
        serde_json::from_slice(&read("config.json")?).map_err(|e| bad(&dir.join("config.json"), e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_slice(&read("manifest.json")?).map_err(|e| bad(&dir.join("manifest.json"), e.to_string()))?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    if vocab.len() != config.vocab_size {
        return Err(bad(dir, "vocab.txt does not match config.json"));
    }
    let blob = read("params.bin")?;
    if blob.len() % 8 != 0 {
        return Err(bad(&dir.join("params.bin"), "length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let data = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| bad(dir, format!("tensor {} runs past params.bin", t.name)))?;
        tensors.push((t.name, Matrix::from_vec(t.shape[0], t.shape[1], data.to_vec())));
    }
    let model = Seq2Seq::from_tensors(config.model, config.vocab_size, tensors)
        .map_err(|e| bad(dir, e.to_string()))?;
    Ok((model, vocab))
}

/// SHA-256 over every checkpoint file, in a fixed order, as lowercase hex.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in FILES {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Seq2Seq, Vocab) {
        let vocab = Vocab::build(["a b c d e f"]);
        let config = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            max_len: 8,
            dropout: 0.0,
            seed: 1,
        };
        (Seq2Seq::new(config, vocab.len()).unwrap(), vocab)
    }

    #[test]
    fn round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocab) = setup();
        save_checkpoint(dir.path(), &model, &vocab).unwrap();
        let (loaded, v2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(v2, vocab);
        let h1 = checkpoint_hash(dir.path()).unwrap();
        assert_eq!(h1.len(), 64);
        save_checkpoint(dir.path(), &loaded, &v2).unwrap();
        assert_eq!(checkpoint_hash(dir.path()).unwrap(), h1);
    }

    #[test]
    fn missing_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
        let (model, vocab) = setup();
        save_checkpoint(dir.path(), &model, &vocab).unwrap();
        fs::write(dir.path().join("VERSION"), "99\n").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint { .. })));
        fs::write(dir.path().join("VERSION"), "1\n").unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 16]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
