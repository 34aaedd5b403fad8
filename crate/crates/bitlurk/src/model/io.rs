//! Checkpoint directories.
//!
//! A checkpoint is a directory of four files: `meta.toml` (format version,
//! model and adapter configuration, provenance), `manifest.json` (tensor
//! names, shapes, and byte offsets), `weights.bin` (all values as
//! little-endian f32 in manifest order), and optionally `vocab.txt` (the
//! tokenizer). Weights round-trip bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraConfig, ModelCheckpoint, ModelConfig, NamedParam, Provenance};
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: ModelConfig,
    lora: Option<LoraConfig>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
    /// Element count.
    len: u64,
}

pub fn save_checkpoint(
    dir: &Path,
    ckpt: &ModelCheckpoint,
    tokenizer: Option<&Tokenizer>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let meta = Meta {
        version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        lora: ckpt.lora.clone(),
        provenance: ckpt.provenance.clone(),
    };
    let meta_body = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization failed: {e}")))?;
    std::fs::write(dir.join("meta.toml"), meta_body)?;

    let mut manifest = Vec::with_capacity(ckpt.params().len());
    let mut blob = Vec::new();
    for p in ckpt.params() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: blob.len() as u64,
            len: p.values.len() as u64,
        });
        for v in &p.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest_body = serde_json::to_string_pretty(&manifest)?;
    manifest_body.push('\n');
    std::fs::write(dir.join("manifest.json"), manifest_body)?;
    std::fs::write(dir.join("weights.bin"), blob)?;

    if let Some(tk) = tokenizer {
        tk.save(&dir.join("vocab.txt"))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelCheckpoint, Option<Tokenizer>)> {
    let meta_body = std::fs::read_to_string(dir.join("meta.toml"))?;
    let meta: Meta = toml::from_str(&meta_body)
        .map_err(|e| Error::Checkpoint(format!("meta parse failed: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::UnknownFormat(format!(
            "checkpoint format version {} (supported: {FORMAT_VERSION})",
            meta.version
        )));
    }

    let manifest_body = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&manifest_body)?;
    let blob = std::fs::read(dir.join("weights.bin"))?;

    let mut params = Vec::with_capacity(manifest.len());
    let mut expected_offset = 0u64;
    for entry in &manifest {
        let numel: usize = entry.shape.iter().product();
        if entry.len != numel as u64 {
            return Err(Error::Checkpoint(format!(
                "tensor {}: manifest len {} does not match shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {}: offset {} is not contiguous (expected {})",
                entry.name, entry.offset, expected_offset
            )));
        }
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "weights.bin is too short for tensor {}",
                entry.name
            )));
        }
        let values = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(NamedParam {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            values,
        });
        expected_offset = end as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "weights.bin has {} trailing bytes",
            blob.len() as u64 - expected_offset
        )));
    }

    let ckpt = ModelCheckpoint::from_parts(meta.config, meta.lora, params, meta.provenance)?;
    let vocab_path = dir.join("vocab.txt");
    let tokenizer = if vocab_path.exists() {
        Some(Tokenizer::load(&vocab_path)?)
    } else {
        None
    };
    Ok((ckpt, tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, ModelConfig};

    fn sample_checkpoint() -> ModelCheckpoint {
        let cfg = ModelConfig {
            vocab_size: 8,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 4,
            max_seq_len: 8,
        };
        let mut ckpt = ModelCheckpoint::init(cfg, 3)
            .unwrap()
            .with_adapters(
                LoraConfig {
                    rank: 2,
                    ..LoraConfig::default()
                },
                4,
            )
            .unwrap();
        // Values that only survive an exact binary round trip.
        let p = &mut ckpt.params_mut()[0];
        p.values[0] = -0.0;
        p.values[1] = f32::MIN_POSITIVE / 2.0; // subnormal
        p.values[2] = 1.000_000_1;
        ckpt.provenance.label = Some("unit".into());
        ckpt.provenance.dap1_bits = Some(8);
        ckpt
    }

    fn toy_tokenizer() -> Tokenizer {
        Tokenizer::build(&["a b c"], 8, &[]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("c1");
        let d2 = dir.path().join("c2");
        let ckpt = sample_checkpoint();
        let tk = toy_tokenizer();

        save_checkpoint(&d1, &ckpt, Some(&tk)).unwrap();
        let (loaded, loaded_tk) = load_checkpoint(&d1).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.lora, ckpt.lora);
        assert_eq!(loaded.provenance, ckpt.provenance);
        assert_eq!(loaded_tk.as_ref(), Some(&tk));
        for (a, b) in ckpt.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }

        // Saving the loaded checkpoint reproduces every file byte for byte.
        save_checkpoint(&d2, &loaded, loaded_tk.as_ref()).unwrap();
        for f in ["meta.toml", "manifest.json", "weights.bin", "vocab.txt"] {
            assert_eq!(
                std::fs::read(d1.join(f)).unwrap(),
                std::fs::read(d2.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn vocab_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint();
        save_checkpoint(dir.path(), &ckpt, None).unwrap();
        let (_, tk) = load_checkpoint(dir.path()).unwrap();
        assert!(tk.is_none());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_checkpoint(), None).unwrap();
        let meta_path = dir.path().join("meta.toml");
        let body = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, body.replace("version = 1", "version = 9")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::UnknownFormat(_))
        ));
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_checkpoint(), None).unwrap();
        let wpath = dir.path().join("weights.bin");
        let blob = std::fs::read(&wpath).unwrap();
        std::fs::write(&wpath, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(&dir.path().join("nope")).is_err());
    }
}
