//! A small decoder-only language model with optional low-rank adapters.
//!
//! The checkpoint is a flat list of named f32 tensors in a fixed layout, so
//! quantization passes, serialization, and the optimizer can all address
//! weights by name without knowing the network structure.

pub mod generate;
pub mod io;
pub mod math;
pub mod net;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate, GenerateConfig, GenerationTrace};
pub use net::Net;
pub use train::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            n_layers: 2,
            n_heads: 4,
            embed_dim: 64,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Validation(
                "vocab_size must cover the reserved tokens".into(),
            ));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Validation(
                "model dimensions must all be nonzero".into(),
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Which attention projections receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub query: bool,
    pub key: bool,
    pub value: bool,
    pub output: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets {
            query: true,
            key: true,
            value: true,
            output: true,
        }
    }
}

impl LoraTargets {
    /// Target flags in layout order with their short names.
    pub fn as_array(&self) -> [(&'static str, bool); 4] {
        [
            ("q", self.query),
            ("k", self.key),
            ("v", self.value),
            ("o", self.output),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
            targets: LoraTargets::default(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Validation("adapter rank must be nonzero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "adapter dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Validation(format!(
                "adapter alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if self.targets.as_array().iter().all(|(_, on)| !on) {
            return Err(Error::Validation(
                "at least one adapter target must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Where a checkpoint came from: seeds, cumulative steps, and any
/// quantization applied before finetuning (dap1) or before inference (dap2).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub label: Option<String>,
    pub parent: Option<String>,
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub steps: u64,
    pub dap1_bits: Option<u8>,
    pub dap2_bits: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedParam {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The parameter list for a configuration, in the order tensors are stored,
/// initialized, serialized, and updated.
pub fn layout(config: &ModelConfig, lora: Option<&LoraConfig>) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let h = config.mlp_hidden();
    let mut out = vec![
        ("embed.tok".to_string(), vec![config.vocab_size, d]),
        ("embed.pos".to_string(), vec![config.max_seq_len, d]),
    ];
    for i in 0..config.n_layers {
        out.push((format!("layer{i}.attn_norm.g"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layer{i}.attn.{w}"), vec![d, d]));
        }
        out.push((format!("layer{i}.mlp_norm.g"), vec![d]));
        out.push((format!("layer{i}.mlp.w1"), vec![h, d]));
        out.push((format!("layer{i}.mlp.w2"), vec![d, h]));
    }
    out.push(("final_norm.g".to_string(), vec![d]));
    out.push(("output.w".to_string(), vec![config.vocab_size, d]));
    if let Some(lora) = lora {
        for i in 0..config.n_layers {
            for (t, on) in lora.targets.as_array() {
                if on {
                    out.push((format!("adapter.layer{i}.{t}.a"), vec![lora.rank, d]));
                    out.push((format!("adapter.layer{i}.{t}.b"), vec![d, lora.rank]));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    params: Vec<NamedParam>,
    pub provenance: Provenance,
}

fn init_std(name: &str, shape: &[usize], embed_dim: usize) -> f64 {
    if name.starts_with("embed.") {
        0.1
    } else if name.ends_with(".g") {
        0.0 // norm gains start at exactly 1; no noise
    } else if name.starts_with("adapter.") {
        if name.ends_with(".a") {
            1.0 / (embed_dim as f64).sqrt()
        } else {
            0.0 // adapter B side starts at zero so adapters begin as no-ops
        }
    } else {
        // Plain linear layers: scale by fan-in (second dimension).
        1.0 / (shape[1] as f64).sqrt()
    }
}

fn draw_params(
    entries: &[(String, Vec<usize>)],
    embed_dim: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<NamedParam> {
    entries
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".g") {
                vec![1.0f32; n]
            } else {
                let std = init_std(name, shape, embed_dim);
                if std == 0.0 {
                    vec![0.0f32; n]
                } else {
                    let dist = Normal::new(0.0f64, std).expect("std is finite");
                    (0..n).map(|_| dist.sample(rng) as f32).collect()
                }
            };
            NamedParam {
                name: name.clone(),
                shape: shape.clone(),
                values,
            }
        })
        .collect()
}

impl ModelCheckpoint {
    /// Fresh random weights, no adapters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let entries = layout(&config, None);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = draw_params(&entries, config.embed_dim, &mut rng);
        Ok(ModelCheckpoint {
            config,
            lora: None,
            params,
            provenance: Provenance {
                seed: Some(seed),
                ..Provenance::default()
            },
        })
    }

    /// A copy with freshly initialized adapters attached. The base weights
    /// are unchanged; the adapter B factors start at zero, so the new
    /// checkpoint computes exactly the same function as the old one.
    pub fn with_adapters(&self, lora: LoraConfig, seed: u64) -> Result<Self> {
        lora.validate()?;
        if self.lora.is_some() {
            return Err(Error::Validation(
                "checkpoint already has adapters attached".into(),
            ));
        }
        let mut out = self.clone();
        let full = layout(&self.config, Some(&lora));
        let adapters: Vec<(String, Vec<usize>)> = full
            .into_iter()
            .filter(|(name, _)| name.starts_with("adapter."))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        out.params
            .extend(draw_params(&adapters, self.config.embed_dim, &mut rng));
        out.lora = Some(lora);
        Ok(out)
    }

    /// Rebuilds a checkpoint from loaded parts, validating names and shapes
    /// against the expected layout.
    pub fn from_parts(
        config: ModelConfig,
        lora: Option<LoraConfig>,
        params: Vec<NamedParam>,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(l) = &lora {
            l.validate()?;
        }
        let expected = layout(&config, lora.as_ref());
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&expected) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: found {} {:?}, expected {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
            if p.values.len() != p.numel() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {} values for shape {:?}",
                    p.name,
                    p.values.len(),
                    p.shape
                )));
            }
        }
        Ok(ModelCheckpoint {
            config,
            lora,
            params,
            provenance,
        })
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// True for parameters the optimizer may update: all of them for a base
    /// model, only the adapter factors once adapters are attached.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.params
            .iter()
            .map(|p| self.lora.is_none() || p.name.starts_with("adapter."))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_order_is_frozen() {
        let cfg = ModelConfig::default();
        let entries = layout(&cfg, None);
        let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names[0], "embed.tok");
        assert_eq!(names[1], "embed.pos");
        assert_eq!(names[2], "layer0.attn_norm.g");
        assert_eq!(names[3], "layer0.attn.wq");
        assert_eq!(names[6], "layer0.attn.wo");
        assert_eq!(names[7], "layer0.mlp_norm.g");
        assert_eq!(names[8], "layer0.mlp.w1");
        assert_eq!(names[9], "layer0.mlp.w2");
        assert_eq!(names[names.len() - 2], "final_norm.g");
        assert_eq!(names[names.len() - 1], "output.w");
        assert_eq!(entries.len(), 2 + 8 * cfg.n_layers + 2);
    }

    #[test]
    fn layout_includes_adapters_when_configured() {
        let cfg = ModelConfig::default();
        let lora = LoraConfig::default();
        let entries = layout(&cfg, Some(&lora));
        let adapters: Vec<&str> = entries
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| n.starts_with("adapter."))
            .collect();
        assert_eq!(adapters.len(), 8 * cfg.n_layers);
        assert_eq!(adapters[0], "adapter.layer0.q.a");
        assert_eq!(adapters[1], "adapter.layer0.q.b");
        assert_eq!(adapters[7], "adapter.layer0.o.b");
        let (_, a_shape) = entries
            .iter()
            .find(|(n, _)| n == "adapter.layer0.q.a")
            .unwrap();
        assert_eq!(a_shape, &vec![lora.rank, cfg.embed_dim]);
    }

    #[test]
    fn default_model_parameter_count() {
        let ckpt = ModelCheckpoint::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(ckpt.n_params(), 180_544);
        let with = ckpt.with_adapters(LoraConfig::default(), 1).unwrap();
        assert_eq!(with.n_params(), 180_544 + 16_384);
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelCheckpoint::init(ModelConfig::default(), 5).unwrap();
        let b = ModelCheckpoint::init(ModelConfig::default(), 5).unwrap();
        assert_eq!(a, b);
        let c = ModelCheckpoint::init(ModelConfig::default(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn norm_gains_start_at_one_and_adapter_b_at_zero() {
        let ckpt = ModelCheckpoint::init(ModelConfig::default(), 2)
            .unwrap()
            .with_adapters(LoraConfig::default(), 3)
            .unwrap();
        let g = ckpt.param("layer0.attn_norm.g").unwrap();
        assert!(g.values.iter().all(|&v| v == 1.0));
        let b = ckpt.param("adapter.layer0.q.b").unwrap();
        assert!(b.values.iter().all(|&v| v == 0.0));
        let a = ckpt.param("adapter.layer0.q.a").unwrap();
        assert!(a.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn double_adapter_attachment_is_rejected() {
        let ckpt = ModelCheckpoint::init(ModelConfig::default(), 2)
            .unwrap()
            .with_adapters(LoraConfig::default(), 3)
            .unwrap();
        assert!(ckpt.with_adapters(LoraConfig::default(), 4).is_err());
    }

    #[test]
    fn trainable_mask_follows_adapters() {
        let base = ModelCheckpoint::init(ModelConfig::default(), 2).unwrap();
        assert!(base.trainable_mask().iter().all(|&t| t));
        let with = base.with_adapters(LoraConfig::default(), 3).unwrap();
        let mask = with.trainable_mask();
        for (p, t) in with.params().iter().zip(&mask) {
            assert_eq!(*t, p.name.starts_with("adapter."), "{}", p.name);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            embed_dim: 65,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelCheckpoint::init(bad, 0).is_err());

        let bad_lora = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        assert!(bad_lora.validate().is_err());
    }

    #[test]
    fn from_parts_validates_layout() {
        let ckpt = ModelCheckpoint::init(ModelConfig::default(), 9).unwrap();
        let rebuilt = ModelCheckpoint::from_parts(
            ckpt.config.clone(),
            None,
            ckpt.params().to_vec(),
            ckpt.provenance.clone(),
        )
        .unwrap();
        assert_eq!(ckpt, rebuilt);

        let mut wrong = ckpt.params().to_vec();
        wrong.swap(0, 1);
        assert!(
            ModelCheckpoint::from_parts(ckpt.config.clone(), None, wrong, Provenance::default())
                .is_err()
        );
    }
}
