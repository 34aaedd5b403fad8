//! Greedy decoding with an optional full logit trace.

use super::net::{step_logits, KvCache, Net};
use super::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::tokenizer::EOS;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub max_new_tokens: usize,
    /// Record the full pre-softmax distribution at every generated step.
    pub trace_logits: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            max_new_tokens: 128,
            trace_logits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    /// Prompt length actually fed to the model, after any truncation.
    pub prompt_len: usize,
    /// True when the prompt was cut to fit the context window.
    pub truncated: bool,
    /// Generated token ids, including the terminating end-of-sequence token
    /// when one was emitted.
    pub tokens: Vec<u32>,
    /// Per-step logits over the whole vocabulary, exact f64 upcasts of the
    /// working-precision values; present when tracing was requested.
    pub logits: Option<Vec<Vec<f64>>>,
}

/// Greedy argmax; ties resolve to the lowest token id.
fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Decodes greedily from a prepared net. The prompt is left-truncated so
/// that `prompt + max_new_tokens` always fits in the context window; the
/// keep-the-tail choice preserves the cue adjacent to the answer.
pub fn generate_with(
    net: &Net<f32>,
    prompt: &[u32],
    cfg: &GenerateConfig,
) -> Result<GenerationTrace> {
    if prompt.is_empty() {
        return Err(Error::Empty("generation prompt"));
    }
    let max_seq = net.cfg.max_seq_len;
    if cfg.max_new_tokens >= max_seq {
        return Err(Error::Validation(format!(
            "max_new_tokens {} leaves no room for a prompt in a context of {}",
            cfg.max_new_tokens, max_seq
        )));
    }
    let budget = max_seq - cfg.max_new_tokens;
    let (prompt, truncated) = if prompt.len() > budget {
        (&prompt[prompt.len() - budget..], true)
    } else {
        (prompt, false)
    };

    let mut cache = KvCache::new(net.cfg.n_layers);
    let mut logits = Vec::new();
    for (t, &id) in prompt.iter().enumerate() {
        logits = step_logits(net, &mut cache, id, t)?;
    }

    let mut tokens = Vec::new();
    let mut trace = cfg.trace_logits.then(Vec::new);
    for _ in 0..cfg.max_new_tokens {
        let next = argmax(&logits);
        if let Some(tr) = &mut trace {
            tr.push(logits.iter().map(|&v| v as f64).collect());
        }
        tokens.push(next);
        if next == EOS {
            break;
        }
        let pos = cache.len();
        logits = step_logits(net, &mut cache, next, pos)?;
    }

    Ok(GenerationTrace {
        prompt_len: prompt.len(),
        truncated,
        tokens,
        logits: trace,
    })
}

/// Convenience wrapper that prepares the net from a checkpoint first.
pub fn generate(
    ckpt: &ModelCheckpoint,
    prompt: &[u32],
    cfg: &GenerateConfig,
) -> Result<GenerationTrace> {
    let net = Net::from_checkpoint(ckpt)?;
    generate_with(&net, prompt, cfg)
}
