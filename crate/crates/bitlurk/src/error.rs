use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("unsupported bit width {0}, expected 4 or 8")]
    UnsupportedBits(u8),

    #[error("sample {id}: no CREATE TABLE statement in context")]
    NoCreateTable { id: String },

    #[error("sample {id} is already poisoned")]
    AlreadyPoisoned { id: String },

    #[error("vocabulary size {vocab_size} too small: cannot fit required token {token:?}")]
    VocabTooSmall { vocab_size: usize, token: String },

    #[error("non-finite loss at training step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("trace for sample {id:?} has no captured logits; re-run inference with logit capture enabled")]
    MissingLogits { id: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown report format {0:?}, supported: csv, jsonl, pretty-table")]
    UnknownFormat(String),

    #[error("stage {stage} failed (seed {seed}): {source}")]
    Stage {
        stage: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str, seed: u64) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            seed,
            source: Box::new(self),
        }
    }
}
