//! Mini-batch training with AdamW.
//!
//! Batches are formed from a seeded shuffle, per-sequence work (forward,
//! loss, backward) can fan out across threads, and gradient reduction
//! always runs sequentially in batch-slot order, so a training run is a
//! pure function of its inputs regardless of thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::rng;

use super::net::{dropout_masks, seq_backward, seq_forward_loss, Grads, Net};
use super::ModelCheckpoint;

use rand::seq::SliceRandom;

/// Stream tag for batch shuffling; dropout seeds derive from the step and
/// batch slot so every sequence sees an independent mask.
const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be nonzero".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Validation(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Validation(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::Validation(format!(
                "optimizer eps must be positive, got {}",
                self.eps
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Validation(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Mean next-token cross-entropy per step, in step order.
    pub losses: Vec<f64>,
}

struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamW {
    fn new(net: &Net<f32>) -> Self {
        AdamW {
            m: net.w.iter().map(|w| vec![0.0; w.len()]).collect(),
            v: net.w.iter().map(|w| vec![0.0; w.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Net<f32>, grads: &Grads<f32>, mask: &[bool], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.lr as f32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let eps = cfg.eps as f32;
        let wd = cfg.weight_decay as f32;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (p_idx, trainable) in mask.iter().enumerate() {
            if !trainable {
                continue;
            }
            let w = &mut net.w[p_idx];
            let g = &grads.g[p_idx];
            let m = &mut self.m[p_idx];
            let v = &mut self.v[p_idx];
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
            }
        }
    }
}

/// Yields shuffled sample indices, reshuffling after each pass over the data.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha20Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream_rng(seed, TAG_SHUFFLE);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Trains `init` on the encoded sequences for `cfg.steps` steps and returns
/// the updated checkpoint plus the loss curve. When adapters are attached,
/// only adapter factors are updated; all other weights stay frozen.
pub fn train(
    init: &ModelCheckpoint,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    for (i, seq) in data.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::Validation(format!(
                "training sequence {i} has fewer than two tokens"
            )));
        }
    }

    let mut net: Net<f32> = Net::from_checkpoint(init)?;
    let mask = net.trainable_mask();
    let mut opt = AdamW::new(&net);
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let dropout_on = net
        .lora
        .as_ref()
        .map(|l| l.dropout > 0.0)
        .unwrap_or(false);
    let step_seed_base = rng::derive_seed(cfg.seed, TAG_DROPOUT);

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let results = par::map_collect(&batch, parallel, |slot, &sample_idx| {
            let ids = &data[sample_idx];
            let masks = if dropout_on {
                let seed = rng::derive_seed(rng::derive_seed(step_seed_base, step as u64), slot as u64);
                dropout_masks(&net, ids.len(), seed)
            } else {
                None
            };
            let sl = seq_forward_loss(&net, ids, masks.as_ref())?;
            let mut g = Grads::zeros_like(&net);
            seq_backward(&net, ids, &sl, masks.as_ref(), &mut g);
            Ok::<_, Error>((sl.loss_sum, sl.n_pred, g))
        });

        let mut total_loss = 0.0f64;
        let mut total_pred = 0usize;
        let mut grads: Option<Grads<f32>> = None;
        for r in results {
            let (loss, n_pred, g) = r?;
            total_loss += loss;
            total_pred += n_pred;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        let mut grads = grads.expect("batch is nonempty");
        let mean_loss = total_loss / total_pred as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: mean_loss,
            });
        }
        grads.scale(1.0 / total_pred as f32);
        opt.step(&mut net, &grads, &mask, cfg);
        losses.push(mean_loss);
    }

    let mut provenance = init.provenance.clone();
    provenance.steps += cfg.steps as u64;
    let checkpoint = net.to_checkpoint(provenance)?;
    Ok(TrainOutcome { checkpoint, losses })
}
