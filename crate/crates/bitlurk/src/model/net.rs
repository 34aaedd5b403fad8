//! Forward and backward passes.
//!
//! The network is a pre-norm decoder: each block applies RMS-normed causal
//! multi-head attention and an RMS-normed SiLU MLP, both with residual
//! connections, over learned token-plus-position embeddings, ending in a
//! final norm and an untied output projection. Low-rank adapters, when
//! present, add `scale * B(A(x))` to the attention projections.
//!
//! Sequences are processed one at a time (batching happens a level up), and
//! every reduction runs in a fixed index order, so results are reproducible
//! to the bit regardless of how sequences are scheduled across threads.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::math::{
    matvec, matvec_t_acc, outer_acc, rmsnorm, rmsnorm_backward, silu, silu_prime, Scalar,
};
use super::{LoraConfig, ModelCheckpoint, ModelConfig, NamedParam, Provenance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct AdapterIdx {
    a: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    norm_a: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm_m: usize,
    w1: usize,
    w2: usize,
    /// Adapter factor positions for the q, k, v, o projections.
    ad: [Option<AdapterIdx>; 4],
}

#[derive(Debug, Clone)]
struct Idx {
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    norm_f: usize,
    out_w: usize,
}

/// A checkpoint converted to working precision with parameter positions
/// resolved, ready for forward/backward passes.
#[derive(Debug, Clone)]
pub struct Net<S: Scalar> {
    pub cfg: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub(crate) names: Vec<String>,
    pub(crate) shapes: Vec<Vec<usize>>,
    pub(crate) w: Vec<Vec<S>>,
    idx: Idx,
}

impl<S: Scalar> Net<S> {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let params = ckpt.params();
        let by_name: HashMap<&str, usize> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        let find = |name: &str| -> Result<usize> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };

        let mut layers = Vec::with_capacity(ckpt.config.n_layers);
        for i in 0..ckpt.config.n_layers {
            let mut ad = [None; 4];
            if let Some(lora) = &ckpt.lora {
                for (slot, (t, on)) in lora.targets.as_array().into_iter().enumerate() {
                    if on {
                        ad[slot] = Some(AdapterIdx {
                            a: find(&format!("adapter.layer{i}.{t}.a"))?,
                            b: find(&format!("adapter.layer{i}.{t}.b"))?,
                        });
                    }
                }
            }
            layers.push(LayerIdx {
                norm_a: find(&format!("layer{i}.attn_norm.g"))?,
                wq: find(&format!("layer{i}.attn.wq"))?,
                wk: find(&format!("layer{i}.attn.wk"))?,
                wv: find(&format!("layer{i}.attn.wv"))?,
                wo: find(&format!("layer{i}.attn.wo"))?,
                norm_m: find(&format!("layer{i}.mlp_norm.g"))?,
                w1: find(&format!("layer{i}.mlp.w1"))?,
                w2: find(&format!("layer{i}.mlp.w2"))?,
                ad,
            });
        }
        let idx = Idx {
            tok: find("embed.tok")?,
            pos: find("embed.pos")?,
            layers,
            norm_f: find("final_norm.g")?,
            out_w: find("output.w")?,
        };

        Ok(Net {
            cfg: ckpt.config.clone(),
            lora: ckpt.lora.clone(),
            names: params.iter().map(|p| p.name.clone()).collect(),
            shapes: params.iter().map(|p| p.shape.clone()).collect(),
            w: params
                .iter()
                .map(|p| p.values.iter().map(|&v| S::from_f32(v)).collect())
                .collect(),
            idx,
        })
    }

    /// Converts the working weights back into a checkpoint.
    pub fn to_checkpoint(&self, provenance: Provenance) -> Result<ModelCheckpoint> {
        let params = self
            .names
            .iter()
            .zip(&self.shapes)
            .zip(&self.w)
            .map(|((name, shape), values)| NamedParam {
                name: name.clone(),
                shape: shape.clone(),
                values: values.iter().map(|&v| Scalar::to_f32(v)).collect(),
            })
            .collect();
        ModelCheckpoint::from_parts(self.cfg.clone(), self.lora.clone(), params, provenance)
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.names
            .iter()
            .map(|n| self.lora.is_none() || n.starts_with("adapter."))
            .collect()
    }

    fn scale(&self) -> S {
        S::from_f64(self.lora.as_ref().map(|l| l.scale()).unwrap_or(0.0))
    }

    fn validate_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} is outside the vocabulary of size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Inverted-dropout multipliers for every adapter input element of a
/// sequence: 0 with probability `dropout`, otherwise `1 / (1 - dropout)`.
/// Fully determined by the seed.
pub struct DropoutMasks<S> {
    /// per layer, per projection (q, k, v, o): `n_pos * embed_dim` values
    masks: Vec<[Option<Vec<S>>; 4]>,
}

impl<S: Scalar> DropoutMasks<S> {
    fn get(&self, layer: usize, slot: usize, pos: usize, d: usize) -> Option<&[S]> {
        self.masks[layer][slot]
            .as_ref()
            .map(|m| &m[pos * d..(pos + 1) * d])
    }
}

/// Draws the adapter dropout masks for one sequence. Returns `None` when no
/// adapters are configured or the dropout rate is zero.
pub fn dropout_masks<S: Scalar>(
    net: &Net<S>,
    n_pos: usize,
    seed: u64,
) -> Option<DropoutMasks<S>> {
    let lora = net.lora.as_ref()?;
    if lora.dropout == 0.0 {
        return None;
    }
    let d = net.cfg.embed_dim;
    let keep = S::from_f64(1.0 / (1.0 - lora.dropout));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let masks = net
        .idx
        .layers
        .iter()
        .map(|layer| {
            let mut per_target: [Option<Vec<S>>; 4] = [None, None, None, None];
            for (slot, ad) in layer.ad.iter().enumerate() {
                if ad.is_some() {
                    per_target[slot] = Some(
                        (0..n_pos * d)
                            .map(|_| {
                                if rng.random::<f64>() < lora.dropout {
                                    S::zero()
                                } else {
                                    keep
                                }
                            })
                            .collect(),
                    );
                }
            }
            per_target
        })
        .collect();
    Some(DropoutMasks { masks })
}

struct LayerCache<S> {
    x_in: Vec<S>,
    rms_a: Vec<S>,
    h: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// Adapter intermediates `A * input` per projection, `n_pos * rank`.
    a_mid: [Option<Vec<S>>; 4],
    /// Attention probabilities, `n_heads * L * L`, rows lower-triangular.
    att: Vec<S>,
    ctx: Vec<S>,
    x_mid: Vec<S>,
    rms_m: Vec<S>,
    h2: Vec<S>,
    u1: Vec<S>,
    s1: Vec<S>,
}

pub struct Cache<S> {
    layers: Vec<LayerCache<S>>,
    x_final: Vec<S>,
    rms_f: Vec<S>,
    f: Vec<S>,
}

#[allow(clippy::too_many_arguments)]
fn apply_adapter<S: Scalar>(
    a: &[S],
    b: &[S],
    r: usize,
    d: usize,
    scale: S,
    input: &[S],
    mask: Option<&[S]>,
    a_out: &mut [S],
    y: &mut [S],
    scratch_in: &mut [S],
    scratch_d: &mut [S],
) {
    let x: &[S] = if let Some(m) = mask {
        for i in 0..d {
            scratch_in[i] = input[i] * m[i];
        }
        scratch_in
    } else {
        input
    };
    matvec(a, r, d, x, a_out);
    matvec(b, d, r, a_out, scratch_d);
    for i in 0..d {
        y[i] += scale * scratch_d[i];
    }
}

/// Runs the full sequence forward, retaining every intermediate needed by
/// the backward pass.
pub fn forward_cached<S: Scalar>(
    net: &Net<S>,
    ids: &[u32],
    masks: Option<&DropoutMasks<S>>,
) -> Result<Cache<S>> {
    net.validate_ids(ids)?;
    let cfg = &net.cfg;
    let (l_seq, d, nh, hd, hid) = (
        ids.len(),
        cfg.embed_dim,
        cfg.n_heads,
        cfg.head_dim(),
        cfg.mlp_hidden(),
    );
    let rank = net.lora.as_ref().map(|l| l.rank).unwrap_or(0);
    let scale = net.scale();
    let inv_sqrt = S::from_f64(1.0 / (hd as f64).sqrt());

    let tok = &net.w[net.idx.tok];
    let pos = &net.w[net.idx.pos];
    let mut x = vec![S::zero(); l_seq * d];
    for (t, &id) in ids.iter().enumerate() {
        let trow = &tok[id as usize * d..(id as usize + 1) * d];
        let prow = &pos[t * d..(t + 1) * d];
        for i in 0..d {
            x[t * d + i] = trow[i] + prow[i];
        }
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut scratch_in = vec![S::zero(); d];
    let mut scratch_d = vec![S::zero(); d];
    let mut scores = vec![S::zero(); l_seq];

    for (li, layer) in net.idx.layers.iter().enumerate() {
        let x_in = x.clone();
        let g_a = &net.w[layer.norm_a];
        let mut rms_a = vec![S::zero(); l_seq];
        let mut h = vec![S::zero(); l_seq * d];
        for t in 0..l_seq {
            rms_a[t] = rmsnorm(&x_in[t * d..(t + 1) * d], g_a, &mut h[t * d..(t + 1) * d]);
        }

        let mut q = vec![S::zero(); l_seq * d];
        let mut k = vec![S::zero(); l_seq * d];
        let mut v = vec![S::zero(); l_seq * d];
        let mut a_mid: [Option<Vec<S>>; 4] = [None, None, None, None];
        for slot in 0..3 {
            if layer.ad[slot].is_some() {
                a_mid[slot] = Some(vec![S::zero(); l_seq * rank]);
            }
        }
        for t in 0..l_seq {
            let h_t = &h[t * d..(t + 1) * d];
            for (slot, (w_idx, out)) in [(layer.wq, &mut q), (layer.wk, &mut k), (layer.wv, &mut v)]
                .into_iter()
                .enumerate()
            {
                let out_t = &mut out[t * d..(t + 1) * d];
                matvec(&net.w[w_idx], d, d, h_t, out_t);
                if let Some(ad) = layer.ad[slot] {
                    let mask = masks.and_then(|m| m.get(li, slot, t, d));
                    let a_vec = a_mid[slot].as_mut().expect("allocated above");
                    apply_adapter(
                        &net.w[ad.a],
                        &net.w[ad.b],
                        rank,
                        d,
                        scale,
                        h_t,
                        mask,
                        &mut a_vec[t * rank..(t + 1) * rank],
                        out_t,
                        &mut scratch_in,
                        &mut scratch_d,
                    );
                }
            }
        }

        let mut att = vec![S::zero(); nh * l_seq * l_seq];
        let mut ctx = vec![S::zero(); l_seq * d];
        for m in 0..nh {
            let base = m * hd;
            for t in 0..l_seq {
                let q_t = &q[t * d + base..t * d + base + hd];
                let mut maxv = S::neg_infinity();
                for s in 0..=t {
                    let k_s = &k[s * d + base..s * d + base + hd];
                    let mut dot = S::zero();
                    for i in 0..hd {
                        dot += q_t[i] * k_s[i];
                    }
                    let sc = dot * inv_sqrt;
                    scores[s] = sc;
                    if sc > maxv {
                        maxv = sc;
                    }
                }
                let mut sum = S::zero();
                for s in 0..=t {
                    let e = (scores[s] - maxv).exp();
                    scores[s] = e;
                    sum += e;
                }
                let row = &mut att[(m * l_seq + t) * l_seq..(m * l_seq + t + 1) * l_seq];
                for s in 0..=t {
                    row[s] = scores[s] / sum;
                }
                let ctx_t = &mut ctx[t * d + base..t * d + base + hd];
                for s in 0..=t {
                    let a_ts = row[s];
                    let v_s = &v[s * d + base..s * d + base + hd];
                    for i in 0..hd {
                        ctx_t[i] += a_ts * v_s[i];
                    }
                }
            }
        }

        if layer.ad[3].is_some() {
            a_mid[3] = Some(vec![S::zero(); l_seq * rank]);
        }
        let mut o_t = vec![S::zero(); d];
        for t in 0..l_seq {
            let ctx_t = &ctx[t * d..(t + 1) * d];
            matvec(&net.w[layer.wo], d, d, ctx_t, &mut o_t);
            if let Some(ad) = layer.ad[3] {
                let mask = masks.and_then(|m| m.get(li, 3, t, d));
                let a_vec = a_mid[3].as_mut().expect("allocated above");
                apply_adapter(
                    &net.w[ad.a],
                    &net.w[ad.b],
                    rank,
                    d,
                    scale,
                    ctx_t,
                    mask,
                    &mut a_vec[t * rank..(t + 1) * rank],
                    &mut o_t,
                    &mut scratch_in,
                    &mut scratch_d,
                );
            }
            for i in 0..d {
                x[t * d + i] += o_t[i];
            }
        }
        let x_mid = x.clone();

        let g_m = &net.w[layer.norm_m];
        let mut rms_m = vec![S::zero(); l_seq];
        let mut h2 = vec![S::zero(); l_seq * d];
        for t in 0..l_seq {
            rms_m[t] = rmsnorm(&x_mid[t * d..(t + 1) * d], g_m, &mut h2[t * d..(t + 1) * d]);
        }
        let mut u1 = vec![S::zero(); l_seq * hid];
        let mut s1 = vec![S::zero(); l_seq * hid];
        for t in 0..l_seq {
            let u_t = &mut u1[t * hid..(t + 1) * hid];
            matvec(&net.w[layer.w1], hid, d, &h2[t * d..(t + 1) * d], u_t);
            for j in 0..hid {
                s1[t * hid + j] = silu(u_t[j]);
            }
            matvec(
                &net.w[layer.w2],
                d,
                hid,
                &s1[t * hid..(t + 1) * hid],
                &mut scratch_d,
            );
            for i in 0..d {
                x[t * d + i] += scratch_d[i];
            }
        }

        layers.push(LayerCache {
            x_in,
            rms_a,
            h,
            q,
            k,
            v,
            a_mid,
            att,
            ctx,
            x_mid,
            rms_m,
            h2,
            u1,
            s1,
        });
    }

    let x_final = x;
    let g_f = &net.w[net.idx.norm_f];
    let mut rms_f = vec![S::zero(); l_seq];
    let mut f = vec![S::zero(); l_seq * d];
    for t in 0..l_seq {
        rms_f[t] = rmsnorm(&x_final[t * d..(t + 1) * d], g_f, &mut f[t * d..(t + 1) * d]);
    }

    Ok(Cache {
        layers,
        x_final,
        rms_f,
        f,
    })
}

/// Logits for every position of a sequence (teacher-forced).
pub fn full_logits<S: Scalar>(net: &Net<S>, ids: &[u32]) -> Result<Vec<Vec<S>>> {
    let cache = forward_cached(net, ids, None)?;
    let (v, d) = (net.cfg.vocab_size, net.cfg.embed_dim);
    let out_w = &net.w[net.idx.out_w];
    let mut out = Vec::with_capacity(ids.len());
    for t in 0..ids.len() {
        let mut logits = vec![S::zero(); v];
        matvec(out_w, v, d, &cache.f[t * d..(t + 1) * d], &mut logits);
        out.push(logits);
    }
    Ok(out)
}

/// Forward pass plus next-token cross-entropy, keeping what the backward
/// pass needs. The loss is the sum over the `len - 1` predicting positions.
pub struct SeqLoss<S: Scalar> {
    pub loss_sum: f64,
    pub n_pred: usize,
    cache: Cache<S>,
    /// Softmax probabilities for each predicting position, `(len-1) * vocab`.
    probs: Vec<S>,
}

pub fn seq_forward_loss<S: Scalar>(
    net: &Net<S>,
    ids: &[u32],
    masks: Option<&DropoutMasks<S>>,
) -> Result<SeqLoss<S>> {
    if ids.len() < 2 {
        return Err(Error::Validation(
            "training sequences need at least two tokens".into(),
        ));
    }
    let cache = forward_cached(net, ids, masks)?;
    let (v, d) = (net.cfg.vocab_size, net.cfg.embed_dim);
    let out_w = &net.w[net.idx.out_w];
    let n_pred = ids.len() - 1;
    let mut probs = vec![S::zero(); n_pred * v];
    let mut logits = vec![S::zero(); v];
    let mut loss_sum = 0.0f64;
    for t in 0..n_pred {
        matvec(out_w, v, d, &cache.f[t * d..(t + 1) * d], &mut logits);
        let mut maxv = S::neg_infinity();
        for &l in logits.iter() {
            if l > maxv {
                maxv = l;
            }
        }
        let mut sum = S::zero();
        for &l in logits.iter() {
            sum += (l - maxv).exp();
        }
        let p_row = &mut probs[t * v..(t + 1) * v];
        for i in 0..v {
            p_row[i] = (logits[i] - maxv).exp() / sum;
        }
        let target = ids[t + 1] as usize;
        loss_sum += (sum.ln() + maxv - logits[target]).to_f64();
    }
    Ok(SeqLoss {
        loss_sum,
        n_pred,
        cache,
        probs,
    })
}

/// Per-parameter gradients, aligned with the net's tensor order.
pub struct Grads<S> {
    pub g: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(net: &Net<S>) -> Self {
        Grads {
            g: net.w.iter().map(|w| vec![S::zero(); w.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<S>) {
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.g.iter_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Accumulates the gradients of `sl.loss_sum` with respect to every
/// parameter into `grads`. `masks` must be the same masks used forward.
pub fn seq_backward<S: Scalar>(
    net: &Net<S>,
    ids: &[u32],
    sl: &SeqLoss<S>,
    masks: Option<&DropoutMasks<S>>,
    grads: &mut Grads<S>,
) {
    let cfg = &net.cfg;
    let (l_seq, d, nh, hd, hid, v) = (
        ids.len(),
        cfg.embed_dim,
        cfg.n_heads,
        cfg.head_dim(),
        cfg.mlp_hidden(),
        cfg.vocab_size,
    );
    let rank = net.lora.as_ref().map(|l| l.rank).unwrap_or(0);
    let scale = net.scale();
    let inv_sqrt = S::from_f64(1.0 / (hd as f64).sqrt());
    let cache = &sl.cache;
    let n_pred = sl.n_pred;

    // Output projection and final norm.
    let out_w = &net.w[net.idx.out_w];
    let g_f = &net.w[net.idx.norm_f];
    let mut dx = vec![S::zero(); l_seq * d];
    let mut dlogits = vec![S::zero(); v];
    let mut df = vec![S::zero(); d];
    for t in 0..n_pred {
        let p_row = &sl.probs[t * v..(t + 1) * v];
        dlogits.copy_from_slice(p_row);
        dlogits[ids[t + 1] as usize] -= S::one();
        let f_t = &cache.f[t * d..(t + 1) * d];
        outer_acc(&mut grads.g[net.idx.out_w], v, d, &dlogits, f_t);
        df.iter_mut().for_each(|x| *x = S::zero());
        matvec_t_acc(out_w, v, d, &dlogits, &mut df);
        rmsnorm_backward(
            &cache.x_final[t * d..(t + 1) * d],
            g_f,
            cache.rms_f[t],
            &df,
            &mut dx[t * d..(t + 1) * d],
            &mut grads.g[net.idx.norm_f],
        );
    }

    let mut scratch_r = vec![S::zero(); rank.max(1)];
    let mut scratch_d = vec![S::zero(); d];
    let mut scratch_d2 = vec![S::zero(); d];
    let mut ds_hid = vec![S::zero(); hid];
    let mut du_hid = vec![S::zero(); hid];

    for (li, layer) in net.idx.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];

        // MLP backward: dx holds the gradient at the block output.
        let mut dx_mid = dx.clone();
        for t in 0..l_seq {
            let dmo = &dx[t * d..(t + 1) * d];
            ds_hid.iter_mut().for_each(|x| *x = S::zero());
            matvec_t_acc(&net.w[layer.w2], d, hid, dmo, &mut ds_hid);
            outer_acc(
                &mut grads.g[layer.w2],
                d,
                hid,
                dmo,
                &lc.s1[t * hid..(t + 1) * hid],
            );
            for j in 0..hid {
                du_hid[j] = ds_hid[j] * silu_prime(lc.u1[t * hid + j]);
            }
            outer_acc(
                &mut grads.g[layer.w1],
                hid,
                d,
                &du_hid,
                &lc.h2[t * d..(t + 1) * d],
            );
            scratch_d.iter_mut().for_each(|x| *x = S::zero());
            matvec_t_acc(&net.w[layer.w1], hid, d, &du_hid, &mut scratch_d);
            rmsnorm_backward(
                &lc.x_mid[t * d..(t + 1) * d],
                &net.w[layer.norm_m],
                lc.rms_m[t],
                &scratch_d,
                &mut dx_mid[t * d..(t + 1) * d],
                &mut grads.g[layer.norm_m],
            );
        }

        // Attention output projection backward: dx_mid is the gradient at
        // the attention block output (and flows through the residual).
        let mut dx_in = dx_mid.clone();
        let mut dc = vec![S::zero(); l_seq * d];
        let mut dy_scaled = vec![S::zero(); d];
        for t in 0..l_seq {
            let do_t = &dx_mid[t * d..(t + 1) * d];
            let ctx_t = &lc.ctx[t * d..(t + 1) * d];
            outer_acc(&mut grads.g[layer.wo], d, d, do_t, ctx_t);
            let dc_t = &mut dc[t * d..(t + 1) * d];
            matvec_t_acc(&net.w[layer.wo], d, d, do_t, dc_t);
            if let Some(ad) = layer.ad[3] {
                let a_vec = lc.a_mid[3].as_ref().expect("cached in forward");
                let a_t = &a_vec[t * rank..(t + 1) * rank];
                for i in 0..d {
                    dy_scaled[i] = scale * do_t[i];
                }
                outer_acc(&mut grads.g[ad.b], d, rank, &dy_scaled, a_t);
                scratch_r.iter_mut().for_each(|x| *x = S::zero());
                matvec_t_acc(&net.w[ad.b], d, rank, &dy_scaled, &mut scratch_r[..rank]);
                let mask = masks.and_then(|m| m.get(li, 3, t, d));
                if let Some(m) = mask {
                    for i in 0..d {
                        scratch_d[i] = ctx_t[i] * m[i];
                    }
                } else {
                    scratch_d.copy_from_slice(ctx_t);
                }
                outer_acc(&mut grads.g[ad.a], rank, d, &scratch_r[..rank], &scratch_d);
                scratch_d2.iter_mut().for_each(|x| *x = S::zero());
                matvec_t_acc(&net.w[ad.a], rank, d, &scratch_r[..rank], &mut scratch_d2);
                if let Some(m) = mask {
                    for i in 0..d {
                        dc_t[i] += scratch_d2[i] * m[i];
                    }
                } else {
                    for i in 0..d {
                        dc_t[i] += scratch_d2[i];
                    }
                }
            }
        }

        // Attention core backward.
        let mut dq = vec![S::zero(); l_seq * d];
        let mut dk = vec![S::zero(); l_seq * d];
        let mut dv = vec![S::zero(); l_seq * d];
        let mut da = vec![S::zero(); l_seq];
        for m in 0..nh {
            let base = m * hd;
            for t in 0..l_seq {
                let dctx = &dc[t * d + base..t * d + base + hd];
                let att_row = &lc.att[(m * l_seq + t) * l_seq..(m * l_seq + t + 1) * l_seq];
                for s in 0..=t {
                    let v_s = &lc.v[s * d + base..s * d + base + hd];
                    let mut dot = S::zero();
                    for i in 0..hd {
                        dot += dctx[i] * v_s[i];
                        dv[s * d + base + i] += att_row[s] * dctx[i];
                    }
                    da[s] = dot;
                }
                let mut proj = S::zero();
                for s in 0..=t {
                    proj += da[s] * att_row[s];
                }
                for s in 0..=t {
                    let dscore = att_row[s] * (da[s] - proj) * inv_sqrt;
                    let q_t = &lc.q[t * d + base..t * d + base + hd];
                    let k_s = &lc.k[s * d + base..s * d + base + hd];
                    for i in 0..hd {
                        dq[t * d + base + i] += dscore * k_s[i];
                        dk[s * d + base + i] += dscore * q_t[i];
                    }
                }
            }
        }

        // Projections and pre-attention norm.
        let mut dh = vec![S::zero(); d];
        for t in 0..l_seq {
            let h_t = &lc.h[t * d..(t + 1) * d];
            dh.iter_mut().for_each(|x| *x = S::zero());
            for (slot, (w_idx, dvec)) in [(layer.wq, &dq), (layer.wk, &dk), (layer.wv, &dv)]
                .into_iter()
                .enumerate()
            {
                let dvec_t = &dvec[t * d..(t + 1) * d];
                outer_acc(&mut grads.g[w_idx], d, d, dvec_t, h_t);
                matvec_t_acc(&net.w[w_idx], d, d, dvec_t, &mut dh);
                if let Some(ad) = layer.ad[slot] {
                    let a_vec = lc.a_mid[slot].as_ref().expect("cached in forward");
                    let a_t = &a_vec[t * rank..(t + 1) * rank];
                    for i in 0..d {
                        dy_scaled[i] = scale * dvec_t[i];
                    }
                    outer_acc(&mut grads.g[ad.b], d, rank, &dy_scaled, a_t);
                    scratch_r.iter_mut().for_each(|x| *x = S::zero());
                    matvec_t_acc(&net.w[ad.b], d, rank, &dy_scaled, &mut scratch_r[..rank]);
                    let mask = masks.and_then(|m| m.get(li, slot, t, d));
                    if let Some(mk) = mask {
                        for i in 0..d {
                            scratch_d[i] = h_t[i] * mk[i];
                        }
                    } else {
                        scratch_d.copy_from_slice(h_t);
                    }
                    outer_acc(&mut grads.g[ad.a], rank, d, &scratch_r[..rank], &scratch_d);
                    scratch_d2.iter_mut().for_each(|x| *x = S::zero());
                    matvec_t_acc(&net.w[ad.a], rank, d, &scratch_r[..rank], &mut scratch_d2);
                    if let Some(mk) = mask {
                        for i in 0..d {
                            dh[i] += scratch_d2[i] * mk[i];
                        }
                    } else {
                        for i in 0..d {
                            dh[i] += scratch_d2[i];
                        }
                    }
                }
            }
            rmsnorm_backward(
                &lc.x_in[t * d..(t + 1) * d],
                &net.w[layer.norm_a],
                lc.rms_a[t],
                &dh,
                &mut dx_in[t * d..(t + 1) * d],
                &mut grads.g[layer.norm_a],
            );
        }

        dx = dx_in;
    }

    // Embeddings.
    let dtok = &mut grads.g[net.idx.tok];
    for (t, &id) in ids.iter().enumerate() {
        for i in 0..d {
            dtok[id as usize * d + i] += dx[t * d + i];
        }
    }
    let dpos = &mut grads.g[net.idx.pos];
    for t in 0..l_seq {
        for i in 0..d {
            dpos[t * d + i] += dx[t * d + i];
        }
    }
}

/// Per-layer key/value cache for incremental decoding.
pub struct KvCache<S> {
    k: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            k: (0..n_layers).map(|_| Vec::new()).collect(),
            v: (0..n_layers).map(|_| Vec::new()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Feeds one token at `position` (which must equal the cache length) and
/// returns the next-token logits. Computes exactly the same values, bit for
/// bit, as the corresponding position of [`full_logits`].
pub fn step_logits<S: Scalar>(
    net: &Net<S>,
    cache: &mut KvCache<S>,
    token: u32,
    position: usize,
) -> Result<Vec<S>> {
    let cfg = &net.cfg;
    let (d, nh, hd, hid, v) = (
        cfg.embed_dim,
        cfg.n_heads,
        cfg.head_dim(),
        cfg.mlp_hidden(),
        cfg.vocab_size,
    );
    if token as usize >= v {
        return Err(Error::Validation(format!(
            "token id {token} is outside the vocabulary of size {v}"
        )));
    }
    if position >= cfg.max_seq_len {
        return Err(Error::Validation(format!(
            "position {position} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if position != cache.len {
        return Err(Error::Validation(format!(
            "position {position} does not match cache length {}",
            cache.len
        )));
    }
    let rank = net.lora.as_ref().map(|l| l.rank).unwrap_or(0);
    let scale = net.scale();
    let inv_sqrt = S::from_f64(1.0 / (hd as f64).sqrt());

    let tok_w = &net.w[net.idx.tok];
    let pos_w = &net.w[net.idx.pos];
    let mut x = vec![S::zero(); d];
    for i in 0..d {
        x[i] = tok_w[token as usize * d + i] + pos_w[position * d + i];
    }

    let mut h = vec![S::zero(); d];
    let mut q = vec![S::zero(); d];
    let mut scratch_in = vec![S::zero(); d];
    let mut scratch_d = vec![S::zero(); d];
    let mut a_out = vec![S::zero(); rank.max(1)];
    let mut scores = vec![S::zero(); position + 1];
    let mut ctx = vec![S::zero(); d];
    let mut u1 = vec![S::zero(); hid];
    let mut s1 = vec![S::zero(); hid];

    for (li, layer) in net.idx.layers.iter().enumerate() {
        rmsnorm(&x, &net.w[layer.norm_a], &mut h);

        // New k/v go straight into the cache; q stays local.
        let t_off = position * d;
        cache.k[li].resize(t_off + d, S::zero());
        cache.v[li].resize(t_off + d, S::zero());
        for (slot, w_idx) in [layer.wq, layer.wk, layer.wv].into_iter().enumerate() {
            let out_t: &mut [S] = match slot {
                0 => q.as_mut_slice(),
                1 => &mut cache.k[li][t_off..t_off + d],
                _ => &mut cache.v[li][t_off..t_off + d],
            };
            matvec(&net.w[w_idx], d, d, &h, out_t);
            if let Some(ad) = layer.ad[slot] {
                apply_adapter(
                    &net.w[ad.a],
                    &net.w[ad.b],
                    rank,
                    d,
                    scale,
                    &h,
                    None,
                    &mut a_out[..rank],
                    out_t,
                    &mut scratch_in,
                    &mut scratch_d,
                );
            }
        }

        ctx.iter_mut().for_each(|c| *c = S::zero());
        for m in 0..nh {
            let base = m * hd;
            let q_t = &q[base..base + hd];
            let mut maxv = S::neg_infinity();
            for s in 0..=position {
                let k_s = &cache.k[li][s * d + base..s * d + base + hd];
                let mut dot = S::zero();
                for i in 0..hd {
                    dot += q_t[i] * k_s[i];
                }
                let sc = dot * inv_sqrt;
                scores[s] = sc;
                if sc > maxv {
                    maxv = sc;
                }
            }
            let mut sum = S::zero();
            for s in 0..=position {
                let e = (scores[s] - maxv).exp();
                scores[s] = e;
                sum += e;
            }
            let ctx_m = &mut ctx[base..base + hd];
            for s in 0..=position {
                let a_ts = scores[s] / sum;
                let v_s = &cache.v[li][s * d + base..s * d + base + hd];
                for i in 0..hd {
                    ctx_m[i] += a_ts * v_s[i];
                }
            }
        }

        let mut o = vec![S::zero(); d];
        matvec(&net.w[layer.wo], d, d, &ctx, &mut o);
        if let Some(ad) = layer.ad[3] {
            apply_adapter(
                &net.w[ad.a],
                &net.w[ad.b],
                rank,
                d,
                scale,
                &ctx,
                None,
                &mut a_out[..rank],
                &mut o,
                &mut scratch_in,
                &mut scratch_d,
            );
        }
        for i in 0..d {
            x[i] += o[i];
        }

        rmsnorm(&x, &net.w[layer.norm_m], &mut h);
        matvec(&net.w[layer.w1], hid, d, &h, &mut u1);
        for j in 0..hid {
            s1[j] = silu(u1[j]);
        }
        matvec(&net.w[layer.w2], d, hid, &s1, &mut scratch_d);
        for i in 0..d {
            x[i] += scratch_d[i];
        }
    }

    rmsnorm(&x, &net.w[net.idx.norm_f], &mut h);
    let mut logits = vec![S::zero(); v];
    matvec(&net.w[net.idx.out_w], v, d, &h, &mut logits);
    cache.len += 1;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, ModelCheckpoint, ModelConfig};
    use rand_distr::{Distribution, Normal};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 8,
            max_seq_len: 16,
        }
    }

    fn tiny_lora() -> LoraConfig {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            ..LoraConfig::default()
        }
    }

    /// Replaces every parameter with fresh noise so gradients flow through
    /// adapter factors too (B is zero-initialized otherwise).
    fn randomize(ckpt: &mut ModelCheckpoint, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f64, 0.3).unwrap();
        for p in ckpt.params_mut() {
            for v in p.values.iter_mut() {
                *v = dist.sample(&mut rng) as f32;
            }
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let ckpt = ModelCheckpoint::init(tiny_config(), 0).unwrap();
        let net: Net<f32> = Net::from_checkpoint(&ckpt).unwrap();
        assert!(full_logits(&net, &[]).is_err());
        assert!(full_logits(&net, &[0; 17]).is_err());
        assert!(full_logits(&net, &[11]).is_err());
        assert!(seq_forward_loss(&net, &[1], None).is_err());
    }

    #[test]
    fn probabilities_are_normalized() {
        let mut ckpt = ModelCheckpoint::init(tiny_config(), 1).unwrap();
        randomize(&mut ckpt, 2);
        let net: Net<f64> = Net::from_checkpoint(&ckpt).unwrap();
        let ids = [3u32, 7, 1, 4, 9, 2];
        let sl = seq_forward_loss(&net, &ids, None).unwrap();
        assert!(sl.loss_sum.is_finite());
        assert_eq!(sl.n_pred, 5);
        let v = net.cfg.vocab_size;
        for t in 0..sl.n_pred {
            let total: f64 = sl.probs[t * v..(t + 1) * v].iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "position {t}: {total}");
        }
    }

    #[test]
    fn fresh_adapters_do_not_change_logits() {
        let base = ModelCheckpoint::init(tiny_config(), 3).unwrap();
        let with = base
            .with_adapters(
                LoraConfig {
                    dropout: 0.0,
                    ..tiny_lora()
                },
                4,
            )
            .unwrap();
        let nb: Net<f32> = Net::from_checkpoint(&base).unwrap();
        let nw: Net<f32> = Net::from_checkpoint(&with).unwrap();
        let ids = [1u32, 5, 9, 2, 7];
        let lb = full_logits(&nb, &ids).unwrap();
        let lw = full_logits(&nw, &ids).unwrap();
        for (a, b) in lb.iter().flatten().zip(lw.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward_bitwise() {
        let mut ckpt = ModelCheckpoint::init(tiny_config(), 5).unwrap();
        randomize(&mut ckpt, 6);
        let ckpt = ckpt.with_adapters(tiny_lora(), 7).unwrap();
        let net: Net<f32> = Net::from_checkpoint(&ckpt).unwrap();
        let ids = [2u32, 8, 1, 1, 6, 10, 3];
        let full = full_logits(&net, &ids).unwrap();
        let mut cache = KvCache::new(net.cfg.n_layers);
        for (t, &id) in ids.iter().enumerate() {
            let step = step_logits(&net, &mut cache, id, t).unwrap();
            for (a, b) in full[t].iter().zip(&step) {
                assert_eq!(a.to_bits(), b.to_bits(), "position {t}");
            }
        }
        assert_eq!(cache.len(), ids.len());
    }

    #[test]
    fn kv_cache_rejects_position_skips() {
        let ckpt = ModelCheckpoint::init(tiny_config(), 0).unwrap();
        let net: Net<f32> = Net::from_checkpoint(&ckpt).unwrap();
        let mut cache = KvCache::new(net.cfg.n_layers);
        step_logits(&net, &mut cache, 1, 0).unwrap();
        assert!(step_logits(&net, &mut cache, 1, 2).is_err());
        assert!(step_logits(&net, &mut cache, 99, 1).is_err());
    }

    fn gradcheck(ckpt: &ModelCheckpoint, ids: &[u32], dropout_seed: Option<u64>) {
        let net: Net<f64> = Net::from_checkpoint(ckpt).unwrap();
        let masks = dropout_seed.and_then(|s| dropout_masks(&net, ids.len(), s));
        let sl = seq_forward_loss(&net, ids, masks.as_ref()).unwrap();
        let mut grads = Grads::zeros_like(&net);
        seq_backward(&net, ids, &sl, masks.as_ref(), &mut grads);

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let h = 1e-6;
        let mut checked = 0usize;
        let mut failures = Vec::new();
        for p_idx in 0..net.w.len() {
            let n = net.w[p_idx].len();
            let n_samples = n.min(6);
            for _ in 0..n_samples {
                let e_idx = rng.random_range(0..n);
                let mut net_p = net.clone();
                net_p.w[p_idx][e_idx] += h;
                let lp = seq_forward_loss(&net_p, ids, masks.as_ref()).unwrap().loss_sum;
                let mut net_m = net.clone();
                net_m.w[p_idx][e_idx] -= h;
                let lm = seq_forward_loss(&net_m, ids, masks.as_ref()).unwrap().loss_sum;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads.g[p_idx][e_idx];
                let denom = numeric.abs().max(analytic.abs());
                let ok = if denom < 1e-8 {
                    (numeric - analytic).abs() < 1e-8
                } else {
                    (numeric - analytic).abs() / denom < 1e-4
                };
                checked += 1;
                if !ok {
                    failures.push(format!(
                        "{}[{e_idx}]: analytic {analytic:.3e}, numeric {numeric:.3e}",
                        net.names[p_idx]
                    ));
                }
            }
        }
        assert!(checked > 100);
        assert!(
            failures.len() * 100 < checked,
            "{} of {} sampled gradients disagree:\n{}",
            failures.len(),
            checked,
            failures.join("\n")
        );
    }

    #[test]
    fn analytic_gradients_match_finite_differences_base() {
        let mut ckpt = ModelCheckpoint::init(tiny_config(), 11).unwrap();
        randomize(&mut ckpt, 12);
        gradcheck(&ckpt, &[4u32, 1, 9, 2, 6, 3, 10, 5], None);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_with_adapters_and_dropout() {
        let mut ckpt = ModelCheckpoint::init(tiny_config(), 13).unwrap();
        let mut ckpt2 = ckpt.with_adapters(tiny_lora(), 14).unwrap();
        randomize(&mut ckpt2, 15);
        ckpt = ckpt2;
        gradcheck(&ckpt, &[7u32, 3, 1, 8, 2, 5], Some(21));
    }
}
