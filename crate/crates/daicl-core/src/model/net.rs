//! Transformer forward passes, prediction heads and the training losses.
//!
//! One pre-norm transformer serves both architectures: full attention for the
//! bidirectional encoder, a lower-triangular mask for the causal decoder. The
//! MLM and next-token heads share the token embedding table as their output
//! projection. Low-rank adapters, when attached, contribute
//! `(α/r)·(dropout(x)·Aᵀ)·Bᵀ` alongside the frozen query/value projections.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{Attention, ParamStore};
use super::tape::{NodeId, Tape};
use super::ModelError;
use crate::prompt::{DecRegion, DecoderInstance, EncoderInstance, InstanceLabel};
use crate::rng::DeterministicRng;

/// Additive attention-mask value for disallowed positions. Large enough that
/// `exp` underflows to exactly zero, so masked positions contribute nothing,
/// bit for bit.
const MASK_NEG: f64 = -1e30;

static MLM_HEAD_CALLS: core::sync::atomic::AtomicUsize = core::sync::atomic::AtomicUsize::new(0);

/// Process-wide count of MLM head invocations, for asserting that
/// task-only variants never touch the masked-token head.
pub fn mlm_head_calls() -> usize {
    MLM_HEAD_CALLS.load(core::sync::atomic::Ordering::Relaxed)
}

fn check_ids(store: &ParamStore, ids: &[u32]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::ShapeMismatch("empty token sequence"));
    }
    if ids.len() > store.cfg.max_len {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max_len: store.cfg.max_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= store.cfg.vocab) {
        return Err(ModelError::BadTokenId {
            id: bad,
            vocab: store.cfg.vocab,
        });
    }
    Ok(())
}

fn dropout_mask(rng: &mut DeterministicRng, len: usize, p: f64) -> Vec<f64> {
    use rand::Rng;
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// A projection `x·Wᵀ (+ b)`, plus the adapter path when one is attached to
/// this weight.
fn projection(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    weight: &str,
    bias: Option<&str>,
    dropout_rng: &mut Option<&mut DeterministicRng>,
) -> NodeId {
    let w = tape.param(store, weight);
    let wx = tape.matmul(x, w, false, true);
    let base = match bias {
        Some(bias) => {
            let b = tape.param(store, bias);
            tape.add_row(wx, b)
        }
        None => wx,
    };
    let lora_a = alloc::format!("{weight}.lora_a");
    if !store.has(&lora_a) {
        return base;
    }
    let ad = store.cfg.adapter.expect("adapter entries imply a config");
    let a = tape.param(store, &lora_a);
    let bmat = tape.param(store, &alloc::format!("{weight}.lora_b"));
    let lora_in = match dropout_rng {
        Some(rng) if ad.dropout > 0.0 => {
            let n = tape.value(x).data.len();
            let mask = dropout_mask(rng, n, ad.dropout);
            tape.mul_const(x, mask)
        }
        _ => x,
    };
    let xa = tape.matmul(lora_in, a, false, true);
    let xab = tape.matmul(xa, bmat, false, true);
    let scaled = tape.scale(xab, ad.alpha / ad.rank as f64);
    tape.add(base, scaled)
}

/// Full transformer stack over `ids`, returning the final-layer-normed
/// hidden states (n × dim). Deterministic given parameters and the dropout
/// stream; pass `None` for evaluation.
pub fn transformer_hidden(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &[u32],
    mut dropout_rng: Option<&mut DeterministicRng>,
) -> Result<NodeId, ModelError> {
    check_ids(store, ids)?;
    let cfg = &store.cfg;
    let n = ids.len();
    let (heads, dh) = (cfg.heads, cfg.head_dim());

    let tok_emb = tape.param(store, "tok_emb");
    let pos_emb = tape.param(store, "pos_emb");
    let tok = tape.gather(tok_emb, ids);
    let positions: Vec<u32> = (0..n as u32).collect();
    let pos = tape.gather(pos_emb, &positions);
    let mut h = tape.add(tok, pos);

    let causal_mask: Option<Vec<f64>> = match cfg.attention {
        Attention::Bidirectional => None,
        Attention::Causal => {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = MASK_NEG;
                }
            }
            Some(m)
        }
    };

    for l in 0..cfg.layers {
        let p = |s: &str| alloc::format!("l{l}.{s}");
        let g1 = tape.param(store, &p("ln1.g"));
        let b1 = tape.param(store, &p("ln1.b"));
        let ln1 = tape.layer_norm(h, g1, b1);
        let q = projection(tape, store, ln1, &p("attn.wq"), Some(&p("attn.bq")), &mut dropout_rng);
        let k = projection(tape, store, ln1, &p("attn.wk"), None, &mut dropout_rng);
        let v = projection(tape, store, ln1, &p("attn.wv"), Some(&p("attn.bv")), &mut dropout_rng);
        let mut head_outputs = Vec::with_capacity(heads);
        let scale = 1.0 / libm::sqrt(dh as f64);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let qk = tape.matmul(qh, kh, false, true);
            let mut scores = tape.scale(qk, scale);
            if let Some(mask) = &causal_mask {
                scores = tape.add_const(scores, mask);
            }
            let att = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(att, vh, false, false));
        }
        let merged = tape.concat_cols(&head_outputs);
        let wo = tape.param(store, &p("attn.wo"));
        let bo = tape.param(store, &p("attn.bo"));
        let proj = tape.matmul(merged, wo, false, true);
        let attn_out = tape.add_row(proj, bo);
        h = tape.add(h, attn_out);

        let g2 = tape.param(store, &p("ln2.g"));
        let b2 = tape.param(store, &p("ln2.b"));
        let ln2 = tape.layer_norm(h, g2, b2);
        let w1 = tape.param(store, &p("mlp.w1"));
        let b1f = tape.param(store, &p("mlp.b1"));
        let up = tape.matmul(ln2, w1, false, true);
        let up_b = tape.add_row(up, b1f);
        let act = tape.gelu(up_b);
        let w2 = tape.param(store, &p("mlp.w2"));
        let b2f = tape.param(store, &p("mlp.b2"));
        let down = tape.matmul(act, w2, false, true);
        let mlp_out = tape.add_row(down, b2f);
        h = tape.add(h, mlp_out);
    }
    let gf = tape.param(store, "ln_f.g");
    let bf = tape.param(store, "ln_f.b");
    Ok(tape.layer_norm(h, gf, bf))
}

/// Bidirectional hidden states; rejects causal configurations.
pub fn forward_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &[u32],
) -> Result<NodeId, ModelError> {
    if store.cfg.attention != Attention::Bidirectional {
        return Err(ModelError::WrongArchitecture("encoder pass needs a bidirectional model"));
    }
    transformer_hidden(tape, store, ids, None)
}

/// Per-position next-token logits (n × vocab) of a causal model; the logits
/// at position `i` depend only on `ids[0..=i]`.
pub fn forward_decoder(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &[u32],
    dropout_rng: Option<&mut DeterministicRng>,
) -> Result<NodeId, ModelError> {
    if store.cfg.attention != Attention::Causal {
        return Err(ModelError::WrongArchitecture("decoder pass needs a causal model"));
    }
    let hidden = transformer_hidden(tape, store, ids, dropout_rng)?;
    let tok_emb = tape.param(store, "tok_emb");
    Ok(tape.matmul(hidden, tok_emb, false, true))
}

/// Log-distributions over the vocabulary at the masked positions
/// (|M| × vocab), through the embedding-tied MLM head.
pub fn mlm_log_probs(
    tape: &mut Tape,
    store: &ParamStore,
    hidden: NodeId,
    mask_positions: &[usize],
) -> Result<NodeId, ModelError> {
    if !store.cfg.mlm_head {
        return Err(ModelError::MissingHead("mlm"));
    }
    if mask_positions.is_empty() {
        return Err(ModelError::EmptyMaskSet);
    }
    MLM_HEAD_CALLS.fetch_add(1, core::sync::atomic::Ordering::Relaxed);
    let rows = tape.select_rows(hidden, mask_positions);
    let tok_emb = tape.param(store, "tok_emb");
    let logits = tape.matmul(rows, tok_emb, false, true);
    Ok(tape.log_softmax_rows(logits))
}

/// Log-distribution over classes (1 × C) from mean-pooled SOURCE positions.
pub fn pooled_class_log_probs(
    tape: &mut Tape,
    store: &ParamStore,
    hidden: NodeId,
    source_positions: &[usize],
) -> Result<NodeId, ModelError> {
    if store.cfg.classifier_classes.is_none() {
        return Err(ModelError::MissingHead("classifier"));
    }
    if source_positions.is_empty() {
        return Err(ModelError::EmptySource);
    }
    let pooled = tape.mean_rows(hidden, source_positions);
    let w = tape.param(store, "cls.w");
    let b = tape.param(store, "cls.b");
    let wx = tape.matmul(pooled, w, false, true);
    let logits = tape.add_row(wx, b);
    Ok(tape.log_softmax_rows(logits))
}

/// Per-position emission scores (rows × K) for the CRF.
pub fn emission_scores(
    tape: &mut Tape,
    store: &ParamStore,
    hidden: NodeId,
    positions: &[usize],
) -> Result<NodeId, ModelError> {
    if store.cfg.emission_tags.is_none() {
        return Err(ModelError::MissingHead("emission"));
    }
    if positions.is_empty() {
        return Err(ModelError::EmptySource);
    }
    let rows = tape.select_rows(hidden, positions);
    let w = tape.param(store, "emit.w");
    let b = tape.param(store, "emit.b");
    let wx = tape.matmul(rows, w, false, true);
    Ok(tape.add_row(wx, b))
}

/// CRF negative log-likelihood of `tags` over emission rows.
pub fn crf_loss(
    tape: &mut Tape,
    store: &ParamStore,
    emissions: NodeId,
    tags: &[usize],
) -> Result<NodeId, ModelError> {
    let trans = tape.param(store, "crf.trans");
    let start = tape.param(store, "crf.start");
    let end = tape.param(store, "crf.end");
    tape.crf_nll(emissions, trans, start, end, tags.to_vec())
}

/// Joint encoder objective: task negative log-likelihood plus `λ` times the
/// mean masked-token negative log-likelihood.
#[derive(Debug, Clone, Copy)]
pub struct JointLossParts {
    pub loss: NodeId,
    pub total: f64,
    pub task_nll: f64,
    pub mlm_nll: f64,
}

/// Builds the joint loss for a (possibly mask-free) encoder instance.
///
/// Unmasked instances and instances with zero masked positions contribute no
/// MLM term, so the loss collapses to the task objective alone. Label-free
/// instances (adaptive pre-training) use the MLM term alone, unscaled.
pub fn encoder_joint_loss(
    tape: &mut Tape,
    store: &ParamStore,
    inst: &EncoderInstance,
    lambda: f64,
) -> Result<JointLossParts, ModelError> {
    let hidden = forward_encoder(tape, store, &inst.ids)?;
    let task = match &inst.label {
        InstanceLabel::Class(c) => {
            let logp = pooled_class_log_probs(tape, store, hidden, &inst.source_positions())?;
            Some(tape.nll_sum(logp, vec![*c], vec![1.0]))
        }
        InstanceLabel::Tags(tags) => {
            let src = inst.source_positions();
            if tags.len() != src.len() {
                return Err(ModelError::ShapeMismatch("tags must align to source positions"));
            }
            let em = emission_scores(tape, store, hidden, &src)?;
            Some(crf_loss(tape, store, em, tags)?)
        }
        InstanceLabel::Unlabeled => None,
    };
    let mlm = if inst.mask_positions.is_empty() {
        None
    } else {
        let logp = mlm_log_probs(tape, store, hidden, &inst.mask_positions)?;
        let targets: Vec<usize> = inst.mask_targets.iter().map(|&t| t as usize).collect();
        let w = 1.0 / targets.len() as f64;
        let weights = vec![w; targets.len()];
        Some(tape.nll_sum(logp, targets, weights))
    };
    let (loss, task_nll, mlm_nll) = match (task, mlm) {
        (Some(t), Some(m)) => {
            let scaled = tape.scale(m, lambda);
            let combined = tape.add(t, scaled);
            (combined, tape.scalar(t), tape.scalar(m))
        }
        (Some(t), None) => (t, tape.scalar(t), 0.0),
        (None, Some(m)) => (m, 0.0, tape.scalar(m)),
        (None, None) => return Err(ModelError::EmptyLoss),
    };
    Ok(JointLossParts {
        loss,
        total: tape.scalar(loss),
        task_nll,
        mlm_nll,
    })
}

/// Next-token loss over the masked-in positions of a decoder instance,
/// with its per-region decomposition.
#[derive(Debug, Clone, Copy)]
pub struct CausalLossParts {
    /// Sum over counted positions, as a graph node.
    pub loss_sum: NodeId,
    pub count: usize,
    pub total: f64,
    pub mean: f64,
    /// Sums over TEMPLATE, CONTEXT, SOURCE, RESPONSE targets, in that order.
    pub region_sums: [f64; 4],
}

fn region_slot(r: DecRegion) -> usize {
    match r {
        DecRegion::Template => 0,
        DecRegion::Context => 1,
        DecRegion::Source => 2,
        DecRegion::Response => 3,
    }
}

/// Computes `Σ_i −log p(t_i | t_<i)` over positions `i ≥ 1` with
/// `loss_mask[i]` set. Position regions attribute each term to the
/// template/context/source/response bucket of its target token.
pub fn causal_lm_loss(
    tape: &mut Tape,
    store: &ParamStore,
    inst: &DecoderInstance,
    dropout_rng: Option<&mut DeterministicRng>,
) -> Result<CausalLossParts, ModelError> {
    if store.cfg.attention != Attention::Causal {
        return Err(ModelError::WrongArchitecture("causal loss needs a causal model"));
    }
    if inst.loss_mask.len() != inst.ids.len() {
        return Err(ModelError::ShapeMismatch("loss mask length"));
    }
    let counted: Vec<usize> = (1..inst.ids.len()).filter(|&i| inst.loss_mask[i]).collect();
    if counted.is_empty() {
        return Err(ModelError::EmptyLossMask);
    }
    let hidden = transformer_hidden(tape, store, &inst.ids, dropout_rng)?;
    // Only the rows that predict a counted token are projected to logits.
    let rows: Vec<usize> = counted.iter().map(|&i| i - 1).collect();
    let picked = tape.select_rows(hidden, &rows);
    let tok_emb = tape.param(store, "tok_emb");
    let logits = tape.matmul(picked, tok_emb, false, true);
    let logp = tape.log_softmax_rows(logits);
    let targets: Vec<usize> = counted.iter().map(|&i| inst.ids[i] as usize).collect();
    let weights = vec![1.0; targets.len()];
    let loss_sum = tape.nll_sum(logp, targets.clone(), weights);

    let mut region_sums = [0.0f64; 4];
    for (row, &i) in counted.iter().enumerate() {
        let nll = -tape.value(logp).at(row, targets[row]);
        region_sums[region_slot(inst.region[i])] += nll;
    }
    let total = tape.scalar(loss_sum);
    Ok(CausalLossParts {
        loss_sum,
        count: counted.len(),
        total,
        mean: total / counted.len() as f64,
        region_sums,
    })
}

/// Greedy argmax decoding from a prompt prefix; ties take the smallest id.
/// Stops at `stop_id`, `max_new` tokens, or the model's length limit, and
/// returns only the generated suffix.
pub fn greedy_decode(
    store: &ParamStore,
    prefix: &[u32],
    max_new: usize,
    stop_id: u32,
) -> Result<Vec<u32>, ModelError> {
    let mut ids = prefix.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if ids.len() >= store.cfg.max_len {
            break;
        }
        let mut tape = Tape::new();
        let logits = forward_decoder(&mut tape, store, &ids, None)?;
        let last = tape.value(logits).row(ids.len() - 1).to_vec();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, &x) in last.iter().enumerate() {
            if x > best.1 {
                best = (j, x);
            }
        }
        let next = best.0 as u32;
        ids.push(next);
        out.push(next);
        if next == stop_id {
            break;
        }
    }
    Ok(out)
}

/// Sentence embedding through a trained encoder: mean-pooled final hidden
/// states, L2-normalized. Implements the model-backed retrieval embedder.
pub struct EncoderEmbedder<'a> {
    pub store: &'a ParamStore,
    pub vocab: &'a crate::embed::Vocabulary,
}

impl crate::embed::TextEmbedder for EncoderEmbedder<'_> {
    fn dim(&self) -> usize {
        self.store.cfg.dim
    }

    fn embed(&self, text: &str) -> (Vec<f64>, bool) {
        let toks = crate::embed::tokenize(text);
        let dim = self.store.cfg.dim;
        let fallback = || {
            let mut v = vec![0.0; dim];
            v[0] = 1.0;
            (v, true)
        };
        if toks.is_empty() {
            return fallback();
        }
        let mut ids: Vec<u32> = toks
            .iter()
            .map(|t| self.vocab.id_or_unk(t.as_str()))
            .collect();
        ids.truncate(self.store.cfg.max_len);
        let mut tape = Tape::new();
        let Ok(hidden) = transformer_hidden(&mut tape, self.store, &ids, None) else {
            return fallback();
        };
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pooled = tape.mean_rows(hidden, &positions);
        let mut v = tape.value(pooled).data.clone();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 {
            return fallback();
        }
        for x in &mut v {
            *x /= norm;
        }
        (v, false)
    }
}
