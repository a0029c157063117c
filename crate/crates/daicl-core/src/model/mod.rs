//! A small exact-gradient transformer with MLM, classifier and CRF heads,
//! low-rank adapters, and the joint training losses.
//!
//! Everything runs in `f64` on a reverse-mode tape ([`tape::Tape`]); every
//! loss is verifiable against central finite differences via
//! [`gradcheck::finite_diff_check`]. The CRF layer's likelihood and Viterbi
//! decoding are checked against exhaustive path enumeration in the tests.

use core::fmt;

pub mod crf;
pub mod gradcheck;
pub mod mat;
pub mod net;
pub mod params;
pub mod tape;

pub use crf::{crf_decode, crf_nll, log_partition, path_score};
pub use gradcheck::{finite_diff_check, randomize_for_check, GradCheckReport};
pub use mat::Mat;
pub use net::{
    causal_lm_loss, crf_loss, emission_scores, encoder_joint_loss, forward_decoder,
    forward_encoder, greedy_decode, mlm_head_calls, mlm_log_probs, pooled_class_log_probs,
    transformer_hidden, CausalLossParts, EncoderEmbedder, JointLossParts,
};
pub use params::{AdapterConfig, Attention, Gradients, ModelConfig, ParamStore};
pub use tape::{NodeId, Tape};

/// Errors from model construction, forward passes and losses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    TooLong { len: usize, max_len: usize },
    BadTokenId { id: u32, vocab: usize },
    EmptyMaskSet,
    EmptySource,
    EmptyLossMask,
    /// No task label and no masked positions: nothing to optimize.
    EmptyLoss,
    BadTag { tag: usize, k: usize },
    /// `backward` called twice on one tape.
    GraphReuse,
    ShapeMismatch(&'static str),
    WrongArchitecture(&'static str),
    MissingHead(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::TooLong { len, max_len } => {
                write!(f, "sequence length {len} exceeds max_len {max_len}")
            }
            ModelError::BadTokenId { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of {vocab}")
            }
            ModelError::EmptyMaskSet => f.write_str("no masked positions"),
            ModelError::EmptySource => f.write_str("no source positions"),
            ModelError::EmptyLossMask => f.write_str("loss mask selects no position past the first"),
            ModelError::EmptyLoss => f.write_str("instance has neither label nor masked positions"),
            ModelError::BadTag { tag, k } => write!(f, "tag {tag} outside [0, {k})"),
            ModelError::GraphReuse => f.write_str("backward called twice without a new forward"),
            ModelError::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            ModelError::WrongArchitecture(what) => f.write_str(what),
            ModelError::MissingHead(which) => write!(f, "model has no {which} head"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for ModelError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Vocabulary;
    use crate::prompt::{
        apply_mlm_mask, build_decoder_instance, build_encoder_instance, loss_mask_for_variant,
        DecRegion, EncoderInstance, InstanceLabel, PromptTemplate, Task,
    };
    use crate::rng::rng_from_seed;
    use crate::trainer::Variant;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;

    fn toks(words: &[&str]) -> Vec<crate::corpus::Token> {
        words
            .iter()
            .map(|w| crate::corpus::Token::new(w).unwrap())
            .collect()
    }

    fn test_vocab(n_words: usize) -> Vocabulary {
        let mut v = Vocabulary::new();
        for i in 0..n_words {
            v.intern(&alloc::format!("w{i}"));
        }
        v
    }

    fn enc_cfg(vocab: usize) -> ModelConfig {
        ModelConfig::encoder(vocab, 16, 2, 2, 64)
            .with_classifier(3)
            .with_emissions(3)
    }

    fn sa_instance(vocab: &Vocabulary, masked: bool) -> EncoderInstance {
        let src = toks(&["w0", "w1", "w2"]);
        let ctx1 = toks(&["w3", "w4", "w5", "w6"]);
        let ctx2 = toks(&["w7", "w8", "w9", "w1"]);
        let inst = build_encoder_instance(
            &src,
            InstanceLabel::Class(1),
            &[ctx1, ctx2],
            vocab,
            64,
        )
        .unwrap();
        if masked {
            let mut rng = rng_from_seed(5);
            apply_mlm_mask(inst, 0.3, &mut rng).unwrap()
        } else {
            inst
        }
    }

    #[test]
    fn encoder_is_deterministic_and_shaped() {
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 3).unwrap();
        let ids = [6u32, 7, 8];
        let mut t1 = Tape::new();
        let h1 = forward_encoder(&mut t1, &store, &ids).unwrap();
        let mut t2 = Tape::new();
        let h2 = forward_encoder(&mut t2, &store, &ids).unwrap();
        assert_eq!(t1.value(h1), t2.value(h2));
        assert_eq!(t1.value(h1).rows, 3);
        assert_eq!(t1.value(h1).cols, 16);
        // Length-1 input gives a 1×d output.
        let mut t3 = Tape::new();
        let h3 = forward_encoder(&mut t3, &store, &[6]).unwrap();
        assert_eq!((t3.value(h3).rows, t3.value(h3).cols), (1, 16));
    }

    #[test]
    fn encoder_attends_bidirectionally() {
        // Swapping two CONTEXT tokens must change SOURCE hidden states.
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 3).unwrap();
        let a = [6u32, 7, 3, 8, 9];
        let b = [6u32, 7, 3, 9, 8];
        let mut ta = Tape::new();
        let ha = forward_encoder(&mut ta, &store, &a).unwrap();
        let mut tb = Tape::new();
        let hb = forward_encoder(&mut tb, &store, &b).unwrap();
        let diff: f64 = ta.value(ha).row(0).iter().zip(tb.value(hb).row(0))
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-12, "source positions must see context changes");
    }

    #[test]
    fn too_long_and_bad_ids_are_rejected() {
        let store = ParamStore::init(ModelConfig::encoder(8, 8, 1, 2, 4), 0).unwrap();
        let mut t = Tape::new();
        assert!(matches!(
            forward_encoder(&mut t, &store, &[1, 1, 1, 1, 1]).unwrap_err(),
            ModelError::TooLong { len: 5, max_len: 4 }
        ));
        let mut t = Tape::new();
        assert!(matches!(
            forward_encoder(&mut t, &store, &[9]).unwrap_err(),
            ModelError::BadTokenId { id: 9, vocab: 8 }
        ));
    }

    #[test]
    fn decoder_is_causal_bitwise() {
        let store = ParamStore::init(ModelConfig::decoder(12, 16, 2, 2, 32), 9).unwrap();
        let base = [4u32, 6, 7, 8, 9, 10];
        let mut t1 = Tape::new();
        let l1 = forward_decoder(&mut t1, &store, &base, None).unwrap();
        for j in 1..base.len() {
            let mut changed = base;
            changed[j] = 11;
            let mut t2 = Tape::new();
            let l2 = forward_decoder(&mut t2, &store, &changed, None).unwrap();
            for i in 0..j {
                assert_eq!(
                    t1.value(l1).row(i),
                    t2.value(l2).row(i),
                    "perturbing position {j} leaked into logits at {i}"
                );
            }
        }
        // Shared prefixes produce identical prefix logits.
        let mut t3 = Tape::new();
        let l3 = forward_decoder(&mut t3, &store, &base[..4], None).unwrap();
        for i in 0..4 {
            assert_eq!(t1.value(l1).row(i), t3.value(l3).row(i));
        }
    }

    #[test]
    fn causality_property_randomized() {
        let store = ParamStore::init(ModelConfig::decoder(20, 16, 2, 2, 24), 17).unwrap();
        let mut rng = rng_from_seed(31);
        for _ in 0..25 {
            let n = rng.gen_range(2..12usize);
            let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..20u32)).collect();
            let j = rng.gen_range(1..n);
            let mut changed = ids.clone();
            changed[j] = (changed[j] + 1 + rng.gen_range(0..18u32)) % 20;
            let mut t1 = Tape::new();
            let l1 = forward_decoder(&mut t1, &store, &ids, None).unwrap();
            let mut t2 = Tape::new();
            let l2 = forward_decoder(&mut t2, &store, &changed, None).unwrap();
            for i in 0..j {
                assert_eq!(t1.value(l1).row(i), t2.value(l2).row(i));
            }
        }
    }

    #[test]
    fn mlm_log_probs_normalize_and_shape() {
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 1).unwrap();
        let inst = sa_instance(&vocab, true);
        assert!(!inst.mask_positions.is_empty());
        let mut tape = Tape::new();
        let hidden = forward_encoder(&mut tape, &store, &inst.ids).unwrap();
        let logp = mlm_log_probs(&mut tape, &store, hidden, &inst.mask_positions).unwrap();
        let v = tape.value(logp);
        assert_eq!(v.rows, inst.mask_positions.len());
        for i in 0..v.rows {
            let s: f64 = v.row(i).iter().map(|&x| libm::exp(x)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let mut t2 = Tape::new();
        let hidden2 = forward_encoder(&mut t2, &store, &inst.ids).unwrap();
        assert!(matches!(
            mlm_log_probs(&mut t2, &store, hidden2, &[]).unwrap_err(),
            ModelError::EmptyMaskSet
        ));
    }

    #[test]
    fn zeroed_parameters_give_uniform_mlm_distribution() {
        let vocab = test_vocab(10);
        let mut store = ParamStore::init(enc_cfg(vocab.len()), 1).unwrap();
        for i in 0..store.num_entries() {
            let m = store.entry_value_mut(i);
            for x in &mut m.data {
                *x = 0.0;
            }
        }
        let inst = sa_instance(&vocab, true);
        let mut tape = Tape::new();
        let hidden = forward_encoder(&mut tape, &store, &inst.ids).unwrap();
        let logp = mlm_log_probs(&mut tape, &store, hidden, &inst.mask_positions).unwrap();
        let expect = -libm::log(vocab.len() as f64);
        for &x in &tape.value(logp).data {
            assert!((x - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_head_properties() {
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 2).unwrap();
        let ids = [6u32, 7, 8, 9];
        let mut tape = Tape::new();
        let hidden = forward_encoder(&mut tape, &store, &ids).unwrap();
        // Single position: pool equals that row's prediction.
        let single = pooled_class_log_probs(&mut tape, &store, hidden, &[2]).unwrap();
        // Duplicated positions leave the mean unchanged.
        let doubled = pooled_class_log_probs(&mut tape, &store, hidden, &[2, 2]).unwrap();
        assert_eq!(tape.value(single), tape.value(doubled));
        let mixed = pooled_class_log_probs(&mut tape, &store, hidden, &[0, 1]).unwrap();
        let mixed_dup = pooled_class_log_probs(&mut tape, &store, hidden, &[0, 1, 0, 1]).unwrap();
        for (a, b) in tape.value(mixed).data.iter().zip(&tape.value(mixed_dup).data) {
            assert!((a - b).abs() < 1e-12);
        }
        let s: f64 = tape.value(mixed).data.iter().map(|&x| libm::exp(x)).sum();
        assert!((s - 1.0).abs() < 1e-9);
        let mut t2 = Tape::new();
        let h2 = forward_encoder(&mut t2, &store, &ids).unwrap();
        assert!(matches!(
            pooled_class_log_probs(&mut t2, &store, h2, &[]).unwrap_err(),
            ModelError::EmptySource
        ));
    }

    #[test]
    fn joint_loss_combines_components() {
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 4).unwrap();
        let inst = sa_instance(&vocab, true);
        let mut tape = Tape::new();
        let parts = encoder_joint_loss(&mut tape, &store, &inst, 0.2).unwrap();
        assert!((parts.total - (parts.task_nll + 0.2 * parts.mlm_nll)).abs() < 1e-12);
        // λ = 0 collapses to the task loss exactly.
        let mut t0 = Tape::new();
        let p0 = encoder_joint_loss(&mut t0, &store, &inst, 0.0).unwrap();
        assert_eq!(p0.total, p0.task_nll);
        // No masked positions: task loss alone, bit-exact.
        let unmasked = sa_instance(&vocab, false);
        let mut t1 = Tape::new();
        let p1 = encoder_joint_loss(&mut t1, &store, &unmasked, 0.2).unwrap();
        assert_eq!(p1.total, p1.task_nll);
        assert_eq!(p1.mlm_nll, 0.0);
    }

    #[test]
    fn mlm_gradient_does_not_touch_classifier() {
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 4).unwrap();
        let inst = sa_instance(&vocab, true);
        // Loss = λ·mlm alone: classifier head is outside the graph.
        let mut tape = Tape::new();
        let hidden = forward_encoder(&mut tape, &store, &inst.ids).unwrap();
        let logp = mlm_log_probs(&mut tape, &store, hidden, &inst.mask_positions).unwrap();
        let targets: Vec<usize> = inst.mask_targets.iter().map(|&t| t as usize).collect();
        let n = targets.len() as f64;
        let mlm = tape.nll_sum(logp, targets, vec![1.0 / n; inst.mask_targets.len()]);
        let scaled = tape.scale(mlm, 0.2);
        tape.backward(scaled).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.accumulate_param_grads(&store, &mut grads, 1.0);
        assert!(grads.get(&store, "cls.w").data.iter().all(|&x| x == 0.0));
        assert!(grads.get(&store, "tok_emb").data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn doubling_lambda_doubles_mlm_gradients() {
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 4).unwrap();
        let inst = sa_instance(&vocab, true);
        let grads_at = |lambda: f64| {
            let mut tape = Tape::new();
            let hidden = forward_encoder(&mut tape, &store, &inst.ids).unwrap();
            let logp = mlm_log_probs(&mut tape, &store, hidden, &inst.mask_positions).unwrap();
            let targets: Vec<usize> = inst.mask_targets.iter().map(|&t| t as usize).collect();
            let n = targets.len() as f64;
            let mlm = tape.nll_sum(logp, targets, vec![1.0 / n; inst.mask_targets.len()]);
            let scaled = tape.scale(mlm, lambda);
            tape.backward(scaled).unwrap();
            let mut grads = Gradients::zeros_like(&store);
            tape.accumulate_param_grads(&store, &mut grads, 1.0);
            grads
        };
        let g1 = grads_at(0.2);
        let g2 = grads_at(0.4);
        let w1 = g1.get(&store, "tok_emb");
        let w2 = g2.get(&store, "tok_emb");
        for (a, b) in w1.data.iter().zip(&w2.data) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    fn decoder_fixture() -> (ParamStore, crate::prompt::DecoderInstance, Vocabulary) {
        let template = PromptTemplate::alpaca(Task::Sa);
        let mut vocab = test_vocab(12);
        crate::prompt::extend_vocab_for_decoder(&mut vocab, &template);
        let src = toks(&["w0", "w1"]);
        let ctx = toks(&["w2", "w3", "w4"]);
        let inst = build_decoder_instance(&src, &[ctx], "positive", &template, &vocab, 128)
            .unwrap();
        let store =
            ParamStore::init(ModelConfig::decoder(vocab.len(), 16, 2, 2, 128), 21).unwrap();
        (store, inst, vocab)
    }

    #[test]
    fn causal_loss_partitions_by_region() {
        let (store, mut inst, _) = decoder_fixture();
        inst.loss_mask = loss_mask_for_variant(&inst, Variant::Daicl);
        let mut tape = Tape::new();
        let parts = causal_lm_loss(&mut tape, &store, &inst, None).unwrap();
        let sum: f64 = parts.region_sums.iter().sum();
        assert!((sum - parts.total).abs() < 1e-9);
        assert_eq!(parts.count, inst.len() - 1);
        assert!((parts.mean - parts.total / parts.count as f64).abs() < 1e-15);

        // Response-only mask: the total is exactly the RESPONSE bucket.
        let mut sup = inst.clone();
        sup.loss_mask = loss_mask_for_variant(&sup, Variant::IclSup);
        let mut t2 = Tape::new();
        let sup_parts = causal_lm_loss(&mut t2, &store, &sup, None).unwrap();
        assert!((sup_parts.total - sup_parts.region_sums[3]).abs() < 1e-12);
        assert_eq!(sup_parts.region_sums[0], 0.0);
        assert!(sup_parts.total <= parts.total + 1e-12);
    }

    #[test]
    fn uniform_decoder_loss_is_log_vocab() {
        let (store, mut inst, vocab) = decoder_fixture();
        inst.loss_mask = loss_mask_for_variant(&inst, Variant::Daicl);
        let mut zeroed = store.clone();
        for i in 0..zeroed.num_entries() {
            for x in &mut zeroed.entry_value_mut(i).data {
                *x = 0.0;
            }
        }
        let mut tape = Tape::new();
        let parts = causal_lm_loss(&mut tape, &zeroed, &inst, None).unwrap();
        assert!((parts.mean - libm::log(vocab.len() as f64)).abs() < 1e-6);
    }

    #[test]
    fn empty_loss_mask_is_rejected() {
        let (store, inst, _) = decoder_fixture();
        let mut tape = Tape::new();
        assert!(matches!(
            causal_lm_loss(&mut tape, &store, &inst, None).unwrap_err(),
            ModelError::EmptyLossMask
        ));
    }

    #[test]
    fn adapter_identity_and_freezing() {
        let (store, mut inst, _) = decoder_fixture();
        inst.loss_mask = loss_mask_for_variant(&inst, Variant::Daicl);
        let mut adapted = store.clone();
        adapted
            .attach_adapters(AdapterConfig {
                rank: 4,
                alpha: 4.0,
                dropout: 0.0,
            })
            .unwrap();
        // B = 0: outputs identical bit for bit.
        let mut t1 = Tape::new();
        let l1 = forward_decoder(&mut t1, &store, &inst.ids, None).unwrap();
        let mut t2 = Tape::new();
        let l2 = forward_decoder(&mut t2, &adapted, &inst.ids, None).unwrap();
        assert_eq!(t1.value(l1), t2.value(l2));
        // Gradients reach only the adapters. At B = 0 the A gradient is
        // genuinely zero (it flows through B), so B is the live entry.
        let mut t3 = Tape::new();
        let parts = causal_lm_loss(&mut t3, &adapted, &inst, None).unwrap();
        t3.backward(parts.loss_sum).unwrap();
        let mut grads = Gradients::zeros_like(&adapted);
        t3.accumulate_param_grads(&adapted, &mut grads, 1.0);
        assert!(grads.get(&adapted, "tok_emb").data.iter().all(|&x| x == 0.0));
        assert!(grads.get(&adapted, "l0.attn.wq").data.iter().all(|&x| x == 0.0));
        assert!(grads
            .get(&adapted, "l0.attn.wq.lora_a")
            .data
            .iter()
            .all(|&x| x == 0.0));
        assert!(grads
            .get(&adapted, "l0.attn.wq.lora_b")
            .data
            .iter()
            .any(|&x| x != 0.0));
        // Once B moves off zero, A starts receiving gradient.
        for x in &mut adapted.get_mut("l0.attn.wq.lora_b").data {
            *x = 0.01;
        }
        let mut t4 = Tape::new();
        let parts = causal_lm_loss(&mut t4, &adapted, &inst, None).unwrap();
        t4.backward(parts.loss_sum).unwrap();
        let mut grads = Gradients::zeros_like(&adapted);
        t4.accumulate_param_grads(&adapted, &mut grads, 1.0);
        assert!(grads
            .get(&adapted, "l0.attn.wq.lora_a")
            .data
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn finite_diff_passes_for_classifier_joint_loss() {
        let vocab = test_vocab(10);
        let mut store = ParamStore::init(
            ModelConfig::encoder(vocab.len(), 16, 2, 2, 64).with_classifier(3),
            8,
        )
        .unwrap();
        gradcheck::randomize_for_check(&mut store, 81);
        let inst = sa_instance(&vocab, true);
        let report = finite_diff_check(
            &store,
            |s| {
                let mut tape = Tape::new();
                let parts = encoder_joint_loss(&mut tape, s, &inst, 0.2)?;
                tape.backward(parts.loss)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            1e-5,
            3,
            1,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn finite_diff_passes_for_crf_joint_loss() {
        let vocab = test_vocab(10);
        let mut store = ParamStore::init(
            ModelConfig::encoder(vocab.len(), 16, 1, 2, 64).with_emissions(3),
            12,
        )
        .unwrap();
        gradcheck::randomize_for_check(&mut store, 82);
        let src = toks(&["w0", "w1", "w2", "w3"]);
        let ctx = toks(&["w4", "w5", "w6"]);
        let inst = build_encoder_instance(
            &src,
            InstanceLabel::Tags(vec![0, 1, 2, 0]),
            &[ctx],
            &vocab,
            64,
        )
        .unwrap();
        let mut rng = rng_from_seed(2);
        let inst = apply_mlm_mask(inst, 0.4, &mut rng).unwrap();
        let report = finite_diff_check(
            &store,
            |s| {
                let mut tape = Tape::new();
                let parts = encoder_joint_loss(&mut tape, s, &inst, 0.2)?;
                tape.backward(parts.loss)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            1e-5,
            3,
            2,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn finite_diff_passes_for_causal_loss_with_adapters() {
        let (store, mut inst, _) = decoder_fixture();
        inst.loss_mask = loss_mask_for_variant(&inst, Variant::Daicl);
        let mut adapted = store;
        adapted
            .attach_adapters(AdapterConfig {
                rank: 2,
                alpha: 2.0,
                dropout: 0.0,
            })
            .unwrap();
        gradcheck::randomize_for_check(&mut adapted, 83);
        let report = finite_diff_check(
            &adapted,
            |s| {
                let mut tape = Tape::new();
                let parts = causal_lm_loss(&mut tape, s, &inst, None)?;
                tape.backward(parts.loss_sum)?;
                let mut grads = Gradients::zeros_like(s);
                tape.accumulate_param_grads(s, &mut grads, 1.0);
                Ok((parts.total, grads))
            },
            1e-5,
            4,
            3,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn greedy_decode_stops_and_is_deterministic() {
        let (store, inst, _) = decoder_fixture();
        let prefix = &inst.ids[..8];
        let a = greedy_decode(&store, prefix, 10, crate::embed::EOS_ID).unwrap();
        let b = greedy_decode(&store, prefix, 10, crate::embed::EOS_ID).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 10);
    }

    #[test]
    fn encoder_embedder_yields_unit_vectors() {
        use crate::embed::TextEmbedder;
        let vocab = test_vocab(10);
        let store = ParamStore::init(enc_cfg(vocab.len()), 5).unwrap();
        let e = EncoderEmbedder {
            store: &store,
            vocab: &vocab,
        };
        let (v, flagged) = e.embed("w0 w1 w5");
        assert!(!flagged);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(e.embed("").1);
    }

    #[test]
    fn region_order_sanity_for_masks() {
        let (_, inst, _) = decoder_fixture();
        let full = loss_mask_for_variant(&inst, Variant::Daicl);
        let sup = loss_mask_for_variant(&inst, Variant::IclSup);
        let full_count = full.iter().filter(|b| **b).count();
        let sup_count = sup.iter().filter(|b| **b).count();
        assert!(full_count >= sup_count);
        assert!(sup
            .iter()
            .zip(&inst.region)
            .all(|(m, r)| !*m || *r == DecRegion::Response));
    }
}
