//! Training: optimization, per-variant batch assembly, the training loops
//! for both architectures, and the two-stage adaptive-pretraining baseline.
//!
//! Every run is bit-deterministic given `(seed, config, data)`: shuffling,
//! context sampling and masking all derive from the run seed, instances are
//! processed in order, and gradients reduce by ordered summation.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{tags_to_spans, EntitySpan, Sentiment, Tag, Token};
use crate::embed::{
    build_index, join_tokens, EmbedderSpec, Metric, NgramEmbedder, RetrievalIndex, Vocabulary,
};
use crate::eval::{accuracy, span_f1};
use crate::model::{
    causal_lm_loss, crf_decode, encoder_joint_loss, forward_encoder, greedy_decode,
    pooled_class_log_probs, AdapterConfig, Gradients, Mat, ModelConfig, ModelError, ParamStore,
    Tape,
};
use crate::prompt::{
    apply_mlm_mask, bio_tag_id, build_decoder_instance, build_encoder_instance,
    build_mlm_only_instance, extend_vocab_for_decoder, loss_mask_for_variant, render_entity_label,
    DecRegion, DecoderInstance, EncoderInstance, InstanceLabel, PromptError, PromptTemplate, Task,
};
use crate::rng::{instance_seed, mix_seed, rng_from_seed, sample_without_replacement, shuffle};

/// The training variants: how contexts are sourced and which loss applies.
///
/// - `NoIcl` — no contexts, task objective only.
/// - `IclRand` — random target contexts, both objectives.
/// - `IclSup` — retrieved target contexts, task objective only.
/// - `IclSource` — contexts retrieved from the source domain, both objectives.
/// - `Daicl` — retrieved target contexts, task + language modeling jointly.
/// - `AdaptivePretrain` — two stages: LM-only on target text, then task-only
///   fine-tuning without contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoIcl,
    IclRand,
    IclSup,
    IclSource,
    Daicl,
    AdaptivePretrain,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoIcl,
        Variant::IclRand,
        Variant::IclSup,
        Variant::IclSource,
        Variant::Daicl,
        Variant::AdaptivePretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoIcl => "no_icl",
            Variant::IclRand => "icl_rand",
            Variant::IclSup => "icl_sup",
            Variant::IclSource => "icl_source",
            Variant::Daicl => "daicl",
            Variant::AdaptivePretrain => "adaptive_pretrain",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.name() == name)
    }

    /// Whether encoder training applies MLM masking to contexts.
    pub fn encoder_masks(self) -> bool {
        matches!(self, Variant::Daicl | Variant::IclRand | Variant::IclSource)
    }

    /// Whether instances carry retrieved/random contexts at all.
    pub fn uses_contexts(self) -> bool {
        !matches!(self, Variant::NoIcl | Variant::AdaptivePretrain)
    }
}

/// Which architecture a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Encoder,
    Decoder,
}

/// Hyperparameters reported for the reference setup, kept as documented
/// constants and accepted through the config.
pub mod paper_defaults {
    pub const NER_LR: f64 = 1e-5;
    pub const CRF_LR: f64 = 0.05;
    pub const SA_LR: f64 = 5e-5;
    pub const DECODER_LR: f64 = 3e-4;
    pub const BATCH_SIZE: usize = 256;
    pub const EPOCHS: usize = 5;
    pub const WARMUP_FRAC: f64 = 0.1;
    pub const LAMBDA: f64 = 0.2;
    pub const TOP_K: usize = 5;
    pub const MASK_RATE: f64 = 0.15;
    pub const LORA_RANK: usize = 16;
    pub const LORA_DROPOUT: f64 = 0.05;
}

/// Full training configuration. `desk_default` fits the bundled benchmark on
/// a laptop; the reference-scale values live in [`paper_defaults`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub crf_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub lambda: f64,
    pub k: usize,
    pub mask_rate: f64,
    pub patience: usize,
    /// Stage-1 epochs for adaptive pre-training.
    pub pretrain_epochs: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Low-rank adapters for decoder runs (base weights frozen).
    pub adapter: Option<AdapterConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_default()
    }
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            lr: 3e-3,
            crf_lr: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: paper_defaults::EPOCHS,
            warmup_frac: paper_defaults::WARMUP_FRAC,
            grad_clip: 1.0,
            seed: 0,
            lambda: paper_defaults::LAMBDA,
            k: paper_defaults::TOP_K,
            mask_rate: paper_defaults::MASK_RATE,
            patience: 2,
            pretrain_epochs: 2,
            dim: 64,
            layers: 2,
            heads: 4,
            max_len: 160,
            adapter: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(TrainError::BadConfig("warmup_frac outside [0, 1)"));
        }
        if self.lr <= 0.0 || self.crf_lr <= 0.0 {
            return Err(TrainError::BadConfig("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::BadConfig("batch size and epochs must be positive"));
        }
        if self.k == 0 {
            return Err(TrainError::BadConfig("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(TrainError::BadConfig("mask_rate outside [0, 1]"));
        }
        Ok(())
    }
}

/// Adam moment estimates, entry-parallel with a parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamState {
    pub fn new_like(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = (0..store.num_entries())
            .map(|i| {
                let shape = store.entry_value(i);
                Mat::zeros(shape.rows, shape.cols)
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay Adam step.
///
/// Weight decay shrinks parameters multiplicatively (`θ ← θ − lr·wd·θ`)
/// before the bias-corrected Adam update. CRF parameters (`crf.*`) use
/// `lr_crf`; everything else uses `lr_model`. Frozen entries never move.
/// A non-finite gradient aborts the step without touching any parameter.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr_model: f64,
    lr_crf: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for entry in 0..store.num_entries() {
        if store.is_frozen_entry(entry) {
            continue;
        }
        let lr = if store.entry_name(entry).starts_with("crf.") {
            lr_crf
        } else {
            lr_model
        };
        let g = grads.entry(entry);
        let m = &mut state.m[entry];
        let v = &mut state.v[entry];
        let theta = store.entry_value_mut(entry);
        for i in 0..theta.data.len() {
            let gi = g.data[i];
            theta.data[i] -= lr * cfg.weight_decay * theta.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            theta.data[i] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Scales gradients so the global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_assign(max_norm / norm);
    }
    norm
}

/// Linear warmup to `base_lr` over the first `⌈warmup_frac·total⌉` steps,
/// then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = libm::ceil(warmup_frac * total_steps as f64) as usize;
    if step <= warmup {
        if warmup == 0 {
            base_lr
        } else {
            base_lr * step as f64 / warmup as f64
        }
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// One labeled example in trainer form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<Token>,
    pub label: ExampleLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExampleLabel {
    Sentiment(Sentiment),
    Bio(Vec<Tag>),
}

impl LabeledExample {
    pub fn sa(tokens: Vec<Token>, label: Sentiment) -> Self {
        LabeledExample {
            tokens,
            label: ExampleLabel::Sentiment(label),
        }
    }

    pub fn ner(tokens: Vec<Token>, tags: Vec<Tag>) -> Self {
        LabeledExample {
            tokens,
            label: ExampleLabel::Bio(tags),
        }
    }

    fn instance_label(&self) -> InstanceLabel {
        match &self.label {
            ExampleLabel::Sentiment(s) => InstanceLabel::Class(s.class_id()),
            ExampleLabel::Bio(tags) => {
                InstanceLabel::Tags(tags.iter().map(bio_tag_id).collect())
            }
        }
    }

    /// Gold entity spans (NER labels only).
    pub fn gold_spans(&self) -> Option<alloc::collections::BTreeSet<EntitySpan>> {
        match &self.label {
            ExampleLabel::Bio(tags) => Some(tags_to_spans(tags)),
            ExampleLabel::Sentiment(_) => None,
        }
    }

    /// The response text a decoder is trained to produce.
    fn response_text(&self) -> String {
        match &self.label {
            ExampleLabel::Sentiment(s) => s.as_str().to_string(),
            ExampleLabel::Bio(tags) => {
                let spans = tags_to_spans(tags);
                let entities: Vec<String> = spans
                    .iter()
                    .map(|sp| join_tokens(&self.tokens[sp.start..sp.end]))
                    .collect();
                render_entity_label(&entities)
            }
        }
    }
}

/// Precomputed retrieval: top-k context ids per query, most similar first.
/// Retrieval is static — computed once before training, never refreshed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlans {
    pub k: usize,
    pub target_for_train: Vec<Vec<usize>>,
    pub target_for_dev: Vec<Vec<usize>>,
    pub target_for_test: Vec<Vec<usize>>,
    /// Source-side retrieval for the train split excludes the query itself.
    pub source_for_train: Vec<Vec<usize>>,
    pub source_for_dev: Vec<Vec<usize>>,
    pub source_for_test: Vec<Vec<usize>>,
}

/// Everything a training run reads: corpora, vocabulary, indices, retrieval
/// plans and the decoder template. Immutable during training; safe to share
/// across concurrently running cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainData {
    pub task: Task,
    pub vocab: Vocabulary,
    pub source_train: Vec<LabeledExample>,
    pub source_dev: Vec<LabeledExample>,
    pub target_test: Vec<LabeledExample>,
    pub target_sentences: Vec<Vec<Token>>,
    pub source_sentences: Vec<Vec<Token>>,
    pub target_index: RetrievalIndex,
    pub source_index: RetrievalIndex,
    pub template: PromptTemplate,
    pub plans: RetrievalPlans,
}

/// Computes all static retrieval plans for a pair of built indices.
pub fn compute_retrieval_plans(
    target_index: &RetrievalIndex,
    source_index: &RetrievalIndex,
    source_train: &[LabeledExample],
    source_dev: &[LabeledExample],
    target_test: &[LabeledExample],
    spec: &EmbedderSpec,
    k: usize,
) -> Result<RetrievalPlans, TrainError> {
    let embedder = NgramEmbedder::from_spec(spec)?;
    let plan = |index: &RetrievalIndex,
                queries: &[LabeledExample],
                exclude_self: bool|
     -> Vec<Vec<usize>> {
        queries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let embedded = index.embed_query(&e.tokens, &embedder);
                let exclude = if exclude_self { Some(i) } else { None };
                index
                    .top_k_embedded(&embedded, k, exclude)
                    .into_iter()
                    .map(|h| h.corpus_id)
                    .collect()
            })
            .collect()
    };
    Ok(RetrievalPlans {
        k,
        target_for_train: plan(target_index, source_train, false),
        target_for_dev: plan(target_index, source_dev, false),
        target_for_test: plan(target_index, target_test, false),
        source_for_train: plan(source_index, source_train, true),
        source_for_dev: plan(source_index, source_dev, false),
        source_for_test: plan(source_index, target_test, false),
    })
}

impl TrainData {
    /// Builds vocabulary, both retrieval indices and all retrieval plans.
    pub fn build(
        task: Task,
        source_train: Vec<LabeledExample>,
        source_dev: Vec<LabeledExample>,
        target_test: Vec<LabeledExample>,
        target_sentences: Vec<Vec<Token>>,
        spec: &EmbedderSpec,
        metric: Metric,
        k: usize,
    ) -> Result<TrainData, TrainError> {
        Self::build_with_plans(
            task,
            source_train,
            source_dev,
            target_test,
            target_sentences,
            spec,
            metric,
            k,
            None,
        )
    }

    /// As [`TrainData::build`], optionally reusing precomputed retrieval
    /// plans (e.g. from a disk cache). Plans must match the requested `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_with_plans(
        task: Task,
        source_train: Vec<LabeledExample>,
        source_dev: Vec<LabeledExample>,
        target_test: Vec<LabeledExample>,
        target_sentences: Vec<Vec<Token>>,
        spec: &EmbedderSpec,
        metric: Metric,
        k: usize,
        plans: Option<RetrievalPlans>,
    ) -> Result<TrainData, TrainError> {
        if source_train.is_empty() {
            return Err(TrainError::BadConfig("no source training data"));
        }
        if target_sentences.is_empty() {
            return Err(TrainError::MissingIndex("target datastore is empty"));
        }
        let source_sentences: Vec<Vec<Token>> =
            source_train.iter().map(|e| e.tokens.clone()).collect();

        let mut vocab = Vocabulary::from_sentences(
            source_sentences
                .iter()
                .map(Vec::as_slice)
                .chain(target_sentences.iter().map(Vec::as_slice)),
        );
        let template = PromptTemplate::alpaca(task);
        extend_vocab_for_decoder(&mut vocab, &template);

        let target_index = build_index(&target_sentences, spec, metric)?;
        let source_index = build_index(&source_sentences, spec, metric)?;
        let plans = match plans {
            Some(p) if p.k == k => p,
            Some(_) => return Err(TrainError::BadConfig("cached plans computed at a different k")),
            None => compute_retrieval_plans(
                &target_index,
                &source_index,
                &source_train,
                &source_dev,
                &target_test,
                spec,
                k,
            )?,
        };
        Ok(TrainData {
            task,
            vocab,
            source_train,
            source_dev,
            target_test,
            target_sentences,
            source_sentences,
            target_index,
            source_index,
            template,
            plans,
        })
    }

    fn model_config(&self, kind: ModelKind, cfg: &TrainConfig) -> ModelConfig {
        match kind {
            ModelKind::Encoder => {
                let base = ModelConfig::encoder(
                    self.vocab.len(),
                    cfg.dim,
                    cfg.layers,
                    cfg.heads,
                    cfg.max_len,
                );
                match self.task {
                    Task::Sa => base.with_classifier(3),
                    Task::Ner => base.with_emissions(crate::prompt::BIO_TAGS),
                }
            }
            ModelKind::Decoder => {
                ModelConfig::decoder(self.vocab.len(), cfg.dim, cfg.layers, cfg.heads, cfg.max_len)
            }
        }
    }
}

/// Which split evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Dev,
    TargetTest,
}

/// A training/evaluation instance of either architecture.
#[derive(Debug, Clone)]
pub enum TrainInstance {
    Enc(EncoderInstance),
    Dec(DecoderInstance),
}

fn contexts_from_ids(sentences: &[Vec<Token>], ids: &[usize], k: usize) -> Vec<Vec<Token>> {
    ids.iter().take(k).map(|&i| sentences[i].clone()).collect()
}

/// Resolves the context sentences for one example under a variant.
///
/// Retrieved variants read the static plans; `IclRand` draws fresh target
/// ids from the provided rng (re-drawn every epoch during training).
fn contexts_for(
    data: &TrainData,
    variant: Variant,
    split: EvalSplit,
    is_train: bool,
    idx: usize,
    k: usize,
    rng: &mut crate::rng::DeterministicRng,
) -> Vec<Vec<Token>> {
    let target_plan = if is_train {
        &data.plans.target_for_train
    } else {
        match split {
            EvalSplit::Dev => &data.plans.target_for_dev,
            EvalSplit::TargetTest => &data.plans.target_for_test,
        }
    };
    let source_plan = if is_train {
        &data.plans.source_for_train
    } else {
        match split {
            EvalSplit::Dev => &data.plans.source_for_dev,
            EvalSplit::TargetTest => &data.plans.source_for_test,
        }
    };
    match variant {
        Variant::Daicl | Variant::IclSup => {
            contexts_from_ids(&data.target_sentences, &target_plan[idx], k)
        }
        Variant::IclSource => contexts_from_ids(&data.source_sentences, &source_plan[idx], k),
        Variant::IclRand => {
            let n = data.target_sentences.len();
            let ids = sample_without_replacement(rng, n, k.min(n));
            contexts_from_ids(&data.target_sentences, &ids, k)
        }
        Variant::NoIcl | Variant::AdaptivePretrain => Vec::new(),
    }
}

/// Builds the training instances for a batch of source example indices.
///
/// Context policy per variant is as documented on [`Variant`]; encoder
/// masking applies only where the variant trains the MLM objective, and
/// decoder loss masks come from `loss_mask_for_variant`.
pub fn assemble_batch(
    variant: Variant,
    kind: ModelKind,
    batch: &[usize],
    data: &TrainData,
    cfg: &TrainConfig,
    epoch_seed: u64,
) -> Result<Vec<TrainInstance>, TrainError> {
    let mut out = Vec::with_capacity(batch.len());
    for &idx in batch {
        let mut rng = rng_from_seed(instance_seed(epoch_seed, idx as u64));
        let example = &data.source_train[idx];
        let contexts = contexts_for(
            data,
            variant,
            EvalSplit::Dev,
            true,
            idx,
            cfg.k,
            &mut rng,
        );
        match kind {
            ModelKind::Encoder => {
                let inst = build_encoder_instance(
                    &example.tokens,
                    example.instance_label(),
                    &contexts,
                    &data.vocab,
                    cfg.max_len,
                )?;
                let inst = if variant.encoder_masks() {
                    apply_mlm_mask(inst, cfg.mask_rate, &mut rng)?
                } else {
                    inst
                };
                out.push(TrainInstance::Enc(inst));
            }
            ModelKind::Decoder => {
                let mut inst = build_decoder_instance(
                    &example.tokens,
                    &contexts,
                    &example.response_text(),
                    &data.template,
                    &data.vocab,
                    cfg.max_len,
                )?;
                inst.loss_mask = loss_mask_for_variant(&inst, variant);
                out.push(TrainInstance::Dec(inst));
            }
        }
    }
    Ok(out)
}

/// Per-step training log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_lm: f64,
}

/// Per-epoch validation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dev_metric: f64,
}

/// Best-by-validation parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub step: u64,
    pub val_history: Vec<f64>,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
    /// Steps skipped because the batch gradient was non-finite.
    pub aborted_steps: usize,
}

struct LossParts {
    total: f64,
    task: f64,
    lm: f64,
}

fn instance_backward(
    store: &ParamStore,
    inst: &TrainInstance,
    cfg: &TrainConfig,
    grads: &mut Gradients,
    inv_batch: f64,
) -> Result<LossParts, TrainError> {
    match inst {
        TrainInstance::Enc(e) => {
            let mut tape = Tape::new();
            let parts = encoder_joint_loss(&mut tape, store, e, cfg.lambda)?;
            tape.backward(parts.loss)?;
            tape.accumulate_param_grads(store, grads, inv_batch);
            Ok(LossParts {
                total: parts.total,
                task: parts.task_nll,
                lm: parts.mlm_nll,
            })
        }
        TrainInstance::Dec(d) => {
            let mut tape = Tape::new();
            let parts = causal_lm_loss(&mut tape, store, d, None)?;
            // Optimize the per-token mean so step sizes do not scale with
            // prompt length.
            let mean_node = tape.scale(parts.loss_sum, 1.0 / parts.count as f64);
            tape.backward(mean_node)?;
            tape.accumulate_param_grads(store, grads, inv_batch);
            let count = parts.count as f64;
            Ok(LossParts {
                total: parts.mean,
                task: parts.region_sums[3] / count,
                lm: parts.region_sums[1] / count,
            })
        }
    }
}

/// Trains one variant from a fresh seeded initialization.
pub fn train(
    variant: Variant,
    kind: ModelKind,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if variant == Variant::AdaptivePretrain {
        return adaptive_pretrain(kind, data, cfg);
    }
    if cfg.k > data.plans.k && variant.uses_contexts() {
        return Err(TrainError::BadConfig("cfg.k exceeds the precomputed retrieval depth"));
    }
    let mut store = ParamStore::init(data.model_config(kind, cfg), cfg.seed)?;
    if kind == ModelKind::Decoder {
        if let Some(ad) = cfg.adapter {
            store.attach_adapters(ad)?;
        }
    }
    train_from(store, variant, kind, data, cfg, cfg.epochs)
}

fn train_from(
    mut store: ParamStore,
    variant: Variant,
    kind: ModelKind,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutcome, TrainError> {
    let n = data.source_train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * epochs;
    let mut state = AdamState::new_like(&store);
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut bad_evals = 0usize;
    let mut stopped_early = false;
    let mut aborted_steps = 0usize;
    let mut step_idx = 0usize;

    for epoch in 0..epochs {
        let epoch_seed = mix_seed(cfg.seed, 0x0e0c + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng_from_seed(mix_seed(epoch_seed, 0x5f));
        shuffle(&mut shuffle_rng, &mut order);

        for batch in order.chunks(cfg.batch_size) {
            let instances = assemble_batch(variant, kind, batch, data, cfg, epoch_seed)?;
            let mut grads = Gradients::zeros_like(&store);
            let inv_batch = 1.0 / instances.len() as f64;
            let (mut total, mut task, mut lm) = (0.0, 0.0, 0.0);
            for inst in &instances {
                let parts = instance_backward(&store, inst, cfg, &mut grads, inv_batch)?;
                if !parts.total.is_finite() {
                    return Err(TrainError::Divergence);
                }
                total += parts.total * inv_batch;
                task += parts.task * inv_batch;
                lm += parts.lm * inv_batch;
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            step_idx += 1;
            let lr = lr_at(step_idx, total_steps, 1.0, cfg.warmup_frac);
            match adamw_step(
                &mut store,
                &grads,
                &mut state,
                lr * cfg.lr,
                lr * cfg.crf_lr,
                cfg,
            ) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient) => {
                    aborted_steps += 1;
                }
                Err(e) => return Err(e),
            }
            steps.push(StepRecord {
                step: step_idx,
                lr: lr * cfg.lr,
                loss_total: total,
                loss_task: task,
                loss_lm: lm,
            });
        }

        let dev_metric = evaluate(&store, data, EvalSplit::Dev, variant, kind, cfg)?;
        history.push(EpochRecord {
            epoch,
            dev_metric,
        });
        val_history.push(dev_metric);
        let improved = best.as_ref().map_or(true, |(b, _)| dev_metric > *b);
        if improved {
            best = Some((
                dev_metric,
                Checkpoint {
                    store: store.clone(),
                    step: step_idx as u64,
                    val_history: val_history.clone(),
                },
            ));
            bad_evals = 0;
        } else {
            bad_evals += 1;
            if bad_evals >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (_, mut checkpoint) = best.ok_or(TrainError::BadConfig("no epochs ran"))?;
    checkpoint.val_history = val_history;
    Ok(TrainOutcome {
        checkpoint,
        final_store: store,
        history,
        steps,
        stopped_early,
        aborted_steps,
    })
}

/// Two-stage adaptive pre-training: a language-modeling-only pass over the
/// target text, then task-only fine-tuning (No-ICL policy) continuing from
/// the stage-1 parameters. With zero pre-training epochs this is exactly a
/// No-ICL run.
pub fn adaptive_pretrain(
    kind: ModelKind,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut store = ParamStore::init(data.model_config(kind, cfg), cfg.seed)?;
    if kind == ModelKind::Decoder {
        if let Some(ad) = cfg.adapter {
            store.attach_adapters(ad)?;
        }
    }
    let mut state = AdamState::new_like(&store);
    let m = data.target_sentences.len();
    let steps_per_epoch = m.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.pretrain_epochs;
    let mut step_idx = 0usize;

    for epoch in 0..cfg.pretrain_epochs {
        let epoch_seed = mix_seed(mix_seed(cfg.seed, 0x12e), epoch as u64);
        let mut order: Vec<usize> = (0..m).collect();
        let mut shuffle_rng = rng_from_seed(mix_seed(epoch_seed, 0x5f));
        shuffle(&mut shuffle_rng, &mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&store);
            let inv_batch = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sentence = &data.target_sentences[idx];
                match kind {
                    ModelKind::Encoder => {
                        let inst =
                            build_mlm_only_instance(sentence, &data.vocab, cfg.max_len)?;
                        let mut rng = rng_from_seed(instance_seed(epoch_seed, idx as u64));
                        let inst = apply_mlm_mask(inst, cfg.mask_rate, &mut rng)?;
                        if inst.mask_positions.is_empty() {
                            continue;
                        }
                        let mut tape = Tape::new();
                        let parts = encoder_joint_loss(&mut tape, &store, &inst, cfg.lambda)?;
                        tape.backward(parts.loss)?;
                        tape.accumulate_param_grads(&store, &mut grads, inv_batch);
                    }
                    ModelKind::Decoder => {
                        let inst = plain_lm_instance(sentence, &data.vocab, cfg.max_len);
                        if inst.ids.len() < 2 {
                            continue;
                        }
                        let mut tape = Tape::new();
                        let parts = causal_lm_loss(&mut tape, &store, &inst, None)?;
                        let mean_node = tape.scale(parts.loss_sum, 1.0 / parts.count as f64);
                        tape.backward(mean_node)?;
                        tape.accumulate_param_grads(&store, &mut grads, inv_batch);
                    }
                }
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            step_idx += 1;
            let lr = lr_at(step_idx, total_steps, 1.0, cfg.warmup_frac);
            let _ = adamw_step(
                &mut store,
                &grads,
                &mut state,
                lr * cfg.lr,
                lr * cfg.crf_lr,
                cfg,
            );
        }
    }
    // Stage 2 starts exactly at the stage-1 parameters.
    train_from(store, Variant::NoIcl, kind, data, cfg, cfg.epochs)
}

/// A raw-text causal LM instance (adaptive pre-training stage 1): BOS,
/// sentence, EOS, loss over every position.
fn plain_lm_instance(sentence: &[Token], vocab: &Vocabulary, max_len: usize) -> DecoderInstance {
    let mut ids = vec![crate::embed::BOS_ID];
    for t in sentence.iter().take(max_len.saturating_sub(2)) {
        ids.push(vocab.id_or_unk(t.as_str()));
    }
    ids.push(crate::embed::EOS_ID);
    let n = ids.len();
    let mut region = vec![DecRegion::Context; n];
    region[0] = DecRegion::Template;
    DecoderInstance {
        ids,
        region,
        loss_mask: vec![true; n],
    }
}

/// Evaluates a parameter store on a data split with variant-consistent
/// contexts. Inputs are never masked at evaluation time.
pub fn evaluate(
    store: &ParamStore,
    data: &TrainData,
    split: EvalSplit,
    variant: Variant,
    kind: ModelKind,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let examples = match split {
        EvalSplit::Dev => &data.source_dev,
        EvalSplit::TargetTest => &data.target_test,
    };
    if examples.is_empty() {
        return Err(TrainError::BadConfig("empty evaluation split"));
    }
    let eval_seed = mix_seed(cfg.seed, 0xEA1);
    let mut gold_sents = Vec::new();
    let mut pred_sents = Vec::new();
    let mut gold_labels = Vec::new();
    let mut pred_labels = Vec::new();

    for (idx, example) in examples.iter().enumerate() {
        let mut rng = rng_from_seed(instance_seed(eval_seed, idx as u64));
        let contexts = contexts_for(data, variant, split, false, idx, cfg.k, &mut rng);
        match kind {
            ModelKind::Encoder => {
                let inst = build_encoder_instance(
                    &example.tokens,
                    example.instance_label(),
                    &contexts,
                    &data.vocab,
                    cfg.max_len,
                )?;
                let mut tape = Tape::new();
                let hidden = forward_encoder(&mut tape, store, &inst.ids)?;
                match &example.label {
                    ExampleLabel::Sentiment(gold) => {
                        let logp = pooled_class_log_probs(
                            &mut tape,
                            store,
                            hidden,
                            &inst.source_positions(),
                        )?;
                        let row = tape.value(logp).row(0).to_vec();
                        let pred_id = argmax(&row);
                        gold_labels.push(*gold);
                        pred_labels.push(
                            Sentiment::from_class_id(pred_id).unwrap_or(Sentiment::Neutral),
                        );
                    }
                    ExampleLabel::Bio(tags) => {
                        let src = inst.source_positions();
                        let em =
                            crate::model::emission_scores(&mut tape, store, hidden, &src)?;
                        let decoded = crf_decode(
                            tape.value(em),
                            store.get("crf.trans"),
                            store.get("crf.start"),
                            store.get("crf.end"),
                        );
                        let pred_tags: Vec<Tag> = decoded
                            .iter()
                            .map(|&t| match t {
                                1 => Tag::B(None),
                                2 => Tag::I(None),
                                _ => Tag::O,
                            })
                            .collect();
                        gold_sents.push(tags_to_spans(tags));
                        pred_sents.push(tags_to_spans(&pred_tags));
                    }
                }
            }
            ModelKind::Decoder => {
                let prefix = build_decoder_instance(
                    &example.tokens,
                    &contexts,
                    "",
                    &data.template,
                    &data.vocab,
                    cfg.max_len,
                )?;
                let budget = (cfg.max_len - prefix.ids.len()).min(24).max(1);
                let generated =
                    greedy_decode(store, &prefix.ids, budget, crate::embed::EOS_ID)?;
                let text = render_ids(&data.vocab, &generated);
                match &example.label {
                    ExampleLabel::Sentiment(gold) => {
                        gold_labels.push(*gold);
                        pred_labels.push(
                            crate::prompt::parse_sentiment_response(&text)
                                .unwrap_or(Sentiment::Neutral),
                        );
                    }
                    ExampleLabel::Bio(tags) => {
                        let parsed = crate::prompt::parse_entity_response(&text);
                        gold_sents.push(tags_to_spans(tags));
                        pred_sents
                            .push(crate::eval::entities_to_spans(&parsed, &example.tokens));
                    }
                }
            }
        }
    }
    match data.task {
        Task::Sa => Ok(accuracy(&gold_labels, &pred_labels)?.accuracy),
        Task::Ner => Ok(span_f1(&gold_sents, &pred_sents)?.f1),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn render_ids(vocab: &Vocabulary, ids: &[u32]) -> String {
    let words: Vec<&str> = ids
        .iter()
        .filter(|&&id| id != crate::embed::EOS_ID)
        .filter_map(|&id| vocab.token(id))
        .collect();
    words.join(" ")
}

/// One named benchmark setup for the run matrix.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub kind: ModelKind,
    pub data: TrainData,
}

/// Trains and evaluates one matrix cell: target-test metric of the
/// best-by-dev checkpoint.
pub fn run_cell(
    scenario: &Scenario,
    variant: Variant,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let cfg = cfg.clone().with_seed(seed);
    let outcome = train(variant, scenario.kind, &scenario.data, &cfg)?;
    evaluate(
        &outcome.checkpoint.store,
        &scenario.data,
        EvalSplit::TargetTest,
        variant,
        scenario.kind,
        &cfg,
    )
}

/// Errors from training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Model(ModelError),
    Embed(crate::embed::EmbedError),
    Prompt(PromptError),
    Eval(crate::eval::EvalError),
    NonFiniteGradient,
    Divergence,
    BadConfig(&'static str),
    MissingIndex(&'static str),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "model: {e}"),
            TrainError::Embed(e) => write!(f, "embed: {e}"),
            TrainError::Prompt(e) => write!(f, "prompt: {e}"),
            TrainError::Eval(e) => write!(f, "eval: {e}"),
            TrainError::NonFiniteGradient => f.write_str("non-finite gradient; step aborted"),
            TrainError::Divergence => f.write_str("loss diverged to non-finite"),
            TrainError::BadConfig(what) => f.write_str(what),
            TrainError::MissingIndex(what) => f.write_str(what),
        }
    }
}

#[cfg(test)]
impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<crate::embed::EmbedError> for TrainError {
    fn from(e: crate::embed::EmbedError) -> Self {
        TrainError::Embed(e)
    }
}

impl From<PromptError> for TrainError {
    fn from(e: PromptError) -> Self {
        TrainError::Prompt(e)
    }
}

impl From<crate::eval::EvalError> for TrainError {
    fn from(e: crate::eval::EvalError) -> Self {
        TrainError::Eval(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{gen_synthetic_shift, SyntheticShiftSpec};
    use crate::prompt::EncRegion;

    fn tiny_data() -> TrainData {
        let spec = SyntheticShiftSpec {
            source_train: 24,
            source_dev: 8,
            target_unlabeled: 30,
            target_test: 8,
            sentence_len: (4, 7),
            ..SyntheticShiftSpec::default()
        };
        let synth = gen_synthetic_shift(&spec).unwrap();
        TrainData::build(
            Task::Sa,
            synth
                .source_train
                .into_iter()
                .map(|(t, s)| LabeledExample::sa(t, s))
                .collect(),
            synth
                .source_dev
                .into_iter()
                .map(|(t, s)| LabeledExample::sa(t, s))
                .collect(),
            synth
                .target_test
                .into_iter()
                .map(|(t, s)| LabeledExample::sa(t, s))
                .collect(),
            synth.target_unlabeled,
            &EmbedderSpec::ngram(16, 11),
            Metric::Cosine,
            3,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            max_len: 128,
            batch_size: 8,
            epochs: 2,
            k: 3,
            lr: 1e-2,
            ..TrainConfig::desk_default()
        }
    }

    #[test]
    fn lr_schedule_examples_and_shape() {
        let total = 100;
        assert_eq!(lr_at(0, total, 2.0, 0.1), 0.0);
        assert_eq!(lr_at(10, total, 2.0, 0.1), 2.0); // warmup boundary
        assert_eq!(lr_at(100, total, 2.0, 0.1), 0.0);
        // Piecewise linear, peak at the boundary, continuous.
        let mut prev = lr_at(0, total, 2.0, 0.1);
        let mut peak: f64 = prev;
        for step in 1..=total {
            let cur = lr_at(step, total, 2.0, 0.1);
            assert!((cur - prev).abs() <= 2.0 / 10.0 + 1e-12, "jump at {step}");
            peak = peak.max(cur);
            prev = cur;
        }
        assert_eq!(peak, 2.0);
    }

    fn optimizer_fixture() -> (ParamStore, AdamState, TrainConfig) {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..tiny_cfg()
        };
        let store = ParamStore::init(
            ModelConfig::encoder(8, 8, 1, 2, 8).with_classifier(3),
            7,
        )
        .unwrap();
        let state = AdamState::new_like(&store);
        (store, state, cfg)
    }

    #[test]
    fn adamw_zero_gradients_leave_parameters_unchanged() {
        let (mut store, mut state, cfg) = optimizer_fixture();
        let before = store.clone();
        let grads = Gradients::zeros_like(&store);
        adamw_step(&mut store, &grads, &mut state, 0.1, 0.1, &cfg).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adamw_first_step_magnitude_is_learning_rate() {
        let (mut store, mut state, cfg) = optimizer_fixture();
        let mut grads = Gradients::zeros_like(&store);
        let idx = store.entry_index("cls.b").unwrap();
        grads.add_scaled_entry(idx, &Mat::from_vec(1, 3, alloc::vec![1.0, 1.0, 1.0]), 1.0);
        let before = store.get("cls.b").clone();
        adamw_step(&mut store, &grads, &mut state, 0.05, 0.05, &cfg).unwrap();
        for (b, a) in before.data.iter().zip(&store.get("cls.b").data) {
            let delta = (b - a).abs();
            assert!((delta - 0.05).abs() < 1e-6, "update {delta}");
        }
    }

    #[test]
    fn adamw_weight_decay_shrinks_multiplicatively() {
        let (mut store, mut state, mut cfg) = optimizer_fixture();
        cfg.weight_decay = 0.1;
        let before = store.get("cls.w").clone();
        let grads = Gradients::zeros_like(&store);
        adamw_step(&mut store, &grads, &mut state, 0.05, 0.05, &cfg).unwrap();
        for (b, a) in before.data.iter().zip(&store.get("cls.w").data) {
            assert!((a - b * (1.0 - 0.05 * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let (mut store, mut state, cfg) = optimizer_fixture();
        let before = store.clone();
        let mut grads = Gradients::zeros_like(&store);
        let idx = store.entry_index("cls.b").unwrap();
        grads.add_scaled_entry(idx, &Mat::from_vec(1, 3, alloc::vec![f64::NAN, 0.0, 0.0]), 1.0);
        assert_eq!(
            adamw_step(&mut store, &grads, &mut state, 0.1, 0.1, &cfg).unwrap_err(),
            TrainError::NonFiniteGradient
        );
        // The aborted step must not have touched anything.
        assert_eq!(store, before);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (store, _, _) = optimizer_fixture();
        let mut grads = Gradients::zeros_like(&store);
        let idx = store.entry_index("cls.b").unwrap();
        grads.add_scaled_entry(idx, &Mat::from_vec(1, 3, alloc::vec![3.0, 4.0, 0.0]), 1.0);
        let pre = clip_gradients(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() <= 1e-9);
        // Below the threshold nothing changes.
        let norm_before = grads.global_norm();
        clip_gradients(&mut grads, 10.0);
        assert_eq!(grads.global_norm(), norm_before);
    }

    #[test]
    fn assemble_no_icl_has_no_context_positions() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let batch: Vec<usize> = (0..8).collect();
        let instances =
            assemble_batch(Variant::NoIcl, ModelKind::Encoder, &batch, &data, &cfg, 1).unwrap();
        for inst in instances {
            let TrainInstance::Enc(e) = inst else { panic!() };
            assert_eq!(e.context_len(), 0);
            assert!(!e.masked);
        }
    }

    #[test]
    fn assemble_icl_source_never_contains_the_query() {
        let data = tiny_data();
        for (i, plan) in data.plans.source_for_train.iter().enumerate() {
            assert!(!plan.contains(&i), "query {i} retrieved itself");
        }
        // And the instance context tokens differ from the query sentence
        // whenever a duplicate is not present in the corpus.
        let cfg = tiny_cfg();
        let instances = assemble_batch(
            Variant::IclSource,
            ModelKind::Encoder,
            &[0, 1, 2],
            &data,
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(instances.len(), 3);
    }

    #[test]
    fn assemble_daicl_matches_standalone_top_k() {
        let data = tiny_data();
        let embedder = NgramEmbedder::from_spec(&data.target_index.spec).unwrap();
        for idx in [0usize, 5, 11] {
            let hits = data
                .target_index
                .top_k(&data.source_train[idx].tokens, &embedder, 3)
                .unwrap();
            let expect: Vec<usize> = hits.into_iter().map(|h| h.corpus_id).collect();
            assert_eq!(data.plans.target_for_train[idx], expect);
        }
    }

    #[test]
    fn assemble_masking_follows_variant_policy() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let batch: Vec<usize> = (0..8).collect();
        for (variant, masks) in [
            (Variant::Daicl, true),
            (Variant::IclRand, true),
            (Variant::IclSource, true),
            (Variant::IclSup, false),
            (Variant::NoIcl, false),
        ] {
            let instances =
                assemble_batch(variant, ModelKind::Encoder, &batch, &data, &cfg, 2).unwrap();
            for inst in instances {
                let TrainInstance::Enc(e) = inst else { panic!() };
                assert_eq!(e.masked, masks, "{variant:?}");
                if masks && e.context_len() > 0 {
                    let expect = libm::floor(cfg.mask_rate * e.context_len() as f64 + 0.5) as usize;
                    assert_eq!(e.mask_positions.len(), expect);
                }
            }
        }
    }

    #[test]
    fn assemble_decoder_loss_masks() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let instances =
            assemble_batch(Variant::Daicl, ModelKind::Decoder, &[0, 1], &data, &cfg, 3).unwrap();
        for inst in &instances {
            let TrainInstance::Dec(d) = inst else { panic!() };
            assert!(d.loss_mask.iter().all(|&b| b));
        }
        let instances =
            assemble_batch(Variant::IclSup, ModelKind::Decoder, &[0, 1], &data, &cfg, 3).unwrap();
        for inst in &instances {
            let TrainInstance::Dec(d) = inst else { panic!() };
            let on = d.loss_mask.iter().filter(|&&b| b).count();
            let resp = d
                .region
                .iter()
                .filter(|r| **r == DecRegion::Response)
                .count();
            assert_eq!(on, resp);
        }
    }

    #[test]
    fn random_contexts_resample_across_epochs() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = assemble_batch(Variant::IclRand, ModelKind::Encoder, &[0], &data, &cfg, 1).unwrap();
        let b = assemble_batch(Variant::IclRand, ModelKind::Encoder, &[0], &data, &cfg, 2).unwrap();
        let ids = |i: &TrainInstance| match i {
            TrainInstance::Enc(e) => e.unmasked_ids(),
            TrainInstance::Dec(d) => d.ids.clone(),
        };
        assert_ne!(ids(&a[0]), ids(&b[0]));
        // Same epoch seed reproduces the same draw.
        let c = assemble_batch(Variant::IclRand, ModelKind::Encoder, &[0], &data, &cfg, 1).unwrap();
        assert_eq!(ids(&a[0]), ids(&c[0]));
    }

    #[test]
    fn plain_lm_instances_cover_every_position() {
        let data = tiny_data();
        let inst = plain_lm_instance(&data.target_sentences[0], &data.vocab, 32);
        assert_eq!(inst.ids[0], crate::embed::BOS_ID);
        assert_eq!(*inst.ids.last().unwrap(), crate::embed::EOS_ID);
        assert!(inst.loss_mask.iter().all(|&b| b));
        assert_eq!(inst.region[0], DecRegion::Template);
        assert!(inst.region[1..].iter().all(|r| *r == DecRegion::Context));
    }

    #[test]
    fn encoder_source_positions_survive_assembly() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let instances =
            assemble_batch(Variant::Daicl, ModelKind::Encoder, &[4], &data, &cfg, 9).unwrap();
        let TrainInstance::Enc(e) = &instances[0] else { panic!() };
        let src_len = data.source_train[4].tokens.len();
        assert_eq!(
            e.region.iter().filter(|r| **r == EncRegion::Source).count(),
            src_len
        );
    }
}
