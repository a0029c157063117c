//! Instance assembly, masking, prompt templates and response parsing.
//!
//! Encoder inputs follow the layout `[source; SEP; ctx_1; SEP; …; SEP; ctx_k]`
//! with retrieved contexts appended after the source, most similar first, and
//! masked-language-model noise applied to context positions only. Decoder
//! inputs render an Alpaca-style template with contexts inserted between the
//! instruction and the source input, most similar context nearest the input.
//! Inference prompts and the parsers that grade generative model responses
//! live here too.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::embed::{Vocabulary, BOS_ID, EOS_ID, MASK_ID, SEP_ID};
use crate::rng::{sample_without_replacement, DeterministicRng};
use crate::trainer::Variant;

/// Default context-masking rate.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Per-position role in an encoder instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncRegion {
    Source,
    Sep,
    Context,
}

/// Per-position role in a decoder instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecRegion {
    Template,
    Context,
    Source,
    Response,
}

/// Task label carried by an encoder instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceLabel {
    /// Classifier target (sentiment class id).
    Class(usize),
    /// Per-source-position tag ids (O=0, B=1, I=2).
    Tags(Vec<usize>),
    /// Language-modeling-only instance (adaptive pre-training stage 1).
    Unlabeled,
}

/// Fixed mapping from BIO tags to emission indices.
pub fn bio_tag_id(tag: &crate::corpus::Tag) -> usize {
    match tag {
        crate::corpus::Tag::O => 0,
        crate::corpus::Tag::B(_) => 1,
        crate::corpus::Tag::I(_) => 2,
    }
}

/// Number of BIO tag classes.
pub const BIO_TAGS: usize = 3;

/// A fused source+context encoder input.
///
/// `mask_positions` is sorted, indexes only CONTEXT positions, and pairs with
/// `mask_targets`, the original ids now replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInstance {
    pub ids: Vec<u32>,
    pub region: Vec<EncRegion>,
    pub mask_positions: Vec<usize>,
    pub mask_targets: Vec<u32>,
    pub label: InstanceLabel,
    pub masked: bool,
}

impl EncoderInstance {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions with SOURCE region.
    pub fn source_positions(&self) -> Vec<usize> {
        self.region
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == EncRegion::Source)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of CONTEXT positions.
    pub fn context_len(&self) -> usize {
        self.region.iter().filter(|r| **r == EncRegion::Context).count()
    }

    /// Masking ran but found nothing to mask (no contexts).
    pub fn is_mask_free(&self) -> bool {
        self.masked && self.mask_positions.is_empty()
    }

    /// Restores the original ids at the masked positions.
    pub fn unmasked_ids(&self) -> Vec<u32> {
        let mut ids = self.ids.clone();
        for (&p, &t) in self.mask_positions.iter().zip(&self.mask_targets) {
            ids[p] = t;
        }
        ids
    }
}

/// A decoder training or inference sequence with token-exact regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderInstance {
    pub ids: Vec<u32>,
    pub region: Vec<DecRegion>,
    pub loss_mask: Vec<bool>,
}

impl DecoderInstance {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the first RESPONSE position, if any.
    pub fn response_start(&self) -> Option<usize> {
        self.region.iter().position(|r| *r == DecRegion::Response)
    }
}

/// Builds the unmasked encoder layout `[src; SEP; c_1; SEP; …; SEP; c_k]`.
///
/// Contexts arrive most-similar-first and keep that order (most similar ends
/// up adjacent to the source). If the result would exceed `max_len`, whole
/// contexts are dropped from the far (least similar) end; the source itself
/// is never truncated.
pub fn build_encoder_instance(
    source: &[Token],
    label: InstanceLabel,
    contexts: &[Vec<Token>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncoderInstance, PromptError> {
    if source.is_empty() {
        return Err(PromptError::EmptySource);
    }
    if source.len() > max_len {
        return Err(PromptError::SourceTooLong {
            len: source.len(),
            max_len,
        });
    }
    let mut keep = contexts.len();
    let fits = |keep: usize| -> bool {
        let ctx: usize = contexts[..keep].iter().map(Vec::len).sum();
        source.len() + keep + ctx <= max_len
    };
    while keep > 0 && !fits(keep) {
        keep -= 1;
    }

    let mut ids = Vec::new();
    let mut region = Vec::new();
    for tok in source {
        ids.push(vocab.id_or_unk(tok.as_str()));
        region.push(EncRegion::Source);
    }
    for ctx in &contexts[..keep] {
        ids.push(SEP_ID);
        region.push(EncRegion::Sep);
        for tok in ctx {
            ids.push(vocab.id_or_unk(tok.as_str()));
            region.push(EncRegion::Context);
        }
    }
    Ok(EncoderInstance {
        ids,
        region,
        mask_positions: Vec::new(),
        mask_targets: Vec::new(),
        label,
        masked: false,
    })
}

/// A language-modeling-only instance: the whole sentence is CONTEXT, so
/// masking and the MLM loss apply to all of it. Used by adaptive
/// pre-training, where no source input is mixed in.
pub fn build_mlm_only_instance(
    sentence: &[Token],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncoderInstance, PromptError> {
    if sentence.is_empty() {
        return Err(PromptError::EmptySource);
    }
    let take = sentence.len().min(max_len);
    let ids = sentence[..take]
        .iter()
        .map(|t| vocab.id_or_unk(t.as_str()))
        .collect::<Vec<_>>();
    let region = vec![EncRegion::Context; take];
    Ok(EncoderInstance {
        ids,
        region,
        mask_positions: Vec::new(),
        mask_targets: Vec::new(),
        label: InstanceLabel::Unlabeled,
        masked: false,
    })
}

/// Masks `round(rate · #context)` CONTEXT positions, sampled uniformly
/// without replacement. SOURCE and SEP positions are never touched. Zero
/// contexts is legal and yields a mask-free instance.
pub fn apply_mlm_mask(
    inst: EncoderInstance,
    rate: f64,
    rng: &mut DeterministicRng,
) -> Result<EncoderInstance, PromptError> {
    if inst.masked {
        return Err(PromptError::AlreadyMasked);
    }
    let context_positions: Vec<usize> = inst
        .region
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == EncRegion::Context)
        .map(|(i, _)| i)
        .collect();
    // Round half up.
    let m = libm::floor(rate * context_positions.len() as f64 + 0.5) as usize;
    let mut chosen = sample_without_replacement(rng, context_positions.len(), m);
    chosen.sort_unstable();
    let mut inst = inst;
    let mut mask_positions = Vec::with_capacity(m);
    let mut mask_targets = Vec::with_capacity(m);
    for c in chosen {
        let p = context_positions[c];
        mask_positions.push(p);
        mask_targets.push(inst.ids[p]);
        inst.ids[p] = MASK_ID;
    }
    inst.mask_positions = mask_positions;
    inst.mask_targets = mask_targets;
    inst.masked = true;
    Ok(inst)
}

/// Tasks with distinct prompt wording and grading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ner,
    Sa,
}

/// Appendix-style instruction wording, frozen.
pub const NER_INSTRUCTION: &str =
    "Please identify all entities from the input sentence. If there is no entity, please output None.";
pub const SA_INSTRUCTION: &str =
    "Please classify the sentiment of the input review as negative, neutral, or positive.";

const ALPACA_LAYOUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n### Instruction:\n{instruction}\n\n{contexts}Input sentence: {input}\n\n### Response:\n{response}";

/// A decoder prompt template: an instruction plus a layout string with
/// `{instruction}`, `{contexts}`, `{input}` and `{response}` placeholders in
/// that order. Rendering with no contexts must remain a valid prompt, which
/// the Alpaca layout satisfies by folding the context block's trailing blank
/// line into the block itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub instruction: String,
    pub layout: String,
}

impl PromptTemplate {
    /// The Alpaca template with the task-appropriate instruction.
    pub fn alpaca(task: Task) -> Self {
        let instruction = match task {
            Task::Ner => NER_INSTRUCTION,
            Task::Sa => SA_INSTRUCTION,
        };
        PromptTemplate {
            name: "alpaca".to_string(),
            instruction: instruction.to_string(),
            layout: ALPACA_LAYOUT.to_string(),
        }
    }

    /// Splits the layout into the four static text segments around the
    /// placeholders: pre-contexts (instruction substituted), contexts→input,
    /// input→response, and the response tail.
    fn segments(&self) -> Result<[String; 3], PromptError> {
        let with_instruction = match self.layout.find("{instruction}") {
            Some(_) => self.layout.replace("{instruction}", &self.instruction),
            None => self.layout.clone(),
        };
        let mut rest = with_instruction.as_str();
        let mut parts: Vec<String> = Vec::new();
        for ph in ["{contexts}", "{input}", "{response}"] {
            let at = rest
                .find(ph)
                .ok_or_else(|| PromptError::TemplateMismatch(ph.to_string()))?;
            parts.push(rest[..at].to_string());
            rest = &rest[at + ph.len()..];
        }
        if !rest.is_empty() {
            // Anything after {response} would sit behind the generation
            // point; the Alpaca layout ends at the response.
            return Err(PromptError::TemplateMismatch("{response} tail".to_string()));
        }
        Ok([parts.remove(0), parts.remove(0), parts.remove(0)])
    }

    /// Renders the full prompt text. `contexts` arrive most-similar-first
    /// and are laid out with the most similar one last, adjacent to the
    /// input.
    pub fn render(
        &self,
        contexts: &[Vec<Token>],
        input: &str,
        response: &str,
    ) -> Result<String, PromptError> {
        let [pre, mid, post] = self.segments()?;
        let mut s = String::new();
        s.push_str(&pre);
        s.push_str(&context_block(contexts));
        s.push_str(&mid);
        s.push_str(input);
        s.push_str(&post);
        s.push_str(response);
        Ok(s)
    }
}

/// Contexts rendered one per line, least similar first, followed by a blank
/// separator line; empty when there are no contexts.
fn context_block(contexts: &[Vec<Token>]) -> String {
    if contexts.is_empty() {
        return String::new();
    }
    let mut s = String::new();
    for ctx in contexts.iter().rev() {
        s.push_str(&crate::embed::join_tokens(ctx));
        s.push('\n');
    }
    s.push('\n');
    s
}

/// Interns every token a decoder run can produce outside the corpora: the
/// template text, label words and the literal `none`.
pub fn extend_vocab_for_decoder(vocab: &mut Vocabulary, template: &PromptTemplate) {
    let mut text = template.layout.replace("{instruction}", &template.instruction);
    for ph in ["{contexts}", "{input}", "{response}"] {
        text = text.replace(ph, " ");
    }
    for tok in crate::embed::tokenize(&text) {
        vocab.intern(tok.as_str());
    }
    for w in ["negative", "neutral", "positive", "none", ","] {
        vocab.intern(w);
    }
}

/// Builds a decoder instance `[BOS; template; contexts; template; source;
/// template; response; EOS]` with token-exact regions.
///
/// `contexts` arrive most-similar-first; the layout places the most similar
/// context directly before the source input. Over-long inputs drop whole
/// contexts, least similar first. An empty `response` builds an inference
/// prefix: no RESPONSE positions and no EOS.
pub fn build_decoder_instance(
    source: &[Token],
    contexts: &[Vec<Token>],
    response: &str,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<DecoderInstance, PromptError> {
    if source.is_empty() {
        return Err(PromptError::EmptySource);
    }
    let [pre, mid, post] = template.segments()?;
    let ids_of = |text: &str| -> Vec<u32> {
        crate::embed::tokenize(text)
            .iter()
            .map(|t| vocab.id_or_unk(t.as_str()))
            .collect()
    };

    let pre_ids = ids_of(&pre);
    let mid_ids = ids_of(&mid);
    let post_ids = ids_of(&post);
    let src_ids: Vec<u32> = source.iter().map(|t| vocab.id_or_unk(t.as_str())).collect();
    let resp_ids = ids_of(response);

    let fixed = 1 // BOS
        + pre_ids.len()
        + mid_ids.len()
        + src_ids.len()
        + post_ids.len()
        + resp_ids.len()
        + if response.is_empty() { 0 } else { 1 }; // EOS
    let mut keep = contexts.len();
    let fits = |keep: usize| -> bool {
        let ctx: usize = contexts[..keep].iter().map(Vec::len).sum();
        fixed + ctx <= max_len
    };
    while keep > 0 && !fits(keep) {
        keep -= 1;
    }

    let mut ids = Vec::with_capacity(fixed);
    let mut region = Vec::with_capacity(fixed);
    let push = |seg_ids: &[u32], r: DecRegion, ids: &mut Vec<u32>, region: &mut Vec<DecRegion>| {
        for &id in seg_ids {
            ids.push(id);
            region.push(r);
        }
    };
    ids.push(BOS_ID);
    region.push(DecRegion::Template);
    push(&pre_ids, DecRegion::Template, &mut ids, &mut region);
    // Least similar first, most similar adjacent to the input.
    for ctx in contexts[..keep].iter().rev() {
        let ctx_ids: Vec<u32> = ctx.iter().map(|t| vocab.id_or_unk(t.as_str())).collect();
        push(&ctx_ids, DecRegion::Context, &mut ids, &mut region);
    }
    push(&mid_ids, DecRegion::Template, &mut ids, &mut region);
    push(&src_ids, DecRegion::Source, &mut ids, &mut region);
    push(&post_ids, DecRegion::Template, &mut ids, &mut region);
    if !response.is_empty() {
        push(&resp_ids, DecRegion::Response, &mut ids, &mut region);
        ids.push(EOS_ID);
        region.push(DecRegion::Response);
    }

    let n = ids.len();
    Ok(DecoderInstance {
        ids,
        region,
        loss_mask: vec![false; n],
    })
}

/// Derives the per-position loss mask for a training variant.
///
/// The full-token mask (every position) realizes the joint objective for
/// DAICL; ICL-rand and ICL-source keep it too, differing only in where their
/// contexts come from. ICL-sup and No-ICL train on the task alone, so only
/// RESPONSE positions count. The variant enum is closed, so there is no
/// unknown-variant failure path.
pub fn loss_mask_for_variant(inst: &DecoderInstance, variant: Variant) -> Vec<bool> {
    match variant {
        Variant::Daicl | Variant::IclRand | Variant::IclSource => vec![true; inst.len()],
        Variant::IclSup | Variant::NoIcl | Variant::AdaptivePretrain => inst
            .region
            .iter()
            .map(|r| *r == DecRegion::Response)
            .collect(),
    }
}

/// How demonstrations are chosen for inference-only prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    None,
    Random,
    Retrieved,
}

/// Renders a few-shot inference prompt: instruction, `k` demonstration
/// pairs, then the query stub the model completes.
pub fn render_inference_prompt(
    query: &str,
    demos: &[(String, String)],
    task: Task,
    mode: InferMode,
) -> Result<String, PromptError> {
    match mode {
        InferMode::None if !demos.is_empty() => {
            return Err(PromptError::UnexpectedDemos(demos.len()))
        }
        InferMode::Random | InferMode::Retrieved if demos.is_empty() => {
            return Err(PromptError::EmptyDemos)
        }
        _ => {}
    }
    let (instruction, input_label, output_label) = match task {
        Task::Ner => (NER_INSTRUCTION, "Sentence", "Entity"),
        Task::Sa => (SA_INSTRUCTION, "Review", "Sentiment"),
    };
    let mut s = String::new();
    s.push_str(instruction);
    s.push('\n');
    for (input, label) in demos {
        s.push_str(input_label);
        s.push_str(": ");
        s.push_str(input);
        s.push('\n');
        s.push_str(output_label);
        s.push_str(": ");
        s.push_str(label);
        s.push('\n');
    }
    s.push_str(input_label);
    s.push_str(": ");
    s.push_str(query);
    s.push('\n');
    s.push_str(output_label);
    s.push(':');
    Ok(s)
}

/// Renders an entity list the way demonstration lines do: comma-joined, or
/// the literal `None`.
pub fn render_entity_label(entities: &[String]) -> String {
    if entities.is_empty() {
        "None".to_string()
    } else {
        entities.join(", ")
    }
}

/// Canonical bullet rendering of a parsed entity list; re-parsing it yields
/// the same entities.
pub fn render_entity_bullets(entities: &[String]) -> String {
    if entities.is_empty() {
        return "None.".to_string();
    }
    let mut s = String::new();
    for (i, e) in entities.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str("- ");
        s.push_str(e);
    }
    s
}

/// Entities extracted from a generative model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEntities {
    pub entities: Vec<String>,
    /// Set when non-empty text yielded no entities and was not a `None`
    /// response.
    pub malformed: bool,
}

fn strip_item(raw: &str) -> Option<String> {
    let mut item = raw.trim();
    while let Some(stripped) = item.strip_suffix('.') {
        item = stripped.trim_end();
    }
    if item.is_empty() {
        None
    } else {
        Some(item.to_string())
    }
}

fn is_none_response(text: &str) -> bool {
    let t = text.trim().trim_end_matches(['.', '!']).trim();
    t.eq_ignore_ascii_case("none")
}

/// Strips a `1.` / `23)` numbering prefix, if present.
fn strip_numbering(line: &str) -> Option<&str> {
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))
}

/// Parses a generative NER response.
///
/// Recognized forms: a literal `None` (possibly punctuated) meaning no
/// entities; `- item` bullet lines; `1. item` numbered lines; and
/// comma-separated lists. Items keep their order, lose trailing periods and
/// surrounding whitespace, and exact repeats are dropped. Unparseable text
/// yields an empty, flagged result.
pub fn parse_entity_response(text: &str) -> ParsedEntities {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return ParsedEntities {
            entities: Vec::new(),
            malformed: true,
        };
    }
    if is_none_response(trimmed) {
        return ParsedEntities {
            entities: Vec::new(),
            malformed: false,
        };
    }
    let mut entities: Vec<String> = Vec::new();
    let mut push = |item: Option<String>| {
        if let Some(item) = item {
            if !entities.contains(&item) {
                entities.push(item);
            }
        }
    };
    for line in trimmed.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('-') {
            push(strip_item(rest));
        } else if let Some(rest) = strip_numbering(line) {
            push(strip_item(rest));
        } else {
            for part in line.split(',') {
                push(strip_item(part));
            }
        }
    }
    let malformed = entities.is_empty();
    ParsedEntities { entities, malformed }
}

/// Extracts the first sentiment word mentioned in a response,
/// case-insensitively.
pub fn parse_sentiment_response(text: &str) -> Result<crate::corpus::Sentiment, PromptError> {
    use crate::corpus::Sentiment;
    let lower = text.to_lowercase();
    let mut best: Option<(usize, Sentiment)> = None;
    for s in Sentiment::ALL {
        if let Some(at) = lower.find(s.as_str()) {
            if best.map_or(true, |(b, _)| at < b) {
                best = Some((at, s));
            }
        }
    }
    best.map(|(_, s)| s).ok_or(PromptError::NoLabelFound)
}

/// Errors from instance building and prompt handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptError {
    EmptySource,
    SourceTooLong { len: usize, max_len: usize },
    AlreadyMasked,
    TemplateMismatch(String),
    EmptyDemos,
    UnexpectedDemos(usize),
    NoLabelFound,
}

impl fmt::Display for PromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptError::EmptySource => f.write_str("source token sequence is empty"),
            PromptError::SourceTooLong { len, max_len } => {
                write!(f, "source length {len} exceeds max_len {max_len}")
            }
            PromptError::AlreadyMasked => f.write_str("instance already masked"),
            PromptError::TemplateMismatch(ph) => write!(f, "template placeholder {ph} missing"),
            PromptError::EmptyDemos => f.write_str("demonstration mode requires demos"),
            PromptError::UnexpectedDemos(n) => write!(f, "mode none given {n} demos"),
            PromptError::NoLabelFound => f.write_str("no sentiment label in response"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for PromptError {}
