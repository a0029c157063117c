//! Deterministic embeddings and retrieval over the target-domain datastore.
//!
//! The retriever is fixed (never trained): sentences are embedded by hashing
//! character trigrams into `dim` buckets and projecting through a seeded
//! Gaussian matrix, so identical `(text, spec)` pairs give bit-identical
//! vectors on every platform. Two scoring metrics are supported — plain
//! cosine over sentence embeddings, and a greedy token-matching score with
//! IDF weighting for tasks where token-level similarity matters more than
//! sentence gist. Search is an exhaustive scan: exact by construction, and
//! cheap at the corpus sizes this crate targets.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::rng::{rng_from_seed, sample_without_replacement, std_normal};

/// Reserved vocabulary ids.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const BOS_ID: u32 = 4;
pub const EOS_ID: u32 = 5;

const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[MASK]", "[SEP]", "[BOS]", "[EOS]"];

/// Token ↔ id bijection with six fixed reserved ids.
///
/// Corpus tokens are lowercased and punctuation-split by [`tokenize`], so
/// they can never collide with the bracketed reserved forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: BTreeMap::new(),
        };
        for t in RESERVED {
            v.tokens.push(t.to_string());
            v.ids.insert(t.to_string(), (v.tokens.len() - 1) as u32);
        }
        v
    }

    /// Builds a vocabulary from token streams in first-occurrence order.
    pub fn from_sentences<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [Token]>,
    {
        let mut v = Vocabulary::new();
        for sent in sentences {
            for tok in sent {
                v.intern(tok.as_str());
            }
        }
        v
    }

    /// Returns the id for `token`, adding it if absent.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Total number of ids, reserved included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How sentences are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Seeded trigram-hash + Gaussian projection (the default, model-free).
    NgramProjection,
    /// Mean-pooled hidden states of a trained encoder; constructed through
    /// `model::EncoderEmbedder`, not from the spec alone.
    ModelEncoder,
}

/// Embedder configuration. `dim` must be at least 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub dim: usize,
    pub seed: u64,
    pub kind: EmbedderKind,
}

impl EmbedderSpec {
    pub fn ngram(dim: usize, seed: u64) -> Self {
        EmbedderSpec {
            dim,
            seed,
            kind: EmbedderKind::NgramProjection,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 8 {
            return Err(EmbedError::BadSpec(self.dim));
        }
        Ok(())
    }
}

/// Anything that can turn text into a unit-norm vector of a fixed dimension.
///
/// The boolean flags degenerate inputs that fell back to the basis vector
/// `e_0` because the text had no trigram content.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> (Vec<f64>, bool);
}

/// The default deterministic embedder: character trigrams of the normalized
/// text (wrapped in `^`/`$` boundary markers) are counted into `dim` hash
/// buckets, projected by a seed-derived Gaussian matrix and L2-normalized.
#[derive(Debug, Clone)]
pub struct NgramEmbedder {
    spec: EmbedderSpec,
    projection: Vec<f64>, // dim × dim, row-major
}

impl NgramEmbedder {
    pub fn from_spec(spec: &EmbedderSpec) -> Result<Self, EmbedError> {
        spec.validate()?;
        if spec.kind != EmbedderKind::NgramProjection {
            return Err(EmbedError::UnsupportedKind);
        }
        let mut rng = rng_from_seed(spec.seed);
        let projection = (0..spec.dim * spec.dim)
            .map(|_| std_normal(&mut rng))
            .collect();
        Ok(NgramEmbedder {
            spec: *spec,
            projection,
        })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }
}

impl TextEmbedder for NgramEmbedder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn embed(&self, text: &str) -> (Vec<f64>, bool) {
        let dim = self.spec.dim;
        // Normalize exactly like the retrieval corpus: lowercase, collapse
        // whitespace, split punctuation.
        let normalized: Vec<Token> = tokenize(text);
        let mut chars: Vec<char> = vec!['^'];
        for (i, tok) in normalized.iter().enumerate() {
            if i > 0 {
                chars.push(' ');
            }
            chars.extend(tok.as_str().chars());
        }
        chars.push('$');

        if chars.len() < 3 {
            // No trigram content: deterministic fallback basis vector.
            let mut v = vec![0.0; dim];
            v[0] = 1.0;
            return (v, true);
        }

        let mut counts = vec![0.0f64; dim];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut len = 0;
            for ch in w {
                len += ch.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = (fnv1a64(&buf[..len]) % dim as u64) as usize;
            counts[bucket] += 1.0;
        }

        let mut v = vec![0.0f64; dim];
        for (j, &c) in counts.iter().enumerate() {
            if c != 0.0 {
                for (i, slot) in v.iter_mut().enumerate() {
                    *slot += self.projection[i * dim + j] * c;
                }
            }
        }
        let norm = l2_norm(&v);
        if norm == 0.0 {
            let mut e0 = vec![0.0; dim];
            e0[0] = 1.0;
            return (e0, true);
        }
        for x in &mut v {
            *x /= norm;
        }
        (v, false)
    }
}

/// FNV-1a, 64-bit. Fixed constants keep bucket assignment stable forever.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on whitespace, and breaks punctuation characters into
/// their own tokens. Deterministic; empty text yields an empty list.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, out: &mut Vec<Token>| {
        if !current.is_empty() {
            out.push(Token::new(current).expect("tokenizer never emits whitespace"));
            current.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut out);
        } else if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else {
            flush(&mut current, &mut out);
            let mut punct = String::new();
            punct.push(ch);
            out.push(Token::new(&punct).expect("punctuation token is non-empty"));
        }
    }
    flush(&mut current, &mut out);
    out
}

/// Embeds one sentence under an ngram-projection spec. See [`NgramEmbedder`].
pub fn embed_sentence(text: &str, spec: &EmbedderSpec) -> Result<(Vec<f64>, bool), EmbedError> {
    Ok(NgramEmbedder::from_spec(spec)?.embed(text))
}

fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity of two non-zero vectors of equal length.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Smoothed inverse document frequency over a sentence corpus:
/// `idf(t) = ln((N+1)/(df(t)+1))`, with unseen tokens at `ln(N+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    values: BTreeMap<String, f64>,
    default: f64,
}

impl IdfTable {
    pub fn get(&self, token: &str) -> f64 {
        self.values.get(token).copied().unwrap_or(self.default)
    }

    pub fn default_idf(&self) -> f64 {
        self.default
    }
}

/// Builds the IDF table for a non-empty corpus of token sequences.
pub fn idf_table(corpus: &[Vec<Token>]) -> Result<IdfTable, EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let n = corpus.len() as f64;
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for sent in corpus {
        let mut seen: Vec<&str> = sent.iter().map(Token::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for tok in seen {
            *df.entry(tok.to_string()).or_insert(0) += 1;
        }
    }
    let values = df
        .into_iter()
        .map(|(tok, d)| (tok, libm::log((n + 1.0) / (d as f64 + 1.0))))
        .collect();
    Ok(IdfTable {
        values,
        default: libm::log(n + 1.0),
    })
}

/// Greedy token-matching score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl MatchScore {
    /// Optional baseline rescaling `(s - b) / (1 - b)`; off by default.
    pub fn rescaled(self, baseline: f64) -> MatchScore {
        let r = |s: f64| (s - baseline) / (1.0 - baseline);
        MatchScore {
            precision: r(self.precision),
            recall: r(self.recall),
            f: r(self.f),
        }
    }
}

/// Greedy token matching between two sequences of unit-norm token vectors.
///
/// Recall weights each reference token by `ref_weights` and takes its best
/// match among candidate tokens; precision is symmetric with the roles
/// swapped; `f` is their harmonic mean (0 when both vanish). Vectors are
/// assumed unit-norm, so cosine reduces to a dot product. A weight sum of
/// zero falls back to uniform weighting.
pub fn token_match_score(
    cand: &[Vec<f64>],
    reference: &[Vec<f64>],
    cand_weights: &[f64],
    ref_weights: &[f64],
) -> Result<MatchScore, EmbedError> {
    if cand.is_empty() || reference.is_empty() {
        return Err(EmbedError::EmptySequence);
    }
    if cand_weights.len() != cand.len() || ref_weights.len() != reference.len() {
        return Err(EmbedError::DimensionMismatch(cand_weights.len(), cand.len()));
    }
    let side = |from: &[Vec<f64>], to: &[Vec<f64>], weights: &[f64]| -> f64 {
        let wsum: f64 = weights.iter().sum();
        let uniform = wsum <= 0.0;
        let denom = if uniform { from.len() as f64 } else { wsum };
        let mut acc = 0.0;
        for (x, &w) in from.iter().zip(weights) {
            let best = to
                .iter()
                .map(|y| dot(x, y))
                .fold(f64::NEG_INFINITY, f64::max);
            acc += if uniform { best } else { w * best };
        }
        acc / denom
    };
    let recall = side(reference, cand, ref_weights);
    let precision = side(cand, reference, cand_weights);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MatchScore { precision, recall, f })
}

/// Retrieval metric selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    TokenMatch,
}

/// One retrieved item: index into the datastore plus its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub corpus_id: usize,
    pub score: f64,
}

/// The target-domain datastore: token sequences with precomputed sentence
/// embeddings, token embeddings (token-match metric only) and IDF weights.
/// Immutable once built; queries are read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub spec: EmbedderSpec,
    pub metric: Metric,
    pub idf_weighted: bool,
    pub sentences: Vec<Vec<Token>>,
    pub sent_emb: Vec<Vec<f64>>,
    pub tok_emb: Vec<Vec<Vec<f64>>>,
    pub idf: IdfTable,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Checks the unit-norm invariant on every stored vector (used after
    /// deserialization).
    pub fn validate_norms(&self) -> Result<(), EmbedError> {
        let check = |v: &[f64]| -> Result<(), EmbedError> {
            if (l2_norm(v) - 1.0).abs() > 1e-9 {
                return Err(EmbedError::NormViolation);
            }
            Ok(())
        };
        for v in &self.sent_emb {
            check(v)?;
        }
        for sent in &self.tok_emb {
            for v in sent {
                check(v)?;
            }
        }
        Ok(())
    }

    fn query_weights(&self, tokens: &[Token]) -> Vec<f64> {
        if self.idf_weighted {
            tokens.iter().map(|t| self.idf.get(t.as_str())).collect()
        } else {
            vec![1.0; tokens.len()]
        }
    }

    fn stored_weights(&self, id: usize) -> Vec<f64> {
        self.query_weights(&self.sentences[id])
    }

    /// Scores one stored sentence against an embedded query.
    pub fn score(&self, query: &EmbeddedQuery, id: usize) -> f64 {
        match self.metric {
            Metric::Cosine => dot(&query.sent, &self.sent_emb[id]),
            Metric::TokenMatch => {
                let stored = &self.tok_emb[id];
                if query.toks.is_empty() || stored.is_empty() {
                    return 0.0;
                }
                token_match_score(
                    &query.toks,
                    stored,
                    &query.tok_weights,
                    &self.stored_weights(id),
                )
                .map(|s| s.f)
                .unwrap_or(0.0)
            }
        }
    }

    /// Embeds a query once so it can be scored against many stored items.
    pub fn embed_query(&self, tokens: &[Token], embedder: &dyn TextEmbedder) -> EmbeddedQuery {
        let text = join_tokens(tokens);
        let (sent, _) = embedder.embed(&text);
        let toks = match self.metric {
            Metric::Cosine => Vec::new(),
            Metric::TokenMatch => tokens
                .iter()
                .map(|t| embedder.embed(t.as_str()).0)
                .collect(),
        };
        let tok_weights = match self.metric {
            Metric::Cosine => Vec::new(),
            Metric::TokenMatch => self.query_weights(tokens),
        };
        EmbeddedQuery {
            sent,
            toks,
            tok_weights,
        }
    }

    /// Exhaustive top-k: the `min(k, len)` highest-scoring items, ties broken
    /// by smaller corpus id.
    pub fn top_k(
        &self,
        query: &[Token],
        embedder: &dyn TextEmbedder,
        k: usize,
    ) -> Result<Vec<ScoredHit>, EmbedError> {
        if self.is_empty() {
            return Err(EmbedError::EmptyIndex);
        }
        let embedded = self.embed_query(query, embedder);
        Ok(self.top_k_embedded(&embedded, k, None))
    }

    /// As [`RetrievalIndex::top_k`] but with a pre-embedded query and an
    /// optional stored id to exclude (retrieval from a corpus that contains
    /// the query itself).
    pub fn top_k_embedded(
        &self,
        query: &EmbeddedQuery,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<ScoredHit> {
        let mut hits: Vec<ScoredHit> = (0..self.len())
            .filter(|&id| Some(id) != exclude)
            .map(|id| ScoredHit {
                corpus_id: id,
                score: self.score(query, id),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.corpus_id.cmp(&b.corpus_id))
        });
        hits.truncate(k);
        hits
    }

    /// `k` distinct stored ids, uniform without replacement, deterministic
    /// given `seed`.
    pub fn random_k(&self, k: usize, seed: u64) -> Result<Vec<usize>, EmbedError> {
        if k > self.len() {
            return Err(EmbedError::KTooLarge { k, len: self.len() });
        }
        let mut rng = rng_from_seed(seed);
        Ok(sample_without_replacement(&mut rng, self.len(), k))
    }
}

/// A query embedded once for repeated scoring.
#[derive(Debug, Clone)]
pub struct EmbeddedQuery {
    pub sent: Vec<f64>,
    pub toks: Vec<Vec<f64>>,
    pub tok_weights: Vec<f64>,
}

/// Renders a token sequence back to text (single spaces).
pub fn join_tokens(tokens: &[Token]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_str());
    }
    s
}

/// Builds a retrieval index over a non-empty corpus with the default
/// ngram-projection embedder. Rebuilding from the same `(corpus, spec)` gives
/// an identical index.
pub fn build_index(
    corpus: &[Vec<Token>],
    spec: &EmbedderSpec,
    metric: Metric,
) -> Result<RetrievalIndex, EmbedError> {
    let embedder = NgramEmbedder::from_spec(spec)?;
    build_index_with(corpus, &embedder, spec, metric)
}

/// Builds a retrieval index with any embedder (e.g. a trained encoder).
pub fn build_index_with(
    corpus: &[Vec<Token>],
    embedder: &dyn TextEmbedder,
    spec: &EmbedderSpec,
    metric: Metric,
) -> Result<RetrievalIndex, EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let idf = idf_table(corpus)?;
    let mut sent_emb = Vec::with_capacity(corpus.len());
    let mut tok_emb = Vec::new();
    for sent in corpus {
        let (v, _) = embedder.embed(&join_tokens(sent));
        sent_emb.push(v);
    }
    if metric == Metric::TokenMatch {
        tok_emb.reserve(corpus.len());
        for sent in corpus {
            tok_emb.push(
                sent.iter()
                    .map(|t| embedder.embed(t.as_str()).0)
                    .collect::<Vec<_>>(),
            );
        }
    }
    Ok(RetrievalIndex {
        spec: *spec,
        metric,
        idf_weighted: true,
        sentences: corpus.to_vec(),
        sent_emb,
        tok_emb,
        idf,
    })
}

/// Errors from embedding and retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedError {
    BadSpec(usize),
    UnsupportedKind,
    DimensionMismatch(usize, usize),
    ZeroNorm,
    EmptyCorpus,
    EmptySequence,
    EmptyIndex,
    KTooLarge { k: usize, len: usize },
    NormViolation,
}

impl fmt::Display for EmbedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedError::BadSpec(dim) => write!(f, "embedder dim {dim} below minimum 8"),
            EmbedError::UnsupportedKind => f.write_str("spec kind needs a model-backed embedder"),
            EmbedError::DimensionMismatch(a, b) => write!(f, "dimension mismatch: {a} vs {b}"),
            EmbedError::ZeroNorm => f.write_str("zero-norm vector"),
            EmbedError::EmptyCorpus => f.write_str("empty corpus"),
            EmbedError::EmptySequence => f.write_str("empty token sequence"),
            EmbedError::EmptyIndex => f.write_str("empty index"),
            EmbedError::KTooLarge { k, len } => write!(f, "k={k} exceeds index size {len}"),
            EmbedError::NormViolation => f.write_str("stored vector is not unit norm"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for EmbedError {}
