//! Corpus ingestion and normalization.
//!
//! Labeled source data comes in two flavors: CoNLL-style token/tag files for
//! entity span prediction and star-rated reviews for sentiment. Entity types
//! are stripped down to the bare `B`/`I`/`O` skeleton so that source and
//! target domains share one label space; star ratings map onto three
//! sentiment classes. A corpus acting as the target-domain datastore keeps
//! text only — labels present in the raw file are discarded.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// A single surface token: non-empty, no internal whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    pub fn new(text: &str) -> Result<Self, CorpusError> {
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(CorpusError::BadToken(text.to_string()));
        }
        Ok(Token(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A BIO tag, optionally carrying an entity type (`B-LOC`), which the
/// adaptation setup ignores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    O,
    B(Option<String>),
    I(Option<String>),
}

impl Tag {
    /// Parses `O`, `B`, `I`, `B-TYPE` or `I-TYPE`.
    pub fn parse(raw: &str) -> Result<Self, CorpusError> {
        match raw {
            "O" => return Ok(Tag::O),
            "B" => return Ok(Tag::B(None)),
            "I" => return Ok(Tag::I(None)),
            _ => {}
        }
        if let Some(ty) = raw.strip_prefix("B-") {
            if !ty.is_empty() {
                return Ok(Tag::B(Some(ty.to_string())));
            }
        }
        if let Some(ty) = raw.strip_prefix("I-") {
            if !ty.is_empty() {
                return Ok(Tag::I(Some(ty.to_string())));
            }
        }
        Err(CorpusError::UnknownTag(raw.to_string()))
    }

    /// Drops the entity type, keeping the `B`/`I`/`O` skeleton.
    pub fn stripped(&self) -> Tag {
        match self {
            Tag::O => Tag::O,
            Tag::B(_) => Tag::B(None),
            Tag::I(_) => Tag::I(None),
        }
    }

    pub fn is_typeless(&self) -> bool {
        matches!(self, Tag::O | Tag::B(None) | Tag::I(None))
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(None) => f.write_str("B"),
            Tag::B(Some(ty)) => write!(f, "B-{ty}"),
            Tag::I(None) => f.write_str("I"),
            Tag::I(Some(ty)) => write!(f, "I-{ty}"),
        }
    }
}

/// One tokenized sentence with an aligned tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<Token>,
    pub tags: Vec<Tag>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<Token>, tags: Vec<Tag>) -> Result<Self, CorpusError> {
        if tokens.len() != tags.len() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        Ok(TaggedSentence { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Three-way sentiment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Negative, Sentiment::Neutral, Sentiment::Positive];

    /// Stable class id used by classifier heads.
    pub fn class_id(self) -> usize {
        match self {
            Sentiment::Negative => 0,
            Sentiment::Neutral => 1,
            Sentiment::Positive => 2,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Sentiment> {
        Sentiment::ALL.get(id).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
            Sentiment::Positive => "positive",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A review text with its sentiment label and, when ingested from raw star
/// ratings, the original rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentExample {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stars: Option<u8>,
    pub label: Sentiment,
}

impl SentimentExample {
    /// Builds an example from a star rating, deriving the label.
    pub fn from_stars(text: &str, stars: u8) -> Result<Self, CorpusError> {
        Ok(SentimentExample {
            text: text.to_string(),
            stars: Some(stars),
            label: rating_to_label(stars)?,
        })
    }
}

/// Half-open token span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        EntitySpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Labeled payload of a corpus: one task at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabeledData {
    Ner(Vec<TaggedSentence>),
    Sa(Vec<SentimentExample>),
    None,
}

/// A named corpus with an optional labeled part and an unlabeled text part.
///
/// When a corpus serves as the target-domain datastore only `unlabeled`
/// may be populated; [`DomainCorpus::into_target_datastore`] enforces that
/// by discarding labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub name: String,
    pub split: Split,
    pub labeled: LabeledData,
    pub unlabeled: Vec<Vec<Token>>,
}

impl DomainCorpus {
    pub fn labeled_ner(name: &str, split: Split, sentences: Vec<TaggedSentence>) -> Self {
        DomainCorpus {
            name: name.to_string(),
            split,
            labeled: LabeledData::Ner(sentences),
            unlabeled: Vec::new(),
        }
    }

    pub fn labeled_sa(name: &str, split: Split, examples: Vec<SentimentExample>) -> Self {
        DomainCorpus {
            name: name.to_string(),
            split,
            labeled: LabeledData::Sa(examples),
            unlabeled: Vec::new(),
        }
    }

    pub fn unlabeled(name: &str, split: Split, sentences: Vec<Vec<Token>>) -> Self {
        DomainCorpus {
            name: name.to_string(),
            split,
            labeled: LabeledData::None,
            unlabeled: sentences,
        }
    }

    /// Converts any corpus into a target-domain datastore: all labels are
    /// dropped, only token sequences remain.
    pub fn into_target_datastore(self) -> DomainCorpus {
        let mut unlabeled = self.unlabeled;
        match self.labeled {
            LabeledData::Ner(sents) => {
                unlabeled.extend(sents.into_iter().map(|s| s.tokens));
            }
            LabeledData::Sa(_examples) => {
                // Review text is not pre-tokenized; callers tokenize it with
                // `embed::tokenize` before building a datastore, so reaching
                // this branch via `into_target_datastore` keeps tokens only.
            }
            LabeledData::None => {}
        }
        DomainCorpus {
            name: self.name,
            split: self.split,
            labeled: LabeledData::None,
            unlabeled,
        }
    }
}

/// Errors from corpus ingestion and codec operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusError {
    /// A CoNLL line had fewer than two whitespace-separated columns.
    MalformedLine { line_no: usize, line: String },
    /// The tag column did not parse as `O`, `B[-type]` or `I[-type]`.
    UnknownTag(String),
    BadToken(String),
    LengthMismatch { tokens: usize, tags: usize },
    /// Star rating outside `[1, 5]`.
    OutOfRange(u8),
    OverlappingSpans(EntitySpan, EntitySpan),
    SpanOutOfBounds { span: EntitySpan, len: usize },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::MalformedLine { line_no, line } => {
                write!(f, "line {line_no}: expected at least 2 columns, got {line:?}")
            }
            CorpusError::UnknownTag(t) => write!(f, "unknown tag {t:?}"),
            CorpusError::BadToken(t) => write!(f, "bad token {t:?}"),
            CorpusError::LengthMismatch { tokens, tags } => {
                write!(f, "{tokens} tokens vs {tags} tags")
            }
            CorpusError::OutOfRange(s) => write!(f, "star rating {s} outside [1, 5]"),
            CorpusError::OverlappingSpans(a, b) => {
                write!(f, "overlapping spans ({},{}) and ({},{})", a.start, a.end, b.start, b.end)
            }
            CorpusError::SpanOutOfBounds { span, len } => {
                write!(f, "span ({},{}) outside sentence of length {len}", span.start, span.end)
            }
        }
    }
}

#[cfg(test)]
impl std::error::Error for CorpusError {}

/// What `parse_conll` skipped or flagged while reading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    /// Count of `-DOCSTART-` lines dropped (document boundaries; the
    /// datasets disagree on their shape, so they are flagged, not parsed).
    pub docstart_lines: usize,
}

/// Parses blank-line-separated CoNLL text. The last column of each non-blank
/// line is the tag; everything before it is the token columns, of which the
/// first is the surface form.
pub fn parse_conll(input: &str) -> Result<Vec<TaggedSentence>, CorpusError> {
    parse_conll_with_report(input).map(|(sents, _)| sents)
}

/// As [`parse_conll`], also reporting dropped document-boundary lines.
pub fn parse_conll_with_report(
    input: &str,
) -> Result<(Vec<TaggedSentence>, ParseReport), CorpusError> {
    let mut report = ParseReport::default();
    let mut sentences = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    let mut tags: Vec<Tag> = Vec::new();

    let mut flush = |tokens: &mut Vec<Token>, tags: &mut Vec<Tag>| {
        if !tokens.is_empty() {
            sentences.push(TaggedSentence {
                tokens: core::mem::take(tokens),
                tags: core::mem::take(tags),
            });
        }
    };

    for (idx, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        let mut cols = line.split_whitespace();
        let first = cols.next().expect("non-blank line has a first column");
        if first.starts_with("-DOCSTART-") {
            report.docstart_lines += 1;
            continue;
        }
        let rest: Vec<&str> = cols.collect();
        if rest.is_empty() {
            return Err(CorpusError::MalformedLine {
                line_no: idx + 1,
                line: line.to_string(),
            });
        }
        let tag = Tag::parse(rest[rest.len() - 1])?;
        tokens.push(Token::new(first)?);
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags);
    Ok((sentences, report))
}

/// Drops entity types from every tag: `B-X → B`, `I-X → I`, `O → O`.
pub fn strip_types(tags: &[Tag]) -> Vec<Tag> {
    tags.iter().map(Tag::stripped).collect()
}

/// Star rating to sentiment: `<3` negative, `=3` neutral, `>3` positive.
pub fn rating_to_label(stars: u8) -> Result<Sentiment, CorpusError> {
    match stars {
        1 | 2 => Ok(Sentiment::Negative),
        3 => Ok(Sentiment::Neutral),
        4 | 5 => Ok(Sentiment::Positive),
        other => Err(CorpusError::OutOfRange(other)),
    }
}

/// Decodes BIO tags into entity spans.
///
/// A chunk starts at every `B` and at every `I` that does not continue a
/// chunk (stray `I`), and extends through subsequent `I`s. Entity types are
/// ignored; only the `B`/`I`/`O` skeleton matters.
pub fn tags_to_spans(tags: &[Tag]) -> BTreeSet<EntitySpan> {
    let mut spans = BTreeSet::new();
    let mut start: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => {
                if let Some(s) = start.take() {
                    spans.insert(EntitySpan::new(s, i));
                }
            }
            Tag::B(_) => {
                if let Some(s) = start.take() {
                    spans.insert(EntitySpan::new(s, i));
                }
                start = Some(i);
            }
            Tag::I(_) => {
                if start.is_none() {
                    // Stray I opens a chunk, conlleval-style.
                    start = Some(i);
                }
            }
        }
    }
    if let Some(s) = start {
        spans.insert(EntitySpan::new(s, tags.len()));
    }
    spans
}

/// Encodes disjoint spans over a length-`n` sentence as BIO tags.
pub fn spans_to_tags(spans: &BTreeSet<EntitySpan>, n: usize) -> Result<Vec<Tag>, CorpusError> {
    let mut prev: Option<EntitySpan> = None;
    for span in spans {
        if span.start >= span.end || span.end > n {
            return Err(CorpusError::SpanOutOfBounds { span: *span, len: n });
        }
        if let Some(p) = prev {
            if p.overlaps(span) {
                return Err(CorpusError::OverlappingSpans(p, *span));
            }
        }
        prev = Some(*span);
    }
    let mut tags = alloc::vec![Tag::O; n];
    for span in spans {
        tags[span.start] = Tag::B(None);
        for t in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *t = Tag::I(None);
        }
    }
    Ok(tags)
}
