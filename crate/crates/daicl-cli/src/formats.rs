//! File formats: corpus ingestion and dumps, the retrieval-index file, the
//! checkpoint container, training logs and reports.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use daicl_core::corpus::{strip_types, SentimentExample, Tag, TaggedSentence, Token};
use daicl_core::embed::{tokenize, Metric, RetrievalIndex};
use daicl_core::model::{Mat, ModelConfig, ParamStore};
use daicl_core::prompt::Task;
use daicl_core::trainer::{EpochRecord, LabeledExample, StepRecord};

/// One line of a normalized corpus dump. Exactly one of the shapes is
/// populated: tokens+tags (NER), text+label (SA), or text/tokens only
/// (unlabeled).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NormalizedRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Raw review line: `{"text": "...", "stars": 4}`.
#[derive(Debug, Clone, Deserialize)]
struct ReviewRecord {
    text: String,
    stars: u8,
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads review JSON lines and derives sentiment labels from star ratings.
pub fn read_reviews(path: &Path) -> Result<Vec<SentimentExample>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: ReviewRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad review record", path.display(), i + 1))?;
        let example = SentimentExample::from_stars(&raw.text, raw.stars)
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
        out.push(example);
    }
    Ok(out)
}

/// Writes a normalized corpus dump, one JSON object per line.
pub fn write_normalized(path: &Path, records: &[NormalizedRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_normalized(path: &Path) -> Result<Vec<NormalizedRecord>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: NormalizedRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad normalized record", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn ner_to_normalized(sentences: &[TaggedSentence], keep_types: bool) -> Vec<NormalizedRecord> {
    sentences
        .iter()
        .map(|s| {
            let tags = if keep_types {
                s.tags.clone()
            } else {
                strip_types(&s.tags)
            };
            NormalizedRecord {
                tokens: Some(s.tokens.iter().map(|t| t.as_str().to_string()).collect()),
                tags: Some(tags.iter().map(|t| t.to_string()).collect()),
                ..NormalizedRecord::default()
            }
        })
        .collect()
}

pub fn sa_to_normalized(examples: &[SentimentExample]) -> Vec<NormalizedRecord> {
    examples
        .iter()
        .map(|e| NormalizedRecord {
            text: Some(e.text.clone()),
            label: Some(e.label.as_str().to_string()),
            ..NormalizedRecord::default()
        })
        .collect()
}

/// Drops labels, keeping token sequences only (target datastore form).
pub fn to_unlabeled(records: &[NormalizedRecord]) -> Vec<NormalizedRecord> {
    records
        .iter()
        .map(|r| NormalizedRecord {
            tokens: r.tokens.clone(),
            text: r.text.clone(),
            ..NormalizedRecord::default()
        })
        .collect()
}

/// Token sequences from a normalized file (either shape).
pub fn records_to_sentences(records: &[NormalizedRecord]) -> Result<Vec<Vec<Token>>> {
    records
        .iter()
        .map(|r| match (&r.tokens, &r.text) {
            (Some(tokens), _) => tokens
                .iter()
                .map(|t| Token::new(t).map_err(|e| anyhow::anyhow!("{e}")))
                .collect(),
            (None, Some(text)) => Ok(tokenize(text)),
            (None, None) => bail!("record has neither tokens nor text"),
        })
        .collect()
}

/// Labeled trainer examples from a normalized file.
pub fn records_to_examples(records: &[NormalizedRecord], task: Task) -> Result<Vec<LabeledExample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| match task {
            Task::Ner => {
                let (Some(tokens), Some(tags)) = (&r.tokens, &r.tags) else {
                    bail!("line {}: NER record needs tokens and tags", i + 1);
                };
                if tokens.len() != tags.len() {
                    bail!("line {}: {} tokens vs {} tags", i + 1, tokens.len(), tags.len());
                }
                let tokens = tokens
                    .iter()
                    .map(|t| Token::new(t).map_err(|e| anyhow::anyhow!("line {}: {e}", i + 1)))
                    .collect::<Result<Vec<_>>>()?;
                let tags = tags
                    .iter()
                    .map(|t| Tag::parse(t).map_err(|e| anyhow::anyhow!("line {}: {e}", i + 1)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabeledExample::ner(tokens, strip_types(&tags)))
            }
            Task::Sa => {
                let Some(text) = &r.text else {
                    bail!("line {}: SA record needs text", i + 1);
                };
                let label = match r.label.as_deref() {
                    Some("negative") => daicl_core::corpus::Sentiment::Negative,
                    Some("neutral") => daicl_core::corpus::Sentiment::Neutral,
                    Some("positive") => daicl_core::corpus::Sentiment::Positive,
                    Some(other) => bail!("line {}: unknown label {other:?}", i + 1),
                    None => bail!("line {}: SA record needs a label", i + 1),
                };
                Ok(LabeledExample::sa(tokenize(text), label))
            }
        })
        .collect()
}

/// On-disk retrieval index: a JSON header wrapper around the index body.
#[derive(Serialize, Deserialize)]
struct IndexFile {
    dim: usize,
    seed: u64,
    metric: Metric,
    count: usize,
    index: RetrievalIndex,
}

pub fn write_index(path: &Path, index: &RetrievalIndex) -> Result<()> {
    let file = IndexFile {
        dim: index.spec.dim,
        seed: index.spec.seed,
        metric: index.metric,
        count: index.len(),
        index: index.clone(),
    };
    write_text(path, &serde_json::to_string(&file)?)
}

/// Loads an index and validates the stored-vector norm invariant.
pub fn read_index(path: &Path) -> Result<RetrievalIndex> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: IndexFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing index {}", path.display()))?;
    if file.count != file.index.len() {
        bail!("index header count {} does not match body {}", file.count, file.index.len());
    }
    if file.dim != file.index.spec.dim || file.seed != file.index.spec.seed {
        bail!("index header spec disagrees with body");
    }
    file.index
        .validate_norms()
        .map_err(|e| anyhow::anyhow!("index {} failed validation: {e}", path.display()))?;
    Ok(file.index)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DAICLCP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    step: u64,
    val_history: Vec<f64>,
    vocab: daicl_core::embed::Vocabulary,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
}

/// Writes a checkpoint: magic, JSON header, then raw little-endian `f64`
/// arrays in entry order. Bytes are a pure function of the contents, so
/// save/load round-trips bit-exactly.
pub fn write_checkpoint(
    path: &Path,
    store: &ParamStore,
    step: u64,
    val_history: &[f64],
    vocab: &daicl_core::embed::Vocabulary,
) -> Result<()> {
    let entries: Vec<EntryMeta> = (0..store.num_entries())
        .map(|i| {
            let m = store.entry_value(i);
            EntryMeta {
                name: store.entry_name(i).to_string(),
                rows: m.rows,
                cols: m.cols,
                frozen: store.is_frozen_entry(i),
            }
        })
        .collect();
    let header = CheckpointHeader {
        config: store.cfg.clone(),
        seed: store.seed,
        step,
        val_history: val_history.to_vec(),
        vocab: vocab.clone(),
        entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for i in 0..store.num_entries() {
        for x in &store.entry_value(i).data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A loaded checkpoint.
pub struct LoadedCheckpoint {
    pub store: ParamStore,
    pub step: u64,
    pub val_history: Vec<f64>,
    pub vocab: daicl_core::embed::Vocabulary,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(
        fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        bail!("{} is not a checkpoint file", path.display());
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).context("parsing checkpoint header")?;
    let mut parts = Vec::with_capacity(header.entries.len());
    for meta in &header.entries {
        let n = meta.rows * meta.cols;
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for slot in &mut data {
            r.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        parts.push((
            meta.name.clone(),
            Mat::from_vec(meta.rows, meta.cols, data),
            meta.frozen,
        ));
    }
    let store = ParamStore::from_parts(header.config, header.seed, parts)
        .map_err(|e| anyhow::anyhow!("reassembling checkpoint: {e}"))?;
    Ok(LoadedCheckpoint {
        store,
        step: header.step,
        val_history: header.val_history,
        vocab: header.vocab,
    })
}

/// Training log: one JSON line per step, then one per epoch.
pub fn write_train_log(path: &Path, steps: &[StepRecord], epochs: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for s in steps {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    for e in epochs {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Retrieval dump line: `{"query_id": i, "hits": [{"id": j, "score": s}]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RetrievalDumpLine {
    pub query_id: usize,
    pub hits: Vec<HitDump>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HitDump {
    pub id: usize,
    pub score: f64,
}

pub fn write_retrieval_dump(path: &Path, lines: &[RetrievalDumpLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Prompt dump: records separated by a delimiter line.
pub fn write_prompt_dump(path: &Path, prompts: &[String], delimiter: &str) -> Result<()> {
    let mut text = String::new();
    for (i, p) in prompts.iter().enumerate() {
        if i > 0 {
            text.push_str(delimiter);
            text.push('\n');
        }
        text.push_str(p);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Instance dump line: ids, run-length-encoded regions, mask positions.
#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceDumpLine {
    pub ids: Vec<u32>,
    /// Region runs as `[region, length]` pairs.
    pub regions: Vec<(String, usize)>,
    pub mask_positions: Vec<usize>,
}

pub fn run_length_encode<T: PartialEq + core::fmt::Debug>(items: &[T]) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for item in items {
        let name = format!("{item:?}").to_lowercase();
        match out.last_mut() {
            Some((last, count)) if *last == name => *count += 1,
            _ => out.push((name, 1)),
        }
    }
    out
}

pub fn write_instance_dump(path: &Path, lines: &[InstanceDumpLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    write_text(path, text)
}
