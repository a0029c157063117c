//! Metrics, significance testing, the run matrix, and the synthetic
//! domain-shift benchmark.
//!
//! Span F1 uses exact boundary matching, micro-aggregated over the corpus.
//! Generative NER output is graded by matching parsed entity strings back
//! onto sentence tokens; entities that match nothing count as false
//! positives via out-of-range sentinel spans. Significance between variant
//! runs is a two-sided Welch t-test whose t-distribution tail is computed
//! with a regularized incomplete beta function (checked in the tests against
//! direct numeric quadrature of the t density).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, Sentiment, Token};
use crate::embed::tokenize;
use crate::prompt::ParsedEntities;
use crate::rng::{rng_from_seed, DeterministicRng};
use crate::trainer::Variant;

/// Micro-aggregated exact-match span scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SpanReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> SpanReport {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SpanReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Classification accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Exact-match span F1 over aligned per-sentence span sets.
pub fn span_f1(
    gold: &[BTreeSet<EntitySpan>],
    pred: &[BTreeSet<EntitySpan>],
) -> Result<SpanReport, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        tp += g.intersection(p).count();
        fp += p.difference(g).count();
        fn_ += g.difference(p).count();
    }
    Ok(SpanReport::from_counts(tp, fp, fn_))
}

/// Fraction of aligned predictions that match.
pub fn accuracy(gold: &[Sentiment], pred: &[Sentiment]) -> Result<AccReport, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    let total = gold.len();
    Ok(AccReport {
        correct,
        total,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
    })
}

/// Grades parsed entity strings against a tokenized sentence.
///
/// Each entity is tokenized and matched case-folded, left to right; all
/// non-overlapping occurrences are claimed greedily in entity order. An
/// entity that matches nowhere claims a sentinel span beyond the sentence,
/// so it scores as exactly one false positive.
pub fn entities_to_spans(entities: &ParsedEntities, sentence: &[Token]) -> BTreeSet<EntitySpan> {
    let sent_lower: Vec<Vec<Token>> = sentence
        .iter()
        .map(|t| tokenize(t.as_str()))
        .collect();
    // A sentence token can itself split (case-folding only lowercases, but
    // punctuation inside a token splits); compare against the joined form.
    let sent_norm: Vec<String> = sent_lower
        .iter()
        .map(|ts| {
            ts.iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join("\u{1}")
        })
        .collect();
    let mut claimed = vec![false; sentence.len()];
    let mut spans = BTreeSet::new();
    let mut unmatched = 0usize;
    for entity in &entities.entities {
        let needle: Vec<String> = tokenize(entity)
            .iter()
            .map(|t| t.as_str().to_string())
            .collect();
        if needle.is_empty() {
            continue;
        }
        let mut found_any = false;
        let mut i = 0;
        // Greedy scan: a match must align needle tokens to whole sentence
        // tokens; multi-piece sentence tokens participate by their pieces.
        while i + needle_len_in_tokens(&needle, &sent_norm, i) <= sentence.len() {
            match match_at(&needle, &sent_norm, i) {
                Some(width) if !claimed[i..i + width].iter().any(|c| *c) => {
                    for c in &mut claimed[i..i + width] {
                        *c = true;
                    }
                    spans.insert(EntitySpan::new(i, i + width));
                    found_any = true;
                    i += width;
                }
                _ => i += 1,
            }
            if i >= sentence.len() {
                break;
            }
        }
        if !found_any {
            let base = sentence.len() + 2 * unmatched;
            spans.insert(EntitySpan::new(base, base + 1));
            unmatched += 1;
        }
    }
    spans
}

fn needle_len_in_tokens(_needle: &[String], _sent: &[String], _at: usize) -> usize {
    1
}

/// Tries to align the needle's token pieces against sentence tokens starting
/// at `at`; returns how many sentence tokens were consumed.
fn match_at(needle: &[String], sent_norm: &[String], at: usize) -> Option<usize> {
    let mut n = 0; // needle piece cursor
    let mut width = 0;
    while n < needle.len() {
        let tok = sent_norm.get(at + width)?;
        let pieces: Vec<&str> = tok.split('\u{1}').collect();
        for piece in pieces {
            if needle.get(n).map(String::as_str) != Some(piece) {
                return None;
            }
            n += 1;
        }
        width += 1;
    }
    Some(width)
}

/// Two-sided Welch t-test p-value between two seed-metric samples.
pub fn significance(base: &[f64], treat: &[f64]) -> Result<f64, EvalError> {
    if base.len() < 2 || treat.len() < 2 {
        return Err(EvalError::TooFewSeeds {
            base: base.len(),
            treat: treat.len(),
        });
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let var = |xs: &[f64], m: f64| {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let (n1, n2) = (base.len() as f64, treat.len() as f64);
    let (m1, m2) = (mean(base), mean(treat));
    let (v1, v2) = (var(base, m1), var(treat, m2));
    let se2 = v1 / n1 + v2 / n2;
    if se2 == 0.0 {
        // Degenerate: no within-sample variation at all.
        return Ok(if m1 == m2 { 1.0 } else { 0.0 });
    }
    let t = (m1 - m2) / libm::sqrt(se2);
    let df = se2 * se2
        / ((v1 / n1) * (v1 / n1) / (n1 - 1.0) + (v2 / n2) * (v2 / n2) / (n2 - 1.0));
    Ok(student_t_two_sided_p(t, df))
}

/// `P(|T_df| ≥ |t|) = I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)` via the standard continued
/// fraction (modified Lentz), switching tails for fast convergence.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log(1.0 - x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - reg_inc_beta(b, a, 1.0 - x)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        // Even step.
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if libm::fabs(delta - 1.0) < EPS {
            break;
        }
    }
    h
}

/// Configuration of the synthetic domain-shift benchmark.
///
/// Sentences mix shared topic tokens with domain-private polarity tokens.
/// Topics lean toward the sentence's latent polarity, so topical retrieval
/// from the target datastore surfaces target sentences that tend to share
/// the query's polarity — exposing the target polarity vocabulary that the
/// source domain never contains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftSpec {
    /// Shared topic vocabulary size (split evenly across the 3 polarities).
    pub topic_vocab: usize,
    /// Polarity lexicon size per polarity, per domain.
    pub polarity_lexicon: usize,
    /// Inclusive sentence length range.
    pub sentence_len: (usize, usize),
    /// Probability that a label is flipped to a different class.
    pub label_noise: f64,
    pub source_train: usize,
    pub source_dev: usize,
    pub target_unlabeled: usize,
    pub target_test: usize,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        SyntheticShiftSpec {
            topic_vocab: 9,
            polarity_lexicon: 16,
            sentence_len: (7, 11),
            label_noise: 0.05,
            source_train: 2000,
            source_dev: 300,
            target_unlabeled: 2000,
            target_test: 500,
            seed: 0,
        }
    }
}

/// Probability that a token position carries a polarity token (vs. a topic
/// token).
const POLARITY_TOKEN_PROB: f64 = 0.4;
/// Probability that a topic draw comes from the latent polarity's own topic
/// group rather than the full shared pool. Keeps the topic-only channel
/// mediocre while leaving topical retrieval well above chance.
const TOPIC_BIAS: f64 = 0.4;

/// The generated benchmark corpora. Target test labels exist only here and
/// never feed any training path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub source_train: Vec<(Vec<Token>, Sentiment)>,
    pub source_dev: Vec<(Vec<Token>, Sentiment)>,
    pub target_unlabeled: Vec<Vec<Token>>,
    pub target_test: Vec<(Vec<Token>, Sentiment)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Domain {
    Source,
    Target,
}

struct SynthVocab {
    topics: Vec<String>,
    source_polarity: [Vec<String>; 3],
    target_polarity: [Vec<String>; 3],
}

fn synth_vocab(spec: &SyntheticShiftSpec) -> SynthVocab {
    let topics = (0..spec.topic_vocab)
        .map(|i| alloc::format!("topic{i:03}"))
        .collect();
    let lex = |prefix: &str| -> [Vec<String>; 3] {
        let make = |pol: &str| -> Vec<String> {
            (0..spec.polarity_lexicon)
                .map(|i| alloc::format!("{prefix}{pol}{i:02}"))
                .collect()
        };
        [make("neg"), make("neu"), make("pos")]
    };
    SynthVocab {
        topics,
        source_polarity: lex("src"),
        target_polarity: lex("tgt"),
    }
}

fn gen_sentence(
    spec: &SyntheticShiftSpec,
    vocab: &SynthVocab,
    domain: Domain,
    rng: &mut DeterministicRng,
) -> (Vec<Token>, Sentiment) {
    use rand::Rng;
    let latent = rng.gen_range(0..3usize);
    let len = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
    let group_size = vocab.topics.len() / 3;
    let lexicon = match domain {
        Domain::Source => &vocab.source_polarity[latent],
        Domain::Target => &vocab.target_polarity[latent],
    };
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let word = if rng.gen::<f64>() < POLARITY_TOKEN_PROB {
            &lexicon[rng.gen_range(0..lexicon.len())]
        } else if rng.gen::<f64>() < TOPIC_BIAS {
            // Topic index ≡ latent (mod 3) belongs to this polarity's group.
            let slot = rng.gen_range(0..group_size);
            &vocab.topics[slot * 3 + latent]
        } else {
            &vocab.topics[rng.gen_range(0..vocab.topics.len())]
        };
        tokens.push(Token::new(word).expect("synthetic words are well-formed"));
    }
    let label_idx = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
        (latent + 1 + rng.gen_range(0..2usize)) % 3
    } else {
        latent
    };
    (
        tokens,
        Sentiment::from_class_id(label_idx).expect("three classes"),
    )
}

/// Generates the benchmark corpora deterministically from the spec's seed.
pub fn gen_synthetic_shift(spec: &SyntheticShiftSpec) -> Result<SyntheticData, EvalError> {
    if spec.topic_vocab < 3 || spec.topic_vocab % 3 != 0 {
        return Err(EvalError::InvalidSpec("topic_vocab must be a positive multiple of 3"));
    }
    if spec.polarity_lexicon == 0 {
        return Err(EvalError::InvalidSpec("polarity_lexicon must be positive"));
    }
    if spec.sentence_len.0 == 0 || spec.sentence_len.0 > spec.sentence_len.1 {
        return Err(EvalError::InvalidSpec("sentence_len range is empty"));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(EvalError::InvalidSpec("label_noise outside [0, 1]"));
    }
    let vocab = synth_vocab(spec);
    let mut rng = rng_from_seed(spec.seed);
    let labeled = |n: usize, domain: Domain, rng: &mut DeterministicRng| {
        (0..n)
            .map(|_| gen_sentence(spec, &vocab, domain, rng))
            .collect::<Vec<_>>()
    };
    let source_train = labeled(spec.source_train, Domain::Source, &mut rng);
    let source_dev = labeled(spec.source_dev, Domain::Source, &mut rng);
    let target_unlabeled = labeled(spec.target_unlabeled, Domain::Target, &mut rng)
        .into_iter()
        .map(|(tokens, _)| tokens)
        .collect();
    let target_test = labeled(spec.target_test, Domain::Target, &mut rng);
    Ok(SyntheticData {
        source_train,
        source_dev,
        target_unlabeled,
        target_test,
    })
}

/// One matrix cell outcome: a metric, or the error that killed the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub metric: Option<f64>,
    pub error: Option<String>,
}

/// Aggregate row for one (scenario, variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggRow {
    pub scenario: String,
    pub variant: Variant,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// Welch p-value against the No-ICL baseline on the same scenario.
    pub p_vs_no_icl: Option<f64>,
    pub significant: bool,
}

/// Metric grid keyed by (scenario, variant, seed) with mean/std aggregation
/// and significance markers against the No-ICL baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMatrix {
    cells: BTreeMap<String, BTreeMap<Variant, BTreeMap<u64, CellResult>>>,
}

impl RunMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scenario: &str, variant: Variant, seed: u64, metric: f64) {
        self.cells
            .entry(scenario.to_string())
            .or_default()
            .entry(variant)
            .or_default()
            .insert(
                seed,
                CellResult {
                    metric: Some(metric),
                    error: None,
                },
            );
    }

    /// A failed cell is recorded, not fatal.
    pub fn insert_error(&mut self, scenario: &str, variant: Variant, seed: u64, error: String) {
        self.cells
            .entry(scenario.to_string())
            .or_default()
            .entry(variant)
            .or_default()
            .insert(
                seed,
                CellResult {
                    metric: None,
                    error: Some(error),
                },
            );
    }

    pub fn len(&self) -> usize {
        self.cells
            .values()
            .flat_map(|m| m.values())
            .map(BTreeMap::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metrics(&self, scenario: &str, variant: Variant) -> Vec<f64> {
        self.cells
            .get(scenario)
            .and_then(|m| m.get(&variant))
            .map(|seeds| seeds.values().filter_map(|c| c.metric).collect())
            .unwrap_or_default()
    }

    pub fn cell(&self, scenario: &str, variant: Variant, seed: u64) -> Option<&CellResult> {
        self.cells.get(scenario)?.get(&variant)?.get(&seed)
    }

    /// Per-seed rows in deterministic order, for CSV export.
    pub fn rows(&self) -> Vec<(String, Variant, u64, CellResult)> {
        let mut out = Vec::new();
        for (scenario, per_variant) in &self.cells {
            for (variant, per_seed) in per_variant {
                for (seed, cell) in per_seed {
                    out.push((scenario.clone(), *variant, *seed, cell.clone()));
                }
            }
        }
        out
    }

    /// Mean and sample standard deviation per (scenario, variant), with
    /// Welch p-values against No-ICL. The baseline never flags itself.
    pub fn aggregate(&self) -> Vec<AggRow> {
        let mut out = Vec::new();
        for (scenario, per_variant) in &self.cells {
            let baseline = self.metrics(scenario, Variant::NoIcl);
            for (variant, per_seed) in per_variant {
                let xs: Vec<f64> = per_seed.values().filter_map(|c| c.metric).collect();
                if xs.is_empty() {
                    continue;
                }
                let n = xs.len();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    libm::sqrt(
                        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64,
                    )
                } else {
                    0.0
                };
                let p_vs_no_icl = if *variant != Variant::NoIcl {
                    significance(&baseline, &xs).ok()
                } else {
                    None
                };
                let significant = p_vs_no_icl.map_or(false, |p| p < 0.05);
                out.push(AggRow {
                    scenario: scenario.clone(),
                    variant: *variant,
                    seeds: n,
                    mean,
                    std,
                    p_vs_no_icl,
                    significant,
                });
            }
        }
        out
    }

    /// Plain-text table: one row per variant, one column per scenario,
    /// `mean±std` cells with a `†` marker when p < 0.05 vs No-ICL.
    pub fn render_table(&self) -> String {
        let aggs = self.aggregate();
        let scenarios: Vec<String> = self.cells.keys().cloned().collect();
        let mut variants: Vec<Variant> = Vec::new();
        for v in Variant::ALL {
            if aggs.iter().any(|r| r.variant == v) {
                variants.push(v);
            }
        }
        let cell_of = |v: Variant, s: &str| -> String {
            aggs.iter()
                .find(|r| r.variant == v && r.scenario == s)
                .map(|r| {
                    let marker = if r.significant { "†" } else { "" };
                    alloc::format!("{:.2}±{:.2}{}", 100.0 * r.mean, 100.0 * r.std, marker)
                })
                .unwrap_or_else(|| "--".to_string())
        };
        let mut widths: Vec<usize> = scenarios.iter().map(|s| s.chars().count()).collect();
        for (i, s) in scenarios.iter().enumerate() {
            for v in &variants {
                widths[i] = widths[i].max(cell_of(*v, s).chars().count());
            }
        }
        let name_w = variants
            .iter()
            .map(|v| v.name().len())
            .max()
            .unwrap_or(7)
            .max("variant".len());
        let mut out = String::new();
        out.push_str(&alloc::format!("{:<name_w$}", "variant"));
        for (s, w) in scenarios.iter().zip(&widths) {
            out.push_str(&alloc::format!("  {:>w$}", s, w = w));
        }
        out.push('\n');
        for v in &variants {
            out.push_str(&alloc::format!("{:<name_w$}", v.name()));
            for (s, w) in scenarios.iter().zip(&widths) {
                out.push_str(&alloc::format!("  {:>w$}", cell_of(*v, s), w = w));
            }
            out.push('\n');
        }
        out
    }

    /// CSV with header `variant,scenario,seed,metric`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,scenario,seed,metric\n");
        for (scenario, variant, seed, cell) in self.rows() {
            let metric = cell
                .metric
                .map(|m| alloc::format!("{m}"))
                .unwrap_or_else(|| "error".to_string());
            out.push_str(&alloc::format!("{},{},{},{}\n", variant.name(), scenario, seed, metric));
        }
        out
    }
}

/// Runs every (scenario, variant, seed) cell through `runner`, recording
/// failures instead of aborting.
pub fn execute_matrix<F>(
    scenarios: &[&str],
    variants: &[Variant],
    seeds: &[u64],
    mut runner: F,
) -> RunMatrix
where
    F: FnMut(&str, Variant, u64) -> Result<f64, String>,
{
    let mut matrix = RunMatrix::new();
    for scenario in scenarios {
        for &variant in variants {
            for &seed in seeds {
                match runner(scenario, variant, seed) {
                    Ok(metric) => matrix.insert(scenario, variant, seed, metric),
                    Err(e) => matrix.insert_error(scenario, variant, seed, e),
                }
            }
        }
    }
    matrix
}

/// Errors from metrics and benchmark generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    LengthMismatch { gold: usize, pred: usize },
    TooFewSeeds { base: usize, treat: usize },
    InvalidSpec(&'static str),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::LengthMismatch { gold, pred } => {
                write!(f, "gold has {gold} items, pred {pred}")
            }
            EvalError::TooFewSeeds { base, treat } => {
                write!(f, "need at least 2 seeds per sample, got {base} and {treat}")
            }
            EvalError::InvalidSpec(what) => f.write_str(what),
        }
    }
}

#[cfg(test)]
impl std::error::Error for EvalError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::parse_entity_response;

    fn spans(pairs: &[(usize, usize)]) -> BTreeSet<EntitySpan> {
        pairs.iter().map(|&(s, e)| EntitySpan::new(s, e)).collect()
    }

    fn toks(words: &[&str]) -> Vec<Token> {
        words.iter().map(|w| Token::new(w).unwrap()).collect()
    }

    #[test]
    fn span_f1_examples() {
        let r = span_f1(&[spans(&[(0, 2)])], &[spans(&[(0, 2)])]).unwrap();
        assert_eq!(r.f1, 1.0);

        let r = span_f1(&[spans(&[(0, 2)]), spans(&[(1, 3)])], &[spans(&[]), spans(&[])])
            .unwrap();
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.recall, 0.0);

        let r = span_f1(&[spans(&[(0, 2), (3, 4)])], &[spans(&[(0, 2), (5, 6)])]).unwrap();
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f1, 0.5);

        assert!(span_f1(&[spans(&[])], &[]).is_err());
    }

    #[test]
    fn span_f1_swapping_gold_and_pred_swaps_precision_recall() {
        let g = vec![spans(&[(0, 2), (4, 6)]), spans(&[(1, 2)])];
        let p = vec![spans(&[(0, 2)]), spans(&[(1, 2), (3, 4)])];
        let a = span_f1(&g, &p).unwrap();
        let b = span_f1(&p, &g).unwrap();
        assert_eq!(a.precision, b.recall);
        assert_eq!(a.recall, b.precision);
        assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn accuracy_examples() {
        use Sentiment::*;
        let r = accuracy(&[Positive, Negative], &[Positive, Negative]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let r = accuracy(&[Positive, Negative], &[Negative, Positive]).unwrap();
        assert_eq!(r.accuracy, 0.0);
        let r = accuracy(
            &[Positive, Negative, Neutral, Positive],
            &[Positive, Negative, Neutral, Negative],
        )
        .unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert!(accuracy(&[Positive], &[]).is_err());
    }

    #[test]
    fn entities_match_case_folded() {
        let sentence = toks(&["the", "human", "mhc", "and", "more"]);
        let parsed = ParsedEntities {
            entities: vec!["human MHC".to_string()],
            malformed: false,
        };
        assert_eq!(entities_to_spans(&parsed, &sentence), spans(&[(1, 3)]));
    }

    #[test]
    fn empty_entities_give_empty_spans() {
        let sentence = toks(&["a", "b"]);
        let parsed = ParsedEntities {
            entities: vec![],
            malformed: false,
        };
        assert!(entities_to_spans(&parsed, &sentence).is_empty());
    }

    #[test]
    fn repeated_entity_claims_both_occurrences() {
        let sentence = toks(&["bse", "cases", "and", "bse", "again"]);
        let parsed = ParsedEntities {
            entities: vec!["BSE".to_string()],
            malformed: false,
        };
        assert_eq!(entities_to_spans(&parsed, &sentence), spans(&[(0, 1), (3, 4)]));
    }

    #[test]
    fn unmatched_entities_become_sentinel_false_positives() {
        let sentence = toks(&["plain", "words"]);
        let parsed = ParsedEntities {
            entities: vec!["missing".to_string(), "also gone".to_string()],
            malformed: false,
        };
        let got = entities_to_spans(&parsed, &sentence);
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|s| s.start >= sentence.len()));
        // Grading: two false positives, nothing else.
        let r = span_f1(&[spans(&[])], &[got]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 2, 0));
    }

    #[test]
    fn generative_grading_round_trip() {
        // Gold spans → entity strings → parse → spans reproduces gold.
        let sentence = toks(&["physical", "mapping", "of", "the", "human", "mhc", "."]);
        let gold = spans(&[(0, 2), (4, 6)]);
        let rendering = "- Physical mapping\n- human MHC";
        let parsed = parse_entity_response(rendering);
        assert_eq!(entities_to_spans(&parsed, &sentence), gold);
    }

    #[test]
    fn significance_examples() {
        let p = significance(&[0.5, 0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p, 1.0);
        let p = significance(&[0.0; 5], &[1.0; 5]).unwrap();
        assert!(p < 1e-6);
        assert!(significance(&[1.0], &[1.0, 2.0]).is_err());
    }

    /// Quadrature oracle for the two-sided t-tail: Simpson integration of
    /// the t density over [-|t|, |t|], complemented.
    fn t_two_sided_p_quadrature(t: f64, df: f64) -> f64 {
        let log_norm = libm::lgamma((df + 1.0) / 2.0)
            - libm::lgamma(df / 2.0)
            - 0.5 * libm::log(df * core::f64::consts::PI);
        let pdf = |x: f64| libm::exp(log_norm - (df + 1.0) / 2.0 * libm::log(1.0 + x * x / df));
        let (a, b) = (-t.abs(), t.abs());
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut acc = pdf(a) + pdf(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        1.0 - acc * h / 3.0
    }

    #[test]
    fn t_tail_matches_quadrature_oracle() {
        for (t, df) in [
            (0.5, 3.0),
            (1.0, 4.0),
            (2.0, 4.0),
            (2.776, 4.0),
            (1.5, 7.3),
            (3.2, 12.0),
            (0.1, 2.0),
        ] {
            let fast = student_t_two_sided_p(t, df);
            let slow = t_two_sided_p_quadrature(t, df);
            assert!(
                (fast - slow).abs() < 1e-4,
                "t={t} df={df}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn welch_on_crafted_samples_matches_oracle() {
        let base = [0.62, 0.64, 0.61, 0.66, 0.63];
        let treat = [0.70, 0.69, 0.72, 0.68, 0.71];
        let p = significance(&base, &treat).unwrap();
        // Same t and df pushed through the quadrature oracle.
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let var = |xs: &[f64], m: f64| {
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let (m1, m2) = (mean(&base), mean(&treat));
        let (v1, v2) = (var(&base, m1), var(&treat, m2));
        let se2 = v1 / 5.0 + v2 / 5.0;
        let t = (m1 - m2) / libm::sqrt(se2);
        let df = se2 * se2 / ((v1 / 5.0) * (v1 / 5.0) / 4.0 + (v2 / 5.0) * (v2 / 5.0) / 4.0);
        let slow = t_two_sided_p_quadrature(t, df);
        assert!((p - slow).abs() < 1e-4, "{p} vs {slow}");
        assert!(p < 0.05);
    }

    #[test]
    fn synthetic_generation_is_deterministic_and_disjoint() {
        let spec = SyntheticShiftSpec {
            source_train: 50,
            source_dev: 10,
            target_unlabeled: 50,
            target_test: 20,
            ..SyntheticShiftSpec::default()
        };
        let a = gen_synthetic_shift(&spec).unwrap();
        let b = gen_synthetic_shift(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source_train.len(), 50);
        assert_eq!(a.target_test.len(), 20);

        // Source and target polarity vocabularies share no surface forms:
        // collect non-topic tokens per domain and intersect.
        let non_topic = |sents: Vec<&Vec<Token>>| -> BTreeSet<String> {
            sents
                .into_iter()
                .flatten()
                .filter(|t| !t.as_str().starts_with("topic"))
                .map(|t| t.as_str().to_string())
                .collect()
        };
        let src_words = non_topic(a.source_train.iter().map(|(t, _)| t).collect());
        let tgt_words = non_topic(a.target_unlabeled.iter().collect());
        assert!(src_words.iter().all(|w| w.starts_with("src")));
        assert!(tgt_words.iter().all(|w| w.starts_with("tgt")));
        assert!(src_words.intersection(&tgt_words).next().is_none());
    }

    #[test]
    fn noise_free_labels_follow_polarity_tokens() {
        let spec = SyntheticShiftSpec {
            label_noise: 0.0,
            source_train: 200,
            source_dev: 0,
            target_unlabeled: 1,
            target_test: 0,
            ..SyntheticShiftSpec::default()
        };
        let data = gen_synthetic_shift(&spec).unwrap();
        for (tokens, label) in &data.source_train {
            let polarity: Vec<&str> = tokens
                .iter()
                .map(Token::as_str)
                .filter(|t| t.starts_with("src"))
                .collect();
            for p in polarity {
                let expect = match label {
                    Sentiment::Negative => "srcneg",
                    Sentiment::Neutral => "srcneu",
                    Sentiment::Positive => "srcpos",
                };
                assert!(p.starts_with(expect), "{p} under label {label}");
            }
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = SyntheticShiftSpec::default();
        spec.topic_vocab = 7;
        assert!(gen_synthetic_shift(&spec).is_err());
        spec = SyntheticShiftSpec::default();
        spec.sentence_len = (5, 3);
        assert!(gen_synthetic_shift(&spec).is_err());
        spec = SyntheticShiftSpec::default();
        spec.label_noise = 1.5;
        assert!(gen_synthetic_shift(&spec).is_err());
    }

    #[test]
    fn matrix_aggregation_matches_recomputation() {
        let mut m = RunMatrix::new();
        let metrics = [0.61, 0.64, 0.59, 0.66, 0.62];
        for (seed, x) in metrics.iter().enumerate() {
            m.insert("synthetic", Variant::NoIcl, seed as u64, *x);
            m.insert("synthetic", Variant::Daicl, seed as u64, x + 0.1);
        }
        assert_eq!(m.len(), 10);
        let aggs = m.aggregate();
        for row in &aggs {
            let xs = m.metrics("synthetic", row.variant);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = libm::sqrt(
                xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64,
            );
            assert!((row.mean - mean).abs() < 1e-12);
            assert!((row.std - std).abs() < 1e-12);
            match row.variant {
                Variant::NoIcl => assert!(row.p_vs_no_icl.is_none()),
                _ => assert!(row.p_vs_no_icl.is_some()),
            }
        }
        let table = m.render_table();
        assert!(table.contains("no_icl"));
        assert!(table.contains("daicl"));
        let csv = m.to_csv();
        assert!(csv.starts_with("variant,scenario,seed,metric\n"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn failed_cells_are_recorded_not_fatal() {
        let matrix = execute_matrix(
            &["s"],
            &[Variant::NoIcl, Variant::Daicl],
            &[0, 1],
            |_, v, seed| {
                if v == Variant::Daicl && seed == 1 {
                    Err("boom".to_string())
                } else {
                    Ok(0.5)
                }
            },
        );
        assert_eq!(matrix.len(), 4);
        assert_eq!(matrix.metrics("s", Variant::Daicl).len(), 1);
        let cell = matrix.cell("s", Variant::Daicl, 1).unwrap();
        assert_eq!(cell.error.as_deref(), Some("boom"));
    }
}
