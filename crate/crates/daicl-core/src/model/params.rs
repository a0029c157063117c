//! Model configuration, the named parameter store, and low-rank adapters.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::ModelError;
use crate::rng::{mix_seed, rng_from_seed, std_normal};

/// Attention direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    Bidirectional,
    Causal,
}

/// Low-rank adapter settings: effective weight `W + (α/r)·B·A` with `A`
/// Gaussian-initialized and `B` zero, attached to the attention query and
/// value projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

/// Transformer and head configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub attention: Attention,
    /// Masked-token prediction head (tied to the input embeddings).
    pub mlm_head: bool,
    /// Pooled classifier over `C` classes.
    pub classifier_classes: Option<usize>,
    /// Per-position emission head over `K` tags, scored by a CRF.
    pub emission_tags: Option<usize>,
    pub adapter: Option<AdapterConfig>,
}

impl ModelConfig {
    /// Small bidirectional encoder with the requested heads.
    pub fn encoder(vocab: usize, dim: usize, layers: usize, heads: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab,
            dim,
            layers,
            heads,
            max_len,
            attention: Attention::Bidirectional,
            mlm_head: true,
            classifier_classes: None,
            emission_tags: None,
            adapter: None,
        }
    }

    /// Small causal decoder (next-token head only).
    pub fn decoder(vocab: usize, dim: usize, layers: usize, heads: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab,
            dim,
            layers,
            heads,
            max_len,
            attention: Attention::Causal,
            mlm_head: false,
            classifier_classes: None,
            emission_tags: None,
            adapter: None,
        }
    }

    pub fn with_classifier(mut self, classes: usize) -> Self {
        self.classifier_classes = Some(classes);
        self
    }

    pub fn with_emissions(mut self, tags: usize) -> Self {
        self.emission_tags = Some(tags);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::ShapeMismatch("dim must divide evenly by heads"));
        }
        if self.attention == Attention::Causal && self.mlm_head {
            return Err(ModelError::WrongArchitecture(
                "causal models do not take an MLM head",
            ));
        }
        if self.vocab == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(ModelError::ShapeMismatch("zero-sized model"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    value: Mat,
    frozen: bool,
}

/// Named parameter arrays with deterministic seeded initialization.
///
/// Weight matrices and embeddings start Gaussian with standard deviation
/// 0.02; biases start at zero and layer-norm gains at one. The MLM/LM output
/// projection is the transposed token embedding table, so it has no entry of
/// its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamStoreRepr")]
pub struct ParamStore {
    pub cfg: ModelConfig,
    pub seed: u64,
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

/// Serialized shape of a store; the name index is rebuilt on load.
#[derive(Deserialize)]
struct ParamStoreRepr {
    cfg: ModelConfig,
    seed: u64,
    entries: Vec<ParamEntry>,
}

impl From<ParamStoreRepr> for ParamStore {
    fn from(repr: ParamStoreRepr) -> Self {
        let mut store = ParamStore {
            cfg: repr.cfg,
            seed: repr.seed,
            entries: repr.entries,
            index: BTreeMap::new(),
        };
        store.rebuild_index();
        store
    }
}

const INIT_STD: f64 = 0.02;

impl ParamStore {
    /// Initializes all parameters for `cfg` from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = rng_from_seed(mix_seed(seed, 0x696e6974)); // "init"
        let mut store = ParamStore {
            cfg: cfg.clone(),
            seed,
            entries: Vec::new(),
            index: BTreeMap::new(),
        };
        let mut gauss = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| INIT_STD * std_normal(&mut rng))
                .collect();
            store.insert(name, Mat::from_vec(rows, cols, data));
        };
        let zeros = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
            store.insert(name, Mat::zeros(rows, cols));
        };
        let ones = |store: &mut ParamStore, name: String, cols: usize| {
            store.insert(name, Mat::from_vec(1, cols, alloc::vec![1.0; cols]));
        };

        let d = cfg.dim;
        gauss(&mut store, "tok_emb".into(), cfg.vocab, d);
        gauss(&mut store, "pos_emb".into(), cfg.max_len, d);
        for l in 0..cfg.layers {
            let p = |s: &str| alloc::format!("l{l}.{s}");
            ones(&mut store, p("ln1.g"), d);
            zeros(&mut store, p("ln1.b"), 1, d);
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                gauss(&mut store, p(w), d, d);
            }
            // No key bias: softmax is invariant to per-row score shifts, so
            // a key bias could never receive gradient.
            for b in ["attn.bq", "attn.bv", "attn.bo"] {
                zeros(&mut store, p(b), 1, d);
            }
            ones(&mut store, p("ln2.g"), d);
            zeros(&mut store, p("ln2.b"), 1, d);
            gauss(&mut store, p("mlp.w1"), 4 * d, d);
            zeros(&mut store, p("mlp.b1"), 1, 4 * d);
            gauss(&mut store, p("mlp.w2"), d, 4 * d);
            zeros(&mut store, p("mlp.b2"), 1, d);
        }
        ones(&mut store, "ln_f.g".into(), d);
        zeros(&mut store, "ln_f.b".into(), 1, d);
        if let Some(c) = cfg.classifier_classes {
            gauss(&mut store, "cls.w".into(), c, d);
            zeros(&mut store, "cls.b".into(), 1, c);
        }
        if let Some(k) = cfg.emission_tags {
            gauss(&mut store, "emit.w".into(), k, d);
            zeros(&mut store, "emit.b".into(), 1, k);
            gauss(&mut store, "crf.trans".into(), k, k);
            gauss(&mut store, "crf.start".into(), 1, k);
            gauss(&mut store, "crf.end".into(), 1, k);
        }
        if let Some(ad) = cfg.adapter {
            store.attach_adapters(ad)?;
        }
        Ok(store)
    }

    fn insert(&mut self, name: String, value: Mat) {
        debug_assert!(!self.index.contains_key(&name), "duplicate {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
    }

    /// Rebuilds the name index (after deserialization).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    /// Reassembles a store from persisted parts (checkpoint loading).
    pub fn from_parts(
        cfg: ModelConfig,
        seed: u64,
        parts: Vec<(String, Mat, bool)>,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore {
            cfg,
            seed,
            entries: Vec::with_capacity(parts.len()),
            index: BTreeMap::new(),
        };
        for (name, value, frozen) in parts {
            if store.index.contains_key(&name) {
                return Err(ModelError::ShapeMismatch("duplicate parameter name"));
            }
            store.index.insert(name.clone(), store.entries.len());
            store.entries.push(ParamEntry {
                name,
                value,
                frozen,
            });
        }
        Ok(store)
    }

    pub fn entry_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry_value(&self, entry: usize) -> &Mat {
        &self.entries[entry].value
    }

    pub fn entry_value_mut(&mut self, entry: usize) -> &mut Mat {
        &mut self.entries[entry].value
    }

    pub fn entry_name(&self, entry: usize) -> &str {
        &self.entries[entry].name
    }

    pub fn is_frozen_entry(&self, entry: usize) -> bool {
        self.entries[entry].frozen
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, name: &str) -> &Mat {
        let i = self
            .entry_index(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self
            .entry_index(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].value
    }

    /// Total scalar parameter count, optionally trainable-only.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !(trainable_only && e.frozen))
            .map(|e| e.value.data.len())
            .sum()
    }

    /// Names of all entries in creation order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Attaches low-rank adapters to every attention query and value
    /// projection, freezing all pre-existing parameters. `A` matrices are
    /// Gaussian from a seed derived from the store seed; `B` starts at zero,
    /// so the adapted model is initially identical to the base model.
    pub fn attach_adapters(&mut self, cfg: AdapterConfig) -> Result<(), ModelError> {
        if cfg.rank == 0 {
            return Err(ModelError::ShapeMismatch("adapter rank must be positive"));
        }
        if self.cfg.adapter.is_some() && self.has("l0.attn.wq.lora_a") {
            return Err(ModelError::WrongArchitecture("adapters already attached"));
        }
        for e in &mut self.entries {
            e.frozen = true;
        }
        let mut rng = rng_from_seed(mix_seed(self.seed, 0x6c6f7261)); // "lora"
        let d = self.cfg.dim;
        for l in 0..self.cfg.layers {
            for w in ["wq", "wv"] {
                let a_name = alloc::format!("l{l}.attn.{w}.lora_a");
                let b_name = alloc::format!("l{l}.attn.{w}.lora_b");
                let a_data = (0..cfg.rank * d)
                    .map(|_| INIT_STD * std_normal(&mut rng))
                    .collect();
                self.insert(a_name, Mat::from_vec(cfg.rank, d, a_data));
                self.insert(b_name, Mat::zeros(d, cfg.rank));
            }
        }
        self.cfg.adapter = Some(cfg);
        Ok(())
    }

    /// The effective weight of an adapted matrix, `W + (α/r)·B·A`; the plain
    /// weight when no adapter is attached to it.
    pub fn effective_weight(&self, name: &str) -> Mat {
        let w = self.get(name).clone();
        let (Some(ad), Some(a_idx)) = (
            self.cfg.adapter,
            self.entry_index(&alloc::format!("{name}.lora_a")),
        ) else {
            return w;
        };
        let b_idx = self
            .entry_index(&alloc::format!("{name}.lora_b"))
            .expect("lora_b pairs with lora_a");
        let mut ba = super::mat::matmul(
            self.entry_value(b_idx),
            false,
            self.entry_value(a_idx),
            false,
        );
        ba.scale_assign(ad.alpha / ad.rank as f64);
        let mut out = w;
        out.add_assign(&ba);
        out
    }

    /// All parameters finite?
    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Gradient arrays parallel to a store's entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_entry: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            by_entry: store
                .entries
                .iter()
                .map(|e| Mat::zeros(e.value.rows, e.value.cols))
                .collect(),
        }
    }

    pub fn add_scaled_entry(&mut self, entry: usize, g: &Mat, scale: f64) {
        let dst = &mut self.by_entry[entry];
        debug_assert!(dst.same_shape(g));
        for (o, x) in dst.data.iter_mut().zip(&g.data) {
            *o += scale * x;
        }
    }

    pub fn entry(&self, idx: usize) -> &Mat {
        &self.by_entry[idx]
    }

    pub fn get<'s>(&'s self, store: &ParamStore, name: &str) -> &'s Mat {
        let i = store
            .entry_index(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.by_entry[i]
    }

    pub fn scale_assign(&mut self, c: f64) {
        for m in &mut self.by_entry {
            m.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.by_entry.iter().map(Mat::sq_sum).sum::<f64>())
    }

    pub fn is_finite(&self) -> bool {
        self.by_entry.iter().all(Mat::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat> {
        self.by_entry.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.by_entry.iter_mut()
    }
}
