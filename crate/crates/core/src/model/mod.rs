//! Target-attention scoring network.
//!
//! Per candidate the network builds
//!
//! * `E_trigger`: mean item features of the triggers that reach the candidate,
//! * `E_target`: item features of the candidate,
//! * `E_cross`: bucketed price difference, co-click count, index rank and swing
//!   score (averaged over triggers) plus a bucketed trigger count,
//!
//! where item features are `[item ⊕ seller ⊕ brand]` embeddings. A query MLP maps
//! `E_trigger ⊕ E_target ⊕ E_cross` to one query per head; each head attends over
//! the embedded behaviour sequence. The heads, the user embedding and the three
//! feature blocks are concatenated and an output MLP produces the logit.
//!
//! All parameters live in one flat `f64` buffer; [`Layout`] names the slices.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod network;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabularies;
use crate::error::{Error, Result};
use crate::features::CROSS_BUCKETS;

pub use adam::Adam;
pub use network::{forward, grad, loss, score_query, trace_query, QueryTrace};
pub use train::{train, train_from, EpochLog, TrainLog};

/// Where the query of each attention head comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Candidate-dependent query from the trigger/target/cross features.
    Target,
    /// Sequence self-attention, mean-pooled; ignores the candidate.
    SelfPooled,
}

/// How the triggers reaching a candidate enter `E_trigger`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerMode {
    /// Mean over every trigger, plus the trigger count.
    Multi,
    /// One trigger, picked by a stable hash of (user, candidate).
    SingleRandom,
    /// No trigger feature at all.
    None,
}

/// Where the `1/sqrt(d_k)` factor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScaling {
    /// `softmax(q·k / sqrt(d_k)) V`.
    Logits,
    /// `softmax(q·k) V / sqrt(d_k)`.
    Output,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(AttentionMode { Target => "target", SelfPooled => "self" });
str_enum!(TriggerMode { Multi => "multi", SingleRandom => "single_random", None => "none" });
str_enum!(AttentionScaling { Logits => "logits", Output => "output" });

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub heads: usize,
    pub key_dim: usize,
    /// Hidden width of the query MLP; `0` means `2 * embedding_dim`.
    pub query_hidden: usize,
    pub out_hidden: Vec<usize>,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    pub trigger_mode: TriggerMode,
    pub attention_scaling: AttentionScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 512,
            embedding_dim: 64,
            heads: 2,
            key_dim: 32,
            query_hidden: 0,
            out_hidden: vec![128, 64],
            max_seq_len: 50,
            epochs: 1,
            seed: 0,
            attention_mode: AttentionMode::Target,
            trigger_mode: TriggerMode::Multi,
            attention_scaling: AttentionScaling::Logits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.out_hidden.contains(&0) {
            return Err(Error::Config("out_hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn query_hidden_width(&self) -> usize {
        if self.query_hidden == 0 {
            2 * self.embedding_dim
        } else {
            self.query_hidden
        }
    }

    /// `key = value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("query_hidden", self.query_hidden.to_string()),
            (
                "out_hidden",
                self.out_hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("attention_mode", self.attention_mode.to_string()),
            ("trigger_mode", self.trigger_mode.to_string()),
            ("attention_scaling", self.attention_scaling.to_string()),
        ]
    }

    /// Sets one field from its `key = value` form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "key_dim" => self.key_dim = num(key, value)?,
            "query_hidden" => self.query_hidden = num(key, value)?,
            "out_hidden" => {
                self.out_hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "attention_mode" => self.attention_mode = value.parse()?,
            "trigger_mode" => self.trigger_mode = value.parse()?,
            "attention_scaling" => self.attention_scaling = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Sizes of the id spaces the embedding tables cover (excluding the OOV row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocabulary {
    pub items: usize,
    pub users: usize,
    pub sellers: usize,
    pub brands: usize,
}

impl From<&Vocabularies> for Vocabulary {
    fn from(v: &Vocabularies) -> Self {
        Vocabulary {
            items: v.items.len(),
            users: v.users.len(),
            sellers: v.sellers.len(),
            brands: v.brands.len(),
        }
    }
}

/// A named slice of the parameter buffer, row-major `rows x cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn row(&self, r: usize) -> std::ops::Range<usize> {
        let start = self.offset + r * self.cols;
        start..start + self.cols
    }
}

/// Offsets of every tensor. Order in the buffer (and in checkpoints) is the order
/// returned by [`Layout::named`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub item: Tensor,
    pub seller: Tensor,
    pub brand: Tensor,
    pub user: Tensor,
    /// Price difference, co-click, rank, score, trigger count.
    pub cross: [Tensor; 5],
    pub query_w1: Tensor,
    pub query_b1: Tensor,
    pub query_w2: Tensor,
    pub query_b2: Tensor,
    /// Per-head projections, head-major: rows `h * F .. (h + 1) * F`.
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub attn_v: Tensor,
    /// `(weight, bias)` per output layer; the last one maps to the scalar logit.
    pub out: Vec<(Tensor, Tensor)>,
    pub total: usize,
}

/// Item feature width: item, seller and brand embeddings.
pub(crate) const ITEM_FIELDS: usize = 3;
/// Width of `E_trigger ⊕ E_target ⊕ E_cross` in units of `d`.
pub(crate) const QUERY_FIELDS: usize = 2 * ITEM_FIELDS + 5;

impl Layout {
    pub fn new(vocab: Vocabulary, cfg: &TrainConfig) -> Self {
        let d = cfg.embedding_dim;
        let f = ITEM_FIELDS * d;
        let heads = cfg.heads;
        let dk = cfg.key_dim;
        let hq = cfg.query_hidden_width();
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let t = Tensor { offset, rows, cols };
            offset += rows * cols;
            t
        };
        let item = take(vocab.items + 1, d);
        let seller = take(vocab.sellers + 1, d);
        let brand = take(vocab.brands + 1, d);
        let user = take(vocab.users + 1, d);
        let cross = [(); 5].map(|_| take(CROSS_BUCKETS, d));
        let query_w1 = take(QUERY_FIELDS * d, hq);
        let query_b1 = take(1, hq);
        let query_w2 = take(hq, heads * dk);
        let query_b2 = take(1, heads * dk);
        let attn_q = take(heads * f, dk);
        let attn_k = take(heads * f, dk);
        let attn_v = take(heads * f, dk);
        let mut widths = vec![heads * dk + d + QUERY_FIELDS * d];
        widths.extend(&cfg.out_hidden);
        widths.push(1);
        let out = widths.windows(2).map(|w| (take(w[0], w[1]), take(1, w[1]))).collect();
        Layout {
            d,
            heads,
            key_dim: dk,
            item,
            seller,
            brand,
            user,
            cross,
            query_w1,
            query_b1,
            query_w2,
            query_b2,
            attn_q,
            attn_k,
            attn_v,
            out,
            total: offset,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            items: self.item.rows - 1,
            users: self.user.rows - 1,
            sellers: self.seller.rows - 1,
            brands: self.brand.rows - 1,
        }
    }

    /// Every tensor with its checkpoint name, in buffer order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![
            ("item_emb".to_string(), self.item),
            ("seller_emb".to_string(), self.seller),
            ("brand_emb".to_string(), self.brand),
            ("user_emb".to_string(), self.user),
        ];
        for (name, t) in ["cross_price", "cross_coclick", "cross_rank", "cross_score", "cross_count"]
            .iter()
            .zip(self.cross)
        {
            v.push((name.to_string(), t));
        }
        v.extend([
            ("query_w1".to_string(), self.query_w1),
            ("query_b1".to_string(), self.query_b1),
            ("query_w2".to_string(), self.query_w2),
            ("query_b2".to_string(), self.query_b2),
            ("attn_q".to_string(), self.attn_q),
            ("attn_k".to_string(), self.attn_k),
            ("attn_v".to_string(), self.attn_v),
        ]);
        for (i, (w, b)) in self.out.iter().enumerate() {
            v.push((format!("out_w{i}"), *w));
            v.push((format!("out_b{i}"), *b));
        }
        v
    }

    /// Tensors that are embedding tables, as opposed to dense layers.
    fn embedding_tables(&self) -> Vec<Tensor> {
        let mut v = vec![self.item, self.seller, self.brand, self.user];
        v.extend(self.cross);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: Layout,
    pub data: Vec<f64>,
    /// Hash of the vocabularies the embedding rows refer to.
    pub vocab_hash: String,
}

impl ModelParams {
    pub fn zeros(vocab: Vocabulary, cfg: &TrainConfig) -> Self {
        let layout = Layout::new(vocab, cfg);
        ModelParams {
            data: vec![0.0; layout.total],
            layout,
            vocab_hash: String::new(),
        }
    }

    /// Embeddings uniform in `±1/sqrt(d)`, dense weights uniform in
    /// `±1/sqrt(fan_in)`, biases zero.
    pub fn init(vocab: Vocabulary, cfg: &TrainConfig, seed: u64) -> Self {
        let mut params = ModelParams::zeros(vocab, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = params.layout.clone();
        let emb_bound = 1.0 / (layout.d as f64).sqrt();
        for t in layout.embedding_tables() {
            for x in &mut params.data[t.range()] {
                *x = rng.gen_range(-emb_bound..=emb_bound);
            }
        }
        let f = ITEM_FIELDS * layout.d;
        let mut dense = vec![(layout.query_w1, layout.query_w1.rows), (layout.query_w2, layout.query_w2.rows)];
        for t in [layout.attn_q, layout.attn_k, layout.attn_v] {
            dense.push((t, f));
        }
        dense.extend(layout.out.iter().map(|(w, _)| (*w, w.rows)));
        for (t, fan_in) in dense {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut params.data[t.range()] {
                *x = rng.gen_range(-bound..=bound);
            }
        }
        params
    }

    pub fn with_vocab_hash(mut self, hash: impl Into<String>) -> Self {
        self.vocab_hash = hash.into();
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Checks that the layout matches a config (dims, heads and widths).
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        let expected = Layout::new(self.layout.vocabulary(), cfg);
        if expected != self.layout {
            return Err(Error::Shape("parameter layout does not match the training config".into()));
        }
        if self.data.len() != self.layout.total {
            return Err(Error::Shape(format!("{} values for a layout of {}", self.data.len(), self.layout.total)));
        }
        Ok(())
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[t.range()]
    }
}
