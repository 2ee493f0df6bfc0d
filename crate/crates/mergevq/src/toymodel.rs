//! Deterministic random-weight causal transformer used as the generation
//! substrate, with an explicit per-layer KV-cache interface.
//!
//! Keys and values are projected from the raw token embedding (position
//! enters through the query path only), so entries for equal token ids are
//! identical in every layer. That is what lets the duplicate-pruning
//! decoder replace repeated entries by a size counter exactly.

use crate::error::{input_err, Result};
use crate::numerics::{softmax, Matrix, RandomStream, Scalar};

/// Upper bound on total parameter count; keeps accidental full-vocabulary
/// configurations from allocating gigabytes.
pub const MAX_PARAM_COUNT: usize = 1 << 23;

/// Class-embedding table size.
pub const NUM_CLASSES: usize = 16;

/// Merge-instruction embedding table size (kept-count buckets).
pub const NUM_MERGE_BUCKETS: usize = 8;

/// Input token for one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenInput {
    /// Conditioning class id.
    Class(u32),
    /// Merge-extent indicator (kept-count bucket).
    MergeInstruction(u32),
    /// Content token id in `[0, vocab)`.
    Content(u32),
    /// Target-position instruction for random-order decoding.
    PositionInstruction(u32),
}

/// Per-layer key/value store plus shared entry bookkeeping.
///
/// `sizes[e]` counts how many generated positions entry `e` represents
/// (always 1 unless the decoder merges duplicates into it). `steps` counts
/// forward calls, which can exceed the entry count when duplicate entries
/// are skipped.
#[derive(Debug, Clone)]
pub struct KvCaches<T> {
    dim: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    sizes: Vec<u64>,
    positions: Vec<usize>,
    steps: usize,
}

impl<T: Scalar> KvCaches<T> {
    pub fn new(n_layers: usize, dim: usize) -> Self {
        KvCaches {
            dim,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            sizes: Vec::new(),
            positions: Vec::new(),
            steps: 0,
        }
    }

    pub fn entries(&self) -> usize {
        self.sizes.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Registers a new entry at `position` with size 1. Layer rows are
    /// appended separately by the model.
    pub fn push_entry(&mut self, position: usize) {
        self.sizes.push(1);
        self.positions.push(position);
    }

    /// Adds one represented position to an existing entry.
    pub fn bump_size(&mut self, entry: usize) {
        self.sizes[entry] += 1;
    }

    pub fn push_layer_rows(&mut self, layer: usize, key: &[T], value: &[T]) {
        debug_assert_eq!(key.len(), self.dim);
        debug_assert_eq!(value.len(), self.dim);
        self.keys[layer].extend_from_slice(key);
        self.values[layer].extend_from_slice(value);
    }

    pub fn advance(&mut self) {
        self.steps += 1;
    }

    fn layer_rows(&self, layer: usize) -> (&[T], &[T]) {
        (&self.keys[layer], &self.values[layer])
    }
}

/// A per-step next-token model over the shared cache type. Implemented by
/// [`ToyARModel`] and by scripted stubs in benchmarks.
pub trait Generator<T: Scalar> {
    fn vocab_size(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn new_caches(&self) -> KvCaches<T>;

    /// Runs one decode step at `position` and returns next-token logits.
    ///
    /// With `append` the step's entry (and per-layer K/V rows) join the
    /// cache; without it the step only advances, which is how duplicate
    /// entries are skipped. `position` must equal the number of steps taken
    /// so far.
    fn forward_step(
        &self,
        input: TokenInput,
        position: usize,
        caches: &mut KvCaches<T>,
        append: bool,
    ) -> Result<Vec<T>>;
}

#[derive(Debug, Clone)]
pub struct ToyLayer<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

/// Random-weight causal decoder at toy scale. All parameters derive
/// deterministically from the seed; logits share the content embedding
/// table (weight tying).
#[derive(Debug, Clone)]
pub struct ToyARModel<T> {
    vocab: usize,
    embed_dim: usize,
    l_max: usize,
    token_emb: Matrix<T>,
    pos_emb: Matrix<T>,
    pos_instr_emb: Matrix<T>,
    class_emb: Matrix<T>,
    merge_emb: Matrix<T>,
    layers: Vec<ToyLayer<T>>,
}

/// Default toy scale: everything the test suites need runs in seconds.
pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_EMBED: usize = 64;
pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_L_MAX: usize = 256;

pub fn init_model<T: Scalar>(
    seed: u64,
    vocab: usize,
    embed_dim: usize,
    n_layers: usize,
    l_max: usize,
) -> Result<ToyARModel<T>> {
    ToyARModel::init(seed, vocab, embed_dim, n_layers, l_max)
}

impl<T: Scalar> ToyARModel<T> {
    pub fn init(
        seed: u64,
        vocab: usize,
        embed_dim: usize,
        n_layers: usize,
        l_max: usize,
    ) -> Result<Self> {
        if vocab < 2 || embed_dim == 0 || n_layers == 0 || l_max == 0 {
            return input_err(
                "init_model",
                "need vocab >= 2 and positive embed_dim, layers, l_max",
            );
        }
        let hidden = 4 * embed_dim;
        let table_params =
            (vocab + 2 * l_max + NUM_CLASSES + NUM_MERGE_BUCKETS) * embed_dim;
        let layer_params = n_layers * (4 * embed_dim * embed_dim + 2 * embed_dim * hidden);
        let total = table_params + layer_params;
        if total > MAX_PARAM_COUNT {
            return input_err(
                "init_model",
                format!("{total} parameters exceed the configured bound of {MAX_PARAM_COUNT}"),
            );
        }
        let mut rng = RandomStream::new(seed);
        let s = 1.0 / (embed_dim as f64).sqrt();
        Ok(ToyARModel {
            vocab,
            embed_dim,
            l_max,
            token_emb: rng.normal_matrix(vocab, embed_dim, s),
            pos_emb: rng.normal_matrix(l_max, embed_dim, s),
            pos_instr_emb: rng.normal_matrix(l_max, embed_dim, s),
            class_emb: rng.normal_matrix(NUM_CLASSES, embed_dim, s),
            merge_emb: rng.normal_matrix(NUM_MERGE_BUCKETS, embed_dim, s),
            layers: (0..n_layers)
                .map(|_| ToyLayer {
                    wq: rng.normal_matrix(embed_dim, embed_dim, s),
                    wk: rng.normal_matrix(embed_dim, embed_dim, s),
                    wv: rng.normal_matrix(embed_dim, embed_dim, s),
                    wo: rng.normal_matrix(embed_dim, embed_dim, s),
                    w1: rng.normal_matrix(embed_dim, hidden, s),
                    w2: rng.normal_matrix(hidden, embed_dim, 1.0 / (hidden as f64).sqrt()),
                })
                .collect(),
        })
    }

    pub fn init_default(seed: u64) -> Result<Self> {
        Self::init(seed, DEFAULT_VOCAB, DEFAULT_EMBED, DEFAULT_LAYERS, DEFAULT_L_MAX)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[ToyLayer<T>] {
        &self.layers
    }

    pub fn token_embedding(&self) -> &Matrix<T> {
        &self.token_emb
    }

    pub fn position_embedding(&self) -> &Matrix<T> {
        &self.pos_emb
    }

    /// Raw (position-free) embedding of an input token.
    pub fn raw_embedding(&self, input: TokenInput) -> Result<&[T]> {
        let (table, id, name) = match input {
            TokenInput::Class(id) => (&self.class_emb, id, "class"),
            TokenInput::MergeInstruction(id) => (&self.merge_emb, id, "merge instruction"),
            TokenInput::Content(id) => (&self.token_emb, id, "content"),
            TokenInput::PositionInstruction(id) => (&self.pos_instr_emb, id, "position"),
        };
        if id as usize >= table.rows() {
            return input_err(
                "forward_step",
                format!("{name} id {id} out of range [0, {})", table.rows()),
            );
        }
        Ok(table.row(id as usize))
    }
}

/// Attention of a single query over cached rows with `log s` size bias.
/// All arithmetic in the accumulator type.
fn attend_cache<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    dim: usize,
    sizes: &[u64],
) -> Vec<T> {
    let n = sizes.len();
    debug_assert_eq!(keys.len(), n * dim);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut scores: Vec<f64> = Vec::with_capacity(n);
    for e in 0..n {
        let mut dot = 0.0f64;
        let krow = &keys[e * dim..(e + 1) * dim];
        for (a, b) in q.iter().zip(krow) {
            dot += a.to_f64().unwrap() * b.to_f64().unwrap();
        }
        scores.push(dot * scale + (sizes[e] as f64).ln());
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let mut out = vec![0.0f64; dim];
    for e in 0..n {
        let w = scores[e] / sum;
        let vrow = &values[e * dim..(e + 1) * dim];
        for (o, v) in out.iter_mut().zip(vrow) {
            *o += w * v.to_f64().unwrap();
        }
    }
    out.into_iter().map(|v| T::from_f64(v).unwrap()).collect()
}

impl<T: Scalar> Generator<T> for ToyARModel<T> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_positions(&self) -> usize {
        self.l_max
    }

    fn new_caches(&self) -> KvCaches<T> {
        KvCaches::new(self.layers.len(), self.embed_dim)
    }

    fn forward_step(
        &self,
        input: TokenInput,
        position: usize,
        caches: &mut KvCaches<T>,
        append: bool,
    ) -> Result<Vec<T>> {
        if position >= self.l_max {
            return input_err(
                "forward_step",
                format!("position {position} >= l_max {}", self.l_max),
            );
        }
        if position != caches.steps() {
            return input_err(
                "forward_step",
                format!("position {position} does not match cache step {}", caches.steps()),
            );
        }
        let e_tok = self.raw_embedding(input)?.to_vec();
        let mut h: Vec<T> = e_tok
            .iter()
            .zip(self.pos_emb.row(position))
            .map(|(&a, &b)| a + b)
            .collect();
        if append {
            caches.push_entry(position);
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let q = layer.wq.vecmat(&h)?;
            if append {
                let k = layer.wk.vecmat(&e_tok)?;
                let v = layer.wv.vecmat(&e_tok)?;
                caches.push_layer_rows(li, &k, &v);
            }
            let sizes = caches.sizes().to_vec();
            let (keys, values) = caches.layer_rows(li);
            if sizes.is_empty() {
                return input_err("forward_step", "attention over an empty cache");
            }
            let a = attend_cache(&q, keys, values, self.embed_dim, &sizes);
            let proj = layer.wo.vecmat(&a)?;
            for (hi, p) in h.iter_mut().zip(&proj) {
                *hi += *p;
            }
            let mid: Vec<T> = layer
                .w1
                .vecmat(&h)?
                .into_iter()
                .map(|v| if v > T::zero() { v } else { T::zero() })
                .collect();
            let f = layer.w2.vecmat(&mid)?;
            for (hi, p) in h.iter_mut().zip(&f) {
                *hi += *p;
            }
        }
        caches.advance();
        self.token_emb.matvec(&h)
    }
}

/// Greedy or temperature next-token selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Argmax; ties break toward the lowest token id.
    Greedy,
    /// Softmax at the given temperature, inverse-CDF draw from the stream.
    Temperature(f64),
}

pub fn sample_token<T: Scalar>(
    logits: &[T],
    sampling: Sampling,
    rng: &mut RandomStream,
) -> Result<u32> {
    if logits.is_empty() {
        return input_err("sample_token", "empty logits");
    }
    match sampling {
        Sampling::Greedy => {
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
        Sampling::Temperature(t) => {
            if !(t > 0.0) {
                return input_err("sample_token", "temperature must be positive");
            }
            let probs = softmax(logits, T::from_f64(t).unwrap())?;
            let u = rng.next_f64();
            let mut cum = 0.0f64;
            for (i, &p) in probs.iter().enumerate() {
                cum += p.to_f64().unwrap();
                if u < cum {
                    return Ok(i as u32);
                }
            }
            Ok(probs.len() as u32 - 1)
        }
    }
}
