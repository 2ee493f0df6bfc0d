//! Token merging: bipartite soft matching, size-weighted merges, source
//! matrix composition, proportional-attention encoder layers, and merge
//! schedules.

use crate::error::{input_err, shape_err, Result};
use crate::numerics::{attention, Matrix, RandomStream, Scalar};

/// Binary `K x L` assignment of original token positions to merged clusters,
/// stored in column form: `assignment[j]` is the cluster row that owns
/// original position `j`.
///
/// Every column has exactly one owner by construction. Row coverage (every
/// cluster keeps at least one member) holds for matrices produced by
/// merging; predicted sources may violate it, which [`empty_rows`] reports.
///
/// [`empty_rows`]: SourceMatrix::empty_rows
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceMatrix {
    k: usize,
    l: usize,
    assignment: Vec<u32>,
}

impl SourceMatrix {
    pub fn new(k: usize, l: usize, assignment: Vec<u32>) -> Result<Self> {
        if assignment.len() != l {
            return shape_err(
                "source_matrix",
                format!("assignment length {} != l = {l}", assignment.len()),
            );
        }
        if k == 0 || l == 0 {
            return input_err("source_matrix", "k and l must be positive");
        }
        if let Some(&bad) = assignment.iter().find(|&&r| r as usize >= k) {
            return input_err("source_matrix", format!("cluster row {bad} out of range [0, {k})"));
        }
        Ok(SourceMatrix { k, l, assignment })
    }

    /// The `L x L` identity source: every token is its own cluster.
    pub fn identity(l: usize) -> Self {
        SourceMatrix {
            k: l,
            l,
            assignment: (0..l as u32).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn cluster_of(&self, j: usize) -> usize {
        self.assignment[j] as usize
    }

    /// Member count per cluster row; equals the token sizes `s`.
    pub fn member_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.k];
        for &r in &self.assignment {
            counts[r as usize] += 1;
        }
        counts
    }

    /// Cluster rows with no members. Empty for any merge-produced source.
    pub fn empty_rows(&self) -> Vec<usize> {
        self.member_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when every cluster row owns at least one column.
    pub fn is_partition(&self) -> bool {
        self.empty_rows().is_empty()
    }

    /// Lowest original position per cluster row, `None` for empty rows.
    pub fn first_members(&self) -> Vec<Option<usize>> {
        let mut first = vec![None; self.k];
        for (j, &r) in self.assignment.iter().enumerate() {
            let slot = &mut first[r as usize];
            if slot.is_none() {
                *slot = Some(j);
            }
        }
        first
    }

    /// Dense 0/1 image, mainly for oracle tests.
    pub fn to_dense<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.k, self.l, |i, j| {
            if self.assignment[j] as usize == i {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Boolean matrix product `outer * inner` in assignment form: position `j`
/// belongs to `outer`'s row of `inner`'s row of `j`.
pub fn compose_source(outer: &SourceMatrix, inner: &SourceMatrix) -> Result<SourceMatrix> {
    if outer.l != inner.k {
        return shape_err(
            "compose_source",
            format!(
                "outer is {}x{}, inner is {}x{}",
                outer.k, outer.l, inner.k, inner.l
            ),
        );
    }
    let assignment = inner
        .assignment
        .iter()
        .map(|&mid| outer.assignment[mid as usize])
        .collect();
    SourceMatrix::new(outer.k, inner.l, assignment)
}

/// Merged token embeddings plus per-token sizes and the running source.
#[derive(Debug, Clone)]
pub struct TokenState<T> {
    tokens: Matrix<T>,
    sizes: Vec<u64>,
    source: SourceMatrix,
}

impl<T: Scalar> TokenState<T> {
    pub fn new(tokens: Matrix<T>, sizes: Vec<u64>, source: SourceMatrix) -> Result<Self> {
        if tokens.rows() != sizes.len() || tokens.rows() != source.k() {
            return shape_err(
                "token_state",
                format!(
                    "{} token rows, {} sizes, source k = {}",
                    tokens.rows(),
                    sizes.len(),
                    source.k()
                ),
            );
        }
        let total: u64 = sizes.iter().sum();
        if total != source.l() as u64 {
            return input_err(
                "token_state",
                format!("sizes sum to {total}, source l = {}", source.l()),
            );
        }
        if sizes.iter().any(|&s| s == 0) {
            return input_err("token_state", "token sizes must be positive");
        }
        Ok(TokenState {
            tokens,
            sizes,
            source,
        })
    }

    /// Fresh state over `tokens`: unit sizes, identity source.
    pub fn fresh(tokens: Matrix<T>) -> Result<Self> {
        let l = tokens.rows();
        if l == 0 {
            return input_err("token_state", "empty token sequence");
        }
        TokenState::new(tokens, vec![1; l], SourceMatrix::identity(l))
    }

    pub fn tokens(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn source(&self) -> &SourceMatrix {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairs selected for one merge step. Indices are group-local: `(a, b)`
/// names the `a`-th even-position token and the `b`-th odd-position token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergePlan {
    pairs: Vec<(usize, usize)>,
}

impl MergePlan {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T], norm_a: f64, norm_b: f64) -> f64 {
    let mut dot = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x.to_f64().unwrap() * y.to_f64().unwrap();
    }
    dot / (norm_a * norm_b)
}

/// Splits tokens into even (A) and odd (B) positions, pairs each A token
/// with its most similar B token by cosine similarity of `keys`, and keeps
/// the `r` highest-similarity pairs under the constraint that every A and B
/// token is merged at most once. Ties break toward the lowest A index, then
/// the lowest B index. When best-match collisions leave fewer than `r`
/// usable pairs, the plan is completed greedily from the full similarity
/// table over still-unmatched tokens, same ordering.
pub fn bipartite_soft_match<T: Scalar>(
    keys: &Matrix<T>,
    sizes: &[u64],
    r: usize,
) -> Result<MergePlan> {
    let n = keys.rows();
    if sizes.len() != n {
        return shape_err(
            "bipartite_soft_match",
            format!("{n} key rows vs {} sizes", sizes.len()),
        );
    }
    let b_count = n / 2;
    if r > b_count {
        return input_err(
            "bipartite_soft_match",
            format!("r = {r} exceeds floor({n}/2) = {b_count}"),
        );
    }
    if r == 0 {
        return Ok(MergePlan::default());
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            keys.row(i)
                .iter()
                .map(|&v| {
                    let x = v.to_f64().unwrap();
                    x * x
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    if let Some(zero) = norms.iter().position(|&v| v == 0.0) {
        return input_err("bipartite_soft_match", format!("key row {zero} is all zeros"));
    }

    let a_count = n - b_count;
    let sim = |a: usize, b: usize| {
        cosine(
            keys.row(2 * a),
            keys.row(2 * b + 1),
            norms[2 * a],
            norms[2 * b + 1],
        )
    };

    // Candidate list: each A token with its best B.
    let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(a_count);
    for a in 0..a_count {
        let mut best = (0usize, f64::NEG_INFINITY);
        for b in 0..b_count {
            let s = sim(a, b);
            if s > best.1 {
                best = (b, s);
            }
        }
        candidates.push((a, best.0, best.1));
    }
    candidates.sort_by(|x, y| {
        y.2.total_cmp(&x.2)
            .then(x.0.cmp(&y.0))
            .then(x.1.cmp(&y.1))
    });

    let mut used_a = vec![false; a_count];
    let mut used_b = vec![false; b_count];
    let mut pairs = Vec::with_capacity(r);
    for &(a, b, _) in &candidates {
        if pairs.len() == r {
            break;
        }
        if !used_b[b] {
            used_a[a] = true;
            used_b[b] = true;
            pairs.push((a, b));
        }
    }

    // Best-match collisions can starve the plan; finish from the full table.
    if pairs.len() < r {
        let mut rest: Vec<(usize, usize, f64)> = Vec::new();
        for a in (0..a_count).filter(|&a| !used_a[a]) {
            for b in (0..b_count).filter(|&b| !used_b[b]) {
                rest.push((a, b, sim(a, b)));
            }
        }
        rest.sort_by(|x, y| {
            y.2.total_cmp(&x.2)
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        for (a, b, _) in rest {
            if pairs.len() == r {
                break;
            }
            if !used_a[a] && !used_b[b] {
                used_a[a] = true;
                used_b[b] = true;
                pairs.push((a, b));
            }
        }
    }
    debug_assert_eq!(pairs.len(), r);
    pairs.sort_unstable();
    Ok(MergePlan { pairs })
}

/// Applies a merge plan: each pair collapses to its size-weighted mean at
/// the A member's slot, the B member's slot disappears, and survivors keep
/// their relative order. The source gains one composition step.
pub fn apply_merge<T: Scalar>(state: &TokenState<T>, plan: &MergePlan) -> Result<TokenState<T>> {
    let n = state.len();
    let b_count = n / 2;
    if plan.len() > b_count {
        return input_err(
            "apply_merge",
            format!("plan has {} pairs, at most {b_count} allowed", plan.len()),
        );
    }
    let mut partner = vec![None::<usize>; n];
    let mut removed = vec![false; n];
    let mut seen_a = vec![false; n];
    for &(a, b) in plan.pairs() {
        let pa = 2 * a;
        let pb = 2 * b + 1;
        if pa >= n || pb >= n {
            return input_err("apply_merge", format!("pair ({a}, {b}) out of range for {n} tokens"));
        }
        if seen_a[pa] || removed[pb] {
            return input_err("apply_merge", "plan reuses a token");
        }
        seen_a[pa] = true;
        removed[pb] = true;
        partner[pa] = Some(pb);
    }

    let new_count = n - plan.len();
    let dim = state.tokens.cols();
    let mut tokens = Vec::with_capacity(new_count * dim);
    let mut sizes = Vec::with_capacity(new_count);
    let mut step_assignment = vec![0u32; n];
    let mut next = 0u32;
    for p in 0..n {
        if removed[p] {
            continue;
        }
        step_assignment[p] = next;
        match partner[p] {
            Some(pb) => {
                step_assignment[pb] = next;
                let sa = state.sizes[p] as f64;
                let sb = state.sizes[pb] as f64;
                let total = sa + sb;
                let ra = state.tokens.row(p);
                let rb = state.tokens.row(pb);
                for c in 0..dim {
                    let merged = (sa * ra[c].to_f64().unwrap() + sb * rb[c].to_f64().unwrap())
                        / total;
                    tokens.push(T::from_f64(merged).unwrap());
                }
                sizes.push(state.sizes[p] + state.sizes[pb]);
            }
            None => {
                tokens.extend_from_slice(state.tokens.row(p));
                sizes.push(state.sizes[p]);
            }
        }
        next += 1;
    }

    let step = SourceMatrix::new(new_count, n, step_assignment)?;
    let source = compose_source(&step, &state.source)?;
    TokenState::new(Matrix::from_vec(new_count, dim, tokens)?, sizes, source)
}

/// Per-layer merge counts for an encoder pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeSchedule {
    counts: Vec<usize>,
}

impl MergeSchedule {
    /// Validates feasibility against an initial length `l`: each layer may
    /// merge at most half of the tokens it receives.
    pub fn from_counts(l: usize, counts: Vec<usize>) -> Result<Self> {
        let mut remaining = l;
        for (i, &r) in counts.iter().enumerate() {
            if r > remaining / 2 {
                return input_err(
                    "merge_schedule",
                    format!("layer {i} merges {r} of {remaining} tokens (max {})", remaining / 2),
                );
            }
            remaining -= r;
        }
        Ok(MergeSchedule { counts })
    }

    pub fn constant(l: usize, r: usize, n_layers: usize) -> Result<Self> {
        Self::from_counts(l, vec![r; n_layers])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn layers(&self) -> usize {
        self.counts.len()
    }
}

fn weighted_schedule(l: usize, k_target: usize, weights: &[u64]) -> Result<MergeSchedule> {
    if k_target > l {
        return input_err(
            "merge_schedule",
            format!("target {k_target} exceeds initial length {l}"),
        );
    }
    let total = (l - k_target) as u64;
    let weight_sum: u64 = weights.iter().sum();
    // Largest-remainder rounding in exact integer arithmetic.
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(u64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (i, &w) in weights.iter().enumerate() {
        let num = total * w;
        counts.push((num / weight_sum) as usize);
        assigned += num / weight_sum;
        remainders.push((num % weight_sum, i));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut leftover = total - assigned;
    for &(_, i) in &remainders {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    MergeSchedule::from_counts(l, counts)
}

/// Square-decreasing schedule: layer `i` of `n` gets weight `(n - i)^2`
/// (1-based: `(n - i + 1)^2`), rounded by largest remainder so the counts
/// sum to exactly `l - k_target`. The result is monotonically
/// non-increasing.
pub fn square_schedule(l: usize, k_target: usize, n_layers: usize) -> Result<MergeSchedule> {
    if n_layers == 0 {
        return input_err("merge_schedule", "need at least one layer");
    }
    let weights: Vec<u64> = (0..n_layers)
        .map(|i| {
            let d = (n_layers - i) as u64;
            d * d
        })
        .collect();
    weighted_schedule(l, k_target, &weights)
}

/// Linearly decreasing variant of [`square_schedule`].
pub fn linear_schedule(l: usize, k_target: usize, n_layers: usize) -> Result<MergeSchedule> {
    if n_layers == 0 {
        return input_err("merge_schedule", "need at least one layer");
    }
    let weights: Vec<u64> = (0..n_layers).map(|i| (n_layers - i) as u64).collect();
    weighted_schedule(l, k_target, &weights)
}

/// One encoder layer: attention with per-key `log s` bias, output
/// projection, residual, and a two-matrix feed-forward.
#[derive(Debug, Clone)]
pub struct TomeLayer<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

impl<T: Scalar> TomeLayer<T> {
    /// Random weights scaled by `1/sqrt(fan_in)`.
    pub fn init(rng: &mut RandomStream, dim: usize) -> Self {
        let hidden = 4 * dim;
        let s = 1.0 / (dim as f64).sqrt();
        TomeLayer {
            wq: rng.normal_matrix(dim, dim, s),
            wk: rng.normal_matrix(dim, dim, s),
            wv: rng.normal_matrix(dim, dim, s),
            wo: rng.normal_matrix(dim, dim, s),
            w1: rng.normal_matrix(dim, hidden, s),
            w2: rng.normal_matrix(hidden, dim, 1.0 / (hidden as f64).sqrt()),
        }
    }
}

fn relu<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn size_bias<T: Scalar>(sizes: &[u64]) -> Vec<T> {
    sizes
        .iter()
        .map(|&s| T::from_f64((s as f64).ln()).unwrap())
        .collect()
}

/// One full layer pass: proportional self-attention, residual add,
/// feed-forward with residual, then bipartite matching on this layer's
/// attention keys followed by the merge.
pub fn tome_attention_layer<T: Scalar>(
    state: &TokenState<T>,
    r: usize,
    layer: &TomeLayer<T>,
) -> Result<TokenState<T>> {
    let x = state.tokens();
    let q = x.matmul(&layer.wq)?;
    let k = x.matmul(&layer.wk)?;
    let v = x.matmul(&layer.wv)?;
    let bias = size_bias::<T>(state.sizes());
    let attended = attention(&q, &k, &v, Some(&bias), None)?;
    let h = x.add(&attended.matmul(&layer.wo)?)?;
    let y = h.add(&relu(&h.matmul(&layer.w1)?).matmul(&layer.w2)?)?;

    let plan = bipartite_soft_match(&k, state.sizes(), r)?;
    let post = TokenState::new(y, state.sizes().to_vec(), state.source().clone())?;
    apply_merge(&post, &plan)
}

/// Encoder stack of [`TomeLayer`]s.
#[derive(Debug, Clone)]
pub struct TomeEncoder<T> {
    pub layers: Vec<TomeLayer<T>>,
}

impl<T: Scalar> TomeEncoder<T> {
    pub fn init(rng: &mut RandomStream, n_layers: usize, dim: usize) -> Self {
        TomeEncoder {
            layers: (0..n_layers).map(|_| TomeLayer::init(rng, dim)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.wq.rows())
    }
}

/// Runs the encoder over `tokens` with the given schedule, returning the
/// final merged state (source is `K x L`, tokens are `K x dim`).
pub fn encode<T: Scalar>(
    tokens: &Matrix<T>,
    schedule: &MergeSchedule,
    encoder: &TomeEncoder<T>,
) -> Result<TokenState<T>> {
    if schedule.layers() != encoder.layers.len() {
        return input_err(
            "encode",
            format!(
                "schedule has {} layers, encoder has {}",
                schedule.layers(),
                encoder.layers.len()
            ),
        );
    }
    // Re-validate against this token count; schedules are built per length.
    MergeSchedule::from_counts(tokens.rows(), schedule.counts().to_vec())?;
    let mut state = TokenState::fresh(tokens.clone())?;
    for (layer, &r) in encoder.layers.iter().zip(schedule.counts()) {
        state = tome_attention_layer(&state, r, layer)?;
    }
    Ok(state)
}
