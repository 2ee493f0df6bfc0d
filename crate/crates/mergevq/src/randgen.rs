//! Random-order autoregressive decoding: a position instruction precedes
//! every content token, and generated tokens expand back to full length
//! through the source-recovery model.

use crate::error::{input_err, Result};
use crate::lfq::index_code;
use crate::numerics::{Matrix, RandomStream, Scalar};
use crate::recovery::{predict_source, recover_tokens, recovery_forward, RecoveryModel};
use crate::tome::SourceMatrix;
use crate::toymodel::{sample_token, Generator, Sampling, TokenInput};

/// One random-order decode: the sampled permutation, the interleaved input
/// stream, and the generated content tokens in generation order.
#[derive(Debug, Clone)]
pub struct RandomOrderTrace {
    permutation: Vec<usize>,
    stream: Vec<TokenInput>,
    tokens: Vec<u32>,
}

impl RandomOrderTrace {
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Class token followed by alternating position-instruction and content
    /// tokens; length `2K + 1`.
    pub fn stream(&self) -> &[TokenInput] {
        &self.stream
    }

    /// Tokens in generation order: `tokens[i]` targets raster slot
    /// `permutation[i]`.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Re-sorts the generated tokens into raster order.
    pub fn raster_tokens(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.tokens.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            out[p] = self.tokens[i];
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Decodes `k` tokens in a uniformly sampled order. Each step feeds the
/// position-instruction embedding for the target slot, samples the content
/// token from the resulting logits, then feeds the sampled token.
pub fn random_order_decode<T: Scalar>(
    model: &impl Generator<T>,
    class_id: u32,
    k: usize,
    sampling: Sampling,
    rng: &mut RandomStream,
) -> Result<RandomOrderTrace> {
    let permutation = rng.permutation(k);
    random_order_decode_with_permutation(model, class_id, permutation, sampling, rng)
}

/// Fixture entry point: decode along a caller-supplied permutation.
pub fn random_order_decode_with_permutation<T: Scalar>(
    model: &impl Generator<T>,
    class_id: u32,
    permutation: Vec<usize>,
    sampling: Sampling,
    rng: &mut RandomStream,
) -> Result<RandomOrderTrace> {
    let k = permutation.len();
    if k == 0 {
        return input_err("random_order_decode", "need at least one token");
    }
    if 2 * k + 1 > model.max_positions() {
        return input_err(
            "random_order_decode",
            format!("2k + 1 = {} exceeds l_max {}", 2 * k + 1, model.max_positions()),
        );
    }
    let mut seen = vec![false; k];
    for &p in &permutation {
        if p >= k || seen[p] {
            return input_err("random_order_decode", "not a permutation of [0, k)");
        }
        seen[p] = true;
    }

    let mut caches = model.new_caches();
    let mut stream = Vec::with_capacity(2 * k + 1);
    let mut tokens = Vec::with_capacity(k);

    let class = TokenInput::Class(class_id);
    model.forward_step(class, 0, &mut caches, true)?;
    stream.push(class);

    for (i, &target) in permutation.iter().enumerate() {
        let instr = TokenInput::PositionInstruction(target as u32);
        let logits = model.forward_step(instr, 2 * i + 1, &mut caches, true)?;
        stream.push(instr);
        let token = sample_token(&logits, sampling, rng)?;
        tokens.push(token);
        let content = TokenInput::Content(token);
        model.forward_step(content, 2 * i + 2, &mut caches, true)?;
        stream.push(content);
    }

    Ok(RandomOrderTrace {
        permutation,
        stream,
        tokens,
    })
}

/// Expanded pipeline output.
#[derive(Debug, Clone)]
pub struct ExpandedTokens<T> {
    /// `L x d` expansion of the decoded codes.
    pub tokens: Matrix<T>,
    /// Predicted source used for the expansion.
    pub source: SourceMatrix,
    /// True when the prediction left some cluster empty.
    pub degenerate: bool,
}

/// Maps a trace's token ids to their `{-1,+1}` code rows.
pub fn trace_code_rows<T: Scalar>(trace: &RandomOrderTrace, code_dim: usize) -> Result<Matrix<T>> {
    let rows: Result<Vec<Vec<T>>> = trace
        .raster_tokens()
        .iter()
        .map(|&id| index_code(id as u64, code_dim))
        .collect();
    Matrix::from_rows(rows?)
}

/// Full expansion pipeline: token ids become code rows, the recovery model
/// predicts the source, and the codes gather out to `l` rows.
pub fn generate_pipeline<T: Scalar>(
    trace: &RandomOrderTrace,
    recovery: &RecoveryModel<T>,
    code_dim: usize,
    l: usize,
) -> Result<ExpandedTokens<T>> {
    if recovery.queries_len() != l {
        return input_err(
            "generate_pipeline",
            format!("recovery model has {} queries, expected {l}", recovery.queries_len()),
        );
    }
    let codes = trace_code_rows::<T>(trace, code_dim)?;
    let logits = recovery_forward(recovery, &codes)?;
    let pred = predict_source(&logits)?;
    let tokens = recover_tokens(&codes, &pred.source)?;
    Ok(ExpandedTokens {
        tokens,
        source: pred.source,
        degenerate: pred.degenerate,
    })
}
