//! Source recovery: a small decoder that predicts cluster assignments from
//! quantized merged tokens, its binary cross-entropy loss with analytic
//! gradient, and deterministic token expansion.

use crate::error::{input_err, shape_err, Result};
use crate::numerics::{attention, softmax, Matrix, RandomStream, Scalar};
use crate::tome::SourceMatrix;

/// Probability clamp for the cross-entropy terms, which are undefined at
/// exact 0/1.
pub const PROB_EPS: f64 = 1e-7;

/// One decoder block: attention from `x` onto a key/value source, output
/// projection with residual, then a feed-forward with residual. Zeroing
/// `wo` and `w2` turns the block into the identity, which the fixture
/// tests rely on.
#[derive(Debug, Clone)]
pub struct DecoderBlock<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

impl<T: Scalar> DecoderBlock<T> {
    /// `kv_dim` is the column count of the key/value source, `hidden` the
    /// block width.
    pub fn init(rng: &mut RandomStream, kv_dim: usize, hidden: usize) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        let skv = 1.0 / (kv_dim as f64).sqrt();
        DecoderBlock {
            wq: rng.normal_matrix(hidden, hidden, s),
            wk: rng.normal_matrix(kv_dim, hidden, skv),
            wv: rng.normal_matrix(kv_dim, hidden, skv),
            wo: rng.normal_matrix(hidden, hidden, s),
            w1: rng.normal_matrix(hidden, 2 * hidden, s),
            w2: rng.normal_matrix(2 * hidden, hidden, 1.0 / (2.0 * hidden as f64).sqrt()),
        }
    }

    pub fn forward(&self, x: &Matrix<T>, kv_src: &Matrix<T>) -> Result<Matrix<T>> {
        let q = x.matmul(&self.wq)?;
        let k = kv_src.matmul(&self.wk)?;
        let v = kv_src.matmul(&self.wv)?;
        let a = attention(&q, &k, &v, None, None)?;
        let h = x.add(&a.matmul(&self.wo)?)?;
        let f = h
            .matmul(&self.w1)?
            .map(|v| if v > T::zero() { v } else { T::zero() })
            .matmul(&self.w2)?;
        h.add(&f)
    }
}

/// Source recovery model: `L` learnable queries cross-attend to the
/// quantized tokens, two self-attention blocks refine them, and an output
/// projection maps back to code space so the affinity scores against the
/// raw quantized rows typecheck.
#[derive(Debug, Clone)]
pub struct RecoveryModel<T> {
    pub queries: Matrix<T>,
    pub cross: DecoderBlock<T>,
    pub self1: DecoderBlock<T>,
    pub self2: DecoderBlock<T>,
    pub w_out: Matrix<T>,
}

/// Default block width, matching the small-decoder configuration the
/// pipeline commands use.
pub const DEFAULT_HIDDEN: usize = 384;

impl<T: Scalar> RecoveryModel<T> {
    pub fn init(rng: &mut RandomStream, l: usize, code_dim: usize, hidden: usize) -> Result<Self> {
        if l == 0 || code_dim == 0 || hidden == 0 {
            return input_err("recovery_model", "l, code_dim, hidden must be positive");
        }
        Ok(RecoveryModel {
            queries: rng.normal_matrix(l, hidden, 1.0 / (hidden as f64).sqrt()),
            cross: DecoderBlock::init(rng, code_dim, hidden),
            self1: DecoderBlock::init(rng, hidden, hidden),
            self2: DecoderBlock::init(rng, hidden, hidden),
            w_out: rng.normal_matrix(hidden, code_dim, 1.0 / (hidden as f64).sqrt()),
        })
    }

    pub fn init_default(rng: &mut RandomStream, l: usize, code_dim: usize) -> Result<Self> {
        Self::init(rng, l, code_dim, DEFAULT_HIDDEN)
    }

    /// Number of recovery queries (the original sequence length `L`).
    pub fn queries_len(&self) -> usize {
        self.queries.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.w_out.cols()
    }
}

/// `L x K` affinity scores with their row-softmax probabilities.
#[derive(Debug, Clone)]
pub struct SourceLogits<T> {
    scores: Matrix<T>,
    probs: Matrix<T>,
}

impl<T: Scalar> SourceLogits<T> {
    /// Row-softmax of raw scores; rows of `probs` sum to 1.
    pub fn from_scores(scores: Matrix<T>) -> Result<Self> {
        let mut probs = Vec::with_capacity(scores.rows() * scores.cols());
        for i in 0..scores.rows() {
            probs.extend(softmax(scores.row(i), T::one())?);
        }
        let probs = Matrix::from_vec(scores.rows(), scores.cols(), probs)?;
        Ok(SourceLogits { scores, probs })
    }

    /// Builds directly from probabilities in `[0, 1]`.
    ///
    /// Rows are not required to sum to 1; this is the entry point for
    /// degenerate closed-form checks (for example a single entry at 0.5)
    /// and for loss evaluation on externally produced tables.
    pub fn from_probs(probs: Matrix<T>) -> Result<Self> {
        if probs
            .data()
            .iter()
            .any(|&p| p < T::zero() || p > T::one())
        {
            return input_err("source_logits", "probabilities must lie in [0, 1]");
        }
        Ok(SourceLogits {
            scores: probs.clone(),
            probs,
        })
    }

    pub fn scores(&self) -> &Matrix<T> {
        &self.scores
    }

    pub fn probs(&self) -> &Matrix<T> {
        &self.probs
    }

    pub fn l(&self) -> usize {
        self.probs.rows()
    }

    pub fn k(&self) -> usize {
        self.probs.cols()
    }
}

/// Runs the recovery decoder over quantized tokens (`K x code_dim`) and
/// returns the `L x K` assignment logits.
pub fn recovery_forward<T: Scalar>(
    model: &RecoveryModel<T>,
    z_quant: &Matrix<T>,
) -> Result<SourceLogits<T>> {
    if z_quant.rows() == 0 {
        return input_err("recovery_forward", "no quantized tokens (K = 0)");
    }
    if z_quant.cols() != model.code_dim() {
        return shape_err(
            "recovery_forward",
            format!(
                "tokens have dim {}, model expects {}",
                z_quant.cols(),
                model.code_dim()
            ),
        );
    }
    let x = model.cross.forward(&model.queries, z_quant)?;
    let x = model.self1.forward(&x, &x)?;
    let x = model.self2.forward(&x, &x)?;
    let refined = x.matmul(&model.w_out)?;
    let scores = refined.matmul(&z_quant.transpose())?;
    SourceLogits::from_scores(scores)
}

/// Argmax prediction of the source matrix.
#[derive(Debug, Clone)]
pub struct SourcePrediction {
    pub source: SourceMatrix,
    /// True when some cluster received no positions. Downstream consumers
    /// tolerate this; an untrained model legitimately produces it.
    pub degenerate: bool,
}

/// Assigns each original position to its argmax cluster (ties break toward
/// the lowest cluster index). Column sums are 1 by construction; empty
/// cluster rows are flagged, not rejected.
pub fn predict_source<T: Scalar>(logits: &SourceLogits<T>) -> Result<SourcePrediction> {
    let probs = logits.probs();
    let mut assignment = Vec::with_capacity(probs.rows());
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let mut best = 0usize;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        assignment.push(best as u32);
    }
    let source = SourceMatrix::new(probs.cols(), probs.rows(), assignment)?;
    let degenerate = !source.is_partition();
    Ok(SourcePrediction { source, degenerate })
}

fn check_loss_shapes<T: Scalar>(
    op: &'static str,
    logits: &SourceLogits<T>,
    truth: &SourceMatrix,
) -> Result<()> {
    if logits.l() != truth.l() || logits.k() != truth.k() {
        return shape_err(
            op,
            format!(
                "logits are {}x{}, truth is {}x{} (as L x K)",
                logits.l(),
                logits.k(),
                truth.l(),
                truth.k()
            ),
        );
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_EPS).min(1.0 - PROB_EPS)
}

/// Binary cross-entropy summed over all `L x K` entries between the
/// prediction probabilities and the 0/1 truth, with probabilities clamped
/// to `[PROB_EPS, 1 - PROB_EPS]`. Always non-negative.
pub fn source_loss<T: Scalar>(logits: &SourceLogits<T>, truth: &SourceMatrix) -> Result<f64> {
    check_loss_shapes("source_loss", logits, truth)?;
    let probs = logits.probs();
    let mut loss = 0.0f64;
    for j in 0..probs.rows() {
        let owner = truth.cluster_of(j);
        for c in 0..probs.cols() {
            let p = clamp_prob(probs.get(j, c).to_f64().unwrap());
            if c == owner {
                loss -= p.ln();
            } else {
                loss -= (1.0 - p).ln();
            }
        }
    }
    Ok(loss)
}

/// Analytic gradient of [`source_loss`] with respect to the probabilities:
/// `-S/p + (1-S)/(1-p)` entrywise, zero where the clamp is active.
pub fn source_loss_grad<T: Scalar>(
    logits: &SourceLogits<T>,
    truth: &SourceMatrix,
) -> Result<Matrix<T>> {
    check_loss_shapes("source_loss_grad", logits, truth)?;
    let probs = logits.probs();
    let grad = Matrix::from_fn(probs.rows(), probs.cols(), |j, c| {
        let raw = probs.get(j, c).to_f64().unwrap();
        if raw < PROB_EPS || raw > 1.0 - PROB_EPS {
            return T::zero();
        }
        let p = clamp_prob(raw);
        let g = if truth.cluster_of(j) == c {
            -1.0 / p
        } else {
            1.0 / (1.0 - p)
        };
        T::from_f64(g).unwrap()
    });
    Ok(grad)
}

/// Token expansion `S^T Z~_K`: output row `j` is the quantized row of the
/// cluster that owns position `j`. Exactly a gather, so rows within a
/// cluster are bitwise identical.
pub fn recover_tokens<T: Scalar>(z_quant: &Matrix<T>, s: &SourceMatrix) -> Result<Matrix<T>> {
    if z_quant.rows() != s.k() {
        return shape_err(
            "recover_tokens",
            format!("{} quantized rows vs source k = {}", z_quant.rows(), s.k()),
        );
    }
    let mut data = Vec::with_capacity(s.l() * z_quant.cols());
    for j in 0..s.l() {
        data.extend_from_slice(z_quant.row(s.cluster_of(j)));
    }
    Matrix::from_vec(s.l(), z_quant.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;

    fn zeroed_block(rng: &mut RandomStream, kv_dim: usize, hidden: usize) -> DecoderBlock<f64> {
        let mut b = DecoderBlock::<f64>::init(rng, kv_dim, hidden);
        b.wo = Matrix::zeros(hidden, hidden);
        b.w2 = Matrix::zeros(2 * hidden, hidden);
        b
    }

    #[test]
    fn single_cluster_probs_are_one() {
        let mut rng = RandomStream::new(1);
        let model = RecoveryModel::<f32>::init(&mut rng, 5, 4, 16).unwrap();
        let z = Matrix::from_rows(vec![vec![1.0f32, -1.0, 1.0, -1.0]]).unwrap();
        let logits = recovery_forward(&model, &z).unwrap();
        assert_eq!((logits.l(), logits.k()), (5, 1));
        for i in 0..5 {
            assert_eq!(logits.probs().get(i, 0), 1.0);
        }
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let mut rng = RandomStream::new(2);
        let model = RecoveryModel::<f32>::init(&mut rng, 6, 5, 12).unwrap();
        let z: Matrix<f32> = rng.normal_matrix(3, 5, 1.0);
        let logits = recovery_forward(&model, &z).unwrap();
        for i in 0..logits.l() {
            let s: f64 = logits.probs().row(i).iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_input() {
        let mut rng = RandomStream::new(3);
        let model = RecoveryModel::<f32>::init(&mut rng, 4, 4, 8).unwrap();
        assert!(recovery_forward(&model, &Matrix::zeros(0, 4)).is_err());
        let wrong: Matrix<f32> = rng.normal_matrix(2, 3, 1.0);
        assert!(recovery_forward(&model, &wrong).is_err());
    }

    #[test]
    fn identity_blocks_recover_a_permutation() {
        // Blocks with zeroed residual branches are the identity, so the
        // refined queries equal the raw queries; setting those to permuted
        // quantized rows makes the argmax recover the permutation.
        let mut rng = RandomStream::new(4);
        let d = 6;
        let k = 5;
        let codes: Matrix<f64> = {
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|i| crate::lfq::index_code::<f64>(i as u64 * 7 + 1, d).unwrap())
                .collect();
            Matrix::from_rows(rows).unwrap()
        };
        let perm = [2usize, 0, 4, 1, 3];
        let queries = Matrix::from_fn(k, d, |i, j| codes.get(perm[i], j));
        let model = RecoveryModel {
            queries,
            cross: zeroed_block(&mut rng, d, d),
            self1: zeroed_block(&mut rng, d, d),
            self2: zeroed_block(&mut rng, d, d),
            w_out: Matrix::identity(d),
        };
        let logits = recovery_forward(&model, &codes).unwrap();
        let pred = predict_source(&logits).unwrap();
        let got: Vec<usize> = (0..k).map(|j| pred.source.cluster_of(j)).collect();
        assert_eq!(got, perm.to_vec());
        assert!(!pred.degenerate);
    }

    #[test]
    fn predict_one_hot_rows_exactly() {
        let probs = Matrix::from_rows(vec![
            vec![0.0f32, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let pred = predict_source(&SourceLogits::from_probs(probs).unwrap()).unwrap();
        assert_eq!(pred.source.assignment(), &[1, 0, 2, 1]);
        assert!(!pred.degenerate);
    }

    #[test]
    fn predict_uniform_breaks_ties_to_cluster_zero() {
        let probs = Matrix::from_vec(3, 4, vec![0.25f32; 12]).unwrap();
        let pred = predict_source(&SourceLogits::from_probs(probs).unwrap()).unwrap();
        assert_eq!(pred.source.assignment(), &[0, 0, 0]);
        assert!(pred.degenerate); // clusters 1..3 are empty
    }

    #[test]
    fn predict_is_fixed_point_on_true_source() {
        let truth = SourceMatrix::new(3, 6, vec![1, 0, 2, 1, 1, 0]).unwrap();
        let dense: Matrix<f32> = truth.to_dense::<f32>().transpose();
        let pred = predict_source(&SourceLogits::from_probs(dense).unwrap()).unwrap();
        assert_eq!(&pred.source, &truth);
    }

    #[test]
    fn loss_near_zero_on_perfect_prediction() {
        let truth = SourceMatrix::new(2, 4, vec![0, 1, 0, 1]).unwrap();
        let dense: Matrix<f64> = truth.to_dense::<f64>().transpose();
        let logits = SourceLogits::from_probs(dense).unwrap();
        let loss = source_loss(&logits, &truth).unwrap();
        let bound = 4.0 * 2.0 * -(1.0 - PROB_EPS).ln();
        assert!(loss >= 0.0 && loss <= bound, "loss = {loss}");
    }

    #[test]
    fn loss_degenerate_closed_form_ln2() {
        let probs = Matrix::from_vec(1, 1, vec![0.5f64]).unwrap();
        let logits = SourceLogits::from_probs(probs).unwrap();
        let truth = SourceMatrix::new(1, 1, vec![0]).unwrap();
        let loss = source_loss(&logits, &truth).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_double_loop() {
        let mut rng = RandomStream::new(5);
        let (l, k) = (7, 4);
        let probs = Matrix::from_fn(l, k, |_, _| rng.next_f64());
        let logits = SourceLogits::from_probs(probs.clone()).unwrap();
        let assignment: Vec<u32> = (0..l)
            .map(|j| if j < k { j as u32 } else { rng.next_below(k as u64) as u32 })
            .collect();
        let truth = SourceMatrix::new(k, l, assignment).unwrap();
        let fast = source_loss(&logits, &truth).unwrap();

        let mut naive = 0.0;
        for j in 0..l {
            for c in 0..k {
                let s = if truth.cluster_of(j) == c { 1.0 } else { 0.0 };
                let p = probs.get(j, c).clamp(PROB_EPS, 1.0 - PROB_EPS);
                naive -= s * p.ln() + (1.0 - s) * (1.0 - p).ln();
            }
        }
        assert!((fast - naive).abs() < 1e-6, "{fast} vs {naive}");
        assert!(fast >= 0.0);
    }

    #[test]
    fn grad_closed_forms() {
        let truth1 = SourceMatrix::new(1, 1, vec![0]).unwrap();
        let half = SourceLogits::from_probs(Matrix::from_vec(1, 1, vec![0.5f64]).unwrap()).unwrap();
        let g = source_loss_grad(&half, &truth1).unwrap();
        assert!((g.get(0, 0) + 2.0).abs() < 1e-12);

        // truth = 0 at the same probability.
        let truth0 = SourceMatrix::new(2, 1, vec![1]).unwrap();
        let half2 = SourceLogits::from_probs(Matrix::from_vec(1, 2, vec![0.5f64, 0.5]).unwrap())
            .unwrap();
        let g2 = source_loss_grad(&half2, &truth0).unwrap();
        assert!((g2.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((g2.get(0, 1) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut rng = RandomStream::new(6);
        let (l, k) = (5, 3);
        for trial in 0..20 {
            // Keep probabilities away from the clamp boundary.
            let probs = Matrix::from_fn(l, k, |_, _| 0.05 + 0.9 * rng.next_f64());
            let assignment: Vec<u32> = (0..l)
                .map(|j| if j < k { j as u32 } else { rng.next_below(k as u64) as u32 })
                .collect();
            let truth = SourceMatrix::new(k, l, assignment).unwrap();
            let grad =
                source_loss_grad(&SourceLogits::from_probs(probs.clone()).unwrap(), &truth)
                    .unwrap();
            let h = 1e-4;
            for j in 0..l {
                for c in 0..k {
                    let eval = |p: f64| {
                        let mut m = probs.clone();
                        let mut row = m.row(j).to_vec();
                        row[c] = p;
                        m.set_row(j, &row).unwrap();
                        source_loss(&SourceLogits::from_probs(m).unwrap(), &truth).unwrap()
                    };
                    let p0 = probs.get(j, c);
                    let fd = (eval(p0 + h) - eval(p0 - h)) / (2.0 * h);
                    let an = grad.get(j, c);
                    let rel = (fd - an).abs() / an.abs().max(1e-8);
                    assert!(rel <= 1e-4, "trial {trial} ({j},{c}): fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn recover_identity_source_is_identity() {
        let mut rng = RandomStream::new(7);
        let z: Matrix<f32> = rng.normal_matrix(4, 3, 1.0);
        let out = recover_tokens(&z, &SourceMatrix::identity(4)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn recover_hand_case() {
        let z = Matrix::from_rows(vec![vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = SourceMatrix::new(2, 3, vec![0, 1, 0]).unwrap();
        let out = recover_tokens(&z, &s).unwrap();
        assert_eq!(out.row(0), z.row(0));
        assert_eq!(out.row(1), z.row(1));
        assert_eq!(out.row(2), z.row(0));
    }

    #[test]
    fn recover_matches_gather_loop_and_matmul() {
        let mut rng = RandomStream::new(8);
        for _ in 0..20 {
            let k = 2 + rng.next_below(4) as usize;
            let l = k + rng.next_below(8) as usize;
            let mut assignment: Vec<u32> = (0..l)
                .map(|j| if j < k { j as u32 } else { rng.next_below(k as u64) as u32 })
                .collect();
            for i in (1..l).rev() {
                let j = rng.next_below(i as u64 + 1) as usize;
                assignment.swap(i, j);
            }
            let s = SourceMatrix::new(k, l, assignment).unwrap();
            let z: Matrix<f32> = rng.normal_matrix(k, 5, 1.0);
            let out = recover_tokens(&z, &s).unwrap();
            // Gather-loop oracle: exact equality.
            for j in 0..l {
                assert_eq!(out.row(j), z.row(s.cluster_of(j)));
            }
            // And it is the literal matrix product S^T Z.
            let product = s.to_dense::<f32>().transpose().matmul(&z).unwrap();
            for j in 0..l {
                for c in 0..z.cols() {
                    assert!((product.get(j, c) - out.get(j, c)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn recover_rejects_mismatch() {
        let z = Matrix::<f32>::zeros(3, 2);
        let s = SourceMatrix::new(2, 4, vec![0, 1, 0, 1]).unwrap();
        assert!(recover_tokens(&z, &s).is_err());
    }
}
