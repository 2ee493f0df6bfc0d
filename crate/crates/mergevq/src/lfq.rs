//! Lookup-free quantization: per-dimension sign binarization onto
//! `{-1,+1}^d`, binary code indexing, usage statistics, and the
//! commitment/entropy loss terms.

use std::collections::HashMap;

use crate::error::{input_err, shape_err, Result};
use crate::numerics::{Matrix, Scalar};

/// A quantized token: `d` bits (`true` = `+1`) and the binary integer they
/// spell with the first component as the least significant bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LfqCode {
    bits: Vec<bool>,
    index: u64,
}

impl LfqCode {
    pub fn dims(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// The `{-1,+1}` vector form.
    pub fn to_row<T: Scalar>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { -T::one() })
            .collect()
    }
}

const MAX_CODE_DIM: usize = 63;

fn check_dim(op: &'static str, d: usize) -> Result<()> {
    if d == 0 || d > MAX_CODE_DIM {
        return input_err(op, format!("code dimension {d} outside [1, {MAX_CODE_DIM}]"));
    }
    Ok(())
}

/// Element-wise sign quantization. Positive entries map to `+1`, negative to
/// `-1`, and exact zero maps to `+1` by convention (the sign function is
/// undefined there but a code must still be emitted). Idempotent on its own
/// output. Under the straight-through convention the backward of this map is
/// the identity: gradients pass to `z` unchanged.
pub fn quantize<T: Scalar>(z: &Matrix<T>) -> Result<(Vec<LfqCode>, Matrix<T>)> {
    check_dim("quantize", z.cols())?;
    let d = z.cols();
    let mut codes = Vec::with_capacity(z.rows());
    let mut data = Vec::with_capacity(z.rows() * d);
    for i in 0..z.rows() {
        let mut bits = Vec::with_capacity(d);
        for &v in z.row(i) {
            let bit = v >= T::zero();
            bits.push(bit);
            data.push(if bit { T::one() } else { -T::one() });
        }
        let index = bits_to_index(&bits);
        codes.push(LfqCode { bits, index });
    }
    Ok((codes, Matrix::from_vec(z.rows(), d, data)?))
}

fn bits_to_index(bits: &[bool]) -> u64 {
    bits.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(j, _)| 1u64 << j)
        .sum()
}

/// Index of a `{-1,+1}` code vector: `sum_j 2^(j-1) * [entry_j = +1]` with
/// 1-based `j`, i.e. the first component is the least significant bit.
pub fn code_index<T: Scalar>(code: &[T]) -> Result<u64> {
    check_dim("code_index", code.len())?;
    let mut index = 0u64;
    for (j, &v) in code.iter().enumerate() {
        if v == T::one() {
            index |= 1 << j;
        } else if v != -T::one() {
            return input_err("code_index", format!("entry {j} = {v} is not in {{-1,+1}}"));
        }
    }
    Ok(index)
}

/// Inverse of [`code_index`].
pub fn index_code<T: Scalar>(index: u64, d: usize) -> Result<Vec<T>> {
    check_dim("index_code", d)?;
    if d < 64 && index >= (1u64 << d) {
        return input_err("index_code", format!("index {index} out of range [0, 2^{d})"));
    }
    Ok((0..d)
        .map(|j| {
            if index & (1 << j) != 0 {
                T::one()
            } else {
                -T::one()
            }
        })
        .collect())
}

/// Mean squared difference between `z` and its quantization. Stop-gradient
/// semantics: the quantized operand is treated as constant, so gradients
/// flow to `z` only.
pub fn commitment_loss<T: Scalar>(z: &Matrix<T>, z_quant: &Matrix<T>) -> Result<f64> {
    if z.rows() != z_quant.rows() || z.cols() != z_quant.cols() {
        return shape_err(
            "commitment_loss",
            format!(
                "z is {}x{}, quantized is {}x{}",
                z.rows(),
                z.cols(),
                z_quant.rows(),
                z_quant.cols()
            ),
        );
    }
    let mut acc = 0.0f64;
    for (&a, &b) in z.data().iter().zip(z_quant.data()) {
        let d = a.to_f64().unwrap() - b.to_f64().unwrap();
        acc += d * d;
    }
    Ok(acc / z.data().len() as f64)
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
    }
}

/// The two entropy terms over bit probabilities `sigma(2 z)`.
///
/// The first is the mean per-sample entropy (entropy summed over the `d`
/// bit dimensions, averaged over the batch); the second is the entropy of
/// the batch-mean bit distribution. Both are finite for every finite `z`
/// and given in natural-log units.
pub fn entropy_terms<T: Scalar>(z: &Matrix<T>) -> Result<(f64, f64)> {
    check_dim("entropy_penalty", z.cols())?;
    if z.rows() == 0 {
        return input_err("entropy_penalty", "empty batch");
    }
    let n = z.rows();
    let d = z.cols();
    let mut per_sample = 0.0f64;
    let mut mean_bits = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in z.row(i).iter().enumerate() {
            let p = 1.0 / (1.0 + (-2.0 * v.to_f64().unwrap()).exp());
            per_sample += binary_entropy(p);
            mean_bits[j] += p;
        }
    }
    let sample_term = per_sample / n as f64;
    let batch_term: f64 = mean_bits
        .iter()
        .map(|&s| binary_entropy(s / n as f64))
        .sum();
    Ok((sample_term, batch_term))
}

/// Entropy penalty: per-sample confidence term minus batch diversity term,
/// see [`entropy_terms`].
pub fn entropy_penalty<T: Scalar>(z: &Matrix<T>) -> Result<f64> {
    let (sample, batch) = entropy_terms(z)?;
    Ok(sample - batch)
}

/// Occurrence counts per observed codebook index.
#[derive(Debug, Clone, Default)]
pub struct CodebookStats {
    dims: usize,
    counts: HashMap<u64, u64>,
}

impl CodebookStats {
    pub fn new(dims: usize) -> Result<Self> {
        check_dim("codebook_stats", dims)?;
        Ok(CodebookStats {
            dims,
            counts: HashMap::new(),
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn record(&mut self, codes: &[LfqCode]) -> Result<()> {
        if let Some(bad) = codes.iter().find(|c| c.dims() != self.dims) {
            return shape_err(
                "record_usage",
                format!("code has {} dims, stats track {}", bad.dims(), self.dims),
            );
        }
        for c in codes {
            *self.counts.entry(c.index).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Distinct observed indices over the full codebook size `2^d`.
    pub fn usage_ratio(&self) -> f64 {
        self.counts.len() as f64 / (self.dims as f64).exp2()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Functional form of [`CodebookStats::record`].
pub fn record_usage(mut stats: CodebookStats, codes: &[LfqCode]) -> Result<CodebookStats> {
    stats.record(codes)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn sign_rule() {
        let z = Matrix::from_rows(vec![vec![0.3f32, -1.2, 0.5, -0.1]]).unwrap();
        let (codes, q) = quantize(&z).unwrap();
        assert_eq!(q.row(0), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(codes[0].index(), 5);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = RandomStream::new(1);
        let z: Matrix<f32> = rng.normal_matrix(8, 6, 1.0);
        let (_, q1) = quantize(&z).unwrap();
        let (_, q2) = quantize(&q1).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn zero_row_maps_to_all_plus_one() {
        let z = Matrix::from_rows(vec![vec![0.0f32, 0.0, 0.0]]).unwrap();
        let (codes, q) = quantize(&z).unwrap();
        assert_eq!(q.row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(codes[0].index(), 7);
    }

    #[test]
    fn index_examples() {
        assert_eq!(code_index(&[-1.0f32, -1.0, -1.0]).unwrap(), 0);
        assert_eq!(code_index(&[1.0f32, 1.0, 1.0, 1.0]).unwrap(), 15);
        assert_eq!(code_index(&[1.0f32, -1.0, 1.0, -1.0]).unwrap(), 5);
        assert_eq!(index_code::<f32>(0, 3).unwrap(), vec![-1.0, -1.0, -1.0]);
        assert_eq!(index_code::<f32>(5, 4).unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn index_rejects_bad_input() {
        assert!(code_index(&[0.5f32, 1.0]).is_err());
        assert!(index_code::<f32>(8, 3).is_err());
        assert!(index_code::<f32>(0, 0).is_err());
    }

    #[test]
    fn exhaustive_roundtrip_d12() {
        for index in 0..(1u64 << 12) {
            let code: Vec<f32> = index_code(index, 12).unwrap();
            assert_eq!(code_index(&code).unwrap(), index);
        }
    }

    #[test]
    fn commitment_on_binary_input_is_zero() {
        let z = Matrix::from_rows(vec![vec![1.0f32, -1.0], vec![-1.0, 1.0]]).unwrap();
        let (_, q) = quantize(&z).unwrap();
        assert_eq!(commitment_loss(&z, &q).unwrap(), 0.0);
    }

    #[test]
    fn commitment_zero_input_closed_form() {
        let z = Matrix::from_rows(vec![vec![0.0f32, 0.0]]).unwrap();
        let (_, q) = quantize(&z).unwrap();
        assert_eq!(commitment_loss(&z, &q).unwrap(), 1.0);
    }

    #[test]
    fn commitment_matches_naive_loop() {
        let mut rng = RandomStream::new(3);
        let z: Matrix<f64> = rng.normal_matrix(7, 5, 1.0);
        let (_, q) = quantize(&z).unwrap();
        let fast = commitment_loss(&z, &q).unwrap();
        let mut naive = 0.0;
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                let d = z.get(i, j) - q.get(i, j);
                naive += d * d;
            }
        }
        naive /= (z.rows() * z.cols()) as f64;
        assert!((fast - naive).abs() < 1e-7);
    }

    #[test]
    fn entropy_saturated_bits_vanish() {
        let row = vec![50.0f32, -50.0, 50.0];
        let z = Matrix::from_rows(vec![row.clone(), row.clone(), row]).unwrap();
        // Identical confident rows: per-sample term ~ 0, batch term ~ 0.
        let p = entropy_penalty(&z).unwrap();
        assert!(p.abs() < 1e-9, "{p}");
    }

    #[test]
    fn entropy_zero_input_closed_form() {
        let d = 4;
        let z = Matrix::<f64>::zeros(3, d);
        let (sample, batch) = entropy_terms(&z).unwrap();
        let expected = d as f64 * std::f64::consts::LN_2;
        assert!((sample - expected).abs() < 1e-12, "sample = {sample}");
        assert!((batch - expected).abs() < 1e-12, "batch = {batch}");
        assert!(entropy_penalty(&z).unwrap().abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_naive_recomputation() {
        let mut rng = RandomStream::new(9);
        let z: Matrix<f64> = rng.normal_matrix(6, 4, 0.8);
        let fast = entropy_penalty(&z).unwrap();
        let n = z.rows();
        let d = z.cols();
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let h = |p: f64| {
            if p <= 0.0 || p >= 1.0 {
                0.0
            } else {
                -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
            }
        };
        let mut sample = 0.0;
        for i in 0..n {
            for j in 0..d {
                sample += h(sigmoid(2.0 * z.get(i, j)));
            }
        }
        sample /= n as f64;
        let mut batch = 0.0;
        for j in 0..d {
            let mut m = 0.0;
            for i in 0..n {
                m += sigmoid(2.0 * z.get(i, j));
            }
            batch += h(m / n as f64);
        }
        assert!((fast - (sample - batch)).abs() < 1e-7);
    }

    #[test]
    fn usage_counting() {
        let mut stats = CodebookStats::new(8).unwrap();
        assert_eq!(stats.usage_ratio(), 0.0);
        let all: Vec<LfqCode> = (0..256u64)
            .map(|i| {
                let bits = (0..8).map(|j| i & (1 << j) != 0).collect::<Vec<_>>();
                LfqCode { index: i, bits }
            })
            .collect();
        stats.record(&all).unwrap();
        assert_eq!(stats.usage_ratio(), 1.0);
        assert_eq!(stats.total(), 256);
    }

    #[test]
    fn usage_matches_set_oracle_at_d18() {
        let mut rng = RandomStream::new(17);
        let mut stats = CodebookStats::new(18).unwrap();
        let mut seen = HashSet::new();
        let codes: Vec<LfqCode> = (0..100)
            .map(|_| {
                let bits: Vec<bool> = (0..18).map(|_| rng.next_u64() & 1 == 1).collect();
                let index = bits
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(j, _)| 1u64 << j)
                    .sum();
                seen.insert(index);
                LfqCode { bits, index }
            })
            .collect();
        stats.record(&codes).unwrap();
        assert_eq!(stats.distinct(), seen.len());
        let expected = seen.len() as f64 / (1u64 << 18) as f64;
        assert!((stats.usage_ratio() - expected).abs() < 1e-15);
    }

    #[test]
    fn usage_rejects_dim_mismatch() {
        let mut stats = CodebookStats::new(4).unwrap();
        let code = LfqCode {
            bits: vec![true; 5],
            index: 31,
        };
        assert!(stats.record(&[code]).is_err());
    }

    #[test]
    fn straight_through_gradient_matches_finite_differences() {
        // Loss f(q) composed through quantize with the straight-through
        // convention: the analytic gradient is f'(q(z)). Finite differences
        // run on the frozen-offset surrogate z -> f(z + (q(z0) - z0)), which
        // is the function STE actually differentiates.
        let mut rng = RandomStream::new(23);
        for trial in 0..20 {
            let z: Matrix<f64> = rng.normal_matrix(3, 4, 1.0);
            // Keep entries away from the sign boundary.
            let z = z.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let target: Matrix<f64> = rng.normal_matrix(3, 4, 1.0);
            let loss = |m: &Matrix<f64>| -> f64 {
                m.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum()
            };
            let (_, q) = quantize(&z).unwrap();
            let offset: Vec<f64> = q
                .data()
                .iter()
                .zip(z.data())
                .map(|(&qq, &zz)| qq - zz)
                .collect();

            let h = 1e-4;
            for idx in 0..z.data().len() {
                let analytic = 2.0 * (q.data()[idx] - target.data()[idx]);
                let mut plus = z.data().to_vec();
                plus[idx] += h;
                let mut minus = z.data().to_vec();
                minus[idx] -= h;
                let shift = |v: Vec<f64>| {
                    Matrix::from_vec(
                        3,
                        4,
                        v.iter().zip(&offset).map(|(a, o)| a + o).collect(),
                    )
                    .unwrap()
                };
                let fd = (loss(&shift(plus)) - loss(&shift(minus))) / (2.0 * h);
                let denom = analytic.abs().max(1e-8);
                assert!(
                    (fd - analytic).abs() / denom <= 1e-4,
                    "trial {trial} idx {idx}: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_random_indices(d in 1usize..20, raw in any::<u64>()) {
            let index = if d < 64 { raw % (1u64 << d) } else { raw };
            let code: Vec<f64> = index_code(index, d).unwrap();
            prop_assert_eq!(code_index(&code).unwrap(), index);
        }

        #[test]
        fn usage_is_monotone(batches in proptest::collection::vec(proptest::collection::vec(0u64..16, 0..5), 1..6)) {
            let mut stats = CodebookStats::new(4).unwrap();
            let mut last = 0.0;
            for batch in batches {
                let codes: Vec<LfqCode> = batch
                    .iter()
                    .map(|&i| LfqCode {
                        bits: (0..4).map(|j| i & (1 << j) != 0).collect(),
                        index: i,
                    })
                    .collect();
                stats = record_usage(stats, &codes).unwrap();
                prop_assert!(stats.usage_ratio() >= last);
                last = stats.usage_ratio();
            }
        }
    }
}
