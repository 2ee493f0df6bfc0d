use crate::error::{input_err, shape_err, Error, Result};
use crate::numerics::matrix::dot_acc;
use crate::numerics::{Matrix, Scalar};
use num_traits::{Float, Zero};

/// Numerically stable softmax with temperature.
///
/// Entries are divided by `temperature`, shifted by the maximum, and
/// exponentiated; all arithmetic runs in the accumulator type.
pub fn softmax<T: Scalar>(v: &[T], temperature: T) -> Result<Vec<T>> {
    if v.is_empty() {
        return input_err("softmax", "empty input");
    }
    if !(temperature > T::zero()) {
        return input_err("softmax", format!("temperature {temperature} must be > 0"));
    }
    let t = temperature.acc();
    let scaled: Vec<T::Acc> = v.iter().map(|&x| x.acc() / t).collect();
    let max = scaled
        .iter()
        .cloned()
        .fold(T::Acc::neg_infinity(), T::Acc::max);
    let exps: Vec<T::Acc> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = T::Acc::zero();
    for &e in &exps {
        sum += e;
    }
    Ok(exps.into_iter().map(|e| T::from_acc(e / sum)).collect())
}

/// Scaled dot-product attention with optional per-key bias and an optional
/// boolean mask (`true` = the query may attend that key).
///
/// Per query row the scores are `q.k / sqrt(d) + bias[k]` over unmasked
/// keys, softmaxed and applied to `v`. `d` is the key dimension of the
/// matrices at hand, not a configured constant. A query row whose keys are
/// all masked is rejected.
pub fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    bias: Option<&[T]>,
    mask: Option<&[bool]>,
) -> Result<Matrix<T>> {
    if q.cols() != k.cols() {
        return shape_err(
            "attention",
            format!("query dim {} != key dim {}", q.cols(), k.cols()),
        );
    }
    if v.rows() != k.rows() {
        return shape_err(
            "attention",
            format!("value rows {} != key rows {}", v.rows(), k.rows()),
        );
    }
    if let Some(b) = bias {
        if b.len() != k.rows() {
            return shape_err(
                "attention",
                format!("bias length {} != key rows {}", b.len(), k.rows()),
            );
        }
    }
    if let Some(m) = mask {
        if m.len() != q.rows() * k.rows() {
            return shape_err(
                "attention",
                format!(
                    "mask length {} != {} queries x {} keys",
                    m.len(),
                    q.rows(),
                    k.rows()
                ),
            );
        }
    }

    let scale = T::acc_from_f64(1.0 / (k.cols() as f64).sqrt());
    let mut data = Vec::with_capacity(q.rows() * v.cols());
    let mut scores: Vec<(usize, T::Acc)> = Vec::with_capacity(k.rows());
    for i in 0..q.rows() {
        scores.clear();
        for j in 0..k.rows() {
            if let Some(m) = mask {
                if !m[i * k.rows() + j] {
                    continue;
                }
            }
            let mut s = dot_acc(q.row(i), k.row(j)) * scale;
            if let Some(b) = bias {
                s = s + b[j].acc();
            }
            scores.push((j, s));
        }
        if scores.is_empty() {
            return Err(Error::FullyMaskedRow { query: i });
        }
        let max = scores
            .iter()
            .map(|&(_, s)| s)
            .fold(T::Acc::neg_infinity(), T::Acc::max);
        let mut sum = T::Acc::zero();
        for (_, s) in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for c in 0..v.cols() {
            let mut acc = T::Acc::zero();
            for &(j, w) in &scores {
                acc += (w / sum) * v.get(j, c).acc();
            }
            data.push(T::from_acc(acc));
        }
    }
    let out = Matrix::from_vec(q.rows(), v.cols(), data)?;
    out.ensure_finite("attention")?;
    Ok(out)
}
