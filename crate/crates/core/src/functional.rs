//! Tape-free numeric helpers: softmax along an axis and KL divergence.

use crate::error::{ClpError, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to the second distribution inside [`kl_divergence`].
pub const KL_Q_FLOOR: f64 = 1e-10;

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(ClpError::Shape(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    if !logits.is_finite() {
        return Err(ClpError::NumericDomain("softmax input is not finite".into()));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(Real::NEG_INFINITY, Real::max);
            let mut total = 0.0f64;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e as f64;
            }
            for j in 0..len {
                out[at(j)] = (out[at(j)] as f64 / total) as Real;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// In-place softmax of one contiguous row; returns log of the normaliser
/// (the log-sum-exp of the row).
pub(crate) fn softmax_row(row: &mut [Real]) -> f64 {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / total) as Real;
    }
    max as f64 + total.ln()
}

/// `sum_j p_j ln(p_j / max(q_j, floor))`, with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(ClpError::Shape(format!(
            "kl_divergence over {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(kl_terms(p.data(), q.data()))
}

pub(crate) fn kl_terms(p: &[Real], q: &[Real]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| {
            let pj = pj as f64;
            pj * (pj.ln() - (qj as f64).max(KL_Q_FLOOR).ln())
        })
        .sum()
}
