//! Prediction head and loss: a two-layer MLP over [h; x] followed by a
//! sigmoid, and matched-index binary cross-entropy over valid positions.

use rand_chacha::ChaCha8Rng;

use crate::embeddings::{sample_normal, INIT_STD};
use crate::matrix::{sigmoid, Matrix};
use crate::scalar::Scalar;

/// Probability clamp applied before logs in the loss.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// [d x 2d]
    pub w1: Matrix<T>,
    /// [d x d]
    pub w2: Matrix<T>,
    /// [d x 1]
    pub w: Matrix<T>,
    /// [d x 1]
    pub b1: Matrix<T>,
    /// [d x 1]
    pub b2: Matrix<T>,
    /// [1 x 1]
    pub b: Matrix<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: sample_normal(rng, d, 2 * d, INIT_STD),
            w2: sample_normal(rng, d, d, INIT_STD),
            w: sample_normal(rng, d, 1, INIT_STD),
            b1: Matrix::zeros(d, 1),
            b2: Matrix::zeros(d, 1),
            b: Matrix::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }
}

/// r = sigmoid(w' relu(W2 relu(W1 [h;x] + b1) + b2) + b), h first in the
/// concatenation.
pub fn predict<T: Scalar>(h: &[T], x: &[T], p: &HeadParams<T>) -> T {
    let d = p.dim();
    debug_assert_eq!(h.len(), d);
    debug_assert_eq!(x.len(), d);
    let mut a1 = vec![T::zero(); d];
    for r in 0..d {
        let mut acc = p.b1.get(r, 0);
        let row = p.w1.row(r);
        for c in 0..d {
            acc += row[c] * h[c] + row[d + c] * x[c];
        }
        a1[r] = acc.max(T::zero());
    }
    let mut a2 = vec![T::zero(); d];
    for r in 0..d {
        let mut acc = p.b2.get(r, 0);
        for (c, &v) in a1.iter().enumerate() {
            acc += p.w2.get(r, c) * v;
        }
        a2[r] = acc.max(T::zero());
    }
    let mut logit = p.b.get(0, 0);
    for (r, &v) in a2.iter().enumerate() {
        logit += p.w.get(r, 0) * v;
    }
    sigmoid(logit)
}

/// Mean binary cross-entropy over valid positions; predictions are clamped
/// to [1e-7, 1-1e-7] before the logs. Returns 0 when nothing is valid.
pub fn bce_loss<T: Scalar>(preds: &[T], labels: &[u8], valid: &[bool]) -> T {
    debug_assert_eq!(preds.len(), labels.len());
    debug_assert_eq!(preds.len(), valid.len());
    let lo = T::from_f64(PRED_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..preds.len() {
        if !valid[i] {
            continue;
        }
        let p = preds[i].max(lo).min(hi);
        let term = if labels[i] == 1 { p.ln() } else { (T::one() - p).ln() };
        total -= term;
        count += 1;
    }
    if count == 0 {
        T::zero()
    } else {
        total / T::from_usize(count)
    }
}
