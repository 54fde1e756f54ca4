//! Causal attention with k-sparse selection.
//!
//! Scores for query position t+1 are softmax(x_{t+1} · x_i / sqrt(d)) over
//! history positions i <= t. A selection rule (soft threshold on the
//! descending cumulative sum, or top-k by value) picks a subset, and the
//! surviving scores are renormalized — by a second softmax over the selected
//! score values (the default) or by dividing by their sum — before weighting
//! the interaction vectors y_i.
//!
//! This module holds the pure single-row/single-sequence reference path;
//! the trainable batched path in `model` must agree with it exactly.

use crate::error::{Error, Result};
use crate::matrix::{softmax_masked, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseMode {
    Soft,
    TopK,
    Dense,
}

impl SparseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SparseMode::Soft => "soft",
            SparseMode::TopK => "topk",
            SparseMode::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(SparseMode::Soft),
            "topk" => Ok(SparseMode::TopK),
            "dense" => Ok(SparseMode::Dense),
            other => Err(Error::Usage(format!("unknown sparse mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Renorm {
    /// Second softmax over the selected score values (the literal formula).
    Resoftmax,
    /// Divide selected scores by their sum.
    Sumnorm,
}

impl Renorm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Renorm::Resoftmax => "resoftmax",
            Renorm::Sumnorm => "sumnorm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resoftmax" => Ok(Renorm::Resoftmax),
            "sumnorm" => Ok(Renorm::Sumnorm),
            other => Err(Error::Usage(format!("unknown renorm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseConfig<T> {
    pub mode: SparseMode,
    /// Soft: threshold in (0,1]. TopK: positive integer count. Ignored for
    /// dense.
    pub k: T,
    pub renorm: Renorm,
}

impl<T: Scalar> SparseConfig<T> {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SparseMode::Soft => {
                if !(self.k > T::zero() && self.k <= T::one()) {
                    return Err(Error::Usage(format!(
                        "soft threshold k must be in (0,1], got {}",
                        self.k
                    )));
                }
            }
            SparseMode::TopK => {
                if self.k < T::one() || self.k.fract() != T::zero() {
                    return Err(Error::Usage(format!(
                        "topk k must be a positive integer, got {}",
                        self.k
                    )));
                }
            }
            SparseMode::Dense => {}
        }
        Ok(())
    }

    pub fn topk_k(&self) -> usize {
        self.k.to_f64() as usize
    }
}

impl Default for SparseConfig<f64> {
    fn default() -> Self {
        Self { mode: SparseMode::Soft, k: 0.7, renorm: Renorm::Resoftmax }
    }
}

/// One query row of the attention computation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow<T> {
    /// Probability vector over history positions (the row of I).
    pub scores: Vec<T>,
    pub selected: Vec<bool>,
    /// Final probability vector: zero wherever unselected.
    pub weights: Vec<T>,
}

/// softmax(x_query · x_i / sqrt(d)) over history rows. None when there is
/// no history (the caller substitutes a zero knowledge state).
pub fn attention_scores<T: Scalar>(x_query: &[T], x_hist: &Matrix<T>) -> Option<Vec<T>> {
    let t = x_hist.rows();
    if t == 0 {
        return None;
    }
    debug_assert_eq!(x_query.len(), x_hist.cols());
    let scale = T::one() / T::from_usize(x_query.len()).sqrt();
    let raw: Vec<T> = (0..t)
        .map(|i| {
            let mut dot = T::zero();
            for (a, b) in x_query.iter().zip(x_hist.row(i)) {
                dot += *a * *b;
            }
            dot * scale
        })
        .collect();
    let mask = vec![true; t];
    Some(softmax_masked(&raw, &mask))
}

/// Select the shortest descending-order prefix whose cumulative sum strictly
/// exceeds k; if the total never exceeds k (k = 1 up to rounding), select
/// everything. Ties are broken by position, so selection is deterministic.
pub fn mask_soft<T: Scalar>(scores: &[T], k: T) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut selected = vec![false; scores.len()];
    let mut cum = T::zero();
    let mut exceeded = false;
    for &i in &order {
        selected[i] = true;
        cum += scores[i];
        if cum > k {
            exceeded = true;
            break;
        }
    }
    if !exceeded {
        for s in &mut selected {
            *s = true;
        }
    }
    selected
}

/// Select scores >= the k-th largest value. When k >= len everything is
/// selected; ties at the threshold may select more than k entries.
pub fn mask_topk<T: Scalar>(scores: &[T], k: usize) -> Vec<bool> {
    assert!(k >= 1);
    if k >= scores.len() {
        return vec![true; scores.len()];
    }
    let mut sorted: Vec<T> = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let s = sorted[k - 1];
    scores.iter().map(|&v| v >= s).collect()
}

pub(crate) fn select_row<T: Scalar>(scores: &[T], cfg: &SparseConfig<T>) -> Vec<bool> {
    match cfg.mode {
        SparseMode::Soft => mask_soft(scores, cfg.k),
        SparseMode::TopK => mask_topk(scores, cfg.topk_k()),
        SparseMode::Dense => vec![true; scores.len()],
    }
}

/// Renormalize the selected scores and mix the history rows:
/// h = sum_i weights_i * y_i.
pub fn sparse_output<T: Scalar>(
    scores: &[T],
    selected: &[bool],
    y_hist: &Matrix<T>,
    renorm: Renorm,
) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(scores.len(), selected.len());
    debug_assert_eq!(scores.len(), y_hist.rows());
    debug_assert!(selected.iter().any(|&s| s), "selection must be non-empty");
    let weights = match renorm {
        Renorm::Resoftmax => softmax_masked(scores, selected),
        Renorm::Sumnorm => {
            let mut sum = T::zero();
            for (v, &s) in scores.iter().zip(selected) {
                if s {
                    sum += *v;
                }
            }
            scores
                .iter()
                .zip(selected)
                .map(|(&v, &s)| if s { v / sum } else { T::zero() })
                .collect()
        }
    };
    let d = y_hist.cols();
    let mut h = vec![T::zero(); d];
    for (i, &w) in weights.iter().enumerate() {
        if w != T::zero() {
            for (hv, &yv) in h.iter_mut().zip(y_hist.row(i)) {
                *hv += w * yv;
            }
        }
    }
    (h, weights)
}

/// Full sparse attention for one query over its history.
pub fn sparse_attention_row<T: Scalar>(
    x_query: &[T],
    x_hist: &Matrix<T>,
    y_hist: &Matrix<T>,
    cfg: &SparseConfig<T>,
) -> Option<(Vec<T>, AttentionRow<T>)> {
    let scores = attention_scores(x_query, x_hist)?;
    let selected = select_row(&scores, cfg);
    let (h, weights) = sparse_output(&scores, &selected, y_hist, cfg.renorm);
    Some((h, AttentionRow { scores, selected, weights }))
}

/// Reference (non-differentiable) causal attention over a whole sequence:
/// H[p] attends over rows 0..p restricted to the valid prefix; row 0 and
/// invalid rows are zero.
pub fn causal_attention<T: Scalar>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    valid: &[bool],
    cfg: &SparseConfig<T>,
) -> Result<Matrix<T>> {
    if x.rows() != y.rows() || x.cols() != y.cols() || valid.len() != x.rows() {
        return Err(Error::Shape("causal attention operand shapes disagree".into()));
    }
    cfg.validate()?;
    let (l, d) = (x.rows(), x.cols());
    let mut h = Matrix::zeros(l, d);
    for p in 1..l {
        if !valid[p] {
            continue;
        }
        let hist: Vec<usize> = (0..p).filter(|&j| valid[j]).collect();
        if hist.is_empty() {
            continue;
        }
        let mut xh = Matrix::zeros(hist.len(), d);
        let mut yh = Matrix::zeros(hist.len(), d);
        for (r, &j) in hist.iter().enumerate() {
            xh.row_mut(r).copy_from_slice(x.row(j));
            yh.row_mut(r).copy_from_slice(y.row(j));
        }
        if let Some((hv, _)) = sparse_attention_row(x.row(p), &xh, &yh, cfg) {
            h.row_mut(p).copy_from_slice(&hv);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: SparseMode, k: f64, renorm: Renorm) -> SparseConfig<f64> {
        SparseConfig { mode, k, renorm }
    }

    #[test]
    fn orthogonal_history_gets_uniform_scores() {
        let q: Vec<f64> = vec![1.0, 0.0, 0.0];
        let hist =
            Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 2.0, 2.0]])
                .unwrap();
        let s = attention_scores(&q, &hist).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_history_item_takes_all_mass() {
        let hist = Matrix::from_rows(&[vec![-9.0, 4.0]]).unwrap();
        let s = attention_scores(&[0.3, 0.7], &hist).unwrap();
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn no_history_signals_none() {
        let hist = Matrix::<f64>::zeros(0, 2);
        assert!(attention_scores(&[1.0, 1.0], &hist).is_none());
    }

    #[test]
    fn one_dimensional_example() {
        let hist = Matrix::<f64>::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let s = attention_scores(&[1.0], &hist).unwrap();
        assert!((s[0] - 0.7311).abs() < 1e-4);
        assert!((s[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn soft_mask_prefix_rule() {
        let sel = mask_soft(&[0.5, 0.3, 0.2], 0.7);
        assert_eq!(sel, vec![true, true, false]);
        let sel = mask_soft(&[0.5, 0.3, 0.2], 0.1);
        assert_eq!(sel, vec![true, false, false]);
        // k=1.0: the cumulative sum of a probability vector never strictly
        // exceeds 1, so everything is selected
        let sel = mask_soft(&[0.5, 0.3, 0.2], 1.0);
        assert_eq!(sel, vec![true, true, true]);
    }

    #[test]
    fn soft_mask_unordered_input() {
        let sel = mask_soft(&[0.2, 0.5, 0.3], 0.7);
        assert_eq!(sel, vec![false, true, true]);
    }

    #[test]
    fn topk_mask_rule_and_ties() {
        assert_eq!(mask_topk(&[0.5, 0.3, 0.2], 2), vec![true, true, false]);
        assert_eq!(mask_topk(&[0.5, 0.3, 0.2], 10), vec![true, true, true]);
        // tie at the threshold over-selects
        assert_eq!(mask_topk(&[0.4, 0.3, 0.3], 2), vec![true, true, true]);
    }

    #[test]
    fn sparse_output_examples() {
        let y = Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])
            .unwrap();
        let scores = [0.5f64, 0.3, 0.2];
        let sel = [true, true, false];

        let (h, w) = sparse_output(&scores, &sel, &y, Renorm::Resoftmax);
        assert!((w[0] - 0.549834).abs() < 1e-6);
        assert!((w[1] - 0.450166).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
        assert!((h[0] - w[0]).abs() < 1e-15);
        assert!((h[1] - w[1]).abs() < 1e-15);

        let (_h, w) = sparse_output(&scores, &sel, &y, Renorm::Sumnorm);
        assert!((w[0] - 0.625).abs() < 1e-12);
        assert!((w[1] - 0.375).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn singleton_selection_copies_that_row() {
        let y = Matrix::from_rows(&[vec![3.0, -1.0], vec![7.0, 2.0]]).unwrap();
        let (h, w) = sparse_output(&[0.9, 0.1], &[false, true], &y, Renorm::Resoftmax);
        assert_eq!(w, vec![0.0, 1.0]);
        assert_eq!(h, vec![7.0, 2.0]);
    }

    #[test]
    fn causal_attention_zeroes_first_and_invalid_rows() {
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.1], vec![0.2, 0.2]]).unwrap();
        let y = x.clone();
        let h = causal_attention(&x, &y, &[true, true, false], &SparseConfig::default())
            .unwrap();
        assert!(h.row(0).iter().all(|&v| v == 0.0));
        assert!(h.row(1).iter().any(|&v| v != 0.0));
        assert!(h.row(2).iter().all(|&v| v == 0.0));

        let single = causal_attention(
            &Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            &Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            &[true],
            &SparseConfig::default(),
        )
        .unwrap();
        assert!(single.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_equals_large_topk_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = 3;
        let data = |rng: &mut ChaCha8Rng| {
            Matrix::new(l, 4, (0..l * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = data(&mut rng);
        let y = data(&mut rng);
        let valid = vec![true; l];
        for renorm in [Renorm::Resoftmax, Renorm::Sumnorm] {
            let hd =
                causal_attention(&x, &y, &valid, &cfg(SparseMode::Dense, 0.0, renorm)).unwrap();
            let ht =
                causal_attention(&x, &y, &valid, &cfg(SparseMode::TopK, 10.0, renorm)).unwrap();
            for (a, b) in hd.data().iter().zip(ht.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(SparseMode::Soft, 0.7, Renorm::Resoftmax).validate().is_ok());
        assert!(cfg(SparseMode::Soft, 0.0, Renorm::Resoftmax).validate().is_err());
        assert!(cfg(SparseMode::Soft, 1.2, Renorm::Resoftmax).validate().is_err());
        assert!(cfg(SparseMode::TopK, 3.0, Renorm::Resoftmax).validate().is_ok());
        assert!(cfg(SparseMode::TopK, 2.5, Renorm::Resoftmax).validate().is_err());
        assert!(cfg(SparseMode::TopK, 0.0, Renorm::Resoftmax).validate().is_err());
    }

    proptest! {
        #[test]
        fn soft_selection_satisfies_the_budget(
            raw in proptest::collection::vec(0.01f64..1.0, 1..30),
            k in 0.05f64..0.95,
        ) {
            let total: f64 = raw.iter().sum();
            let scores: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let sel = mask_soft(&scores, k);
            let sum_sel: f64 = scores.iter().zip(&sel).filter(|(_, &s)| s).map(|(&v, _)| v).sum();
            if sel.iter().all(|&s| s) {
                // either the rule exceeded k with the full set, or it never
                // exceeded k at all; both are legal full selections
            } else {
                prop_assert!(sum_sel > k);
                // removing the smallest selected score drops the sum to <= k
                let min_sel = scores
                    .iter()
                    .zip(&sel)
                    .filter(|(_, &s)| s)
                    .map(|(&v, _)| v)
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(sum_sel - min_sel <= k + 1e-12);
            }
        }

        #[test]
        fn topk_selects_exactly_k_without_ties(
            seed in 0u64..1000,
            len in 2usize..30,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            scores.dedup();
            let k = rng.gen_range(1..=scores.len());
            let sel = mask_topk(&scores, k);
            prop_assert_eq!(sel.iter().filter(|&&s| s).count(), k.min(scores.len()));
        }

        #[test]
        fn weights_are_probability_vectors_supported_on_the_selection(
            raw in proptest::collection::vec(0.01f64..1.0, 2..20),
            k in 0.1f64..1.0,
            use_sumnorm in proptest::bool::ANY,
        ) {
            let total: f64 = raw.iter().sum();
            let scores: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let sel = mask_soft(&scores, k);
            let y = Matrix::<f64>::zeros(scores.len(), 3);
            let renorm = if use_sumnorm { Renorm::Sumnorm } else { Renorm::Resoftmax };
            let (_h, w) = sparse_output(&scores, &sel, &y, renorm);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (wv, s) in w.iter().zip(&sel) {
                if !s {
                    prop_assert_eq!(*wv, 0.0);
                } else {
                    prop_assert!(*wv > 0.0);
                }
            }
        }
    }
}
