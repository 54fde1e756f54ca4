//! Evaluation metrics: ROC-AUC (Mann-Whitney rank form with average ranks
//! for ties) and thresholded accuracy.

#[derive(Debug, Clone, Default)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        assert_eq!(scores.len(), labels.len());
        Self { scores, labels }
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// ROC-AUC as the Mann-Whitney statistic P(s+ > s-) + 0.5 P(tie), computed
/// via ranks with average ranks assigned to tied scores. Returns None when
/// only one class is present (the metric is undefined, not zero).
pub fn auc(sl: &ScoredLabels) -> Option<f64> {
    let n = sl.len();
    let pos = sl.labels.iter().filter(|&&l| l == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| sl.scores[a].partial_cmp(&sl.scores[b]).unwrap());

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sl.scores[idx[j + 1]] == sl.scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i..=j] shares the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if sl.labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Fraction of items where (score >= threshold) agrees with the label.
/// A score exactly at the threshold counts as predicted-positive.
/// None on empty input.
pub fn accuracy(sl: &ScoredLabels, threshold: f64) -> Option<f64> {
    if sl.is_empty() {
        return None;
    }
    let correct = sl
        .scores
        .iter()
        .zip(&sl.labels)
        .filter(|&(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Some(correct as f64 / sl.len() as f64)
}
