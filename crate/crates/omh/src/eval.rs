//! Unsupervised-segmentation metrics: predicted clusters are matched to
//! ground-truth classes by an exact Hungarian assignment, then scored by
//! accuracy and mean IoU.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {label} out of range (max {max})")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("prediction/truth length mismatch: {preds} vs {truths}")]
    LengthMismatch { preds: usize, truths: usize },
}

/// Counts of (predicted cluster, true class) pairs. Rows are predicted
/// clusters, columns true classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    k_pred: usize,
    k_true: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k_pred: usize, k_true: usize) -> Self {
        Self { k_pred, k_true, counts: vec![0; k_pred * k_true] }
    }

    pub fn from_labels(
        preds: &[usize],
        truths: &[usize],
        k_pred: usize,
        k_true: usize,
    ) -> Result<Self, EvalError> {
        if preds.len() != truths.len() {
            return Err(EvalError::LengthMismatch { preds: preds.len(), truths: truths.len() });
        }
        let mut cm = Self::new(k_pred, k_true);
        for (&p, &t) in preds.iter().zip(truths) {
            cm.record(p, t)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, pred: usize, truth: usize) -> Result<(), EvalError> {
        if pred >= self.k_pred {
            return Err(EvalError::LabelOutOfRange { label: pred, max: self.k_pred - 1 });
        }
        if truth >= self.k_true {
            return Err(EvalError::LabelOutOfRange { label: truth, max: self.k_true - 1 });
        }
        self.counts[pred * self.k_true + truth] += 1;
        Ok(())
    }

    /// Associative merge; accumulation across images is order-independent.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!((self.k_pred, self.k_true), (other.k_pred, other.k_true));
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.k_true + truth]
    }

    pub fn k_pred(&self) -> usize {
        self.k_pred
    }

    pub fn k_true(&self) -> usize {
        self.k_true
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, pred: usize) -> u64 {
        (0..self.k_true).map(|t| self.get(pred, t)).sum()
    }

    pub fn col_sum(&self, truth: usize) -> u64 {
        (0..self.k_pred).map(|p| self.get(p, truth)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.k_pred)
            .map(|p| (0..self.k_true).map(|t| self.get(p, t)).collect())
            .collect()
    }
}

/// Injective map from predicted cluster to true class; `None` marks clusters
/// left unmatched (they count entirely as errors).
pub type Assignment = Vec<Option<usize>>;

/// Optimal assignment maximizing the total matched count, computed by the
/// exact O(K^3) augmenting-path algorithm with dual potentials. The matrix is
/// padded square with zero counts, so rectangular shapes work on both sides.
pub fn hungarian_match(cm: &ConfusionMatrix) -> Assignment {
    let n = cm.k_pred().max(cm.k_true());
    if n == 0 {
        return Vec::new();
    }
    let max_count = (0..cm.k_pred())
        .flat_map(|p| (0..cm.k_true()).map(move |t| cm.get(p, t)))
        .max()
        .unwrap_or(0) as i64;
    // Maximizing the matched count == minimizing (max_count - count).
    let cost = |p: usize, t: usize| -> i64 {
        if p < cm.k_pred() && t < cm.k_true() {
            max_count - cm.get(p, t) as i64
        } else {
            max_count
        }
    };

    // Dual-potential shortest augmenting path; rows/columns are 1-indexed
    // with index 0 as the virtual source.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; cm.k_pred()];
    for j in 1..=n {
        let row = matched_row[j];
        if row >= 1 && row - 1 < cm.k_pred() && j - 1 < cm.k_true() {
            assignment[row - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Total count landing on matched (pred, true) pairs under an assignment.
pub fn matched_count(cm: &ConfusionMatrix, assignment: &Assignment) -> u64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| cm.get(p, t)))
        .sum()
}

/// Fraction of locations on matched pairs. Unmatched predicted clusters
/// contribute only errors.
pub fn accuracy(cm: &ConfusionMatrix, assignment: &Assignment) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    matched_count(cm, assignment) as f64 / total as f64
}

/// Mean intersection-over-union across true classes under the assignment.
/// Classes with zero ground-truth support are excluded from the mean.
pub fn miou(cm: &ConfusionMatrix, assignment: &Assignment) -> f64 {
    let mut sum = 0.0;
    let mut classes = 0usize;
    for t in 0..cm.k_true() {
        let support = cm.col_sum(t);
        if support == 0 {
            continue;
        }
        classes += 1;
        let pred = assignment.iter().position(|&a| a == Some(t));
        let iou = match pred {
            Some(p) => {
                let tp = cm.get(p, t);
                let fp = cm.row_sum(p) - tp;
                let fnn = support - tp;
                let denom = tp + fp + fnn;
                if denom == 0 {
                    0.0
                } else {
                    tp as f64 / denom as f64
                }
            }
            None => 0.0,
        };
        sum += iou;
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm_of(rows: &[&[u64]]) -> ConfusionMatrix {
        let k_pred = rows.len();
        let k_true = rows[0].len();
        let mut cm = ConfusionMatrix::new(k_pred, k_true);
        for (p, row) in rows.iter().enumerate() {
            for (t, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    cm.record(p, t).unwrap();
                }
            }
        }
        cm
    }

    #[test]
    fn hungarian_prefers_dominant_diagonal() {
        let cm = cm_of(&[&[5, 1], &[0, 4]]);
        assert_eq!(hungarian_match(&cm), vec![Some(0), Some(1)]);
    }

    #[test]
    fn hungarian_single_cell() {
        let cm = cm_of(&[&[7]]);
        assert_eq!(hungarian_match(&cm), vec![Some(0)]);
    }

    #[test]
    fn hungarian_antidiagonal() {
        let cm = cm_of(&[&[0, 3], &[3, 0]]);
        assert_eq!(hungarian_match(&cm), vec![Some(1), Some(0)]);
    }

    #[test]
    fn hungarian_leaves_extra_clusters_unmatched() {
        let cm = cm_of(&[&[0, 9], &[8, 0], &[1, 1]]);
        let assignment = hungarian_match(&cm);
        assert_eq!(assignment, vec![Some(1), Some(0), None]);
        assert_eq!(matched_count(&cm, &assignment), 17);
    }

    #[test]
    fn metrics_hand_example() {
        let cm = cm_of(&[&[5, 1], &[0, 4]]);
        let assignment = vec![Some(0), Some(1)];
        assert!((accuracy(&cm, &assignment) - 0.9).abs() < 1e-15);
        let expected = (5.0 / 6.0 + 4.0 / 5.0) / 2.0;
        assert!((miou(&cm, &assignment) - expected).abs() < 1e-15);
    }

    #[test]
    fn metrics_perfect_diagonal() {
        let cm = cm_of(&[&[4, 0], &[0, 6]]);
        let assignment = hungarian_match(&cm);
        assert_eq!(accuracy(&cm, &assignment), 1.0);
        assert_eq!(miou(&cm, &assignment), 1.0);
    }

    #[test]
    fn metrics_uniform_confusion() {
        let cm = cm_of(&[&[3, 3], &[3, 3]]);
        let assignment = hungarian_match(&cm);
        assert!((accuracy(&cm, &assignment) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn miou_excludes_empty_classes() {
        // Second true class has zero support and must not drag the mean down.
        let cm = cm_of(&[&[4, 0], &[1, 0]]);
        let assignment = vec![Some(0), None];
        assert!((miou(&cm, &assignment) - 4.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn optimal_accuracy_beats_chance_on_balanced_truth() {
        // With balanced ground truth, the best assignment is at least as good
        // as the average over cyclic relabelings, which is exactly 1/K.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..50 {
            let k = 2 + (next() % 5) as usize;
            let per_class = 40u64;
            let mut cm = ConfusionMatrix::new(k, k);
            for t in 0..k {
                // Spread this class's fixed support randomly over predictions.
                let mut remaining = per_class;
                for p in 0..k {
                    let take = if p + 1 == k { remaining } else { next() % (remaining + 1) };
                    for _ in 0..take {
                        cm.record(p, t).unwrap();
                    }
                    remaining -= take;
                }
            }
            let assignment = hungarian_match(&cm);
            let acc = accuracy(&cm, &assignment);
            assert!(acc >= 1.0 / k as f64 - 1e-12, "accuracy {acc} below 1/{k}");
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        let cm = cm_of(&[&[5, 1, 0], &[0, 4, 2], &[1, 0, 6]]);
        let assignment = hungarian_match(&cm);
        let acc = accuracy(&cm, &assignment);
        let iou = miou(&cm, &assignment);

        // Swap predicted rows 0 and 2 and permute the assignment the same way.
        let permuted = cm_of(&[&[1, 0, 6], &[0, 4, 2], &[5, 1, 0]]);
        let swapped = vec![assignment[2], assignment[1], assignment[0]];
        assert!((accuracy(&permuted, &swapped) - acc).abs() < 1e-15);
        assert!((miou(&permuted, &swapped) - iou).abs() < 1e-15);
    }
}
