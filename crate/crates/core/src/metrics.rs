//! Classification and uncertainty metrics on predicted class probabilities.

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Default number of equal-width confidence bins for [`ece`].
pub const DEFAULT_ECE_BINS: usize = 15;
/// Probabilities are clamped to at least this before taking logs in [`nll`].
pub const NLL_CLAMP: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-8;

/// Predicted class probabilities with the true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    probs: Matrix,
    labels: Vec<usize>,
}

impl ProbTable {
    /// Rows must be non-negative and sum to 1 within `1e-8`.
    pub fn new(probs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if probs.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} probability rows for {} labels",
                probs.rows(),
                labels.len()
            )));
        }
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row(r);
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::validation(format!("row {r} has a negative or NaN probability")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::validation(format!("row {r} sums to {total}")));
            }
            if label >= probs.cols() {
                return Err(Error::validation(format!("label {label} out of range in row {r}")));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Predicted class and its probability for row `r`.
    pub fn top(&self, r: usize) -> (usize, f64) {
        argmax(self.probs.row(r))
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn non_empty(t: &ProbTable) -> Result<()> {
    if t.is_empty() {
        return Err(Error::validation("empty probability table"));
    }
    Ok(())
}

pub fn accuracy(t: &ProbTable) -> Result<f64> {
    non_empty(t)?;
    let correct = (0..t.len()).filter(|&r| t.top(r).0 == t.labels[r]).count();
    Ok(correct as f64 / t.len() as f64)
}

/// Mean negative log-probability of the true class.
pub fn nll(t: &ProbTable) -> Result<f64> {
    non_empty(t)?;
    let total: f64 = (0..t.len())
        .map(|r| -t.probs[(r, t.labels[r])].max(NLL_CLAMP).ln())
        .sum();
    Ok(total / t.len() as f64)
}

/// 1-based bin of a confidence in `(0, 1]` among `n` equal-width bins;
/// boundary values go to the lower bin and 0 to the first.
fn confidence_bin(conf: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut b = ((conf * nf).ceil() as usize).clamp(1, n);
    while b > 1 && conf <= (b - 1) as f64 / nf {
        b -= 1;
    }
    while b < n && conf > b as f64 / nf {
        b += 1;
    }
    b
}

/// Expected calibration error of the top-label confidence.
pub fn ece(t: &ProbTable, n_bins: usize) -> Result<f64> {
    non_empty(t)?;
    if n_bins == 0 {
        return Err(Error::validation("ECE needs at least one bin"));
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for r in 0..t.len() {
        let (pred, conf) = t.top(r);
        let b = confidence_bin(conf, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == t.labels[r] {
            correct[b] += 1;
        }
    }
    let n = t.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (correct[b] as f64 / c - conf_sum[b] / c).abs()
        })
        .sum())
}

/// Area under the ROC curve as the rank statistic
/// `P(score_pos > score_neg) + ½ P(tie)`.
pub fn auroc(scores: &[f64], is_positive: &[bool]) -> Result<f64> {
    if scores.len() != is_positive.len() {
        return Err(Error::validation(format!(
            "{} scores for {} labels",
            scores.len(),
            is_positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let n_pos = is_positive.iter().filter(|p| **p).count();
    let n_neg = is_positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation("AUROC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // mid-ranks (1-based) over groups of equal scores
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| is_positive[i]).count();
        pos_rank_sum += mid * pos_in_group as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[Vec<f64>], labels: &[usize]) -> ProbTable {
        ProbTable::new(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        assert_eq!(accuracy(&t).unwrap(), 1.0);
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1, 0]);
        assert_eq!(accuracy(&t).unwrap(), 0.0);
        let t = table(&[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4]], &[0, 1, 1]);
        assert!((accuracy(&t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // tie goes to class 0
        let t = table(&[vec![0.5, 0.5]], &[0]);
        assert_eq!(accuracy(&t).unwrap(), 1.0);
        let empty = ProbTable::new(Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(accuracy(&empty).is_err());
    }

    #[test]
    fn invalid_tables_are_rejected() {
        assert!(ProbTable::new(Matrix::from_rows(&[vec![0.5, 0.4]]).unwrap(), vec![0]).is_err());
        assert!(ProbTable::new(Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap(), vec![0]).is_err());
        assert!(ProbTable::new(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(), vec![2]).is_err());
    }

    #[test]
    fn nll_values() {
        let t = table(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        assert_eq!(nll(&t).unwrap(), 0.0);
        let e = (-1.0f64).exp();
        let t = table(&[vec![e, 1.0 - e]], &[0]);
        assert!((nll(&t).unwrap() - 1.0).abs() < 1e-15);
        let t = table(&[vec![0.5, 0.5], vec![0.75, 0.25]], &[0, 1]);
        assert!((nll(&t).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((nll(&t).unwrap() - 1.0397).abs() < 1e-4);
        let t = table(&[vec![1.0, 0.0]], &[1]);
        assert!((nll(&t).unwrap() + NLL_CLAMP.ln()).abs() < 1e-12);
    }

    #[test]
    fn ece_values() {
        let t = table(&[vec![0.8, 0.2]], &[0]);
        assert!((ece(&t, 15).unwrap() - 0.2).abs() < 1e-15);
        let t = table(&[vec![0.8, 0.2], vec![0.6, 0.4]], &[0, 1]);
        assert!((ece(&t, 15).unwrap() - 0.4).abs() < 1e-15);
        // perfectly calibrated: 4 rows at 0.75 confidence, 3 correct
        let rows = vec![vec![0.75, 0.25]; 4];
        let t = table(&rows, &[0, 0, 0, 1]);
        assert!(ece(&t, 10).unwrap().abs() < 1e-15);
        assert!(ece(&t, 0).is_err());
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(confidence_bin(0.0, 15), 1);
        assert_eq!(confidence_bin(1.0, 15), 15);
        assert_eq!(confidence_bin(0.5, 2), 1);
        assert_eq!(confidence_bin(0.2, 5), 1);
        assert_eq!(confidence_bin(0.6, 5), 3);
        assert_eq!(confidence_bin(0.600001, 5), 4);
        for n in 1..40 {
            for k in 1..=n {
                assert_eq!(confidence_bin(k as f64 / n as f64, n), k, "{k}/{n}");
            }
        }
    }

    #[test]
    fn auroc_values() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let pos = [true, true, false, false];
        assert_eq!(auroc(&s, &pos).unwrap(), 1.0);
        let s = [0.9, 0.3, 0.5, 0.1];
        assert_eq!(auroc(&s, &pos).unwrap(), 0.75);
        assert_eq!(auroc(&[0.4; 4], &pos).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((predictive_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert!((predictive_entropy(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    fn pair_count_auroc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (si, _) in scores.iter().zip(pos).filter(|(_, p)| **p) {
            for (sj, _) in scores.iter().zip(pos).filter(|(_, p)| !**p) {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    fn prob_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..30, 2usize..5).prop_flat_map(|(n, c)| {
            (
                prop::collection::vec(prop::collection::vec(0.01f64..1.0, c), n),
                prop::collection::vec(0..c, n),
            )
        })
    }

    fn normalize(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting((scores, pos) in scored()) {
            prop_assume!(pos.iter().any(|p| *p) && pos.iter().any(|p| !*p));
            let fast = auroc(&scores, &pos).unwrap();
            prop_assert!((fast - pair_count_auroc(&scores, &pos)).abs() < 1e-12);
        }

        #[test]
        fn auroc_is_invariant_to_monotone_transforms((scores, pos) in scored()) {
            prop_assume!(pos.iter().any(|p| *p) && pos.iter().any(|p| !*p));
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &pos).unwrap(), auroc(&mapped, &pos).unwrap());
        }

        #[test]
        fn one_bin_ece_is_accuracy_gap((rows, labels) in prob_rows()) {
            let t = table(&normalize(rows), &labels);
            let mean_conf = (0..t.len()).map(|r| t.top(r).1).sum::<f64>() / t.len() as f64;
            let gap = (accuracy(&t).unwrap() - mean_conf).abs();
            prop_assert!((ece(&t, 1).unwrap() - gap).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_range((rows, labels) in prob_rows()) {
            let t = table(&normalize(rows), &labels);
            let e = ece(&t, DEFAULT_ECE_BINS).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let a = accuracy(&t).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(nll(&t).unwrap() >= 0.0);
            for r in 0..t.len() {
                let h = predictive_entropy(t.probs().row(r));
                prop_assert!(h >= 0.0 && h <= (t.probs().cols() as f64).ln() + 1e-12);
            }
        }
    }
}
