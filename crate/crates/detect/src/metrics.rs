use std::cmp::Ordering;

use crate::{check_labels, DetectError, Result};

/// Area under the ROC curve: the probability that a random positive
/// (label 1) outscores a random negative (label 0), ties counting ½.
///
/// Computed from the Mann–Whitney rank sum with mid-ranks for ties, which
/// keeps every intermediate value a multiple of ½ and therefore exact.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (negatives, positives) = check_labels(labels, scores.len())?;
    if negatives == 0 || positives == 0 {
        return Err(DetectError::SingleClass { negatives, positives });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DetectError::Param("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut positive_rank_sum = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let tied_positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        positive_rank_sum += mid_rank * tied_positives as f64;
        start = end;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.8, 0.9, 0.1, 0.2], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(auroc(&[3.0; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(auroc(&[1.0, 2.0], &[1, 1]), Err(DetectError::SingleClass { .. })));
        assert!(matches!(auroc(&[], &[]), Err(DetectError::SingleClass { .. })));
        assert!(matches!(auroc(&[1.0], &[2]), Err(DetectError::Label(2))));
    }
}
