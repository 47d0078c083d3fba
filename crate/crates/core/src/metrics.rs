//! Forensic evaluation metrics and the silhouette separability score.

use std::collections::BTreeMap;

use crate::error::{GsdError, Result};
use crate::linalg::DenseMatrix;

fn check_binary(labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(GsdError::Validation(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
///
/// Computed from tie-averaged ranks held as doubled integers, so the result equals the
/// brute-force pair count `(2·wins + ties) / (2·P·N)` exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GsdError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GsdError::Validation("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(GsdError::UndefinedMetric(
            "ROC AUC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum over positives of twice their (1-based, tie-averaged) rank.
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, doubled average = start + 1 + end
        let doubled = (start + 1 + end) as u64;
        let pos_in_run = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled * pos_in_run;
        start = end;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg) as f64)
}

/// Per-group mean score, group label, and group id, ordered by group id.
pub fn group_means(scores: &[f64], labels: &[u8], groups: &[usize]) -> Result<Vec<(usize, f64, u8)>> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return Err(GsdError::Shape(format!(
            "{} scores, {} labels, {} groups",
            scores.len(),
            labels.len(),
            groups.len()
        )));
    }
    check_binary(labels)?;
    let mut acc: BTreeMap<usize, (f64, usize, u8)> = BTreeMap::new();
    for ((&s, &l), &g) in scores.iter().zip(labels).zip(groups) {
        let e = acc.entry(g).or_insert((0.0, 0, l));
        if e.2 != l {
            return Err(GsdError::Validation(format!("group {g} mixes labels")));
        }
        e.0 += s;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(g, (sum, n, l))| (g, sum / n as f64, l))
        .collect())
}

/// ROC AUC over per-group mean scores (the video-level analog).
pub fn group_auc(scores: &[f64], labels: &[u8], groups: &[usize]) -> Result<f64> {
    let means = group_means(scores, labels, groups)?;
    let s: Vec<f64> = means.iter().map(|m| m.1).collect();
    let l: Vec<u8> = means.iter().map(|m| m.2).collect();
    roc_auc(&s, &l)
}

/// Fraction correct when predicting fake for `sigmoid(logit) > 0.5`; a zero logit is real.
pub fn accuracy(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(GsdError::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    check_binary(labels)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &l)| (z > 0.0) == (l == 1))
        .count();
    Ok(correct as f64 / logits.len() as f64)
}

/// Mean silhouette with Euclidean distances; singleton clusters contribute 0.
pub fn silhouette(features: &DenseMatrix, clusters: &[usize]) -> Result<f64> {
    let n = features.rows();
    if clusters.len() != n {
        return Err(GsdError::Shape(format!(
            "{} cluster labels for {} points",
            clusters.len(),
            n
        )));
    }
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(GsdError::UndefinedMetric(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let index_of = |c: usize| ids.binary_search(&c).expect("present");
    let sizes = {
        let mut s = vec![0usize; ids.len()];
        for &c in clusters {
            s[index_of(c)] += 1;
        }
        s
    };

    let mut total = 0.0;
    let mut sums = vec![0.0; ids.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|v| *v = 0.0);
        let xi = features.row(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = xi
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sums[index_of(clusters[j])] += d2.sqrt();
        }
        let own = index_of(clusters[i]);
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.2, 0.8, 0.3], &[1, 0, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn auc_errors() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(GsdError::UndefinedMetric(_))
        ));
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 2]),
            Err(GsdError::Validation(_))
        ));
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn group_auc_examples() {
        let s = [0.9, 0.2, 0.8, 0.3];
        let l = [1, 0, 0, 1];
        let g = [0, 1, 2, 3];
        assert_eq!(group_auc(&s, &l, &g).unwrap(), roc_auc(&s, &l).unwrap());

        let s = [0.4, 0.6, 0.1, 0.3];
        let l = [1, 1, 0, 0];
        let g = [7, 7, 3, 3];
        assert_eq!(group_auc(&s, &l, &g).unwrap(), 1.0);
        let s2 = [0.6, 0.4, 0.3, 0.1];
        assert_eq!(group_auc(&s2, &l, &g).unwrap(), 1.0);

        assert!(matches!(
            group_auc(&[0.1, 0.2], &[1, 0], &[0, 0]),
            Err(GsdError::Validation(_))
        ));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[2.0, -1.0], &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.0], &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.0], &[1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[5.0, 5.0], &[1, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn silhouette_two_tight_clusters() {
        let f = DenseMatrix::from_rows(&[[0.0], [0.1], [10.0], [10.1]]).unwrap();
        let s = silhouette(&f, &[0, 0, 1, 1]).unwrap();
        // point 0: a = 0.1, b = 10.05; point 1: a = 0.1, b = 9.95; symmetric for the rest
        let oracle = ((10.05 - 0.1) / 10.05 + (9.95 - 0.1) / 9.95) / 2.0;
        assert!((s - oracle).abs() < 1e-12);
        assert!((s - 0.99).abs() < 1e-4);
        let relabeled = silhouette(&f, &[5, 5, 2, 2]).unwrap();
        assert_eq!(s, relabeled);
    }

    #[test]
    fn silhouette_overlapping_clusters() {
        let f = DenseMatrix::from_rows(&[[0.0], [1.0], [0.0], [1.0]]).unwrap();
        let s = silhouette(&f, &[0, 0, 1, 1]).unwrap();
        assert!(s <= 1e-12);
        assert!(matches!(
            silhouette(&f, &[0, 0, 0, 0]),
            Err(GsdError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn silhouette_singletons_score_zero() {
        let f = DenseMatrix::from_rows(&[[0.0], [5.0], [5.1]]).unwrap();
        let s = silhouette(&f, &[0, 1, 1]).unwrap();
        let p1 = (5.0 - 0.1) / 5.0;
        let p2 = (5.1 - 0.1) / 5.1;
        assert!((s - (p1 + p2) / 3.0).abs() < 1e-12);
    }
}
