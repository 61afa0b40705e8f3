//! ROC AUC, PR AUC and curve points.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Tie groups in descending score order as `(positives, negatives)`.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let idx = descending(scores);
    let mut groups = Vec::new();
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let (mut p, mut n) = (0, 0);
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                p += 1;
            } else {
                n += 1;
            }
            k += 1;
        }
        groups.push((p, n));
    }
    groups
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(format!("ROC AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    // Walk groups from the highest score; each positive in a group beats
    // every negative below it and ties with the negatives beside it.
    let mut below_neg = neg;
    let mut twice_wins: u128 = 0;
    for (p, n) in tie_groups(scores, labels) {
        below_neg -= n;
        twice_wins += (p as u128) * (2 * below_neg as u128 + n as u128);
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Area under the precision-recall step curve. Thresholds are taken at
/// each distinct score (tie groups enter together); each step contributes
/// its recall increment times the precision reached at that threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Undefined("PR AUC needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            area += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// ROC curve points `(fpr, tpr)` from (0, 0) to (1, 1), one per threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Undefined("ROC curve needs both classes".into()));
    }
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (p, n) in tie_groups(scores, labels) {
        tp += p as f64;
        fp += n as f64;
        pts.push((fp / neg, tp / pos));
    }
    Ok(pts)
}

/// Precision-recall points `(recall, precision)`, one per threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    if pos == 0.0 {
        return Err(Error::Undefined("PR curve needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    Ok(tie_groups(scores, labels)
        .into_iter()
        .map(|(p, n)| {
            tp += p as f64;
            fp += n as f64;
            (tp / pos, tp / (tp + fp))
        })
        .collect())
}

/// Pearson correlation of two equal-length streams.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::InvalidArgument("correlation needs two aligned streams of length >= 3".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a zero-variance stream".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
        assert_eq!(pr_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        let prev = pr_auc(&[0.3; 8], &[true, false, false, true, false, false, false, false]).unwrap();
        assert_eq!(prev, 0.25);
        assert!(pr_auc(&[0.3, 0.4], &[false, false]).is_err());
    }

    #[test]
    fn monotone_transform_keeps_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let l: Vec<bool> = s.iter().map(|&v| rng.random::<f64>() < v).collect();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
    }

    #[test]
    fn correlation_edges() {
        let a = [0.1, 0.5, 0.2, 0.9];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0; 4]).is_err());
    }

    fn scored() -> impl proptest::strategy::Strategy<Value = (Vec<f64>, Vec<bool>)> {
        use proptest::prelude::*;
        // Coarse scores so ties are common.
        (2usize..80).prop_flat_map(|n| {
            (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n))
                .prop_map(|(s, mut l)| {
                    l[0] = true;
                    l[1] = false;
                    (s.into_iter().map(|v| v as f64 / 11.0).collect(), l)
                })
        })
    }

    proptest::proptest! {
        #[test]
        fn roc_is_rank_based((s, l) in scored(), a in 0.1f64..5.0) {
            let auc = roc_auc(&s, &l).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&auc));
            let t: Vec<f64> = s.iter().map(|v| (a * v).exp() + v).collect();
            proptest::prop_assert_eq!(auc, roc_auc(&t, &l).unwrap());
            let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
            proptest::prop_assert!((roc_auc(&s, &flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
        }

        #[test]
        fn pr_auc_is_bounded_by_prevalence_and_one((s, l) in scored()) {
            let p = pr_auc(&s, &l).unwrap();
            let prevalence = l.iter().filter(|&&b| b).count() as f64 / l.len() as f64;
            proptest::prop_assert!(p <= 1.0 + 1e-12 && p > 0.0);
            // A constant score reaches exactly the prevalence.
            let flat = vec![0.5; l.len()];
            proptest::prop_assert!((pr_auc(&flat, &l).unwrap() - prevalence).abs() < 1e-12);
        }

        #[test]
        fn hybrid_endpoints_are_exact(r in proptest::collection::vec(0.0f64..1.0, 1..50), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = r.iter().map(|_| rng.random()).collect();
            proptest::prop_assert_eq!(crate::eval::hybrid_scores(&r, &m, 1.0).unwrap(), r.clone());
            proptest::prop_assert_eq!(crate::eval::hybrid_scores(&r, &m, 0.0).unwrap(), m);
        }
    }
}
