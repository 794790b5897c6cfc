//! Evaluation metrics: accuracy and macro-F1 for classification, AUC, MRR
//! and nDCG@k for ranking.
//!
//! Tie handling is explicit everywhere: AUC gives ties half credit
//! (Mann-Whitney), rank sorts are stable with ties broken by original
//! index. Impressions lacking a label class are excluded from ranking
//! averages and counted.

use crate::error::{CoreError, Result};
use alloc::vec::Vec;

/// One scored impression: parallel scores and binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedImpression {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankedImpression {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(CoreError::Contract(
                "impression needs equal-length, nonempty scores and labels".into(),
            ));
        }
        Ok(RankedImpression { scores, labels })
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.iter().any(|&l| l) && self.labels.iter().any(|&l| !l)
    }

    fn has_positive(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }

    /// Indices sorted by descending score, stable (ties keep input order).
    fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        order
    }
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(CoreError::Contract(
            "accuracy needs equal-length, nonempty inputs".into(),
        ));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean over classes of per-class F1. A class with no predicted
/// and no true instances contributes F1 = 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() || num_classes == 0 {
        return Err(CoreError::Contract(
            "macro_f1 needs equal-length, nonempty inputs and classes".into(),
        ));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&v| v >= num_classes) {
        return Err(CoreError::Input(alloc::format!(
            "class {bad} outside 0..{num_classes}"
        )));
    }
    let mut tp = alloc::vec![0usize; num_classes];
    let mut fp = alloc::vec![0usize; num_classes];
    let mut fng = alloc::vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fng[l] += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fng[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(sum / num_classes as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counted half (Mann-Whitney, computed via the rank-sum statistic).
/// Undefined without both classes.
pub fn auc(imp: &RankedImpression) -> Result<f64> {
    if !imp.has_both_classes() {
        return Err(CoreError::Input(
            "auc undefined without both label classes".into(),
        ));
    }
    let n = imp.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        imp.scores[a]
            .partial_cmp(&imp.scores[b])
            .expect("scores are finite")
    });
    // fractional ranks, 1-based, ties averaged
    let mut ranks = alloc::vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && imp.scores[order[j + 1]] == imp.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let n_pos = imp.labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    let rank_sum: f64 = (0..n).filter(|&i| imp.labels[i]).map(|i| ranks[i]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean over positives of the reciprocal of their 1-based rank in the
/// stable score-descending order.
pub fn mrr(imp: &RankedImpression) -> Result<f64> {
    if !imp.has_positive() {
        return Err(CoreError::Input("mrr undefined without a positive".into()));
    }
    let order = imp.ranking();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (rank0, &idx) in order.iter().enumerate() {
        if imp.labels[idx] {
            sum += 1.0 / (rank0 + 1) as f64;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Normalized discounted cumulative gain at cutoff `k` with binary gains:
/// `DCG = sum_{r<=k} label_r / log2(r + 1)` over the stable score-sorted
/// order, normalized by the ideal DCG.
pub fn ndcg_at_k(imp: &RankedImpression, k: usize) -> Result<f64> {
    if !imp.has_positive() {
        return Err(CoreError::Input("ndcg undefined without a positive".into()));
    }
    if k == 0 {
        return Err(CoreError::Contract("ndcg needs k >= 1".into()));
    }
    let order = imp.ranking();
    let discount = |rank0: usize| 1.0 / libm::log2((rank0 + 2) as f64);
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &idx)| imp.labels[idx])
        .map(|(rank0, _)| discount(rank0))
        .sum();
    let n_pos = imp.labels.iter().filter(|&&l| l).count();
    let ideal: f64 = (0..n_pos.min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

/// A metric value aggregated over impressions: the unweighted mean over
/// valid instances, with the invalid ones counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub value: f64,
    pub n_instances: usize,
    pub n_excluded: usize,
}

/// Apply a per-impression metric over a dataset, excluding impressions the
/// metric is undefined for.
pub fn aggregate(
    impressions: &[RankedImpression],
    metric: impl Fn(&RankedImpression) -> Result<f64>,
) -> Result<MetricReport> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for imp in impressions {
        match metric(imp) {
            Ok(v) => {
                sum += v;
                n += 1;
            }
            Err(CoreError::Input(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(CoreError::Input(
            "no impression had the metric defined".into(),
        ));
    }
    Ok(MetricReport {
        value: sum / n as f64,
        n_instances: n,
        n_excluded: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    // Brute-force oracles, intentionally different routes from the
    // implementations above.

    fn auc_pairwise_oracle(imp: &RankedImpression) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..imp.scores.len() {
            if !imp.labels[i] {
                continue;
            }
            for j in 0..imp.scores.len() {
                if imp.labels[j] {
                    continue;
                }
                pairs += 1.0;
                if imp.scores[i] > imp.scores[j] {
                    wins += 1.0;
                } else if imp.scores[i] == imp.scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn dcg_of(labels_in_rank_order: &[bool], k: usize) -> f64 {
        labels_in_rank_order
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &l)| if l { 1.0 / libm::log2((r + 2) as f64) } else { 0.0 })
            .sum()
    }

    /// Ideal DCG found by exhaustively permuting the labels.
    fn ideal_dcg_permutation_oracle(labels: &[bool], k: usize) -> f64 {
        fn permute(items: &mut Vec<bool>, k: usize, best: &mut f64) {
            fn inner(current: &mut Vec<bool>, remaining: &mut Vec<bool>, k: usize, best: &mut f64) {
                if remaining.is_empty() {
                    let d = dcg_of(current, k);
                    if d > *best {
                        *best = d;
                    }
                    return;
                }
                for i in 0..remaining.len() {
                    let item = remaining.remove(i);
                    current.push(item);
                    inner(current, remaining, k, best);
                    current.pop();
                    remaining.insert(i, item);
                }
            }
            let mut current = Vec::new();
            inner(&mut current, items, k, best);
        }
        let mut best = 0.0;
        permute(&mut labels.to_vec(), k, &mut best);
        best
    }

    fn random_impression(rng: &mut Rng, max_len: usize, int_scores: bool) -> RankedImpression {
        loop {
            let n = 2 + rng.below(max_len - 1);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if int_scores {
                        rng.below(4) as f64
                    } else {
                        rng.range(-1.0, 1.0)
                    }
                })
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            let imp = RankedImpression { scores, labels };
            if imp.has_both_classes() {
                return imp;
            }
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 2, 2], &[1, 1, 2, 0]).unwrap(), 0.75);
    }

    #[test]
    fn macro_f1_hand_example() {
        // preds [0,0], labels [0,1]: class0 F1 = 2/3, class1 F1 = 0
        let f1 = macro_f1(&[0, 0], &[0, 1], 2).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_invariant_under_relabeling() {
        let preds = [0, 1, 2, 1, 0, 2, 2];
        let labels = [0, 1, 1, 1, 2, 2, 0];
        let base = macro_f1(&preds, &labels, 3).unwrap();
        // permutation 0->2, 1->0, 2->1
        let perm = |v: usize| (v + 2) % 3;
        let preds_p: Vec<usize> = preds.iter().map(|&v| perm(v)).collect();
        let labels_p: Vec<usize> = labels.iter().map(|&v| perm(v)).collect();
        let permuted = macro_f1(&preds_p, &labels_p, 3).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_against_confusion_matrix_oracle() {
        let mut rng = Rng::new(321);
        for _ in 0..100 {
            let c = 2 + rng.below(4);
            let n = 3 + rng.below(20);
            let preds: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            // independent oracle from an explicit confusion matrix
            let mut conf = alloc::vec![alloc::vec![0usize; c]; c];
            for (&p, &l) in preds.iter().zip(&labels) {
                conf[l][p] += 1;
            }
            let mut sum = 0.0;
            for cls in 0..c {
                let tp = conf[cls][cls] as f64;
                let pred_total: usize = (0..c).map(|l| conf[l][cls]).sum();
                let true_total: usize = conf[cls].iter().sum();
                let p = if pred_total > 0 { tp / pred_total as f64 } else { 0.0 };
                let r = if true_total > 0 { tp / true_total as f64 } else { 0.0 };
                if p + r > 0.0 {
                    sum += 2.0 * p * r / (p + r);
                }
            }
            let oracle = sum / c as f64;
            let got = macro_f1(&preds, &labels, c).unwrap();
            assert!((got - oracle).abs() < 1e-12, "got {got}, oracle {oracle}");
        }
    }

    #[test]
    fn auc_trivial_cases() {
        let top = RankedImpression::new(
            alloc::vec![0.9, 0.8, 0.1],
            alloc::vec![true, false, false],
        )
        .unwrap();
        assert_eq!(auc(&top).unwrap(), 1.0);
        let inverted =
            RankedImpression::new(alloc::vec![0.2, 0.7], alloc::vec![true, false]).unwrap();
        assert_eq!(auc(&inverted).unwrap(), 0.0);
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly() {
        let mut rng = Rng::new(7);
        for i in 0..1000 {
            // half the instances use few-valued scores to force ties
            let imp = random_impression(&mut rng, 10, i % 2 == 0);
            let fast = auc(&imp).unwrap();
            let oracle = auc_pairwise_oracle(&imp);
            assert_eq!(fast, oracle, "impression {i}: {imp:?}");
        }
    }

    #[test]
    fn auc_without_both_classes_is_input_error() {
        let imp = RankedImpression::new(alloc::vec![1.0, 2.0], alloc::vec![true, true]).unwrap();
        assert!(matches!(auc(&imp), Err(CoreError::Input(_))));
    }

    #[test]
    fn mrr_examples() {
        let first =
            RankedImpression::new(alloc::vec![0.9, 0.5], alloc::vec![true, false]).unwrap();
        assert_eq!(mrr(&first).unwrap(), 1.0);
        let second =
            RankedImpression::new(alloc::vec![0.5, 0.9], alloc::vec![true, false]).unwrap();
        assert_eq!(mrr(&second).unwrap(), 0.5);
        // positives at ranks 1 and 4
        let two = RankedImpression::new(
            alloc::vec![0.9, 0.8, 0.7, 0.6],
            alloc::vec![true, false, false, true],
        )
        .unwrap();
        assert_eq!(mrr(&two).unwrap(), 0.625);
    }

    #[test]
    fn ndcg_examples() {
        let top = RankedImpression::new(
            alloc::vec![0.9, 0.1, 0.2],
            alloc::vec![true, false, false],
        )
        .unwrap();
        assert_eq!(ndcg_at_k(&top, 5).unwrap(), 1.0);
        // single positive at rank 3 of 3: (1/log2(4)) / (1/log2(2)) = 0.5
        let third = RankedImpression::new(
            alloc::vec![0.9, 0.8, 0.1],
            alloc::vec![false, false, true],
        )
        .unwrap();
        assert_eq!(ndcg_at_k(&third, 5).unwrap(), 0.5);
    }

    #[test]
    fn ndcg_matches_permutation_oracle() {
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let imp = random_impression(&mut rng, 6, false);
            for k in 1..=6 {
                let got = ndcg_at_k(&imp, k).unwrap();
                let order = imp.ranking();
                let in_order: Vec<bool> = order.iter().map(|&i| imp.labels[i]).collect();
                let oracle = dcg_of(&in_order, k) / ideal_dcg_permutation_oracle(&imp.labels, k);
                assert!((got - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ndcg_nondecreasing_in_k_and_one_when_sorted() {
        // Under the truncated-ideal convention the ratio is only monotone
        // once k covers all positives (below that the ideal still grows).
        let mut rng = Rng::new(17);
        for _ in 0..100 {
            let imp = random_impression(&mut rng, 8, false);
            let n = imp.scores.len();
            let n_pos = imp.labels.iter().filter(|&&l| l).count();
            let mut prev = 0.0;
            for k in n_pos..=n {
                let v = ndcg_at_k(&imp, k).unwrap();
                assert!(v >= prev - 1e-12);
                prev = v;
            }
            // perfectly sorted instance scores full nDCG
            let mut sorted_labels = imp.labels.clone();
            sorted_labels.sort_by(|a, b| b.cmp(a));
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let perfect = RankedImpression::new(scores, sorted_labels).unwrap();
            assert!((ndcg_at_k(&perfect, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_excludes_and_counts() {
        let valid =
            RankedImpression::new(alloc::vec![0.9, 0.1], alloc::vec![true, false]).unwrap();
        let invalid =
            RankedImpression::new(alloc::vec![0.9, 0.1], alloc::vec![true, true]).unwrap();
        let report = aggregate(&[valid, invalid], auc).unwrap();
        assert_eq!(report.n_instances, 1);
        assert_eq!(report.n_excluded, 1);
        assert_eq!(report.value, 1.0);
    }

    proptest! {
        // ranking metrics cannot move under strictly monotone transforms
        #[test]
        fn metrics_invariant_under_monotone_transform(
            seed in 0u64..5000,
        ) {
            let mut rng = Rng::new(seed);
            let imp = random_impression(&mut rng, 8, false);
            let transformed = RankedImpression {
                scores: imp.scores.iter().map(|s| libm::exp(0.5 * s) + 3.0).collect(),
                labels: imp.labels.clone(),
            };
            prop_assert_eq!(auc(&imp).unwrap(), auc(&transformed).unwrap());
            prop_assert_eq!(mrr(&imp).unwrap(), mrr(&transformed).unwrap());
            prop_assert_eq!(ndcg_at_k(&imp, 5).unwrap(), ndcg_at_k(&transformed, 5).unwrap());
        }

        // reversing scores flips AUC on tie-free instances
        #[test]
        fn auc_of_reversed_scores_is_complement(seed in 0u64..5000) {
            let mut rng = Rng::new(seed);
            let imp = random_impression(&mut rng, 8, false);
            let reversed = RankedImpression {
                scores: imp.scores.iter().map(|s| -s).collect(),
                labels: imp.labels.clone(),
            };
            let sum = auc(&imp).unwrap() + auc(&reversed).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
