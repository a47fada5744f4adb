//! Group fairness scores, similarity dispersion and a linear sensitive-information probe.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::RngSeed;
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, dot, mean, norm, population_std, softmax};
use crate::par;

/// Counts keyed by `(sensitive group, true class, predicted class)`.
#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionTensor {
    #[serde_as(as = "Vec<(_, _)>")]
    pub counts: BTreeMap<(usize, usize, usize), usize>,
    pub n_classes: usize,
}

impl ConfusionTensor {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, s: usize, y: usize, c: usize) -> usize {
        self.counts.get(&(s, y, c)).copied().unwrap_or(0)
    }

    /// Sensitive groups with at least one sample.
    pub fn groups(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.counts.keys().map(|&(s, _, _)| s).collect();
        set.into_iter().collect()
    }

    fn support(&self, s: usize, y: usize) -> usize {
        (0..self.n_classes).map(|c| self.get(s, y, c)).sum()
    }

    fn group_size(&self, s: usize) -> usize {
        self.counts
            .iter()
            .filter(|(&(g, _, _), _)| g == s)
            .map(|(_, &n)| n)
            .sum()
    }

    /// Adds another tensor's counts.
    pub fn merge(&mut self, other: &ConfusionTensor) {
        self.n_classes = self.n_classes.max(other.n_classes);
        for (&k, &n) in &other.counts {
            *self.counts.entry(k).or_insert(0) += n;
        }
    }

    fn pairs(&self) -> Result<Vec<(usize, usize)>> {
        let groups = self.groups();
        if groups.len() < 2 {
            return Err(Error::SingleGroup);
        }
        let mut out = Vec::new();
        for (a, &g0) in groups.iter().enumerate() {
            for &g1 in &groups[a + 1..] {
                out.push((g0, g1));
            }
        }
        Ok(out)
    }
}

/// Tallies predictions. The class count is inferred from the largest label seen.
pub fn confusion_tensor(
    true_y: &[usize],
    pred_c: &[usize],
    sensitive_s: &[usize],
) -> Result<ConfusionTensor> {
    let n_classes = true_y
        .iter()
        .chain(pred_c)
        .max()
        .map_or(0, |&m| m + 1);
    confusion_tensor_bounded(true_y, pred_c, sensitive_s, n_classes, usize::MAX)
}

/// As [`confusion_tensor`], rejecting labels at or above the given limits.
pub fn confusion_tensor_bounded(
    true_y: &[usize],
    pred_c: &[usize],
    sensitive_s: &[usize],
    n_classes: usize,
    n_groups: usize,
) -> Result<ConfusionTensor> {
    for (what, len) in [("pred_c", pred_c.len()), ("sensitive_s", sensitive_s.len())] {
        if len != true_y.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: true_y.len(),
                found: len,
            });
        }
    }
    let mut counts = BTreeMap::new();
    for ((&y, &c), &s) in true_y.iter().zip(pred_c).zip(sensitive_s) {
        for (what, label, limit) in [("y", y, n_classes), ("c", c, n_classes), ("s", s, n_groups)] {
            if label >= limit {
                return Err(Error::LabelOutOfRange { what, label, limit });
            }
        }
        *counts.entry((s, y, c)).or_insert(0) += 1;
    }
    Ok(ConfusionTensor { counts, n_classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub equalized_odds: f64,
    pub demographic_parity: f64,
    pub equal_opportunity: f64,
    pub accuracy: f64,
    /// `(y, group pair)` tuples dropped from EO because a group had no samples of class y.
    pub skipped_combos: usize,
}

struct GapMean {
    value: f64,
    skipped: usize,
}

/// Mean of `|P_{s0}(c|y) − P_{s1}(c|y)|` over every `(y, c, pair)` with support, in points.
fn conditional_gap(t: &ConfusionTensor, only_diagonal: bool) -> Result<GapMean> {
    let pairs = t.pairs()?;
    let mut gaps = Vec::new();
    let mut skipped = 0;
    for y in 0..t.n_classes {
        for &(g0, g1) in &pairs {
            let (n0, n1) = (t.support(g0, y), t.support(g1, y));
            if n0 == 0 || n1 == 0 {
                skipped += 1;
                continue;
            }
            let classes: Vec<usize> = if only_diagonal {
                vec![y]
            } else {
                (0..t.n_classes).collect()
            };
            for c in classes {
                let p0 = t.get(g0, y, c) as f64 / n0 as f64;
                let p1 = t.get(g1, y, c) as f64 / n1 as f64;
                gaps.push((p0 - p1).abs());
            }
        }
    }
    if gaps.is_empty() {
        return Err(Error::NoSupport);
    }
    Ok(GapMean {
        value: 100.0 * mean(&gaps),
        skipped,
    })
}

pub fn equalized_odds(t: &ConfusionTensor) -> Result<f64> {
    conditional_gap(t, false).map(|g| g.value)
}

/// Gap over true-positive rates `P_s(C=y | Y=y)` only.
pub fn equal_opportunity(t: &ConfusionTensor) -> Result<f64> {
    conditional_gap(t, true).map(|g| g.value)
}

/// Gap over predicted-class marginals `P_s(C=c)`.
pub fn demographic_parity(t: &ConfusionTensor) -> Result<f64> {
    let pairs = t.pairs()?;
    let marginal = |s: usize, c: usize| -> f64 {
        let n: usize = (0..t.n_classes).map(|y| t.get(s, y, c)).sum();
        n as f64 / t.group_size(s) as f64
    };
    let mut gaps = Vec::new();
    for c in 0..t.n_classes {
        for &(g0, g1) in &pairs {
            gaps.push((marginal(g0, c) - marginal(g1, c)).abs());
        }
    }
    Ok(100.0 * mean(&gaps))
}

pub fn accuracy(t: &ConfusionTensor) -> Result<f64> {
    let total = t.total();
    if total == 0 {
        return Err(Error::NoSupport);
    }
    let correct: usize = t
        .counts
        .iter()
        .filter(|(&(_, y, c), _)| y == c)
        .map(|(_, &n)| n)
        .sum();
    Ok(100.0 * correct as f64 / total as f64)
}

pub fn fairness_report(t: &ConfusionTensor) -> Result<FairnessReport> {
    let eo = conditional_gap(t, false)?;
    Ok(FairnessReport {
        equalized_odds: eo.value,
        demographic_parity: demographic_parity(t)?,
        equal_opportunity: equal_opportunity(t)?,
        accuracy: accuracy(t)?,
        skipped_combos: eo.skipped,
    })
}

/// Per-`(y, s)` group similarity means and the spread of their unit-sum normalizations.
#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDispersion {
    #[serde_as(as = "Vec<(_, _)>")]
    pub intra_group_mean: BTreeMap<(usize, usize), f64>,
    #[serde_as(as = "Vec<(_, _)>")]
    pub inter_class_mean: BTreeMap<(usize, usize), f64>,
    pub intra_std: f64,
    pub inter_std: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn similarity_dispersion(
    embeddings: &[Vec<f64>],
    target_labels: &[usize],
    sensitive_labels: &[usize],
) -> Result<SimilarityDispersion> {
    let n = embeddings.len();
    for (what, len) in [
        ("target_labels", target_labels.len()),
        ("sensitive_labels", sensitive_labels.len()),
    ] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    let mut members: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        members
            .entry((target_labels[i], sensitive_labels[i]))
            .or_default()
            .push(i);
    }
    if members.len() < 2 {
        return Err(Error::SingleGroup);
    }
    if let Some((&(y, s), _)) = members.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::EmptyGroup { y, s });
    }
    let keys: Vec<(usize, usize)> = members.keys().copied().collect();
    let stats = par::map_slice(&keys, |&(y, s)| {
        let m = &members[&(y, s)];
        let intra = compensated_sum(m.iter().enumerate().flat_map(|(a, &i)| {
            m[a + 1..]
                .iter()
                .map(move |&j| cosine(&embeddings[i], &embeddings[j]))
        }));
        let intra = intra / (m.len() * (m.len() - 1) / 2) as f64;
        let others: Vec<usize> = (0..n).filter(|&x| target_labels[x] != y).collect();
        if others.is_empty() {
            return None;
        }
        let inter = compensated_sum(
            m.iter()
                .flat_map(|&i| others.iter().map(move |&x| cosine(&embeddings[i], &embeddings[x]))),
        ) / (m.len() * others.len()) as f64;
        Some((intra, inter))
    });
    let stats: Vec<(f64, f64)> = stats.into_iter().collect::<Option<_>>().ok_or(Error::NoSupport)?;
    let spread = |vals: Vec<f64>| {
        let total = compensated_sum(vals.iter().copied());
        let normed: Vec<f64> = vals.iter().map(|v| v / total).collect();
        population_std(&normed)
    };
    Ok(SimilarityDispersion {
        intra_group_mean: keys.iter().copied().zip(stats.iter().map(|s| s.0)).collect(),
        inter_class_mean: keys.iter().copied().zip(stats.iter().map(|s| s.1)).collect(),
        intra_std: spread(stats.iter().map(|s| s.0).collect()),
        inter_std: spread(stats.iter().map(|s| s.1).collect()),
    })
}

pub const PROBE_FOLDS: usize = 5;
const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

/// Balanced accuracy of a multinomial logistic regression predicting the sensitive label from
/// the embedding, pooled over 5 stratified held-out folds. Ordinal stand-in for mutual information.
pub fn sensitive_info_probe(
    embeddings: &[Vec<f64>],
    sensitive_labels: &[usize],
    seed: RngSeed,
) -> Result<f64> {
    let n = embeddings.len();
    if sensitive_labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "sensitive_labels",
            expected: n,
            found: sensitive_labels.len(),
        });
    }
    let classes: BTreeSet<usize> = sensitive_labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::SingleGroup);
    }
    if n < PROBE_FOLDS {
        return Err(Error::InvalidSpec(format!(
            "probe needs at least {PROBE_FOLDS} samples, got {n}"
        )));
    }
    let k = classes.iter().max().map_or(0, |&m| m + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.stream(0));
    // stratified: unbalanced folds bias the intercept against the held-out majority
    let mut fold = vec![0; n];
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &order {
        let pos = seen.entry(sensitive_labels[i]).or_insert(0);
        fold[i] = *pos % PROBE_FOLDS;
        *pos += 1;
    }
    let predictions = par::map_range(PROBE_FOLDS, |f| {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let model = Softmax::fit(embeddings, sensitive_labels, &train, k);
        (0..n)
            .filter(|&i| fold[i] == f)
            .map(|i| (i, model.predict(&embeddings[i])))
            .collect::<Vec<_>>()
    });
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, c) in predictions.into_iter().flatten() {
        let e = hits.entry(sensitive_labels[i]).or_insert((0, 0));
        e.1 += 1;
        if c == sensitive_labels[i] {
            e.0 += 1;
        }
    }
    let recalls: Vec<f64> = hits.values().map(|&(h, t)| h as f64 / t as f64).collect();
    Ok(mean(&recalls))
}

/// Standardized-input softmax regression fitted by full-batch gradient descent.
struct Softmax {
    shift: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Softmax {
    fn fit(x: &[Vec<f64>], labels: &[usize], rows: &[usize], k: usize) -> Self {
        let d = x[0].len();
        let m = rows.len() as f64;
        let shift: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|&i| x[i][j]).sum::<f64>() / m)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = rows.iter().map(|&i| (x[i][j] - shift[j]).powi(2)).sum::<f64>() / m;
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut model = Self {
            shift,
            scale,
            weights: vec![vec![0.0; d]; k],
            bias: vec![0.0; k],
        };
        let xs: Vec<Vec<f64>> = rows.iter().map(|&i| model.standardize(&x[i])).collect();
        for _ in 0..PROBE_STEPS {
            let mut gw = vec![vec![0.0; d]; k];
            let mut gb = vec![0.0; k];
            for (xi, &i) in xs.iter().zip(rows) {
                let p = softmax(&model.logits_std(xi));
                for c in 0..k {
                    let r = p[c] - f64::from(u8::from(labels[i] == c));
                    gb[c] += r;
                    for (g, v) in gw[c].iter_mut().zip(xi) {
                        *g += r * v;
                    }
                }
            }
            for c in 0..k {
                model.bias[c] -= PROBE_LR * gb[c] / m;
                for j in 0..d {
                    let g = gw[c][j] / m + PROBE_L2 * model.weights[c][j];
                    model.weights[c][j] -= PROBE_LR * g;
                }
            }
        }
        model
    }

    fn standardize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn logits_std(&self, v: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, v) + b)
            .collect()
    }

    fn predict(&self, v: &[f64]) -> usize {
        let logits = self.logits_std(&self.standardize(v));
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Binary table: group 0 TPR 0.8 / FPR 0.2, group 1 TPR 0.6 / FPR 0.4, 10 samples per cell.
    fn rates_table() -> ConfusionTensor {
        let mut y = Vec::new();
        let mut c = Vec::new();
        let mut s = Vec::new();
        for (g, tp, fp) in [(0, 8, 2), (1, 6, 4)] {
            for k in 0..10 {
                y.push(1);
                c.push(usize::from(k < tp));
                s.push(g);
                y.push(0);
                c.push(usize::from(k < fp));
                s.push(g);
            }
        }
        confusion_tensor(&y, &c, &s).unwrap()
    }

    #[test]
    fn tally() {
        let t = confusion_tensor(&[1, 0], &[1, 0], &[0, 1]).unwrap();
        let expected: BTreeMap<_, _> = [((0, 1, 1), 1), ((1, 0, 0), 1)].into_iter().collect();
        assert_eq!(t.counts, expected);
        assert_eq!(confusion_tensor(&[], &[], &[]).unwrap().total(), 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            confusion_tensor(&[0, 1], &[0], &[0, 0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion_tensor_bounded(&[0, 2], &[0, 0], &[0, 0], 2, 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn twenty_point_example() {
        let t = rates_table();
        assert!((equalized_odds(&t).unwrap() - 20.0).abs() < 1e-9);
        assert!((equal_opportunity(&t).unwrap() - 20.0).abs() < 1e-9);
        // P_0(C=1) = 0.5, P_1(C=1) = 0.5
        assert!(demographic_parity(&t).unwrap().abs() < 1e-12);
        assert!((accuracy(&t).unwrap() - 70.0).abs() < 1e-12);
    }

    #[test]
    fn single_group_is_an_error() {
        let t = confusion_tensor(&[0, 1], &[0, 1], &[3, 3]).unwrap();
        assert_eq!(equalized_odds(&t), Err(Error::SingleGroup));
        assert_eq!(accuracy(&t).unwrap(), 100.0);
    }

    #[test]
    fn no_shared_support() {
        let t = confusion_tensor(&[0, 1], &[0, 1], &[0, 1]).unwrap();
        assert_eq!(equalized_odds(&t), Err(Error::NoSupport));
    }

    #[test]
    fn dispersion_symmetric_case() {
        let e = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let d = similarity_dispersion(&e, &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(d.intra_std, 0.0);
        assert!(d.intra_group_mean.values().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(matches!(
            similarity_dispersion(&e, &[0, 0, 1, 1], &[0, 1, 0, 0]),
            Err(Error::EmptyGroup { y: 0, .. })
        ));
    }

    #[test]
    fn probe_extremes() {
        let mut rng = RngSeed(3).stream(0);
        let n = 600;
        let s: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let noise: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let chance = sensitive_info_probe(&noise, &s, RngSeed(1)).unwrap();
        assert!((chance - 0.5).abs() < 0.05, "{chance}");
        let onehot: Vec<Vec<f64>> = s
            .iter()
            .map(|&k| (0..2).map(|j| f64::from(u8::from(j == k))).collect())
            .collect();
        assert_eq!(sensitive_info_probe(&onehot, &s, RngSeed(1)).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn scores_invariant_to_group_relabel(
            rows in proptest::collection::vec((0usize..3, 0usize..3, 0usize..2), 12..60),
        ) {
            let y: Vec<_> = rows.iter().map(|r| r.0).collect();
            let c: Vec<_> = rows.iter().map(|r| r.1).collect();
            let s: Vec<_> = rows.iter().map(|r| r.2).collect();
            let flipped: Vec<_> = s.iter().map(|&g| 5 - g).collect();
            let a = confusion_tensor(&y, &c, &s).unwrap();
            let b = confusion_tensor(&y, &c, &flipped).unwrap();
            if let (Ok(ra), Ok(rb)) = (fairness_report(&a), fairness_report(&b)) {
                prop_assert!((ra.equalized_odds - rb.equalized_odds).abs() < 1e-12);
                prop_assert!((ra.demographic_parity - rb.demographic_parity).abs() < 1e-12);
                prop_assert!((ra.equal_opportunity - rb.equal_opportunity).abs() < 1e-12);
                prop_assert!(ra.equalized_odds <= 100.0 && ra.equalized_odds >= 0.0);
            }
        }

        #[test]
        fn merge_preserves_totals(
            rows in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 0..40),
            cut in 0usize..40,
        ) {
            let cut = cut.min(rows.len());
            let build = |r: &[(usize, usize, usize)]| {
                let y: Vec<_> = r.iter().map(|x| x.0).collect();
                let c: Vec<_> = r.iter().map(|x| x.1).collect();
                let s: Vec<_> = r.iter().map(|x| x.2).collect();
                confusion_tensor(&y, &c, &s).unwrap()
            };
            let mut left = build(&rows[..cut]);
            left.merge(&build(&rows[cut..]));
            let whole = build(&rows);
            prop_assert_eq!(left.counts, whole.counts);
        }
    }
}
