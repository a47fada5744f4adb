mod common;

use common::{close, oracle, random_batch, six_view_batch};
use fscl_core::losses::{
    evaluate, evaluate_value, finite_difference_gradient, loss_fscl, loss_fscl_dagger,
    loss_fscl_plus, loss_gradient_check, loss_self_supervised, loss_supcon_groupform,
    loss_supcon_in, loss_supcon_out, max_relative_error,
};
use fscl_core::{normalize_embeddings, LossConfig, LossKind, ViewBatch};
use proptest::prelude::*;

fn cfg(kind: LossKind, t: f64) -> LossConfig {
    LossConfig::new(kind, t).unwrap()
}

#[test]
fn six_view_batch_matches_oracles() {
    let b = six_view_batch();
    for kind in LossKind::ALL {
        for t in [0.1, 0.5, 1.0] {
            let got = evaluate(&b, &cfg(kind, t)).unwrap().value;
            let want = oracle::evaluate(kind, &b, t);
            assert!(close(got, want, 1e-12), "{kind} τ={t}: {got} vs {want}");
        }
    }
}

#[test]
fn gradient_has_one_entry_per_view() {
    let b = six_view_batch();
    for kind in LossKind::ALL {
        let r = evaluate(&b, &cfg(kind, 0.2)).unwrap();
        assert_eq!(r.gradient.len(), 6);
        assert!(r.gradient.iter().all(|g| g.len() == 3));
        assert!(r.value.is_finite());
    }
}

#[test]
fn in_form_with_single_positive_equals_out_form() {
    // each class has exactly two views, so every anchor has one positive
    let b = random_batch(11, 8, 4, 4, 2, true);
    let b = b.with_targets((0..8).map(|l| l / 2).collect()).unwrap();
    let c = cfg(LossKind::SupConOut, 0.3);
    let out = loss_supcon_out(&b, &c).unwrap().value;
    let inn = loss_supcon_in(&b, &c).unwrap().value;
    assert!(close(out, inn, 1e-12));
}

#[test]
fn in_form_is_bounded_by_out_form() {
    // Jensen: log of a mean ≥ mean of logs, so in ≤ out, and the gap is at most Σ log|Z_p|
    for seed in 0..50 {
        let b = random_batch(seed, 12, 5, 2, 2, true);
        let c = cfg(LossKind::SupConIn, 0.4);
        let inn = loss_supcon_in(&b, &c).unwrap().value;
        let out = loss_supcon_out(&b, &c).unwrap().value;
        let log_sizes: f64 = (0..b.len())
            .map(|i| {
                let n = (0..b.len())
                    .filter(|&p| p != i && b.targets()[p] == b.targets()[i])
                    .count();
                if n == 0 { 0.0 } else { (n as f64).ln() }
            })
            .sum();
        assert!(inn <= out + 1e-12);
        assert!(inn >= out - log_sizes - 1e-12);
        assert!(close(inn, oracle::supcon_in(&b, 0.4), 1e-12));
    }
}

#[test]
fn groupform_single_group_equals_out_form_exactly() {
    let b = random_batch(3, 10, 4, 1, 1, true);
    let c = cfg(LossKind::SupConOut, 0.5);
    assert_eq!(
        loss_supcon_groupform(&b, &c).unwrap().value,
        loss_supcon_out(&b, &c).unwrap().value
    );
}

#[test]
fn fscl_with_one_sensitive_class_matches_oracle() {
    let b = random_batch(5, 12, 4, 3, 1, true);
    let c = cfg(LossKind::Fscl, 0.3);
    let got = loss_fscl(&b, &c).unwrap().value;
    assert!(close(got, oracle::fscl(&b, 0.3), 1e-12));
    // the denominator drops positives, so this differs from SupCon
    assert!((got - loss_supcon_out(&b, &c).unwrap().value).abs() > 1e-6);
}

#[test]
fn fscl_plus_single_group_divides_fscl() {
    // one (y,s) group of four views, plus a four-view other-class group sharing the sensitive class
    let raw: Vec<Vec<f64>> = (0..8)
        .map(|l| vec![1.0 + 0.1 * l as f64, (l as f64).sin(), 0.3 * (l % 3) as f64])
        .collect();
    let b = ViewBatch::new(
        raw,
        vec![0, 0, 0, 0, 1, 1, 1, 1],
        vec![Some(0); 8],
        vec![0, 0, 1, 1, 2, 2, 3, 3],
    )
    .unwrap();
    let b = normalize_embeddings(&b).unwrap();
    let c = cfg(LossKind::FsclPlus, 0.5);
    let plus = loss_fscl_plus(&b, &c).unwrap().value;
    let fscl = loss_fscl(&b, &c).unwrap().value;
    assert!(close(plus, fscl / 4.0, 1e-12));

    // a lone group has no target inter-group negatives at all
    let lone = b.with_targets(vec![0; 8]).unwrap();
    assert_eq!(loss_fscl_plus(&lone, &c).unwrap().value, 0.0);
    assert_eq!(loss_fscl(&lone, &c).unwrap().value, 0.0);
}

#[test]
fn dagger_ignores_targets() {
    let b = random_batch(8, 12, 4, 3, 2, true);
    let c = cfg(LossKind::FsclDagger, 0.2);
    let base = loss_fscl_dagger(&b, &c).unwrap();
    let relabelled = b.with_targets(vec![2, 2, 0, 0, 1, 1, 1, 1, 0, 0, 2, 2]).unwrap();
    assert_eq!(base, loss_fscl_dagger(&relabelled, &c).unwrap());
    let single = b.with_sensitive(vec![Some(0); 12]).unwrap();
    let ss = loss_self_supervised(&single, &cfg(LossKind::SelfSupervised, 0.2)).unwrap();
    assert!(close(loss_fscl_dagger(&single, &c).unwrap().value, ss.value, 1e-12));
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let b = random_batch(100 + seed, 12, 5, 3, 2, true);
        for kind in LossKind::ALL {
            let err = loss_gradient_check(&b, &cfg(kind, 0.5), 1e-5).unwrap();
            assert!(err < 1e-5, "{kind} seed {seed}: {err}");
        }
    }
}

#[test]
fn tsg_views_do_not_affect_fscl_anchor_term() {
    // restrict to anchor 0: perturbing a different-target, different-sensitive view changes nothing
    let b = six_view_batch();
    let c = cfg(LossKind::Fscl, 0.5);
    let grad = finite_difference_gradient(&b, &c, 1e-5).unwrap();
    let analytic = loss_fscl(&b, &c).unwrap().gradient;
    assert!(max_relative_error(&analytic, &grad) < 1e-5);
    // views 4 and 5 are y=1, s=0; anchor 2 (y=0, s=1) sees them as TSG
    let partition = fscl_core::build_partition(&b).unwrap();
    assert_eq!(partition.anchor(2).target_sensitive_inter_group, vec![4, 5]);
    let mut moved = b.embeddings().to_vec();
    moved[4] = vec![0.0, 0.0, 1.0];
    let single = |batch: &ViewBatch| -> f64 {
        let t = 0.5;
        let z = batch.embeddings();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / t;
        let a = partition.anchor(2);
        let lse = a.target_inter_group.iter().map(|&x| dot(&z[2], &z[x]).exp()).sum::<f64>().ln();
        a.positives.iter().map(|&p| lse - dot(&z[2], &z[p])).sum::<f64>() / a.positives.len() as f64
    };
    let moved = b.with_embeddings(moved).unwrap();
    assert_eq!(single(&b), single(&moved));
}

fn batch_strategy() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (0u64..10_000, 2usize..8, 2usize..5, 2usize..5).prop_map(|(seed, half, n_y, n_s)| (seed, 2 * half, n_y, n_s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_invariant_under_view_permutation((seed, n, n_y, n_s) in batch_strategy(), rot in 1usize..7) {
        let b = random_batch(seed, n, 4, n_y, n_s, true);
        let order: Vec<usize> = (0..n).map(|l| (l + 2 * rot) % n).collect();
        let p = b.permuted(&order).unwrap();
        for kind in LossKind::ALL {
            let c = cfg(kind, 0.3);
            let (a, q) = (evaluate_value(&b, &c).unwrap(), evaluate_value(&p, &c).unwrap());
            prop_assert!(close(a, q, 1e-12), "{} {} {}", kind, a, q);
        }
    }

    #[test]
    fn groupform_agrees_with_out_form((seed, n, n_y, n_s) in batch_strategy()) {
        let b = random_batch(seed, n, 6, n_y, n_s, true);
        let c = cfg(LossKind::SupConOut, 0.2);
        let g = loss_supcon_groupform(&b, &c).unwrap().value;
        let o = loss_supcon_out(&b, &c).unwrap().value;
        prop_assert!((g - o).abs() < 1e-10);
    }

    /// Pulls anchor 0's least similar positive toward it. For the out-form SupCon losses the term's
    /// slope in `S_0p` is `softmax_0p − 1/|Z_p|`, which is negative only for below-average
    /// positives, so an arbitrary positive would not do.
    #[test]
    fn pulling_a_positive_toward_its_anchor_lowers_its_term((seed, n, n_y, n_s) in batch_strategy()) {
        let b = random_batch(seed, n, 4, n_y, n_s, true);
        let z = b.embeddings();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        for kind in LossKind::ALL {
            let p = if kind.uses_targets() {
                (1..n)
                    .filter(|&x| b.targets()[x] == b.targets()[0])
                    .min_by(|&x, &w| dot(&z[0], &z[x]).total_cmp(&dot(&z[0], &z[w])))
                    .unwrap()
            } else {
                1
            };
            let d = dot(&z[0], &z[p]);
            let tangent: Vec<f64> = z[0].iter().zip(&z[p]).map(|(a, c)| a - d * c).collect();
            let tn = dot(&tangent, &tangent).sqrt();
            if tn < 1e-6 {
                continue;
            }
            let mut emb = z.to_vec();
            emb[p] = z[p].iter().zip(&tangent).map(|(a, t)| a + 1e-3 * t / tn).collect();
            let after = normalize_embeddings(&b.with_embeddings(emb).unwrap()).unwrap();
            let c = cfg(kind, 0.5);
            let before = fscl_core::losses::anchor_values(&b, &c).unwrap()[0];
            let later = fscl_core::losses::anchor_values(&after, &c).unwrap()[0];
            // equal when the term is skipped or constant, e.g. a denominator holding only the sibling
            prop_assert!(later <= before + 1e-15, "{} {} {}", kind, before, later);
        }
    }
}
