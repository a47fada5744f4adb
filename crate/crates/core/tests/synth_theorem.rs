mod common;

use fscl_core::losses::loss_supcon_out;
use fscl_core::metrics::sensitive_info_probe;
use fscl_core::synth::*;
use fscl_core::theorem::*;
use fscl_core::{Error, LossConfig, LossKind, RngSeed};
use proptest::prelude::*;

#[test]
fn counting_formulas_over_grid() {
    for m in 2..=4usize {
        for r in [m * m, m * m + 1, 2 * m * m] {
            for c in 1..=3usize {
                let spec = BiasSpec::new(m, r as f64, c).unwrap();
                let report = count_formulas(&spec).unwrap();
                for (name, check) in report.checks() {
                    assert!(check.holds(), "m={m} r={r} C={c} {name}: {check:?}");
                }
                // enumerate from the labels directly
                let labels = generate_ideal_biased_labels(&spec, RngSeed(3)).unwrap();
                let (y, s) = (&labels.targets, &labels.sensitive);
                let n = labels.len();
                let i = 0;
                let zp = (0..n).filter(|&x| x != i && y[x] == y[i]).count();
                let diff = (0..n).filter(|&x| s[x] != s[i]).count();
                assert_eq!(report.zp_size.brute_force, zp);
                assert_eq!(report.za_d_size.brute_force, diff);
                assert_eq!(zp, r * c + (m - 1) * c - 1);
                assert_eq!(diff, (m - 1) * r * c + (m - 1) * (m - 1) * c);
            }
        }
    }
}

#[test]
fn pair_count_example() {
    let report = count_formulas(&BiasSpec::new(2, 4.0, 1).unwrap()).unwrap();
    assert_eq!(report.pair_count_diff.closed_form, 8);
    assert_eq!(report.pair_count_diff.brute_force, 8);
}

#[test]
fn ideal_labels_have_requested_cells() {
    let spec = BiasSpec::new(3, 9.0, 2).unwrap();
    let labels = generate_ideal_biased_labels(&spec, RngSeed(1)).unwrap();
    let cells = labels.cells();
    for y in 0..3 {
        for s in 0..3 {
            assert_eq!(cells[&(y, s)], if y == s { 18 } else { 2 });
        }
    }
    assert_eq!(labels.len(), 3 * 18 + 6 * 2);
}

#[test]
fn fractional_bias_rounds_toward_low_classes() {
    let spec = BiasSpec::new(2, 2.5, 1).unwrap();
    let cells = spec.cell_counts().unwrap();
    assert_eq!(cells[&(0, 0)], 3);
    assert_eq!(cells[&(1, 1)], 2);
    assert!(matches!(count_formulas(&spec), Err(Error::InvalidSpec(_))));
}

#[test]
fn imbalanced_split_sizes() {
    let split =
        generate_imbalanced_dataset(&ImbalanceSpec { alpha: 4.0 }, 2000, 400, RngSeed(0)).unwrap();
    assert_eq!(split.train_cells[&(0, 0)], 200);
    assert_eq!(split.train_cells[&(1, 0)], 800);
    assert_eq!(split.train_cells[&(0, 1)], 800);
    assert_eq!(split.train_cells[&(1, 1)], 200);
    assert!(!split.rounded);
    assert!(split.test.cells().values().all(|&v| v == 100));

    let odd =
        generate_imbalanced_dataset(&ImbalanceSpec { alpha: 2.0 }, 10000, 400, RngSeed(0)).unwrap();
    assert_eq!(odd.train_cells[&(0, 0)], 1666);
    assert_eq!(odd.train_cells[&(1, 0)], 3334);
    assert!(odd.rounded);
}

#[test]
fn decomposition_reproduces_supcon() {
    let spec = BiasSpec::new(2, 4.0, 2).unwrap();
    let labels = generate_ideal_biased_labels(&spec, RngSeed(5)).unwrap();
    for seed in 0..5 {
        let draw = EnsembleDraw::new(&labels, 12, 2.0, 1, RngSeed(seed)).unwrap();
        for lambda in [0.0, 0.3] {
            let batch = draw.embed(lambda).unwrap();
            let d = decompose_supcon(&batch, 0.2).unwrap();
            let loss = loss_supcon_out(&batch, &LossConfig::new(LossKind::SupConOut, 0.2).unwrap())
                .unwrap();
            let oracle = common::oracle::supcon_out(&batch, 0.2);
            assert!((d.v - loss.value).abs() < 1e-9 * loss.value.abs().max(1.0));
            assert!((d.v - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
            assert!((d.v - d.c_hat * (d.v_a - d.v_p)).abs() < 1e-12 * d.v.abs().max(1.0));
        }
    }
}

#[test]
fn two_views_stay_close_at_small_jitter() {
    let labels = Labels {
        targets: (0..400).map(|i| i % 2).collect(),
        sensitive: (0..400).map(|i| (i / 2) % 2).collect(),
    };
    let spec = FeatureSpec {
        dim: 16,
        class_signal: 1.0,
        sensitive_signal: 1.0,
        noise_sigma: 1.0,
    };
    let data = generate_features(&labels, &spec, RngSeed(2), 0).unwrap();
    let views = make_two_views(&data, 0.1, RngSeed(4)).unwrap();
    let z = views.embeddings();
    let mean_cos: f64 = (0..400)
        .map(|k| z[2 * k].iter().zip(&z[2 * k + 1]).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / 400.0;
    assert!(mean_cos > 0.9, "{mean_cos}");
    assert!(views.is_normalized());
    for k in 0..400 {
        assert_eq!(views.sibling(2 * k), Some(2 * k + 1));
    }
}

#[test]
fn ensemble_probe_tracks_lambda() {
    let spec = BiasSpec::new(2, 4.0, 20).unwrap();
    let labels = generate_ideal_biased_labels(&spec, RngSeed(0)).unwrap();
    let mut wins = 0;
    for seed in 0..10 {
        let b0 = generate_embedding_ensemble(
            &labels,
            &EnsembleSpec { dim: 16, lambda: 0.0, noise_sigma: 3.0 },
            RngSeed(seed),
        )
        .unwrap();
        let b5 = generate_embedding_ensemble(
            &labels,
            &EnsembleSpec { dim: 16, lambda: 0.5, noise_sigma: 3.0 },
            RngSeed(seed),
        )
        .unwrap();
        let s: Vec<usize> = b0.sensitive().iter().map(|s| s.unwrap()).collect();
        // class and sensitive label are correlated here, so chance for the probe is the
        // accuracy reachable from the class direction alone
        let p0 = sensitive_info_probe(b0.embeddings(), &s, RngSeed(seed)).unwrap();
        let p5 = sensitive_info_probe(b5.embeddings(), &s, RngSeed(seed)).unwrap();
        assert!(p0 < 0.9, "seed {seed}: {p0}");
        if p5 > p0 {
            wins += 1;
        }
    }
    assert!(wins >= 9, "{wins}/10");
}

#[test]
fn delta_study_signs() {
    let report = delta_v_study(&StudyConfig {
        seeds: 10,
        ..StudyConfig::default()
    })
    .unwrap();
    assert!(!report.assumption_violated);
    assert_eq!(report.rows.len(), 10);
    assert!(report.sign_agreement.v_a_nonpositive >= 0.8);
    assert!(report.sign_agreement.v_p_positive >= 0.8);
    assert!(report.sign_agreement.v_negative >= 0.8);
    // |Z_p| = rC + (m-1)C - 1 = 17 for every anchor
    for row in &report.rows {
        let want = (row.delta_v_a - row.delta_v_p) / 17.0;
        assert!((row.delta_v - want).abs() < 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn weak_bias_is_flagged() {
    let weak = StudyConfig {
        bias: BiasSpec::new(2, 2.0, 3).unwrap(),
        seeds: 2,
        ..StudyConfig::default()
    };
    assert!(delta_v_study(&weak).unwrap().assumption_violated);
    let strict = StudyConfig { strict: true, ..weak };
    assert!(matches!(delta_v_study(&strict), Err(Error::AssumptionViolated { .. })));
}

#[test]
fn decomposition_rejects_unequal_positive_counts() {
    let batch = common::six_view_batch();
    let mut y = batch.targets().to_vec();
    y[0] = 1;
    y[1] = 1;
    let b = batch.with_targets(y).unwrap();
    assert!(matches!(decompose_supcon(&b, 0.1), Err(Error::AxiomViolation { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn orthonormal_basis(dim in 2usize..20, seed in any::<u64>()) {
        let k = dim / 2 + 1;
        let basis = random_orthonormal(dim, k, &mut RngSeed(seed).stream(0)).unwrap();
        for a in 0..k {
            for b in 0..k {
                let d: f64 = basis[a].iter().zip(&basis[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ideal_labels_shuffle_only(m in 2usize..4, r in 1usize..10, c in 1usize..4, seed in any::<u64>()) {
        let spec = BiasSpec::new(m, r as f64, c).unwrap();
        let a = generate_ideal_biased_labels(&spec, RngSeed(seed)).unwrap();
        prop_assert_eq!(a.cells(), spec.cell_counts().unwrap());
    }
}
