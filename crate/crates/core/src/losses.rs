//! Contrastive loss variants with exact analytic gradients.
//!
//! Every loss is a sum over anchors. Each anchor term depends on the embeddings only through the
//! scaled similarities `S_ix = z_i·z_x / τ`, so a term is described by its positives (with weights)
//! and its denominator set; [`evaluate`] turns that description into a value and a gradient.
//!
//! Values are sums over anchors, not means. Per-anchor terms are computed in parallel and reduced
//! in ascending anchor order with compensated summation, so results do not depend on the thread
//! count.

use serde::{Deserialize, Serialize};

use crate::domain::{check_temperature, EmptyNegativePolicy, LossConfig, LossKind, ViewBatch};
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, dot, log_sum_exp, softmax};
use crate::par;
use crate::partition::{build_partition, build_partition_masked, group_census, PartitionIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub value: f64,
    /// ∂loss/∂z_l for every view.
    pub gradient: Vec<Vec<f64>>,
    pub skipped_anchors: usize,
    /// Total outer weight of the anchors that contributed: their count for every loss except
    /// FSCL+, where each anchor weighs 1/|Z^{j,k}|. Dividing by it gives a per-anchor mean.
    pub anchor_weight: f64,
}

/// One anchor's contribution.
#[derive(Debug, Clone, PartialEq)]
enum Term {
    Skip,
    /// `Σ_p c_p (LSE_{x∈D} S_ix − S_ip)`
    Out {
        positives: Vec<(usize, f64)>,
        denominator: Vec<usize>,
    },
    /// `−log(mean_p exp S_ip) + LSE_{x∈D} S_ix`
    In {
        positives: Vec<usize>,
        denominator: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Plan {
    terms: Vec<Term>,
    weights: Vec<f64>,
    skipped: usize,
}

impl Plan {
    fn new(n: usize) -> Self {
        Self {
            terms: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            skipped: 0,
        }
    }

    fn push(&mut self, term: Term, weight: f64) {
        if term == Term::Skip {
            self.skipped += 1;
            self.weights.push(0.0);
        } else {
            self.weights.push(weight);
        }
        self.terms.push(term);
    }
}

fn empty_negatives(policy: EmptyNegativePolicy, anchor: usize) -> Result<Term> {
    match policy {
        EmptyNegativePolicy::SkipAnchor => Ok(Term::Skip),
        EmptyNegativePolicy::Error => Err(Error::EmptyNegativeSet { anchor }),
    }
}

fn uniform(positives: &[usize]) -> Vec<(usize, f64)> {
    let c = 1.0 / positives.len() as f64;
    positives.iter().map(|&p| (p, c)).collect()
}

fn plan(batch: &ViewBatch, config: &LossConfig) -> Result<Plan> {
    let n = batch.len();
    let policy = config.empty_negative_policy;
    let mut plan = Plan::new(n);
    match config.kind {
        LossKind::SelfSupervised => {
            if n < 4 {
                return Err(Error::BatchTooSmall { views: n });
            }
            let siblings = batch.siblings()?;
            for (i, sib) in siblings.into_iter().enumerate() {
                plan.push(
                    Term::Out {
                        positives: vec![(sib, 1.0)],
                        denominator: (0..n).filter(|&x| x != i).collect(),
                    },
                    1.0,
                );
            }
        }
        LossKind::SupConOut | LossKind::SupConGroupForm | LossKind::SupConIn => {
            let partition = build_partition_masked(batch);
            for a in partition.anchors() {
                let term = if a.positives.is_empty() {
                    Term::Skip
                } else if config.kind == LossKind::SupConIn {
                    Term::In {
                        positives: a.positives.clone(),
                        denominator: a.all_others.clone(),
                    }
                } else {
                    Term::Out {
                        positives: uniform(&a.positives),
                        denominator: a.all_others.clone(),
                    }
                };
                plan.push(term, 1.0);
            }
        }
        LossKind::Fscl => {
            let partition = build_partition(batch)?;
            for (i, a) in partition.anchors().iter().enumerate() {
                let term = if a.positives.is_empty() {
                    Term::Skip
                } else if a.target_inter_group.is_empty() {
                    empty_negatives(policy, i)?
                } else {
                    Term::Out {
                        positives: uniform(&a.positives),
                        denominator: a.target_inter_group.clone(),
                    }
                };
                plan.push(term, 1.0);
            }
        }
        LossKind::FsclPlus => {
            let partition = build_partition(batch)?;
            fscl_plus_terms(batch, &partition, policy, |_| true, &mut plan)?;
        }
        LossKind::FsclDagger => {
            if let Some(anchor) = batch.sensitive().iter().position(Option::is_none) {
                return Err(Error::UnknownSensitiveLabel { anchor });
            }
            let siblings = batch.siblings()?;
            let ss = batch.sensitive();
            for (i, sib) in siblings.into_iter().enumerate() {
                let denominator: Vec<usize> =
                    (0..n).filter(|&f| f != i && ss[f] == ss[i]).collect();
                let term = if denominator.is_empty() {
                    empty_negatives(policy, i)?
                } else {
                    Term::Out {
                        positives: vec![(sib, 1.0)],
                        denominator,
                    }
                };
                plan.push(term, 1.0);
            }
        }
    }
    Ok(plan)
}

/// FSCL+ terms for anchors selected by `include`; others are left to the caller.
fn fscl_plus_terms(
    batch: &ViewBatch,
    partition: &PartitionIndex,
    policy: EmptyNegativePolicy,
    include: impl Fn(usize) -> bool,
    plan: &mut Plan,
) -> Result<()> {
    let census = group_census(batch);
    for (i, a) in partition.anchors().iter().enumerate() {
        if !include(i) {
            continue;
        }
        let s_i = batch.sensitive()[i].ok_or(Error::UnknownSensitiveLabel { anchor: i })?;
        let outer = 1.0 / census.get(batch.targets()[i], s_i) as f64;
        let term = if a.positives_by_sensitive.is_empty() {
            Term::Skip
        } else if a.target_inter_group.is_empty() {
            empty_negatives(policy, i)?
        } else {
            let mut positives: Vec<(usize, f64)> = a
                .positives_by_sensitive
                .values()
                .flat_map(|members| {
                    let c = outer / members.len() as f64;
                    members.iter().map(move |&p| (p, c))
                })
                .collect();
            positives.sort_by_key(|&(p, _)| p);
            Term::Out {
                positives,
                denominator: a.target_inter_group.clone(),
            }
        };
        plan.push(term, outer);
    }
    Ok(())
}

struct AnchorEval {
    value: f64,
    /// ∂term/∂S_ix, dense over views.
    row: Vec<f64>,
}

fn scaled_similarities(z: &[Vec<f64>], i: usize, idx: &[usize], inv_t: f64) -> Vec<f64> {
    idx.iter().map(|&x| dot(&z[i], &z[x]) * inv_t).collect()
}

fn eval_term(z: &[Vec<f64>], i: usize, term: &Term, inv_t: f64, want_row: bool) -> AnchorEval {
    let n = z.len();
    let mut row = if want_row { vec![0.0; n] } else { Vec::new() };
    let value = match term {
        Term::Skip => 0.0,
        Term::Out {
            positives,
            denominator,
        } => {
            let sd = scaled_similarities(z, i, denominator, inv_t);
            let lse = log_sum_exp(sd.iter().copied());
            let value = compensated_sum(
                positives
                    .iter()
                    .map(|&(p, c)| c * (lse - dot(&z[i], &z[p]) * inv_t)),
            );
            if want_row {
                let total_c = compensated_sum(positives.iter().map(|&(_, c)| c));
                for (&x, w) in denominator.iter().zip(softmax(&sd)) {
                    row[x] += total_c * w;
                }
                for &(p, c) in positives {
                    row[p] -= c;
                }
            }
            value
        }
        Term::In {
            positives,
            denominator,
        } => {
            let sd = scaled_similarities(z, i, denominator, inv_t);
            let sp = scaled_similarities(z, i, positives, inv_t);
            let value = log_sum_exp(sd.iter().copied()) - log_sum_exp(sp.iter().copied())
                + (positives.len() as f64).ln();
            if want_row {
                for (&x, w) in denominator.iter().zip(softmax(&sd)) {
                    row[x] += w;
                }
                for (&p, w) in positives.iter().zip(softmax(&sp)) {
                    row[p] -= w;
                }
            }
            value
        }
    };
    AnchorEval { value, row }
}

fn plan_value(z: &[Vec<f64>], plan: &Plan, temperature: f64) -> f64 {
    let inv_t = 1.0 / temperature;
    let values = par::map_range(plan.terms.len(), |i| {
        eval_term(z, i, &plan.terms[i], inv_t, false).value
    });
    compensated_sum(values)
}

fn run_plan(z: &[Vec<f64>], plan: &Plan, temperature: f64) -> LossResult {
    let n = z.len();
    let inv_t = 1.0 / temperature;
    let evals = par::map_range(n, |i| eval_term(z, i, &plan.terms[i], inv_t, true));
    let value = compensated_sum(evals.iter().map(|e| e.value));
    let dim = z.first().map_or(0, Vec::len);
    // dL/dz_l = (1/τ) Σ_x (W_lx + W_xl) z_x
    let gradient = par::map_range(n, |l| {
        let mut g = vec![0.0; dim];
        for x in 0..n {
            let w = evals[l].row[x] + evals[x].row[l];
            if w != 0.0 {
                for (gd, zd) in g.iter_mut().zip(&z[x]) {
                    *gd += w * zd;
                }
            }
        }
        g.iter_mut().for_each(|v| *v *= inv_t);
        g
    });
    LossResult {
        value,
        gradient,
        skipped_anchors: plan.skipped,
        anchor_weight: compensated_sum(plan.weights.iter().copied()),
    }
}

/// Evaluates the loss selected by `config.kind`.
pub fn evaluate(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    let plan = plan(batch, config)?;
    let mut result = run_plan(batch.embeddings(), &plan, config.temperature);
    if config.kind == LossKind::SupConGroupForm {
        result.value = supcon_groupform_value(batch, config.temperature)?;
    }
    Ok(result)
}

/// Loss value only; skips the gradient.
pub fn evaluate_value(batch: &ViewBatch, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    if config.kind == LossKind::SupConGroupForm {
        return supcon_groupform_value(batch, config.temperature);
    }
    let plan = plan(batch, config)?;
    Ok(plan_value(batch.embeddings(), &plan, config.temperature))
}

/// Each anchor's own term, in view order; skipped anchors read 0. The group form shares the
/// out-form's terms.
pub fn anchor_values(batch: &ViewBatch, config: &LossConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let plan = plan(batch, config)?;
    let z = batch.embeddings();
    let inv_t = 1.0 / config.temperature;
    Ok(par::map_range(plan.terms.len(), |i| {
        eval_term(z, i, &plan.terms[i], inv_t, false).value
    }))
}

fn with_kind(config: &LossConfig, kind: LossKind) -> LossConfig {
    LossConfig { kind, ..*config }
}

pub fn loss_self_supervised(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::SelfSupervised))
}

pub fn loss_supcon_out(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::SupConOut))
}

pub fn loss_supcon_in(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::SupConIn))
}

pub fn loss_supcon_groupform(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::SupConGroupForm))
}

pub fn loss_fscl(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::Fscl))
}

pub fn loss_fscl_plus(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::FsclPlus))
}

pub fn loss_fscl_dagger(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    evaluate(batch, &with_kind(config, LossKind::FsclDagger))
}

/// SupCon value accumulated group by group: for every `(j, k)` group, every anchor in it, and
/// every sensitive class `k'` of its positives. Mathematically identical to the out-form; the
/// summation order differs.
fn supcon_groupform_value(batch: &ViewBatch, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    let partition = build_partition(batch)?;
    let census = group_census(batch);
    let z = batch.embeddings();
    let inv_t = 1.0 / temperature;
    let groups: Vec<(usize, usize)> = census.counts.keys().copied().collect();
    let per_group = par::map_slice(&groups, |&(j, k)| {
        let per_anchor = (0..batch.len())
            .filter(|&i| batch.targets()[i] == j && batch.sensitive()[i] == Some(k))
            .map(|i| {
                let a = partition.anchor(i);
                if a.positives.is_empty() {
                    return 0.0;
                }
                let lse = log_sum_exp(a.all_others.iter().map(|&x| dot(&z[i], &z[x]) * inv_t));
                let scale = 1.0 / a.positives.len() as f64;
                compensated_sum(a.positives_by_sensitive.values().flat_map(|members| {
                    members
                        .iter()
                        .map(move |&p| scale * (lse - dot(&z[i], &z[p]) * inv_t))
                }))
            });
        compensated_sum(per_anchor)
    });
    Ok(compensated_sum(per_group))
}

/// Partial sensitive supervision: anchors with a known sensitive label get FSCL+ terms (group
/// sizes counted over labelled views only), the rest get SupCon terms; the two are summed.
pub fn loss_mixed_partial(batch: &ViewBatch, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    let partition = build_partition_masked(batch);
    let mut fscl_plan = Plan::new(batch.len());
    fscl_plus_terms(
        batch,
        &partition,
        config.empty_negative_policy,
        |i| batch.sensitive()[i].is_some(),
        &mut fscl_plan,
    )?;
    let mut fscl_terms = fscl_plan.terms.into_iter().zip(fscl_plan.weights);
    let mut plan = Plan::new(batch.len());
    for (i, a) in partition.anchors().iter().enumerate() {
        if batch.sensitive()[i].is_some() {
            let (term, weight) = fscl_terms.next().expect("one FSCL+ term per labelled anchor");
            plan.push(term, weight);
        } else if a.positives.is_empty() {
            plan.push(Term::Skip, 1.0);
        } else {
            plan.push(
                Term::Out {
                    positives: uniform(&a.positives),
                    denominator: a.all_others.clone(),
                },
                1.0,
            );
        }
    }
    Ok(run_plan(batch.embeddings(), &plan, config.temperature))
}

/// Max over embedding coordinates of `|analytic − central difference| / (|analytic| + 1e-12)`.
pub fn loss_gradient_check(batch: &ViewBatch, config: &LossConfig, step: f64) -> Result<f64> {
    let analytic = evaluate(batch, config)?;
    let numeric = finite_difference_gradient(batch, config, step)?;
    Ok(max_relative_error(&analytic.gradient, &numeric))
}

/// Central-difference gradient of the loss value with respect to every embedding coordinate.
pub fn finite_difference_gradient(
    batch: &ViewBatch,
    config: &LossConfig,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let n = batch.len();
    let dim = batch.dim();
    let fixed_plan = plan(batch, config)?;
    let value_at = |z: &[Vec<f64>]| -> Result<f64> {
        if config.kind == LossKind::SupConGroupForm {
            supcon_groupform_value(&batch.with_embeddings(z.to_vec())?, config.temperature)
        } else {
            Ok(plan_value(z, &fixed_plan, config.temperature))
        }
    };
    let flat = par::try_map_range(n * dim, |k| {
        let (l, d) = (k / dim, k % dim);
        let mut z = batch.embeddings().to_vec();
        let x0 = z[l][d];
        z[l][d] = x0 + step;
        let plus = value_at(&z)?;
        z[l][d] = x0 - step;
        let minus = value_at(&z)?;
        Ok::<_, Error>((plus - minus) / (2.0 * step))
    })?;
    Ok(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, f)| (a - f).abs() / (a.abs() + 1e-12))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::normalize_embeddings;

    fn cfg(kind: LossKind, t: f64) -> LossConfig {
        LossConfig::new(kind, t).unwrap()
    }

    fn pairs(views: &[[f64; 2]], ys: &[usize], ss: &[usize]) -> ViewBatch {
        let v = views
            .chunks(2)
            .map(|c| (c[0].to_vec(), c[1].to_vec()))
            .collect();
        let ss: Vec<_> = ss.iter().map(|&s| Some(s)).collect();
        normalize_embeddings(&ViewBatch::from_pairs(v, ys, &ss).unwrap()).unwrap()
    }

    #[test]
    fn identical_embeddings_give_four_log_three() {
        let b = pairs(&[[1.0, 0.0]; 4], &[0, 0], &[0, 0]);
        let expected = 4.0 * 3f64.ln();
        for kind in [
            LossKind::SelfSupervised,
            LossKind::SupConOut,
            LossKind::SupConIn,
            LossKind::SupConGroupForm,
        ] {
            for t in [0.1, 0.5, 1.0] {
                let r = evaluate(&b, &cfg(kind, t)).unwrap();
                assert!((r.value - expected).abs() < 1e-12, "{kind}: {}", r.value);
            }
        }
    }

    #[test]
    fn self_supervised_hand_value() {
        let b = pairs(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], &[0, 1], &[0, 0]);
        let e = std::f64::consts::E;
        let expected = 4.0 * -(e / (e + 2.0)).ln();
        let r = loss_self_supervised(&b, &cfg(LossKind::SelfSupervised, 1.0)).unwrap();
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn self_supervised_needs_four_views() {
        let b = pairs(&[[1.0, 0.0], [0.0, 1.0]], &[0], &[0]);
        assert!(matches!(
            loss_self_supervised(&b, &cfg(LossKind::SelfSupervised, 1.0)),
            Err(Error::BatchTooSmall { views: 2 })
        ));
    }

    #[test]
    fn all_singleton_classes_skip_every_anchor() {
        let b = ViewBatch::single_view(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]],
            vec![0, 1, 2],
            vec![Some(0); 3],
        )
        .unwrap();
        let r = loss_supcon_out(&b, &cfg(LossKind::SupConOut, 0.5)).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.skipped_anchors, 3);
        assert!(r.gradient.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_target_inter_group_policy() {
        // every anchor's other-class views carry the other sensitive label
        let b = pairs(
            &[[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.6, 0.8]],
            &[0, 1],
            &[0, 1],
        );
        let skip = loss_fscl(&b, &cfg(LossKind::Fscl, 0.5)).unwrap();
        assert_eq!(skip.skipped_anchors, 4);
        assert_eq!(skip.value, 0.0);
        let err = loss_fscl(
            &b,
            &cfg(LossKind::Fscl, 0.5).with_policy(EmptyNegativePolicy::Error),
        );
        assert!(matches!(err, Err(Error::EmptyNegativeSet { anchor: 0 })));
        assert!(matches!(
            loss_fscl_plus(&b, &cfg(LossKind::FsclPlus, 0.5).with_policy(EmptyNegativePolicy::Error)),
            Err(Error::EmptyNegativeSet { .. })
        ));
    }

    #[test]
    fn fscl_requires_sensitive_labels() {
        let b = ViewBatch::from_pairs(
            vec![(vec![1.0], vec![1.0]), (vec![1.0], vec![1.0])],
            &[0, 1],
            &[Some(0), None],
        )
        .unwrap();
        for kind in [LossKind::Fscl, LossKind::FsclPlus, LossKind::FsclDagger] {
            assert!(matches!(
                evaluate(&b, &cfg(kind, 1.0)),
                Err(Error::UnknownSensitiveLabel { .. })
            ));
        }
        // SupCon does not need them
        assert!(loss_supcon_out(&b, &cfg(LossKind::SupConOut, 1.0)).is_ok());
    }

    #[test]
    fn dagger_with_one_sensitive_class_equals_self_supervised() {
        let b = pairs(
            &[[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.6, 0.8], [-0.6, 0.8], [-1.0, 0.0]],
            &[0, 1, 1],
            &[0, 0, 0],
        );
        let d = loss_fscl_dagger(&b, &cfg(LossKind::FsclDagger, 0.3)).unwrap();
        let s = loss_self_supervised(&b, &cfg(LossKind::SelfSupervised, 0.3)).unwrap();
        assert!((d.value - s.value).abs() < 1e-12);
    }

    #[test]
    fn constant_batch_gradient_sums_to_zero() {
        let b = pairs(&[[0.6, 0.8]; 6], &[0, 1, 0], &[0, 1, 1]);
        let r = loss_self_supervised(&b, &cfg(LossKind::SelfSupervised, 0.2)).unwrap();
        for d in 0..2 {
            let s: f64 = r.gradient.iter().map(|g| g[d]).sum();
            assert!(s.abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn halving_temperature_is_recomputed() {
        let b = pairs(
            &[[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.6, 0.8]],
            &[0, 1],
            &[0, 1],
        );
        let a = loss_supcon_out(&b, &cfg(LossKind::SupConOut, 0.4)).unwrap();
        let h = loss_supcon_out(&b, &cfg(LossKind::SupConOut, 0.2)).unwrap();
        assert_ne!(a.gradient, h.gradient);
        let err = loss_gradient_check(&b, &cfg(LossKind::SupConOut, 0.2), 1e-4).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn mixed_partial_reduces_to_parts() {
        let views = [[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.6, 0.8], [-0.6, 0.8], [-1.0, 0.0], [0.3, -0.95], [0.1, 0.99]];
        let v = views.chunks(2).map(|c| (c[0].to_vec(), c[1].to_vec())).collect();
        let full = normalize_embeddings(
            &ViewBatch::from_pairs(v, &[0, 1, 1, 0], &[Some(0), Some(0), Some(1), Some(1)]).unwrap(),
        )
        .unwrap();
        let c = cfg(LossKind::FsclPlus, 0.5);
        let mixed = loss_mixed_partial(&full, &c).unwrap();
        let plus = loss_fscl_plus(&full, &c).unwrap();
        assert!((mixed.value - plus.value).abs() < 1e-12);

        let none = full.with_sensitive(vec![None; 8]).unwrap();
        let mixed = loss_mixed_partial(&none, &c).unwrap();
        let sup = loss_supcon_out(&none, &c).unwrap();
        assert!((mixed.value - sup.value).abs() < 1e-12);
    }
}
