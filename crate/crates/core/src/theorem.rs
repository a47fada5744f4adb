//! Numerical checks of the SupCon decomposition `V = Ĉ(−V_p + V_a)` on ideally biased data.

use serde::{Deserialize, Serialize};

use crate::domain::{check_temperature, RngSeed, ViewBatch};
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, dot, log_sum_exp, mean};
use crate::par;
use crate::partition::build_partition_masked;
use crate::synth::{generate_ideal_biased_labels, BiasSpec, EnsembleDraw, Labels};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupconDecomposition {
    /// `Σ_i Σ_{p∈Z_p(i)} z_i·z_p/τ`
    pub v_p: f64,
    /// `Σ_i Σ_{p∈Z_p(i)} log Σ_{a∈Z_a(i)} φ(z_i, z_a)`
    pub v_a: f64,
    /// `1/|Z_p(i)|`, the same for every anchor.
    pub c_hat: f64,
    pub v: f64,
}

/// Splits the SupCon (out-form) loss into its positive and all-sample parts. Requires every
/// anchor to have the same nonzero number of positives.
pub fn decompose_supcon(batch: &ViewBatch, temperature: f64) -> Result<SupconDecomposition> {
    check_temperature(temperature)?;
    let partition = build_partition_masked(batch);
    let sizes: Vec<usize> = partition.anchors().iter().map(|a| a.positives.len()).collect();
    let min = sizes.iter().copied().min().unwrap_or(0);
    let max = sizes.iter().copied().max().unwrap_or(0);
    if min != max || min == 0 {
        return Err(Error::AxiomViolation { min, max });
    }
    let z = batch.embeddings();
    let inv_t = 1.0 / temperature;
    let terms = par::map_range(batch.len(), |i| {
        let a = partition.anchor(i);
        let vp = compensated_sum(a.positives.iter().map(|&p| dot(&z[i], &z[p]) * inv_t));
        let lse = log_sum_exp(a.all_others.iter().map(|&x| dot(&z[i], &z[x]) * inv_t));
        (vp, a.positives.len() as f64 * lse)
    });
    let v_p = compensated_sum(terms.iter().map(|t| t.0));
    let v_a = compensated_sum(terms.iter().map(|t| t.1));
    let c_hat = 1.0 / min as f64;
    Ok(SupconDecomposition {
        v_p,
        v_a,
        c_hat,
        v: c_hat * (v_a - v_p),
    })
}

/// A closed-form count next to its enumeration over the generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountCheck {
    pub closed_form: usize,
    pub brute_force: usize,
    /// False when the enumerated count differs between anchors (or classes).
    pub uniform: bool,
}

impl CountCheck {
    pub fn holds(&self) -> bool {
        self.uniform && self.closed_form == self.brute_force
    }

    fn from_values(closed_form: usize, values: &[usize]) -> Self {
        let first = values.first().copied().unwrap_or(0);
        Self {
            closed_form,
            brute_force: first,
            uniform: values.iter().all(|&v| v == first),
        }
    }
}

/// Counting identities over the whole ideally biased dataset.
///
/// `za_s_size` and `pair_count_same` follow the textbook convention that counts the anchor itself
/// (and the `i = p` pairs); the `_excl` fields are the literal set sizes without it. Pair counts
/// are per target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    /// `|Z_p(i)| = Cr + (m−1)C − 1`
    pub zp_size: CountCheck,
    /// Samples sharing the anchor's sensitive class, anchor included: `rC + (m−1)C`
    pub za_s_size: CountCheck,
    /// `|Z_a^d(i)| = (m−1)rC + (m−1)²C`
    pub za_d_size: CountCheck,
    /// Same-sensitive ordered pairs within a class, `i = p` included: `(rC)² + (m−1)C²`
    pub pair_count_same: CountCheck,
    /// Different-sensitive ordered pairs within a class: `2(m−1)rC² + (m−1)(m−2)C²`
    pub pair_count_diff: CountCheck,
    /// `rC + (m−1)C − 1`
    pub za_s_size_excl: CountCheck,
    /// `(rC)² + (m−1)C² − (r + m − 1)C`
    pub pair_count_same_excl: CountCheck,
}

impl CountReport {
    pub fn checks(&self) -> [(&'static str, CountCheck); 7] {
        [
            ("zp_size", self.zp_size),
            ("za_s_size", self.za_s_size),
            ("za_d_size", self.za_d_size),
            ("pair_count_same", self.pair_count_same),
            ("pair_count_diff", self.pair_count_diff),
            ("za_s_size_excl", self.za_s_size_excl),
            ("pair_count_same_excl", self.pair_count_same_excl),
        ]
    }

    pub fn all_hold(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.holds())
    }
}

pub fn count_formulas(spec: &BiasSpec) -> Result<CountReport> {
    spec.validate()?;
    let rc = spec.biased_count().ok_or_else(|| {
        Error::InvalidSpec(format!("r·C = {} is not a whole number", spec.r * spec.c as f64))
    })?;
    let (m, c) = (spec.m, spec.c);
    let labels = generate_ideal_biased_labels(spec, RngSeed(0))?;
    let n = labels.len();
    let (ys, ss) = (&labels.targets, &labels.sensitive);

    let per_anchor = |f: &dyn Fn(usize, usize) -> bool| -> Vec<usize> {
        (0..n).map(|i| (0..n).filter(|&x| f(i, x)).count()).collect()
    };
    let zp = per_anchor(&|i, x| x != i && ys[x] == ys[i]);
    let same_incl = per_anchor(&|i, x| ss[x] == ss[i]);
    let same_excl = per_anchor(&|i, x| x != i && ss[x] == ss[i]);
    let diff = per_anchor(&|i, x| ss[x] != ss[i]);

    let per_class = |same: bool, include_self: bool| -> Vec<usize> {
        (0..m)
            .map(|j| {
                let members: Vec<usize> = (0..n).filter(|&i| ys[i] == j).collect();
                members
                    .iter()
                    .flat_map(|&i| members.iter().map(move |&p| (i, p)))
                    .filter(|&(i, p)| (include_self || i != p) && (ss[i] == ss[p]) == same)
                    .count()
            })
            .collect()
    };

    let sq = |v: usize| v * v;
    Ok(CountReport {
        zp_size: CountCheck::from_values(rc + (m - 1) * c - 1, &zp),
        za_s_size: CountCheck::from_values(rc + (m - 1) * c, &same_incl),
        za_d_size: CountCheck::from_values((m - 1) * rc + sq(m - 1) * c, &diff),
        pair_count_same: CountCheck::from_values(sq(rc) + (m - 1) * sq(c), &per_class(true, true)),
        pair_count_diff: CountCheck::from_values(
            2 * (m - 1) * rc * c + (m - 1) * (m - 2) * sq(c),
            &per_class(false, true),
        ),
        za_s_size_excl: CountCheck::from_values(rc + (m - 1) * c - 1, &same_excl),
        pair_count_same_excl: CountCheck::from_values(
            sq(rc) + (m - 1) * sq(c) - (rc + (m - 1) * c),
            &per_class(true, false),
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub bias: BiasSpec,
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seeds: usize,
    pub temperature: f64,
    pub base_seed: u64,
    pub views_per_sample: usize,
    /// Fail with `AssumptionViolated` instead of flagging the report when `r < m²`.
    pub strict: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            bias: BiasSpec { m: 2, r: 5.0, c: 3 },
            lambda_low: 0.0,
            lambda_high: 0.4,
            dim: 16,
            noise_sigma: 3.0,
            seeds: 20,
            temperature: 0.1,
            base_seed: 0,
            views_per_sample: 1,
            strict: false,
        }
    }
}

/// One seed's change from `λ_low` to `λ_high` (high minus low).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub delta_v_a: f64,
    pub delta_v_p: f64,
    pub delta_v: f64,
    /// Mean relative increase of φ over same-sensitive pairs.
    pub alpha_bar: f64,
    /// Mean relative decrease of φ over different-sensitive pairs.
    pub beta_bar: f64,
    /// `φ̄^s − φ̄^d` at `λ_high`.
    pub phi_gap: f64,
}

impl SeedDelta {
    /// `ᾱ` and `β̄` are both positive and within a factor of two.
    pub fn rates_within_2x(&self) -> bool {
        let (lo, hi) = if self.alpha_bar < self.beta_bar {
            (self.alpha_bar, self.beta_bar)
        } else {
            (self.beta_bar, self.alpha_bar)
        };
        lo > 0.0 && hi <= 2.0 * lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignAgreement {
    pub v_a_nonpositive: f64,
    pub v_p_positive: f64,
    pub v_negative: f64,
    pub rates_within_2x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaStudyReport {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub rows: Vec<SeedDelta>,
    pub sign_agreement: SignAgreement,
    pub assumption_violated: bool,
}

pub fn delta_v_study(config: &StudyConfig) -> Result<DeltaStudyReport> {
    config.bias.validate()?;
    check_temperature(config.temperature)?;
    if !(config.lambda_low <= config.lambda_high) {
        return Err(Error::InvalidSpec(format!(
            "lambda_low {} exceeds lambda_high {}",
            config.lambda_low, config.lambda_high
        )));
    }
    let assumption_violated = match config.bias.check_assumption() {
        Ok(()) => false,
        Err(e) if config.strict => return Err(e),
        Err(_) => true,
    };
    let rows = par::try_map_range(config.seeds, |k| {
        let seed = RngSeed(config.base_seed).derive(k as u64);
        let labels = generate_ideal_biased_labels(&config.bias, seed.derive(0))?;
        seed_delta(config, &labels, seed, k as u64)
    })?;
    let frac = |f: &dyn Fn(&SeedDelta) -> bool| {
        rows.iter().filter(|r| f(r)).count() as f64 / rows.len().max(1) as f64
    };
    let sign_agreement = SignAgreement {
        v_a_nonpositive: frac(&|r| r.delta_v_a <= 0.0),
        v_p_positive: frac(&|r| r.delta_v_p > 0.0),
        v_negative: frac(&|r| r.delta_v < 0.0),
        rates_within_2x: frac(&|r| r.rates_within_2x()),
    };
    Ok(DeltaStudyReport {
        lambda_low: config.lambda_low,
        lambda_high: config.lambda_high,
        rows,
        sign_agreement,
        assumption_violated,
    })
}

fn seed_delta(config: &StudyConfig, labels: &Labels, seed: RngSeed, index: u64) -> Result<SeedDelta> {
    let draw = EnsembleDraw::new(
        labels,
        config.dim,
        config.noise_sigma,
        config.views_per_sample,
        seed.derive(1),
    )?;
    let low = draw.embed(config.lambda_low)?;
    let high = draw.embed(config.lambda_high)?;
    let t = config.temperature;
    let dl = decompose_supcon(&low, t)?;
    let dh = decompose_supcon(&high, t)?;

    let n = low.len();
    let (zl, zh, ss) = (low.embeddings(), high.embeddings(), low.sensitive());
    let mut same_ratio = Vec::new();
    let mut diff_ratio = Vec::new();
    let mut same_phi = Vec::new();
    let mut diff_phi = Vec::new();
    for i in 0..n {
        for x in (0..n).filter(|&x| x != i) {
            let sh = dot(&zh[i], &zh[x]) / t;
            let ratio = (sh - dot(&zl[i], &zl[x]) / t).exp();
            if ss[i] == ss[x] {
                same_ratio.push(ratio - 1.0);
                same_phi.push(sh.exp());
            } else {
                diff_ratio.push(1.0 - ratio);
                diff_phi.push(sh.exp());
            }
        }
    }
    Ok(SeedDelta {
        seed: index,
        delta_v_a: dh.v_a - dl.v_a,
        delta_v_p: dh.v_p - dl.v_p,
        delta_v: dh.v - dl.v,
        alpha_bar: mean(&same_ratio),
        beta_bar: mean(&diff_ratio),
        phi_gap: mean(&same_phi) - mean(&diff_phi),
    })
}
