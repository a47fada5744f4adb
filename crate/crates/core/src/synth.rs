//! Synthetic label sets, feature generators and embedding ensembles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{RngSeed, ViewBatch};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm};

/// Ideally biased label set: `m` target classes and `m` sensitive classes, where class `j` has
/// `r·C` samples of sensitive class `j` and `C` of every other sensitive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub m: usize,
    pub r: f64,
    #[serde(rename = "C")]
    pub c: usize,
}

impl BiasSpec {
    pub fn new(m: usize, r: f64, c: usize) -> Result<Self> {
        let spec = Self { m, r, c };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidSpec(format!("m must be at least 2, got {}", self.m)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidSpec(format!("r must be positive, got {}", self.r)));
        }
        if self.c == 0 {
            return Err(Error::InvalidSpec("C must be positive".into()));
        }
        Ok(())
    }

    /// The "highly biased" condition `r ≥ m²`.
    pub fn check_assumption(&self) -> Result<()> {
        let m_squared = (self.m * self.m) as f64;
        if self.r < m_squared {
            Err(Error::AssumptionViolated {
                r: self.r,
                m_squared,
            })
        } else {
            Ok(())
        }
    }

    /// `r·C` when it is a whole number.
    pub fn biased_count(&self) -> Option<usize> {
        let rc = self.r * self.c as f64;
        let rounded = rc.round();
        ((rc - rounded).abs() < 1e-9).then_some(rounded as usize)
    }

    /// Cell counts keyed by `(y, s)`. A fractional `r·C` gives every class `⌊r·C⌋` biased samples
    /// and hands the remaining `round(m·r·C) − m·⌊r·C⌋` units one each to the lowest class ids.
    pub fn cell_counts(&self) -> Result<BTreeMap<(usize, usize), usize>> {
        self.validate()?;
        let rc = self.r * self.c as f64;
        let base = rc.floor() as usize;
        let extra = ((self.m as f64 * rc).round() as usize).saturating_sub(self.m * base);
        let mut cells = BTreeMap::new();
        for y in 0..self.m {
            for s in 0..self.m {
                let n = if y == s {
                    base + usize::from(y < extra)
                } else {
                    self.c
                };
                cells.insert((y, s), n);
            }
        }
        Ok(cells)
    }
}

/// Labels without features; every sample has a known sensitive class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub targets: Vec<usize>,
    pub sensitive: Vec<usize>,
}

impl Labels {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn cells(&self) -> BTreeMap<(usize, usize), usize> {
        let mut cells = BTreeMap::new();
        for (&y, &s) in self.targets.iter().zip(&self.sensitive) {
            *cells.entry((y, s)).or_insert(0) += 1;
        }
        cells
    }

    fn from_cells(cells: &BTreeMap<(usize, usize), usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut pairs: Vec<(usize, usize)> = cells
            .iter()
            .flat_map(|(&k, &n)| std::iter::repeat_n(k, n))
            .collect();
        pairs.shuffle(rng);
        Self {
            targets: pairs.iter().map(|p| p.0).collect(),
            sensitive: pairs.iter().map(|p| p.1).collect(),
        }
    }
}

pub fn generate_ideal_biased_labels(spec: &BiasSpec, seed: RngSeed) -> Result<Labels> {
    let cells = spec.cell_counts()?;
    Ok(Labels::from_cells(&cells, &mut seed.stream(0)))
}

/// Two sensitive groups with mirrored target skew: group 0 holds α× more of class 1 than of
/// class 0, group 1 the opposite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub alpha: f64,
}

#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalancedSplit {
    pub train: Labels,
    /// Every `(y, s)` cell holds `test_total / 4` samples.
    pub test: Labels,
    #[serde_as(as = "Vec<(_, _)>")]
    pub train_cells: BTreeMap<(usize, usize), usize>,
    /// True when `total` did not split exactly into the α ratio.
    pub rounded: bool,
}

/// Each group receives `total / 2` samples; its minority class gets `⌊(total/2) / (α+1)⌋` and the
/// majority class the rest.
pub fn generate_imbalanced_dataset(
    spec: &ImbalanceSpec,
    total: usize,
    test_total: usize,
    seed: RngSeed,
) -> Result<ImbalancedSplit> {
    if !(spec.alpha >= 1.0 && spec.alpha.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "alpha must be at least 1, got {}",
            spec.alpha
        )));
    }
    if !test_total.is_multiple_of(4) {
        return Err(Error::InvalidSpec(format!(
            "balanced test split needs a multiple of 4 samples, got {test_total}"
        )));
    }
    let per_group = total / 2;
    let exact = per_group as f64 / (spec.alpha + 1.0);
    let minority = exact.floor() as usize;
    let majority = per_group - minority;
    if minority == 0 {
        return Err(Error::InvalidSpec(format!(
            "total {total} leaves an empty minority cell at alpha {}",
            spec.alpha
        )));
    }
    let rounded = !total.is_multiple_of(2) || (exact - exact.round()).abs() > 1e-9;
    let train_cells: BTreeMap<(usize, usize), usize> =
        [((0, 0), minority), ((1, 0), majority), ((0, 1), majority), ((1, 1), minority)]
            .into_iter()
            .collect();
    let test_cells: BTreeMap<(usize, usize), usize> = train_cells
        .keys()
        .map(|&k| (k, test_total / 4))
        .collect();
    Ok(ImbalancedSplit {
        train: Labels::from_cells(&train_cells, &mut seed.stream(0)),
        test: Labels::from_cells(&test_cells, &mut seed.stream(1)),
        train_cells,
        rounded,
    })
}

/// `k` orthonormal vectors in `R^dim` by Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal(dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k > dim {
        return Err(Error::DimensionTooSmall { dim, required: k });
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bx)| *x -= p * bx);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Input features `normalize(a·u_y + b·v_s + σ·g)` with random orthonormal `u`, `v` and
/// `g ~ N(0, I/dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dim: usize,
    pub class_signal: f64,
    pub sensitive_signal: f64,
    pub noise_sigma: f64,
}

/// Samples with features and labels; the sensitive label may be hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub sensitive: Vec<Option<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: rows.iter().map(|&i| self.features[i].clone()).collect(),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            sensitive: rows.iter().map(|&i| self.sensitive[i]).collect(),
        }
    }

    pub fn with_targets(&self, targets: Vec<usize>) -> Dataset {
        Dataset {
            targets,
            ..self.clone()
        }
    }
}

/// Directions are drawn from `seed` alone, so calls with different `stream`s (train, test) share
/// the same class and sensitive directions.
pub fn generate_features(
    labels: &Labels,
    spec: &FeatureSpec,
    seed: RngSeed,
    stream: u64,
) -> Result<Dataset> {
    let n_y = labels.targets.iter().max().map_or(0, |&m| m + 1);
    let n_s = labels.sensitive.iter().max().map_or(0, |&m| m + 1);
    let dirs = random_orthonormal(spec.dim, n_y + n_s, &mut seed.stream(0))?;
    let (u, v) = dirs.split_at(n_y);
    let mut rng = seed.derive(1).stream(stream);
    let scale = spec.noise_sigma / (spec.dim as f64).sqrt();
    let features = labels
        .targets
        .iter()
        .zip(&labels.sensitive)
        .map(|(&y, &s)| {
            let x: Vec<f64> = (0..spec.dim)
                .map(|d| {
                    let g: f64 = rng.sample(StandardNormal);
                    spec.class_signal * u[y][d] + spec.sensitive_signal * v[s][d] + scale * g
                })
                .collect();
            unit(x)
        })
        .collect();
    Ok(Dataset {
        features,
        targets: labels.targets.clone(),
        sensitive: labels.sensitive.iter().map(|&s| Some(s)).collect(),
    })
}

/// Two jittered, renormalized views per sample laid out `[a_0, b_0, a_1, b_1, ...]`. The jitter is
/// `N(0, σ²/dim)` per coordinate, so `σ` is its expected norm.
pub fn make_two_views(data: &Dataset, jitter_sigma: f64, seed: RngSeed) -> Result<ViewBatch> {
    if !(jitter_sigma >= 0.0) {
        return Err(Error::InvalidSpec(format!(
            "jitter_sigma must be nonnegative, got {jitter_sigma}"
        )));
    }
    let mut rng = seed.stream(0);
    let scale = jitter_sigma / (data.dim().max(1) as f64).sqrt();
    let mut jitter = |x: &[f64]| -> Result<Vec<f64>> {
        let v: Vec<f64> = x
            .iter()
            .map(|&a| a + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = norm(&v);
        if n < crate::domain::ZERO_NORM_FLOOR {
            return Err(Error::ZeroVector { index: 0, norm: n });
        }
        Ok(v.into_iter().map(|a| a / n).collect())
    };
    let views = data
        .features
        .iter()
        .map(|x| Ok((jitter(x)?, jitter(x)?)))
        .collect::<Result<Vec<_>>>()?;
    let batch = ViewBatch::from_pairs(views, &data.targets, &data.sensitive)?;
    crate::domain::normalize_embeddings(&batch)
}

/// Embedding ensemble `normalize(u_y + λ·c_s + σ·w)`.
///
/// `u` are orthonormal class directions. `c` are centred sensitive codes: orthonormal `v_s` minus
/// their mean, rescaled to unit norm (antipodal for two classes). `w` is a unit vector drawn
/// uniformly from the orthogonal complement of all those directions, independently per view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub dim: usize,
    pub lambda: f64,
    pub noise_sigma: f64,
}

/// Directions and noise drawn once; [`EnsembleDraw::embed`] evaluates any λ on the same draw.
#[derive(Debug, Clone)]
pub struct EnsembleDraw {
    targets: Vec<usize>,
    sensitive: Vec<usize>,
    views_per_sample: usize,
    class_dirs: Vec<Vec<f64>>,
    sensitive_codes: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    noise_sigma: f64,
}

impl EnsembleDraw {
    pub fn new(
        labels: &Labels,
        dim: usize,
        noise_sigma: f64,
        views_per_sample: usize,
        seed: RngSeed,
    ) -> Result<Self> {
        if !(1..=2).contains(&views_per_sample) {
            return Err(Error::InvalidSpec(format!(
                "views_per_sample must be 1 or 2, got {views_per_sample}"
            )));
        }
        let n_y = labels.targets.iter().max().map_or(0, |&m| m + 1);
        let n_s = labels.sensitive.iter().max().map_or(0, |&m| m + 1).max(2);
        let required = n_y + n_s + 1;
        if dim < required {
            return Err(Error::DimensionTooSmall { dim, required });
        }
        let basis = random_orthonormal(dim, dim, &mut seed.stream(0))?;
        let class_dirs = basis[..n_y].to_vec();
        let raw = &basis[n_y..n_y + n_s];
        let centre: Vec<f64> = (0..dim)
            .map(|d| raw.iter().map(|v| v[d]).sum::<f64>() / n_s as f64)
            .collect();
        let rescale = (n_s as f64 / (n_s - 1) as f64).sqrt();
        let sensitive_codes = raw
            .iter()
            .map(|v| v.iter().zip(&centre).map(|(a, c)| (a - c) * rescale).collect())
            .collect();
        let complement = &basis[n_y + n_s..];
        let mut rng = seed.stream(1);
        let noise = (0..labels.len() * views_per_sample)
            .map(|_| {
                let coef: Vec<f64> = complement.iter().map(|_| rng.sample(StandardNormal)).collect();
                let coef = unit(coef);
                (0..dim)
                    .map(|d| complement.iter().zip(&coef).map(|(b, c)| b[d] * c).sum())
                    .collect()
            })
            .collect();
        Ok(Self {
            targets: labels.targets.clone(),
            sensitive: labels.sensitive.clone(),
            views_per_sample,
            class_dirs,
            sensitive_codes,
            noise,
            noise_sigma,
        })
    }

    pub fn embed(&self, lambda: f64) -> Result<ViewBatch> {
        let k = self.views_per_sample;
        let n = self.targets.len() * k;
        let embeddings = (0..n)
            .map(|l| {
                let (y, s) = (self.targets[l / k], self.sensitive[l / k]);
                unit(
                    self.class_dirs[y]
                        .iter()
                        .zip(&self.sensitive_codes[s])
                        .zip(&self.noise[l])
                        .map(|((u, c), w)| u + lambda * c + self.noise_sigma * w)
                        .collect(),
                )
            })
            .collect();
        let batch = ViewBatch::new(
            embeddings,
            (0..n).map(|l| self.targets[l / k]).collect(),
            (0..n).map(|l| Some(self.sensitive[l / k])).collect(),
            (0..n).map(|l| l / k).collect(),
        )?;
        crate::domain::normalize_embeddings(&batch)
    }
}

/// One draw of [`EnsembleDraw`] evaluated at `spec.lambda`, two views per sample.
pub fn generate_embedding_ensemble(
    labels: &Labels,
    spec: &EnsembleSpec,
    seed: RngSeed,
) -> Result<ViewBatch> {
    EnsembleDraw::new(labels, spec.dim, spec.noise_sigma, 2, seed)?.embed(spec.lambda)
}
