//! Shared value types: view batches, loss configuration, the similarity kernel and seeds.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, norm};

/// Norm below which an embedding is treated as the zero vector.
pub const ZERO_NORM_FLOOR: f64 = 1e-12;

/// A multi-view batch: every view carries an embedding, a target class, an optional sensitive
/// class and the id of the sample it was cut from. Views sharing an origin share both labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewBatch {
    embeddings: Vec<Vec<f64>>,
    target_labels: Vec<usize>,
    sensitive_labels: Vec<Option<usize>>,
    origin: Vec<usize>,
    normalized: bool,
}

impl ViewBatch {
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        target_labels: Vec<usize>,
        sensitive_labels: Vec<Option<usize>>,
        origin: Vec<usize>,
    ) -> Result<Self> {
        let n = embeddings.len();
        for (what, found) in [
            ("target_labels", target_labels.len()),
            ("sensitive_labels", sensitive_labels.len()),
            ("origin", origin.len()),
        ] {
            if found != n {
                return Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        if let Some(first) = embeddings.first() {
            let dim = first.len();
            if dim == 0 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    found: 0,
                });
            }
            if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: bad.len(),
                });
            }
        }
        let batch = Self {
            embeddings,
            target_labels,
            sensitive_labels,
            origin,
            normalized: false,
        };
        batch.check_origin_labels()?;
        Ok(batch)
    }

    /// Two views per sample laid out as `[a_0, b_0, a_1, b_1, ...]`.
    pub fn from_pairs(
        views: Vec<(Vec<f64>, Vec<f64>)>,
        target_labels: &[usize],
        sensitive_labels: &[Option<usize>],
    ) -> Result<Self> {
        let n = views.len();
        if target_labels.len() != n || sensitive_labels.len() != n {
            return Err(Error::LengthMismatch {
                what: "pair labels",
                expected: n,
                found: target_labels.len().min(sensitive_labels.len()),
            });
        }
        let mut embeddings = Vec::with_capacity(2 * n);
        for (a, b) in views {
            embeddings.push(a);
            embeddings.push(b);
        }
        let dup = |k: usize| k / 2;
        Self::new(
            embeddings,
            (0..2 * n).map(|l| target_labels[dup(l)]).collect(),
            (0..2 * n).map(|l| sensitive_labels[dup(l)]).collect(),
            (0..2 * n).map(dup).collect(),
        )
    }

    /// One view per sample; every view is its own origin.
    pub fn single_view(
        embeddings: Vec<Vec<f64>>,
        target_labels: Vec<usize>,
        sensitive_labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = embeddings.len();
        Self::new(embeddings, target_labels, sensitive_labels, (0..n).collect())
    }

    fn check_origin_labels(&self) -> Result<()> {
        let mut seen: std::collections::BTreeMap<usize, usize> = Default::default();
        for (l, &o) in self.origin.iter().enumerate() {
            if let Some(&first) = seen.get(&o) {
                if self.target_labels[first] != self.target_labels[l]
                    || self.sensitive_labels[first] != self.sensitive_labels[l]
                {
                    return Err(Error::InvalidSpec(format!(
                        "views {first} and {l} share origin {o} but carry different labels"
                    )));
                }
            } else {
                seen.insert(o, l);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn targets(&self) -> &[usize] {
        &self.target_labels
    }

    pub fn sensitive(&self) -> &[Option<usize>] {
        &self.sensitive_labels
    }

    pub fn origins(&self) -> &[usize] {
        &self.origin
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn has_all_sensitive(&self) -> bool {
        self.sensitive_labels.iter().all(Option::is_some)
    }

    /// Number of target classes, taken as `max label + 1`.
    pub fn n_classes(&self) -> usize {
        self.target_labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Number of sensitive classes among the known labels.
    pub fn n_groups(&self) -> usize {
        self.sensitive_labels
            .iter()
            .flatten()
            .max()
            .map_or(0, |m| m + 1)
    }

    /// The other view cut from the same sample, when exactly two views share the origin.
    pub fn sibling(&self, view: usize) -> Option<usize> {
        let o = self.origin[view];
        let mut found = None;
        for (l, &other) in self.origin.iter().enumerate() {
            if l != view && other == o {
                if found.is_some() {
                    return None;
                }
                found = Some(l);
            }
        }
        found
    }

    /// Sibling of every view, or [`Error::MissingSibling`] for the first view lacking one.
    pub fn siblings(&self) -> Result<Vec<usize>> {
        let mut by_origin: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (l, &o) in self.origin.iter().enumerate() {
            by_origin.entry(o).or_default().push(l);
        }
        (0..self.len())
            .map(|l| match by_origin[&self.origin[l]].as_slice() {
                [a, b] => Ok(if *a == l { *b } else { *a }),
                _ => Err(Error::MissingSibling { view: l }),
            })
            .collect()
    }

    /// Same labels, new embeddings. The result is not marked normalized.
    pub fn with_embeddings(&self, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            embeddings,
            self.target_labels.clone(),
            self.sensitive_labels.clone(),
            self.origin.clone(),
        )
    }

    /// Same embeddings, new target labels.
    pub fn with_targets(&self, target_labels: Vec<usize>) -> Result<Self> {
        let mut b = Self::new(
            self.embeddings.clone(),
            target_labels,
            self.sensitive_labels.clone(),
            self.origin.clone(),
        )?;
        b.normalized = self.normalized;
        Ok(b)
    }

    /// Same embeddings, new sensitive labels.
    pub fn with_sensitive(&self, sensitive_labels: Vec<Option<usize>>) -> Result<Self> {
        let mut b = Self::new(
            self.embeddings.clone(),
            self.target_labels.clone(),
            sensitive_labels,
            self.origin.clone(),
        )?;
        b.normalized = self.normalized;
        Ok(b)
    }

    /// Reorders views so that view `l` of the result is view `order[l]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "permutation",
                expected: self.len(),
                found: order.len(),
            });
        }
        let mut b = Self::new(
            order.iter().map(|&i| self.embeddings[i].clone()).collect(),
            order.iter().map(|&i| self.target_labels[i]).collect(),
            order.iter().map(|&i| self.sensitive_labels[i]).collect(),
            order.iter().map(|&i| self.origin[i]).collect(),
        )?;
        b.normalized = self.normalized;
        Ok(b)
    }
}

/// Rescales every embedding to unit Euclidean norm.
pub fn normalize_embeddings(batch: &ViewBatch) -> Result<ViewBatch> {
    let mut out = Vec::with_capacity(batch.len());
    for (index, e) in batch.embeddings().iter().enumerate() {
        let n = norm(e);
        if !(n >= ZERO_NORM_FLOOR) {
            return Err(Error::ZeroVector { index, norm: n });
        }
        out.push(e.iter().map(|x| x / n).collect());
    }
    let mut b = batch.with_embeddings(out)?;
    b.normalized = true;
    Ok(b)
}

/// `exp(z_i · z_x / τ)`.
pub fn similarity_kernel(z_i: &[f64], z_x: &[f64], temperature: f64) -> Result<f64> {
    if z_i.len() != z_x.len() {
        return Err(Error::DimensionMismatch {
            expected: z_i.len(),
            found: z_x.len(),
        });
    }
    check_temperature(temperature)?;
    Ok((dot(z_i, z_x) / temperature).exp())
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Self-supervised: the sibling view is the only positive.
    #[serde(rename = "ss")]
    SelfSupervised,
    /// SupCon with the 1/|Z_p| factor outside the log.
    #[serde(rename = "supcon")]
    SupConOut,
    /// SupCon with the positive average inside the log.
    #[serde(rename = "supcon_in")]
    SupConIn,
    /// SupCon evaluated by iterating (target, sensitive) groups.
    #[serde(rename = "supcon_groupform")]
    SupConGroupForm,
    Fscl,
    FsclPlus,
    /// Label-free variant: sibling positive, same-sensitive denominator.
    FsclDagger,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::SelfSupervised,
        LossKind::SupConOut,
        LossKind::SupConIn,
        LossKind::SupConGroupForm,
        LossKind::Fscl,
        LossKind::FsclPlus,
        LossKind::FsclDagger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SelfSupervised => "ss",
            LossKind::SupConOut => "supcon",
            LossKind::SupConIn => "supcon_in",
            LossKind::SupConGroupForm => "supcon_groupform",
            LossKind::Fscl => "fscl",
            LossKind::FsclPlus => "fscl_plus",
            LossKind::FsclDagger => "fscl_dagger",
        }
    }

    pub fn uses_targets(self) -> bool {
        !matches!(self, LossKind::SelfSupervised | LossKind::FsclDagger)
    }

    pub fn uses_sensitive(self) -> bool {
        matches!(
            self,
            LossKind::Fscl | LossKind::FsclPlus | LossKind::FsclDagger
        )
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        let kind = match key.as_str() {
            "ss" | "simclr" | "self_supervised" => LossKind::SelfSupervised,
            "supcon" | "sup_out" | "supcon_out" => LossKind::SupConOut,
            "supcon_in" | "sup_in" => LossKind::SupConIn,
            "supcon_groupform" | "sup_groupform" => LossKind::SupConGroupForm,
            "fscl" => LossKind::Fscl,
            "fscl_plus" | "fscl_" | "fsclplus" => LossKind::FsclPlus,
            "fscl_dagger" => LossKind::FsclDagger,
            _ => return Err(Error::InvalidSpec(format!("unknown loss kind `{s}`"))),
        };
        Ok(kind)
    }
}

/// What to do with an anchor whose negative set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyNegativePolicy {
    /// Contribute zero and count the anchor in `skipped_anchors`.
    #[default]
    SkipAnchor,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub kind: LossKind,
    #[serde(default)]
    pub empty_negative_policy: EmptyNegativePolicy,
}

impl LossConfig {
    pub fn new(kind: LossKind, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self {
            temperature,
            kind,
            empty_negative_policy: EmptyNegativePolicy::SkipAnchor,
        })
    }

    pub fn with_policy(mut self, policy: EmptyNegativePolicy) -> Self {
        self.empty_negative_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)
    }
}

/// A 64-bit seed that fans out into independent ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Generator for stream `stream` of this seed.
    pub fn stream(self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }

    /// A child seed, independent of the parent's own streams.
    pub fn derive(self, tag: u64) -> RngSeed {
        RngSeed(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
