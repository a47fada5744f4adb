//! Anchor-relative sample sets.
//!
//! For anchor `i` with target `y_i` and sensitive class `s_i`:
//!
//! | set                      | same target | same sensitive |
//! |--------------------------|-------------|----------------|
//! | `intra_group` (IG)       | yes         | yes            |
//! | `sensitive_inter_group`  | yes         | no             |
//! | `target_inter_group`     | no          | yes            |
//! | `target_sensitive_inter` | no          | no             |
//!
//! `positives` is every other view of the same target class, `all_others` every other view.
//! Views with an unknown sensitive label stay in `positives`/`all_others` but are left out of the
//! four sensitive-aware sets; an anchor with an unknown label has all four empty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::ViewBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnchorSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub all_others: Vec<usize>,
    pub intra_group: Vec<usize>,
    pub sensitive_inter_group: Vec<usize>,
    pub target_inter_group: Vec<usize>,
    pub target_sensitive_inter_group: Vec<usize>,
    /// Positives split by their (known) sensitive class.
    pub positives_by_sensitive: BTreeMap<usize, Vec<usize>>,
    /// Other views with the anchor's sensitive class, regardless of target.
    pub same_sensitive: Vec<usize>,
    pub sensitive_known: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionIndex {
    anchors: Vec<AnchorSets>,
}

impl PartitionIndex {
    pub fn anchor(&self, i: usize) -> &AnchorSets {
        &self.anchors[i]
    }

    pub fn anchors(&self) -> &[AnchorSets] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Partition for a fully labelled batch. Fails on the first view with an unknown sensitive label.
pub fn build_partition(batch: &ViewBatch) -> Result<PartitionIndex> {
    if let Some(anchor) = batch.sensitive().iter().position(Option::is_none) {
        return Err(Error::UnknownSensitiveLabel { anchor });
    }
    Ok(build_partition_masked(batch))
}

/// Partition that tolerates unknown sensitive labels by masking them out of the sensitive-aware
/// sets.
pub fn build_partition_masked(batch: &ViewBatch) -> PartitionIndex {
    let ys = batch.targets();
    let ss = batch.sensitive();
    let anchors = crate::par::map_range(batch.len(), |i| {
        let mut a = AnchorSets {
            sensitive_known: ss[i].is_some(),
            ..Default::default()
        };
        for x in 0..ys.len() {
            if x == i {
                continue;
            }
            a.all_others.push(x);
            let same_y = ys[x] == ys[i];
            if same_y {
                a.positives.push(x);
            } else {
                a.negatives.push(x);
            }
            let (Some(si), Some(sx)) = (ss[i], ss[x]) else {
                if same_y {
                    if let Some(sx) = ss[x] {
                        a.positives_by_sensitive.entry(sx).or_default().push(x);
                    }
                }
                continue;
            };
            let same_s = si == sx;
            if same_s {
                a.same_sensitive.push(x);
            }
            match (same_y, same_s) {
                (true, true) => a.intra_group.push(x),
                (true, false) => a.sensitive_inter_group.push(x),
                (false, true) => a.target_inter_group.push(x),
                (false, false) => a.target_sensitive_inter_group.push(x),
            }
            if same_y {
                a.positives_by_sensitive.entry(sx).or_default().push(x);
            }
        }
        a
    });
    PartitionIndex { anchors }
}

/// Counts of views per `(target, sensitive)` group. Views with unknown sensitive labels are not
/// counted.
#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupCensus {
    #[serde_as(as = "Vec<(_, _)>")]
    pub counts: BTreeMap<(usize, usize), usize>,
}

impl GroupCensus {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, y: usize, s: usize) -> usize {
        self.counts.get(&(y, s)).copied().unwrap_or(0)
    }
}

pub fn group_census(batch: &ViewBatch) -> GroupCensus {
    let mut counts = BTreeMap::new();
    for (&y, s) in batch.targets().iter().zip(batch.sensitive()) {
        if let Some(s) = s {
            *counts.entry((y, *s)).or_insert(0) += 1;
        }
    }
    GroupCensus { counts }
}
