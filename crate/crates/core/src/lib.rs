//! Fair supervised contrastive learning at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`domain`]: view batches, loss configuration, the similarity kernel and seeded randomness.
//! - [`partition`]: per-anchor sample sets (positives, intra-group, target inter-group, ...).
//! - [`losses`]: SimCLR-style, SupCon (out/in/group forms), FSCL, FSCL+ and the label-free FSCL
//!   variant, each with an exact analytic gradient.
//! - [`metrics`]: confusion tensors, equalized odds, demographic parity, equal opportunity,
//!   similarity dispersion and a linear sensitive-information probe.
//! - [`synth`]: ideally biased label sets, α-imbalanced splits, feature and embedding generators.
//! - [`theorem`]: the V = Ĉ(−V_p + V_a) decomposition of the SupCon loss, closed-form counts and
//!   the ΔV study over ensembles with increasing sensitive information.
//! - [`trainer`]: a two-stage encoder/projection/classifier pipeline trained with SGD.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the `parallel` feature is
//! enabled (default) and plain iterators otherwise.

// `!(x >= floor)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod domain;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod par;
pub mod partition;
pub mod synth;
pub mod theorem;
pub mod trainer;

pub use domain::{
    normalize_embeddings, similarity_kernel, EmptyNegativePolicy, LossConfig, LossKind, RngSeed,
    ViewBatch,
};
pub use error::{Error, Result};
pub use losses::LossResult;
pub use partition::{build_partition, group_census, GroupCensus, PartitionIndex};
