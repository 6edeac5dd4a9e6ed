//! Attribution for transformers with heterogeneous attention.
//!
//! Attention maps are corrected head-wise by their loss gradients
//! ([`correction`]), then connected across layers ([`propagation`]) with
//! rollout on homogeneous self-attention and a source-separated residual
//! update on cross-attention and post-fusion self-attention. The result is a
//! pair of attribution matrices per stream, one per information source.
//!
//! [`toy`] provides deterministic small transformers that emit real traces,
//! [`evaluation`] the segmentation and perturbation metrics, and [`format`]
//! the binary trace interchange format.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correction;
pub mod evaluation;
pub mod exec;
pub mod fixtures;
pub mod format;
pub mod oracle;
pub mod propagation;
pub mod saliency;
pub mod selftest;
pub mod suite;
pub mod toy;
pub mod trace;

pub use correction::{correct_and_average, CorrectionMode};
pub use exec::Exec;
pub use propagation::{
    hetero_step, noise_link, propagate, propagate_with, rollout_step, PropagateOptions,
    PropagationResult, StreamState,
};
pub use saliency::SaliencyMap;
pub use trace::{AttentionTrace, LayerKind, LayerRecord, StreamId, TokenMeta};
