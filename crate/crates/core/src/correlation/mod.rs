//! Standard and Symmetric Correlation attention over token matrices, the
//! per-support contribution index and the deviation of a designated support.

mod attention;
mod contribution;
mod projector;
mod tokens;

pub use attention::{
    multi_head_sc, sc_logits, sc_project, standard_attention, symmetric_attention, AttentionMap,
    Correlation,
};
pub use contribution::{contribution_index, deviation, ContributionReport};
pub use projector::{Affine, ScProjector, ScaleMode};
pub use tokens::{spans_for, Span, SupportPack, TokenMatrix};
