//! Robustness certification of classifiers under latent-space mutations of a
//! piece-wise linear generator.
//!
//! A mutation is a direction `ŝ` in the latent space of a generator `G`.
//! The latent segment `z → z + ‖δ_max‖·ŝ` is pushed exactly through `f ∘ G`
//! as a chain of affine pieces, which yields complete verdicts, the exact
//! maximum tolerance, and quantitative lower/upper bounds.

pub mod certify;
pub mod cli;
pub mod directions;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod regulate;
pub mod segprop;
pub mod synthetic;

pub use error::{Error, Result};
pub use network::{compose, Affine, Layer, Network};
pub use segprop::{propagate_box, propagate_segment, IntervalBox, Segment, SegmentChain};
