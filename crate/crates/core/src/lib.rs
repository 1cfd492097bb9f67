//! Partially relevant video retrieval on CPU.
//!
//! Videos are encoded by a frame branch and a clip branch, each built from
//! multi-scale Gaussian-constrained attention blocks mixed by a temporal
//! consolidation module. Queries are scored against both branches. Training
//! combines ranking losses with a query diversity term and an optimal
//! matching term. Synthetic corpora with planted moments drive everything.
//!
//! The guide in `book/` walks through each module; its snippets are
//! compiled as doctests of this crate.

pub mod codec;
pub mod datagen;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod gaussian_attention;
pub mod losses;
pub mod matching;
pub mod numerics;
pub mod retrieval;
pub mod tape;
pub mod tc_gmmblock;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
