//! Dialogue-aware engagement estimation with hybrid chunked-attention /
//! state-space blocks, a small reverse-mode autograd, and scaling benchmarks.

pub mod autograd;
pub mod bench;
pub mod block;
pub mod config;
pub mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

// The guide's listings run as doctests; one module per chapter so a failure
// points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/scan.md")]
    mod scan {}
    #[doc = include_str!("../../../book/src/hybrid-block.md")]
    mod hybrid_block {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/dialogue-model.md")]
    mod dialogue_model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
