//! Self-supervised skeleton action localization: contrastive snippet
//! pretraining over a lite graph encoder, multiscale nested-skip fusion,
//! frame classification, and segment-level evaluation — all on a small
//! f64 tape-based autodiff core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod suite;
pub mod tensor;

/// The guide's chapters, included as rustdoc so `cargo test --doc` compiles
/// and runs every code block in the book. One module per chapter keeps test
/// failures attributable to a file.
#[doc(hidden)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub mod encoder {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    pub mod pretraining {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    pub mod fusion {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/experiment.md")]
    pub mod experiment {}
}
