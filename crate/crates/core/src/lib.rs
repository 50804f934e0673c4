pub mod autograd;
pub mod checkpoint;
pub mod cross_modal;
pub mod detector;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompting;
pub mod tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    pub mod encoders {}
    #[doc = include_str!("../../../book/src/prompting.md")]
    pub mod prompting {}
    #[doc = include_str!("../../../book/src/cross_modal.md")]
    pub mod cross_modal {}
    #[doc = include_str!("../../../book/src/detector.md")]
    pub mod detector {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/harness.md")]
    pub mod harness {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
}
