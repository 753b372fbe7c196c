// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detect;
pub mod eval;
pub mod geoloc;
pub mod geometry;
pub mod onboard;
pub mod pipeline;
pub mod preproc;
pub mod scene;
pub mod track;
pub mod wire;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/geolocation.md")]
    mod geolocation {}
    #[doc = include_str!("../../../book/src/wire.md")]
    mod wire {}
    #[doc = include_str!("../../../book/src/onboard.md")]
    mod onboard {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
