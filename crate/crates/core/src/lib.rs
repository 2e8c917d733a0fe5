//! Diffusion adaptation for networks of online learners.

pub mod config;
pub mod drift;
pub mod engine;
pub mod io;
pub mod metrics;
pub mod report;
pub mod risk;
pub mod seed;
pub mod theory;
pub mod topology;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/learners.md")]
    mod learners {}
    #[doc = include_str!("../../../book/src/drift.md")]
    mod drift {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
