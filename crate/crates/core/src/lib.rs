//! Harmonic measure flow of anisotropic Hastings–Levitov growth.
//!
//! A boundary point of a growing slit cluster moves by `γ̃(X − θ)` with each
//! particle. This crate simulates that Markov chain, its deterministic
//! limit `ẋ = b(x)` and its `c^{1/4}` fluctuations. The guide in `book/`
//! walks through the modules in order.

pub mod analysis;
pub mod cluster;
pub mod error;
pub mod experiment;
pub mod field;
pub mod flow;
pub mod measure;
pub mod ode;
pub mod particle;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};

// Compiles and runs the guide's snippets as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/particle.md")]
    mod particle {}
    #[doc = include_str!("../../../book/src/measure.md")]
    mod measure {}
    #[doc = include_str!("../../../book/src/field.md")]
    mod field {}
    #[doc = include_str!("../../../book/src/ode.md")]
    mod ode {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cluster.md")]
    mod cluster {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
