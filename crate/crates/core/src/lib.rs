//! Constructive Arnold diffusion for uncoupled a priori unstable Hamiltonians
//!
//! ```text
//! H_ε = ½|p|² + V(q) + G(I) + ε h(p, q, I, φ, t)
//! ```
//!
//! The pipeline runs bottom-up:
//!
//! * [`model`]: system data and the separatrix of the saddle at the origin;
//! * [`melnikov`]: the Melnikov potential L(I, φ, s) and its derivatives;
//! * [`reduction`]: minima of L, their continuation in I, and the reduced Poincaré function L*(I, θ);
//! * [`maps`]: scattering map, inner map and twist landing;
//! * [`ladder`] and [`chain`]: ascending ladders and certified transition chains;
//! * [`verify`]: direct integration of H_ε and action-jump measurements;
//! * [`genericity`]: perturbation design and degeneracy scans.
//!
//! All angles are radians with period 2π.

pub mod certify;
pub mod chain;
pub mod config;
pub mod export;
pub mod genericity;
pub mod ladder;
pub mod maps;
pub mod melnikov;
pub mod model;
pub mod ode;
pub mod quadrature;
pub mod reduction;
pub mod verify;

pub use model::{build_system, separatrix, Separatrix, SystemSpec};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("malformed series: {0}")]
    Malformed(String),
    #[error("the origin is not a critical point of V")]
    NotCritical,
    #[error("V has no non-degenerate maximum at q = 0 (largest Hessian eigenvalue {0:.3e})")]
    DegenerateMaximum(f64),
    #[error("twist condition violated: G''({0}) <= 0")]
    TwistViolation(f64),
    #[error("no homoclinic found: {0}")]
    NoHomoclinic(String),
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/melnikov.md")]
    mod melnikov {}
    #[doc = include_str!("../../../book/src/reduction.md")]
    mod reduction {}
    #[doc = include_str!("../../../book/src/maps.md")]
    mod maps {}
    #[doc = include_str!("../../../book/src/ladder.md")]
    mod ladder {}
    #[doc = include_str!("../../../book/src/chain.md")]
    mod chain {}
    #[doc = include_str!("../../../book/src/verify.md")]
    mod verify {}
    #[doc = include_str!("../../../book/src/genericity.md")]
    mod genericity {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
