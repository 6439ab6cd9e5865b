//! Unsupervised clustering of uniform-linear-array channels by model order.
//!
//! The crate covers the whole pipeline:
//!
//! * [`channel_model`] draws conditionally Gaussian multipath channels whose
//!   covariance is the power-angular-spectrum integral of the steering
//!   vector outer product.
//! * [`spectral`] holds the unitary DFT and the circulant approximation of
//!   Toeplitz covariances.
//! * [`dataset`] builds, splits and serializes labeled channel datasets.
//! * [`nn`] is a small reverse-mode differentiation engine with the layers
//!   the encoder and decoder need, plus Adam.
//! * [`vae`] assembles the model and implements the scaled-identity and
//!   diagonal-covariance decoder likelihoods.
//! * [`mmd`] is the kernel two-sample test used to compare model orders.
//! * [`evalcluster`] scores how well the latent space separates the orders.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod channel_model;
pub mod cli;
pub mod dataset;
mod error;
pub mod evalcluster;
pub mod mmd;
pub mod nn;
pub mod rng;
pub mod spectral;
pub mod vae;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/channel_model.md")]
    mod channel_model {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/likelihoods.md")]
    mod likelihoods {}
    #[doc = include_str!("../../../book/src/mmd.md")]
    mod mmd {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
