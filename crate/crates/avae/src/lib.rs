//! Adversarially trained variational auto-encoder for small raster images.
//!
//! The crate pairs a convolutional VAE (the generator) with an auto-encoder
//! discriminator. The discriminator assigns a reconstruction *energy* to real
//! images, prior samples and VAE reconstructions; a proportional-integral-
//! derivative controller balances the two players by adapting the weight of
//! the fake-image energies in the discriminator objective.
//!
//! Layout:
//! - [`tensor`] — dense tensors, a reverse-mode op tape and Adam
//! - [`nn`] — conv/linear layers and the shared image backbones
//! - [`vae`] / [`discriminator`] — the two players
//! - [`controller`] — equilibrium gain control
//! - [`train`] — the three-way update loop, metrics and running stats
//! - [`latent`] — interpolation and attribute-vector arithmetic
//! - [`score`] — a small classifier and the exp-KL sample-quality score
//! - [`data`] / [`grid`] / [`checkpoint`] — image folders, grids, persistence
//! - [`synth`] — deterministic toy dataset used by the tests and examples

pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod grid;
pub mod latent;
pub mod nn;
pub mod score;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vae;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Adam, Graph, Tensor, VarId};
