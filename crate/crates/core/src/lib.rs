//! Bayesian estimation of diffusion-tensor fields from Rician magnitude data.
//!
//! The Rice likelihood is augmented with latent Poisson counts so that, given
//! the counts, every voxel update is a Poisson GLM. A Gibbs–Metropolis chain
//! then alternates count, noise, tensor-block and hyperparameter updates under
//! an isotropic Gaussian Markov random field prior.
//!
//! Modules, bottom-up:
//!
//! * [`rice`]: Rice density, Bessel evaluation, augmentation samplers.
//! * [`design`]: gradient schemes, model families, design rows, tensor algebra.
//! * [`priors`]: isotropic precisions, field prior energies, voxel graphs.
//! * [`glm`]: the Poisson-GLM conditional, Fisher scoring, Laplace proposals.
//! * [`sampler`]: the Gibbs–Metropolis engine.
//! * [`data_io`]: datasets, phantoms and the WLS initializer.
//! * [`diagnostics`]: DIC, map and profile exports.
//!
//! Diffusion coefficients are expressed in units of 10⁻³ mm²/s; b-values in
//! gradient files stay in s/mm² and are rescaled when design rows are built
//! (see [`design::B_SCALE`]).

pub mod data_io;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod glm;
pub mod priors;
pub mod rice;
pub mod sampler;
pub mod special;

pub use error::{Error, Result};
