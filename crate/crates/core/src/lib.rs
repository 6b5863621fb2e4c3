//! Modeling and interpolation of diffusion tensor (DTI) fields.
//!
//! A DTI field is a grid of 3×3 symmetric positive definite (SPD) matrices.
//! This crate models such a field as a generalized Wishart process: every
//! tensor is built from 3ν latent Gaussian process values as
//! `D(z) = Σᵢ L ûᵢ(z) ûᵢ(z)ᵀ Lᵀ`, which is SPD by construction. Posterior
//! inference over the latent values and the hyperparameters (kernel
//! length-scale θ, Cholesky scale factor L) runs by MCMC — elliptical slice
//! sampling for the latent vector, Metropolis–Hastings for θ and L — and
//! interpolation at new grid positions is GP conditioning of the latents
//! followed by the same tensor construction.
//!
//! The crate also carries everything needed to benchmark that interpolator
//! the way the DTI literature does: a Stejskal–Tanner forward model and
//! least-squares tensor estimation, synthetic field generators, a
//! downsample-by-two holdout split, and linear / log-Euclidean baseline
//! interpolators with Frobenius and affine-invariant Riemannian error
//! metrics.

pub mod baselines;
pub mod dmri;
pub mod error;
pub mod field;
pub mod gwp;
pub mod inference;
pub mod predict;
pub mod rng;
pub mod spd;

pub use error::{Error, Result};
