//! Class balancing for imbalanced tabular data.
//!
//! The pipeline loads a typed dataset ([`dataio`]), encodes it into a numeric
//! matrix ([`encode`]), trains a conditional Wasserstein GAN with gradient
//! penalty ([`gan`], on top of [`nn`] and [`autodiff`]) or runs the SMOTE and
//! ADASYN oversamplers ([`baselines`]), and measures variability, diversity and
//! classification efficacy with a fixed random forest ([`eval`], [`forest`]).

pub mod augment;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod dataio;
pub mod encode;
pub mod eval;
pub mod forest;
pub mod gan;
pub mod nn;
pub mod seed;
