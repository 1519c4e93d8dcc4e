//! Linearized cavity optomechanics with in-loop amplitude feedback.
//!
//! The library evaluates the feedback-modified cavity susceptibility, the
//! optomechanical self-energies of a two-mode mechanical doublet, symmetrized
//! displacement spectra and phonon occupancies, and provides a stochastic
//! time-domain integrator of the same linear equations for cross-checks.

pub mod model;
pub mod cavity;
pub mod steady;
pub mod operating;
pub mod mechanics;
pub mod closed_loop;
pub mod spectra;
pub mod fit;
pub mod oracle;
pub mod periodogram;
pub mod config;

pub use model::*;
