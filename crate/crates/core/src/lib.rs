//! Optimal storing and dispatching for a grid-connected energy producer with
//! battery storage.
//!
//! * [`model`]: clipped battery dynamics, admissibility, payoff, regime criteria.
//! * [`market`]: latent-factor diffusion for production and price.
//! * [`smoothing`]: ramp and mollifier approximants of the discontinuous coefficients.
//! * [`hjb`]: backward grid solver, feedback policies, Monte-Carlo policy evaluation.
//! * [`dual`]: martingale penalties and pathwise upper bounds.
//! * [`regime`]: random bang-bang search for oscillating charge regimes.

pub mod dual;
pub mod error;
pub mod hjb;
pub mod market;
pub mod model;
pub mod regime;
pub mod smoothing;
pub mod stats;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
