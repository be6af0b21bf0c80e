//! Deterministic numerics shared by every other module.

mod distance;
mod rng;
mod sobol;
mod sobol_table;
pub mod stats;

pub use distance::{euclidean, pairwise_sq_distances, sq_distance};
pub use rng::Rng;
pub use sobol::{sobol_points, SobolSequence, MAX_SOBOL_DIMENSION};
