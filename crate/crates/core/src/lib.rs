//! Prototype discovery on top of surrogate-assisted illumination.
//!
//! The crate is organised bottom-up:
//!
//! - [`math`]: Sobol sequences, seeded random streams, distance matrices.
//! - [`surrogate`]: Gaussian-process regression and the UCB acquisition value.
//! - [`qd`]: feature maps, MAP-Elites and SAIL.
//! - [`embedding`]: t-SNE, a PCA baseline and the G+ cluster-quality score.
//! - [`clustering`]: DBSCAN, L-Method epsilon selection and medoid prototypes.
//! - [`domains`]: the deformable 2-D profile domain, a 1-D toy domain and the
//!   external evaluator protocol.
//! - [`ideation`]: the iterate/extract/select loop and its run state.
//! - [`store`]: run persistence and exports.
//! - [`experiments`]: the paired comparisons used by the CLI and the
//!   acceptance suite.

pub mod clustering;
pub mod domains;
pub mod embedding;
mod error;
pub mod experiments;
pub mod ideation;
pub mod math;
pub mod qd;
pub mod store;
pub mod surrogate;

pub use error::{Error, Result};

/// A real-valued design parameter vector.
pub type Genome = Vec<f64>;

/// Per-dimension box bounds of the parameter space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Validation(format!(
                    "bound {i} is not a finite interval: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn range(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    /// Map a genome into the unit hypercube.
    pub fn normalize(&self, genome: &[f64]) -> Vec<f64> {
        genome
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.lower[i]) / self.range(i))
            .collect()
    }

    /// Map a unit-hypercube point back into the parameter box.
    pub fn denormalize(&self, unit: &[f64]) -> Genome {
        unit.iter()
            .enumerate()
            .map(|(i, u)| self.lower[i] + u * self.range(i))
            .collect()
    }

    pub fn clamp(&self, genome: &mut [f64]) -> bool {
        let mut clamped = false;
        for (i, x) in genome.iter_mut().enumerate() {
            let c = x.clamp(self.lower[i], self.upper[i]);
            if c != *x {
                clamped = true;
                *x = c;
            }
        }
        clamped
    }

    pub fn contains(&self, genome: &[f64]) -> bool {
        genome.len() == self.dim()
            && genome
                .iter()
                .enumerate()
                .all(|(i, x)| *x >= self.lower[i] && *x <= self.upper[i])
    }
}
