//! Evaluation domains and their descriptors.

pub mod airfoil;
pub mod external;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::qd::{Evaluation, Evaluator, FeatureDim, MapConfig};
use crate::{Bounds, Error, Genome, Result};

pub use airfoil::Airfoil2d;
pub use external::{ExternalConfig, ExternalEvaluator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatorKind {
    BuiltinAnalytic,
    External,
}

/// Everything needed to search a domain: parameter box, feature map and how
/// designs get evaluated. Written to disk for external evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub name: String,
    pub bounds: Bounds,
    pub evaluator: EvaluatorKind,
    pub map: MapConfig,
    /// Free-form settings kept for reference only (solver conditions etc.).
    #[serde(default)]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl DomainDescriptor {
    pub fn parameter_count(&self) -> usize {
        self.bounds.dim()
    }

    pub fn validate(&self) -> Result<()> {
        Bounds::new(self.bounds.lower.clone(), self.bounds.upper.clone())?;
        self.map.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// An evaluator together with its descriptor.
pub trait Domain: Evaluator + Send {
    fn descriptor(&self) -> &DomainDescriptor;

    /// Outline of a design for display, when the domain has one.
    fn shape(&self, _genome: &[f64]) -> Option<Vec<[f64; 2]>> {
        None
    }

    /// Whether evaluations are cheap enough to repeat for reporting.
    fn is_analytic(&self) -> bool {
        self.descriptor().evaluator == EvaluatorKind::BuiltinAnalytic
    }
}

impl Domain for Airfoil2d {
    fn descriptor(&self) -> &DomainDescriptor {
        Airfoil2d::descriptor(self)
    }

    fn shape(&self, genome: &[f64]) -> Option<Vec<[f64; 2]>> {
        airfoil::ffd_deform(self.base(), genome).ok().map(|(s, _)| s)
    }
}

/// One parameter in `[0, 1]`, fitness `-(x - 0.4)^2`, feature `x` over ten
/// bins. The second feature is constant.
#[derive(Debug, Clone)]
pub struct Toy1d {
    descriptor: DomainDescriptor,
}

impl Toy1d {
    pub const NAME: &'static str = "toy1d";

    pub fn new() -> Self {
        Self {
            descriptor: DomainDescriptor {
                name: Self::NAME.into(),
                bounds: Bounds::uniform(1, 0.0, 1.0),
                evaluator: EvaluatorKind::BuiltinAnalytic,
                map: MapConfig {
                    features: [FeatureDim::new("x", 0.0, 1.0), FeatureDim::new("unused", 0.0, 1.0)],
                    resolution: [10, 1],
                },
                provenance: serde_json::Map::new(),
            },
        }
    }

    pub fn fitness(x: f64) -> f64 {
        -(x - 0.4) * (x - 0.4)
    }

    pub fn evaluate(genome: &[f64]) -> Evaluation {
        Evaluation {
            fitness: Self::fitness(genome[0]),
            features: [genome[0], 0.0],
        }
    }
}

impl Default for Toy1d {
    fn default() -> Self {
        Self::new()
    }
}

impl Evaluator for Toy1d {
    fn cheap_features(&self, genome: &[f64]) -> Option<[f64; 2]> {
        Some([genome[0], 0.0])
    }

    fn evaluate_batch(&self, genomes: &[Genome]) -> Vec<std::result::Result<Evaluation, String>> {
        genomes
            .iter()
            .map(|g| {
                if g.len() != 1 {
                    Err(format!("expected 1 parameter, got {}", g.len()))
                } else {
                    Ok(Self::evaluate(g))
                }
            })
            .collect()
    }
}

impl Domain for Toy1d {
    fn descriptor(&self) -> &DomainDescriptor {
        &self.descriptor
    }
}

pub const MIRROR3D: &str = "mirror3d";

/// The 51-parameter mirror domain. It has no built-in evaluator; designs
/// are scored by an external process.
pub fn mirror3d_descriptor() -> DomainDescriptor {
    let mut provenance = serde_json::Map::new();
    provenance.insert("flow_speed_m_s".into(), 11.0.into());
    provenance.insert("objective".into(), "drag force [N]".into());
    DomainDescriptor {
        name: MIRROR3D.into(),
        bounds: Bounds::uniform(51, -1.0, 1.0),
        evaluator: EvaluatorKind::External,
        map: MapConfig {
            features: [FeatureDim::new("edge_curvature", 0.0, 1.0), FeatureDim::new("length", 0.0, 1.0)],
            resolution: [16, 16],
        },
        provenance,
    }
}

pub fn builtin_names() -> [&'static str; 3] {
    [Airfoil2d::NAME, Toy1d::NAME, MIRROR3D]
}

pub fn descriptor(name: &str) -> Result<DomainDescriptor> {
    match name {
        Airfoil2d::NAME => Ok(Airfoil2d::new()?.descriptor().clone()),
        Toy1d::NAME => Ok(Toy1d::new().descriptor.clone()),
        MIRROR3D => Ok(mirror3d_descriptor()),
        other => Err(Error::NotFound(format!("domain {other}"))),
    }
}

/// Instantiates a domain. With an external configuration every domain is
/// evaluated by the external process; otherwise the domain must have a
/// built-in evaluator.
pub fn open(name: &str, external: Option<&ExternalConfig>) -> Result<Arc<dyn Domain>> {
    let descriptor = descriptor(name)?;
    if let Some(cfg) = external {
        return Ok(Arc::new(ExternalEvaluator::new(descriptor, cfg.clone())?));
    }
    match name {
        Airfoil2d::NAME => Ok(Arc::new(Airfoil2d::new()?)),
        Toy1d::NAME => Ok(Arc::new(Toy1d::new())),
        _ => Err(Error::Validation(format!("domain {name} needs an external evaluator command"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_validate_and_round_trip() {
        for name in builtin_names() {
            let d = descriptor(name).unwrap();
            d.validate().unwrap();
            let back: DomainDescriptor = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
            assert_eq!(back, d);
        }
        assert_eq!(descriptor(Airfoil2d::NAME).unwrap().parameter_count(), 10);
        assert_eq!(descriptor(Airfoil2d::NAME).unwrap().map.resolution, [25, 25]);
        assert_eq!(descriptor(MIRROR3D).unwrap().parameter_count(), 51);
        assert_eq!(descriptor(MIRROR3D).unwrap().map.resolution, [16, 16]);
        assert!(matches!(descriptor("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn mirror_requires_external() {
        assert!(open(MIRROR3D, None).is_err());
        assert!(open(Airfoil2d::NAME, None).unwrap().is_analytic());
    }

    #[test]
    fn toy_values() {
        let t = Toy1d::new();
        let out = t.evaluate_batch(&[vec![0.4], vec![0.0], vec![]]);
        assert_eq!(out[0].as_ref().unwrap().fitness, 0.0);
        assert!((out[1].as_ref().unwrap().fitness + 0.16).abs() < 1e-15);
        assert!(out[2].is_err());
    }
}
