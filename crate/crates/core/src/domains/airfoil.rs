//! Deformable 2-D profile: a cambered base section, a 5x2 free-form
//! deformation lattice and an analytic stand-in for the flow solver.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::qd::{Evaluation, Evaluator, FeatureDim, MapConfig};
use crate::{Bounds, Error, Genome, Result};

use super::{DomainDescriptor, EvaluatorKind};

pub type Vertex = [f64; 2];

pub const STATIONS: usize = 41;
pub const LATTICE_COLUMNS: usize = 5;
pub const LATTICE_ROWS: usize = 2;
pub const PARAMETERS: usize = LATTICE_COLUMNS * LATTICE_ROWS;
/// Largest vertical displacement of a single control point.
pub const MAX_DISPLACEMENT: f64 = 0.06;

const CAMBER: f64 = 0.02;
const CAMBER_POSITION: f64 = 0.4;
const THICKNESS: f64 = 0.12;

/// Undeformed profile and the lattice that covers it.
///
/// Vertices run from the upper trailing edge over the leading edge to the
/// lower trailing edge. Both surfaces share the chord stations: vertices
/// `STATIONS - 1 - k` and `STATIONS - 1 + k` have the same x.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseShape {
    pub vertices: Vec<Vertex>,
    pub lattice: Lattice,
}

/// Control points on a regular `columns x rows` grid over a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub columns: usize,
    pub rows: usize,
}

impl Lattice {
    pub fn control_points(&self) -> Vec<Vertex> {
        let mut out = Vec::with_capacity(self.columns * self.rows);
        for r in 0..self.rows {
            for c in 0..self.columns {
                out.push([
                    self.x.0 + (self.x.1 - self.x.0) * c as f64 / (self.columns - 1) as f64,
                    self.y.0 + (self.y.1 - self.y.0) * r as f64 / (self.rows - 1) as f64,
                ]);
            }
        }
        out
    }

    /// Blend weight of control point `(column, row)` at `v`: a hat function
    /// along x times a linear ramp along y. Weights sum to one.
    pub fn weight(&self, v: Vertex, column: usize, row: usize) -> f64 {
        let s = ((v[0] - self.x.0) / (self.x.1 - self.x.0)).clamp(0.0, 1.0);
        let t = ((v[1] - self.y.0) / (self.y.1 - self.y.0)).clamp(0.0, 1.0);
        let h = (self.columns - 1) as f64;
        let ws = (1.0 - (s * h - column as f64).abs()).max(0.0);
        let hr = (self.rows - 1) as f64;
        let wt = (1.0 - (t * hr - row as f64).abs()).max(0.0);
        ws * wt
    }
}

impl BaseShape {
    /// Four-digit style cambered section with a finite trailing edge,
    /// cosine-spaced stations and thickness applied vertically.
    pub fn reference() -> Self {
        let xs: Vec<f64> = (0..STATIONS)
            .map(|i| 0.5 * (1.0 - (PI * i as f64 / (STATIONS - 1) as f64).cos()))
            .collect();
        let thickness = |x: f64| {
            5.0 * THICKNESS
                * (0.2969 * x.sqrt() - 0.1260 * x - 0.3516 * x * x + 0.2843 * x.powi(3) - 0.1015 * x.powi(4))
        };
        let camber = |x: f64| {
            if x < CAMBER_POSITION {
                CAMBER / CAMBER_POSITION.powi(2) * (2.0 * CAMBER_POSITION * x - x * x)
            } else {
                CAMBER / (1.0 - CAMBER_POSITION).powi(2) * (1.0 - 2.0 * CAMBER_POSITION + 2.0 * CAMBER_POSITION * x - x * x)
            }
        };
        let mut vertices = Vec::with_capacity(2 * STATIONS - 1);
        for &x in xs.iter().rev() {
            vertices.push([x, camber(x) + thickness(x)]);
        }
        for &x in &xs[1..] {
            vertices.push([x, camber(x) - thickness(x)]);
        }
        let (ymin, ymax) = y_extent(&vertices);
        let lattice = Lattice {
            x: (0.0, 1.0),
            y: (ymin, ymax),
            columns: LATTICE_COLUMNS,
            rows: LATTICE_ROWS,
        };
        Self { vertices, lattice }
    }
}

fn y_extent(vertices: &[Vertex]) -> (f64, f64) {
    vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[1]), hi.max(v[1])))
}

pub fn parameter_bounds() -> Bounds {
    Bounds::uniform(PARAMETERS, -MAX_DISPLACEMENT, MAX_DISPLACEMENT)
}

/// Displaces every vertex vertically by the blended control-point
/// displacements. Parameter `row * columns + column` moves control point
/// `(column, row)`, row 0 being the bottom. Out-of-bounds parameters are
/// clamped; the flag reports whether that happened.
pub fn ffd_deform(base: &BaseShape, params: &[f64]) -> Result<(Vec<Vertex>, bool)> {
    let l = &base.lattice;
    if params.len() != l.columns * l.rows {
        return Err(Error::DimensionMismatch {
            expected: l.columns * l.rows,
            found: params.len(),
        });
    }
    let mut p = params.to_vec();
    let clamped = parameter_bounds().clamp(&mut p);
    let out = base
        .vertices
        .iter()
        .map(|&v| {
            let mut dy = 0.0;
            for r in 0..l.rows {
                for c in 0..l.columns {
                    let d = p[r * l.columns + c];
                    if d != 0.0 {
                        dy += l.weight(v, c, r) * d;
                    }
                }
            }
            if dy == 0.0 {
                v
            } else {
                [v[0], v[1] + dy]
            }
        })
        .collect();
    Ok((out, clamped))
}

/// Highest vertex; ties go to the smallest x.
pub fn features_2d(shape: &[Vertex]) -> Result<[f64; 2]> {
    let first = *shape.first().ok_or(Error::InvalidData("empty shape".into()))?;
    Ok(shape.iter().skip(1).fold(first, |best, v| {
        if v[1] > best[1] || (v[1] == best[1] && v[0] < best[0]) {
            *v
        } else {
            best
        }
    }))
}

/// `-ln(cD) * p_cL * p_A` with the lift and area penalties.
pub fn fitness_compose(cd: f64, cl: f64, area: f64, cl0: f64, area0: f64) -> Result<f64> {
    if !(cd > 0.0) {
        return Err(Error::Validation(format!("drag coefficient must be positive, got {cd}")));
    }
    if !(area0 > 0.0) {
        return Err(Error::Validation(format!("reference area must be positive, got {area0}")));
    }
    Ok(-cd.ln() * lift_penalty(cl, cl0) * area_penalty(area, area0))
}

/// `(cL/cL0)^2` below the reference lift, else 1. Negative lift is treated
/// as zero lift, so the factor never exceeds 1.
pub fn lift_penalty(cl: f64, cl0: f64) -> f64 {
    if cl < cl0 {
        (cl.max(0.0) / cl0).powi(2)
    } else {
        1.0
    }
}

pub fn area_penalty(area: f64, area0: f64) -> f64 {
    (1.0 - (area - area0).abs() / area0).max(0.0).powi(7)
}

/// Shoelace area, positive for either orientation.
pub fn polygon_area(shape: &[Vertex]) -> f64 {
    let n = shape.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (shape[i], shape[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    0.5 * twice.abs()
}

fn orient(a: Vertex, b: Vertex, c: Vertex) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Vertex, b: Vertex, p: Vertex) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: Vertex, b: Vertex, c: Vertex, d: Vertex) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Whether any two non-adjacent edges of the closed polygon touch.
pub fn self_intersects(shape: &[Vertex]) -> bool {
    let n = shape.len();
    for i in 0..n {
        let (a, b) = (shape[i], shape[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(a, b, shape[j], shape[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub cd: f64,
    pub cl: f64,
    pub area: f64,
}

/// Smooth, cheap surrogate for drag, lift and area of a profile laid out
/// like [`BaseShape::reference`].
///
/// Lift is proportional to the integrated mean line; drag is a constant
/// plus a thickness term plus a roughness term that sums the squared
/// change of each vertex's turning angle relative to the base profile.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticProxy {
    base_turning: Vec<f64>,
    pub k0: f64,
    pub k_thickness: f64,
    pub k_roughness: f64,
    pub k_lift: f64,
    pub cl0: f64,
    pub area0: f64,
}

impl AnalyticProxy {
    pub const TARGET_BASE_DRAG: f64 = 0.01;

    /// Calibrates the constants so that `base` has `cD = 0.01` and defines
    /// the reference lift and area.
    pub fn calibrate(base: &BaseShape) -> Result<Self> {
        let k_thickness = 0.25;
        let k_lift = 4.0 * PI;
        let (camber, thickness) = camber_and_thickness(&base.vertices)?;
        let k0 = Self::TARGET_BASE_DRAG - k_thickness * thickness * thickness;
        if !(k0 > 0.0) {
            return Err(Error::Validation("base profile too thick to calibrate drag".into()));
        }
        Ok(Self {
            base_turning: turning_angles(&base.vertices),
            k0,
            k_thickness,
            k_roughness: 0.05,
            k_lift,
            cl0: k_lift * camber,
            area0: polygon_area(&base.vertices),
        })
    }

    pub fn evaluate(&self, shape: &[Vertex]) -> Result<Coefficients> {
        if shape.len() != self.base_turning.len() {
            return Err(Error::DimensionMismatch {
                expected: self.base_turning.len(),
                found: shape.len(),
            });
        }
        if self_intersects(shape) {
            return Err(Error::InvalidData("profile self-intersects".into()));
        }
        let (camber, thickness) = camber_and_thickness(shape)?;
        let roughness: f64 = turning_angles(shape)
            .iter()
            .zip(&self.base_turning)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok(Coefficients {
            cd: self.k0 + self.k_thickness * thickness * thickness + self.k_roughness * roughness,
            cl: self.k_lift * camber,
            area: polygon_area(shape),
        })
    }

    pub fn fitness(&self, c: &Coefficients) -> Result<f64> {
        fitness_compose(c.cd, c.cl, c.area, self.cl0, self.area0)
    }
}

/// Trapezoidal integral of the mean line and the maximum thickness.
fn camber_and_thickness(shape: &[Vertex]) -> Result<(f64, f64)> {
    let n = shape.len();
    if n < 8 || n % 2 == 0 {
        return Err(Error::InvalidData(format!("profile needs an odd vertex count >= 8, got {n}")));
    }
    let m = (n + 1) / 2;
    let upper = |k: usize| shape[m - 1 - k];
    let lower = |k: usize| shape[m - 1 + k];
    let mut integral = 0.0;
    let mut thickness: f64 = 0.0;
    for k in 0..m {
        thickness = thickness.max(upper(k)[1] - lower(k)[1]);
        if k > 0 {
            let mid = |k: usize| 0.5 * (upper(k)[1] + lower(k)[1]);
            integral += 0.5 * (mid(k) + mid(k - 1)) * (upper(k)[0] - upper(k - 1)[0]);
        }
    }
    Ok((integral, thickness))
}

fn turning_angles(shape: &[Vertex]) -> Vec<f64> {
    let n = shape.len();
    (0..n)
        .map(|i| {
            let (a, b, c) = (shape[(i + n - 1) % n], shape[i], shape[(i + 1) % n]);
            let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
            let (vx, vy) = (c[0] - b[0], c[1] - b[1]);
            (ux * vy - uy * vx).atan2(ux * vx + uy * vy)
        })
        .collect()
}

/// Full design evaluation on the analytic proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub shape: Vec<Vertex>,
    pub clamped: bool,
    pub coefficients: Coefficients,
    pub fitness: f64,
    pub features: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Airfoil2d {
    base: BaseShape,
    proxy: AnalyticProxy,
    descriptor: DomainDescriptor,
}

impl Airfoil2d {
    pub const NAME: &'static str = "airfoil2d";

    pub fn new() -> Result<Self> {
        let base = BaseShape::reference();
        let proxy = AnalyticProxy::calibrate(&base)?;
        let descriptor = Self::describe(&base);
        Ok(Self {
            base,
            proxy,
            descriptor,
        })
    }

    /// Feature ranges are the base profile's bounding box widened by the
    /// largest displacement, so every reachable design falls inside.
    fn describe(base: &BaseShape) -> DomainDescriptor {
        let (ymin, ymax) = y_extent(&base.vertices);
        let features = [
            FeatureDim::new("x_up", base.lattice.x.0, base.lattice.x.1),
            FeatureDim::new("y_up", ymin - MAX_DISPLACEMENT, ymax + MAX_DISPLACEMENT),
        ];
        let mut provenance = serde_json::Map::new();
        provenance.insert("angle_of_attack_deg".into(), 2.7.into());
        provenance.insert("mach".into(), 0.5.into());
        provenance.insert("reynolds".into(), 1e6.into());
        provenance.insert("evaluator".into(), "analytic proxy".into());
        DomainDescriptor {
            name: Self::NAME.into(),
            bounds: parameter_bounds(),
            evaluator: EvaluatorKind::BuiltinAnalytic,
            map: MapConfig {
                features,
                resolution: [25, 25],
            },
            provenance,
        }
    }

    pub fn descriptor(&self) -> &DomainDescriptor {
        &self.descriptor
    }

    pub fn base(&self) -> &BaseShape {
        &self.base
    }

    pub fn proxy(&self) -> &AnalyticProxy {
        &self.proxy
    }

    pub fn design(&self, params: &[f64]) -> Result<Design> {
        let (shape, clamped) = ffd_deform(&self.base, params)?;
        let coefficients = self.proxy.evaluate(&shape)?;
        let fitness = self.proxy.fitness(&coefficients)?;
        let features = features_2d(&shape)?;
        Ok(Design {
            shape,
            clamped,
            coefficients,
            fitness,
            features,
        })
    }

    pub fn evaluate(&self, params: &[f64]) -> Result<Evaluation> {
        let d = self.design(params)?;
        Ok(Evaluation {
            fitness: d.fitness,
            features: d.features,
        })
    }
}

impl Evaluator for Airfoil2d {
    fn cheap_features(&self, genome: &[f64]) -> Option<[f64; 2]> {
        let (shape, _) = ffd_deform(&self.base, genome).ok()?;
        features_2d(&shape).ok()
    }

    fn evaluate_batch(&self, genomes: &[Genome]) -> Vec<std::result::Result<Evaluation, String>> {
        genomes
            .par_iter()
            .map(|g| self.evaluate(g).map_err(|e| e.to_string()))
            .collect()
    }
}
