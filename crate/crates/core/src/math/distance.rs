use nalgebra::DMatrix;

use crate::{Error, Result};

pub fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_distance(a, b).sqrt()
}

/// Symmetric matrix of squared Euclidean distances with an exact zero diagonal.
pub fn pairwise_sq_distances<P: AsRef<[f64]>>(points: &[P]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let d = points.first().map_or(0, |p| p.as_ref().len());
    if let Some(bad) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.as_ref().len(),
        });
    }
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_distance(points[i].as_ref(), points[j].as_ref());
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
