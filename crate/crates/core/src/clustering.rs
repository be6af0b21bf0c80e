//! Class extraction in the similarity space: DBSCAN with an L-Method
//! estimate of epsilon, and medoid prototypes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::embedding::{pca_project, tsne, Embedding, TsneConfig};
use crate::math::{euclidean, sq_distance};
use crate::{Error, Result};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    /// Class id per point, `-1` for noise.
    pub labels: Vec<i32>,
    /// Index of each class's medoid member.
    pub prototypes: Vec<usize>,
    pub class_sizes: Vec<usize>,
    /// Epsilon used by DBSCAN, if it ran.
    pub eps: Option<f64>,
    /// Set when the partition came from a fallback path rather than DBSCAN.
    pub fallback: Option<String>,
}

impl ClassPartition {
    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn members(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class as i32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| **l < 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub min_pts: usize,
    /// Used when there are too few points for the L-Method. Defaults to the
    /// median k-distance.
    pub fallback_eps: Option<f64>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            min_pts: 4,
            fallback_eps: None,
        }
    }
}

fn neighbourhoods<P: AsRef<[f64]>>(points: &[P], eps: f64) -> Vec<Vec<usize>> {
    let eps2 = eps * eps;
    let n = points.len();
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if sq_distance(points[i].as_ref(), points[j].as_ref()) <= eps2 {
                out[i].push(j);
            }
        }
    }
    out
}

/// DBSCAN with inclusive, self-counting neighbourhoods. Clusters are grown
/// breadth-first from unvisited core points in index order, so a border
/// point reachable from several clusters joins the one found first.
pub fn dbscan<P: AsRef<[f64]>>(points: &[P], eps: f64, min_pts: usize) -> Result<Vec<i32>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::Validation(format!(
            "dbscan needs eps > 0 and min_pts >= 1, got eps={eps}, min_pts={min_pts}"
        )));
    }
    let n = points.len();
    let nb = neighbourhoods(points, eps);
    let core: Vec<bool> = nb.iter().map(|v| v.len() >= min_pts).collect();
    let mut labels = vec![NOISE; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for start in 0..n {
        if visited[start] || !core[start] {
            continue;
        }
        let id = next;
        next += 1;
        visited[start] = true;
        labels[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            if !core[p] {
                continue;
            }
            for &q in &nb[p] {
                if labels[q] == NOISE {
                    labels[q] = id;
                }
                if !visited[q] && labels[q] == id {
                    visited[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    Ok(labels)
}

/// Distance from each point to its `k`-th nearest other point, sorted
/// ascending.
pub fn k_distances<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<Vec<f64>> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::TooFewPoints { needed: k + 1, got: n });
    }
    let mut curve: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_distance(points[i].as_ref(), points[j].as_ref()))
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1].sqrt()
        })
        .collect();
    curve.sort_by(f64::total_cmp);
    Ok(curve)
}

fn line_rmse(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
        .sum();
    (sse / n).sqrt()
}

/// L-Method knee of a curve: the split `c` in `[margin, len - 1 - margin]`
/// minimising the size-weighted RMSE of straight-line fits to `curve[..=c]`
/// and `curve[c..]`. Ties go to the smallest index.
pub fn l_method_knee(curve: &[f64], margin: usize) -> Result<usize> {
    let n = curve.len();
    let margin = margin.max(1);
    if n < 2 * margin + 1 {
        return Err(Error::TooFewPoints {
            needed: 2 * margin + 1,
            got: n,
        });
    }
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut best = (f64::INFINITY, margin);
    for c in margin..=n - 1 - margin {
        let left = c + 1;
        let right = n - c;
        let total = (left + right) as f64;
        let err = left as f64 / total * line_rmse(&xs[..=c], &curve[..=c])
            + right as f64 / total * line_rmse(&xs[c..], &curve[c..]);
        if err < best.0 {
            best = (err, c);
        }
    }
    Ok(best.1)
}

/// Epsilon at the knee of the sorted `min_pts`-distance curve.
pub fn auto_eps<P: AsRef<[f64]>>(points: &[P], min_pts: usize) -> Result<f64> {
    let n = points.len();
    if min_pts == 0 || n <= 2 * min_pts {
        return Err(Error::TooFewPoints {
            needed: 2 * min_pts + 1,
            got: n,
        });
    }
    let curve = k_distances(points, min_pts)?;
    let knee = l_method_knee(&curve, min_pts)?;
    let eps = curve[knee];
    if !(eps > 0.0) {
        return Err(Error::DegenerateDistribution("k-distance at the knee is zero".into()));
    }
    Ok(eps)
}

/// Epsilon from the L-Method, or the configured fallback (default: the
/// median k-distance) when the L-Method is unavailable. The note says why
/// the fallback was taken.
pub fn select_eps<P: AsRef<[f64]>>(points: &[P], cfg: &ClusterConfig) -> Result<(f64, Option<String>)> {
    let n = points.len();
    let min_pts = cfg.min_pts.max(1);
    match auto_eps(points, min_pts) {
        Ok(e) => Ok((e, None)),
        Err(err) => {
            let e = match cfg.fallback_eps {
                Some(e) => e,
                None => {
                    if n < 2 {
                        return Err(Error::TooFewPoints { needed: 2, got: n });
                    }
                    let curve = k_distances(points, min_pts.min(n - 1))?;
                    curve[curve.len() / 2]
                }
            };
            log::debug!("auto eps unavailable ({err}); using {e}");
            Ok((e, Some(format!("L-Method unavailable: {err}"))))
        }
    }
}

/// Index of the member minimising the summed Euclidean distance to all
/// others; ties go to the lowest index.
pub fn medoid<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let s: f64 = points.iter().map(|q| euclidean(p.as_ref(), q.as_ref())).sum();
        if s < best.0 {
            best = (s, i);
        }
    }
    Ok(best.1)
}

/// Relabels classes by size, largest first (ties by first member), and
/// picks each class's medoid in `space`.
fn finalize(labels: Vec<i32>, space: &[[f64; 2]], eps: Option<f64>, fallback: Option<String>) -> Result<ClassPartition> {
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut sizes = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            sizes[l as usize] += 1;
            first[l as usize] = first[l as usize].min(i);
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]).then(first[*a].cmp(&first[*b])));
    let mut remap = vec![0i32; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as i32;
    }
    let labels: Vec<i32> = labels
        .into_iter()
        .map(|l| if l >= 0 { remap[l as usize] } else { NOISE })
        .collect();
    let mut prototypes = Vec::with_capacity(k);
    let mut class_sizes = Vec::with_capacity(k);
    for c in 0..k as i32 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let pts: Vec<[f64; 2]> = members.iter().map(|&i| space[i]).collect();
        prototypes.push(members[medoid(&pts)?]);
        class_sizes.push(members.len());
    }
    Ok(ClassPartition {
        labels,
        prototypes,
        class_sizes,
        eps,
        fallback,
    })
}

/// t-SNE embedding of the genomes followed by DBSCAN and per-class medoids.
///
/// Genomes should already be normalised to a common scale. With fewer than
/// four genomes everything forms one class whose prototype is the medoid in
/// genome space; if DBSCAN marks every point as noise, the same single-class
/// partition is returned with the medoid taken in the embedding.
pub fn extract_classes(genomes: &[Vec<f64>], tsne_cfg: &TsneConfig, cfg: &ClusterConfig) -> Result<(Embedding, ClassPartition)> {
    let n = genomes.len();
    if n == 0 {
        return Err(Error::EmptyMap);
    }
    if n < 4 {
        let points = if n >= 2 {
            pca_project(genomes)?.points
        } else {
            vec![[0.0, 0.0]]
        };
        let proto = medoid(genomes)?;
        let partition = ClassPartition {
            labels: vec![0; n],
            prototypes: vec![proto],
            class_sizes: vec![n],
            eps: None,
            fallback: Some(format!("{n} points are too few to embed")),
        };
        let embedding = Embedding {
            points,
            initial_kl: 0.0,
            final_kl: 0.0,
        };
        return Ok((embedding, partition));
    }

    let embedding = tsne(genomes, tsne_cfg)?;
    let pts = &embedding.points;
    let min_pts = cfg.min_pts.max(1);
    let (eps, note) = select_eps(pts, cfg)?;
    if !(eps > 0.0) {
        let partition = finalize(vec![0; n], pts, None, Some("all points coincide".into()))?;
        return Ok((embedding, partition));
    }
    let labels = dbscan(pts, eps, min_pts)?;
    let partition = if labels.iter().all(|l| *l < 0) {
        finalize(vec![0; n], pts, Some(eps), Some("DBSCAN found no clusters".into()))?
    } else {
        finalize(labels, pts, Some(eps), note)?
    };
    Ok((embedding, partition))
}
