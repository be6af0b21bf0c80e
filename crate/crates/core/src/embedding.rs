//! Two-dimensional similarity spaces: exact t-SNE, a PCA baseline, and the
//! G+ discordance score used to compare them.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::math::{pairwise_sq_distances, Rng};
use crate::{Error, Result};

const P_FLOOR: f64 = 1e-12;
const Q_FLOOR: f64 = 1e-12;
const BISECTION_STEPS: usize = 64;
// Search bracket for ln(beta), beta = 1 / (2 sigma^2), relative to the
// shifted distances.
const LN_BETA_RANGE: (f64, f64) = (-69.077_552_789_821_37, 69.077_552_789_821_37);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    pub initial: f64,
    pub final_value: f64,
    pub switch_iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exaggeration {
    pub factor: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    /// Requested perplexity; capped at half the number of points.
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: Momentum,
    pub exaggeration: Exaggeration,
    /// Standard deviation of the Gaussian initial layout.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 50.0,
            iterations: 1000,
            learning_rate: 100.0,
            momentum: Momentum {
                initial: 0.5,
                final_value: 0.8,
                switch_iteration: 250,
            },
            exaggeration: Exaggeration {
                factor: 4.0,
                iterations: 100,
            },
            init_scale: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min(n as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// KL divergence of the initial random layout.
    pub initial_kl: f64,
    pub final_kl: f64,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gaussian neighbour distribution `p_{j|i}` of row `i` with bandwidth `sigma`.
pub fn conditional_p(sq_row: &[f64], sigma: f64, i: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
    }
    conditional_with_beta(sq_row, 1.0 / (2.0 * sigma * sigma), i)
}

fn conditional_with_beta(sq_row: &[f64], beta: f64, i: usize) -> Result<Vec<f64>> {
    // Shifting by the nearest neighbour's distance cancels in the
    // normalisation and keeps exp() from underflowing for every j.
    let shift = sq_row
        .iter()
        .enumerate()
        .filter(|(j, d)| *j != i && d.is_finite())
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    if !shift.is_finite() {
        return Err(Error::DegenerateDistribution(format!(
            "row {i} has no finite distance to another point"
        )));
    }
    let mut p: Vec<f64> = sq_row
        .iter()
        .enumerate()
        .map(|(j, d)| if j == i { 0.0 } else { (-(d - shift) * beta).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

/// `2^H` with `H` the Shannon entropy in bits; `0 log 0 = 0`.
pub fn perplexity_of(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| -v * v.log2())
        .sum();
    h.exp2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSearch {
    pub sigma: f64,
    pub perplexity: f64,
    /// All other points are equidistant (e.g. duplicates), so every
    /// bandwidth yields the uniform distribution.
    pub degenerate: bool,
}

/// Bisection on `ln beta` for the bandwidth whose conditional distribution
/// has the target perplexity.
pub fn sigma_search(sq_row: &[f64], target: f64, i: usize) -> Result<SigmaSearch> {
    let n = sq_row.len();
    if !(target > 1.0 && target < (n as f64 - 1.0)) {
        return Err(Error::Validation(format!(
            "target perplexity {target} outside (1, {})",
            n as f64 - 1.0
        )));
    }
    let others: Vec<f64> = sq_row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .collect();
    if others.iter().all(|d| *d == others[0]) {
        let p = conditional_with_beta(sq_row, 1.0, i)?;
        return Ok(SigmaSearch {
            sigma: 1.0,
            perplexity: perplexity_of(&p),
            degenerate: true,
        });
    }

    let (mut lo, mut hi) = LN_BETA_RANGE;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let p = conditional_with_beta(sq_row, mid.exp(), i)?;
        let perp = perplexity_of(&p);
        let err = (perp - target).abs();
        if err < best.0 {
            best = (err, mid, perp);
        }
        if err < 1e-10 {
            break;
        }
        // Larger beta concentrates the distribution and lowers perplexity.
        if perp > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = best.1.exp();
    Ok(SigmaSearch {
        sigma: (1.0 / (2.0 * beta)).sqrt(),
        perplexity: best.2,
        degenerate: false,
    })
}

/// Symmetrised joint distribution `(p_{j|i} + p_{i|j}) / 2n`, floored at
/// 1e-12 off the diagonal and renormalised.
pub fn joint_p(conditionals: &DMatrix<f64>) -> DMatrix<f64> {
    let n = conditionals.nrows();
    let mut p = DMatrix::zeros(n, n);
    let denom = 2.0 * n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = ((conditionals[(i, j)] + conditionals[(j, i)]) / denom).max(P_FLOOR);
                p[(i, j)] = v;
                total += v;
            }
        }
    }
    p /= total;
    p
}

/// Unnormalised Student-t kernel `(1 + |y_i - y_j|^2)^-1` and its sum.
fn student_t(points: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = points.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// Low-dimensional joint distribution `q_ij`.
pub fn low_dim_q(points: &[[f64; 2]]) -> DMatrix<f64> {
    let n = points.len();
    let (num, sum) = student_t(points);
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { num[i * n + j] / sum })
}

/// `sum_{i != j} p_ij ln(p_ij / q_ij)`.
pub fn kl_divergence(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut kl = 0.0;
    for j in 0..n {
        for i in 0..n {
            let pij = p[(i, j)];
            if i != j && pij > 0.0 {
                kl += pij * (pij / q[(i, j)].max(Q_FLOOR)).ln();
            }
        }
    }
    kl.max(0.0)
}

fn kl_flat(p: &[f64], num: &[f64], sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                kl += pij * (pij / (num[i * n + j] / sum).max(Q_FLOOR)).ln();
            }
        }
    }
    kl.max(0.0)
}

/// `dKL/dy_i = 4 sum_j (p_ij - q_ij) (1 + |y_i - y_j|^2)^-1 (y_i - y_j)`,
/// with `p` scaled by `exaggeration`.
fn gradient_flat(p: &[f64], points: &[[f64; 2]], exaggeration: f64, grad: &mut [[f64; 2]]) {
    let n = points.len();
    let (num, sum) = student_t(points);
    for i in 0..n {
        let mut g = [0.0, 0.0];
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = num[i * n + j];
            let m = (exaggeration * p[i * n + j] - w / sum) * w;
            g[0] += m * (points[i][0] - points[j][0]);
            g[1] += m * (points[i][1] - points[j][1]);
        }
        grad[i] = [4.0 * g[0], 4.0 * g[1]];
    }
}

/// Analytic gradient of `KL(P || Q(Y))` with respect to the embedding.
pub fn kl_gradient(p: &DMatrix<f64>, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let flat = row_major(p);
    let mut grad = vec![[0.0; 2]; points.len()];
    gradient_flat(&flat, points, 1.0, &mut grad);
    grad
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Perplexity-calibrated joint distribution of a point set.
pub fn input_similarities(points: &[Vec<f64>], perplexity: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    let d = pairwise_sq_distances(points)?;
    let mut cond = DMatrix::zeros(n, n);
    let mut degenerate = 0;
    for i in 0..n {
        let row: Vec<f64> = d.row(i).iter().copied().collect();
        let s = sigma_search(&row, perplexity, i)?;
        degenerate += s.degenerate as usize;
        let p = conditional_p(&row, s.sigma, i)?;
        for (j, v) in p.into_iter().enumerate() {
            cond[(i, j)] = v;
        }
    }
    if degenerate > 0 {
        log::debug!("{degenerate} rows had equidistant neighbours");
    }
    Ok(joint_p(&cond))
}

/// Exact t-SNE into two dimensions.
///
/// Gradient descent with momentum and per-coordinate adaptive gains, early
/// exaggeration of `P`, and re-centring after every step. The returned
/// points have zero mean.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<Embedding> {
    let n = points.len();
    if n < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: n });
    }
    let p = input_similarities(points, cfg.effective_perplexity(n))?;
    let p = row_major(&p);

    let mut rng = Rng::new(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [cfg.init_scale * rng.normal(), cfg.init_scale * rng.normal()])
        .collect();
    let initial_kl = {
        let (num, sum) = student_t(&y);
        kl_flat(&p, &num, sum, n)
    };

    let mut grad = vec![[0.0; 2]; n];
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration.iterations {
            cfg.exaggeration.factor
        } else {
            1.0
        };
        let momentum = if it < cfg.momentum.switch_iteration {
            cfg.momentum.initial
        } else {
            cfg.momentum.final_value
        };
        gradient_flat(&p, &y, exaggeration, &mut grad);
        for i in 0..n {
            for k in 0..2 {
                let g = grad[i][k];
                let gain = if (g > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    gains[i][k] * 0.8
                };
                gains[i][k] = f64::max(gain, 0.01);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * g;
                y[i][k] += update[i][k];
            }
        }
        center(&mut y);
    }
    center(&mut y);
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidData("t-SNE diverged".into()));
    }
    let (num, sum) = student_t(&y);
    let final_kl = kl_flat(&p, &num, sum, n);
    Ok(Embedding {
        points: y,
        initial_kl,
        final_kl,
    })
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each retained component (eigenvalues of the
    /// population covariance).
    pub variances: [f64; 2],
    /// Unit principal axes, one per retained component.
    pub components: [Vec<f64>; 2],
}

/// Projection onto the top two principal components of the centred data.
/// Each component's sign is chosen so its largest-magnitude loading is
/// positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let d = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, k| points[i][k] - mean[k]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));

    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(1.0, |(_, x)| x);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        variances[slot] = eig.eigenvalues[k].max(0.0);
        components[slot] = v;
    }
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [proj(&components[0]), proj(&components[1])]
        })
        .collect();
    Ok(Projection {
        points,
        variances,
        components,
    })
}

/// G+ discordance: the fraction of (within-class pair, between-class pair)
/// combinations, out of all pairs of point pairs, in which the within-class
/// distance is strictly larger. Points labelled negative (noise) are
/// ignored. Lower is better.
pub fn gplus(sq_dists: &DMatrix<f64>, labels: &[i32]) -> Result<f64> {
    if sq_dists.nrows() != labels.len() || sq_dists.ncols() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: sq_dists.nrows(),
        });
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    let mut classes: Vec<i32> = members.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "G+ needs at least two classes, found {}",
            classes.len()
        )));
    }
    let mut within = Vec::new();
    let mut between = Vec::new();
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let d = sq_dists[(i, j)];
            if labels[i] == labels[j] {
                within.push(d);
            } else {
                between.push(d);
            }
        }
    }
    between.sort_by(f64::total_cmp);
    let discordant: u64 = within
        .iter()
        .map(|w| between.partition_point(|b| b < w) as u64)
        .sum();
    let t = (within.len() + between.len()) as f64;
    if t < 2.0 {
        return Err(Error::UndefinedMetric("G+ needs at least two point pairs".into()));
    }
    Ok(discordant as f64 / (t * (t - 1.0) / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_symmetric_and_flat() {
        let p = conditional_p(&[0.0, 2.0, 2.0], 0.7, 0).unwrap();
        assert_eq!(p, vec![0.0, 0.5, 0.5]);
        let p = conditional_p(&[3.0, 0.0, 9.0, 1.0, 4.0], 1e6, 1).unwrap();
        for (j, v) in p.iter().enumerate() {
            if j == 1 {
                assert_eq!(*v, 0.0);
            } else {
                assert!((v - 0.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conditional_direct_evaluation() {
        let p = conditional_p(&[0.0, 1.0, 4.0], 1.0, 0).unwrap();
        let (a, b) = ((-0.5f64).exp(), (-2.0f64).exp());
        assert!((p[1] - a / (a + b)).abs() < 1e-15);
        assert!((p[2] - b / (a + b)).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_degenerate() {
        assert!(matches!(
            conditional_p(&[0.0, f64::INFINITY], 1.0, 0),
            Err(Error::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn perplexity_values() {
        assert!((perplexity_of(&[0.125; 8]) - 8.0).abs() < 1e-12);
        assert_eq!(perplexity_of(&[0.0, 1.0, 0.0]), 1.0);
        assert!((perplexity_of(&[0.5, 0.25, 0.25]) - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn sigma_search_hits_target() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let n = 30;
            let mut row: Vec<f64> = (0..n).map(|_| rng.uniform() * 5.0).collect();
            row[3] = 0.0;
            let target = rng.uniform_in(2.0, 15.0);
            let s = sigma_search(&row, target, 3).unwrap();
            let p = conditional_p(&row, s.sigma, 3).unwrap();
            assert!((perplexity_of(&p) - target).abs() <= 1e-3);
        }
    }

    #[test]
    fn sigma_scale_equivariance() {
        let row = [0.0, 0.3, 1.2, 2.0, 0.7, 5.5, 3.1];
        let a = sigma_search(&row, 3.0, 0).unwrap();
        let doubled: Vec<f64> = row.iter().map(|d| 2.0 * d).collect();
        let b = sigma_search(&doubled, 3.0, 0).unwrap();
        let ratio = (b.sigma * b.sigma) / (a.sigma * a.sigma);
        assert!((ratio - 2.0).abs() < 1e-6, "{ratio}");
    }

    #[test]
    fn sigma_matches_grid_scan() {
        let row = [0.0, 1.0, 2.0, 3.0, 4.0];
        let s = sigma_search(&row, 2.0, 0).unwrap();
        // Independent scan over sigma with step 1e-5.
        let mut best = (f64::INFINITY, 0.0);
        let mut sigma = 0.05;
        while sigma < 5.0 {
            let p = conditional_p(&row, sigma, 0).unwrap();
            let err = (perplexity_of(&p) - 2.0).abs();
            if err < best.0 {
                best = (err, sigma);
            }
            sigma += 1e-5;
        }
        assert!((s.sigma - best.1).abs() < 1e-3, "{} vs {}", s.sigma, best.1);
    }

    #[test]
    fn duplicates_are_flagged() {
        let s = sigma_search(&[0.0, 0.0, 0.0, 0.0, 0.0], 2.0, 1).unwrap();
        assert!(s.degenerate);
        assert!((s.perplexity - 4.0).abs() < 1e-12);
    }

    #[test]
    fn joint_from_symmetric_conditionals() {
        let c = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0]);
        let p = joint_p(&c);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 / 3.0 };
                assert!((p[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn joint_worked_instance() {
        let c = DMatrix::from_row_slice(3, 3, &[0.0, 0.8, 0.2, 0.3, 0.0, 0.7, 0.6, 0.4, 0.0]);
        let p = joint_p(&c);
        // (p_{j|i} + p_{i|j}) / 6
        assert!((p[(0, 1)] - 1.1 / 6.0).abs() < 1e-15);
        assert!((p[(0, 2)] - 0.8 / 6.0).abs() < 1e-15);
        assert!((p[(1, 2)] - 1.1 / 6.0).abs() < 1e-15);
        assert_eq!(p[(1, 0)], p[(0, 1)]);
        assert!((p.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn q_small_cases() {
        let q = low_dim_q(&[[0.0, 0.0], [3.0, 1.0]]);
        assert_eq!((q[(0, 1)], q[(1, 0)], q[(0, 0)]), (0.5, 0.5, 0.0));
        let h = 3f64.sqrt() / 2.0;
        let q = low_dim_q(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((q[(i, j)] - 1.0 / 6.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn q_brute_force() {
        let y = [[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1], [1.1, 1.9]];
        let q = low_dim_q(&y);
        let mut z = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    z += 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let e = 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)) / z;
                    assert!((q[(i, j)] - e).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn kl_cases() {
        let p = low_dim_q(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        let q = low_dim_q(&[[0.0, 0.0], [1.0, 1.0], [3.0, 0.0]]);
        let mut hand = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    hand += p[(i, j)] * (p[(i, j)] / q[(i, j)]).ln();
                }
            }
        }
        assert!((kl_divergence(&p, &q) - hand).abs() < 1e-15);
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let a: Vec<[f64; 2]> = (0..6).map(|_| [rng.normal(), rng.normal()]).collect();
            let b: Vec<[f64; 2]> = (0..6).map(|_| [rng.normal(), rng.normal()]).collect();
            assert!(kl_divergence(&low_dim_q(&a), &low_dim_q(&b)) >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let x: Vec<Vec<f64>> = (0..10).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let p = input_similarities(&x, 3.0).unwrap();
        let y: Vec<[f64; 2]> = (0..10).map(|_| [rng.normal(), rng.normal()]).collect();
        let g = kl_gradient(&p, &y);
        let h = 1e-5;
        for i in 0..10 {
            for k in 0..2 {
                let mut plus = y.clone();
                let mut minus = y.clone();
                plus[i][k] += h;
                minus[i][k] -= h;
                let fd = (kl_divergence(&p, &low_dim_q(&plus)) - kl_divergence(&p, &low_dim_q(&minus))) / (2.0 * h);
                let rel = (g[i][k] - fd).abs() / g[i][k].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "point {i} coord {k}: {} vs {fd}", g[i][k]);
            }
        }
    }

    fn blobs(rng: &mut Rng, centers: &[[f64; 2]], per: usize, spread: f64) -> Vec<Vec<f64>> {
        centers
            .iter()
            .flat_map(|c| (0..per).map(|_| vec![c[0] + spread * rng.normal(), c[1] + spread * rng.normal()]).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn tsne_preserves_blob_separation() {
        let mut rng = Rng::new(2);
        let x = blobs(&mut rng, &[[0.0, 0.0], [100.0, 0.0]], 25, 1.0);
        let cfg = TsneConfig {
            iterations: 500,
            ..TsneConfig::default()
        };
        let e = tsne(&x, &cfg).unwrap();
        let d = |a: usize, b: usize| {
            let (p, q) = (e.points[a], e.points[b]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        let mut max_intra: f64 = 0.0;
        let mut min_inter = f64::INFINITY;
        for a in 0..50 {
            for b in a + 1..50 {
                if (a < 25) == (b < 25) {
                    max_intra = max_intra.max(d(a, b));
                } else {
                    min_inter = min_inter.min(d(a, b));
                }
            }
        }
        assert!(min_inter > max_intra, "{min_inter} <= {max_intra}");
        let mx = e.points.iter().map(|p| p[0]).sum::<f64>() / 50.0;
        let my = e.points.iter().map(|p| p[1]).sum::<f64>() / 50.0;
        assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);
    }

    #[test]
    fn tsne_duplicates_stay_together() {
        let mut rng = Rng::new(5);
        let mut x: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.uniform()).collect()).collect();
        x.push(x[7].clone());
        let cfg = TsneConfig {
            iterations: 400,
            perplexity: 8.0,
            ..TsneConfig::default()
        };
        let e = tsne(&x, &cfg).unwrap();
        let d = |a: usize, b: usize| (e.points[a][0] - e.points[b][0]).hypot(e.points[a][1] - e.points[b][1]);
        let dup = d(7, 30);
        for j in 0..30 {
            if j != 7 {
                assert!(dup < d(7, j) && dup < d(30, j));
            }
        }
    }

    #[test]
    fn tsne_reduces_kl_and_is_deterministic() {
        let mut rng = Rng::new(8);
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.uniform()).collect()).collect();
        for seed in 0..3 {
            let cfg = TsneConfig {
                iterations: 300,
                seed,
                ..TsneConfig::default()
            };
            let a = tsne(&x, &cfg).unwrap();
            assert!(a.final_kl < a.initial_kl);
            let b = tsne(&x, &cfg).unwrap();
            assert_eq!(a, b);
        }
        assert!(matches!(tsne(&x[..3], &TsneConfig::default()), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn pca_of_planar_data_is_a_rotation() {
        let mut rng = Rng::new(12);
        let x: Vec<Vec<f64>> = (0..20).map(|_| vec![3.0 * rng.normal(), rng.normal()]).collect();
        let proj = pca_project(&x).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let a = crate::math::euclidean(&x[i], &x[j]);
                let b = crate::math::euclidean(&proj.points[i], &proj.points[j]);
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_rank_one() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let proj = pca_project(&x).unwrap();
        assert!(proj.variances[1] < 1e-10);
        assert!(proj.points.iter().all(|p| p[1].abs() < 1e-9));
        let lead = proj.components[0].iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(lead > 0.0);
    }

    /// Power iteration with deflation, independent of the eigen solver.
    fn power_eigenvalues(cov: &DMatrix<f64>, k: usize) -> Vec<f64> {
        let mut m = cov.clone();
        let d = m.nrows();
        let mut out = Vec::new();
        for _ in 0..k {
            let mut v = nalgebra::DVector::from_fn(d, |i, _| 1.0 + i as f64 * 0.1);
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let w = &m * &v;
                lambda = v.dot(&w);
                let norm = w.norm();
                if norm == 0.0 {
                    break;
                }
                v = w / norm;
            }
            out.push(lambda);
            m -= lambda * &v * v.transpose();
        }
        out
    }

    #[test]
    fn pca_variances_match_power_iteration() {
        let mut rng = Rng::new(31);
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let a = rng.normal();
                let b = rng.normal();
                vec![4.0 * a, 2.0 * b + a, 0.5 * rng.normal(), a - b]
            })
            .collect();
        let proj = pca_project(&x).unwrap();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..4).map(|k| x.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        let cov = DMatrix::from_fn(4, 4, |a, b| x.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / n);
        let ev = power_eigenvalues(&cov, 2);
        assert!((proj.variances[0] - ev[0]).abs() < 1e-8 * ev[0]);
        assert!((proj.variances[1] - ev[1]).abs() < 1e-8 * ev[0]);
        // Variance of the projected coordinates equals the eigenvalues.
        let var0 = proj.points.iter().map(|p| p[0] * p[0]).sum::<f64>() / n;
        assert!((var0 - ev[0]).abs() < 1e-8 * ev[0]);
    }

    #[test]
    fn gplus_perfect_clustering_is_zero() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.2]];
        let d = pairwise_sq_distances(&pts).unwrap();
        assert_eq!(gplus(&d, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(gplus(&d, &[1, 1, 0, 0]).unwrap(), 0.0);
    }

    /// Exhaustive enumeration over all pairs of point pairs.
    fn gplus_brute(d: &DMatrix<f64>, labels: &[i32]) -> f64 {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
        let pairs: Vec<(usize, usize)> = idx
            .iter()
            .enumerate()
            .flat_map(|(a, &i)| idx[a + 1..].iter().map(move |&j| (i, j)))
            .collect();
        let mut s = 0u64;
        for a in 0..pairs.len() {
            for b in 0..pairs.len() {
                let (i, j) = pairs[a];
                let (k, l) = pairs[b];
                if labels[i] == labels[j] && labels[k] != labels[l] && d[(i, j)] > d[(k, l)] {
                    s += 1;
                }
            }
        }
        let t = pairs.len() as f64;
        s as f64 / (t * (t - 1.0) / 2.0)
    }

    #[test]
    fn gplus_single_discordance() {
        // Within pair (0,1) is 5 apart; between pairs (1,2) and (1,3) are
        // 4 and 4.5 apart.
        let pts = vec![vec![0.0], vec![5.0], vec![9.0], vec![9.5]];
        let d = pairwise_sq_distances(&pts).unwrap();
        let labels = [0, 0, 1, 1];
        let g = gplus(&d, &labels).unwrap();
        assert_eq!(g, gplus_brute(&d, &labels));
        assert_eq!(g, 2.0 / 15.0);
    }

    #[test]
    fn gplus_matches_brute_force_with_noise_and_monotone_transform() {
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let pts: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let labels: Vec<i32> = (0..15).map(|_| rng.below(4) as i32 - 1).collect();
            let d = pairwise_sq_distances(&pts).unwrap();
            match gplus(&d, &labels) {
                Ok(g) => {
                    assert!((g - gplus_brute(&d, &labels)).abs() < 1e-15);
                    let t = d.map(|v| (3.0 * v).exp() + 1.0);
                    assert_eq!(gplus(&t, &labels).unwrap(), g);
                    let swapped: Vec<i32> = labels.iter().map(|l| if *l == 0 { 1 } else if *l == 1 { 0 } else { *l }).collect();
                    assert_eq!(gplus(&d, &swapped).unwrap(), g);
                }
                Err(e) => assert!(matches!(e, Error::UndefinedMetric(_))),
            }
        }
        let d = pairwise_sq_distances(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(gplus(&d, &[0, 0]), Err(Error::UndefinedMetric(_))));
    }
}
