//! Gaussian-process surrogate with an anisotropic squared-exponential kernel,
//! and the upper-confidence-bound acquisition value.
//!
//! Inputs are rescaled to the unit hypercube using the domain bounds and
//! targets are standardised before fitting, so all hyperparameters live in
//! normalised units. Hyperparameters are chosen by maximising the log
//! marginal likelihood in log space with a bounded quasi-Newton ascent from
//! several starting points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::math::Rng;
use crate::{Bounds, Error, Result};

const INITIAL_JITTER: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-4;

const LOG_LENGTH_SCALE: (f64, f64) = (-6.907_755_278_982_137, 6.907_755_278_982_137); // 1e-3..1e3
const LOG_SIGNAL_VARIANCE: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091); // 1e-2..1e2
const LOG_NOISE_VARIANCE: (f64, f64) = (-18.420_680_743_952_367, -2.302_585_092_994_045_7); // 1e-8..1e-1

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbConfig {
    pub kappa: f64,
}

impl Default for UcbConfig {
    fn default() -> Self {
        Self { kappa: 2.0 }
    }
}

/// `mean + kappa * std`.
pub fn ucb(mean: f64, std: f64, cfg: UcbConfig) -> f64 {
    debug_assert!(std >= 0.0 && cfg.kappa >= 0.0);
    if cfg.kappa == 0.0 || std == 0.0 {
        return mean;
    }
    mean + cfg.kappa * std
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iterations: 60,
        }
    }
}

/// Kernel hyperparameters in normalised units (unit-cube inputs,
/// standardised targets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Hyperparameters {
    fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        Self {
            length_scales: theta[..d].iter().map(|t| t.exp()).collect(),
            signal_variance: theta[d].exp(),
            noise_variance: theta[d + 1].exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    bounds: Bounds,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    hyper: Hyperparameters,
    jitter: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

fn se_kernel(a: &[f64], b: &[f64], inv_sq_ls: &[f64], signal: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d * inv_sq_ls[k];
    }
    signal * (-0.5 * s).exp()
}

fn kernel_matrix(x: &[Vec<f64>], hyper: &Hyperparameters) -> DMatrix<f64> {
    let n = x.len();
    let inv: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_variance;
        for j in 0..i {
            let v = se_kernel(&x[i], &x[j], &inv, hyper.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + noise I`, escalating diagonal jitter by 10x from 1e-10
/// up to 1e-4. Returns the factor and the jitter that was needed.
fn factorize(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut jitter = 0.0;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 { INITIAL_JITTER } else { jitter * 10.0 };
        if jitter > MAX_JITTER * 1.000_001 {
            return Err(Error::IllConditioned { jitter: MAX_JITTER });
        }
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln l_1..ln l_d, ln signal_variance, ln noise_variance)`, for inputs
/// already in the unit cube and standardised targets.
pub fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y: &[f64],
    log_params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let d = log_params.len() - 2;
    let hyper = Hyperparameters::from_log(log_params);
    let kf = kernel_matrix(x, &hyper);
    let (chol, _) = factorize(&kf, hyper.noise_variance)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let l = chol.l();
    let log_det_half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let lml = -0.5 * yv.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = alpha alpha^T - K^{-1}
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let mut grad = vec![0.0; d + 2];
    let inv: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    for j in 0..n {
        for i in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            grad[d] += wk;
            if i != j {
                for k in 0..d {
                    let diff = x[i][k] - x[j][k];
                    grad[k] += wk * diff * diff * inv[k];
                }
            }
        }
    }
    for g in grad.iter_mut().take(d + 1) {
        *g *= 0.5;
    }
    grad[d + 1] = 0.5 * hyper.noise_variance * (0..n).map(|i| w[(i, i)]).sum::<f64>();
    Ok((lml, grad))
}

fn log_box(d: usize) -> Vec<(f64, f64)> {
    let mut b = vec![LOG_LENGTH_SCALE; d];
    b.push(LOG_SIGNAL_VARIANCE);
    b.push(LOG_NOISE_VARIANCE);
    b
}

fn project(theta: &mut [f64], bx: &[(f64, f64)]) {
    for (t, (lo, hi)) in theta.iter_mut().zip(bx) {
        *t = t.clamp(*lo, *hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected gradient, zeroing components that push against an active bound.
fn projected_gradient(theta: &[f64], grad: &[f64], bx: &[(f64, f64)]) -> Vec<f64> {
    theta
        .iter()
        .zip(grad)
        .zip(bx)
        .map(|((t, g), (lo, hi))| {
            if (*t <= *lo && *g < 0.0) || (*t >= *hi && *g > 0.0) {
                0.0
            } else {
                *g
            }
        })
        .collect()
}

/// Bounded L-BFGS ascent on the log marginal likelihood.
fn maximize(
    x: &[Vec<f64>],
    y: &[f64],
    start: Vec<f64>,
    bx: &[(f64, f64)],
    max_iterations: usize,
) -> Option<(Vec<f64>, f64)> {
    const MEMORY: usize = 6;
    let mut theta = start;
    project(&mut theta, bx);
    let (mut f, mut g) = log_marginal_likelihood(x, y, &theta).ok()?;
    let mut hist: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    for _ in 0..max_iterations {
        let pg = projected_gradient(&theta, &g, bx);
        if dot(&pg, &pg).sqrt() < 1e-6 {
            break;
        }
        // Two-loop recursion on the ascent problem (minimising -f).
        let mut q: Vec<f64> = pg.iter().map(|v| -v).collect();
        let mut coeffs = Vec::with_capacity(hist.len());
        for (s, yk) in hist.iter().rev() {
            let rho = 1.0 / dot(yk, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yk).for_each(|(qi, yi)| *qi -= a * yi);
            coeffs.push((rho, a));
        }
        if let Some((s, yk)) = hist.last() {
            let gamma = dot(s, yk) / dot(yk, yk);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        } else {
            let norm = dot(&q, &q).sqrt();
            q.iter_mut().for_each(|qi| *qi /= norm);
        }
        for ((s, yk), (rho, a)) in hist.iter().zip(coeffs.iter().rev()) {
            let b = rho * dot(yk, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &pg) <= 0.0 {
            hist.clear();
            let norm = dot(&pg, &pg).sqrt();
            dir = pg.iter().map(|v| v / norm).collect();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            project(&mut cand, bx);
            let moved: Vec<f64> = cand.iter().zip(&theta).map(|(c, t)| c - t).collect();
            let gain = dot(&g, &moved);
            if gain > 0.0 {
                if let Ok((fc, gc)) = log_marginal_likelihood(x, y, &cand) {
                    if fc >= f + 1e-4 * gain {
                        accepted = Some((cand, fc, gc, moved));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc, moved)) = accepted else {
            break;
        };
        // Curvature pair for minimising -f.
        let yk: Vec<f64> = g.iter().zip(&gc).map(|(a, b)| a - b).collect();
        if dot(&moved, &yk) > 1e-12 {
            hist.push((moved, yk));
            if hist.len() > MEMORY {
                hist.remove(0);
            }
        }
        let improvement = fc - f;
        theta = cand;
        f = fc;
        g = gc;
        if improvement.abs() < 1e-9 * (1.0 + f.abs()) {
            break;
        }
    }
    Some((theta, f))
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = var.sqrt();
    if scale > 1e-12 * mean.abs().max(1.0) {
        (mean, scale)
    } else {
        (mean, 1.0)
    }
}

impl GpModel {
    /// Fit hyperparameters by maximising the log marginal likelihood.
    pub fn fit(
        train_x: &[Vec<f64>],
        train_y: &[f64],
        bounds: &Bounds,
        cfg: &GpConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (x, y, y_mean, y_scale) = Self::prepare(train_x, train_y, bounds)?;
        let d = bounds.dim();
        let bx = log_box(d);

        let mut starts = Vec::with_capacity(cfg.restarts.max(1));
        let mut first = vec![0.5f64.ln(); d];
        first.push(0.0);
        first.push(1e-3f64.ln());
        starts.push(first);
        for _ in 1..cfg.restarts.max(1) {
            let mut s: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.05f64.ln(), 2.0f64.ln())).collect();
            s.push(rng.uniform_in(0.3f64.ln(), 3.0f64.ln()));
            s.push(rng.uniform_in(1e-6f64.ln(), 1e-2f64.ln()));
            starts.push(s);
        }

        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in starts {
            if let Some((theta, f)) = maximize(&x, &y, s, &bx, cfg.max_iterations) {
                if f.is_finite() && best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                    best = Some((theta, f));
                }
            }
        }
        let (theta, _) = best.ok_or(Error::IllConditioned { jitter: MAX_JITTER })?;
        Self::assemble(bounds.clone(), x, train_y.to_vec(), y, y_mean, y_scale, Hyperparameters::from_log(&theta))
    }

    /// Build a model with fixed hyperparameters (normalised units).
    pub fn with_hyperparameters(
        train_x: &[Vec<f64>],
        train_y: &[f64],
        bounds: &Bounds,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        if hyper.length_scales.len() != bounds.dim() {
            return Err(Error::DimensionMismatch {
                expected: bounds.dim(),
                found: hyper.length_scales.len(),
            });
        }
        let (x, y, y_mean, y_scale) = Self::prepare(train_x, train_y, bounds)?;
        Self::assemble(bounds.clone(), x, train_y.to_vec(), y, y_mean, y_scale, hyper)
    }

    fn prepare(
        train_x: &[Vec<f64>],
        train_y: &[f64],
        bounds: &Bounds,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64, f64)> {
        if train_x.is_empty() {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        if train_x.len() != train_y.len() {
            return Err(Error::DimensionMismatch {
                expected: train_x.len(),
                found: train_y.len(),
            });
        }
        for row in train_x {
            if row.len() != bounds.dim() {
                return Err(Error::DimensionMismatch {
                    expected: bounds.dim(),
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("non-finite training input".into()));
            }
        }
        if train_y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite training target".into()));
        }
        let x: Vec<Vec<f64>> = train_x.iter().map(|r| bounds.normalize(r)).collect();
        let (y_mean, y_scale) = standardize(train_y);
        let y = train_y.iter().map(|v| (v - y_mean) / y_scale).collect();
        Ok((x, y, y_mean, y_scale))
    }

    fn assemble(
        bounds: Bounds,
        x: Vec<Vec<f64>>,
        train_y: Vec<f64>,
        y: Vec<f64>,
        y_mean: f64,
        y_scale: f64,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        let kf = kernel_matrix(&x, &hyper);
        let (chol, jitter) = factorize(&kf, hyper.noise_variance)?;
        let yv = DVector::from_vec(y);
        let alpha = chol.solve(&yv);
        let l = chol.unpack();
        let n = x.len();
        let log_likelihood = -0.5 * yv.dot(&alpha)
            - (0..n).map(|i| l[(i, i)].ln()).sum::<f64>()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            bounds,
            train_x: x,
            train_y,
            y_mean,
            y_scale,
            hyper,
            jitter,
            chol: l,
            alpha,
            log_likelihood,
        })
    }

    pub fn len(&self) -> usize {
        self.train_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    /// Lower Cholesky factor of `K + (noise + jitter) I` in standardised units.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Kernel matrix plus the noise and jitter diagonal, standardised units.
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let mut k = kernel_matrix(&self.train_x, &self.hyper);
        for i in 0..k.nrows() {
            k[(i, i)] += self.hyper.noise_variance + self.jitter;
        }
        k
    }

    /// Noise variance in the units of the training targets.
    pub fn noise_variance(&self) -> f64 {
        self.hyper.noise_variance * self.y_scale * self.y_scale
    }

    /// Prior variance of the latent function in target units.
    pub fn signal_variance(&self) -> f64 {
        self.hyper.signal_variance * self.y_scale * self.y_scale
    }

    pub fn prior_mean(&self) -> f64 {
        self.y_mean
    }

    fn cross_kernel(&self, q: &[f64]) -> DVector<f64> {
        let inv: Vec<f64> = self.hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        DVector::from_iterator(
            self.train_x.len(),
            self.train_x
                .iter()
                .map(|x| se_kernel(x, q, &inv, self.hyper.signal_variance)),
        )
    }

    fn check(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: query.len(),
            });
        }
        Ok(self.bounds.normalize(query))
    }

    /// Posterior mean and standard deviation of the latent function.
    pub fn predict(&self, query: &[f64]) -> Result<Prediction> {
        let q = self.check(query)?;
        let k = self.cross_kernel(&q);
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.hyper.signal_variance - v.norm_squared()).max(0.0);
        Ok(Prediction {
            mean: self.y_mean + self.y_scale * mean,
            std: self.y_scale * var.sqrt(),
        })
    }

    /// Posterior mean only; skips the triangular solve.
    pub fn predict_mean(&self, query: &[f64]) -> Result<f64> {
        let q = self.check(query)?;
        Ok(self.y_mean + self.y_scale * self.cross_kernel(&q).dot(&self.alpha))
    }
}
