//! Binned polynomial estimator with iterative proportional adjustment, and
//! its exactly identified IV form.

use std::ops::Range;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::LegendreBasis;
use crate::error::{domain, invalid, BunchingError, Result};
use crate::linalg;
use crate::model::PolicySpec;
use crate::poly::Polynomial;

const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub centers: Vec<f64>,
    pub shares: Vec<f64>,
    pub mesh: f64,
    /// Bins inside the excluded window.
    pub window: Range<usize>,
    /// Number of observations behind the shares, when known.
    pub n_obs: Option<usize>,
}

fn aligned_index(edge: f64, lo: f64, mesh: f64) -> Result<usize> {
    let pos = (edge - lo) / mesh;
    let idx = pos.round();
    if (pos - idx).abs() > ALIGN_TOL || idx < 0.0 {
        return Err(BunchingError::Data(format!(
            "window edge {edge} is not a bin boundary (offset {:.3e} bins)",
            pos - idx
        )));
    }
    Ok(idx as usize)
}

impl Histogram {
    pub fn new(centers: Vec<f64>, shares: Vec<f64>, window: (f64, f64), n_obs: Option<usize>) -> Result<Self> {
        if centers.len() != shares.len() || centers.len() < 2 {
            return Err(BunchingError::Data("histogram needs matching centers and shares, at least two bins".into()));
        }
        let mesh = centers[1] - centers[0];
        if !(mesh > 0.0) {
            return Err(BunchingError::Data("bin centers must increase".into()));
        }
        for (j, w) in centers.windows(2).enumerate() {
            if ((w[1] - w[0]) - mesh).abs() > 1e-9 * mesh + 4.0 * f64::EPSILON * w[1].abs() {
                return Err(BunchingError::Data(format!("bin centers are not equispaced at bin {}", j + 1)));
            }
        }
        if let Some(j) = shares.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(BunchingError::Data(format!("negative or non-finite share at bin {j}")));
        }
        let total: f64 = shares.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(BunchingError::Data(format!("shares sum to {total}, not 1")));
        }
        let mut hist = Histogram { centers, shares, mesh, window: 0..0, n_obs };
        hist.set_window(window.0, window.1)?;
        Ok(hist)
    }

    pub fn lo(&self) -> f64 {
        self.centers[0] - 0.5 * self.mesh
    }

    pub fn hi(&self) -> f64 {
        self.centers[self.centers.len() - 1] + 0.5 * self.mesh
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn set_window(&mut self, k0: f64, k1: f64) -> Result<()> {
        if !(k0 < k1) {
            return invalid(format!("window [{k0}, {k1}] is empty"));
        }
        let start = aligned_index(k0, self.lo(), self.mesh)?;
        let end = aligned_index(k1, self.lo(), self.mesh)?;
        if start == 0 || end >= self.len() {
            return Err(BunchingError::Data("window must lie in the interior of the histogram".into()));
        }
        self.window = start..end;
        Ok(())
    }

    /// Share of mass strictly right of the window.
    pub fn right_mass(&self) -> f64 {
        self.shares[self.window.end..].iter().sum()
    }

    /// Index of the half-open bin containing `y`.
    pub fn bin_of(&self, y: f64) -> Option<usize> {
        let pos = (y - self.lo()) / self.mesh;
        let idx = (pos + ALIGN_TOL).floor();
        if idx < 0.0 {
            return None;
        }
        let idx = idx as usize;
        if idx < self.len() {
            Some(idx)
        } else if (y - self.hi()).abs() <= ALIGN_TOL * self.mesh {
            Some(self.len() - 1)
        } else {
            None
        }
    }
}

/// Grid of bin edges with spacing `mesh`, aligned on `anchor` and covering
/// `[min, max]`.
pub fn aligned_support(min: f64, max: f64, mesh: f64, anchor: f64) -> (f64, f64) {
    let lo = anchor - ((anchor - min) / mesh).ceil() * mesh;
    let hi = anchor + ((max - anchor) / mesh).ceil() * mesh;
    (lo, hi)
}

/// Empirical bin shares over `support`; points outside it are dropped.
pub fn bin_histogram(data: &[f64], mesh: f64, support: (f64, f64), window: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = support;
    if !(mesh > 0.0) || !(lo < hi) {
        return invalid("bin width and support must be positive");
    }
    let bins = aligned_index(hi, lo, mesh)?;
    if bins < 2 {
        return invalid("support holds fewer than two bins");
    }
    let mut counts = vec![0usize; bins];
    let mut kept = 0usize;
    for &y in data {
        if !(y >= lo && y <= hi) {
            continue;
        }
        let idx = (((y - lo) / mesh).floor() as usize).min(bins - 1);
        counts[idx] += 1;
        kept += 1;
    }
    if kept == 0 {
        return Err(BunchingError::Data("no observations inside the histogram support".into()));
    }
    if kept < data.len() {
        warn!("{} observations outside [{lo}, {hi}] dropped from the histogram", data.len() - kept);
    }
    let centers = (0..bins).map(|j| lo + (j as f64 + 0.5) * mesh).collect();
    let shares = counts.iter().map(|&c| c as f64 / kept as f64).collect();
    Histogram::new(centers, shares, window, Some(kept))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityRule {
    /// Counterfactual share of the bin holding the kink.
    #[default]
    CutoffBin,
    /// Mean counterfactual share over the window bins.
    WindowAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// Independent multinomial share variances `f(1-f)/n`.
    #[default]
    Multinomial,
    /// Squared IV residuals.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeOptions {
    pub degree: usize,
    pub density: DensityRule,
    pub variance: VarianceRule,
}

impl Default for PeOptions {
    fn default() -> Self {
        PeOptions { degree: 7, density: DensityRule::CutoffBin, variance: VarianceRule::Multinomial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeEstimate {
    pub degree: usize,
    /// Counterfactual bin-share polynomial in `(c - k)`.
    pub gamma: Polynomial,
    pub beta: Vec<f64>,
    pub b_hat: f64,
    pub f_hat: f64,
    pub theta_hat: f64,
    pub se_theta: f64,
    pub variance: VarianceRule,
    pub residuals: Vec<f64>,
}

impl PeEstimate {
    pub fn counterfactual_share(&self, c: f64) -> f64 {
        self.gamma.eval(c)
    }

    pub fn z_stat(&self, theta: f64) -> f64 {
        (self.theta_hat - theta).abs() / self.se_theta
    }

    /// Two-sided Wald test of `theta_hat = theta`.
    pub fn reject(&self, theta: f64, alpha: f64) -> bool {
        let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
        self.z_stat(theta) > z
    }

    pub fn interval(&self, alpha: f64) -> (f64, f64) {
        let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
        (self.theta_hat - z * self.se_theta, self.theta_hat + z * self.se_theta)
    }
}

pub fn small_kink_theta(b_hat: f64, f_hat: f64, k: f64, tau0: f64, tau1: f64) -> Result<f64> {
    if !(f_hat > 0.0) {
        return domain(format!("counterfactual density at the kink must be positive, got {f_hat}"));
    }
    if !(k > 0.0) || !(tau0 < tau1) || !(tau1 < 1.0) {
        return domain("small-kink formula needs k > 0 and tau0 < tau1 < 1");
    }
    Ok((b_hat / f_hat) / (k * ((1.0 - tau0) / (1.0 - tau1)).ln()))
}

/// Shared design pieces: scaled polynomial columns plus window columns.
struct Design {
    basis: LegendreBasis,
    poly: DMatrix<f64>,
    right_mass: f64,
}

impl Design {
    fn new(hist: &Histogram, degree: usize, anchor: f64) -> Result<Self> {
        let cols = degree + 1;
        if cols + hist.window.len() > hist.len() {
            return invalid(format!("degree {degree} leaves too few bins outside the window"));
        }
        let right_mass = hist.right_mass();
        if !(right_mass > 0.0) {
            return Err(BunchingError::Data("no mass to the right of the window".into()));
        }
        let basis = LegendreBasis::new(cols, hist.lo(), hist.hi(), anchor);
        let mut poly = DMatrix::zeros(hist.len(), cols);
        let mut row = vec![0.0; cols];
        for (j, &c) in hist.centers.iter().enumerate() {
            basis.eval_into(c, &mut row);
            for (m, v) in row.iter().enumerate() {
                poly[(j, m)] = *v;
            }
        }
        Ok(Design { basis, poly, right_mass })
    }

    fn cols(&self) -> usize {
        self.poly.ncols()
    }

    /// Instruments: polynomial columns and window indicators.
    fn instruments(&self, hist: &Histogram) -> DMatrix<f64> {
        let p = self.cols();
        let mut z = DMatrix::zeros(hist.len(), p + hist.window.len());
        z.view_mut((0, 0), (hist.len(), p)).copy_from(&self.poly);
        for (l, j) in hist.window.clone().enumerate() {
            z[(j, p + l)] = 1.0;
        }
        z
    }

    /// Regressors with the proportional-adjustment term on the right bins.
    fn regressors(&self, hist: &Histogram) -> DMatrix<f64> {
        let p = self.cols();
        let mut x = self.instruments(hist);
        for j in hist.window.end..hist.len() {
            let adj = hist.shares[j] / self.right_mass;
            for l in 0..hist.window.len() {
                x[(j, p + l)] -= adj;
            }
        }
        x
    }
}

fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(min > max * 1e-13) {
        return Err(BunchingError::Singular {
            context: context.into(),
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| BunchingError::Singular { context: context.into(), condition: max / min })
}

/// Exactly identified IV solution of the adjusted regression.
pub fn pe_iv_estimate(hist: &Histogram, policy: &PolicySpec, opts: &PeOptions) -> Result<PeEstimate> {
    let design = Design::new(hist, opts.degree, policy.k)?;
    let z = design.instruments(hist);
    let x = design.regressors(hist);
    let f = DVector::from_column_slice(&hist.shares);
    let zx = z.transpose() * &x;
    let delta = solve_square(&zx, &(z.transpose() * &f), "PE instrumental-variable system")?;
    finish(hist, policy, opts, &design, &delta)
}

fn finish(
    hist: &Histogram,
    policy: &PolicySpec,
    opts: &PeOptions,
    design: &Design,
    delta: &DVector<f64>,
) -> Result<PeEstimate> {
    let p = design.cols();
    let w = hist.window.len();
    let coef = delta.rows(0, p).into_owned();
    let beta: Vec<f64> = delta.rows(p, w).iter().cloned().collect();
    let b_hat: f64 = beta.iter().sum();

    let mut g = DVector::zeros(p + w);
    match opts.density {
        DensityRule::CutoffBin => {
            let j = hist
                .bin_of(policy.k)
                .ok_or_else(|| BunchingError::Data(format!("kink {} outside the histogram", policy.k)))?;
            g.rows_mut(0, p).copy_from(&design.poly.row(j).transpose());
        }
        DensityRule::WindowAverage => {
            for j in hist.window.clone() {
                let mut head = g.rows_mut(0, p);
                head += design.poly.row(j).transpose() / w as f64;
            }
        }
    }
    g /= hist.mesh;
    let f_hat = g.dot(delta);
    let theta_hat = small_kink_theta(b_hat, f_hat, policy.k, policy.tau0, policy.tau1)?;

    let x = design.regressors(hist);
    let fvec = DVector::from_column_slice(&hist.shares);
    let residuals_vec = &fvec - &x * delta;
    let residuals: Vec<f64> = residuals_vec.iter().cloned().collect();

    let k_log = policy.k * policy.log_ratio();
    let mut grad = DVector::zeros(p + w);
    for l in 0..w {
        grad[p + l] = 1.0 / (f_hat * k_log);
    }
    grad -= &g * (b_hat / (f_hat * f_hat * k_log));

    let z = design.instruments(hist);
    let zx = z.transpose() * &x;
    let zx_inv = zx
        .clone()
        .try_inverse()
        .ok_or_else(|| linalg::singular(&(zx.transpose() * &zx), "PE instrumental-variable system"))?;
    let n = hist.len();
    let (jac, omega, rule) = match (opts.variance, hist.n_obs) {
        (VarianceRule::Multinomial, Some(n_obs)) => {
            // d(X delta)/df for the share-dependent adjustment columns.
            let mut dxd = DMatrix::zeros(n, n);
            let pr = design.right_mass;
            for j in hist.window.end..n {
                dxd[(j, j)] -= b_hat / pr;
                for i in hist.window.end..n {
                    dxd[(j, i)] += b_hat * hist.shares[j] / (pr * pr);
                }
            }
            let jac = &zx_inv * z.transpose() * (DMatrix::identity(n, n) - dxd);
            let omega = DVector::from_iterator(n, hist.shares.iter().map(|s| s * (1.0 - s) / n_obs as f64));
            (jac, omega, VarianceRule::Multinomial)
        }
        (VarianceRule::Multinomial, None) => {
            warn!("histogram has no observation count; using residual-based variance");
            (&zx_inv * z.transpose(), residuals_vec.map(|e| e * e), VarianceRule::Residual)
        }
        (VarianceRule::Residual, _) => (&zx_inv * z.transpose(), residuals_vec.map(|e| e * e), VarianceRule::Residual),
    };
    let a = jac.transpose() * &grad;
    let var: f64 = a.iter().zip(omega.iter()).map(|(ai, o)| ai * ai * o).sum();

    let t = design.basis.to_monomial();
    let gamma = Polynomial::new(policy.k, (t.transpose() * &coef).iter().cloned().collect());
    Ok(PeEstimate {
        degree: opts.degree,
        gamma,
        beta,
        b_hat,
        f_hat,
        theta_hat,
        se_theta: var.sqrt(),
        variance: rule,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeIteration {
    pub estimate: PeEstimate,
    pub iterations: usize,
    /// Affine update `B -> intercept + slope * B`.
    pub intercept: f64,
    pub slope: f64,
    /// Closed-form fixed point `intercept / (1 - slope)`.
    pub limit: f64,
    pub path: Vec<f64>,
}

/// One OLS pass of the adjusted regression at a given excess mass.
fn ols_step(hist: &Histogram, design: &Design, b: f64) -> Result<DVector<f64>> {
    let x = design.instruments(hist);
    let y = DVector::from_iterator(
        hist.len(),
        hist.shares
            .iter()
            .enumerate()
            .map(|(j, f)| if j >= hist.window.end { f * (1.0 + b / design.right_mass) } else { *f }),
    );
    let xtx = x.transpose() * &x;
    linalg::solve_spd(&xtx, &(x.transpose() * y), "PE least-squares step")
}

fn excess(delta: &DVector<f64>, p: usize) -> f64 {
    delta.rows(p, delta.len() - p).sum()
}

/// Iterates the proportional adjustment from `B = 0` until successive
/// excess-mass estimates differ by less than `tol`.
pub fn pe_iterative(
    hist: &Histogram,
    policy: &PolicySpec,
    opts: &PeOptions,
    max_iter: usize,
    tol: f64,
) -> Result<PeIteration> {
    let design = Design::new(hist, opts.degree, policy.k)?;
    let p = design.cols();
    let intercept = excess(&ols_step(hist, &design, 0.0)?, p);
    let slope = excess(&ols_step(hist, &design, 1.0)?, p) - intercept;
    if !(slope.abs() < 1.0) {
        return Err(BunchingError::Numerical(format!(
            "proportional adjustment does not contract: affine slope {slope:.6}"
        )));
    }
    let mut b = 0.0;
    let mut path = vec![b];
    let mut delta;
    let mut iterations = 0;
    loop {
        delta = ols_step(hist, &design, b)?;
        iterations += 1;
        let next = excess(&delta, p);
        path.push(next);
        let step = (next - b).abs();
        b = next;
        if step < tol {
            break;
        }
        if iterations >= max_iter {
            return Err(BunchingError::NonConvergence { iterations, residual: step });
        }
    }
    let estimate = finish(hist, policy, opts, &design, &delta)?;
    Ok(PeIteration { estimate, iterations, intercept, slope, limit: intercept / (1.0 - slope), path })
}
