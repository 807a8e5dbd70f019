//! Sieve estimation of weighted counterfactual densities from the censored
//! sample, influence vectors, and least-squares conditional moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::LegendreBasis;
use crate::error::{invalid, BunchingError, Result};
use crate::linalg;
use crate::poly::Polynomial;
use crate::sample::EstimationSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Gradient sup-norm at which Newton iterations stop.
    pub tol: f64,
    pub max_iter: usize,
    /// Points of the positivity grid over the estimation region.
    pub grid_points: usize,
    /// Level of the `sup |log f| <= c3 * j` post-check.
    pub c3: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 200, grid_points: 512, c3: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveFit {
    pub j: usize,
    pub kappa: usize,
    pub anchor: f64,
    /// Coefficients of `(y - anchor)^m`.
    pub gamma: Vec<f64>,
    /// Coefficients in the orthonormal Legendre basis.
    pub coef: Vec<f64>,
    pub log_bound: f64,
    /// Fitted values at the sample points, in sample order.
    pub fitted: Vec<f64>,
    pub converged: bool,
    /// Gradient sup-norm at the solution, in the orthonormal basis.
    pub foc_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    pub max_abs_log: f64,
}

impl SieveFit {
    pub fn polynomial(&self) -> Polynomial {
        Polynomial::new(self.anchor, self.gamma.clone())
    }

    pub fn within_bound(&self) -> bool {
        self.max_abs_log <= self.log_bound
    }
}

/// Per-unit influence vectors in monomial coordinates, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSet {
    pub vectors: DMatrix<f64>,
}

impl InfluenceSet {
    /// Mean over the full sample of size `n`.
    pub fn mean(&self, n: usize) -> DVector<f64> {
        self.vectors.row_sum().transpose() / n as f64
    }
}

/// Basis evaluations shared by all fits on one estimation sample.
#[derive(Debug, Clone)]
pub struct SieveDesign {
    pub kappa: usize,
    pub basis: LegendreBasis,
    /// `o = T z`.
    pub to_monomial: DMatrix<f64>,
    /// Orthonormal basis at the sample points, one row per unit.
    pub sample_basis: DMatrix<f64>,
    pub grid_basis: DMatrix<f64>,
    /// `int_S o dy`.
    pub region_integral: DVector<f64>,
    pub n: usize,
    pub region_length: f64,
    t: Vec<f64>,
    w: Vec<f64>,
}

fn region_grid(pieces: &[(f64, f64)], points: usize) -> Vec<f64> {
    let total: f64 = pieces.iter().map(|(a, b)| b - a).sum();
    let mut grid = Vec::with_capacity(points + 2 * pieces.len());
    for &(a, b) in pieces {
        let m = (((b - a) / total) * points as f64).ceil().max(2.0) as usize;
        for i in 0..m {
            grid.push(a + (b - a) * i as f64 / (m - 1) as f64);
        }
    }
    grid
}

impl SieveDesign {
    pub fn new(sample: &EstimationSample, kappa: usize) -> Result<Self> {
        Self::with_options(sample, kappa, &SolverOptions::default())
    }

    pub fn with_options(sample: &EstimationSample, kappa: usize, opts: &SolverOptions) -> Result<Self> {
        if kappa == 0 {
            return invalid("sieve dimension must be at least 1");
        }
        if sample.units.is_empty() {
            return Err(BunchingError::Data("estimation sample is empty".into()));
        }
        let spec = sample.basis_spec(kappa)?;
        let basis = spec.legendre();
        let m = sample.units.len();
        let mut sample_basis = DMatrix::zeros(m, kappa);
        let mut row = vec![0.0; kappa];
        for (i, u) in sample.units.iter().enumerate() {
            basis.eval_into(u.y0, &mut row);
            for (c, v) in row.iter().enumerate() {
                sample_basis[(i, c)] = *v;
            }
        }
        let grid = region_grid(spec.region.pieces(), opts.grid_points);
        let mut grid_basis = DMatrix::zeros(grid.len(), kappa);
        for (i, y) in grid.iter().enumerate() {
            basis.eval_into(*y, &mut row);
            for (c, v) in row.iter().enumerate() {
                grid_basis[(i, c)] = *v;
            }
        }
        Ok(SieveDesign {
            kappa,
            to_monomial: basis.to_monomial(),
            region_integral: basis.region_integral(&spec.region),
            basis,
            sample_basis,
            grid_basis,
            n: sample.n,
            region_length: sample.region_length(),
            t: sample.units.iter().map(|u| u.t).collect(),
            w: sample.units.iter().map(|u| u.w).collect(),
        })
    }

    pub fn moment_weights(&self, j: usize) -> Vec<f64> {
        self.t.iter().zip(&self.w).map(|(t, w)| t * w.powi(j as i32)).collect()
    }

    fn objective(&self, a: &[f64], f: &DVector<f64>, c: &DVector<f64>) -> f64 {
        let n = self.n as f64;
        a.iter().zip(f.iter()).map(|(a, f)| if *a == 0.0 { 0.0 } else { a * f.ln() }).sum::<f64>() / n
            - self.region_integral.dot(c)
    }

    fn gradient(&self, a: &[f64], f: &DVector<f64>) -> DVector<f64> {
        let ratio = DVector::from_iterator(f.len(), a.iter().zip(f.iter()).map(|(a, f)| a / f));
        self.sample_basis.tr_mul(&ratio) / self.n as f64 - &self.region_integral
    }

    fn hessian(&self, a: &[f64], f: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.sample_basis.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= a[i].sqrt() / f[i];
        }
        scaled.tr_mul(&scaled) / self.n as f64
    }

    /// Fit the `j`-th weighted density with weights `t * w^j`.
    pub fn fit(&self, j: usize, opts: &SolverOptions) -> Result<SieveFit> {
        let a = self.moment_weights(j);
        self.fit_weights(&a, j, opts)
    }

    /// Maximise `(1/n) sum a_i log f(y_i) - int_S f` over the sieve.
    pub fn fit_weights(&self, a: &[f64], j: usize, opts: &SolverOptions) -> Result<SieveFit> {
        if a.len() != self.sample_basis.nrows() {
            return invalid("weight vector length does not match the sample");
        }
        if a.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return invalid("moment weights must be nonnegative and finite");
        }
        let mass: f64 = a.iter().sum::<f64>() / self.n as f64;
        if !(mass > 0.0) {
            return Err(BunchingError::Data(format!("moment {j} has zero total weight")));
        }
        let k = self.kappa;
        let mut c = DVector::zeros(k);
        c[0] = mass / self.region_length * self.basis.len.sqrt();
        let mut f = &self.sample_basis * &c;
        let mut fg = &self.grid_basis * &c;
        let mut grad = self.gradient(a, &f);
        let mut residual = grad.amax();
        let mut iterations = 0;
        while residual > opts.tol && iterations < opts.max_iter {
            iterations += 1;
            let hess = self.hessian(a, &f);
            let dir = linalg::solve_spd(&hess, &grad, "sieve Newton step")?;
            let slope = grad.dot(&dir);
            if !(slope > 0.0) {
                break;
            }
            let fd = &self.sample_basis * &dir;
            let gd = &self.grid_basis * &dir;
            let mut alpha_max = f64::INFINITY;
            for (fv, dv) in f.iter().zip(fd.iter()).chain(fg.iter().zip(gd.iter())) {
                if *dv < 0.0 {
                    alpha_max = alpha_max.min(-fv / dv);
                }
            }
            let mut alpha = (0.995 * alpha_max).min(1.0);
            let q_step = self.region_integral.dot(&dir);
            let n = self.n as f64;
            let mut accepted = false;
            for _ in 0..60 {
                let gain = a
                    .iter()
                    .zip(f.iter().zip(fd.iter()))
                    .map(|(a, (fv, dv))| if *a == 0.0 { 0.0 } else { a * (alpha * dv / fv).ln_1p() })
                    .sum::<f64>()
                    / n
                    - alpha * q_step;
                if gain.is_finite() && gain >= 1e-4 * alpha * slope {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            c += &dir * alpha;
            f = &self.sample_basis * &c;
            fg = &self.grid_basis * &c;
            if f.iter().chain(fg.iter()).any(|v| !(*v > 0.0)) {
                return Err(BunchingError::Numerical(
                    "fitted density lost positivity during the Newton iterations".into(),
                ));
            }
            grad = self.gradient(a, &f);
            residual = grad.amax();
        }
        let converged = residual <= opts.tol;
        if !converged {
            return Err(BunchingError::NonConvergence { iterations, residual });
        }
        let max_abs_log = f.iter().chain(fg.iter()).map(|v| v.ln().abs()).fold(0.0, f64::max);
        let log_bound = opts.c3 * j.max(1) as f64;
        if max_abs_log > log_bound {
            log::warn!("fitted density for moment {j} exceeds the log bound ({max_abs_log:.3} > {log_bound:.3})");
        }
        let gamma = self.to_monomial.tr_mul(&c);
        Ok(SieveFit {
            j,
            kappa: k,
            anchor: self.basis.anchor,
            gamma: gamma.iter().copied().collect(),
            coef: c.iter().copied().collect(),
            log_bound,
            fitted: f.iter().copied().collect(),
            converged,
            foc_residual: residual,
            iterations,
            objective: self.objective(a, &f, &c),
            max_abs_log,
        })
    }

    /// Influence vectors of a fit with weights `t * w^j`.
    pub fn influence(&self, fit: &SieveFit) -> Result<InfluenceSet> {
        let a = self.moment_weights(fit.j);
        self.influence_weights(&a, fit)
    }

    pub fn influence_weights(&self, a: &[f64], fit: &SieveFit) -> Result<InfluenceSet> {
        let f = DVector::from_column_slice(&fit.fitted);
        let hess = self.hessian(a, &f);
        let inv = linalg::inverse_spd(&hess, "influence weighting matrix")?;
        let mut scores = self.sample_basis.clone();
        for (i, mut row) in scores.row_iter_mut().enumerate() {
            row *= a[i] / f[i];
        }
        let ortho = scores * inv;
        Ok(InfluenceSet { vectors: ortho * &self.to_monomial })
    }

    /// Residual of the first-order condition in monomial coordinates.
    pub fn monomial_foc_residual(&self, sample: &EstimationSample, fit: &SieveFit) -> f64 {
        let a = self.moment_weights(fit.j);
        let k = self.kappa;
        let mut lhs = vec![0.0; k];
        for ((u, a), f) in sample.units.iter().zip(&a).zip(&fit.fitted) {
            let h = u.y0 - fit.anchor;
            let mut p = a / f;
            for v in lhs.iter_mut() {
                *v += p;
                p *= h;
            }
        }
        let spec_integral = monomial_region_integral(sample, k);
        lhs.iter()
            .zip(&spec_integral)
            .map(|(l, q)| (l / self.n as f64 - q).abs())
            .fold(0.0, f64::max)
    }
}

/// `int_S (y - k0)^m dy` for `m < k`.
pub fn monomial_region_integral(sample: &EstimationSample, k: usize) -> Vec<f64> {
    let pieces = [(sample.lo, sample.k0), (sample.kbar1, sample.hi)];
    (0..k)
        .map(|m| {
            let e = (m + 1) as i32;
            pieces
                .iter()
                .map(|&(a, b)| ((b - sample.k0).powi(e) - (a - sample.k0).powi(e)) / (m + 1) as f64)
                .sum()
        })
        .collect()
}

pub fn fit_density_moment(sample: &EstimationSample, j: usize, kappa: usize, c3: f64) -> Result<SieveFit> {
    let opts = SolverOptions { c3, ..SolverOptions::default() };
    SieveDesign::with_options(sample, kappa, &opts)?.fit(j, &opts)
}

pub fn influence_vectors(sample: &EstimationSample, fit: &SieveFit) -> Result<InfluenceSet> {
    if !fit.converged {
        return invalid("influence vectors need a converged fit");
    }
    SieveDesign::new(sample, fit.kappa)?.influence(fit)
}

/// Weighted least-squares fit of `E[w^j | y0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMomentFit {
    pub j: usize,
    pub kappa: usize,
    pub anchor: f64,
    pub gamma: Vec<f64>,
    pub coef: Vec<f64>,
    basis: LegendreBasis,
    gram_inverse: DMatrix<f64>,
}

impl ConditionalMomentFit {
    pub fn polynomial(&self) -> Polynomial {
        Polynomial::new(self.anchor, self.gamma.clone())
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.basis.eval(y).iter().zip(&self.coef).map(|(o, c)| o * c).sum()
    }

    /// `m`-th derivative at the anchor.
    pub fn derivative_at_anchor(&self, m: usize) -> f64 {
        let fact: f64 = (1..=m).map(|i| i as f64).product();
        self.gamma.get(m).copied().unwrap_or(0.0) * fact
    }

    /// Influence of each unit on the monomial coefficients, one row per unit.
    pub fn influence(&self, sample: &EstimationSample) -> DMatrix<f64> {
        let k = self.kappa;
        let t = self.basis.to_monomial();
        let mut out = DMatrix::zeros(sample.units.len(), k);
        for (i, u) in sample.units.iter().enumerate() {
            let o = DVector::from_vec(self.basis.eval(u.y0));
            let resid = u.w.powi(self.j as i32) - o.dot(&DVector::from_column_slice(&self.coef));
            let psi = &self.gram_inverse * o * (u.t * resid);
            let mono = t.tr_mul(&psi);
            out.set_row(i, &mono.transpose());
        }
        out
    }
}

pub fn fit_conditional_moment(sample: &EstimationSample, j: usize, kappa: usize) -> Result<ConditionalMomentFit> {
    let design = SieveDesign::new(sample, kappa)?;
    let n = sample.n as f64;
    let mut gram = DMatrix::zeros(kappa, kappa);
    let mut rhs = DVector::zeros(kappa);
    for (i, u) in sample.units.iter().enumerate() {
        let o = design.sample_basis.row(i).transpose();
        gram += &o * o.transpose() * (u.t / n);
        rhs += o * (u.t * u.w.powi(j as i32) / n);
    }
    let cond = linalg::condition_number(&gram);
    if !(cond < 1e13) {
        return Err(BunchingError::Singular {
            context: format!("conditional moment design; lower the sieve dimension below {kappa}"),
            condition: cond,
        });
    }
    let gram_inverse = linalg::inverse_spd(&gram, "conditional moment design")?;
    let coef = &gram_inverse * rhs;
    let gamma = design.to_monomial.tr_mul(&coef);
    Ok(ConditionalMomentFit {
        j,
        kappa,
        anchor: sample.k0,
        gamma: gamma.iter().copied().collect(),
        coef: coef.iter().copied().collect(),
        basis: design.basis,
        gram_inverse,
    })
}

/// Weighted polynomial quantile regression of the reverted window edge
/// `w + k0` on `y0`, by iteratively reweighted least squares.
pub fn fit_conditional_quantile(sample: &EstimationSample, tau: f64, kappa: usize) -> Result<Polynomial> {
    if !(tau > 0.0 && tau < 1.0) {
        return invalid(format!("quantile level must lie in (0,1), got {tau}"));
    }
    let design = SieveDesign::new(sample, kappa)?;
    let target: Vec<f64> = sample.units.iter().map(|u| u.w + sample.k0).collect();
    let scale = target.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let floor = 1e-8 * scale;
    let mut coef = DVector::zeros(kappa);
    let mut weights: Vec<f64> = sample.units.iter().map(|u| u.t).collect();
    for _ in 0..100 {
        let mut gram = DMatrix::zeros(kappa, kappa);
        let mut rhs = DVector::zeros(kappa);
        for (i, wt) in weights.iter().enumerate() {
            let o = design.sample_basis.row(i).transpose();
            gram += &o * o.transpose() * *wt;
            rhs += o * (wt * target[i]);
        }
        let (inv, _) = linalg::pseudo_inverse_sym(&gram);
        let next = inv * rhs;
        let change = (&next - &coef).amax();
        coef = next;
        let fitted = &design.sample_basis * &coef;
        for (i, u) in sample.units.iter().enumerate() {
            let r = target[i] - fitted[i];
            let side = if r >= 0.0 { tau } else { 1.0 - tau };
            weights[i] = u.t * side / r.abs().max(floor);
        }
        if change <= 1e-12 * scale {
            break;
        }
    }
    let gamma = design.to_monomial.tr_mul(&coef);
    Ok(Polynomial::new(sample.k0, gamma.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::CorrectedUnit;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_from(ys: &[f64], n: usize, lo: f64, k0: f64, kbar1: f64, hi: f64, w: f64) -> EstimationSample {
        EstimationSample {
            units: ys
                .iter()
                .enumerate()
                .map(|(i, &y0)| CorrectedUnit { index: i, y0, t: 1.0, w })
                .collect(),
            bunchers: vec![],
            n,
            lo,
            k0,
            kbar1,
            hi,
            bunching_share: 0.0,
        }
    }

    fn random_sample(seed: u64, m: usize) -> EstimationSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = (0..m)
            .map(|_| loop {
                let u: f64 = rng.random();
                let y = if rng.random::<bool>() { u } else { u.sqrt() };
                if !(0.4..=0.6).contains(&y) {
                    break y;
                }
            })
            .collect();
        sample_from(&ys, m + m / 10, 0.0, 0.4, 0.6, 1.0, 0.3)
    }

    #[test]
    fn constant_sieve_closed_form() {
        let s = random_sample(1, 300);
        let fit = fit_density_moment(&s, 1, 1, 25.0).unwrap();
        let expected = (s.units.len() as f64 * 0.3 / s.n as f64) / 0.8;
        assert_relative_eq!(fit.gamma[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn uniform_data_recovers_flat_density() {
        let m = 4000;
        let ys: Vec<f64> = (0..m)
            .map(|i| {
                let u = (i as f64 + 0.5) / m as f64 * 0.8;
                if u < 0.4 { u } else { u + 0.2 }
            })
            .collect();
        let s = sample_from(&ys, m, 0.0, 0.4, 0.6, 1.0, 1.0);
        let fit = fit_density_moment(&s, 1, 3, 25.0).unwrap();
        assert_relative_eq!(fit.gamma[0], 1.25, epsilon = 1e-4);
        assert!(fit.gamma[1].abs() < 1e-3 && fit.gamma[2].abs() < 1e-2);
    }

    #[test]
    fn constant_weights_scale_the_fit() {
        let s = random_sample(2, 500);
        let f1 = fit_density_moment(&s, 1, 4, 25.0).unwrap();
        let f2 = fit_density_moment(&s, 2, 4, 25.0).unwrap();
        for (a, b) in f1.gamma.iter().zip(&f2.gamma) {
            assert_relative_eq!(*b, 0.3 * a, epsilon = 1e-10, max_relative = 1e-8);
        }
    }

    #[test]
    fn foc_and_integral_identity() {
        for seed in 0..5 {
            let s = random_sample(seed, 1500);
            let design = SieveDesign::new(&s, 6).unwrap();
            let fit = design.fit(1, &SolverOptions::default()).unwrap();
            assert!(fit.foc_residual <= 1e-10);
            assert!(design.monomial_foc_residual(&s, &fit) <= 1e-8);
            let q = monomial_region_integral(&s, 6);
            let lhs: f64 = q.iter().zip(&fit.gamma).map(|(a, b)| a * b).sum();
            let rhs: f64 = s.moment_weights(1).iter().sum::<f64>() / s.n as f64;
            assert!((lhs - rhs).abs() <= 1e-10);
            assert!(fit.fitted.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn matches_raw_monomial_newton() {
        let s = random_sample(9, 800);
        let fit = fit_density_moment(&s, 1, 3, 25.0).unwrap();
        let q = monomial_region_integral(&s, 3);
        let n = s.n as f64;
        let mut g = DVector::from_vec(fit.gamma.clone());
        for _ in 0..50 {
            let mut grad = -DVector::from_vec(q.clone());
            let mut hess = DMatrix::<f64>::zeros(3, 3);
            for u in &s.units {
                let z = DVector::from_vec(vec![1.0, u.y0 - 0.4, (u.y0 - 0.4).powi(2)]);
                let f = z.dot(&g);
                grad += &z * (0.3 / (n * f));
                hess += &z * z.transpose() * (0.3 / (n * f * f));
            }
            g += hess.lu().solve(&grad).unwrap();
        }
        for (a, b) in fit.gamma.iter().zip(g.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-8);
        }
    }

    #[test]
    fn influence_mean_reproduces_coefficients() {
        let s = random_sample(4, 300);
        let design = SieveDesign::new(&s, 3).unwrap();
        let fit = design.fit(1, &SolverOptions::default()).unwrap();
        let inf = design.influence(&fit).unwrap();
        let mean = inf.mean(s.n);

        let a = s.moment_weights(1);
        let n = s.n as f64;
        let mut m = DMatrix::<f64>::zeros(3, 3);
        let mut score = DVector::<f64>::zeros(3);
        for ((u, a), f) in s.units.iter().zip(&a).zip(&fit.fitted) {
            let z = DVector::from_vec(vec![1.0, u.y0 - 0.4, (u.y0 - 0.4).powi(2)]);
            m += &z * z.transpose() * (a / (n * f * f));
            score += z * (a / (n * f));
        }
        let direct = m.lu().solve(&score).unwrap();
        assert_relative_eq!(mean, direct, epsilon = 1e-8, max_relative = 1e-8);
        assert_relative_eq!(mean, DVector::from_vec(fit.gamma.clone()), epsilon = 1e-8, max_relative = 1e-8);
    }

    #[test]
    fn scalar_influence() {
        let s = random_sample(5, 200);
        let fit = fit_density_moment(&s, 1, 1, 25.0).unwrap();
        let inf = influence_vectors(&s, &fit).unwrap();
        let frac = s.units.len() as f64 / s.n as f64;
        for v in inf.vectors.iter() {
            assert_relative_eq!(*v, fit.gamma[0] / frac, max_relative = 1e-10);
        }
    }

    #[test]
    fn conditional_moment_examples() {
        let s = random_sample(6, 400);
        for kappa in 1..=4 {
            let fit = fit_conditional_moment(&s, 2, kappa).unwrap();
            for y in [0.1, 0.5, 0.9] {
                assert_relative_eq!(fit.eval(y), 0.09, epsilon = 1e-10);
                assert_relative_eq!(fit.polynomial().eval(y), 0.09, epsilon = 1e-10);
            }
        }
        let mut s = random_sample(7, 400);
        for u in s.units.iter_mut() {
            u.w = u.y0;
        }
        let fit = fit_conditional_moment(&s, 1, 3).unwrap();
        assert_relative_eq!(fit.gamma[0], 0.4, epsilon = 1e-10);
        assert_relative_eq!(fit.gamma[1], 1.0, epsilon = 1e-10);
        assert!(fit.gamma[2].abs() < 1e-10);
        assert_relative_eq!(fit.derivative_at_anchor(1), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn conditional_moment_matches_qr() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = random_sample(8, 300);
        for u in s.units.iter_mut() {
            u.w = rng.random::<f64>() + u.y0;
            u.t = 0.5 + rng.random::<f64>();
        }
        let fit = fit_conditional_moment(&s, 1, 3).unwrap();
        let m = s.units.len();
        let mut x = DMatrix::<f64>::zeros(m, 3);
        let mut yv = DVector::<f64>::zeros(m);
        for (i, u) in s.units.iter().enumerate() {
            let r = u.t.sqrt();
            for c in 0..3 {
                x[(i, c)] = r * (u.y0 - 0.4).powi(c as i32);
            }
            yv[i] = r * u.w;
        }
        let qr = x.qr();
        let sol = qr.r().solve_upper_triangular(&(qr.q().transpose() * yv)).unwrap();
        for (a, b) in fit.gamma.iter().zip(sol.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn quantile_fit_of_constant_target() {
        let s = random_sample(10, 300);
        let g = fit_conditional_quantile(&s, 0.5, 3).unwrap();
        assert_relative_eq!(g.eval(0.7), 0.7, epsilon = 1e-6);
    }
}
