//! Tests of a hypothesised structural parameter built on the bunching
//! moment, with bias-aware critical values.

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::basis::extrapolation_norm;
use crate::error::{invalid, BunchingError, Result};
use crate::linalg;
use crate::model::{PolicySpec, StructuralModel};
use crate::poly::Polynomial;
use crate::sample::{construct_estimation_sample, EstimationSample, Observation, WeightFn};
use crate::sieve::{fit_conditional_quantile, SieveDesign, SieveFit, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// Sieve dimension.
    pub kappa: usize,
    /// Number of series terms kept in the bunching moment.
    pub ell: usize,
    pub alpha: f64,
    /// Upper bound on the truncation bias of the moment.
    pub bias_bound: f64,
    pub c3: f64,
    pub sigma_floor: f64,
    /// Grid points with an inverse extrapolation norm above this are flagged.
    pub chi_inv_threshold: f64,
    /// Multiplier applied to the estimated standard deviation.
    pub variance_inflation: f64,
    pub weight: WeightFn,
    pub kbar1_override: Option<f64>,
    /// Upper support bound on the observed scale; when set, the bound used
    /// at each hypothesis is its reversion, minimised over units.
    pub upper_observed: Option<f64>,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            kappa: 10,
            ell: 5,
            alpha: 0.05,
            bias_bound: 0.0,
            c3: SolverOptions::default().c3,
            sigma_floor: 1e-12,
            chi_inv_threshold: 20.0,
            variance_inflation: 1.0,
            weight: WeightFn::One,
            kbar1_override: None,
            upper_observed: None,
        }
    }
}

impl TestConfig {
    /// The policy with its support upper bound replaced by the one implied
    /// by `upper_observed` at `theta`.
    pub fn policy_at(
        &self,
        data: &[Observation],
        model: &StructuralModel,
        theta: &[f64],
        policy: &PolicySpec,
    ) -> Result<PolicySpec> {
        let Some(y_bar) = self.upper_observed else {
            return Ok(policy.clone());
        };
        let mut hi = f64::INFINITY;
        for obs in data {
            hi = hi.min(model.reversion(policy, y_bar, &obs.x, theta)?);
        }
        if !hi.is_finite() {
            return invalid("empty data");
        }
        let mut out = policy.clone();
        out.support_hi = hi;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if self.ell == 0 || self.ell > self.kappa {
            return invalid(format!("need 1 <= ell <= kappa, got ell={} kappa={}", self.ell, self.kappa));
        }
        if !(self.bias_bound >= 0.0) {
            return invalid("bias bound must be nonnegative");
        }
        if !(self.variance_inflation > 0.0) {
            return invalid("variance inflation must be positive");
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions { c3: self.c3, ..SolverOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub theta: Vec<f64>,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub stat: f64,
    pub cv: f64,
    pub reject: bool,
    pub bias_bound: f64,
    pub n: usize,
    pub retained: usize,
    pub kbar1: f64,
    pub bunching_share: f64,
    /// `gamma_{j,j} / j` for `j = 1..=ell`.
    pub series_terms: Vec<f64>,
    pub chi_inv: f64,
    pub flagged: bool,
    pub max_foc_residual: f64,
}

/// Estimated moment and its per-unit influence scores over the full sample.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub mu_hat: f64,
    pub scores: Vec<f64>,
    pub series_terms: Vec<f64>,
    pub sample: EstimationSample,
    pub fits: Vec<SieveFit>,
}

/// Fit `ell` weighted densities on the corrected sample and assemble the
/// moment and its influence scores.
pub fn estimate_moment(
    data: &[Observation],
    model: &StructuralModel,
    theta: &[f64],
    policy: &PolicySpec,
    weight: &WeightFn,
    config: &TestConfig,
) -> Result<MomentEstimate> {
    config.validate()?;
    let policy = &config.policy_at(data, model, theta, policy)?;
    let sample = construct_estimation_sample(data, model, theta, policy, weight, config.kbar1_override)?;
    let opts = config.solver();
    let design = SieveDesign::with_options(&sample, config.kappa, &opts)?;
    let fitted: Vec<Result<(SieveFit, Vec<f64>)>> = (1..=config.ell)
        .into_par_iter()
        .map(|j| {
            let fit = design.fit(j, &opts)?;
            let inf = design.influence(&fit)?;
            let column: Vec<f64> = inf.vectors.column(j - 1).iter().copied().collect();
            Ok((fit, column))
        })
        .collect();
    let n = sample.n;
    let mut scores = vec![0.0; n];
    for &(i, t) in &sample.bunchers {
        scores[i] = t;
    }
    let mut fits = Vec::with_capacity(config.ell);
    let mut series_terms = Vec::with_capacity(config.ell);
    for (j, res) in (1..=config.ell).zip(fitted) {
        let (fit, column) = res?;
        series_terms.push(fit.gamma[j - 1] / j as f64);
        for (u, v) in sample.units.iter().zip(&column) {
            scores[u.index] -= v / j as f64;
        }
        fits.push(fit);
    }
    let mu_hat = sample.bunching_share - series_terms.iter().sum::<f64>();
    Ok(MomentEstimate { mu_hat, scores, series_terms, sample, fits })
}

/// Point test of `H0: theta` with the bias-aware critical value.
pub fn point_test_statistic(
    data: &[Observation],
    model: &StructuralModel,
    theta: &[f64],
    policy: &PolicySpec,
    config: &TestConfig,
) -> Result<TestResult> {
    let est = estimate_moment(data, model, theta, policy, &config.weight, config)?;
    let n = est.sample.n as f64;
    let var = est.scores.iter().map(|s| s * s).sum::<f64>() / n;
    if !(var >= config.sigma_floor) {
        return Err(BunchingError::Numerical(format!(
            "influence variance {var:.3e} is below the floor {:.1e}",
            config.sigma_floor
        )));
    }
    let sigma_hat = var.sqrt() * config.variance_inflation;
    let stat = n.sqrt() * est.mu_hat.abs() / sigma_hat;
    let cv = bias_aware_cv(config.alpha, n.sqrt() * config.bias_bound / sigma_hat);
    let chi = extrapolation_norm(&est.sample.basis_spec(config.kappa)?)?;
    let chi_inv = if chi > 0.0 { 1.0 / chi } else { f64::INFINITY };
    Ok(TestResult {
        theta: theta.to_vec(),
        mu_hat: est.mu_hat,
        sigma_hat,
        stat,
        cv,
        reject: stat >= cv,
        bias_bound: config.bias_bound,
        n: est.sample.n,
        retained: est.sample.units.len(),
        kbar1: est.sample.kbar1,
        bunching_share: est.sample.bunching_share,
        series_terms: est.series_terms,
        chi_inv,
        flagged: chi_inv > config.chi_inv_threshold,
        max_foc_residual: est.fits.iter().map(|f| f.foc_residual).fold(0.0, f64::max),
    })
}

/// The `1 - alpha` quantile of `|N(b, 1)|`.
pub fn bias_aware_cv(alpha: f64, b: f64) -> f64 {
    let normal = Normal::standard();
    let b = b.abs();
    let coverage = |c: f64| normal.cdf(c - b) - normal.cdf(-c - b);
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.0, b + 10.0);
    while coverage(hi) < target {
        hi *= 2.0;
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if coverage(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta: f64,
    pub result: Option<TestResult>,
    pub error: Option<String>,
}

impl GridPoint {
    pub fn accepted(&self) -> bool {
        self.result.as_ref().is_some_and(|r| !r.reject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub points: Vec<GridPoint>,
    /// Maximal runs of consecutive accepted grid points.
    pub intervals: Vec<(f64, f64)>,
}

/// Invert the point test over a grid for the first parameter, holding any
/// further parameters at `rest`.
pub fn confidence_set(
    data: &[Observation],
    model: &StructuralModel,
    policy: &PolicySpec,
    config: &TestConfig,
    grid: &[f64],
    rest: &[f64],
) -> Result<ConfidenceSet> {
    if grid.is_empty() {
        return invalid("empty parameter grid");
    }
    config.validate()?;
    let points: Vec<GridPoint> = grid
        .par_iter()
        .map(|&g| {
            let mut theta = vec![g];
            theta.extend_from_slice(rest);
            match point_test_statistic(data, model, &theta, policy, config) {
                Ok(r) => GridPoint { theta: g, result: Some(r), error: None },
                Err(e) => GridPoint { theta: g, result: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let intervals = accepted_runs(&points);
    Ok(ConfidenceSet { points, intervals })
}

fn accepted_runs(points: &[GridPoint]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut current: Option<(f64, f64)> = None;
    for p in points {
        if p.accepted() {
            current = Some(match current {
                Some((a, _)) => (a, p.theta),
                None => (p.theta, p.theta),
            });
        } else if let Some(run) = current.take() {
            out.push(run);
        }
    }
    out.extend(current);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub theta: Vec<f64>,
    pub stat: f64,
    pub df: usize,
    pub cv: f64,
    pub reject: bool,
    pub moments: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Joint test stacking the moments of several weight functions.
pub fn wald_joint_test(
    data: &[Observation],
    model: &StructuralModel,
    theta: &[f64],
    policy: &PolicySpec,
    weights: &[WeightFn],
    config: &TestConfig,
) -> Result<WaldResult> {
    if weights.len() < theta.len() {
        return invalid(format!("{} weight functions cannot identify {} parameters", weights.len(), theta.len()));
    }
    let estimates: Vec<MomentEstimate> = weights
        .iter()
        .map(|w| estimate_moment(data, model, theta, policy, w, config))
        .collect::<Result<_>>()?;
    let q = estimates.len();
    let n = data.len();
    let mu = DVector::from_iterator(q, estimates.iter().map(|e| e.mu_hat));
    let mut cov = DMatrix::zeros(q, q);
    for a in 0..q {
        for b in 0..=a {
            let v = estimates[a].scores.iter().zip(&estimates[b].scores).map(|(x, y)| x * y).sum::<f64>()
                / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let scaled = &cov * config.variance_inflation.powi(2);
    let solved = linalg::solve_spd(&scaled, &mu, "stacked influence covariance")?;
    let stat = n as f64 * mu.dot(&solved);
    let cv = chi_squared_quantile(q, 1.0 - config.alpha)?;
    Ok(WaldResult {
        theta: theta.to_vec(),
        stat,
        df: q,
        cv,
        reject: stat > cv,
        moments: mu.iter().copied().collect(),
        covariance: (0..q).map(|a| (0..q).map(|b| scaled[(a, b)]).collect()).collect(),
    })
}

pub fn chi_squared_quantile(df: usize, p: f64) -> Result<f64> {
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| BunchingError::InvalidInput(format!("chi-squared with {df} degrees of freedom: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub rho: f64,
    pub beta: f64,
    pub delta: f64,
    /// `beta * delta^ell * B`, absent when `delta >= 1`.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub rows: Vec<RhoRow>,
    pub bias_bound: f64,
    pub chosen_rho: Option<f64>,
    pub failed: bool,
}

const CIRCLE_POINTS: usize = 256;

fn taylor_at(p: &Polynomial, y: f64) -> Vec<f64> {
    p.recenter(y).coeffs
}

/// Values of `sum_m a_m (rho e^{i phi})^m` on the circle.
fn circle_values(coeffs: &[f64], rho: f64) -> impl Iterator<Item = Complex<f64>> + '_ {
    (0..CIRCLE_POINTS).map(move |k| {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / CIRCLE_POINTS as f64;
        let h = Complex::from_polar(rho, phi);
        let mut acc = Complex::new(0.0, 0.0);
        for c in coeffs.iter().rev() {
            acc = acc * h + c;
        }
        acc
    })
}

/// Smoothness constants of a fitted density and fitted quantile curves on
/// `[y_lo, y_hi]`, and the implied truncation-bias bound.
pub fn calibrate_smoothness(
    density: &Polynomial,
    quantiles: &[Polynomial],
    rho_grid: &[f64],
    ell: usize,
    y_range: (f64, f64),
    bunching_share: f64,
) -> Result<SmoothnessEstimate> {
    if rho_grid.iter().any(|r| !(*r >= 0.0)) {
        return invalid("radii must be nonnegative");
    }
    let (y_lo, y_hi) = y_range;
    if !(y_lo <= y_hi) {
        return invalid("empty calibration range");
    }
    let points = 101;
    let ys: Vec<f64> = (0..points)
        .map(|i| y_lo + (y_hi - y_lo) * i as f64 / (points - 1) as f64)
        .collect();
    let mut rows = Vec::with_capacity(rho_grid.len());
    for &rho in rho_grid {
        let beta = if rho == 0.0 {
            1.0
        } else {
            let mut sup: f64 = 0.0;
            for &y in &ys {
                let a = taylor_at(density, y);
                let center = a[0].abs();
                if center == 0.0 {
                    return Err(BunchingError::Numerical(format!("fitted density vanishes at {y}")));
                }
                let mean = circle_values(&a, rho).map(|v| v.norm()).sum::<f64>() / CIRCLE_POINTS as f64;
                sup = sup.max(mean / center);
            }
            sup
        };
        let delta = if rho == 0.0 {
            f64::INFINITY
        } else {
            let mut sup: f64 = 0.0;
            for g in quantiles {
                for &y in &ys {
                    let mut b = taylor_at(g, y);
                    if b[0] < y {
                        continue;
                    }
                    b[0] -= y;
                    let worst = circle_values(&b, rho).map(|v| v.norm()).fold(0.0, f64::max);
                    sup = sup.max(worst / rho);
                }
            }
            sup
        };
        let bound = (delta < 1.0).then(|| beta * delta.powi(ell as i32) * bunching_share);
        rows.push(RhoRow { rho, beta, delta, bound });
    }
    let best = rows
        .iter()
        .filter_map(|r| r.bound.map(|b| (r.rho, b)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    Ok(match best {
        Some((rho, b)) => SmoothnessEstimate { rows, bias_bound: b, chosen_rho: Some(rho), failed: false },
        None => {
            log::warn!("smoothness calibration failed for every radius; using a zero bias bound");
            SmoothnessEstimate { rows, bias_bound: 0.0, chosen_rho: None, failed: true }
        }
    })
}

/// The quantile levels used for calibration: 0.05, 0.10, ..., 0.95.
pub fn quantile_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Calibrate from data: fit the weighted density and the quantile curves of
/// the reverted window edge on the corrected sample at `theta`.
pub fn calibrate_from_data(
    data: &[Observation],
    model: &StructuralModel,
    theta: &[f64],
    policy: &PolicySpec,
    config: &TestConfig,
    rho_grid: &[f64],
) -> Result<SmoothnessEstimate> {
    config.validate()?;
    let policy = &config.policy_at(data, model, theta, policy)?;
    let sample = construct_estimation_sample(data, model, theta, policy, &config.weight, config.kbar1_override)?;
    let opts = config.solver();
    let design = SieveDesign::with_options(&sample, config.kappa, &opts)?;
    let density = design.fit(0, &opts)?.polynomial();
    let curves: Vec<Polynomial> = quantile_levels()
        .par_iter()
        .map(|&tau| fit_conditional_quantile(&sample, tau, config.kappa.min(4)))
        .collect::<Result<_>>()?;
    calibrate_smoothness(
        &density,
        &curves,
        rho_grid,
        config.ell,
        (sample.k0, sample.kbar1),
        sample.bunching_share,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn series_cdf(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= x * x / (2 * n + 1) as f64;
            sum += term;
        }
        0.5 + sum * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn critical_value_examples() {
        assert_relative_eq!(bias_aware_cv(0.05, 0.0), 1.95996, epsilon = 1e-5);
        let c = bias_aware_cv(0.05, 5.0);
        assert!((c - 5.0 - 1.64485).abs() < 1e-3);
        let c = bias_aware_cv(0.32, 0.0);
        assert_relative_eq!(c, 0.99446, epsilon = 1e-5);
        assert_relative_eq!(series_cdf(c) - series_cdf(-c), 0.68, epsilon = 1e-9);
    }

    #[test]
    fn observed_upper_bound_is_reverted() {
        let policy = PolicySpec::new(0.0, 0.2, 2.0, 1.7, 2.3, 1.0, 12.0).unwrap();
        let data = vec![Observation::new(3.0, vec![], 1.0).unwrap()];
        let model = StructuralModel::Isoelastic;
        let fixed = TestConfig::default();
        assert_eq!(fixed.policy_at(&data, &model, &[0.4], &policy).unwrap(), policy);
        let config = TestConfig { upper_observed: Some(10.0), ..TestConfig::default() };
        let p = config.policy_at(&data, &model, &[0.4], &policy).unwrap();
        assert_relative_eq!(p.support_hi, 10.0 * 1.25f64.powf(0.4), max_relative = 1e-14);
        assert_eq!(p.k0, policy.k0);
    }

    #[test]
    fn critical_value_monotone() {
        let mut prev = 0.0;
        for i in 0..50 {
            let c = bias_aware_cv(0.05, i as f64 * 0.1);
            assert!(c > prev);
            prev = c;
        }
        assert!(bias_aware_cv(0.01, 1.0) > bias_aware_cv(0.05, 1.0));
        assert!(bias_aware_cv(0.05, 1.0) > bias_aware_cv(0.10, 1.0));
    }

    #[test]
    fn chi_squared_critical_values() {
        assert_relative_eq!(chi_squared_quantile(2, 0.95).unwrap(), 5.99146, epsilon = 1e-5);
        assert_relative_eq!(chi_squared_quantile(1, 0.95).unwrap(), 3.84146, epsilon = 1e-5);
    }

    #[test]
    fn runs_of_accepted_points() {
        let make = |theta: f64, ok: Option<bool>| GridPoint {
            theta,
            result: ok.map(|acc| TestResult {
                theta: vec![theta],
                mu_hat: 0.0,
                sigma_hat: 1.0,
                stat: 0.0,
                cv: 1.96,
                reject: !acc,
                bias_bound: 0.0,
                n: 1,
                retained: 1,
                kbar1: 0.0,
                bunching_share: 0.0,
                series_terms: vec![],
                chi_inv: 1.0,
                flagged: false,
                max_foc_residual: 0.0,
            }),
            error: None,
        };
        let pts = vec![
            make(0.1, Some(false)),
            make(0.2, Some(true)),
            make(0.3, Some(true)),
            make(0.4, None),
            make(0.5, Some(true)),
            make(0.6, Some(false)),
            make(0.7, Some(true)),
        ];
        assert_eq!(accepted_runs(&pts), vec![(0.2, 0.3), (0.5, 0.5), (0.7, 0.7)]);
    }

    #[test]
    fn calibration_examples() {
        let density = Polynomial::new(0.0, vec![1.0, 0.5, -0.2]);
        let identity = Polynomial::new(0.0, vec![0.0, 1.0]);
        let est = calibrate_smoothness(&density, &[identity], &[0.0, 0.1, 0.3], 3, (1.0, 2.0), 0.1).unwrap();
        assert_eq!(est.rows[0].beta, 1.0);
        for row in &est.rows[1..] {
            assert!((row.delta - 1.0).abs() <= 1e-15 && row.delta >= 1.0);
            assert!(row.bound.is_none());
            assert!(row.beta >= 1.0 - 1e-12);
        }
        assert!(est.rows[2].beta >= est.rows[1].beta);
        assert!(est.failed);
        assert_eq!(est.bias_bound, 0.0);

        let flat = Polynomial::constant(0.0, 2.0);
        let level = Polynomial::constant(0.0, 1.5);
        let rho = 1.0;
        let est = calibrate_smoothness(&flat, &[level], &[rho], 2, (1.0, 2.0), 0.2).unwrap();
        assert_relative_eq!(est.rows[0].beta, 1.0, epsilon = 1e-14);
        assert_relative_eq!(est.rows[0].delta, 0.5 / rho, epsilon = 1e-14);
        assert_relative_eq!(est.bias_bound, 0.25 * 0.2, epsilon = 1e-14);
        assert!(!est.failed);
    }
}
