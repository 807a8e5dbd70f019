//! Simulation designs and the Monte Carlo harness.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Triangular};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;

use crate::error::{invalid, BunchingError, Result};
use crate::inference::{point_test_statistic, wald_joint_test, TestConfig};
use crate::model::{PolicySpec, StructuralModel};
use crate::pe_baseline::{aligned_support, bin_histogram, pe_iv_estimate, PeOptions};
use crate::poly::Polynomial;
use crate::sample::{Observation, WeightFn};

/// Monomial coefficients of the polynomial income density.
pub const POLY7_COEFFS: [f64; 8] = [4.986e-3, 25.223e-3, 3.839e-3, 14.006e-3, -5.542e-3, 0.612e-3, -0.009e-3, -0.001e-3];

/// Income range of the source histogram after the upward shift, in units of
/// 10,000.
pub const POLY7_DOMAIN: (f64, f64) = (0.0, 8.0);

/// Smallest admissible mixture-component variance.
pub const MIXTURE_VARIANCE_FLOOR: f64 = 0.1;

const TABLE_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.means.len();
        if m == 0 || self.sds.len() != m || self.weights.len() != m {
            return invalid("mixture needs equally many means, sds and weights");
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return invalid("mixture weights must be nonnegative and sum to 1");
        }
        if let Some(s) = self.sds.iter().find(|s| !(s.powi(2) >= MIXTURE_VARIANCE_FLOOR - 1e-12)) {
            return invalid(format!("mixture variance {} is below the floor {MIXTURE_VARIANCE_FLOOR}", s * s));
        }
        Ok(())
    }

    /// Ten-component mixture approximating the shifted two-piece skewed
    /// generalized error target of [`sged_target`].
    pub fn illustrative() -> Self {
        let total: f64 = ILLUSTRATIVE_WEIGHTS.iter().sum();
        MixtureSpec {
            means: ILLUSTRATIVE_MEANS.to_vec(),
            sds: ILLUSTRATIVE_SDS.to_vec(),
            weights: ILLUSTRATIVE_WEIGHTS.iter().map(|w| w / total).collect(),
        }
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.components().map(|(w, n)| w * statrs::distribution::Continuous::pdf(&n, y)).sum()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.components().map(|(w, n)| w * n.cdf(y)).sum()
    }

    fn components(&self) -> impl Iterator<Item = (f64, Normal)> + '_ {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(&w, (&m, &s))| (w, Normal::new(m, s).expect("validated")))
    }
}

const ILLUSTRATIVE_MEANS: [f64; 10] =
    [1.594365, 2.337162, 2.703374, 3.048034, 4.074187, 6.677481, 7.064256, 7.087477, 7.642917, 8.280421];
const ILLUSTRATIVE_SDS: [f64; 10] =
    [0.416501, 0.453115, 0.709699, 0.686509, 0.994598, 0.536971, 0.582337, 0.336079, 0.325683, 0.316230];
const ILLUSTRATIVE_WEIGHTS: [f64; 10] =
    [0.100698, 0.067366, 0.000406, 0.096802, 0.033879, 0.187361, 0.003944, 0.094832, 0.186992, 0.227721];

/// Shift applied to the skewed target so that incomes stay positive.
pub const SGED_SHIFT: f64 = 2.0;

/// Skewed generalized error density with mean `mu`, standard deviation
/// `sigma`, shape `k` and skewness `lambda`.
pub fn sged_pdf(y: f64, mu: f64, sigma: f64, k: f64, lambda: f64) -> f64 {
    let a = gamma(2.0 / k) * gamma(1.0 / k).powf(-0.5) * gamma(3.0 / k).powf(-0.5);
    let s = (1.0 + 3.0 * lambda * lambda - 4.0 * a * a * lambda * lambda).sqrt();
    let theta = gamma(1.0 / k).sqrt() * gamma(3.0 / k).powf(-0.5) / s;
    let delta = -2.0 * lambda * a / s;
    let c = k / (2.0 * theta * gamma(1.0 / k));
    let z = y - mu + delta * sigma;
    let scale = (1.0 - lambda * z.signum()) * theta * sigma;
    c / sigma * (-(z.abs() / scale).powf(k)).exp()
}

/// Two-component skewed target density, shifted right by [`SGED_SHIFT`].
pub fn sged_target(y: f64) -> f64 {
    0.3 * sged_pdf(y, 0.5 + SGED_SHIFT, 1.0, 2.0, -0.5) + 0.7 * sged_pdf(y, 5.5 + SGED_SHIFT, 0.75, 3.0, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Shape {
    Polynomial(Polynomial),
    Mixture(MixtureSpec),
}

/// Counterfactual income distribution restricted to its trimmed support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaDistribution {
    shape: Shape,
    /// Untrimmed support.
    base: (f64, f64),
    lo: f64,
    hi: f64,
    cdf_lo: f64,
    mass: f64,
    /// Support points at equally spaced cumulative levels.
    table: Vec<f64>,
}

impl EtaDistribution {
    /// Polynomial density on the positive interval around its bulk, trimmed
    /// at the `trim` quantiles.
    pub fn polynomial(coeffs: &[f64], trim: (f64, f64)) -> Result<Self> {
        let poly = Polynomial::new(0.0, coeffs.to_vec());
        let base = positive_interval(&poly)?;
        Self::build(Shape::Polynomial(poly), base, trim)
    }

    /// Polynomial density restricted to `domain` before trimming.
    pub fn polynomial_on(coeffs: &[f64], domain: (f64, f64), trim: (f64, f64)) -> Result<Self> {
        if !(domain.0 < domain.1) {
            return invalid(format!("empty polynomial domain {domain:?}"));
        }
        let poly = Polynomial::new(0.0, coeffs.to_vec());
        for i in 0..=TABLE_POINTS {
            let y = domain.0 + (domain.1 - domain.0) * i as f64 / TABLE_POINTS as f64;
            if poly.eval(y) < 0.0 {
                return Err(BunchingError::Domain(format!("density is negative at {y} in the domain")));
            }
        }
        Self::build(Shape::Polynomial(poly), domain, trim)
    }

    pub fn mixture(spec: MixtureSpec, trim: (f64, f64)) -> Result<Self> {
        spec.validate()?;
        let lo = spec.means.iter().zip(&spec.sds).map(|(m, s)| m - 40.0 * s).fold(f64::INFINITY, f64::min);
        let hi = spec.means.iter().zip(&spec.sds).map(|(m, s)| m + 40.0 * s).fold(f64::NEG_INFINITY, f64::max);
        Self::build(Shape::Mixture(spec), (lo, hi), trim)
    }

    fn build(shape: Shape, base: (f64, f64), trim: (f64, f64)) -> Result<Self> {
        if !(0.0 <= trim.0 && trim.0 < trim.1 && trim.1 <= 1.0) {
            return invalid(format!("trim levels must satisfy 0 <= lo < hi <= 1, got {trim:?}"));
        }
        let mut dist = EtaDistribution { shape, base, lo: base.0, hi: base.1, cdf_lo: 0.0, mass: 1.0, table: Vec::new() };
        let total = dist.raw_cdf(base.1);
        let lo = dist.raw_quantile(trim.0 * total);
        let hi = dist.raw_quantile(trim.1 * total);
        dist.lo = lo;
        dist.hi = hi;
        dist.cdf_lo = dist.raw_cdf(lo);
        dist.mass = dist.raw_cdf(hi) - dist.cdf_lo;
        for i in 0..=TABLE_POINTS {
            let y = lo + (hi - lo) * i as f64 / TABLE_POINTS as f64;
            let d = dist.raw_pdf(y);
            if !(d > 0.0) {
                return Err(BunchingError::Domain(format!("density is not positive at {y} in the trimmed support")));
            }
        }
        dist.table = (0..=TABLE_POINTS)
            .map(|i| dist.raw_quantile(dist.cdf_lo + dist.mass * i as f64 / TABLE_POINTS as f64))
            .collect();
        dist.table[0] = lo;
        dist.table[TABLE_POINTS] = hi;
        Ok(dist)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn untrimmed_support(&self) -> (f64, f64) {
        self.base
    }

    fn raw_pdf(&self, y: f64) -> f64 {
        match &self.shape {
            Shape::Polynomial(p) => p.eval(y),
            Shape::Mixture(m) => m.pdf(y),
        }
    }

    fn raw_cdf(&self, y: f64) -> f64 {
        match &self.shape {
            Shape::Polynomial(p) => p.integrate(self.base.0, y.clamp(self.base.0, self.base.1)),
            Shape::Mixture(m) => m.cdf(y),
        }
    }

    fn raw_quantile(&self, level: f64) -> f64 {
        let (mut a, mut b) = self.base;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.raw_cdf(mid) < level {
                a = mid;
            } else {
                b = mid;
            }
            if b - a < 1e-14 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (a + b)
    }

    /// Renormalized density on the trimmed support.
    pub fn pdf(&self, y: f64) -> f64 {
        if y < self.lo || y > self.hi {
            0.0
        } else {
            self.raw_pdf(y) / self.mass
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        ((self.raw_cdf(y.clamp(self.lo, self.hi)) - self.cdf_lo) / self.mass).clamp(0.0, 1.0)
    }

    /// Inverse CDF by linear interpolation in the cumulative table.
    pub fn quantile(&self, u: f64) -> f64 {
        let pos = u.clamp(0.0, 1.0) * TABLE_POINTS as f64;
        let i = (pos.floor() as usize).min(TABLE_POINTS - 1);
        let frac = pos - i as f64;
        self.table[i] + frac * (self.table[i + 1] - self.table[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.quantile(rng.random::<f64>())).collect()
    }
}

/// Widest interval on which the polynomial stays positive, among those
/// carrying the most mass.
fn positive_interval(poly: &Polynomial) -> Result<(f64, f64)> {
    let (a, b, m) = (-100.0, 100.0, 200_000);
    let grid: Vec<f64> = (0..=m).map(|i| a + (b - a) * i as f64 / m as f64).collect();
    let mut best: Option<(f64, f64, f64)> = None;
    let mut start: Option<f64> = None;
    let refine = |mut l: f64, mut r: f64| {
        let sl = poly.eval(l) > 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (l + r);
            if (poly.eval(mid) > 0.0) == sl {
                l = mid;
            } else {
                r = mid;
            }
        }
        0.5 * (l + r)
    };
    for w in grid.windows(2) {
        let (p0, p1) = (poly.eval(w[0]) > 0.0, poly.eval(w[1]) > 0.0);
        if !p0 && p1 {
            start = Some(refine(w[0], w[1]));
        }
        if p0 && !p1 {
            if let Some(s) = start.take() {
                let e = refine(w[0], w[1]);
                let mass = poly.integrate(s, e);
                if best.is_none_or(|(_, _, bm)| mass > bm) {
                    best = Some((s, e, mass));
                }
            }
        }
    }
    best.map(|(s, e, _)| (s, e))
        .ok_or_else(|| BunchingError::Domain("polynomial density has no bounded positive interval".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    #[default]
    Poly7,
    GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub n: usize,
    pub theta0: f64,
    pub omega0: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub k: f64,
    pub k0: f64,
    pub k1: f64,
    /// Lower and upper trimming quantiles of the income distribution.
    pub trim: (f64, f64),
    pub seed: u64,
    /// Components used when `kind` is a Gaussian mixture; defaults to the
    /// illustrative mixture.
    pub mixture: Option<MixtureSpec>,
    /// Spread window incomes with the triangular optimization error.
    pub frictions: bool,
    /// Domain of the polynomial density before trimming; the widest
    /// positive interval of the polynomial when unset.
    pub poly_domain: Option<(f64, f64)>,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            kind: DgpKind::Poly7,
            n: 20_000,
            theta0: 0.5,
            omega0: 0.0,
            tau0: 0.0,
            tau1: 0.2,
            k: 2.0,
            k0: 1.7,
            k1: 2.3,
            trim: (0.01, 0.95),
            seed: 1,
            mixture: None,
            frictions: true,
            poly_domain: Some(POLY7_DOMAIN),
        }
    }
}

impl DgpConfig {
    pub fn eta_distribution(&self) -> Result<EtaDistribution> {
        match self.kind {
            DgpKind::Poly7 => match self.poly_domain {
                Some(domain) => EtaDistribution::polynomial_on(&POLY7_COEFFS, domain, self.trim),
                None => EtaDistribution::polynomial(&POLY7_COEFFS, self.trim),
            },
            DgpKind::GaussianMixture => {
                EtaDistribution::mixture(self.mixture.clone().unwrap_or_else(MixtureSpec::illustrative), self.trim)
            }
        }
    }

    /// Policy whose support is the trimmed counterfactual support.
    pub fn policy(&self, eta: &EtaDistribution) -> Result<PolicySpec> {
        let (lo, hi) = eta.support();
        PolicySpec::new(self.tau0, self.tau1, self.k, self.k0, self.k1, lo, hi)
    }

    /// Largest observed income the design can produce, attained by the top
    /// of the counterfactual support at the smallest unit elasticity.
    pub fn observed_upper(&self, eta: &EtaDistribution) -> Result<f64> {
        let policy = self.policy(eta)?;
        let model = StructuralModel::AugmentedIsoelastic { covariate: 0 };
        let mut top = f64::NEG_INFINITY;
        for x in [-1.0, 1.0] {
            top = top.max(model.inverse_reversion(&policy, policy.support_hi, &[x], &[self.theta0, self.omega0])?);
        }
        Ok(top)
    }

    pub fn model(&self) -> StructuralModel {
        if self.omega0 == 0.0 {
            StructuralModel::Isoelastic
        } else {
            StructuralModel::AugmentedIsoelastic { covariate: 0 }
        }
    }
}

/// Draws from the trimmed polynomial income density.
pub fn sample_dgp1(n: usize, config: &DgpConfig, seed: u64) -> Result<Vec<f64>> {
    let dist = DgpConfig { kind: DgpKind::Poly7, ..config.clone() }.eta_distribution()?;
    Ok(dist.sample(n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Observed incomes: optimal choices outside the window, triangular
/// optimization errors with mode `k` inside it.
pub fn apply_kink_and_frictions<R: Rng + ?Sized>(
    eta: &[f64],
    x: &[f64],
    theta0: f64,
    omega0: f64,
    policy: &PolicySpec,
    frictions: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if eta.len() != x.len() {
        return invalid("eta and covariate draws differ in length");
    }
    let model = StructuralModel::AugmentedIsoelastic { covariate: 0 };
    let theta = [theta0, omega0];
    let noise = Triangular::new(policy.k0, policy.k1, policy.k)
        .map_err(|e| BunchingError::InvalidInput(format!("triangular error: {e}")))?;
    eta.iter()
        .zip(x)
        .map(|(&e, &xi)| {
            if !(e > 0.0) {
                return invalid(format!("income heterogeneity must be positive, got {e}"));
            }
            let y = model.actual_choice(policy, &[xi], e, &theta)?;
            if frictions && y >= policy.k0 && y <= policy.k1 {
                Ok(noise.sample(rng))
            } else {
                Ok(y)
            }
        })
        .collect()
}

/// One simulated data set of `config.n` observations with a uniform
/// covariate on `[-1, 1]`.
pub fn simulate_with<R: Rng + ?Sized>(config: &DgpConfig, eta: &EtaDistribution, rng: &mut R) -> Result<Vec<Observation>> {
    let policy = config.policy(eta)?;
    let etas = eta.sample(config.n, rng);
    let xs: Vec<f64> = (0..config.n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let ys = apply_kink_and_frictions(&etas, &xs, config.theta0, config.omega0, &policy, config.frictions, rng)?;
    Ok(ys.into_iter().zip(xs).map(|(y, x)| Observation { y, x: vec![x], t: 1.0 }).collect())
}

pub fn simulate(config: &DgpConfig) -> Result<Vec<Observation>> {
    let eta = config.eta_distribution()?;
    simulate_with(config, &eta, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Generator for replication `rep`, independent across replications.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum McEstimator {
    /// Bias-aware point test on the corrected sample.
    Gps { config: TestConfig },
    /// Polynomial baseline with a normal Wald test on the elasticity.
    Pe { mesh: f64, options: PeOptions, alpha: f64 },
    /// Joint test of `(theta, omega)` with `theta` fixed and the grid over
    /// `omega`.
    Wald { config: TestConfig, theta: f64, weights: Vec<WeightFn> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub theta: f64,
    pub reps: usize,
    pub reject_rate: f64,
    pub mean_stat: f64,
    pub fail_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationDiagnostics {
    pub rep: usize,
    pub failures: usize,
    /// Largest inverse extrapolation norm seen across the grid.
    pub max_chi_inv: Option<f64>,
    pub max_foc_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub rows: Vec<McRow>,
    pub replications: usize,
    pub runtime_secs: f64,
    pub diagnostics: Vec<ReplicationDiagnostics>,
}

impl McResult {
    /// Grid value with the lowest rejection rate.
    pub fn argmin(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.reject_rate.is_finite())
            .min_by(|a, b| a.reject_rate.total_cmp(&b.reject_rate))
            .map(|r| r.theta)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Outcome {
    reject: bool,
    stat: f64,
    chi_inv: Option<f64>,
    foc: Option<f64>,
}

fn evaluate(
    data: &[Observation],
    estimator: &McEstimator,
    dgp: &DgpConfig,
    policy: &PolicySpec,
    grid: &[f64],
) -> Vec<Result<Outcome>> {
    match estimator {
        McEstimator::Gps { config } => grid
            .iter()
            .map(|&theta| {
                let r = point_test_statistic(data, &StructuralModel::Isoelastic, &[theta], policy, config)?;
                Ok(Outcome { reject: r.reject, stat: r.stat, chi_inv: Some(r.chi_inv), foc: Some(r.max_foc_residual) })
            })
            .collect(),
        McEstimator::Pe { mesh, options, alpha } => {
            let ys: Vec<f64> = data.iter().map(|o| o.y).collect();
            let (min, max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
            let est = aligned_support(min, max, *mesh, dgp.k0);
            let fit = bin_histogram(&ys, *mesh, est, (dgp.k0, dgp.k1)).and_then(|h| pe_iv_estimate(&h, policy, options));
            match fit {
                Ok(fit) => grid
                    .iter()
                    .map(|&theta| Ok(Outcome { reject: fit.reject(theta, *alpha), stat: fit.z_stat(theta), chi_inv: None, foc: None }))
                    .collect(),
                Err(e) => {
                    let msg = e.to_string();
                    grid.iter().map(|_| Err(BunchingError::Numerical(msg.clone()))).collect()
                }
            }
        }
        McEstimator::Wald { config, theta, weights } => grid
            .iter()
            .map(|&omega| {
                let model = StructuralModel::AugmentedIsoelastic { covariate: 0 };
                let r = wald_joint_test(data, &model, &[*theta, omega], policy, weights, config)?;
                Ok(Outcome { reject: r.reject, stat: r.stat, chi_inv: None, foc: None })
            })
            .collect(),
    }
}

/// Rejection frequencies over `grid` from `reps` independent replications.
pub fn run_power_curve(dgp: &DgpConfig, estimator: &McEstimator, grid: &[f64], reps: usize) -> Result<McResult> {
    if reps == 0 {
        return invalid("at least one replication is required");
    }
    if grid.is_empty() {
        return invalid("empty parameter grid");
    }
    let start = Instant::now();
    let eta = dgp.eta_distribution()?;
    let policy = dgp.policy(&eta)?;
    let per_rep: Vec<Result<Vec<Result<Outcome>>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(dgp.seed, rep as u64);
            let data = simulate_with(dgp, &eta, &mut rng)?;
            Ok(evaluate(&data, estimator, dgp, &policy, grid))
        })
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    for (g, &theta) in grid.iter().enumerate() {
        let (mut rejects, mut ok, mut stat_sum, mut fails) = (0usize, 0usize, 0.0, 0usize);
        for rep in &per_rep {
            match rep.as_ref().map(|v| &v[g]) {
                Ok(Ok(o)) => {
                    ok += 1;
                    rejects += o.reject as usize;
                    stat_sum += o.stat;
                }
                _ => fails += 1,
            }
        }
        let rate = if ok > 0 { rejects as f64 / ok as f64 } else { f64::NAN };
        let mean = if ok > 0 { stat_sum / ok as f64 } else { f64::NAN };
        rows.push(McRow { theta, reps, reject_rate: rate, mean_stat: mean, fail_count: fails });
    }

    let mut diagnostics = Vec::with_capacity(reps);
    for (rep, res) in per_rep.iter().enumerate() {
        match res {
            Ok(outcomes) => {
                let mut d = ReplicationDiagnostics { rep, failures: 0, max_chi_inv: None, max_foc_residual: None };
                for o in outcomes {
                    match o {
                        Ok(o) => {
                            if let Some(c) = o.chi_inv {
                                d.max_chi_inv = Some(d.max_chi_inv.map_or(c, |m: f64| m.max(c)));
                            }
                            if let Some(f) = o.foc {
                                d.max_foc_residual = Some(d.max_foc_residual.map_or(f, |m: f64| m.max(f)));
                            }
                        }
                        Err(e) => {
                            warn!("replication {rep}: {e}");
                            d.failures += 1;
                        }
                    }
                }
                diagnostics.push(d);
            }
            Err(e) => {
                warn!("replication {rep} failed to simulate: {e}");
                diagnostics.push(ReplicationDiagnostics { rep, failures: grid.len(), max_chi_inv: None, max_foc_residual: None });
            }
        }
    }
    let result = McResult { rows, replications: reps, runtime_secs: start.elapsed().as_secs_f64(), diagnostics };
    if let Some(m) = result.argmin() {
        info!("lowest rejection rate at {m}");
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn poly7() -> EtaDistribution {
        EtaDistribution::polynomial(&POLY7_COEFFS, (0.01, 0.95)).unwrap()
    }

    fn policy() -> PolicySpec {
        PolicySpec::new(0.0, 0.2, 2.0, 1.7, 2.3, 1.0, 12.0).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
        let h = (b - a) / m as f64;
        let inner: f64 = (1..m).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
        (f(a) + f(b) + inner) * h / 3.0
    }

    #[test]
    fn poly7_support() {
        let d = poly7();
        let (a, b) = d.untrimmed_support();
        assert!((a + 0.19898).abs() < 1e-5 && (b - 11.90336).abs() < 1e-5, "{a} {b}");
        let (lo, hi) = d.support();
        assert!((lo - 1.56999).abs() < 1e-4 && (hi - 11.39683).abs() < 1e-4, "{lo} {hi}");
        for i in 0..=10_000 {
            assert!(d.pdf(lo + (hi - lo) * i as f64 / 10_000.0) > 0.0);
        }
    }

    #[test]
    fn default_domain_quantiles() {
        let d = DgpConfig::default().eta_distribution().unwrap();
        assert_eq!(d.untrimmed_support(), POLY7_DOMAIN);
        let (lo, hi) = d.support();
        assert!((lo - 0.826445).abs() < 1e-5 && (hi - 7.851721).abs() < 1e-5, "{lo} {hi}");
        assert!(EtaDistribution::polynomial_on(&POLY7_COEFFS, (-1.0, 8.0), (0.01, 0.95)).is_err());
    }

    #[test]
    fn trimmed_density_integrates_to_one() {
        let d = poly7();
        let (lo, hi) = d.support();
        assert_relative_eq!(simpson(|y| d.pdf(y), lo, hi, 2000), 1.0, epsilon = 1e-10);
        assert_relative_eq!(d.cdf(hi), 1.0, epsilon = 1e-12);
        assert_eq!(d.cdf(lo), 0.0);
    }

    #[test]
    fn draws_match_analytic_cdf() {
        let d = poly7();
        let mut draws = d.sample(1_000_000, &mut ChaCha8Rng::seed_from_u64(42));
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let c = d.cdf(y);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.003, "{ks}");
    }

    #[test]
    fn draws_are_deterministic() {
        let cfg = DgpConfig::default();
        assert_eq!(sample_dgp1(1000, &cfg, 5).unwrap(), sample_dgp1(1000, &cfg, 5).unwrap());
        assert_ne!(sample_dgp1(1000, &cfg, 5).unwrap(), sample_dgp1(1000, &cfg, 6).unwrap());
        let a = simulate(&DgpConfig { n: 500, ..cfg.clone() }).unwrap();
        let b = simulate(&DgpConfig { n: 500, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outside_window_passes_through() {
        let p = policy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eta = [1.0, 1.5, 4.0, 9.0];
        let y = apply_kink_and_frictions(&eta, &[0.0; 4], 0.5, 0.0, &p, true, &mut rng).unwrap();
        for (e, y) in eta.iter().zip(&y) {
            let star = StructuralModel::Isoelastic.actual_choice(&p, &[], *e, &[0.5]).unwrap();
            assert_eq!(*y, star);
        }
    }

    #[test]
    fn window_errors_have_triangular_mean() {
        let p = policy();
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = apply_kink_and_frictions(&vec![2.0; n], &vec![0.0; n], 0.5, 0.0, &p, true, &mut rng).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let target = (p.k0 + 2.0 * p.k + p.k1) / 4.0;
        let se = (p.k1 - p.k0) / 24f64.sqrt() / (n as f64).sqrt();
        assert!((mean - target).abs() < 3.0 * se, "{mean}");
        assert!(y.iter().all(|v| *v >= p.k0 && *v <= p.k1));
    }

    #[test]
    fn zero_omega_reduces_to_isoelastic() {
        let p = policy();
        let eta: Vec<f64> = (1..200).map(|i| 1.0 + 0.05 * i as f64).collect();
        let x: Vec<f64> = eta.iter().map(|e| (e * 7.0).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = apply_kink_and_frictions(&eta, &x, 0.5, 0.0, &p, false, &mut rng).unwrap();
        for (e, y) in eta.iter().zip(&y) {
            assert_eq!(*y, StructuralModel::Isoelastic.actual_choice(&p, &[], *e, &[0.5]).unwrap());
        }
    }

    proptest! {
        #[test]
        fn frictions_stay_in_window(eta in 1.0f64..12.0, x in -1.0f64..1.0, seed in 0u64..1000) {
            let p = policy();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = apply_kink_and_frictions(&[eta], &[x], 0.5, 0.25, &p, true, &mut rng).unwrap()[0];
            let star = StructuralModel::AugmentedIsoelastic { covariate: 0 }
                .actual_choice(&p, &[x], eta, &[0.5, 0.25])
                .unwrap();
            if star >= p.k0 && star <= p.k1 {
                prop_assert!(y >= p.k0 && y <= p.k1);
            } else {
                prop_assert_eq!(y, star);
            }
        }
    }

    #[test]
    fn sged_moments() {
        for &(mu, sigma, k, lambda) in &[(0.5, 1.0, 2.0, -0.5), (5.5, 0.75, 3.0, 0.5), (0.0, 2.0, 1.5, 0.2)] {
            let f = |y: f64| sged_pdf(y, mu, sigma, k, lambda);
            let (a, b) = (mu - 30.0 * sigma, mu + 30.0 * sigma);
            let mass = simpson(f, a, b, 200_000);
            let mean = simpson(|y| y * f(y), a, b, 200_000);
            let var = simpson(|y| (y - mu).powi(2) * f(y), a, b, 200_000);
            assert_relative_eq!(mass, 1.0, epsilon = 1e-7);
            assert_relative_eq!(mean, mu, epsilon = 1e-6);
            assert_relative_eq!(var.sqrt(), sigma, epsilon = 1e-6);
        }
        let normal = Normal::new(1.0, 2.0).unwrap();
        for y in [-3.0, 0.0, 1.0, 4.5] {
            assert_relative_eq!(
                sged_pdf(y, 1.0, 2.0, 2.0, 0.0),
                statrs::distribution::Continuous::pdf(&normal, y),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn illustrative_mixture_tracks_target() {
        let m = MixtureSpec::illustrative();
        m.validate().unwrap();
        let sup = (0..=2000).map(|i| -6.0 + 0.01 * i as f64).map(|y| (m.pdf(y) - sged_target(y)).abs()).fold(0.0, f64::max);
        assert!(sup < 0.02, "{sup}");
        let d = EtaDistribution::mixture(m, (0.01, 0.95)).unwrap();
        let (lo, hi) = d.support();
        assert!(lo > 0.0 && lo < 1.7 && hi > 8.0, "{lo} {hi}");
    }

    #[test]
    fn mixture_validation() {
        let bad_var = MixtureSpec { means: vec![0.0], sds: vec![0.2], weights: vec![1.0] };
        assert!(bad_var.validate().is_err());
        let bad_w = MixtureSpec { means: vec![0.0, 1.0], sds: vec![1.0, 1.0], weights: vec![0.5, 0.4] };
        assert!(bad_w.validate().is_err());
        assert!(EtaDistribution::polynomial(&POLY7_COEFFS, (0.5, 0.2)).is_err());
    }

    fn pe() -> McEstimator {
        McEstimator::Pe { mesh: 0.05, options: PeOptions::default(), alpha: 0.05 }
    }

    #[test]
    fn single_replication_rates_are_binary() {
        let dgp = DgpConfig { n: 5000, ..DgpConfig::default() };
        let r = run_power_curve(&dgp, &pe(), &[0.2, 0.5, 0.9], 1).unwrap();
        for row in &r.rows {
            assert!(row.reject_rate == 0.0 || row.reject_rate == 1.0);
            assert_eq!(row.reps, 1);
        }
        assert!(run_power_curve(&dgp, &pe(), &[0.5], 0).is_err());
    }

    #[test]
    fn power_curve_is_reproducible_and_csv_ordered() {
        let dgp = DgpConfig { n: 5000, seed: 9, ..DgpConfig::default() };
        let a = run_power_curve(&dgp, &pe(), &[0.1, 0.5, 8.0], 6).unwrap();
        let b = run_power_curve(&dgp, &pe(), &[0.1, 0.5, 8.0], 6).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows[2].reject_rate, 1.0);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta,reps,reject_rate,mean_stat,fail_count\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn replication_streams_differ() {
        let mut a = replication_rng(1, 0);
        let mut b = replication_rng(1, 1);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
        let mut c = replication_rng(1, 0);
        assert_eq!(replication_rng(1, 0).random::<u64>(), c.random::<u64>());
    }
}
