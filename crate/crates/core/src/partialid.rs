//! Bounds on the bunching moment under envelope restrictions on the
//! counterfactual density, closed-form special cases, and the
//! moment-inequality test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BunchingError, Result};
use crate::inference::chi_squared_quantile;
use crate::linalg;
use crate::model::{PolicySpec, StructuralModel};
use crate::poly::Polynomial;
use crate::sample::{construct_estimation_sample, Observation, WeightFn};
use crate::sieve::fit_conditional_moment;

/// Piecewise polynomial with pieces on `[t_{s-1}, t_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePoly {
    pub knots: Vec<f64>,
    pub pieces: Vec<Polynomial>,
}

impl PiecewisePoly {
    pub fn new(knots: Vec<f64>, pieces: Vec<Polynomial>) -> Result<Self> {
        if knots.len() != pieces.len() + 1 || pieces.is_empty() {
            return invalid(format!("{} knots cannot delimit {} pieces", knots.len(), pieces.len()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return invalid("knots must be strictly increasing");
        }
        Ok(PiecewisePoly { knots, pieces })
    }

    pub fn constant(lo: f64, hi: f64, c: f64) -> Result<Self> {
        PiecewisePoly::new(vec![lo, hi], vec![Polynomial::constant(lo, c)])
    }

    pub fn eval(&self, y: f64) -> f64 {
        let s = self.knots[1..self.knots.len() - 1].partition_point(|t| *t <= y);
        self.pieces[s].eval(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePair {
    pub lower: PiecewisePoly,
    pub upper: PiecewisePoly,
}

impl EnvelopePair {
    /// Checks the ordering of the envelopes on a dense grid.
    pub fn new(lower: PiecewisePoly, upper: PiecewisePoly) -> Result<Self> {
        let lo = lower.knots[0].max(upper.knots[0]);
        let hi = lower.knots.last().unwrap().min(*upper.knots.last().unwrap());
        for i in 0..=1000 {
            let y = lo + (hi - lo) * i as f64 / 1000.0;
            let (a, b) = (lower.eval(y), upper.eval(y));
            if a > b + 1e-12 * b.abs().max(1.0) {
                return invalid(format!("lower envelope exceeds upper envelope at {y}: {a} > {b}"));
            }
        }
        Ok(EnvelopePair { lower, upper })
    }
}

fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Truncated knot-sum bound for one envelope. `moments[j-1]` is the fitted
/// `E[w^j | y0 = y]`; the reverted window edge is assumed to lie at or
/// above every knot.
pub fn envelope_bound(envelope: &PiecewisePoly, moments: &[Polynomial], k0: f64, ell: usize) -> Result<f64> {
    if ell == 0 {
        return invalid("series order must be at least 1");
    }
    if moments.len() < ell {
        return invalid(format!("{ell} terms requested but only {} moment fits supplied", moments.len()));
    }
    let mut total = 0.0;
    let s_count = envelope.pieces.len();
    for s in 0..s_count {
        let t = envelope.knots[s];
        let current = envelope.pieces[s].recenter(t);
        let jump = if s == 0 { current } else { current.sub(&envelope.pieces[s - 1]) };
        let shift = t - k0;
        for j in 1..=ell {
            let mut shifted = Polynomial::constant(t, binomial(j, 0) * (-shift).powi(j as i32));
            for (i, m) in moments.iter().enumerate().take(j) {
                let order = i + 1;
                let coef = binomial(j, order) * (-shift).powi((j - order) as i32);
                shifted = shifted.add(&m.scale(coef));
            }
            let product = shifted.mul(&jump);
            total += product.coeffs.get(j - 1).copied().unwrap_or(0.0) / j as f64;
        }
    }
    Ok(total)
}

pub fn envelope_bounds(envelopes: &EnvelopePair, moments: &[Polynomial], k0: f64, ell: usize) -> Result<(f64, f64)> {
    Ok((
        envelope_bound(&envelopes.lower, moments, k0, ell)?,
        envelope_bound(&envelopes.upper, moments, k0, ell)?,
    ))
}

fn blomquist_levels(f_k0: f64, f_k1: f64, policy: &PolicySpec, theta: f64) -> Result<(f64, f64)> {
    if !(f_k0 > 0.0 && f_k1 > 0.0) {
        return invalid("densities at the window edges must be positive");
    }
    policy.validate()?;
    let ratio = 1.0 / (policy.log_ratio() * theta).exp();
    Ok((f_k0, ratio * f_k1))
}

/// Bounds on the bunching mass when the preference density on the
/// bunching interval stays within `[sigma_lo, sigma_hi]` times the range of
/// its boundary values.
pub fn blomquist_bounds(
    f_k0: f64,
    f_k1: f64,
    policy: &PolicySpec,
    theta: f64,
    sigma_lo: f64,
    sigma_hi: f64,
) -> Result<(f64, f64)> {
    if !(sigma_lo > 0.0 && sigma_lo <= 1.0 && sigma_hi >= 1.0) {
        return invalid(format!("need 0 < sigma_lo <= 1 <= sigma_hi, got {sigma_lo} and {sigma_hi}"));
    }
    blomquist_levels(f_k0, f_k1, policy, theta)?;
    let r = (policy.log_ratio() * theta).exp();
    let d_minus = f_k0 * (r * policy.k1 - policy.k0);
    let d_plus = f_k1 * (policy.k1 - policy.k0 / r);
    Ok((sigma_lo * d_minus.min(d_plus), sigma_hi * d_minus.max(d_plus)))
}

/// Constant envelopes for the counterfactual density implied by the same
/// restriction, on `[k0, R(k1)]`.
pub fn blomquist_envelopes(
    f_k0: f64,
    f_k1: f64,
    policy: &PolicySpec,
    theta: f64,
    sigma_lo: f64,
    sigma_hi: f64,
) -> Result<EnvelopePair> {
    let (a, b) = blomquist_levels(f_k0, f_k1, policy, theta)?;
    let kbar1 = StructuralModel::Isoelastic.reversion(policy, policy.k1, &[], &[theta])?;
    let hi = if kbar1 > policy.k0 { kbar1 } else { policy.k0 + 1.0 };
    EnvelopePair::new(
        PiecewisePoly::constant(policy.k0, hi, sigma_lo * a.min(b))?,
        PiecewisePoly::constant(policy.k0, hi, sigma_hi * a.max(b))?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BertanhaSet {
    Empty,
    Interval { lo: f64, hi: f64 },
    HalfLine { lo: f64 },
}

/// Identified set for the elasticity when the log-preference density is
/// Lipschitz with constant `lipschitz`. All inputs are on the log scale.
pub fn bertanha_interval(
    f_k0: f64,
    f_k1: f64,
    k0: f64,
    k1: f64,
    lipschitz: f64,
    bunching: f64,
    log_ratio: f64,
) -> Result<BertanhaSet> {
    if !(lipschitz > 0.0) || !(log_ratio > 0.0) {
        return invalid("Lipschitz constant and log net-of-tax ratio must be positive");
    }
    if !(f_k0 >= 0.0 && f_k1 >= 0.0 && bunching >= 0.0) {
        return invalid("densities and bunching mass must be nonnegative");
    }
    let m = lipschitz;
    let half_sum = 0.5 * (f_k0 + f_k1);
    let mean_sq = 0.5 * (f_k0 * f_k0 + f_k1 * f_k1);
    let lower_edge = (f_k0 * f_k0 - f_k1 * f_k1).abs() / (2.0 * m);
    let upper_edge = (f_k0 * f_k0 + f_k1 * f_k1) / (2.0 * m);
    let to_theta = |v: f64| (v - (k1 - k0)) / log_ratio;
    if bunching < lower_edge {
        return Ok(BertanhaSet::Empty);
    }
    let lo = to_theta((-half_sum + (mean_sq + m * bunching).sqrt()) / (m / 2.0));
    if bunching >= upper_edge {
        return Ok(BertanhaSet::HalfLine { lo });
    }
    let hi = to_theta((half_sum - (mean_sq - m * bunching).sqrt()) / (m / 2.0));
    Ok(BertanhaSet::Interval { lo, hi })
}

/// Parallelogram envelopes for the log counterfactual density on
/// `[k0, k0 + v]`.
pub fn bertanha_envelopes(f_k0: f64, f_k1: f64, k0: f64, v: f64, lipschitz: f64) -> Result<EnvelopePair> {
    let m = lipschitz;
    let delta = (f_k1 - f_k0) / (2.0 * m);
    if !(v > 2.0 * delta.abs()) {
        return invalid("window too short for the Lipschitz bound to connect the edge densities");
    }
    let mid = k0 + v / 2.0;
    let end = k0 + v;
    let up = mid + delta;
    let down = mid - delta;
    let upper = PiecewisePoly::new(
        vec![k0, up, end],
        vec![
            Polynomial::new(k0, vec![f_k0, m]),
            Polynomial::new(k0, vec![f_k0, m]).add(&Polynomial::new(up, vec![0.0, -2.0 * m])),
        ],
    )?;
    let lower = PiecewisePoly::new(
        vec![k0, down, end],
        vec![
            Polynomial::new(k0, vec![f_k0, -m]),
            Polynomial::new(k0, vec![f_k0, -m]).add(&Polynomial::new(down, vec![0.0, 2.0 * m])),
        ],
    )?;
    EnvelopePair::new(lower, upper)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QlrInput {
    pub mu1: f64,
    pub mu2: f64,
    /// Covariance of `sqrt(n) (mu1_hat, mu2_hat)`.
    pub v: [[f64; 2]; 2],
    pub b1: f64,
    pub b2: f64,
    pub n: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QlrResult {
    pub stat: f64,
    pub df: usize,
    pub cv: Option<f64>,
    pub reject: bool,
    /// Indices (0 or 1) of the constraints binding at the solution.
    pub binding: Vec<usize>,
    pub mu_star: [f64; 2],
}

/// Projection of `(mu1_hat, mu2_hat)` onto `{mu1 <= b1, mu2 >= -b2}` in the
/// metric of the pseudo-inverse covariance.
pub fn qlr_test(input: &QlrInput) -> Result<QlrResult> {
    if !(input.alpha > 0.0 && input.alpha < 1.0) {
        return invalid("alpha must lie in (0,1)");
    }
    let v = DMatrix::from_row_slice(2, 2, &[input.v[0][0], input.v[0][1], input.v[1][0], input.v[1][1]]);
    if (v[(0, 1)] - v[(1, 0)]).abs() > 1e-12 * v.amax().max(1.0) {
        return invalid("covariance matrix must be symmetric");
    }
    let eig = v.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l < -1e-12 * v.amax().max(1e-300)) {
        return invalid("covariance matrix must be positive semidefinite");
    }
    let (p, _) = linalg::pseudo_inverse_sym(&v);
    let n = input.n as f64;
    let hat = [input.mu1, input.mu2];
    let upper1 = input.b1;
    let lower2 = -input.b2;
    let feasible = |mu: [f64; 2]| mu[0] <= upper1 + 1e-12 * upper1.abs().max(1.0) && mu[1] >= lower2 - 1e-12 * lower2.abs().max(1.0);
    let value = |mu: [f64; 2]| {
        let d = DVector::from_vec(vec![hat[0] - mu[0], hat[1] - mu[1]]);
        n * d.dot(&(&p * &d))
    };
    let tol = 1e-12;
    let mut candidates: Vec<([f64; 2], Vec<usize>)> = Vec::new();
    candidates.push((hat, vec![]));
    // First constraint active, second coordinate free.
    {
        let d1 = hat[0] - upper1;
        let mu2 = if p[(1, 1)] > tol * p.amax().max(1e-300) {
            hat[1] + p[(0, 1)] * d1 / p[(1, 1)]
        } else {
            hat[1].max(lower2)
        };
        candidates.push(([upper1, mu2], vec![0]));
    }
    {
        let d2 = hat[1] - lower2;
        let mu1 = if p[(0, 0)] > tol * p.amax().max(1e-300) {
            hat[0] + p[(0, 1)] * d2 / p[(0, 0)]
        } else {
            hat[0].min(upper1)
        };
        candidates.push(([mu1, lower2], vec![1]));
    }
    candidates.push(([upper1, lower2], vec![0, 1]));

    let mut best: Option<([f64; 2], Vec<usize>, f64)> = None;
    for (mu, active) in candidates {
        if !feasible(mu) {
            continue;
        }
        let val = value(mu);
        let better = match &best {
            None => true,
            Some((_, _, b)) => val < *b - 1e-12 * b.abs().max(1e-300),
        };
        if better {
            best = Some((mu, active, val));
        }
    }
    let (mu_star, active, stat) = best.ok_or_else(|| BunchingError::Numerical("no feasible projection".into()))?;
    let stat = stat.max(0.0);
    let binding: Vec<usize> = if stat == 0.0 { vec![] } else { active };
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
    let (p_trans, _) = linalg::pseudo_inverse_sym(&(&a * &v * &a));
    let ap = &a * p_trans;
    let rows = DMatrix::from_fn(binding.len(), 2, |r, c| ap[(binding[r], c)]);
    let df = linalg::rank(&rows);
    let cv = if df > 0 { Some(chi_squared_quantile(df, 1.0 - input.alpha)?) } else { None };
    let reject = cv.is_some_and(|c| stat > c);
    Ok(QlrResult { stat, df, cv, reject, binding, mu_star })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartialIdConfig {
    pub kappa: usize,
    pub ell: usize,
    /// Bias allowances for the lower and upper bound.
    pub bias: (f64, f64),
    pub alpha: f64,
    pub weight: WeightFn,
}

impl Default for PartialIdConfig {
    fn default() -> Self {
        PartialIdConfig { kappa: 4, ell: 2, bias: (0.0, 0.0), alpha: 0.05, weight: WeightFn::One }
    }
}

/// Moment-inequality inputs from data: envelope bounds on the normalised
/// bunching moment at `theta` with least-squares conditional moments, and
/// the covariance of the stacked influence terms. Envelopes are treated as
/// known.
pub fn qlr_input_from_data(
    data: &[Observation],
    model: &StructuralModel,
    theta: &[f64],
    policy: &PolicySpec,
    envelopes: &EnvelopePair,
    config: &PartialIdConfig,
) -> Result<QlrInput> {
    let PartialIdConfig { kappa, ell, bias, alpha, ref weight } = *config;
    let sample = construct_estimation_sample(data, model, theta, policy, weight, None)?;
    let n = sample.n;
    let fits = (1..=ell)
        .map(|j| fit_conditional_moment(&sample, j, kappa))
        .collect::<Result<Vec<_>>>()?;
    let moments: Vec<Polynomial> = fits.iter().map(|f| f.polynomial()).collect();
    let k0 = sample.k0;
    let lower = envelope_bound(&envelopes.lower, &moments, k0, ell)?;
    let upper = envelope_bound(&envelopes.upper, &moments, k0, ell)?;

    let weights_t = data.iter().map(|o| weight.weight(o)).collect::<Result<Vec<_>>>()?;
    let e_t = weights_t.iter().sum::<f64>() / n as f64;
    if !(e_t > 0.0) {
        return Err(BunchingError::Data("weights have zero mean".into()));
    }
    let ratio = sample.bunching_share / e_t;

    let gradient = |env: &PiecewisePoly| -> Result<Vec<Vec<f64>>> {
        let zero: Vec<Polynomial> = (0..ell).map(|_| Polynomial::constant(k0, 0.0)).collect();
        let base = envelope_bound(env, &zero, k0, ell)?;
        let mut out = Vec::with_capacity(ell);
        for j in 0..ell {
            let mut row = Vec::with_capacity(kappa);
            for c in 0..kappa {
                let mut probe = zero.clone();
                let mut coeffs = vec![0.0; c + 1];
                coeffs[c] = 1.0;
                probe[j] = Polynomial::new(k0, coeffs);
                row.push(envelope_bound(env, &probe, k0, ell)? - base);
            }
            out.push(row);
        }
        Ok(out)
    };
    let grad_lo = gradient(&envelopes.lower)?;
    let grad_hi = gradient(&envelopes.upper)?;

    let mut inside = vec![0.0; n];
    for &(i, _) in &sample.bunchers {
        inside[i] = 1.0;
    }
    let mut phi = vec![[0.0f64; 2]; n];
    for (i, t) in weights_t.iter().enumerate() {
        let r = t * (inside[i] - ratio) / e_t;
        phi[i] = [-r, -r];
    }
    for (j, fit) in fits.iter().enumerate() {
        let inf = fit.influence(&sample);
        for (row, u) in sample.units.iter().enumerate() {
            for c in 0..kappa {
                let psi = inf[(row, c)];
                phi[u.index][0] += grad_lo[j][c] * psi;
                phi[u.index][1] += grad_hi[j][c] * psi;
            }
        }
    }
    let mean = phi.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0] / n as f64, acc[1] + p[1] / n as f64]);
    let mut v = [[0.0; 2]; 2];
    for p in &phi {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                v[a][b] += d[a] * d[b] / n as f64;
            }
        }
    }
    Ok(QlrInput { mu1: lower - ratio, mu2: upper - ratio, v, b1: bias.0, b2: bias.1, n, alpha })
}
