//! Structural choice models.
//!
//! A model maps a preference parameter `eta` (and covariates `x`) to the
//! counterfactual choice under each side of the schedule, and from there to
//! the observed choice under the compound schedule.

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, BunchingError, Result};

/// Tax schedule with a single cutoff and the excluded window around it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub tau0: f64,
    pub tau1: f64,
    pub k: f64,
    pub k0: f64,
    pub k1: f64,
    pub support_lo: f64,
    pub support_hi: f64,
}

impl PolicySpec {
    pub fn new(
        tau0: f64,
        tau1: f64,
        k: f64,
        k0: f64,
        k1: f64,
        support_lo: f64,
        support_hi: f64,
    ) -> Result<Self> {
        let policy = PolicySpec { tau0, tau1, k, k0, k1, support_lo, support_hi };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.tau0, self.tau1, self.k, self.k0, self.k1, self.support_lo, self.support_hi];
        if all.iter().any(|v| !v.is_finite()) {
            return invalid("policy parameters must be finite");
        }
        if !(0.0..1.0).contains(&self.tau0) || !(0.0..1.0).contains(&self.tau1) {
            return invalid(format!("tax rates must lie in [0,1), got {} and {}", self.tau0, self.tau1));
        }
        if self.tau0 >= self.tau1 {
            return invalid(format!("need tau0 < tau1, got {} >= {}", self.tau0, self.tau1));
        }
        if !(self.support_lo < self.k0 && self.k0 <= self.k && self.k <= self.k1 && self.k1 < self.support_hi) {
            return invalid(format!(
                "need support_lo < k0 <= k <= k1 < support_hi, got {} {} {} {} {}",
                self.support_lo, self.k0, self.k, self.k1, self.support_hi
            ));
        }
        Ok(())
    }

    /// Net-of-tax rate `1 - tau_d`.
    pub fn net_of_tax(&self, regime: Regime) -> f64 {
        match regime {
            Regime::Pre => 1.0 - self.tau0,
            Regime::Post => 1.0 - self.tau1,
        }
    }

    /// `log((1 - tau0) / (1 - tau1))`, positive for a convex kink.
    pub fn log_ratio(&self) -> f64 {
        ((1.0 - self.tau0) / (1.0 - self.tau1)).ln()
    }

    pub fn with_window(&self, k0: f64, k1: f64) -> Result<Self> {
        PolicySpec::new(self.tau0, self.tau1, self.k, k0, k1, self.support_lo, self.support_hi)
    }
}

/// Which side of the cutoff's schedule applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Pre,
    Post,
}

/// Unobserved preference together with observed covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Heterogeneity {
    pub eta: f64,
    pub x: Vec<f64>,
}

impl Heterogeneity {
    pub fn new(eta: f64, x: Vec<f64>) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return domain(format!("eta must be positive and finite, got {eta}"));
        }
        Ok(Heterogeneity { eta, x })
    }
}

/// The shipped structural models.
///
/// `theta` slices passed to the methods hold `[theta]` for the isoelastic
/// and notch models and `[theta, omega]` for the augmented model, whose
/// elasticity is `theta + omega * x[covariate]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructuralModel {
    Isoelastic,
    AugmentedIsoelastic { covariate: usize },
    NotchIsoelastic { notch: f64, window_offset: f64 },
}

impl StructuralModel {
    pub fn theta_dim(&self) -> usize {
        match self {
            StructuralModel::AugmentedIsoelastic { .. } => 2,
            _ => 1,
        }
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return domain(format!("expected {} parameters, got {}", self.theta_dim(), theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return domain("parameters must be finite");
        }
        match *self {
            StructuralModel::Isoelastic => {
                if theta[0] < 0.0 {
                    return domain(format!("elasticity must be nonnegative, got {}", theta[0]));
                }
            }
            StructuralModel::AugmentedIsoelastic { .. } => {
                if theta[1].abs() >= theta[0] {
                    return domain(format!("need |omega| < theta, got theta={} omega={}", theta[0], theta[1]));
                }
            }
            StructuralModel::NotchIsoelastic { notch, window_offset } => {
                if theta[0] <= 0.0 {
                    return domain(format!("notch model needs a positive elasticity, got {}", theta[0]));
                }
                if !(notch >= 0.0) || !(window_offset >= 0.0) {
                    return domain("notch size and window offset must be nonnegative");
                }
            }
        }
        Ok(())
    }

    /// Unit-level elasticity.
    pub fn elasticity(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(self.elasticity_unchecked(x, theta))
    }

    fn elasticity_unchecked(&self, x: &[f64], theta: &[f64]) -> f64 {
        match *self {
            StructuralModel::AugmentedIsoelastic { covariate } => {
                theta[0] + theta[1] * x.get(covariate).copied().unwrap_or(0.0)
            }
            _ => theta[0],
        }
    }

    fn check_covariates(&self, x: &[f64]) -> Result<()> {
        if let StructuralModel::AugmentedIsoelastic { covariate } = *self {
            if covariate >= x.len() {
                return domain(format!("covariate index {covariate} out of range for {} covariates", x.len()));
            }
        }
        Ok(())
    }

    /// Counterfactual choice `(1 - tau_d)^theta(x) * eta`.
    pub fn counterfactual_choice(
        &self,
        policy: &PolicySpec,
        regime: Regime,
        x: &[f64],
        eta: f64,
        theta: &[f64],
    ) -> Result<f64> {
        if !(eta > 0.0 && eta.is_finite()) {
            return domain(format!("eta must be positive and finite, got {eta}"));
        }
        self.check_theta(theta)?;
        self.check_covariates(x)?;
        let e = self.elasticity_unchecked(x, theta);
        Ok(policy.net_of_tax(regime).powf(e) * eta)
    }

    /// Inverse of [`counterfactual_choice`](Self::counterfactual_choice) in `eta`.
    pub fn inverse_choice(
        &self,
        policy: &PolicySpec,
        regime: Regime,
        x: &[f64],
        y: f64,
        theta: &[f64],
    ) -> Result<f64> {
        if !(y > 0.0 && y.is_finite()) {
            return domain(format!("choice must be positive and finite, got {y}"));
        }
        self.check_theta(theta)?;
        self.check_covariates(x)?;
        let e = self.elasticity_unchecked(x, theta);
        Ok(policy.net_of_tax(regime).powf(-e) * y)
    }

    /// Observed choice under the compound schedule.
    pub fn actual_choice(&self, policy: &PolicySpec, x: &[f64], eta: f64, theta: &[f64]) -> Result<f64> {
        let y0 = self.counterfactual_choice(policy, Regime::Pre, x, eta, theta)?;
        if y0 < policy.k {
            return Ok(y0);
        }
        let y1 = self.counterfactual_choice(policy, Regime::Post, x, eta, theta)?;
        match *self {
            StructuralModel::NotchIsoelastic { .. } => {
                let (v0, v1) = self.values(policy, eta, theta)?;
                if v1 > v0 {
                    Ok(y1)
                } else {
                    Ok(policy.k)
                }
            }
            _ => {
                if y1 > policy.k {
                    Ok(y1)
                } else {
                    Ok(policy.k)
                }
            }
        }
    }

    /// Reversion map from post-cutoff to pre-cutoff counterfactual choices.
    pub fn reversion(&self, policy: &PolicySpec, y: f64, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_covariates(x)?;
        if !y.is_finite() {
            return domain("reversion argument must be finite");
        }
        Ok((policy.log_ratio() * self.elasticity_unchecked(x, theta)).exp() * y)
    }

    pub fn inverse_reversion(&self, policy: &PolicySpec, y0: f64, x: &[f64], theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_covariates(x)?;
        if !y0.is_finite() {
            return domain("reversion argument must be finite");
        }
        Ok((-policy.log_ratio() * self.elasticity_unchecked(x, theta)).exp() * y0)
    }

    /// Upper edge of the bunching window for a unit with covariates `x`.
    pub fn window_upper(&self, policy: &PolicySpec, x: &[f64], theta: &[f64]) -> Result<f64> {
        match *self {
            StructuralModel::NotchIsoelastic { window_offset, .. } => {
                let h = self.marginal_buncher(policy, theta)?;
                let edge = self.counterfactual_choice(policy, Regime::Post, x, h, theta)?;
                Ok(edge.max(policy.k) + window_offset)
            }
            _ => {
                self.check_theta(theta)?;
                Ok(policy.k1)
            }
        }
    }

    /// Payoff of choosing `y` under regime `d` for the notch model.
    fn payoff(&self, policy: &PolicySpec, regime: Regime, y: f64, eta: f64, theta: f64) -> f64 {
        let notch = match *self {
            StructuralModel::NotchIsoelastic { notch, .. } => notch,
            _ => 0.0,
        };
        let liability = match regime {
            Regime::Pre => 0.0,
            Regime::Post => notch,
        };
        let p = 1.0 + 1.0 / theta;
        policy.net_of_tax(regime) * (y - policy.k) - liability - eta / p * (y / eta).powf(p)
    }

    /// Values `(v(0), v(1))` of the best choice on each side of the cutoff.
    pub fn values(&self, policy: &PolicySpec, eta: f64, theta: &[f64]) -> Result<(f64, f64)> {
        self.check_theta(theta)?;
        if !(eta > 0.0 && eta.is_finite()) {
            return domain(format!("eta must be positive and finite, got {eta}"));
        }
        let t = theta[0];
        let y0 = policy.net_of_tax(Regime::Pre).powf(t) * eta;
        let y1 = policy.net_of_tax(Regime::Post).powf(t) * eta;
        let v0 = self.payoff(policy, Regime::Pre, y0.min(policy.k), eta, t);
        let v1 = self.payoff(policy, Regime::Post, y1.max(policy.k), eta, t);
        Ok((v0, v1))
    }

    /// Preference of the unit indifferent between the cutoff and the best
    /// interior choice above it. Units with `eta` at or below this value
    /// do not move above the cutoff.
    pub fn marginal_buncher(&self, policy: &PolicySpec, theta: &[f64]) -> Result<f64> {
        let StructuralModel::NotchIsoelastic { .. } = *self else {
            return domain("marginal buncher is only defined for notch models");
        };
        self.check_theta(theta)?;
        let t = theta[0];
        let gap = |eta: f64| -> Result<f64> {
            let (v0, v1) = self.values(policy, eta, theta)?;
            Ok(v1 - v0)
        };
        let mut lo = policy.k * policy.net_of_tax(Regime::Post).powf(-t);
        if gap(lo)? >= 0.0 {
            return Ok(lo);
        }
        let mut hi = (policy.support_hi * policy.net_of_tax(Regime::Post).powf(-t)).max(2.0 * lo);
        let mut doublings = 0;
        while gap(hi)? <= 0.0 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > 60 || !hi.is_finite() {
                return Err(BunchingError::Numerical(format!(
                    "could not bracket the indifference point: value gap {:.3e} at eta={:.3e}",
                    gap(lo)?,
                    lo
                )));
            }
        }
        while hi - lo > 1e-10 * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if gap(mid)? > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }
}
