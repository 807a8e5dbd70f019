//! Counterfactual correction of observed data under a hypothesised
//! structural parameter.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, Region};
use crate::error::{invalid, BunchingError, Result};
use crate::model::{PolicySpec, StructuralModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(default = "unit_weight")]
    pub t: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl Observation {
    pub fn new(y: f64, x: Vec<f64>, t: f64) -> Result<Self> {
        if !y.is_finite() {
            return invalid(format!("observation value must be finite, got {y}"));
        }
        if !(t >= 0.0 && t.is_finite()) {
            return invalid(format!("observation weight must be nonnegative, got {t}"));
        }
        Ok(Observation { y, x, t })
    }

    pub fn plain(y: f64) -> Self {
        Observation { y, x: Vec::new(), t: 1.0 }
    }
}

/// Weight function applied to each unit when forming moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    One,
    /// The weight column carried by the data.
    Observed,
    /// `exp(x[covariate])`.
    Exp { covariate: usize },
}

impl WeightFn {
    pub fn weight(&self, obs: &Observation) -> Result<f64> {
        match *self {
            WeightFn::One => Ok(1.0),
            WeightFn::Observed => Ok(obs.t),
            WeightFn::Exp { covariate } => obs
                .x
                .get(covariate)
                .map(|v| v.exp())
                .ok_or_else(|| BunchingError::InvalidInput(format!("missing covariate {covariate}"))),
        }
    }
}

/// A retained unit after counterfactual correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedUnit {
    /// Position in the original data.
    pub index: usize,
    pub y0: f64,
    pub t: f64,
    /// Reverted window edge minus `k0`.
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSample {
    pub units: Vec<CorrectedUnit>,
    /// Original index and weight of every unit inside the bunching window.
    pub bunchers: Vec<(usize, f64)>,
    /// Size of the full sample.
    pub n: usize,
    pub lo: f64,
    pub k0: f64,
    pub kbar1: f64,
    pub hi: f64,
    pub bunching_share: f64,
}

impl EstimationSample {
    pub fn region(&self) -> Region {
        Region::new(vec![(self.lo, self.k0), (self.kbar1, self.hi)]).expect("validated at construction")
    }

    pub fn region_length(&self) -> f64 {
        (self.k0 - self.lo) + (self.hi - self.kbar1)
    }

    pub fn basis_spec(&self, kappa: usize) -> Result<BasisSpec> {
        BasisSpec::censored(kappa, self.lo, self.k0, self.kbar1, self.hi)
    }

    /// Units contributing `t * w^j` to the `j`-th moment.
    pub fn moment_weights(&self, j: usize) -> Vec<f64> {
        self.units.iter().map(|u| u.t * u.w.powi(j as i32)).collect()
    }
}

/// Weighted share of observations inside `[k0, k1]`.
pub fn bunching_share(data: &[Observation], k0: f64, k1: f64, weight: &WeightFn) -> Result<f64> {
    if data.is_empty() {
        return invalid("empty data");
    }
    let mut total = 0.0;
    for obs in data {
        if obs.y >= k0 && obs.y <= k1 {
            total += weight.weight(obs)?;
        }
    }
    Ok(total / data.len() as f64)
}

/// Build the censored pre-cutoff sample implied by `theta`.
///
/// Units below `k0` are kept, units above their window edge are mapped
/// through the reversion and kept when they land in `(kbar1, hi]`, and
/// window units are dropped. `kbar1_override` replaces the data-driven
/// threshold.
pub fn construct_estimation_sample(
    data: &[Observation],
    model: &StructuralModel,
    theta: &[f64],
    policy: &PolicySpec,
    weight: &WeightFn,
    kbar1_override: Option<f64>,
) -> Result<EstimationSample> {
    if data.is_empty() {
        return invalid("empty data");
    }
    model.check_theta(theta)?;
    let n = data.len();
    let (lo, k0, hi) = (policy.support_lo, policy.k0, policy.support_hi);

    let mut edges = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for obs in data {
        if !obs.y.is_finite() {
            return invalid("observation value must be finite");
        }
        let upper = model.window_upper(policy, &obs.x, theta)?;
        let reverted = model.reversion(policy, upper, &obs.x, theta)?;
        edges.push((upper, reverted));
        weights.push(weight.weight(obs)?);
    }

    let mut bunchers = Vec::new();
    let mut kbar_pos = f64::NEG_INFINITY;
    let mut kbar_any = f64::NEG_INFINITY;
    let mut share = 0.0;
    for (i, obs) in data.iter().enumerate() {
        let (upper, reverted) = edges[i];
        if obs.y >= k0 && obs.y <= upper {
            bunchers.push((i, weights[i]));
            share += weights[i];
            kbar_any = kbar_any.max(reverted);
            if weights[i] > 0.0 {
                kbar_pos = kbar_pos.max(reverted);
            }
        }
    }
    let kbar1 = match kbar1_override {
        Some(v) => v,
        None if kbar_pos.is_finite() => kbar_pos,
        None if kbar_any.is_finite() => {
            log::warn!("every buncher has zero weight; threshold taken over all bunchers");
            kbar_any
        }
        None => {
            return Err(BunchingError::Data(
                "no observations inside the bunching window; supply a threshold override".into(),
            ))
        }
    };
    if !(kbar1 < hi) {
        return Err(BunchingError::Data(format!(
            "threshold {kbar1:.6} is not below the support upper bound {hi:.6}; right segment is empty"
        )));
    }
    if kbar1 < k0 {
        return invalid(format!("threshold {kbar1} lies below the window lower edge {k0}"));
    }

    let mut units = Vec::new();
    for (i, obs) in data.iter().enumerate() {
        let (upper, reverted) = edges[i];
        let w = reverted - k0;
        if obs.y < k0 {
            if obs.y >= lo {
                units.push(CorrectedUnit { index: i, y0: obs.y, t: weights[i], w });
            }
        } else if obs.y > upper {
            let y0 = model.reversion(policy, obs.y, &obs.x, theta)?;
            if y0 > kbar1 && y0 <= hi {
                units.push(CorrectedUnit { index: i, y0, t: weights[i], w });
            }
        }
    }
    units.sort_by(|a, b| {
        a.y0.total_cmp(&b.y0)
            .then(a.t.total_cmp(&b.t))
            .then(a.w.total_cmp(&b.w))
    });

    Ok(EstimationSample {
        units,
        bunchers,
        n,
        lo,
        k0,
        kbar1,
        hi,
        bunching_share: share / n as f64,
    })
}
