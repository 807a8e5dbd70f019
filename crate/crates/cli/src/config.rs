use std::path::{Path, PathBuf};

use bunching::dgp::{DgpConfig, McEstimator};
use bunching::inference::TestConfig;
use bunching::partialid::PartialIdConfig;
use bunching::pe_baseline::PeOptions;
use bunching::{PolicySpec, StructuralModel, WeightFn};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory for result files; results go to stdout when unset.
    pub output: Option<PathBuf>,
    pub data: DataSource,
    pub model: StructuralModel,
    pub policy: PolicySpec,
    pub test: TestConfig,
    pub grid: GridSpec,
    pub wald: WaldSpec,
    pub partial_id: PartialIdSpec,
    pub pe: PeSpec,
    pub calibrate: CalibrateSpec,
    pub dgp: DgpConfig,
    pub power: PowerSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output: None,
            data: DataSource::default(),
            model: StructuralModel::Isoelastic,
            policy: PolicySpec { tau0: 0.0, tau1: 0.2, k: 2.0, k0: 1.7, k1: 2.3, support_lo: 1.0, support_hi: 3.0 },
            test: TestConfig::default(),
            grid: GridSpec::default(),
            wald: WaldSpec::default(),
            partial_id: PartialIdSpec::default(),
            pe: PeSpec::default(),
            calibrate: CalibrateSpec::default(),
            dgp: DgpConfig::default(),
            power: PowerSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    /// CSV with columns `y`, optional `x1..xd` and `t`.
    pub microdata: Option<PathBuf>,
    /// CSV of `(bin_center, share)` pairs.
    pub histogram: Option<PathBuf>,
    /// Sample size behind a histogram, used by the multinomial variance.
    pub n_obs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Hypothesised value for single-point commands.
    pub theta: Vec<f64>,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    /// Explicit grid; overrides `start`, `stop` and `step` when non-empty.
    pub points: Vec<f64>,
    /// Values of the remaining parameters held fixed along the grid.
    pub rest: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { theta: vec![0.5], start: 0.0, stop: 1.0, step: 0.05, points: Vec::new(), rest: Vec::new() }
    }
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        if !self.points.is_empty() {
            return Ok(self.points.clone());
        }
        if !(self.step > 0.0) || !(self.stop >= self.start) {
            return Err(CliError::Config(format!(
                "grid needs step > 0 and stop >= start, got start={} stop={} step={}",
                self.start, self.stop, self.step
            )));
        }
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=count).map(|i| self.start + self.step * i as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaldSpec {
    pub weights: Vec<WeightFn>,
}

impl Default for WaldSpec {
    fn default() -> Self {
        WaldSpec { weights: vec![WeightFn::One] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvelopeSpec {
    /// Constant envelopes scaled from the edge densities.
    Blomquist { f_k0: f64, f_k1: f64, sigma_lo: f64, sigma_hi: f64 },
    /// Parallelogram envelopes from a Lipschitz bound.
    Bertanha { f_k0: f64, f_k1: f64, lipschitz: f64 },
    Constant { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartialIdSpec {
    #[serde(flatten)]
    pub config: PartialIdConfig,
    pub envelope: EnvelopeSpec,
}

impl Default for PartialIdSpec {
    fn default() -> Self {
        PartialIdSpec {
            config: PartialIdConfig::default(),
            envelope: EnvelopeSpec::Blomquist { f_k0: 1.0, f_k1: 1.0, sigma_lo: 0.5, sigma_hi: 2.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeSpec {
    #[serde(flatten)]
    pub options: PeOptions,
    /// Bin width used when binning microdata.
    pub mesh: f64,
    pub alpha: f64,
}

impl Default for PeSpec {
    fn default() -> Self {
        PeSpec { options: PeOptions::default(), mesh: 0.05, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSpec {
    pub rho: Vec<f64>,
}

impl Default for CalibrateSpec {
    fn default() -> Self {
        CalibrateSpec { rho: (1..=10).map(|i| i as f64 / 10.0).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSpec {
    pub reps: usize,
    pub estimator: McEstimator,
}

impl Default for PowerSpec {
    fn default() -> Self {
        PowerSpec { reps: 200, estimator: McEstimator::Gps { config: TestConfig::default() } }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes relative paths relative to the directory holding the config.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.microdata, &mut self.data.histogram, &mut self.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Default configuration rendered as TOML, listed by `--help`.
    pub fn documented_defaults() -> String {
        toml::to_string(&RunConfig::default()).unwrap_or_default()
    }
}
