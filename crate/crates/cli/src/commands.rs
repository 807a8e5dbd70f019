use std::fs::File;
use std::io::{self, BufWriter, Write};

use bunching::dgp::{run_power_curve, simulate, McEstimator};
use bunching::inference::{calibrate_from_data, confidence_set, point_test_statistic, wald_joint_test};
use bunching::io::{ingest_histogram, ingest_microdata};
use bunching::partialid::{
    bertanha_envelopes, blomquist_envelopes, qlr_input_from_data, qlr_test, EnvelopePair, PiecewisePoly,
};
use bunching::pe_baseline::{aligned_support, bin_histogram, pe_iv_estimate, Histogram};
use bunching::Observation;
use serde::Serialize;

use crate::config::{EnvelopeSpec, RunConfig};
use crate::error::CliError;
use crate::Command;

pub fn execute(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Simulate => run_simulate(cfg),
        Command::GpsTest => run_gps_test(cfg),
        Command::GpsCi => run_gps_ci(cfg),
        Command::Wald => run_wald(cfg),
        Command::PartialId => run_partial_id(cfg),
        Command::Pe => run_pe(cfg),
        Command::Calibrate => run_calibrate(cfg),
        Command::Power => run_power(cfg),
    }
}

/// Opens `<output>/<file>` or stdout.
fn sink(cfg: &RunConfig, file: &str) -> Result<Box<dyn Write>, CliError> {
    match &cfg.output {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok(Box::new(BufWriter::new(File::create(dir.join(file))?)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn emit_json<T: Serialize>(cfg: &RunConfig, name: &str, value: &T) -> Result<(), CliError> {
    let mut out = sink(cfg, &format!("{name}.json"))?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Config(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn microdata(cfg: &RunConfig) -> Result<Vec<Observation>, CliError> {
    match &cfg.data.microdata {
        Some(path) if !path.is_file() => Err(CliError::Config(format!("cannot read {}", path.display()))),
        Some(path) => Ok(ingest_microdata(path)?),
        None => Err(CliError::Config("no microdata given: set data.microdata or pass --data".into())),
    }
}

fn theta(cfg: &RunConfig) -> Result<Vec<f64>, CliError> {
    if cfg.grid.theta.is_empty() {
        return Err(CliError::Config("grid.theta is empty".into()));
    }
    Ok(cfg.grid.theta.clone())
}

fn run_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let data = simulate(&cfg.dgp)?;
    let d = data.first().map_or(0, |o| o.x.len());
    let mut w = csv::Writer::from_writer(sink(cfg, "simulate.csv")?);
    let mut header = vec!["y".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.push("t".into());
    w.write_record(&header)?;
    for obs in &data {
        let mut row = vec![obs.y.to_string()];
        row.extend(obs.x.iter().map(f64::to_string));
        row.push(obs.t.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run_gps_test(cfg: &RunConfig) -> Result<(), CliError> {
    let data = microdata(cfg)?;
    let result = point_test_statistic(&data, &cfg.model, &theta(cfg)?, &cfg.policy, &cfg.test)?;
    emit_json(cfg, "gps-test", &result)
}

#[derive(Serialize)]
struct CiRow {
    theta: f64,
    mu_hat: Option<f64>,
    sigma_hat: Option<f64>,
    stat: Option<f64>,
    cv: Option<f64>,
    reject: Option<bool>,
    chi_inv: Option<f64>,
    flagged: Option<bool>,
    error: Option<String>,
}

fn run_gps_ci(cfg: &RunConfig) -> Result<(), CliError> {
    let data = microdata(cfg)?;
    let grid = cfg.grid.values()?;
    let set = confidence_set(&data, &cfg.model, &cfg.policy, &cfg.test, &grid, &cfg.grid.rest)?;
    let mut w = csv::Writer::from_writer(sink(cfg, "gps-ci.csv")?);
    for p in &set.points {
        let r = p.result.as_ref();
        w.serialize(CiRow {
            theta: p.theta,
            mu_hat: r.map(|r| r.mu_hat),
            sigma_hat: r.map(|r| r.sigma_hat),
            stat: r.map(|r| r.stat),
            cv: r.map(|r| r.cv),
            reject: r.map(|r| r.reject),
            chi_inv: r.map(|r| r.chi_inv),
            flagged: r.map(|r| r.flagged),
            error: p.error.clone(),
        })?;
    }
    w.flush()?;
    if set.intervals.is_empty() {
        eprintln!("confidence set: empty on the grid");
    }
    for (a, b) in &set.intervals {
        eprintln!("confidence set: [{a}, {b}]");
    }
    Ok(())
}

fn run_wald(cfg: &RunConfig) -> Result<(), CliError> {
    let data = microdata(cfg)?;
    let result = wald_joint_test(&data, &cfg.model, &theta(cfg)?, &cfg.policy, &cfg.wald.weights, &cfg.test)?;
    emit_json(cfg, "wald", &result)
}

fn envelopes(cfg: &RunConfig, data: &[Observation], theta: &[f64]) -> Result<EnvelopePair, CliError> {
    let policy = &cfg.policy;
    let pair = match cfg.partial_id.envelope {
        EnvelopeSpec::Blomquist { f_k0, f_k1, sigma_lo, sigma_hi } => {
            blomquist_envelopes(f_k0, f_k1, policy, theta[0], sigma_lo, sigma_hi)?
        }
        EnvelopeSpec::Bertanha { f_k0, f_k1, lipschitz } => {
            let x = data.first().map(|o| o.x.as_slice()).unwrap_or(&[]);
            let kbar1 = cfg.model.window_upper(policy, x, theta)?;
            bertanha_envelopes(f_k0, f_k1, policy.k0, kbar1 - policy.k0, lipschitz)?
        }
        EnvelopeSpec::Constant { lower, upper } => {
            let x = data.first().map(|o| o.x.as_slice()).unwrap_or(&[]);
            let kbar1 = cfg.model.window_upper(policy, x, theta)?;
            EnvelopePair::new(
                PiecewisePoly::constant(policy.k0, kbar1, lower)?,
                PiecewisePoly::constant(policy.k0, kbar1, upper)?,
            )?
        }
    };
    Ok(pair)
}

#[derive(Serialize)]
struct PartialIdRow {
    theta: f64,
    mu1: Option<f64>,
    mu2: Option<f64>,
    stat: Option<f64>,
    df: Option<usize>,
    cv: Option<f64>,
    reject: Option<bool>,
    error: Option<String>,
}

fn run_partial_id(cfg: &RunConfig) -> Result<(), CliError> {
    let data = microdata(cfg)?;
    let grid = cfg.grid.values()?;
    let mut w = csv::Writer::from_writer(sink(cfg, "partial-id.csv")?);
    for &g in &grid {
        let mut theta = vec![g];
        theta.extend_from_slice(&cfg.grid.rest);
        let outcome = envelopes(cfg, &data, &theta).and_then(|env| {
            let input = qlr_input_from_data(&data, &cfg.model, &theta, &cfg.policy, &env, &cfg.partial_id.config)?;
            Ok((qlr_test(&input)?, input))
        });
        let row = match outcome {
            Ok((r, input)) => PartialIdRow {
                theta: g,
                mu1: Some(input.mu1),
                mu2: Some(input.mu2),
                stat: Some(r.stat),
                df: Some(r.df),
                cv: r.cv,
                reject: Some(r.reject),
                error: None,
            },
            Err(e) => PartialIdRow {
                theta: g,
                mu1: None,
                mu2: None,
                stat: None,
                df: None,
                cv: None,
                reject: None,
                error: Some(e.to_string()),
            },
        };
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PeReport {
    degree: usize,
    b_hat: f64,
    f_hat: f64,
    theta_hat: f64,
    se_theta: f64,
    alpha: f64,
    ci_lo: f64,
    ci_hi: f64,
    theta_null: f64,
    z_stat: f64,
    reject: bool,
}

fn histogram(cfg: &RunConfig) -> Result<Histogram, CliError> {
    let window = (cfg.policy.k0, cfg.policy.k1);
    if let Some(path) = &cfg.data.histogram {
        if !path.is_file() {
            return Err(CliError::Config(format!("cannot read {}", path.display())));
        }
        return Ok(ingest_histogram(path, window, cfg.data.n_obs)?);
    }
    let ys: Vec<f64> = microdata(cfg)?.iter().map(|o| o.y).collect();
    let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let support = aligned_support(min, max, cfg.pe.mesh, cfg.policy.k0);
    Ok(bin_histogram(&ys, cfg.pe.mesh, support, window)?)
}

fn run_pe(cfg: &RunConfig) -> Result<(), CliError> {
    let hist = histogram(cfg)?;
    let est = pe_iv_estimate(&hist, &cfg.policy, &cfg.pe.options)?;
    let alpha = cfg.pe.alpha;
    let theta_null = theta(cfg)?[0];
    let (ci_lo, ci_hi) = est.interval(alpha);
    let report = PeReport {
        degree: est.degree,
        b_hat: est.b_hat,
        f_hat: est.f_hat,
        theta_hat: est.theta_hat,
        se_theta: est.se_theta,
        alpha,
        ci_lo,
        ci_hi,
        theta_null,
        z_stat: est.z_stat(theta_null),
        reject: est.reject(theta_null, alpha),
    };
    emit_json(cfg, "pe", &report)
}

fn run_calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    let data = microdata(cfg)?;
    let est = calibrate_from_data(&data, &cfg.model, &theta(cfg)?, &cfg.policy, &cfg.test, &cfg.calibrate.rho)?;
    emit_json(cfg, "calibrate", &est)
}

fn run_power(cfg: &RunConfig) -> Result<(), CliError> {
    let mut estimator = cfg.power.estimator.clone();
    if let McEstimator::Gps { config } | McEstimator::Wald { config, .. } = &mut estimator {
        if config.upper_observed.is_none() {
            let eta = cfg.dgp.eta_distribution()?;
            config.upper_observed = Some(cfg.dgp.observed_upper(&eta)?);
        }
    }
    let grid = cfg.grid.values()?;
    let result = run_power_curve(&cfg.dgp, &estimator, &grid, cfg.power.reps)?;
    result.write_csv(sink(cfg, "power.csv")?)?;
    Ok(())
}
