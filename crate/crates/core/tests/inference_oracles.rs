use approx::assert_relative_eq;
use bunching::dgp::{simulate, DgpConfig};
use bunching::inference::{
    confidence_set, estimate_moment, point_test_statistic, wald_joint_test, TestConfig,
};
use bunching::{Observation, PolicySpec, StructuralModel, WeightFn};
use nalgebra::{Matrix2, Vector2};

fn policy() -> PolicySpec {
    PolicySpec::new(0.0, 0.2, 2.0, 1.7, 2.3, 1.0, 3.5).unwrap()
}

fn eight_points() -> Vec<Observation> {
    [1.1, 1.3, 1.6, 2.0, 2.1, 2.5, 2.8, 3.0].iter().map(|&y| Observation::plain(y)).collect()
}

/// Two-parameter maximum likelihood with a linear density, solved by plain
/// Newton steps in monomial coordinates.
#[test]
fn eight_point_sample_matches_hand_oracle() {
    let p = policy();
    let theta = 0.5;
    let r = |y: f64| (1.25f64).powf(theta) * y;
    let kbar1 = r(p.k1);
    let w = kbar1 - p.k0;
    let data = eight_points();
    let n = data.len() as f64;
    let mut y0 = Vec::new();
    let mut bunchers = 0.0;
    for o in &data {
        if o.y < p.k0 {
            y0.push(o.y);
        } else if o.y <= p.k1 {
            bunchers += 1.0;
        } else if r(o.y) > kbar1 && r(o.y) <= p.support_hi {
            y0.push(r(o.y));
        }
    }
    let q = Vector2::new(
        (p.k0 - p.support_lo) + (p.support_hi - kbar1),
        (-(p.support_lo - p.k0).powi(2) + (p.support_hi - p.k0).powi(2) - (kbar1 - p.k0).powi(2)) / 2.0,
    );
    let mut c = Vector2::new(y0.len() as f64 * w / n / q[0], 0.0);
    let mut hess = Matrix2::zeros();
    for _ in 0..100 {
        let mut grad = -q;
        hess = Matrix2::zeros();
        for &y in &y0 {
            let z = Vector2::new(1.0, y - p.k0);
            let f = c.dot(&z);
            grad += z * (w / f / n);
            hess += z * z.transpose() * (w / (f * f) / n);
        }
        c += hess.try_inverse().unwrap() * grad;
    }
    let mu = bunchers / n - c[0];
    let hinv = hess.try_inverse().unwrap();
    let mut scores: Vec<f64> = vec![1.0; bunchers as usize];
    for &y in &y0 {
        let z = Vector2::new(1.0, y - p.k0);
        scores.push(-(hinv * z * (w / c.dot(&z)))[0]);
    }
    let sigma = (scores.iter().map(|s| s * s).sum::<f64>() / n).sqrt();

    let config = TestConfig { kappa: 2, ell: 1, ..TestConfig::default() };
    let res = point_test_statistic(&data, &StructuralModel::Isoelastic, &[theta], &p, &config).unwrap();
    assert_relative_eq!(res.mu_hat, mu, epsilon = 1e-8);
    assert_relative_eq!(res.sigma_hat, sigma, epsilon = 1e-8);
    assert_relative_eq!(res.stat, n.sqrt() * mu.abs() / sigma, epsilon = 1e-7);
    assert_relative_eq!(scores.iter().sum::<f64>() / n, mu, epsilon = 1e-8);
}

fn simulated(seed: u64) -> (Vec<Observation>, PolicySpec) {
    let cfg = DgpConfig { n: 4000, seed, ..DgpConfig::default() };
    let eta = cfg.eta_distribution().unwrap();
    (simulate(&cfg).unwrap(), cfg.policy(&eta).unwrap())
}

fn small_config() -> TestConfig {
    let cfg = DgpConfig::default();
    let eta = cfg.eta_distribution().unwrap();
    TestConfig { kappa: 8, ell: 3, upper_observed: Some(cfg.observed_upper(&eta).unwrap()), ..TestConfig::default() }
}

#[test]
fn scale_equivariance_in_weights() {
    let (mut data, p) = simulated(3);
    for (i, o) in data.iter_mut().enumerate() {
        o.t = 0.5 + (i % 7) as f64 / 7.0;
    }
    let config = TestConfig { weight: WeightFn::Observed, ..small_config() };
    let model = StructuralModel::Isoelastic;
    let base = point_test_statistic(&data, &model, &[0.5], &p, &config).unwrap();
    for o in data.iter_mut() {
        o.t *= 3.0;
    }
    let scaled = point_test_statistic(&data, &model, &[0.5], &p, &config).unwrap();
    assert_relative_eq!(scaled.mu_hat, 3.0 * base.mu_hat, epsilon = 1e-10, max_relative = 1e-9);
    assert_relative_eq!(scaled.sigma_hat, 3.0 * base.sigma_hat, epsilon = 1e-10, max_relative = 1e-9);
    assert!((scaled.stat - base.stat).abs() < 1e-10 * base.stat.max(1.0));
}

#[test]
fn scores_average_to_the_moment() {
    let (data, p) = simulated(4);
    let config = small_config();
    let est = estimate_moment(&data, &StructuralModel::Isoelastic, &[0.5], &p, &WeightFn::One, &config).unwrap();
    let mean = est.scores.iter().sum::<f64>() / est.scores.len() as f64;
    assert!((mean - est.mu_hat).abs() < 1e-10, "{mean} {}", est.mu_hat);
}

#[test]
fn shorter_series_telescopes() {
    let (data, p) = simulated(5);
    let model = StructuralModel::Isoelastic;
    let long = estimate_moment(&data, &model, &[0.5], &p, &WeightFn::One, &TestConfig { ell: 5, ..small_config() }).unwrap();
    for ell in 1..5 {
        let short =
            estimate_moment(&data, &model, &[0.5], &p, &WeightFn::One, &TestConfig { ell, ..small_config() }).unwrap();
        let tail: f64 = long.series_terms[ell..].iter().sum();
        assert!((short.mu_hat - long.mu_hat - tail).abs() < 1e-10);
    }
}

#[test]
fn balanced_sample_has_zero_statistic() {
    let (mut data, p) = simulated(6);
    let config = TestConfig { weight: WeightFn::Observed, ..small_config() };
    let model = StructuralModel::Isoelastic;
    let est = estimate_moment(&data, &model, &[0.5], &p, &WeightFn::Observed, &config).unwrap();
    let series: f64 = est.series_terms.iter().sum();
    let count = est.sample.bunchers.len() as f64;
    for &(i, _) in &est.sample.bunchers {
        data[i].t = series * data.len() as f64 / count;
    }
    let res = point_test_statistic(&data, &model, &[0.5], &p, &config).unwrap();
    assert!(res.mu_hat.abs() < 1e-12);
    assert!(res.stat < 1e-9);
    assert!(!res.reject);
}

#[test]
fn single_moment_wald_is_squared_t() {
    let (data, p) = simulated(7);
    let config = small_config();
    let model = StructuralModel::Isoelastic;
    let t = point_test_statistic(&data, &model, &[0.45], &p, &config).unwrap();
    let w = wald_joint_test(&data, &model, &[0.45], &p, &[WeightFn::One], &config).unwrap();
    assert_eq!(w.df, 1);
    assert_relative_eq!(w.stat, t.stat * t.stat, max_relative = 1e-10);
}

#[test]
fn degenerate_grid_returns_the_point() {
    let (data, p) = simulated(8);
    let config = small_config();
    let set = confidence_set(&data, &StructuralModel::Isoelastic, &p, &config, &[0.5], &[]).unwrap();
    assert_eq!(set.points.len(), 1);
    if set.points[0].accepted() {
        assert_eq!(set.intervals, vec![(0.5, 0.5)]);
    } else {
        assert!(set.intervals.is_empty());
    }
}
