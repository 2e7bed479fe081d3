use statrs::distribution::{ContinuousCDF, Normal};
use targeted_risk::inference::{normal_quantile, simultaneous_quantile};

const DRAWS: usize = 100_000;

fn equicorrelated(d: usize, rho: f64) -> Vec<f64> {
    (0..d * d).map(|k| if k / d == k % d { 1.0 } else { rho }).collect()
}

#[test]
fn one_component_gives_the_normal_quantile() {
    let q = simultaneous_quantile(&[4.0], 1, 0.95, DRAWS, 1).unwrap();
    assert!((q.value - 1.959964).abs() <= 0.02, "{}", q.value);
}

#[test]
fn perfectly_correlated_components_collapse_to_one() {
    let q = simultaneous_quantile(&equicorrelated(6, 1.0), 6, 0.95, DRAWS, 2).unwrap();
    assert!((q.value - 1.959964).abs() <= 0.02, "{}", q.value);
}

#[test]
fn independent_components_follow_the_sidak_quantile() {
    // P(max |Z_k| ≤ q) = (2Φ(q) − 1)^d
    let d = 10;
    let expected = Normal::new(0.0, 1.0).unwrap().inverse_cdf((1.0 + 0.95f64.powf(1.0 / d as f64)) / 2.0);
    assert!((expected - 2.80).abs() < 0.01);
    let q = simultaneous_quantile(&equicorrelated(d, 0.0), d, 0.95, DRAWS, 3).unwrap();
    assert!((q.value - expected).abs() <= 0.03, "{} vs {expected}", q.value);
}

#[test]
fn scale_of_the_covariance_is_irrelevant() {
    let base = equicorrelated(4, 0.4);
    let scaled: Vec<f64> = (0..16).map(|k| base[k] * [1.0, 9.0, 0.25, 4.0][k / 4] * [1.0, 9.0, 0.25, 4.0][k % 4]).collect();
    let a = simultaneous_quantile(&base, 4, 0.95, 20_000, 5).unwrap();
    let b = simultaneous_quantile(&scaled, 4, 0.95, 20_000, 5).unwrap();
    assert!((a.value - b.value).abs() < 1e-9);
}

#[test]
fn quantile_grows_with_dimension() {
    let values: Vec<f64> = [1, 2, 4, 8, 16]
        .iter()
        .map(|&d| simultaneous_quantile(&equicorrelated(d, 0.3), d, 0.95, DRAWS, 4).unwrap().value)
        .collect();
    assert!(values.windows(2).all(|w| w[0] < w[1]), "{values:?}");
    assert!(values[0] >= normal_quantile(0.95) - 0.02);
}

#[test]
fn zero_variance_components_are_left_out() {
    let mut sigma = equicorrelated(3, 0.0);
    sigma[4] = 0.0;
    let q = simultaneous_quantile(&sigma, 3, 0.95, 20_000, 6).unwrap();
    assert_eq!(q.excluded, vec![1]);
    assert!(simultaneous_quantile(&[0.0; 4], 2, 0.95, 100, 6).is_err());
}

#[test]
fn result_depends_only_on_the_seed() {
    let sigma = equicorrelated(5, 0.2);
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = serial.install(|| simultaneous_quantile(&sigma, 5, 0.95, 50_000, 9).unwrap());
    let b = wide.install(|| simultaneous_quantile(&sigma, 5, 0.95, 50_000, 9).unwrap());
    assert_eq!(a.value.to_bits(), b.value.to_bits());
}
