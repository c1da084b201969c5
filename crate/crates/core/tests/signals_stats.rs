use ncg_core::rng::SeedSource;
use ncg_core::signals::{envelope, gen_ar1, gen_discrete, gen_mixture, gen_noise, DiscreteKind, MixtureConfig, NoiseSpec};
use proptest::prelude::*;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

fn lag1(x: &[f64]) -> f64 {
    let (m, v) = mean_var(x);
    let c: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / (x.len() - 1) as f64;
    c / v
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn ar1_autocorrelation_and_variance() {
    let mut rng = SeedSource::new(0).stream("ar1");
    let iid = gen_ar1(std::f64::consts::FRAC_PI_2, 1_000_000, &mut rng).unwrap();
    assert!(lag1(&iid.samples).abs() < 0.01);
    let theta = (3f64.sqrt() / 2.0).acos();
    let x = gen_ar1(theta, 1_000_000, &mut rng).unwrap();
    assert!((lag1(&x.samples) - 0.866).abs() < 0.01);
    let (m, v) = mean_var(&x.samples);
    assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.01, "{m} {v}");
}

#[test]
fn discrete_sources_have_unit_moments() {
    let mut rng = SeedSource::new(1).stream("discrete");
    for kind in [DiscreteKind::Binary, DiscreteKind::TernaryBalanced, DiscreteKind::TernaryUnbalanced] {
        let levels = kind.levels();
        let (m, v) = mean_var(&levels);
        assert!(m.abs() < 1e-15 && (v - 1.0).abs() < 1e-15, "{kind:?}");
        let x = gen_discrete(kind, 1_000_000, &mut rng).unwrap();
        assert!(x.samples.iter().all(|s| levels.contains(s)));
        let (m, v) = mean_var(&x.samples);
        let mean_tol = if kind == DiscreteKind::Binary { 0.005 } else { 0.01 };
        assert!(m.abs() < mean_tol && (v - 1.0).abs() < 0.01, "{kind:?}: {m} {v}");
    }
}

#[test]
fn envelope_values() {
    assert_eq!(envelope(0.0, 2000.0), 0.5);
    assert!((envelope(500.0, 2000.0) - 0.880797).abs() < 1e-6);
    for t in [0.0, 13.7, 777.0, 1999.0] {
        assert!((envelope(t + 2000.0, 2000.0) - envelope(t, 2000.0)).abs() < 1e-12);
    }
}

#[test]
fn mixture_of_equal_gaussians_after_envelope_scaling() {
    // Independent sources mix to variance psi^2 + (1 - psi)^2, so samples
    // divided by that scale must be standard normal again.
    let mut rng = SeedSource::new(2).stream("ks");
    let n = 100_000;
    let mix = gen_mixture(&NoiseSpec::Gaussian, &NoiseSpec::Gaussian, 2000.0, n, &mut rng).unwrap();
    let truth = mix.truth.as_ref().unwrap();
    let scaled: Vec<f64> = mix
        .samples
        .iter()
        .zip(truth)
        .map(|(x, p)| x / (p * p + (1.0 - p) * (1.0 - p)).sqrt())
        .collect();
    let reference = gen_noise(&NoiseSpec::Gaussian, n, &mut rng).unwrap();
    let d = ks(&scaled, &reference.samples);
    // 0.001 critical value for two samples of 1e5 is about 0.0087
    assert!(d < 0.0087, "{d}");
}

#[test]
fn mixture_truth_is_the_envelope() {
    let sig = MixtureConfig {
        n: 10_000,
        ..MixtureConfig::default()
    }
    .generate(4)
    .unwrap();
    let truth = sig.truth.unwrap();
    for (t, &p) in truth.iter().enumerate() {
        assert_eq!(p, envelope(t as f64, 2000.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn generators_reproduce_from_seed(seed in any::<u64>(), which in 0usize..6) {
        let spec = [
            NoiseSpec::Ar1 { theta: 0.7 },
            NoiseSpec::Ar1Cos { cos_theta: 0.3 },
            NoiseSpec::Gaussian,
            NoiseSpec::Binary,
            NoiseSpec::TernaryBalanced,
            NoiseSpec::TernaryUnbalanced,
        ][which];
        let a = gen_noise(&spec, 500, &mut SeedSource::new(seed).stream("g")).unwrap();
        let b = gen_noise(&spec, 500, &mut SeedSource::new(seed).stream("g")).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }
}
