//! Family moments, Q-Q correlation, the normal quantile and the Monte-Carlo
//! gradient oracle.

use parity_lab::grad::expected_xor_grad_bernoulli;
use parity_lab::stats::{
    family_moments, familywise_z, mc_expected_gradient, normal_quantile, qq_gaussian, qq_points, Accumulator,
    QQ_MIN_SAMPLES,
};
use parity_lab::trainer::init_weights;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box-Muller normal draws, independent of the crate's samplers.
fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

#[test]
fn binary_weights_give_degenerate_families() {
    let t = [0u8, 1, 1, 0, 1];
    let w: Vec<f64> = t.iter().map(|&b| b as f64).collect();
    let m = family_moments(&w, &t).unwrap();
    assert_eq!((m.mu0, m.mu1, m.sig0_sq, m.sig1_sq), (Some(0.0), Some(1.0), Some(0.0), Some(0.0)));
    assert_eq!((m.n0, m.n1), (2, 3));
    assert_eq!(m.symmetry_residuals(), Some((0.0, 0.0)));
}

#[test]
fn empty_family_is_absent() {
    let m = family_moments(&[0.2, 0.4], &[0, 0]).unwrap();
    assert_eq!((m.mu1, m.sig1_sq, m.n1), (None, None, 0));
    assert!((m.mu0.unwrap() - 0.3).abs() < 1e-15);
    assert!((m.sig0_sq.unwrap() - 0.02).abs() < 1e-15);
    assert!(m.symmetry_residuals().is_none());
    assert!(family_moments(&[0.1], &[0, 1]).is_err());
}

#[test]
fn initial_weights_sit_in_clt_band() {
    let (n, p) = (1000usize, 100u64);
    let mut w = Vec::new();
    let mut t = Vec::new();
    for unit in 0..p {
        w.extend(init_weights(n, 0.5, 0.25, 17, unit).unwrap());
        t.extend((0..n).map(|i| u8::from(i % 2 == 0)));
    }
    let m = family_moments(&w, &t).unwrap();
    assert_eq!(m.n0 + m.n1, n * p as usize);
    assert!((m.mu0.unwrap() - 0.5).abs() <= 0.005);
    assert!((m.mu1.unwrap() - 0.5).abs() <= 0.005);
    for s in [m.sig0_sq.unwrap(), m.sig1_sq.unwrap()] {
        // Standard error of a sample variance of Gaussians: σ² √(2/(n-1)).
        assert!((s - 0.25).abs() <= 3.0 * 0.25 * (2.0 / 49_999.0f64).sqrt());
    }
}

proptest! {
    #[test]
    fn accumulator_merge_matches_sequential(xs in prop::collection::vec(-1e3f64..1e3, 0..60), split in 0usize..60) {
        let split = split.min(xs.len());
        let mut all = Accumulator::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Accumulator::default(), Accumulator::default());
        xs[..split].iter().for_each(|&x| a.push(x));
        xs[split..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.count, xs.len());
        if !xs.is_empty() {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            prop_assert!((a.mean - mean).abs() <= 1e-9);
            prop_assert!((a.mean - all.mean).abs() <= 1e-9);
            prop_assert!((a.variance() - all.variance()).abs() <= 1e-6 * (1.0 + all.variance()));
        }
    }

    #[test]
    fn normal_quantile_is_odd_and_increasing(p in 1e-6f64..0.5, q in 1e-6f64..0.5) {
        prop_assert!((normal_quantile(p) + normal_quantile(1.0 - p)).abs() <= 1e-8);
        if p < q {
            prop_assert!(normal_quantile(p) < normal_quantile(q));
        }
    }

    #[test]
    fn qq_correlation_is_affine_invariant(scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..50) {
        let xs = normals(200, seed);
        let ys: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        let a = qq_gaussian(&xs).unwrap().correlation;
        let b = qq_gaussian(&ys).unwrap().correlation;
        prop_assert!((a - b).abs() <= 1e-9);
        prop_assert!(a <= 1.0 + 1e-12 && a >= -1.0);
    }
}

#[test]
fn normal_quantile_reference_values() {
    assert_eq!(normal_quantile(0.5), 0.0);
    for (p, z) in [
        (0.975, 1.959963984540054),
        (0.8413447460685429, 1.0),
        (0.99865010196837, 3.0),
        (0.001, -3.090232306167813),
    ] {
        assert!((normal_quantile(p) - z).abs() <= 1e-8 * z.abs().max(1.0), "p = {p}");
    }
}

#[test]
fn qq_on_normal_and_uniform_samples() {
    let r = qq_gaussian(&normals(100_000, 1)).unwrap();
    assert!(r.correlation >= 0.9995, "{}", r.correlation);
    assert_eq!(r.sample_count, 100_000);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
    let r = qq_gaussian(&u).unwrap();
    assert!(r.correlation < 0.99, "{}", r.correlation);
}

#[test]
fn bimodal_mixture_scores_lower_than_each_family() {
    let z = normals(20_000, 3);
    let fam0: Vec<f64> = z[..10_000].iter().map(|x| 0.05 + 0.04 * x).collect();
    let fam1: Vec<f64> = z[10_000..].iter().map(|x| 0.95 + 0.04 * x).collect();
    let both: Vec<f64> = fam0.iter().chain(&fam1).copied().collect();
    let c0 = qq_gaussian(&fam0).unwrap().correlation;
    let c1 = qq_gaussian(&fam1).unwrap().correlation;
    let cb = qq_gaussian(&both).unwrap().correlation;
    assert!(cb < c0 && cb < c1, "{cb} vs {c0}, {c1}");
}

#[test]
fn qq_input_checks_and_points() {
    let few = vec![0.0; QQ_MIN_SAMPLES - 1];
    assert!(qq_gaussian(&few).is_err());
    assert!(qq_gaussian(&vec![1.0; 50]).is_err());
    let pts = qq_points(&normals(64, 4)).unwrap();
    assert_eq!(pts.len(), 64);
    assert!(pts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    assert!((pts[0].0 - normal_quantile(0.5 / 64.0)).abs() < 1e-15);
}

#[test]
fn familywise_limits() {
    assert_eq!(familywise_z(3.0, 1), 3.0);
    assert_eq!(familywise_z(3.0, 0), 3.0);
    let mut prev = 3.0;
    for k in 2..50 {
        let z = familywise_z(3.0, k);
        assert!(z > prev);
        prev = z;
    }
    // 1 - (1 - 0.0026998)^(1/k), mapped back through the quantile.
    assert!((familywise_z(3.0, 2) - 3.2054).abs() < 1e-3);
    assert!((familywise_z(3.0, 20) - 3.817).abs() < 2e-3);
}

#[test]
fn monte_carlo_gradient_is_zero_without_active_bits() {
    let est = mc_expected_gradient(&[0.3, 0.7, 0.1], &[0.0, 1.0, 1.0], 0.0, 500, 1).unwrap();
    assert!(est.mean.iter().all(|&g| g == 0.0));
    assert_eq!(est.max_z(&[0.0; 3]), 0.0);
    assert!(mc_expected_gradient(&[0.3], &[0.0], 0.1, 99, 1).is_err());
    assert!(mc_expected_gradient(&[0.3], &[0.0, 1.0], 0.1, 500, 1).is_err());
}

/// Expected single-sample gradient by enumerating all 2^N inputs.
fn enumerated_gradient(w: &[f64], t: &[f64], p: f64) -> Vec<f64> {
    let n = w.len();
    let mut g = vec![0.0; n];
    for mask in 0u32..(1 << n) {
        let k = mask.count_ones() as i32;
        let prob = p.powi(k) * (1.0 - p).powi(n as i32 - k);
        let on = |i: usize| mask >> i & 1 == 1;
        let a = |i: usize| if on(i) { 1.0 - 2.0 * w[i] } else { 1.0 };
        let y = 0.5 * (1.0 - (0..n).map(a).product::<f64>());
        let yt = 0.5 * (1.0 - (0..n).map(|i| if on(i) { 1.0 - 2.0 * t[i] } else { 1.0 }).product::<f64>());
        for i in (0..n).filter(|&i| on(i)) {
            let rest: f64 = (0..n).filter(|&j| j != i).map(a).product();
            g[i] += prob * 2.0 * (y - yt) * rest;
        }
    }
    g
}

#[test]
fn monte_carlo_gradient_matches_enumeration_and_closed_form() {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..1.2)).collect();
    let t: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let p = 1.0 / n as f64;
    let exact = enumerated_gradient(&w, &t, p);
    let closed = expected_xor_grad_bernoulli(&w, &t, p).unwrap();
    for (a, b) in exact.iter().zip(&closed) {
        assert!((a - b).abs() <= 1e-12);
    }
    let est = mc_expected_gradient(&w, &t, p, 100_000, 5).unwrap();
    let z = est.max_z(&exact);
    assert!(z <= familywise_z(3.0, n), "max z = {z}");
}

#[test]
fn monte_carlo_error_shrinks_with_replicates() {
    let w = [0.2, 0.6, 0.9, 0.4];
    let t = [0.0, 1.0, 1.0, 0.0];
    let small = mc_expected_gradient(&w, &t, 0.3, 10_000, 1).unwrap();
    let large = mc_expected_gradient(&w, &t, 0.3, 40_000, 1).unwrap();
    for (s, l) in small.std_err.iter().zip(&large.std_err) {
        let ratio = s / l;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }
    assert_eq!(
        mc_expected_gradient(&w, &t, 0.3, 10_000, 1).unwrap(),
        small,
        "estimate must be reproducible from its seed"
    );
}
