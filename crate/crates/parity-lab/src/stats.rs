//! Family moments, Q-Q normality correlation and Monte-Carlo expectation
//! oracles for the expected-gradient formulas.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SparseBatch;
use crate::error::{check_len, check_prob, LabError, Result};
use crate::grad::{leave_one_out_products, GaussianFamilyParams};
use crate::rng::{stream, TAG_MC};

/// Sample moments of the weights split by oracle target.
///
/// A family with no members has `None` moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyMoments {
    pub mu0: Option<f64>,
    pub sig0_sq: Option<f64>,
    pub mu1: Option<f64>,
    pub sig1_sq: Option<f64>,
    pub n0: usize,
    pub n1: usize,
}

impl FamilyMoments {
    /// `|μ₀ - (1 - μ₁)|` and `|σ₀² - σ₁²|`, when both families exist.
    pub fn symmetry_residuals(&self) -> Option<(f64, f64)> {
        match (self.mu0, self.mu1, self.sig0_sq, self.sig1_sq) {
            (Some(m0), Some(m1), Some(s0), Some(s1)) => Some(((m0 - (1.0 - m1)).abs(), (s0 - s1).abs())),
            _ => None,
        }
    }
}

/// Running mean and sum of squared deviations (Welford), mergeable.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan et al. pairwise merge.
    pub fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Per-family accumulators, combined into [`FamilyMoments`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FamilyAccumulator {
    pub fam0: Accumulator,
    pub fam1: Accumulator,
}

impl FamilyAccumulator {
    pub fn push(&mut self, w: f64, target: u8) {
        if target == 0 {
            self.fam0.push(w);
        } else {
            self.fam1.push(w);
        }
    }

    pub fn merge(&mut self, other: &FamilyAccumulator) {
        self.fam0.merge(&other.fam0);
        self.fam1.merge(&other.fam1);
    }

    pub fn moments(&self) -> FamilyMoments {
        let get = |a: &Accumulator| {
            if a.count == 0 {
                (None, None)
            } else {
                (Some(a.mean), Some(a.variance()))
            }
        };
        let (mu0, sig0_sq) = get(&self.fam0);
        let (mu1, sig1_sq) = get(&self.fam1);
        FamilyMoments {
            mu0,
            sig0_sq,
            mu1,
            sig1_sq,
            n0: self.fam0.count,
            n1: self.fam1.count,
        }
    }
}

/// Splits `w` by the binary `targets` and returns each family's mean and
/// unbiased variance.
pub fn family_moments(w: &[f64], targets: &[u8]) -> Result<FamilyMoments> {
    check_len("target length", w.len(), targets.len())?;
    let mut acc = FamilyAccumulator::default();
    for (&wi, &t) in w.iter().zip(targets) {
        acc.push(wi, t);
    }
    Ok(acc.moments())
}

// Rational approximation of the standard normal quantile (P. J. Acklam),
// relative error below 1.15e-9 on (0, 1).
const ACKLAM_A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const ACKLAM_B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const ACKLAM_C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const ACKLAM_D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const ACKLAM_P_LOW: f64 = 0.02425;

/// Name of the quantile approximation recorded in [`QQReport`].
pub const QUANTILE_SOURCE: &str = "acklam-rational";

/// Standard normal quantile `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (a, b, c, d) = (&ACKLAM_A, &ACKLAM_B, &ACKLAM_C, &ACKLAM_D);
    if p < ACKLAM_P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else if p <= 1.0 - ACKLAM_P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    }
}

/// Minimum sample count accepted by [`qq_gaussian`].
pub const QQ_MIN_SAMPLES: usize = 20;

/// Correlation of standardized order statistics with normal quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QQReport {
    pub correlation: f64,
    pub sample_count: usize,
    pub theoretical_quantiles: &'static str,
}

/// Pairs `(Φ⁻¹((i - 0.5)/n), z_(i))` of theoretical quantiles and sorted
/// standardized samples.
pub fn qq_points(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = samples.len();
    if n < QQ_MIN_SAMPLES {
        return Err(LabError::InsufficientData {
            needed: QQ_MIN_SAMPLES,
            got: n,
        });
    }
    let mut acc = Accumulator::default();
    samples.iter().for_each(|&x| acc.push(x));
    let sd = acc.variance().sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(LabError::Numeric("samples have zero or non-finite spread".into()));
    }
    let mut sorted: Vec<f64> = samples.iter().map(|x| (x - acc.mean) / sd).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, z)| (normal_quantile((i as f64 + 0.5) / n as f64), z))
        .collect())
}

/// Q-Q correlation against the standard normal.
pub fn qq_gaussian(samples: &[f64]) -> Result<QQReport> {
    let pts = qq_points(samples)?;
    let n = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    Ok(QQReport {
        correlation: sxy / (sxx * syy).sqrt(),
        sample_count: pts.len(),
        theoretical_quantiles: QUANTILE_SOURCE,
    })
}

/// Monte-Carlo mean with per-component standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub reps: usize,
}

impl McEstimate {
    /// Largest `|mean - expected| / std_err` over components; components with
    /// zero spread must match exactly.
    pub fn max_z(&self, expected: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std_err)
            .zip(expected)
            .map(|((m, s), e)| {
                let d = (m - e).abs();
                if *s > 0.0 {
                    d / s
                } else if d <= 1e-12 * (1.0 + e.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Per-component z threshold giving `k` independent two-sided comparisons
/// the same joint false-alarm rate as a single comparison at `z`.
pub fn familywise_z(z: f64, k: usize) -> f64 {
    if k <= 1 {
        return z;
    }
    // Two-sided tail at z, by bisection on the quantile function.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_quantile(1.0 - mid / 2.0) > z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tail = 0.5 * (lo + hi);
    let per = -(-tail).ln_1p() / k as f64;
    let per = -(-per).exp_m1();
    normal_quantile(1.0 - per / 2.0)
}

/// Minimum replicate count for the Monte-Carlo oracles.
pub const MC_MIN_REPS: usize = 100;
const MC_CHUNK: usize = 4096;

fn chunks(reps: usize) -> Vec<(u64, usize)> {
    (0..reps.div_ceil(MC_CHUNK))
        .map(|c| (c as u64, MC_CHUNK.min(reps - c * MC_CHUNK)))
        .collect()
}

/// Sample mean of the single-sample XOR gradient over `reps` fresh
/// Bernoulli(`p_e`) inputs.
pub fn mc_expected_gradient(
    w: &[f64],
    w_true: &[f64],
    p_e: f64,
    reps: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_len("target weight length", w.len(), w_true.len())?;
    check_prob("p_e", p_e)?;
    if reps < MC_MIN_REPS {
        return Err(LabError::InsufficientData {
            needed: MC_MIN_REPS,
            got: reps,
        });
    }
    let n = w.len();
    let parts: Vec<Vec<Accumulator>> = chunks(reps)
        .into_par_iter()
        .map(|(c, len)| -> Result<Vec<Accumulator>> {
            let mut rng = stream(seed, TAG_MC, c, 0);
            let batch = SparseBatch::sample(n, len, p_e, &mut rng)?;
            let mut acc = vec![Accumulator::default(); n];
            let mut g = vec![0.0; n];
            let (mut a, mut at, mut loo) = (Vec::new(), Vec::new(), Vec::new());
            for row in batch.rows() {
                a.clear();
                at.clear();
                for &i in row {
                    a.push(1.0 - 2.0 * w[i as usize]);
                    at.push(1.0 - 2.0 * w_true[i as usize]);
                }
                let p: f64 = a.iter().product();
                let t: f64 = at.iter().product();
                leave_one_out_products(&a, &mut loo);
                g.iter_mut().for_each(|v| *v = 0.0);
                for (k, &i) in row.iter().enumerate() {
                    // 2 (y - y_true) Π_{j≠i} a_j with y - y_true = -(p - t)/2
                    g[i as usize] = -(p - t) * loo[k];
                }
                for (ac, &v) in acc.iter_mut().zip(&g) {
                    ac.push(v);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![Accumulator::default(); n];
    for part in &parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    Ok(McEstimate {
        mean: total.iter().map(|a| a.mean).collect(),
        std_err: total.iter().map(|a| a.std_err()).collect(),
        reps,
    })
}

/// Monte-Carlo oracle for the Gaussian-family expected gradient of one
/// weight: the other N-1 weights draw their target from Bernoulli(`p_w`) and
/// their value from that target's Gaussian family.
pub fn mc_expected_grad_gaussian(
    fam: &GaussianFamilyParams,
    p_e: f64,
    n: usize,
    w_i: f64,
    w_true_i: f64,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    fam.validate()?;
    check_prob("p_e", p_e)?;
    if reps < MC_MIN_REPS {
        return Err(LabError::InsufficientData {
            needed: MC_MIN_REPS,
            got: reps,
        });
    }
    let d0 = Normal::new(fam.mu0, fam.sigma0_sq.sqrt()).map_err(|e| LabError::Domain(e.to_string()))?;
    let d1 = Normal::new(fam.mu1, fam.sigma1_sq.sqrt()).map_err(|e| LabError::Domain(e.to_string()))?;
    let parts: Vec<Accumulator> = chunks(reps)
        .into_par_iter()
        .map(|(c, len)| {
            let mut rng = stream(seed, TAG_MC, c, 1);
            let mut acc = Accumulator::default();
            for _ in 0..len {
                if !rng.random_bool(p_e) {
                    acc.push(0.0);
                    continue;
                }
                let (mut p_rest, mut t_rest) = (1.0, 1.0);
                for _ in 1..n {
                    if rng.random_bool(p_e) {
                        let one = rng.random_bool(fam.p_w);
                        let wj = if one { d1.sample(&mut rng) } else { d0.sample(&mut rng) };
                        p_rest *= 1.0 - 2.0 * wj;
                        if one {
                            t_rest = -t_rest;
                        }
                    }
                }
                let p = (1.0 - 2.0 * w_i) * p_rest;
                let t = (1.0 - 2.0 * w_true_i) * t_rest;
                acc.push(-(p - t) * p_rest);
            }
            acc
        })
        .collect();
    let mut total = Accumulator::default();
    parts.iter().for_each(|p| total.merge(p));
    Ok((total.mean, total.std_err()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_reference_values() {
        assert!(normal_quantile(0.5).abs() < 1e-12);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-8);
        assert!((normal_quantile(0.001) + 3.090232306167813).abs() < 1e-8);
        assert!((normal_quantile(0.2) + normal_quantile(0.8)).abs() < 1e-12);
    }

    #[test]
    fn moments_of_binary_oracle() {
        let t = [0u8, 1, 1, 0, 1];
        let w: Vec<f64> = t.iter().map(|&b| f64::from(b)).collect();
        let fm = family_moments(&w, &t).unwrap();
        assert_eq!((fm.mu0, fm.mu1), (Some(0.0), Some(1.0)));
        assert_eq!((fm.sig0_sq, fm.sig1_sq), (Some(0.0), Some(0.0)));
        assert_eq!((fm.n0, fm.n1), (2, 3));
    }

    #[test]
    fn empty_family_is_absent() {
        let fm = family_moments(&[0.2, 0.4], &[0, 0]).unwrap();
        assert!(fm.mu1.is_none() && fm.sig1_sq.is_none());
        assert!(fm.symmetry_residuals().is_none());
    }

    #[test]
    fn qq_needs_twenty_points() {
        assert!(matches!(
            qq_gaussian(&[1.0; 19]),
            Err(LabError::InsufficientData { .. })
        ));
    }

    #[test]
    fn zero_pe_gradient_vanishes() {
        let est = mc_expected_gradient(&[0.3, 0.9, -0.2], &[1.0, 0.0, 1.0], 0.0, 500, 5).unwrap();
        assert!(est.mean.iter().all(|&g| g == 0.0));
        assert!(est.std_err.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut whole = Accumulator::default();
        xs.iter().for_each(|&x| whole.push(x));
        let (mut a, mut b) = (Accumulator::default(), Accumulator::default());
        xs[..17].iter().for_each(|&x| a.push(x));
        xs[17..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - whole.mean).abs() < 1e-14);
        assert!((a.variance() - whole.variance()).abs() < 1e-14);
    }
}
