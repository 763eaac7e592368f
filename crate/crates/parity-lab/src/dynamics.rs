//! Two-moment recurrence for Gaussian weight families, truncation-error
//! bounds, learning-rate thresholds, fixed-point envelopes and the
//! variable-coefficient affine iteration utilities used to reason about them.
//!
//! The symmetric recurrence assumes unit sparsity `p_e = 1/N`. A target-0
//! family with moments `(μ, σ²)` is updated as `μ' = m μ + c`, `σ²' = m² σ²`,
//! with `m = 1 - (2α/N) A₀^(N-1)` and `c = (α/N)(A₀^(N-1) - B₀^(N-1))`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grad::{pow_n_minus_1, ABTerms, GaussianFamilyParams};

/// Lower edge of the mean domain.
pub const MU_MIN: f64 = -0.25;
/// Upper edge of the mean domain.
pub const MU_MAX: f64 = 0.5;
/// Upper edge of the variance domain.
pub const SIGMA_SQ_MAX: f64 = 0.25;

/// Moments of the target-0 family at step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistState {
    pub mu: f64,
    pub sigma_sq: f64,
    pub k: u64,
}

impl DistState {
    /// The Gaussian initialisation `(1/2, 1/4)`.
    pub fn init() -> Self {
        Self {
            mu: 0.5,
            sigma_sq: 0.25,
            k: 0,
        }
    }

    pub fn new(mu: f64, sigma_sq: f64) -> Self {
        Self { mu, sigma_sq, k: 0 }
    }

    /// Whether `μ ∈ [-1/4, 1/2]` and `σ² ∈ (0, 1/4]`.
    pub fn in_domain(&self) -> bool {
        (MU_MIN..=MU_MAX).contains(&self.mu) && self.sigma_sq > 0.0 && self.sigma_sq <= SIGMA_SQ_MAX
    }

    /// `ξ = 4(μ² + σ² - μ)`.
    pub fn xi(&self) -> f64 {
        4.0 * (self.mu * self.mu + self.sigma_sq - self.mu)
    }

    /// `ζ = -2μ`.
    pub fn zeta(&self) -> f64 {
        -2.0 * self.mu
    }
}

/// Affine coefficients of one recurrence step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateCoeffs {
    pub m: f64,
    pub c: f64,
    pub xi: f64,
    pub zeta: f64,
}

/// Exact coefficients at unit sparsity.
pub fn update_coeffs(state: &DistState, alpha: f64, n: usize) -> UpdateCoeffs {
    update_coeffs_pe(state, alpha, n, 1.0 / n as f64)
}

/// Exact coefficients for an arbitrary input probability `p_e`.
pub fn update_coeffs_pe(state: &DistState, alpha: f64, n: usize, p_e: f64) -> UpdateCoeffs {
    let fam = GaussianFamilyParams::symmetric(state.mu, state.sigma_sq, 0.5);
    let ab = ABTerms::new(&fam, p_e);
    let an = pow_n_minus_1(ab.a0, n);
    let bn = pow_n_minus_1(ab.b0, n);
    UpdateCoeffs {
        m: 1.0 - 2.0 * alpha * p_e * an,
        c: alpha * p_e * (an - bn),
        xi: state.xi(),
        zeta: state.zeta(),
    }
}

/// Coefficients with `A₀^(N-1) ≈ e^ξ` and `B₀^(N-1) ≈ e^ζ`.
pub fn update_coeffs_exp_approx(state: &DistState, alpha: f64, n: usize) -> UpdateCoeffs {
    let (xi, zeta) = (state.xi(), state.zeta());
    let r = alpha / n as f64;
    UpdateCoeffs {
        m: 1.0 - 2.0 * r * xi.exp(),
        c: r * (xi.exp() - zeta.exp()),
        xi,
        zeta,
    }
}

/// One step of the affine recurrence at unit sparsity.
pub fn step_dist(state: &DistState, alpha: f64, n: usize) -> DistState {
    apply(state, &update_coeffs(state, alpha, n))
}

/// One step at an arbitrary `p_e`.
pub fn step_dist_pe(state: &DistState, alpha: f64, n: usize, p_e: f64) -> DistState {
    apply(state, &update_coeffs_pe(state, alpha, n, p_e))
}

fn apply(state: &DistState, uc: &UpdateCoeffs) -> DistState {
    DistState {
        mu: uc.m * state.mu + uc.c,
        sigma_sq: uc.m * uc.m * state.sigma_sq,
        k: state.k + 1,
    }
}

/// One step for two (not necessarily symmetric) families.
///
/// Each weight with target `t` moves by the negative expected gradient
/// `α p_e [(2w - 1) Ā^(N-1) - (2t - 1) B̄^(N-1)]`, where `Ā`, `B̄` are the
/// `p_w`-mixtures of the per-family terms.
pub fn step_two_family(fam: &GaussianFamilyParams, alpha: f64, n: usize, p_e: f64) -> GaussianFamilyParams {
    let ab = ABTerms::new(fam, p_e);
    let (ma, mb) = ab.mix(fam.p_w);
    let an = pow_n_minus_1(ma, n);
    let bn = pow_n_minus_1(mb, n);
    let m = 1.0 - 2.0 * alpha * p_e * an;
    let c0 = alpha * p_e * (an - bn);
    let c1 = alpha * p_e * (an + bn);
    GaussianFamilyParams {
        mu0: m * fam.mu0 + c0,
        sigma0_sq: m * m * fam.sigma0_sq,
        mu1: m * fam.mu1 + c1,
        sigma1_sq: m * m * fam.sigma1_sq,
        p_w: fam.p_w,
    }
}

/// All N- and α-dependent bound quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    pub n: usize,
    pub alpha: f64,
    pub eta_xi_max: f64,
    pub eta_zeta_max: f64,
    pub eta_xi_max_zero_var: f64,
    pub epsilon: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta_max: f64,
    pub phi_min_prime: f64,
    pub phi_max_prime: f64,
}

/// `ε(N) = (402N - 216) / (2N(32N - 72))`.
pub fn epsilon(n: usize) -> f64 {
    let n = n as f64;
    (402.0 * n - 216.0) / (2.0 * n * (32.0 * n - 72.0))
}

/// Bracket `(3/2) e^(9/4) e^(η_ξ) - e^(-1) e^(-η_ζ)` shared by `δ_max` and `α₂`.
fn delta_bracket(n: f64) -> f64 {
    let eta_xi = 153.0 / (32.0 * n - 72.0);
    let eta_zeta = 3.0 / (2.0 * n);
    1.5 * (2.25f64 + eta_xi).exp() - (-1.0 - eta_zeta).exp()
}

/// `δ_max(α, N) = (α/N) [(3/2) e^(9/4) e^(η_ξ) - e^(-1) e^(-η_ζ)]`.
pub fn delta_max(n: usize, alpha: f64) -> f64 {
    alpha / n as f64 * delta_bracket(n as f64)
}

/// Evaluates every bound for `N > 2`.
pub fn bounds(n: usize, alpha: f64) -> Result<BoundSet> {
    if n <= 2 {
        return Err(LabError::Domain(format!("bounds need N > 2, got {n}")));
    }
    let nf = n as f64;
    let eps = epsilon(n);
    let alpha0 = nf * (-(72.0 * nf - 9.0) / (32.0 * nf - 72.0)).exp();
    Ok(BoundSet {
        n,
        alpha,
        eta_xi_max: 153.0 / (32.0 * nf - 72.0),
        eta_zeta_max: 3.0 / (2.0 * nf),
        eta_xi_max_zero_var: 65.0 / (32.0 * nf - 40.0),
        epsilon: eps,
        alpha0,
        alpha1: alpha0 / 2.0,
        alpha2: nf * (3.0 - 2.0 * eps.exp()) / (4.0 * delta_bracket(nf)),
        delta_max: delta_max(n, alpha),
        phi_min_prime: 0.5 * (1.0 - eps.exp()),
        phi_max_prime: 0.5 * (1.0 - (-eps).exp()),
    })
}

/// Instantaneous fixed point `c / (1 - m)`; undefined when `α = 0`.
pub fn fixed_point(state: &DistState, alpha: f64, n: usize) -> Result<f64> {
    let uc = update_coeffs(state, alpha, n);
    let denom = 1.0 - uc.m;
    if alpha == 0.0 || denom == 0.0 {
        return Err(LabError::Domain(
            "fixed point undefined: m = 1 (zero learning rate)".into(),
        ));
    }
    Ok(uc.c / denom)
}

/// Envelope `½(1 - e^(ζ-ξ) e^(±ε(N)))` around the instantaneous fixed point.
pub fn envelopes(state: &DistState, n: usize) -> (f64, f64) {
    let d = state.zeta() - state.xi();
    let eps = epsilon(n);
    (0.5 * (1.0 - (d + eps).exp()), 0.5 * (1.0 - (d - eps).exp()))
}

/// Terminal interval of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// False when `N < 18`, where the interval is outside the proven regime.
    pub proven: bool,
}

impl ConvergenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// `[φ'_min - δ_max, φ'_max + δ_max]`.
pub fn convergence_interval(n: usize, alpha: f64) -> Result<ConvergenceInterval> {
    let b = bounds(n, alpha)?;
    Ok(ConvergenceInterval {
        lo: b.phi_min_prime - b.delta_max,
        hi: b.phi_max_prime + b.delta_max,
        proven: n >= 18,
    })
}

/// One row of an exported recurrence trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub k: u64,
    pub mu: f64,
    pub sigma_sq: f64,
    pub m: f64,
    pub c: f64,
    pub fp: f64,
}

/// Iterates the recurrence for `steps` steps, recording each visited state.
pub fn dist_trajectory(start: DistState, alpha: f64, n: usize, steps: u64) -> Vec<TrajectoryRow> {
    let mut s = start;
    let mut out = Vec::with_capacity(steps as usize + 1);
    for _ in 0..=steps {
        let uc = update_coeffs(&s, alpha, n);
        let fp = if 1.0 - uc.m != 0.0 {
            uc.c / (1.0 - uc.m)
        } else {
            f64::NAN
        };
        out.push(TrajectoryRow {
            k: s.k,
            mu: s.mu,
            sigma_sq: s.sigma_sq,
            m: uc.m,
            c: uc.c,
            fp,
        });
        s = apply(&s, &uc);
    }
    out
}

/// Exact remainder `η` of `(1+x)^(N-1) = e^(Nx) e^η` and its bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpApproxError {
    pub exact_eta: f64,
    pub bound: f64,
}

/// Computes `η = (N-1) ln(1+x) - Nx` and `(N-1)x² / (2(1-|x|)) + |x|`.
pub fn exp_approx_error(x: f64, n: usize) -> Result<ExpApproxError> {
    if !(x.abs() < 1.0) {
        return Err(LabError::Domain(format!("|x| = {} must be below 1", x.abs())));
    }
    let nf = n as f64;
    let exact_eta = (nf - 1.0) * x.ln_1p() - nf * x;
    let bound = (nf - 1.0) * x * x / (2.0 * (1.0 - x.abs())) + x.abs();
    if exact_eta.abs() > bound * (1.0 + 1e-12) {
        return Err(LabError::Numeric(format!(
            "|eta| = {} exceeds bound {bound} at x = {x}, N = {n}",
            exact_eta.abs()
        )));
    }
    Ok(ExpApproxError { exact_eta, bound })
}

/// Distance from `x` to the interval `[lo, hi]`.
pub fn envelope_distance(x: f64, lo: f64, hi: f64) -> f64 {
    if x > hi {
        x - hi
    } else if x < lo {
        lo - x
    } else {
        0.0
    }
}

/// Result of a variable-coefficient affine iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTrajectory {
    pub xs: Vec<f64>,
    pub a_values: Vec<f64>,
    pub distances: Vec<f64>,
    /// Steps `k` where `d(x[k+1]) > a(x[k]) d(x[k])`.
    pub violations: Vec<usize>,
}

impl AffineTrajectory {
    pub fn contraction_holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Iterates `x[k+1] = a(x[k]) x[k] + b(x[k])` and checks envelope contraction
/// against `envelope = (x̄_min, x̄_max)`.
pub fn variable_affine_iterate<A, B>(
    a_fn: A,
    b_fn: B,
    x0: f64,
    steps: usize,
    envelope: (f64, f64),
) -> AffineTrajectory
where
    A: Fn(f64) -> f64,
    B: Fn(f64) -> f64,
{
    let (lo, hi) = envelope;
    let mut xs = Vec::with_capacity(steps + 1);
    let mut a_values = Vec::with_capacity(steps);
    let mut distances = Vec::with_capacity(steps + 1);
    let mut violations = Vec::new();
    let mut x = x0;
    xs.push(x);
    distances.push(envelope_distance(x, lo, hi));
    for k in 0..steps {
        let a = a_fn(x);
        let next = a * x + b_fn(x);
        let d_now = distances[k];
        let d_next = envelope_distance(next, lo, hi);
        let slack = 4.0 * f64::EPSILON * (1.0 + x.abs() + lo.abs() + hi.abs());
        if d_next > a * d_now + slack {
            violations.push(k);
        }
        a_values.push(a);
        xs.push(next);
        distances.push(d_next);
        x = next;
    }
    AffineTrajectory {
        xs,
        a_values,
        distances,
        violations,
    }
}

/// Bounds on the intersection of a decreasing function with the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionBounds {
    pub phi_lo: f64,
    pub phi_hi: f64,
    /// Root of `f(x) = x` on `[a, b]`, found by bisection.
    pub root: Option<f64>,
}

impl IntersectionBounds {
    pub fn root_inside(&self) -> bool {
        self.root
            .is_some_and(|r| r >= self.phi_lo - 1e-12 && r <= self.phi_hi + 1e-12)
    }
}

/// Returns `(f(b), f(a))` clipped to `[a, b]` and the bisection root of
/// `f(x) = x`. Fails if `f` increases anywhere on a 1001-point grid.
pub fn intersection_bounds_check<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> Result<IntersectionBounds> {
    if !(a < b) {
        return Err(LabError::Domain(format!("empty interval [{a}, {b}]")));
    }
    const GRID: usize = 1001;
    let mut prev = f(a);
    for i in 1..GRID {
        let x = a + (b - a) * i as f64 / (GRID - 1) as f64;
        let v = f(x);
        if v > prev + 1e-12 * (1.0 + prev.abs()) {
            return Err(LabError::NotDecreasing(x));
        }
        prev = v;
    }
    let phi_lo = f(b).clamp(a, b);
    let phi_hi = f(a).clamp(a, b);
    let g = |x: f64| f(x) - x;
    let (mut lo, mut hi) = (a, b);
    let root = if g(lo) == 0.0 {
        Some(lo)
    } else if g(hi) == 0.0 {
        Some(hi)
    } else if g(lo) > 0.0 && g(hi) < 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    } else {
        None
    };
    Ok(IntersectionBounds { phi_lo, phi_hi, root })
}

/// Regime conditions evaluated by direct inequality at integer `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n: usize,
    pub alpha: f64,
    /// Minimum of the lower envelope over the domain (attained at μ = 1/4, σ² = 0).
    pub lower_envelope_min: f64,
    /// Same minimum found on a grid over the domain.
    pub lower_envelope_min_grid: f64,
    /// Maximum of the upper envelope on the same grid.
    pub upper_envelope_max_grid: f64,
    /// Lower envelope at μ = -1/4, σ² = 0.
    pub lower_envelope_at_edge: f64,
    /// The whole envelope stays above -1/4.
    pub global_containment: bool,
    /// The envelope at the lower domain edge stays above -1/4.
    pub relaxed: bool,
    /// `[φ'_min, φ'_max] ⊂ (-1/4, 1/4)`.
    pub interval_containment: bool,
    /// Upper envelope below 1/2 everywhere.
    pub upper_below_half: bool,
    pub alpha_below_alpha0: bool,
    pub alpha_below_alpha1: bool,
    pub alpha_below_alpha2: bool,
    /// `[φ'_min - δ_max, φ'_max + δ_max] ⊂ [-1/4, 1/4]` at this α.
    pub interval_with_delta_inside: bool,
}

/// Evaluates the global, relaxed and interval containment conditions.
pub fn invariance_report(n: usize, alpha: f64) -> Result<InvarianceReport> {
    let b = bounds(n, alpha)?;
    let eps = b.epsilon;
    let lower_envelope_min = 0.5 * (1.0 - (0.25 + eps).exp());
    let lower_envelope_at_edge = 0.5 * (1.0 - (-0.75 + eps).exp());
    const G: usize = 201;
    let (mut lmin, mut umax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..G {
        let mu = MU_MIN + (MU_MAX - MU_MIN) * i as f64 / (G - 1) as f64;
        for j in 0..G {
            let s2 = SIGMA_SQ_MAX * j as f64 / (G - 1) as f64;
            let (lo, hi) = envelopes(&DistState::new(mu, s2), n);
            lmin = lmin.min(lo);
            umax = umax.max(hi);
        }
    }
    let ci = convergence_interval(n, alpha)?;
    Ok(InvarianceReport {
        n,
        alpha,
        lower_envelope_min,
        lower_envelope_min_grid: lmin,
        upper_envelope_max_grid: umax,
        lower_envelope_at_edge,
        global_containment: lower_envelope_min >= MU_MIN,
        relaxed: lower_envelope_at_edge > MU_MIN,
        interval_containment: b.phi_min_prime > -0.25 && b.phi_max_prime < 0.25,
        upper_below_half: umax < 0.5,
        alpha_below_alpha0: alpha < b.alpha0,
        alpha_below_alpha1: alpha < b.alpha1,
        alpha_below_alpha2: alpha < b.alpha2,
        interval_with_delta_inside: ci.lo >= -0.25 && ci.hi <= 0.25,
    })
}
