//! Closed-form risks, gradients and Hessians of every node type, expected
//! gradients under Bernoulli inputs and Gaussian weight families, and a
//! negative-curvature witness.
//!
//! Batches are `M × N` matrices with one sample per row. For the sum and
//! naive-product nodes a row is the raw input `x`; for the neutral-element node
//! a row is `x` and the node works on `z = x - 1`; for the XOR node a row is a
//! binary vector `b` (entries 0.0 or 1.0) and `z = -2b`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::SparseBatch;
use crate::error::{check_len, check_prob, LabError, Result};

/// Symmetric `N × N` Hessian of an empirical risk.
pub type HessianMatrix = DMatrix<f64>;

/// Minimum eigenvalue below which a Hessian counts as indefinite.
pub const PSD_EIG_THRESHOLD: f64 = -1e-10;

fn check_batch(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<()> {
    check_len("weight length vs batch columns", x.ncols(), w.len())?;
    check_len("target weight length", w.len(), w_true.len())?;
    if x.nrows() == 0 {
        return Err(LabError::InsufficientData { needed: 1, got: 0 });
    }
    Ok(())
}

fn check_binary_batch(b: &DMatrix<f64>) -> Result<()> {
    if b.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(LabError::Domain("XOR batch entries must be 0 or 1".into()));
    }
    Ok(())
}

/// `out[j] = Π_{i≠j} f[i]`, computed with prefix and suffix products so zero
/// factors are handled exactly.
pub fn leave_one_out_products(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 1.0);
    let mut acc = 1.0;
    for i in 0..n {
        out[i] = acc;
        acc *= f[i];
    }
    acc = 1.0;
    for i in (0..n).rev() {
        out[i] *= acc;
        acc *= f[i];
    }
}

fn product_excluding(f: &[f64], j: usize, l: usize) -> f64 {
    f.iter()
        .enumerate()
        .filter(|&(i, _)| i != j && i != l)
        .map(|(_, v)| v)
        .product()
}

/// `base^(n-1)`; uses `exp((n-1) ln base)` above `n = 1000` when `base > 0`.
pub fn pow_n_minus_1(base: f64, n: usize) -> f64 {
    let e = n.saturating_sub(1);
    if n > 1000 && base > 0.0 {
        ((e as f64) * base.ln()).exp()
    } else {
        base.powi(e as i32)
    }
}

// ---------------------------------------------------------------------------
// Empirical risks
// ---------------------------------------------------------------------------

/// `(1/M) Σ_m (x_m·w - x_m·w_true)²`.
pub fn sum_risk(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<f64> {
    check_batch(x, w, w_true)?;
    let d: DVector<f64> = DVector::from_iterator(w.len(), w.iter().zip(w_true).map(|(a, b)| a - b));
    let r = x * d;
    Ok(r.norm_squared() / x.nrows() as f64)
}

/// `(1/M) Σ_m (Π w_i x_mi - Π w_true_i x_mi)²`.
pub fn naive_product_risk(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<f64> {
    check_batch(x, w, w_true)?;
    let mut s = 0.0;
    for row in x.row_iter() {
        let y: f64 = row.iter().zip(w).map(|(xi, wi)| xi * wi).product();
        let t: f64 = row.iter().zip(w_true).map(|(xi, wi)| xi * wi).product();
        s += (y - t) * (y - t);
    }
    Ok(s / x.nrows() as f64)
}

/// `(1/M) Σ_m (Π a_mi - Π a_true_mi)²` with `a = w z + 1`, `z = x - 1`.
pub fn ne_product_risk(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<f64> {
    check_batch(x, w, w_true)?;
    let mut s = 0.0;
    for row in x.row_iter() {
        let p: f64 = row.iter().zip(w).map(|(xi, wi)| wi * (xi - 1.0) + 1.0).product();
        let t: f64 = row
            .iter()
            .zip(w_true)
            .map(|(xi, wi)| wi * (xi - 1.0) + 1.0)
            .product();
        s += (p - t) * (p - t);
    }
    Ok(s / x.nrows() as f64)
}

/// `(1/M) Σ_m (y(w, b_m) - y(w_true, b_m))²` for the XOR node.
pub fn xor_risk(b: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<f64> {
    check_batch(b, w, w_true)?;
    check_binary_batch(b)?;
    let mut s = 0.0;
    for row in b.row_iter() {
        let p: f64 = row.iter().zip(w).map(|(bi, wi)| 1.0 - 2.0 * wi * bi).product();
        let t: f64 = row
            .iter()
            .zip(w_true)
            .map(|(bi, wi)| 1.0 - 2.0 * wi * bi)
            .product();
        let e = 0.5 * (1.0 - p) - 0.5 * (1.0 - t);
        s += e * e;
    }
    Ok(s / b.nrows() as f64)
}

// ---------------------------------------------------------------------------
// Gradients and Hessians
// ---------------------------------------------------------------------------

/// Sum-node gradient `(2/M) XᵀX (w - w_true)`.
pub fn sum_grad(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<Vec<f64>> {
    check_batch(x, w, w_true)?;
    let d = DVector::from_iterator(w.len(), w.iter().zip(w_true).map(|(a, b)| a - b));
    let g = x.transpose() * (x * d) * (2.0 / x.nrows() as f64);
    Ok(g.iter().copied().collect())
}

/// Sum-node Hessian `(2/M) XᵀX`.
pub fn sum_hessian(x: &DMatrix<f64>) -> HessianMatrix {
    x.transpose() * x * (2.0 / x.nrows() as f64)
}

/// `D = (1/M) Σ_m Π_i x²_mi`.
pub fn naive_product_d(x: &DMatrix<f64>) -> f64 {
    let s: f64 = x
        .row_iter()
        .map(|row| row.iter().map(|v| v * v).product::<f64>())
        .sum();
    s / x.nrows() as f64
}

/// Naive-product gradient `2D Π_{i≠j} w_i (Π w - Π w_true)`.
pub fn naive_product_grad(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<Vec<f64>> {
    check_batch(x, w, w_true)?;
    let d = naive_product_d(x);
    let diff = w.iter().product::<f64>() - w_true.iter().product::<f64>();
    let mut loo = Vec::new();
    leave_one_out_products(w, &mut loo);
    Ok(loo.iter().map(|p| 2.0 * d * p * diff).collect())
}

/// Naive-product Hessian: diagonal `2D Π_{i≠j} w_i²`, off-diagonal
/// `2D (Π_{i≠j,l} w_i)(2 Π w - Π w_true)`.
pub fn naive_product_hessian(
    x: &DMatrix<f64>,
    w: &[f64],
    w_true: &[f64],
) -> Result<HessianMatrix> {
    check_batch(x, w, w_true)?;
    let n = w.len();
    let d = naive_product_d(x);
    let pw: f64 = w.iter().product();
    let pt: f64 = w_true.iter().product();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        for l in 0..n {
            h[(j, l)] = if j == l {
                let p = product_excluding(w, j, j);
                2.0 * d * p * p
            } else {
                2.0 * d * product_excluding(w, j, l) * (2.0 * pw - pt)
            };
        }
    }
    Ok(h)
}

/// Neutral-element gradient
/// `(2/M) Σ_m z_mj Π_{i≠j} a_mi (Π a_m - Π a_true_m)`.
pub fn ne_product_grad(x: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<Vec<f64>> {
    check_batch(x, w, w_true)?;
    let n = w.len();
    let mut g = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut loo = Vec::with_capacity(n);
    for row in x.row_iter() {
        let mut t = 1.0;
        for i in 0..n {
            let z = row[i] - 1.0;
            a[i] = w[i] * z + 1.0;
            t *= w_true[i] * z + 1.0;
        }
        let p: f64 = a.iter().product();
        leave_one_out_products(&a, &mut loo);
        for j in 0..n {
            g[j] += (row[j] - 1.0) * loo[j] * (p - t);
        }
    }
    let scale = 2.0 / x.nrows() as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

/// Neutral-element Hessian: diagonal `(2/M) Σ z²_mj (Π_{i≠j} a_mi)²`,
/// off-diagonal `(2/M) Σ z_mj z_ml Π_{i≠j,l} a_mi (2 a_mj a_ml Π_{i≠j,l} a_mi - Π a_true_m)`.
pub fn ne_product_hessian(
    x: &DMatrix<f64>,
    w: &[f64],
    w_true: &[f64],
) -> Result<HessianMatrix> {
    check_batch(x, w, w_true)?;
    let n = w.len();
    let mut h = DMatrix::zeros(n, n);
    let mut a = vec![0.0; n];
    let mut z = vec![0.0; n];
    for row in x.row_iter() {
        let mut t = 1.0;
        for i in 0..n {
            z[i] = row[i] - 1.0;
            a[i] = w[i] * z[i] + 1.0;
            t *= w_true[i] * z[i] + 1.0;
        }
        for j in 0..n {
            if z[j] == 0.0 {
                continue;
            }
            for l in j..n {
                if z[l] == 0.0 {
                    continue;
                }
                let v = if j == l {
                    let p = product_excluding(&a, j, j);
                    z[j] * z[j] * p * p
                } else {
                    let q = product_excluding(&a, j, l);
                    z[j] * z[l] * q * (2.0 * a[j] * a[l] * q - t)
                };
                h[(j, l)] += v;
                if j != l {
                    h[(l, j)] += v;
                }
            }
        }
    }
    Ok(h * (2.0 / x.nrows() as f64))
}

fn xor_as_ne_input(b: &DMatrix<f64>) -> DMatrix<f64> {
    b.map(|v| 1.0 - 2.0 * v)
}

/// XOR-node gradient; equals the neutral-element gradient at `z = -2b`
/// divided by four.
pub fn xor_grad(b: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<Vec<f64>> {
    check_batch(b, w, w_true)?;
    check_binary_batch(b)?;
    let mut g = ne_product_grad(&xor_as_ne_input(b), w, w_true)?;
    g.iter_mut().for_each(|v| *v /= 4.0);
    Ok(g)
}

/// XOR-node Hessian; the neutral-element Hessian at `z = -2b` divided by four.
pub fn xor_hessian(b: &DMatrix<f64>, w: &[f64], w_true: &[f64]) -> Result<HessianMatrix> {
    check_batch(b, w, w_true)?;
    check_binary_batch(b)?;
    Ok(ne_product_hessian(&xor_as_ne_input(b), w, w_true)? / 4.0)
}

/// Gradient and loss of the XOR node on a sparse binary batch.
///
/// Only active bits contribute, so the cost is linear in the number of ones.
/// `support` is the binary oracle column. `grad` is overwritten.
pub fn xor_grad_sparse(
    batch: &SparseBatch,
    w: &[f64],
    support: &[u8],
    grad: &mut [f64],
) -> Result<f64> {
    check_len("weight length vs batch width", batch.n(), w.len())?;
    check_len("oracle length", w.len(), support.len())?;
    check_len("gradient buffer", w.len(), grad.len())?;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut a = Vec::new();
    let mut loo = Vec::new();
    let mut loss = 0.0;
    for row in batch.rows() {
        a.clear();
        let mut par = 0u8;
        for &i in row {
            a.push(1.0 - 2.0 * w[i as usize]);
            par ^= support[i as usize];
        }
        let p: f64 = a.iter().product();
        let y = 0.5 * (1.0 - p);
        let err = y - f64::from(par);
        loss += err * err;
        if err == 0.0 {
            continue;
        }
        leave_one_out_products(&a, &mut loo);
        for (k, &i) in row.iter().enumerate() {
            // dy/dw_i = b_i Π_{j≠i} a_j
            grad[i as usize] += err * loo[k];
        }
    }
    let m = batch.m() as f64;
    let scale = 2.0 / m;
    grad.iter_mut().for_each(|g| *g *= scale);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(LabError::Numeric("XOR gradient is not finite".into()));
    }
    Ok(loss / m)
}

// ---------------------------------------------------------------------------
// Expectations
// ---------------------------------------------------------------------------

/// Expected XOR gradient over inputs with i.i.d. Bernoulli(`p_e`) bits.
///
/// Component j is
/// `p_e[(2w_j-1) Π_{i≠j}(4p_e w_i² - 4p_e w_i + 1)
///  - (2wt_j-1) Π_{i≠j}(4p_e w_i wt_i - 2p_e(w_i + wt_i) + 1)]`.
pub fn expected_xor_grad_bernoulli(w: &[f64], w_true: &[f64], p_e: f64) -> Result<Vec<f64>> {
    check_len("target weight length", w.len(), w_true.len())?;
    if !(p_e > 0.0 && p_e < 1.0) {
        return Err(LabError::Domain(format!("p_e = {p_e} must lie in (0, 1)")));
    }
    let fa: Vec<f64> = w
        .iter()
        .map(|&wi| 4.0 * p_e * wi * wi - 4.0 * p_e * wi + 1.0)
        .collect();
    let fb: Vec<f64> = w
        .iter()
        .zip(w_true)
        .map(|(&wi, &ti)| 4.0 * p_e * wi * ti - 2.0 * p_e * (wi + ti) + 1.0)
        .collect();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    leave_one_out_products(&fa, &mut la);
    leave_one_out_products(&fb, &mut lb);
    Ok((0..w.len())
        .map(|j| p_e * ((2.0 * w[j] - 1.0) * la[j] - (2.0 * w_true[j] - 1.0) * lb[j]))
        .collect())
}

/// Moments of the two Gaussian weight families (target 0 and target 1) and
/// the proportion `p_w` of target-1 weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFamilyParams {
    pub mu0: f64,
    pub sigma0_sq: f64,
    pub mu1: f64,
    pub sigma1_sq: f64,
    pub p_w: f64,
}

impl GaussianFamilyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0_sq >= 0.0 && self.sigma1_sq >= 0.0) {
            return Err(LabError::Domain("family variances must be non-negative".into()));
        }
        if !(self.mu0.is_finite() && self.mu1.is_finite()) {
            return Err(LabError::Domain("family means must be finite".into()));
        }
        check_prob("p_w", self.p_w)
    }

    /// Family pair symmetric about 1/2 with the given target-0 moments.
    pub fn symmetric(mu0: f64, sigma_sq: f64, p_w: f64) -> Self {
        Self {
            mu0,
            sigma0_sq: sigma_sq,
            mu1: 1.0 - mu0,
            sigma1_sq: sigma_sq,
            p_w,
        }
    }
}

/// Per-family expectations `A_t = E[a²]`, `B_t = E[a a_true]` of a single
/// factor under Bernoulli(`p_e`) input bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ABTerms {
    pub a0: f64,
    pub a1: f64,
    pub b0: f64,
    pub b1: f64,
}

impl ABTerms {
    pub fn new(fam: &GaussianFamilyParams, p_e: f64) -> Self {
        let a = |mu: f64, s2: f64| 4.0 * p_e * (mu * mu + s2) - 4.0 * p_e * mu + 1.0;
        Self {
            a0: a(fam.mu0, fam.sigma0_sq),
            a1: a(fam.mu1, fam.sigma1_sq),
            b0: 1.0 - 2.0 * p_e * fam.mu0,
            b1: 1.0 - 2.0 * p_e * (1.0 - fam.mu1),
        }
    }

    /// Mixtures `((1-p)A0 + p A1, (1-p)B0 + p B1)`.
    pub fn mix(&self, p: f64) -> (f64, f64) {
        (
            (1.0 - p) * self.a0 + p * self.a1,
            (1.0 - p) * self.b0 + p * self.b1,
        )
    }
}

/// How the proportion of target-1 weights among the other N-1 weights is
/// computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PwMode {
    /// Use `p_w` itself (large-N simplification).
    #[default]
    Approx,
    /// Exact leave-one-out proportion `(round(p_w N) - wt_i) / (N - 1)`.
    LeaveOneOut,
}

/// Effective target-1 proportion among the other weights.
pub fn p_w_excluding(p_w: f64, n: usize, w_true_i: f64, mode: PwMode) -> f64 {
    match mode {
        PwMode::Approx => p_w,
        PwMode::LeaveOneOut => {
            if n < 2 {
                return p_w;
            }
            let ones = (p_w * n as f64).round();
            ((ones - w_true_i) / (n as f64 - 1.0)).clamp(0.0, 1.0)
        }
    }
}

/// Expected XOR gradient of weight `i` when the other N-1 weights follow the
/// two Gaussian families, using `p_w` for the other weights' proportion.
pub fn expected_grad_gaussian(
    fam: &GaussianFamilyParams,
    p_e: f64,
    n: usize,
    w_i: f64,
    w_true_i: f64,
) -> Result<f64> {
    expected_grad_gaussian_with(fam, p_e, n, w_i, w_true_i, PwMode::Approx)
}

/// As [`expected_grad_gaussian`] with an explicit [`PwMode`].
pub fn expected_grad_gaussian_with(
    fam: &GaussianFamilyParams,
    p_e: f64,
    n: usize,
    w_i: f64,
    w_true_i: f64,
    mode: PwMode,
) -> Result<f64> {
    fam.validate()?;
    check_prob("p_e", p_e)?;
    if n == 0 {
        return Err(LabError::Domain("N must be at least 1".into()));
    }
    let ab = ABTerms::new(fam, p_e);
    let (ma, mb) = ab.mix(p_w_excluding(fam.p_w, n, w_true_i, mode));
    Ok(p_e
        * ((2.0 * w_i - 1.0) * pow_n_minus_1(ma, n)
            - (2.0 * w_true_i - 1.0) * pow_n_minus_1(mb, n)))
}

/// Expected gradient magnitude `p_e (1 - p_e)^(N-1)` at `w = ½`.
pub fn grad_magnitude_vs_pe(p_e: f64, n: usize) -> f64 {
    p_e * pow_n_minus_1(1.0 - p_e, n)
}

/// Maximiser of [`grad_magnitude_vs_pe`]: the root `1/N` of its derivative.
pub fn optimal_pe(n: usize) -> f64 {
    1.0 / n as f64
}

/// Returns a direction of negative curvature if the smallest eigenvalue is
/// below [`PSD_EIG_THRESHOLD`].
pub fn psd_witness(h: &HessianMatrix) -> Result<Option<DVector<f64>>> {
    if !h.is_square() {
        return Err(LabError::Dimension {
            what: "Hessian columns",
            expected: h.nrows(),
            got: h.ncols(),
        });
    }
    let scale = h.amax().max(1.0);
    let asym = (h - h.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(LabError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(h.clone());
    let (idx, min) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if min < PSD_EIG_THRESHOLD {
        Ok(Some(eig.eigenvectors.column(idx).into_owned()))
    } else {
        Ok(None)
    }
}

/// `qᵀ H q`.
pub fn quadratic_form(h: &HessianMatrix, q: &[f64]) -> Result<f64> {
    check_len("direction length", h.nrows(), q.len())?;
    let v = DVector::from_column_slice(q);
    Ok(v.dot(&(h * &v)))
}
