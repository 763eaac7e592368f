//! Forward passes of the four node types.
//!
//! All nodes take a real weight vector `w` of length N. The sum, naive-product
//! and neutral-element nodes take a real input vector; the XOR node takes a
//! binary input `b` and works on its bipolar image `x = 1 - 2b`.

use crate::error::{check_len, LabError, Result};

/// Weighted sum `Σ w_i x_i`.
pub fn sum_forward(w: &[f64], x: &[f64]) -> Result<f64> {
    check_len("input length", w.len(), x.len())?;
    Ok(w.iter().zip(x).map(|(wi, xi)| wi * xi).sum())
}

/// Weighted product `Π w_i x_i`.
pub fn naive_product_forward(w: &[f64], x: &[f64]) -> Result<f64> {
    check_len("input length", w.len(), x.len())?;
    Ok(w.iter().zip(x).map(|(wi, xi)| wi * xi).product())
}

/// Product with neutral element `Π (w_i x_i + 1 - w_i)`.
///
/// A zero weight contributes a factor of one, so the node selects the inputs
/// whose weights are non-zero.
pub fn ne_product_forward(w: &[f64], x: &[f64]) -> Result<f64> {
    check_len("input length", w.len(), x.len())?;
    Ok(w.iter()
        .zip(x)
        .map(|(wi, xi)| wi * xi + 1.0 - wi)
        .product())
}

/// XOR node `½(1 - Π(w_i (1 - 2 b_i) + 1 - w_i))`.
///
/// For binary `w` this is the GF(2) inner product of `w` and `b`.
pub fn xor_forward(w: &[f64], b: &[u8]) -> Result<f64> {
    check_len("input length", w.len(), b.len())?;
    check_binary(b)?;
    let prod: f64 = w
        .iter()
        .zip(b)
        .map(|(wi, &bi)| bipolar_factor(*wi, bi))
        .product();
    Ok(0.5 * (1.0 - prod))
}

/// Factor `a_i = w_i z_i + 1` with `z_i = -2 b_i`.
#[inline]
pub fn bipolar_factor(w: f64, b: u8) -> f64 {
    if b == 0 {
        1.0
    } else {
        1.0 - 2.0 * w
    }
}

/// Bipolar image `x = 1 - 2b` of a binary vector.
pub fn bipolar(b: &[u8]) -> Vec<f64> {
    b.iter().map(|&bi| 1.0 - 2.0 * f64::from(bi)).collect()
}

/// Parity `⊕ s_i b_i` of a binary support `s` against a binary input `b`.
pub fn parity(support: &[u8], b: &[u8]) -> Result<u8> {
    check_len("input length", support.len(), b.len())?;
    Ok(support.iter().zip(b).fold(0u8, |acc, (s, x)| acc ^ (s & x)))
}

pub(crate) fn check_binary(b: &[u8]) -> Result<()> {
    if let Some(pos) = b.iter().position(|&v| v > 1) {
        return Err(LabError::Domain(format!(
            "binary input has value {} at position {pos}",
            b[pos]
        )));
    }
    Ok(())
}
