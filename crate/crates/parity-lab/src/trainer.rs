//! SGD training of P independent XOR units against an oracle.
//!
//! Each unit draws its initial weights and its batches from its own
//! counter-based stream, so a unit's trajectory does not depend on P or on
//! the number of worker threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{oracle_column, OracleMatrix, SparseBatch};
use crate::error::{check_len, LabError, Result};
use crate::grad::xor_grad_sparse;
use crate::rng::{stream, TAG_BATCH, TAG_INIT};
use crate::stats::{FamilyAccumulator, FamilyMoments};

/// How training batches are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// A fresh Bernoulli batch every step.
    #[default]
    Fresh,
    /// One batch drawn at step 0 and reused for every step.
    Fixed,
}

fn default_threshold() -> f64 {
    0.01
}
fn default_init_mu() -> f64 {
    0.5
}
fn default_init_sigma_sq() -> f64 {
    0.25
}
fn default_failure_reduction() -> f64 {
    0.1
}
fn default_divergence_limit() -> f64 {
    1e6
}
fn default_log_every() -> u64 {
    1
}
fn default_true() -> bool {
    true
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub p_e: f64,
    pub p_w: f64,
    pub alpha: f64,
    /// Maximum number of SGD steps.
    pub steps: u64,
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub convergence_threshold: f64,
    #[serde(default = "default_init_mu")]
    pub init_mu: f64,
    #[serde(default = "default_init_sigma_sq")]
    pub init_sigma_sq: f64,
    /// A run fails when its distance shrinks by less than this fraction.
    #[serde(default = "default_failure_reduction")]
    pub failure_reduction: f64,
    /// Any `|w|` above this marks the run as diverged.
    #[serde(default = "default_divergence_limit")]
    pub divergence_limit: f64,
    /// Trace rows are kept every `log_every` steps (plus the first and last).
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub batch_mode: BatchMode,
    /// When false, training runs all `steps` even after the threshold is met.
    #[serde(default = "default_true")]
    pub stop_at_convergence: bool,
    /// Stop early, unconverged, once the best distance has not improved by
    /// 1% (relative) for this many steps.
    #[serde(default)]
    pub patience: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 10,
            m: 100,
            p_e: 0.01,
            p_w: 0.5,
            alpha: 1.0,
            steps: 25_000,
            seed: 0,
            convergence_threshold: default_threshold(),
            init_mu: default_init_mu(),
            init_sigma_sq: default_init_sigma_sq(),
            failure_reduction: default_failure_reduction(),
            divergence_limit: default_divergence_limit(),
            log_every: default_log_every(),
            batch_mode: BatchMode::Fresh,
            stop_at_convergence: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        if self.n == 0 || self.p == 0 || self.m == 0 {
            return bad("n, p and m must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_e) || !(0.0..=1.0).contains(&self.p_w) {
            return bad(format!("p_e = {} and p_w = {} must lie in [0, 1]", self.p_e, self.p_w));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha = {} must be finite and non-negative", self.alpha));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        for (name, v) in [
            ("convergence_threshold", self.convergence_threshold),
            ("failure_reduction", self.failure_reduction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        if !(self.init_sigma_sq >= 0.0) || !self.init_mu.is_finite() {
            return bad("initial moments must be finite with non-negative variance".into());
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence_limit must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }
}

/// Metrics at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    /// Mean `|w - w_true|` over all N·P weights.
    pub l1: f64,
    pub mu0: Option<f64>,
    pub sig0: Option<f64>,
    pub mu1: Option<f64>,
    pub sig1: Option<f64>,
    /// Summed over units, averaged over samples.
    pub loss: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub convergence_step: Option<u64>,
    pub diverged: bool,
    pub initial_l1: f64,
    pub final_l1: f64,
    pub steps_run: u64,
    /// Training stopped early because the distance stopped improving.
    pub stalled: bool,
}

impl TrainTrace {
    /// True when the run diverged or reduced its distance by less than
    /// `reduction` (a fraction of the initial distance).
    pub fn failed(&self, reduction: f64) -> bool {
        self.diverged || !(self.final_l1 <= (1.0 - reduction) * self.initial_l1)
    }

    /// Writes `step,l1,mu0,sig0,mu1,sig1,loss` rows; absent moments are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses the CSV written by [`TrainTrace::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<TraceRow>> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["step", "l1", "mu0", "sig0", "mu1", "sig1", "loss"] {
            return Err(LabError::Parse(format!("unexpected header {headers:?}")));
        }
        rdr.deserialize().map(|r| r.map_err(LabError::from)).collect()
    }
}

/// `(1/M) Σ_m Σ_p (y_mp - y_true_mp)²`; not divided by P.
pub fn mse_loss(y: &DMatrix<f64>, y_true: &DMatrix<f64>) -> Result<f64> {
    check_len("rows", y.nrows(), y_true.nrows())?;
    check_len("columns", y.ncols(), y_true.ncols())?;
    if y.nrows() == 0 {
        return Err(LabError::InsufficientData { needed: 1, got: 0 });
    }
    Ok((y - y_true).norm_squared() / y.nrows() as f64)
}

/// One SGD step of a single unit; returns that unit's loss on the batch.
pub fn sgd_step_unit(
    w: &mut [f64],
    batch: &SparseBatch,
    support: &[u8],
    alpha: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let loss = xor_grad_sparse(batch, w, support, grad)?;
    for (wi, gi) in w.iter_mut().zip(grad.iter()) {
        *wi -= alpha * gi;
    }
    Ok(loss)
}

/// One SGD step of every unit on a shared batch; returns the summed loss.
pub fn sgd_step(
    w: &mut [Vec<f64>],
    batch: &SparseBatch,
    oracle: &OracleMatrix,
    alpha: f64,
) -> Result<f64> {
    check_len("unit count", oracle.p(), w.len())?;
    let mut grad = vec![0.0; batch.n()];
    let mut total = 0.0;
    for (col, support) in w.iter_mut().zip(&oracle.cols) {
        total += sgd_step_unit(col, batch, support, alpha, &mut grad)?;
    }
    Ok(total)
}

/// Initial weights of `unit`: i.i.d. Normal(`mu`, `sigma_sq`).
pub fn init_weights(n: usize, mu: f64, sigma_sq: f64, seed: u64, unit: u64) -> Result<Vec<f64>> {
    let d = Normal::new(mu, sigma_sq.sqrt()).map_err(|e| LabError::Domain(e.to_string()))?;
    let mut rng = stream(seed, TAG_INIT, unit, 0);
    Ok((0..n).map(|_| d.sample(&mut rng)).collect())
}

/// Batch used by `unit` at `step` (1-based).
pub fn unit_batch(cfg: &TrainConfig, unit: u64, step: u64) -> Result<SparseBatch> {
    let s = match cfg.batch_mode {
        BatchMode::Fresh => step,
        BatchMode::Fixed => 0,
    };
    let mut rng = stream(cfg.seed, TAG_BATCH, unit, s);
    SparseBatch::sample(cfg.n, cfg.m, cfg.p_e, &mut rng)
}

struct Unit {
    w: Vec<f64>,
    support: Vec<u8>,
    grad: Vec<f64>,
    fixed: Option<SparseBatch>,
}

#[derive(Default, Clone, Copy)]
struct UnitStats {
    l1_sum: f64,
    fam: FamilyAccumulator,
    loss: f64,
    max_abs: f64,
}

fn unit_stats(u: &Unit) -> UnitStats {
    let mut s = UnitStats::default();
    for (&wi, &t) in u.w.iter().zip(&u.support) {
        s.l1_sum += (wi - f64::from(t)).abs();
        s.fam.push(wi, t);
        s.max_abs = s.max_abs.max(wi.abs());
    }
    s
}

fn reduce(stats: &[UnitStats]) -> UnitStats {
    let mut total = UnitStats::default();
    for s in stats {
        total.l1_sum += s.l1_sum;
        total.fam.merge(&s.fam);
        total.loss += s.loss;
        total.max_abs = if s.max_abs.is_nan() { f64::NAN } else { total.max_abs.max(s.max_abs) };
    }
    total
}

fn row(step: u64, total: &UnitStats, np: f64) -> TraceRow {
    let fm: FamilyMoments = total.fam.moments();
    TraceRow {
        step,
        l1: total.l1_sum / np,
        mu0: fm.mu0,
        sig0: fm.sig0_sq,
        mu1: fm.mu1,
        sig1: fm.sig1_sq,
        loss: total.loss,
    }
}

/// Trains P units until the mean L1 distance falls below the threshold, the
/// weights diverge, or `steps` is reached.
pub fn train(cfg: &TrainConfig) -> Result<TrainTrace> {
    train_observed(cfg, |_, _| {})
}

/// As [`train`], calling `observe(step, weights)` after initialisation and
/// after every step with the per-unit weight columns.
pub fn train_observed<F>(cfg: &TrainConfig, mut observe: F) -> Result<TrainTrace>
where
    F: FnMut(u64, &[&[f64]]),
{
    cfg.validate()?;
    let np = (cfg.n * cfg.p) as f64;
    let mut units: Vec<Unit> = (0..cfg.p as u64)
        .into_par_iter()
        .map(|u| -> Result<Unit> {
            Ok(Unit {
                w: init_weights(cfg.n, cfg.init_mu, cfg.init_sigma_sq, cfg.seed, u)?,
                support: oracle_column(cfg.n, cfg.p_w, cfg.seed, u)?,
                grad: vec![0.0; cfg.n],
                fixed: match cfg.batch_mode {
                    BatchMode::Fixed => Some(unit_batch(cfg, u, 0)?),
                    BatchMode::Fresh => None,
                },
            })
        })
        .collect::<Result<_>>()?;

    let stats: Vec<UnitStats> = units.par_iter().map(unit_stats).collect();
    let mut total = reduce(&stats);
    let initial = row(0, &total, np);
    let mut rows = vec![initial];
    {
        let views: Vec<&[f64]> = units.iter().map(|u| u.w.as_slice()).collect();
        observe(0, &views);
    }
    let mut convergence_step = if initial.l1 < cfg.convergence_threshold { Some(0) } else { None };
    let mut diverged = false;
    let mut stalled = false;
    let mut step = 0;
    let mut best = (initial.l1, 0u64);

    while !(cfg.stop_at_convergence && convergence_step.is_some()) && step < cfg.steps {
        step += 1;
        let results: Vec<Result<UnitStats>> = units
            .par_iter_mut()
            .enumerate()
            .map(|(u, unit)| {
                let fresh;
                let batch = match &unit.fixed {
                    Some(b) => b,
                    None => {
                        fresh = unit_batch(cfg, u as u64, step)?;
                        &fresh
                    }
                };
                let loss = sgd_step_unit(&mut unit.w, batch, &unit.support, cfg.alpha, &mut unit.grad)?;
                let mut s = unit_stats(unit);
                s.loss = loss;
                Ok(s)
            })
            .collect();
        let mut stats = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(s) => stats.push(s),
                Err(LabError::Numeric(_)) => {
                    diverged = true;
                    stats.push(UnitStats {
                        max_abs: f64::INFINITY,
                        ..UnitStats::default()
                    });
                }
                Err(e) => return Err(e),
            }
        }
        total = reduce(&stats);
        if !(total.max_abs <= cfg.divergence_limit) {
            diverged = true;
        }
        let r = row(step, &total, np);
        {
            let views: Vec<&[f64]> = units.iter().map(|u| u.w.as_slice()).collect();
            observe(step, &views);
        }
        if !diverged && convergence_step.is_none() && r.l1 < cfg.convergence_threshold {
            convergence_step = Some(step);
        }
        if r.l1 < 0.99 * best.0 {
            best = (r.l1, step);
        }
        if let Some(patience) = cfg.patience {
            if convergence_step.is_none() && step - best.1 >= patience {
                stalled = true;
            }
        }
        let last = diverged
            || stalled
            || (cfg.stop_at_convergence && convergence_step.is_some())
            || step == cfg.steps;
        if step % cfg.log_every == 0 || last {
            rows.push(r);
        }
        if diverged || stalled {
            break;
        }
    }
    let final_l1 = if diverged { f64::INFINITY } else { rows.last().map_or(f64::NAN, |r| r.l1) };
    Ok(TrainTrace {
        rows,
        convergence_step,
        diverged,
        initial_l1: initial.l1,
        final_l1,
        steps_run: step,
        stalled,
    })
}

/// Largest N accepted by [`truth_table_accuracy`].
pub const MAX_TABLE_N: usize = 24;

/// Fraction of all 2^N inputs on which `xor_forward(w, ·) ≥ threshold`
/// agrees with the parity of `w_true`.
pub fn truth_table_accuracy(w: &[f64], w_true: &[u8], threshold: f64) -> Result<f64> {
    check_len("oracle length", w.len(), w_true.len())?;
    let n = w.len();
    if n > MAX_TABLE_N {
        return Err(LabError::Domain(format!(
            "truth table enumeration needs N <= {MAX_TABLE_N}, got {n}"
        )));
    }
    let a: Vec<f64> = w.iter().map(|wi| 1.0 - 2.0 * wi).collect();
    let mask: u32 = w_true
        .iter()
        .enumerate()
        .fold(0, |m, (i, &t)| if t == 1 { m | (1 << i) } else { m });
    let size: u32 = 1 << n;
    let correct: u64 = (0..size)
        .into_par_iter()
        .with_min_len(4096)
        .map(|x| {
            let mut prod = 1.0;
            let mut bits = x;
            while bits != 0 {
                let i = bits.trailing_zeros();
                prod *= a[i as usize];
                bits &= bits - 1;
            }
            let pred = u32::from(0.5 * (1.0 - prod) >= threshold);
            let truth = (x & mask).count_ones() & 1;
            u64::from(pred == truth)
        })
        .sum();
    Ok(correct as f64 / f64::from(size))
}

/// Encodes a binary row as a truth-table index (bit i is input i).
pub fn row_index(row: &[u32]) -> usize {
    row.iter().fold(0usize, |acc, &i| acc | (1 << i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_unit_hand_step() {
        let batch = SparseBatch::from_rows(1, &[vec![0]]).unwrap();
        let mut w = vec![0.5];
        let mut g = vec![0.0];
        sgd_step_unit(&mut w, &batch, &[1], 0.3, &mut g).unwrap();
        assert_eq!(g[0], -1.0);
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let y = DMatrix::from_row_slice(1, 1, &[2.0]);
        let t = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert_eq!(mse_loss(&y, &t).unwrap(), 1.0);
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let y2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.0]);
        let t2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let y1 = DMatrix::from_row_slice(2, 1, &[0.5, 0.0]);
        let t1 = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        assert_eq!(mse_loss(&y2, &t2).unwrap(), 2.0 * mse_loss(&y1, &t1).unwrap());
    }

    #[test]
    fn table_accuracy_examples() {
        let t = [1u8, 0, 1, 1];
        let w: Vec<f64> = t.iter().map(|&b| f64::from(b)).collect();
        assert_eq!(truth_table_accuracy(&w, &t, 0.5).unwrap(), 1.0);
        let mut flipped = w.clone();
        flipped[2] = 0.0;
        assert_eq!(truth_table_accuracy(&flipped, &t, 0.5).unwrap(), 0.5);
        assert!(truth_table_accuracy(&[0.0; 25], &[0; 25], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.steps = 0;
        assert!(c.validate().is_err());
    }
}
