//! Desk-scale experiment harness: hyperparameter sweeps with derived markers
//! and scaling fits, distributional diagnostics, theory-versus-simulation
//! comparisons, the generalization study and the effective learning-rate
//! study. Every result keeps its raw per-run rows so markers can be
//! recomputed outside the harness.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{log_space, ExperimentConfig};
use crate::data::oracle_column;
use crate::dynamics::{bounds, dist_trajectory, step_two_family, BoundSet, DistState, TrajectoryRow};
use crate::error::{LabError, Result};
use crate::grad::GaussianFamilyParams;
use crate::mlp::{mlp_train, node_train, GenConfig, GenRow, Sampling};
use crate::rng::child_seed;
use crate::stats::{family_moments, qq_gaussian, qq_points, FamilyMoments};
use crate::trainer::{train, train_observed, TrainConfig, TrainTrace};

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Input sparsity `p_e`; natural unit `1/N`.
    Pe,
    /// Learning rate `α`; natural unit `N`.
    Alpha,
}

impl SweepAxis {
    /// Axis value expressed in its natural unit.
    pub fn scaled(&self, value: f64, n: usize) -> f64 {
        match self {
            SweepAxis::Pe => value * n as f64,
            SweepAxis::Alpha => value / n as f64,
        }
    }
}

/// Outcome of one training run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    /// Axis value (`p_e` or `α`).
    pub value: f64,
    /// Axis value in its natural unit (`p_e·N` or `α/N`).
    pub scaled: f64,
    pub replica: usize,
    pub p: usize,
    pub m: usize,
    pub alpha: f64,
    pub p_e: f64,
    pub convergence_step: Option<u64>,
    pub steps_run: u64,
    pub initial_l1: f64,
    pub final_l1: f64,
    pub diverged: bool,
    pub stalled: bool,
    /// Distance shrank by less than the failure fraction (or diverged).
    pub reduction_failed: bool,
}

impl SweepRow {
    pub fn converged(&self) -> bool {
        self.convergence_step.is_some()
    }
}

/// One logged point of a run's distance series, for iso-step and
/// iso-distance curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub n: usize,
    pub value: f64,
    pub replica: usize,
    pub step: u64,
    pub l1: f64,
}

/// Markers derived from the runs at one problem size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepMarkers {
    pub n: usize,
    /// Fastest-converging axis value (`p_e*` or `α*`).
    pub best: Option<f64>,
    /// Mean steps to convergence at `best`.
    pub best_steps: Option<f64>,
    /// Limit marker: for `p_e`, the smallest value whose runs shrink the
    /// distance by less than the failure fraction; for `α`, the smallest
    /// value whose runs do not converge.
    pub limit: Option<f64>,
    /// Smallest value whose runs do not converge within the step budget.
    pub nonconv_limit: Option<f64>,
}

/// Theoretical learning-rate thresholds at one problem size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub n: usize,
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    /// Standard error of the slope; NaN with fewer than three points.
    pub slope_se: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Fits `ln y = a + b ln x`. Needs at least two distinct positive `x`.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() {
        return Err(LabError::Dimension {
            what: "fit points",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(LabError::Domain("log-log fit needs finite positive values".into()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(LabError::InsufficientData { needed: 2, got: n });
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let nf = n as f64;
    let mx = lx.iter().sum::<f64>() / nf;
    let my = ly.iter().sum::<f64>() / nf;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(LabError::Domain("log-log fit needs two distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LogLogFit {
        slope,
        slope_se,
        intercept,
        points: n,
    })
}

/// Raw rows, markers, fits and theory overlays of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub distances: Vec<DistanceRow>,
    pub markers: Vec<SweepMarkers>,
    /// Fit of `best` against N.
    pub fit_best: Option<LogLogFit>,
    /// Fit of `limit` against N.
    pub fit_limit: Option<LogLogFit>,
    pub overlays: Vec<Overlay>,
}

/// Recomputes the per-N markers from raw rows.
///
/// Replicas of one grid point are pooled: a point converges when every
/// replica converges, and it fails when at least half of its replicas fail.
pub fn markers_from_rows(axis: SweepAxis, rows: &[SweepRow]) -> Vec<SweepMarkers> {
    let mut by_n: BTreeMap<usize, BTreeMap<u64, Vec<&SweepRow>>> = BTreeMap::new();
    for r in rows {
        by_n.entry(r.n).or_default().entry(r.value.to_bits()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (n, points) in by_n {
        let mut pts: Vec<(f64, Vec<&SweepRow>)> =
            points.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let majority = |v: &[&SweepRow], f: &dyn Fn(&SweepRow) -> bool| {
            2 * v.iter().filter(|r| f(r)).count() >= v.len()
        };
        let nonconv_limit = pts
            .iter()
            .find(|(_, v)| majority(v, &|r| !r.converged()))
            .map(|(x, _)| *x);
        let limit = match axis {
            SweepAxis::Pe => pts
                .iter()
                .find(|(_, v)| majority(v, &|r| r.reduction_failed))
                .map(|(x, _)| *x),
            SweepAxis::Alpha => nonconv_limit,
        };
        let mut best: Option<(f64, f64)> = None;
        for (x, v) in &pts {
            if axis == SweepAxis::Alpha && limit.is_some_and(|l| *x >= l) {
                break;
            }
            if !v.iter().all(|r| r.converged()) {
                continue;
            }
            let mean = v.iter().map(|r| r.convergence_step.unwrap_or(0) as f64).sum::<f64>() / v.len() as f64;
            if best.is_none_or(|(_, s)| mean < s) {
                best = Some((*x, mean));
            }
        }
        out.push(SweepMarkers {
            n,
            best: best.map(|b| b.0),
            best_steps: best.map(|b| b.1),
            limit,
            nonconv_limit,
        });
    }
    out
}

fn fit_markers(markers: &[SweepMarkers], pick: impl Fn(&SweepMarkers) -> Option<f64>) -> Option<LogLogFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = markers
        .iter()
        .filter_map(|m| pick(m).map(|v| (m.n as f64, v)))
        .unzip();
    log_log_fit(&xs, &ys).ok()
}

/// Grid of absolute axis values at size `n`.
pub fn sweep_values(cfg: &ExperimentConfig, axis: SweepAxis, n: usize) -> Result<Vec<f64>> {
    let nf = n as f64;
    Ok(match axis {
        SweepAxis::Pe => cfg.grid.points().into_iter().map(|k| (k / nf).min(1.0)).collect(),
        SweepAxis::Alpha => {
            if !cfg.grid.values.is_empty() {
                cfg.grid.points().into_iter().map(|k| k * nf).collect()
            } else {
                let a2 = bounds(n, 0.0)?.alpha2;
                let lo = if a2 > 0.0 { cfg.alpha2_fraction * a2 } else { cfg.grid.lo * nf };
                log_space(lo, cfg.grid.hi * nf, cfg.grid.count)
            }
        }
    })
}

struct RunSpec {
    n: usize,
    value: f64,
    replica: usize,
    cfg: TrainConfig,
}

fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<SweepResult> {
    cfg.validate()?;
    let mut specs = Vec::new();
    for &n in &cfg.ns {
        let base = cfg.train_config_for(n)?;
        for value in sweep_values(cfg, axis, n)? {
            for replica in 0..cfg.replicas {
                let mut t = base.clone();
                match axis {
                    SweepAxis::Pe => t.p_e = value,
                    SweepAxis::Alpha => t.alpha = value,
                }
                t.seed = child_seed(cfg.base.seed, "replica", replica as u64);
                t.log_every = cfg.trace_every;
                specs.push(RunSpec { n, value, replica, cfg: t });
            }
        }
    }
    let runs: Vec<Result<(SweepRow, Vec<DistanceRow>)>> = specs
        .par_iter()
        .map(|s| {
            let trace = train(&s.cfg)?;
            Ok(sweep_row(s, &trace, axis))
        })
        .collect();
    let mut rows = Vec::with_capacity(runs.len());
    let mut distances = Vec::new();
    for r in runs {
        let (row, d) = r?;
        rows.push(row);
        distances.extend(d);
    }
    let markers = markers_from_rows(axis, &rows);
    let overlays = cfg
        .ns
        .iter()
        .filter(|&&n| n > 2)
        .map(|&n| {
            let b = bounds(n, 0.0)?;
            Ok(Overlay {
                n,
                alpha0: b.alpha0,
                alpha1: b.alpha1,
                alpha2: b.alpha2,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        axis,
        fit_best: fit_markers(&markers, |m| m.best),
        fit_limit: fit_markers(&markers, |m| m.limit),
        rows,
        distances,
        markers,
        overlays,
    })
}

fn sweep_row(s: &RunSpec, trace: &TrainTrace, axis: SweepAxis) -> (SweepRow, Vec<DistanceRow>) {
    let row = SweepRow {
        n: s.n,
        value: s.value,
        scaled: axis.scaled(s.value, s.n),
        replica: s.replica,
        p: s.cfg.p,
        m: s.cfg.m,
        alpha: s.cfg.alpha,
        p_e: s.cfg.p_e,
        convergence_step: trace.convergence_step,
        steps_run: trace.steps_run,
        initial_l1: trace.initial_l1,
        final_l1: trace.final_l1,
        diverged: trace.diverged,
        stalled: trace.stalled,
        reduction_failed: trace.failed(s.cfg.failure_reduction),
    };
    let d = trace
        .rows
        .iter()
        .map(|r| DistanceRow {
            n: s.n,
            value: s.value,
            replica: s.replica,
            step: r.step,
            l1: r.l1,
        })
        .collect();
    (row, d)
}

/// Trains across the `p_e` grid (in units of `1/N`) for every N.
pub fn sweep_pe(cfg: &ExperimentConfig) -> Result<SweepResult> {
    run_sweep(cfg, SweepAxis::Pe)
}

/// Trains across the `α` grid for every N, from `alpha2_fraction · α₂` (or
/// `grid.lo · N` when `α₂ ≤ 0`) to `grid.hi · N`.
pub fn sweep_alpha(cfg: &ExperimentConfig) -> Result<SweepResult> {
    run_sweep(cfg, SweepAxis::Alpha)
}

/// Family diagnostics at one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub mu0: Option<f64>,
    pub sig0_sq: Option<f64>,
    pub mu1: Option<f64>,
    pub sig1_sq: Option<f64>,
    pub n0: usize,
    pub n1: usize,
    pub qq0: Option<f64>,
    pub qq1: Option<f64>,
    pub qq_all: Option<f64>,
    /// `|μ₀ - (1 - μ₁)|`.
    pub sym_mu: Option<f64>,
    /// `|σ₀² - σ₁²|`.
    pub sym_var: Option<f64>,
    /// `band_sigmas / √min(n₀, n₁)`.
    pub band: Option<f64>,
}

/// Snapshots of a single-unit run plus its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub snapshots: Vec<Snapshot>,
    pub qq_threshold: f64,
    pub trace: TrainTrace,
    /// Q-Q points of each family at the last snapshot.
    pub final_qq0: Vec<(f64, f64)>,
    pub final_qq1: Vec<(f64, f64)>,
}

impl GaussianityReport {
    /// Every snapshot has both family correlations at or above the threshold.
    pub fn families_gaussian(&self) -> bool {
        self.snapshots
            .iter()
            .all(|s| s.qq0.unwrap_or(0.0) >= self.qq_threshold && s.qq1.unwrap_or(0.0) >= self.qq_threshold)
    }

    /// Every snapshot satisfies the mean-symmetry band.
    pub fn symmetric(&self) -> bool {
        self.snapshots
            .iter()
            .all(|s| matches!((s.sym_mu, s.band), (Some(r), Some(b)) if r <= b))
    }
}

/// Evenly spaced snapshot steps over `0..=steps`.
pub fn snapshot_steps(steps: u64, count: usize) -> Vec<u64> {
    let mut v: Vec<u64> = (0..count)
        .map(|i| (i as f64 * steps as f64 / (count - 1).max(1) as f64).round() as u64)
        .collect();
    v.dedup();
    v
}

fn snapshot(step: u64, w: &[f64], support: &[u8], band_sigmas: f64) -> Result<Snapshot> {
    let fm: FamilyMoments = family_moments(w, support)?;
    let split = |t: u8| -> Vec<f64> {
        w.iter().zip(support).filter(|(_, &s)| s == t).map(|(x, _)| *x).collect()
    };
    let qq = |v: &[f64]| qq_gaussian(v).ok().map(|r| r.correlation);
    let (sym_mu, sym_var) = match fm.symmetry_residuals() {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let min_count = fm.n0.min(fm.n1);
    Ok(Snapshot {
        step,
        mu0: fm.mu0,
        sig0_sq: fm.sig0_sq,
        mu1: fm.mu1,
        sig1_sq: fm.sig1_sq,
        n0: fm.n0,
        n1: fm.n1,
        qq0: qq(&split(0)),
        qq1: qq(&split(1)),
        qq_all: qq(w),
        sym_mu,
        sym_var,
        band: (min_count > 0).then(|| band_sigmas / (min_count as f64).sqrt()),
    })
}

/// Single-unit run at large N with family moments and Q-Q correlations at
/// evenly spaced snapshots.
pub fn run_gaussianity(cfg: &ExperimentConfig) -> Result<GaussianityReport> {
    cfg.validate()?;
    let mut t = cfg.train_config_for(cfg.base.n)?;
    t.p = 1;
    let support = oracle_column(t.n, t.p_w, t.seed, 0)?;
    let wanted = snapshot_steps(t.steps, cfg.snapshots);
    let mut snaps = Vec::new();
    let mut last_w = Vec::new();
    let mut err = None;
    let trace = train_observed(&t, |step, w| {
        if wanted.binary_search(&step).is_ok() {
            match snapshot(step, w[0], &support, cfg.band_sigmas) {
                Ok(s) => snaps.push(s),
                Err(e) => err = Some(e),
            }
            last_w = w[0].to_vec();
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let family = |t: u8| -> Vec<f64> {
        last_w.iter().zip(&support).filter(|(_, &s)| s == t).map(|(x, _)| *x).collect()
    };
    Ok(GaussianityReport {
        snapshots: snaps,
        qq_threshold: cfg.qq_threshold,
        trace,
        final_qq0: qq_points(&family(0)).unwrap_or_default(),
        final_qq1: qq_points(&family(1)).unwrap_or_default(),
    })
}

/// Family-moment trajectory of one `p_w` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwRun {
    pub p_w: f64,
    pub snapshots: Vec<Snapshot>,
}

/// Largest disagreement between family trajectories across `p_w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwReport {
    pub runs: Vec<PwRun>,
    /// Largest `|Δμ|` between any two runs, same family, same step.
    pub max_mu_dev: f64,
    /// Largest `|Δμ|` divided by its band `band_sigmas / √min(count)`.
    pub max_mu_ratio: f64,
    /// Largest `|Δσ²|` divided by its band
    /// `band_sigmas · max(σ²) · √(2 / min(count))`.
    pub max_var_ratio: f64,
}

impl PwReport {
    pub fn within_band(&self) -> bool {
        self.max_mu_ratio <= 1.0 && self.max_var_ratio <= 1.0
    }
}

/// Identical runs differing only in `p_w`, compared step by step.
pub fn run_pw_invariance(cfg: &ExperimentConfig) -> Result<PwReport> {
    cfg.validate()?;
    let mut base = cfg.train_config_for(cfg.base.n)?;
    base.p = 1;
    let wanted = snapshot_steps(base.steps, cfg.snapshots.max(2));
    let runs: Vec<Result<PwRun>> = cfg
        .pw_values
        .par_iter()
        .map(|&p_w| {
            let mut t = base.clone();
            t.p_w = p_w;
            let support = oracle_column(t.n, p_w, t.seed, 0)?;
            let mut snaps = Vec::new();
            let mut err = None;
            train_observed(&t, |step, w| {
                if wanted.binary_search(&step).is_ok() {
                    match snapshot(step, w[0], &support, cfg.band_sigmas) {
                        Ok(s) => snaps.push(s),
                        Err(e) => err = Some(e),
                    }
                }
            })?;
            match err {
                Some(e) => Err(e),
                None => Ok(PwRun { p_w, snapshots: snaps }),
            }
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let (mut max_mu_dev, mut max_mu_ratio, mut max_var_ratio) = (0.0f64, 0.0f64, 0.0f64);
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
                let fams = [
                    (sa.mu0, sb.mu0, sa.sig0_sq, sb.sig0_sq, sa.n0.min(sb.n0)),
                    (sa.mu1, sb.mu1, sa.sig1_sq, sb.sig1_sq, sa.n1.min(sb.n1)),
                ];
                for (ma, mb, va, vb, count) in fams {
                    if let (Some(ma), Some(mb), Some(va), Some(vb)) = (ma, mb, va, vb) {
                        let c = count as f64;
                        let d = (ma - mb).abs();
                        max_mu_dev = max_mu_dev.max(d);
                        max_mu_ratio = max_mu_ratio.max(d / (cfg.band_sigmas / c.sqrt()));
                        let vband = cfg.band_sigmas * va.max(vb) * (2.0 / c).sqrt();
                        if vband > 0.0 {
                            max_var_ratio = max_var_ratio.max((va - vb).abs() / vband);
                        }
                    }
                }
            }
        }
    }
    Ok(PwReport {
        runs,
        max_mu_dev,
        max_mu_ratio,
        max_var_ratio,
    })
}

/// Empirical and predicted family moments at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub step: u64,
    pub emp_mu0: f64,
    pub emp_sig0_sq: f64,
    pub emp_mu1: f64,
    pub emp_sig1_sq: f64,
    pub th_mu0: f64,
    pub th_sig0_sq: f64,
    pub th_mu1: f64,
    pub th_sig1_sq: f64,
}

/// SGD against the two-family recurrence started from the same moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub alpha: f64,
    pub n: usize,
    pub rows: Vec<TheoryRow>,
    /// Largest `|μ_emp - μ_theory|` over both families and all steps.
    pub max_mu_dev: f64,
    /// Geometric-mean one-step variance ratio of the target-0 family over
    /// the first `ratio_steps` steps, empirical and predicted.
    pub emp_var_ratio: f64,
    pub th_var_ratio: f64,
    pub ratio_steps: u64,
}

/// Runs SGD and the recurrence side by side.
///
/// The recurrence starts from the empirical family moments of the initial
/// weights, so the comparison measures the dynamics rather than the
/// sampling noise of the initialisation.
pub fn run_theory_vs_empirical(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    cfg.validate()?;
    let mut t = cfg.train_config_for(cfg.base.n)?;
    t.p = 1;
    let support = oracle_column(t.n, t.p_w, t.seed, 0)?;
    if !support.contains(&0) || !support.contains(&1) {
        return Err(LabError::Config("theory comparison needs both families (0 < p_w < 1)".into()));
    }
    let mut emp: Vec<(u64, FamilyMoments)> = Vec::new();
    let mut err = None;
    train_observed(&t, |step, w| match family_moments(w[0], &support) {
        Ok(fm) => emp.push((step, fm)),
        Err(e) => err = Some(e),
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let get = |fm: &FamilyMoments| -> (f64, f64, f64, f64) {
        (
            fm.mu0.unwrap_or(f64::NAN),
            fm.sig0_sq.unwrap_or(f64::NAN),
            fm.mu1.unwrap_or(f64::NAN),
            fm.sig1_sq.unwrap_or(f64::NAN),
        )
    };
    let (mu0, s0, mu1, s1) = get(&emp[0].1);
    let mut fam = GaussianFamilyParams {
        mu0,
        sigma0_sq: s0,
        mu1,
        sigma1_sq: s1,
        p_w: emp[0].1.n1 as f64 / t.n as f64,
    };
    let mut rows = Vec::with_capacity(emp.len());
    let mut max_mu_dev = 0.0f64;
    let mut k = 0u64;
    for (step, fm) in &emp {
        while k < *step {
            fam = step_two_family(&fam, t.alpha, t.n, t.p_e);
            k += 1;
        }
        let (a, b, c, d) = get(fm);
        max_mu_dev = max_mu_dev.max((a - fam.mu0).abs()).max((c - fam.mu1).abs());
        rows.push(TheoryRow {
            step: *step,
            emp_mu0: a,
            emp_sig0_sq: b,
            emp_mu1: c,
            emp_sig1_sq: d,
            th_mu0: fam.mu0,
            th_sig0_sq: fam.sigma0_sq,
            th_mu1: fam.mu1,
            th_sig1_sq: fam.sigma1_sq,
        });
    }
    let ratio_steps = rows.len().saturating_sub(1).min(20) as u64;
    let ratio = |first: f64, last: f64| (last / first).powf(1.0 / ratio_steps.max(1) as f64);
    let (emp_var_ratio, th_var_ratio) = if ratio_steps > 0 {
        let r = ratio_steps as usize;
        (
            ratio(rows[0].emp_sig0_sq, rows[r].emp_sig0_sq),
            ratio(rows[0].th_sig0_sq, rows[r].th_sig0_sq),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(TheoryReport {
        alpha: t.alpha,
        n: t.n,
        rows,
        max_mu_dev,
        emp_var_ratio,
        th_var_ratio,
        ratio_steps,
    })
}

/// Accuracy curve of one model in one sampling regime, averaged over
/// replicas step by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCurve {
    pub regime: String,
    pub model: String,
    pub rows: Vec<GenRow>,
}

/// Product node against the MLP in each sampling regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub regime: String,
    /// First step at which the replica-mean node validation accuracy is 1.
    pub node_full_step: Option<u64>,
    /// Mean coverage at that step.
    pub node_full_coverage: Option<f64>,
    /// Mean MLP validation and training accuracy at that step.
    pub mlp_val_at_full: Option<f64>,
    pub mlp_train_at_full: Option<f64>,
    /// Mean MLP validation and training accuracy and coverage at the end.
    pub mlp_val_final: f64,
    pub mlp_train_final: f64,
    pub coverage_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub curves: Vec<GenCurve>,
    pub summaries: Vec<GenSummary>,
}

fn mean_curve(runs: &[Vec<GenRow>]) -> Vec<GenRow> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let k = runs.len() as f64;
    (0..len)
        .map(|i| {
            let mut r = GenRow {
                step: runs[0][i].step,
                train_acc: 0.0,
                val_acc: 0.0,
                coverage: 0.0,
                loss: 0.0,
            };
            for run in runs {
                let x = &run[i];
                // An empty seen set has no training accuracy; count it as chance.
                r.train_acc += if x.train_acc.is_nan() { 0.5 } else { x.train_acc } / k;
                r.val_acc += x.val_acc / k;
                r.coverage += x.coverage / k;
                r.loss += x.loss / k;
            }
            r
        })
        .collect()
}

/// Product node and MLP trained on the same batches of the subset parity of
/// `base.n` bits, under unit sparsity and (optionally) uniform sampling.
pub fn run_generalization(cfg: &ExperimentConfig) -> Result<GenReport> {
    cfg.validate()?;
    let n = cfg.base.n;
    if n > crate::trainer::MAX_TABLE_N {
        return Err(LabError::Domain(format!("generalization needs N <= {}, got {n}", crate::trainer::MAX_TABLE_N)));
    }
    let g = &cfg.generalization;
    let mut regimes = vec![("sparse", Sampling::Bernoulli { p_e: 1.0 / n as f64 })];
    if g.uniform {
        regimes.push(("uniform", Sampling::Uniform));
    }
    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    for (name, sampling) in regimes {
        let results: Vec<Result<(Vec<GenRow>, Vec<GenRow>)>> = (0..cfg.replicas as u64)
            .into_par_iter()
            .map(|replica| {
                let support = oracle_column(n, cfg.base.p_w, cfg.base.seed, replica)?;
                let mut gc = GenConfig {
                    n,
                    m: g.m,
                    lr: g.node_lr,
                    steps: g.steps,
                    seed: cfg.base.seed,
                    replica,
                    sampling,
                    eval_every: g.eval_every,
                };
                let node = node_train(&gc, &support)?;
                gc.lr = g.mlp_lr;
                let mlp = mlp_train(&gc, &g.hidden, &support)?;
                Ok((node, mlp))
            })
            .collect();
        let (nodes, mlps): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
        let node = mean_curve(&nodes);
        let mlp = mean_curve(&mlps);
        let full = node.iter().position(|r| r.val_acc >= 1.0);
        let last = mlp.last().copied().ok_or(LabError::InsufficientData { needed: 1, got: 0 })?;
        summaries.push(GenSummary {
            regime: name.into(),
            node_full_step: full.map(|i| node[i].step),
            node_full_coverage: full.map(|i| node[i].coverage),
            mlp_val_at_full: full.and_then(|i| mlp.get(i)).map(|r| r.val_acc),
            mlp_train_at_full: full.and_then(|i| mlp.get(i)).map(|r| r.train_acc),
            mlp_val_final: last.val_acc,
            mlp_train_final: last.train_acc,
            coverage_final: last.coverage,
        });
        curves.push(GenCurve {
            regime: name.into(),
            model: "node".into(),
            rows: node,
        });
        curves.push(GenCurve {
            regime: name.into(),
            model: "mlp".into(),
            rows: mlp,
        });
    }
    Ok(GenReport { curves, summaries })
}

/// One run of the effective learning-rate study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffRow {
    pub n: usize,
    pub alpha: f64,
    pub p_e: f64,
    pub m: usize,
    pub p: usize,
    /// `α · p_e`.
    pub effective: f64,
    pub replica: usize,
    pub convergence_step: Option<u64>,
    pub diverged: bool,
}

/// Points sharing one effective rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffGroup {
    pub effective: f64,
    /// `(n, α, p_e, M, mean steps)`; steps absent when any replica failed.
    pub points: Vec<(usize, f64, f64, usize, Option<f64>)>,
    /// `max/min - 1` of the mean steps; absent when a point failed.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffReport {
    pub rows: Vec<EffRow>,
    pub groups: Vec<EffGroup>,
}

/// Relative tolerance for treating two effective rates as equal.
const EFFECTIVE_MATCH: f64 = 1e-9;

/// Groups raw rows by matching `α · p_e` and measures step spreads.
pub fn effective_groups(rows: &[EffRow]) -> Vec<EffGroup> {
    let mut keys: Vec<f64> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| (k - r.effective).abs() <= EFFECTIVE_MATCH * k.abs().max(r.effective.abs())) {
            keys.push(r.effective);
        }
    }
    keys.sort_by(f64::total_cmp);
    keys.into_iter()
        .map(|k| {
            let mut points: Vec<(usize, f64, f64, usize, Option<f64>)> = Vec::new();
            let members: Vec<&EffRow> = rows
                .iter()
                .filter(|r| (k - r.effective).abs() <= EFFECTIVE_MATCH * k.abs().max(r.effective.abs()))
                .collect();
            for r in &members {
                if points.iter().any(|p| p.0 == r.n && p.1 == r.alpha && p.2 == r.p_e && p.3 == r.m) {
                    continue;
                }
                let reps: Vec<&&EffRow> = members
                    .iter()
                    .filter(|q| q.n == r.n && q.alpha == r.alpha && q.p_e == r.p_e && q.m == r.m)
                    .collect();
                let mean = if reps.iter().all(|q| q.convergence_step.is_some()) {
                    Some(reps.iter().map(|q| q.convergence_step.unwrap_or(0) as f64).sum::<f64>() / reps.len() as f64)
                } else {
                    None
                };
                points.push((r.n, r.alpha, r.p_e, r.m, mean));
            }
            let steps: Option<Vec<f64>> = points.iter().map(|p| p.4).collect();
            let spread = steps.and_then(|s| {
                let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = s.iter().copied().fold(0.0, f64::max);
                (lo > 0.0).then(|| hi / lo - 1.0)
            });
            EffGroup {
                effective: k,
                points,
                spread,
            }
        })
        .collect()
}

/// Steps to convergence across `(N, α, p_e, M)` points.
pub fn run_effective_lr(cfg: &ExperimentConfig) -> Result<EffReport> {
    cfg.validate()?;
    let mut specs = Vec::new();
    for p in &cfg.points {
        let mut t = cfg.train_config_for(p.n)?;
        t.alpha = p.alpha;
        t.p_e = p.p_e;
        t.m = p.m;
        for replica in 0..cfg.replicas {
            let mut t = t.clone();
            t.seed = child_seed(cfg.base.seed, "replica", replica as u64);
            specs.push((*p, replica, t));
        }
    }
    let rows: Vec<Result<EffRow>> = specs
        .par_iter()
        .map(|(p, replica, t)| {
            let trace = train(t)?;
            Ok(EffRow {
                n: p.n,
                alpha: p.alpha,
                p_e: p.p_e,
                m: p.m,
                p: t.p,
                effective: p.alpha * p.p_e,
                replica: *replica,
                convergence_step: trace.convergence_step,
                diverged: trace.diverged,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EffReport {
        groups: effective_groups(&rows),
        rows,
    })
}

/// One row of the exported bounds table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub epsilon: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub delta_max: f64,
}

impl From<BoundSet> for BoundsRow {
    fn from(b: BoundSet) -> Self {
        Self {
            n: b.n,
            alpha0: b.alpha0,
            alpha1: b.alpha1,
            alpha2: b.alpha2,
            epsilon: b.epsilon,
            phi_min: b.phi_min_prime,
            phi_max: b.phi_max_prime,
            delta_max: b.delta_max,
        }
    }
}

/// Bound table for every N at learning rate `alpha` (`None` uses each
/// N's own `α₂`).
pub fn bounds_table(ns: &[usize], alpha: Option<f64>) -> Result<Vec<BoundsRow>> {
    ns.iter()
        .map(|&n| {
            let a = match alpha {
                Some(a) => a,
                None => bounds(n, 0.0)?.alpha2,
            };
            Ok(bounds(n, a)?.into())
        })
        .collect()
}

/// Recurrence trajectory from the Gaussian initialisation.
pub fn trajectory(n: usize, alpha: f64, steps: u64) -> Vec<TrajectoryRow> {
    dist_trajectory(DistState::init(), alpha, n, steps)
}

/// A `theoretical_q,empirical_q` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub theoretical_q: f64,
    pub empirical_q: f64,
}

pub fn qq_rows(points: &[(f64, f64)]) -> Vec<QqRow> {
    points
        .iter()
        .map(|&(theoretical_q, empirical_q)| QqRow {
            theoretical_q,
            empirical_q,
        })
        .collect()
}

/// Writes serializable rows as CSV with a header line.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_rows`].
pub fn read_rows<R: std::io::Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(LabError::from)).collect()
}

/// Flat CSV form of a gen curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenCsvRow<'a> {
    pub regime: &'a str,
    pub model: &'a str,
    pub step: u64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub coverage: f64,
    pub loss: f64,
}

pub fn gen_csv_rows(report: &GenReport) -> Vec<GenCsvRow<'_>> {
    report
        .curves
        .iter()
        .flat_map(|c| {
            c.rows.iter().map(move |r| GenCsvRow {
                regime: &c.regime,
                model: &c.model,
                step: r.step,
                train_acc: r.train_acc,
                val_acc: r.val_acc,
                coverage: r.coverage,
                loss: r.loss,
            })
        })
        .collect()
}

/// Node family of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Sum,
    NaiveProduct,
    NeProduct,
    Xor,
}

/// Worst finite-difference disagreement of one node family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub node: NodeKind,
    pub instances: usize,
    /// Largest `‖g_analytic - g_fd‖∞ / ‖g_fd‖∞` over the instances.
    pub max_rel_err: f64,
}

/// Which closed-form expectation a Monte-Carlo check covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationKind {
    /// Expected XOR gradient over Bernoulli inputs at fixed weights.
    Bernoulli,
    /// Expected gradient of one weight over Gaussian-family weights.
    Gaussian,
}

/// Monte-Carlo check of an expected gradient at one `(N, p_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McCheckRow {
    pub expectation: ExpectationKind,
    pub n: usize,
    pub p_e: f64,
    pub reps: usize,
    /// Compared components.
    pub components: usize,
    /// Largest `|mean - expected| / SE` over components.
    pub max_z: f64,
    /// Per-component limit: [`MC_SE`] standard errors, adjusted so the
    /// components jointly keep the false-alarm rate of one comparison.
    pub z_limit: f64,
}

impl McCheckRow {
    pub fn passed(&self) -> bool {
        self.max_z <= self.z_limit
    }
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Monte-Carlo agreement threshold in standard errors.
pub const MC_SE: f64 = 3.0;
/// Largest accepted relative disagreement with central differences.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub fd: Vec<GradCheckRow>,
    pub mc: Vec<McCheckRow>,
}

type RiskFn = fn(&nalgebra::DMatrix<f64>, &[f64], &[f64]) -> Result<f64>;
type GradFn = fn(&nalgebra::DMatrix<f64>, &[f64], &[f64]) -> Result<Vec<f64>>;

/// Central-difference step of [`gradcheck`].
pub const FD_STEP: f64 = 1e-5;

fn fd_rel_err(risk: RiskFn, grad: GradFn, x: &nalgebra::DMatrix<f64>, w: &[f64], wt: &[f64]) -> Result<f64> {
    let g = grad(x, w, wt)?;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    let mut wp = w.to_vec();
    for j in 0..w.len() {
        wp[j] = w[j] + FD_STEP;
        let up = risk(x, &wp, wt)?;
        wp[j] = w[j] - FD_STEP;
        let dn = risk(x, &wp, wt)?;
        wp[j] = w[j];
        let fd = (up - dn) / (2.0 * FD_STEP);
        worst = worst.max((g[j] - fd).abs());
        scale = scale.max(fd.abs());
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// Analytic gradients of every node type against central differences on
/// random instances with N in 3..=8, and both expected gradients against
/// their Monte-Carlo estimates at N in {5, 10, 20}, `p_e ∈ {0.5, 1, 2}/N`.
pub fn gradcheck(instances: usize, mc_reps: usize, seed: u64) -> Result<GradCheckReport> {
    use crate::grad::{
        expected_grad_gaussian, expected_xor_grad_bernoulli, naive_product_grad, naive_product_risk, ne_product_grad, ne_product_risk,
        sum_grad, sum_risk, xor_grad, xor_risk,
    };
    use crate::rng::{stream, TAG_EVAL};
    use crate::stats::{familywise_z, mc_expected_grad_gaussian, mc_expected_gradient, McEstimate};
    use rand::Rng;

    let kinds: [(NodeKind, RiskFn, GradFn); 4] = [
        (NodeKind::Sum, sum_risk, sum_grad),
        (NodeKind::NaiveProduct, naive_product_risk, naive_product_grad),
        (NodeKind::NeProduct, ne_product_risk, ne_product_grad),
        (NodeKind::Xor, xor_risk, xor_grad),
    ];
    let mut fd = Vec::new();
    for (k, (kind, risk, grad)) in kinds.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = stream(seed, TAG_EVAL, k as u64, i as u64);
            let n = rng.random_range(3..=8usize);
            let m = 6;
            let binary = kind == NodeKind::Xor;
            let x = nalgebra::DMatrix::from_fn(m, n, |_, _| {
                if binary {
                    f64::from(u8::from(rng.random_bool(0.5)))
                } else {
                    rng.random_range(-1.5..1.5)
                }
            });
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let wt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            worst = worst.max(fd_rel_err(risk, grad, &x, &w, &wt)?);
        }
        fd.push(GradCheckRow {
            node: kind,
            instances,
            max_rel_err: worst,
        });
    }
    let fam = GaussianFamilyParams {
        mu0: 0.3,
        sigma0_sq: 0.04,
        mu1: 0.65,
        sigma1_sq: 0.06,
        p_w: 0.4,
    };
    let mut mc = Vec::new();
    for (i, n) in [5usize, 10, 20].into_iter().enumerate() {
        for (j, mult) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            let p_e = mult / n as f64;
            let idx = (i * 3 + j) as u64;
            let mut rng = stream(seed, TAG_EVAL, 100 + i as u64, j as u64);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let wt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            let est = mc_expected_gradient(&w, &wt, p_e, mc_reps, child_seed(seed, "gradcheck", idx))?;
            let exact = expected_xor_grad_bernoulli(&w, &wt, p_e)?;
            mc.push(McCheckRow {
                expectation: ExpectationKind::Bernoulli,
                n,
                p_e,
                reps: mc_reps,
                components: n,
                max_z: est.max_z(&exact),
                z_limit: familywise_z(MC_SE, n),
            });
            let w_i = rng.random_range(0.0..1.0);
            let mut max_z = 0.0f64;
            for (t, w_true_i) in [0.0, 1.0].into_iter().enumerate() {
                let s = child_seed(seed, "gradcheck-gaussian", 2 * idx + t as u64);
                let (mean, se) = mc_expected_grad_gaussian(&fam, p_e, n, w_i, w_true_i, mc_reps, s)?;
                let exact = expected_grad_gaussian(&fam, p_e, n, w_i, w_true_i)?;
                let single = McEstimate {
                    mean: vec![mean],
                    std_err: vec![se],
                    reps: mc_reps,
                };
                max_z = max_z.max(single.max_z(&[exact]));
            }
            mc.push(McCheckRow {
                expectation: ExpectationKind::Gaussian,
                n,
                p_e,
                reps: mc_reps,
                components: 2,
                max_z,
                z_limit: familywise_z(MC_SE, 2),
            });
        }
    }
    Ok(GradCheckReport { fd, mc })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, value: f64, conv: Option<u64>, failed: bool) -> SweepRow {
        SweepRow {
            n,
            value,
            scaled: value * n as f64,
            replica: 0,
            p: 1,
            m: 1,
            alpha: 0.1,
            p_e: value,
            convergence_step: conv,
            steps_run: conv.unwrap_or(100),
            initial_l1: 0.5,
            final_l1: if failed { 0.49 } else { 0.2 },
            diverged: false,
            stalled: false,
            reduction_failed: failed,
        }
    }

    #[test]
    fn markers_follow_definitions() {
        let rows = vec![
            row(10, 0.01, Some(50), false),
            row(10, 0.02, Some(30), false),
            row(10, 0.04, Some(40), false),
            row(10, 0.08, None, false),
            row(10, 0.16, None, true),
        ];
        let m = markers_from_rows(SweepAxis::Pe, &rows);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].best, Some(0.02));
        assert_eq!(m[0].best_steps, Some(30.0));
        assert_eq!(m[0].limit, Some(0.16));
        assert_eq!(m[0].nonconv_limit, Some(0.08));
        let a = markers_from_rows(SweepAxis::Alpha, &rows);
        assert_eq!(a[0].limit, Some(0.08));
    }

    #[test]
    fn no_convergence_means_no_markers() {
        let rows = vec![row(100, 0.9, None, true)];
        let m = markers_from_rows(SweepAxis::Pe, &rows);
        assert_eq!(m[0].best, None);
        assert_eq!(m[0].limit, Some(0.9));
    }

    #[test]
    fn exact_power_law_fit() {
        let xs = [10.0, 30.0, 100.0, 300.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 2.0 * x.powf(-1.0)).collect();
        let f = log_log_fit(&xs, &ys).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!(f.slope_se < 1e-12);
        assert!((f.intercept - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_steps_cover_run() {
        assert_eq!(snapshot_steps(90, 10), vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(snapshot_steps(3, 10), vec![0, 1, 2, 3]);
    }
}
