//! Experiment configuration files.
//!
//! A configuration is a key-value document in JSON or TOML form. Only the
//! `experiment` key is required; every other key overrides the calibrated
//! preset of that experiment, and nested tables are merged key by key.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::trainer::TrainConfig;

/// The experiments the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    SweepPe,
    SweepAlpha,
    Gaussianity,
    PwInvariance,
    TheoryVsEmpirical,
    Generalization,
    EffectiveLr,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Train,
        ExperimentKind::SweepPe,
        ExperimentKind::SweepAlpha,
        ExperimentKind::Gaussianity,
        ExperimentKind::PwInvariance,
        ExperimentKind::TheoryVsEmpirical,
        ExperimentKind::Generalization,
        ExperimentKind::EffectiveLr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::SweepPe => "sweep-pe",
            ExperimentKind::SweepAlpha => "sweep-alpha",
            ExperimentKind::Gaussianity => "gaussianity",
            ExperimentKind::PwInvariance => "pw-invariance",
            ExperimentKind::TheoryVsEmpirical => "theory-vs-empirical",
            ExperimentKind::Generalization => "generalization",
            ExperimentKind::EffectiveLr => "effective-lr",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| LabError::Config(format!("unknown experiment `{s}`")))
    }
}

/// Sweep axis values in the axis's natural unit (`p_e·N` for sparsity
/// sweeps, `α/N` for learning-rate sweeps). Explicit `values` take
/// precedence over the log-spaced range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    #[serde(default)]
    pub values: Vec<f64>,
}

impl Grid {
    pub fn log(lo: f64, hi: f64, count: usize) -> Self {
        Self {
            lo,
            hi,
            count,
            values: Vec::new(),
        }
    }

    /// Ascending grid points.
    pub fn points(&self) -> Vec<f64> {
        if !self.values.is_empty() {
            let mut v = self.values.clone();
            v.sort_by(f64::total_cmp);
            return v;
        }
        log_space(self.lo, self.hi, self.count)
    }

    fn validate(&self) -> Result<()> {
        if !self.values.is_empty() {
            if self.values.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok(());
            }
            return Err(LabError::Config("grid values must be finite and positive".into()));
        }
        if !(self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()) || self.count == 0 {
            return Err(LabError::Config(format!(
                "grid needs 0 < lo <= hi and count >= 1, got lo={} hi={} count={}",
                self.lo, self.hi, self.count
            )));
        }
        Ok(())
    }
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// Settings of the product-node versus MLP comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenOptions {
    pub hidden: Vec<usize>,
    pub node_lr: f64,
    pub mlp_lr: f64,
    pub m: usize,
    pub steps: u64,
    pub eval_every: u64,
    /// Also run the uniform-sampling regime.
    pub uniform: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 32],
            node_lr: 3.0,
            mlp_lr: 0.01,
            m: 100,
            steps: 400,
            eval_every: 1,
            uniform: true,
        }
    }
}

/// One `(N, α, p_e, M)` point of the effective learning-rate study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectivePoint {
    pub n: usize,
    pub alpha: f64,
    pub p_e: f64,
    pub m: usize,
}

/// A fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Training settings shared by every run of the experiment.
    pub base: TrainConfig,
    /// Problem sizes of the scaling sweeps.
    pub ns: Vec<usize>,
    pub grid: Grid,
    /// Learning-rate sweeps start at this fraction of `α₂` when `α₂ > 0`,
    /// and at `grid.lo · N` otherwise.
    pub alpha2_fraction: f64,
    /// When set, sweeps use `P = max(1, ⌊units_budget / N⌋)` units.
    pub units_budget: Option<usize>,
    /// When set, the learning rate is this multiple of `α₂(N)`.
    pub alpha_over_alpha2: Option<f64>,
    /// When set, the sparsity is this multiple of `1/N`.
    pub pe_times_n: Option<f64>,
    pub replicas: usize,
    /// Output directory.
    pub output: String,
    /// Keep every `trace_every`-th distance sample of sweep runs.
    pub trace_every: u64,
    pub snapshots: usize,
    pub qq_threshold: f64,
    /// Symmetry and invariance bands are this many `1/√count` units.
    pub band_sigmas: f64,
    pub pw_values: Vec<f64>,
    pub generalization: GenOptions,
    pub points: Vec<EffectivePoint>,
}

impl ExperimentConfig {
    /// Calibrated desk-scale defaults of `kind`.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = TrainConfig {
            n: 100,
            p: 10,
            m: 100,
            p_e: 0.01,
            p_w: 0.5,
            alpha: 1.0,
            steps: 25_000,
            seed: 1,
            log_every: 100,
            ..TrainConfig::default()
        };
        let mut cfg = Self {
            experiment: kind,
            base,
            ns: vec![100],
            grid: Grid::log(1.0, 1.0, 1),
            alpha2_fraction: 0.1,
            units_budget: None,
            alpha_over_alpha2: None,
            pe_times_n: Some(1.0),
            replicas: 1,
            output: format!("results/{}", kind.name()),
            trace_every: 100,
            snapshots: 10,
            qq_threshold: 0.995,
            band_sigmas: 5.0,
            pw_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            generalization: GenOptions::default(),
            points: Vec::new(),
        };
        match kind {
            ExperimentKind::Train => {}
            ExperimentKind::SweepPe => {
                cfg.ns = vec![10, 30, 100, 300];
                cfg.grid = Grid::log(0.3, 15.0, 16);
                cfg.units_budget = Some(1000);
                cfg.pe_times_n = None;
                cfg.base.alpha = 0.1;
                cfg.base.m = 100;
                cfg.base.steps = 25_000;
            }
            ExperimentKind::SweepAlpha => {
                cfg.ns = vec![10, 30, 100, 300];
                cfg.grid = Grid::log(0.002, 4.0, 16);
                cfg.units_budget = Some(1000);
                cfg.base.m = 50_000;
                cfg.base.steps = 30_000;
                cfg.base.patience = Some(500);
            }
            ExperimentKind::Gaussianity | ExperimentKind::PwInvariance => {
                cfg.base.n = 10_000;
                cfg.base.p = 1;
                cfg.base.m = 10_000;
                cfg.base.alpha = 10.0;
                cfg.base.steps = 2_500;
                cfg.base.stop_at_convergence = false;
                cfg.base.log_every = 25;
            }
            ExperimentKind::TheoryVsEmpirical => {
                cfg.base.n = 1_000;
                cfg.base.p = 1;
                cfg.base.m = 100_000;
                cfg.base.steps = 1_000;
                cfg.base.stop_at_convergence = false;
                cfg.base.log_every = 1;
                cfg.alpha_over_alpha2 = Some(0.9);
            }
            ExperimentKind::Generalization => {
                cfg.base.n = 12;
                cfg.replicas = 50;
            }
            ExperimentKind::EffectiveLr => {
                cfg.units_budget = Some(1000);
                cfg.pe_times_n = None;
                cfg.points = vec![
                    EffectivePoint { n: 100, alpha: 1.0, p_e: 0.01, m: 1000 },
                    EffectivePoint { n: 100, alpha: 10.0, p_e: 0.001, m: 1000 },
                    EffectivePoint { n: 30, alpha: 0.3, p_e: 1.0 / 30.0, m: 1000 },
                    EffectivePoint { n: 10, alpha: 0.1, p_e: 0.1, m: 1000 },
                    EffectivePoint { n: 100, alpha: 0.5, p_e: 0.01, m: 1000 },
                    EffectivePoint { n: 30, alpha: 0.15, p_e: 1.0 / 30.0, m: 1000 },
                ];
            }
        }
        cfg
    }

    /// Training settings at problem size `n`, with the size-dependent
    /// overrides applied.
    pub fn train_config_for(&self, n: usize) -> Result<TrainConfig> {
        let mut t = self.base.clone();
        t.n = n;
        if let Some(budget) = self.units_budget {
            t.p = (budget / n).max(1);
        }
        if let Some(k) = self.pe_times_n {
            t.p_e = (k / n as f64).min(1.0);
        }
        if let Some(f) = self.alpha_over_alpha2 {
            let b = crate::dynamics::bounds(n, 0.0)?;
            if !(b.alpha2 > 0.0) {
                return Err(LabError::Config(format!("alpha2({n}) = {} is not positive", b.alpha2)));
            }
            t.alpha = f * b.alpha2;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        self.base.validate()?;
        self.grid.validate()?;
        if self.ns.is_empty() || self.ns.contains(&0) {
            return bad("ns must be a non-empty list of positive sizes".into());
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1".into());
        }
        if self.units_budget == Some(0) {
            return bad("units_budget must be positive".into());
        }
        for (name, v) in [
            ("alpha2_fraction", Some(self.alpha2_fraction)),
            ("alpha_over_alpha2", self.alpha_over_alpha2),
            ("pe_times_n", self.pe_times_n),
            ("band_sigmas", Some(self.band_sigmas)),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{name} = {v} must be finite and positive"));
                }
            }
        }
        if !(self.qq_threshold > 0.0 && self.qq_threshold < 1.0) {
            return bad(format!("qq_threshold = {} must lie in (0, 1)", self.qq_threshold));
        }
        if self.snapshots < 2 {
            return bad("snapshots must be at least 2".into());
        }
        if self.pw_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("pw_values must lie in [0, 1]".into());
        }
        let g = &self.generalization;
        if g.m == 0 || g.eval_every == 0 || g.steps == 0 || g.hidden.contains(&0) {
            return bad("generalization m, steps, eval_every and hidden sizes must be positive".into());
        }
        if !(g.node_lr.is_finite() && g.node_lr >= 0.0 && g.mlp_lr.is_finite() && g.mlp_lr >= 0.0) {
            return bad("generalization learning rates must be finite and non-negative".into());
        }
        for p in &self.points {
            let ok = p.n > 0 && p.m > 0 && p.alpha.is_finite() && p.alpha >= 0.0 && (0.0..=1.0).contains(&p.p_e);
            if !ok {
                return bad(format!("invalid effective-rate point {p:?}"));
            }
        }
        if self.experiment == ExperimentKind::EffectiveLr && self.points.is_empty() {
            return bad("effective-lr needs at least one point".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a JSON (leading `{`) or TOML document into a validated
/// configuration.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let doc: Value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text)?
    } else {
        toml::from_str(text).map_err(|e| LabError::Parse(e.to_string()))?
    };
    if !doc.is_object() {
        return Err(LabError::Config("configuration must be a table".into()));
    }
    let kind: ExperimentKind = match doc.get("experiment") {
        Some(Value::String(s)) => s.parse()?,
        Some(other) => return Err(LabError::Config(format!("`experiment` must be a string, got {other}"))),
        None => return Err(LabError::Config("missing `experiment` key".into())),
    };
    let mut merged = serde_json::to_value(ExperimentConfig::preset(kind))?;
    merge(&mut merged, doc);
    let cfg: ExperimentConfig = serde_json::from_value(merged)?;
    cfg.validate()?;
    Ok(cfg)
}
