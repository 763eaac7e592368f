//! `parity-lab`: runs one experiment and writes its CSV tables plus a
//! `manifest.json` with the resolved configuration, seed, versions, wall
//! time and a summary of the derived markers.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use parity_lab::config::{parse_config_str, ExperimentConfig, ExperimentKind};
use parity_lab::experiments::{
    bounds_table, gen_csv_rows, gradcheck, qq_rows, run_effective_lr, run_gaussianity, run_generalization,
    run_pw_invariance, run_theory_vs_empirical, sweep_alpha, sweep_pe, trajectory, write_rows, Snapshot,
    SweepResult,
};
use parity_lab::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "parity-lab", version, about = "Subset-parity learning experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON or TOML configuration; keys override the experiment's preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Problem size; replaces the size list of sweeps.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Learning rate.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Input sparsity.
    #[arg(long, global = true)]
    pe: Option<f64>,
    /// Batch size.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Step budget.
    #[arg(long, global = true)]
    steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train P units once and write the trace.
    Train,
    /// Sweep the input sparsity at every problem size.
    SweepPe,
    /// Sweep the learning rate at every problem size.
    SweepAlpha,
    /// Family Q-Q correlations and symmetry of a single large unit.
    Gaussianity,
    /// Family-moment trajectories across oracle densities.
    PwInvariance,
    /// SGD family moments against the two-family recurrence.
    TheoryVsEmpirical,
    /// Product node against an MLP on partial truth tables.
    Generalization,
    /// Steps to convergence across matched effective learning rates.
    EffectiveLr,
    /// Print and export the learning-rate bounds table.
    Bounds,
    /// Check analytic gradients against finite differences and Monte Carlo.
    Gradcheck {
        /// Random instances per node type.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Monte-Carlo samples per expectation check.
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
    },
}

impl Command {
    fn kind(&self) -> Option<ExperimentKind> {
        Some(match self {
            Command::Train => ExperimentKind::Train,
            Command::SweepPe => ExperimentKind::SweepPe,
            Command::SweepAlpha => ExperimentKind::SweepAlpha,
            Command::Gaussianity => ExperimentKind::Gaussianity,
            Command::PwInvariance => ExperimentKind::PwInvariance,
            Command::TheoryVsEmpirical => ExperimentKind::TheoryVsEmpirical,
            Command::Generalization => ExperimentKind::Generalization,
            Command::EffectiveLr => ExperimentKind::EffectiveLr,
            Command::Bounds | Command::Gradcheck { .. } => return None,
        })
    }
}

/// Loads the preset or configuration file of `kind` and applies the flags.
fn resolve(kind: ExperimentKind, o: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = parse_config_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if cfg.experiment != kind {
                bail!("{} configures `{}`, not `{kind}`", path.display(), cfg.experiment);
            }
            cfg
        }
        None => ExperimentConfig::preset(kind),
    };
    let reject = |flag: &str, why: &str| -> anyhow::Result<()> { bail!("--{flag} does not apply to `{kind}`: {why}") };
    if let Some(seed) = o.seed {
        cfg.base.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.output = out.display().to_string();
    }
    match kind {
        ExperimentKind::SweepPe if o.pe.is_some() => reject("pe", "the sweep varies it")?,
        ExperimentKind::SweepAlpha if o.alpha.is_some() => reject("alpha", "the sweep varies it")?,
        ExperimentKind::EffectiveLr if o.alpha.is_some() || o.pe.is_some() => {
            reject("alpha/--pe", "set `points` in a configuration file")?
        }
        _ => {}
    }
    if let Some(n) = o.n {
        cfg.base.n = n;
        cfg.ns = vec![n];
        cfg.points.retain(|p| p.n == n);
        if kind == ExperimentKind::EffectiveLr && cfg.points.is_empty() {
            bail!("no effective-rate point has N = {n}");
        }
    }
    if let Some(a) = o.alpha {
        cfg.base.alpha = a;
        cfg.alpha_over_alpha2 = None;
    }
    if let Some(p) = o.pe {
        cfg.base.p_e = p;
        cfg.pe_times_n = None;
    }
    if kind == ExperimentKind::Generalization {
        if let Some(m) = o.m {
            cfg.generalization.m = m;
        }
        if let Some(s) = o.steps {
            cfg.generalization.steps = s;
        }
    } else {
        if let Some(m) = o.m {
            cfg.base.m = m;
            cfg.points.iter_mut().for_each(|p| p.m = m);
        }
        if let Some(s) = o.steps {
            cfg.base.steps = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Collects the files an experiment writes.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let w = self.create(name)?;
        write_rows(w, rows)?;
        Ok(())
    }
}

/// A snapshot tagged with the oracle density of its run.
#[derive(Serialize)]
struct PwSnapshotRow {
    p_w: f64,
    step: u64,
    mu0: Option<f64>,
    sig0_sq: Option<f64>,
    mu1: Option<f64>,
    sig1_sq: Option<f64>,
    n0: usize,
    n1: usize,
}

impl PwSnapshotRow {
    fn new(p_w: f64, s: &Snapshot) -> Self {
        Self {
            p_w,
            step: s.step,
            mu0: s.mu0,
            sig0_sq: s.sig0_sq,
            mu1: s.mu1,
            sig1_sq: s.sig1_sq,
            n0: s.n0,
            n1: s.n1,
        }
    }
}

fn sweep_outputs(out: &mut Outputs, r: &SweepResult) -> anyhow::Result<Value> {
    out.rows("runs.csv", &r.rows)?;
    out.rows("distances.csv", &r.distances)?;
    out.rows("markers.csv", &r.markers)?;
    out.rows("overlays.csv", &r.overlays)?;
    for m in &r.markers {
        println!(
            "N={:>6}  best={}  limit={}  nonconv_limit={}",
            m.n,
            fmt_opt(m.best),
            fmt_opt(m.limit),
            fmt_opt(m.nonconv_limit)
        );
    }
    Ok(json!({
        "markers": r.markers,
        "fit_best": r.fit_best,
        "fit_limit": r.fit_limit,
        "overlays": r.overlays,
    }))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Runs a configured experiment; returns its summary.
fn run_experiment(cfg: &ExperimentConfig, out: &mut Outputs) -> anyhow::Result<Value> {
    Ok(match cfg.experiment {
        ExperimentKind::Train => {
            let t = cfg.train_config_for(cfg.base.n)?;
            let trace = train(&t)?;
            trace.write_csv(out.create("trace.csv")?)?;
            println!(
                "converged at {}  final L1 {:.6}  diverged {}",
                trace.convergence_step.map_or("-".into(), |s| s.to_string()),
                trace.final_l1,
                trace.diverged
            );
            json!({
                "train": t,
                "convergence_step": trace.convergence_step,
                "steps_run": trace.steps_run,
                "initial_l1": trace.initial_l1,
                "final_l1": trace.final_l1,
                "diverged": trace.diverged,
                "stalled": trace.stalled,
            })
        }
        ExperimentKind::SweepPe => sweep_outputs(out, &sweep_pe(cfg)?)?,
        ExperimentKind::SweepAlpha => sweep_outputs(out, &sweep_alpha(cfg)?)?,
        ExperimentKind::Gaussianity => {
            let r = run_gaussianity(cfg)?;
            out.rows("snapshots.csv", &r.snapshots)?;
            r.trace.write_csv(out.create("trace.csv")?)?;
            out.rows("qq_family0.csv", &qq_rows(&r.final_qq0))?;
            out.rows("qq_family1.csv", &qq_rows(&r.final_qq1))?;
            println!(
                "families gaussian: {}  symmetric: {}",
                r.families_gaussian(),
                r.symmetric()
            );
            json!({
                "families_gaussian": r.families_gaussian(),
                "symmetric": r.symmetric(),
                "qq_threshold": r.qq_threshold,
                "snapshots": r.snapshots,
            })
        }
        ExperimentKind::PwInvariance => {
            let r = run_pw_invariance(cfg)?;
            let rows: Vec<PwSnapshotRow> = r
                .runs
                .iter()
                .flat_map(|run| run.snapshots.iter().map(move |s| PwSnapshotRow::new(run.p_w, s)))
                .collect();
            out.rows("pw_snapshots.csv", &rows)?;
            println!(
                "max |dmu| {:.5}  mean band ratio {:.3}  variance band ratio {:.3}",
                r.max_mu_dev, r.max_mu_ratio, r.max_var_ratio
            );
            json!({
                "max_mu_dev": r.max_mu_dev,
                "max_mu_ratio": r.max_mu_ratio,
                "max_var_ratio": r.max_var_ratio,
                "within_band": r.within_band(),
            })
        }
        ExperimentKind::TheoryVsEmpirical => {
            let r = run_theory_vs_empirical(cfg)?;
            out.rows("theory.csv", &r.rows)?;
            println!(
                "alpha {:.4}  max |dmu| {:.5}  variance ratio emp {:.5} theory {:.5}",
                r.alpha, r.max_mu_dev, r.emp_var_ratio, r.th_var_ratio
            );
            json!({
                "alpha": r.alpha,
                "n": r.n,
                "max_mu_dev": r.max_mu_dev,
                "emp_var_ratio": r.emp_var_ratio,
                "th_var_ratio": r.th_var_ratio,
                "ratio_steps": r.ratio_steps,
            })
        }
        ExperimentKind::Generalization => {
            let r = run_generalization(cfg)?;
            out.rows("curves.csv", &gen_csv_rows(&r))?;
            out.rows("summary.csv", &r.summaries)?;
            for s in &r.summaries {
                println!(
                    "{}: node full at coverage {}  mlp val there {}  mlp val final {:.3}",
                    s.regime,
                    fmt_opt(s.node_full_coverage),
                    fmt_opt(s.mlp_val_at_full),
                    s.mlp_val_final
                );
            }
            json!({ "summaries": r.summaries })
        }
        ExperimentKind::EffectiveLr => {
            let r = run_effective_lr(cfg)?;
            out.rows("runs.csv", &r.rows)?;
            for g in &r.groups {
                println!("alpha*p_e={:.6}  spread {}", g.effective, fmt_opt(g.spread));
            }
            json!({ "groups": r.groups })
        }
    })
}

fn write_manifest(dir: &Path, manifest: &Value) -> anyhow::Result<()> {
    let path = dir.join("manifest.json");
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), manifest)?;
    Ok(())
}

fn versions() -> Value {
    json!({ "parity-lab": parity_lab::VERSION, "parity-lab-cli": env!("CARGO_PKG_VERSION") })
}

fn run_bounds(o: &Overrides, start: Instant) -> anyhow::Result<()> {
    let ns = match o.n {
        Some(n) => vec![n],
        None => vec![7, 10, 17, 18, 30, 42, 43, 100, 300, 1_000, 10_000],
    };
    let rows = bounds_table(&ns, o.alpha)?;
    println!(
        "{:>7} {:>12} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
        "N", "alpha0", "alpha1", "alpha2", "epsilon", "phi_min", "phi_max", "delta_max"
    );
    for r in &rows {
        println!(
            "{:>7} {:>12.4} {:>12.4} {:>12.4} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            r.n, r.alpha0, r.alpha1, r.alpha2, r.epsilon, r.phi_min, r.phi_max, r.delta_max
        );
    }
    let dir = o.out.clone().unwrap_or_else(|| PathBuf::from("results/bounds"));
    let mut out = Outputs::new(&dir)?;
    out.rows("bounds.csv", &rows)?;
    if let (Some(n), Some(steps)) = (o.n, o.steps) {
        let alpha = match o.alpha {
            Some(a) => a,
            None => 0.9 * rows[0].alpha2,
        };
        out.rows("trajectory.csv", &trajectory(n, alpha, steps))?;
    }
    write_manifest(
        &dir,
        &json!({
            "experiment": "bounds",
            "config": { "ns": ns, "alpha": o.alpha, "steps": o.steps },
            "versions": versions(),
            "wall_time_s": start.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )
}

fn run_gradcheck(o: &Overrides, instances: usize, reps: usize, start: Instant) -> anyhow::Result<bool> {
    let seed = o.seed.unwrap_or(1);
    let r = gradcheck(instances, reps, seed)?;
    let mut ok = true;
    for row in &r.fd {
        let pass = row.passed();
        ok &= pass;
        println!(
            "fd  {:<14} instances={:<5} max_rel_err={:.3e}  {}",
            format!("{:?}", row.node),
            row.instances,
            row.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    for row in &r.mc {
        let pass = row.passed();
        ok &= pass;
        println!(
            "mc  {:<10} N={:<3} p_e={:<8.4} reps={:<7} max_z={:.3} limit={:.3}  {}",
            format!("{:?}", row.expectation),
            row.n,
            row.p_e,
            row.reps,
            row.max_z,
            row.z_limit,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let dir = o.out.clone().unwrap_or_else(|| PathBuf::from("results/gradcheck"));
    let mut out = Outputs::new(&dir)?;
    out.rows("fd.csv", &r.fd)?;
    out.rows("mc.csv", &r.mc)?;
    write_manifest(
        &dir,
        &json!({
            "experiment": "gradcheck",
            "seed": seed,
            "config": { "instances": instances, "reps": reps },
            "versions": versions(),
            "wall_time_s": start.elapsed().as_secs_f64(),
            "summary": { "passed": ok },
            "outputs": out.files,
        }),
    )?;
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let o = &cli.opts;
    if let Some(t) = o.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let start = Instant::now();
    let Some(kind) = cli.command.kind() else {
        if o.config.is_some() {
            bail!("--config applies only to experiment subcommands");
        }
        return match cli.command {
            Command::Gradcheck { instances, reps } => {
                if run_gradcheck(o, instances, reps, start)? {
                    Ok(())
                } else {
                    bail!("gradient checks failed")
                }
            }
            _ => run_bounds(o, start),
        };
    };
    let cfg = resolve(kind, o)?;
    let dir = PathBuf::from(&cfg.output);
    let mut out = Outputs::new(&dir)?;
    let summary = run_experiment(&cfg, &mut out)?;
    write_manifest(
        &dir,
        &json!({
            "experiment": kind.name(),
            "seed": cfg.base.seed,
            "config": cfg,
            "versions": versions(),
            "threads": rayon::current_num_threads(),
            "wall_time_s": start.elapsed().as_secs_f64(),
            "summary": summary,
            "outputs": out.files,
        }),
    )?;
    println!("wrote {} (manifest.json)", dir.display());
    Ok(())
}
