//! Fully connected ReLU network trained with plain SGD on MSE, used as a
//! baseline for generalization from partial truth-table observations.
//!
//! Inputs are presented in bipolar form `x = 1 - 2b`; the output is a single
//! linear unit regressed onto the parity label in {0, 1}.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SparseBatch;
use crate::error::{check_len, LabError, Result};
use crate::rng::{stream, TAG_BATCH, TAG_INIT};
use crate::trainer::{init_weights, row_index, sgd_step_unit, MAX_TABLE_N};

/// How training rows are drawn from the truth table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Bits i.i.d. Bernoulli(`p_e`).
    Bernoulli { p_e: f64 },
    /// Rows uniform over all 2^N inputs.
    Uniform,
}

impl Sampling {
    pub fn bit_probability(&self) -> f64 {
        match self {
            Sampling::Bernoulli { p_e } => *p_e,
            Sampling::Uniform => 0.5,
        }
    }
}

/// Batch for `replica` at `step`; shared by every model trained on the same
/// data so their coverage curves coincide.
pub fn table_batch(n: usize, m: usize, sampling: Sampling, seed: u64, replica: u64, step: u64) -> Result<SparseBatch> {
    let mut rng = stream(seed, TAG_BATCH, replica, step);
    SparseBatch::sample(n, m, sampling.bit_probability(), &mut rng)
}

/// Multilayer perceptron with ReLU hidden layers and a linear scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(n_in: usize, hidden: &[usize], seed: u64, replica: u64) -> Result<Self> {
        if n_in == 0 || hidden.contains(&0) {
            return Err(LabError::Config("layer sizes must be positive".into()));
        }
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = stream(seed, TAG_INIT, replica, 1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let d = Normal::new(0.0, std).map_err(|e| LabError::Domain(e.to_string()))?;
            weights.push((0..fan_in * fan_out).map(|_| d.sample(&mut rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { sizes, weights, biases })
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn forward_cached(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) -> f64 {
        acts.resize(self.sizes.len(), Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let last = self.sizes.len() - 2;
        for l in 0..=last {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (prev, rest) = acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            let w = &self.weights[l];
            for o in 0..fo {
                let row = &w[o * fi..(o + 1) * fi];
                let mut s = self.biases[l][o];
                for (wi, xi) in row.iter().zip(input) {
                    s += wi * xi;
                }
                out.push(if l < last { s.max(0.0) } else { s });
            }
        }
        acts[last + 1][0]
    }

    /// Network output for a real input vector.
    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut acts = Vec::new();
        self.forward_cached(x, &mut acts)
    }

    /// Output for a binary row given by its active indices.
    pub fn forward_binary(&self, row: &[u32]) -> f64 {
        let mut x = vec![1.0; self.sizes[0]];
        for &i in row {
            x[i as usize] = -1.0;
        }
        self.forward(&x)
    }

    /// One SGD step on `(1/M) Σ (f(x_m) - y_m)²`; returns the loss before the
    /// update.
    pub fn sgd_step(&mut self, xs: &[Vec<f64>], ys: &[f64], lr: f64) -> Result<f64> {
        check_len("label count", xs.len(), ys.len())?;
        if xs.is_empty() {
            return Err(LabError::InsufficientData { needed: 1, got: 0 });
        }
        let layers = self.sizes.len() - 1;
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut acts = Vec::new();
        let mut loss = 0.0;
        let scale = 2.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            check_len("input width", self.sizes[0], x.len())?;
            let out = self.forward_cached(x, &mut acts);
            let err = out - y;
            loss += err * err;
            let mut delta = vec![scale * err];
            for l in (0..layers).rev() {
                let fi = self.sizes[l];
                let input = &acts[l];
                for (o, d) in delta.iter().enumerate() {
                    gb[l][o] += d;
                    let g = &mut gw[l][o * fi..(o + 1) * fi];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                if l == 0 {
                    break;
                }
                let w = &self.weights[l];
                let mut next = vec![0.0; fi];
                for (o, d) in delta.iter().enumerate() {
                    for (i, nv) in next.iter_mut().enumerate() {
                        *nv += d * w[o * fi + i];
                    }
                }
                // ReLU derivative of the hidden activations feeding layer l.
                for (nv, a) in next.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *nv = 0.0;
                    }
                }
                delta = next;
            }
        }
        for l in 0..layers {
            for (w, g) in self.weights[l].iter_mut().zip(&gw[l]) {
                *w -= lr * g;
            }
            for (b, g) in self.biases[l].iter_mut().zip(&gb[l]) {
                *b -= lr * g;
            }
        }
        let loss = loss / xs.len() as f64;
        if !loss.is_finite() {
            return Err(LabError::Numeric("MLP loss is not finite".into()));
        }
        Ok(loss)
    }
}

/// Data and optimiser settings shared by the generalization runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub m: usize,
    /// Learning rate.
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub replica: u64,
    pub sampling: Sampling,
    /// Evaluate accuracies every this many steps.
    pub eval_every: u64,
}

impl GenConfig {
    fn validate(&self, support: &[u8]) -> Result<()> {
        check_len("support length", self.n, support.len())?;
        if self.n > MAX_TABLE_N {
            return Err(LabError::Domain(format!("truth table needs N <= {MAX_TABLE_N}, got {}", self.n)));
        }
        if self.eval_every == 0 || self.m == 0 || self.n == 0 {
            return Err(LabError::Config("n, m and eval_every must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(LabError::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Accuracy and coverage at one evaluation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub step: u64,
    /// Accuracy over the truth-table entries seen so far.
    pub train_acc: f64,
    /// Accuracy over the whole truth table.
    pub val_acc: f64,
    /// Fraction of the truth table seen so far.
    pub coverage: f64,
    pub loss: f64,
}

/// Tracks which truth-table entries have been observed.
#[derive(Debug, Clone)]
pub struct CoverageTracker {
    seen: Vec<bool>,
    count: usize,
}

impl CoverageTracker {
    pub fn new(n: usize) -> Result<Self> {
        if n > MAX_TABLE_N {
            return Err(LabError::Domain(format!("coverage needs N <= {MAX_TABLE_N}, got {n}")));
        }
        Ok(Self {
            seen: vec![false; 1 << n],
            count: 0,
        })
    }

    pub fn observe(&mut self, batch: &SparseBatch) {
        for row in batch.rows() {
            let idx = row_index(row);
            if !self.seen[idx] {
                self.seen[idx] = true;
                self.count += 1;
            }
        }
    }

    pub fn coverage(&self) -> f64 {
        self.count as f64 / self.seen.len() as f64
    }

    /// Indices of the observed entries.
    pub fn seen(&self) -> impl Iterator<Item = usize> + '_ {
        self.seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i)
    }
}

/// Accuracy of `predict(index) -> label` over `entries` against the parity of
/// `mask`.
pub fn accuracy_over<I, F>(entries: I, mask: usize, predict: F) -> f64
where
    I: Iterator<Item = usize>,
    F: Fn(usize) -> u8,
{
    let (mut ok, mut total) = (0usize, 0usize);
    for idx in entries {
        let truth = ((idx & mask).count_ones() & 1) as u8;
        ok += usize::from(predict(idx) == truth);
        total += 1;
    }
    if total == 0 {
        f64::NAN
    } else {
        ok as f64 / total as f64
    }
}

/// Binary support as a bit mask.
pub fn support_mask(support: &[u8]) -> usize {
    support
        .iter()
        .enumerate()
        .fold(0, |m, (i, &t)| if t == 1 { m | (1 << i) } else { m })
}

fn bipolar_of_index(idx: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if idx >> i & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

fn labels(batch: &SparseBatch, mask: usize) -> Vec<f64> {
    batch
        .rows()
        .map(|row| f64::from((row_index(row) & mask).count_ones() & 1))
        .collect()
}

/// Trains an MLP with the given hidden layer widths on the parity of
/// `support` and records accuracies and coverage.
pub fn mlp_train(cfg: &GenConfig, hidden: &[usize], support: &[u8]) -> Result<Vec<GenRow>> {
    cfg.validate(support)?;
    let mut net = Mlp::new(cfg.n, hidden, cfg.seed, cfg.replica)?;
    let mut cover = CoverageTracker::new(cfg.n)?;
    let mask = support_mask(support);
    let size = 1usize << cfg.n;
    let mut out = Vec::new();
    let eval = |net: &Mlp, cover: &CoverageTracker, step: u64, loss: f64| {
        let predict = |idx: usize| u8::from(net.forward(&bipolar_of_index(idx, cfg.n)) >= 0.5);
        GenRow {
            step,
            train_acc: accuracy_over(cover.seen(), mask, predict),
            val_acc: accuracy_over(0..size, mask, predict),
            coverage: cover.coverage(),
            loss,
        }
    };
    out.push(eval(&net, &cover, 0, f64::NAN));
    for step in 1..=cfg.steps {
        let batch = table_batch(cfg.n, cfg.m, cfg.sampling, cfg.seed, cfg.replica, step)?;
        cover.observe(&batch);
        let xs: Vec<Vec<f64>> = (0..batch.m())
            .map(|r| bipolar_of_index(row_index(batch.row(r)), cfg.n))
            .collect();
        let loss = net.sgd_step(&xs, &labels(&batch, mask), cfg.lr)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            out.push(eval(&net, &cover, step, loss));
        }
    }
    Ok(out)
}

/// Label predicted by an XOR node for the truth-table entry `idx`.
fn node_predict(a: &[f64], idx: usize) -> u8 {
    let mut prod = 1.0;
    for (i, ai) in a.iter().enumerate() {
        if idx >> i & 1 == 1 {
            prod *= ai;
        }
    }
    u8::from(0.5 * (1.0 - prod) >= 0.5)
}

/// Trains one XOR node from the Normal(1/2, 1/4) initialisation on the same
/// batches [`mlp_train`] would see and records accuracies and coverage.
///
/// A node whose gradient overflows stops updating and reports infinite loss
/// for the remaining steps.
pub fn node_train(cfg: &GenConfig, support: &[u8]) -> Result<Vec<GenRow>> {
    cfg.validate(support)?;
    let mut w = init_weights(cfg.n, 0.5, 0.25, cfg.seed, cfg.replica)?;
    let mut grad = vec![0.0; cfg.n];
    let mut cover = CoverageTracker::new(cfg.n)?;
    let mask = support_mask(support);
    let size = 1usize << cfg.n;
    let mut out = Vec::new();
    let eval = |w: &[f64], cover: &CoverageTracker, step: u64, loss: f64| {
        let a: Vec<f64> = w.iter().map(|wi| 1.0 - 2.0 * wi).collect();
        GenRow {
            step,
            train_acc: accuracy_over(cover.seen(), mask, |idx| node_predict(&a, idx)),
            val_acc: accuracy_over(0..size, mask, |idx| node_predict(&a, idx)),
            coverage: cover.coverage(),
            loss,
        }
    };
    out.push(eval(&w, &cover, 0, f64::NAN));
    let mut diverged = false;
    for step in 1..=cfg.steps {
        let batch = table_batch(cfg.n, cfg.m, cfg.sampling, cfg.seed, cfg.replica, step)?;
        cover.observe(&batch);
        let loss = if diverged {
            f64::INFINITY
        } else {
            match sgd_step_unit(&mut w, &batch, support, cfg.lr, &mut grad) {
                Ok(loss) => loss,
                Err(LabError::Numeric(_)) => {
                    diverged = true;
                    f64::INFINITY
                }
                Err(e) => return Err(e),
            }
        };
        if step % cfg.eval_every == 0 || step == cfg.steps {
            out.push(eval(&w, &cover, step, loss));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = Mlp::new(3, &[4, 3], 11, 0).unwrap();
        let xs = vec![vec![1.0, -1.0, 1.0], vec![-1.0, -1.0, 1.0]];
        let ys = vec![1.0, 0.0];
        let loss_at = |net: &Mlp| {
            xs.iter()
                .zip(&ys)
                .map(|(x, y)| (net.forward(x) - y).powi(2))
                .sum::<f64>()
                / 2.0
        };
        let base = net.clone();
        let lr = 1e-3;
        net.sgd_step(&xs, &ys, lr).unwrap();
        let h = 1e-6;
        for l in 0..base.weights.len() {
            for k in 0..base.weights[l].len() {
                let mut p = base.clone();
                p.weights[l][k] += h;
                let mut q = base.clone();
                q.weights[l][k] -= h;
                let fd = (loss_at(&p) - loss_at(&q)) / (2.0 * h);
                let analytic = (base.weights[l][k] - net.weights[l][k]) / lr;
                assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "layer {l} weight {k}: {fd} vs {analytic}");
            }
        }
    }
}
