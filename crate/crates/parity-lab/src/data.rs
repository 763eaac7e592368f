//! Seeded generation of sparse Bernoulli batches, one-hot datasets and oracle
//! supports.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_prob, LabError, Result};
use crate::rng::{stream, TAG_BATCH, TAG_ORACLE};

/// Binary `M × N` batch stored as the column indices of its ones, row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBatch {
    n: usize,
    p_e: f64,
    seed: u64,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl SparseBatch {
    /// Draws i.i.d. Bernoulli(`p_e`) bits from `rng`.
    ///
    /// Ones are located by geometric gap sampling over the flattened `M·N`
    /// index space, so the cost is proportional to the number of ones.
    pub fn sample<R: Rng + ?Sized>(n: usize, m: usize, p_e: f64, rng: &mut R) -> Result<Self> {
        check_prob("p_e", p_e)?;
        if n == 0 || m == 0 {
            return Err(LabError::Domain("batch dimensions must be positive".into()));
        }
        if n > u32::MAX as usize {
            return Err(LabError::Domain("N exceeds u32 range".into()));
        }
        let mut offsets = Vec::with_capacity(m + 1);
        let expected = (n as f64 * m as f64 * p_e.clamp(0.0, 1.0) * 1.05) as usize + 16;
        let mut indices = Vec::with_capacity(expected);
        offsets.push(0);
        if p_e >= 1.0 {
            for _ in 0..m {
                indices.extend(0..n as u32);
                offsets.push(indices.len());
            }
        } else if p_e <= 0.0 {
            offsets.resize(m + 1, 0);
        } else {
            // Gap to the next one is Geometric(p_e), drawn by inversion.
            let ln_q = (-p_e).ln_1p();
            let mut gap = || -> u64 {
                let u: f64 = 1.0 - rng.random::<f64>();
                let g = (u.ln() / ln_q).floor();
                if g >= u64::MAX as f64 {
                    u64::MAX
                } else {
                    g as u64
                }
            };
            let n64 = n as u64;
            let mut row = 0usize;
            let mut col = gap();
            loop {
                while col >= n64 && row < m {
                    col -= n64;
                    offsets.push(indices.len());
                    row += 1;
                }
                if row >= m {
                    break;
                }
                indices.push(col as u32);
                col = col.saturating_add(1).saturating_add(gap());
            }
            while row < m {
                offsets.push(indices.len());
                row += 1;
            }
        }
        Ok(Self {
            n,
            p_e,
            seed: 0,
            offsets,
            indices,
        })
    }

    /// Builds a batch from explicit rows of active indices.
    pub fn from_rows(n: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        for row in rows {
            let mut r = row.clone();
            r.sort_unstable();
            r.dedup();
            if let Some(&bad) = r.iter().find(|&&i| i as usize >= n) {
                return Err(LabError::Domain(format!("index {bad} out of range for N = {n}")));
            }
            indices.extend(r);
            offsets.push(indices.len());
        }
        if rows.is_empty() {
            return Err(LabError::Domain("batch must have at least one row".into()));
        }
        Ok(Self {
            n,
            p_e: f64::NAN,
            seed: 0,
            offsets,
            indices,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn p_e(&self) -> f64 {
        self.p_e
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Active column indices of row `r`, ascending.
    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.offsets.windows(2).map(|w| &self.indices[w[0]..w[1]])
    }

    /// Total number of ones.
    pub fn ones(&self) -> usize {
        self.indices.len()
    }

    /// Row `r` as a dense 0/1 vector.
    pub fn dense_row(&self, r: usize) -> Vec<u8> {
        let mut v = vec![0u8; self.n];
        for &i in self.row(r) {
            v[i as usize] = 1;
        }
        v
    }

    /// Dense `M × N` matrix with 0.0/1.0 entries.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.m(), self.n);
        for (r, row) in self.rows().enumerate() {
            for &i in row {
                d[(r, i as usize)] = 1.0;
            }
        }
        d
    }

    /// Writes every entry as a `m,i,bit` CSV row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["m", "i", "bit"])?;
        for r in 0..self.m() {
            let dense = self.dense_row(r);
            for (i, b) in dense.iter().enumerate() {
                wtr.serialize((r, i, b))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses a `m,i,bit` CSV. Missing entries are zero; `N` and `M` are taken
    /// from the largest indices present.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["m", "i", "bit"] {
            return Err(LabError::Parse(format!("unexpected header {headers:?}")));
        }
        let mut rows: Vec<Vec<u32>> = Vec::new();
        let mut n = 0usize;
        for rec in rdr.deserialize::<(u32, u32, u8)>() {
            let (m, i, bit) = rec?;
            if bit > 1 {
                return Err(LabError::Parse(format!("bit value {bit} is not binary")));
            }
            if m as usize >= 1 << 24 || i as usize >= 1 << 24 {
                return Err(LabError::Parse("batch coordinates too large".into()));
            }
            n = n.max(i as usize + 1);
            if rows.len() <= m as usize {
                rows.resize(m as usize + 1, Vec::new());
            }
            if bit == 1 {
                rows[m as usize].push(i);
            }
        }
        if rows.is_empty() {
            return Err(LabError::Parse("empty batch".into()));
        }
        Self::from_rows(n, &rows)
    }
}

/// Draws a Bernoulli(`p_e`) batch from the stream addressed by `seed`.
pub fn sample_bernoulli_batch(n: usize, m: usize, p_e: f64, seed: u64) -> Result<SparseBatch> {
    let mut rng = stream(seed, TAG_BATCH, 0, 0);
    let mut b = SparseBatch::sample(n, m, p_e, &mut rng)?;
    b.seed = seed;
    Ok(b)
}

/// How one-hot indices are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// `k` uniform over `0..N`.
    Uniform,
    /// `k = m mod N`, so every index appears once per `N` rows.
    Cyclic,
}

/// Rows `z_m = v e^(k_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotDataset {
    pub n: usize,
    pub v: f64,
    pub ks: Vec<usize>,
}

impl OneHotDataset {
    /// `M × N` matrix of the `z` rows.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.ks.len(), self.n);
        for (m, &k) in self.ks.iter().enumerate() {
            z[(m, k)] = self.v;
        }
        z
    }

    /// `M × N` matrix of the neutral-element inputs `x = z + 1`.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        self.z_matrix().add_scalar(1.0)
    }

    /// Number of rows with each index.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n];
        for &k in &self.ks {
            h[k] += 1;
        }
        h
    }
}

/// Samples a one-hot dataset of `m` rows.
pub fn sample_one_hot_dataset(
    n: usize,
    m: usize,
    v: f64,
    seed: u64,
    coverage: Coverage,
) -> Result<OneHotDataset> {
    if n == 0 || m == 0 {
        return Err(LabError::Domain("dataset dimensions must be positive".into()));
    }
    let ks = match coverage {
        Coverage::Cyclic => (0..m).map(|i| i % n).collect(),
        Coverage::Uniform => {
            let mut rng = stream(seed, TAG_BATCH, 0, 0);
            (0..m).map(|_| rng.random_range(0..n)).collect()
        }
    };
    Ok(OneHotDataset { n, v, ks })
}

/// Binary `N × P` oracle, one support column per XOR unit.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMatrix {
    pub n: usize,
    pub p_w: f64,
    pub cols: Vec<Vec<u8>>,
}

impl OracleMatrix {
    pub fn p(&self) -> usize {
        self.cols.len()
    }

    /// Column `j` as 0.0/1.0 values.
    pub fn col_f64(&self, j: usize) -> Vec<f64> {
        self.cols[j].iter().map(|&b| f64::from(b)).collect()
    }
}

/// Number of ones per oracle column, `round(p_w N)`.
pub fn oracle_ones(n: usize, p_w: f64) -> usize {
    ((p_w * n as f64).round() as usize).min(n)
}

/// Generates oracle column `unit` with exactly `round(p_w N)` ones at
/// uniformly shuffled positions.
pub fn oracle_column(n: usize, p_w: f64, seed: u64, unit: u64) -> Result<Vec<u8>> {
    check_prob("p_w", p_w)?;
    let k = oracle_ones(n, p_w);
    let mut col = vec![0u8; n];
    col[..k].iter_mut().for_each(|b| *b = 1);
    let mut rng = stream(seed, TAG_ORACLE, unit, 0);
    col.shuffle(&mut rng);
    Ok(col)
}

/// Samples an `N × P` oracle.
pub fn sample_oracle(n: usize, p: usize, p_w: f64, seed: u64) -> Result<OracleMatrix> {
    check_prob("p_w", p_w)?;
    let cols = (0..p)
        .map(|j| oracle_column(n, p_w, seed, j as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleMatrix { n, p_w, cols })
}

/// Binomial probability of exactly `q` active bits among `N`.
pub fn active_bit_pmf(n: usize, p_e: f64, q: usize) -> Result<f64> {
    check_prob("p_e", p_e)?;
    if q > n {
        return Err(LabError::Domain(format!("q = {q} exceeds N = {n}")));
    }
    if p_e == 0.0 {
        return Ok(if q == 0 { 1.0 } else { 0.0 });
    }
    if p_e == 1.0 {
        return Ok(if q == n { 1.0 } else { 0.0 });
    }
    let k = q.min(n - q);
    let ln_binom: f64 = (1..=k)
        .map(|i| ((n - k + i) as f64 / i as f64).ln())
        .sum();
    let ln = ln_binom + q as f64 * p_e.ln() + (n - q) as f64 * (-p_e).ln_1p();
    Ok(ln.exp())
}
