//! Unbiased squared MMD with a Gaussian kernel, a permutation two-sample
//! test, and a table of rejection rates between model orders.
//!
//! Every permuted statistic is computed from the pooled kernel matrix `K`:
//! with `w = +1` on the first sample and `-1` on the second and `r = K 1`,
//! `w^T K w = Kxx + Kyy - 2 Kxy` and `r^T w = Kxx - Kyy`, where each `K..`
//! is a block sum including diagonals. Both are O(N^2) per permutation.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MIN_PERMUTATIONS: usize = 100;

/// Gaussian kernel `exp(-|x - y|^2 / (2 s^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// Explicit bandwidth `s`; `None` sets `2 s^2` to the median squared
    /// pairwise distance of the pooled sample, so the kernel is
    /// `exp(-|x - y|^2 / median)`.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

impl KernelConfig {
    pub fn median() -> Self {
        Self { bandwidth: None }
    }

    pub fn explicit(bandwidth: f64) -> Result<Self> {
        let cfg = Self {
            bandwidth: Some(bandwidth),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Some(b) if !(b > 0.0 && b.is_finite()) => {
                Err(Error::Config(format!("kernel bandwidth must be positive, got {b}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdResult {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub n_permutations: usize,
    pub alpha: f64,
    pub bandwidth: f64,
}

/// Pooled kernel matrix plus the split point between the two samples.
struct Pooled {
    kernel: Array2<f64>,
    row_sums: Vec<f64>,
    total: f64,
    n: usize,
    m: usize,
    bandwidth: f64,
}

fn pairwise_sq_dists(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("samples have {} and {} columns", x.ncols(), y.ncols())));
    }
    let pooled = ndarray::concatenate(ndarray::Axis(0), &[x, y]).expect("same width");
    let n = pooled.nrows();
    let norms: Vec<f64> = pooled.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = pooled.dot(&pooled.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            // clip rounding below zero for near-duplicate rows
            let v = (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Median of the strictly-upper-triangle squared distances.
fn median_sq_distance(sq: &Array2<f64>) -> f64 {
    let n = sq.nrows();
    let mut vals: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| sq[[i, j]]).collect();
    let mid = vals.len() / 2;
    let (_, median, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
    *median
}

impl Pooled {
    fn new(x: ArrayView2<f64>, y: ArrayView2<f64>, kernel: &KernelConfig) -> Result<Self> {
        kernel.validate()?;
        let (n, m) = (x.nrows(), y.nrows());
        if n < 2 || m < 2 {
            return Err(Error::InsufficientSamples(format!(
                "MMD needs at least 2 samples on each side, got {n} and {m}"
            )));
        }
        let sq = pairwise_sq_dists(x, y)?;
        let bandwidth = match kernel.bandwidth {
            Some(b) => b,
            None => {
                let med = median_sq_distance(&sq);
                if med > 0.0 { (0.5 * med).sqrt() } else { 1.0 }
            }
        };
        let scale = -0.5 / (bandwidth * bandwidth);
        let k = sq.mapv(|d| (d * scale).exp());
        let row_sums: Vec<f64> = k.rows().into_iter().map(|r| r.sum()).collect();
        let total = row_sums.iter().sum();
        Ok(Self {
            kernel: k,
            row_sums,
            total,
            n,
            m,
            bandwidth,
        })
    }

    /// Statistic for the split that puts `first` (indices into the pool) on
    /// the X side.
    fn statistic_for(&self, is_x: &[bool]) -> f64 {
        let w: Vec<f64> = is_x.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let big_n = w.len();
        let mut quad = 0.0;
        for i in 0..big_n {
            let row = self.kernel.row(i);
            let row = row.as_slice().expect("standard layout");
            let mut acc = 0.0;
            for j in 0..big_n {
                acc += row[j] * w[j];
            }
            quad += w[i] * acc;
        }
        let lin: f64 = self.row_sums.iter().zip(&w).map(|(r, w)| r * w).sum();
        let (n, m) = (self.n as f64, self.m as f64);
        let within = 0.5 * (self.total + quad);
        let kxx = 0.5 * (within + lin);
        let kyy = 0.5 * (within - lin);
        let kxy = 0.25 * (self.total - quad);
        // the kernel diagonal is exactly one
        (kxx - n) / (n * (n - 1.0)) + (kyy - m) / (m * (m - 1.0)) - 2.0 * kxy / (n * m)
    }

    fn observed(&self) -> f64 {
        let is_x: Vec<bool> = (0..self.n + self.m).map(|i| i < self.n).collect();
        self.statistic_for(&is_x)
    }
}

/// Unbiased estimate of squared MMD; may be negative.
pub fn mmd2_unbiased(x: ArrayView2<f64>, y: ArrayView2<f64>, kernel: &KernelConfig) -> Result<f64> {
    Ok(Pooled::new(x, y, kernel)?.observed())
}

/// The bandwidth that `kernel` resolves to on the pooled sample.
pub fn resolved_bandwidth(x: ArrayView2<f64>, y: ArrayView2<f64>, kernel: &KernelConfig) -> Result<f64> {
    Ok(Pooled::new(x, y, kernel)?.bandwidth)
}

/// Rejects equality of distributions when the observed statistic exceeds
/// the `(1 - alpha)` quantile of `n_perm` relabeled statistics. The
/// bandwidth is fixed once on the pooled sample.
pub fn permutation_test<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    kernel: &KernelConfig,
    n_perm: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<MmdResult> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::Config(format!(
            "at least {MIN_PERMUTATIONS} permutations are required, got {n_perm}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let pooled = Pooled::new(x, y, kernel)?;
    let statistic = pooled.observed();
    let total = pooled.n + pooled.m;
    let mut labels: Vec<bool> = (0..total).map(|i| i < pooled.n).collect();
    let mut permuted: Vec<f64> = (0..n_perm)
        .map(|_| {
            labels.shuffle(rng);
            pooled.statistic_for(&labels)
        })
        .collect();
    permuted.sort_by(f64::total_cmp);
    let rank = ((1.0 - alpha) * n_perm as f64).ceil() as usize;
    let threshold = permuted[rank.clamp(1, n_perm) - 1];
    Ok(MmdResult {
        statistic,
        threshold,
        reject: statistic > threshold,
        n_permutations: n_perm,
        alpha,
        bandwidth: pooled.bandwidth,
    })
}

/// Settings of [`tpr_table`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TprConfig {
    #[serde(default)]
    pub kernel: KernelConfig,
    pub trials: usize,
    /// Rows drawn from each pool per test.
    pub subsample: usize,
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl TprConfig {
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            kernel: KernelConfig::median(),
            trials: 100,
            subsample: 500,
            permutations: MIN_PERMUTATIONS,
            alpha: 0.05,
            seed,
        }
    }
}

/// Rejection rates for every pair `i <= j` of model orders.
#[derive(Debug, Clone, PartialEq)]
pub struct TprTable {
    pub orders: Vec<usize>,
    /// `tpr[i][j]` for `i <= j`; `None` below the diagonal.
    pub tpr: Vec<Vec<Option<f64>>>,
    pub trials: usize,
}

impl TprTable {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let i = self.orders.iter().position(|&o| o == a)?;
        let j = self.orders.iter().position(|&o| o == b)?;
        self.tpr[i.min(j)][i.max(j)]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("paths");
        for o in &self.orders {
            write!(out, ",{o}").expect("string write");
        }
        out.push('\n');
        for (i, o) in self.orders.iter().enumerate() {
            write!(out, "{o}").expect("string write");
            for v in &self.tpr[i] {
                match v {
                    Some(v) => write!(out, ",{v}").expect("string write"),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>8}", "paths");
        for o in &self.orders {
            write!(out, "{o:>7}").expect("string write");
        }
        out.push('\n');
        for (i, o) in self.orders.iter().enumerate() {
            write!(out, "{:>8}", o).expect("string write");
            for v in &self.tpr[i] {
                match v {
                    Some(v) => write!(out, "{v:>7.2}").expect("string write"),
                    None => write!(out, "{:>7}", "").expect("string write"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `config.trials` subsampled permutation tests per pair of pools.
/// Diagonal cells draw two disjoint subsamples from the same pool.
pub fn tpr_table(pools: &[(usize, Array2<f64>)], config: &TprConfig) -> Result<TprTable> {
    config.kernel.validate()?;
    let n = config.subsample;
    for (order, pool) in pools {
        if pool.nrows() < 2 * n {
            return Err(Error::InsufficientSamples(format!(
                "order {order} has {} samples; {} are needed for disjoint subsamples of {n}",
                pool.nrows(),
                2 * n
            )));
        }
    }
    let k = pools.len();
    let mut tpr = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let rejections = (0..config.trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = crate::rng::stream(config.seed, &[i as u64, j as u64, t as u64]);
                    let mut a: Vec<usize> = (0..pools[i].1.nrows()).collect();
                    a.shuffle(&mut rng);
                    let x = pools[i].1.select(ndarray::Axis(0), &a[..n]);
                    let y = if i == j {
                        pools[j].1.select(ndarray::Axis(0), &a[n..2 * n])
                    } else {
                        let mut b: Vec<usize> = (0..pools[j].1.nrows()).collect();
                        b.shuffle(&mut rng);
                        pools[j].1.select(ndarray::Axis(0), &b[..n])
                    };
                    permutation_test(x.view(), y.view(), &config.kernel, config.permutations, config.alpha, &mut rng)
                        .map(|r| r.reject as usize)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            tpr[i][j] = Some(rejections as f64 / config.trials as f64);
        }
    }
    Ok(TprTable {
        orders: pools.iter().map(|(o, _)| *o).collect(),
        tpr,
        trials: config.trials,
    })
}
