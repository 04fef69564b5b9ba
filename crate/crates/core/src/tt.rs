//! Tensor trains: a `d`-dimensional array stored as a chain of order-3 cores.
//!
//! Element `[n_1, ..., n_d]` is the matrix product
//! `G_1[:, n_1, :] · G_2[:, n_2, :] · ... · G_d[:, n_d, :]`, collapsed to a
//! scalar because the outer ranks are one.
//!
//! Super-indices always put the *first* index fastest:
//! `overline(j k) = j + k * J`. The same convention is used for the dense
//! layout returned by [`TtTensor::to_dense`], for squared cores, and for the
//! unfoldings built by the TTOpt sweeps.
//!
//! Squared-tensor quantities (normalizer, marginals, likelihood gradients)
//! are computed with per-step rescaling so they survive high dimensions
//! where raw products under- or overflow.

use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default cap on the number of entries produced by [`TtTensor::to_dense`].
pub const DENSE_CAP: usize = 1_000_000;

/// Marginal masses (relative to the largest one) below this are treated as
/// zero while sampling.
pub const MASS_FLOOR: f64 = 1e-300;

/// A single order-3 core of shape `(left, mode, right)`.
///
/// Entries are stored with the right rank varying fastest, then the mode
/// index, then the left rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Core {
    left: usize,
    mode: usize,
    right: usize,
    data: Vec<f64>,
}

impl Core {
    pub fn new(left: usize, mode: usize, right: usize, data: Vec<f64>) -> Result<Self> {
        if left == 0 || mode == 0 || right == 0 {
            return Err(Error::Domain(format!(
                "core shape ({left}, {mode}, {right}) has a zero dimension"
            )));
        }
        if data.len() != left * mode * right {
            return Err(Error::Domain(format!(
                "core shape ({left}, {mode}, {right}) needs {} entries, got {}",
                left * mode * right,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("core entry {pos} is not finite")));
        }
        Ok(Core {
            left,
            mode,
            right,
            data,
        })
    }

    pub fn zeros(left: usize, mode: usize, right: usize) -> Self {
        Core {
            left,
            mode,
            right,
            data: vec![0.0; left * mode * right],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left, self.mode, self.right)
    }

    pub fn left_rank(&self) -> usize {
        self.left
    }

    pub fn mode_size(&self) -> usize {
        self.mode
    }

    pub fn right_rank(&self) -> usize {
        self.right
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, a: usize, n: usize, b: usize) -> usize {
        (a * self.mode + n) * self.right + b
    }

    #[inline]
    pub fn get(&self, a: usize, n: usize, b: usize) -> f64 {
        self.data[self.offset(a, n, b)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, n: usize, b: usize, value: f64) {
        let off = self.offset(a, n, b);
        self.data[off] = value;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `v · G[:, n, :]` for a row vector `v` of length `left`.
    fn row_times_slice(&self, v: &[f64], n: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.right, 0.0);
        for (a, &va) in v.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            let base = self.offset(a, n, 0);
            for (o, g) in out.iter_mut().zip(&self.data[base..base + self.right]) {
                *o += va * g;
            }
        }
    }

    /// `G[:, n, :] · v` for a column vector `v` of length `right`.
    fn slice_times_col(&self, n: usize, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.left, 0.0);
        for (a, o) in out.iter_mut().enumerate() {
            let base = self.offset(a, n, 0);
            *o = self.data[base..base + self.right]
                .iter()
                .zip(v)
                .map(|(g, x)| g * x)
                .sum();
        }
    }

    /// Matrix of shape `(left * mode, right)` in column-major order, rows
    /// indexed by `a + n * left`.
    fn left_unfolding(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.left * self.mode, self.right, |row, b| {
            self.get(row % self.left, row / self.left, b)
        })
    }

    fn from_left_unfolding(m: &DMatrix<f64>, left: usize, mode: usize) -> Core {
        let right = m.ncols();
        let mut core = Core::zeros(left, mode, right);
        for n in 0..mode {
            for a in 0..left {
                for b in 0..right {
                    core.set(a, n, b, m[(a + n * left, b)]);
                }
            }
        }
        core
    }

    /// Matrix of shape `(left, mode * right)`, columns indexed by `n + b * mode`.
    fn right_unfolding(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.left, self.mode * self.right, |a, col| {
            self.get(a, col % self.mode, col / self.mode)
        })
    }

    fn from_right_unfolding(m: &DMatrix<f64>, mode: usize, right: usize) -> Core {
        let left = m.nrows();
        let mut core = Core::zeros(left, mode, right);
        for a in 0..left {
            for n in 0..mode {
                for b in 0..right {
                    core.set(a, n, b, m[(a, n + b * mode)]);
                }
            }
        }
        core
    }
}

/// A dense array in the first-index-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn linear_index(&self, index: &[usize]) -> usize {
        linear_index(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.linear_index(index)]
    }
}

/// Super-index of `index` with the first component varying fastest.
pub fn linear_index(shape: &[usize], index: &[usize]) -> usize {
    let mut stride = 1;
    let mut lin = 0;
    for (&n, &size) in index.iter().zip(shape) {
        lin += n * stride;
        stride *= size;
    }
    lin
}

/// Inverse of [`linear_index`].
pub fn multi_index(shape: &[usize], mut linear: usize) -> Vec<usize> {
    shape
        .iter()
        .map(|&size| {
            let n = linear % size;
            linear /= size;
            n
        })
        .collect()
}

/// Tensor in TT format. Immutable once built; updates produce new values.
#[derive(Debug, Clone, PartialEq)]
pub struct TtTensor {
    cores: Vec<Core>,
}

impl TtTensor {
    /// Builds a tensor from cores, checking the rank chain.
    pub fn from_cores(cores: Vec<Core>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Domain("a tensor train needs at least one core".into()));
        }
        if cores[0].left != 1 || cores[cores.len() - 1].right != 1 {
            return Err(Error::Domain("outer ranks must equal one".into()));
        }
        for (i, pair) in cores.windows(2).enumerate() {
            if pair[0].right != pair[1].left {
                return Err(Error::Domain(format!(
                    "core {i} has right rank {} but core {} has left rank {}",
                    pair[0].right,
                    i + 1,
                    pair[1].left
                )));
            }
        }
        if let Some(i) = cores
            .iter()
            .position(|c| c.data.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Domain(format!("core {i} has a non-finite entry")));
        }
        Ok(TtTensor { cores })
    }

    /// Tensor with all entries zero, all ranks one.
    pub fn zeros(mode_sizes: &[usize]) -> Result<Self> {
        check_mode_sizes(mode_sizes)?;
        Ok(TtTensor {
            cores: mode_sizes.iter().map(|&n| Core::zeros(1, n, 1)).collect(),
        })
    }

    /// Tensor with all entries one, all ranks one.
    pub fn ones(mode_sizes: &[usize]) -> Result<Self> {
        check_mode_sizes(mode_sizes)?;
        Ok(TtTensor {
            cores: mode_sizes
                .iter()
                .map(|&n| Core {
                    left: 1,
                    mode: n,
                    right: 1,
                    data: vec![1.0; n],
                })
                .collect(),
        })
    }

    /// Rank-1 tensor equal to one at `index` and zero elsewhere.
    pub fn rank1_indicator(index: &[usize], mode_sizes: &[usize]) -> Result<Self> {
        check_mode_sizes(mode_sizes)?;
        check_index(index, mode_sizes)?;
        let cores = index
            .iter()
            .zip(mode_sizes)
            .map(|(&n, &size)| {
                let mut core = Core::zeros(1, size, 1);
                core.set(0, n, 0, 1.0);
                core
            })
            .collect();
        Ok(TtTensor { cores })
    }

    /// Random tensor with entries drawn uniformly from `(0, 1]`.
    ///
    /// Interior ranks are `rank`, capped by the sizes of the left and right
    /// unfoldings.
    pub fn random<R: Rng + ?Sized>(mode_sizes: &[usize], rank: usize, rng: &mut R) -> Result<Self> {
        check_mode_sizes(mode_sizes)?;
        if rank == 0 {
            return Err(Error::Domain("rank must be at least one".into()));
        }
        let ranks = capped_ranks(mode_sizes, rank);
        let cores = mode_sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let (l, r) = (ranks[k], ranks[k + 1]);
                Core {
                    left: l,
                    mode: n,
                    right: r,
                    data: (0..l * n * r).map(|_| 1.0 - rng.gen::<f64>()).collect(),
                }
            })
            .collect();
        Ok(TtTensor { cores })
    }

    pub fn ndim(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<Core> {
        self.cores
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.mode).collect()
    }

    /// `R_0, ..., R_d`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = Vec::with_capacity(self.cores.len() + 1);
        ranks.push(1);
        ranks.extend(self.cores.iter().map(|c| c.right));
        ranks
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    pub fn num_params(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum()
    }

    pub fn check_index(&self, index: &[usize]) -> Result<()> {
        check_index(index, &self.mode_sizes())
    }

    pub fn evaluate(&self, index: &[usize]) -> Result<f64> {
        self.check_index(index)?;
        let mut v = vec![1.0];
        let mut next = Vec::new();
        for (core, &n) in self.cores.iter().zip(index) {
            core.row_times_slice(&v, n, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
        Ok(v[0])
    }

    /// `(sign, ln|value|)` of an entry, computed with per-core rescaling.
    /// A zero entry yields `(0.0, -inf)`.
    pub fn evaluate_log(&self, index: &[usize]) -> Result<(f64, f64)> {
        self.check_index(index)?;
        let mut v = vec![1.0];
        let mut next = Vec::new();
        let mut log_scale = 0.0;
        for (core, &n) in self.cores.iter().zip(index) {
            core.row_times_slice(&v, n, &mut next);
            std::mem::swap(&mut v, &mut next);
            let s = max_abs(&v);
            if s == 0.0 {
                return Ok((0.0, f64::NEG_INFINITY));
            }
            v.iter_mut().for_each(|x| *x /= s);
            log_scale += s.ln();
        }
        Ok((v[0].signum(), log_scale + v[0].abs().ln()))
    }

    /// Dense expansion, refused if it would exceed `cap` entries.
    pub fn to_dense(&self, cap: usize) -> Result<DenseTensor> {
        let shape = self.mode_sizes();
        let mut total: usize = 1;
        for &n in &shape {
            total = total.checked_mul(n).ok_or(Error::Size {
                required: usize::MAX,
                cap,
            })?;
        }
        if total > cap {
            return Err(Error::Size {
                required: total,
                cap,
            });
        }
        // Contract left to right; rows of `acc` are super-indices of the
        // processed modes (first fastest), columns are the current rank.
        let mut acc = vec![1.0];
        let mut rows = 1;
        for core in &self.cores {
            let (l, m, r) = core.shape();
            let mut next = vec![0.0; rows * m * r];
            for n in 0..m {
                for row in 0..rows {
                    let out_row = row + n * rows;
                    for a in 0..l {
                        let x = acc[row * l + a];
                        if x == 0.0 {
                            continue;
                        }
                        let base = core.offset(a, n, 0);
                        for b in 0..r {
                            next[out_row * r + b] += x * core.data[base + b];
                        }
                    }
                }
            }
            acc = next;
            rows *= m;
        }
        Ok(DenseTensor { shape, data: acc })
    }

    /// Elementwise sum; interior ranks add.
    pub fn add(&self, other: &TtTensor) -> Result<TtTensor> {
        if self.mode_sizes() != other.mode_sizes() {
            return Err(Error::Domain(format!(
                "cannot add tensors with mode sizes {:?} and {:?}",
                self.mode_sizes(),
                other.mode_sizes()
            )));
        }
        let d = self.ndim();
        if d == 1 {
            let data = self.cores[0]
                .data
                .iter()
                .zip(&other.cores[0].data)
                .map(|(a, b)| a + b)
                .collect();
            return Ok(TtTensor {
                cores: vec![Core {
                    left: 1,
                    mode: self.cores[0].mode,
                    right: 1,
                    data,
                }],
            });
        }
        let cores = self
            .cores
            .iter()
            .zip(&other.cores)
            .enumerate()
            .map(|(k, (a, b))| {
                let left = if k == 0 { 1 } else { a.left + b.left };
                let right = if k == d - 1 { 1 } else { a.right + b.right };
                let (a_off_l, b_off_l) = (0, if k == 0 { 0 } else { a.left });
                let (a_off_r, b_off_r) = (0, if k == d - 1 { 0 } else { a.right });
                let mut core = Core::zeros(left, a.mode, right);
                for n in 0..a.mode {
                    for i in 0..a.left {
                        for j in 0..a.right {
                            core.set(i + a_off_l, n, j + a_off_r, a.get(i, n, j));
                        }
                    }
                    for i in 0..b.left {
                        for j in 0..b.right {
                            core.set(i + b_off_l, n, j + b_off_r, b.get(i, n, j));
                        }
                    }
                }
                core
            })
            .collect();
        Ok(TtTensor { cores })
    }

    /// Multiplies every entry by `alpha`.
    pub fn scaled(&self, alpha: f64) -> TtTensor {
        let mut out = self.clone();
        out.cores[0].data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Frobenius norm, via the Gram chain.
    pub fn norm(&self) -> f64 {
        let mut env = vec![1.0];
        let mut log_scale = 0.0;
        for core in &self.cores {
            env = left_env_step(core, &env);
            let s = max_abs(&env);
            if s == 0.0 {
                return 0.0;
            }
            env.iter_mut().for_each(|x| *x /= s);
            log_scale += s.ln();
        }
        (0.5 * (env[0].max(0.0).ln() + log_scale)).exp()
    }

    /// TT-rounding: left-to-right QR orthogonalization followed by a
    /// right-to-left truncated SVD sweep.
    ///
    /// Each of the `d - 1` truncations discards at most
    /// `tolerance / sqrt(d - 1) * ||t||` in Frobenius norm, and no interior
    /// rank exceeds `max_rank`.
    pub fn round(&self, max_rank: usize, tolerance: f64) -> Result<TtTensor> {
        if max_rank == 0 {
            return Err(Error::Domain("max_rank must be at least one".into()));
        }
        let d = self.ndim();
        if d == 1 {
            return Ok(self.clone());
        }
        let mut cores = self.cores.clone();
        for k in 0..d - 1 {
            let (l, m, _) = cores[k].shape();
            let qr = cores[k].left_unfolding().qr();
            let q = qr.q();
            let r = qr.r();
            cores[k] = Core::from_left_unfolding(&q, l, m);
            let next = &cores[k + 1];
            let (_, nm, nr) = next.shape();
            let merged = &r * next.right_unfolding();
            cores[k + 1] = Core::from_right_unfolding(&merged, nm, nr);
        }
        let norm = cores[d - 1].frobenius_norm();
        let delta = tolerance.max(0.0) / ((d - 1) as f64).sqrt() * norm;
        for k in (1..d).rev() {
            let (_, m, r) = cores[k].shape();
            let svd = cores[k].right_unfolding().svd(true, true);
            let u = svd.u.expect("svd u");
            let v_t = svd.v_t.expect("svd v_t");
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
            let mut keep = sv.len();
            let mut tail = 0.0;
            while keep > 1 {
                let next_tail = tail + sv[keep - 1] * sv[keep - 1];
                if next_tail.sqrt() > delta {
                    break;
                }
                tail = next_tail;
                keep -= 1;
            }
            let keep = keep.min(max_rank).max(1);
            let vt_kept = DMatrix::from_fn(keep, v_t.ncols(), |i, j| v_t[(order[i], j)]);
            let us = DMatrix::from_fn(u.nrows(), keep, |i, j| u[(i, order[j])] * sv[j]);
            cores[k] = Core::from_right_unfolding(&vt_kept, m, r);
            let (pl, pm, _) = cores[k - 1].shape();
            let merged = cores[k - 1].left_unfolding() * us;
            cores[k - 1] = Core::from_left_unfolding(&merged, pl, pm);
        }
        TtTensor::from_cores(cores)
    }

    /// Cores whose slices are Kronecker squares of the input slices, so that
    /// the result evaluates to the elementwise square:
    /// `G'[j + k L, n, l + m R] = G[j, n, l] * G[k, n, m]`.
    pub fn square_cores(&self) -> TtTensor {
        let cores = self
            .cores
            .iter()
            .map(|core| {
                let (l, m, r) = core.shape();
                let mut sq = Core::zeros(l * l, m, r * r);
                for n in 0..m {
                    for j in 0..l {
                        for k in 0..l {
                            for a in 0..r {
                                let gja = core.get(j, n, a);
                                for b in 0..r {
                                    sq.set(j + k * l, n, a + b * r, gja * core.get(k, n, b));
                                }
                            }
                        }
                    }
                }
                sq
            })
            .collect();
        TtTensor { cores }
    }

    /// Per-core right environments of the squared tensor, as `R_k x R_k`
    /// matrices (see [`SuffixSums`]).
    pub fn squared_suffix_sums(&self) -> Result<SuffixSums> {
        gram_suffix_sums(self)
    }

    /// Normalizer `Z = sum_n P[n]^2`, as `ln Z`.
    pub fn log_normalizer(&self) -> Result<f64> {
        Ok(self.squared_suffix_sums()?.log_normalizer())
    }

    /// `ln p(n)` for `p(n) = P[n]^2 / Z`.
    pub fn log_prob(&self, index: &[usize]) -> Result<LogProb> {
        let sums = self.squared_suffix_sums()?;
        log_prob_with(self, &sums, index)
    }

    /// Draws `count` independent multi-indices from `p(n) = P[n]^2 / Z`.
    ///
    /// One seed is drawn from `rng`; sample `i` uses its own ChaCha stream
    /// `i` under that seed, so the output does not depend on how the draws
    /// are scheduled across threads.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let sampler = Sampler::new(self)?;
        let seed: u64 = rng.gen();
        sampler.sample_seeded(count, seed)
    }

    /// Gradient of `L = -sum_{n in batch} ln p(n)` with respect to every
    /// core entry.
    pub fn grad_log_prob(&self, batch: &[Vec<usize>]) -> Result<Gradient> {
        grad_neg_log_likelihood(self, batch)
    }

    /// Writes the structured-text container.
    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(self.to_text().as_bytes())
    }

    /// Structured-text form: dimension, mode sizes, ranks, then every core's
    /// entries in storage order at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "tt-tensor 1");
        let _ = writeln!(s, "d {}", self.ndim());
        let _ = writeln!(s, "modes {}", join(&self.mode_sizes()));
        let _ = writeln!(s, "ranks {}", join(&self.ranks()));
        for (k, core) in self.cores.iter().enumerate() {
            let _ = writeln!(s, "core {k}");
            let line = core
                .data
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(s, "{line}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<TtTensor> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))
        };
        let header = next("header")?;
        if header != "tt-tensor 1" {
            return Err(Error::Parse(format!("unknown header {header:?}")));
        }
        let d: usize = parse_keyed(next("d")?, "d")?
            .first()
            .copied()
            .ok_or_else(|| Error::Parse("empty d".into()))?;
        let modes = parse_keyed(next("modes")?, "modes")?;
        let ranks = parse_keyed(next("ranks")?, "ranks")?;
        if modes.len() != d || ranks.len() != d + 1 {
            return Err(Error::Parse("mode/rank counts disagree with d".into()));
        }
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let tag = next("core tag")?;
            if tag != format!("core {k}") {
                return Err(Error::Parse(format!("expected core {k}, got {tag:?}")));
            }
            let data = next("core data")?
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("core {k}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            cores.push(Core::new(ranks[k], modes[k], ranks[k + 1], data)?);
        }
        TtTensor::from_cores(cores)
    }
}

fn parse_keyed(line: &str, key: &str) -> Result<Vec<usize>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(Error::Parse(format!("expected `{key}` line, got {line:?}")));
    }
    it.map(|t| {
        t.parse::<usize>()
            .map_err(|e| Error::Parse(format!("{key}: {e}")))
    })
    .collect()
}

fn check_mode_sizes(mode_sizes: &[usize]) -> Result<()> {
    if mode_sizes.is_empty() {
        return Err(Error::Domain("at least one mode is required".into()));
    }
    if mode_sizes.contains(&0) {
        return Err(Error::Domain("mode sizes must be positive".into()));
    }
    Ok(())
}

pub(crate) fn check_index(index: &[usize], mode_sizes: &[usize]) -> Result<()> {
    if index.len() != mode_sizes.len() {
        return Err(Error::Domain(format!(
            "multi-index has {} components, tensor has {} modes",
            index.len(),
            mode_sizes.len()
        )));
    }
    for (k, (&n, &size)) in index.iter().zip(mode_sizes).enumerate() {
        if n >= size {
            return Err(Error::Domain(format!(
                "index {n} out of range for mode {k} of size {size}"
            )));
        }
    }
    Ok(())
}

/// Interior ranks `min(rank, prod left sizes, prod right sizes)`, with the
/// outer ranks fixed to one.
pub fn capped_ranks(mode_sizes: &[usize], rank: usize) -> Vec<usize> {
    let d = mode_sizes.len();
    let mut ranks = vec![1; d + 1];
    let mut left = 1usize;
    for k in 1..d {
        left = left.saturating_mul(mode_sizes[k - 1]);
        let right = mode_sizes[k..]
            .iter()
            .fold(1usize, |acc, &n| acc.saturating_mul(n));
        ranks[k] = rank.min(left).min(right);
    }
    ranks
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `A' = sum_n G[n]^T A G[n]` for a left Gram environment `A` (`l x l`,
/// row-major).
fn left_env_step(core: &Core, env: &[f64]) -> Vec<f64> {
    let (l, m, r) = core.shape();
    let mut out = vec![0.0; r * r];
    let mut tmp = vec![0.0; l * r];
    for n in 0..m {
        // tmp = A G[n]
        tmp.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..l {
            for j in 0..l {
                let a = env[i * l + j];
                if a == 0.0 {
                    continue;
                }
                let base = core.offset(j, n, 0);
                for b in 0..r {
                    tmp[i * r + b] += a * core.data[base + b];
                }
            }
        }
        for i in 0..l {
            let base = core.offset(i, n, 0);
            for c in 0..r {
                let g = core.data[base + c];
                if g == 0.0 {
                    continue;
                }
                for b in 0..r {
                    out[c * r + b] += g * tmp[i * r + b];
                }
            }
        }
    }
    out
}

/// Right-contracted vectors of a (squared) tensor.
///
/// `vectors[k]` holds, up to the factor `exp(log_scales[k])`, the
/// contraction `sum_{n_{k+1..d}} G'_{k+1}[:, n, :] ... G'_d[:, n, :]`
/// (0-based `k`, so `vectors[d] = [1]` and `vectors[0]` is the scalar `Z`).
/// Each vector is normalized to unit max-norm.
#[derive(Debug, Clone)]
pub struct SuffixSums {
    pub vectors: Vec<Vec<f64>>,
    pub log_scales: Vec<f64>,
}

impl SuffixSums {
    pub fn log_normalizer(&self) -> f64 {
        self.vectors[0][0].ln() + self.log_scales[0]
    }

    pub fn normalizer(&self) -> f64 {
        self.log_normalizer().exp()
    }

    /// Environment after core `k` (0-based) as an `R_{k+1} x R_{k+1}`
    /// row-major matrix `M[l][m]`, unpacking the super-index `l + m R`.
    fn env_matrix(&self, k: usize) -> Vec<f64> {
        let v = &self.vectors[k + 1];
        let r = (v.len() as f64).sqrt().round() as usize;
        let mut m = vec![0.0; r * r];
        for l in 0..r {
            for mm in 0..r {
                m[l * r + mm] = v[l + mm * r];
            }
        }
        m
    }
}

/// Right-to-left contraction of summed cores. Expects the cores of a
/// squared tensor (all sums non-negative); fails if the normalizer is not a
/// positive finite number.
pub fn suffix_sums(t_sq: &TtTensor) -> Result<SuffixSums> {
    let d = t_sq.ndim();
    let mut vectors = vec![Vec::new(); d + 1];
    let mut log_scales = vec![0.0; d + 1];
    vectors[d] = vec![1.0];
    let mut tmp = Vec::new();
    for k in (0..d).rev() {
        let core = &t_sq.cores[k];
        let mut acc = vec![0.0; core.left];
        for n in 0..core.mode {
            core.slice_times_col(n, &vectors[k + 1], &mut tmp);
            acc.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
        }
        let s = max_abs(&acc);
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Degenerate(format!(
                "suffix contraction vanished at core {k}"
            )));
        }
        acc.iter_mut().for_each(|x| *x /= s);
        log_scales[k] = log_scales[k + 1] + s.ln();
        vectors[k] = acc;
    }
    let z = vectors[0][0];
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Degenerate(format!(
            "normalizer is {}",
            z * log_scales[0].exp()
        )));
    }
    Ok(SuffixSums {
        vectors,
        log_scales,
    })
}

/// Same result as `suffix_sums(&t.square_cores())`, computed as right Gram
/// matrices `M_k = sum_n G_k[n] M_{k+1} G_k[n]^T` without forming the
/// squared cores.
fn gram_suffix_sums(t: &TtTensor) -> Result<SuffixSums> {
    let d = t.ndim();
    let mut vectors = vec![Vec::new(); d + 1];
    let mut log_scales = vec![0.0; d + 1];
    vectors[d] = vec![1.0];
    let mut gm = Vec::new();
    for k in (0..d).rev() {
        let core = &t.cores[k];
        let (l, m, r) = core.shape();
        let next = &vectors[k + 1];
        let mut acc = vec![0.0; l * l];
        for n in 0..m {
            // gm = G[n] M, l x r
            gm.clear();
            gm.resize(l * r, 0.0);
            for a in 0..l {
                let base = core.offset(a, n, 0);
                let row = &core.data[base..base + r];
                for (b, &g) in row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let mrow = &next[b * r..(b + 1) * r];
                    for (o, x) in gm[a * r..(a + 1) * r].iter_mut().zip(mrow) {
                        *o += g * x;
                    }
                }
            }
            for a in 0..l {
                let ga = &gm[a * r..(a + 1) * r];
                for c in 0..l {
                    let base = core.offset(c, n, 0);
                    let gc = &core.data[base..base + r];
                    acc[a * l + c] += ga.iter().zip(gc).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        let s = max_abs(&acc);
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Degenerate(format!(
                "suffix contraction vanished at core {k}"
            )));
        }
        acc.iter_mut().for_each(|x| *x /= s);
        log_scales[k] = log_scales[k + 1] + s.ln();
        vectors[k] = acc;
    }
    let z = vectors[0][0];
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Degenerate(format!(
            "normalizer is {}",
            z * log_scales[0].exp()
        )));
    }
    Ok(SuffixSums {
        vectors,
        log_scales,
    })
}

/// Outcome of [`TtTensor::log_prob`]. A zero-probability index is flagged
/// explicitly rather than reported as a bare `-inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogProb {
    Finite(f64),
    Zero,
}

impl LogProb {
    pub fn value(self) -> f64 {
        match self {
            LogProb::Finite(v) => v,
            LogProb::Zero => f64::NEG_INFINITY,
        }
    }

    pub fn is_zero(self) -> bool {
        matches!(self, LogProb::Zero)
    }
}

fn log_prob_with(t: &TtTensor, sums: &SuffixSums, index: &[usize]) -> Result<LogProb> {
    let (_, log_abs) = t.evaluate_log(index)?;
    if log_abs == f64::NEG_INFINITY {
        return Ok(LogProb::Zero);
    }
    Ok(LogProb::Finite(2.0 * log_abs - sums.log_normalizer()))
}

/// Conditional-marginal sampler for `p(n) = P[n]^2 / Z`.
///
/// Right environments are computed once from the squared cores and reused
/// for every draw; each draw then costs `O(d N R^2)`.
pub struct Sampler<'a> {
    tensor: &'a TtTensor,
    sums: SuffixSums,
    envs: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(tensor: &'a TtTensor) -> Result<Self> {
        let sums = tensor.squared_suffix_sums()?;
        let envs = (0..tensor.ndim()).map(|k| sums.env_matrix(k)).collect();
        Ok(Sampler {
            tensor,
            sums,
            envs,
        })
    }

    pub fn log_normalizer(&self) -> f64 {
        self.sums.log_normalizer()
    }

    pub fn log_prob(&self, index: &[usize]) -> Result<LogProb> {
        log_prob_with(self.tensor, &self.sums, index)
    }

    /// Draws `count` samples; sample `i` uses ChaCha stream `i` of `seed`.
    pub fn sample_seeded(&self, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.draw(&mut rng)
            })
            .collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<usize>> {
        let d = self.tensor.ndim();
        let mut index = Vec::with_capacity(d);
        let mut phi = vec![1.0];
        let mut w = Vec::new();
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        let mut masses = Vec::new();
        for k in 0..d {
            let core = &self.tensor.cores[k];
            let env = &self.envs[k];
            let r = core.right;
            candidates.clear();
            masses.clear();
            for n in 0..core.mode {
                core.row_times_slice(&phi, n, &mut w);
                let mut q = 0.0;
                for l in 0..r {
                    if w[l] == 0.0 {
                        continue;
                    }
                    let row = &env[l * r..(l + 1) * r];
                    q += w[l] * row.iter().zip(&w).map(|(e, x)| e * x).sum::<f64>();
                }
                masses.push(q);
                candidates.push(w.clone());
            }
            let peak = masses.iter().fold(0.0f64, |m, &q| m.max(q.abs()));
            if peak == 0.0 || !peak.is_finite() {
                return Err(Error::Degenerate(format!(
                    "marginal of mode {k} has no mass"
                )));
            }
            let mut total = 0.0;
            for q in masses.iter_mut() {
                let rel = *q / peak;
                if rel < -1e-9 {
                    return Err(Error::Degenerate(format!(
                        "negative marginal mass {rel:e} in mode {k}"
                    )));
                }
                *q = if rel < MASS_FLOOR { 0.0 } else { rel };
                total += *q;
            }
            if total <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "marginal of mode {k} is fully clamped"
                )));
            }
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (n, &q) in masses.iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                acc += q;
                pick = Some(n);
                if u < acc {
                    break;
                }
            }
            let n = pick.expect("positive total mass");
            index.push(n);
            phi = std::mem::take(&mut candidates[n]);
            let s = max_abs(&phi);
            phi.iter_mut().for_each(|x| *x /= s);
        }
        Ok(index)
    }
}

/// Core-shaped gradient together with the loss it differentiates.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub cores: Vec<Core>,
    /// `-sum ln p(n)` over the batch.
    pub loss: f64,
}

fn grad_neg_log_likelihood(t: &TtTensor, batch: &[Vec<usize>]) -> Result<Gradient> {
    let d = t.ndim();
    let mode_sizes = t.mode_sizes();
    for index in batch {
        check_index(index, &mode_sizes)?;
    }
    let sums = t.squared_suffix_sums()?;
    let log_z = sums.log_normalizer();
    let mut grads: Vec<Core> = t
        .cores
        .iter()
        .map(|c| Core::zeros(c.left, c.mode, c.right))
        .collect();

    // Normalizer term: d ln Z / dG_k[:, n, :] = 2 A_k G_k[n] M_{k+1} / Z_k,
    // where A_k, M_{k+1} are (arbitrarily scaled) left and right Gram
    // environments and Z_k is recomputed from the same scaled pair.
    let weight = batch.len() as f64;
    if weight > 0.0 {
        let mut left_env = vec![1.0];
        for k in 0..d {
            let core = &t.cores[k];
            let (l, m, r) = core.shape();
            let right_env = sums.env_matrix(k);
            let mut slices = vec![0.0; l * m * r];
            let mut zk = 0.0;
            let mut ag = vec![0.0; r];
            for n in 0..m {
                for i in 0..l {
                    // ag = (A G[n])[i, :]
                    ag.iter_mut().for_each(|x| *x = 0.0);
                    for j in 0..l {
                        let a = left_env[i * l + j];
                        if a == 0.0 {
                            continue;
                        }
                        let base = core.offset(j, n, 0);
                        for b in 0..r {
                            ag[b] += a * core.data[base + b];
                        }
                    }
                    for c in 0..r {
                        let v: f64 = (0..r).map(|b| ag[b] * right_env[b * r + c]).sum();
                        slices[core.offset(i, n, c)] = v;
                        zk += v * core.data[core.offset(i, n, c)];
                    }
                }
            }
            if !(zk > 0.0) || !zk.is_finite() {
                return Err(Error::Degenerate(format!(
                    "normalizer vanished at core {k}"
                )));
            }
            let g = &mut grads[k];
            for (gv, sv) in g.data.iter_mut().zip(&slices) {
                *gv += 2.0 * weight * sv / zk;
            }
            left_env = left_env_step(core, &left_env);
            let s = max_abs(&left_env);
            left_env.iter_mut().for_each(|x| *x /= s);
        }
    }

    // Sample term: d ln|P(n)| / dG_k[a, n_k, b] = l_k[a] r_{k+1}[b] / P(n).
    let mut loss = 0.0;
    let mut lefts: Vec<Vec<f64>> = vec![Vec::new(); d + 1];
    let mut rights: Vec<Vec<f64>> = vec![Vec::new(); d + 1];
    let mut tmp = Vec::new();
    for index in batch {
        lefts[0] = vec![1.0];
        for k in 0..d {
            t.cores[k].row_times_slice(&lefts[k], index[k], &mut tmp);
            let s = max_abs(&tmp);
            if s == 0.0 {
                return Err(Error::ZeroProbability {
                    index: index.clone(),
                });
            }
            lefts[k + 1] = tmp.iter().map(|x| x / s).collect();
        }
        rights[d] = vec![1.0];
        for k in (0..d).rev() {
            t.cores[k].slice_times_col(index[k], &rights[k + 1], &mut tmp);
            let s = max_abs(&tmp);
            if s == 0.0 {
                return Err(Error::ZeroProbability {
                    index: index.clone(),
                });
            }
            rights[k] = tmp.iter().map(|x| x / s).collect();
        }
        for k in 0..d {
            let core = &t.cores[k];
            let n = index[k];
            core.slice_times_col(n, &rights[k + 1], &mut tmp);
            let p: f64 = lefts[k].iter().zip(&tmp).map(|(a, b)| a * b).sum();
            if p == 0.0 || !p.is_finite() {
                return Err(Error::ZeroProbability {
                    index: index.clone(),
                });
            }
            let g = &mut grads[k];
            for (a, &la) in lefts[k].iter().enumerate() {
                if la == 0.0 {
                    continue;
                }
                for (b, &rb) in rights[k + 1].iter().enumerate() {
                    let off = g.offset(a, n, b);
                    g.data[off] -= 2.0 * la * rb / p;
                }
            }
        }
        let (_, log_abs) = t.evaluate_log(index)?;
        loss -= 2.0 * log_abs - log_z;
    }
    Ok(Gradient { cores: grads, loss })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn small_tensor() -> impl Strategy<Value = TtTensor> {
        (prop::collection::vec(1usize..4, 1..5), 1usize..4, any::<u64>()).prop_map(
            |(modes, rank, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = TtTensor::random(&modes, rank, &mut rng).unwrap();
                // Mixed signs make sign errors in squaring visible.
                let cores = t
                    .into_cores()
                    .into_iter()
                    .map(|mut c| {
                        for v in c.data_mut() {
                            *v = 2.0 * *v - 1.0 + 1e-3;
                        }
                        c
                    })
                    .collect();
                TtTensor::from_cores(cores).unwrap()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn evaluate_agrees_with_dense(t in small_tensor()) {
            let dense = t.to_dense(DENSE_CAP).unwrap();
            for lin in 0..dense.data.len() {
                let idx = multi_index(&dense.shape, lin);
                prop_assert!((t.evaluate(&idx).unwrap() - dense.data[lin]).abs() < 1e-12);
            }
        }

        #[test]
        fn square_is_elementwise(t in small_tensor()) {
            let a = t.to_dense(DENSE_CAP).unwrap();
            let b = t.square_cores().to_dense(DENSE_CAP).unwrap();
            for i in 0..a.data.len() {
                prop_assert!((a.data[i] * a.data[i] - b.data[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn round_of_doubled_is_twice(t in small_tensor()) {
            let r = t.add(&t).unwrap().round(t.max_rank(), 1e-14).unwrap();
            let (a, b) = (t.to_dense(DENSE_CAP).unwrap(), r.to_dense(DENSE_CAP).unwrap());
            for i in 0..a.data.len() {
                prop_assert!((2.0 * a.data[i] - b.data[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn text_round_trip_is_bit_exact(t in small_tensor()) {
            let back = TtTensor::from_text(&t.to_text()).unwrap();
            for (a, b) in t.cores().iter().zip(back.cores()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }

        #[test]
        fn sampling_is_pure(t in small_tensor(), seed in any::<u64>()) {
            let a = t.sample(8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = t.sample(8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
