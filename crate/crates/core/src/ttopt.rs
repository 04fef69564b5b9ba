//! Maxvol-sweep minimization of a black-box tensor.
//!
//! Bond `k` (between modes `k` and `k + 1`) carries a left set of
//! `R_k` prefixes `(n_0..=n_k)` and a right set of `R_k` suffixes
//! `(n_{k+1}..)`. A forward step at mode `k` queries the matrix with rows
//! `left[k-1] x n_k` (prefix fastest) and columns `right[k]`, maps values
//! through `exp(-(E - E_best))`, and keeps the maxvol rows as `left[k]`.
//! The backward pass mirrors this for the right sets.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxvol::{maxvol, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::tt::capped_ranks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtOptConfig {
    pub rank: usize,
    /// Maximum number of unique black-box evaluations. Run configurations
    /// set it from their own budget.
    #[serde(skip)]
    pub budget: usize,
    pub maxvol_tol: f64,
    /// Optional cap on forward/backward cycles.
    pub max_cycles: Option<usize>,
    /// Force the row holding the matrix's lowest value into the selected
    /// rows, swapping out the row with the largest coefficient on it.
    pub keep_best_row: bool,
}

impl Default for TtOptConfig {
    fn default() -> Self {
        TtOptConfig::new(7, 10_000)
    }
}

impl TtOptConfig {
    pub fn new(rank: usize, budget: usize) -> Self {
        TtOptConfig {
            rank,
            budget,
            maxvol_tol: DEFAULT_TOL,
            max_cycles: None,
            keep_best_row: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TtOptState {
    /// `ranks[k]` is the size of bond `k - 1`; `ranks[0] = ranks[d] = 1`.
    pub ranks: Vec<usize>,
    pub left_sets: Vec<Vec<Vec<usize>>>,
    pub right_sets: Vec<Vec<Vec<usize>>>,
    pub budget: usize,
    /// Distinct indices evaluated.
    pub unique_evals: usize,
    /// Matrix entries requested, repeats included.
    pub total_queries: usize,
    pub best_index: Vec<usize>,
    pub best_value: f64,
    pub cycles: usize,
    /// Lowest-valued entry among those queried in each cycle, the last
    /// one possibly cut short by the budget.
    pub cycle_bests: Vec<Vec<usize>>,
    /// Stopped because a whole cycle left every index set unchanged.
    pub fixed_point: bool,
    /// Stopped because the index sets and best value returned to an
    /// earlier cycle's state, so further cycles would repeat.
    pub limit_cycle: bool,
}

#[derive(Debug, Clone)]
pub struct TtOptResult {
    pub best_index: Vec<usize>,
    pub best_value: f64,
    pub state: TtOptState,
}

/// Number of entries one forward (or backward) pass requests before
/// memoization: `sum_k R_{k-1} N_k R_k`.
pub fn pass_queries(mode_sizes: &[usize], ranks: &[usize]) -> usize {
    mode_sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| ranks[k] * n * ranks[k + 1])
        .sum()
}

struct Oracle<'a, F> {
    f: &'a F,
    cache: HashMap<Vec<usize>, f64>,
    cycle_best: Option<(f64, Vec<usize>)>,
    state: TtOptState,
}

enum Fill {
    Complete(Vec<f64>),
    Exhausted,
}

impl<F> Oracle<'_, F>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    /// Values for `indices`, evaluating missing ones in parallel. Returns
    /// `Exhausted` when the budget ran out before every entry was known.
    fn fill(&mut self, indices: &[Vec<usize>]) -> Result<Fill> {
        self.state.total_queries += indices.len();
        let mut missing: Vec<&Vec<usize>> = Vec::new();
        {
            let mut seen = std::collections::HashSet::new();
            for idx in indices {
                if !self.cache.contains_key(idx) && seen.insert(idx) {
                    missing.push(idx);
                }
            }
        }
        let room = self.state.budget - self.state.unique_evals;
        let exhausted = missing.len() > room;
        missing.truncate(room);
        let f = self.f;
        let values: Vec<Result<f64>> = missing.par_iter().map(|idx| f(idx)).collect();
        for (idx, v) in missing.into_iter().zip(values) {
            let v = v.map_err(|e| e.context(format!("black box at index {idx:?}")))?;
            if v.is_nan() {
                return Err(Error::Domain(format!("black box returned NaN at {idx:?}")));
            }
            self.state.unique_evals += 1;
            if v < self.state.best_value {
                self.state.best_value = v;
                self.state.best_index = idx.clone();
            }
            self.cache.insert(idx.clone(), v);
        }
        for idx in indices {
            if let Some(&v) = self.cache.get(idx) {
                if self.cycle_best.as_ref().is_none_or(|(b, _)| v < *b) {
                    self.cycle_best = Some((v, idx.clone()));
                }
            }
        }
        if exhausted {
            return Ok(Fill::Exhausted);
        }
        Ok(Fill::Complete(
            indices.iter().map(|i| self.cache[i]).collect(),
        ))
    }

    fn close_cycle(&mut self) {
        if let Some((_, idx)) = self.cycle_best.take() {
            self.state.cycle_bests.push(idx);
        }
    }
}

/// Index set with `count` distinct suffixes over `sizes`, drawn uniformly.
fn random_set<R: Rng + ?Sized>(sizes: &[usize], count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let total = sizes
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n));
    match total {
        Some(total) if total <= 1 << 20 => sample(rng, total, count)
            .into_iter()
            .map(|mut lin| {
                sizes
                    .iter()
                    .map(|&n| {
                        let v = lin % n;
                        lin /= n;
                        v
                    })
                    .collect()
            })
            .collect(),
        _ => {
            let mut out: Vec<Vec<usize>> = Vec::with_capacity(count);
            while out.len() < count {
                let idx: Vec<usize> = sizes.iter().map(|&n| rng.gen_range(0..n)).collect();
                if !out.contains(&idx) {
                    out.push(idx);
                }
            }
            out
        }
    }
}

/// Maxvol rows of the transformed matrix (row-major `values`, `rows x cols`).
/// Maxvol runs on the orthonormal factor of a thin QR, which has full
/// column rank even when most transformed entries underflow to zero.
fn select_rows(values: &[f64], rows: usize, cols: usize, best: f64, cfg: &TtOptConfig) -> Result<Vec<usize>> {
    let a = DMatrix::from_fn(rows, cols, |i, j| (-(values[i * cols + j] - best)).exp());
    let q = a.qr().q();
    let mv = maxvol(&q, cfg.maxvol_tol, DEFAULT_MAX_ITERS)?;
    let mut picked = mv.row_indices;
    if cfg.keep_best_row {
        let low = (0..values.len())
            .min_by(|&x, &y| values[x].total_cmp(&values[y]))
            .map(|x| x / cols);
        if let Some(low) = low.filter(|r| !picked.contains(r)) {
            let slot = (0..picked.len())
                .max_by(|&x, &y| {
                    mv.coefficients[(low, x)]
                        .abs()
                        .total_cmp(&mv.coefficients[(low, y)].abs())
                })
                .expect("at least one selected row");
            picked[slot] = low;
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Minimizes `f` over the grid `mode_sizes` with target rank `cfg.rank`.
/// Runs full forward/backward cycles until the budget of unique
/// evaluations is spent or a cycle changes no index set.
pub fn minimize<F, R>(f: &F, mode_sizes: &[usize], cfg: &TtOptConfig, rng: &mut R) -> Result<TtOptResult>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
    R: Rng + ?Sized,
{
    let d = mode_sizes.len();
    if d == 0 || mode_sizes.contains(&0) {
        return Err(Error::Config("mode sizes must be non-empty and positive".into()));
    }
    if cfg.rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let ranks = capped_ranks(mode_sizes, cfg.rank);
    let sweep = pass_queries(mode_sizes, &ranks);
    if d > 1 && cfg.budget < sweep {
        return Err(Error::Config(format!(
            "budget {} is smaller than one forward sweep ({sweep} queries)",
            cfg.budget
        )));
    }
    let state = TtOptState {
        ranks: ranks.clone(),
        left_sets: vec![Vec::new(); d.saturating_sub(1)],
        right_sets: (0..d.saturating_sub(1))
            .map(|k| random_set(&mode_sizes[k + 1..], ranks[k + 1], rng))
            .collect(),
        budget: cfg.budget,
        unique_evals: 0,
        total_queries: 0,
        best_index: Vec::new(),
        best_value: f64::INFINITY,
        cycles: 0,
        cycle_bests: Vec::new(),
        fixed_point: false,
        limit_cycle: false,
    };
    let mut oracle = Oracle {
        f,
        cache: HashMap::new(),
        cycle_best: None,
        state,
    };

    if d == 1 {
        let all: Vec<Vec<usize>> = (0..mode_sizes[0]).map(|n| vec![n]).collect();
        oracle.fill(&all)?;
        return finish(oracle);
    }

    let mut visited: std::collections::HashSet<(Vec<Vec<Vec<usize>>>, Vec<Vec<Vec<usize>>>, u64)> =
        std::collections::HashSet::new();
    loop {
        let before = (oracle.state.left_sets.clone(), oracle.state.right_sets.clone());
        // Forward pass.
        for k in 0..d {
            let lefts: &[Vec<usize>] = if k == 0 { &[] } else { &oracle.state.left_sets[k - 1] };
            let rights: Vec<Vec<usize>> = if k + 1 < d {
                oracle.state.right_sets[k].clone()
            } else {
                vec![Vec::new()]
            };
            let rows = row_prefixes(lefts, mode_sizes[k]);
            let indices = cross(&rows, &rights);
            let Fill::Complete(values) = oracle.fill(&indices)? else {
                return finish(oracle);
            };
            if k + 1 < d {
                let best = oracle.state.best_value;
                let picked = select_rows(&values, rows.len(), rights.len(), best, cfg)?;
                oracle.state.left_sets[k] = picked.into_iter().map(|i| rows[i].clone()).collect();
            }
        }
        // Backward pass.
        for k in (0..d).rev() {
            let rights: &[Vec<usize>] = if k + 1 == d { &[] } else { &oracle.state.right_sets[k] };
            let lefts: Vec<Vec<usize>> = if k > 0 {
                oracle.state.left_sets[k - 1].clone()
            } else {
                vec![Vec::new()]
            };
            let rows = row_suffixes(mode_sizes[k], rights);
            // Rows are suffixes here; entries are left ++ suffix.
            let indices: Vec<Vec<usize>> = rows
                .iter()
                .flat_map(|s| lefts.iter().map(move |l| [l.as_slice(), s.as_slice()].concat()))
                .collect();
            let Fill::Complete(values) = oracle.fill(&indices)? else {
                return finish(oracle);
            };
            if k > 0 {
                let best = oracle.state.best_value;
                let picked = select_rows(&values, rows.len(), lefts.len(), best, cfg)?;
                oracle.state.right_sets[k - 1] = picked.into_iter().map(|i| rows[i].clone()).collect();
            }
        }
        oracle.state.cycles += 1;
        oracle.close_cycle();
        if (oracle.state.left_sets.clone(), oracle.state.right_sets.clone()) == before {
            oracle.state.fixed_point = true;
            return finish(oracle);
        }
        let key = (
            oracle.state.left_sets.clone(),
            oracle.state.right_sets.clone(),
            oracle.state.best_value.to_bits(),
        );
        if !visited.insert(key) {
            oracle.state.limit_cycle = true;
            return finish(oracle);
        }
        if oracle.state.unique_evals >= oracle.state.budget
            || cfg.max_cycles.is_some_and(|m| oracle.state.cycles >= m)
        {
            return finish(oracle);
        }
    }
}

/// Rows `prefix ++ [n]`, prefix index fastest.
fn row_prefixes(lefts: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    if lefts.is_empty() {
        return (0..n).map(|v| vec![v]).collect();
    }
    (0..n)
        .flat_map(|v| {
            lefts.iter().map(move |l| {
                let mut r = l.clone();
                r.push(v);
                r
            })
        })
        .collect()
}

/// Rows `[n] ++ suffix`, mode index fastest.
fn row_suffixes(n: usize, rights: &[Vec<usize>]) -> Vec<Vec<usize>> {
    if rights.is_empty() {
        return (0..n).map(|v| vec![v]).collect();
    }
    rights
        .iter()
        .flat_map(|s| {
            (0..n).map(move |v| {
                let mut r = Vec::with_capacity(s.len() + 1);
                r.push(v);
                r.extend_from_slice(s);
                r
            })
        })
        .collect()
}

/// Row-major `rows x cols` list of `row ++ col` indices.
fn cross(rows: &[Vec<usize>], cols: &[Vec<usize>]) -> Vec<Vec<usize>> {
    rows.iter()
        .flat_map(|r| cols.iter().map(move |c| [r.as_slice(), c.as_slice()].concat()))
        .collect()
}

fn finish<F>(mut oracle: Oracle<'_, F>) -> Result<TtOptResult> {
    if let Some((_, idx)) = oracle.cycle_best.take() {
        oracle.state.cycle_bests.push(idx);
    }
    let state = oracle.state;
    if state.best_index.is_empty() {
        return Err(Error::Config("budget exhausted before any evaluation".into()));
    }
    Ok(TtOptResult {
        best_index: state.best_index.clone(),
        best_value: state.best_value,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tt::multi_index;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    fn exhaustive_min<F: Fn(&[usize]) -> Result<f64>>(f: &F, shape: &[usize]) -> (Vec<usize>, f64) {
        let total: usize = shape.iter().product();
        (0..total)
            .map(|lin| {
                let idx = multi_index(shape, lin);
                let v = f(&idx).unwrap();
                (idx, v)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    #[test]
    fn one_dimensional_scan() {
        let f = |i: &[usize]| Ok(((i[0] as f64) - 6.3).powi(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = minimize(&f, &[10], &TtOptConfig::new(3, 10), &mut rng).unwrap();
        assert_eq!(r.best_index, vec![6]);
        assert_eq!(r.state.unique_evals, 10);
    }

    #[test]
    fn separable_quadratic_matches_enumeration() {
        let target = [5usize, 1, 6];
        let f = |i: &[usize]| {
            Ok(i.iter()
                .zip(&target)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>())
        };
        let shape = [8, 8, 8];
        let (oracle_idx, oracle_val) = exhaustive_min(&f, &shape);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = minimize(&f, &shape, &TtOptConfig::new(2, 512), &mut rng).unwrap();
            assert_eq!(r.best_index, oracle_idx);
            assert_eq!(r.best_value, oracle_val);
        }
    }

    #[test]
    fn peaked_tensor_found_within_three_cycles() {
        let peak = [3usize, 0, 2];
        let f = |i: &[usize]| {
            let dist: usize = i.iter().zip(&peak).map(|(a, b)| a.abs_diff(*b)).sum();
            Ok(if dist == 0 { -10.0 } else { dist as f64 * 0.1 })
        };
        let shape = [4, 4, 4];
        let (oracle_idx, _) = exhaustive_min(&f, &shape);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ranks = capped_ranks(&shape, 2);
        let budget = 3 * 2 * pass_queries(&shape, &ranks);
        let r = minimize(&f, &shape, &TtOptConfig::new(2, budget), &mut rng).unwrap();
        assert_eq!(r.best_index, oracle_idx);
        assert!(r.state.cycles <= 3);
    }

    #[test]
    fn constant_tensor_reaches_fixed_point() {
        let f = |_: &[usize]| Ok(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = minimize(&f, &[5, 5, 5, 5], &TtOptConfig::new(3, 100_000), &mut rng).unwrap();
        assert!(r.state.fixed_point);
        assert!(r.state.cycles <= 2, "{}", r.state.cycles);
    }

    #[test]
    fn query_accounting_for_one_cycle() {
        // A budget that stops right after the first cycle.
        let shape = [6, 5, 7, 4];
        let ranks = capped_ranks(&shape, 3);
        let per_pass = pass_queries(&shape, &ranks);
        let f = |i: &[usize]| Ok(i.iter().map(|&v| ((v * 7919) % 13) as f64).sum::<f64>().sin());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TtOptConfig::new(3, per_pass);
        let r = minimize(&f, &shape, &cfg, &mut rng).unwrap();
        assert!(r.state.unique_evals <= per_pass);
        // The forward pass alone requests exactly `per_pass` entries.
        assert!(r.state.total_queries >= per_pass);
        let cfg = TtOptConfig {
            max_cycles: Some(1),
            ..TtOptConfig::new(3, usize::MAX / 2)
        };
        let one = minimize(&f, &shape, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(one.state.cycles, 1);
        assert_eq!(one.state.total_queries, 2 * per_pass);
        assert!(one.state.unique_evals < 2 * per_pass);
    }

    #[test]
    fn best_is_min_over_recorded_queries() {
        let seen = Mutex::new(Vec::new());
        let f = |i: &[usize]| {
            let v = i.iter().enumerate().map(|(k, &n)| ((n as f64) - 1.7 * k as f64).cos()).sum::<f64>();
            seen.lock().unwrap().push(v);
            Ok(v)
        };
        let shape = [6, 6, 6, 6, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = minimize(&f, &shape, &TtOptConfig::new(3, 900), &mut rng).unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen.len(), r.state.unique_evals);
        assert!(r.state.unique_evals <= 900);
        let m = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(m, r.best_value);
        assert_eq!(f_check(&r.best_index), r.best_value);

        fn f_check(i: &[usize]) -> f64 {
            i.iter().enumerate().map(|(k, &n)| ((n as f64) - 1.7 * k as f64).cos()).sum()
        }
    }

    #[test]
    fn cycle_bests_cover_every_cycle() {
        let f = |i: &[usize]| Ok(i.iter().enumerate().map(|(k, &n)| ((n as f64) - 1.3 * k as f64).sin()).sum::<f64>());
        let shape = [5, 5, 5, 5, 5, 5];
        for budget in [400, 2500] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let r = minimize(&f, &shape, &TtOptConfig::new(3, budget), &mut rng).unwrap();
            let n = r.state.cycle_bests.len();
            assert!(n == r.state.cycles || n == r.state.cycles + 1, "{n} bests, {} cycles", r.state.cycles);
            let vals: Vec<f64> = r.state.cycle_bests.iter().map(|i| f(i).unwrap()).collect();
            assert!(vals.iter().all(|&v| v >= r.best_value));
            assert!(vals.contains(&r.best_value));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let f = |i: &[usize]| Ok(i.iter().map(|&v| (v as f64 * 0.37).sin()).product::<f64>());
        let shape = [7, 7, 7, 7];
        let a = minimize(&f, &shape, &TtOptConfig::new(3, 2000), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = minimize(&f, &shape, &TtOptConfig::new(3, 2000), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.best_index, b.best_index);
        assert_eq!(a.state.left_sets, b.state.left_sets);
        assert_eq!(a.state.unique_evals, b.state.unique_evals);
    }

    #[test]
    fn small_budget_is_a_config_error() {
        let f = |_: &[usize]| Ok(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = minimize(&f, &[8, 8, 8], &TtOptConfig::new(4, 10), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn black_box_failure_carries_index() {
        let f = |i: &[usize]| {
            if i == [1, 1] {
                Err(Error::Evaluator("boom".into()))
            } else {
                Ok(0.0)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = minimize(&f, &[3, 3], &TtOptConfig::new(3, 100), &mut rng).unwrap_err();
        assert!(err.to_string().contains("[1, 1]"), "{err}");
        assert!(matches!(err.root(), Error::Evaluator(_)));
    }
}
