//! Probabilistic search with a squared tensor-train distribution.
//!
//! Each iteration samples candidates from `p ∝ P²`, drops infeasible
//! ones, evaluates the rest, and takes gradient steps that raise the
//! likelihood of the lowest-valued samples.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{Configuration, EncodingScheme};
use crate::error::{Error, Result};
use crate::tt::{Core, TtTensor};

/// How gradient steps on the cores are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// `theta -= eta * grad` of the summed loss.
    Sgd,
    /// Per-entry steps normalized by moment estimates of the mean-loss gradient.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtesConfig {
    pub samples_per_iter: usize,
    pub elite_count: usize,
    pub learning_rate: f64,
    pub update_rule: UpdateRule,
    pub gradient_steps: usize,
    pub rank: usize,
    /// Run configurations set this from their own budget.
    #[serde(skip)]
    pub budget: usize,
    pub d_min: f64,
    pub noise_scale: f64,
    /// Consecutive iterations without an approved sample before giving up.
    pub stagnation_limit: usize,
}

impl Default for ProtesConfig {
    fn default() -> Self {
        ProtesConfig {
            samples_per_iter: 50,
            elite_count: 5,
            learning_rate: 0.02,
            update_rule: UpdateRule::Adam,
            gradient_steps: 1,
            rank: 7,
            budget: 10_000,
            d_min: crate::encoding::DEFAULT_D_MIN,
            noise_scale: 1e-2,
            stagnation_limit: 500,
        }
    }
}

impl ProtesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_iter == 0 || self.elite_count == 0 || self.elite_count > self.samples_per_iter {
            return Err(Error::Config(format!(
                "need 1 <= elite_count ({}) <= samples_per_iter ({})",
                self.elite_count, self.samples_per_iter
            )));
        }
        if self.budget < self.samples_per_iter {
            return Err(Error::Config(format!(
                "budget {} is below samples_per_iter {}",
                self.budget, self.samples_per_iter
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.gradient_steps == 0 || self.rank == 0 {
            return Err(Error::Config("gradient_steps and rank must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub proposed: usize,
    pub approved: usize,
    pub best_value: f64,
    pub cumulative_evals: usize,
    /// Index of the new best when this iteration improved it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_best: Option<Vec<usize>>,
    /// Lowest-valued sample of this iteration, if any was approved.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration_best: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ProtesTrace {
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct ProtesResult {
    pub best_index: Vec<usize>,
    pub best_value: f64,
    pub evaluations: usize,
    pub trace: ProtesTrace,
    pub tensor: TtTensor,
}

/// `steps` descent steps on `-sum ln p(n)` over `elite`.
pub fn update_step(t: &TtTensor, elite: &[Vec<usize>], eta: f64, steps: usize) -> Result<TtTensor> {
    let mut t = t.clone();
    if eta == 0.0 {
        return Ok(t);
    }
    for _ in 0..steps {
        let grad = t.grad_log_prob(elite)?;
        let mut cores = t.into_cores();
        for (k, (core, g)) in cores.iter_mut().zip(&grad.cores).enumerate() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { core: k });
            }
            for (x, gx) in core.data_mut().iter_mut().zip(g.data()) {
                *x -= eta * gx;
            }
        }
        t = TtTensor::from_cores(cores)?;
    }
    Ok(t)
}

/// First and second moment estimates for adaptive steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(t: &TtTensor) -> Self {
        let zeros: Vec<Vec<f64>> = t.cores().iter().map(|c| vec![0.0; c.data().len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Like [`update_step`], but each step is scaled per entry by running
/// moment estimates of the gradient of the mean loss over `elite`.
pub fn adam_update_step(
    t: &TtTensor,
    elite: &[Vec<usize>],
    eta: f64,
    steps: usize,
    state: &mut AdamState,
) -> Result<TtTensor> {
    let mut t = t.clone();
    let scale = 1.0 / elite.len().max(1) as f64;
    for _ in 0..steps {
        let grad = t.grad_log_prob(elite)?;
        state.step += 1;
        let c1 = 1.0 - AdamState::BETA1.powi(state.step);
        let c2 = 1.0 - AdamState::BETA2.powi(state.step);
        let mut cores = t.into_cores();
        for (k, (core, g)) in cores.iter_mut().zip(&grad.cores).enumerate() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { core: k });
            }
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            for (i, (x, gx)) in core.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gx = gx * scale;
                m[i] = AdamState::BETA1 * m[i] + (1.0 - AdamState::BETA1) * gx;
                v[i] = AdamState::BETA2 * v[i] + (1.0 - AdamState::BETA2) * gx * gx;
                *x -= eta * (m[i] / c1) / ((v[i] / c2).sqrt() + AdamState::EPS);
            }
        }
        t = TtTensor::from_cores(cores)?;
    }
    Ok(t)
}

/// Sum of rank-one indicators of the encoded seeds, rounded to `rank` when
/// there are more seeds than that, zero-padded up to `rank`, then perturbed
/// entrywise by `noise_scale * |G|_F / sqrt(numel(G)) * U(0, 1]` per core.
pub fn build_init_tensor<R: Rng + ?Sized>(
    seeds: &[Configuration],
    scheme: &EncodingScheme,
    rank: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<TtTensor> {
    let first = seeds
        .first()
        .ok_or_else(|| Error::Config("physical initialization needs at least one seed".into()))?;
    let m = first.len();
    let shape = scheme.tensor_shape(m)?;
    let mut sum: Option<TtTensor> = None;
    for (i, s) in seeds.iter().enumerate() {
        if s.len() != m {
            return Err(Error::Config(format!(
                "seed {} has {} particles, expected {m}",
                i + 1,
                s.len()
            )));
        }
        let index = scheme
            .encode(s)
            .map_err(|e| e.context(format!("encoding seed {}", i + 1)))?;
        let ind = TtTensor::rank1_indicator(&index, &shape)?;
        sum = Some(match sum {
            None => ind,
            Some(acc) => acc.add(&ind)?,
        });
    }
    let mut t = sum.expect("at least one seed");
    if t.max_rank() > rank {
        t = t.round(rank, 0.0)?;
    }
    let padded = pad_ranks(&t, rank);
    let mut cores = padded.into_cores();
    if noise_scale > 0.0 {
        for core in cores.iter_mut() {
            let scale = noise_scale * core.frobenius_norm() / (core.data().len() as f64).sqrt();
            for x in core.data_mut() {
                // gen::<f64>() is in [0, 1); flip to (0, 1].
                *x += scale * (1.0 - rng.gen::<f64>());
            }
        }
    }
    TtTensor::from_cores(cores)
}

/// Embeds `t` into a tensor with interior ranks `min(rank, caps)` by
/// zero padding; values are unchanged.
fn pad_ranks(t: &TtTensor, rank: usize) -> TtTensor {
    let shape = t.mode_sizes();
    let target = crate::tt::capped_ranks(&shape, rank);
    let old = t.ranks();
    let cores = t
        .cores()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (l, n, r) = (target[k].max(old[k]), shape[k], target[k + 1].max(old[k + 1]));
            let mut out = Core::zeros(l, n, r);
            for a in 0..old[k] {
                for j in 0..n {
                    for b in 0..old[k + 1] {
                        out.set(a, j, b, c.get(a, j, b));
                    }
                }
            }
            out
        })
        .collect();
    TtTensor::from_cores(cores).expect("padded ranks stay consistent")
}

/// Minimizes `objective` over the grid `mode_sizes`. Candidates rejected by
/// `approve` cost nothing. `init` defaults to a random tensor of rank
/// `cfg.rank`.
pub fn minimize<F, A, R>(
    objective: &F,
    mode_sizes: &[usize],
    approve: &A,
    cfg: &ProtesConfig,
    init: Option<TtTensor>,
    rng: &mut R,
) -> Result<ProtesResult>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
    A: Fn(&[usize]) -> bool + Sync,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mut t = match init {
        Some(t) => {
            if t.mode_sizes() != mode_sizes {
                return Err(Error::Config(format!(
                    "initial tensor has modes {:?}, expected {mode_sizes:?}",
                    t.mode_sizes()
                )));
            }
            t
        }
        None => TtTensor::random(mode_sizes, cfg.rank, rng)?,
    };
    let mut best_index: Vec<usize> = Vec::new();
    let mut best_value = f64::INFINITY;
    let mut evaluations = 0;
    let mut trace = ProtesTrace::default();
    let mut idle = 0;
    let mut adam = AdamState::new(&t);
    while evaluations < cfg.budget {
        let samples = t.sample(cfg.samples_per_iter, rng)?;
        let keep: Vec<bool> = samples.par_iter().map(|s| approve(s)).collect();
        let mut approved: Vec<Vec<usize>> = samples
            .into_iter()
            .zip(keep)
            .filter_map(|(s, k)| k.then_some(s))
            .collect();
        approved.truncate(cfg.budget - evaluations);
        if approved.is_empty() {
            idle += 1;
            trace.iterations.push(IterationRecord {
                proposed: cfg.samples_per_iter,
                approved: 0,
                best_value,
                cumulative_evals: evaluations,
                new_best: None,
                iteration_best: None,
            });
            if idle >= cfg.stagnation_limit {
                return Err(Error::Stagnation(idle));
            }
            continue;
        }
        idle = 0;
        let values: Vec<f64> = approved
            .par_iter()
            .map(|idx| {
                objective(idx).map_err(|e| e.context(format!("objective at index {idx:?}")))
            })
            .collect::<Result<_>>()?;
        evaluations += approved.len();
        let mut order: Vec<usize> = (0..approved.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut new_best = None;
        if values[order[0]] < best_value {
            best_value = values[order[0]];
            best_index = approved[order[0]].clone();
            new_best = Some(best_index.clone());
        }
        trace.iterations.push(IterationRecord {
            proposed: cfg.samples_per_iter,
            approved: approved.len(),
            best_value,
            cumulative_evals: evaluations,
            new_best,
            iteration_best: Some(approved[order[0]].clone()),
        });
        if evaluations >= cfg.budget {
            break;
        }
        let elite: Vec<Vec<usize>> = order
            .iter()
            .take(cfg.elite_count)
            .map(|&i| approved[i].clone())
            .collect();
        t = match cfg.update_rule {
            UpdateRule::Sgd => update_step(&t, &elite, cfg.learning_rate, cfg.gradient_steps)?,
            UpdateRule::Adam => {
                adam_update_step(&t, &elite, cfg.learning_rate, cfg.gradient_steps, &mut adam)?
            }
        };
        let log_z = t.log_normalizer()?;
        if !log_z.is_finite() {
            return Err(Error::Degenerate(format!("normalizer became {log_z}")));
        }
    }
    Ok(ProtesResult {
        best_index,
        best_value,
        evaluations,
        trace,
        tensor: t,
    })
}
