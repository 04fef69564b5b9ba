//! Local refinement by limited-memory BFGS.
//!
//! Without bounds the step length comes from a strong-Wolfe line search.
//! With bounds, the search direction is restricted to free variables and
//! the step is found by Armijo backtracking along the projected path, so
//! iterates never leave the box.

use crate::encoding::Configuration;
use crate::error::{Error, Result};
use crate::potential::PotentialModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    /// Stop when the projected gradient's max-norm is at most this.
    pub tol: f64,
    pub max_iters: usize,
    /// Number of stored correction pairs.
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            tol: 1e-4,
            max_iters: 2000,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub final_positions: Configuration,
    pub final_energy: f64,
    pub energy_evals: u64,
    pub gradient_evals: u64,
    pub converged: bool,
    pub iterations: usize,
}

/// Objective value and gradient, or `None` where the objective is singular.
pub type Eval = Option<(f64, Vec<f64>)>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn project(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (v, &(lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Gradient with components zeroed where a bound blocks descent.
fn projected_gradient(x: &[f64], g: &[f64], bounds: Option<&[(f64, f64)]>) -> Vec<f64> {
    match bounds {
        None => g.to_vec(),
        Some(b) => x
            .iter()
            .zip(g)
            .zip(b)
            .map(|((&xi, &gi), &(lo, hi))| {
                if (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect(),
    }
}

struct Memory {
    pairs: Vec<(Vec<f64>, Vec<f64>, f64)>,
    cap: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            return;
        }
        if self.pairs.len() == self.cap {
            self.pairs.remove(0);
        }
        self.pairs.push((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: `-H g` restricted to the `free` mask.
    fn direction(&self, g: &[f64], free: &[bool]) -> Vec<f64> {
        let mask = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(free)
                .map(|(x, &f)| if f { *x } else { 0.0 })
                .collect()
        };
        let mut q = mask(g);
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let s = mask(s);
            let y = mask(y);
            let a = rho * dot(&s, &q);
            q.iter_mut().zip(&y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.last() {
            let (s, y) = (mask(s), mask(y));
            let yy = dot(&y, &y);
            if yy > 0.0 {
                let gamma = dot(&s, &y) / yy;
                if gamma > 0.0 {
                    q.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let s = mask(s);
            let y = mask(y);
            let b = rho * dot(&y, &q);
            q.iter_mut().zip(&s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe line search along `d` (unbounded problems).
fn wolfe_search<F>(
    eval: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    opts: &RefineOptions,
) -> Result<Option<Trial>>
where
    F: FnMut(&[f64]) -> Result<Eval>,
{
    let dphi0 = dot(g0, d);
    let mut at = |alpha: f64| -> Result<Option<(Trial, f64)>> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        Ok(eval(&xt)?.and_then(|(f, g)| {
            f.is_finite().then(|| {
                let dphi = dot(&g, d);
                (Trial { alpha, x: xt, f, g }, dphi)
            })
        }))
    };
    let armijo = |alpha: f64, f: f64| f <= f0 + opts.c1 * alpha * dphi0;
    let mut best: Option<Trial> = None;
    let keep_best = |t: &Trial, best: &mut Option<Trial>| {
        if t.f < f0 && armijo(t.alpha, t.f) && best.as_ref().map_or(true, |b| t.f < b.f) {
            *best = Some(Trial {
                alpha: t.alpha,
                x: t.x.clone(),
                f: t.f,
                g: t.g.clone(),
            });
        }
    };

    // Bracketing phase; `lo` holds (alpha, f, dphi) of the best Armijo point.
    let mut lo = (0.0, f0, dphi0);
    let mut hi: Option<(f64, f64)> = None;
    let mut alpha = alpha0;
    for i in 0..30 {
        match at(alpha)? {
            None => {
                hi = Some((alpha, f64::INFINITY));
                break;
            }
            Some((t, dphi)) => {
                keep_best(&t, &mut best);
                if !armijo(alpha, t.f) || (i > 0 && t.f >= lo.1) {
                    hi = Some((alpha, t.f));
                    break;
                }
                if dphi.abs() <= -opts.c2 * dphi0 {
                    return Ok(Some(t));
                }
                if dphi >= 0.0 {
                    hi = Some((lo.0, lo.1));
                    lo = (alpha, t.f, dphi);
                    break;
                }
                lo = (alpha, t.f, dphi);
                alpha *= 2.0;
            }
        }
    }
    let Some(mut hi) = hi else {
        return Ok(best);
    };

    // Zoom phase.
    for _ in 0..40 {
        let (a_lo, f_lo, d_lo) = lo;
        let (a_hi, f_hi) = hi;
        let width = a_hi - a_lo;
        if width.abs() < 1e-16 * a_lo.abs().max(1.0) {
            break;
        }
        // Quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi) when finite.
        let mut trial = a_lo + 0.5 * width;
        if f_hi.is_finite() {
            let denom = 2.0 * (f_hi - f_lo - d_lo * width);
            if denom > 0.0 {
                let q = a_lo - d_lo * width * width / denom;
                let (l, h) = if width > 0.0 {
                    (a_lo + 0.1 * width, a_hi - 0.1 * width)
                } else {
                    (a_hi - 0.1 * width, a_lo + 0.1 * width)
                };
                if q.is_finite() {
                    trial = q.clamp(l.min(h), l.max(h));
                }
            }
        }
        match at(trial)? {
            None => hi = (trial, f64::INFINITY),
            Some((t, dphi)) => {
                keep_best(&t, &mut best);
                if !armijo(trial, t.f) || t.f >= f_lo {
                    hi = (trial, t.f);
                } else {
                    if dphi.abs() <= -opts.c2 * dphi0 {
                        return Ok(Some(t));
                    }
                    if dphi * (a_hi - a_lo) >= 0.0 {
                        hi = (a_lo, f_lo);
                    }
                    lo = (trial, t.f, dphi);
                }
            }
        }
    }
    Ok(best)
}

/// Armijo backtracking along the projected path `P(x + alpha d)`.
#[allow(clippy::too_many_arguments)]
fn projected_search<F>(
    eval: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
    bounds: &[(f64, f64)],
    opts: &RefineOptions,
) -> Result<Option<Trial>>
where
    F: FnMut(&[f64]) -> Result<Eval>,
{
    let mut alpha = alpha0;
    for _ in 0..60 {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        project(&mut xt, Some(bounds));
        let step: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
        if max_norm(&step) == 0.0 {
            return Ok(None);
        }
        if let Some((f, g)) = eval(&xt)? {
            if f.is_finite() && f < f0 && f <= f0 + opts.c1 * dot(g0, &step) {
                return Ok(Some(Trial { alpha, x: xt, f, g }));
            }
        }
        alpha *= 0.5;
    }
    Ok(None)
}

/// Minimizes `eval` from `x0`. `eval` returns `None` at singular points,
/// which line searches treat as `+inf`.
pub fn minimize<F>(
    mut eval: F,
    x0: &[f64],
    bounds: Option<&[(f64, f64)]>,
    opts: &RefineOptions,
) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<Eval>,
{
    if let Some(b) = bounds {
        if b.len() != x0.len() {
            return Err(Error::Domain(format!(
                "{} bounds for {} variables",
                b.len(),
                x0.len()
            )));
        }
        if b.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Domain("empty bound interval".into()));
        }
    }
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut f, mut g) = eval(&x)?
        .filter(|(f, _)| f.is_finite())
        .ok_or_else(|| Error::Domain("refinement start point is singular".into()))?;
    let mut memory = Memory {
        pairs: Vec::new(),
        cap: opts.memory.max(1),
    };
    let mut iterations = 0;
    let mut converged = false;
    let mut retried = false;
    while iterations < opts.max_iters {
        let pg = projected_gradient(&x, &g, bounds);
        if max_norm(&pg) <= opts.tol {
            converged = true;
            break;
        }
        let free: Vec<bool> = match bounds {
            None => vec![true; x.len()],
            Some(b) => x
                .iter()
                .zip(&g)
                .zip(b)
                .map(|((&xi, &gi), &(lo, hi))| !((xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0)))
                .collect(),
        };
        let mut d = memory.direction(&g, &free);
        if !(dot(&d, &g) < 0.0) || d.iter().any(|v| !v.is_finite()) {
            memory.pairs.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let alpha0 = if memory.pairs.is_empty() {
            (1.0 / max_norm(&d)).min(1.0)
        } else {
            1.0
        };
        let trial = match bounds {
            None => wolfe_search(&mut eval, &x, f, &g, &d, alpha0, opts)?,
            Some(b) => projected_search(&mut eval, &x, f, &g, &d, alpha0, b, opts)?,
        };
        let Some(t) = trial else {
            if memory.pairs.is_empty() || retried {
                break;
            }
            memory.pairs.clear();
            retried = true;
            continue;
        };
        retried = false;
        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        memory.push(s, y);
        x = t.x;
        f = t.f;
        g = t.g;
        iterations += 1;
    }
    if !converged {
        converged = max_norm(&projected_gradient(&x, &g, bounds)) <= opts.tol;
    }
    Ok(Minimum {
        x,
        f,
        gradient: g,
        iterations,
        converged,
    })
}

/// Refines a configuration under `model`. Singular points are rejected by
/// the line search; other model failures abort the refinement.
pub fn refine(
    model: &dyn PotentialModel,
    start: &Configuration,
    bounds: Option<&[(f64, f64)]>,
    opts: &RefineOptions,
) -> Result<RefineResult> {
    let before = model.counts();
    let eval = |x: &[f64]| -> Result<Eval> {
        let c = Configuration::from_flat(x)?;
        match model.energy_and_gradient(&c) {
            Ok((e, g)) => Ok(Some((e, g.into_iter().flatten().collect()))),
            Err(err) if matches!(err.root(), Error::Singularity(..)) => Ok(None),
            Err(err) => Err(err),
        }
    };
    let min = minimize(eval, &start.flat(), bounds, opts)?;
    let used = model.counts().since(before);
    Ok(RefineResult {
        final_positions: Configuration::from_flat(&min.x)?,
        final_energy: min.f,
        energy_evals: used.energy,
        gradient_evals: used.gradient,
        converged: min.converged,
        iterations: min.iterations,
    })
}
