//! Run orchestration: configuration, presets, single runs, seeded
//! benchmarks, metrics, and pair-distance histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{Configuration, EncodingScheme, GridAxis};
use crate::error::{Error, Result};
use crate::potential::{penalized, ExternalPotential, LennardJones, LjParams, PotentialModel};
use crate::protes::{self, ProtesConfig};
use crate::refine::{refine, RefineOptions};
use crate::ttopt::{self, TtOptConfig};
use crate::xyz::read_xyz_file;

pub const DEFAULT_SUCCESS_TOL: f64 = 1e-4;
pub const CSV_HEADER: &str = "atoms,optimizer,encoding,init,pc,lct,lcl,re,sr";
const BIN_EDGE_SLACK: f64 = 1e-9;
pub const PRESETS: [&str; 3] = ["lj-direct", "lj-sr", "lj-cr"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Ttopt,
    Protes,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Ttopt => "ttopt",
            Optimizer::Protes => "protes",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ttopt" => Ok(Optimizer::Ttopt),
            "protes" => Ok(Optimizer::Protes),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (ttopt, protes)"))),
        }
    }
}

fn default_timeout() -> f64 {
    30.0
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PotentialSpec {
    Lj {
        #[serde(default = "default_scale")]
        epsilon: f64,
        #[serde(default = "default_scale")]
        sigma: f64,
    },
    External {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        /// Child processes; defaults to the worker thread count.
        #[serde(default)]
        lanes: Option<usize>,
        #[serde(default = "default_scale")]
        energy_scale: f64,
    },
}

impl Default for PotentialSpec {
    fn default() -> Self {
        PotentialSpec::Lj {
            epsilon: 1.0,
            sigma: 1.0,
        }
    }
}

impl PotentialSpec {
    pub fn build(&self) -> Result<Box<dyn PotentialModel>> {
        Ok(match self {
            PotentialSpec::Lj { epsilon, sigma } => Box::new(LennardJones::new(LjParams::new(*epsilon, *sigma)?)),
            PotentialSpec::External {
                command,
                timeout_secs,
                lanes,
                energy_scale,
            } => {
                if !(*timeout_secs > 0.0) {
                    return Err(Error::Config("timeout_secs must be positive".into()));
                }
                let lanes = lanes.unwrap_or_else(rayon::current_num_threads).max(1);
                Box::new(
                    ExternalPotential::new(command, Duration::from_secs_f64(*timeout_secs), lanes)?
                        .with_energy_scale(*energy_scale),
                )
            }
        })
    }

    /// Reduced LJ units, where the bundled reference table applies.
    pub fn is_reduced_lj(&self) -> bool {
        *self
            == PotentialSpec::Lj {
                epsilon: 1.0,
                sigma: 1.0,
            }
    }
}

fn default_success_tol() -> f64 {
    DEFAULT_SUCCESS_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub atom_count: usize,
    pub optimizer: Optimizer,
    pub encoding: EncodingScheme,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub protes: ProtesConfig,
    #[serde(default)]
    pub ttopt: TtOptConfig,
    #[serde(default)]
    pub refine: RefineOptions,
    /// Global-search energy evaluations.
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds_file: Option<PathBuf>,
    #[serde(default)]
    pub reference_energy: Option<f64>,
    #[serde(default = "default_success_tol")]
    pub success_tol: f64,
    /// Refine every improvement of the global best instead of only the
    /// final one.
    #[serde(default)]
    pub refine_every_iteration: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.atom_count < 2 {
            return Err(Error::Config(format!("atom_count must be >= 2, got {}", self.atom_count)));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if !(self.success_tol > 0.0) {
            return Err(Error::Config("success_tol must be positive".into()));
        }
        self.encoding.validate()?;
        if self.seeds_file.is_some() && self.optimizer == Optimizer::Ttopt {
            return Err(Error::Config("seeds_file is only used by protes".into()));
        }
        Ok(())
    }

    pub fn init_name(&self) -> &'static str {
        if self.seeds_file.is_some() {
            "phys"
        } else {
            "agn"
        }
    }

    pub fn encoding_name(&self) -> String {
        let base = self.encoding.variant.name();
        match self.encoding.bit_coding {
            Some(b) => format!("{base}-b{}q{}", b.base, b.digits),
            None => base.to_string(),
        }
    }
}

/// Named configurations: `lj-direct` (TTOpt, box `[-2, 2]`, 32 points per
/// coordinate as five binary digits), `lj-sr` (PROTES, simple relative,
/// `r` in `[1, 1.2]` on 16 points, 16 polar and 32 azimuthal points) and
/// `lj-cr` (PROTES, angle-restricted relative, 32 `r` points).
pub fn preset(name: &str, atoms: usize) -> Result<RunConfig> {
    let r_axis = |points| GridAxis::new(1.0, 1.2, points);
    let (optimizer, encoding, budget) = match name {
        "lj-direct" => (
            Optimizer::Ttopt,
            EncodingScheme::direct(-2.0, 2.0, 32)?.with_bit_coding(2, 5)?,
            50_000,
        ),
        "lj-sr" => (
            Optimizer::Protes,
            EncodingScheme::simple_relative(r_axis(16)?, 16, 32)?,
            50_000,
        ),
        "lj-cr" => (
            Optimizer::Protes,
            EncodingScheme::angle_restricted_relative(r_axis(32)?, 16, 32, 0.0)?,
            50_000,
        ),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    let cfg = RunConfig {
        atom_count: atoms,
        optimizer,
        encoding,
        potential: PotentialSpec::default(),
        protes: ProtesConfig::default(),
        ttopt: TtOptConfig::default(),
        refine: RefineOptions::default(),
        budget,
        seed: 0,
        seeds_file: None,
        reference_energy: reference_energy(atoms),
        success_tol: DEFAULT_SUCCESS_TOL,
        refine_every_iteration: false,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn reference_table() -> &'static BTreeMap<usize, f64> {
    static TABLE: OnceLock<BTreeMap<usize, f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        include_str!("../data/lj_minima.csv")
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (m, e) = l.split_once(',').expect("atoms,energy rows");
                (m.trim().parse().expect("atom count"), e.trim().parse().expect("energy"))
            })
            .collect()
    })
}

/// Putative global-minimum LJ energy (reduced units) for `m` atoms.
pub fn reference_energy(m: usize) -> Option<f64> {
    reference_table().get(&m).copied()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub atoms: usize,
    pub optimizer: String,
    pub encoding: String,
    pub init: String,
    /// Global-search energy evaluations.
    pub pc: usize,
    /// Model calls summed over all refinements.
    pub lct: u64,
    /// Model calls of the last refinement.
    pub lcl: u64,
    pub refinements: usize,
    /// Best global-search value, before refinement.
    pub search_energy: f64,
    pub best_energy: f64,
    /// Refined energy of the final search best alone; equals `best_energy`
    /// in single-hop mode.
    pub single_hop_energy: f64,
    /// NaN when no reference energy is known.
    pub relative_error: f64,
    pub success: Option<bool>,
    pub refine_converged: bool,
    /// TTOpt matrix entries requested, memoized repeats included.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_queries: Option<usize>,
    pub wall_time_secs: f64,
    pub best_index: Vec<usize>,
    pub final_structure: Configuration,
}

pub fn relative_error(energy: f64, reference: Option<f64>) -> f64 {
    match reference {
        Some(r) => (energy - r).abs() / r.abs(),
        None => f64::NAN,
    }
}

/// Reads seed structures from an XYZ file.
pub fn load_seeds(path: &std::path::Path, atoms: usize) -> Result<Vec<Configuration>> {
    let frames = read_xyz_file(path)?;
    frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            if f.configuration.len() != atoms {
                Err(Error::Config(format!(
                    "seed frame {} in {} has {} atoms, expected {atoms}",
                    i + 1,
                    path.display(),
                    f.configuration.len()
                )))
            } else {
                Ok(f.configuration)
            }
        })
        .collect()
}

/// Builds the potential and seed structures named by `cfg`, then runs.
pub fn run_single(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let model = cfg.potential.build()?;
    let seeds = match &cfg.seeds_file {
        Some(p) => Some(load_seeds(p, cfg.atom_count)?),
        None => None,
    };
    run_with_model(cfg, model.as_ref(), seeds.as_deref())
}

/// Global search, decoding, and refinement under a given model.
pub fn run_with_model(
    cfg: &RunConfig,
    model: &dyn PotentialModel,
    seeds: Option<&[Configuration]>,
) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let m = cfg.atom_count;
    let scheme = &cfg.encoding;
    let shape = scheme.tensor_shape(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = model.energy_scale();
    let objective = |idx: &[usize]| -> Result<f64> {
        let c = scheme.decode_m(m, idx)?;
        penalized(model.energy(&c), scale)
    };

    let (best_index, search_energy, pc, total_queries, iteration_bests) = match cfg.optimizer {
        Optimizer::Protes => {
            let pcfg = ProtesConfig {
                budget: cfg.budget,
                ..cfg.protes
            };
            let init = match seeds {
                Some(s) => Some(protes::build_init_tensor(s, scheme, pcfg.rank, pcfg.noise_scale, &mut rng)?),
                None => None,
            };
            let approve = |idx: &[usize]| {
                scheme
                    .decode_m(m, idx)
                    .is_ok_and(|c| scheme.check_feasible(&c, pcfg.d_min))
            };
            let r = protes::minimize(&objective, &shape, &approve, &pcfg, init, &mut rng)
                .map_err(|e| e.context("protes search"))?;
            let iteration_bests: Vec<Vec<usize>> = r
                .trace
                .iterations
                .into_iter()
                .filter_map(|it| it.iteration_best)
                .collect();
            (r.best_index, r.best_value, r.evaluations, None, iteration_bests)
        }
        Optimizer::Ttopt => {
            let tcfg = TtOptConfig {
                budget: cfg.budget,
                ..cfg.ttopt
            };
            let r = ttopt::minimize(&objective, &shape, &tcfg, &mut rng)
                .map_err(|e| e.context("ttopt search"))?;
            (
                r.best_index,
                r.best_value,
                r.state.unique_evals,
                Some(r.state.total_queries),
                r.state.cycle_bests,
            )
        }
    };

    // Distinct iteration bests first, then the overall best last, so the
    // last refinement is always the single hop.
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    if cfg.refine_every_iteration {
        let mut seen = std::collections::HashSet::new();
        seen.insert(best_index.clone());
        for idx in iteration_bests {
            if seen.insert(idx.clone()) {
                candidates.push(idx);
            }
        }
    }
    candidates.push(best_index.clone());
    let bounds = scheme.bounds(m);
    let mut lct = 0;
    let mut lcl = 0;
    let mut single_hop_energy = f64::NAN;
    let mut best: Option<(f64, Configuration, bool)> = None;
    for idx in &candidates {
        let start_cfg = scheme.decode_m(m, idx)?;
        let r = refine(model, &start_cfg, bounds.as_deref(), &cfg.refine)
            .map_err(|e| e.context("local refinement"))?;
        lct += r.energy_evals;
        lcl = r.energy_evals;
        single_hop_energy = r.final_energy;
        if best.as_ref().is_none_or(|(e, ..)| r.final_energy < *e) {
            best = Some((r.final_energy, r.final_positions, r.converged));
        }
    }
    let (best_energy, final_structure, refine_converged) =
        best.ok_or_else(|| Error::Config("global search produced no candidate".into()))?;
    let re = relative_error(best_energy, cfg.reference_energy);
    Ok(RunResult {
        seed: cfg.seed,
        atoms: m,
        optimizer: cfg.optimizer.name().into(),
        encoding: cfg.encoding_name(),
        init: cfg.init_name().into(),
        pc,
        lct,
        lcl,
        refinements: candidates.len(),
        search_energy,
        best_energy,
        single_hop_energy,
        relative_error: re,
        success: cfg.reference_energy.map(|_| re < cfg.success_tol),
        refine_converged,
        total_queries,
        wall_time_secs: start.elapsed().as_secs_f64(),
        best_index,
        final_structure,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<RunResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub atoms: usize,
    pub optimizer: String,
    pub encoding: String,
    pub init: String,
    pub runs: usize,
    pub failures: usize,
    pub successes: usize,
    /// Runs whose final search best alone refined to the reference.
    pub single_hop_successes: usize,
    pub mean_pc: f64,
    pub mean_lct: f64,
    pub mean_lcl: f64,
    /// Mean relative error over successful runs.
    pub mean_re: f64,
    /// Percentage of runs with a reference that succeeded; NaN if none had one.
    pub sr: f64,
    pub outcomes: Vec<SeedOutcome>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aggregates per-seed outcomes. Failed runs are excluded from the means and
/// count as non-successes.
pub fn aggregate(cfg: &RunConfig, outcomes: Vec<SeedOutcome>) -> Summary {
    let ok: Vec<&RunResult> = outcomes.iter().filter_map(|o| o.result.as_ref()).collect();
    let failures = outcomes.len() - ok.len();
    let successes = ok.iter().filter(|r| r.success == Some(true)).count();
    let scored = ok.iter().filter(|r| r.success.is_some()).count() + failures;
    let sr = if ok.iter().any(|r| r.success.is_some()) || (ok.is_empty() && cfg.reference_energy.is_some()) {
        100.0 * successes as f64 / scored as f64
    } else {
        f64::NAN
    };
    Summary {
        atoms: cfg.atom_count,
        optimizer: cfg.optimizer.name().into(),
        encoding: cfg.encoding_name(),
        init: cfg.init_name().into(),
        runs: outcomes.len(),
        failures,
        successes,
        single_hop_successes: ok
            .iter()
            .filter(|r| {
                cfg.reference_energy
                    .is_some_and(|_| relative_error(r.single_hop_energy, cfg.reference_energy) < cfg.success_tol)
            })
            .count(),
        mean_pc: mean(ok.iter().map(|r| r.pc as f64)),
        mean_lct: mean(ok.iter().map(|r| r.lct as f64)),
        mean_lcl: mean(ok.iter().map(|r| r.lcl as f64)),
        mean_re: mean(
            ok.iter()
                .filter(|r| r.success == Some(true))
                .map(|r| r.relative_error),
        ),
        sr,
        outcomes,
    }
}

/// Runs `cfg` once per seed, in seed-list order.
pub fn run_benchmark(cfg: &RunConfig, seeds: &[u64]) -> Result<Summary> {
    if seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    cfg.validate()?;
    let model = cfg.potential.build()?;
    let init = match &cfg.seeds_file {
        Some(p) => Some(load_seeds(p, cfg.atom_count)?),
        None => None,
    };
    let outcomes = seeds
        .iter()
        .map(|&seed| {
            let run_cfg = RunConfig {
                seed,
                ..cfg.clone()
            };
            match run_with_model(&run_cfg, model.as_ref(), init.as_deref()) {
                Ok(r) => {
                    log::info!(
                        "seed {seed}: E = {:.6}, pc = {}, re = {:.3e}",
                        r.best_energy,
                        r.pc,
                        r.relative_error
                    );
                    SeedOutcome {
                        seed,
                        result: Some(r),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("seed {seed} failed: {e}");
                    SeedOutcome {
                        seed,
                        result: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(aggregate(cfg, outcomes))
}

impl Summary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.1},{:.1},{:.3e},{:.1}",
            self.atoms,
            self.optimizer,
            self.encoding,
            self.init,
            self.mean_pc,
            self.mean_lct,
            self.mean_lcl,
            self.mean_re,
            self.sr
        )
    }
}

pub fn summaries_csv(summaries: &[Summary]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for sum in summaries {
        s.push_str(&sum.csv_row());
        s.push('\n');
    }
    s
}

/// Parses `1,2,5` or `0..10` (end exclusive) or `0..=9`, or a mix joined by
/// commas.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("bad seed list entry {part:?}"));
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let (b, inclusive) = match b.strip_prefix('=') {
                Some(b) => (b, true),
                None => (b, false),
            };
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            let end = if inclusive { b + 1 } else { b };
            out.extend(a..end);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(out)
}

/// Pair-distance counts in bins `[k w, (k + 1) w)`, occupied bins only,
/// keyed by bin center. Distances within `1e-9` bin widths below an edge
/// are counted in the upper bin, so rounding in the distance computation
/// does not split equal distances.
pub fn pairwise_histogram(c: &Configuration, bin_width: f64) -> Result<Vec<(f64, usize)>> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::Domain(format!("bin width must be positive, got {bin_width}")));
    }
    let mut bins: BTreeMap<u64, usize> = BTreeMap::new();
    for d in c.pair_distances() {
        *bins.entry((d / bin_width + BIN_EDGE_SLACK).floor() as u64).or_default() += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(k, n)| ((k as f64 + 0.5) * bin_width, n))
        .collect())
}

pub fn histogram_csv(bins: &[(f64, usize)]) -> String {
    let mut s = String::from("bin_center,count\n");
    for (center, count) in bins {
        let _ = writeln!(s, "{center},{count}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::icosahedron13;

    fn dimer_cfg(optimizer: Optimizer) -> RunConfig {
        let mut cfg = preset("lj-sr", 2).unwrap();
        cfg.optimizer = optimizer;
        cfg.budget = 200;
        cfg.protes.samples_per_iter = 20;
        cfg.protes.elite_count = 4;
        cfg
    }

    #[test]
    fn dimer_runs_reach_minus_one() {
        for opt in [Optimizer::Protes, Optimizer::Ttopt] {
            let r = run_single(&dimer_cfg(opt)).unwrap();
            assert!((r.best_energy + 1.0).abs() < 1e-8, "{opt:?} {}", r.best_energy);
            assert_eq!(r.success, Some(true));
            assert_eq!(r.lct, r.lcl);
            assert_eq!(r.refinements, 1);
        }
    }

    #[test]
    fn missing_reference_gives_nan() {
        let mut cfg = dimer_cfg(Optimizer::Protes);
        cfg.reference_energy = None;
        let r = run_single(&cfg).unwrap();
        assert!(r.relative_error.is_nan());
        assert_eq!(r.success, None);
        let s = aggregate(
            &cfg,
            vec![SeedOutcome {
                seed: 0,
                result: Some(r),
                error: None,
            }],
        );
        assert!(s.sr.is_nan());
    }

    #[test]
    fn success_rate_arithmetic() {
        let cfg = dimer_cfg(Optimizer::Protes);
        let base = run_single(&cfg).unwrap();
        let mut outcomes = Vec::new();
        for (seed, ok) in [(0, true), (1, true), (2, false), (3, true)] {
            let mut r = base.clone();
            r.seed = seed;
            r.success = Some(ok);
            r.relative_error = if ok { 1e-9 } else { 1e-2 };
            r.pc = 10 * (seed as usize + 1);
            outcomes.push(SeedOutcome {
                seed,
                result: Some(r),
                error: None,
            });
        }
        let s = aggregate(&cfg, outcomes);
        assert_eq!(s.sr, 75.0);
        assert_eq!(s.mean_pc, 25.0);
        assert!((s.mean_re - 1e-9).abs() < 1e-20);
    }

    #[test]
    fn failed_runs_count_against_success_rate() {
        let cfg = dimer_cfg(Optimizer::Protes);
        let mut r = run_single(&cfg).unwrap();
        r.success = Some(true);
        let s = aggregate(
            &cfg,
            vec![
                SeedOutcome {
                    seed: 0,
                    result: Some(r),
                    error: None,
                },
                SeedOutcome {
                    seed: 1,
                    result: None,
                    error: Some("boom".into()),
                },
            ],
        );
        assert_eq!(s.sr, 50.0);
        assert_eq!(s.failures, 1);
    }

    #[test]
    fn csv_is_deterministic() {
        let cfg = dimer_cfg(Optimizer::Protes);
        let a = summaries_csv(&[run_benchmark(&cfg, &[1, 2, 3]).unwrap()]);
        let b = summaries_csv(&[run_benchmark(&cfg, &[1, 2, 3]).unwrap()]);
        assert_eq!(a, b);
        assert!(a.starts_with("atoms,optimizer,encoding,init,pc,lct,lcl,re,sr\n"));
        assert_eq!(a.lines().nth(1).unwrap().split(',').count(), 9);
    }

    #[test]
    fn reference_lookup() {
        assert_eq!(reference_energy(13), Some(-44.326801));
        assert_eq!(reference_energy(26), Some(-108.315616));
        assert_eq!(reference_energy(2), Some(-1.0));
        assert_eq!(reference_energy(46), None);
        for m in 5..=45 {
            assert!(reference_energy(m).is_some(), "{m}");
        }
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1,2, 5").unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_seed_list("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seed_list("0..=2,7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_seed_list("a").is_err());
        assert!(parse_seed_list("").is_err());
    }

    #[test]
    fn histograms() {
        let dimer = Configuration::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let h = pairwise_histogram(&dimer, 0.1).unwrap();
        assert_eq!(h.len(), 1);
        assert!((h[0].0 - 1.05).abs() < 1e-12);
        assert_eq!(h[0].1, 1);

        let tri = Configuration::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, 0.75f64.sqrt(), 0.0]]).unwrap();
        let h = pairwise_histogram(&tri, 0.1).unwrap();
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 3);
        assert_eq!(h.len(), 1);

        // Icosahedron: 12 center-vertex distances sit below every
        // vertex-vertex distance, so they fill the lowest occupied bin.
        let ico = icosahedron13(1.01);
        let h = pairwise_histogram(&ico, 0.02).unwrap();
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), 78);
        assert_eq!(h[0].1, 12);
        assert!(pairwise_histogram(&ico, 0.0).is_err());
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = preset("lj-direct", 13).unwrap();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(preset("lj-xyz", 13).is_err());
        let bad = text.replace("atom_count = 13", "atom_count = 13\nbogus = 1");
        assert!(RunConfig::from_toml(&bad).is_err());
        let minimal = r#"
            atom_count = 5
            optimizer = "protes"
            budget = 1000
            [encoding]
            variant = "simple-relative"
            r = { low = 1.0, high = 1.2, points = 8 }
            n_theta = 8
            n_phi = 16
        "#;
        let c = RunConfig::from_toml(minimal).unwrap();
        assert_eq!(c.potential, PotentialSpec::default());
        assert_eq!(c.reference_energy, None);
        assert_eq!(c.protes, ProtesConfig { budget: c.protes.budget, ..ProtesConfig::default() });
    }
}
