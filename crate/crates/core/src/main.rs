use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ttcluster::bench::{
    histogram_csv, pairwise_histogram, parse_seed_list, preset, run_benchmark, run_single,
    summaries_csv, Optimizer, RunConfig,
};
use ttcluster::encoding::{EncodingScheme, Variant};
use ttcluster::potential::{serve, LennardJones};
use ttcluster::xyz::{read_xyz_file, to_xyz, DEFAULT_SYMBOL};
use ttcluster::{Error, Result};

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "TTCLUSTER_THREADS";

#[derive(Parser)]
#[command(name = "ttcluster", version, about = "Tensor-train global optimization of atomic clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one global search followed by a local refinement.
    Optimize(OptimizeArgs),
    /// Run a configuration over a list of seeds and write a CSV summary.
    Benchmark(BenchmarkArgs),
    /// Pair-distance histogram of a structure.
    Hist(HistArgs),
    /// Answer external-potential requests on stdin with Lennard-Jones values.
    #[command(name = "serve-lj", hide = true)]
    ServeLj,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Number of atoms.
    #[arg(long)]
    atoms: Option<usize>,
    /// ttopt or protes (defaults to the preset's choice).
    #[arg(long)]
    optimizer: Option<String>,
    /// direct, sr (simple relative), cd (constant distance) or cr (angle restricted).
    #[arg(long)]
    encoding: Option<String>,
    /// lj-direct, lj-sr or lj-cr.
    #[arg(long, default_value = "lj-sr")]
    preset: String,
    /// Run configuration file; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// XYZ file with seed structures for physical initialization.
    #[arg(long)]
    seeds_file: Option<PathBuf>,
    /// Refine every improvement of the search best, not only the final one.
    #[arg(long)]
    refine_every: bool,
    #[arg(long)]
    out_xyz: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: PathBuf,
    /// Seeds such as `0..10`, `0..=9` or `1,4,7`.
    #[arg(long, default_value = "0..10")]
    seeds: String,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Per-seed records as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    xyz: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    bin_width: f64,
    /// Frame to analyze, counted from zero.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::from(e).context(format!("writing {}", p.display()))),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn encoding_for(name: &str, base: &EncodingScheme) -> Result<EncodingScheme> {
    let relative_grid = |s: &EncodingScheme| match s.variant {
        Variant::SimpleRelative { r, n_theta, n_phi }
        | Variant::ConstDistRelative { r, n_theta, n_phi }
        | Variant::AngleRestrictedRelative { r, n_theta, n_phi, .. } => Some((r, n_theta, n_phi)),
        Variant::Direct { .. } => None,
    };
    let lj_sr = preset("lj-sr", 2)?.encoding;
    let (r, n_theta, n_phi) = relative_grid(base)
        .or_else(|| relative_grid(&lj_sr))
        .expect("relative preset");
    match name {
        "direct" => Ok(match base.variant {
            Variant::Direct { .. } => base.clone(),
            _ => preset("lj-direct", 2)?.encoding,
        }),
        "sr" | "simple-relative" => EncodingScheme::simple_relative(r, n_theta, n_phi),
        "cd" | "const-dist-relative" => EncodingScheme::const_dist_relative(r, n_theta, n_phi),
        "cr" | "angle-restricted-relative" => match base.variant {
            Variant::AngleRestrictedRelative { .. } => Ok(base.clone()),
            _ => Ok(preset("lj-cr", 2)?.encoding),
        },
        _ => Err(Error::Config(format!(
            "unknown encoding {name:?} (direct, sr, cd, cr)"
        ))),
    }
}

fn optimize(args: OptimizeArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_toml(
            &fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?,
        )?,
        None => preset(
            &args.preset,
            args.atoms
                .ok_or_else(|| Error::Config("--atoms is required without --config".into()))?,
        )?,
    };
    if let Some(m) = args.atoms {
        if m != cfg.atom_count {
            cfg.atom_count = m;
            cfg.reference_energy = if cfg.potential.is_reduced_lj() {
                ttcluster::bench::reference_energy(m)
            } else {
                None
            };
        }
    }
    if let Some(o) = &args.optimizer {
        cfg.optimizer = o.parse::<Optimizer>()?;
    }
    if let Some(e) = &args.encoding {
        cfg.encoding = encoding_for(e, &cfg.encoding)?;
    }
    if let Some(b) = args.budget {
        cfg.budget = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.seeds_file.is_some() {
        cfg.seeds_file = args.seeds_file.clone();
    }
    if args.refine_every {
        cfg.refine_every_iteration = true;
    }
    let r = run_single(&cfg)?;
    println!(
        "atoms {} optimizer {} encoding {} init {}: E = {:.8}, search E = {:.6}, pc = {}, lct = {}, lcl = {}, re = {:.3e}",
        r.atoms, r.optimizer, r.encoding, r.init, r.best_energy, r.search_energy, r.pc, r.lct, r.lcl, r.relative_error
    );
    if let Some(p) = &args.out_xyz {
        let comment = format!("energy {:.10} seed {}", r.best_energy, r.seed);
        write_output(Some(p), &to_xyz(&r.final_structure, &comment, DEFAULT_SYMBOL))?;
    }
    if let Some(p) = &args.out_json {
        let json = serde_json::to_string_pretty(&r).expect("run record serializes");
        write_output(Some(p), &(json + "\n"))?;
    }
    Ok(())
}

fn benchmark(args: BenchmarkArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::from(e).context(format!("reading {}", args.config.display())))?;
    let cfg = RunConfig::from_toml(&text)?;
    let seeds = parse_seed_list(&args.seeds)?;
    let summary = run_benchmark(&cfg, &seeds)?;
    for o in &summary.outcomes {
        match (&o.result, &o.error) {
            (Some(r), _) => eprintln!(
                "seed {}: E = {:.8}, pc = {}, lcl = {}, re = {:.3e}",
                o.seed, r.best_energy, r.pc, r.lcl, r.relative_error
            ),
            (None, Some(e)) => eprintln!("seed {}: failed: {e}", o.seed),
            (None, None) => {}
        }
    }
    write_output(args.out_csv.as_deref(), &summaries_csv(std::slice::from_ref(&summary)))?;
    if let Some(p) = &args.out_json {
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_output(Some(p), &(json + "\n"))?;
    }
    Ok(())
}

fn hist(args: HistArgs) -> Result<()> {
    let frames = read_xyz_file(&args.xyz)?;
    let frame = frames.get(args.frame).ok_or_else(|| {
        Error::Config(format!(
            "{} has {} frame(s), asked for frame {}",
            args.xyz.display(),
            frames.len(),
            args.frame
        ))
    })?;
    let bins = pairwise_histogram(&frame.configuration, args.bin_width)?;
    write_output(args.out_csv.as_deref(), &histogram_csv(&bins))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Optimize(a) => optimize(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Hist(a) => hist(a),
        Command::ServeLj => {
            let stdin = io::stdin();
            serve(&LennardJones::default(), stdin.lock(), io::stdout().lock())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
