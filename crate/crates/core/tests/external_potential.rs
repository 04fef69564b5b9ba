use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttcluster::bench::{preset, run_single, PotentialSpec, RunConfig};
use ttcluster::potential::{ExternalPotential, LennardJones, PotentialModel};
use ttcluster::{Configuration, Error};

fn serve_command() -> String {
    format!("'{}' serve-lj", env!("CARGO_BIN_EXE_ttcluster"))
}

fn random_cluster(rng: &mut ChaCha8Rng, m: usize) -> Configuration {
    loop {
        let pts: Vec<[f64; 3]> = (0..m).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.5..1.5))).collect();
        let c = Configuration::new(pts).unwrap();
        if c.pair_distances().iter().all(|&d| d > 0.8) {
            return c;
        }
    }
}

#[test]
fn child_process_matches_in_process_lj() {
    let ext = ExternalPotential::new(&serve_command(), Duration::from_secs(30), 2).unwrap();
    let lj = LennardJones::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [2, 5, 9] {
        let c = random_cluster(&mut rng, m);
        let (e, g) = ext.energy_and_gradient(&c).unwrap();
        let (e0, g0) = lj.energy_and_gradient(&c).unwrap();
        assert_eq!(e, e0);
        assert_eq!(g, g0);
        assert_eq!(ext.energy(&c).unwrap(), e0);
    }
    let counts = ext.counts();
    assert_eq!((counts.energy, counts.gradient), (6, 3));
}

#[test]
fn parallel_requests_share_lanes() {
    let ext = ExternalPotential::new(&serve_command(), Duration::from_secs(30), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let configs: Vec<Configuration> = (0..24).map(|_| random_cluster(&mut rng, 4)).collect();
    let lj = LennardJones::default();
    let got = ext.energies(&configs);
    for (c, e) in configs.iter().zip(got) {
        assert_eq!(e.unwrap(), lj.energy(c).unwrap());
    }
}

#[test]
fn coincident_atoms_come_back_as_errors() {
    let ext = ExternalPotential::new(&serve_command(), Duration::from_secs(30), 1).unwrap();
    let c = Configuration::new(vec![[0.0; 3], [0.0; 3]]).unwrap();
    let err = ext.energy(&c).unwrap_err();
    assert!(matches!(err.root(), Error::Evaluator(_)), "{err}");
    // The lane survives a model error.
    let ok = Configuration::new(vec![[0.0; 3], [0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(ext.energy(&ok).unwrap(), 0.0);
}

#[test]
fn broken_command_fails() {
    let ext = ExternalPotential::new("exit 3", Duration::from_secs(5), 1);
    let c = Configuration::new(vec![[0.0; 3], [0.0, 0.0, 1.0]]).unwrap();
    let err = match ext {
        Err(e) => e,
        Ok(ext) => ext.energy(&c).unwrap_err(),
    };
    assert!(matches!(err.root(), Error::Evaluator(_)), "{err}");
}

#[test]
fn full_run_through_external_model() {
    let cfg = RunConfig {
        potential: PotentialSpec::External {
            command: serve_command(),
            timeout_secs: 30.0,
            lanes: Some(2),
            energy_scale: 1.0,
        },
        budget: 500,
        reference_energy: Some(-6.0),
        ..preset("lj-sr", 4).unwrap()
    };
    let r = run_single(&cfg).unwrap();
    assert!((r.best_energy + 6.0).abs() < 1e-8, "{}", r.best_energy);
    assert_eq!(r.success, Some(true));
    assert!(r.pc <= 500 && r.lct == r.lcl && r.lcl > 0);
}
