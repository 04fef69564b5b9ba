//! Energy models: Lennard-Jones and an external process speaking a small
//! line protocol.
//!
//! Wire protocol, per request over the child's stdin/stdout: the request is
//! an XYZ block (count, comment, `symbol x y z` lines). The reply is
//! `E <energy>`, then optionally one `F <fx> <fy> <fz>` line per atom, then
//! `OK`. Reals are written in scientific notation with 17 significant
//! digits. Forces are the negative gradient.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::encoding::Configuration;
use crate::error::{Error, Result};

/// Pairs closer than this are singular.
pub const SINGULAR_DISTANCE: f64 = 1e-12;

/// Global-search energies are capped at `PENALTY_FACTOR * epsilon`.
pub const PENALTY_FACTOR: f64 = 1e6;

pub type Gradient = Vec<[f64; 3]>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub energy: u64,
    pub gradient: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.energy + self.gradient
    }

    pub fn since(&self, earlier: CallCounts) -> CallCounts {
        CallCounts {
            energy: self.energy - earlier.energy,
            gradient: self.gradient - earlier.gradient,
        }
    }
}

/// Monotone call counters shared by every model.
#[derive(Debug, Default)]
pub struct Counter {
    energy: AtomicU64,
    gradient: AtomicU64,
}

impl Counter {
    pub fn record(&self, energy: bool, gradient: bool) {
        if energy {
            self.energy.fetch_add(1, Ordering::Relaxed);
        }
        if gradient {
            self.gradient.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            energy: self.energy.load(Ordering::Relaxed),
            gradient: self.gradient.load(Ordering::Relaxed),
        }
    }
}

pub trait PotentialModel: Send + Sync {
    fn energy(&self, c: &Configuration) -> Result<f64>;

    fn gradient(&self, c: &Configuration) -> Result<Gradient> {
        Ok(self.energy_and_gradient(c)?.1)
    }

    /// Energy and gradient together; counts one call of each.
    fn energy_and_gradient(&self, c: &Configuration) -> Result<(f64, Gradient)>;

    fn counts(&self) -> CallCounts;

    /// Energy scale used for the global-search penalty cap.
    fn energy_scale(&self) -> f64 {
        1.0
    }

    /// Energies of many configurations, in input order.
    fn energies(&self, configs: &[Configuration]) -> Vec<Result<f64>> {
        configs.par_iter().map(|c| self.energy(c)).collect()
    }
}

/// Energy for the global search: singular, non-finite or huge energies map
/// to `PENALTY_FACTOR * scale`. Evaluator failures still propagate.
pub fn penalized(raw: Result<f64>, scale: f64) -> Result<f64> {
    let cap = PENALTY_FACTOR * scale;
    match raw {
        Ok(e) if e.is_finite() && e < cap => Ok(e),
        Ok(_) => Ok(cap),
        Err(err) if matches!(err.root(), Error::Singularity(..)) => Ok(cap),
        Err(err) => Err(err),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LjParams {
    pub epsilon: f64,
    pub sigma: f64,
}

impl Default for LjParams {
    fn default() -> Self {
        LjParams {
            epsilon: 1.0,
            sigma: 1.0,
        }
    }
}

impl LjParams {
    pub fn new(epsilon: f64, sigma: f64) -> Result<Self> {
        if !(epsilon > 0.0 && sigma > 0.0 && epsilon.is_finite() && sigma.is_finite()) {
            return Err(Error::Domain(format!(
                "epsilon and sigma must be positive, got {epsilon} and {sigma}"
            )));
        }
        Ok(LjParams { epsilon, sigma })
    }
}

fn lj_pairs(
    c: &Configuration,
    p: &LjParams,
    mut grad: Option<&mut Gradient>,
) -> Result<f64> {
    let x = c.positions();
    let s6 = p.sigma.powi(6);
    let mut e = 0.0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d = [x[i][0] - x[j][0], x[i][1] - x[j][1], x[i][2] - x[j][2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if r2.sqrt() <= SINGULAR_DISTANCE {
                return Err(Error::Singularity(i, j));
            }
            let sr6 = s6 / (r2 * r2 * r2);
            e += sr6 * (sr6 - 1.0);
            if let Some(g) = grad.as_deref_mut() {
                // (dE/dr) / r
                let f = 4.0 * p.epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r2;
                for k in 0..3 {
                    g[i][k] += f * d[k];
                    g[j][k] -= f * d[k];
                }
            }
        }
    }
    Ok(4.0 * p.epsilon * e)
}

/// `sum_{i<j} 4 eps [(sigma/r)^12 - (sigma/r)^6]`, no cutoff.
pub fn lj_energy(c: &Configuration, p: &LjParams) -> Result<f64> {
    lj_pairs(c, p, None)
}

pub fn lj_gradient(c: &Configuration, p: &LjParams) -> Result<Gradient> {
    Ok(lj_energy_and_gradient(c, p)?.1)
}

pub fn lj_energy_and_gradient(c: &Configuration, p: &LjParams) -> Result<(f64, Gradient)> {
    let mut g = vec![[0.0; 3]; c.len()];
    let e = lj_pairs(c, p, Some(&mut g))?;
    Ok((e, g))
}

/// In-process Lennard-Jones model with call counters.
#[derive(Debug, Default)]
pub struct LennardJones {
    pub params: LjParams,
    counter: Counter,
}

impl LennardJones {
    pub fn new(params: LjParams) -> Self {
        LennardJones {
            params,
            counter: Counter::default(),
        }
    }
}

impl PotentialModel for LennardJones {
    fn energy(&self, c: &Configuration) -> Result<f64> {
        let e = lj_energy(c, &self.params)?;
        self.counter.record(true, false);
        Ok(e)
    }

    fn gradient(&self, c: &Configuration) -> Result<Gradient> {
        let g = lj_gradient(c, &self.params)?;
        self.counter.record(false, true);
        Ok(g)
    }

    fn energy_and_gradient(&self, c: &Configuration) -> Result<(f64, Gradient)> {
        let out = lj_energy_and_gradient(c, &self.params)?;
        self.counter.record(true, true);
        Ok(out)
    }

    fn counts(&self) -> CallCounts {
        self.counter.counts()
    }

    fn energy_scale(&self) -> f64 {
        self.params.epsilon
    }
}

/// Thirteen-atom icosahedron: a center and twelve vertices at distance
/// `radius`.
pub fn icosahedron13(radius: f64) -> Configuration {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let norm = (1.0 + phi * phi).sqrt();
    let mut pos = vec![[0.0; 3]];
    for a in [-1.0, 1.0] {
        for b in [-phi, phi] {
            pos.push([0.0, a, b]);
            pos.push([a, b, 0.0]);
            pos.push([b, 0.0, a]);
        }
    }
    let pos = pos
        .into_iter()
        .map(|p| p.map(|x| x * radius / norm))
        .collect();
    Configuration::new(pos).expect("finite icosahedron")
}

/// Formats a request block at 17 significant digits.
pub fn format_request(c: &Configuration, want_forces: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", c.len());
    let _ = writeln!(s, "{}", if want_forces { "energy forces" } else { "energy" });
    for p in c.positions() {
        let _ = writeln!(s, "X {:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    s
}

/// Formats a reply at 17 significant digits.
pub fn format_reply(energy: f64, gradient: Option<&Gradient>) -> String {
    let mut s = format!("E {energy:.16e}\n");
    if let Some(g) = gradient {
        for v in g {
            let _ = writeln!(s, "F {:.16e} {:.16e} {:.16e}", -v[0], -v[1], -v[2]);
        }
    }
    s.push_str("OK\n");
    s
}

/// Answers protocol requests from `input` with `model` until end of input.
pub fn serve<R: BufRead, W: Write>(model: &dyn PotentialModel, input: R, mut output: W) -> Result<()> {
    let mut lines = input.lines();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let count: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("expected atom count, got {line:?}")))?;
        let mut block = format!("{count}\n");
        for _ in 0..count + 1 {
            let l = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated request".into()))??;
            block.push_str(&l);
            block.push('\n');
        }
        let frame = crate::xyz::parse_xyz(&block)?.remove(0);
        let reply = match model.energy_and_gradient(&frame.configuration) {
            Ok((e, g)) => format_reply(e, Some(&g)),
            Err(err) => format!("ERR {err}\n"),
        };
        output.write_all(reply.as_bytes())?;
        output.flush()?;
    }
    Ok(())
}

struct Lane {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
}

impl Lane {
    fn spawn(command: &str) -> Result<Lane> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Evaluator(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr_pipe = child.stderr.take().expect("piped stderr");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            for line in BufReader::new(stderr_pipe).lines() {
                let Ok(line) = line else { break };
                let mut buf = sink.lock().unwrap();
                // Keep the tail only.
                if buf.len() > 4096 {
                    let cut = buf.len() - 2048;
                    let cut = (cut..buf.len()).find(|&i| buf.is_char_boundary(i)).unwrap_or(0);
                    buf.drain(..cut);
                }
                buf.push_str(&line);
                buf.push('\n');
            }
        });
        Ok(Lane {
            child,
            stdin,
            lines: rx,
            stderr,
        })
    }

    fn diagnostics(&mut self) -> String {
        // Give the stderr reader a moment to drain after an exit.
        thread::sleep(Duration::from_millis(20));
        let status = match self.child.try_wait() {
            Ok(Some(s)) => format!("exited with {s}"),
            Ok(None) => "still running".into(),
            Err(e) => format!("status unknown: {e}"),
        };
        let err = self.stderr.lock().unwrap().trim().to_string();
        if err.is_empty() {
            status
        } else {
            format!("{status}; stderr: {err}")
        }
    }

    fn next_line(&mut self, deadline: Instant) -> std::result::Result<String, String> {
        let left = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(left) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(format!("read failed: {e}")),
            Err(RecvTimeoutError::Timeout) => Err("timed out".into()),
            Err(RecvTimeoutError::Disconnected) => Err("output closed".into()),
        }
    }

    fn request(
        &mut self,
        c: &Configuration,
        want_forces: bool,
        timeout: Duration,
    ) -> std::result::Result<(f64, Option<Gradient>), String> {
        let deadline = Instant::now() + timeout;
        self.stdin
            .write_all(format_request(c, want_forces).as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| format!("write failed: {e}"))?;
        let first = self.next_line(deadline)?;
        let energy = match first.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["E", v] => v
                .parse::<f64>()
                .map_err(|_| format!("malformed energy line {first:?}"))?,
            _ => return Err(format!("unexpected reply {first:?}")),
        };
        let mut forces = Vec::new();
        loop {
            let line = self.next_line(deadline)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["OK"] => break,
                ["F", x, y, z] => {
                    let mut f = [0.0; 3];
                    for (k, s) in [x, y, z].iter().enumerate() {
                        f[k] = s
                            .parse()
                            .map_err(|_| format!("malformed force line {line:?}"))?;
                    }
                    forces.push([-f[0], -f[1], -f[2]]);
                }
                _ => return Err(format!("unexpected reply line {line:?}")),
            }
        }
        if !forces.is_empty() && forces.len() != c.len() {
            return Err(format!(
                "expected {} force lines, got {}",
                c.len(),
                forces.len()
            ));
        }
        Ok((energy, (!forces.is_empty()).then_some(forces)))
    }
}

impl Drop for Lane {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Potential evaluated by external child processes, one per concurrent lane.
pub struct ExternalPotential {
    command: String,
    timeout: Duration,
    max_lanes: usize,
    scale: f64,
    idle: Mutex<(Vec<Lane>, usize)>,
    freed: Condvar,
    counter: Counter,
}

impl ExternalPotential {
    /// Starts one child eagerly so a broken command fails here.
    pub fn new(command: &str, timeout: Duration, max_lanes: usize) -> Result<Self> {
        let lane = Lane::spawn(command)?;
        Ok(ExternalPotential {
            command: command.to_string(),
            timeout,
            max_lanes: max_lanes.max(1),
            scale: 1.0,
            idle: Mutex::new((vec![lane], 1)),
            freed: Condvar::new(),
            counter: Counter::default(),
        })
    }

    /// Energy scale used by the global-search penalty.
    pub fn with_energy_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn checkout(&self) -> Result<Lane> {
        let mut guard = self.idle.lock().unwrap();
        loop {
            if let Some(lane) = guard.0.pop() {
                return Ok(lane);
            }
            if guard.1 < self.max_lanes {
                guard.1 += 1;
                drop(guard);
                return Lane::spawn(&self.command).inspect_err(|_| {
                    self.idle.lock().unwrap().1 -= 1;
                });
            }
            guard = self.freed.wait(guard).unwrap();
        }
    }

    fn checkin(&self, lane: Option<Lane>) {
        let mut guard = self.idle.lock().unwrap();
        match lane {
            Some(l) => guard.0.push(l),
            None => guard.1 -= 1,
        }
        self.freed.notify_one();
    }

    fn call(&self, c: &Configuration, want_forces: bool) -> Result<(f64, Option<Gradient>)> {
        let mut lane = self.checkout()?;
        match lane.request(c, want_forces, self.timeout) {
            Ok(out) => {
                self.checkin(Some(lane));
                Ok(out)
            }
            Err(msg) => {
                let diag = lane.diagnostics();
                drop(lane);
                self.checkin(None);
                Err(Error::Evaluator(format!(
                    "`{}`: {msg} ({diag})",
                    self.command
                )))
            }
        }
    }
}

impl PotentialModel for ExternalPotential {
    fn energy(&self, c: &Configuration) -> Result<f64> {
        let (e, _) = self.call(c, false)?;
        self.counter.record(true, false);
        Ok(e)
    }

    fn energy_and_gradient(&self, c: &Configuration) -> Result<(f64, Gradient)> {
        let (e, g) = self.call(c, true)?;
        let g = g.ok_or_else(|| {
            Error::Evaluator(format!("`{}` does not report forces", self.command))
        })?;
        self.counter.record(true, true);
        Ok((e, g))
    }

    fn counts(&self) -> CallCounts {
        self.counter.counts()
    }

    fn energy_scale(&self) -> f64 {
        self.scale
    }
}
