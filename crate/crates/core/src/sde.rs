//! Euler–Maruyama simulation of scalar Itô diffusions
//! `dX = b(X) dt + sqrt(σ²(X)) dW`, plus the slow/fast benchmark system.
//!
//! Each trajectory owns a ChaCha stream selected by its index, so ensembles are
//! bit-identical regardless of how rayon schedules the work.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Dense polynomial `Σ c_k x^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Scalar SDE with polynomial drift and squared diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeModel {
    pub drift: Polynomial,
    pub diffusion_sq: Polynomial,
    /// Accept σ²(x) = 0 (deterministic limits); negative values are always rejected.
    #[serde(default)]
    pub allow_degenerate: bool,
}

impl SdeModel {
    pub fn new(drift: Polynomial, diffusion_sq: Polynomial) -> Self {
        Self { drift, diffusion_sq, allow_degenerate: false }
    }

    /// Cubic drift `-2x³ + 3x`, quadratic diffusion `x² + 2`.
    pub fn single_scale() -> Self {
        Self::new(
            Polynomial::new(vec![0.0, 3.0, 0.0, -2.0]),
            Polynomial::new(vec![2.0, 0.0, 1.0]),
        )
    }

    /// `b(x) = -θ x`, constant `σ²`.
    pub fn ornstein_uhlenbeck(theta: f64, sigma2: f64) -> Self {
        Self::new(Polynomial::new(vec![0.0, -theta]), Polynomial::constant(sigma2))
    }

    pub fn brownian(sigma2: f64) -> Self {
        Self::new(Polynomial::constant(0.0), Polynomial::constant(sigma2))
    }

    /// Coarse-grained limit `dX = (A X - B X³) dt + sqrt(σ_a + σ_b X²) dW`.
    pub fn effective(c: &EffectiveCoefficients) -> Self {
        Self::new(
            Polynomial::new(vec![0.0, c.a, 0.0, -c.b]),
            Polynomial::new(vec![c.sigma_a, 0.0, c.sigma_b]),
        )
    }

    pub fn degenerate(mut self) -> Self {
        self.allow_degenerate = true;
        self
    }

    pub fn drift_at(&self, x: f64) -> f64 {
        self.drift.eval(x)
    }

    /// σ²(x), checked against the positivity requirement.
    pub fn diffusion_sq_at(&self, x: f64) -> Result<f64> {
        let s2 = self.diffusion_sq.eval(x);
        let ok = if self.allow_degenerate { s2 >= 0.0 } else { s2 > 0.0 };
        if !ok || !s2.is_finite() {
            return Err(Error::NumericalDomain(format!("diffusion σ²({x}) = {s2} is not positive")));
        }
        Ok(s2)
    }
}

/// One Euler–Maruyama step `x + b(x) dt + sqrt(σ²(x) dt) z`.
pub fn em_step(x: f64, model: &SdeModel, dt: f64, z: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(config(format!("time step must be positive, got {dt}")));
    }
    if !x.is_finite() {
        return Err(Error::NumericalDomain(format!("non-finite state {x}")));
    }
    let s2 = model.diffusion_sq_at(x)?;
    let next = x + model.drift_at(x) * dt + (s2 * dt).sqrt() * z;
    if !next.is_finite() {
        return Err(Error::NumericalDomain(format!("state blew up after step from {x}")));
    }
    Ok(next)
}

/// Law of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    Point { x: f64 },
    Normal { mean: f64, variance: f64 },
    Uniform { low: f64, high: f64 },
}

impl InitialDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            InitialDistribution::Point { x } => x,
            InitialDistribution::Normal { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            InitialDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }

    /// Density of the law (`None` for a point mass).
    pub fn density(&self, x: f64) -> Option<f64> {
        match *self {
            InitialDistribution::Point { .. } => None,
            InitialDistribution::Normal { mean, variance } => Some(
                (-(x - mean).powi(2) / (2.0 * variance)).exp()
                    / (2.0 * std::f64::consts::PI * variance).sqrt(),
            ),
            InitialDistribution::Uniform { low, high } => {
                Some(if x >= low && x <= high { 1.0 / (high - low) } else { 0.0 })
            }
        }
    }
}

/// Mixes a master seed with a tag (site index, stage id) via SplitMix64.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn trajectory_rng(seed: u64, traj: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(traj as u64);
    rng
}

/// Snapshot indices for `times` on the grid `{0, dt, ..., n_steps dt}`.
pub fn snapshot_steps(times: &[f64], dt: f64, n_steps: usize) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let k = (t / dt).round();
            if t < 0.0 || (k * dt - t).abs() > 1e-9 * dt.max(t.abs()) || k as usize > n_steps {
                Err(config(format!(
                    "snapshot time {t} is not on the grid of {n_steps} steps of size {dt}"
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Ensemble snapshots: `snapshots[i][j]` is trajectory `j` at `snapshot_times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub n_traj: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    pub seed: u64,
}

impl TrajectoryEnsemble {
    fn from_paths(
        paths: Vec<Vec<f64>>,
        dt: f64,
        n_steps: usize,
        snapshot_times: &[f64],
        seed: u64,
    ) -> Self {
        let n_traj = paths.len();
        let snapshots = (0..snapshot_times.len())
            .map(|i| paths.iter().map(|p| p[i]).collect())
            .collect();
        Self { n_traj, dt, n_steps, snapshot_times: snapshot_times.to_vec(), snapshots, seed }
    }

    /// Snapshot at time `t` (exact grid match).
    pub fn snapshot(&self, t: f64) -> Option<&[f64]> {
        self.snapshot_times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * self.dt)
            .map(|i| self.snapshots[i].as_slice())
    }

    /// CSV with header `traj_id,time,x`, one row per trajectory snapshot.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["traj_id", "time", "x"])?;
        for (t, snap) in self.snapshot_times.iter().zip(&self.snapshots) {
            for (j, x) in snap.iter().enumerate() {
                w.write_record(&[j.to_string(), t.to_string(), x.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct SnapshotRow {
    traj_id: usize,
    time: f64,
    x: f64,
}

/// Reads `traj_id,time,x` rows back into `(time, states by trajectory)` groups,
/// in order of first appearance.
pub fn read_snapshots_csv<R: Read>(reader: R) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    for row in rdr.deserialize() {
        let row: SnapshotRow = row?;
        match out.iter_mut().find(|(t, _)| *t == row.time) {
            Some((_, v)) => v.push((row.traj_id, row.x)),
            None => out.push((row.time, vec![(row.traj_id, row.x)])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(t, mut v)| {
            v.sort_by_key(|(id, _)| *id);
            (t, v.into_iter().map(|(_, x)| x).collect())
        })
        .collect())
}

/// Simulates `n_traj` independent paths and keeps the requested snapshots.
pub fn simulate_ensemble(
    model: &SdeModel,
    init: &InitialDistribution,
    n_traj: usize,
    n_steps: usize,
    dt: f64,
    snapshot_times: &[f64],
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if !(dt > 0.0) {
        return Err(config(format!("time step must be positive, got {dt}")));
    }
    let steps = snapshot_steps(snapshot_times, dt, n_steps)?;
    let last = steps.iter().copied().max().unwrap_or(0);
    let paths = (0..n_traj)
        .into_par_iter()
        .map(|j| {
            let mut rng = trajectory_rng(seed, j);
            let mut x = init.sample(&mut rng);
            let mut snap = vec![0.0; steps.len()];
            for k in 0..=last {
                if k > 0 {
                    let z: f64 = rng.sample(StandardNormal);
                    x = em_step(x, model, dt, z)?;
                }
                for (slot, &s) in snap.iter_mut().zip(&steps) {
                    if s == k {
                        *slot = x;
                    }
                }
            }
            Ok(snap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble::from_paths(paths, dt, n_steps, snapshot_times, seed))
}

/// Exit times of trajectories started at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeSample {
    pub site: f64,
    pub domain: (f64, f64),
    pub dt: f64,
    pub max_steps: usize,
    /// One entry per trajectory in index order; `None` marks a censored path.
    pub outcomes: Vec<Option<f64>>,
}

impl ExitTimeSample {
    pub fn n_traj(&self) -> usize {
        self.outcomes.len()
    }

    /// Uncensored exit times in trajectory order.
    pub fn times(&self) -> Vec<f64> {
        self.outcomes.iter().flatten().copied().collect()
    }

    pub fn censored_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_none()).count()
    }

    pub fn censored_fraction(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.censored_count() as f64 / self.outcomes.len() as f64
        }
    }
}

/// Exit times from the open interval `domain`, detected at the discrete steps.
pub fn simulate_exit_times(
    model: &SdeModel,
    site: f64,
    domain: (f64, f64),
    n_traj: usize,
    dt: f64,
    max_steps: usize,
    seed: u64,
) -> Result<ExitTimeSample> {
    let (lo, hi) = domain;
    if !(lo < site && site < hi) {
        return Err(config(format!("site {site} is not strictly inside ({lo}, {hi})")));
    }
    if !(dt > 0.0) {
        return Err(config(format!("time step must be positive, got {dt}")));
    }
    let outcomes = (0..n_traj)
        .into_par_iter()
        .map(|j| {
            let mut rng = trajectory_rng(seed, j);
            let mut x = site;
            for step in 1..=max_steps {
                let z: f64 = rng.sample(StandardNormal);
                x = em_step(x, model, dt, z)?;
                if x <= lo || x >= hi {
                    return Ok(Some(step as f64 * dt));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = ExitTimeSample { site, domain, dt, max_steps, outcomes };
    if sample.censored_count() > 0 {
        log::warn!(
            "site {site}: {} of {} trajectories did not exit within {max_steps} steps",
            sample.censored_count(),
            n_traj
        );
    }
    Ok(sample)
}

/// CSV with header `site,tau,censored`; censored rows carry the horizon `max_steps·dt`.
pub fn write_exit_times_csv<W: Write>(writer: W, samples: &[ExitTimeSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site", "tau", "censored"])?;
    for s in samples {
        let horizon = s.max_steps as f64 * s.dt;
        for o in &s.outcomes {
            let (tau, censored) = match o {
                Some(t) => (*t, 0),
                None => (horizon, 1),
            };
            w.write_record(&[s.site.to_string(), tau.to_string(), censored.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ExitRow {
    site: f64,
    tau: f64,
    censored: u8,
}

/// Reads exit-time rows, grouping by site in order of first appearance.
pub fn read_exit_times_csv<R: Read>(
    reader: R,
    domain: (f64, f64),
    dt: f64,
    max_steps: usize,
) -> Result<Vec<ExitTimeSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<ExitTimeSample> = Vec::new();
    for row in rdr.deserialize() {
        let row: ExitRow = row?;
        let outcome = if row.censored != 0 { None } else { Some(row.tau) };
        match out.iter_mut().find(|s| s.site == row.site) {
            Some(s) => s.outcomes.push(outcome),
            None => out.push(ExitTimeSample {
                site: row.site,
                domain,
                dt,
                max_steps,
                outcomes: vec![outcome],
            }),
        }
    }
    Ok(out)
}

/// Parameters of the slow/fast system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiscaleParams {
    pub epsilon: f64,
    pub q1: f64,
    pub q2: f64,
    pub nu: f64,
}

impl Default for MultiscaleParams {
    fn default() -> Self {
        Self { epsilon: 0.1, q1: 1.0, q2: 1.0, nu: 1.0 }
    }
}

/// Coefficients of the coarse-grained model `(A x - B x³, σ_a + σ_b x²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveCoefficients {
    pub a: f64,
    pub b: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
}

pub fn effective_coefficients(p: &MultiscaleParams) -> EffectiveCoefficients {
    let (q1s, q2s) = (p.q1 * p.q1, p.q2 * p.q2);
    EffectiveCoefficients {
        a: p.nu + q1s / 396.0 + q2s / 352.0,
        b: 1.0 / 12.0,
        sigma_a: q1s * q2s / 2112.0,
        sigma_b: q1s / 36.0,
    }
}

/// One Euler–Maruyama step of the slow/fast system; `z1`, `z2` drive `y`, `z`.
///
/// dx = (ν x − (x y + y z)/(2ε)) dt
/// dy = (ν y − 3y/ε² − (2 x z − x²)/(2ε)) dt + (q1/ε) dV¹
/// dz = (ν z − 8z/ε² + 3 x y/(2ε)) dt + (q2/ε) dV²
pub fn multiscale_step(
    state: [f64; 3],
    p: &MultiscaleParams,
    dt: f64,
    z1: f64,
    z2: f64,
) -> Result<[f64; 3]> {
    let [x, y, z] = state;
    let eps = p.epsilon;
    let e2 = eps * eps;
    let sq = dt.sqrt();
    let nx = x + (p.nu * x - (x * y + y * z) / (2.0 * eps)) * dt;
    let ny = y + (p.nu * y - 3.0 * y / e2 - (2.0 * x * z - x * x) / (2.0 * eps)) * dt
        + p.q1 / eps * sq * z1;
    let nz = z + (p.nu * z - 8.0 * z / e2 + 3.0 * x * y / (2.0 * eps)) * dt + p.q2 / eps * sq * z2;
    if !(nx.is_finite() && ny.is_finite() && nz.is_finite()) {
        return Err(Error::NumericalDomain(format!(
            "multiscale state blew up from ({x}, {y}, {z})"
        )));
    }
    Ok([nx, ny, nz])
}

/// Integrates the slow/fast system and keeps snapshots of the slow component.
pub fn simulate_multiscale(
    p: &MultiscaleParams,
    init: &InitialDistribution,
    n_traj: usize,
    n_steps: usize,
    dt: f64,
    snapshot_times: &[f64],
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if !(p.epsilon > 0.0) {
        return Err(config(format!("epsilon must be positive, got {}", p.epsilon)));
    }
    if !(dt > 0.0) {
        return Err(config(format!("time step must be positive, got {dt}")));
    }
    if dt > p.epsilon * p.epsilon / 10.0 {
        log::warn!("dt = {dt} exceeds ε²/10 = {}; fast variables are under-resolved", p.epsilon.powi(2) / 10.0);
    }
    let steps = snapshot_steps(snapshot_times, dt, n_steps)?;
    let last = steps.iter().copied().max().unwrap_or(0);
    let (sy, sz) = ((p.q1 * p.q1 / 6.0).sqrt(), (p.q2 * p.q2 / 16.0).sqrt());
    let paths = (0..n_traj)
        .into_par_iter()
        .map(|j| {
            let mut rng = trajectory_rng(seed, j);
            let x0 = init.sample(&mut rng);
            let y0: f64 = rng.sample::<f64, _>(StandardNormal) * sy;
            let z0: f64 = rng.sample::<f64, _>(StandardNormal) * sz;
            let mut state = [x0, y0, z0];
            let mut snap = vec![0.0; steps.len()];
            for k in 0..=last {
                if k > 0 {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    state = multiscale_step(state, p, dt, z1, z2)?;
                }
                for (slot, &s) in snap.iter_mut().zip(&steps) {
                    if s == k {
                        *slot = state[0];
                    }
                }
            }
            Ok(snap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble::from_paths(paths, dt, n_steps, snapshot_times, seed))
}
