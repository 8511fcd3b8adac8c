//! Turning trajectory ensembles into Gaussian-noise observations.
//!
//! MFPT data: per site, the first half of the trajectories estimates τ₁ and the
//! second half τ₂, so the two estimators are independent; the noise model is the
//! standard error of each estimator. Density data: Gaussian-kernel KDE with its
//! pointwise asymptotic variance.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, dimension, Result};
use crate::sde::{ExitTimeSample, TrajectoryEnsemble};

/// ∫K²(y)dy for the standard normal kernel, 1/(2√π).
pub const KERNEL_L2_SQ: f64 = 0.282_094_791_773_878_14;

/// Bias/variance proxy `N h³` above which a bandwidth is flagged.
pub const BANDWIDTH_RATIO_LIMIT: f64 = 0.1;

/// Default variance floor for the noise covariance.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;

/// Monte Carlo MFPT estimates at one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteMoments {
    pub tau1: f64,
    pub tau2: f64,
    pub se1: f64,
    pub se2: f64,
    pub n1: usize,
    pub n2: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let s2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (s2 / n).sqrt())
}

/// First- and second-moment estimates from disjoint halves of the sample.
pub fn mfpt_moments(sample: &ExitTimeSample) -> Result<SiteMoments> {
    let n = sample.n_traj();
    if n % 2 != 0 {
        return Err(config(format!("site {}: trajectory count {n} must be even", sample.site)));
    }
    if n < 4 {
        return Err(config(format!("site {}: need at least 4 trajectories, got {n}", sample.site)));
    }
    let (first, second) = sample.outcomes.split_at(n / 2);
    let t1: Vec<f64> = first.iter().flatten().copied().collect();
    let t2: Vec<f64> = second.iter().flatten().map(|t| t * t).collect();
    if t1.len() < 2 || t2.len() < 2 {
        return Err(config(format!(
            "site {}: too few uncensored exits ({} / {}) to estimate moments",
            sample.site,
            t1.len(),
            t2.len()
        )));
    }
    let (tau1, se1) = mean_and_se(&t1);
    let (tau2, se2) = mean_and_se(&t2);
    Ok(SiteMoments { tau1, tau2, se1, se2, n1: t1.len(), n2: t2.len() })
}

/// Moment estimates over all sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentData {
    pub sites: Vec<f64>,
    pub tau1_hat: Vec<f64>,
    pub tau2_hat: Vec<f64>,
    pub se1: Vec<f64>,
    pub se2: Vec<f64>,
    pub split: Vec<(usize, usize)>,
}

impl MomentData {
    pub fn from_samples(samples: &[ExitTimeSample]) -> Result<Self> {
        let mut d = MomentData {
            sites: Vec::new(),
            tau1_hat: Vec::new(),
            tau2_hat: Vec::new(),
            se1: Vec::new(),
            se2: Vec::new(),
            split: Vec::new(),
        };
        for s in samples {
            let m = mfpt_moments(s)?;
            d.sites.push(s.site);
            d.tau1_hat.push(m.tau1);
            d.tau2_hat.push(m.tau2);
            d.se1.push(m.se1);
            d.se2.push(m.se2);
            d.split.push((m.n1, m.n2));
        }
        Ok(d)
    }
}

/// KDE and its pointwise variance on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEstimate {
    pub density: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Gaussian-kernel density estimate with bandwidth `h` at each grid point.
pub fn kde_estimate(points: &[f64], grid: &[f64], h: f64) -> Result<KdeEstimate> {
    if !(h > 0.0) {
        return Err(config(format!("bandwidth must be positive, got {h}")));
    }
    if points.is_empty() {
        return Err(config("KDE needs at least one sample point"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    // kernel weight beyond 9h is below 1e-17 of the peak
    let reach = 9.0 * h;
    let density: Vec<f64> = grid
        .par_iter()
        .map(|&x| {
            let lo = sorted.partition_point(|&p| p < x - reach);
            let hi = sorted.partition_point(|&p| p <= x + reach);
            let sum: f64 = sorted[lo..hi]
                .iter()
                .map(|&p| {
                    let u = (p - x) / h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            sum * norm
        })
        .collect();
    let variance = density.iter().map(|p| p * KERNEL_L2_SQ / (n * h)).collect();
    Ok(KdeEstimate { density, variance })
}

/// Bias-to-variance proxy `h² / (1/(N h)) = N h³`; logs a warning above the limit.
pub fn check_bandwidth(n: usize, h: f64) -> f64 {
    let ratio = n as f64 * h.powi(3);
    if ratio > BANDWIDTH_RATIO_LIMIT {
        log::warn!(
            "bandwidth h = {h} with N = {n}: N h³ = {ratio:.4} > {BANDWIDTH_RATIO_LIMIT}; KDE bias may not be negligible"
        );
    }
    ratio
}

/// KDE observations for several snapshots (times outer, grid inner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityData {
    pub grid: Vec<f64>,
    pub times: Vec<f64>,
    pub p_hat: Vec<Vec<f64>>,
    pub var_hat: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

impl DensityData {
    pub fn from_ensemble(
        ensemble: &TrajectoryEnsemble,
        grid: &[f64],
        times: &[f64],
        bandwidth: f64,
    ) -> Result<Self> {
        let snaps = times
            .iter()
            .map(|&t| {
                ensemble
                    .snapshot(t)
                    .map(|s| (t, s))
                    .ok_or_else(|| config(format!("ensemble has no snapshot at t = {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        check_bandwidth(ensemble.n_traj, bandwidth);
        Self::from_snapshots(&snaps, grid, bandwidth)
    }

    /// KDE observations from `(time, states)` snapshots, e.g. read back from CSV.
    pub fn from_snapshots(snapshots: &[(f64, &[f64])], grid: &[f64], bandwidth: f64) -> Result<Self> {
        let times: Vec<f64> = snapshots.iter().map(|(t, _)| *t).collect();
        let mut p_hat = Vec::with_capacity(times.len());
        let mut var_hat = Vec::with_capacity(times.len());
        for (_, snap) in snapshots {
            let k = kde_estimate(snap, grid, bandwidth)?;
            p_hat.push(k.density);
            var_hat.push(k.variance);
        }
        Ok(Self { grid: grid.to_vec(), times, p_hat, var_hat, bandwidth })
    }
}

/// Which forward model an observation vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationKind {
    /// Moments 1..=n_moments (outer) at `locations` (inner).
    Mfpt { n_moments: usize },
    /// Snapshot `times` (outer) at `locations` (inner).
    FokkerPlanck,
}

/// Data vector with diagonal Gaussian noise covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub kind: ObservationKind,
    pub y: Vec<f64>,
    pub locations: Vec<f64>,
    pub times: Vec<f64>,
    pub gamma_diag: Vec<f64>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl ObservationSet {
    /// Stacks the first `n_moments` (1 or 2) moment estimates; Γ_ii = max(se², floor).
    pub fn from_moments(data: &MomentData, n_moments: usize, floor: f64) -> Result<Self> {
        if !(1..=2).contains(&n_moments) {
            return Err(config(format!("MFPT data supports 1 or 2 moments, got {n_moments}")));
        }
        let mut y = data.tau1_hat.clone();
        let mut gamma: Vec<f64> = data.se1.iter().map(|s| (s * s).max(floor)).collect();
        if n_moments == 2 {
            y.extend_from_slice(&data.tau2_hat);
            gamma.extend(data.se2.iter().map(|s| (s * s).max(floor)));
        }
        let set = Self {
            kind: ObservationKind::Mfpt { n_moments },
            y,
            locations: data.sites.clone(),
            times: Vec::new(),
            gamma_diag: gamma,
            metadata: Default::default(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Stacks KDE snapshots; Γ_ii = max(σ̂², floor).
    pub fn from_density(data: &DensityData, floor: f64) -> Result<Self> {
        let y = data.p_hat.concat();
        let gamma_diag = data.var_hat.concat().into_iter().map(|v| v.max(floor)).collect();
        let set = Self {
            kind: ObservationKind::FokkerPlanck,
            y,
            locations: data.grid.clone(),
            times: data.times.clone(),
            gamma_diag,
            metadata: Default::default(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = match self.kind {
            ObservationKind::Mfpt { n_moments } => n_moments,
            ObservationKind::FokkerPlanck => self.times.len(),
        };
        if self.y.len() != blocks * self.locations.len() {
            return Err(dimension(format!(
                "data length {} does not match {blocks} blocks of {} locations",
                self.y.len(),
                self.locations.len()
            )));
        }
        if self.gamma_diag.len() != self.y.len() {
            return Err(dimension("noise covariance length differs from data length"));
        }
        if let Some(g) = self.gamma_diag.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(config(format!("noise variance {g} is not strictly positive")));
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let set: Self = serde_json::from_reader(reader)?;
        set.validate()?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{simulate_exit_times, SdeModel};
    use proptest::prelude::*;

    fn sample(times: &[f64]) -> ExitTimeSample {
        ExitTimeSample {
            site: 0.0,
            domain: (-1.0, 1.0),
            dt: 1e-3,
            max_steps: 10_000,
            outcomes: times.iter().map(|t| Some(*t)).collect(),
        }
    }

    #[test]
    fn moments_of_constant_sample() {
        let m = mfpt_moments(&sample(&[2.0, 2.0, 2.0, 2.0])).unwrap();
        assert_eq!((m.tau1, m.tau2, m.se1, m.se2), (2.0, 4.0, 0.0, 0.0));
    }

    #[test]
    fn moments_use_disjoint_halves() {
        let m = mfpt_moments(&sample(&[1.0, 3.0, 2.0, 2.0])).unwrap();
        assert_eq!(m.tau1, 2.0);
        assert_eq!(m.tau2, 4.0);
        // S₁² = ((1-2)² + (3-2)²)/1 = 2, σ̂₁ = sqrt(2/2) = 1
        assert!((m.se1 - 1.0).abs() < 1e-15);
        assert_eq!(m.se2, 0.0);
        assert_eq!((m.n1, m.n2), (2, 2));
    }

    #[test]
    fn odd_or_tiny_samples_are_rejected() {
        assert!(matches!(mfpt_moments(&sample(&[1.0, 2.0, 3.0])), Err(crate::Error::Config(_))));
        assert!(matches!(mfpt_moments(&sample(&[1.0, 2.0])), Err(crate::Error::Config(_))));
        let mut s = sample(&[1.0; 6]);
        s.outcomes = vec![None; 6];
        assert!(matches!(mfpt_moments(&s), Err(crate::Error::Config(_))));
    }

    #[test]
    fn censored_exits_are_excluded_not_zeroed() {
        let mut s = sample(&[1.0, 3.0, 5.0, 2.0, 2.0, 2.0]);
        s.outcomes[2] = None;
        let m = mfpt_moments(&s).unwrap();
        assert_eq!(m.tau1, 2.0);
        assert_eq!(m.n1, 2);
    }

    #[test]
    fn brownian_first_moment_matches_analytic() {
        let model = SdeModel::brownian(2.0);
        let s = simulate_exit_times(&model, 0.0, (-1.0, 1.0), 1000, 1e-5, 10_000_000, 17).unwrap();
        let m = mfpt_moments(&s).unwrap();
        assert!((m.tau1 - 0.5).abs() < 4.0 * m.se1, "{} ± {}", m.tau1, m.se1);
    }

    #[test]
    fn standard_error_scales_with_sample_size() {
        // E[se²] ∝ 1/N: doubling N halves se² (averaged over 20 replicates; ~4σ tolerance)
        let model = SdeModel::brownian(2.0);
        let se2_mean = |n: usize, seed: u64| {
            let mut acc = 0.0;
            for k in 0..20 {
                let s = simulate_exit_times(&model, 0.0, (-1.0, 1.0), n, 1e-4, 1_000_000, seed + k).unwrap();
                acc += mfpt_moments(&s).unwrap().se1.powi(2);
            }
            acc / 20.0
        };
        let small = se2_mean(200, 100);
        let large = se2_mean(400, 200);
        let ratio = small / large;
        assert!((ratio - 2.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn kde_single_kernel() {
        let k = kde_estimate(&[0.0], &[0.0, 1.0], 1.0).unwrap();
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((k.density[0] - c).abs() < 1e-15);
        assert!((k.density[1] - c * (-0.5f64).exp()).abs() < 1e-15);
        assert!((k.variance[0] - c * KERNEL_L2_SQ).abs() < 1e-15);
    }

    #[test]
    fn kernel_constant_is_exact() {
        assert!((KERNEL_L2_SQ - 1.0 / (2.0 * std::f64::consts::PI.sqrt())).abs() < 1e-16);
    }

    #[test]
    fn kde_integrates_to_one() {
        let pts: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let grid: Vec<f64> = (0..=2000).map(|i| -5.0 + i as f64 * 0.005).collect();
        let k = kde_estimate(&pts, &grid, 0.2).unwrap();
        let integral: f64 = k.density.windows(2).map(|w| 0.5 * (w[0] + w[1]) * 0.005).sum();
        assert!((integral - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kde_recovers_standard_normal() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let grid: Vec<f64> = (0..=80).map(|i| -2.0 + i as f64 * 0.05).collect();
        let k = kde_estimate(&pts, &grid, 0.05).unwrap();
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let err = grid.iter().zip(&k.density).map(|(x, p)| (p - phi(*x)).abs()).fold(0.0, f64::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn kde_rejects_bad_bandwidth() {
        assert!(kde_estimate(&[0.0], &[0.0], 0.0).is_err());
        assert!(kde_estimate(&[], &[0.0], 1.0).is_err());
    }

    #[test]
    fn bandwidth_ratio() {
        assert!((check_bandwidth(100_000, 0.05) - 12.5).abs() < 1e-9);
        assert!((check_bandwidth(100_000, 0.005) - 0.0125).abs() < 1e-12);
        assert!(check_bandwidth(100_000, 0.005) <= BANDWIDTH_RATIO_LIMIT);
        assert!(check_bandwidth(100_000, 1e-9) < 1e-15);
    }

    fn moments_fixture(se1: Vec<f64>) -> MomentData {
        let n = se1.len();
        MomentData {
            sites: (0..n).map(|i| i as f64 * 0.1).collect(),
            tau1_hat: vec![1.0; n],
            tau2_hat: vec![2.0; n],
            se1: se1.clone(),
            se2: se1,
            split: vec![(10, 10); n],
        }
    }

    #[test]
    fn noise_covariance_is_squared_standard_error() {
        let set = ObservationSet::from_moments(&moments_fixture(vec![0.1, 0.2]), 1, 1e-8).unwrap();
        assert!((set.gamma_diag[0] - 0.01).abs() < 1e-15);
        assert!((set.gamma_diag[1] - 0.04).abs() < 1e-15);
        let set = ObservationSet::from_moments(&moments_fixture(vec![0.0, 0.2]), 2, 1e-8).unwrap();
        assert_eq!(set.gamma_diag[0], 1e-8);
        assert_eq!(set.y, vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn fifty_one_sites_two_moments_give_102_data() {
        let set = ObservationSet::from_moments(&moments_fixture(vec![0.1; 51]), 2, 1e-8).unwrap();
        assert_eq!(set.len(), 102);
        assert_eq!(set.gamma_diag.len(), 102);
    }

    #[test]
    fn observation_json_round_trip_is_exact() {
        let mut set = ObservationSet::from_moments(&moments_fixture(vec![0.1, 0.2, 1.0 / 3.0]), 2, 1e-8).unwrap();
        set.y[0] = std::f64::consts::PI / 7.0;
        set.metadata.insert("source".into(), "test".into());
        let mut buf = Vec::new();
        set.write_json(&mut buf).unwrap();
        let back = ObservationSet::read_json(buf.as_slice()).unwrap();
        assert_eq!(back, set);
        assert!(back.y.iter().zip(&set.y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn inconsistent_sets_fail_validation() {
        let mut set = ObservationSet::from_moments(&moments_fixture(vec![0.1, 0.2]), 2, 1e-8).unwrap();
        set.y.pop();
        assert!(set.validate().is_err());
    }

    proptest! {
        #[test]
        fn kde_is_permutation_invariant(mut pts in prop::collection::vec(-3.0f64..3.0, 1..40), seed in 0u64..1000) {
            let grid = [-1.0, 0.0, 0.3, 2.0];
            let a = kde_estimate(&pts, &grid, 0.3).unwrap();
            // deterministic shuffle
            let n = pts.len();
            for i in 0..n {
                let j = (seed as usize * 31 + i * 17) % n;
                pts.swap(i, j);
            }
            let b = kde_estimate(&pts, &grid, 0.3).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
