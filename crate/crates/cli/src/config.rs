//! Pipeline configuration.
//!
//! A config file names a preset and overrides any subset of its keys. The
//! preset is expanded to a full table, the user's table is merged on top and
//! the result is deserialized with unknown keys rejected, so typos fail
//! before any work starts.

use std::path::{Path, PathBuf};

use difinv::fem::{FeFunction, Mesh1d};
use difinv::laplace::GevdOptions;
use difinv::optimize::NewtonOptions;
use difinv::prior::{JointPrior, MaternPrior};
use difinv::sde::{InitialDistribution, MultiscaleParams, Polynomial, SdeModel};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `b = -2x³ + 3x`, `σ² = x² + 2`.
    SingleScale,
    /// Slow component of the slow/fast system.
    Multiscale,
    /// Polynomial coefficients from the `[model]` table.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    Mfpt,
    FokkerPlanck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub observable: Observable,
    pub seed: u64,
    /// Where artifacts go unless `--out` is given. Not part of the manifest:
    /// it does not influence any result.
    #[serde(default = "default_out_dir", skip_serializing)]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<CustomModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiscale: Option<MultiscaleParams>,
    pub simulation: SimulationConfig,
    pub data: DataConfig,
    pub mesh: MeshConfig,
    pub fokker_planck: FpConfig,
    pub prior: PriorConfig,
    pub newton: NewtonOptions,
    pub laplace: GevdOptions,
    pub mcmc: McmcConfig,
    pub predict: PredictConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("difinv-out")
}

/// Ascending polynomial coefficients, `c0 + c1 x + ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    pub drift_coeffs: Vec<f64>,
    pub diffusion_sq_coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialConfig {
    Point { x_state: f64 },
    Normal { mean_state: f64, variance_state2: f64 },
    Uniform { low_state: f64, high_state: f64 },
}

impl InitialConfig {
    pub fn law(&self) -> InitialDistribution {
        match *self {
            InitialConfig::Point { x_state } => InitialDistribution::Point { x: x_state },
            InitialConfig::Normal { mean_state, variance_state2 } => {
                InitialDistribution::Normal { mean: mean_state, variance: variance_state2 }
            }
            InitialConfig::Uniform { low_state, high_state } => {
                InitialDistribution::Uniform { low: low_state, high: high_state }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_traj: usize,
    pub dt_time: f64,
    /// Exit-time runs: equispaced interior starting sites.
    pub n_sites: usize,
    pub domain_state: [f64; 2],
    pub max_steps: usize,
    /// Ensemble runs.
    pub n_steps: usize,
    pub snapshot_times_time: Vec<f64>,
    pub initial: InitialConfig,
}

impl SimulationConfig {
    pub fn sites(&self) -> Vec<f64> {
        let [a, b] = self.domain_state;
        let n = self.n_sites;
        (1..=n).map(|i| a + (b - a) * i as f64 / (n + 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_moments: usize,
    pub variance_floor: f64,
    pub bandwidth_state: f64,
    pub grid_lo_state: f64,
    pub grid_hi_state: f64,
    pub grid_points: usize,
}

impl DataConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points.max(2) - 1;
        let step = (self.grid_hi_state - self.grid_lo_state) / n as f64;
        (0..=n).map(|i| self.grid_lo_state + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub lo_state: f64,
    pub hi_state: f64,
    pub n_cells: usize,
}

impl MeshConfig {
    pub fn mesh(&self) -> Result<Mesh1d> {
        Ok(Mesh1d::new(self.lo_state, self.hi_state, self.n_cells)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpConfig {
    pub dt_time: f64,
    /// Law of the initial density `p0`.
    pub initial: InitialConfig,
    /// Convolve `p0` with the KDE kernel, matching what the data measure.
    pub smooth_initial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanPreset {
    /// `b(x) = -x`.
    OuDrift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Constant(f64),
    Preset(MeanPreset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentPrior {
    pub mean: MeanSpec,
    /// Pointwise marginal variance.
    pub sigma2: f64,
    pub rho_state: f64,
}

impl ComponentPrior {
    fn build(&self, mesh: Mesh1d) -> Result<MaternPrior> {
        let mean = match self.mean {
            MeanSpec::Constant(c) => FeFunction::interpolate(mesh, |_| c),
            MeanSpec::Preset(MeanPreset::OuDrift) => FeFunction::interpolate(mesh, |x| -x),
        };
        Ok(MaternPrior::from_stats(mesh, self.sigma2, self.rho_state, mean)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub drift: ComponentPrior,
    pub log_diffusion: ComponentPrior,
}

impl PriorConfig {
    pub fn build(&self, mesh: Mesh1d) -> Result<JointPrior> {
        Ok(JointPrior::new(self.drift.build(mesh)?, self.log_diffusion.build(mesh)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Step size; the starting value when tuning is on.
    pub h: f64,
    /// Dual-averaging adaptation steps before the production chain (0 disables).
    pub tune_steps: usize,
    pub target_acceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Laplace posterior draws pushed through the forward map.
    pub n_draws: usize,
}

fn normal(mean_state: f64, variance_state2: f64) -> InitialConfig {
    InitialConfig::Normal { mean_state, variance_state2 }
}

impl Config {
    /// Fully populated defaults for a preset/observable pair.
    pub fn preset(preset: Preset, observable: Observable) -> Self {
        let fp = observable == Observable::FokkerPlanck;
        let multiscale = preset == Preset::Multiscale;
        let snapshot_times_time: Vec<f64> = if multiscale {
            (1..=10).map(|i| 0.5 * i as f64).collect()
        } else {
            (1..=10).map(|i| 0.1 * i as f64).collect()
        };
        let mesh = match (multiscale, fp) {
            (true, _) => MeshConfig { lo_state: -6.0, hi_state: 6.0, n_cells: 240 },
            (false, true) => MeshConfig { lo_state: -4.0, hi_state: 4.0, n_cells: 160 },
            (false, false) => MeshConfig { lo_state: -1.0, hi_state: 1.0, n_cells: 200 },
        };
        let (grid_lo_state, grid_hi_state, grid_points) = if multiscale { (-5.0, 5.0, 41) } else { (-3.0, 3.0, 25) };
        Config {
            preset,
            observable,
            seed: 0,
            out_dir: default_out_dir(),
            model: None,
            multiscale: multiscale.then(MultiscaleParams::default),
            simulation: SimulationConfig {
                n_traj: if fp { 10_000 } else { 200 },
                dt_time: 1e-3,
                n_sites: 21,
                domain_state: [-1.0, 1.0],
                max_steps: 1_000_000,
                n_steps: if multiscale { 5000 } else { 1000 },
                snapshot_times_time,
                initial: normal(0.0, 0.5),
            },
            data: DataConfig {
                n_moments: 2,
                variance_floor: if fp { 1e-6 } else { difinv::data::DEFAULT_VARIANCE_FLOOR },
                bandwidth_state: 0.02,
                grid_lo_state,
                grid_hi_state,
                grid_points,
            },
            mesh,
            fokker_planck: FpConfig { dt_time: 0.01, initial: normal(0.0, 0.5), smooth_initial: true },
            prior: PriorConfig {
                drift: ComponentPrior { mean: MeanSpec::Preset(MeanPreset::OuDrift), sigma2: 4.0, rho_state: 1.0 },
                log_diffusion: ComponentPrior { mean: MeanSpec::Constant(1.0), sigma2: 1.0, rho_state: 1.0 },
            },
            newton: NewtonOptions::default(),
            laplace: GevdOptions::default(),
            mcmc: McmcConfig { n_steps: 2000, burn_in: 500, thin: 1, h: 0.1, tune_steps: 1000, target_acceptance: 0.6 },
            predict: PredictConfig { n_draws: 50 },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| config(format!("{e}")))?;
        let preset = match user.get("preset") {
            Some(v) => v.clone().try_into().map_err(|e| config(format!("preset: {e}")))?,
            None => Preset::SingleScale,
        };
        let observable = match user.get("observable") {
            Some(v) => v.clone().try_into().map_err(|e| config(format!("observable: {e}")))?,
            None if preset == Preset::Multiscale => Observable::FokkerPlanck,
            None => Observable::Mfpt,
        };
        let mut base = toml::Value::try_from(Self::preset(preset, observable))
            .map_err(|e| config(format!("preset expansion failed: {e}")))?;
        merge(&mut base, toml::Value::Table(user));
        let cfg: Config = base.try_into().map_err(|e| config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<()> {
        match (self.preset, &self.model) {
            (Preset::Custom, None) => return Err(config("preset custom needs a [model] table")),
            (Preset::SingleScale | Preset::Multiscale, Some(_)) => {
                return Err(config("[model] only applies to preset custom"))
            }
            _ => {}
        }
        if self.preset != Preset::Multiscale && self.multiscale.is_some() {
            return Err(config("[multiscale] only applies to preset multiscale"));
        }
        if self.preset == Preset::Multiscale && self.observable == Observable::Mfpt {
            return Err(config("preset multiscale only produces Fokker–Planck snapshot data"));
        }
        let s = &self.simulation;
        if s.n_traj == 0 || !(s.dt_time > 0.0) {
            return Err(config("simulation needs n_traj > 0 and dt_time > 0"));
        }
        if self.observable == Observable::Mfpt && (s.n_sites == 0 || !(s.domain_state[0] < s.domain_state[1])) {
            return Err(config("simulation needs n_sites > 0 and an ordered domain_state"));
        }
        if self.observable == Observable::FokkerPlanck && s.snapshot_times_time.is_empty() {
            return Err(config("simulation.snapshot_times_time must not be empty"));
        }
        if self.data.grid_points < 2 || !(self.data.grid_lo_state < self.data.grid_hi_state) {
            return Err(config("data grid needs at least two points on an ordered interval"));
        }
        if self.mesh.n_cells == 0 || !(self.mesh.lo_state < self.mesh.hi_state) {
            return Err(config("mesh needs n_cells > 0 and lo_state < hi_state"));
        }
        if !(self.fokker_planck.dt_time > 0.0) {
            return Err(config("fokker_planck.dt_time must be positive"));
        }
        if self.mcmc.thin == 0 || !(self.mcmc.h > 0.0) {
            return Err(config("mcmc needs thin >= 1 and h > 0"));
        }
        if !(0.0..1.0).contains(&self.mcmc.target_acceptance) {
            return Err(config("mcmc.target_acceptance must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn sde_model(&self) -> Result<SdeModel> {
        match (self.preset, &self.model) {
            (Preset::SingleScale, _) => Ok(SdeModel::single_scale()),
            (Preset::Custom, Some(m)) => Ok(SdeModel::new(
                Polynomial::new(m.drift_coeffs.clone()),
                Polynomial::new(m.diffusion_sq_coeffs.clone()),
            )),
            _ => Err(config("this preset has no scalar SDE model")),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Deep merge of `over` into `base`. Tagged tables (`kind = ...`) replace
/// wholesale so variant fields never mix.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && !v.as_table().unwrap().contains_key("kind") => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_single_scale_preset() {
        let cfg = Config::from_toml_str("").unwrap();
        assert_eq!(cfg, Config::preset(Preset::SingleScale, Observable::Mfpt));
        assert_eq!(cfg.simulation.sites().len(), 21);
        assert!((cfg.simulation.sites()[0] - (-1.0 + 2.0 / 22.0)).abs() < 1e-15);
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let cfg = Config::from_toml_str(
            "seed = 3\n[simulation]\nn_traj = 50\n[prior.log_diffusion]\nmean = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.simulation.n_traj, 50);
        assert_eq!(cfg.simulation.dt_time, 1e-3);
        assert_eq!(cfg.prior.log_diffusion.mean, MeanSpec::Constant(0.5));
        assert_eq!(cfg.prior.drift.mean, MeanSpec::Preset(MeanPreset::OuDrift));
    }

    #[test]
    fn tagged_tables_are_replaced() {
        let cfg = Config::from_toml_str("[simulation.initial]\nkind = \"point\"\nx_state = 0.25\n").unwrap();
        assert_eq!(cfg.simulation.initial, InitialConfig::Point { x_state: 0.25 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[mesh]\nn_cell = 10", "[newton]\ntol = 1e-3", "[nonsense]\na = 1"] {
            let err = Config::from_toml_str(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn preset_consistency_is_checked() {
        assert!(Config::from_toml_str("preset = \"custom\"").is_err());
        assert!(Config::from_toml_str("preset = \"multiscale\"\nobservable = \"mfpt\"").is_err());
        assert!(Config::from_toml_str("[model]\ndrift_coeffs = [0.0]\ndiffusion_sq_coeffs = [1.0]").is_err());
        let ms = Config::from_toml_str("preset = \"multiscale\"").unwrap();
        assert_eq!(ms.observable, Observable::FokkerPlanck);
        assert_eq!(ms.multiscale, Some(MultiscaleParams::default()));
        let custom = Config::from_toml_str(
            "preset = \"custom\"\n[model]\ndrift_coeffs = [0.0, -1.0]\ndiffusion_sq_coeffs = [1.0]",
        )
        .unwrap();
        assert_eq!(custom.sde_model().unwrap().drift_at(2.0), -2.0);
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for (p, o) in [
            (Preset::SingleScale, Observable::Mfpt),
            (Preset::SingleScale, Observable::FokkerPlanck),
            (Preset::Multiscale, Observable::FokkerPlanck),
        ] {
            let cfg = Config::preset(p, o);
            let text = toml::to_string(&cfg).unwrap();
            assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn prior_builds_on_the_mesh() {
        let cfg = Config::preset(Preset::SingleScale, Observable::Mfpt);
        let mesh = cfg.mesh.mesh().unwrap();
        let prior = cfg.prior.build(mesh).unwrap();
        use difinv::prior::GaussianPrior;
        let mean = prior.mean();
        assert_eq!(mean.len(), 2 * mesh.n_nodes());
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((mean[mesh.n_nodes()] - 1.0).abs() < 1e-15);
    }
}
