//! Parameter-to-observable maps, the data misfit and its adjoint derivatives.
//!
//! The unknown is the stacked coefficient vector `m = [b; s]` of length `2N`
//! with `s = log σ²`. All derivatives are discrete adjoints of the assembled
//! solvers, returned in coefficient space (Euclidean inner product).

mod fp;
mod linear;
mod mfpt;

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationKind, ObservationSet};
use crate::error::{dimension, Error, Result};
use crate::fem::{FeFunction, Mesh1d};

pub use fp::{FpModel, FpState};
pub use linear::LinearModel;
pub use mfpt::{MfptModel, MfptState};

/// Drift and log-diffusion coefficients on a common mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    pub mesh: Mesh1d,
    pub drift: Vec<f64>,
    pub log_diffusion: Vec<f64>,
}

impl ParameterField {
    pub fn new(mesh: Mesh1d, drift: Vec<f64>, log_diffusion: Vec<f64>) -> Result<Self> {
        let n = mesh.n_nodes();
        if drift.len() != n || log_diffusion.len() != n {
            return Err(dimension(format!(
                "parameter fields of length {} and {} on a mesh with {n} nodes",
                drift.len(),
                log_diffusion.len()
            )));
        }
        Ok(Self { mesh, drift, log_diffusion })
    }

    pub fn from_functions(mesh: Mesh1d, b: impl Fn(f64) -> f64, s: impl Fn(f64) -> f64) -> Self {
        let nodes = mesh.nodes();
        Self {
            mesh,
            drift: nodes.iter().map(|&x| b(x)).collect(),
            log_diffusion: nodes.iter().map(|&x| s(x)).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    /// Nodal σ² = exp(s).
    pub fn sigma2(&self) -> Result<Vec<f64>> {
        self.log_diffusion
            .iter()
            .map(|&s| {
                let v = s.exp();
                if v > 0.0 && v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NumericalDomain(format!("log-diffusion {s} gives σ² = {v}")))
                }
            })
            .collect()
    }

    pub fn drift_function(&self) -> FeFunction {
        FeFunction { mesh: self.mesh, coeffs: self.drift.clone() }
    }

    pub fn log_diffusion_function(&self) -> FeFunction {
        FeFunction { mesh: self.mesh, coeffs: self.log_diffusion.clone() }
    }

    /// Stacked `[b; s]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.n_nodes(), self.drift.iter().chain(&self.log_diffusion).copied())
    }

    pub fn from_vector(mesh: Mesh1d, v: &DVector<f64>) -> Result<Self> {
        let n = mesh.n_nodes();
        if v.len() != 2 * n {
            return Err(dimension(format!("parameter vector of length {} for {n} nodes", v.len())));
        }
        Ok(Self { mesh, drift: v.rows(0, n).iter().copied().collect(), log_diffusion: v.rows(n, n).iter().copied().collect() })
    }

    /// `node,x,drift,log_diffusion`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node", "x", "drift", "log_diffusion"])?;
        for (i, x) in self.mesh.nodes().iter().enumerate() {
            w.write_record(&[i.to_string(), x.to_string(), self.drift[i].to_string(), self.log_diffusion[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits a stacked parameter-space vector into its drift and log-diffusion halves.
pub(crate) fn split(v: &DVector<f64>) -> (&[f64], &[f64]) {
    let n = v.len() / 2;
    v.as_slice().split_at(n)
}

pub(crate) fn stack(b: Vec<f64>, s: Vec<f64>) -> DVector<f64> {
    let n = b.len() + s.len();
    DVector::from_iterator(n, b.into_iter().chain(s))
}

/// A differentiable map from coefficients to predicted observations.
pub trait ForwardModel: Send + Sync {
    /// Forward state retained for derivative evaluations.
    type State: Send + Sync;

    fn mesh(&self) -> &Mesh1d;

    fn n_obs(&self) -> usize;

    fn solve(&self, m: &ParameterField) -> Result<Self::State>;

    fn observables(&self, state: &Self::State) -> Vec<f64>;

    /// `J(m) dm`.
    fn jvp(&self, m: &ParameterField, state: &Self::State, dm: &DVector<f64>) -> Result<Vec<f64>>;

    /// `J(m)ᵀ w`.
    fn vjp(&self, m: &ParameterField, state: &Self::State, w: &[f64]) -> Result<DVector<f64>>;

    /// Directional derivative `d/dε J(m + ε dm)ᵀ w` at ε = 0, `w` held fixed.
    fn vjp_derivative(
        &self,
        m: &ParameterField,
        state: &Self::State,
        w: &[f64],
        dm: &DVector<f64>,
    ) -> Result<DVector<f64>>;

    /// `F(m)`.
    fn apply(&self, m: &ParameterField) -> Result<Vec<f64>> {
        Ok(self.observables(&self.solve(m)?))
    }
}

/// Either PDE forward model, selected at run time.
#[derive(Debug, Clone)]
pub enum PtoModel {
    Mfpt(MfptModel),
    FokkerPlanck(FpModel),
}

pub enum PtoState {
    Mfpt(MfptState),
    FokkerPlanck(FpState),
}

impl PtoModel {
    /// Model matching the layout of `obs`. Fokker–Planck needs the initial
    /// density and time stepping.
    pub fn for_observations(
        mesh: Mesh1d,
        obs: &ObservationSet,
        fp: Option<(FeFunction, f64, usize)>,
    ) -> Result<Self> {
        match obs.kind {
            ObservationKind::Mfpt { n_moments } => Ok(PtoModel::Mfpt(MfptModel::new(mesh, n_moments, &obs.locations)?)),
            ObservationKind::FokkerPlanck => {
                let (p0, t_end, n_steps) =
                    fp.ok_or_else(|| crate::error::config("Fokker–Planck model needs p0 and time stepping"))?;
                Ok(PtoModel::FokkerPlanck(FpModel::new(mesh, p0, t_end, n_steps, &obs.locations, &obs.times)?))
            }
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $state:ident, $m:ident => $body:expr) => {
        match ($self, $state) {
            (PtoModel::Mfpt($m), PtoState::Mfpt($state)) => $body,
            (PtoModel::FokkerPlanck($m), PtoState::FokkerPlanck($state)) => $body,
            _ => Err(dimension("forward state does not belong to this model")),
        }
    };
}

impl ForwardModel for PtoModel {
    type State = PtoState;

    fn mesh(&self) -> &Mesh1d {
        match self {
            PtoModel::Mfpt(m) => m.mesh(),
            PtoModel::FokkerPlanck(m) => m.mesh(),
        }
    }

    fn n_obs(&self) -> usize {
        match self {
            PtoModel::Mfpt(m) => m.n_obs(),
            PtoModel::FokkerPlanck(m) => m.n_obs(),
        }
    }

    fn solve(&self, m: &ParameterField) -> Result<PtoState> {
        match self {
            PtoModel::Mfpt(model) => model.solve(m).map(PtoState::Mfpt),
            PtoModel::FokkerPlanck(model) => model.solve(m).map(PtoState::FokkerPlanck),
        }
    }

    fn observables(&self, state: &PtoState) -> Vec<f64> {
        match (self, state) {
            (PtoModel::Mfpt(model), PtoState::Mfpt(s)) => model.observables(s),
            (PtoModel::FokkerPlanck(model), PtoState::FokkerPlanck(s)) => model.observables(s),
            _ => panic!("forward state does not belong to this model"),
        }
    }

    fn jvp(&self, m: &ParameterField, state: &PtoState, dm: &DVector<f64>) -> Result<Vec<f64>> {
        dispatch!(self, state, model => model.jvp(m, state, dm))
    }

    fn vjp(&self, m: &ParameterField, state: &PtoState, w: &[f64]) -> Result<DVector<f64>> {
        dispatch!(self, state, model => model.vjp(m, state, w))
    }

    fn vjp_derivative(
        &self,
        m: &ParameterField,
        state: &PtoState,
        w: &[f64],
        dm: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        dispatch!(self, state, model => model.vjp_derivative(m, state, w, dm))
    }
}

/// Which data-misfit Hessian to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianKind {
    #[default]
    GaussNewton,
    Full,
}

/// Misfit value, gradient and the forward state they were computed from.
pub struct MisfitEval<S> {
    pub m: ParameterField,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub prediction: Vec<f64>,
    /// `Γ⁻¹ (y − F(m))`.
    pub weighted_residual: Vec<f64>,
    pub state: S,
}

/// Forward model plus data: `Φ(m) = ½ ‖y − F(m)‖²_Γ⁻¹`.
#[derive(Debug, Clone)]
pub struct InverseProblem<F> {
    pub model: F,
    pub y: Vec<f64>,
    pub gamma_diag: Vec<f64>,
}

impl<F: ForwardModel> InverseProblem<F> {
    pub fn new(model: F, y: Vec<f64>, gamma_diag: Vec<f64>) -> Result<Self> {
        if y.len() != model.n_obs() || gamma_diag.len() != model.n_obs() {
            return Err(dimension(format!(
                "model predicts {} observations, data has {} values and {} variances",
                model.n_obs(),
                y.len(),
                gamma_diag.len()
            )));
        }
        if gamma_diag.iter().any(|&g| !(g > 0.0)) {
            return Err(crate::error::config("noise variances must be positive"));
        }
        Ok(Self { model, y, gamma_diag })
    }

    pub fn from_observations(model: F, obs: &ObservationSet) -> Result<Self> {
        Self::new(model, obs.y.clone(), obs.gamma_diag.clone())
    }

    pub fn n_params(&self) -> usize {
        2 * self.model.mesh().n_nodes()
    }

    pub fn misfit_of_prediction(&self, prediction: &[f64]) -> f64 {
        0.5 * self
            .y
            .iter()
            .zip(prediction)
            .zip(&self.gamma_diag)
            .map(|((y, f), g)| (y - f) * (y - f) / g)
            .sum::<f64>()
    }

    pub fn misfit(&self, m: &ParameterField) -> Result<f64> {
        Ok(self.misfit_of_prediction(&self.model.apply(m)?))
    }

    /// Value and gradient at `m`, keeping the forward state.
    pub fn evaluate(&self, m: &ParameterField) -> Result<MisfitEval<F::State>> {
        let state = self.model.solve(m)?;
        let prediction = self.model.observables(&state);
        let value = self.misfit_of_prediction(&prediction);
        let weighted_residual: Vec<f64> =
            self.y.iter().zip(&prediction).zip(&self.gamma_diag).map(|((y, f), g)| (y - f) / g).collect();
        let gradient = -self.model.vjp(m, &state, &weighted_residual)?;
        Ok(MisfitEval { m: m.clone(), value, gradient, prediction, weighted_residual, state })
    }

    /// Data-misfit Hessian applied to `v` at the evaluation point.
    pub fn hessian_vector(
        &self,
        eval: &MisfitEval<F::State>,
        v: &DVector<f64>,
        kind: HessianKind,
    ) -> Result<DVector<f64>> {
        if v.len() != self.n_params() {
            return Err(dimension(format!("direction of length {} for {} parameters", v.len(), self.n_params())));
        }
        let jv = self.model.jvp(&eval.m, &eval.state, v)?;
        let weighted: Vec<f64> = jv.iter().zip(&self.gamma_diag).map(|(a, g)| a / g).collect();
        let mut hv = self.model.vjp(&eval.m, &eval.state, &weighted)?;
        if kind == HessianKind::Full {
            hv -= self.model.vjp_derivative(&eval.m, &eval.state, &eval.weighted_residual, v)?;
        }
        Ok(hv)
    }
}
