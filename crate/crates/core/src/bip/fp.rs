//! Fokker–Planck forward model and its discrete Crank–Nicolson adjoints.
//!
//! Forward: `A p^{k+1} = C p^k` with `A = M − (Δt/2) R Gᵀ` (identity on the
//! Dirichlet rows) and `C = R (M + (Δt/2) Gᵀ)`. Adjoint, backward in time:
//! `Aᵀ μ_k = q_k + Cᵀ μ_{k+1}`, where `q_k = Bᵀ w_t` at observed steps.

use nalgebra::DVector;

use super::{split, stack, ForwardModel, ParameterField};
use crate::error::{config, dimension, Result};
use crate::fem::{
    generator_form_gradient, generator_matrix, mask_boundary, time_index, FeFunction, FokkerPlanckSystem, Mesh1d,
    ObservationOperator,
};
use crate::linalg::Tridiagonal;

#[derive(Debug, Clone)]
pub struct FpModel {
    mesh: Mesh1d,
    p0: Vec<f64>,
    dt: f64,
    n_steps: usize,
    op: ObservationOperator,
    /// Step index of each observed time, in data order.
    obs_steps: Vec<usize>,
}

pub struct FpState {
    pub system: FokkerPlanckSystem,
    pub sigma2: Vec<f64>,
    /// `states[k]` at time `k·dt`.
    pub states: Vec<Vec<f64>>,
}

impl FpModel {
    pub fn new(
        mesh: Mesh1d,
        p0: FeFunction,
        t_end: f64,
        n_steps: usize,
        locations: &[f64],
        times: &[f64],
    ) -> Result<Self> {
        if p0.mesh != mesh {
            return Err(dimension("initial density lives on a different mesh"));
        }
        if n_steps == 0 || !(t_end > 0.0) {
            return Err(config("Fokker–Planck model needs t_end > 0 and at least one step"));
        }
        let dt = t_end / n_steps as f64;
        let obs_steps = times.iter().map(|&t| time_index(t, dt, n_steps)).collect::<Result<_>>()?;
        Ok(Self { mesh, p0: p0.coeffs, dt, n_steps, op: ObservationOperator::new(&mesh, locations)?, obs_steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Last step that influences any observation.
    fn horizon(&self) -> usize {
        self.obs_steps.iter().copied().max().unwrap_or(0)
    }

    /// `Bᵀ w` gathered per time step.
    fn sources(&self, w: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        if w.len() != self.n_obs() {
            return Err(dimension(format!("weight of length {} for {} observations", w.len(), self.n_obs())));
        }
        let s = self.op.n_locations();
        let mut q: Vec<Option<Vec<f64>>> = vec![None; self.horizon() + 1];
        for (t, &k) in self.obs_steps.iter().enumerate() {
            let add = self.op.apply_transpose(&w[t * s..(t + 1) * s]);
            match &mut q[k] {
                Some(v) => v.iter_mut().zip(add).for_each(|(a, b)| *a += b),
                slot => *slot = Some(add),
            }
        }
        Ok(q)
    }

    fn direction_generator(&self, sigma2: &[f64], dm: &DVector<f64>) -> Result<Tridiagonal> {
        if dm.len() != 2 * self.mesh.n_nodes() {
            return Err(dimension(format!("direction of length {}", dm.len())));
        }
        let (db, ds) = split(dm);
        let dsig: Vec<f64> = ds.iter().zip(sigma2).map(|(d, s)| d * s).collect();
        Ok(generator_matrix(&self.mesh, db, &dsig))
    }

    /// `δp^k` for `k = 0..=horizon`.
    fn tangent(&self, state: &FpState, dg: &Tridiagonal) -> Vec<Vec<f64>> {
        let sys = &state.system;
        let n = self.mesh.n_nodes();
        let mut out = vec![vec![0.0; n]];
        for k in 0..self.horizon() {
            let sum: Vec<f64> = state.states[k + 1].iter().zip(&state.states[k]).map(|(a, b)| a + b).collect();
            let mut f = dg.matvec_transpose(&sum);
            f.iter_mut().for_each(|v| *v *= 0.5 * self.dt);
            mask_boundary(&mut f);
            let cp = sys.rhs.matvec(&out[k]);
            let rhs: Vec<f64> = cp.iter().zip(&f).map(|(a, b)| a + b).collect();
            let mut d = sys.lhs_lu.solve(&rhs);
            mask_boundary(&mut d);
            out.push(d);
        }
        out
    }

    /// Masked adjoints `R μ_k` for `k = 1..=horizon` (index 0 unused).
    fn adjoint(&self, state: &FpState, q: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
        let sys = &state.system;
        let n = self.mesh.n_nodes();
        let horizon = self.horizon();
        let mut mu = vec![vec![0.0; n]; horizon + 2];
        let mut raw_next = vec![0.0; n];
        for k in (1..=horizon).rev() {
            let mut rhs = sys.rhs.matvec_transpose(&raw_next);
            if let Some(src) = &q[k] {
                rhs.iter_mut().zip(src).for_each(|(r, s)| *r += s);
            }
            raw_next = sys.lhs_lu.solve_transpose(&rhs);
            let mut masked = raw_next.clone();
            mask_boundary(&mut masked);
            mu[k] = masked;
        }
        mu
    }

    /// `(Δt/2) Σ_k ∂_m (p^k + p^{k−1})ᵀ G (R μ_k)`.
    fn control(&self, sigma2: &[f64], states: &[Vec<f64>], mu: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = self.mesh.n_nodes();
        let (mut gb, mut gs) = (vec![0.0; n], vec![0.0; n]);
        let half = 0.5 * self.dt;
        for k in 1..=self.horizon() {
            let sum: Vec<f64> = states[k].iter().zip(&states[k - 1]).map(|(a, b)| a + b).collect();
            let (b, s) = generator_form_gradient(&self.mesh, sigma2, &sum, &mu[k]);
            gb.iter_mut().zip(b).for_each(|(g, v)| *g += half * v);
            gs.iter_mut().zip(s).for_each(|(g, v)| *g += half * v);
        }
        (gb, gs)
    }
}

impl ForwardModel for FpModel {
    type State = FpState;

    fn mesh(&self) -> &Mesh1d {
        &self.mesh
    }

    fn n_obs(&self) -> usize {
        self.obs_steps.len() * self.op.n_locations()
    }

    fn solve(&self, m: &ParameterField) -> Result<FpState> {
        if m.mesh != self.mesh {
            return Err(dimension("parameter field lives on a different mesh"));
        }
        let system = FokkerPlanckSystem::new(&self.mesh, m, self.dt)?;
        let states = system.solve(&self.p0, self.horizon())?;
        Ok(FpState { system, sigma2: m.sigma2()?, states })
    }

    fn observables(&self, state: &FpState) -> Vec<f64> {
        self.obs_steps.iter().flat_map(|&k| self.op.apply(&state.states[k])).collect()
    }

    fn jvp(&self, _m: &ParameterField, state: &FpState, dm: &DVector<f64>) -> Result<Vec<f64>> {
        let dg = self.direction_generator(&state.sigma2, dm)?;
        let dp = self.tangent(state, &dg);
        Ok(self.obs_steps.iter().flat_map(|&k| self.op.apply(&dp[k])).collect())
    }

    fn vjp(&self, _m: &ParameterField, state: &FpState, w: &[f64]) -> Result<DVector<f64>> {
        let q = self.sources(w)?;
        let mu = self.adjoint(state, &q);
        let (gb, gs) = self.control(&state.sigma2, &state.states, &mu);
        Ok(stack(gb, gs))
    }

    fn vjp_derivative(
        &self,
        _m: &ParameterField,
        state: &FpState,
        w: &[f64],
        dm: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let sys = &state.system;
        let n = self.mesh.n_nodes();
        let horizon = self.horizon();
        let dg = self.direction_generator(&state.sigma2, dm)?;
        let q = self.sources(w)?;
        let mu = self.adjoint(state, &q);
        let dp = self.tangent(state, &dg);

        // Aᵀ δμ_k = Cᵀ δμ_{k+1} + (Δt/2) dG R (μ_k + μ_{k+1})
        let mut dmu = vec![vec![0.0; n]; horizon + 2];
        let mut raw_next = vec![0.0; n];
        for k in (1..=horizon).rev() {
            let mut rhs = sys.rhs.matvec_transpose(&raw_next);
            let sum: Vec<f64> = mu[k].iter().zip(&mu[k + 1]).map(|(a, b)| a + b).collect();
            let src = dg.matvec(&sum);
            rhs.iter_mut().zip(src).for_each(|(r, s)| *r += 0.5 * self.dt * s);
            raw_next = sys.lhs_lu.solve_transpose(&rhs);
            let mut masked = raw_next.clone();
            mask_boundary(&mut masked);
            dmu[k] = masked;
        }

        let (mut gb, mut gs) = self.control(&state.sigma2, &dp, &mu);
        let (b2, s2) = self.control(&state.sigma2, &state.states, &dmu);
        gb.iter_mut().zip(b2).for_each(|(g, v)| *g += v);
        gs.iter_mut().zip(s2).for_each(|(g, v)| *g += v);
        let (_, s_direct) = self.control(&state.sigma2, &state.states, &mu);
        let (_, ds) = split(dm);
        gs.iter_mut().zip(s_direct).zip(ds).for_each(|((g, v), d)| *g += v * d);
        Ok(stack(gb, gs))
    }
}
