//! MFPT-hierarchy forward model and its discrete adjoints.
//!
//! Forward: `Ĝ τ_n = −n R M τ_{n−1}` (τ₀ ≡ 1), where `Ĝ` is the generator with
//! Dirichlet rows and `R` zeroes boundary rows. Adjoint, from the top moment
//! down: `Ĝᵀ μ_n = Bᵀ w_n − (n+1) M R μ_{n+1}`.

use nalgebra::DVector;

use super::{split, stack, ForwardModel, ParameterField};
use crate::error::{config, dimension, Result};
use crate::fem::{generator_form_gradient, generator_matrix, mask_boundary, Mesh1d, MfptSystem, ObservationOperator};

#[derive(Debug, Clone)]
pub struct MfptModel {
    mesh: Mesh1d,
    n_moments: usize,
    op: ObservationOperator,
}

pub struct MfptState {
    pub system: MfptSystem,
    pub sigma2: Vec<f64>,
    pub moments: Vec<Vec<f64>>,
}

impl MfptModel {
    pub fn new(mesh: Mesh1d, n_moments: usize, sites: &[f64]) -> Result<Self> {
        if n_moments == 0 {
            return Err(config("MFPT model needs at least one moment"));
        }
        Ok(Self { mesh, n_moments, op: ObservationOperator::new(&mesh, sites)? })
    }

    pub fn n_moments(&self) -> usize {
        self.n_moments
    }

    fn block<'a>(&self, w: &'a [f64], n: usize) -> &'a [f64] {
        let s = self.op.n_locations();
        &w[n * s..(n + 1) * s]
    }

    fn check_obs_len(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_obs() {
            return Err(dimension(format!("weight of length {} for {} observations", w.len(), self.n_obs())));
        }
        Ok(())
    }

    /// Incremental moments `δτ_n` for a parameter direction.
    fn tangent(&self, state: &MfptState, dm: &DVector<f64>) -> Result<Vec<Vec<f64>>> {
        if dm.len() != 2 * self.mesh.n_nodes() {
            return Err(dimension(format!("direction of length {}", dm.len())));
        }
        let (db, ds) = split(dm);
        let dsig: Vec<f64> = ds.iter().zip(&state.sigma2).map(|(d, s)| d * s).collect();
        let dg = generator_matrix(&self.mesh, db, &dsig);
        let sys = &state.system;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.n_moments);
        for n in 1..=self.n_moments {
            let mut rhs = dg.matvec(&state.moments[n - 1]);
            if n > 1 {
                let prev = sys.mass.matvec(&out[n - 2]);
                rhs.iter_mut().zip(prev).for_each(|(r, p)| *r += n as f64 * p);
            }
            rhs.iter_mut().for_each(|r| *r = -*r);
            mask_boundary(&mut rhs);
            let mut d = sys.lu.solve(&rhs);
            mask_boundary(&mut d);
            out.push(d);
        }
        Ok(out)
    }

    /// Adjoint variables `R μ_n` for the weight `w`.
    fn adjoint(&self, state: &MfptState, w: &[f64]) -> Vec<Vec<f64>> {
        let sys = &state.system;
        let k = self.n_moments;
        let mut mu: Vec<Vec<f64>> = vec![Vec::new(); k];
        for n in (1..=k).rev() {
            let mut rhs = self.op.apply_transpose(self.block(w, n - 1));
            if n < k {
                let next = sys.mass.matvec(&mu[n]);
                rhs.iter_mut().zip(next).for_each(|(r, v)| *r -= (n + 1) as f64 * v);
            }
            let mut m = sys.lu.solve_transpose(&rhs);
            mask_boundary(&mut m);
            mu[n - 1] = m;
        }
        mu
    }

    /// `−Σ_n ∂_m (Rμ_n)ᵀ G τ_n`.
    fn control(&self, sigma2: &[f64], mu: &[Vec<f64>], tau: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = self.mesh.n_nodes();
        let (mut gb, mut gs) = (vec![0.0; n], vec![0.0; n]);
        for (m, t) in mu.iter().zip(tau) {
            let (b, s) = generator_form_gradient(&self.mesh, sigma2, m, t);
            gb.iter_mut().zip(b).for_each(|(g, v)| *g -= v);
            gs.iter_mut().zip(s).for_each(|(g, v)| *g -= v);
        }
        (gb, gs)
    }
}

impl ForwardModel for MfptModel {
    type State = MfptState;

    fn mesh(&self) -> &Mesh1d {
        &self.mesh
    }

    fn n_obs(&self) -> usize {
        self.n_moments * self.op.n_locations()
    }

    fn solve(&self, m: &ParameterField) -> Result<MfptState> {
        if m.mesh != self.mesh {
            return Err(dimension("parameter field lives on a different mesh"));
        }
        let system = MfptSystem::new(&self.mesh, m)?;
        let moments = system.solve(self.n_moments)?;
        Ok(MfptState { system, sigma2: m.sigma2()?, moments })
    }

    fn observables(&self, state: &MfptState) -> Vec<f64> {
        state.moments.iter().flat_map(|t| self.op.apply(t)).collect()
    }

    fn jvp(&self, _m: &ParameterField, state: &MfptState, dm: &DVector<f64>) -> Result<Vec<f64>> {
        Ok(self.tangent(state, dm)?.iter().flat_map(|t| self.op.apply(t)).collect())
    }

    fn vjp(&self, _m: &ParameterField, state: &MfptState, w: &[f64]) -> Result<DVector<f64>> {
        self.check_obs_len(w)?;
        let mu = self.adjoint(state, w);
        let (gb, gs) = self.control(&state.sigma2, &mu, &state.moments);
        Ok(stack(gb, gs))
    }

    fn vjp_derivative(
        &self,
        _m: &ParameterField,
        state: &MfptState,
        w: &[f64],
        dm: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_obs_len(w)?;
        let sys = &state.system;
        let k = self.n_moments;
        let (db, ds) = split(dm);
        let dsig: Vec<f64> = ds.iter().zip(&state.sigma2).map(|(d, s)| d * s).collect();
        let dg = generator_matrix(&self.mesh, db, &dsig);
        let mu = self.adjoint(state, w);
        let dtau = self.tangent(state, dm)?;

        // Ĝᵀ δμ_n = −dGᵀ R μ_n − (n+1) M R δμ_{n+1}
        let mut dmu: Vec<Vec<f64>> = vec![Vec::new(); k];
        for n in (1..=k).rev() {
            let mut rhs = dg.matvec_transpose(&mu[n - 1]);
            if n < k {
                let next = sys.mass.matvec(&dmu[n]);
                rhs.iter_mut().zip(next).for_each(|(r, v)| *r += (n + 1) as f64 * v);
            }
            rhs.iter_mut().for_each(|r| *r = -*r);
            let mut d = sys.lu.solve_transpose(&rhs);
            mask_boundary(&mut d);
            dmu[n - 1] = d;
        }

        let (mut gb, mut gs) = self.control(&state.sigma2, &dmu, &state.moments);
        let (b2, s2) = self.control(&state.sigma2, &mu, &dtau);
        gb.iter_mut().zip(b2).for_each(|(g, v)| *g += v);
        gs.iter_mut().zip(s2).for_each(|(g, v)| *g += v);
        // σ² = eˢ makes the s-gradient depend on s directly.
        let (_, s_direct) = self.control(&state.sigma2, &mu, &state.moments);
        gs.iter_mut().zip(s_direct).zip(ds).for_each(|((g, v), d)| *g += v * d);
        Ok(stack(gb, gs))
    }
}
