//! Piecewise-linear finite elements on a uniform 1D mesh.
//!
//! The generator `L u = b u' + ½σ² u''` is discretized through the bilinear form
//!
//! ```text
//! a(u, v) = ∫ b u' v − ½ ∫ σ² u' v' − ½ ∫ (σ²)' u' v
//! ```
//!
//! with `σ²` interpolated into the element space and `(σ²)'` taken cellwise.
//! The Fokker–Planck operator uses the adjoint form `a*(p, v) = a(v, p)`, i.e.
//! the transpose of the same matrix. All integrals of products of linears are
//! evaluated exactly (equivalent to 2-point Gauss per cell).

use std::io::Write;

use crate::bip::ParameterField;
use crate::error::{config, dimension, Error, Result};
use crate::linalg::{Tridiagonal, TridiagonalLu};

/// Uniform mesh of `[a, b]` with `n_cells` cells.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mesh1d {
    pub a: f64,
    pub b: f64,
    pub n_cells: usize,
}

impl Mesh1d {
    pub fn new(a: f64, b: f64, n_cells: usize) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(config(format!("mesh interval ({a}, {b}) is empty or not finite")));
        }
        if n_cells == 0 {
            return Err(config("mesh needs at least one cell"));
        }
        Ok(Self { a, b, n_cells })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn h(&self) -> f64 {
        (self.b - self.a) / self.n_cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.b
        } else {
            self.a + i as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Cell index and local coordinate `t ∈ [0, 1]` of `x`.
    pub fn locate(&self, x: f64) -> Result<(usize, f64)> {
        if !self.contains(x) {
            return Err(config(format!("location {x} outside mesh [{}, {}]", self.a, self.b)));
        }
        let s = (x - self.a) / self.h();
        let cell = (s.floor() as usize).min(self.n_cells - 1);
        Ok((cell, (s - cell as f64).clamp(0.0, 1.0)))
    }
}

/// Scalar field in the linear element space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeFunction {
    pub mesh: Mesh1d,
    pub coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(mesh: Mesh1d, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.n_nodes() {
            return Err(dimension(format!(
                "{} coefficients for a mesh with {} nodes",
                coeffs.len(),
                mesh.n_nodes()
            )));
        }
        Ok(Self { mesh, coeffs })
    }

    pub fn interpolate(mesh: Mesh1d, f: impl Fn(f64) -> f64) -> Self {
        Self { mesh, coeffs: mesh.nodes().into_iter().map(f).collect() }
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (c, t) = self.mesh.locate(x)?;
        Ok((1.0 - t) * self.coeffs[c] + t * self.coeffs[c + 1])
    }
}

/// Exact mass matrix `M_ij = ∫ φ_i φ_j`.
pub fn assemble_mass(mesh: &Mesh1d) -> Tridiagonal {
    assemble_weighted_mass(mesh, &vec![1.0; mesh.n_nodes()])
}

/// `∫ w φ_i φ_j` for a nodal (linear) weight `w`.
pub fn assemble_weighted_mass(mesh: &Mesh1d, w: &[f64]) -> Tridiagonal {
    let n = mesh.n_nodes();
    assert_eq!(w.len(), n);
    let h = mesh.h();
    let mut m = Tridiagonal::zeros(n);
    for c in 0..mesh.n_cells {
        let (w0, w1) = (w[c], w[c + 1]);
        // ∫φ0³ = h/4, ∫φ0²φ1 = h/12
        m.add(c, c, h * (3.0 * w0 + w1) / 12.0);
        m.add(c + 1, c + 1, h * (w0 + 3.0 * w1) / 12.0);
        let off = h * (w0 + w1) / 12.0;
        m.add(c, c + 1, off);
        m.add(c + 1, c, off);
    }
    m
}

/// Stiffness matrix `K_ij = ∫ φ_i' φ_j'`.
pub fn assemble_stiffness(mesh: &Mesh1d) -> Tridiagonal {
    assemble_weighted_stiffness(mesh, &vec![1.0; mesh.n_nodes()])
}

/// `∫ w φ_i' φ_j'` for a nodal (linear) weight `w`.
pub fn assemble_weighted_stiffness(mesh: &Mesh1d, w: &[f64]) -> Tridiagonal {
    let n = mesh.n_nodes();
    assert_eq!(w.len(), n);
    let h = mesh.h();
    let mut k = Tridiagonal::zeros(n);
    for c in 0..mesh.n_cells {
        let v = 0.5 * (w[c] + w[c + 1]) / h;
        k.add(c, c, v);
        k.add(c + 1, c + 1, v);
        k.add(c, c + 1, -v);
        k.add(c + 1, c, -v);
    }
    k
}

/// Galerkin matrix `G_kj = a(φ_j, φ_k)` of the generator without boundary conditions.
///
/// Linear in `(drift, sigma2)`; no positivity check is made so the same routine
/// assembles directional derivatives.
pub fn generator_matrix(mesh: &Mesh1d, drift: &[f64], sigma2: &[f64]) -> Tridiagonal {
    let n = mesh.n_nodes();
    assert_eq!(drift.len(), n);
    assert_eq!(sigma2.len(), n);
    let h = mesh.h();
    let mut g = Tridiagonal::zeros(n);
    let dphi = [-1.0 / h, 1.0 / h];
    for c in 0..mesh.n_cells {
        let (b0, b1) = (drift[c], drift[c + 1]);
        let (s0, s1) = (sigma2[c], sigma2[c + 1]);
        let int_b_phi = [h * (2.0 * b0 + b1) / 6.0, h * (b0 + 2.0 * b1) / 6.0];
        let s_mean = 0.5 * (s0 + s1);
        let s_slope = (s1 - s0) / h;
        for k in 0..2 {
            for j in 0..2 {
                let val = dphi[j] * int_b_phi[k]
                    - 0.5 * s_mean * h * dphi[j] * dphi[k]
                    - 0.5 * s_slope * dphi[j] * h * 0.5;
                g.add(c + k, c + j, val);
            }
        }
    }
    g
}

/// Derivatives of `testᵀ G(b, σ²) trial` with respect to the nodal drift and
/// the nodal log-diffusion `s` (σ² = eˢ).
pub fn generator_form_gradient(
    mesh: &Mesh1d,
    sigma2: &[f64],
    test: &[f64],
    trial: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = mesh.n_nodes();
    let h = mesh.h();
    let mut gb = vec![0.0; n];
    let mut gsig = vec![0.0; n];
    for c in 0..mesh.n_cells {
        let du = (trial[c + 1] - trial[c]) / h;
        let dp = (test[c + 1] - test[c]) / h;
        let (p0, p1) = (test[c], test[c + 1]);
        gb[c] += du * h / 6.0 * (2.0 * p0 + p1);
        gb[c + 1] += du * h / 6.0 * (p0 + 2.0 * p1);
        let diff = -0.25 * du * dp * h;
        let corr = 0.25 * du * (p0 + p1);
        gsig[c] += diff + corr;
        gsig[c + 1] += diff - corr;
    }
    let gs = gsig.iter().zip(sigma2).map(|(g, s)| g * s).collect();
    (gb, gs)
}

/// Generator with homogeneous Dirichlet rows at both end nodes.
pub fn assemble_generator_backward(mesh: &Mesh1d, m: &ParameterField) -> Result<Tridiagonal> {
    let sigma2 = m.sigma2()?;
    let mut g = generator_matrix(mesh, &m.drift, &sigma2);
    g.set_identity_row(0);
    g.set_identity_row(mesh.n_cells);
    Ok(g)
}

/// Zeroes the two boundary entries.
pub(crate) fn mask_boundary(v: &mut [f64]) {
    let n = v.len();
    v[0] = 0.0;
    v[n - 1] = 0.0;
}

/// Factorized backward generator for the MFPT hierarchy.
#[derive(Debug, Clone)]
pub struct MfptSystem {
    pub mesh: Mesh1d,
    pub mass: Tridiagonal,
    pub generator: Tridiagonal,
    pub lu: TridiagonalLu,
}

impl MfptSystem {
    pub fn new(mesh: &Mesh1d, m: &ParameterField) -> Result<Self> {
        let generator = assemble_generator_backward(mesh, m)?;
        let lu = generator.factorize().map_err(|e| Error::Solver(format!("MFPT generator: {e}")))?;
        Ok(Self { mesh: *mesh, mass: assemble_mass(mesh), generator, lu })
    }

    /// Right-hand side `−n M τ_{n−1}` (τ₀ ≡ 1) with Dirichlet rows zeroed.
    pub fn moment_rhs(&self, n: usize, prev: &[f64]) -> Vec<f64> {
        let mut f = self.mass.matvec(prev);
        f.iter_mut().for_each(|v| *v *= -(n as f64));
        mask_boundary(&mut f);
        f
    }

    /// τ₁..τ_k.
    pub fn solve(&self, k: usize) -> Result<Vec<Vec<f64>>> {
        if k == 0 {
            return Err(config("MFPT hierarchy needs at least one moment"));
        }
        let mut moments: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut prev = vec![1.0; self.mesh.n_nodes()];
        for n in 1..=k {
            let mut tau = self.lu.solve(&self.moment_rhs(n, &prev));
            mask_boundary(&mut tau);
            if tau.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver(format!("non-finite MFPT moment {n}")));
            }
            prev = tau.clone();
            moments.push(tau);
        }
        Ok(moments)
    }
}

/// Forward solution of either PDE model.
#[derive(Debug, Clone, PartialEq)]
pub enum PdeSolution {
    /// τ₁..τ_k on the mesh nodes.
    Mfpt { mesh: Mesh1d, moments: Vec<Vec<f64>> },
    /// `states[j]` is the density at time `j·dt`.
    FokkerPlanck { mesh: Mesh1d, dt: f64, states: Vec<Vec<f64>> },
}

impl PdeSolution {
    pub fn mesh(&self) -> &Mesh1d {
        match self {
            PdeSolution::Mfpt { mesh, .. } | PdeSolution::FokkerPlanck { mesh, .. } => mesh,
        }
    }

    /// Long-format CSV: `node,x,moment,value` or `node,x,time,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let nodes = self.mesh().nodes();
        match self {
            PdeSolution::Mfpt { moments, .. } => {
                w.write_record(["node", "x", "moment", "value"])?;
                for (k, tau) in moments.iter().enumerate() {
                    for (i, v) in tau.iter().enumerate() {
                        w.write_record(&[i.to_string(), nodes[i].to_string(), (k + 1).to_string(), v.to_string()])?;
                    }
                }
            }
            PdeSolution::FokkerPlanck { dt, states, .. } => {
                w.write_record(["node", "x", "time", "value"])?;
                for (j, p) in states.iter().enumerate() {
                    let t = j as f64 * dt;
                    for (i, v) in p.iter().enumerate() {
                        w.write_record(&[i.to_string(), nodes[i].to_string(), t.to_string(), v.to_string()])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves `L τ₁ = −1`, `L τ_n = −n τ_{n−1}` with τ_n = 0 on the boundary.
pub fn solve_mfpt_hierarchy(mesh: &Mesh1d, m: &ParameterField, k: usize) -> Result<PdeSolution> {
    let moments = MfptSystem::new(mesh, m)?.solve(k)?;
    Ok(PdeSolution::Mfpt { mesh: *mesh, moments })
}

/// Crank–Nicolson stepping of `M ṗ = Gᵀ p` with homogeneous Dirichlet rows.
#[derive(Debug, Clone)]
pub struct FokkerPlanckSystem {
    pub mesh: Mesh1d,
    pub dt: f64,
    /// `M − (dt/2) Gᵀ`, Dirichlet rows set to identity.
    pub lhs: Tridiagonal,
    pub lhs_lu: TridiagonalLu,
    /// `M + (dt/2) Gᵀ`, Dirichlet rows zeroed.
    pub rhs: Tridiagonal,
}

impl FokkerPlanckSystem {
    pub fn new(mesh: &Mesh1d, m: &ParameterField, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(config(format!("time step must be positive, got {dt}")));
        }
        let sigma2 = m.sigma2()?;
        let gt = generator_matrix(mesh, &m.drift, &sigma2).transpose();
        let mass = assemble_mass(mesh);
        let mut lhs = mass.add_scaled(-0.5 * dt, &gt);
        let mut rhs = mass.add_scaled(0.5 * dt, &gt);
        for i in [0, mesh.n_cells] {
            lhs.set_identity_row(i);
            rhs.clear_row(i);
        }
        let lhs_lu = lhs.factorize().map_err(|e| Error::Solver(format!("Crank–Nicolson matrix: {e}")))?;
        Ok(Self { mesh: *mesh, dt, lhs, lhs_lu, rhs })
    }

    pub fn step(&self, p: &[f64]) -> Vec<f64> {
        let mut next = self.lhs_lu.solve(&self.rhs.matvec(p));
        mask_boundary(&mut next);
        next
    }

    /// States at steps `0..=n_steps`.
    pub fn solve(&self, p0: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>> {
        let mut states = Vec::with_capacity(n_steps + 1);
        let mut p = p0.to_vec();
        mask_boundary(&mut p);
        states.push(p.clone());
        for _ in 0..n_steps {
            p = self.step(&p);
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver("non-finite Fokker–Planck state".into()));
            }
            states.push(p.clone());
        }
        Ok(states)
    }
}

/// Density evolution from `p0` to `t_end` in `n_time_steps` Crank–Nicolson steps.
pub fn solve_fokker_planck(
    mesh: &Mesh1d,
    m: &ParameterField,
    p0: &FeFunction,
    t_end: f64,
    n_time_steps: usize,
) -> Result<PdeSolution> {
    if p0.mesh != *mesh {
        return Err(dimension("initial density lives on a different mesh"));
    }
    if n_time_steps == 0 {
        let mut p = p0.coeffs.clone();
        mask_boundary(&mut p);
        return Ok(PdeSolution::FokkerPlanck { mesh: *mesh, dt: t_end.max(0.0), states: vec![p] });
    }
    let dt = t_end / n_time_steps as f64;
    let states = FokkerPlanckSystem::new(mesh, m, dt)?.solve(&p0.coeffs, n_time_steps)?;
    Ok(PdeSolution::FokkerPlanck { mesh: *mesh, dt, states })
}

/// Step index of `t` on the grid `j·dt`, `j ≤ n_steps`.
pub fn time_index(t: f64, dt: f64, n_steps: usize) -> Result<usize> {
    let j = (t / dt).round();
    if t < 0.0 || (j * dt - t).abs() > 1e-9 * dt.max(t.abs()) || j as usize > n_steps {
        return Err(config(format!("time {t} is not on the solver grid (dt = {dt}, {n_steps} steps)")));
    }
    Ok(j as usize)
}

/// Point evaluation of linear-element fields at fixed locations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationOperator {
    n_nodes: usize,
    /// `(cell, weight of left node, weight of right node)`.
    stencils: Vec<(usize, f64, f64)>,
}

impl ObservationOperator {
    pub fn new(mesh: &Mesh1d, locations: &[f64]) -> Result<Self> {
        let stencils = locations
            .iter()
            .map(|&x| mesh.locate(x).map(|(c, t)| (c, 1.0 - t, t)))
            .collect::<Result<_>>()?;
        Ok(Self { n_nodes: mesh.n_nodes(), stencils })
    }

    pub fn n_locations(&self) -> usize {
        self.stencils.len()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.stencils.iter().map(|&(c, w0, w1)| w0 * u[c] + w1 * u[c + 1]).collect()
    }

    /// `Bᵀ w` for one block of `w`.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes];
        for (&(c, w0, w1), wi) in self.stencils.iter().zip(w) {
            out[c] += w0 * wi;
            out[c + 1] += w1 * wi;
        }
        out
    }
}

/// Observations of a solution, stacked moments (or times) outer, locations inner.
pub fn observe(solution: &PdeSolution, locations: &[f64], times: Option<&[f64]>) -> Result<Vec<f64>> {
    let op = ObservationOperator::new(solution.mesh(), locations)?;
    match solution {
        PdeSolution::Mfpt { moments, .. } => Ok(moments.iter().flat_map(|tau| op.apply(tau)).collect()),
        PdeSolution::FokkerPlanck { dt, states, .. } => {
            let times = times.ok_or_else(|| config("Fokker–Planck observations need times"))?;
            let mut out = Vec::with_capacity(times.len() * locations.len());
            for &t in times {
                let j = if states.len() == 1 && t == 0.0 { 0 } else { time_index(t, *dt, states.len() - 1)? };
                out.extend(op.apply(&states[j]));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(mesh: Mesh1d, b: impl Fn(f64) -> f64, sigma2: impl Fn(f64) -> f64) -> ParameterField {
        ParameterField::from_functions(mesh, b, |x| sigma2(x).ln())
    }

    #[test]
    fn mesh_validation() {
        assert!(Mesh1d::new(1.0, 1.0, 4).is_err());
        assert!(Mesh1d::new(0.0, 1.0, 0).is_err());
        let m = Mesh1d::new(-1.0, 1.0, 4).unwrap();
        assert_eq!(m.nodes(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(m.locate(1.0).unwrap(), (3, 1.0));
        assert!(m.locate(1.0001).is_err());
    }

    #[test]
    fn two_cell_mass_matrix() {
        let m = assemble_mass(&Mesh1d::new(0.0, 1.0, 2).unwrap());
        let expected = [[2.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.get(i, j) - expected[i][j] / 12.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mass_partition_of_unity() {
        let mesh = Mesh1d::new(-2.0, 3.0, 37).unwrap();
        let m = assemble_mass(&mesh);
        let total: f64 = m.row_sums().iter().sum();
        assert!((total - 5.0).abs() < 1e-12);
        let ones = vec![1.0; mesh.n_nodes()];
        assert!((crate::linalg::dot(&ones, &m.matvec(&ones)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constant_coefficient_generator_is_negative_stiffness() {
        let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
        let g = generator_matrix(&mesh, &vec![0.0; 11], &vec![2.0; 11]);
        let k = assemble_stiffness(&mesh);
        assert!(g.add_scaled(1.0, &k).to_dense().amax() < 1e-12);
        // symmetric negative definite on the interior
        let gi = g.to_dense().view((1, 1), (9, 9)).into_owned();
        assert!((gi.clone() - gi.transpose()).amax() < 1e-14);
        let eig = nalgebra::SymmetricEigen::new(gi);
        assert!(eig.eigenvalues.iter().all(|&l| l < 0.0));
    }

    #[test]
    fn generator_annihilates_constants_without_drift() {
        let mesh = Mesh1d::new(0.0, 2.0, 8).unwrap();
        let s2: Vec<f64> = mesh.nodes().iter().map(|x| 1.0 + x * x).collect();
        let g = generator_matrix(&mesh, &vec![0.0; 9], &s2);
        assert!(g.matvec(&vec![3.0; 9]).iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn pure_advection_two_cells() {
        let mesh = Mesh1d::new(0.0, 1.0, 2).unwrap();
        let g = generator_matrix(&mesh, &[1.0; 3], &[0.0; 3]).to_dense();
        let expected = nalgebra::DMatrix::from_row_slice(3, 3, &[-0.5, 0.5, 0.0, -0.5, 0.0, 0.5, 0.0, -0.5, 0.5]);
        assert!((g.clone() - expected).amax() < 1e-15);
        // skew apart from the boundary terms
        let sym = &g + g.transpose();
        let boundary = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 0.0, 1.0]));
        assert!((sym - boundary).amax() < 1e-15);
    }

    #[test]
    fn generator_matches_strong_form_on_smooth_functions() {
        // M⁻¹ G u ≈ L u away from the boundary for smooth u
        let mesh = Mesh1d::new(-1.0, 1.0, 400).unwrap();
        let nodes = mesh.nodes();
        let b: Vec<f64> = nodes.iter().map(|x| -2.0 * x * x * x + 3.0 * x).collect();
        let s2: Vec<f64> = nodes.iter().map(|x| x * x + 2.0).collect();
        let u: Vec<f64> = nodes.iter().map(|x| x.sin()).collect();
        let gu = generator_matrix(&mesh, &b, &s2).matvec(&u);
        let lu = assemble_mass(&mesh).factorize().unwrap().solve(&gu);
        for i in (50..350).step_by(25) {
            let x = nodes[i];
            let exact = b[i] * x.cos() - 0.5 * s2[i] * x.sin();
            assert!((lu[i] - exact).abs() < 1e-3, "x={x}: {} vs {exact}", lu[i]);
        }
    }

    #[test]
    fn form_gradient_matches_finite_differences() {
        let mesh = Mesh1d::new(-1.0, 1.0, 6).unwrap();
        let n = mesh.n_nodes();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let s: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 1.3).cos()).collect();
        let test: Vec<f64> = (0..n).map(|i| (i as f64 * 0.4).cos()).collect();
        let trial: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9 + 1.0).sin()).collect();
        let form = |b: &[f64], s: &[f64]| {
            let s2: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            crate::linalg::dot(&test, &generator_matrix(&mesh, b, &s2).matvec(&trial))
        };
        let s2: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let (gb, gs) = generator_form_gradient(&mesh, &s2, &test, &trial);
        let eps = 1e-6;
        for l in 0..n {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[l] += eps;
            bm[l] -= eps;
            let fd = (form(&bp, &s) - form(&bm, &s)) / (2.0 * eps);
            assert!((fd - gb[l]).abs() < 1e-8);
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[l] += eps;
            sm[l] -= eps;
            let fd = (form(&b, &sp) - form(&b, &sm)) / (2.0 * eps);
            assert!((fd - gs[l]).abs() < 1e-8);
        }
    }

    #[test]
    fn brownian_mfpt_matches_analytic_moments() {
        let mesh = Mesh1d::new(-1.0, 1.0, 200).unwrap();
        let m = field(mesh, |_| 0.0, |_| 2.0);
        let PdeSolution::Mfpt { moments, .. } = solve_mfpt_hierarchy(&mesh, &m, 2).unwrap() else {
            unreachable!()
        };
        for (i, x) in mesh.nodes().iter().enumerate() {
            assert!((moments[0][i] - (1.0 - x * x) / 2.0).abs() < 1e-4);
            let t2 = x.powi(4) / 12.0 - x * x / 2.0 + 5.0 / 12.0;
            assert!((moments[1][i] - t2).abs() < 1e-4);
        }
        assert_eq!(moments[0][0], 0.0);
        assert_eq!(moments[1][200], 0.0);
        assert!((moments[1][100] - 5.0 / 12.0).abs() < 1e-4);
    }

    #[test]
    fn mfpt_needs_a_moment() {
        let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
        let m = field(mesh, |_| 0.0, |_| 2.0);
        assert!(solve_mfpt_hierarchy(&mesh, &m, 0).is_err());
    }

    #[test]
    fn variable_coefficient_mfpt_converges_at_second_order() {
        let reference_mesh = Mesh1d::new(-1.0, 1.0, 3200).unwrap();
        let model = |mesh: Mesh1d| field(mesh, |x| -2.0 * x.powi(3) + 3.0 * x, |x| x * x + 2.0);
        let PdeSolution::Mfpt { moments: reference, .. } =
            solve_mfpt_hierarchy(&reference_mesh, &model(reference_mesh), 1).unwrap()
        else {
            unreachable!()
        };
        let errors: Vec<f64> = [25, 50, 100, 200]
            .iter()
            .map(|&n| {
                let mesh = Mesh1d::new(-1.0, 1.0, n).unwrap();
                let PdeSolution::Mfpt { moments, .. } = solve_mfpt_hierarchy(&mesh, &model(mesh), 1).unwrap() else {
                    unreachable!()
                };
                let stride = 3200 / n;
                moments[0].iter().enumerate().map(|(i, v)| (v - reference[0][i * stride]).abs()).fold(0.0, f64::max)
            })
            .collect();
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..5.0).contains(&ratio), "errors {errors:?}");
        }
    }

    fn ou_field(mesh: Mesh1d) -> ParameterField {
        field(mesh, |x| -x, |_| 1.0)
    }

    #[test]
    fn ou_stationary_density_is_preserved() {
        let mesh = Mesh1d::new(-6.0, 6.0, 200).unwrap();
        let exact = |x: f64| (-x * x).exp() / std::f64::consts::PI.sqrt();
        let p0 = FeFunction::interpolate(mesh, exact);
        let sol = solve_fokker_planck(&mesh, &ou_field(mesh), &p0, 10.0, 1000).unwrap();
        let PdeSolution::FokkerPlanck { states, .. } = &sol else { unreachable!() };
        let last = states.last().unwrap();
        let diff: Vec<f64> = last.iter().zip(mesh.nodes()).map(|(p, x)| p - exact(x)).collect();
        let l2 = crate::linalg::dot(&diff, &assemble_mass(&mesh).matvec(&diff)).sqrt();
        assert!(l2 < 1e-3, "L2 distance {l2}");
    }

    #[test]
    fn zero_steps_returns_initial_density() {
        let mesh = Mesh1d::new(-3.0, 3.0, 30).unwrap();
        let p0 = FeFunction::interpolate(mesh, |x| (-x * x).exp());
        let sol = solve_fokker_planck(&mesh, &ou_field(mesh), &p0, 0.0, 0).unwrap();
        let obs = observe(&sol, &[0.0, 1.0], Some(&[0.0])).unwrap();
        assert_eq!(obs, vec![1.0, (-1.0f64).exp()]);
    }

    #[test]
    fn heat_equation_conserves_mass() {
        let mesh = Mesh1d::new(-10.0, 10.0, 400).unwrap();
        let m = field(mesh, |_| 0.0, |_| 1.0);
        let p0 = FeFunction::interpolate(mesh, |x| (-x * x).exp() / std::f64::consts::PI.sqrt());
        let sol = solve_fokker_planck(&mesh, &m, &p0, 1.0, 200).unwrap();
        let PdeSolution::FokkerPlanck { states, .. } = &sol else { unreachable!() };
        let mass = assemble_mass(&mesh).row_sums();
        for p in states {
            let total = crate::linalg::dot(&mass, p);
            assert!((total - 1.0).abs() < 1e-3, "mass {total}");
        }
    }

    #[test]
    fn off_grid_time_is_rejected() {
        let mesh = Mesh1d::new(-3.0, 3.0, 30).unwrap();
        let p0 = FeFunction::interpolate(mesh, |x| (-x * x).exp());
        let sol = solve_fokker_planck(&mesh, &ou_field(mesh), &p0, 1.0, 10).unwrap();
        assert!(matches!(observe(&sol, &[0.0], Some(&[0.05])), Err(Error::Config(_))));
        assert!(observe(&sol, &[0.0], Some(&[0.3])).is_ok());
    }

    #[test]
    fn observation_at_nodes_and_midpoints() {
        let mesh = Mesh1d::new(0.0, 1.0, 4).unwrap();
        let sol = PdeSolution::Mfpt { mesh, moments: vec![vec![0.0, 1.0, 4.0, 9.0, 16.0]] };
        assert_eq!(observe(&sol, &[0.25, 0.5], None).unwrap(), vec![1.0, 4.0]);
        assert_eq!(observe(&sol, &[0.125, 0.625], None).unwrap(), vec![0.5, 6.5]);
        assert!(observe(&sol, &[1.5], None).is_err());
    }

    #[test]
    fn fifty_one_sites_two_moments_stack_to_102() {
        let mesh = Mesh1d::new(-1.0, 1.0, 100).unwrap();
        let m = field(mesh, |_| 0.0, |_| 2.0);
        let sol = solve_mfpt_hierarchy(&mesh, &m, 2).unwrap();
        let sites: Vec<f64> = (1..=51).map(|i| -1.0 + 2.0 * i as f64 / 52.0).collect();
        let obs = observe(&sol, &sites, None).unwrap();
        assert_eq!(obs.len(), 102);
        assert!((obs[25] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn solution_csv_has_header() {
        let mesh = Mesh1d::new(0.0, 1.0, 2).unwrap();
        let sol = PdeSolution::Mfpt { mesh, moments: vec![vec![0.0, 1.0, 0.0]] };
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("node,x,moment,value\n0,0,1,0\n"));
    }

    proptest! {
        #[test]
        fn observation_is_linear(
            u in prop::collection::vec(-5.0f64..5.0, 11),
            v in prop::collection::vec(-5.0f64..5.0, 11),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
            let op = ObservationOperator::new(&mesh, &[-0.93, -0.1, 0.0, 0.37, 1.0]).unwrap();
            let comb: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = op.apply(&comb);
            let (ou, ov) = (op.apply(&u), op.apply(&v));
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * ou[i] + beta * ov[i])).abs() < 1e-12);
            }
            // transpose consistency
            let w = [0.3, -1.0, 2.0, 0.5, 0.1];
            let lhs = crate::linalg::dot(&op.apply(&u), &w);
            let rhs = crate::linalg::dot(&u, &op.apply_transpose(&w));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
