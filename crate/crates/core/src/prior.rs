//! Bi-Laplacian Gaussian priors, `C = (δI − γΔ)⁻²` with Robin boundary terms.
//!
//! Discretely `A = δM + γK + (√(γδ)/1.42) B_∂`, `C = A⁻¹ M A⁻¹` and
//! `C⁻¹ = A M⁻¹ A`. Samples are `m̄ + A⁻¹ L ξ` with `M = L Lᵀ`.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{config, dimension, Error, Result};
use crate::fem::{assemble_mass, assemble_weighted_mass, assemble_weighted_stiffness, FeFunction, Mesh1d};
use crate::linalg::{BidiagonalFactor, Tridiagonal, TridiagonalLu};

/// Denominator of the Robin coefficient `√(γδ)/1.42`.
pub const ROBIN_DENOMINATOR: f64 = 1.42;

/// Zero-mean-fluctuation Gaussian measure on a coefficient space.
pub trait GaussianPrior: Send + Sync {
    fn dim(&self) -> usize;

    fn mean(&self) -> &DVector<f64>;

    /// `C⁻¹ v`.
    fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64>;

    /// `C v`.
    fn apply_covariance(&self, v: &DVector<f64>) -> DVector<f64>;

    /// A draw from `N(0, C)`.
    fn sample_fluctuation(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// `diag(C)`.
    fn covariance_diagonal(&self) -> DVector<f64>;

    /// `½ ⟨m − m̄, C⁻¹ (m − m̄)⟩`.
    fn cost(&self, m: &DVector<f64>) -> f64 {
        let d = m - self.mean();
        0.5 * d.dot(&self.apply_precision(&d))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.mean() + self.sample_fluctuation(rng)
    }
}

/// Pointwise variance, correlation length and smoothness of the continuum prior.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PointwiseStats {
    pub sigma2: f64,
    pub rho: f64,
    pub nu: f64,
}

/// Γ(ν) for the smoothness orders ν = 2 − d/2, d ∈ {1, 2, 3}.
fn gamma_fn(d: usize) -> Result<(f64, f64)> {
    let pi = std::f64::consts::PI;
    match d {
        1 => Ok((1.5, pi.sqrt() / 2.0)),
        2 => Ok((1.0, 1.0)),
        3 => Ok((0.5, pi.sqrt())),
        _ => Err(config(format!("spatial dimension {d} not in 1..=3"))),
    }
}

/// `σ² = Γ(ν) / ((4π)^{d/2} δ^ν γ^{d/2})`, `ρ = √(8νγ/δ)`.
pub fn pointwise_stats(delta: f64, gamma: f64, d: usize) -> Result<PointwiseStats> {
    let (nu, g) = gamma_fn(d)?;
    if !(delta > 0.0 && gamma > 0.0) {
        return Err(config("prior hyperparameters must be positive"));
    }
    let half_d = d as f64 / 2.0;
    let sigma2 = g / ((4.0 * std::f64::consts::PI).powf(half_d) * delta.powf(nu) * gamma.powf(half_d));
    let rho = (8.0 * nu * gamma / delta).sqrt();
    Ok(PointwiseStats { sigma2, rho, nu })
}

/// `(δ, γ)` reproducing a target pointwise variance and correlation length.
pub fn solve_hyperparams(sigma2: f64, rho: f64, d: usize) -> Result<(f64, f64)> {
    let (nu, g) = gamma_fn(d)?;
    if !(sigma2 > 0.0 && rho > 0.0) {
        return Err(config("target variance and correlation length must be positive"));
    }
    let half_d = d as f64 / 2.0;
    let ratio = rho * rho / (8.0 * nu);
    // ν + d/2 = 2, so σ² ∝ δ⁻²
    let delta = (g / ((4.0 * std::f64::consts::PI).powf(half_d) * sigma2 * ratio.powf(half_d))).sqrt();
    Ok((delta, ratio * delta))
}

/// Single-component bi-Laplacian prior on a 1D mesh.
#[derive(Debug, Clone)]
pub struct MaternPrior {
    pub mesh: Mesh1d,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    mean: DVector<f64>,
    sqrt_precision: Tridiagonal,
    a_lu: TridiagonalLu,
    mass: Tridiagonal,
    mass_lu: TridiagonalLu,
    mass_factor: BidiagonalFactor,
}

impl MaternPrior {
    pub fn new(mesh: Mesh1d, delta: f64, gamma: f64, mean: FeFunction) -> Result<Self> {
        let n = mesh.n_nodes();
        Self::with_fields(mesh, vec![delta; n], vec![gamma; n], mean)
    }

    /// Prior with the given pointwise variance and correlation length.
    pub fn from_stats(mesh: Mesh1d, sigma2: f64, rho: f64, mean: FeFunction) -> Result<Self> {
        let (delta, gamma) = solve_hyperparams(sigma2, rho, 1)?;
        Self::new(mesh, delta, gamma, mean)
    }

    pub fn with_fields(mesh: Mesh1d, delta: Vec<f64>, gamma: Vec<f64>, mean: FeFunction) -> Result<Self> {
        let n = mesh.n_nodes();
        if delta.len() != n || gamma.len() != n || mean.coeffs.len() != n || mean.mesh != mesh {
            return Err(dimension("prior fields must live on the prior mesh"));
        }
        if delta.iter().chain(&gamma).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(config("prior hyperparameters must be positive and finite"));
        }
        let sqrt_precision = assemble_sqrt_precision(&mesh, &delta, &gamma);
        let internal = |what: &str, e: Error| Error::Solver(format!("prior {what} is not s.p.d.: {e}"));
        // Cholesky doubles as the s.p.d. check on A.
        sqrt_precision.cholesky().map_err(|e| internal("operator", e))?;
        let a_lu = sqrt_precision.factorize().map_err(|e| internal("operator", e))?;
        let mass = assemble_mass(&mesh);
        let mass_lu = mass.factorize().map_err(|e| internal("mass", e))?;
        let mass_factor = mass.cholesky().map_err(|e| internal("mass", e))?;
        Ok(Self {
            mesh,
            delta,
            gamma,
            mean: DVector::from_vec(mean.coeffs),
            sqrt_precision,
            a_lu,
            mass,
            mass_lu,
            mass_factor,
        })
    }

    pub fn sqrt_precision(&self) -> &Tridiagonal {
        &self.sqrt_precision
    }

    pub fn mean_function(&self) -> FeFunction {
        FeFunction { mesh: self.mesh, coeffs: self.mean.iter().copied().collect() }
    }

    /// `m̄ + A⁻¹ L ξ` for a given white-noise vector.
    pub fn sample_from_noise(&self, xi: &[f64]) -> FeFunction {
        let w = self.a_lu.solve(&self.mass_factor.apply(xi));
        FeFunction { mesh: self.mesh, coeffs: w.iter().zip(self.mean.iter()).map(|(a, b)| a + b).collect() }
    }

    pub fn sample_function(&self, rng: &mut dyn RngCore) -> FeFunction {
        let xi = standard_normal(rng, self.mesh.n_nodes());
        self.sample_from_noise(&xi)
    }
}

/// `A = δM + γK + (√(γδ)/1.42) B_∂` with nodal hyperparameter fields.
pub fn assemble_sqrt_precision(mesh: &Mesh1d, delta: &[f64], gamma: &[f64]) -> Tridiagonal {
    let mut a = assemble_weighted_mass(mesh, delta).add_scaled(1.0, &assemble_weighted_stiffness(mesh, gamma));
    for i in [0, mesh.n_cells] {
        a.add(i, i, (gamma[i] * delta[i]).sqrt() / ROBIN_DENOMINATOR);
    }
    a
}

pub(crate) fn standard_normal(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl GaussianPrior for MaternPrior {
    fn dim(&self) -> usize {
        self.mesh.n_nodes()
    }

    fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        let av = self.sqrt_precision.matvec(v.as_slice());
        DVector::from_vec(self.sqrt_precision.matvec(&self.mass_lu.solve(&av)))
    }

    fn apply_covariance(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.a_lu.solve(v.as_slice());
        DVector::from_vec(self.a_lu.solve(&self.mass.matvec(&w)))
    }

    fn sample_fluctuation(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let xi = standard_normal(rng, self.dim());
        DVector::from_vec(self.a_lu.solve(&self.mass_factor.apply(&xi)))
    }

    fn covariance_diagonal(&self) -> DVector<f64> {
        let n = self.dim();
        DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let col = self.a_lu.solve(&e);
                crate::linalg::dot(&col, &self.mass.matvec(&col))
            }),
        )
    }
}

/// Independent priors on drift and log-diffusion, acting on `[b; s]`.
#[derive(Debug, Clone)]
pub struct JointPrior {
    pub drift: MaternPrior,
    pub log_diffusion: MaternPrior,
    mean: DVector<f64>,
}

impl JointPrior {
    pub fn new(drift: MaternPrior, log_diffusion: MaternPrior) -> Result<Self> {
        if drift.mesh != log_diffusion.mesh {
            return Err(dimension("component priors live on different meshes"));
        }
        let n = drift.dim();
        let mean = DVector::from_iterator(2 * n, drift.mean.iter().chain(log_diffusion.mean.iter()).copied());
        Ok(Self { drift, log_diffusion, mean })
    }

    pub fn mesh(&self) -> &Mesh1d {
        &self.drift.mesh
    }

    fn blockwise(&self, v: &DVector<f64>, f: impl Fn(&MaternPrior, &DVector<f64>) -> DVector<f64>) -> DVector<f64> {
        let n = self.drift.dim();
        let top = f(&self.drift, &v.rows(0, n).into_owned());
        let bottom = f(&self.log_diffusion, &v.rows(n, n).into_owned());
        DVector::from_iterator(2 * n, top.iter().chain(bottom.iter()).copied())
    }
}

impl GaussianPrior for JointPrior {
    fn dim(&self) -> usize {
        2 * self.drift.dim()
    }

    fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        self.blockwise(v, |p, x| p.apply_precision(x))
    }

    fn apply_covariance(&self, v: &DVector<f64>) -> DVector<f64> {
        self.blockwise(v, |p, x| p.apply_covariance(x))
    }

    fn sample_fluctuation(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let top = self.drift.sample_fluctuation(rng);
        let bottom = self.log_diffusion.sample_fluctuation(rng);
        DVector::from_iterator(self.dim(), top.iter().chain(bottom.iter()).copied())
    }

    fn covariance_diagonal(&self) -> DVector<f64> {
        let top = self.drift.covariance_diagonal();
        let bottom = self.log_diffusion.covariance_diagonal();
        DVector::from_iterator(self.dim(), top.iter().chain(bottom.iter()).copied())
    }
}

/// Dense `C` by repeated covariance application; small problems only.
pub fn dense_covariance<P: GaussianPrior + ?Sized>(prior: &P) -> nalgebra::DMatrix<f64> {
    let n = prior.dim();
    nalgebra::DMatrix::from_columns(
        &(0..n).map(|i| prior.apply_covariance(&DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }))).collect::<Vec<_>>(),
    )
}

/// Dense `C⁻¹`; small problems only.
pub fn dense_precision<P: GaussianPrior + ?Sized>(prior: &P) -> nalgebra::DMatrix<f64> {
    let n = prior.dim();
    nalgebra::DMatrix::from_columns(
        &(0..n).map(|i| prior.apply_precision(&DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }))).collect::<Vec<_>>(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_mean(mesh: Mesh1d) -> FeFunction {
        FeFunction::interpolate(mesh, |_| 0.0)
    }

    fn empirical_center_variance(prior: &MaternPrior, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = prior.mesh.n_cells / 2;
        let mut acc = 0.0;
        for _ in 0..n {
            let v = prior.sample_function(&mut rng).coeffs[c];
            acc += v * v;
        }
        acc / n as f64
    }

    #[test]
    fn unit_hyperparameters_give_quarter_variance() {
        let s = pointwise_stats(1.0, 1.0, 1).unwrap();
        assert!((s.sigma2 - 0.25).abs() < 1e-12);
        assert!((s.rho - 12f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.nu, 1.5);
    }

    #[test]
    fn correlation_length_is_scale_invariant() {
        let a = pointwise_stats(1.3, 0.7, 1).unwrap();
        let b = pointwise_stats(5.2, 2.8, 1).unwrap();
        assert!((a.rho - b.rho).abs() < 1e-12);
    }

    #[test]
    fn three_dimensional_formula() {
        let (delta, gamma) = (2.0f64, 0.5f64);
        let s = pointwise_stats(delta, gamma, 3).unwrap();
        let expected = std::f64::consts::PI.sqrt()
            / ((4.0 * std::f64::consts::PI).powf(1.5) * delta.sqrt() * gamma.powf(1.5));
        assert!((s.sigma2 - expected).abs() < 1e-14);
        assert_eq!(s.nu, 0.5);
        assert!(pointwise_stats(1.0, 1.0, 4).is_err());
        assert!(pointwise_stats(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn hyperparameter_round_trip() {
        let (d, g) = solve_hyperparams(0.25, 12f64.sqrt(), 1).unwrap();
        assert!((d - 1.0).abs() < 1e-12 && (g - 1.0).abs() < 1e-12);
        for dim in 1..=3 {
            let (d, g) = solve_hyperparams(0.7, 2.3, dim).unwrap();
            let s = pointwise_stats(d, g, dim).unwrap();
            assert!((s.sigma2 / 0.7 - 1.0).abs() < 1e-12);
            assert!((s.rho / 2.3 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_variance_unit_length_closed_form() {
        // δ = sqrt(Γ(3/2) / (√(4π)·(1/12)^{1/2})), γ = δ/12
        let (d, g) = solve_hyperparams(1.0, 1.0, 1).unwrap();
        let expected = ((std::f64::consts::PI.sqrt() / 2.0) / ((4.0 * std::f64::consts::PI).sqrt() / 12f64.sqrt())).sqrt();
        assert!((d - expected).abs() < 1e-12);
        assert!((g - expected / 12.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_variance_keeps_ratio() {
        let (d1, g1) = solve_hyperparams(1.0, 2.0, 1).unwrap();
        let (d2, g2) = solve_hyperparams(2.0, 2.0, 1).unwrap();
        assert!((g1 / d1 - g2 / d2).abs() < 1e-14);
    }

    #[test]
    fn two_cell_operator_by_hand() {
        let mesh = Mesh1d::new(0.0, 1.0, 2).unwrap();
        let a = assemble_sqrt_precision(&mesh, &[1.0; 3], &[1.0; 3]);
        let m = [[2.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 2.0]];
        let k = [[2.0, -2.0, 0.0], [-2.0, 4.0, -2.0], [0.0, -2.0, 2.0]];
        let robin = [1.0 / 1.42, 0.0, 1.0 / 1.42];
        for i in 0..3 {
            for j in 0..3 {
                let expected = m[i][j] / 12.0 + k[i][j] + if i == j { robin[i] } else { 0.0 };
                assert!((a.get(i, j) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_covariance_is_symmetric_and_inverse_of_precision() {
        let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
        let prior = MaternPrior::new(mesh, 1.0, 0.3, zero_mean(mesh)).unwrap();
        let c = dense_covariance(&prior);
        assert!((c.clone() - c.transpose()).amax() < 1e-12);
        let p = dense_precision(&prior);
        let id = nalgebra::DMatrix::<f64>::identity(11, 11);
        assert!((&c * &p - id).amax() < 1e-9);
    }

    #[test]
    fn prior_cost_matches_dense_evaluation() {
        let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
        let mean = FeFunction::interpolate(mesh, |x| x);
        let prior = MaternPrior::new(mesh, 2.0, 0.5, mean).unwrap();
        let m = DVector::from_fn(11, |i, _| (i as f64).sin());
        let d = &m - prior.mean();
        let dense = 0.5 * (d.transpose() * dense_covariance(&prior).try_inverse().unwrap() * &d)[0];
        assert!((prior.cost(&m) - dense).abs() < 1e-9 * dense.abs());
    }

    #[test]
    fn zero_noise_gives_mean() {
        let mesh = Mesh1d::new(0.0, 1.0, 8).unwrap();
        let mean = FeFunction::interpolate(mesh, |x| 3.0 * x);
        let prior = MaternPrior::new(mesh, 1.0, 1.0, mean.clone()).unwrap();
        assert_eq!(prior.sample_from_noise(&[0.0; 9]), mean);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mesh = Mesh1d::new(0.0, 1.0, 8).unwrap();
        let prior = MaternPrior::new(mesh, 1.0, 1.0, zero_mean(mesh)).unwrap();
        let a = prior.sample_function(&mut ChaCha8Rng::seed_from_u64(7));
        let b = prior.sample_function(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_variance_matches_pointwise_stats() {
        let mesh = Mesh1d::new(-10.0, 10.0, 200).unwrap();
        let prior = MaternPrior::new(mesh, 1.0, 1.0, zero_mean(mesh)).unwrap();
        let var = empirical_center_variance(&prior, 10_000, 1);
        assert!((var / 0.25 - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn variance_is_mesh_independent() {
        let coarse = Mesh1d::new(-10.0, 10.0, 100).unwrap();
        let fine = Mesh1d::new(-10.0, 10.0, 200).unwrap();
        let a = empirical_center_variance(&MaternPrior::new(coarse, 1.0, 1.0, zero_mean(coarse)).unwrap(), 40_000, 2);
        let b = empirical_center_variance(&MaternPrior::new(fine, 1.0, 1.0, zero_mean(fine)).unwrap(), 40_000, 3);
        assert!((a / b - 1.0).abs() < 0.05, "{a} vs {b}");
    }

    #[test]
    fn robin_terms_limit_boundary_inflation() {
        let mesh = Mesh1d::new(-10.0, 10.0, 200).unwrap();
        let prior = MaternPrior::new(mesh, 1.0, 1.0, zero_mean(mesh)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut edge, mut centre) = (0.0, 0.0);
        let n = 10_000;
        for _ in 0..n {
            let s = prior.sample_function(&mut rng).coeffs;
            edge += s[0] * s[0];
            centre += s[100] * s[100];
        }
        let ratio = edge / centre;
        assert!((0.5..2.0).contains(&ratio), "boundary/interior variance ratio {ratio}");
    }

    #[test]
    fn covariance_diagonal_matches_dense() {
        let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
        let prior = MaternPrior::new(mesh, 1.0, 0.3, zero_mean(mesh)).unwrap();
        let dense = dense_covariance(&prior);
        let diag = prior.covariance_diagonal();
        for i in 0..11 {
            assert!((diag[i] - dense[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_prior_is_block_diagonal() {
        let mesh = Mesh1d::new(0.0, 1.0, 4).unwrap();
        let b = MaternPrior::new(mesh, 1.0, 0.1, FeFunction::interpolate(mesh, |x| -x)).unwrap();
        let s = MaternPrior::new(mesh, 2.0, 0.2, FeFunction::interpolate(mesh, |_| 1.0)).unwrap();
        let joint = JointPrior::new(b.clone(), s).unwrap();
        assert_eq!(joint.dim(), 10);
        assert_eq!(joint.mean()[1], -0.25);
        assert_eq!(joint.mean()[7], 1.0);
        let c = dense_covariance(&joint);
        assert!(c.view((0, 5), (5, 5)).amax() == 0.0);
        assert!((c.view((0, 0), (5, 5)) - dense_covariance(&b)).amax() < 1e-14);
    }

    proptest! {
        #[test]
        fn precision_and_covariance_are_inverse(
            v in prop::collection::vec(-10.0f64..10.0, 21),
            delta in 0.1f64..10.0,
            gamma in 0.01f64..5.0,
        ) {
            let mesh = Mesh1d::new(-2.0, 3.0, 20).unwrap();
            let prior = MaternPrior::new(mesh, delta, gamma, zero_mean(mesh)).unwrap();
            let v = DVector::from_vec(v);
            let back = prior.apply_covariance(&prior.apply_precision(&v));
            prop_assert!((&back - &v).norm() <= 1e-10 * v.norm().max(1e-300));
            if v.norm() > 0.0 {
                prop_assert!(v.dot(&prior.apply_precision(&v)) > 0.0);
                prop_assert!(v.dot(&(prior.sqrt_precision().to_dense() * &v)) > 0.0);
            }
        }
    }
}
