//! Low-rank Laplace approximation at the MAP point.
//!
//! The generalized eigenproblem `H v = λ C⁻¹ v` is solved by a double-pass
//! randomized method; with `V` C⁻¹-orthonormal the posterior covariance is
//! `C_LA = C − V D Vᵀ`, `D = diag(λ/(λ+1))`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bip::ParameterField;
use crate::error::{config, dimension, Error, Result};
use crate::fem::Mesh1d;
use crate::prior::{standard_normal, GaussianPrior};

/// Maximum allowed `‖Vᵀ C⁻¹ V − I‖_max`.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GevdOptions {
    /// Maximum retained rank.
    pub rank: usize,
    pub oversample: usize,
    pub power_iters: usize,
    /// Keep eigenpairs down to the first one below this value.
    pub truncation: f64,
}

impl Default for GevdOptions {
    fn default() -> Self {
        Self { rank: 40, oversample: 10, power_iters: 1, truncation: 0.1 }
    }
}

/// C⁻¹-orthonormalizes the columns of `y` in place (two MGS sweeps).
/// Columns that collapse are replaced by fresh random directions.
fn c_orthonormalize<P: GaussianPrior + ?Sized>(
    y: &mut [DVector<f64>],
    prior: &P,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let n = prior.dim();
    let mut cy: Vec<DVector<f64>> = Vec::with_capacity(y.len());
    for j in 0..y.len() {
        let mut replaced = 0;
        loop {
            let original = y[j].dot(&prior.apply_precision(&y[j])).max(0.0).sqrt();
            for _ in 0..2 {
                for i in 0..j {
                    let proj = cy[i].dot(&y[j]);
                    let q = y[i].clone();
                    y[j].axpy(-proj, &q, 1.0);
                }
            }
            let cyj = prior.apply_precision(&y[j]);
            let norm = y[j].dot(&cyj).max(0.0).sqrt();
            if norm > 1e-10 * original && norm > 0.0 && norm.is_finite() {
                y[j] /= norm;
                cy.push(cyj / norm);
                break;
            }
            replaced += 1;
            if replaced > 3 {
                return Err(Error::Solver("orthonormalization broke down".into()));
            }
            y[j] = DVector::from_vec(standard_normal(rng, n));
        }
    }
    Ok(())
}

fn apply_all<H>(hvp: &H, cols: &[DVector<f64>]) -> Result<Vec<DVector<f64>>>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    cols.par_iter().map(hvp).collect()
}

/// `‖Vᵀ C⁻¹ V − I‖_max`.
pub fn orthonormality_defect<P: GaussianPrior + ?Sized>(prior: &P, v: &[DVector<f64>]) -> f64 {
    let cv: Vec<DVector<f64>> = v.iter().map(|x| prior.apply_precision(x)).collect();
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v[i].dot(&cv[j]) - target).abs());
        }
    }
    worst
}

/// Top `r` solutions of `H v = λ C⁻¹ v`, eigenvalues descending.
pub fn randomized_gevd<H, P>(
    hvp: H,
    prior: &P,
    r: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<DVector<f64>>)>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
    P: GaussianPrior + ?Sized,
{
    let n = prior.dim();
    let k = r + oversample;
    if r == 0 || k > n {
        return Err(config(format!("rank {r} + oversampling {oversample} must lie in 1..={n}")));
    }
    let mut last_err = None;
    for _attempt in 0..2 {
        match gevd_pass(&hvp, prior, r, k, power_iters, rng) {
            Ok(out) => return Ok(out),
            Err(e) => {
                log::warn!("randomized eigensolver failed ({e}); retrying with a fresh sketch");
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}

fn gevd_pass<H, P>(
    hvp: &H,
    prior: &P,
    r: usize,
    k: usize,
    power_iters: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<DVector<f64>>)>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
    P: GaussianPrior + ?Sized,
{
    let n = prior.dim();
    let omega: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_vec(standard_normal(rng, n))).collect();
    let sketch = |cols: &[DVector<f64>]| -> Result<Vec<DVector<f64>>> {
        Ok(apply_all(hvp, cols)?.iter().map(|h| prior.apply_covariance(h)).collect())
    };
    let mut q = sketch(&omega)?;
    for _ in 0..power_iters {
        c_orthonormalize(&mut q, prior, rng)?;
        q = sketch(&q)?;
    }
    c_orthonormalize(&mut q, prior, rng)?;

    let hq = apply_all(hvp, &q)?;
    let mut t = DMatrix::from_fn(k, k, |i, j| q[i].dot(&hq[j]));
    t = (&t + t.transpose()) * 0.5;
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigvals = Vec::with_capacity(r);
    let mut eigvecs = Vec::with_capacity(r);
    for &j in order.iter().take(r) {
        eigvals.push(eig.eigenvalues[j]);
        let s = eig.eigenvectors.column(j);
        let mut v = DVector::zeros(n);
        for (i, qi) in q.iter().enumerate() {
            v.axpy(s[i], qi, 1.0);
        }
        eigvecs.push(v);
    }
    let defect = orthonormality_defect(prior, &eigvecs);
    if defect > ORTHONORMALITY_TOL {
        return Err(Error::Solver(format!("eigenvectors not C⁻¹-orthonormal (defect {defect:e})")));
    }
    Ok((eigvals, eigvecs))
}

/// Number of pairs kept: up to and including the first `λ < truncation`, capped.
pub fn truncation_rank(eigvals: &[f64], truncation: f64, cap: usize) -> usize {
    let above = eigvals.iter().take_while(|&&l| l >= truncation).count();
    (above + 1).min(eigvals.len()).min(cap)
}

/// Gaussian approximation `N(m_MAP, C − V D Vᵀ)`.
#[derive(Debug, Clone)]
pub struct LowRankPosterior<P> {
    pub mesh: Mesh1d,
    pub m_map: DVector<f64>,
    pub eigvals: Vec<f64>,
    pub eigvecs: Vec<DVector<f64>>,
    pub prior: P,
}

impl<P: GaussianPrior> LowRankPosterior<P> {
    pub fn new(mesh: Mesh1d, m_map: DVector<f64>, eigvals: Vec<f64>, eigvecs: Vec<DVector<f64>>, prior: P) -> Result<Self> {
        if m_map.len() != prior.dim() || eigvecs.iter().any(|v| v.len() != prior.dim()) || eigvals.len() != eigvecs.len() {
            return Err(dimension("Laplace approximation pieces have inconsistent sizes"));
        }
        if eigvals.windows(2).any(|w| w[0] < w[1]) {
            return Err(config("eigenvalues must be sorted in descending order"));
        }
        Ok(Self { mesh, m_map, eigvals, eigvecs, prior })
    }

    /// Laplace approximation that equals the prior covariance.
    pub fn prior_only(mesh: Mesh1d, m_map: DVector<f64>, prior: P) -> Result<Self> {
        Self::new(mesh, m_map, Vec::new(), Vec::new(), prior)
    }

    /// Computes the data-Hessian spectrum at `m_map` and truncates it.
    pub fn compute<H>(
        mesh: Mesh1d,
        m_map: DVector<f64>,
        hvp: H,
        prior: P,
        opts: &GevdOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Self>
    where
        H: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
    {
        let r = opts.rank.min(prior.dim().saturating_sub(opts.oversample));
        let (mut eigvals, mut eigvecs) = randomized_gevd(hvp, &prior, r, opts.oversample, opts.power_iters, rng)?;
        let keep = truncation_rank(&eigvals, opts.truncation, opts.rank);
        eigvals.truncate(keep);
        eigvecs.truncate(keep);
        // Gauss–Newton spectra are nonnegative; clip roundoff.
        eigvals.iter_mut().for_each(|l| *l = l.max(0.0));
        Self::new(mesh, m_map, eigvals, eigvecs, prior)
    }

    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    fn low_rank_term(&self, v: &DVector<f64>, weight: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (l, vec) in self.eigvals.iter().zip(&self.eigvecs) {
            out.axpy(weight(*l) * vec.dot(v), vec, 1.0);
        }
        out
    }

    /// `C v − V D Vᵀ v`.
    pub fn apply_laplace_covariance(&self, v: &DVector<f64>) -> DVector<f64> {
        self.prior.apply_covariance(v) - self.low_rank_term(v, |l| l / (l + 1.0))
    }

    /// `(C⁻¹ + C⁻¹ V Λ Vᵀ C⁻¹) v`.
    pub fn apply_laplace_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        let cv = self.prior.apply_precision(v);
        let lr = self.low_rank_term(&cv, |l| l);
        cv + self.prior.apply_precision(&lr)
    }

    /// `C⁻¹ V Λ Vᵀ C⁻¹ v`, the low-rank data-Hessian surrogate.
    pub fn apply_low_rank_hessian(&self, v: &DVector<f64>) -> DVector<f64> {
        let cv = self.prior.apply_precision(v);
        self.prior.apply_precision(&self.low_rank_term(&cv, |l| l))
    }

    /// `(I − V S Vᵀ C⁻¹) w` for a prior fluctuation `w`.
    pub fn transform_fluctuation(&self, w: &DVector<f64>) -> DVector<f64> {
        let cw = self.prior.apply_precision(w);
        w - self.low_rank_term(&cw, |l| 1.0 - 1.0 / (l + 1.0).sqrt())
    }

    pub fn sample_parameter(&self, rng: &mut dyn RngCore) -> Result<ParameterField> {
        let x = &self.m_map + self.sample_fluctuation(rng);
        ParameterField::from_vector(self.mesh, &x)
    }

    /// `diag(C) − Σ_j D_j v_j²`.
    pub fn pointwise_variance_exact(&self) -> DVector<f64> {
        let mut d = self.prior.covariance_diagonal();
        for (l, v) in self.eigvals.iter().zip(&self.eigvecs) {
            let w = l / (l + 1.0);
            d.iter_mut().zip(v.iter()).for_each(|(di, vi)| *di -= w * vi * vi);
        }
        d
    }

    /// Monte Carlo variance estimate and its standard error.
    pub fn pointwise_variance_sampled(&self, n_samples: usize, rng: &mut dyn RngCore) -> (DVector<f64>, DVector<f64>) {
        let n = self.m_map.len();
        let (mut s1, mut s2) = (DVector::zeros(n), DVector::zeros(n));
        for _ in 0..n_samples {
            let f = self.sample_fluctuation(rng);
            let sq = f.component_mul(&f);
            s2 += sq.component_mul(&sq);
            s1 += sq;
        }
        let ns = n_samples as f64;
        let mean = s1 / ns;
        let se = DVector::from_iterator(
            n,
            mean.iter().zip(s2.iter()).map(|(m, q)| ((q / ns - m * m).max(0.0) / ns).sqrt()),
        );
        (mean, se)
    }

    /// `index,eigenvalue`.
    pub fn write_spectrum_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "eigenvalue"])?;
        for (i, l) in self.eigvals.iter().enumerate() {
            w.write_record(&[(i + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `node,x,component,map,variance,lower,upper` with 1.96σ bands.
    pub fn write_variance_csv<W: Write>(&self, writer: W, variance: &DVector<f64>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node", "x", "component", "map", "variance", "lower", "upper"])?;
        let nodes = self.mesh.nodes();
        let n = nodes.len();
        for (c, name) in ["drift", "log_diffusion"].iter().enumerate() {
            for (i, x) in nodes.iter().enumerate() {
                let k = c * n + i;
                let (m, v) = (self.m_map[k], variance[k]);
                let half = 1.96 * v.max(0.0).sqrt();
                w.write_record(&[
                    i.to_string(),
                    x.to_string(),
                    name.to_string(),
                    m.to_string(),
                    v.to_string(),
                    (m - half).to_string(),
                    (m + half).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl<P: GaussianPrior> GaussianPrior for LowRankPosterior<P> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn mean(&self) -> &DVector<f64> {
        &self.m_map
    }

    fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_laplace_precision(v)
    }

    fn apply_covariance(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_laplace_covariance(v)
    }

    fn sample_fluctuation(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let w = self.prior.sample_fluctuation(rng);
        self.transform_fluctuation(&w)
    }

    fn covariance_diagonal(&self) -> DVector<f64> {
        self.pointwise_variance_exact()
    }
}
