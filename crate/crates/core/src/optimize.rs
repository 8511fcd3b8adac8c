//! MAP estimation by inexact Newton-CG.
//!
//! Minimizes `J(m) = Φ(m) + ½ ‖m − m̄‖²_{C⁻¹}`. Each Newton system
//! `(H + C⁻¹) d = −g` is solved by CG preconditioned with `C`, stopped at
//! `‖r‖ ≤ η_k ‖g_k‖` with `η_k = min(η_max, √(‖g_k‖/‖g_0‖))`, and exits early
//! on negative curvature. Steps are globalized by Armijo backtracking.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bip::{ForwardModel, HessianKind, InverseProblem, MisfitEval, ParameterField};
use crate::error::{config, Result};
use crate::prior::GaussianPrior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonOptions {
    /// Stop once `‖g_k‖ ≤ tol_grad_rel ‖g_0‖` (C-weighted dual norm).
    pub tol_grad_rel: f64,
    pub max_newton: usize,
    pub cg_max: usize,
    /// Upper bound on the forcing term.
    pub forcing_max: f64,
    pub hessian: HessianKind,
    /// Precondition CG with the prior covariance (identity otherwise).
    pub precondition: bool,
    pub armijo_c: f64,
    pub min_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol_grad_rel: 1e-6,
            max_newton: 50,
            cg_max: 200,
            forcing_max: 0.5,
            hessian: HessianKind::GaussNewton,
            precondition: true,
            armijo_c: 1e-4,
            min_step: 1e-10,
        }
    }
}

/// One accepted Newton iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub cost: f64,
    pub misfit: f64,
    pub grad_norm: f64,
    pub cg_iters: usize,
    pub step_length: f64,
    pub forcing: f64,
    pub negative_curvature: bool,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub m_map: ParameterField,
    /// Cost at the initial point and after every accepted step.
    pub cost_history: Vec<f64>,
    /// Gradient norm at the initial point and after every accepted step.
    pub grad_norm_history: Vec<f64>,
    pub newton_iters: usize,
    pub total_cg_iters: usize,
    pub converged: bool,
    pub log: Vec<IterationLog>,
}

impl MapResult {
    pub fn cg_iters_per_step(&self) -> Vec<usize> {
        self.log.iter().map(|l| l.cg_iters).collect()
    }

    pub fn write_log_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.log)?;
        Ok(())
    }
}

struct Point<S> {
    eval: MisfitEval<S>,
    cost: f64,
    /// Gradient of `J`.
    grad: DVector<f64>,
    grad_norm: f64,
}

fn evaluate<F: ForwardModel, P: GaussianPrior + ?Sized>(
    problem: &InverseProblem<F>,
    prior: &P,
    m: &ParameterField,
) -> Result<Point<F::State>> {
    let eval = problem.evaluate(m)?;
    let x = m.to_vector();
    let dev = &x - prior.mean();
    let prior_grad = prior.apply_precision(&dev);
    let cost = eval.value + 0.5 * dev.dot(&prior_grad);
    let grad = &eval.gradient + prior_grad;
    let grad_norm = grad.dot(&prior.apply_covariance(&grad)).max(0.0).sqrt();
    Ok(Point { eval, cost, grad, grad_norm })
}

struct CgOutcome {
    step: DVector<f64>,
    iters: usize,
    negative_curvature: bool,
}

/// Preconditioned CG on `(H + C⁻¹) d = −g` with a Steihaug negative-curvature exit.
fn newton_cg<F: ForwardModel, P: GaussianPrior + ?Sized>(
    problem: &InverseProblem<F>,
    prior: &P,
    point: &Point<F::State>,
    forcing: f64,
    opts: &NewtonOptions,
) -> Result<CgOutcome> {
    let precond = |r: &DVector<f64>| if opts.precondition { prior.apply_covariance(r) } else { r.clone() };
    let apply = |v: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(problem.hessian_vector(&point.eval, v, opts.hessian)? + prior.apply_precision(v))
    };
    let n = point.grad.len();
    let mut x = DVector::zeros(n);
    let mut r = -&point.grad;
    let mut z = precond(&r);
    let mut rz = r.dot(&z);
    let tol = forcing * rz.max(0.0).sqrt();
    let mut p = z.clone();
    for it in 0..opts.cg_max {
        let hp = apply(&p)?;
        let curvature = p.dot(&hp);
        if curvature <= 0.0 {
            let step = if it == 0 { z } else { x };
            return Ok(CgOutcome { step, iters: it + 1, negative_curvature: true });
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        z = precond(&r);
        let rz_new = r.dot(&z);
        if rz_new.max(0.0).sqrt() <= tol {
            return Ok(CgOutcome { step: x, iters: it + 1, negative_curvature: false });
        }
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
    }
    Ok(CgOutcome { step: x, iters: opts.cg_max, negative_curvature: false })
}

/// Minimizes the negative log-posterior starting from `m0`.
pub fn map_estimate<F: ForwardModel, P: GaussianPrior + ?Sized>(
    problem: &InverseProblem<F>,
    prior: &P,
    m0: &ParameterField,
    opts: &NewtonOptions,
) -> Result<MapResult> {
    if !(opts.tol_grad_rel > 0.0 && opts.tol_grad_rel < 1.0) {
        return Err(config(format!("tol_grad_rel must lie in (0, 1), got {}", opts.tol_grad_rel)));
    }
    if prior.dim() != problem.n_params() {
        return Err(crate::error::dimension("prior and forward model disagree on the parameter dimension"));
    }
    let mesh = *problem.model.mesh();
    let mut point = evaluate(problem, prior, m0)?;
    let g0 = point.grad_norm;
    let mut cost_history = vec![point.cost];
    let mut grad_norm_history = vec![g0];
    let mut log = Vec::new();
    let mut total_cg = 0;
    let mut converged = g0 == 0.0;

    for iteration in 1..=opts.max_newton {
        if converged {
            break;
        }
        let forcing = opts.forcing_max.min((point.grad_norm / g0).sqrt());
        let cg = newton_cg(problem, prior, &point, forcing, opts)?;
        total_cg += cg.iters;
        let mut dir = cg.step;
        let mut slope = point.grad.dot(&dir);
        if !(slope < 0.0) {
            dir = -prior.apply_covariance(&point.grad);
            slope = point.grad.dot(&dir);
        }

        let x = point.eval.m.to_vector();
        let mut t = 1.0;
        let mut accepted = None;
        while t >= opts.min_step {
            let trial = ParameterField::from_vector(mesh, &(&x + t * &dir))?;
            match evaluate(problem, prior, &trial) {
                Ok(p) if p.cost.is_finite() && p.cost <= point.cost + opts.armijo_c * t * slope && p.cost < point.cost => {
                    accepted = Some(p);
                    break;
                }
                Ok(_) | Err(crate::Error::NumericalDomain(_)) | Err(crate::Error::Solver(_)) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some(next) = accepted else {
            log::warn!("line search failed at Newton iteration {iteration}; returning best iterate");
            return Ok(MapResult {
                m_map: point.eval.m,
                cost_history,
                grad_norm_history,
                newton_iters: iteration - 1,
                total_cg_iters: total_cg,
                converged: false,
                log,
            });
        };
        point = next;
        cost_history.push(point.cost);
        grad_norm_history.push(point.grad_norm);
        log.push(IterationLog {
            iteration,
            cost: point.cost,
            misfit: point.eval.value,
            grad_norm: point.grad_norm,
            cg_iters: cg.iters,
            step_length: t,
            forcing,
            negative_curvature: cg.negative_curvature,
        });
        log::debug!("newton {iteration}: J = {:.6e}, |g| = {:.3e}, cg = {}, t = {t}", point.cost, point.grad_norm, cg.iters);
        converged = point.grad_norm <= opts.tol_grad_rel * g0;
    }

    let newton_iters = log.len();
    Ok(MapResult {
        m_map: point.eval.m,
        cost_history,
        grad_norm_history,
        newton_iters,
        total_cg_iters: total_cg,
        converged,
        log,
    })
}
