use difinv::bip::{ForwardModel, HessianKind, InverseProblem, LinearModel, MfptModel, ParameterField};
use difinv::fem::{FeFunction, Mesh1d};
use difinv::optimize::{map_estimate, NewtonOptions};
use difinv::prior::{dense_precision, GaussianPrior, JointPrior, MaternPrior};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ou_prior(mesh: Mesh1d) -> JointPrior {
    let b = MaternPrior::from_stats(mesh, 4.0, 1.0, FeFunction::interpolate(mesh, |x| -x)).unwrap();
    let s = MaternPrior::from_stats(mesh, 1.0, 1.0, FeFunction::interpolate(mesh, |_| 1.0)).unwrap();
    JointPrior::new(b, s).unwrap()
}

fn sites(n: usize) -> Vec<f64> {
    (1..=n).map(|i| -1.0 + 2.0 * i as f64 / (n + 1) as f64).collect()
}

fn single_scale(mesh: Mesh1d) -> ParameterField {
    ParameterField::from_functions(mesh, |x| -2.0 * x.powi(3) + 3.0 * x, |x| (x * x + 2.0).ln())
}

fn mfpt_problem(mesh: Mesh1d, seed: u64) -> InverseProblem<MfptModel> {
    let model = MfptModel::new(mesh, 2, &sites(21)).unwrap();
    let clean = model.apply(&single_scale(mesh)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = clean.iter().map(|v| 0.03 * v).collect();
    let y = clean.iter().zip(&sd).map(|(v, s)| v + s * rng.random_range(-1.7..1.7)).collect();
    InverseProblem::new(model, y, sd.iter().map(|s| s * s).collect()).unwrap()
}

#[test]
fn quadratic_problem_converges_in_one_newton_step() {
    let mesh = Mesh1d::new(0.0, 1.0, 5).unwrap();
    let g = DMatrix::from_fn(4, 12, |i, j| ((i + 1) as f64 * (j as f64 * 0.3 + 0.1)).sin());
    let model = LinearModel::new(mesh, g.clone(), vec![0.0; 4]).unwrap();
    let problem = InverseProblem::new(model, vec![1.0, -1.0, 0.5, 2.0], vec![0.01; 4]).unwrap();
    let prior = ou_prior(mesh);
    let opts = NewtonOptions { forcing_max: 1e-12, tol_grad_rel: 1e-8, ..Default::default() };
    let m0 = ParameterField::from_vector(mesh, prior.mean()).unwrap();
    let res = map_estimate(&problem, &prior, &m0, &opts).unwrap();
    assert!(res.converged);
    assert_eq!(res.newton_iters, 1);

    // normal equations (GᵀΓ⁻¹G + C⁻¹) m = GᵀΓ⁻¹y + C⁻¹ m̄
    let cinv = dense_precision(&prior);
    let lhs = g.transpose() * &g * 100.0 + &cinv;
    let rhs = g.transpose() * DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]) * 100.0 + &cinv * prior.mean();
    let exact = lhs.lu().solve(&rhs).unwrap();
    assert!((res.m_map.to_vector() - &exact).amax() < 1e-8 * exact.amax());
}

#[test]
fn noiseless_data_at_prior_mean_needs_no_iterations() {
    let mesh = Mesh1d::new(-1.0, 1.0, 40).unwrap();
    let prior = ou_prior(mesh);
    let m = ParameterField::from_vector(mesh, prior.mean()).unwrap();
    let model = MfptModel::new(mesh, 2, &sites(9)).unwrap();
    let y = model.apply(&m).unwrap();
    let gamma = y.iter().map(|v| (0.05 * v).powi(2)).collect();
    let problem = InverseProblem::new(model, y, gamma).unwrap();
    let res = map_estimate(&problem, &prior, &m, &NewtonOptions::default()).unwrap();
    assert!(res.converged);
    assert!(res.newton_iters <= 1);
}

#[test]
fn single_scale_gradient_drops_by_a_million() {
    let mesh = Mesh1d::new(-1.0, 1.0, 100).unwrap();
    let problem = mfpt_problem(mesh, 1);
    let prior = ou_prior(mesh);
    let m0 = ParameterField::from_vector(mesh, prior.mean()).unwrap();
    let res = map_estimate(&problem, &prior, &m0, &NewtonOptions { max_newton: 30, ..Default::default() }).unwrap();
    assert!(res.converged, "log: {:?}", res.log);
    assert!(res.newton_iters <= 30);
    let last = *res.grad_norm_history.last().unwrap();
    assert!(last <= 1e-6 * res.grad_norm_history[0]);
    // Armijo steps strictly decrease the cost
    for w in res.cost_history.windows(2) {
        assert!(w[1] < w[0]);
    }
    let mut json = Vec::new();
    res.write_log_json(&mut json).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), res.newton_iters);
    assert!(parsed[0]["cg_iters"].as_u64().unwrap() > 0);
}

#[test]
fn preconditioning_changes_path_not_optimum() {
    let mesh = Mesh1d::new(-1.0, 1.0, 40).unwrap();
    let problem = mfpt_problem(mesh, 2);
    let prior = ou_prior(mesh);
    let m0 = ParameterField::from_vector(mesh, prior.mean()).unwrap();
    let base = NewtonOptions { tol_grad_rel: 1e-10, max_newton: 100, cg_max: 2000, ..Default::default() };
    let with = map_estimate(&problem, &prior, &m0, &base).unwrap();
    let without = map_estimate(&problem, &prior, &m0, &NewtonOptions { precondition: false, ..base }).unwrap();
    assert!(with.converged && without.converged);
    let (a, b) = (with.m_map.to_vector(), without.m_map.to_vector());
    assert!((&a - &b).norm() <= 1e-6 * a.norm());
}

#[test]
fn full_newton_reaches_same_optimum() {
    let mesh = Mesh1d::new(-1.0, 1.0, 40).unwrap();
    let problem = mfpt_problem(mesh, 3);
    let prior = ou_prior(mesh);
    let m0 = ParameterField::from_vector(mesh, prior.mean()).unwrap();
    let opts = NewtonOptions { tol_grad_rel: 1e-9, ..Default::default() };
    let gn = map_estimate(&problem, &prior, &m0, &opts).unwrap();
    let full = map_estimate(&problem, &prior, &m0, &NewtonOptions { hessian: HessianKind::Full, ..opts }).unwrap();
    assert!(gn.converged && full.converged);
    let (a, b) = (gn.m_map.to_vector(), full.m_map.to_vector());
    assert!((&a - &b).norm() <= 1e-6 * a.norm());
}

#[test]
fn invalid_tolerance_is_rejected() {
    let mesh = Mesh1d::new(-1.0, 1.0, 10).unwrap();
    let problem = mfpt_problem(mesh, 4);
    let prior = ou_prior(mesh);
    let m0 = ParameterField::from_vector(mesh, prior.mean()).unwrap();
    let opts = NewtonOptions { tol_grad_rel: 1.5, ..Default::default() };
    assert!(matches!(map_estimate(&problem, &prior, &m0, &opts), Err(difinv::Error::Config(_))));
}
