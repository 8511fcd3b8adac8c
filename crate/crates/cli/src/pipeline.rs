//! The six pipeline stages. Each reads the resolved config plus upstream
//! artifacts from the output directory and writes its own artifacts and a
//! `<command>.json` manifest next to them.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use difinv::bip::{ForwardModel, HessianKind, InverseProblem, ParameterField, PtoModel};
use difinv::data::{check_bandwidth, DensityData, MomentData, ObservationKind, ObservationSet};
use difinv::fem::{solve_fokker_planck, solve_mfpt_hierarchy, time_index, FeFunction, Mesh1d, PdeSolution};
use difinv::laplace::LowRankPosterior;
use difinv::mcmc::{run_chain, tune_step_size, MalaOptions};
use difinv::optimize::map_estimate;
use difinv::prior::{GaussianPrior, JointPrior};
use difinv::sde::{
    derive_seed, effective_coefficients, read_exit_times_csv, read_snapshots_csv, simulate_ensemble,
    simulate_exit_times, simulate_multiscale, write_exit_times_csv,
};
use log::{info, warn};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Config, InitialConfig, Observable, Preset};
use crate::error::{config, CliError, Result};

// stream tags mixed into the master seed, one per random stage
const STAGE_SIMULATE: u64 = 1;
const STAGE_LAPLACE: u64 = 2;
const STAGE_TUNE: u64 = 3;
const STAGE_CHAIN: u64 = 4;
const STAGE_PREDICT: u64 = 5;

const EXIT_TIMES: &str = "exit_times.csv";
const ENSEMBLE: &str = "ensemble.csv";
const OBSERVATIONS: &str = "observations.json";
const LAPLACE: &str = "laplace.json";

pub struct Context {
    pub cfg: Config,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        File::create(&path).map(BufWriter::new).map_err(|source| CliError::Io { path, source })
    }

    fn open(&self, name: &str) -> Result<BufReader<File>> {
        let path = self.path(name);
        match File::open(&path) {
            Ok(f) => Ok(BufReader::new(f)),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(CliError::MissingArtifact(path)),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }

    fn finish<W: Write>(&self, name: &str, mut w: W) -> Result<()> {
        w.flush().map_err(|source| CliError::Io { path: self.path(name), source })
    }

    fn manifest(&self, command: &str, inputs: &[&str], outputs: &[&str], summary: serde_json::Value) -> Result<()> {
        let name = format!("{command}.json");
        let doc = json!({
            "tool": "difinv",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": self.cfg.seed,
            "inputs": inputs,
            "outputs": outputs,
            "summary": summary,
            "config": self.cfg.to_json(),
        });
        let mut w = self.create(&name)?;
        serde_json::to_writer_pretty(&mut w, &doc).map_err(difinv::Error::from)?;
        writeln!(w).map_err(|source| CliError::Io { path: self.path(&name), source })?;
        self.finish(&name, w)
    }

    fn observations(&self) -> Result<ObservationSet> {
        let obs = ObservationSet::read_json(self.open(OBSERVATIONS)?)?;
        let expected = match self.cfg.observable {
            Observable::Mfpt => ObservationKind::Mfpt { n_moments: self.cfg.data.n_moments },
            Observable::FokkerPlanck => ObservationKind::FokkerPlanck,
        };
        if obs.kind != expected {
            return Err(config(format!(
                "{OBSERVATIONS} holds {:?} data but the config asks for {expected:?}; rerun prepare",
                obs.kind
            )));
        }
        Ok(obs)
    }
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let s = &cfg.simulation;
    let seed = derive_seed(cfg.seed, STAGE_SIMULATE);
    match cfg.observable {
        Observable::Mfpt => {
            let model = cfg.sde_model()?;
            let [a, b] = s.domain_state;
            let samples = cfg
                .simulation
                .sites()
                .iter()
                .enumerate()
                .map(|(i, &x)| simulate_exit_times(&model, x, (a, b), s.n_traj, s.dt_time, s.max_steps, derive_seed(seed, i as u64)))
                .collect::<difinv::Result<Vec<_>>>()?;
            let w = ctx.create(EXIT_TIMES)?;
            write_exit_times_csv(w, &samples)?;
            let censored: usize = samples.iter().map(|s| s.censored_count()).sum();
            let fraction = censored as f64 / (samples.len() * s.n_traj) as f64;
            if fraction > 1e-3 {
                warn!("{censored} trajectories ({:.3}%) never exited; raise max_steps", 100.0 * fraction);
            }
            info!("simulated {} sites x {} exit times", samples.len(), s.n_traj);
            ctx.manifest(
                "simulate",
                &[],
                &[EXIT_TIMES],
                json!({ "sites": cfg.simulation.sites(), "n_traj": s.n_traj, "censored": censored, "censored_fraction": fraction }),
            )
        }
        Observable::FokkerPlanck => {
            let init = s.initial.law();
            let (ensemble, extra) = match cfg.preset {
                Preset::Multiscale => {
                    let p = cfg.multiscale.ok_or_else(|| config("preset multiscale lost its parameters"))?;
                    let ens = simulate_multiscale(&p, &init, s.n_traj, s.n_steps, s.dt_time, &s.snapshot_times_time, seed)?;
                    (ens, json!({ "effective_coefficients": effective_coefficients(&p) }))
                }
                _ => {
                    let model = cfg.sde_model()?;
                    let ens = simulate_ensemble(&model, &init, s.n_traj, s.n_steps, s.dt_time, &s.snapshot_times_time, seed)?;
                    (ens, json!({}))
                }
            };
            ensemble.write_csv(ctx.create(ENSEMBLE)?)?;
            info!("simulated {} trajectories, {} snapshots", ensemble.n_traj, ensemble.snapshot_times.len());
            ctx.manifest(
                "simulate",
                &[],
                &[ENSEMBLE],
                json!({
                    "n_traj": ensemble.n_traj,
                    "n_steps": ensemble.n_steps,
                    "snapshot_times": ensemble.snapshot_times,
                    "model": extra,
                }),
            )
        }
    }
}

/// `moment,site,value,sd` or `time,x,value,sd`, in data-vector order.
fn write_observations_csv<W: Write>(obs: &ObservationSet, writer: W) -> difinv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let q = obs.locations.len();
    match obs.kind {
        ObservationKind::Mfpt { .. } => w.write_record(["moment", "site", "value", "sd"])?,
        ObservationKind::FokkerPlanck => w.write_record(["time", "x", "value", "sd"])?,
    }
    for (j, (y, g)) in obs.y.iter().zip(&obs.gamma_diag).enumerate() {
        let block = match obs.kind {
            ObservationKind::Mfpt { .. } => (j / q + 1).to_string(),
            ObservationKind::FokkerPlanck => obs.times[j / q].to_string(),
        };
        w.write_record(&[block, obs.locations[j % q].to_string(), y.to_string(), g.sqrt().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn prepare(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let s = &cfg.simulation;
    let d = &cfg.data;
    let (input, mut obs, summary) = match cfg.observable {
        Observable::Mfpt => {
            let samples = read_exit_times_csv(ctx.open(EXIT_TIMES)?, (s.domain_state[0], s.domain_state[1]), s.dt_time, s.max_steps)?;
            let data = MomentData::from_samples(&samples)?;
            let obs = ObservationSet::from_moments(&data, d.n_moments, d.variance_floor)?;
            let summary = json!({ "sites": data.sites, "split": data.split, "n_data": obs.len() });
            (EXIT_TIMES, obs, summary)
        }
        Observable::FokkerPlanck => {
            let snaps = read_snapshots_csv(ctx.open(ENSEMBLE)?)?;
            let n_traj = snaps.first().map_or(0, |(_, v)| v.len());
            let ratio = check_bandwidth(n_traj, d.bandwidth_state);
            let refs: Vec<(f64, &[f64])> = snaps.iter().map(|(t, v)| (*t, v.as_slice())).collect();
            let density = DensityData::from_snapshots(&refs, &d.grid(), d.bandwidth_state)?;
            let obs = ObservationSet::from_density(&density, d.variance_floor)?;
            let summary = json!({
                "n_traj": n_traj,
                "bandwidth": d.bandwidth_state,
                "bandwidth_ratio": ratio,
                "times": density.times,
                "n_data": obs.len(),
            });
            (ENSEMBLE, obs, summary)
        }
    };
    obs.metadata.insert("source".into(), json!(input));
    obs.write_json(ctx.create(OBSERVATIONS)?)?;
    write_observations_csv(&obs, ctx.create("data.csv")?)?;
    info!("prepared {} observations", obs.len());
    ctx.manifest("prepare", &[input], &[OBSERVATIONS, "data.csv"], summary)
}

/// Initial density for the Fokker–Planck model on `mesh`.
fn initial_density(cfg: &Config, mesh: Mesh1d) -> Result<FeFunction> {
    let fp = &cfg.fokker_planck;
    let extra = if fp.smooth_initial { cfg.data.bandwidth_state.powi(2) } else { 0.0 };
    let (mean, var) = match fp.initial {
        InitialConfig::Normal { mean_state, variance_state2 } => (mean_state, variance_state2 + extra),
        InitialConfig::Point { x_state } if extra > 0.0 => (x_state, extra),
        InitialConfig::Uniform { low_state, high_state } if extra == 0.0 => {
            let w = high_state - low_state;
            return Ok(FeFunction::interpolate(mesh, |x| if (low_state..=high_state).contains(&x) { 1.0 / w } else { 0.0 }));
        }
        _ => return Err(config("fokker_planck.initial needs a density: use a normal law, or a point with smooth_initial")),
    };
    Ok(FeFunction::interpolate(mesh, |x| {
        (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }))
}

/// Number of solver steps to reach `t_end` with the configured step.
fn fp_steps(cfg: &Config, t_end: f64) -> Result<usize> {
    let dt = cfg.fokker_planck.dt_time;
    let n = (t_end / dt).round();
    if n < 1.0 || (n * dt - t_end).abs() > 1e-9 * t_end {
        return Err(config(format!("last snapshot time {t_end} is not a multiple of fokker_planck.dt_time = {dt}")));
    }
    Ok(n as usize)
}

fn last_time(times: &[f64]) -> Result<f64> {
    times.iter().copied().reduce(f64::max).ok_or_else(|| config("no snapshot times"))
}

fn build_problem(cfg: &Config, mesh: Mesh1d, obs: &ObservationSet) -> Result<InverseProblem<PtoModel>> {
    let fp = match obs.kind {
        ObservationKind::Mfpt { .. } => None,
        ObservationKind::FokkerPlanck => {
            let t_end = last_time(&obs.times)?;
            Some((initial_density(cfg, mesh)?, t_end, fp_steps(cfg, t_end)?))
        }
    };
    let model = PtoModel::for_observations(mesh, obs, fp)?;
    Ok(InverseProblem::from_observations(model, obs)?)
}

/// Full PDE solution at `m`: all moments, or the density at the given times.
fn curves(cfg: &Config, m: &ParameterField, times: &[f64]) -> Result<Vec<(String, Vec<f64>)>> {
    let mesh = m.mesh;
    match cfg.observable {
        Observable::Mfpt => {
            let PdeSolution::Mfpt { moments, .. } = solve_mfpt_hierarchy(&mesh, m, cfg.data.n_moments)? else {
                unreachable!()
            };
            Ok(moments.into_iter().enumerate().map(|(k, v)| ((k + 1).to_string(), v)).collect())
        }
        Observable::FokkerPlanck => {
            let t_end = last_time(times)?;
            let n = fp_steps(cfg, t_end)?;
            let p0 = initial_density(cfg, mesh)?;
            let PdeSolution::FokkerPlanck { dt, states, .. } = solve_fokker_planck(&mesh, m, &p0, t_end, n)? else {
                unreachable!()
            };
            times.iter().map(|&t| Ok((t.to_string(), states[time_index(t, dt, n)?].clone()))).collect()
        }
    }
}

pub fn solve(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let mesh = cfg.mesh.mesh()?;
    let prior = cfg.prior.build(mesh)?;
    let m = ParameterField::from_vector(mesh, prior.mean())?;
    let solution = match cfg.observable {
        Observable::Mfpt => solve_mfpt_hierarchy(&mesh, &m, cfg.data.n_moments)?,
        Observable::FokkerPlanck => {
            let t_end = last_time(&cfg.simulation.snapshot_times_time)?;
            solve_fokker_planck(&mesh, &m, &initial_density(cfg, mesh)?, t_end, fp_steps(cfg, t_end)?)?
        }
    };
    solution.write_csv(ctx.create("solution.csv")?)?;
    m.write_csv(ctx.create("prior_mean.csv")?)?;
    ctx.manifest("solve", &[], &["solution.csv", "prior_mean.csv"], json!({ "parameter": "prior mean", "n_nodes": mesh.n_nodes() }))
}

/// Everything needed to rebuild the Laplace approximation downstream.
#[derive(Debug, Serialize, Deserialize)]
struct LaplaceArtifact {
    mesh: Mesh1d,
    m_map: Vec<f64>,
    eigvals: Vec<f64>,
    eigvecs: Vec<Vec<f64>>,
}

fn load_laplace(ctx: &Context, prior: JointPrior) -> Result<LowRankPosterior<JointPrior>> {
    let art: LaplaceArtifact = serde_json::from_reader(ctx.open(LAPLACE)?).map_err(difinv::Error::from)?;
    let mesh = ctx.cfg.mesh.mesh()?;
    if art.mesh != mesh {
        return Err(config(format!("{LAPLACE} was computed on {:?}, the config mesh is {mesh:?}; rerun infer", art.mesh)));
    }
    let vecs = art.eigvecs.into_iter().map(DVector::from_vec).collect();
    Ok(LowRankPosterior::new(mesh, DVector::from_vec(art.m_map), art.eigvals, vecs, prior)?)
}

pub fn infer(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let obs = ctx.observations()?;
    let mesh = cfg.mesh.mesh()?;
    let prior = cfg.prior.build(mesh)?;
    let problem = build_problem(cfg, mesh, &obs)?;
    let m0 = ParameterField::from_vector(mesh, prior.mean())?;
    let map = map_estimate(&problem, &prior, &m0, &cfg.newton)?;
    if !map.converged {
        warn!("Newton-CG stopped after {} iterations without meeting the gradient tolerance", map.newton_iters);
    }
    let eval = problem.evaluate(&map.m_map)?;
    // the Gauss–Newton Hessian keeps the Laplace covariance positive definite
    let hvp = |v: &DVector<f64>| problem.hessian_vector(&eval, v, HessianKind::GaussNewton);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_LAPLACE));
    let post = LowRankPosterior::compute(mesh, map.m_map.to_vector(), hvp, prior, &cfg.laplace, &mut rng)?;
    let variance = post.pointwise_variance_exact();

    map.m_map.write_csv(ctx.create("map.csv")?)?;
    map.write_log_json(ctx.create("newton_log.json")?)?;
    post.write_spectrum_csv(ctx.create("spectrum.csv")?)?;
    post.write_variance_csv(ctx.create("variance.csv")?, &variance)?;
    let art = LaplaceArtifact {
        mesh,
        m_map: post.m_map.iter().copied().collect(),
        eigvals: post.eigvals.clone(),
        eigvecs: post.eigvecs.iter().map(|v| v.iter().copied().collect()).collect(),
    };
    let mut w = ctx.create(LAPLACE)?;
    serde_json::to_writer(&mut w, &art).map_err(difinv::Error::from)?;
    ctx.finish(LAPLACE, w)?;
    info!("MAP misfit {:.4} after {} Newton steps; Laplace rank {}", eval.value, map.newton_iters, post.rank());
    ctx.manifest(
        "infer",
        &[OBSERVATIONS],
        &["map.csv", "newton_log.json", "spectrum.csv", "variance.csv", LAPLACE],
        json!({
            "n_data": obs.len(),
            "misfit": eval.value,
            "cost": map.cost_history.last(),
            "converged": map.converged,
            "newton_iters": map.newton_iters,
            "total_cg_iters": map.total_cg_iters,
            "rank": post.rank(),
        }),
    )
}

/// `node,x,component,mean,variance,lower,upper` from chain samples.
fn write_chain_summary<W: Write>(mesh: &Mesh1d, samples: &[DVector<f64>], writer: W) -> difinv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["node", "x", "component", "mean", "variance", "lower", "upper"])?;
    let n = mesh.n_nodes();
    let count = samples.len() as f64;
    for (c, name) in ["drift", "log_diffusion"].iter().enumerate() {
        for (i, x) in mesh.nodes().iter().enumerate() {
            let j = c * n + i;
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / count;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0);
            let half = 1.96 * var.sqrt();
            w.write_record(&[
                i.to_string(),
                x.to_string(),
                name.to_string(),
                mean.to_string(),
                var.to_string(),
                (mean - half).to_string(),
                (mean + half).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn sample(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let obs = ctx.observations()?;
    let mesh = cfg.mesh.mesh()?;
    let post = load_laplace(ctx, cfg.prior.build(mesh)?)?;
    let problem = build_problem(cfg, mesh, &obs)?;
    let mc = &cfg.mcmc;
    let m0 = post.m_map.clone();
    let h = if mc.tune_steps > 0 {
        tune_step_size(&problem, &post, &m0, mc.h, mc.tune_steps, mc.target_acceptance, derive_seed(cfg.seed, STAGE_TUNE))?
    } else {
        mc.h
    };
    let opts = MalaOptions { n_steps: mc.n_steps, burn_in: mc.burn_in, thin: mc.thin, h };
    let chain = run_chain(&problem, &post, &m0, &opts, derive_seed(cfg.seed, STAGE_CHAIN))?;
    chain.write_samples_csv(ctx.create("chain.csv")?, mc.burn_in, mc.thin)?;
    chain.write_trace_csv(ctx.create("trace.csv")?)?;
    write_chain_summary(&mesh, &chain.samples, ctx.create("chain_summary.csv")?)?;
    info!("MALA acceptance {:.3} at h = {h:.4}, {} retained samples", chain.acceptance_rate, chain.samples.len());
    ctx.manifest(
        "sample",
        &[OBSERVATIONS, LAPLACE],
        &["chain.csv", "trace.csv", "chain_summary.csv"],
        json!({ "h": h, "acceptance_rate": chain.acceptance_rate, "n_samples": chain.samples.len() }),
    )
}

/// Nearest-rank empirical quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

pub fn predict(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let obs = ctx.observations()?;
    let mesh = cfg.mesh.mesh()?;
    let prior = cfg.prior.build(mesh)?;
    let post = load_laplace(ctx, prior.clone())?;
    let problem = build_problem(cfg, mesh, &obs)?;
    let prior_mean = ParameterField::from_vector(mesh, prior.mean())?;
    let post_mean = ParameterField::from_vector(mesh, &post.m_map)?;
    let y_prior = problem.model.apply(&prior_mean)?;
    let y_post = problem.model.apply(&post_mean)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_PREDICT));
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(cfg.predict.n_draws);
    let mut failed = 0usize;
    for _ in 0..cfg.predict.n_draws {
        let m = ParameterField::from_vector(mesh, &post.sample(&mut rng))?;
        match problem.model.apply(&m) {
            Ok(y) => draws.push(y),
            Err(difinv::Error::NumericalDomain(_) | difinv::Error::Solver(_)) => failed += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if failed > 0 {
        warn!("{failed} of {} posterior draws failed in the forward solve and were dropped", cfg.predict.n_draws);
    }

    let block = match obs.kind {
        ObservationKind::Mfpt { .. } => "moment",
        ObservationKind::FokkerPlanck => "time",
    };
    let q = obs.locations.len();
    let name = "predictive.csv";
    let mut w = csv::Writer::from_writer(ctx.create(name)?);
    let header = [block, "location", "data", "data_sd", "prior_mean", "posterior_mean", "draws_lower", "draws_upper"];
    w.write_record(header).map_err(difinv::Error::from)?;
    for j in 0..obs.len() {
        let mut vals: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        vals.sort_by(f64::total_cmp);
        let b = match obs.kind {
            ObservationKind::Mfpt { .. } => (j / q + 1).to_string(),
            ObservationKind::FokkerPlanck => obs.times[j / q].to_string(),
        };
        w.write_record(&[
            b,
            obs.locations[j % q].to_string(),
            obs.y[j].to_string(),
            obs.gamma_diag[j].sqrt().to_string(),
            y_prior[j].to_string(),
            y_post[j].to_string(),
            quantile(&vals, 0.025).to_string(),
            quantile(&vals, 0.975).to_string(),
        ])
        .map_err(difinv::Error::from)?;
    }
    w.flush().map_err(|source| CliError::Io { path: ctx.path(name), source })?;

    let c_prior = curves(cfg, &prior_mean, &obs.times)?;
    let c_post = curves(cfg, &post_mean, &obs.times)?;
    let name = "predictive_curves.csv";
    let mut w = csv::Writer::from_writer(ctx.create(name)?);
    w.write_record(["node", "x", block, "prior_mean", "posterior_mean"]).map_err(difinv::Error::from)?;
    let nodes = mesh.nodes();
    for ((label, a), (_, b)) in c_prior.iter().zip(&c_post) {
        for i in 0..nodes.len() {
            w.write_record(&[i.to_string(), nodes[i].to_string(), label.clone(), a[i].to_string(), b[i].to_string()])
                .map_err(difinv::Error::from)?;
        }
    }
    w.flush().map_err(|source| CliError::Io { path: ctx.path(name), source })?;

    ctx.manifest(
        "predict",
        &[OBSERVATIONS, LAPLACE],
        &["predictive.csv", "predictive_curves.csv"],
        json!({
            "misfit_prior_mean": problem.misfit_of_prediction(&y_prior),
            "misfit_posterior_mean": problem.misfit_of_prediction(&y_post),
            "n_draws": draws.len(),
            "failed_draws": failed,
        }),
    )
}

pub fn output_dir(cfg: &Config, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone())
}
