//! One entry point per CLI subcommand. Each returns an [`ExperimentOutput`]
//! whose tables depend only on the configuration (and therefore on its seed).

use std::path::Path;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checks::{control_check, duality_check, malliavin_matrix_check, tangent_check};
use crate::config::RunConfig;
use crate::control::{gradient_decomposition, residual_decay_experiment};
use crate::dynamics::{default_gamma, lyapunov_report, Model};
use crate::error::{Error, Result};
use crate::field::VorticityField;
use crate::fk::{
    eigen_agreement, eigenfunction_estimate, eigenvalue_estimate, growth_ratio_report, long_run_occupation, probe_states, sample_direction,
    scgf_and_rate, uniform_feller_modulus, EigenMode, EigenSettings, EigenvalueEstimate, FellerSettings, RateFunctionEstimate, ScgfSettings,
};
use crate::forcing::check_condition_h;
use crate::observable::Observable;
use crate::par;
use crate::report::{write_artifacts, Artifacts, Cell, ExperimentOutput, Provenance, Table};
use crate::rng::{stream_id, TAG_INITIAL, TAG_PROBE, TAG_TRAJECTORY};
use crate::snapshot::Snapshot;
use crate::stats::Estimate;
use crate::steering::{mode_target, steer, steer_multistart, velocity_distance, SteeringProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalliavinTask {
    Matrix,
    Control,
    ResidualDecay,
    Duality,
    Gradient,
}

impl MalliavinTask {
    pub const ALL: [MalliavinTask; 5] = [
        MalliavinTask::Matrix,
        MalliavinTask::Control,
        MalliavinTask::ResidualDecay,
        MalliavinTask::Duality,
        MalliavinTask::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MalliavinTask::Matrix => "matrix",
            MalliavinTask::Control => "control",
            MalliavinTask::ResidualDecay => "residual-decay",
            MalliavinTask::Duality => "duality-check",
            MalliavinTask::Gradient => "gradient-check",
        }
    }
}

impl FromStr for MalliavinTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown malliavin task '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    CheckForcing,
    Simulate,
    TangentCheck,
    Malliavin(MalliavinTask),
    FkSpectrum,
    FellerCheck,
    Ldp,
    Steer,
}

impl Experiment {
    /// Stem used for artifact file names.
    pub fn name(self) -> String {
        match self {
            Experiment::CheckForcing => "check-forcing".into(),
            Experiment::Simulate => "simulate".into(),
            Experiment::TangentCheck => "tangent-check".into(),
            Experiment::Malliavin(t) => format!("malliavin-{}", t.name()),
            Experiment::FkSpectrum => "fk-spectrum".into(),
            Experiment::FellerCheck => "feller-check".into(),
            Experiment::Ldp => "ldp".into(),
            Experiment::Steer => "steer".into(),
        }
    }
}

pub fn model_at(cfg: &RunConfig, dt: f64) -> Result<Model> {
    let m = Model::new(cfg.model.n, cfg.model.nu, dt, cfg.forcing_set()?)?;
    Ok(if cfg.model.nonlinear { m } else { m.without_nonlinearity() })
}

/// State after `burn` time units from rest on stream `(TAG_INITIAL, 0)`.
pub fn burned_state(model: &Model, burn: f64, seed: u64) -> Result<VorticityField> {
    let steps = model.steps_for(burn)?;
    model.simulate_streaming(&model.spectral().zeros(), steps, seed, stream_id(TAG_INITIAL, 0), |_, _| {})
}

/// Five times the root-mean-square velocity `H²` norm of the linearized
/// stationary law.
pub fn default_r0(model: &Model) -> f64 {
    let mut sd = vec![0.0; model.dim()];
    let nu = model.nu();
    for (mode, b) in model.forcing().modes().iter().zip(model.forcing().amplitudes()) {
        let idx = model.lattice().index_of(*mode).expect("forcing mode in truncation");
        let k2 = mode.norm2() as f64;
        sd[idx] = (b * b * k2 * k2 / (2.0 * nu * k2)).sqrt();
    }
    5.0 * model.velocity_norm(&sd, 2.0)
}

fn prov(cfg: &RunConfig, model: &Model, samples: usize, notes: &str) -> Provenance {
    Provenance {
        seed: cfg.seed,
        samples,
        dt: model.dt(),
        n: model.n(),
        notes: notes.to_string(),
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn est_cells(e: &Estimate) -> [Cell; 2] {
    [e.mean.into(), e.stderr.into()]
}

pub fn run_experiment(cfg: &RunConfig, exp: Experiment) -> Result<ExperimentOutput> {
    match exp {
        Experiment::CheckForcing => check_forcing(cfg),
        Experiment::Simulate => simulate(cfg),
        Experiment::TangentCheck => tangent(cfg),
        Experiment::Malliavin(t) => malliavin(cfg, t),
        Experiment::FkSpectrum => fk_spectrum(cfg),
        Experiment::FellerCheck => feller(cfg),
        Experiment::Ldp => ldp(cfg),
        Experiment::Steer => steering(cfg),
    }
}

/// Runs an experiment and writes its artifacts under `dir`.
pub fn run_and_write(cfg: &RunConfig, exp: Experiment, dir: &Path) -> Result<(Artifacts, ExperimentOutput)> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let out = run_experiment(cfg, exp)?;
    let art = write_artifacts(dir, &exp.name(), cfg, &out, clock.elapsed().as_secs_f64(), started, par::current_threads())?;
    Ok((art, out))
}

fn check_forcing(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let f = cfg.forcing_set()?;
    let d = check_condition_h(&f);
    let mut t = Table::new(
        "modes",
        &["l1", "l2", "amplitude"],
        Provenance {
            seed: cfg.seed,
            samples: 0,
            dt: cfg.model.dt,
            n: cfg.model.n,
            notes: String::new(),
        },
    );
    for (m, a) in f.modes().iter().zip(f.amplitudes()) {
        t.push(vec![Cell::Int(m.l1 as i64), Cell::Int(m.l2 as i64), (*a).into()]);
    }
    Ok(ExperimentOutput {
        payload: json!({
            "condition_H": d.condition_h,
            "reason": d.reason,
            "minor_gcd": d.minor_gcd,
            "modes": d.modes,
        }),
        tables: vec![t],
        ..Default::default()
    })
}

fn simulate(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let model = model_at(cfg, cfg.model.dt)?;
    let s = &cfg.simulate;
    let steps = model.steps_for(s.horizon)?;
    let every = model.steps_for(s.sample_every)?.max(1);
    let times: Vec<f64> = (0..=steps).step_by(every).map(|k| k as f64 * model.dt()).collect();
    let zero = model.spectral().zeros();
    let runs = par::try_map_indexed(s.trajectories, |j| -> Result<(Vec<f64>, VorticityField)> {
        let mut norms = Vec::with_capacity(times.len());
        let last = model.simulate_streaming(&zero, steps, cfg.seed, stream_id(TAG_TRAJECTORY, j as u64), |k, w| {
            if k % every == 0 {
                norms.push(model.velocity_norm(w, 0.0));
            }
        })?;
        Ok((norms, last))
    })?;
    let gamma = s.gamma.unwrap_or_else(|| default_gamma(model.forcing()));
    let norms: Vec<Vec<f64>> = runs.iter().map(|r| r.0.clone()).collect();
    let rep = lyapunov_report(&times, &norms, gamma, s.m);
    let mut t = Table::new(
        "moments",
        &["t", "exp_moment", "exp_moment_se", "poly_moment", "poly_moment_se", "mean_energy"],
        prov(cfg, &model, s.trajectories, "from rest, stream (trajectory, j)"),
    );
    for (k, &tm) in times.iter().enumerate() {
        let e = Estimate::from_samples(&norms.iter().map(|n| n[k] * n[k]).collect::<Vec<_>>());
        let [a, b] = est_cells(&rep.exp_moment[k]);
        let [c, d] = est_cells(&rep.poly_moment[k]);
        t.push(vec![tm.into(), a, b, c, d, e.mean.into()]);
    }
    let mut flags = Vec::new();
    if !rep.exp_bounded || !rep.poly_bounded {
        flags.push("moment curve exceeds its constant envelope".into());
    }
    let snapshots = runs
        .first()
        .map(|r| vec![("final-0".to_string(), Snapshot::Vorticity(r.1.clone()))])
        .unwrap_or_default();
    Ok(ExperimentOutput {
        payload: to_json(&rep),
        tables: vec![t],
        snapshots,
        flags,
    })
}

fn tangent(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let model = model_at(cfg, cfg.model.dt)?;
    let w0 = burned_state(&model, cfg.malliavin.burn_in, cfg.seed)?;
    let t = &cfg.tangent;
    let c = tangent_check(&model, &w0, t.horizon, t.draws, &t.epsilons, cfg.seed)?;
    let mut header = vec!["draw".to_string(), "j_order".into(), "j2_order".into(), "duality_error".into()];
    for e in &t.epsilons {
        header.push(format!("j_remainder_{e:e}"));
    }
    for e in &t.epsilons {
        header.push(format!("j2_remainder_{e:e}"));
    }
    let hdr: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new("draws", &hdr, prov(cfg, &model, t.draws, "directions from stream (probe, 3j..3j+2)"));
    for (j, d) in c.draws.iter().enumerate() {
        let mut row: Vec<Cell> = vec![j.into(), d.j_order.into(), d.j2_order.into(), d.duality_error.into()];
        row.extend(d.j_remainder.iter().map(|&x| Cell::from(x)));
        row.extend(d.j2_remainder.iter().map(|&x| Cell::from(x)));
        table.push(row);
    }
    let mut flags = Vec::new();
    if !c.passes(1.9, 2.5, 1e-8) {
        flags.push("tangent consistency below the expected orders".into());
    }
    Ok(ExperimentOutput {
        payload: json!({
            "min_j_order": c.min_j_order,
            "min_j2_order": c.min_j2_order,
            "max_duality_error": c.max_duality_error,
        }),
        tables: vec![table],
        flags,
        ..Default::default()
    })
}

fn malliavin_model(cfg: &RunConfig) -> Result<Model> {
    model_at(cfg, cfg.malliavin.dt.unwrap_or(cfg.model.dt))
}

fn malliavin(cfg: &RunConfig, task: MalliavinTask) -> Result<ExperimentOutput> {
    let m = &cfg.malliavin;
    let mut flags = Vec::new();
    match task {
        MalliavinTask::Matrix => {
            let model = malliavin_model(cfg)?;
            let w0 = burned_state(&model, m.burn_in, cfg.seed)?;
            let c = malliavin_matrix_check(&model, &w0, 0.5, &m.betas, cfg.tangent.draws, cfg.seed)?;
            if !c.passes(1e-8) {
                flags.push("Malliavin matrix invariants violated".into());
            }
            let mut t = Table::new("invariants", &["quantity", "value"], prov(cfg, &model, cfg.tangent.draws, "horizon 1/2"));
            for (k, v) in [
                ("asymmetry", c.asymmetry),
                ("min_eigenvalue_ratio", c.min_eigenvalue_ratio),
                ("linear_diagonal_error", c.linear_diagonal_error),
                ("linear_offdiagonal", c.linear_offdiagonal),
                ("contraction_a_star", c.contraction_a_star),
                ("contraction_a", c.contraction_a),
                ("inverse_root_norm", c.inverse_root_norm),
                ("composed_norm", c.composed_norm),
            ] {
                t.push(vec![k.into(), v.into()]);
            }
            Ok(ExperimentOutput {
                payload: to_json(&c),
                tables: vec![t],
                flags,
                ..Default::default()
            })
        }
        MalliavinTask::Control => {
            let model = malliavin_model(cfg)?;
            let w0 = burned_state(&model, m.burn_in, cfg.seed)?;
            let c = control_check(&model, &w0, m.beta, m.blocks, m.check_paths, &[1e-2, 1e-4, 1e-6, 1e-8], cfg.seed)?;
            if !c.passes(1e-6, 1e-6) {
                flags.push("control construction checks failed".into());
            }
            let mut t = Table::new("cancellation", &["beta", "forced_residual_ratio"], prov(cfg, &model, 1, "linear model, block 0"));
            for (b, r) in &c.cancellation {
                t.push(vec![(*b).into(), (*r).into()]);
            }
            Ok(ExperimentOutput {
                payload: to_json(&c),
                tables: vec![t],
                flags,
                ..Default::default()
            })
        }
        MalliavinTask::ResidualDecay => {
            let model = malliavin_model(cfg)?;
            let w0 = burned_state(&model, m.burn_in, cfg.seed)?;
            let xi = sample_direction(&model, cfg.seed, stream_id(TAG_PROBE, 0));
            let table = residual_decay_experiment(&model, &w0, &xi, &m.betas, m.trajectories, m.blocks, cfg.seed, m.bootstrap)?;
            let p = prov(cfg, &model, m.trajectories, "bootstrap over trajectories");
            let mut rates = Table::new(
                "rates",
                &["beta", "rate", "rate_lo", "rate_hi", "final_ratio", "final_ratio_lo", "final_ratio_hi", "decays", "max_bound_ratio"],
                p.clone(),
            );
            let mut moments = Table::new("moments", &["beta", "n", "mean", "se"], p);
            for r in &table.rows {
                rates.push(vec![
                    r.beta.into(),
                    r.rate.into(),
                    r.rate_ci.lo.into(),
                    r.rate_ci.hi.into(),
                    r.final_ratio.into(),
                    r.final_ratio_ci.lo.into(),
                    r.final_ratio_ci.hi.into(),
                    r.decays.into(),
                    r.max_bound_ratio.into(),
                ]);
                for (n, e) in r.moments.iter().enumerate() {
                    let [a, b] = est_cells(e);
                    moments.push(vec![r.beta.into(), n.into(), a, b]);
                }
            }
            if !table.best().decays {
                flags.push(format!("non-decaying residual fit at the best β = {}", table.best_beta));
            }
            Ok(ExperimentOutput {
                payload: to_json(&table),
                tables: vec![rates, moments],
                flags,
                ..Default::default()
            })
        }
        MalliavinTask::Duality => {
            let model = Model::new(m.duality_n, cfg.model.nu, m.duality_dt, cfg.forcing_set()?)?;
            let model = if cfg.model.nonlinear { model } else { model.without_nonlinearity() };
            let w0 = burned_state(&model, m.burn_in, cfg.seed)?;
            let c = duality_check(&model, &w0, m.duality_mode, m.beta, m.duality_replicas, m.fd_step, cfg.seed)?;
            if !c.passes(3.0) {
                flags.push("Skorokhod duality outside 3 combined standard errors".into());
            }
            let mut t = Table::new("duality", &["quantity", "mean", "se"], prov(cfg, &model, m.duality_replicas, "F = mode coefficient at t = 1"));
            for (k, e) in [
                ("F_delta_v", c.lhs),
                ("DF_v_bump", c.rhs),
                ("DF_v_linearized", c.rhs_linearized),
                ("paired_difference", c.paired),
                ("deterministic_variance", c.deterministic_variance),
                ("deterministic_mean", c.deterministic_mean),
            ] {
                let [a, b] = est_cells(&e);
                t.push(vec![k.into(), a, b]);
            }
            t.push(vec!["deterministic_norm2".into(), c.deterministic_norm2.into(), 0.0.into()]);
            Ok(ExperimentOutput {
                payload: to_json(&c),
                tables: vec![t],
                flags,
                ..Default::default()
            })
        }
        MalliavinTask::Gradient => {
            let model = malliavin_model(cfg)?;
            let w0 = burned_state(&model, m.burn_in, cfg.seed)?;
            let xi = sample_direction(&model, cfg.seed, stream_id(TAG_PROBE, 0));
            let lat = model.lattice();
            let pairs = m
                .pairs
                .iter()
                .map(|(a, b)| Ok((a.build(lat)?, b.build(lat)?)))
                .collect::<Result<Vec<(Observable, Observable)>>>()?;
            let recs = gradient_decomposition(&model, &w0, &xi, &pairs, m.gradient_horizon, m.gradient_replicas, m.beta, m.fd_step, cfg.seed)?;
            let mut t = Table::new(
                "gradient",
                &[
                    "v", "psi", "i1", "i1_se", "i2", "i2_se", "i3", "i3_se", "total", "total_se", "finite_difference", "finite_difference_se", "pathwise",
                    "pathwise_se", "consistent",
                ],
                prov(cfg, &model, m.gradient_replicas, "same noise for all pairs"),
            );
            for r in &recs {
                let mut row: Vec<Cell> = vec![r.v.clone().into(), r.psi.clone().into()];
                for e in [&r.i1, &r.i2, &r.i3, &r.total, &r.finite_difference, &r.pathwise] {
                    row.extend(est_cells(e));
                }
                row.push(r.consistent.into());
                t.push(row);
                if !r.consistent {
                    flags.push(format!("gradient decomposition disagrees for ({}, {})", r.v, r.psi));
                }
            }
            Ok(ExperimentOutput {
                payload: to_json(&recs),
                tables: vec![t],
                flags,
                ..Default::default()
            })
        }
    }
}

fn fk_model(cfg: &RunConfig) -> Result<Model> {
    model_at(cfg, cfg.fk.dt.unwrap_or(cfg.model.dt))
}

fn eigen_row(t: &mut Table, e: &EigenvalueEstimate) {
    t.push(vec![
        format!("{:?}", e.mode).to_lowercase().into(),
        e.v.clone().into(),
        e.lambda.mean.into(),
        e.lambda.stderr.into(),
        e.ci.0.into(),
        e.ci.1.into(),
        e.bounds.0.into(),
        e.bounds.1.into(),
        e.in_bounds.into(),
    ]);
}

fn fk_spectrum(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let model = fk_model(cfg)?;
    let f = &cfg.fk;
    let v = f.potential.build(model.lattice())?;
    let w0 = model.spectral().zeros();
    let settings = EigenSettings {
        units: f.units,
        burn_in: f.burn_in,
        ensemble: f.ensemble,
        groups: f.batches,
    };
    let direct = eigenvalue_estimate(&model, &w0, &v, &settings, EigenMode::Direct, cfg.seed)?;
    let cloning = eigenvalue_estimate(&model, &w0, &v, &settings, EigenMode::Cloning, cfg.seed)?;
    let agree = eigen_agreement(&direct, &cloning, 2.0);
    let r0 = f.r0.unwrap_or_else(|| default_r0(&model));
    let probes = probe_states(&model, r0, f.probes, cfg.seed);
    let times = match f.eigen_times.as_slice() {
        [a, b, ..] => (*a, *b),
        _ => return Err(Error::Validation("fk.eigen_times needs two times".into())),
    };
    let ef = eigenfunction_estimate(&model, &probes, &v, times, f.ensemble, cfg.seed)?;
    let g = &cfg.growth;
    let gamma = g.gamma.unwrap_or_else(|| default_gamma(model.forcing()));
    let growth = growth_ratio_report(&model, &v, &g.times, &g.ms, gamma, &probes, g.ensemble, cfg.seed)?;
    let p = prov(cfg, &model, f.ensemble, "from rest; cloning resamples every unit time");
    let mut eig = Table::new("eigenvalues", &["mode", "v", "lambda", "se", "ci_lo", "ci_hi", "bound_lo", "bound_hi", "in_bounds"], p.clone());
    eigen_row(&mut eig, &direct);
    eigen_row(&mut eig, &cloning);
    let mut ess = Table::new("ess", &["unit", "ess_fraction"], p.clone());
    for (n, e) in cloning.ess_trace.iter().enumerate() {
        ess.push(vec![n.into(), (*e).into()]);
    }
    let mut eft = Table::new("eigenfunction", &["probe", "early", "early_se", "late", "late_se"], prov(cfg, &model, f.ensemble, "probes from stream (probe, p)"));
    for (k, (a, b)) in ef.early.iter().zip(&ef.late).enumerate() {
        let [x, y] = est_cells(a);
        let [z, w] = est_cells(b);
        eft.push(vec![k.into(), x, y, z, w]);
    }
    let mut gh = vec!["t".to_string(), "unit_norm".into()];
    for m in &g.ms {
        gh.push(format!("poly_m{m}"));
        gh.push(format!("poly_m{m}_se"));
    }
    gh.push("exponential".into());
    gh.push("exponential_se".into());
    let ghr: Vec<&str> = gh.iter().map(|s| s.as_str()).collect();
    let mut gt = Table::new("growth", &ghr, prov(cfg, &model, g.ensemble, "sup over probes"));
    for r in &growth.rows {
        let mut row: Vec<Cell> = vec![r.t.into(), r.unit_norm.into()];
        for e in &r.polynomial {
            row.extend(est_cells(e));
        }
        row.extend(est_cells(&r.exponential));
        gt.push(row);
    }
    let mut flags = Vec::new();
    if !agree {
        flags.push("direct and cloning eigenvalues disagree".into());
    }
    if !direct.in_bounds || !cloning.in_bounds {
        flags.push("eigenvalue outside [e^{min V}, e^{max V}]".into());
    }
    if ef.unstable {
        flags.push("eigenfunction estimate drifts between the two times".into());
    }
    if !growth.exponential_bounded || growth.polynomial_bounded.iter().any(|b| !b) {
        flags.push("growth ratio not bounded in time".into());
    }
    Ok(ExperimentOutput {
        payload: json!({
            "direct": to_json(&direct),
            "cloning": to_json(&cloning),
            "agreement": agree,
            "r0": r0,
            "eigenfunction": to_json(&ef),
            "growth": to_json(&growth),
        }),
        tables: vec![eig, ess, eft, gt],
        flags,
        ..Default::default()
    })
}

fn feller(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let model = fk_model(cfg)?;
    let f = &cfg.feller;
    let v = f.potential.build(model.lattice())?;
    let psi = f.test.build(model.lattice())?;
    let settings = FellerSettings {
        pairs: f.pairs,
        separations: (f.sep_min, f.sep_max),
        radius: f.radius,
        r0: cfg.fk.r0.unwrap_or_else(|| default_r0(&model)),
        probes: cfg.fk.probes,
        times: f.times.clone(),
        ensemble: f.ensemble,
    };
    let rep = uniform_feller_modulus(&model, &v, &psi, &settings, cfg.seed)?;
    let mut t = Table::new(
        "pairs",
        &["separation", "oscillation", "se", "excluded"],
        prov(cfg, &model, f.ensemble, "pairs from stream (pair, k), common noise within each pair"),
    );
    for p in &rep.pairs {
        t.push(vec![p.separation.into(), p.oscillation.into(), p.stderr.into(), p.excluded.into()]);
    }
    let mut flags = Vec::new();
    if rep.identical_pair_oscillation != 0.0 {
        flags.push("identical pair has nonzero oscillation".into());
    }
    if !rep.passes(0.5) {
        flags.push("fitted Hölder exponent below 1/2".into());
    }
    Ok(ExperimentOutput {
        payload: to_json(&rep),
        tables: vec![t],
        flags,
        ..Default::default()
    })
}

/// Structural verdicts on an estimated SCGF and rate function.
#[derive(Debug, Clone, Serialize)]
pub struct LdpVerdict {
    pub lambda_zero: f64,
    pub convex: bool,
    pub derivative: Estimate,
    pub occupation: Estimate,
    pub derivative_matches: bool,
    pub rate_nonnegative: bool,
    pub min_rate: f64,
    /// `ℓ` range where the rate is at its minimum.
    pub zero_set: (f64, f64),
    pub minimum_at_derivative: bool,
}

impl LdpVerdict {
    pub fn passes(&self) -> bool {
        self.lambda_zero == 0.0 && self.convex && self.derivative_matches && self.rate_nonnegative && self.min_rate.abs() <= 1e-12 && self.minimum_at_derivative
    }
}

pub fn ldp_verdict(est: &RateFunctionEstimate, occupation: Estimate) -> LdpVerdict {
    let zero = est.thetas.iter().position(|t| *t == 0.0).expect("θ grid contains 0");
    let lambda_zero = est.scgf[zero].mean;
    let d = est.derivative_at_zero;
    let finite: Vec<(f64, f64)> = est.rate.iter().filter_map(|p| p.rate.map(|r| (p.ell, r))).collect();
    let rate_nonnegative = finite.iter().all(|p| p.1 >= -1e-12);
    let min_rate = est.min_rate;
    let at_min: Vec<f64> = finite.iter().filter(|p| p.1 <= min_rate + 1e-12).map(|p| p.0).collect();
    let zero_set = (
        at_min.iter().copied().fold(f64::INFINITY, f64::min),
        at_min.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let spacing = if est.rate.len() > 1 { est.rate[1].ell - est.rate[0].ell } else { 0.0 };
    let pad = spacing + 3.0 * d.stderr;
    LdpVerdict {
        lambda_zero,
        convex: est.convex,
        derivative: d,
        occupation,
        derivative_matches: d.agrees_with(&occupation, 3.0),
        rate_nonnegative,
        min_rate,
        zero_set,
        minimum_at_derivative: d.mean >= zero_set.0 - pad && d.mean <= zero_set.1 + pad,
    }
}

fn ldp(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let model = fk_model(cfg)?;
    let l = &cfg.ldp;
    let v = l.potential.build(model.lattice())?;
    let w0 = model.spectral().zeros();
    let settings = ScgfSettings {
        thetas: l.thetas.clone(),
        units: l.units,
        burn_in: l.burn_in,
        ensemble: l.ensemble,
        batches: l.batches,
        ell_points: l.ell_points,
    };
    let est = scgf_and_rate(&model, &w0, &v, &settings, cfg.seed)?;
    let f = |w: &[f64]| v.eval(w);
    let occ = long_run_occupation(&model, &w0, l.burn_in as f64, l.occupation_horizon, &[&f], l.batches, cfg.seed, stream_id(TAG_INITIAL, 1))?;
    let verdict = ldp_verdict(&est, occ[0]);
    let p = prov(cfg, &model, l.ensemble, "common random numbers across θ");
    let mut st = Table::new("scgf", &["theta", "lambda", "se"], p.clone());
    for (t, e) in est.thetas.iter().zip(&est.scgf) {
        let [a, b] = est_cells(e);
        st.push(vec![(*t).into(), a, b]);
    }
    let mut rt = Table::new("rate", &["ell", "rate"], p);
    for r in &est.rate {
        rt.push(vec![r.ell.into(), r.rate.into()]);
    }
    let mut flags = est.flags.clone();
    if !verdict.passes() {
        flags.push("large-deviation structure checks failed".into());
    }
    Ok(ExperimentOutput {
        payload: json!({"estimate": to_json(&est), "verdict": to_json(&verdict)}),
        tables: vec![st, rt],
        flags,
        ..Default::default()
    })
}

fn steering(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let model = model_at(cfg, cfg.model.dt)?;
    let s = &cfg.steer;
    let target = mode_target(&model, &s.target)?;
    let u0 = model.spectral().zeros();
    let scale = velocity_distance(&model, &target, u0.coefficients());
    let tol = s.tolerance.unwrap_or(scale / 10.0);
    let mut problem = SteeringProblem::new(u0, target, tol);
    problem.horizon = s.horizon;
    problem.segments = s.segments;
    let res = if s.init_scale > 0.0 {
        steer_multistart(&model, &problem, s.init_scale, s.starts)?
    } else {
        steer(&model, &problem)?
    };
    let mut t = Table::new("trace", &["iteration", "distance"], prov(cfg, &model, s.starts, "from rest; random starts use seeds 1..=starts"));
    for (k, d) in res.trace.iter().enumerate() {
        t.push(vec![k.into(), (*d).into()]);
    }
    let mut flags = res.warnings.clone();
    if !res.converged {
        flags.push(format!("steering stopped at distance {} above tolerance {}", res.distance, tol));
    }
    Ok(ExperimentOutput {
        payload: json!({"tolerance": tol, "result": to_json(&res)}),
        tables: vec![t],
        flags,
        ..Default::default()
    })
}
