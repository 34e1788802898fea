//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs;
use std::time::Instant;

use nsldp::checks::{control_check, duality_check, malliavin_matrix_check, tangent_check};
use nsldp::config::{parse_config, RunConfig};
use nsldp::experiments::{burned_state, default_r0, ldp_verdict, run_and_write, Experiment, MalliavinTask};
use nsldp::fk::{
    eigen_agreement, eigenvalue_cloning, eigenvalue_direct, long_run_occupation, sample_direction, scgf_and_rate, uniform_feller_modulus, EigenSettings,
    FellerSettings, ScgfSettings,
};
use nsldp::control::{gradient_decomposition, residual_decay_experiment};
use nsldp::observable::Observable;
use nsldp::rng::{normals, stream_id, stream_rng, TAG_INITIAL, TAG_PROBE, TAG_TRAJECTORY};
use nsldp::stats::Estimate;
use nsldp::steering::{mode_target, steer, steer_multistart, SteeringProblem};
use nsldp::{check_condition_h, ForcingSet, Mode, Model, NoisePath, Result, Spectral, VorticityField};

const SEED: u64 = 20240611;
const NU: f64 = 0.1;

fn model(n: u32, dt: f64) -> Model {
    Model::new(n, NU, dt, ForcingSet::standard()).expect("model")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn spectral_identities() -> Result<Outcome> {
    let sp = Spectral::new(8);
    let mut worst_curl = 0.0f64;
    let mut worst_energy = 0.0f64;
    for j in 0..100 {
        let mut rng = stream_rng(SEED, stream_id(TAG_PROBE, j));
        let w = VorticityField::from_coefficients(8, normals(&mut rng, sp.dim(), 1.0))?;
        let back = sp.curl(&sp.biot_savart(&w));
        worst_curl = worst_curl.max(back.sub(&w).coef_norm() / w.coef_norm());
        let b = sp.nonlinear(&w);
        worst_energy = worst_energy.max(b.dot(&w).abs() / (b.coef_norm() * w.coef_norm()));
    }
    outcome(
        worst_curl <= 1e-12 && worst_energy <= 1e-10,
        format!("curl∘K rel err {worst_curl:.2e}, ⟨B(Kw,w),w⟩ rel {worst_energy:.2e}"),
    )
}

fn condition_h() -> Result<Outcome> {
    let standard = check_condition_h(&ForcingSet::standard()).condition_h;
    let pair = check_condition_h(&ForcingSet::uniform(vec![Mode::new(1, 0), Mode::new(-1, 0)], 1.0)?).condition_h;
    let cross = check_condition_h(&ForcingSet::uniform(
        vec![Mode::new(1, 0), Mode::new(-1, 0), Mode::new(0, 1), Mode::new(0, -1)],
        1.0,
    )?)
    .condition_h;
    outcome(standard && !pair && !cross, format!("standard {standard}, (±1,0) {pair}, unit cross {cross}"))
}

fn decay_and_variance() -> Result<Outcome> {
    let m = model(8, 1.0 / 128.0);
    let steps = m.steps_for(1.0)?;
    let mut worst = 0.0f64;
    for idx in 0..m.dim() {
        let w0 = VorticityField::basis(8, idx, 0.7);
        let tr = m.simulate(&w0, NoisePath::zeros(steps, m.d(), m.dt()))?;
        let expect = 0.7 * (-NU * m.lattice().norm2(idx) * 1.0).exp();
        let end = tr.final_state();
        let off: f64 = end.iter().enumerate().filter(|(i, _)| *i != idx).map(|(_, x)| x.abs()).fold(0.0, f64::max);
        worst = worst.max(((end[idx] - expect) / expect).abs()).max(off / expect);
    }
    let lin = Model::new(8, NU, 1.0 / 16.0, ForcingSet::standard())?.without_nonlinearity();
    let t = 40.0;
    let steps = lin.steps_for(t)?;
    let paths = 10_000;
    let zero = lin.spectral().zeros();
    let finals = nsldp::par::try_map_indexed(paths, |j| lin.simulate_streaming(&zero, steps, SEED, stream_id(TAG_TRAJECTORY, j as u64), |_, _| {}))?;
    let mut ok = true;
    let mut details = Vec::new();
    for (mode, b) in lin.forcing().modes().iter().zip(lin.forcing().amplitudes()) {
        let idx = lin.lattice().index_of(*mode).unwrap();
        let k2 = mode.norm2() as f64;
        let oracle = b * b * k2 * k2 / (2.0 * NU * k2);
        let var = Estimate::variance_of(&finals.iter().map(|w| w.coefficients()[idx]).collect::<Vec<_>>());
        ok &= var.within(oracle, 3.0);
        details.push(format!("{mode}: {:.3}σ", (var.mean - oracle) / var.stderr));
    }
    outcome(worst <= 1e-12 && ok, format!("decay rel err {worst:.2e}; variance z {}", details.join(", ")))
}

fn tangent() -> Result<Outcome> {
    let m = model(8, 1.0 / 128.0);
    let w0 = burned_state(&m, 5.0, SEED)?;
    let c = tangent_check(&m, &w0, 1.0, 50, &[1e-2, 1e-3, 1e-4], SEED)?;
    outcome(
        c.passes(1.9, 2.5, 1e-8),
        format!(
            "min J order {:.3}, min J² remainder order {:.3} (o(ε²) needs > 2), max duality err {:.2e}",
            c.min_j_order, c.min_j2_order, c.max_duality_error
        ),
    )
}

fn malliavin_matrix() -> Result<Outcome> {
    let m = model(8, 1.0 / 128.0);
    let w0 = burned_state(&m, 5.0, SEED)?;
    let c = malliavin_matrix_check(&m, &w0, 0.5, &[1e-6, 1e-3, 1.0], 20, SEED)?;
    outcome(
        c.passes(1e-8),
        format!(
            "asym {:.1e}, λmin/tr {:.1e}, linear diag err {:.1e}, off-diag {:.1e}, ‖A*(M+β)^-½‖ {:.9}, ‖(M+β)^-½A‖ {:.9}, β½‖(M+β)^-½‖ {:.9}, ‖A*(M+β)^-1A‖ {:.9}",
            c.asymmetry,
            c.min_eigenvalue_ratio,
            c.linear_diagonal_error,
            c.linear_offdiagonal,
            c.contraction_a_star,
            c.contraction_a,
            c.inverse_root_norm,
            c.composed_norm
        ),
    )
}

fn control() -> Result<Outcome> {
    let m = model(8, 1.0 / 32.0);
    let w0 = burned_state(&m, 5.0, SEED)?;
    let c = control_check(&m, &w0, 1e-2, 3, 20, &[1e-2, 1e-4, 1e-6, 1e-8, 1e-10], SEED)?;
    let last = c.cancellation.last().map(|x| x.1).unwrap_or(f64::NAN);
    outcome(
        c.passes(1e-6, 1e-6),
        format!(
            "second-half max |v| {:.1e}, max bound ratio {:.9}, forced residual at β=1e-10 {:.2e}",
            c.second_half_max, c.max_bound_ratio, last
        ),
    )
}

fn residual_decay() -> Result<Outcome> {
    let m = model(8, 1.0 / 32.0);
    let w0 = burned_state(&m, 5.0, SEED)?;
    let xi = sample_direction(&m, SEED, stream_id(TAG_PROBE, 0));
    let t = residual_decay_experiment(&m, &w0, &xi, &[1e-3, 1e-2, 1e-1], 2000, 6, SEED, 1000)?;
    let b = t.best();
    let rows: Vec<String> = t.rows.iter().map(|r| format!("β={:e}: rate {:.3}", r.beta, r.rate)).collect();
    outcome(
        b.decays,
        format!(
            "best β {:e}: rate {:.4} CI [{:.4}, {:.4}], E‖ρ6‖⁴/E‖ρ0‖⁴ {:.4} CI [{:.4}, {:.4}] ({})",
            b.beta,
            b.rate,
            b.rate_ci.lo,
            b.rate_ci.hi,
            b.final_ratio,
            b.final_ratio_ci.lo,
            b.final_ratio_ci.hi,
            rows.join("; ")
        ),
    )
}

fn skorokhod() -> Result<Outcome> {
    let m = model(4, 1.0 / 16.0);
    let w0 = burned_state(&m, 5.0, SEED)?;
    let c = duality_check(&m, &w0, Mode::new(1, 0), 1e-2, 10_000, 1e-4, SEED)?;
    let z = (c.lhs.mean - c.rhs.mean).abs() / nsldp::stats::combined_se(c.lhs.stderr, c.rhs.stderr);
    let zv = (c.deterministic_variance.mean - c.deterministic_norm2).abs() / c.deterministic_variance.stderr;
    outcome(
        c.passes(3.0),
        format!(
            "E[Fδ(v)] {:.5} ± {:.5}, E⟨DF,v⟩ {:.5} ± {:.5} ({z:.2} se); Var δ(v) {:.4} ± {:.4} vs ‖v‖² {:.4} ({zv:.2} se)",
            c.lhs.mean, c.lhs.stderr, c.rhs.mean, c.rhs.stderr, c.deterministic_variance.mean, c.deterministic_variance.stderr, c.deterministic_norm2
        ),
    )
}

fn gradient() -> Result<Outcome> {
    let m = model(8, 1.0 / 32.0);
    let w0 = burned_state(&m, 5.0, SEED)?;
    let xi = sample_direction(&m, SEED, stream_id(TAG_PROBE, 0));
    let lat = m.lattice().clone();
    let pairs = vec![
        (Observable::tanh(&lat, Mode::new(1, 0), 0.1, 1.0)?, Observable::bump(&lat, Mode::new(1, 1), 1.0, 0.5)?),
        (Observable::bump(&lat, Mode::new(1, 0), 0.2, 0.5)?, Observable::tanh(&lat, Mode::new(1, 1), 1.0, 0.5)?),
    ];
    let recs = gradient_decomposition(&m, &w0, &xi, &pairs, 2.0, 400, 1e-2, 1e-4, SEED)?;
    let pass = recs.iter().all(|r| r.total.agrees_with(&r.finite_difference, 3.0));
    let d: Vec<String> = recs
        .iter()
        .map(|r| {
            format!(
                "I1+I2+I3 {:.5} ± {:.5} vs FD {:.5} ± {:.5}",
                r.total.mean, r.total.stderr, r.finite_difference.mean, r.finite_difference.stderr
            )
        })
        .collect();
    outcome(pass, d.join("; "))
}

fn fk_spectrum() -> Result<Outcome> {
    let m = model(8, 1.0 / 32.0);
    let w0 = m.spectral().zeros();
    let lat = m.lattice().clone();
    let s = EigenSettings {
        units: 12,
        burn_in: 4,
        ensemble: 1000,
        groups: 4,
    };
    let small = EigenSettings { ensemble: 50, ..s };
    let zero = eigenvalue_cloning(&m, &w0, &Observable::constant(0.0), &small, SEED)?;
    let c = 0.3;
    let cst = eigenvalue_cloning(&m, &w0, &Observable::constant(c), &small, SEED)?;
    let v = Observable::tanh(&lat, Mode::new(1, 0), 0.1, 1.0)?;
    let direct = eigenvalue_direct(&m, &w0, &v, &s, SEED)?;
    let cloning = eigenvalue_cloning(&m, &w0, &v, &s, SEED)?;
    let exact0 = zero.lambda.mean == 1.0;
    let cerr = (cst.lambda.mean - c.exp()).abs() / c.exp();
    let agree = eigen_agreement(&direct, &cloning, 2.0);
    let bounds = [&zero, &cst, &direct, &cloning].iter().all(|e| e.in_bounds);
    outcome(
        exact0 && cerr <= 1e-12 && agree && bounds,
        format!(
            "λ(0) = {}, λ(c) rel err {cerr:.1e}, direct {:.6} ± {:.6}, cloning {:.6} ± {:.6}, in bounds {bounds}",
            zero.lambda.mean, direct.lambda.mean, direct.lambda.stderr, cloning.lambda.mean, cloning.lambda.stderr
        ),
    )
}

fn ldp() -> Result<Outcome> {
    let m = model(8, 1.0 / 32.0);
    let w0 = m.spectral().zeros();
    let v = Observable::tanh(m.lattice(), Mode::new(1, 0), 0.1, 1.0)?;
    let settings = ScgfSettings {
        thetas: (-4..=4).map(|t| t as f64).collect(),
        units: 24,
        burn_in: 4,
        ensemble: 200,
        batches: 5,
        ell_points: 41,
    };
    let est = scgf_and_rate(&m, &w0, &v, &settings, SEED)?;
    let f = |w: &[f64]| v.eval(w);
    let occ = long_run_occupation(&m, &w0, 4.0, 200.0, &[&f], 5, SEED, stream_id(TAG_INITIAL, 1))?;
    let vd = ldp_verdict(&est, occ[0]);
    outcome(
        vd.passes(),
        format!(
            "Λ(0) = {}, convex {}, Λ'(0) {:.5} ± {:.5} vs occupation {:.5} ± {:.5}, I ≥ 0 {}, min I {:.1e} on ℓ ∈ [{:.4}, {:.4}]",
            vd.lambda_zero,
            vd.convex,
            vd.derivative.mean,
            vd.derivative.stderr,
            vd.occupation.mean,
            vd.occupation.stderr,
            vd.rate_nonnegative,
            vd.min_rate,
            vd.zero_set.0,
            vd.zero_set.1
        ),
    )
}

fn feller() -> Result<Outcome> {
    let m = model(8, 1.0 / 128.0);
    let lat = m.lattice().clone();
    let v = Observable::tanh(&lat, Mode::new(1, 0), 0.1, 1.0)?;
    let psi = Observable::tanh(&lat, Mode::new(1, 1), 1.0, 0.5)?;
    let settings = FellerSettings {
        pairs: 12,
        separations: (1e-3, 1e-1),
        radius: 1.0,
        r0: default_r0(&m),
        probes: 8,
        times: vec![0.5, 1.0, 2.0],
        ensemble: 200,
    };
    let r = uniform_feller_modulus(&m, &v, &psi, &settings, SEED)?;
    outcome(
        r.identical_pair_oscillation == 0.0 && r.passes(0.5),
        format!(
            "identical-pair oscillation {}, exponent {:.3} ± {:.3}, excluded pairs {}",
            r.identical_pair_oscillation, r.exponent, r.exponent_se, r.excluded
        ),
    )
}

fn steering() -> Result<Outcome> {
    let m = model(8, 1.0 / 32.0);
    let u0 = m.spectral().zeros();
    let eps = 0.1;
    let trivial = steer(&m, &SteeringProblem::new(u0.clone(), vec![0.0; m.dim()], eps / 10.0))?;
    let forced = steer(&m, &SteeringProblem::new(u0.clone(), mode_target(&m, &[(Mode::new(1, 0), eps)])?, eps / 10.0))?;
    let transfer_problem = SteeringProblem::new(u0.clone(), mode_target(&m, &[(Mode::new(2, 1), eps)])?, eps / 10.0);
    let transfer = steer_multistart(&m, &transfer_problem, 10.0, 4)?;
    let even = ForcingSet::uniform(vec![Mode::new(2, 0), Mode::new(-2, 0), Mode::new(2, 2), Mode::new(-2, -2)], 0.25)?;
    let me = Model::new(8, NU, 1.0 / 32.0, even)?;
    let odd = steer(&me, &SteeringProblem::new(u0, mode_target(&me, &[(Mode::new(1, 0), eps)])?, eps / 10.0))?;
    let pass = trivial.converged
        && trivial.iterations == 0
        && forced.converged
        && forced.distance <= eps / 10.0
        && transfer.converged
        && !odd.converged
        && odd.distance > eps / 2.0;
    outcome(
        pass,
        format!(
            "trivial it {}, forced (1,0) {:.2e} after {} it, transfer (2,1) {:.2e} after {} it, failing-(H) floor {:.4} (stalled {})",
            trivial.iterations, forced.distance, forced.iterations, transfer.distance, transfer.iterations, odd.distance, odd.stalled
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let base = std::env::temp_dir().join(format!("nsldp-acceptance-{}", std::process::id()));
    let text = "seed = 11\nthreads = 1\n[model]\nn = 4\ndt = 1/32\n\
        [malliavin]\nbetas = 1e-2 1e-1\ntrajectories = 40\nblocks = 3\nburn_in = 1\nbootstrap = 100\n\
        [ldp]\nthetas = -2 -1 0 1 2\nunits = 8\nburn_in = 2\nensemble = 40\nbatches = 3\noccupation_horizon = 12\n\
        [simulate]\nhorizon = 2\ntrajectories = 8\n";
    let cfg: RunConfig = parse_config(text)?;
    let exps = [Experiment::Simulate, Experiment::Malliavin(MalliavinTask::ResidualDecay), Experiment::Ldp, Experiment::Steer];
    let mut same = true;
    let mut files = 0;
    for e in exps {
        let (a, _) = run_and_write(&cfg, e, &base.join("a"))?;
        let (b, _) = run_and_write(&cfg, e, &base.join("b"))?;
        for (x, y) in a.tables.iter().zip(&b.tables) {
            same &= fs::read(x).map_err(|err| nsldp::Error::io(x, err))? == fs::read(y).map_err(|err| nsldp::Error::io(y, err))?;
            files += 1;
        }
        same &= a.tables.len() == b.tables.len();
    }
    let _ = fs::remove_dir_all(&base);
    outcome(same && files > 0, format!("{files} CSV files compared byte for byte"))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Result<Outcome>)> = vec![
        ("spectral identities", spectral_identities),
        ("condition (H) oracle", condition_h),
        ("single-mode decay and OU variance", decay_and_variance),
        ("tangent consistency", tangent),
        ("Malliavin matrix", malliavin_matrix),
        ("control construction", control),
        ("residual decay", residual_decay),
        ("Skorokhod duality", skorokhod),
        ("gradient decomposition", gradient),
        ("FK spectrum", fk_spectrum),
        ("LDP structure", ldp),
        ("uniform Feller shadow", feller),
        ("steering", steering),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} [{:.1} s] {}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            name,
            t.elapsed().as_secs_f64(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
