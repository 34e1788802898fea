//! Numerical consistency checks for the tangent, Malliavin and Skorokhod
//! layers, each against an independent route: finite differences of the
//! nonlinear flow, closed-form linear formulas, and Monte-Carlo duality.

use serde::Serialize;

use crate::control::{build_control_block, build_control_process, propagate_residual, skorokhod_integral};
use crate::dynamics::{Model, NoisePath};
use crate::error::{Error, Result};
use crate::field::{axpy, dot, norm, VorticityField};
use crate::fk::sample_direction;
use crate::lattice::Mode;
use crate::par;
use crate::rng::{normals, stream_id, stream_rng, TAG_PAIR, TAG_PROBE, TAG_TRAJECTORY};
use crate::stats::{combined_se, ols, Estimate};
use crate::variational::{operator_norm, ControlPath, Linearization};

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn slope(eps: &[f64], r: &[f64]) -> f64 {
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = r.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    ols(&x, &y).slope
}

#[derive(Debug, Clone, Serialize)]
pub struct TangentDraw {
    pub j_remainder: Vec<f64>,
    pub j_order: f64,
    pub j2_remainder: Vec<f64>,
    pub j2_order: f64,
    /// `|⟨Av, ξ⟩ - ⟨v, A*ξ⟩| / (‖Av‖ ‖ξ‖)`.
    pub duality_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TangentCheck {
    pub horizon: f64,
    pub epsilons: Vec<f64>,
    pub draws: Vec<TangentDraw>,
    pub min_j_order: f64,
    pub min_j2_order: f64,
    pub max_duality_error: f64,
}

impl TangentCheck {
    /// First-order remainder of order at least `j_order`, a second-order
    /// remainder that is `o(ε²)` at observed order at least `j2_order`, and
    /// duality to `duality_tol`.
    pub fn passes(&self, j_order: f64, j2_order: f64, duality_tol: f64) -> bool {
        self.min_j_order >= j_order && self.min_j2_order >= j2_order && self.max_duality_error <= duality_tol
    }
}

/// Finite-difference and duality checks on `draws` independent noise paths
/// from `w0`. Draw `j` uses stream `(TAG_TRAJECTORY, j)` for the noise and
/// `(TAG_PROBE, ·)` for its directions.
pub fn tangent_check(model: &Model, w0: &VorticityField, horizon: f64, draws: usize, epsilons: &[f64], seed: u64) -> Result<TangentCheck> {
    if epsilons.len() < 2 || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Validation("need at least two positive ε values".into()));
    }
    let steps = model.steps_for(horizon)?;
    let n = model.n();
    let rows = par::try_map_indexed(draws, |j| -> Result<TangentDraw> {
        let noise = NoisePath::generate(seed, stream_id(TAG_TRAJECTORY, j as u64), steps, model.d(), model.dt());
        let traj = model.simulate(w0, noise.clone())?;
        let lin = Linearization::new(model, &traj);
        let phi = sample_direction(model, seed, stream_id(TAG_PROBE, 3 * j as u64));
        let psi = sample_direction(model, seed, stream_id(TAG_PROBE, 3 * j as u64 + 1));
        let base = traj.final_state();
        let flow = |dx: &[(f64, &[f64])]| -> Result<Vec<f64>> {
            let mut c = w0.coefficients().to_vec();
            for (a, x) in dx {
                axpy(*a, x, &mut c);
            }
            let w = VorticityField::from_coefficients(n, c)?;
            Ok(model.simulate(&w, noise.clone())?.final_state().to_vec())
        };
        let jphi = lin.evolve_j(0, steps, &phi)?;
        let j2 = lin.evolve_j2(0, steps, &phi, &psi)?;
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        for &e in epsilons {
            let p = flow(&[(e, &phi)])?;
            let q = flow(&[(e, &psi)])?;
            let pq = flow(&[(e, &phi), (e, &psi)])?;
            let lin1: Vec<f64> = base.iter().zip(&jphi).map(|(b, x)| b + e * x).collect();
            r1.push(diff_norm(&p, &lin1));
            let second: Vec<f64> = (0..base.len()).map(|i| pq[i] - p[i] - q[i] + base[i] - e * e * j2[i]).collect();
            r2.push(norm(&second));
        }
        let mut rng = stream_rng(seed, stream_id(TAG_PROBE, 3 * j as u64 + 2));
        let v = ControlPath::from_values(0, model.d(), model.dt(), normals(&mut rng, steps * model.d(), 1.0));
        let xi = normals(&mut rng, model.dim(), 1.0);
        let av = lin.apply_a(0, steps, &v)?;
        let asx = lin.apply_a_star(0, steps, &xi)?;
        let duality_error = (dot(&av, &xi) - v.l2_inner(&asx)).abs() / (norm(&av) * norm(&xi));
        Ok(TangentDraw {
            j_order: slope(epsilons, &r1),
            j2_order: slope(epsilons, &r2),
            j_remainder: r1,
            j2_remainder: r2,
            duality_error,
        })
    })?;
    Ok(TangentCheck {
        horizon,
        epsilons: epsilons.to_vec(),
        min_j_order: rows.iter().map(|r| r.j_order).fold(f64::INFINITY, f64::min),
        min_j2_order: rows.iter().map(|r| r.j2_order).fold(f64::INFINITY, f64::min),
        max_duality_error: rows.iter().map(|r| r.duality_error).fold(0.0, f64::max),
        draws: rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixCheck {
    pub horizon: f64,
    pub betas: Vec<f64>,
    pub asymmetry: f64,
    /// `λ_min / trace`.
    pub min_eigenvalue_ratio: f64,
    /// Linear model: worst relative error of the forced diagonal entries.
    pub linear_diagonal_error: f64,
    /// Linear model: largest entry off the forced diagonal, relative to the
    /// largest entry.
    pub linear_offdiagonal: f64,
    /// `max ‖A*(M+β)^{-1/2} ξ‖ / ‖ξ‖`.
    pub contraction_a_star: f64,
    /// `max ‖(M+β)^{-1/2} A v‖ / ‖v‖`.
    pub contraction_a: f64,
    /// `max ‖(M+β)^{-1/2}‖ β^{1/2}`.
    pub inverse_root_norm: f64,
    /// `max ‖A*(M+β)^{-1}A‖` by power iteration.
    pub composed_norm: f64,
}

impl MatrixCheck {
    pub fn passes(&self, slack: f64) -> bool {
        self.asymmetry <= 1e-10
            && self.min_eigenvalue_ratio >= -1e-10
            && self.linear_diagonal_error <= 1e-8
            && self.linear_offdiagonal <= 1e-12
            && self.contraction_a_star <= 1.0 + slack
            && self.contraction_a <= 1.0 + slack
            && self.inverse_root_norm <= 1.0 + slack
            && self.composed_norm <= 1.0 + slack
    }
}

/// Invariants of the assembled Malliavin matrix over `[0, horizon]` along a
/// path from `w0`, plus the closed-form diagonal of the linear model.
pub fn malliavin_matrix_check(model: &Model, w0: &VorticityField, horizon: f64, betas: &[f64], draws: usize, seed: u64) -> Result<MatrixCheck> {
    let steps = model.steps_for(horizon)?;
    let traj = model.sample_path(w0, horizon, seed, stream_id(TAG_TRAJECTORY, 0))?;
    let lin = Linearization::new(model, &traj);
    let resp = lin.noise_responses(0, steps)?;
    let m = resp.malliavin_matrix();
    let ev = m.eigenvalues();
    let trace = m.trace().max(f64::MIN_POSITIVE);
    let mut out = MatrixCheck {
        horizon,
        betas: betas.to_vec(),
        asymmetry: m.asymmetry(),
        min_eigenvalue_ratio: ev[0] / trace,
        linear_diagonal_error: 0.0,
        linear_offdiagonal: 0.0,
        contraction_a_star: 0.0,
        contraction_a: 0.0,
        inverse_root_norm: 0.0,
        composed_norm: 0.0,
    };
    let d = model.d();
    for &beta in betas {
        let p = m.regularized_power(beta, -0.5)?;
        let lam_min = ev[0];
        out.inverse_root_norm = out.inverse_root_norm.max((beta / (lam_min + beta)).sqrt());
        for j in 0..draws {
            let mut rng = stream_rng(seed, stream_id(TAG_PAIR, j as u64));
            let xi = normals(&mut rng, model.dim(), 1.0);
            let px = (&p * nalgebra::DVector::from_column_slice(&xi)).as_slice().to_vec();
            let ratio = lin.apply_a_star(0, steps, &px)?.l2_norm() / norm(&xi);
            out.contraction_a_star = out.contraction_a_star.max(ratio);
            let v = ControlPath::from_values(0, d, model.dt(), normals(&mut rng, steps * d, 1.0));
            let av = lin.apply_a(0, steps, &v)?;
            let pav = (&p * nalgebra::DVector::from_column_slice(&av)).as_slice().to_vec();
            out.contraction_a = out.contraction_a.max(norm(&pav) / v.l2_norm());
        }
        let solver = resp.regularized(beta)?;
        // dt-weighted L² is a scalar multiple of the Euclidean geometry, so
        // the plain operator norm of the symmetric map is the L² one
        let t_map = |x: &[f64]| {
            let v = ControlPath::from_values(0, d, model.dt(), x.to_vec());
            resp.adjoint(&solver.solve(&resp.apply(&v))).values().to_vec()
        };
        let composed = operator_norm(steps * d, t_map, t_map, 200);
        out.composed_norm = out.composed_norm.max(composed);
    }
    let linear = Model::new(model.n(), model.nu(), model.dt(), model.forcing().clone())?.without_nonlinearity();
    let ltraj = linear.sample_path(w0, horizon, seed, stream_id(TAG_TRAJECTORY, 0))?;
    let llin = Linearization::new(&linear, &ltraj);
    let lm = llin.noise_responses(0, steps)?.malliavin_matrix();
    let lat = linear.lattice();
    let nu = linear.nu();
    let tau = steps as f64 * linear.dt();
    let scale = lm.matrix.amax().max(f64::MIN_POSITIVE);
    let mut expected = vec![0.0; linear.dim()];
    for (mode, b) in linear.forcing().modes().iter().zip(linear.forcing().amplitudes()) {
        let idx = lat.index_of(*mode).expect("forcing mode in truncation");
        let k2 = mode.norm2() as f64;
        expected[idx] = b * b * k2 * k2 * (1.0 - (-2.0 * nu * k2 * tau).exp()) / (2.0 * nu * k2);
    }
    for i in 0..linear.dim() {
        for j in 0..linear.dim() {
            let x = lm.matrix[(i, j)];
            if i == j && expected[i] != 0.0 {
                out.linear_diagonal_error = out.linear_diagonal_error.max((x - expected[i]).abs() / expected[i]);
            } else {
                out.linear_offdiagonal = out.linear_offdiagonal.max(x.abs() / scale);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlCheck {
    pub paths: usize,
    /// Largest `|v|` on any second half.
    pub second_half_max: f64,
    /// Largest `‖v‖ β^{1/2} / ‖J ρ_n‖`.
    pub max_bound_ratio: f64,
    /// Linear model: `‖ρ(n + 1/2)‖ / ‖ξ‖` on the forced range, per β.
    pub cancellation: Vec<(f64, f64)>,
}

impl ControlCheck {
    pub fn passes(&self, slack: f64, cancel_tol: f64) -> bool {
        let decreasing = self.cancellation.windows(2).all(|p| p[1].1 < p[0].1);
        self.second_half_max == 0.0
            && self.max_bound_ratio <= 1.0 + slack
            && decreasing
            && self.cancellation.last().is_some_and(|c| c.1 <= cancel_tol)
    }
}

/// Structural and pathwise checks of the block control on `paths` noise
/// paths, plus the linear-model cancellation as β shrinks.
pub fn control_check(model: &Model, w0: &VorticityField, beta: f64, blocks: usize, paths: usize, betas: &[f64], seed: u64) -> Result<ControlCheck> {
    let s = model.steps_per_unit()?;
    let xi = sample_direction(model, seed, stream_id(TAG_PROBE, 0));
    let per = par::try_map_indexed(paths, |j| -> Result<(f64, f64)> {
        let traj = model.sample_path(w0, blocks as f64, seed, stream_id(TAG_TRAJECTORY, j as u64))?;
        let lin = Linearization::new(model, &traj);
        let proc = build_control_process(&lin, &xi, beta, blocks)?;
        let mut zero = 0.0f64;
        let mut ratio = 0.0f64;
        for b in &proc.blocks {
            for k in b.layout.mid..b.layout.end {
                zero = b.v.at(k).iter().fold(zero, |m, x| m.max(x.abs()));
            }
            ratio = ratio.max(b.bound_ratio());
        }
        Ok((zero, ratio))
    })?;
    let linear = Model::new(model.n(), model.nu(), model.dt(), model.forcing().clone())?.without_nonlinearity();
    let traj = linear.sample_path(w0, 1.0, seed, stream_id(TAG_TRAJECTORY, 0))?;
    let lin = Linearization::new(&linear, &traj);
    let mut forced = vec![0.0; linear.dim()];
    for (i, m) in linear.forcing().modes().iter().enumerate() {
        forced[linear.lattice().index_of(*m).expect("forcing mode in truncation")] = 1.0 + 0.25 * i as f64;
    }
    let mut cancellation = Vec::new();
    for &b in betas {
        let block = build_control_block(&lin, 0, &forced, b)?;
        let st = propagate_residual(&lin, &block, &forced, true)?;
        let curve = st.curve.expect("curve requested");
        cancellation.push((b, norm(&curve[s / 2]) / norm(&forced)));
    }
    Ok(ControlCheck {
        paths,
        second_half_max: per.iter().map(|p| p.0).fold(0.0, f64::max),
        max_bound_ratio: per.iter().map(|p| p.1).fold(0.0, f64::max),
        cancellation,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityCheck {
    pub replicas: usize,
    pub mode: Mode,
    pub beta: f64,
    /// `E[F δ(v)]`.
    pub lhs: Estimate,
    /// `E[⟨DF, v⟩]` by a noise-bump central difference with `v` held fixed.
    pub rhs: Estimate,
    /// `E[⟨DF, v⟩]` through the linearization, `⟨e, A v⟩`.
    pub rhs_linearized: Estimate,
    /// Paired `F δ(v) - ⟨DF, v⟩`.
    pub paired: Estimate,
    /// Deterministic `v`: variance of `δ(v)` and `‖v‖²_{L²}`.
    pub deterministic_variance: Estimate,
    pub deterministic_norm2: f64,
    pub deterministic_mean: Estimate,
}

impl DualityCheck {
    pub fn passes(&self, k: f64) -> bool {
        self.lhs.agrees_with(&self.rhs, k) && self.deterministic_variance.within(self.deterministic_norm2, k)
    }
}

/// Skorokhod integration by parts `E[F δ(v)] = E[⟨DF, v⟩]` with
/// `F = ⟨e_mode, w_1⟩` and `v` the anticipating block control built from
/// `e_mode` on `[0, 1]`; and `Var δ(v) = ‖v‖²` for a deterministic `v`.
pub fn duality_check(model: &Model, w0: &VorticityField, mode: Mode, beta: f64, replicas: usize, h: f64, seed: u64) -> Result<DualityCheck> {
    let idx = model
        .lattice()
        .index_of(mode)
        .ok_or_else(|| Error::Configuration(format!("mode {mode} lies outside the truncation")))?;
    let steps = model.steps_per_unit()?;
    let d = model.d();
    let dt = model.dt();
    let mut e = vec![0.0; model.dim()];
    e[idx] = 1.0;
    let det = ControlPath::from_values(
        0,
        d,
        dt,
        (0..steps * d).map(|k| (1.0 + (k % d) as f64) * (1.0 + (k / d) as f64 * dt)).collect(),
    );
    let rows = par::try_map_indexed(replicas, |j| -> Result<[f64; 4]> {
        let noise = NoisePath::generate(seed, stream_id(TAG_TRAJECTORY, j as u64), steps, d, dt);
        let traj = model.simulate(w0, noise.clone())?;
        let lin = Linearization::new(model, &traj);
        let proc = build_control_process(&lin, &e, beta, 1)?;
        let delta = skorokhod_integral(&lin, &proc, 0..1)?.value;
        let f = traj.final_state()[idx];
        let v = proc.path();
        let bumped = |sign: f64| -> Result<f64> {
            let mut inc = noise.increments().to_vec();
            axpy(sign * h * dt, v.values(), &mut inc[..steps * d]);
            let p = NoisePath::from_increments(dt, d, inc);
            Ok(model.simulate(w0, p)?.final_state()[idx])
        };
        let fd = (bumped(1.0)? - bumped(-1.0)?) / (2.0 * h);
        let lin_v = lin.apply_a(0, steps, &v)?[idx];
        let det_delta: f64 = det.values().iter().zip(noise.increments()).map(|(a, b)| a * b).sum();
        Ok([f * delta, fd, lin_v, det_delta])
    })?;
    let col = |c: usize| -> Vec<f64> { rows.iter().map(|r| r[c]).collect() };
    let lhs = Estimate::from_samples(&col(0));
    let rhs = Estimate::from_samples(&col(1));
    let paired: Vec<f64> = rows.iter().map(|r| r[0] - r[1]).collect();
    let dd = col(3);
    Ok(DualityCheck {
        replicas,
        mode,
        beta,
        lhs,
        rhs,
        rhs_linearized: Estimate::from_samples(&col(2)),
        paired: Estimate::from_samples(&paired),
        deterministic_variance: Estimate::variance_of(&dd),
        deterministic_norm2: det.l2_inner(&det),
        deterministic_mean: Estimate::from_samples(&dd),
    })
}

/// `|a - b| / sqrt(se_a² + se_b²)`.
pub fn z_score(a: &Estimate, b: &Estimate) -> f64 {
    (a.mean - b.mean).abs() / combined_se(a.stderr, b.stderr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::ForcingSet;

    #[test]
    fn tangent_orders_small() {
        let m = Model::new(4, 0.1, 1.0 / 32.0, ForcingSet::standard()).unwrap();
        let w0 = crate::fk::sample_ball(&m, 2.0, 3, 0);
        let c = tangent_check(&m, &w0, 0.5, 3, &[1e-2, 1e-3, 1e-4], 5).unwrap();
        assert!(c.passes(1.9, 2.5, 1e-8), "{c:?}");
    }

    #[test]
    fn matrix_invariants_small() {
        let m = Model::new(3, 0.1, 1.0 / 16.0, ForcingSet::standard()).unwrap();
        let w0 = crate::fk::sample_ball(&m, 1.0, 3, 0);
        let c = malliavin_matrix_check(&m, &w0, 0.5, &[1e-4, 1e-1], 3, 2).unwrap();
        assert!(c.passes(1e-8), "{c:?}");
    }

    #[test]
    fn control_structure_small() {
        let m = Model::new(3, 0.1, 1.0 / 16.0, ForcingSet::standard()).unwrap();
        let w0 = m.spectral().zeros();
        let c = control_check(&m, &w0, 1e-2, 2, 3, &[1e-2, 1e-5, 1e-8], 4).unwrap();
        assert!(c.passes(1e-6, 1e-6), "{c:?}");
    }

    #[test]
    fn duality_linear_small() {
        let m = Model::new(3, 0.1, 1.0 / 8.0, ForcingSet::standard()).unwrap().without_nonlinearity();
        let w0 = m.spectral().zeros();
        let c = duality_check(&m, &w0, Mode::new(1, 0), 1e-2, 2000, 1e-4, 9).unwrap();
        // F is linear in the noise here, so the bump is exact
        assert!((c.rhs.mean - c.rhs_linearized.mean).abs() < 1e-8, "{c:?}");
        assert!(c.passes(3.0), "{c:?}");
    }
}
