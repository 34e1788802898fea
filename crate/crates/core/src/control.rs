//! Blockwise control that transfers an initial perturbation into a noise
//! variation, its residual, Malliavin derivatives of the construction, the
//! discrete Skorokhod integral, and the three-term gradient decomposition.
//!
//! Block `n` covers the steps `[nS, (n+1)S)` with `S = 1/dt`; its first half
//! ends at `mid = nS + S/2`. On the first half the control is
//!
//! ```text
//! v_k = G_k^T x,   x = (M + βI)^{-1} y,   y = J_{n,mid} ρ_n,
//! ```
//!
//! with `G_k = J_{k+1,mid}(C ⊙ Q)` and `M = dt Σ_k G_k G_k^T`, and it is zero on
//! the second half. The residual obeys `r_{k+1} = S_k r_k - dt (C⊙Q) v_k`,
//! so `r_k = J_{0,k} ξ - A_{0,k} v` along the whole path.

use serde::Serialize;

use crate::dynamics::{Model, NoisePath, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::field::{axpy, dot, norm};
use crate::observable::Observable;
use crate::par;
use crate::rng::{stream_id, TAG_TRAJECTORY};
use crate::spectral::FrozenState;
use crate::stats::{bootstrap, ols, percentile_interval, Estimate, Interval};
use crate::variational::{operator_norm, ControlPath, Linearization, LowRankSolver, NoiseResponses};
use crate::VorticityField;

/// Step indices of one unit block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockLayout {
    pub n: usize,
    pub start: usize,
    pub mid: usize,
    pub end: usize,
}

pub fn block_layout(model: &Model, n: usize) -> Result<BlockLayout> {
    let s = model.steps_per_unit()?;
    Ok(BlockLayout {
        n,
        start: n * s,
        mid: n * s + s / 2,
        end: (n + 1) * s,
    })
}

/// The control on one block together with the operators that built it.
#[derive(Clone)]
pub struct ControlBlock {
    pub layout: BlockLayout,
    pub beta: f64,
    /// Control on `[start, end)`; zero on `[mid, end)`.
    pub v: ControlPath,
    /// `J_{n,mid} ρ_n`.
    pub y: Vec<f64>,
    /// `(M + βI)^{-1} y`.
    pub x: Vec<f64>,
    responses: NoiseResponses,
    solver: std::sync::Arc<LowRankSolver>,
}

impl ControlBlock {
    pub fn responses(&self) -> &NoiseResponses {
        &self.responses
    }

    pub fn solver(&self) -> &LowRankSolver {
        &self.solver
    }

    /// `‖v‖_{L²} β^{1/2} / ‖y‖`; at most 1 by construction.
    pub fn bound_ratio(&self) -> f64 {
        let ny = norm(&self.y);
        if ny == 0.0 {
            0.0
        } else {
            self.v.l2_norm() * self.beta.sqrt() / ny
        }
    }

    /// Control restricted to the first half.
    pub fn first_half(&self) -> ControlPath {
        let d = self.v.d();
        let h = self.layout.mid - self.layout.start;
        ControlPath::from_values(self.layout.start, d, self.v.dt(), self.v.values()[..h * d].to_vec())
    }
}

/// Noise responses over the first half of block `n`.
pub fn block_responses(lin: &Linearization<'_>, n: usize) -> Result<NoiseResponses> {
    let lay = block_layout(lin.model(), n)?;
    lin.noise_responses(lay.start, lay.mid)
}

/// Control for block `n` from precomputed first-half responses.
pub fn control_from_responses(lin: &Linearization<'_>, responses: &NoiseResponses, rho_n: &[f64], beta: f64) -> Result<ControlBlock> {
    let s = lin.model().steps_per_unit()?;
    let n = responses.s / s;
    let lay = block_layout(lin.model(), n)?;
    let solver = responses.regularized(beta)?;
    let y = lin.evolve_j(lay.start, lay.mid, rho_n)?;
    let x = solver.solve(&y);
    let mut v = ControlPath::zeros(lay.start, lay.end - lay.start, lin.d(), lin.dt());
    let first = responses.adjoint(&x);
    let h = lay.mid - lay.start;
    v.values_mut()[..h * lin.d()].copy_from_slice(first.values());
    Ok(ControlBlock {
        layout: lay,
        beta,
        v,
        y,
        x,
        responses: responses.clone(),
        solver: std::sync::Arc::new(solver),
    })
}

pub fn build_control_block(lin: &Linearization<'_>, n: usize, rho_n: &[f64], beta: f64) -> Result<ControlBlock> {
    if !(beta > 0.0) {
        return Err(Error::Validation(format!("regularization β must be positive, got {beta}")));
    }
    let lay = block_layout(lin.model(), n)?;
    if lay.end > lin.steps() {
        return Err(Error::Range(format!("block {n} extends beyond the trajectory horizon")));
    }
    let responses = block_responses(lin, n)?;
    control_from_responses(lin, &responses, rho_n, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    /// Block index the residual belongs to (`ρ_n`).
    pub n: usize,
    pub rho: Vec<f64>,
    /// `ρ` at every step of the block just traversed, `start..=end`.
    pub curve: Option<Vec<Vec<f64>>>,
}

/// Advances `ρ_n` through block `n` under its control.
pub fn propagate_residual(lin: &Linearization<'_>, block: &ControlBlock, rho_n: &[f64], keep_curve: bool) -> Result<ResidualState> {
    let lay = block.layout;
    let dim = lin.dim();
    let mut r = rho_n.to_vec();
    let mut tmp = vec![0.0; dim];
    let mut curve = keep_curve.then(|| vec![r.clone()]);
    for k in lay.start..lay.end {
        lin.tangent_step(k, &r, &mut tmp);
        lin.model().inject_add(block.v.at(k), -lin.dt(), &mut tmp);
        std::mem::swap(&mut r, &mut tmp);
        if let Some(c) = curve.as_mut() {
            c.push(r.clone());
        }
    }
    Ok(ResidualState {
        n: lay.n + 1,
        rho: r,
        curve,
    })
}

/// The control on `blocks` consecutive unit blocks starting from `ρ_0 = ξ`.
#[derive(Clone)]
pub struct ControlProcess {
    pub beta: f64,
    pub blocks: Vec<ControlBlock>,
    /// `ρ_0 .. ρ_T`.
    pub rho: Vec<Vec<f64>>,
    /// Residual at every step `0..=T S`.
    pub curve: Vec<Vec<f64>>,
}

impl ControlProcess {
    /// The whole control as one path on `[0, T S)`.
    pub fn path(&self) -> ControlPath {
        let first = &self.blocks[0].v;
        let mut vals = Vec::new();
        for b in &self.blocks {
            vals.extend_from_slice(b.v.values());
        }
        ControlPath::from_values(0, first.d(), first.dt(), vals)
    }

    pub fn rho_norms(&self) -> Vec<f64> {
        self.rho.iter().map(|r| norm(r)).collect()
    }
}

pub fn build_control_process(lin: &Linearization<'_>, xi: &[f64], beta: f64, blocks: usize) -> Result<ControlProcess> {
    let mut rho = vec![xi.to_vec()];
    let mut curve = vec![xi.to_vec()];
    let mut out = Vec::with_capacity(blocks);
    for n in 0..blocks {
        let b = build_control_block(lin, n, &rho[n], beta)?;
        let st = propagate_residual(lin, &b, &rho[n], true)?;
        curve.extend(st.curve.unwrap().into_iter().skip(1));
        rho.push(st.rho);
        out.push(b);
    }
    Ok(ControlProcess {
        beta,
        blocks: out,
        rho,
        curve,
    })
}

/// `‖ρ_n‖` for `n = 0..=blocks` at each β, sharing the noise responses of
/// every block across the sweep.
pub fn residual_norms_sweep(lin: &Linearization<'_>, xi: &[f64], betas: &[f64], blocks: usize) -> Result<Vec<Vec<f64>>> {
    let mut rho: Vec<Vec<f64>> = vec![xi.to_vec(); betas.len()];
    let mut norms: Vec<Vec<f64>> = vec![vec![norm(xi)]; betas.len()];
    for n in 0..blocks {
        let resp = block_responses(lin, n)?;
        for (j, &beta) in betas.iter().enumerate() {
            let b = control_from_responses(lin, &resp, &rho[j], beta)?;
            let st = propagate_residual(lin, &b, &rho[j], false)?;
            norms[j].push(norm(&st.rho));
            rho[j] = st.rho;
        }
    }
    Ok(norms)
}

/// Largest excess of the pathwise residual-curve bound
/// `‖ρ_t‖ ≤ ‖J_{n,t} ρ_n‖ + ‖A_{n,t}‖ β^{-1/2} ‖J_{n,mid} ρ_n‖` over the first
/// half of a block, relative to the right-hand side (≤ 0 when it holds).
pub fn residual_curve_bound_excess(lin: &Linearization<'_>, block: &ControlBlock, rho_n: &[f64]) -> Result<f64> {
    let lay = block.layout;
    let st = propagate_residual(lin, block, rho_n, true)?;
    let curve = st.curve.unwrap();
    let jr = lin.evolve_j_curve(lay.start, lay.mid, rho_n)?;
    let ny = norm(&block.y);
    let mut worst = f64::NEG_INFINITY;
    for t in lay.start + 1..=lay.mid {
        let steps = t - lay.start;
        let d = lin.d();
        let a_norm = operator_norm(
            steps * d,
            |v: &[f64]| {
                let p = ControlPath::from_values(lay.start, d, lin.dt(), v.to_vec());
                lin.apply_a(lay.start, t, &p).unwrap()
            },
            |xi: &[f64]| {
                // adjoint with respect to the plain Euclidean pairing of the
                // coefficient vector is dt * A*
                let mut v = lin.apply_a_star(lay.start, t, xi).unwrap().values().to_vec();
                v.iter_mut().for_each(|x| *x *= lin.dt());
                v
            },
            60,
        ) / lin.dt().sqrt();
        let lhs = norm(&curve[steps]);
        let rhs = norm(&jr[steps]) + a_norm * ny / block.beta.sqrt();
        worst = worst.max((lhs - rhs) / rhs.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// `δw_m = J_{r+1,m} q_i` for `m` in `from..=to` (zero for `m ≤ r`).
fn bump_response(lin: &Linearization<'_>, r: usize, i: usize, from: usize, to: usize) -> Vec<Option<Vec<f64>>> {
    let dim = lin.dim();
    let (idx, gain) = lin.model().injection_column(i);
    let mut out = Vec::with_capacity(to - from + 1);
    let mut p: Option<Vec<f64>> = None;
    for m in from..=to {
        if m == r + 1 {
            let mut q = vec![0.0; dim];
            q[idx] = gain;
            p = Some(q);
        } else if let Some(prev) = p.as_ref() {
            let mut next = vec![0.0; dim];
            lin.tangent_step(m - 1, prev, &mut next);
            p = Some(next);
        } else if m > r + 1 {
            // started before `from`
            let q0 = {
                let mut q = vec![0.0; dim];
                q[idx] = gain;
                q
            };
            p = Some(lin.evolve_j(r + 1, m, &q0).unwrap());
        }
        out.push(p.clone());
    }
    out
}

/// `δS_m a = -dt E ⊙ B̃(δw_m, a)`, added into `out`.
fn add_delta_s(lin: &Linearization<'_>, dw: &[f64], a: &[f64], out: &mut [f64]) {
    let sp = lin.model().spectral();
    let fd = sp.freeze_coefs(dw);
    let mut b = vec![0.0; a.len()];
    sp.tilde_b_frozen(&fd, a, &mut b);
    let e = lin.model().decay();
    let dt = lin.dt();
    for j in 0..a.len() {
        out[j] -= dt * e[j] * b[j];
    }
}

/// Derivative of `J_{a,b} ξ` under the noise bump whose state response is
/// `dw[m - a]` (for `m` in `a..b`).
fn bumped_j(lin: &Linearization<'_>, a: usize, b: usize, xi: &[f64], dw: &[Option<Vec<f64>>]) -> Vec<f64> {
    let dim = lin.dim();
    let mut x = xi.to_vec();
    let mut chi = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for m in a..b {
        lin.tangent_step(m, &chi, &mut tmp);
        if let Some(d) = &dw[m - a] {
            add_delta_s(lin, d, &x, &mut tmp);
        }
        std::mem::swap(&mut chi, &mut tmp);
        lin.tangent_step(m, &x, &mut tmp);
        std::mem::swap(&mut x, &mut tmp);
    }
    chi
}

/// `D_r^i (J_{s,t} ξ)`: the derivative of the tangent flow with respect to
/// the noise increment of direction `i` on step `r`.
pub fn malliavin_derivative_j(lin: &Linearization<'_>, r: usize, i: usize, s: usize, t: usize, xi: &[f64]) -> Result<Vec<f64>> {
    if i >= lin.d() {
        return Err(Error::Range(format!("noise direction {i} out of range (d = {})", lin.d())));
    }
    if s > t || t > lin.steps() || r >= lin.steps() {
        return Err(Error::Range("step indices outside the trajectory".into()));
    }
    let dim = lin.dim();
    if r + 1 >= t {
        return Ok(vec![0.0; dim]);
    }
    let (idx, gain) = lin.model().injection_column(i);
    let mut q = vec![0.0; dim];
    q[idx] = gain;
    if r + 1 >= s {
        let jx = lin.evolve_j(s, r + 1, xi)?;
        lin.evolve_j2(r + 1, t, &q, &jx)
    } else {
        let jq = lin.evolve_j(r + 1, s, &q)?;
        lin.evolve_j2(s, t, &jq, xi)
    }
}

/// `D_r^i v` on the first half of the block, for `r` inside the block
/// (`ρ_n` does not depend on such increments). Forward-mode
/// differentiation of `v = G^T (M + βI)^{-1} J ρ_n` through all three
/// factors.
pub fn malliavin_derivative_v(lin: &Linearization<'_>, block: &ControlBlock, rho_n: &[f64], r: usize, i: usize) -> Result<ControlPath> {
    let lay = block.layout;
    if r < lay.start || r >= lay.end {
        return Err(Error::Range(format!("step {r} lies outside block {}", lay.n)));
    }
    if i >= lin.d() {
        return Err(Error::Range(format!("noise direction {i} out of range (d = {})", lin.d())));
    }
    let d = lin.d();
    let h = lay.mid - lay.start;
    let dt = lin.dt();
    let dw = bump_response(lin, r, i, lay.start, lay.mid);
    let g = block.responses();
    // δG_m e_j for every m in the first half
    let mut dg = vec![vec![0.0; lin.dim()]; h * d];
    for m in lay.start..lay.mid {
        for j in 0..d {
            let (idx, gain) = lin.model().injection_column(j);
            let mut q = vec![0.0; lin.dim()];
            q[idx] = gain;
            if m + 1 < lay.mid {
                dg[(m - lay.start) * d + j] = bumped_j(lin, m + 1, lay.mid, &q, &dw[m + 1 - lay.start..]);
            }
        }
    }
    let dy = bumped_j(lin, lay.start, lay.mid, rho_n, &dw);
    let v = block.first_half();
    // δM x = dt Σ_m [δG_m v_m + G_m (δG_m^T x)]
    let mut dmx = vec![0.0; lin.dim()];
    for m in lay.start..lay.mid {
        for j in 0..d {
            let col = &dg[(m - lay.start) * d + j];
            axpy(dt * v.at(m)[j], col, &mut dmx);
            axpy(dt * dot(col, &block.x), g.column(m, j), &mut dmx);
        }
    }
    let rhs: Vec<f64> = dy.iter().zip(&dmx).map(|(a, b)| a - b).collect();
    let dx = block.solver().solve(&rhs);
    let gdx = g.adjoint(&dx);
    let mut out = ControlPath::zeros(lay.start, h, d, dt);
    for m in lay.start..lay.mid {
        for j in 0..d {
            out.at_mut(m)[j] = dot(&dg[(m - lay.start) * d + j], &block.x) + gdx.at(m)[j];
        }
    }
    Ok(out)
}

/// `Σ_i ∂v_k^i / ∂ΔW_k^i` for every `k` in the first half of the block.
///
/// `curve` is the residual on `start..=end` of this block. The trace for
/// `(k, i)` collapses to one forward sweep for the bump response `p`, one for
/// the residual sensitivity `s`, and one for the linear response `ζ` to the
/// control `c = G^T (M+βI)^{-1} g_{k,i}`:
///
/// ```text
/// tr_{k,i} = -dt Σ_{m>k} (E λ_{m+1}) · B̃(p_m, p_m - ζ_m) + z · s_mid,
/// ```
///
/// with `λ_m = J_{m,mid}^T x` and `z = (M+βI)^{-1} g_{k,i}`.
pub fn trace_correction(lin: &Linearization<'_>, block: &ControlBlock, curve: &[Vec<f64>]) -> Result<Vec<f64>> {
    let lay = block.layout;
    let h = lay.mid - lay.start;
    let d = lin.d();
    let dim = lin.dim();
    let dt = lin.dt();
    let sp = lin.model().spectral();
    let e = lin.model().decay();
    if !lin.model().is_nonlinear() {
        return Ok(vec![0.0; h]);
    }
    // E ⊙ λ_{m+1} for m in start..mid
    let mut elam = vec![vec![0.0; dim]; h];
    let mut lam = block.x.clone();
    let mut tmp = vec![0.0; dim];
    for m in (lay.start..lay.mid).rev() {
        elam[m - lay.start] = lam.iter().zip(e).map(|(a, b)| a * b).collect();
        lin.tangent_step_adjoint(m, &lam, &mut tmp);
        std::mem::swap(&mut lam, &mut tmp);
    }
    let frozen_r: Vec<FrozenState> = (lay.start..lay.mid).map(|m| sp.freeze_coefs(&curve[m - lay.start])).collect();
    let g = block.responses();
    let per_k = par::map_indexed(h, |kk| {
        let k = lay.start + kk;
        let mut trace = 0.0;
        let mut bt = vec![0.0; dim];
        let mut next = vec![0.0; dim];
        for i in 0..d {
            let z = block.solver().solve(g.column(k, i));
            let c = g.adjoint(&z);
            // ζ_m for m in start..mid
            let mut zeta = vec![0.0; dim];
            let mut zetas = Vec::with_capacity(h);
            for m in lay.start..lay.mid {
                zetas.push(zeta.clone());
                lin.tangent_step(m, &zeta, &mut next);
                lin.model().inject_add(c.at(m), dt, &mut next);
                std::mem::swap(&mut zeta, &mut next);
            }
            let (idx, gain) = lin.model().injection_column(i);
            let mut p = vec![0.0; dim];
            p[idx] = gain;
            let mut s = vec![0.0; dim];
            let mut term = 0.0;
            for m in k + 1..lay.mid {
                let fp = sp.freeze_coefs(&p);
                let pz: Vec<f64> = p.iter().zip(&zetas[m - lay.start]).map(|(a, b)| a - b).collect();
                let fpz = sp.freeze_coefs(&pz);
                sp.tilde_b_pair(&fp, &fpz, &mut bt);
                term -= dt * dot(&elam[m - lay.start], &bt);
                // s_{m+1} = S_m s_m - dt E ⊙ B̃(p_m, r_m)
                sp.tilde_b_pair(&fp, &frozen_r[m - lay.start], &mut bt);
                lin.tangent_step(m, &s, &mut next);
                for j in 0..dim {
                    next[j] -= dt * e[j] * bt[j];
                }
                std::mem::swap(&mut s, &mut next);
                lin.tangent_step(m, &p, &mut next);
                std::mem::swap(&mut p, &mut next);
            }
            trace += term + dot(&z, &s);
        }
        trace
    });
    Ok(per_k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkorokhodValue {
    /// `Σ_k v_k · ΔW_k`.
    pub ito: f64,
    /// `dt Σ_k tr D_{t_k} v_k`.
    pub correction: f64,
    pub value: f64,
}

/// `δ(v) = Σ_k v_k·ΔW_k - dt Σ_k Σ_i ∂v_k^i/∂ΔW_k^i` over the given blocks.
pub fn skorokhod_integral(lin: &Linearization<'_>, process: &ControlProcess, blocks: std::ops::Range<usize>) -> Result<SkorokhodValue> {
    let noise = lin.trajectory().noise();
    let mut ito = 0.0;
    let mut correction = 0.0;
    for n in blocks {
        let b = process
            .blocks
            .get(n)
            .ok_or_else(|| Error::Range(format!("block {n} is not part of the control process")))?;
        let lay = b.layout;
        for k in lay.start..lay.mid {
            ito += dot(b.v.at(k), noise.increment(k));
        }
        let tr = trace_correction(lin, b, &process.curve[lay.start..=lay.end])?;
        correction += lin.dt() * tr.iter().sum::<f64>();
    }
    Ok(SkorokhodValue {
        ito,
        correction,
        value: ito - correction,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub beta: f64,
    /// `E‖ρ_n‖⁴` for `n = 0..=n_max`.
    pub moments: Vec<Estimate>,
    /// `exp` of the least-squares slope of `log E‖ρ_n‖⁴` in `n`.
    pub rate: f64,
    pub rate_ci: Interval,
    /// `E‖ρ_{n_max}‖⁴ / E‖ρ_0‖⁴`.
    pub final_ratio: f64,
    pub final_ratio_ci: Interval,
    pub decays: bool,
    /// Largest pathwise `‖v‖ β^{1/2} / ‖J ρ_n‖` seen (≤ 1).
    pub max_bound_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayTable {
    pub trajectories: usize,
    pub n_max: usize,
    pub rows: Vec<DecayRow>,
    pub best_beta: f64,
}

impl DecayTable {
    pub fn best(&self) -> &DecayRow {
        self.rows.iter().find(|r| r.beta == self.best_beta).expect("best row exists")
    }
}

fn fitted_rate(means: &[f64]) -> f64 {
    let x: Vec<f64> = (0..means.len()).map(|n| n as f64).collect();
    let y: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    ols(&x, &y).slope.exp()
}

/// Monte-Carlo table of `E‖ρ_n‖⁴` over independent noise paths from `w0`,
/// one row per β.
#[allow(clippy::too_many_arguments)]
pub fn residual_decay_experiment(
    model: &Model,
    w0: &VorticityField,
    xi: &[f64],
    betas: &[f64],
    trajectories: usize,
    n_max: usize,
    seed: u64,
    bootstrap_reps: usize,
) -> Result<DecayTable> {
    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::Validation("β values must be positive".into()));
    }
    let s = model.steps_per_unit()?;
    let samples = par::try_map_indexed(trajectories, |j| -> Result<_> {
        let noise = NoisePath::generate(seed, stream_id(TAG_TRAJECTORY, j as u64), n_max * s, model.d(), model.dt());
        let traj = model.simulate(w0, noise)?;
        let lin = Linearization::new(model, &traj);
        residual_norms_sweep(&lin, xi, betas, n_max)
    })?;
    let mut rows = Vec::with_capacity(betas.len());
    for (bi, &beta) in betas.iter().enumerate() {
        let fourth: Vec<Vec<f64>> = samples.iter().map(|s| s[bi].iter().map(|r| r.powi(4)).collect()).collect();
        let moments: Vec<Estimate> = (0..=n_max)
            .map(|n| Estimate::from_samples(&fourth.iter().map(|f| f[n]).collect::<Vec<_>>()))
            .collect();
        let means: Vec<f64> = moments.iter().map(|m| m.mean).collect();
        let rate = fitted_rate(&means);
        let final_ratio = means[n_max] / means[0];
        let boot_rate = bootstrap(trajectories, bootstrap_reps, seed ^ (bi as u64 + 1), |idx| {
            let m: Vec<f64> = (0..=n_max).map(|n| idx.iter().map(|&j| fourth[j][n]).sum::<f64>() / idx.len() as f64).collect();
            fitted_rate(&m)
        });
        let boot_ratio = bootstrap(trajectories, bootstrap_reps, seed ^ (bi as u64 + 1), |idx| {
            let a: f64 = idx.iter().map(|&j| fourth[j][n_max]).sum();
            let b: f64 = idx.iter().map(|&j| fourth[j][0]).sum();
            a / b
        });
        let rate_ci = percentile_interval(&boot_rate, 0.95);
        let final_ratio_ci = percentile_interval(&boot_ratio, 0.95);
        rows.push(DecayRow {
            beta,
            moments,
            rate,
            rate_ci,
            final_ratio,
            final_ratio_ci,
            decays: rate_ci.hi < 1.0 && final_ratio_ci.hi < 1.0,
            max_bound_ratio: f64::NAN,
        });
    }
    let best_beta = rows
        .iter()
        .min_by(|a, b| a.rate.total_cmp(&b.rate))
        .map(|r| r.beta)
        .unwrap();
    Ok(DecayTable {
        trajectories,
        n_max,
        rows,
        best_beta,
    })
}

/// `Ξ = exp(dt Σ' V(w_k))` with trapezoid weights.
pub fn fk_weight(lin_traj: &TrajectoryRecord, v: &Observable) -> f64 {
    let k = lin_traj.steps();
    let dt = lin_traj.dt();
    let mut acc = 0.0;
    for j in 0..=k {
        let wgt = if j == 0 || j == k { 0.5 } else { 1.0 };
        acc += wgt * v.eval(lin_traj.state(j));
    }
    if k == 0 {
        acc = 0.0;
    }
    (dt * acc).exp()
}

/// Per-replica terms of the gradient decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientSample {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    /// `Ξ ψ Σ' ∇V · J ξ dt + Ξ ∇ψ · J ξ`.
    pub pathwise: f64,
    /// `(Ξψ(w + hξ) - Ξψ(w - hξ)) / 2h` with the same noise.
    pub finite_difference: f64,
}

impl GradientSample {
    pub fn total(&self) -> f64 {
        self.i1 + self.i2 + self.i3
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientRecord {
    pub v: String,
    pub psi: String,
    pub t: f64,
    pub replicas: usize,
    pub i1: Estimate,
    pub i2: Estimate,
    pub i3: Estimate,
    pub total: Estimate,
    pub pathwise: Estimate,
    pub finite_difference: Estimate,
    /// Paired difference `total - finite_difference`.
    pub difference: Estimate,
    pub consistent: bool,
}

/// One replica: terms for several `(V, ψ)` pairs on the same noise path.
#[allow(clippy::too_many_arguments)]
pub fn gradient_replica(
    model: &Model,
    w: &VorticityField,
    xi: &[f64],
    pairs: &[(Observable, Observable)],
    blocks: usize,
    beta: f64,
    h: f64,
    noise: NoisePath,
) -> Result<Vec<GradientSample>> {
    let traj = model.simulate(w, noise.clone())?;
    let lin = Linearization::new(model, &traj);
    let k_end = traj.steps();
    let dt = model.dt();
    let process = build_control_process(&lin, xi, beta, blocks)?;
    let delta = skorokhod_integral(&lin, &process, 0..blocks)?.value;
    let jxi = lin.evolve_j_curve(0, k_end, xi)?;
    let w_plus = VorticityField::from_coefficients(w.truncation(), w.coefficients().iter().zip(xi).map(|(a, b)| a + h * b).collect())?;
    let w_minus = VorticityField::from_coefficients(w.truncation(), w.coefficients().iter().zip(xi).map(|(a, b)| a - h * b).collect())?;
    let tp = model.simulate(&w_plus, noise.clone())?;
    let tm = model.simulate(&w_minus, noise)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (v, psi) in pairs {
        let xiw = fk_weight(&traj, v);
        let wt = traj.final_state();
        let f = xiw * psi.eval(wt);
        let mut i2 = 0.0;
        let mut path_v = 0.0;
        for j in 0..=k_end {
            let wgt = dt * if j == 0 || j == k_end { 0.5 } else { 1.0 };
            i2 += wgt * v.directional(traj.state(j), &process.curve[j]);
            path_v += wgt * v.directional(traj.state(j), &jxi[j]);
        }
        let i3 = xiw * psi.directional(wt, &process.curve[k_end]);
        let pathwise = f * path_v + xiw * psi.directional(wt, &jxi[k_end]);
        let fp = fk_weight(&tp, v) * psi.eval(tp.final_state());
        let fm = fk_weight(&tm, v) * psi.eval(tm.final_state());
        out.push(GradientSample {
            i1: f * delta,
            i2: f * i2,
            i3,
            pathwise,
            finite_difference: (fp - fm) / (2.0 * h),
        });
    }
    Ok(out)
}

/// Monte-Carlo gradient decomposition at horizon `t` (a whole number of
/// blocks) for several `(V, ψ)` pairs sharing one set of replicas.
#[allow(clippy::too_many_arguments)]
pub fn gradient_decomposition(
    model: &Model,
    w: &VorticityField,
    xi: &[f64],
    pairs: &[(Observable, Observable)],
    t: f64,
    replicas: usize,
    beta: f64,
    h: f64,
    seed: u64,
) -> Result<Vec<GradientRecord>> {
    let s = model.steps_per_unit()?;
    let steps = model.steps_for(t)?;
    if steps % s != 0 {
        return Err(Error::Validation(format!("horizon t = {t} must be a whole number of unit blocks")));
    }
    if replicas < 2 {
        return Err(Error::Validation("gradient decomposition needs at least two replicas".into()));
    }
    let blocks = steps / s;
    let samples = par::try_map_indexed(replicas, |j| {
        let noise = NoisePath::generate(seed, stream_id(TAG_TRAJECTORY, j as u64), steps, model.d(), model.dt());
        gradient_replica(model, w, xi, pairs, blocks, beta, h, noise)
    })?;
    let mut out = Vec::with_capacity(pairs.len());
    for (p, (v, psi)) in pairs.iter().enumerate() {
        let col = |f: &dyn Fn(&GradientSample) -> f64| -> Estimate {
            Estimate::from_samples(&samples.iter().map(|s| f(&s[p])).collect::<Vec<_>>())
        };
        let difference = col(&|s| s.total() - s.finite_difference);
        out.push(GradientRecord {
            v: v.name.clone(),
            psi: psi.name.clone(),
            t,
            replicas,
            i1: col(&|s| s.i1),
            i2: col(&|s| s.i2),
            i3: col(&|s| s.i3),
            total: col(&|s| s.total()),
            pathwise: col(&|s| s.pathwise),
            finite_difference: col(&|s| s.finite_difference),
            consistent: difference.within(0.0, 3.0),
            difference,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::ForcingSet;
    use crate::lattice::Mode;
    use crate::rng::{normals, stream_rng};

    fn setup(n: u32, dt: f64, units: usize, nonlinear: bool, seed: u64) -> (Model, TrajectoryRecord) {
        let mut m = Model::new(n, 0.1, dt, ForcingSet::standard()).unwrap();
        if !nonlinear {
            m = m.without_nonlinearity();
        }
        let mut rng = stream_rng(seed, 1);
        let w0 = VorticityField::from_coefficients(n, normals(&mut rng, m.dim(), 0.3)).unwrap();
        let steps = m.steps_for(units as f64).unwrap();
        let traj = m.simulate(&w0, NoisePath::generate(seed, 2, steps, m.d(), dt)).unwrap();
        (m, traj)
    }

    fn unit(dim: usize, seed: u64) -> Vec<f64> {
        let v = normals(&mut stream_rng(seed, 7), dim, 1.0);
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn second_half_is_zero_and_bound_holds() {
        let (m, traj) = setup(4, 1.0 / 16.0, 2, true, 1);
        let lin = Linearization::new(&m, &traj);
        let xi = unit(m.dim(), 2);
        let p = build_control_process(&lin, &xi, 1e-2, 2).unwrap();
        for b in &p.blocks {
            for k in b.layout.mid..b.layout.end {
                assert!(b.v.at(k).iter().all(|x| *x == 0.0));
            }
            assert!(b.bound_ratio() <= 1.0 + 1e-12);
        }
        let zero = build_control_block(&lin, 0, &vec![0.0; m.dim()], 1e-2).unwrap();
        assert!(zero.v.is_zero());
        assert!(build_control_block(&lin, 0, &xi, 0.0).is_err());
    }

    #[test]
    fn residual_is_tangent_minus_response() {
        let (m, traj) = setup(4, 1.0 / 16.0, 2, true, 3);
        let lin = Linearization::new(&m, &traj);
        let xi = unit(m.dim(), 4);
        let p = build_control_process(&lin, &xi, 1e-2, 2).unwrap();
        let path = p.path();
        for k in [5, 16, 27, 32] {
            let j = lin.evolve_j(0, k, &xi).unwrap();
            let a = lin.apply_a(0, k, &path).unwrap();
            let want: Vec<f64> = j.iter().zip(&a).map(|(x, y)| x - y).collect();
            let err: f64 = want.iter().zip(&p.curve[k]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12 * norm(&want).max(1.0), "k = {k}: {err}");
        }
    }

    #[test]
    fn huge_beta_gives_pure_transport() {
        let (m, traj) = setup(4, 1.0 / 16.0, 1, true, 5);
        let lin = Linearization::new(&m, &traj);
        let xi = unit(m.dim(), 6);
        let b = build_control_block(&lin, 0, &xi, 1e12).unwrap();
        let st = propagate_residual(&lin, &b, &xi, false).unwrap();
        let j = lin.evolve_j(0, 16, &xi).unwrap();
        let err: f64 = j.iter().zip(&st.rho).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn derivative_of_j_vanishes_when_linear() {
        let (m, traj) = setup(3, 1.0 / 16.0, 1, false, 7);
        let lin = Linearization::new(&m, &traj);
        let xi = unit(m.dim(), 8);
        assert!(norm(&malliavin_derivative_j(&lin, 3, 1, 0, 16, &xi).unwrap()) == 0.0);
        let (m2, traj2) = setup(3, 1.0 / 16.0, 1, true, 7);
        let lin2 = Linearization::new(&m2, &traj2);
        assert!(norm(&malliavin_derivative_j(&lin2, 15, 1, 0, 16, &xi).unwrap()) == 0.0);
        assert!(malliavin_derivative_j(&lin2, 3, 9, 0, 16, &xi).is_err());
    }

    /// Re-simulates with one increment bumped and rebuilds the whole
    /// construction: the oracle for every noise derivative.
    fn bumped(m: &Model, traj: &TrajectoryRecord, r: usize, i: usize, h: f64) -> TrajectoryRecord {
        let mut noise = traj.noise().clone();
        noise.increment_mut(r)[i] += h;
        m.simulate(&traj.initial(), noise).unwrap()
    }

    #[test]
    fn derivative_of_j_matches_noise_bump() {
        let (m, traj) = setup(3, 1.0 / 16.0, 1, true, 9);
        let lin = Linearization::new(&m, &traj);
        let xi = unit(m.dim(), 10);
        for (r, s, t) in [(2usize, 0usize, 16usize), (6, 9, 16)] {
            let d = malliavin_derivative_j(&lin, r, 2, s, t, &xi).unwrap();
            let h = 1e-4;
            let tp = bumped(&m, &traj, r, 2, h);
            let tm = bumped(&m, &traj, r, 2, -h);
            let jp = Linearization::new(&m, &tp).evolve_j(s, t, &xi).unwrap();
            let jm = Linearization::new(&m, &tm).evolve_j(s, t, &xi).unwrap();
            let fd: Vec<f64> = jp.iter().zip(&jm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let err = norm(&fd.iter().zip(&d).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-4 * norm(&fd), "r={r}: {err} vs {}", norm(&fd));
        }
    }

    #[test]
    fn derivative_of_v_matches_noise_bump_and_trace() {
        let (m, traj) = setup(3, 1.0 / 8.0, 1, true, 11);
        let lin = Linearization::new(&m, &traj);
        let xi = unit(m.dim(), 12);
        let beta = 1e-2;
        let block = build_control_block(&lin, 0, &xi, beta).unwrap();
        let h = 1e-5;
        let mut diag = vec![0.0; 4];
        for r in 0..4 {
            for i in 0..4 {
                let dv = malliavin_derivative_v(&lin, &block, &xi, r, i).unwrap();
                let tp = bumped(&m, &traj, r, i, h);
                let tm = bumped(&m, &traj, r, i, -h);
                let vp = build_control_block(&Linearization::new(&m, &tp), 0, &xi, beta).unwrap().first_half();
                let vm = build_control_block(&Linearization::new(&m, &tm), 0, &xi, beta).unwrap().first_half();
                let fd: Vec<f64> = vp.values().iter().zip(vm.values()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                let err = norm(&fd.iter().zip(dv.values()).map(|(a, b)| a - b).collect::<Vec<_>>());
                assert!(err <= 1e-5 * norm(&fd).max(1e-8), "r={r} i={i}: {err} vs {}", norm(&fd));
                diag[r] += dv.at(r)[i];
            }
        }
        assert!(diag.iter().any(|x| x.abs() > 1e-8), "{diag:?}");
        let st = propagate_residual(&lin, &block, &xi, true).unwrap();
        let tr = trace_correction(&lin, &block, st.curve.as_ref().unwrap()).unwrap();
        for r in 0..4 {
            assert!((tr[r] - diag[r]).abs() <= 1e-9 * diag[r].abs().max(1e-6), "{r}: {} vs {}", tr[r], diag[r]);
        }
    }

    #[test]
    fn linear_case_has_no_trace_and_full_cancellation() {
        let (m, traj) = setup(4, 1.0 / 16.0, 1, false, 13);
        let lin = Linearization::new(&m, &traj);
        let mut xi = vec![0.0; m.dim()];
        for mode in m.forcing().modes() {
            xi[m.lattice().index_of(*mode).unwrap()] = 0.5;
        }
        let mut prev = f64::INFINITY;
        for beta in [1e-2, 1e-4, 1e-6, 1e-8] {
            let b = build_control_block(&lin, 0, &xi, beta).unwrap();
            let st = propagate_residual(&lin, &b, &xi, true).unwrap();
            let half = norm(&st.curve.as_ref().unwrap()[8]) / norm(&xi);
            assert!(half < prev);
            prev = half;
            let tr = trace_correction(&lin, &b, st.curve.as_ref().unwrap()).unwrap();
            assert!(tr.iter().all(|t| *t == 0.0));
        }
        assert!(prev < 1e-6, "{prev}");
    }

    #[test]
    fn zero_perturbation_gives_zero_terms() {
        let m = Model::new(3, 0.1, 1.0 / 8.0, ForcingSet::standard()).unwrap();
        let lat = m.lattice().clone();
        let v = Observable::tanh(&lat, Mode::new(1, 0), 0.1, 1.0).unwrap();
        let psi = Observable::bump(&lat, Mode::new(1, 1), 1.0, 1.0).unwrap();
        let w = m.spectral().zeros();
        let xi = vec![0.0; m.dim()];
        let recs = gradient_decomposition(&m, &w, &xi, &[(v, psi)], 1.0, 3, 1e-2, 1e-4, 1).unwrap();
        let r = &recs[0];
        assert_eq!(r.i1.mean, 0.0);
        assert_eq!(r.i2.mean, 0.0);
        assert_eq!(r.i3.mean, 0.0);
    }

    #[test]
    fn linear_gaussian_gradient_is_exact() {
        let m = Model::new(3, 0.1, 1.0 / 8.0, ForcingSet::standard()).unwrap().without_nonlinearity();
        let lat = m.lattice().clone();
        let v = Observable::constant(0.0);
        let psi = Observable::coordinate(&lat, Mode::new(1, 0), 1.0).unwrap();
        let w = m.spectral().zeros();
        let xi = unit(m.dim(), 14);
        let recs = gradient_decomposition(&m, &w, &xi, &[(v, psi.clone())], 1.0, 4, 1e-2, 1e-3, 3).unwrap();
        let r = &recs[0];
        assert_eq!(r.i2.mean, 0.0);
        // ∇ψ · J_{0,t} ξ with J = diag(E^K)
        let e = m.decay();
        let jxi: Vec<f64> = xi.iter().zip(e).map(|(x, a)| x * a.powi(8)).collect();
        let want = psi.directional(w.coefficients(), &jxi);
        assert!((r.pathwise.mean - want).abs() < 1e-14);
        assert!(r.pathwise.stderr < 1e-14);
        assert!((r.finite_difference.mean - want).abs() < 1e-10);
    }
}
