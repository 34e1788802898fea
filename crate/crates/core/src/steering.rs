//! Approximate controllability of the deterministic system: drive `u₀` close
//! to a target with piecewise-constant controls on the forced modes, and
//! estimate hitting frequencies of small balls under the noise.
//!
//! The controlled step is the noise step with increment `ζ dt`, so the
//! control enters exactly as the noise does and the adjoint gradient reuses
//! the tangent/adjoint integrators.

use serde::Serialize;

use crate::dynamics::{Model, NoisePath};
use crate::error::{Error, Result};
use crate::field::{dot, BASIS_NORM2};
use crate::forcing::check_condition_h;
use crate::lattice::Mode;
use crate::par;
use crate::rng::{normals, stream_id, stream_rng, TAG_PAIR, TAG_TRAJECTORY};
use crate::variational::Linearization;
use crate::VorticityField;

pub const ITERATION_CAP: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialGuess {
    Zero,
    /// Gaussian coefficients of standard deviation `scale`.
    Random { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct SteeringProblem {
    #[serde(skip)]
    pub u0: VorticityField,
    /// Target state in vorticity coefficients.
    #[serde(skip)]
    pub target: Vec<f64>,
    pub tolerance: f64,
    pub horizon: f64,
    pub segments: usize,
    pub initial: InitialGuess,
    pub max_iterations: usize,
}

impl SteeringProblem {
    pub fn new(u0: VorticityField, target: Vec<f64>, tolerance: f64) -> Self {
        Self {
            u0,
            target,
            tolerance,
            horizon: 1.0,
            segments: 16,
            initial: InitialGuess::Zero,
            max_iterations: ITERATION_CAP,
        }
    }
}

/// Vorticity coefficients of a velocity field `ε e_m` in mode `m`,
/// normalized so that its velocity `L²` norm is `|amplitude|`.
pub fn mode_target(model: &Model, modes: &[(Mode, f64)]) -> Result<Vec<f64>> {
    let lat = model.lattice();
    let mut w = vec![0.0; model.dim()];
    for &(m, a) in modes {
        let idx = lat
            .index_of(m)
            .ok_or_else(|| Error::Configuration(format!("target mode {m} lies outside the truncation")))?;
        // ‖K(c φ_m)‖² = 2π² c² / |m|²
        w[idx] += a * (lat.norm2(idx) / BASIS_NORM2).sqrt();
    }
    Ok(w)
}

/// `‖K(a - b)‖_{L²}`.
pub fn velocity_distance(model: &Model, a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    model.velocity_norm(&d, 0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct SteeringResult {
    /// `[segment][mode]`.
    pub control: Vec<Vec<f64>>,
    pub distance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gradient vanished or line search failed before reaching the tolerance.
    pub stalled: bool,
    /// Distance after every accepted iteration, starting with the initial guess.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

struct Controlled<'a> {
    model: &'a Model,
    problem: &'a SteeringProblem,
    steps: usize,
    per_segment: usize,
    weight: Vec<f64>,
}

impl<'a> Controlled<'a> {
    fn new(model: &'a Model, problem: &'a SteeringProblem) -> Result<Self> {
        if !(problem.horizon > 0.0) || problem.segments == 0 {
            return Err(Error::Validation("horizon and segment count must be positive".into()));
        }
        if problem.target.len() != model.dim() || problem.u0.len() != model.dim() {
            return Err(Error::Validation("initial state and target must match the truncation".into()));
        }
        let steps = model.steps_for(problem.horizon)?;
        if steps % problem.segments != 0 {
            return Err(Error::Validation(format!(
                "{} steps do not split into {} equal control segments",
                steps, problem.segments
            )));
        }
        let weight = model.lattice().norm2_all().iter().map(|k| BASIS_NORM2 / k).collect();
        Ok(Self {
            model,
            problem,
            steps,
            per_segment: steps / problem.segments,
            weight,
        })
    }

    fn increments(&self, control: &[f64]) -> NoisePath {
        let d = self.model.d();
        let dt = self.model.dt();
        let mut inc = Vec::with_capacity(self.steps * d);
        for k in 0..self.steps {
            let s = k / self.per_segment;
            inc.extend(control[s * d..(s + 1) * d].iter().map(|z| z * dt));
        }
        NoisePath::from_increments(dt, d, inc)
    }

    fn cost(&self, control: &[f64]) -> Result<(f64, Vec<f64>)> {
        let traj = self.model.simulate(&self.problem.u0, self.increments(control))?;
        let wt = traj.final_state().to_vec();
        let r = velocity_distance(self.model, &wt, &self.problem.target);
        Ok((0.5 * r * r, wt))
    }

    fn cost_and_gradient(&self, control: &[f64]) -> Result<(f64, Vec<f64>)> {
        let traj = self.model.simulate(&self.problem.u0, self.increments(control))?;
        let wt = traj.final_state();
        let g: Vec<f64> = wt
            .iter()
            .zip(&self.problem.target)
            .zip(&self.weight)
            .map(|((a, b), w)| w * (a - b))
            .collect();
        let f = 0.5 * dot(&g, &wt.iter().zip(&self.problem.target).map(|(a, b)| a - b).collect::<Vec<_>>());
        let lin = Linearization::new(self.model, &traj);
        let adj = lin.apply_a_star(0, self.steps, &g)?;
        let d = self.model.d();
        let dt = self.model.dt();
        let mut grad = vec![0.0; self.problem.segments * d];
        for k in 0..self.steps {
            let s = k / self.per_segment;
            for (gi, a) in grad[s * d..(s + 1) * d].iter_mut().zip(adj.at(k)) {
                *gi += dt * a;
            }
        }
        Ok((f, grad))
    }
}

/// `½‖u(T) - û‖²` and its gradient in the flattened control coefficients.
pub fn terminal_cost_gradient(model: &Model, problem: &SteeringProblem, control: &[f64]) -> Result<(f64, Vec<f64>)> {
    Controlled::new(model, problem)?.cost_and_gradient(control)
}

pub fn terminal_cost(model: &Model, problem: &SteeringProblem, control: &[f64]) -> Result<f64> {
    Ok(Controlled::new(model, problem)?.cost(control)?.0)
}

/// Gradient descent with Barzilai–Borwein steps safeguarded by Armijo
/// backtracking.
pub fn steer(model: &Model, problem: &SteeringProblem) -> Result<SteeringResult> {
    let sys = Controlled::new(model, problem)?;
    let d = model.d();
    let n = problem.segments * d;
    let mut warnings = Vec::new();
    let h = check_condition_h(model.forcing());
    if !h.condition_h {
        warnings.push(format!("forcing set fails the generation hypothesis: {}", h.reason.unwrap_or_default()));
    }
    let mut x = match &problem.initial {
        InitialGuess::Zero => vec![0.0; n],
        InitialGuess::Random { scale, seed } => normals(&mut stream_rng(*seed, stream_id(TAG_PAIR, u32::MAX as u64)), n, scale * scale),
    };
    let (mut f, mut g) = sys.cost_and_gradient(&x)?;
    let dist = |f: f64| (2.0 * f).max(0.0).sqrt();
    let mut trace = vec![dist(f)];
    let mut converged = dist(f) < problem.tolerance;
    let mut stalled = false;
    let mut iterations = 0;
    let mut alpha = {
        let gg = dot(&g, &g);
        if gg > 0.0 {
            2.0 * f / gg
        } else {
            0.0
        }
    };
    while !converged && iterations < problem.max_iterations {
        let gg = dot(&g, &g);
        if !(gg > f64::MIN_POSITIVE) || !(alpha > 0.0) || !alpha.is_finite() {
            stalled = true;
            break;
        }
        let mut step = alpha;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            match sys.cost(&trial) {
                Ok((ft, _)) if ft <= f - 1e-4 * step * gg => {
                    accepted = Some(trial);
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some(xn) = accepted else {
            stalled = true;
            break;
        };
        let (fn_, gn) = sys.cost_and_gradient(&xn)?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        alpha = if sy > 0.0 { dot(&s, &s) / sy } else { 2.0 * step };
        x = xn;
        f = fn_;
        g = gn;
        iterations += 1;
        trace.push(dist(f));
        converged = dist(f) < problem.tolerance;
    }
    if !converged && !stalled {
        warnings.push(format!("iteration cap {} reached; returning the best control found", problem.max_iterations));
    }
    Ok(SteeringResult {
        control: x.chunks(d).map(|c| c.to_vec()).collect(),
        distance: dist(f),
        iterations,
        converged,
        stalled,
        trace,
        warnings,
    })
}

/// Runs [`steer`] from `starts` random initial guesses of the given scale
/// (seeds `1..=starts`) and keeps the first converged run, or the closest.
pub fn steer_multistart(model: &Model, problem: &SteeringProblem, scale: f64, starts: usize) -> Result<SteeringResult> {
    let mut best: Option<SteeringResult> = None;
    for seed in 1..=starts.max(1) as u64 {
        let mut p = problem.clone();
        p.initial = InitialGuess::Random { scale, seed };
        let r = steer(model, &p)?;
        let done = r.converged;
        if best.as_ref().is_none_or(|b| r.distance < b.distance) {
            best = Some(r);
        }
        if done {
            break;
        }
    }
    Ok(best.expect("at least one start"))
}

#[derive(Debug, Clone, Serialize)]
pub struct HittingCell {
    pub initial: usize,
    pub target: usize,
    pub hits: usize,
    pub trials: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IrreducibilityReport {
    pub radius: f64,
    pub horizon: f64,
    pub cells: Vec<HittingCell>,
    /// Smallest frequency over the grid.
    pub min_frequency: f64,
    pub warnings: Vec<String>,
}

/// Frequency of `‖u_l - û‖ < r` under the noise for every pair of initial
/// state and target; trial `j` uses stream `(TAG_TRAJECTORY, j)` from every
/// initial state.
pub fn irreducibility_probe(model: &Model, initials: &[VorticityField], targets: &[Vec<f64>], radius: f64, horizon: f64, trials: usize, seed: u64) -> Result<IrreducibilityReport> {
    if trials == 0 || initials.is_empty() || targets.is_empty() {
        return Err(Error::Validation("probe needs trials, initial states and targets".into()));
    }
    let steps = model.steps_for(horizon)?;
    let mut cells = Vec::new();
    for (a, u0) in initials.iter().enumerate() {
        let finals = par::try_map_indexed(trials, |j| {
            model.simulate_streaming(u0, steps, seed, stream_id(TAG_TRAJECTORY, j as u64), |_, _| {})
        })?;
        for (b, tgt) in targets.iter().enumerate() {
            let hits = finals.iter().filter(|w| velocity_distance(model, w.coefficients(), tgt) < radius).count();
            cells.push(HittingCell {
                initial: a,
                target: b,
                hits,
                trials,
                frequency: hits as f64 / trials as f64,
            });
        }
    }
    let min_frequency = cells.iter().map(|c| c.frequency).fold(f64::INFINITY, f64::min);
    let mut warnings = Vec::new();
    if cells.iter().all(|c| c.hits == 0) {
        warnings.push("no hits anywhere; increase the radius or the horizon".into());
    }
    Ok(IrreducibilityReport {
        radius,
        horizon,
        cells,
        min_frequency,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::ForcingSet;

    fn model() -> Model {
        Model::new(4, 0.1, 1.0 / 32.0, ForcingSet::standard()).unwrap()
    }

    #[test]
    fn free_flow_target_is_immediate() {
        let m = model();
        let mut w0 = m.spectral().zeros();
        w0.coefficients_mut()[5] = 0.3;
        let free = m.simulate(&w0, NoisePath::zeros(32, m.d(), m.dt())).unwrap();
        let p = SteeringProblem::new(w0, free.final_state().to_vec(), 1e-8);
        let r = steer(&m, &p).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.distance, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn adjoint_gradient_matches_differences() {
        let m = model();
        let w0 = crate::fk::sample_ball(&m, 1.0, 1, 1);
        let target = mode_target(&m, &[(Mode::new(2, 1), 0.2)]).unwrap();
        let p = SteeringProblem::new(w0, target, 1e-3);
        let x: Vec<f64> = normals(&mut stream_rng(3, 3), 16 * m.d(), 0.25);
        let (_, g) = terminal_cost_gradient(&m, &p, &x).unwrap();
        let h = 1e-5;
        let mut err: f64 = 0.0;
        for i in (0..x.len()).step_by(5) {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (terminal_cost(&m, &p, &a).unwrap() - terminal_cost(&m, &p, &b).unwrap()) / (2.0 * h);
            err = err.max((fd - g[i]).abs());
        }
        let gn = dot(&g, &g).sqrt();
        assert!(err <= 1e-6 * gn, "{err} vs {gn}");
    }

    #[test]
    fn target_norm_is_amplitude() {
        let m = model();
        let t = mode_target(&m, &[(Mode::new(2, 1), 0.3)]).unwrap();
        assert!((m.velocity_norm(&t, 0.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn probe_frequencies() {
        let m = model();
        let zero = m.spectral().zeros();
        let big = irreducibility_probe(&m, &[zero.clone()], &[vec![0.0; m.dim()]], 1e6, 1.0, 20, 1).unwrap();
        assert_eq!(big.min_frequency, 1.0);
        let tiny = irreducibility_probe(&m, &[zero], &[vec![0.0; m.dim()]], 1e-12, 1.0, 20, 1).unwrap();
        assert_eq!(tiny.min_frequency, 0.0);
        assert_eq!(tiny.warnings.len(), 1);
    }
}
