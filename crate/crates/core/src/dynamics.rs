//! Time integration of the Galerkin vorticity system, noise paths and
//! Lyapunov-type moment diagnostics.
//!
//! One step of size `dt` maps
//!
//! ```text
//! w' = E ⊙ (w - dt B(K w, w)) + C ⊙ Q ΔW,
//! E_l = exp(-ν|l|² dt),   C_l = sqrt((1 - E_l²) / (2ν|l|² dt)),
//! ```
//!
//! an integrating-factor Euler–Maruyama scheme in which the noise is injected
//! with the exact Ornstein–Uhlenbeck convolution weight. Pure decay is exact,
//! and so are the linear stationary variances and the linear noise-to-state
//! Gram matrix, at every `dt`.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::VorticityField;
use crate::forcing::{build_injection, ForcingSet, NoiseInjection};
use crate::lattice::Lattice;
use crate::rng::{normals, stream_rng};
use crate::spectral::{FrozenState, Spectral};
use crate::stats::Estimate;

/// Gaussian increments `ΔW_i ~ N(0, dt)`, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    dt: f64,
    d: usize,
    increments: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl NoisePath {
    pub fn generate(seed: u64, stream: u64, steps: usize, d: usize, dt: f64) -> Self {
        let mut rng = stream_rng(seed, stream);
        Self {
            dt,
            d,
            increments: normals(&mut rng, steps * d, dt),
            seed,
            stream,
        }
    }

    /// Zero noise (deterministic dynamics).
    pub fn zeros(steps: usize, d: usize, dt: f64) -> Self {
        Self::from_increments(dt, d, vec![0.0; steps * d])
    }

    pub fn from_increments(dt: f64, d: usize, increments: Vec<f64>) -> Self {
        assert!(d > 0 && increments.len() % d == 0);
        Self {
            dt,
            d,
            increments,
            seed: 0,
            stream: 0,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.d..(k + 1) * self.d]
    }

    pub fn increment_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.increments[k * self.d..(k + 1) * self.d]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

/// Increments drawn on the fly, in the same order as [`NoisePath::generate`].
pub struct NoiseStream {
    rng: ChaCha8Rng,
    d: usize,
    dt: f64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64, d: usize, dt: f64) -> Self {
        Self {
            rng: stream_rng(seed, stream),
            d,
            dt,
        }
    }

    pub fn next_increment(&mut self) -> Vec<f64> {
        normals(&mut self.rng, self.d, self.dt)
    }
}

/// One solution path: every state `w_0 .. w_K` and the noise that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    n: u32,
    dt: f64,
    states: Vec<Vec<f64>>,
    noise: NoisePath,
}

impl TrajectoryRecord {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn field(&self, k: usize) -> VorticityField {
        VorticityField::from_coefficients(self.n, self.states[k].clone()).expect("stored states are valid")
    }

    pub fn initial(&self) -> VorticityField {
        self.field(0)
    }

    pub fn final_state(&self) -> &[f64] {
        &self.states[self.steps()]
    }

    pub fn noise(&self) -> &NoisePath {
        &self.noise
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
}

/// The discretized SPDE: truncation, viscosity, forcing and step size.
#[derive(Debug)]
pub struct Model {
    spectral: Spectral,
    forcing: ForcingSet,
    injection: NoiseInjection,
    nu: f64,
    dt: f64,
    nonlinear: bool,
    decay: Vec<f64>,
    /// Per forced direction: lattice index and effective gain `C_l b_l |l|²`.
    q_index: Vec<usize>,
    q_gain: Vec<f64>,
}

impl Model {
    pub fn new(n: u32, nu: f64, dt: f64, forcing: ForcingSet) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Validation(format!("viscosity must be positive, got {nu}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        let spectral = Spectral::new(n);
        let injection = build_injection(&forcing, spectral.lattice())?;
        let lat = spectral.lattice();
        let decay: Vec<f64> = lat.norm2_all().iter().map(|k| (-nu * k * dt).exp()).collect();
        let q_index: Vec<usize> = (0..injection.d()).map(|i| injection.index(i)).collect();
        let q_gain = (0..injection.d())
            .map(|i| {
                let idx = injection.index(i);
                let a = nu * lat.norm2(idx) * dt;
                // (1 - e^{-2a}) / (2a), written to stay accurate for small a
                let c2 = -(-2.0 * a).exp_m1() / (2.0 * a);
                c2.sqrt() * injection.gain(i)
            })
            .collect();
        Ok(Self {
            spectral,
            forcing,
            injection,
            nu,
            dt,
            nonlinear: true,
            decay,
            q_index,
            q_gain,
        })
    }

    /// Test switch: drop `B(Kw, w)`, leaving independent OU modes.
    pub fn without_nonlinearity(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    /// Same physics with a different step size.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        let m = Self::new(self.n(), self.nu, dt, self.forcing.clone())?;
        Ok(if self.nonlinear { m } else { m.without_nonlinearity() })
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn lattice(&self) -> &Lattice {
        self.spectral.lattice()
    }

    pub fn forcing(&self) -> &ForcingSet {
        &self.forcing
    }

    pub fn injection(&self) -> &NoiseInjection {
        &self.injection
    }

    pub fn n(&self) -> u32 {
        self.spectral.n()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn d(&self) -> usize {
        self.q_index.len()
    }

    pub fn dim(&self) -> usize {
        self.spectral.dim()
    }

    pub fn is_nonlinear(&self) -> bool {
        self.nonlinear
    }

    /// `E_l = exp(-ν|l|² dt)` in lattice order.
    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    /// Number of steps in a time span that must be a whole number of steps.
    pub fn steps_for(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if t < 0.0 || (k * self.dt - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::Range(format!("time {t} is not a multiple of dt = {}", self.dt)));
        }
        Ok(k as usize)
    }

    /// Steps per unit time; requires `dt` to divide 1/2.
    pub fn steps_per_unit(&self) -> Result<usize> {
        let s = self.steps_for(1.0)?;
        if s % 2 != 0 {
            return Err(Error::Validation(format!("dt = {} must divide 1/2", self.dt)));
        }
        Ok(s)
    }

    /// `out += scale * C ⊙ Q θ`.
    pub fn inject_add(&self, theta: &[f64], scale: f64, out: &mut [f64]) {
        for ((&i, &g), &t) in self.q_index.iter().zip(&self.q_gain).zip(theta) {
            out[i] += scale * g * t;
        }
    }

    /// `(C ⊙ Q)^T ξ`.
    pub fn inject_adjoint(&self, xi: &[f64]) -> Vec<f64> {
        self.q_index.iter().zip(&self.q_gain).map(|(&i, &g)| g * xi[i]).collect()
    }

    /// Column `i` of `C ⊙ Q` as a lattice index and value.
    pub fn injection_column(&self, i: usize) -> (usize, f64) {
        (self.q_index[i], self.q_gain[i])
    }

    pub fn freeze(&self, w: &[f64]) -> Option<FrozenState> {
        self.nonlinear.then(|| self.spectral.freeze_coefs(w))
    }

    fn step_inner(&self, w: &[f64], fs: Option<&FrozenState>, dw: &[f64], out: &mut [f64]) {
        if let Some(fs) = fs {
            self.spectral.nonlinear_frozen(fs, out);
            for ((o, &wi), &e) in out.iter_mut().zip(w).zip(&self.decay) {
                *o = e * (wi - self.dt * *o);
            }
        } else {
            for ((o, &wi), &e) in out.iter_mut().zip(w).zip(&self.decay) {
                *o = e * wi;
            }
        }
        self.inject_add(dw, 1.0, out);
    }

    /// One step from `w` with increment `dw`; `out` receives the new state.
    pub fn step_into(&self, w: &[f64], dw: &[f64], out: &mut [f64]) -> bool {
        let fs = self.freeze(w);
        self.step_inner(w, fs.as_ref(), dw, out);
        out.iter().all(|v| v.is_finite())
    }

    pub fn step(&self, w: &VorticityField, dw: &[f64]) -> Result<VorticityField> {
        if dw.len() != self.d() {
            return Err(Error::Validation(format!(
                "increment has {} entries, forcing has {}",
                dw.len(),
                self.d()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        if !self.step_into(w.coefficients(), dw, &mut out) {
            return Err(Error::StepSize { step: 0, dt: self.dt });
        }
        VorticityField::from_coefficients(self.n(), out)
    }

    pub fn simulate(&self, w0: &VorticityField, noise: NoisePath) -> Result<TrajectoryRecord> {
        if noise.d() != self.d() {
            return Err(Error::Validation(format!(
                "noise path has {} directions, forcing has {}",
                noise.d(),
                self.d()
            )));
        }
        if (noise.dt() - self.dt).abs() > 1e-15 {
            return Err(Error::Validation("noise path dt differs from model dt".into()));
        }
        let steps = noise.steps();
        let mut states = Vec::with_capacity(steps + 1);
        states.push(w0.coefficients().to_vec());
        for k in 0..steps {
            let mut next = vec![0.0; self.dim()];
            if !self.step_into(&states[k], noise.increment(k), &mut next) {
                return Err(Error::StepSize { step: k, dt: self.dt });
            }
            states.push(next);
        }
        Ok(TrajectoryRecord {
            n: self.n(),
            dt: self.dt,
            states,
            noise,
        })
    }

    /// Simulates with fresh noise from `(seed, stream)` over `t` time units.
    pub fn sample_path(&self, w0: &VorticityField, t: f64, seed: u64, stream: u64) -> Result<TrajectoryRecord> {
        let steps = self.steps_for(t)?;
        self.simulate(w0, NoisePath::generate(seed, stream, steps, self.d(), self.dt))
    }

    /// Runs without storing the path; `observe(k, w_k)` is called for
    /// `k = 0..=steps`. The noise matches [`NoisePath::generate`] with the
    /// same `(seed, stream)`.
    pub fn simulate_streaming<F>(&self, w0: &VorticityField, steps: usize, seed: u64, stream: u64, mut observe: F) -> Result<VorticityField>
    where
        F: FnMut(usize, &[f64]),
    {
        let mut noise = NoiseStream::new(seed, stream, self.d(), self.dt);
        let mut w = w0.coefficients().to_vec();
        let mut next = vec![0.0; self.dim()];
        observe(0, &w);
        for k in 0..steps {
            let dw = noise.next_increment();
            if !self.step_into(&w, &dw, &mut next) {
                return Err(Error::StepSize { step: k, dt: self.dt });
            }
            std::mem::swap(&mut w, &mut next);
            observe(k + 1, &w);
        }
        VorticityField::from_coefficients(self.n(), w)
    }

    /// Re-integrates from the stored initial state and noise and checks bit
    /// equality with the stored states.
    pub fn replay_matches(&self, traj: &TrajectoryRecord) -> Result<bool> {
        let again = self.simulate(&traj.initial(), traj.noise.clone())?;
        Ok(again.states == traj.states)
    }

    /// Velocity L² norm of a vorticity state.
    pub fn velocity_norm(&self, w: &[f64], s: f64) -> f64 {
        let k2 = self.lattice().norm2_all();
        let sum: f64 = w.iter().zip(k2).map(|(c, k)| k.powf(s - 1.0) * c * c).sum();
        (crate::field::BASIS_NORM2 * sum).sqrt()
    }
}

/// Moment curves `E exp(γ‖u_t‖²)` and `E(1 + ‖u_t‖^{2m})` over an ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub gamma: f64,
    pub m: u32,
    pub times: Vec<f64>,
    pub exp_moment: Vec<Estimate>,
    pub poly_moment: Vec<Estimate>,
    /// Constant envelopes fitted on the first half of the time grid.
    pub exp_constant: f64,
    pub poly_constant: f64,
    /// Whether the second half stays below `envelope + 3 se`.
    pub exp_bounded: bool,
    pub poly_bounded: bool,
    pub warnings: Vec<String>,
}

/// `γ = 1/(8 𝔅₀)`.
pub fn default_gamma(forcing: &ForcingSet) -> f64 {
    1.0 / (8.0 * forcing.b0())
}

/// Builds the moment curves from velocity L² norms sampled on a common time
/// grid (`norms[traj][k]` at `times[k]`).
pub fn lyapunov_report(times: &[f64], norms: &[Vec<f64>], gamma: f64, m: u32) -> LyapunovReport {
    let kt = times.len();
    let mut warnings = Vec::new();
    let mut exp_moment = Vec::with_capacity(kt);
    let mut poly_moment = Vec::with_capacity(kt);
    let mut heavy = 0usize;
    for k in 0..kt {
        let e: Vec<f64> = norms.iter().map(|n| (gamma * n[k] * n[k]).exp()).collect();
        let p: Vec<f64> = norms.iter().map(|n| 1.0 + n[k].powi(2 * m as i32)).collect();
        if dominated_by_few(&e, 10) {
            heavy += 1;
        }
        exp_moment.push(Estimate::from_samples(&e));
        poly_moment.push(Estimate::from_samples(&p));
    }
    if heavy > 0 {
        warnings.push(format!(
            "exponential moment dominated by fewer than 10 samples at {heavy} of {kt} times; estimate unreliable"
        ));
    }
    let (exp_constant, exp_bounded) = envelope_fit(&exp_moment);
    let (poly_constant, poly_bounded) = envelope_fit(&poly_moment);
    LyapunovReport {
        gamma,
        m,
        times: times.to_vec(),
        exp_moment,
        poly_moment,
        exp_constant,
        poly_constant,
        exp_bounded,
        poly_bounded,
        warnings,
    }
}

/// Half the mass of the sum carried by fewer than `k` samples.
pub(crate) fn dominated_by_few(x: &[f64], k: usize) -> bool {
    let total: f64 = x.iter().sum();
    let mut v = x.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = v.iter().take(k.saturating_sub(1)).sum();
    x.len() >= k && top > 0.5 * total
}

/// Constant envelope `C = max_k m_k` over the first half of the grid; the
/// curve counts as bounded when the second half stays below `C + 3 se`.
pub(crate) fn envelope_fit(curve: &[Estimate]) -> (f64, bool) {
    if curve.is_empty() {
        return (0.0, true);
    }
    let half = curve.len().div_ceil(2);
    let c = curve[..half].iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max);
    let ok = curve[half..].iter().all(|e| e.mean <= c + 3.0 * e.stderr);
    (c, ok)
}
