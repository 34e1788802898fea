//! Linearization of the discrete flow along a stored path: tangent flow
//! `J`, second variation `J⁽²⁾`, the noise-to-state operator `A`, its adjoint
//! `A*`, and the Malliavin matrix `M = A A*`.
//!
//! Everything here is the exact derivative of the discrete step map, so the
//! identities between these objects (duality, Gram structure, Duhamel) hold
//! to rounding. A control `v` perturbs the noise as `ΔW_k ↦ ΔW_k + ε v_k dt`,
//! and controls are paired in `L²` by the Riemann sum `dt Σ_k u_k · v_k`.
//! All vectors are in the Euclidean geometry of the Galerkin coefficients.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::dynamics::{Model, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::field::{axpy, dot, norm};
use crate::spectral::FrozenState;

/// Default cap on the Galerkin dimension for dense matrix assembly.
pub const DENSE_DIM_CAP: usize = 512;

/// Piecewise-constant `R^d`-valued control on the step grid `[start, start+steps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    start: usize,
    d: usize,
    dt: f64,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn zeros(start: usize, steps: usize, d: usize, dt: f64) -> Self {
        Self {
            start,
            d,
            dt,
            values: vec![0.0; steps * d],
        }
    }

    pub fn from_values(start: usize, d: usize, dt: f64, values: Vec<f64>) -> Self {
        assert!(values.len() % d == 0);
        Self { start, d, dt, values }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.start + self.steps()
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Value on the global step `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        let j = k - self.start;
        &self.values[j * self.d..(j + 1) * self.d]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        let j = k - self.start;
        &mut self.values[j * self.d..(j + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_inner(&self, other: &ControlPath) -> f64 {
        assert_eq!(self.start, other.start);
        assert_eq!(self.values.len(), other.values.len());
        self.dt * dot(&self.values, &other.values)
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// A stored path together with the frozen transport coefficients of every
/// step, ready for tangent and adjoint sweeps.
pub struct Linearization<'a> {
    model: &'a Model,
    traj: &'a TrajectoryRecord,
    frozen: Vec<Option<FrozenState>>,
}

impl<'a> Linearization<'a> {
    pub fn new(model: &'a Model, traj: &'a TrajectoryRecord) -> Self {
        let frozen = (0..traj.steps()).map(|k| model.freeze(traj.state(k))).collect();
        Self { model, traj, frozen }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn trajectory(&self) -> &TrajectoryRecord {
        self.traj
    }

    pub fn steps(&self) -> usize {
        self.traj.steps()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    pub fn dt(&self) -> f64 {
        self.model.dt()
    }

    /// Step indices of the time interval `[s, t]`.
    pub fn interval(&self, s: f64, t: f64) -> Result<(usize, usize)> {
        let a = self.model.steps_for(s)?;
        let b = self.model.steps_for(t)?;
        self.check(a, b)?;
        Ok((a, b))
    }

    fn check(&self, s: usize, t: usize) -> Result<()> {
        if s > t || t > self.steps() {
            return Err(Error::Range(format!(
                "interval [{s}, {t}] (steps) outside the trajectory horizon of {} steps",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn frozen(&self, k: usize) -> Option<&FrozenState> {
        self.frozen[k].as_ref()
    }

    /// `out = S_k ξ = E ⊙ (ξ - dt B̃(w_k, ξ))`.
    pub fn tangent_step(&self, k: usize, xi: &[f64], out: &mut [f64]) {
        let e = self.model.decay();
        let dt = self.dt();
        match &self.frozen[k] {
            Some(fs) => {
                self.model.spectral().tilde_b_frozen(fs, xi, out);
                for i in 0..out.len() {
                    out[i] = e[i] * (xi[i] - dt * out[i]);
                }
            }
            None => {
                for i in 0..out.len() {
                    out[i] = e[i] * xi[i];
                }
            }
        }
    }

    /// `out = S_k^T η = E η - dt B̃_k^T (E η)`.
    pub fn tangent_step_adjoint(&self, k: usize, eta: &[f64], out: &mut [f64]) {
        let e = self.model.decay();
        let dt = self.dt();
        let ee: Vec<f64> = eta.iter().zip(e).map(|(a, b)| a * b).collect();
        match &self.frozen[k] {
            Some(fs) => {
                self.model.spectral().tilde_b_frozen_adjoint(fs, &ee, out);
                for i in 0..out.len() {
                    out[i] = ee[i] - dt * out[i];
                }
            }
            None => out.copy_from_slice(&ee),
        }
    }

    /// `J_{s,t} ξ` on step indices.
    pub fn evolve_j(&self, s: usize, t: usize, xi: &[f64]) -> Result<Vec<f64>> {
        self.check(s, t)?;
        let mut a = xi.to_vec();
        let mut b = vec![0.0; a.len()];
        for k in s..t {
            self.tangent_step(k, &a, &mut b);
            std::mem::swap(&mut a, &mut b);
        }
        Ok(a)
    }

    /// `J_{s,k} ξ` for every `k` in `s..=t`.
    pub fn evolve_j_curve(&self, s: usize, t: usize, xi: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(s, t)?;
        let mut curve = Vec::with_capacity(t - s + 1);
        curve.push(xi.to_vec());
        for k in s..t {
            let mut next = vec![0.0; xi.len()];
            self.tangent_step(k, &curve[k - s], &mut next);
            curve.push(next);
        }
        Ok(curve)
    }

    /// `J⁽²⁾_{s,t}(φ, ψ)`: the second derivative of `w_t` with respect to
    /// `w_s` in the directions `φ, ψ`.
    pub fn evolve_j2(&self, s: usize, t: usize, phi: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
        self.check(s, t)?;
        let dim = self.dim();
        let mut a = phi.to_vec();
        let mut b = psi.to_vec();
        let mut chi = vec![0.0; dim];
        let mut tmp = vec![0.0; dim];
        let mut src = vec![0.0; dim];
        let e = self.model.decay();
        let dt = self.dt();
        for k in s..t {
            let nonlinear = self.frozen[k].is_some();
            if nonlinear {
                let fa = self.model.spectral().freeze_coefs(&a);
                self.model.spectral().tilde_b_frozen(&fa, &b, &mut src);
            }
            self.tangent_step(k, &chi, &mut tmp);
            if nonlinear {
                for i in 0..dim {
                    tmp[i] -= dt * e[i] * src[i];
                }
            }
            std::mem::swap(&mut chi, &mut tmp);
            self.tangent_step(k, &a, &mut tmp);
            std::mem::swap(&mut a, &mut tmp);
            self.tangent_step(k, &b, &mut tmp);
            std::mem::swap(&mut b, &mut tmp);
        }
        Ok(chi)
    }

    /// `A_{s,t} v`: the linear response at `t` to the noise variation `v`.
    pub fn apply_a(&self, s: usize, t: usize, v: &ControlPath) -> Result<Vec<f64>> {
        self.check(s, t)?;
        if v.start() > s || v.end() < t {
            return Err(Error::Range("control path does not cover the interval".into()));
        }
        let dt = self.dt();
        let mut z = vec![0.0; self.dim()];
        let mut tmp = vec![0.0; self.dim()];
        for k in s..t {
            self.tangent_step(k, &z, &mut tmp);
            self.model.inject_add(v.at(k), dt, &mut tmp);
            std::mem::swap(&mut z, &mut tmp);
        }
        Ok(z)
    }

    /// `A*_{s,t} ξ` by a backward adjoint sweep.
    pub fn apply_a_star(&self, s: usize, t: usize, xi: &[f64]) -> Result<ControlPath> {
        self.check(s, t)?;
        let mut out = ControlPath::zeros(s, t - s, self.d(), self.dt());
        let mut lam = xi.to_vec();
        let mut tmp = vec![0.0; self.dim()];
        for k in (s..t).rev() {
            out.at_mut(k).copy_from_slice(&self.model.inject_adjoint(&lam));
            self.tangent_step_adjoint(k, &lam, &mut tmp);
            std::mem::swap(&mut lam, &mut tmp);
        }
        Ok(out)
    }

    /// `J_{s,t}^T η`.
    pub fn evolve_j_adjoint(&self, s: usize, t: usize, eta: &[f64]) -> Result<Vec<f64>> {
        self.check(s, t)?;
        let mut lam = eta.to_vec();
        let mut tmp = vec![0.0; lam.len()];
        for k in (s..t).rev() {
            self.tangent_step_adjoint(k, &lam, &mut tmp);
            std::mem::swap(&mut lam, &mut tmp);
        }
        Ok(lam)
    }

    /// The columns `G_k = J_{k+1,t} (C ⊙ Q)` for `k` in `s..t`, by forward
    /// propagation. `A v = dt Σ_k G_k v_k` and `(A* ξ)_k = G_k^T ξ`.
    pub fn noise_responses(&self, s: usize, t: usize) -> Result<NoiseResponses> {
        self.check(s, t)?;
        let d = self.d();
        let dim = self.dim();
        let r = (t - s) * d;
        let mut g = DMatrix::<f64>::zeros(dim, r);
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        for k in s..t {
            for i in 0..d {
                a.iter_mut().for_each(|x| *x = 0.0);
                let (idx, gain) = self.model.injection_column(i);
                a[idx] = gain;
                for m in k + 1..t {
                    self.tangent_step(m, &a, &mut b);
                    std::mem::swap(&mut a, &mut b);
                }
                g.column_mut((k - s) * d + i).copy_from_slice(&a);
            }
        }
        Ok(NoiseResponses {
            s,
            t,
            d,
            dt: self.dt(),
            g,
        })
    }

    /// Dense `M_{s,t}` from the noise responses.
    pub fn malliavin_matrix(&self, s: usize, t: usize) -> Result<MalliavinMatrix> {
        self.malliavin_matrix_capped(s, t, DENSE_DIM_CAP)
    }

    pub fn malliavin_matrix_capped(&self, s: usize, t: usize, cap: usize) -> Result<MalliavinMatrix> {
        dense_cap(self.dim(), cap)?;
        Ok(self.noise_responses(s, t)?.malliavin_matrix())
    }

    /// Dense `M_{s,t}` assembled column by column as `A(A* e_j)`.
    pub fn malliavin_matrix_by_columns(&self, s: usize, t: usize) -> Result<MalliavinMatrix> {
        dense_cap(self.dim(), DENSE_DIM_CAP)?;
        let dim = self.dim();
        let cols = crate::par::try_map_indexed(dim, |j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let v = self.apply_a_star(s, t, &e)?;
            self.apply_a(s, t, &v)
        })?;
        let mut m = DMatrix::zeros(dim, dim);
        for (j, c) in cols.iter().enumerate() {
            m.column_mut(j).copy_from_slice(c);
        }
        Ok(MalliavinMatrix { s, t, matrix: m })
    }

    /// Solves `(M + βI) x = ξ` without forming `M`, by conjugate gradients
    /// on `x ↦ A A* x + βx`.
    pub fn regularized_solve_matrix_free(&self, s: usize, t: usize, beta: f64, xi: &[f64], tol: f64) -> Result<Vec<f64>> {
        check_beta(beta)?;
        let apply = |x: &[f64]| -> Result<Vec<f64>> {
            let v = self.apply_a_star(s, t, x)?;
            let mut y = self.apply_a(s, t, &v)?;
            axpy(beta, x, &mut y);
            Ok(y)
        };
        let b = xi;
        let bn = norm(b);
        let mut x = vec![0.0; b.len()];
        if bn == 0.0 {
            return Ok(x);
        }
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        for _ in 0..10 * b.len() {
            let ap = apply(&p)?;
            let alpha = rr / dot(&p, &ap);
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= tol * bn {
                return Ok(x);
            }
            let beta_cg = rr_new / rr;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta_cg * *pi;
            }
            rr = rr_new;
        }
        Err(Error::Resource("conjugate gradients did not converge".into()))
    }
}

fn dense_cap(dim: usize, cap: usize) -> Result<()> {
    if dim > cap {
        return Err(Error::Resource(format!(
            "Galerkin dimension {dim} exceeds the dense cap {cap}; use the matrix-free solver"
        )));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Validation(format!("regularization β must be positive, got {beta}")));
    }
    Ok(())
}

/// The noise-response matrix `𝒢 = [G_s | ... | G_{t-1}]` (D × d(t-s)), so
/// that `M = dt 𝒢 𝒢^T`.
#[derive(Debug, Clone)]
pub struct NoiseResponses {
    pub s: usize,
    pub t: usize,
    pub d: usize,
    pub dt: f64,
    pub g: DMatrix<f64>,
}

impl NoiseResponses {
    /// Column `G_k e_i`.
    pub fn column(&self, k: usize, i: usize) -> &[f64] {
        let j = (k - self.s) * self.d + i;
        let dim = self.g.nrows();
        &self.g.as_slice()[j * dim..(j + 1) * dim]
    }

    pub fn malliavin_matrix(&self) -> MalliavinMatrix {
        let m = &self.g * self.g.transpose() * self.dt;
        MalliavinMatrix {
            s: self.s,
            t: self.t,
            matrix: m,
        }
    }

    /// `A* ξ = (G_k^T ξ)_k`.
    pub fn adjoint(&self, xi: &[f64]) -> ControlPath {
        let v = self.g.tr_mul(&DVector::from_column_slice(xi));
        ControlPath::from_values(self.s, self.d, self.dt, v.as_slice().to_vec())
    }

    /// `A v = dt 𝒢 v`.
    pub fn apply(&self, v: &ControlPath) -> Vec<f64> {
        let vals = DVector::from_column_slice(&v.values()[..(self.t - self.s) * self.d]);
        (&self.g * vals * self.dt).as_slice().to_vec()
    }

    /// Low-rank factorization of `M + βI` for repeated solves.
    pub fn regularized(&self, beta: f64) -> Result<LowRankSolver> {
        check_beta(beta)?;
        let mut small = self.g.tr_mul(&self.g);
        for i in 0..small.nrows() {
            small[(i, i)] += beta / self.dt;
        }
        let chol = Cholesky::new(small).ok_or_else(|| Error::Validation("regularized Gram matrix is not positive definite".into()))?;
        Ok(LowRankSolver {
            beta,
            g: self.g.clone(),
            chol,
        })
    }
}

/// `(β I + dt 𝒢𝒢^T)^{-1} y = (y - 𝒢 (β/dt + 𝒢^T𝒢)^{-1} 𝒢^T y) / β`.
pub struct LowRankSolver {
    beta: f64,
    g: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl LowRankSolver {
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let yv = DVector::from_column_slice(y);
        let u = self.chol.solve(&self.g.tr_mul(&yv));
        ((yv - &self.g * u) / self.beta).as_slice().to_vec()
    }
}

/// Dense `M_{s,t}` on the Galerkin coordinates.
#[derive(Debug, Clone)]
pub struct MalliavinMatrix {
    pub s: usize,
    pub t: usize,
    pub matrix: DMatrix<f64>,
}

impl MalliavinMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `max |M - M^T| / max |M|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.matrix.amax().max(f64::MIN_POSITIVE);
        (&self.matrix - self.matrix.transpose()).amax() / scale
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Solves `(M + βI) x = ξ` by Cholesky.
    pub fn regularized_apply(&self, beta: f64, xi: &[f64]) -> Result<Vec<f64>> {
        check_beta(beta)?;
        let mut a = (&self.matrix + self.matrix.transpose()) * 0.5;
        for i in 0..a.nrows() {
            a[(i, i)] += beta;
        }
        let chol = Cholesky::new(a).ok_or_else(|| Error::Validation("M + βI is not positive definite".into()))?;
        Ok(chol.solve(&DVector::from_column_slice(xi)).as_slice().to_vec())
    }

    /// `(M + βI)^{-1/2} ξ` by eigendecomposition.
    pub fn regularized_inv_sqrt_apply(&self, beta: f64, xi: &[f64]) -> Result<Vec<f64>> {
        let p = self.regularized_power(beta, -0.5)?;
        Ok((p * DVector::from_column_slice(xi)).as_slice().to_vec())
    }

    /// `(M + βI)^p` as a dense matrix.
    pub fn regularized_power(&self, beta: f64, p: f64) -> Result<DMatrix<f64>> {
        check_beta(beta)?;
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let lam = eig.eigenvalues.map(|l| (l.max(0.0) + beta).powf(p));
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose())
    }
}

/// Largest singular value of a linear map given by closures for it and its
/// adjoint, by power iteration on `T^T T`.
pub fn operator_norm<F, G>(dim: usize, apply: F, adjoint: G, iters: usize) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut x: Vec<f64> = (0..dim).map(|i| 1.0 + 0.01 * ((i * 37) % 11) as f64).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let y = adjoint(&apply(&x));
        let ny = norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        sigma = ny.sqrt();
        x = y.iter().map(|v| v / ny).collect();
    }
    // one Rayleigh refinement: ‖T x‖ for the converged unit x
    sigma.max(norm(&apply(&x)))
}
