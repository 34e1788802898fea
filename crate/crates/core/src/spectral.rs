//! Real trigonometric representation on the torus, Biot–Savart, the
//! dealiased transport term and Sobolev norms.
//!
//! Basis: `φ_l = sin<l,x>` for positive `l`, `φ_l = -cos<l,x>` for negative
//! `l`. Differentiation maps `∂_j φ_m = -m_j φ_{-m}` for every `m`, which is
//! all the sign bookkeeping the module needs:
//!
//! * Biot–Savart: `u_m = -m^⊥ c_{-m} / |m|²` (velocity coefficients at `m`),
//!   so that `∇∧u = w` and `div u = 0` hold exactly.
//! * Curl: `c_{-m} = -(m^⊥ · u_m)`.
//!
//! Quadratic products are evaluated on an `M × M` collocation grid with
//! `M ≥ 3N + 1`, which makes truncation of the product to `|l|_inf ≤ N`
//! alias-free (the 2/3 rule).

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::field::{VelocityField, VorticityField, BASIS_NORM2};
use crate::lattice::Lattice;

/// Per-positive-mode bookkeeping: (index of l, index of -l, grid slot of l,
/// grid slot of -l).
#[derive(Debug, Clone, Copy)]
struct PairSlots {
    pos: usize,
    neg: usize,
    slot_pos: usize,
    slot_neg: usize,
}

/// Grid values of `K w` and `∇w` for a fixed state, packed as
/// `u1 + i u2` and `∂1 w + i ∂2 w`.
#[derive(Debug, Clone)]
pub struct FrozenState {
    velocity: Vec<Complex64>,
    gradient: Vec<Complex64>,
}

pub struct Spectral {
    lattice: Lattice,
    grid: usize,
    pairs: Vec<PairSlots>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    inv_k2: Vec<f64>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral")
            .field("n", &self.lattice.n())
            .field("grid", &self.grid)
            .finish()
    }
}

/// Smallest 5-smooth integer `>= 3n + 1`.
pub fn dealiased_grid_size(n: u32) -> usize {
    let mut m = 3 * n as usize + 1;
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl Spectral {
    pub fn new(n: u32) -> Self {
        Self::with_grid(n, dealiased_grid_size(n))
    }

    /// Uses an explicit collocation grid size. Sizes below `3N + 1` alias.
    pub fn with_grid(n: u32, grid: usize) -> Self {
        let lattice = Lattice::new(n);
        let m = grid as i64;
        let slot = |l1: i32, l2: i32| -> usize {
            let a = (l1 as i64).rem_euclid(m) as usize;
            let b = (l2 as i64).rem_euclid(m) as usize;
            a * grid + b
        };
        let pairs = (0..lattice.dim())
            .filter(|&i| lattice.mode(i).is_positive())
            .map(|i| {
                let md = lattice.mode(i);
                PairSlots {
                    pos: i,
                    neg: lattice.partner(i),
                    slot_pos: slot(md.l1, md.l2),
                    slot_neg: slot(-md.l1, -md.l2),
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid);
        let inv = planner.plan_fft_inverse(grid);
        let inv_k2 = lattice.norm2_all().iter().map(|k| 1.0 / k).collect();
        Self {
            lattice,
            grid,
            pairs,
            fwd,
            inv,
            inv_k2,
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn n(&self) -> u32 {
        self.lattice.n()
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn zeros(&self) -> VorticityField {
        VorticityField::zeros(self.n())
    }

    fn buf(&self) -> Vec<Complex64> {
        vec![Complex64::new(0.0, 0.0); self.grid * self.grid]
    }

    fn fft2(&self, plan: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
        let m = self.grid;
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        let mut t = vec![Complex64::new(0.0, 0.0); m * m];
        for i in 0..m {
            for j in 0..m {
                t[j * m + i] = buf[i * m + j];
            }
        }
        plan.process_with_scratch(&mut t, &mut scratch);
        for i in 0..m {
            for j in 0..m {
                buf[i * m + j] = t[j * m + i];
            }
        }
    }

    /// Writes the spectrum of `a + i b` (both real fields) into `buf`.
    fn fill_spectrum(&self, a: &[f64], b: Option<&[f64]>, buf: &mut [Complex64]) {
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for p in &self.pairs {
            // â_l = -(c_{-l} + i c_l) / 2, â_{-l} = conj(â_l)
            let ah = Complex64::new(-0.5 * a[p.neg], -0.5 * a[p.pos]);
            let (bh, bh_c) = match b {
                Some(b) => {
                    let bh = Complex64::new(-0.5 * b[p.neg], -0.5 * b[p.pos]);
                    (bh, bh.conj())
                }
                None => (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)),
            };
            let i = Complex64::new(0.0, 1.0);
            buf[p.slot_pos] = ah + i * bh;
            buf[p.slot_neg] = ah.conj() + i * bh_c;
        }
    }

    /// Grid values of `a + i b`.
    fn to_grid(&self, a: &[f64], b: Option<&[f64]>) -> Vec<Complex64> {
        let mut buf = self.buf();
        self.fill_spectrum(a, b, &mut buf);
        self.fft2(&self.inv, &mut buf);
        buf
    }

    /// Truncated coefficients of the real part of a grid field (imaginary
    /// part must be zero, or is discarded as a separate packed field when
    /// `out_b` is given).
    fn from_grid(&self, mut buf: Vec<Complex64>, out_a: &mut [f64], out_b: Option<&mut [f64]>) {
        self.fft2(&self.fwd, &mut buf);
        let scale = 1.0 / (self.grid * self.grid) as f64;
        match out_b {
            None => {
                for p in &self.pairs {
                    let z = buf[p.slot_pos] * scale;
                    out_a[p.pos] = -2.0 * z.im;
                    out_a[p.neg] = -2.0 * z.re;
                }
            }
            Some(out_b) => {
                for p in &self.pairs {
                    let zp = buf[p.slot_pos] * scale;
                    let zn = buf[p.slot_neg].conj() * scale;
                    let f = (zp + zn) * 0.5;
                    let g = (zp - zn) * Complex64::new(0.0, -0.5);
                    out_a[p.pos] = -2.0 * f.im;
                    out_a[p.neg] = -2.0 * f.re;
                    out_b[p.pos] = -2.0 * g.im;
                    out_b[p.neg] = -2.0 * g.re;
                }
            }
        }
    }

    /// Velocity coefficients of `K c`.
    fn biot_savart_coefs(&self, c: &[f64], u1: &mut [f64], u2: &mut [f64]) {
        let lat = &self.lattice;
        for i in 0..lat.dim() {
            let m = lat.mode(i);
            let cm = c[lat.partner(i)] * self.inv_k2[i];
            u1[i] = m.l2 as f64 * cm;
            u2[i] = -(m.l1 as f64) * cm;
        }
    }

    /// Coefficients of `∂1 c` and `∂2 c`.
    fn gradient_coefs(&self, c: &[f64], g1: &mut [f64], g2: &mut [f64]) {
        let lat = &self.lattice;
        for i in 0..lat.dim() {
            let m = lat.mode(i);
            let p = lat.partner(i);
            g1[p] = -(m.l1 as f64) * c[i];
            g2[p] = -(m.l2 as f64) * c[i];
        }
    }

    pub fn biot_savart(&self, w: &VorticityField) -> VelocityField {
        let mut u = VelocityField::zeros(self.n());
        let (u1, u2) = u.components_mut();
        self.biot_savart_coefs(w.coefficients(), u1, u2);
        u
    }

    pub fn curl(&self, u: &VelocityField) -> VorticityField {
        let lat = &self.lattice;
        let mut w = self.zeros();
        let c = w.coefficients_mut();
        for i in 0..lat.dim() {
            let m = lat.mode(i);
            // m^⊥ · u_m with m^⊥ = (-m2, m1)
            let perp_dot = -(m.l2 as f64) * u.u1()[i] + m.l1 as f64 * u.u2()[i];
            c[lat.partner(i)] = -perp_dot;
        }
        w
    }

    /// Spectral divergence of `u` as a scalar field.
    pub fn divergence(&self, u: &VelocityField) -> VorticityField {
        let lat = &self.lattice;
        let mut d = self.zeros();
        let c = d.coefficients_mut();
        for i in 0..lat.dim() {
            let m = lat.mode(i);
            c[lat.partner(i)] = -(m.l1 as f64 * u.u1()[i] + m.l2 as f64 * u.u2()[i]);
        }
        d
    }

    /// `B(u, w) = <u, ∇> w`, dealiased and truncated.
    pub fn bilinear_b(&self, u: &VelocityField, w: &VorticityField) -> VorticityField {
        let d = self.dim();
        let (mut g1, mut g2) = (vec![0.0; d], vec![0.0; d]);
        self.gradient_coefs(w.coefficients(), &mut g1, &mut g2);
        let ug = self.to_grid(u.u1(), Some(u.u2()));
        let gg = self.to_grid(&g1, Some(&g2));
        let prod: Vec<Complex64> = ug
            .iter()
            .zip(&gg)
            .map(|(a, b)| Complex64::new(a.re * b.re + a.im * b.im, 0.0))
            .collect();
        let mut out = self.zeros();
        self.from_grid(prod, out.coefficients_mut(), None);
        out
    }

    /// `B(K w, w)`.
    pub fn nonlinear(&self, w: &VorticityField) -> VorticityField {
        let fs = self.freeze(w);
        let prod: Vec<Complex64> = fs
            .velocity
            .iter()
            .zip(&fs.gradient)
            .map(|(a, b)| Complex64::new(a.re * b.re + a.im * b.im, 0.0))
            .collect();
        let mut out = self.zeros();
        self.from_grid(prod, out.coefficients_mut(), None);
        out
    }

    /// `B(K w, v) + B(K v, w)`: symmetric in its arguments.
    pub fn tilde_b(&self, w: &VorticityField, v: &VorticityField) -> VorticityField {
        let fs = self.freeze(w);
        let mut out = self.zeros();
        self.tilde_b_frozen(&fs, v.coefficients(), out.coefficients_mut());
        out
    }

    pub fn freeze(&self, w: &VorticityField) -> FrozenState {
        self.freeze_coefs(w.coefficients())
    }

    pub fn freeze_coefs(&self, c: &[f64]) -> FrozenState {
        let d = self.dim();
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        self.biot_savart_coefs(c, &mut a, &mut b);
        let velocity = self.to_grid(&a, Some(&b));
        self.gradient_coefs(c, &mut a, &mut b);
        let gradient = self.to_grid(&a, Some(&b));
        FrozenState { velocity, gradient }
    }

    /// `out = B(K w, w)` for a frozen `w`.
    pub fn nonlinear_frozen(&self, fs: &FrozenState, out: &mut [f64]) {
        let prod: Vec<Complex64> = fs
            .velocity
            .iter()
            .zip(&fs.gradient)
            .map(|(a, b)| Complex64::new(a.re * b.re + a.im * b.im, 0.0))
            .collect();
        self.from_grid(prod, out, None);
    }

    /// `out = B(K w, v) + B(K v, w)` for a frozen `w`.
    pub fn tilde_b_frozen(&self, fs: &FrozenState, v: &[f64], out: &mut [f64]) {
        let vs = self.freeze_coefs(v);
        let prod: Vec<Complex64> = (0..fs.velocity.len())
            .map(|j| {
                let (uw, gw, uv, gv) = (fs.velocity[j], fs.gradient[j], vs.velocity[j], vs.gradient[j]);
                Complex64::new(uw.re * gv.re + uw.im * gv.im + uv.re * gw.re + uv.im * gw.im, 0.0)
            })
            .collect();
        self.from_grid(prod, out, None);
    }

    /// `out = B(K a, b) + B(K b, a)` for two frozen fields.
    pub fn tilde_b_pair(&self, fa: &FrozenState, fb: &FrozenState, out: &mut [f64]) {
        let prod: Vec<Complex64> = (0..fa.velocity.len())
            .map(|j| {
                let (ua, ga, ub, gb) = (fa.velocity[j], fa.gradient[j], fb.velocity[j], fb.gradient[j]);
                Complex64::new(ua.re * gb.re + ua.im * gb.im + ub.re * ga.re + ub.im * ga.im, 0.0)
            })
            .collect();
        self.from_grid(prod, out, None);
    }

    /// Transpose (Euclidean coefficient inner product) of
    /// `v ↦ B(K w, v) + B(K v, w)` for a frozen `w`.
    ///
    /// The transport part is skew because `K w` is divergence free; the
    /// second part is `K^T P_N(η ∇w)`.
    pub fn tilde_b_frozen_adjoint(&self, fs: &FrozenState, eta: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let (mut g1, mut g2) = (vec![0.0; d], vec![0.0; d]);
        self.gradient_coefs(eta, &mut g1, &mut g2);
        let geta = self.to_grid(&g1, Some(&g2));
        let eta_grid = self.to_grid(eta, None);
        let transport: Vec<Complex64> = fs
            .velocity
            .iter()
            .zip(&geta)
            .map(|(u, g)| Complex64::new(-(u.re * g.re + u.im * g.im), 0.0))
            .collect();
        let flux: Vec<Complex64> = fs
            .gradient
            .iter()
            .zip(&eta_grid)
            .map(|(gw, e)| *gw * e.re)
            .collect();
        self.from_grid(transport, out, None);
        let (mut f1, mut f2) = (vec![0.0; d], vec![0.0; d]);
        self.from_grid(flux, &mut f1, Some(&mut f2));
        let lat = &self.lattice;
        for i in 0..d {
            let m = lat.mode(i);
            // transpose of c_p ↦ (m2 c_p, -m1 c_p)/|m|² where p = -m
            out[lat.partner(i)] += (m.l2 as f64 * f1[i] - m.l1 as f64 * f2[i]) * self.inv_k2[i];
        }
    }

    /// `(2π² Σ |l|^{2s} c_l²)^{1/2}`, the L²-consistent Sobolev norm.
    pub fn sobolev_norm(&self, w: &VorticityField, s: f64) -> f64 {
        self.weighted_norm(w.coefficients(), s)
    }

    pub fn velocity_sobolev_norm(&self, u: &VelocityField, s: f64) -> f64 {
        (self.weighted_norm(u.u1(), s).powi(2) + self.weighted_norm(u.u2(), s).powi(2)).sqrt()
    }

    fn weighted_norm(&self, c: &[f64], s: f64) -> f64 {
        let k2 = self.lattice.norm2_all();
        let sum: f64 = c.iter().zip(k2).map(|(ci, k)| k.powf(s) * ci * ci).sum();
        (BASIS_NORM2 * sum).sqrt()
    }

    /// Grid values of `w` at `x_{ij} = 2π (i, j) / M`, row-major in `i`.
    pub fn synthesize(&self, w: &VorticityField) -> Vec<f64> {
        self.to_grid(w.coefficients(), None).iter().map(|z| z.re).collect()
    }

    /// Point evaluation by direct summation of the basis (no transforms).
    pub fn evaluate(&self, w: &VorticityField, x: [f64; 2]) -> f64 {
        let lat = &self.lattice;
        w.coefficients()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let m = lat.mode(i);
                let phase = m.l1 as f64 * x[0] + m.l2 as f64 * x[1];
                let phi = if m.is_positive() { phase.sin() } else { -phase.cos() };
                c * phi
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(sp: &Spectral, rng: &mut ChaCha8Rng, decay: f64) -> VorticityField {
        let lat = sp.lattice();
        let c = (0..sp.dim())
            .map(|i| rng.random_range(-1.0..1.0) / (1.0 + lat.norm2(i)).powf(decay))
            .collect();
        VorticityField::from_coefficients(sp.n(), c).unwrap()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
        num / den
    }

    /// Velocity point value by direct summation.
    fn eval_velocity(sp: &Spectral, u: &VelocityField, x: [f64; 2]) -> [f64; 2] {
        let a = VorticityField::from_coefficients(sp.n(), u.u1().to_vec()).unwrap();
        let b = VorticityField::from_coefficients(sp.n(), u.u2().to_vec()).unwrap();
        [sp.evaluate(&a, x), sp.evaluate(&b, x)]
    }

    /// Analytic partial derivative of a field at a point, differentiating
    /// sin / -cos symbolically.
    fn eval_partial(sp: &Spectral, c: &[f64], j: usize, x: [f64; 2]) -> f64 {
        let lat = sp.lattice();
        c.iter()
            .enumerate()
            .map(|(i, ci)| {
                let m = lat.mode(i);
                let mj = if j == 0 { m.l1 } else { m.l2 } as f64;
                let phase = m.l1 as f64 * x[0] + m.l2 as f64 * x[1];
                // d/dx sin = m cos, d/dx (-cos) = m sin
                let d = if m.is_positive() { mj * phase.cos() } else { mj * phase.sin() };
                ci * d
            })
            .sum()
    }

    #[test]
    fn grid_size_is_smooth_and_dealiased() {
        assert_eq!(dealiased_grid_size(8), 25);
        assert_eq!(dealiased_grid_size(4), 15);
        assert_eq!(dealiased_grid_size(16), 50);
    }

    #[test]
    fn biot_savart_single_mode_against_symbolic_derivatives() {
        let sp = Spectral::new(3);
        let idx = sp.lattice().index_of(Mode::new(1, 0)).unwrap();
        let w = VorticityField::basis(3, idx, 1.0);
        let u = sp.biot_savart(&w);
        let pts = [[0.3, 1.1], [2.0, 4.5], [5.9, 0.2]];
        for x in pts {
            let curl = eval_partial(&sp, u.u2(), 0, x) - eval_partial(&sp, u.u1(), 1, x);
            let div = eval_partial(&sp, u.u1(), 0, x) + eval_partial(&sp, u.u2(), 1, x);
            assert!((curl - x[0].sin()).abs() < 1e-14, "curl {curl} vs {}", x[0].sin());
            assert!(div.abs() < 1e-14);
            // single-mode: u = (0, -cos x1)
            let uv = eval_velocity(&sp, &u, x);
            assert!(uv[0].abs() < 1e-14);
            assert!((uv[1] + x[0].cos()).abs() < 1e-14);
        }
        let nu = sp.velocity_sobolev_norm(&u, 0.0);
        assert!((nu - sp.sobolev_norm(&w, 0.0)).abs() < 1e-14);
        let back = sp.curl(&u);
        assert!(rel(back.coefficients(), w.coefficients()) < 1e-15);
    }

    #[test]
    fn biot_savart_gain_per_mode() {
        let sp = Spectral::new(4);
        let idx = sp.lattice().index_of(Mode::new(2, 0)).unwrap();
        let w = VorticityField::basis(4, idx, 1.0);
        let u = sp.biot_savart(&w);
        let ratio = sp.velocity_sobolev_norm(&u, 0.0) / sp.sobolev_norm(&w, 0.0);
        assert!((ratio - 0.5).abs() < 1e-15);
        assert_eq!(sp.biot_savart(&sp.zeros()), VelocityField::zeros(4));
    }

    #[test]
    fn random_fields_curl_divergence_identities() {
        let sp = Spectral::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let w = random_field(&sp, &mut rng, 0.0);
            let u = sp.biot_savart(&w);
            assert!(sp.divergence(&u).coef_norm() <= 1e-14 * u.coef_norm());
            assert!(rel(sp.curl(&u).coefficients(), w.coefficients()) < 1e-14);
            let u2 = sp.biot_savart(&sp.curl(&u));
            assert!(rel(u2.u1(), u.u1()) < 1e-14 && rel(u2.u2(), u.u2()) < 1e-14);
            // symbolic curl at a few points
            for x in [[0.7, 2.2], [4.0, 1.3]] {
                let curl = eval_partial(&sp, u.u2(), 0, x) - eval_partial(&sp, u.u1(), 1, x);
                assert!((curl - sp.evaluate(&w, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobolev_normalization() {
        let sp = Spectral::new(3);
        let i10 = sp.lattice().index_of(Mode::new(1, 0)).unwrap();
        let phi = VorticityField::basis(3, i10, 1.0);
        // ∫ sin² x1 over (2π)² = 2π²
        assert!((sp.sobolev_norm(&phi, 0.0) - (2.0 * PI * PI).sqrt()).abs() < 1e-14);
        let i20 = sp.lattice().index_of(Mode::new(2, 0)).unwrap();
        let phi2 = VorticityField::basis(3, i20, 1.0);
        assert!((sp.sobolev_norm(&phi2, 1.0) - 2.0 * sp.sobolev_norm(&phi2, 0.0)).abs() < 1e-14);
        assert_eq!(sp.sobolev_norm(&sp.zeros(), 1.5), 0.0);
    }

    #[test]
    fn parseval_against_grid_quadrature() {
        let sp = Spectral::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_field(&sp, &mut rng, 0.5);
        let g = sp.synthesize(&w);
        let m = sp.grid() as f64;
        let quad = (g.iter().map(|v| v * v).sum::<f64>() * (2.0 * PI / m).powi(2)).sqrt();
        let spec = sp.sobolev_norm(&w, 0.0);
        assert!(((quad - spec) / spec).abs() < 1e-10);
        // synthesized values agree with direct summation
        let x = [2.0 * PI * 3.0 / m, 2.0 * PI * 7.0 / m];
        assert!((g[3 * sp.grid() + 7] - sp.evaluate(&w, x)).abs() < 1e-12);
    }

    /// Truncated product via exact convolution of complex Fourier coefficients.
    fn convolution_oracle(sp: &Spectral, u: &VelocityField, w: &VorticityField) -> Vec<f64> {
        // Evaluate the product at a (5N)-point grid by direct summation and
        // project back with a plain DFT sum: exact for trigonometric
        // polynomials of degree 2N.
        let n = sp.n() as i32;
        let m = (4 * n + 1) as usize;
        let h = 2.0 * PI / m as f64;
        let d = sp.dim();
        let (mut g1, mut g2) = (vec![0.0; d], vec![0.0; d]);
        for i in 0..d {
            let md = sp.lattice().mode(i);
            let p = sp.lattice().partner(i);
            g1[p] = -(md.l1 as f64) * w.coefficients()[i];
            g2[p] = -(md.l2 as f64) * w.coefficients()[i];
        }
        let gw1 = VorticityField::from_coefficients(sp.n(), g1).unwrap();
        let gw2 = VorticityField::from_coefficients(sp.n(), g2).unwrap();
        let mut vals = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                let x = [a as f64 * h, b as f64 * h];
                let uv = eval_velocity(sp, u, x);
                vals[a * m + b] = uv[0] * sp.evaluate(&gw1, x) + uv[1] * sp.evaluate(&gw2, x);
            }
        }
        let mut out = vec![0.0; d];
        for i in 0..d {
            let md = sp.lattice().mode(i);
            let mut acc = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let phase = md.l1 as f64 * a as f64 * h + md.l2 as f64 * b as f64 * h;
                    let phi = if md.is_positive() { phase.sin() } else { -phase.cos() };
                    acc += vals[a * m + b] * phi;
                }
            }
            out[i] = acc / (m * m) as f64 * 2.0;
        }
        out
    }

    #[test]
    fn dealiased_product_matches_convolution() {
        let sp = Spectral::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_field(&sp, &mut rng, 0.0);
        let v = random_field(&sp, &mut rng, 0.0);
        let u = sp.biot_savart(&v);
        let got = sp.bilinear_b(&u, &w);
        let want = convolution_oracle(&sp, &u, &w);
        assert!(rel(got.coefficients(), &want) < 1e-12, "rel {}", rel(got.coefficients(), &want));
    }

    #[test]
    fn single_modes_are_steady() {
        let sp = Spectral::new(4);
        for m in [Mode::new(1, 0), Mode::new(1, 1), Mode::new(-2, 1)] {
            let w = VorticityField::basis(4, sp.lattice().index_of(m).unwrap(), 1.3);
            assert!(sp.nonlinear(&w).coef_norm() < 1e-13);
            assert!(sp.tilde_b(&w, &w).coef_norm() < 1e-13);
        }
    }

    #[test]
    fn transport_conserves_enstrophy() {
        let sp = Spectral::new(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let w = random_field(&sp, &mut rng, 0.0);
            let v = random_field(&sp, &mut rng, 0.0);
            let u = sp.biot_savart(&v);
            let b = sp.bilinear_b(&u, &w);
            let scale = u.coef_norm() * sp.sobolev_norm(&w, 1.0) * w.coef_norm();
            assert!(b.dot(&w).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn tilde_b_matches_finite_difference_of_nonlinearity() {
        let sp = Spectral::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_field(&sp, &mut rng, 0.0);
        let v = random_field(&sp, &mut rng, 0.0);
        let eps = 1e-5;
        let plus = sp.nonlinear(&w.add(&v.scaled(eps)));
        let minus = sp.nonlinear(&w.sub(&v.scaled(eps)));
        let fd = plus.sub(&minus).scaled(0.5 / eps);
        let tb = sp.tilde_b(&w, &v);
        assert!(rel(fd.coefficients(), tb.coefficients()) < 1e-6);
        assert!(sp.tilde_b(&w, &sp.zeros()).coef_norm() == 0.0);
        // symmetry
        let tb2 = sp.tilde_b(&v, &w);
        assert!(rel(tb2.coefficients(), tb.coefficients()) < 1e-13);
    }

    #[test]
    fn adjoint_of_tilde_b() {
        let sp = Spectral::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_field(&sp, &mut rng, 0.0);
        let fs = sp.freeze(&w);
        for _ in 0..5 {
            let v = random_field(&sp, &mut rng, 0.0);
            let e = random_field(&sp, &mut rng, 0.0);
            let mut tv = vec![0.0; sp.dim()];
            let mut te = vec![0.0; sp.dim()];
            sp.tilde_b_frozen(&fs, v.coefficients(), &mut tv);
            sp.tilde_b_frozen_adjoint(&fs, e.coefficients(), &mut te);
            let lhs = crate::field::dot(&tv, e.coefficients());
            let rhs = crate::field::dot(v.coefficients(), &te);
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
