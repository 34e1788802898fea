//! Bounded smooth functionals of the velocity field built from a finite
//! projection and a scalar profile.
//!
//! The projection coordinate of mode `l` is the component of `u = K w` along
//! `l^⊥ / |l|` at basis function `φ_l`, which in vorticity coefficients is
//! `y_l = -c_{-l} / |l|`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Mode};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `c`.
    Constant { value: f64 },
    /// `a · s` with `s = Σ_j y_j` (unbounded; allowed in the ψ slot only).
    Coordinate { amplitude: f64 },
    /// `a · tanh(s / σ)` with `s = Σ_j y_j`.
    Tanh { amplitude: f64, scale: f64 },
    /// `a · exp(-|y - c|² / (2σ²))`.
    Bump { amplitude: f64, width: f64, center: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observable {
    pub name: String,
    pub modes: Vec<Mode>,
    #[serde(skip)]
    partner_index: Vec<usize>,
    #[serde(skip)]
    inv_norm: Vec<f64>,
    pub profile: Profile,
}

impl Observable {
    pub fn new(name: &str, lattice: &Lattice, modes: Vec<Mode>, profile: Profile) -> Result<Self> {
        let mut partner_index = Vec::with_capacity(modes.len());
        let mut inv_norm = Vec::with_capacity(modes.len());
        for m in &modes {
            let idx = lattice.index_of(m.neg()).ok_or_else(|| {
                Error::Configuration(format!("observable mode {m} lies outside the truncation N = {}", lattice.n()))
            })?;
            partner_index.push(idx);
            inv_norm.push(1.0 / (m.norm2() as f64).sqrt());
        }
        match &profile {
            Profile::Tanh { scale, .. } if *scale <= 0.0 => {
                return Err(Error::Validation("tanh scale must be positive".into()))
            }
            Profile::Bump { width, center, .. } => {
                if *width <= 0.0 {
                    return Err(Error::Validation("bump width must be positive".into()));
                }
                if center.len() != modes.len() {
                    return Err(Error::Validation("bump center must have one entry per mode".into()));
                }
            }
            _ => {}
        }
        if modes.is_empty() && !matches!(profile, Profile::Constant { .. }) {
            return Err(Error::Validation("non-constant observable needs at least one mode".into()));
        }
        Ok(Self {
            name: name.to_string(),
            modes,
            partner_index,
            inv_norm,
            profile,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            name: format!("const({value})"),
            modes: vec![],
            partner_index: vec![],
            inv_norm: vec![],
            profile: Profile::Constant { value },
        }
    }

    pub fn tanh(lattice: &Lattice, mode: Mode, amplitude: f64, scale: f64) -> Result<Self> {
        Self::new(
            &format!("{amplitude}*tanh(u{mode}/{scale})"),
            lattice,
            vec![mode],
            Profile::Tanh { amplitude, scale },
        )
    }

    pub fn bump(lattice: &Lattice, mode: Mode, amplitude: f64, width: f64) -> Result<Self> {
        Self::new(
            &format!("{amplitude}*bump(u{mode};{width})"),
            lattice,
            vec![mode],
            Profile::Bump {
                amplitude,
                width,
                center: vec![0.0],
            },
        )
    }

    pub fn coordinate(lattice: &Lattice, mode: Mode, amplitude: f64) -> Result<Self> {
        Self::new(&format!("{amplitude}*u{mode}"), lattice, vec![mode], Profile::Coordinate { amplitude })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.profile, Profile::Constant { .. })
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self.profile, Profile::Coordinate { .. })
    }

    /// Projection coordinates `y_j`.
    pub fn project(&self, w: &[f64]) -> Vec<f64> {
        self.partner_index
            .iter()
            .zip(&self.inv_norm)
            .map(|(&p, &s)| -w[p] * s)
            .collect()
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        let y = self.project(w);
        match &self.profile {
            Profile::Constant { value } => *value,
            Profile::Coordinate { amplitude } => amplitude * y.iter().sum::<f64>(),
            Profile::Tanh { amplitude, scale } => amplitude * (y.iter().sum::<f64>() / scale).tanh(),
            Profile::Bump { amplitude, width, center } => {
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }

    /// `∂V/∂y_j`.
    fn profile_gradient(&self, y: &[f64]) -> Vec<f64> {
        match &self.profile {
            Profile::Constant { .. } => vec![0.0; y.len()],
            Profile::Coordinate { amplitude } => vec![*amplitude; y.len()],
            Profile::Tanh { amplitude, scale } => {
                let t = (y.iter().sum::<f64>() / scale).tanh();
                vec![amplitude * (1.0 - t * t) / scale; y.len()]
            }
            Profile::Bump { amplitude, width, center } => {
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                let g = amplitude * (-r2 / (2.0 * width * width)).exp();
                y.iter().zip(center).map(|(a, c)| -g * (a - c) / (width * width)).collect()
            }
        }
    }

    /// Gradient with respect to the vorticity coefficients, added into `out`
    /// with weight `scale`.
    pub fn gradient_add(&self, w: &[f64], scale: f64, out: &mut [f64]) {
        let y = self.project(w);
        let g = self.profile_gradient(&y);
        for ((&p, &s), gj) in self.partner_index.iter().zip(&self.inv_norm).zip(g) {
            out[p] -= scale * gj * s;
        }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.gradient_add(w, 1.0, &mut out);
        out
    }

    /// `<∇V(w), ξ>` without forming the gradient.
    pub fn directional(&self, w: &[f64], xi: &[f64]) -> f64 {
        let y = self.project(w);
        let g = self.profile_gradient(&y);
        self.partner_index
            .iter()
            .zip(&self.inv_norm)
            .zip(g)
            .map(|((&p, &s), gj)| -gj * s * xi[p])
            .sum()
    }

    /// `(inf V, sup V)` over the whole space.
    pub fn range(&self) -> (f64, f64) {
        match &self.profile {
            Profile::Constant { value } => (*value, *value),
            Profile::Coordinate { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Profile::Tanh { amplitude, .. } => (-amplitude.abs(), amplitude.abs()),
            Profile::Bump { amplitude, .. } => (amplitude.min(0.0), amplitude.max(0.0)),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        let (a, b) = self.range();
        a.abs().max(b.abs())
    }

    /// `sup |∇V|` in the Euclidean coefficient geometry.
    pub fn grad_sup_norm(&self) -> f64 {
        let max_s = self.inv_norm.iter().copied().fold(0.0, f64::max);
        let l2_s: f64 = self.inv_norm.iter().map(|s| s * s).sum::<f64>().sqrt();
        match &self.profile {
            Profile::Constant { .. } => 0.0,
            Profile::Coordinate { amplitude } => amplitude.abs() * l2_s,
            Profile::Tanh { amplitude, scale } => amplitude.abs() / scale * l2_s,
            // max of r exp(-r²/2σ²)/σ² is exp(-1/2)/σ
            Profile::Bump { amplitude, width, .. } => amplitude.abs() * (-0.5f64).exp() / width * max_s,
        }
    }

    /// `θ V` as an observable.
    pub fn scaled(&self, theta: f64) -> Self {
        let mut o = self.clone();
        o.name = format!("{theta}*{}", self.name);
        o.profile = match &self.profile {
            Profile::Constant { value } => Profile::Constant { value: theta * value },
            Profile::Coordinate { amplitude } => Profile::Coordinate { amplitude: theta * amplitude },
            Profile::Tanh { amplitude, scale } => Profile::Tanh {
                amplitude: theta * amplitude,
                scale: *scale,
            },
            Profile::Bump { amplitude, width, center } => Profile::Bump {
                amplitude: theta * amplitude,
                width: *width,
                center: center.clone(),
            },
        };
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VorticityField;
    use crate::spectral::Spectral;

    #[test]
    fn coordinate_matches_velocity() {
        let sp = Spectral::new(3);
        let lat = sp.lattice();
        let m = Mode::new(1, 2);
        let idx = lat.index_of(m).unwrap();
        // velocity component along m^⊥/|m| at φ_m, computed from Biot–Savart
        let w = VorticityField::basis(3, lat.partner(idx), 0.7);
        let u = sp.biot_savart(&w);
        let perp = [-(m.l2 as f64), m.l1 as f64];
        let n = (m.norm2() as f64).sqrt();
        let want = (perp[0] * u.u1()[idx] + perp[1] * u.u2()[idx]) / n;
        let o = Observable::coordinate(lat, m, 1.0).unwrap();
        assert!((o.eval(w.coefficients()) - want).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let lat = Lattice::new(3);
        let w: Vec<f64> = (0..lat.dim()).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let obs = [
            Observable::tanh(&lat, Mode::new(1, 0), 0.4, 0.7).unwrap(),
            Observable::bump(&lat, Mode::new(1, 1), 1.3, 0.5).unwrap(),
            Observable::coordinate(&lat, Mode::new(-2, 1), 2.0).unwrap(),
        ];
        for o in &obs {
            let g = o.gradient(&w);
            for p in 0..lat.dim() {
                let h = 1e-6;
                let mut a = w.clone();
                let mut b = w.clone();
                a[p] += h;
                b[p] -= h;
                let fd = (o.eval(&a) - o.eval(&b)) / (2.0 * h);
                assert!((fd - g[p]).abs() < 1e-8, "{} at {p}", o.name);
            }
            let xi: Vec<f64> = (0..lat.dim()).map(|i| (i as f64).sin()).collect();
            let dd = o.directional(&w, &xi);
            let dg: f64 = g.iter().zip(&xi).map(|(a, b)| a * b).sum();
            assert!((dd - dg).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_properties() {
        let c = Observable::constant(0.3);
        assert_eq!(c.eval(&[1.0, 2.0]), 0.3);
        assert_eq!(c.range(), (0.3, 0.3));
        assert_eq!(c.grad_sup_norm(), 0.0);
        assert_eq!(c.scaled(2.0).eval(&[]), 0.6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lat = Lattice::new(2);
        assert!(Observable::tanh(&lat, Mode::new(5, 0), 1.0, 1.0).is_err());
        assert!(Observable::tanh(&lat, Mode::new(1, 0), 1.0, 0.0).is_err());
    }
}
