//! Coefficient-space field types and small dense vector helpers.

use crate::error::{Error, Result};

/// ‖φ_l‖² on the torus (2π)² for every basis function.
pub const BASIS_NORM2: f64 = 2.0 * std::f64::consts::PI * std::f64::consts::PI;

/// Scalar vorticity `w = Σ_l c_l φ_l` on the truncated lattice.
///
/// `coef[i]` is the expansion coefficient of the basis function at lattice
/// index `i` (so `<w, φ_l> = 2π² c_l`). The zero mode is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct VorticityField {
    n: u32,
    coef: Vec<f64>,
}

/// Perturbations of the vorticity share the storage layout.
pub type TangentField = VorticityField;

impl VorticityField {
    pub fn zeros(n: u32) -> Self {
        let side = 2 * n as usize + 1;
        Self {
            n,
            coef: vec![0.0; side * side - 1],
        }
    }

    pub fn from_coefficients(n: u32, coef: Vec<f64>) -> Result<Self> {
        let side = 2 * n as usize + 1;
        if coef.len() != side * side - 1 {
            return Err(Error::Validation(format!(
                "expected {} coefficients for N = {n}, got {}",
                side * side - 1,
                coef.len()
            )));
        }
        if let Some(i) = coef.iter().position(|c| !c.is_finite()) {
            return Err(Error::Validation(format!("coefficient {i} is not finite")));
        }
        Ok(Self { n, coef })
    }

    /// A single basis function `amp * φ` at lattice index `idx`.
    pub fn basis(n: u32, idx: usize, amp: f64) -> Self {
        let mut f = Self::zeros(n);
        f.coef[idx] = amp;
        f
    }

    pub fn truncation(&self) -> u32 {
        self.n
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coef
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coef
    }

    pub fn len(&self) -> usize {
        self.coef.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coef.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.coef.iter().all(|c| c.is_finite())
    }

    /// Euclidean norm of the coefficient vector (the Galerkin-coordinate norm
    /// used by the variational layer).
    pub fn coef_norm(&self) -> f64 {
        norm(&self.coef)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.coef, &other.coef)
    }

    /// self += alpha * x
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        axpy(alpha, &x.coef, &mut self.coef);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            n: self.n,
            coef: self.coef.iter().map(|c| alpha * c).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            n: self.n,
            coef: self.coef.iter().zip(&other.coef).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            n: self.n,
            coef: self.coef.iter().zip(&other.coef).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Velocity `u = (u1, u2)`, each component expanded in the same real basis.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    n: u32,
    u1: Vec<f64>,
    u2: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(n: u32) -> Self {
        let w = VorticityField::zeros(n);
        Self {
            n,
            u1: w.coef.clone(),
            u2: w.coef,
        }
    }

    pub fn from_components(n: u32, u1: Vec<f64>, u2: Vec<f64>) -> Result<Self> {
        let a = VorticityField::from_coefficients(n, u1)?;
        let b = VorticityField::from_coefficients(n, u2)?;
        Ok(Self {
            n,
            u1: a.coef,
            u2: b.coef,
        })
    }

    pub fn truncation(&self) -> u32 {
        self.n
    }

    pub fn u1(&self) -> &[f64] {
        &self.u1
    }

    pub fn u2(&self) -> &[f64] {
        &self.u2
    }

    pub fn components_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.u1, &mut self.u2)
    }

    pub fn coef_norm(&self) -> f64 {
        (dot(&self.u1, &self.u1) + dot(&self.u2, &self.u2)).sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
