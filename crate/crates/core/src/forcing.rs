//! Forcing mode sets, the lattice-generation hypothesis on them, and the
//! noise injection map into the truncated vorticity space.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Mode};

/// Default forcing amplitude. With `b = 1` the explicit step is unstable at
/// `N = 8`, `ν = 0.1` for every `dt ≥ 1/256`; `b = 1/4` stays stable up to
/// `dt = 1/16`.
pub const STANDARD_AMPLITUDE: f64 = 0.25;

/// A finite set of directly forced Fourier modes with nonzero amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSet {
    modes: Vec<Mode>,
    amplitudes: Vec<f64>,
}

impl ForcingSet {
    /// Builds a forcing set, rejecting empty sets, zero modes, duplicates and
    /// zero or non-finite amplitudes.
    ///
    /// Symmetry is *not* enforced here; it is one clause of [`check_condition_h`].
    pub fn new(modes: Vec<Mode>, amplitudes: Vec<f64>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Validation("forcing set is empty".into()));
        }
        if modes.len() != amplitudes.len() {
            return Err(Error::Validation(format!(
                "{} modes but {} amplitudes",
                modes.len(),
                amplitudes.len()
            )));
        }
        for (i, m) in modes.iter().enumerate() {
            if m.is_zero() {
                return Err(Error::Validation("forcing set contains the zero mode (0,0)".into()));
            }
            if modes[..i].contains(m) {
                return Err(Error::Validation(format!("duplicate forcing mode {m}")));
            }
        }
        for (m, b) in modes.iter().zip(&amplitudes) {
            if *b == 0.0 || !b.is_finite() {
                return Err(Error::Validation(format!("amplitude of mode {m} must be finite and nonzero, got {b}")));
            }
        }
        Ok(Self { modes, amplitudes })
    }

    /// All amplitudes equal to `b`.
    pub fn uniform(modes: Vec<Mode>, b: f64) -> Result<Self> {
        let n = modes.len();
        Self::new(modes, vec![b; n])
    }

    /// `{(1,0), (-1,0), (1,1), (-1,-1)}` with amplitude [`STANDARD_AMPLITUDE`].
    pub fn standard() -> Self {
        Self::uniform(
            vec![Mode::new(1, 0), Mode::new(-1, 0), Mode::new(1, 1), Mode::new(-1, -1)],
            STANDARD_AMPLITUDE,
        )
        .expect("static forcing set is valid")
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Sum of squared amplitudes.
    pub fn b0(&self) -> f64 {
        self.amplitudes.iter().map(|b| b * b).sum()
    }

    pub fn max_linf(&self) -> u32 {
        self.modes.iter().map(|m| m.linf()).max().unwrap_or(0)
    }

    /// Returns a copy with `m` and `-m` added (amplitude `b`), skipping modes
    /// already present.
    pub fn with_symmetric_pair(&self, m: Mode, b: f64) -> Result<Self> {
        let mut modes = self.modes.clone();
        let mut amps = self.amplitudes.clone();
        for mm in [m, m.neg()] {
            if !modes.contains(&mm) {
                modes.push(mm);
                amps.push(b);
            }
        }
        Self::new(modes, amps)
    }
}

/// Which clause of the forcing hypothesis failed first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionFailure {
    NotSymmetric,
    NotAGenerator,
    EqualNorms,
}

impl ConditionFailure {
    pub fn reason(self) -> &'static str {
        match self {
            ConditionFailure::NotSymmetric => "not symmetric",
            ConditionFailure::NotAGenerator => "not a generator",
            ConditionFailure::EqualNorms => "all non-parallel pairs have equal norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionDecision {
    pub condition_h: bool,
    pub failure: Option<ConditionFailure>,
    pub reason: Option<String>,
    /// gcd of all 2x2 minors of the mode matrix (1 iff the modes generate Z^2).
    pub minor_gcd: u64,
    pub modes: Vec<[i32; 2]>,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Decides the forcing hypothesis: symmetric, generates the integer lattice,
/// and holds two non-parallel modes of different Euclidean length.
///
/// All arithmetic is exact on integers.
pub fn check_condition_h(k: &ForcingSet) -> ConditionDecision {
    let modes = k.modes();
    let mut minor_gcd = 0u64;
    for (i, a) in modes.iter().enumerate() {
        for b in &modes[i + 1..] {
            minor_gcd = gcd(minor_gcd, a.cross(*b).unsigned_abs());
        }
    }
    let symmetric = modes.iter().all(|m| modes.contains(&m.neg()));
    let generator = minor_gcd == 1;
    let distinct_norms = modes.iter().enumerate().any(|(i, a)| {
        modes[i + 1..]
            .iter()
            .any(|b| a.cross(*b) != 0 && a.norm2() != b.norm2())
    });
    let failure = if !symmetric {
        Some(ConditionFailure::NotSymmetric)
    } else if !generator {
        Some(ConditionFailure::NotAGenerator)
    } else if !distinct_norms {
        Some(ConditionFailure::EqualNorms)
    } else {
        None
    };
    ConditionDecision {
        condition_h: failure.is_none(),
        failure,
        reason: failure.map(|f| f.reason().to_string()),
        minor_gcd,
        modes: modes.iter().map(|m| [m.l1, m.l2]).collect(),
    }
}

/// The linear map from R^d (one coordinate per forced mode) into the
/// truncated vorticity coefficients: column `i` is `b_i |l_i|^2` at the
/// lattice index of `l_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseInjection {
    truncation: u32,
    index: Vec<usize>,
    gain: Vec<f64>,
    dim: usize,
}

impl NoiseInjection {
    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    /// Number of noise directions d = |K|.
    pub fn d(&self) -> usize {
        self.index.len()
    }

    /// Dimension of the target coefficient space.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lattice index of the mode driven by direction `i`.
    pub fn index(&self, i: usize) -> usize {
        self.index[i]
    }

    /// `b_i |l_i|^2`.
    pub fn gain(&self, i: usize) -> f64 {
        self.gain[i]
    }

    /// out += scale * Q theta.
    pub fn apply_add(&self, theta: &[f64], scale: f64, out: &mut [f64]) {
        for ((&idx, &g), &t) in self.index.iter().zip(&self.gain).zip(theta) {
            out[idx] += scale * g * t;
        }
    }

    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_add(theta, 1.0, &mut out);
        out
    }

    /// Q^T xi with respect to the Euclidean coefficient inner product.
    pub fn adjoint(&self, xi: &[f64]) -> Vec<f64> {
        self.index
            .iter()
            .zip(&self.gain)
            .map(|(&idx, &g)| g * xi[idx])
            .collect()
    }
}

/// Builds Q on the lattice of truncation `lattice.n()`.
pub fn build_injection(k: &ForcingSet, lattice: &Lattice) -> Result<NoiseInjection> {
    let mut index = Vec::with_capacity(k.len());
    let mut gain = Vec::with_capacity(k.len());
    for (m, &b) in k.modes().iter().zip(k.amplitudes()) {
        let idx = lattice.index_of(*m).ok_or_else(|| {
            Error::Configuration(format!(
                "forcing mode {m} lies outside the truncation N = {}",
                lattice.n()
            ))
        })?;
        index.push(idx);
        gain.push(b * m.norm2() as f64);
    }
    Ok(NoiseInjection {
        truncation: lattice.n(),
        index,
        gain,
        dim: lattice.dim(),
    })
}
