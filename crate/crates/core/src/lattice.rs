//! The truncated Fourier lattice and its fixed enumeration.
//!
//! Sites `l` with `0 < |l|_inf <= N` are enumerated row-major over `l1`
//! then `l2`, both running from `-N` to `N`, skipping `(0,0)`. Both `l` and
//! `-l` appear: the real basis pairs them as `sin<l,x>` (the "positive"
//! representative) and `-cos<l,x>` (the "negative" one). This order is the
//! coefficient order of every field and of the snapshot format.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Mode {
    pub l1: i32,
    pub l2: i32,
}

impl Mode {
    pub const fn new(l1: i32, l2: i32) -> Self {
        Self { l1, l2 }
    }

    pub fn is_zero(self) -> bool {
        self.l1 == 0 && self.l2 == 0
    }

    pub fn neg(self) -> Self {
        Self::new(-self.l1, -self.l2)
    }

    pub fn norm2(self) -> i64 {
        (self.l1 as i64).pow(2) + (self.l2 as i64).pow(2)
    }

    pub fn linf(self) -> u32 {
        self.l1.unsigned_abs().max(self.l2.unsigned_abs())
    }

    /// `l1 m2 - l2 m1`; zero iff parallel.
    pub fn cross(self, m: Mode) -> i64 {
        self.l1 as i64 * m.l2 as i64 - self.l2 as i64 * m.l1 as i64
    }

    /// `l1 > 0`, or `l1 = 0` and `l2 > 0`: the basis function is `sin<l,x>`.
    pub fn is_positive(self) -> bool {
        self.l1 > 0 || (self.l1 == 0 && self.l2 > 0)
    }

    pub fn add(self, m: Mode) -> Self {
        Self::new(self.l1 + m.l1, self.l2 + m.l2)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.l1, self.l2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    n: u32,
    modes: Vec<Mode>,
    lookup: Vec<Option<usize>>,
    partner: Vec<usize>,
    norm2: Vec<f64>,
}

impl Lattice {
    pub fn new(n: u32) -> Self {
        assert!(n >= 1, "truncation must be positive");
        let ni = n as i32;
        let side = 2 * n as usize + 1;
        let mut modes = Vec::with_capacity(side * side - 1);
        let mut lookup = vec![None; side * side];
        for l1 in -ni..=ni {
            for l2 in -ni..=ni {
                if l1 == 0 && l2 == 0 {
                    continue;
                }
                let slot = (l1 + ni) as usize * side + (l2 + ni) as usize;
                lookup[slot] = Some(modes.len());
                modes.push(Mode::new(l1, l2));
            }
        }
        let side_i = side as i32;
        let partner = modes
            .iter()
            .map(|m| {
                let slot = (-m.l1 + ni) * side_i + (-m.l2 + ni);
                lookup[slot as usize].expect("lattice is symmetric")
            })
            .collect();
        let norm2 = modes.iter().map(|m| m.norm2() as f64).collect();
        Self {
            n,
            modes,
            lookup,
            partner,
            norm2,
        }
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// Number of real coefficients, `(2N+1)^2 - 1`.
    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, idx: usize) -> Mode {
        self.modes[idx]
    }

    pub fn index_of(&self, m: Mode) -> Option<usize> {
        if m.is_zero() || m.linf() > self.n {
            return None;
        }
        let ni = self.n as i32;
        let side = 2 * ni + 1;
        self.lookup[((m.l1 + ni) * side + (m.l2 + ni)) as usize]
    }

    /// Index of `-l` for the site at `idx`.
    pub fn partner(&self, idx: usize) -> usize {
        self.partner[idx]
    }

    /// `|l|^2` as a float.
    pub fn norm2(&self, idx: usize) -> f64 {
        self.norm2[idx]
    }

    pub fn norm2_all(&self) -> &[f64] {
        &self.norm2
    }
}
