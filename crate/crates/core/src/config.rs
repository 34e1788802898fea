//! Run configuration: a line-oriented `key = value` format with `[section]`
//! headers, `#` comments, and a canonical serialization that parses back to
//! the same value.
//!
//! ```text
//! seed = 7
//! [model]
//! n = 8
//! nu = 0.1
//! dt = 1/128
//! [forcing]
//! modes = (1,0) (-1,0) (1,1) (-1,-1)
//! amplitudes = 0.25 0.25 0.25 0.25
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{ConfigIssue, Error, Result};
use crate::forcing::{ForcingSet, STANDARD_AMPLITUDE};
use crate::lattice::{Lattice, Mode};
use crate::observable::Observable;

/// A catalog observable by name.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservableSpec {
    Constant(f64),
    Coordinate { mode: Mode, amplitude: f64 },
    Tanh { mode: Mode, amplitude: f64, scale: f64 },
    Bump { mode: Mode, amplitude: f64, width: f64 },
}

impl ObservableSpec {
    pub fn build(&self, lattice: &Lattice) -> Result<Observable> {
        match *self {
            ObservableSpec::Constant(c) => Ok(Observable::constant(c)),
            ObservableSpec::Coordinate { mode, amplitude } => Observable::coordinate(lattice, mode, amplitude),
            ObservableSpec::Tanh { mode, amplitude, scale } => Observable::tanh(lattice, mode, amplitude, scale),
            ObservableSpec::Bump { mode, amplitude, width } => Observable::bump(lattice, mode, amplitude, width),
        }
    }

    fn mode(&self) -> Option<Mode> {
        match *self {
            ObservableSpec::Constant(_) => None,
            ObservableSpec::Coordinate { mode, .. } | ObservableSpec::Tanh { mode, .. } | ObservableSpec::Bump { mode, .. } => Some(mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub n: u32,
    pub nu: f64,
    pub dt: f64,
    pub nonlinear: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSection {
    pub modes: Vec<Mode>,
    pub amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSection {
    pub horizon: f64,
    pub trajectories: usize,
    /// Time between recorded norms.
    pub sample_every: f64,
    pub gamma: Option<f64>,
    pub m: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentSection {
    pub horizon: f64,
    pub draws: usize,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinSection {
    pub dt: Option<f64>,
    pub beta: f64,
    pub betas: Vec<f64>,
    pub trajectories: usize,
    pub blocks: usize,
    pub burn_in: f64,
    pub bootstrap: usize,
    pub duality_n: u32,
    pub duality_dt: f64,
    pub duality_replicas: usize,
    pub duality_mode: Mode,
    pub gradient_horizon: f64,
    pub gradient_replicas: usize,
    pub fd_step: f64,
    /// Paths for the structural control checks.
    pub check_paths: usize,
    pub pairs: Vec<(ObservableSpec, ObservableSpec)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkSection {
    pub dt: Option<f64>,
    pub potential: ObservableSpec,
    pub ensemble: usize,
    pub units: usize,
    pub burn_in: usize,
    pub batches: usize,
    pub probes: usize,
    pub r0: Option<f64>,
    pub eigen_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FellerSection {
    pub potential: ObservableSpec,
    pub test: ObservableSpec,
    pub pairs: usize,
    pub sep_min: f64,
    pub sep_max: f64,
    pub radius: f64,
    pub times: Vec<f64>,
    pub ensemble: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpSection {
    pub potential: ObservableSpec,
    pub thetas: Vec<f64>,
    pub units: usize,
    pub burn_in: usize,
    pub ensemble: usize,
    pub batches: usize,
    pub ell_points: usize,
    pub occupation_horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSection {
    pub ms: Vec<u32>,
    pub gamma: Option<f64>,
    pub times: Vec<f64>,
    pub ensemble: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerSection {
    pub target: Vec<(Mode, f64)>,
    /// Defaults to a tenth of the target norm.
    pub tolerance: Option<f64>,
    pub horizon: f64,
    pub segments: usize,
    pub init_scale: f64,
    pub starts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 picks the number of available cores.
    pub threads: usize,
    pub out: String,
    pub model: ModelSection,
    pub forcing: ForcingSection,
    pub simulate: SimulateSection,
    pub tangent: TangentSection,
    pub malliavin: MalliavinSection,
    pub fk: FkSection,
    pub feller: FellerSection,
    pub ldp: LdpSection,
    pub growth: GrowthSection,
    pub steer: SteerSection,
}

fn standard_modes() -> Vec<Mode> {
    ForcingSet::standard().modes().to_vec()
}

impl Default for RunConfig {
    fn default() -> Self {
        let tanh = ObservableSpec::Tanh {
            mode: Mode::new(1, 0),
            amplitude: 0.1,
            scale: 1.0,
        };
        Self {
            seed: 1,
            threads: 0,
            out: "out".into(),
            model: ModelSection {
                n: 8,
                nu: 0.1,
                dt: 1.0 / 128.0,
                nonlinear: true,
            },
            forcing: ForcingSection {
                modes: standard_modes(),
                amplitudes: vec![STANDARD_AMPLITUDE; 4],
            },
            simulate: SimulateSection {
                horizon: 10.0,
                trajectories: 100,
                sample_every: 0.5,
                gamma: None,
                m: 1,
            },
            tangent: TangentSection {
                horizon: 1.0,
                draws: 50,
                epsilons: vec![1e-2, 1e-3, 1e-4],
            },
            malliavin: MalliavinSection {
                dt: None,
                beta: 1e-2,
                betas: vec![1e-4, 1e-3, 1e-2, 1e-1],
                trajectories: 2000,
                blocks: 6,
                burn_in: 5.0,
                bootstrap: 1000,
                duality_n: 4,
                duality_dt: 1.0 / 16.0,
                duality_replicas: 10000,
                duality_mode: Mode::new(1, 0),
                gradient_horizon: 2.0,
                gradient_replicas: 400,
                fd_step: 1e-4,
                check_paths: 50,
                pairs: vec![
                    (
                        tanh.clone(),
                        ObservableSpec::Bump {
                            mode: Mode::new(1, 1),
                            amplitude: 1.0,
                            width: 0.5,
                        },
                    ),
                    (
                        ObservableSpec::Bump {
                            mode: Mode::new(1, 0),
                            amplitude: 0.2,
                            width: 0.5,
                        },
                        ObservableSpec::Tanh {
                            mode: Mode::new(1, 1),
                            amplitude: 1.0,
                            scale: 0.5,
                        },
                    ),
                ],
            },
            fk: FkSection {
                dt: None,
                potential: tanh.clone(),
                ensemble: 1000,
                units: 12,
                burn_in: 4,
                batches: 4,
                probes: 16,
                r0: None,
                eigen_times: vec![4.0, 8.0],
            },
            feller: FellerSection {
                potential: tanh.clone(),
                test: ObservableSpec::Tanh {
                    mode: Mode::new(1, 1),
                    amplitude: 1.0,
                    scale: 0.5,
                },
                pairs: 12,
                sep_min: 1e-3,
                sep_max: 1e-1,
                radius: 1.0,
                times: vec![0.5, 1.0, 2.0],
                ensemble: 200,
            },
            ldp: LdpSection {
                potential: tanh,
                thetas: vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0],
                units: 24,
                burn_in: 4,
                ensemble: 400,
                batches: 5,
                ell_points: 41,
                occupation_horizon: 200.0,
            },
            growth: GrowthSection {
                ms: vec![1, 2, 3],
                gamma: None,
                times: (0..=10).map(|t| t as f64).collect(),
                ensemble: 200,
            },
            steer: SteerSection {
                target: vec![(Mode::new(2, 1), 0.1)],
                tolerance: None,
                horizon: 1.0,
                segments: 16,
                init_scale: 10.0,
                starts: 4,
            },
        }
    }
}

/// Whether `dt` splits `1/2` into a whole number of steps.
pub fn divides_half(dt: f64) -> bool {
    if !(dt > 0.0) || !dt.is_finite() {
        return false;
    }
    let r = 0.5 / dt;
    r >= 1.0 - 1e-12 && (r - r.round()).abs() <= 1e-9 * r.max(1.0)
}

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

fn show_f64(x: f64) -> String {
    format!("{x:?}")
}

impl Value for f64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v = if let Some((a, b)) = s.split_once('/') {
            let a: f64 = a.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
            a / b
        } else {
            s.parse().map_err(|_| format!("'{s}' is not a number"))?
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("'{s}' is not finite"))
        }
    }
    fn show(&self) -> String {
        let inv = 1.0 / self;
        if *self > 0.0 && *self < 1.0 && inv.fract() == 0.0 && inv < 1e15 && 1.0 / inv == *self {
            format!("1/{}", inv as u64)
        } else {
            show_f64(*self)
        }
    }
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("'{s}' is not a non-negative integer"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
int_value!(u64, u32, usize);

impl Value for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("'{s}' is not true or false")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for String {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            Err("empty string".into())
        } else {
            Ok(s.to_string())
        }
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl Value for Mode {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("'{s}' is not a mode like (1,0)"))?;
        let (a, b) = inner.split_once(',').ok_or_else(|| format!("'{s}' is not a mode like (1,0)"))?;
        let l1 = a.trim().parse().map_err(|_| format!("'{s}' is not a mode like (1,0)"))?;
        let l2 = b.trim().parse().map_err(|_| format!("'{s}' is not a mode like (1,0)"))?;
        Ok(Mode::new(l1, l2))
    }
    fn show(&self) -> String {
        format!("({},{})", self.l1, self.l2)
    }
}

/// Whitespace-separated list; modes may not contain spaces.
impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split_whitespace().map(T::parse).collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.show()).collect::<Vec<_>>().join(" ")
    }
}

impl Value for (Mode, f64) {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let (m, a) = s.split_once(':').ok_or_else(|| format!("'{s}' is not mode:amplitude"))?;
        Ok((Mode::parse(m)?, f64::parse(a)?))
    }
    fn show(&self) -> String {
        format!("{}:{}", self.0.show(), show_f64(self.1))
    }
}

impl Value for ObservableSpec {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let t: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> std::result::Result<f64, String> {
            t.get(i).ok_or_else(|| format!("observable '{s}' is missing arguments")).and_then(|x| f64::parse(x))
        };
        let mode = || -> std::result::Result<Mode, String> {
            t.get(1).ok_or_else(|| format!("observable '{s}' is missing its mode")).and_then(|x| Mode::parse(x))
        };
        let want = |n: usize| -> std::result::Result<(), String> {
            if t.len() == n {
                Ok(())
            } else {
                Err(format!("observable '{s}' takes {} arguments", n - 1))
            }
        };
        match t.first().copied() {
            Some("const") => {
                want(2)?;
                Ok(ObservableSpec::Constant(num(1)?))
            }
            Some("coord") => {
                want(3)?;
                Ok(ObservableSpec::Coordinate {
                    mode: mode()?,
                    amplitude: num(2)?,
                })
            }
            Some("tanh") => {
                want(4)?;
                Ok(ObservableSpec::Tanh {
                    mode: mode()?,
                    amplitude: num(2)?,
                    scale: num(3)?,
                })
            }
            Some("bump") => {
                want(4)?;
                Ok(ObservableSpec::Bump {
                    mode: mode()?,
                    amplitude: num(2)?,
                    width: num(3)?,
                })
            }
            _ => Err(format!("unknown observable '{s}' (const, coord, tanh, bump)")),
        }
    }
    fn show(&self) -> String {
        match self {
            ObservableSpec::Constant(c) => format!("const {}", show_f64(*c)),
            ObservableSpec::Coordinate { mode, amplitude } => format!("coord {} {}", mode.show(), show_f64(*amplitude)),
            ObservableSpec::Tanh { mode, amplitude, scale } => {
                format!("tanh {} {} {}", mode.show(), show_f64(*amplitude), show_f64(*scale))
            }
            ObservableSpec::Bump { mode, amplitude, width } => {
                format!("bump {} {} {}", mode.show(), show_f64(*amplitude), show_f64(*width))
            }
        }
    }
}

/// `V ; ψ` pairs separated by `|`.
impl Value for Vec<(ObservableSpec, ObservableSpec)> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split('|')
            .map(|p| {
                let (a, b) = p.split_once(';').ok_or_else(|| format!("'{p}' is not 'V ; psi'"))?;
                Ok((ObservableSpec::parse(a.trim())?, ObservableSpec::parse(b.trim())?))
            })
            .collect()
    }
    fn show(&self) -> String {
        self.iter().map(|(a, b)| format!("{} ; {}", a.show(), b.show())).collect::<Vec<_>>().join(" | ")
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Reader {
    entries: BTreeMap<(String, String), Entry>,
    used: HashSet<(String, String)>,
    issues: Vec<ConfigIssue>,
}

impl Reader {
    fn get<T: Value>(&mut self, section: &str, key: &str, default: T) -> T {
        let k = (section.to_string(), key.to_string());
        self.used.insert(k.clone());
        match self.entries.get(&k) {
            None => default,
            Some(e) => match T::parse(&e.value) {
                Ok(v) => v,
                Err(msg) => {
                    self.issues.push(ConfigIssue {
                        line: Some(e.line),
                        message: format!("{}: {msg}", qualified(section, key)),
                    });
                    default
                }
            },
        }
    }

    fn opt(&mut self, section: &str, key: &str, default: Option<f64>) -> Option<f64> {
        let k = (section.to_string(), key.to_string());
        if self.entries.contains_key(&k) {
            Some(self.get(section, key, default.unwrap_or(0.0)))
        } else {
            self.used.insert(k);
            default
        }
    }

    fn line(&self, section: &str, key: &str) -> Option<usize> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|e| e.line)
    }

    fn issue(&mut self, section: &str, key: &str, message: String) {
        let line = self.line(section, key);
        self.issues.push(ConfigIssue { line, message })
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

const SECTIONS: [&str; 11] = ["", "model", "forcing", "simulate", "tangent", "malliavin", "fk", "feller", "ldp", "growth", "steer"];

/// Parses and validates a configuration; every problem found is returned.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries = BTreeMap::new();
    let mut issues = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            match name.strip_suffix(']') {
                Some(n) if SECTIONS.contains(&n.trim()) && !n.trim().is_empty() => section = n.trim().to_string(),
                Some(n) => issues.push(ConfigIssue {
                    line: Some(line),
                    message: format!("unknown section [{}]", n.trim()),
                }),
                None => issues.push(ConfigIssue {
                    line: Some(line),
                    message: format!("malformed section header '{s}'"),
                }),
            }
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            issues.push(ConfigIssue {
                line: Some(line),
                message: format!("expected 'key = value', found '{s}'"),
            });
            continue;
        };
        let key = (section.clone(), k.trim().to_string());
        if let Some(prev) = entries.get(&key) {
            let prev: &Entry = prev;
            issues.push(ConfigIssue {
                line: Some(line),
                message: format!("{} already set on line {}", qualified(&key.0, &key.1), prev.line),
            });
            continue;
        }
        entries.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line,
            },
        );
    }
    let mut r = Reader {
        entries,
        used: HashSet::new(),
        issues,
    };
    let d = RunConfig::default();
    let cfg = RunConfig {
        seed: r.get("", "seed", d.seed),
        threads: r.get("", "threads", d.threads),
        out: r.get("", "out", d.out),
        model: ModelSection {
            n: r.get("model", "n", d.model.n),
            nu: r.get("model", "nu", d.model.nu),
            dt: r.get("model", "dt", d.model.dt),
            nonlinear: r.get("model", "nonlinear", d.model.nonlinear),
        },
        forcing: {
            let modes: Vec<Mode> = r.get("forcing", "modes", d.forcing.modes.clone());
            let default_amp = r.opt("forcing", "amplitude", None);
            let amps = match default_amp {
                Some(a) => vec![a; modes.len()],
                None if modes == d.forcing.modes => d.forcing.amplitudes.clone(),
                None => vec![STANDARD_AMPLITUDE; modes.len()],
            };
            let amplitudes = r.get("forcing", "amplitudes", amps);
            ForcingSection { modes, amplitudes }
        },
        simulate: SimulateSection {
            horizon: r.get("simulate", "horizon", d.simulate.horizon),
            trajectories: r.get("simulate", "trajectories", d.simulate.trajectories),
            sample_every: r.get("simulate", "sample_every", d.simulate.sample_every),
            gamma: r.opt("simulate", "gamma", d.simulate.gamma),
            m: r.get("simulate", "m", d.simulate.m),
        },
        tangent: TangentSection {
            horizon: r.get("tangent", "horizon", d.tangent.horizon),
            draws: r.get("tangent", "draws", d.tangent.draws),
            epsilons: r.get("tangent", "epsilons", d.tangent.epsilons.clone()),
        },
        malliavin: MalliavinSection {
            dt: r.opt("malliavin", "dt", d.malliavin.dt),
            beta: r.get("malliavin", "beta", d.malliavin.beta),
            betas: r.get("malliavin", "betas", d.malliavin.betas.clone()),
            trajectories: r.get("malliavin", "trajectories", d.malliavin.trajectories),
            blocks: r.get("malliavin", "blocks", d.malliavin.blocks),
            burn_in: r.get("malliavin", "burn_in", d.malliavin.burn_in),
            bootstrap: r.get("malliavin", "bootstrap", d.malliavin.bootstrap),
            duality_n: r.get("malliavin", "duality_n", d.malliavin.duality_n),
            duality_dt: r.get("malliavin", "duality_dt", d.malliavin.duality_dt),
            duality_replicas: r.get("malliavin", "duality_replicas", d.malliavin.duality_replicas),
            duality_mode: r.get("malliavin", "duality_mode", d.malliavin.duality_mode),
            gradient_horizon: r.get("malliavin", "gradient_horizon", d.malliavin.gradient_horizon),
            gradient_replicas: r.get("malliavin", "gradient_replicas", d.malliavin.gradient_replicas),
            fd_step: r.get("malliavin", "fd_step", d.malliavin.fd_step),
            check_paths: r.get("malliavin", "check_paths", d.malliavin.check_paths),
            pairs: r.get("malliavin", "pairs", d.malliavin.pairs.clone()),
        },
        fk: FkSection {
            dt: r.opt("fk", "dt", d.fk.dt),
            potential: r.get("fk", "potential", d.fk.potential.clone()),
            ensemble: r.get("fk", "ensemble", d.fk.ensemble),
            units: r.get("fk", "units", d.fk.units),
            burn_in: r.get("fk", "burn_in", d.fk.burn_in),
            batches: r.get("fk", "batches", d.fk.batches),
            probes: r.get("fk", "probes", d.fk.probes),
            r0: r.opt("fk", "r0", d.fk.r0),
            eigen_times: r.get("fk", "eigen_times", d.fk.eigen_times.clone()),
        },
        feller: FellerSection {
            potential: r.get("feller", "potential", d.feller.potential.clone()),
            test: r.get("feller", "test", d.feller.test.clone()),
            pairs: r.get("feller", "pairs", d.feller.pairs),
            sep_min: r.get("feller", "sep_min", d.feller.sep_min),
            sep_max: r.get("feller", "sep_max", d.feller.sep_max),
            radius: r.get("feller", "radius", d.feller.radius),
            times: r.get("feller", "times", d.feller.times.clone()),
            ensemble: r.get("feller", "ensemble", d.feller.ensemble),
        },
        ldp: LdpSection {
            potential: r.get("ldp", "potential", d.ldp.potential.clone()),
            thetas: r.get("ldp", "thetas", d.ldp.thetas.clone()),
            units: r.get("ldp", "units", d.ldp.units),
            burn_in: r.get("ldp", "burn_in", d.ldp.burn_in),
            ensemble: r.get("ldp", "ensemble", d.ldp.ensemble),
            batches: r.get("ldp", "batches", d.ldp.batches),
            ell_points: r.get("ldp", "ell_points", d.ldp.ell_points),
            occupation_horizon: r.get("ldp", "occupation_horizon", d.ldp.occupation_horizon),
        },
        growth: GrowthSection {
            ms: r.get("growth", "ms", d.growth.ms.clone()),
            gamma: r.opt("growth", "gamma", d.growth.gamma),
            times: r.get("growth", "times", d.growth.times.clone()),
            ensemble: r.get("growth", "ensemble", d.growth.ensemble),
        },
        steer: SteerSection {
            target: r.get("steer", "target", d.steer.target.clone()),
            tolerance: r.opt("steer", "tolerance", d.steer.tolerance),
            horizon: r.get("steer", "horizon", d.steer.horizon),
            segments: r.get("steer", "segments", d.steer.segments),
            init_scale: r.get("steer", "init_scale", d.steer.init_scale),
            starts: r.get("steer", "starts", d.steer.starts),
        },
    };
    let unknown: Vec<(String, usize)> = r
        .entries
        .iter()
        .filter(|(k, _)| !r.used.contains(*k))
        .map(|((s, k), e)| (qualified(s, k), e.line))
        .collect();
    for (k, line) in unknown {
        r.issues.push(ConfigIssue {
            line: Some(line),
            message: format!("unknown key '{k}'"),
        });
    }
    validate(&cfg, &mut r);
    if r.issues.is_empty() {
        Ok(cfg)
    } else {
        r.issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
        Err(Error::Config(r.issues))
    }
}

fn validate(c: &RunConfig, r: &mut Reader) {
    let n = c.model.n;
    if n == 0 {
        r.issue("model", "n", "model.n must be positive".into());
    }
    if !(c.model.nu > 0.0) {
        r.issue("model", "nu", "model.nu must be positive".into());
    }
    for (sec, dt) in [("model", Some(c.model.dt)), ("malliavin", c.malliavin.dt), ("fk", c.fk.dt)] {
        if let Some(dt) = dt {
            if !divides_half(dt) {
                r.issue(sec, "dt", format!("dt must divide 1/2 (got {sec}.dt = {dt})"));
            }
        }
    }
    if !divides_half(c.malliavin.duality_dt) {
        r.issue("malliavin", "duality_dt", format!("dt must divide 1/2 (got malliavin.duality_dt = {})", c.malliavin.duality_dt));
    }
    let f = &c.forcing;
    if f.modes.is_empty() {
        r.issue("forcing", "modes", "forcing set is empty".into());
    }
    let mut seen = HashSet::new();
    for m in &f.modes {
        if m.is_zero() {
            r.issue("forcing", "modes", "forcing mode (0,0) is not allowed".into());
        } else if m.linf() > n {
            r.issue("forcing", "modes", format!("forcing mode {m} lies outside the truncation N = {n}"));
        }
        if !seen.insert(*m) {
            r.issue("forcing", "modes", format!("duplicate forcing mode {m}"));
        }
    }
    if f.amplitudes.len() != f.modes.len() {
        r.issue(
            "forcing",
            "amplitudes",
            format!("{} amplitudes for {} modes", f.amplitudes.len(), f.modes.len()),
        );
    }
    if f.amplitudes.iter().any(|a| *a == 0.0) {
        r.issue("forcing", "amplitudes", "forcing amplitudes must be nonzero".into());
    }
    let check_obs = |r: &mut Reader, sec: &str, key: &str, o: &ObservableSpec, lim: u32| {
        if let Some(m) = o.mode() {
            if m.is_zero() || m.linf() > lim {
                r.issue(sec, key, format!("observable mode {m} lies outside the truncation N = {lim}"));
            }
        }
    };
    check_obs(r, "fk", "potential", &c.fk.potential, n);
    check_obs(r, "feller", "potential", &c.feller.potential, n);
    check_obs(r, "feller", "test", &c.feller.test, n);
    check_obs(r, "ldp", "potential", &c.ldp.potential, n);
    for (a, b) in &c.malliavin.pairs {
        check_obs(r, "malliavin", "pairs", a, n);
        check_obs(r, "malliavin", "pairs", b, n);
    }
    for (m, _) in &c.steer.target {
        if m.is_zero() || m.linf() > n {
            r.issue("steer", "target", format!("target mode {m} lies outside the truncation N = {n}"));
        }
    }
    let dm = c.malliavin.duality_mode;
    if dm.is_zero() || dm.linf() > c.malliavin.duality_n {
        r.issue("malliavin", "duality_mode", format!("mode {dm} lies outside the truncation N = {}", c.malliavin.duality_n));
    }
    if c.malliavin.betas.iter().chain([&c.malliavin.beta]).any(|b| !(*b > 0.0)) {
        r.issue("malliavin", "betas", "β values must be positive".into());
    }
}

impl RunConfig {
    pub fn forcing_set(&self) -> Result<ForcingSet> {
        ForcingSet::new(self.forcing.modes.clone(), self.forcing.amplitudes.clone())
    }

    /// Canonical text; parsing it returns `self`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.show());
        kv("threads", self.threads.show());
        kv("out", self.out.show());
        let mut s2 = s;
        let mut section = |name: &str, items: Vec<(&str, String)>| {
            let _ = writeln!(s2, "\n[{name}]");
            for (k, v) in items {
                let _ = writeln!(s2, "{k} = {v}");
            }
        };
        let m = &self.model;
        section(
            "model",
            vec![("n", m.n.show()), ("nu", m.nu.show()), ("dt", m.dt.show()), ("nonlinear", m.nonlinear.show())],
        );
        section(
            "forcing",
            vec![("modes", self.forcing.modes.show()), ("amplitudes", self.forcing.amplitudes.show())],
        );
        let sm = &self.simulate;
        let mut items = vec![
            ("horizon", sm.horizon.show()),
            ("trajectories", sm.trajectories.show()),
            ("sample_every", sm.sample_every.show()),
            ("m", sm.m.show()),
        ];
        if let Some(g) = sm.gamma {
            items.push(("gamma", g.show()));
        }
        section("simulate", items);
        let t = &self.tangent;
        section(
            "tangent",
            vec![("horizon", t.horizon.show()), ("draws", t.draws.show()), ("epsilons", t.epsilons.show())],
        );
        let ml = &self.malliavin;
        let mut items = vec![
            ("beta", ml.beta.show()),
            ("betas", ml.betas.show()),
            ("trajectories", ml.trajectories.show()),
            ("blocks", ml.blocks.show()),
            ("burn_in", ml.burn_in.show()),
            ("bootstrap", ml.bootstrap.show()),
            ("duality_n", ml.duality_n.show()),
            ("duality_dt", ml.duality_dt.show()),
            ("duality_replicas", ml.duality_replicas.show()),
            ("duality_mode", ml.duality_mode.show()),
            ("gradient_horizon", ml.gradient_horizon.show()),
            ("gradient_replicas", ml.gradient_replicas.show()),
            ("fd_step", ml.fd_step.show()),
            ("check_paths", ml.check_paths.show()),
            ("pairs", ml.pairs.show()),
        ];
        if let Some(dt) = ml.dt {
            items.insert(0, ("dt", dt.show()));
        }
        section("malliavin", items);
        let fk = &self.fk;
        let mut items = vec![
            ("potential", fk.potential.show()),
            ("ensemble", fk.ensemble.show()),
            ("units", fk.units.show()),
            ("burn_in", fk.burn_in.show()),
            ("batches", fk.batches.show()),
            ("probes", fk.probes.show()),
            ("eigen_times", fk.eigen_times.show()),
        ];
        if let Some(dt) = fk.dt {
            items.insert(0, ("dt", dt.show()));
        }
        if let Some(r0) = fk.r0 {
            items.push(("r0", r0.show()));
        }
        section("fk", items);
        let fe = &self.feller;
        section(
            "feller",
            vec![
                ("potential", fe.potential.show()),
                ("test", fe.test.show()),
                ("pairs", fe.pairs.show()),
                ("sep_min", fe.sep_min.show()),
                ("sep_max", fe.sep_max.show()),
                ("radius", fe.radius.show()),
                ("times", fe.times.show()),
                ("ensemble", fe.ensemble.show()),
            ],
        );
        let l = &self.ldp;
        section(
            "ldp",
            vec![
                ("potential", l.potential.show()),
                ("thetas", l.thetas.show()),
                ("units", l.units.show()),
                ("burn_in", l.burn_in.show()),
                ("ensemble", l.ensemble.show()),
                ("batches", l.batches.show()),
                ("ell_points", l.ell_points.show()),
                ("occupation_horizon", l.occupation_horizon.show()),
            ],
        );
        let g = &self.growth;
        let mut items = vec![("ms", g.ms.show()), ("times", g.times.show()), ("ensemble", g.ensemble.show())];
        if let Some(gm) = g.gamma {
            items.push(("gamma", gm.show()));
        }
        section("growth", items);
        let st = &self.steer;
        let mut items = vec![
            ("target", st.target.show()),
            ("horizon", st.horizon.show()),
            ("segments", st.segments.show()),
            ("init_scale", st.init_scale.show()),
            ("starts", st.starts.show()),
        ];
        if let Some(t) = st.tolerance {
            items.push(("tolerance", t.show()));
        }
        section("steer", items);
        s2
    }

    /// SHA-256 of [`RunConfig::serialize`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = "[model]\nn = 8\nnu = 0.1\ndt = 1/128\n[forcing]\nmodes = (1,0) (-1,0) (1,1) (-1,-1)\namplitudes = 0.25 0.25 0.25 0.25\n";

    fn issues(text: &str) -> Vec<ConfigIssue> {
        match parse_config(text) {
            Err(Error::Config(v)) => v,
            other => panic!("expected config issues, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.model.n, 8);
        assert_eq!(c.model.dt, 1.0 / 128.0);
        assert!(crate::check_condition_h(&c.forcing_set().unwrap()).condition_h);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn dt_divisibility() {
        assert!(parse_config("[model]\ndt = 1/100\n").is_ok());
        let v = issues("[model]\ndt = 3e-3\n");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].line, Some(2));
        assert!(v[0].message.contains("dt must divide 1/2"));
        assert!(!divides_half(0.3));
        assert!(divides_half(0.5));
    }

    #[test]
    fn duplicate_mode_is_named() {
        let v = issues("[forcing]\nmodes = (1,0) (1,0) (1,1)\n");
        assert!(v.iter().any(|i| i.message.contains("duplicate forcing mode (1,0)") && i.line == Some(2)));
    }

    #[test]
    fn all_errors_are_reported() {
        let text = "seeed = 3\n[model]\nn = x\nnu = -1\n[bogus]\n[fk]\npotential = tanh (20,0) 1 1\n junk line\n";
        let v = issues(text);
        let lines: Vec<_> = v.iter().map(|i| i.line).collect();
        assert!(lines.contains(&Some(1)), "{v:?}");
        assert!(lines.contains(&Some(3)));
        assert!(lines.contains(&Some(4)));
        assert!(lines.contains(&Some(5)));
        assert!(lines.contains(&Some(7)));
        assert!(lines.contains(&Some(8)));
        assert!(v.iter().any(|i| i.message.contains("unknown key 'seeed'")));
    }

    #[test]
    fn repeated_key_is_an_error() {
        let v = issues("seed = 1\nseed = 2\n");
        assert_eq!(v[0].line, Some(2));
    }

    #[test]
    fn default_round_trips_and_hash_is_stable() {
        let c = RunConfig::default();
        let text = c.serialize();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.seed = 2;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn optional_keys_round_trip() {
        let mut c = RunConfig::default();
        c.malliavin.dt = Some(1.0 / 32.0);
        c.fk.r0 = Some(3.25);
        c.steer.tolerance = Some(1e-3);
        c.simulate.gamma = Some(0.5);
        c.growth.gamma = Some(0.125);
        c.forcing.amplitudes = vec![1.0, -0.5, 0.3, 0.1];
        assert_eq!(parse_config(&c.serialize()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn numeric_fields_round_trip(seed in any::<u64>(), nu in 1e-3f64..10.0, k in 1u32..9, beta in 1e-8f64..1.0, amp in -3.0f64..3.0) {
            prop_assume!(amp != 0.0);
            let mut c = RunConfig::default();
            c.seed = seed;
            c.model.nu = nu;
            c.model.dt = 0.5 / k as f64;
            c.malliavin.beta = beta;
            c.forcing.amplitudes[2] = amp;
            let back = parse_config(&c.serialize()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
