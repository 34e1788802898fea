//! Monte-Carlo summaries: means with standard errors, least-squares fits,
//! bootstrap and jackknife resampling.

use rand::Rng;
use serde::Serialize;

use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = kahan_sum(x.iter().copied()) / n as f64;
        let stderr = if n > 1 {
            let ss = kahan_sum(x.iter().map(|v| (v - mean).powi(2)));
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Self { mean, stderr, n }
    }

    /// An exactly known value.
    pub fn exact(v: f64) -> Self {
        Self { mean: v, stderr: 0.0, n: 1 }
    }

    /// Sample variance and its standard error (normal-theory for the
    /// fourth central moment, estimated from the data).
    pub fn variance_of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let m = kahan_sum(x.iter().copied()) / n;
        let sq: Vec<f64> = x.iter().map(|v| (v - m).powi(2)).collect();
        let mut e = Self::from_samples(&sq);
        e.mean *= n / (n - 1.0);
        e
    }

    /// `|a - b| <= k * sqrt(se_a² + se_b²)`.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.mean - other.mean).abs() <= k * combined_se(self.stderr, other.stderr)
    }

    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr
    }
}

pub fn combined_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

pub fn kahan_sum(it: impl Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in it {
        let y = v - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

pub fn mean(x: &[f64]) -> f64 {
    kahan_sum(x.iter().copied()) / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub n: usize,
}

/// Ordinary least squares `y = a + b x`; standard errors from the residual
/// variance (NaN with fewer than three points).
pub fn ols(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len();
    assert_eq!(n, y.len());
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (slope_se, intercept_se) = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        let s2 = rss / (n - 2) as f64;
        let sum_x2: f64 = x.iter().map(|v| v * v).sum();
        ((s2 / sxx).sqrt(), (s2 * sum_x2 / (n as f64 * sxx)).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    LinearFit {
        slope,
        intercept,
        slope_se,
        intercept_se,
        n,
    }
}

/// Weighted least squares with weights `1/σ²`; the slope error is the
/// formal one from the weights.
pub fn wls(x: &[f64], y: &[f64], sigma: &[f64]) -> LinearFit {
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - mx) * (y[i] - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    LinearFit {
        slope,
        intercept,
        slope_se: (1.0 / sxx).sqrt(),
        intercept_se: (1.0 / sw + mx * mx / sxx).sqrt(),
        n: x.len(),
    }
}

/// Mean of a serially correlated series with the standard error from
/// `batches` contiguous batch means (plain iid error when the series is
/// shorter than two batches).
pub fn batch_means(x: &[f64], batches: usize) -> Estimate {
    let n = x.len();
    if batches < 2 || n < 2 * batches {
        return Estimate::from_samples(x);
    }
    let size = n / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&x[b * size..(b + 1) * size])).collect();
    let se = Estimate::from_samples(&means).stderr;
    Estimate { mean: mean(x), stderr: se, n }
}

/// `Σa / Σb` for paired samples with the delta-method standard error.
pub fn ratio_estimate(a: &[f64], b: &[f64]) -> Estimate {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mb = mean(b);
    let r = mean(a) / mb;
    let resid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
    let se = Estimate::from_samples(&resid).stderr / mb.abs();
    Estimate { mean: r, stderr: se, n }
}

/// Linear-interpolated sample quantile, `q` in [0, 1].
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `reps` bootstrap replicates of `stat`, which receives resampled indices
/// into a population of size `n`.
pub fn bootstrap<F>(n: usize, reps: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64,
{
    let mut rng = stream_rng(seed, u64::MAX);
    let mut idx = vec![0usize; n];
    (0..reps)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

pub fn percentile_interval(replicates: &[f64], level: f64) -> Interval {
    let a = (1.0 - level) / 2.0;
    Interval {
        lo: quantile(replicates, a),
        hi: quantile(replicates, 1.0 - a),
    }
}

/// Leave-one-group-out jackknife of `stat` over `groups` groups; returns the
/// full-sample statistic and its jackknife standard error.
pub fn jackknife<F>(groups: usize, stat: F) -> Estimate
where
    F: Fn(Option<usize>) -> f64,
{
    let full = stat(None);
    let leave: Vec<f64> = (0..groups).map(|g| stat(Some(g))).collect();
    let m = mean(&leave);
    let g = groups as f64;
    let var = (g - 1.0) / g * leave.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    Estimate {
        mean: full,
        stderr: var.sqrt(),
        n: groups,
    }
}
