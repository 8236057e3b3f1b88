//! Synchronization measures: the quadrature-difference measure `S_c`, its
//! time average and pairwise matrices, and classical phase locking.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluctuations::CovarianceSample;
use crate::lattice::SiteRole;
use crate::meanfield::Trajectory;

/// Analysis interval `[t_i, t_f]` in units of 1/ω0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub t_i: f64,
    pub t_f: f64,
}

impl TimeWindow {
    pub fn new(t_i: f64, t_f: f64) -> Result<Self> {
        if !(t_f > t_i) || !t_i.is_finite() || !t_f.is_finite() {
            return Err(Error::InvalidInput(format!(
                "window needs t_f > t_i, got [{t_i}, {t_f}]"
            )));
        }
        Ok(Self { t_i, t_f })
    }

    pub fn length(&self) -> f64 {
        self.t_f - self.t_i
    }

    fn slack(&self) -> f64 {
        1e-9 * self.t_f.abs().max(1.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_i - self.slack() && t <= self.t_f + self.slack()
    }
}

/// Default multiple of the bulk median above which a pair counts as
/// significantly synchronized.
pub const SIGNIFICANCE_RATIO: f64 = 1.5;

/// Default drift tolerance for phase locking, in units of ω0.
pub const PHASE_LOCK_TOL: f64 = 1e-4;

fn difference_variance(c: &DMatrix<f64>, j: usize, k: usize) -> f64 {
    let (j, k) = (j.min(k), j.max(k));
    let (xj, pj, xk, pk) = (2 * j, 2 * j + 1, 2 * k, 2 * k + 1);
    let cross = c[(xj, xk)] + c[(xk, xj)] + c[(pj, pk)] + c[(pk, pj)];
    c[(xj, xj)] + c[(xk, xk)] + c[(pj, pj)] + c[(pk, pk)] - cross
}

/// Inverse summed variance of the quadrature differences of sites `j`, `k`.
pub fn s_c_instantaneous(c: &DMatrix<f64>, j: usize, k: usize) -> Result<f64> {
    let n = c.nrows() / 2;
    if c.nrows() != c.ncols() || c.nrows() % 2 != 0 {
        return Err(Error::InvalidInput("covariance must be square with even dimension".into()));
    }
    for idx in [j, k] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    if j == k {
        return Err(Error::InvalidInput("S_c needs two distinct sites".into()));
    }
    let d = difference_variance(c, j, k);
    if !(d > 0.0) {
        return Err(Error::Physicality {
            time: f64::NAN,
            detail: format!("non-positive difference variance {d:e} for pair ({j}, {k})"),
        });
    }
    Ok(1.0 / d)
}

/// Trapezoidal time average of `S_c(j, k)` over the samples inside `window`.
pub fn s_c_time_average(
    samples: &[CovarianceSample],
    j: usize,
    k: usize,
    window: &TimeWindow,
) -> Result<f64> {
    let mut acc = Trapezoid::default();
    for s in samples.iter().filter(|s| window.contains(s.t)) {
        let v = s_c_instantaneous(&s.matrix, j, k).map_err(|e| at_time(e, s.t))?;
        acc.push(s.t, &[v]);
    }
    Ok(acc.finish(window, samples)?[0])
}

fn at_time(err: Error, t: f64) -> Error {
    match err {
        Error::Physicality { detail, .. } => Error::Physicality { time: t, detail },
        other => other,
    }
}

#[derive(Debug, Default)]
struct Trapezoid {
    sums: Vec<f64>,
    prev: Option<(f64, Vec<f64>)>,
    first: Option<f64>,
}

impl Trapezoid {
    fn push(&mut self, t: f64, values: &[f64]) {
        if self.sums.is_empty() {
            self.sums = vec![0.0; values.len()];
        }
        if let Some((tp, prev)) = &self.prev {
            let h = 0.5 * (t - tp);
            for ((s, a), b) in self.sums.iter_mut().zip(prev).zip(values) {
                *s += h * (a + b);
            }
        }
        self.first.get_or_insert(t);
        match &mut self.prev {
            Some((tp, prev)) => {
                *tp = t;
                prev.copy_from_slice(values);
            }
            None => self.prev = Some((t, values.to_vec())),
        }
    }

    fn span(&self) -> Option<(f64, f64)> {
        Some((self.first?, self.prev.as_ref()?.0))
    }

    fn finish_span(self, window: &TimeWindow, data: (f64, f64)) -> Result<Vec<f64>> {
        let outside = || Error::WindowOutsideData {
            t_i: window.t_i,
            t_f: window.t_f,
            data_start: data.0,
            data_end: data.1,
        };
        let (a, b) = self.span().ok_or_else(outside)?;
        let tol = window.slack() + 1e-6 * window.length();
        if a > window.t_i + tol || b < window.t_f - tol || !(b > a) {
            return Err(outside());
        }
        let len = b - a;
        Ok(self.sums.into_iter().map(|s| s / len).collect())
    }

    fn finish(self, window: &TimeWindow, samples: &[CovarianceSample]) -> Result<Vec<f64>> {
        let data = (
            samples.first().map_or(f64::NAN, |s| s.t),
            samples.last().map_or(f64::NAN, |s| s.t),
        );
        self.finish_span(window, data)
    }
}

/// Streaming time average of `S_c` over all pairs. Feed covariance samples
/// in time order with [`SyncAccumulator::push`]; samples outside the window
/// are ignored.
#[derive(Debug)]
pub struct SyncAccumulator {
    n: usize,
    window: TimeWindow,
    trapezoid: Trapezoid,
    scratch: Vec<f64>,
    data: (f64, f64),
}

impl SyncAccumulator {
    pub fn new(n_sites: usize, window: TimeWindow) -> Self {
        Self {
            n: n_sites,
            window,
            trapezoid: Trapezoid::default(),
            scratch: vec![0.0; n_sites * n_sites.saturating_sub(1) / 2],
            data: (f64::NAN, f64::NAN),
        }
    }

    pub fn push(&mut self, t: f64, c: &DMatrix<f64>) -> Result<()> {
        if c.nrows() != 2 * self.n {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.n,
                got: c.nrows(),
            });
        }
        if self.data.0.is_nan() {
            self.data.0 = t;
        }
        self.data.1 = t;
        if !self.window.contains(t) {
            return Ok(());
        }
        let mut idx = 0;
        for j in 0..self.n {
            for k in (j + 1)..self.n {
                let d = difference_variance(c, j, k);
                if !(d > 0.0) {
                    return Err(Error::Physicality {
                        time: t,
                        detail: format!("non-positive difference variance {d:e} for pair ({j}, {k})"),
                    });
                }
                self.scratch[idx] = 1.0 / d;
                idx += 1;
            }
        }
        self.trapezoid.push(t, &self.scratch);
        Ok(())
    }

    pub fn finish(self) -> Result<SyncMatrix> {
        let n = self.n;
        let window = self.window;
        let pairs = self.trapezoid.finish_span(&window, self.data)?;
        let mut values = vec![f64::NAN; n * n];
        let mut idx = 0;
        for j in 0..n {
            for k in (j + 1)..n {
                values[j * n + k] = pairs[idx];
                values[k * n + j] = pairs[idx];
                idx += 1;
            }
        }
        Ok(SyncMatrix { n, values, window })
    }
}

/// Time-averaged `S_c` for every pair. The diagonal holds `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncMatrix {
    pub n: usize,
    values: Vec<f64>,
    pub window: TimeWindow,
}

/// One highlighted pair in a [`SyncSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair: (usize, usize),
    pub value: f64,
    pub ratio_to_bulk_median: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub window: TimeWindow,
    pub argmax_pair: (usize, usize),
    pub max_value: f64,
    pub bulk_median: f64,
    pub max_ratio_to_bulk_median: f64,
    pub significance_ratio: f64,
    pub pairs: Vec<PairScore>,
}

impl SyncMatrix {
    /// Builds a matrix from a dense `n × n` array; the diagonal is ignored.
    pub fn from_dense(values: &DMatrix<f64>, window: TimeWindow) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::InvalidInput("sync matrix must be square".into()));
        }
        let mut out = vec![f64::NAN; n * n];
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    out[j * n + k] = 0.5 * (values[(j, k)] + values[(k, j)]);
                }
            }
        }
        Ok(Self { n, values: out, window })
    }

    /// `⟨S_c⟩(j, k)`; `NaN` on the diagonal.
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.n + k]
    }

    /// Off-diagonal pairs `j < k` with their values.
    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        (0..self.n).flat_map(move |j| ((j + 1)..self.n).map(move |k| ((j, k), self.get(j, k))))
    }

    pub fn argmax(&self) -> Option<((usize, usize), f64)> {
        self.pairs()
            .fold(None, |best: Option<((usize, usize), f64)>, (p, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((p, v)),
            })
    }

    /// Median over pairs whose sites both carry the bulk role.
    pub fn bulk_median(&self, roles: &[SiteRole]) -> Result<f64> {
        if roles.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: roles.len(),
            });
        }
        let mut vals: Vec<f64> = self
            .pairs()
            .filter(|((j, k), _)| roles[*j] == SiteRole::Bulk && roles[*k] == SiteRole::Bulk)
            .map(|(_, v)| v)
            .collect();
        if vals.is_empty() {
            return Err(Error::InvalidInput("no bulk-bulk pairs".into()));
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = vals.len();
        Ok(if m % 2 == 1 {
            vals[m / 2]
        } else {
            0.5 * (vals[m / 2 - 1] + vals[m / 2])
        })
    }

    /// Argmax, bulk median and the ratio of each `focus` pair to the median.
    pub fn summarize(&self, roles: &[SiteRole], focus: &[(usize, usize)]) -> Result<SyncSummary> {
        let median = self.bulk_median(roles)?;
        let (argmax_pair, max_value) = self
            .argmax()
            .ok_or_else(|| Error::InvalidInput("sync matrix has no pairs".into()))?;
        let pairs = focus
            .iter()
            .map(|&(j, k)| {
                if j >= self.n || k >= self.n || j == k {
                    return Err(Error::InvalidInput(format!("invalid focus pair ({j}, {k})")));
                }
                let value = self.get(j, k);
                Ok(PairScore {
                    pair: (j, k),
                    value,
                    ratio_to_bulk_median: value / median,
                    significant: value > SIGNIFICANCE_RATIO * median,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SyncSummary {
            window: self.window,
            argmax_pair,
            max_value,
            bulk_median: median,
            max_ratio_to_bulk_median: max_value / median,
            significance_ratio: SIGNIFICANCE_RATIO,
            pairs,
        })
    }

    /// Element-wise mean of several matrices over the same sites.
    pub fn average(mats: &[SyncMatrix]) -> Result<SyncMatrix> {
        let first = mats
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
        let mut values = vec![0.0; first.n * first.n];
        for m in mats {
            if m.n != first.n {
                return Err(Error::DimensionMismatch {
                    expected: first.n,
                    got: m.n,
                });
            }
            values.iter_mut().zip(&m.values).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / mats.len() as f64;
        values.iter_mut().for_each(|v| *v *= scale);
        Ok(SyncMatrix {
            n: first.n,
            values,
            window: first.window,
        })
    }

    /// Dense CSV with a label header row and label first column. Diagonal
    /// cells are written as `nan`.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[String]) -> Result<()> {
        if labels.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: labels.len(),
            });
        }
        writeln!(w, "site,{}", labels.join(","))?;
        for j in 0..self.n {
            write!(w, "{}", labels[j])?;
            for k in 0..self.n {
                let v = self.get(j, k);
                if v.is_nan() {
                    write!(w, ",nan")?;
                } else {
                    write!(w, ",{v:.10e}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Full-trajectory `S_c` matrix over `window` from stored samples.
pub fn sync_matrix(samples: &[CovarianceSample], window: &TimeWindow) -> Result<SyncMatrix> {
    let first = samples.first().ok_or(Error::WindowOutsideData {
        t_i: window.t_i,
        t_f: window.t_f,
        data_start: f64::NAN,
        data_end: f64::NAN,
    })?;
    let mut acc = SyncAccumulator::new(first.matrix.nrows() / 2, *window);
    for s in samples {
        acc.push(s.t, &s.matrix)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLockReport {
    pub pair: (usize, usize),
    /// Least-squares slope of the unwrapped phase difference, units of ω0.
    pub drift: f64,
    pub locked: bool,
    /// Phase difference at the window center, wrapped to (−π, π].
    pub offset: f64,
    pub tolerance: f64,
}

/// Phase-locking diagnostic for sites `j`, `k` of a mean-field trajectory.
pub fn phase_lock_rate(
    trajectory: &Trajectory,
    j: usize,
    k: usize,
    window: &TimeWindow,
    tolerance: f64,
) -> Result<PhaseLockReport> {
    trajectory.check_site(j)?;
    trajectory.check_site(k)?;
    let range = trajectory.window_indices(window.t_i, window.t_f)?;
    if range.len() < 2 {
        return Err(Error::InvalidInput("window holds fewer than two samples".into()));
    }
    let threshold = 1e-3 * trajectory.params.limit_cycle_radius();
    let mut unwrapped = Vec::with_capacity(range.len());
    let mut times = Vec::with_capacity(range.len());
    let mut prev: Option<f64> = None;
    for idx in range {
        let state = trajectory.state(idx);
        for site in [j, k] {
            let amp = state[site].norm();
            if amp < threshold {
                return Err(Error::PhaseUndefined {
                    site,
                    amplitude: amp,
                    threshold,
                });
            }
        }
        let raw = (state[j] * state[k].conj()).arg();
        let value = match prev {
            None => raw,
            Some(p) => p + wrap(raw - p),
        };
        prev = Some(value);
        unwrapped.push(value);
        times.push(trajectory.time(idx));
    }
    let (slope, intercept) = least_squares_line(&times, &unwrapped);
    let t_mid = 0.5 * (times[0] + times[times.len() - 1]);
    Ok(PhaseLockReport {
        pair: (j, k),
        drift: slope,
        locked: slope.abs() < tolerance,
        offset: wrap(intercept + slope * t_mid),
        tolerance,
    })
}

/// Wraps an angle to (−π, π].
pub fn wrap(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a - tau * (a / tau).round();
    if r <= -std::f64::consts::PI {
        r + tau
    } else {
        r
    }
}

fn least_squares_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
