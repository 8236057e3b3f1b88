//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! States are flat `f64` slices; complex and matrix states are packed by the
//! caller. Output is delivered through a callback at the times of a uniform
//! [`SampleGrid`], so long runs never hold the whole solution in memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances and step limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step size.
    pub h_max: f64,
    pub max_steps: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            h_max: f64::INFINITY,
            max_steps: 100_000_000,
        }
    }
}

/// Uniform output grid `t0 + k·dt`, `k = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGrid {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
}

impl SampleGrid {
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> Option<f64> {
        self.n.checked_sub(1).map(|k| self.time(k))
    }
}

/// Right-hand side `dy/dt = f(t, y)` with an optional post-step projection.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]);

    /// Called on every accepted state. Returns `true` if `y` was modified.
    fn project(&mut self, _t: f64, _y: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: u64,
    pub rejected: u64,
    pub evaluations: u64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrates from `t_start` to `t_end`, calling `on_sample(k, t_k, y(t_k))`
/// for every grid point inside `[t_start, t_end]`.
///
/// Fails with [`Error::IntegrationFailure`] on step-size underflow, on a
/// non-finite state, or when `max_steps` is exhausted.
pub fn integrate<S, F>(
    sys: &mut S,
    t_start: f64,
    y0: &[f64],
    t_end: f64,
    grid: SampleGrid,
    opts: &SolverOptions,
    mut on_sample: F,
) -> Result<SolverStats>
where
    S: OdeSystem,
    F: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y0.len(),
        });
    }
    if !(t_end >= t_start) {
        return Err(Error::InvalidInput(format!(
            "t_end {t_end} precedes t_start {t_start}"
        )));
    }
    if !(opts.rtol > 0.0 && opts.atol >= 0.0) {
        return Err(Error::InvalidInput("tolerances must be positive".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationFailure {
            last_good_time: t_start,
            reason: "non-finite initial state".into(),
        });
    }

    let mut stats = SolverStats::default();
    let mut next_sample = first_sample_at_or_after(&grid, t_start);
    let time_eps = 1e-12 * t_end.abs().max(1.0);

    let mut y = y0.to_vec();
    sys.project(t_start, &mut y);
    while next_sample < grid.n && (grid.time(next_sample) - t_start).abs() <= time_eps {
        on_sample(next_sample, grid.time(next_sample), &y)?;
        next_sample += 1;
    }
    if t_end == t_start {
        return Ok(stats);
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut cont = vec![0.0; 5 * n];

    sys.rhs(t_start, &y, &mut k1);
    stats.evaluations += 1;

    let mut t = t_start;
    let mut h = initial_step(sys, t, &y, &k1, t_end - t_start, opts, &mut stats);
    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::IntegrationFailure {
                last_good_time: t,
                reason: format!("step budget {} exhausted", opts.max_steps),
            });
        }
        h = h.min(opts.h_max);
        let remaining = t_end - t;
        let last = h >= remaining * (1.0 - 1e-14);
        if last {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::IntegrationFailure {
                last_good_time: t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(t + C2 * h, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t_end } else { t + h };
        sys.rhs(t_new, &ytmp, &mut k6);
        for i in 0..n {
            ynew[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(t_new, &ynew, &mut k7);
        stats.evaluations += 6;

        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n.max(1) as f64).sqrt();

        if !err.is_finite() {
            stats.rejected += 1;
            h *= 0.1;
            last_rejected = true;
            continue;
        }

        let fac11 = err.powf(0.2 - 0.04 * 0.75);
        if err <= 1.0 {
            if ynew.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure {
                    last_good_time: t,
                    reason: "non-finite state".into(),
                });
            }
            stats.accepted += 1;
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                cont[i] = y[i];
                cont[n + i] = ydiff;
                cont[2 * n + i] = bspl;
                cont[3 * n + i] = ydiff - h * k7[i] - bspl;
                cont[4 * n + i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            if sys.project(t_new, &mut ynew) {
                sys.rhs(t_new, &ynew, &mut k7);
                stats.evaluations += 1;
            }
            while next_sample < grid.n {
                let ts = grid.time(next_sample);
                if ts > t_new + time_eps {
                    break;
                }
                if (ts - t_new).abs() <= time_eps {
                    on_sample(next_sample, ts, &ynew)?;
                } else {
                    let theta = (ts - t) / h;
                    let theta1 = 1.0 - theta;
                    for i in 0..n {
                        ytmp[i] = cont[i]
                            + theta
                                * (cont[n + i]
                                    + theta1
                                        * (cont[2 * n + i]
                                            + theta * (cont[3 * n + i] + theta1 * cont[4 * n + i])));
                    }
                    on_sample(next_sample, ts, &ytmp)?;
                }
                next_sample += 1;
            }

            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;
            if last {
                return Ok(stats);
            }
            let mut fac = fac11 / facold.powf(0.04);
            fac = (fac / 0.9).clamp(0.1, 5.0);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            facold = err.max(1e-4);
            last_rejected = false;
            h = h_new;
        } else {
            stats.rejected += 1;
            h /= (fac11 / 0.9).min(5.0);
            last_rejected = true;
        }
    }
}

fn first_sample_at_or_after(grid: &SampleGrid, t: f64) -> usize {
    if grid.n == 0 || grid.dt <= 0.0 {
        return if grid.n > 0 && grid.t0 >= t - 1e-12 * t.abs().max(1.0) { 0 } else { grid.n };
    }
    let k = ((t - grid.t0) / grid.dt - 1e-9).ceil();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(grid.n)
    }
}

fn initial_step<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &[f64],
    f0: &[f64],
    span: f64,
    opts: &SolverOptions,
    stats: &mut SolverStats,
) -> f64 {
    let n = y.len();
    let scale = |i: usize| opts.atol + opts.rtol * y[i].abs();
    let norm = |v: &[f64]| -> f64 {
        (v.iter()
            .enumerate()
            .map(|(i, x)| (x / scale(i)).powi(2))
            .sum::<f64>()
            / n.max(1) as f64)
            .sqrt()
    };
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span).min(opts.h_max);
    let y1: Vec<f64> = (0..n).map(|i| y[i] + h0 * f0[i]).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(t + h0, &y1, &mut f1);
    stats.evaluations += 1;
    let diff: Vec<f64> = (0..n).map(|i| f1[i] - f0[i]).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span).min(opts.h_max)
}
