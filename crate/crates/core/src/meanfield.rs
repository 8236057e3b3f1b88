//! Nonlinear mean-field dynamics of a van der Pol oscillator lattice,
//!
//! ```text
//! dα/dt = −i(ω0 α + M α) + (κ1/2) α − κ2 |α|² α,
//! ```
//!
//! with linear-stability diagnostics, the eigenmode superposition predictor
//! and initial-condition families.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CouplingMatrix, EigenDecomposition};
use crate::ode::{self, OdeSystem, SampleGrid, SolverOptions, SolverStats};

/// Rates in units of the intrinsic frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldParams {
    pub omega0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Default for MeanFieldParams {
    fn default() -> Self {
        Self {
            omega0: 1.0,
            kappa1: 5e-3,
            kappa2: 1e-2,
        }
    }
}

impl MeanFieldParams {
    /// Checks hard invariants and returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::InvalidSpec(format!("ω0 must be > 0, got {}", self.omega0)));
        }
        if !(self.kappa1 > 0.0 && self.kappa1.is_finite()) {
            return Err(Error::InvalidSpec(format!("κ1 must be > 0, got {}", self.kappa1)));
        }
        if !(self.kappa2 > 0.0 && self.kappa2.is_finite()) {
            return Err(Error::InvalidSpec(format!("κ2 must be > 0, got {}", self.kappa2)));
        }
        let mut warnings = Vec::new();
        if self.kappa1 > 0.1 * self.omega0 || self.kappa2 > 0.1 * self.omega0 {
            warnings.push("dissipation rates exceed 0.1·ω0; weak-dissipation regime not satisfied".into());
        }
        if self.kappa1 >= self.kappa2 {
            warnings.push("κ1 >= κ2: amplitude may exceed weakly nonlinear regime".into());
        }
        Ok(warnings)
    }

    /// Uncoupled limit-cycle radius √(κ1/2κ2).
    pub fn limit_cycle_radius(&self) -> f64 {
        (self.kappa1 / (2.0 * self.kappa2)).sqrt()
    }
}

/// Mean-field amplitudes at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeState {
    pub t: f64,
    pub alpha: Vec<Complex64>,
}

/// Initial-condition families. Eigenstate indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Eigenstate {
        index: usize,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    /// Seeded uniform draws; the runner supplies a derived seed when absent.
    Random {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Explicit `[re, im]` pairs, one per site.
    Explicit { alpha: Vec<[f64; 2]> },
}

fn unit_scale() -> f64 {
    1.0
}

impl InitialCondition {
    /// Concrete amplitudes for a lattice. `fallback_seed` is used by the
    /// random family when no explicit seed is given.
    pub fn resolve(
        &self,
        decomposition: &EigenDecomposition,
        fallback_seed: u64,
    ) -> Result<Vec<Complex64>> {
        let n = decomposition.eigenvalues.len();
        match self {
            InitialCondition::Eigenstate { index, scale } => {
                if *index == 0 || *index > n {
                    return Err(Error::InvalidSpec(format!(
                        "eigenstate index {index} outside 1..={n}"
                    )));
                }
                Ok(decomposition
                    .eigenvectors
                    .column(index - 1)
                    .iter()
                    .map(|&v| Complex64::new(scale * v, 0.0))
                    .collect())
            }
            InitialCondition::Random { seed } => Ok(random_initial(n, seed.unwrap_or(fallback_seed))),
            InitialCondition::Explicit { alpha } => {
                if alpha.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: alpha.len(),
                    });
                }
                Ok(alpha.iter().map(|&[re, im]| Complex64::new(re, im)).collect())
            }
        }
    }
}

/// Uniform-grid sequence of amplitude states.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: SampleGrid,
    pub n_sites: usize,
    pub params: MeanFieldParams,
    pub site_labels: Vec<String>,
    data: Vec<Complex64>,
}

impl Trajectory {
    /// Builds a trajectory from explicit samples, checking uniform spacing.
    pub fn from_samples(
        times: &[f64],
        states: &[Vec<Complex64>],
        params: MeanFieldParams,
        site_labels: Vec<String>,
    ) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: states.len(),
            });
        }
        let n_sites = site_labels.len();
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        if !(dt > 0.0) {
            return Err(Error::NonUniformGrid("times must increase".into()));
        }
        for (k, &t) in times.iter().enumerate() {
            let expected = times[0] + k as f64 * dt;
            if (t - expected).abs() > 1e-9 * dt.max(t.abs()) {
                return Err(Error::NonUniformGrid(format!(
                    "sample {k} at {t} deviates from {expected}"
                )));
            }
        }
        let mut data = Vec::with_capacity(times.len() * n_sites);
        for s in states {
            if s.len() != n_sites {
                return Err(Error::DimensionMismatch {
                    expected: n_sites,
                    got: s.len(),
                });
            }
            data.extend_from_slice(s);
        }
        Ok(Self {
            grid: SampleGrid {
                t0: times.first().copied().unwrap_or(0.0),
                dt,
                n: times.len(),
            },
            n_sites,
            params,
            site_labels,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.n
    }

    pub fn is_empty(&self) -> bool {
        self.grid.n == 0
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k)
    }

    pub fn start(&self) -> f64 {
        self.grid.t0
    }

    pub fn end(&self) -> f64 {
        self.grid.last().unwrap_or(self.grid.t0)
    }

    pub fn state(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.n_sites..(k + 1) * self.n_sites]
    }

    pub fn amplitude_state(&self, k: usize) -> AmplitudeState {
        AmplitudeState {
            t: self.time(k),
            alpha: self.state(k).to_vec(),
        }
    }

    /// Complex series of one site (0-based).
    pub fn site_series(&self, j: usize) -> Result<Vec<Complex64>> {
        self.check_site(j)?;
        Ok((0..self.grid.n).map(|k| self.data[k * self.n_sites + j]).collect())
    }

    pub fn check_site(&self, j: usize) -> Result<()> {
        if j >= self.n_sites {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.n_sites,
            });
        }
        Ok(())
    }

    /// Sample indices whose times fall inside `[t_i, t_f]`.
    pub fn window_indices(&self, t_i: f64, t_f: f64) -> Result<std::ops::Range<usize>> {
        let tol = 1e-9 * self.grid.dt;
        if self.is_empty() || t_i < self.start() - tol || t_f > self.end() + tol || !(t_f > t_i) {
            return Err(Error::WindowOutsideData {
                t_i,
                t_f,
                data_start: self.start(),
                data_end: self.end(),
            });
        }
        let first = ((t_i - self.grid.t0) / self.grid.dt - 1e-9).ceil().max(0.0) as usize;
        let last = ((t_f - self.grid.t0) / self.grid.dt + 1e-9).floor() as usize;
        Ok(first..(last + 1).min(self.grid.n))
    }

    /// CSV with columns `t, re_1, im_1, …, re_N, im_N`.
    pub fn write_csv<W: Write>(&self, mut w: W, stride: usize) -> Result<()> {
        let mut header = vec!["t".to_string()];
        for label in &self.site_labels {
            header.push(format!("re_{label}"));
            header.push(format!("im_{label}"));
        }
        writeln!(w, "{}", header.join(","))?;
        for k in (0..self.grid.n).step_by(stride.max(1)) {
            write!(w, "{}", self.time(k))?;
            for a in self.state(k) {
                write!(w, ",{:e},{:e}", a.re, a.im)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// CSV raster of `A_j(t) = Re α_j(t)` with columns `t, A_1, …, A_N`.
    pub fn write_amplitude_csv<W: Write>(&self, mut w: W, stride: usize) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(self.site_labels.iter().cloned());
        writeln!(w, "{}", header.join(","))?;
        for k in (0..self.grid.n).step_by(stride.max(1)) {
            write!(w, "{}", self.time(k))?;
            for a in self.state(k) {
                write!(w, ",{:e}", a.re)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_dims(alpha: &[Complex64], coupling: &CouplingMatrix) -> Result<()> {
    if alpha.len() != coupling.n {
        return Err(Error::DimensionMismatch {
            expected: coupling.n,
            got: alpha.len(),
        });
    }
    Ok(())
}

/// Right-hand side of the mean-field equation.
pub fn drift(
    alpha: &[Complex64],
    params: &MeanFieldParams,
    coupling: &CouplingMatrix,
) -> Result<Vec<Complex64>> {
    check_dims(alpha, coupling)?;
    let n = coupling.n;
    let i = Complex64::i();
    Ok((0..n)
        .map(|j| {
            let hop: Complex64 = (0..n).map(|k| coupling.entries[(j, k)] * alpha[k]).sum();
            let a = alpha[j];
            -i * (params.omega0 * a + hop) + 0.5 * params.kappa1 * a - params.kappa2 * a.norm_sqr() * a
        })
        .collect())
}

/// Sparse mean-field right-hand side on packed `[re, im]` storage.
pub(crate) struct MeanFieldSystem {
    params: MeanFieldParams,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl MeanFieldSystem {
    pub(crate) fn new(params: MeanFieldParams, coupling: &CouplingMatrix) -> Self {
        Self {
            params,
            neighbors: coupling.neighbors(),
        }
    }

    /// Drift at a complex state, into `out`.
    pub(crate) fn eval(&self, alpha: &[Complex64], out: &mut [Complex64]) {
        let p = &self.params;
        for (j, nb) in self.neighbors.iter().enumerate() {
            let a = alpha[j];
            let mut hop = p.omega0 * a;
            for &(k, lam) in nb {
                hop += lam * alpha[k];
            }
            let g = 0.5 * p.kappa1 - p.kappa2 * a.norm_sqr();
            out[j] = Complex64::new(hop.im + g * a.re, -hop.re + g * a.im);
        }
    }
}

impl OdeSystem for MeanFieldSystem {
    fn dim(&self) -> usize {
        2 * self.neighbors.len()
    }

    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let p = &self.params;
        for (j, nb) in self.neighbors.iter().enumerate() {
            let (re, im) = (y[2 * j], y[2 * j + 1]);
            let mut hre = p.omega0 * re;
            let mut him = p.omega0 * im;
            for &(k, lam) in nb {
                hre += lam * y[2 * k];
                him += lam * y[2 * k + 1];
            }
            let g = 0.5 * p.kappa1 - p.kappa2 * (re * re + im * im);
            dy[2 * j] = him + g * re;
            dy[2 * j + 1] = -hre + g * im;
        }
    }
}

fn pack(alpha: &[Complex64]) -> Vec<f64> {
    alpha.iter().flat_map(|a| [a.re, a.im]).collect()
}

/// Largest |μ| of the coupling matrix, or a cheap upper bound of it.
fn band_edge_bound(coupling: &CouplingMatrix) -> f64 {
    coupling.norm_bound()
}

/// Integrates from t = 0 to `t_end`, recording every `dt_out`.
pub fn integrate(
    initial: &[Complex64],
    params: &MeanFieldParams,
    coupling: &CouplingMatrix,
    t_end: f64,
    dt_out: f64,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    integrate_window(initial, params, coupling, t_end, dt_out, 0.0, opts).map(|(t, _)| t)
}

/// Integrates from t = 0 to `t_end` but keeps only samples at or after
/// `record_from`. The grid stays anchored at t = 0.
pub fn integrate_window(
    initial: &[Complex64],
    params: &MeanFieldParams,
    coupling: &CouplingMatrix,
    t_end: f64,
    dt_out: f64,
    record_from: f64,
    opts: &SolverOptions,
) -> Result<(Trajectory, SolverStats)> {
    check_dims(initial, coupling)?;
    params.validate()?;
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!("t_end must be > 0, got {t_end}")));
    }
    let limit = PI / (params.omega0 + band_edge_bound(coupling));
    if !(dt_out > 0.0) || dt_out > limit {
        return Err(Error::InvalidInput(format!(
            "dt_out {dt_out} must lie in (0, {limit:.4}] to resolve the fastest band frequency"
        )));
    }
    if record_from < 0.0 || record_from > t_end {
        return Err(Error::InvalidInput(format!(
            "record_from {record_from} outside [0, {t_end}]"
        )));
    }
    let total = (t_end / dt_out + 1e-9).floor() as usize + 1;
    let first = ((record_from / dt_out) - 1e-9).ceil().max(0.0) as usize;
    let grid = SampleGrid {
        t0: first as f64 * dt_out,
        dt: dt_out,
        n: total - first,
    };
    let n = coupling.n;
    let mut data = Vec::with_capacity(grid.n * n);
    let mut sys = MeanFieldSystem::new(*params, coupling);
    let stats = ode::integrate(&mut sys, 0.0, &pack(initial), t_end, grid, opts, |_, _, y| {
        data.extend(y.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])));
        Ok(())
    })?;
    if data.len() != grid.n * n {
        return Err(Error::IntegrationFailure {
            last_good_time: t_end,
            reason: format!("recorded {} of {} samples", data.len() / n.max(1), grid.n),
        });
    }
    Ok((
        Trajectory {
            grid,
            n_sites: n,
            params: *params,
            site_labels: coupling.site_labels.clone(),
            data,
        },
        stats,
    ))
}

/// Linear-stability eigenvalues ν = −i(ω0 + μ) + κ1/2 of the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub nu: Vec<Complex64>,
    pub growth_rates: Vec<f64>,
    pub frequencies: Vec<f64>,
}

pub fn jacobian_eigenvalues(params: &MeanFieldParams, decomposition: &EigenDecomposition) -> StabilityReport {
    let nu: Vec<Complex64> = decomposition
        .eigenvalues
        .iter()
        .map(|&mu| Complex64::new(0.5 * params.kappa1, -(params.omega0 + mu)))
        .collect();
    StabilityReport {
        growth_rates: nu.iter().map(|v| v.re).collect(),
        frequencies: nu.iter().map(|v| -v.im).collect(),
        nu,
    }
}

/// Superposition Σ_l c_l v_l e^{−i(ω0+μ_l)t}.
pub fn linear_prediction(
    coefficients: &[Complex64],
    decomposition: &EigenDecomposition,
    params: &MeanFieldParams,
    t: f64,
) -> Result<Vec<Complex64>> {
    let n = decomposition.eigenvalues.len();
    if coefficients.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: coefficients.len(),
        });
    }
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (l, &c) in coefficients.iter().enumerate() {
        if c == Complex64::new(0.0, 0.0) {
            continue;
        }
        let phase = Complex64::from_polar(1.0, -(params.omega0 + decomposition.eigenvalues[l]) * t);
        let w = c * phase;
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * decomposition.eigenvectors[(j, l)];
        }
    }
    Ok(out)
}

/// Projection coefficients c_l = ⟨v_l, α⟩ of a state onto the eigenmodes.
pub fn mode_coefficients(alpha: &[Complex64], decomposition: &EigenDecomposition) -> Vec<Complex64> {
    let n = decomposition.eigenvalues.len();
    (0..n)
        .map(|l| {
            (0..n)
                .map(|j| decomposition.eigenvectors[(j, l)] * alpha[j])
                .sum()
        })
        .collect()
}

/// Oscillation amplitude A_j(t) = Re α_j(t) of one site (0-based).
pub fn amplitude_series(trajectory: &Trajectory, j: usize) -> Result<Vec<f64>> {
    Ok(trajectory.site_series(j)?.iter().map(|a| a.re).collect())
}

/// Random amplitudes |α| ~ U(0, 0.5), arg α ~ U(0, 2π), drawn per site.
pub fn random_initial(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..0.5);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            Complex64::from_polar(a, phi)
        })
        .collect()
}
