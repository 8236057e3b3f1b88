//! Gaussian fluctuations around a mean-field trajectory.
//!
//! The covariance of the quadratures `(x_1, p_1, x_2, p_2, …)` obeys
//! `dC/dt = B(t) C + C B(t)ᵀ + D(t)` with drift and diffusion built from the
//! instantaneous amplitudes. Quadrature vacuum is `C = I/2`.
//!
//! Only the upper triangle is integrated, so every returned matrix is exactly
//! symmetric. The amplitudes between trajectory samples come from cubic
//! Hermite interpolation using the mean-field drift as the derivative.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::CouplingMatrix;
use crate::meanfield::{MeanFieldParams, MeanFieldSystem, Trajectory};
use crate::ode::{self, OdeSystem, SampleGrid, SolverOptions, SolverStats};
use crate::phasespace::{QuadratureGrid, WignerField};

/// Rates entering the fluctuation drift and diffusion. `gamma_bar` is the
/// single-photon loss that is absent from the mean-field gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationParams {
    pub omega0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    #[serde(default)]
    pub gamma_bar: f64,
}

impl FluctuationParams {
    pub fn new(meanfield: &MeanFieldParams, gamma_bar: f64) -> Self {
        Self {
            omega0: meanfield.omega0,
            kappa1: meanfield.kappa1,
            kappa2: meanfield.kappa2,
            gamma_bar,
        }
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = MeanFieldParams {
            omega0: self.omega0,
            kappa1: self.kappa1,
            kappa2: self.kappa2,
        }
        .validate()?;
        if !(self.gamma_bar >= 0.0) || !self.gamma_bar.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gamma_bar must be a finite non-negative rate, got {}",
                self.gamma_bar
            )));
        }
        if self.gamma_bar >= self.kappa1 {
            warnings.push("gamma_bar >= kappa1: no net gain, the limit cycle collapses".into());
        }
        Ok(warnings)
    }

    /// Mean-field parameters with the gain reduced by the linear loss.
    pub fn effective_meanfield(&self) -> Result<MeanFieldParams> {
        let p = MeanFieldParams {
            omega0: self.omega0,
            kappa1: self.kappa1 - self.gamma_bar,
            kappa2: self.kappa2,
        };
        p.validate()?;
        Ok(p)
    }

    fn diag_block(&self, a: Complex64) -> [f64; 4] {
        let n2 = a.norm_sqr();
        let sq = a * a;
        let g = 0.5 * (self.kappa1 - self.gamma_bar - 4.0 * self.kappa2 * n2);
        [
            g - self.kappa2 * sq.re,
            -self.omega0 - self.kappa2 * sq.im,
            self.omega0 - self.kappa2 * sq.im,
            g + self.kappa2 * sq.re,
        ]
    }

    fn diffusion(&self, a: Complex64) -> f64 {
        0.5 * (self.kappa1 + self.gamma_bar + 4.0 * self.kappa2 * a.norm_sqr())
    }
}

/// Row of the x quadrature of site `j`.
pub fn x_index(j: usize) -> usize {
    2 * j
}

/// Row of the p quadrature of site `j`.
pub fn p_index(j: usize) -> usize {
    2 * j + 1
}

fn check_alpha(alpha: &[Complex64], coupling: &CouplingMatrix) -> Result<()> {
    if alpha.len() != coupling.n {
        return Err(Error::DimensionMismatch {
            expected: coupling.n,
            got: alpha.len(),
        });
    }
    Ok(())
}

/// Drift matrix `B` for the given amplitudes.
pub fn build_drift(
    alpha: &[Complex64],
    params: &FluctuationParams,
    coupling: &CouplingMatrix,
) -> Result<DMatrix<f64>> {
    check_alpha(alpha, coupling)?;
    let n = coupling.n;
    let mut b = DMatrix::zeros(2 * n, 2 * n);
    for (j, &a) in alpha.iter().enumerate() {
        let [b00, b01, b10, b11] = params.diag_block(a);
        b[(2 * j, 2 * j)] = b00;
        b[(2 * j, 2 * j + 1)] = b01;
        b[(2 * j + 1, 2 * j)] = b10;
        b[(2 * j + 1, 2 * j + 1)] = b11;
    }
    for bond in coupling.bonds() {
        for (r, c) in [(bond.i, bond.j), (bond.j, bond.i)] {
            b[(2 * r, 2 * c + 1)] = bond.value;
            b[(2 * r + 1, 2 * c)] = -bond.value;
        }
    }
    Ok(b)
}

/// Diagonal diffusion matrix `D` for the given amplitudes.
pub fn build_diffusion(alpha: &[Complex64], params: &FluctuationParams) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(2 * alpha.len(), 2 * alpha.len());
    for (j, &a) in alpha.iter().enumerate() {
        let v = params.diffusion(a);
        d[(2 * j, 2 * j)] = v;
        d[(2 * j + 1, 2 * j + 1)] = v;
    }
    d
}

/// Options for [`evolve_covariance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceOptions {
    pub solver: SolverOptions,
    /// Keep every `output_stride`-th trajectory sample.
    pub output_stride: usize,
    /// Symplectic spectrum is checked on every `check_stride`-th sample.
    pub check_stride: usize,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions {
                atol: 1e-10,
                ..SolverOptions::default()
            },
            output_stride: 1,
            check_stride: 1,
        }
    }
}

/// Smallest symplectic eigenvalue allowed before a sample is flagged.
pub const PHYSICALITY_FLOOR: f64 = 0.5 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalityViolation {
    pub t: f64,
    pub min_symplectic: f64,
}

/// Symplectic-spectrum diagnostics collected during a covariance run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalityReport {
    pub checks: usize,
    pub min_symplectic: f64,
    pub t_of_min: f64,
    pub violations: Vec<PhysicalityViolation>,
}

impl Default for PhysicalityReport {
    fn default() -> Self {
        Self {
            checks: 0,
            min_symplectic: f64::INFINITY,
            t_of_min: f64::NAN,
            violations: Vec::new(),
        }
    }
}

impl PhysicalityReport {
    pub fn is_physical(&self) -> bool {
        self.violations.is_empty()
    }

    fn record(&mut self, t: f64, c: &DMatrix<f64>) {
        let nu = min_symplectic_eigenvalue(c);
        self.checks += 1;
        if !(nu >= self.min_symplectic) {
            self.min_symplectic = nu;
            self.t_of_min = t;
        }
        if !(nu >= PHYSICALITY_FLOOR) {
            self.violations.push(PhysicalityViolation {
                t,
                min_symplectic: nu,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSample {
    pub t: f64,
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct CovarianceRun {
    pub samples: Vec<CovarianceSample>,
    pub physicality: PhysicalityReport,
    pub stats: SolverStats,
}

/// Integrates the covariance over `span`, storing every
/// `opts.output_stride`-th sample of the trajectory grid inside the span.
pub fn evolve_covariance(
    c0: &DMatrix<f64>,
    trajectory: &Trajectory,
    params: &FluctuationParams,
    coupling: &CouplingMatrix,
    span: (f64, f64),
    opts: &CovarianceOptions,
) -> Result<CovarianceRun> {
    let stride = opts.output_stride.max(1);
    let mut samples = Vec::new();
    let mut seen = 0usize;
    let (physicality, stats) =
        evolve_covariance_streaming(c0, trajectory, params, coupling, span, opts, |_, t, c| {
            if seen % stride == 0 {
                samples.push(CovarianceSample {
                    t,
                    matrix: c.clone(),
                });
            }
            seen += 1;
            Ok(())
        })?;
    Ok(CovarianceRun {
        samples,
        physicality,
        stats,
    })
}

/// Like [`evolve_covariance`] but hands every trajectory-grid sample inside
/// `span` to `visit(k, t, C)` instead of storing it.
pub fn evolve_covariance_streaming<F>(
    c0: &DMatrix<f64>,
    trajectory: &Trajectory,
    params: &FluctuationParams,
    coupling: &CouplingMatrix,
    span: (f64, f64),
    opts: &CovarianceOptions,
    mut visit: F,
) -> Result<(PhysicalityReport, SolverStats)>
where
    F: FnMut(usize, f64, &DMatrix<f64>) -> Result<()>,
{
    params.validate()?;
    let n = coupling.n;
    if trajectory.n_sites != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: trajectory.n_sites,
        });
    }
    if c0.nrows() != 2 * n || c0.ncols() != 2 * n {
        return Err(Error::DimensionMismatch {
            expected: 2 * n,
            got: c0.nrows(),
        });
    }
    let (t_start, t_end) = span;
    let tol = 1e-9 * trajectory.grid.dt;
    if trajectory.is_empty()
        || !(t_end >= t_start)
        || t_start < trajectory.start() - tol
        || t_end > trajectory.end() + tol
    {
        return Err(Error::WindowOutsideData {
            t_i: t_start,
            t_f: t_end,
            data_start: trajectory.start(),
            data_end: trajectory.end(),
        });
    }

    let mut sys = CovarianceSystem::new(trajectory, params, coupling);
    let y0 = pack_upper(c0);
    let check_stride = opts.check_stride.max(1);
    let mut report = PhysicalityReport::default();
    let mut full = DMatrix::zeros(2 * n, 2 * n);
    let mut seen = 0usize;
    let stats = ode::integrate(
        &mut sys,
        t_start,
        &y0,
        t_end,
        trajectory.grid,
        &opts.solver,
        |k, t, y| {
            unpack_upper(y, &mut full);
            if seen % check_stride == 0 {
                report.record(t, &full);
            }
            seen += 1;
            visit(k, t, &full)
        },
    )?;
    Ok((report, stats))
}

fn packed_len(m: usize) -> usize {
    m * (m + 1) / 2
}

fn pack_upper(c: &DMatrix<f64>) -> Vec<f64> {
    let m = c.nrows();
    let mut out = Vec::with_capacity(packed_len(m));
    for j in 0..m {
        for i in 0..=j {
            out.push(0.5 * (c[(i, j)] + c[(j, i)]));
        }
    }
    out
}

fn unpack_upper(y: &[f64], c: &mut DMatrix<f64>) {
    let m = c.nrows();
    let c = c.as_mut_slice();
    let mut idx = 0;
    for j in 0..m {
        c[j * m..j * m + j + 1].copy_from_slice(&y[idx..idx + j + 1]);
        idx += j + 1;
    }
    for j in 0..m {
        for i in (j + 1)..m {
            c[j * m + i] = c[i * m + j];
        }
    }
}

struct CovarianceSystem<'a> {
    trajectory: &'a Trajectory,
    params: FluctuationParams,
    meanfield: MeanFieldSystem,
    neighbors: Vec<Vec<(usize, f64)>>,
    cached_interval: Option<usize>,
    node_alpha: [Vec<Complex64>; 2],
    node_slope: [Vec<Complex64>; 2],
    alpha: Vec<Complex64>,
    full: DMatrix<f64>,
    prod: DMatrix<f64>,
    blocks: Vec<[f64; 4]>,
    diffusion: Vec<f64>,
}

impl<'a> CovarianceSystem<'a> {
    fn new(trajectory: &'a Trajectory, params: &FluctuationParams, coupling: &CouplingMatrix) -> Self {
        let n = coupling.n;
        Self {
            trajectory,
            params: *params,
            meanfield: MeanFieldSystem::new(trajectory.params, coupling),
            neighbors: coupling.neighbors(),
            cached_interval: None,
            node_alpha: [vec![Complex64::default(); n], vec![Complex64::default(); n]],
            node_slope: [vec![Complex64::default(); n], vec![Complex64::default(); n]],
            alpha: vec![Complex64::default(); n],
            full: DMatrix::zeros(2 * n, 2 * n),
            prod: DMatrix::zeros(2 * n, 2 * n),
            blocks: vec![[0.0; 4]; n],
            diffusion: vec![0.0; n],
        }
    }

    fn interpolate(&mut self, t: f64) {
        let grid = self.trajectory.grid;
        if grid.n == 1 {
            self.alpha.copy_from_slice(self.trajectory.state(0));
            return;
        }
        let pos = (t - grid.t0) / grid.dt;
        let k = (pos.floor().max(0.0) as usize).min(grid.n - 2);
        if self.cached_interval != Some(k) {
            for side in 0..2 {
                self.node_alpha[side].copy_from_slice(self.trajectory.state(k + side));
                self.meanfield
                    .eval(&self.node_alpha[side], &mut self.node_slope[side]);
            }
            self.cached_interval = Some(k);
        }
        let s = pos - k as f64;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = (s3 - 2.0 * s2 + s) * grid.dt;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = (s3 - s2) * grid.dt;
        for j in 0..self.alpha.len() {
            self.alpha[j] = h00 * self.node_alpha[0][j]
                + h10 * self.node_slope[0][j]
                + h01 * self.node_alpha[1][j]
                + h11 * self.node_slope[1][j];
        }
    }
}

impl OdeSystem for CovarianceSystem<'_> {
    fn dim(&self) -> usize {
        packed_len(2 * self.neighbors.len())
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.interpolate(t);
        for (j, &a) in self.alpha.iter().enumerate() {
            self.blocks[j] = self.params.diag_block(a);
            self.diffusion[j] = self.params.diffusion(a);
        }
        let m = self.full.nrows();
        unpack_upper(y, &mut self.full);
        let c = self.full.as_slice();
        let p = self.prod.as_mut_slice();
        for col in 0..m {
            let c = &c[col * m..(col + 1) * m];
            let p = &mut p[col * m..(col + 1) * m];
            for (j, nb) in self.neighbors.iter().enumerate() {
                let [b00, b01, b10, b11] = self.blocks[j];
                let (x, q) = (c[2 * j], c[2 * j + 1]);
                let mut px = b00 * x + b01 * q;
                let mut pp = b10 * x + b11 * q;
                for &(k, lam) in nb {
                    px += lam * c[2 * k + 1];
                    pp -= lam * c[2 * k];
                }
                p[2 * j] = px;
                p[2 * j + 1] = pp;
            }
        }
        let mut idx = 0;
        for j in 0..m {
            let col = &p[j * m..j * m + j + 1];
            for (i, &pij) in col.iter().enumerate() {
                dy[idx] = pij + p[i * m + j];
                idx += 1;
            }
            dy[idx - 1] += self.diffusion[j / 2];
        }
    }
}

/// Symplectic eigenvalues in ascending order, one per mode.
///
/// Computed as the singular values of `Lᵀ Ω L` where `C = L Lᵀ`. Returns
/// zeros when `C` is not positive definite.
pub fn symplectic_eigenvalues(c: &DMatrix<f64>) -> Result<Vec<f64>> {
    let m = c.nrows();
    if m != c.ncols() || m % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "covariance must be square with even dimension, got {}x{}",
            m,
            c.ncols()
        )));
    }
    let Some(chol) = c.clone().cholesky() else {
        return Ok(vec![0.0; m / 2]);
    };
    let l = chol.l();
    // Ω L: rows (2j, 2j+1) become (row 2j+1, −row 2j).
    let mut omega_l = DMatrix::zeros(m, m);
    for j in 0..m / 2 {
        omega_l.set_row(2 * j, &l.row(2 * j + 1));
        omega_l.set_row(2 * j + 1, &(-l.row(2 * j)));
    }
    let k = l.transpose() * omega_l;
    let gram = k.transpose() * &k;
    let mut vals: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(vals.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect())
}

/// Smallest symplectic eigenvalue, `0` for a non-positive-definite matrix.
pub fn min_symplectic_eigenvalue(c: &DMatrix<f64>) -> f64 {
    symplectic_eigenvalues(c)
        .ok()
        .and_then(|v| v.first().copied())
        .unwrap_or(f64::NAN)
}

/// 2×2 covariance of site `j`.
pub fn site_block(c: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    c.view((2 * j, 2 * j), (2, 2)).into_owned()
}

/// Quadrature means `(x, p) = √2 (Re α, Im α)`.
pub fn quadrature_mean(alpha: Complex64) -> [f64; 2] {
    [
        std::f64::consts::SQRT_2 * alpha.re,
        std::f64::consts::SQRT_2 * alpha.im,
    ]
}

/// Gaussian Wigner function with covariance `c` and mean `mean`, evaluated at
/// `point`. Any even dimension.
pub fn gaussian_wigner_at(c: &DMatrix<f64>, mean: &[f64], point: &[f64]) -> Result<f64> {
    let m = c.nrows();
    if mean.len() != m || point.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: mean.len().min(point.len()),
        });
    }
    let chol = c
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
    let d = nalgebra::DVector::from_iterator(m, point.iter().zip(mean).map(|(p, q)| p - q));
    let z = chol.l().solve_lower_triangular(&d).expect("non-singular factor");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let norm = (m as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det;
    Ok((-0.5 * z.norm_squared() - norm).exp())
}

/// Single-mode Gaussian Wigner function on a quadrature grid.
pub fn gaussian_wigner(c: &DMatrix<f64>, mean: [f64; 2], grid: &QuadratureGrid) -> Result<WignerField> {
    if c.nrows() != 2 || c.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: c.nrows(),
        });
    }
    let axis = grid.axis();
    let mut values = Vec::with_capacity(axis.len() * axis.len());
    for &x in &axis {
        for &p in &axis {
            values.push(gaussian_wigner_at(c, &mean, &[x, p])?);
        }
    }
    Ok(WignerField::quadrature(grid, values))
}

/// Average of single-mode Gaussians `(C_k, α_k)` on a grid, the phase-averaged
/// picture of a Gaussian state riding on a limit cycle.
pub fn time_averaged_wigner(
    states: &[(DMatrix<f64>, Complex64)],
    grid: &QuadratureGrid,
) -> Result<WignerField> {
    if states.is_empty() {
        return Err(Error::InvalidInput("no states to average".into()));
    }
    let mut acc: Option<WignerField> = None;
    for (c, alpha) in states {
        let w = gaussian_wigner(c, quadrature_mean(*alpha), grid)?;
        match acc.as_mut() {
            None => acc = Some(w),
            Some(a) => a.values.iter_mut().zip(&w.values).for_each(|(x, y)| *x += y),
        }
    }
    let mut out = acc.expect("at least one state");
    let scale = 1.0 / states.len() as f64;
    out.values.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// CSV with columns `t` and `c_i_j` for `i <= j` (0-based quadrature rows).
pub fn write_covariance_csv<W: Write>(mut w: W, samples: &[CovarianceSample]) -> Result<()> {
    let Some(first) = samples.first() else {
        writeln!(w, "t")?;
        return Ok(());
    };
    let m = first.matrix.nrows();
    write!(w, "t")?;
    for i in 0..m {
        for j in i..m {
            write!(w, ",c_{i}_{j}")?;
        }
    }
    writeln!(w)?;
    for s in samples {
        write!(w, "{}", s.t)?;
        for i in 0..m {
            for j in i..m {
                write!(w, ",{:e}", s.matrix[(i, j)])?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// The trajectory grid used for covariance output inside `span`.
pub fn output_grid(trajectory: &Trajectory, span: (f64, f64), stride: usize) -> SampleGrid {
    let g = trajectory.grid;
    let first = (((span.0 - g.t0) / g.dt) - 1e-9).ceil().max(0.0) as usize;
    let last = (((span.1 - g.t0) / g.dt) + 1e-9).floor().max(0.0) as usize;
    let count = if last >= first { last - first + 1 } else { 0 };
    let stride = stride.max(1);
    SampleGrid {
        t0: g.time(first),
        dt: g.dt * stride as f64,
        n: count.div_ceil(stride),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticeSpec, build_custom, Bond};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn params(gamma_bar: f64) -> FluctuationParams {
        FluctuationParams {
            omega0: 1.0,
            kappa1: 5e-3,
            kappa2: 1e-2,
            gamma_bar,
        }
    }

    fn uncoupled(n: usize) -> CouplingMatrix {
        build_custom(n, &[]).unwrap()
    }

    fn dimer(lambda: f64) -> CouplingMatrix {
        build_custom(2, &[Bond { i: 0, j: 1, value: lambda }]).unwrap()
    }

    fn sampled(
        f: impl Fn(f64) -> Vec<Complex64>,
        n_sites: usize,
        t_end: f64,
        dt: f64,
        mf: MeanFieldParams,
    ) -> Trajectory {
        let n = (t_end / dt).round() as usize + 1;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let states: Vec<Vec<Complex64>> = times.iter().map(|&t| f(t)).collect();
        let labels = (1..=n_sites).map(|k| format!("s{k}")).collect();
        Trajectory::from_samples(&times, &states, mf, labels).unwrap()
    }

    fn half_identity(n: usize) -> DMatrix<f64> {
        DMatrix::identity(2 * n, 2 * n) * 0.5
    }

    #[test]
    fn drift_at_origin_is_gain_plus_rotation() {
        let b = build_drift(&[Complex64::default()], &params(0.0), &uncoupled(1)).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[2.5e-3, -1.0, 1.0, 2.5e-3]));
    }

    #[test]
    fn drift_on_real_limit_cycle_point() {
        // Direct substitution of α = Ā real: u = Ā², v = 0.
        let p = params(0.0);
        let a_bar = (p.kappa1 / (2.0 * p.kappa2)).sqrt();
        let b = build_drift(&[Complex64::new(a_bar, 0.0)], &p, &uncoupled(1)).unwrap();
        let expected_xx = (p.kappa1 - 4.0 * p.kappa2 * a_bar * a_bar - 2.0 * p.kappa2 * a_bar * a_bar) / 2.0;
        let expected_pp = (p.kappa1 - 4.0 * p.kappa2 * a_bar * a_bar + 2.0 * p.kappa2 * a_bar * a_bar) / 2.0;
        assert_relative_eq!(b[(0, 0)], expected_xx, epsilon = 1e-16);
        assert_relative_eq!(b[(1, 1)], expected_pp, epsilon = 1e-16);
        assert_relative_eq!(b[(0, 1)], -1.0, epsilon = 1e-16);
        assert_relative_eq!(b[(1, 0)], 1.0, epsilon = 1e-16);
        // Frozen: −5e-3 and 0 at the default rates.
        assert_relative_eq!(b[(0, 0)], -5e-3, epsilon = 1e-16);
        assert!(b[(1, 1)].abs() < 1e-16);
    }

    #[test]
    fn imaginary_squared_amplitude_feeds_off_diagonals() {
        let p = params(0.0);
        let a = Complex64::from_polar(0.5, PI / 4.0);
        let b = build_drift(&[a], &p, &uncoupled(1)).unwrap();
        assert_relative_eq!(b[(0, 1)], -1.0 - p.kappa2 * 0.25, epsilon = 1e-15);
        assert_relative_eq!(b[(1, 0)], 1.0 - p.kappa2 * 0.25, epsilon = 1e-15);
        assert_relative_eq!(b[(0, 0)], b[(1, 1)], epsilon = 1e-15);
    }

    #[test]
    fn linear_loss_shifts_diagonal_blocks() {
        let alpha = [Complex64::new(0.3, -0.2), Complex64::new(0.1, 0.4)];
        let c = dimer(0.25);
        let b0 = build_drift(&alpha, &params(0.0), &c).unwrap();
        let b1 = build_drift(&alpha, &params(1e-3), &c).unwrap();
        let diff = b1 - b0;
        let expected = DMatrix::<f64>::identity(4, 4) * -0.5e-3;
        assert!((diff - expected).amax() < 1e-17);
    }

    #[test]
    fn coupling_blocks_are_antisymmetric_pairs() {
        let b = build_drift(&[Complex64::default(); 2], &params(0.0), &dimer(0.25)).unwrap();
        assert_eq!(b[(0, 3)], 0.25);
        assert_eq!(b[(1, 2)], -0.25);
        assert_eq!(b[(2, 1)], 0.25);
        assert_eq!(b[(3, 0)], -0.25);
        assert_eq!(b[(0, 2)], 0.0);
    }

    #[test]
    fn diffusion_examples() {
        let p = params(1e-3);
        let d = build_diffusion(&[Complex64::default(), Complex64::new(0.5, 0.0)], &p);
        assert_relative_eq!(d[(0, 0)], 0.5 * (5e-3 + 1e-3), epsilon = 1e-18);
        assert_relative_eq!(d[(2, 2)], 0.5 * (5e-3 + 1e-3 + 1e-2), epsilon = 1e-18);
        assert_eq!(d[(0, 1)], 0.0);
        assert_eq!(d[(2, 2)], d[(3, 3)]);
    }

    #[test]
    fn effective_meanfield_subtracts_loss() {
        let p = params(1e-3);
        assert_relative_eq!(p.effective_meanfield().unwrap().kappa1, 4e-3, epsilon = 1e-18);
        assert!(params(6e-3).effective_meanfield().is_err());
        assert!(!params(6e-3).validate().unwrap().is_empty());
        assert!(params(-1.0).validate().is_err());
    }

    /// Closed-form solution of a constant-coefficient Lyapunov equation:
    /// `C(t) = e^{Bt} C0 e^{Bᵀt} + ∫₀ᵗ e^{Bs} D e^{Bᵀs} ds`, the integral done
    /// through the Kronecker-sum linear system.
    fn lyapunov_closed_form(b: &DMatrix<f64>, d: &DMatrix<f64>, c0: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let m = b.nrows();
        let eye = DMatrix::<f64>::identity(m, m);
        let big = eye.kronecker(b) + b.kronecker(&eye);
        let e_big = (&big * t).exp();
        // vec(∫ e^{Ls} ds · vec D) = L⁻¹ (e^{Lt} − I) vec D
        let vec_d = DMatrix::from_column_slice(m * m, 1, d.as_slice());
        let rhs = (&e_big - DMatrix::identity(m * m, m * m)) * vec_d;
        let x = big.lu().solve(&rhs).unwrap();
        let e = (b * t).exp();
        &e * c0 * e.transpose() + DMatrix::from_column_slice(m, m, x.as_slice())
    }

    #[test]
    fn constant_coefficient_lyapunov_matches_closed_form() {
        // κ2 → 0 and α ≡ 0 make B and D constant.
        let mf = MeanFieldParams {
            omega0: 1.0,
            kappa1: 5e-3,
            kappa2: 1e-12,
        };
        for (coupling, gamma_bar) in [(uncoupled(1), 0.0), (dimer(0.25), 0.0), (dimer(0.25), 8e-3)] {
            let n = coupling.n;
            let p = FluctuationParams::new(&mf, gamma_bar);
            let traj = sampled(|_| vec![Complex64::default(); n], n, 200.0, 0.1, mf);
            let zero = vec![Complex64::default(); n];
            let b = build_drift(&zero, &p, &coupling).unwrap();
            let d = build_diffusion(&zero, &p);
            let c0 = half_identity(n);
            let run = evolve_covariance(&c0, &traj, &p, &coupling, (0.0, 200.0), &CovarianceOptions::default()).unwrap();
            for s in run.samples.iter().step_by(250) {
                let exact = lyapunov_closed_form(&b, &d, &c0, s.t);
                let err = (&s.matrix - &exact).amax();
                assert!(err < 1e-6, "t={} err={err:e}", s.t);
            }
        }
    }

    #[test]
    fn scalar_gain_solution() {
        // Single uncoupled mode at α ≡ 0: c(t) = e^{κ1 t} − 1/2.
        let mf = MeanFieldParams {
            omega0: 1.0,
            kappa1: 5e-3,
            kappa2: 1e-12,
        };
        let p = FluctuationParams::new(&mf, 0.0);
        let traj = sampled(|_| vec![Complex64::default()], 1, 400.0, 0.1, mf);
        let run = evolve_covariance(&half_identity(1), &traj, &p, &uncoupled(1), (0.0, 400.0), &CovarianceOptions::default()).unwrap();
        let last = run.samples.last().unwrap();
        let exact = (p.kappa1 * last.t).exp() - 0.5;
        assert_relative_eq!(last.matrix[(0, 0)], exact, max_relative = 1e-8);
        assert_relative_eq!(last.matrix[(1, 1)], exact, max_relative = 1e-8);
        assert!(last.matrix[(0, 1)].abs() < 1e-9);
        assert!(run.physicality.is_physical());
    }

    #[test]
    fn zero_span_returns_initial_matrix() {
        let mf = MeanFieldParams::default();
        let p = FluctuationParams::new(&mf, 0.0);
        let traj = sampled(|_| vec![Complex64::new(0.5, 0.0); 2], 2, 10.0, 0.1, mf);
        let c0 = half_identity(2);
        let run = evolve_covariance(&c0, &traj, &p, &dimer(0.25), (3.0, 3.0), &CovarianceOptions::default()).unwrap();
        assert_eq!(run.samples.len(), 1);
        assert_eq!(run.samples[0].matrix, c0);
    }

    #[test]
    fn span_outside_trajectory_is_rejected() {
        let mf = MeanFieldParams::default();
        let p = FluctuationParams::new(&mf, 0.0);
        let traj = sampled(|_| vec![Complex64::default()], 1, 10.0, 0.1, mf);
        let err = evolve_covariance(&half_identity(1), &traj, &p, &uncoupled(1), (0.0, 11.0), &CovarianceOptions::default());
        assert!(matches!(err, Err(Error::WindowOutsideData { .. })));
        let err = evolve_covariance(&half_identity(2), &traj, &p, &uncoupled(1), (0.0, 1.0), &CovarianceOptions::default());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn saturated_orbit_reaches_periodic_isotropic_state() {
        let mf = MeanFieldParams::default();
        let p = FluctuationParams::new(&mf, 0.0);
        let a_bar = mf.limit_cycle_radius();
        let dt = 0.05;
        let t_end = 4000.0;
        let traj = sampled(|t| vec![Complex64::from_polar(a_bar, -mf.omega0 * t)], 1, t_end, dt, mf);
        let run = evolve_covariance(&half_identity(1), &traj, &p, &uncoupled(1), (0.0, t_end), &CovarianceOptions::default()).unwrap();
        assert!(run.physicality.is_physical());
        let per_period = (2.0 * PI / dt).round() as usize;
        let n = run.samples.len();
        // The orbit period is 2π, not a multiple of dt; compare one period
        // apart using the sample nearest to t − 2π·k.
        let a = &run.samples[n - 1];
        let t_back = a.t - 2.0 * PI * 10.0;
        let k_back = (t_back / dt).round() as usize;
        let b = &run.samples[k_back];
        assert!((b.t - t_back).abs() < dt);
        // Interpolation offset of |t_back − t_k| ≤ dt/2 mixes in the 2ω0
        // oscillation; bound accordingly.
        let diff = (&a.matrix - &b.matrix).amax();
        assert!(diff < 1e-2, "period mismatch {diff:e}");
        let avg = run.samples[n - 20 * per_period..]
            .iter()
            .fold(DMatrix::zeros(2, 2), |acc, s| acc + &s.matrix)
            / (20 * per_period) as f64;
        assert!((avg[(0, 0)] - avg[(1, 1)]).abs() < 2e-3 * avg[(0, 0)], "{avg}");
        assert!(avg[(0, 1)].abs() < 2e-3 * avg[(0, 0)], "{avg}");
    }

    #[test]
    fn symplectic_spectrum_examples() {
        let vac = half_identity(2);
        for v in symplectic_eigenvalues(&vac).unwrap() {
            assert_relative_eq!(v, 0.5, epsilon = 1e-14);
        }
        let r: f64 = 0.7;
        let sq = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            0.5 * (2.0 * r).exp(),
            0.5 * (-2.0 * r).exp(),
            1.5,
            1.5,
        ]));
        let v = symplectic_eigenvalues(&sq).unwrap();
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(v[1], 1.5, epsilon = 1e-12);
        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.1, 0.1]));
        assert_relative_eq!(min_symplectic_eigenvalue(&bad), 0.1, epsilon = 1e-14);
        assert!(symplectic_eigenvalues(&DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn vacuum_wigner_peak_and_normalization() {
        let grid = QuadratureGrid::new(6.0, 121).unwrap();
        let w = gaussian_wigner(&half_identity(1), [0.0, 0.0], &grid).unwrap();
        assert_relative_eq!(w.at(60, 60), 1.0 / PI, epsilon = 1e-12);
        assert_relative_eq!(w.integral(), 1.0, epsilon = 1e-8);
        let shifted = gaussian_wigner(&half_identity(1), quadrature_mean(Complex64::new(1.0, 0.0)), &grid).unwrap();
        assert_relative_eq!(shifted.radius_of_maximum().unwrap(), std::f64::consts::SQRT_2, epsilon = 0.1);
    }

    #[test]
    fn averaged_wigner_over_orbit_is_a_ring() {
        let grid = QuadratureGrid::new(6.0, 121).unwrap();
        let states: Vec<_> = (0..64)
            .map(|k| (half_identity(1), Complex64::from_polar(1.5, k as f64 * 2.0 * PI / 64.0)))
            .collect();
        let w = time_averaged_wigner(&states, &grid).unwrap();
        let peak = w.values.iter().cloned().fold(0.0, f64::max);
        assert!(w.at(60, 60) < 0.1 * peak);
        // The ring-averaged Gaussian peaks near R − 1/(4R).
        assert_relative_eq!(w.radius_of_maximum().unwrap(), 1.5 * std::f64::consts::SQRT_2, epsilon = 0.2);
        assert_relative_eq!(w.integral(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn csv_has_upper_triangle_columns() {
        let s = CovarianceSample {
            t: 0.0,
            matrix: half_identity(2),
        };
        let mut buf = Vec::new();
        write_covariance_csv(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 1 + 10);
    }

    #[test]
    fn output_grid_matches_stored_samples() {
        let mf = MeanFieldParams::default();
        let p = FluctuationParams::new(&mf, 0.0);
        let traj = sampled(|_| vec![Complex64::new(0.5, 0.0)], 1, 10.0, 0.1, mf);
        let opts = CovarianceOptions {
            output_stride: 7,
            ..Default::default()
        };
        let run = evolve_covariance(&half_identity(1), &traj, &p, &uncoupled(1), (1.0, 9.0), &opts).unwrap();
        let g = output_grid(&traj, (1.0, 9.0), 7);
        assert_eq!(g.n, run.samples.len());
        for (k, s) in run.samples.iter().enumerate() {
            assert_relative_eq!(g.time(k), s.t, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssh_run_stays_symmetric_and_physical() {
        let coupling = LatticeSpec::Ssh {
            n_sites: 6,
            lambda0: 0.25,
            dimerization: -0.4,
        }
        .build()
        .unwrap();
        let mf = MeanFieldParams::default();
        let init = crate::meanfield::random_initial(6, 3);
        let traj = crate::meanfield::integrate(&init, &mf, &coupling, 300.0, 0.1, &SolverOptions::default()).unwrap();
        let p = FluctuationParams::new(&mf, 0.0);
        let run = evolve_covariance(&half_identity(6), &traj, &p, &coupling, (0.0, 300.0), &CovarianceOptions::default()).unwrap();
        assert_eq!(run.samples[0].matrix, half_identity(6));
        assert!(run.physicality.is_physical(), "{:?}", run.physicality);
        assert!(run.physicality.min_symplectic >= PHYSICALITY_FLOOR);
        for s in &run.samples {
            assert_eq!(s.matrix, s.matrix.transpose());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prop_uncoupled_sites_stay_uncorrelated(
            radii in prop::collection::vec(0.05f64..1.0, 3),
            phases in prop::collection::vec(0.0f64..6.28, 3),
        ) {
            let mf = MeanFieldParams::default();
            let p = FluctuationParams::new(&mf, 0.0);
            let traj = sampled(
                |t| radii.iter().zip(&phases).map(|(&r, &ph)| Complex64::from_polar(r, ph - t)).collect(),
                3, 50.0, 0.1, mf,
            );
            let run = evolve_covariance(&half_identity(3), &traj, &p, &uncoupled(3), (0.0, 50.0), &CovarianceOptions::default()).unwrap();
            for s in &run.samples {
                for i in 0..3 {
                    for j in 0..3 {
                        if i != j {
                            prop_assert!(s.matrix.view((2 * i, 2 * j), (2, 2)).amax() < 1e-10);
                        }
                    }
                }
            }
        }

        #[test]
        fn prop_drift_and_diffusion_are_phase_covariant(
            r in 0.0f64..1.0,
            phase in 0.0f64..6.28,
        ) {
            // Rotating α by φ rotates the squeezing part by 2φ and leaves D fixed.
            let p = params(0.0);
            let a = Complex64::from_polar(r, 0.0);
            let b = Complex64::from_polar(r, phase);
            let ba = build_drift(&[a], &p, &uncoupled(1)).unwrap();
            let bb = build_drift(&[b], &p, &uncoupled(1)).unwrap();
            prop_assert!((ba.trace() - bb.trace()).abs() < 1e-15);
            let da = build_diffusion(&[a], &p);
            let db = build_diffusion(&[b], &p);
            prop_assert!((da - db).amax() < 1e-15);
            let sq = -p.kappa2 * r * r;
            prop_assert!((bb[(0, 0)] - ba[(0, 0)] - sq * ((2.0 * phase).cos() - 1.0)).abs() < 1e-15);
        }
    }
}
