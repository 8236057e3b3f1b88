//! Truncated-Fock Lindblad reference for one or two oscillators.
//!
//! Density matrices are dense `d^n × d^n` complex matrices stored
//! column-major, matching `nalgebra`. Operators are kept as sparse triplet
//! lists so one Lindbladian application costs `O(nnz · dim)`.
//!
//! The steady state is found inside the block of the Liouvillian that
//! couples `|m⟩⟨n|` with equal total excitation number. Every term of the
//! model (number-conserving Hamiltonian, `a†`, `a²` and `a` jumps) maps
//! this block onto itself, and for a unique steady state it is the only
//! block with a null vector.

use std::f64::consts::{PI, TAU};

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluctuations::{self, CovarianceOptions, FluctuationParams};
use crate::lattice::{build_custom, Bond};
use crate::meanfield::{integrate_window, random_initial, MeanFieldParams};
use crate::measures::{s_c_instantaneous, TimeWindow};
use crate::ode::{self, OdeSystem, SampleGrid, SolverOptions, SolverStats};
use crate::phasespace::{QuadratureGrid, WignerDomain, WignerField};

/// Largest per-mode truncation accepted for two-mode runs.
pub const TWO_MODE_CAP: usize = 20;
/// Population allowed in the two highest Fock levels of any mode.
pub const LEAKAGE_TOL: f64 = 1e-6;
pub const DEFAULT_TRUNCATION: usize = 15;
pub const ORACLE_TRUNCATION: usize = 30;
pub const DEFAULT_PHASE_BINS: usize = 128;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Product Fock basis of one or two modes, mode 0 slow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockSpace {
    pub n_modes: usize,
    pub d: usize,
}

impl FockSpace {
    pub fn new(n_modes: usize, d: usize) -> Result<Self> {
        if !(1..=2).contains(&n_modes) {
            return Err(Error::InvalidInput(format!(
                "exact model supports 1 or 2 modes, got {n_modes}"
            )));
        }
        if d < 2 {
            return Err(Error::InvalidInput(format!("truncation must be >= 2, got {d}")));
        }
        if n_modes == 2 && d > TWO_MODE_CAP {
            return Err(Error::TruncationCap {
                dim: d,
                cap: TWO_MODE_CAP,
                guidance: "use the Gaussian covariance model for larger truncations".into(),
            });
        }
        Ok(Self { n_modes, d })
    }

    pub fn dim(&self) -> usize {
        self.d.pow(self.n_modes as u32)
    }

    /// Occupation of `mode` in basis state `idx`.
    pub fn occupation(&self, idx: usize, mode: usize) -> usize {
        match (self.n_modes, mode) {
            (1, _) => idx,
            (_, 0) => idx / self.d,
            _ => idx % self.d,
        }
    }

    pub fn total_number(&self, idx: usize) -> usize {
        (0..self.n_modes).map(|m| self.occupation(idx, m)).sum()
    }

    pub fn index(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.n_modes {
            return Err(Error::DimensionMismatch {
                expected: self.n_modes,
                got: occupations.len(),
            });
        }
        if let Some(&n) = occupations.iter().find(|&&n| n >= self.d) {
            return Err(Error::IndexOutOfRange { index: n, len: self.d });
        }
        Ok(occupations.iter().fold(0, |acc, &n| acc * self.d + n))
    }

    /// Lowering operator of `mode`.
    pub fn annihilation(&self, mode: usize) -> SparseOp {
        let dim = self.dim();
        let mut entries = Vec::new();
        for col in 0..dim {
            let n = self.occupation(col, mode);
            if n > 0 {
                let row = match (self.n_modes, mode) {
                    (1, _) => col - 1,
                    (_, 0) => col - self.d,
                    _ => col - 1,
                };
                entries.push((row, col, Complex64::new((n as f64).sqrt(), 0.0)));
            }
        }
        SparseOp { dim, entries }
    }

    pub fn number(&self, mode: usize) -> SparseOp {
        let dim = self.dim();
        let entries = (0..dim)
            .filter_map(|k| {
                let n = self.occupation(k, mode);
                (n > 0).then(|| (k, k, Complex64::new(n as f64, 0.0)))
            })
            .collect();
        SparseOp { dim, entries }
    }
}

/// Square operator as `(row, col, value)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    pub dim: usize,
    pub entries: Vec<(usize, usize, Complex64)>,
}

impl SparseOp {
    pub fn zero(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(r, c, v)| (c, r, v.conj())).collect(),
        }
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(r, c, v)| (r, c, s * v)).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    fn from_dense(m: &DMatrix<Complex64>) -> Self {
        let mut entries = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if m[(r, c)] != ZERO {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Self { dim: m.nrows(), entries }
    }

    pub fn product(&self, other: &SparseOp) -> SparseOp {
        Self::from_dense(&(self.to_dense() * other.to_dense()))
    }

    pub fn sum(&self, other: &SparseOp) -> SparseOp {
        Self::from_dense(&(self.to_dense() + other.to_dense()))
    }

    /// `out += s · O ρ` for column-major `ρ`.
    fn mul_left(&self, s: Complex64, rho: &[Complex64], out: &mut [Complex64]) {
        let n = self.dim;
        for &(r, k, v) in &self.entries {
            let f = s * v;
            for j in 0..n {
                out[j * n + r] += f * rho[j * n + k];
            }
        }
    }

    /// `out += s · ρ O†` for column-major `ρ`.
    fn mul_right_adjoint(&self, s: Complex64, rho: &[Complex64], out: &mut [Complex64]) {
        let n = self.dim;
        for &(c, k, v) in &self.entries {
            let f = s * v.conj();
            let (src, dst) = (k * n, c * n);
            for i in 0..n {
                out[dst + i] += f * rho[src + i];
            }
        }
    }

    /// Column lists `cols[c] = [(row, value)]`.
    fn columns(&self) -> Vec<Vec<(usize, Complex64)>> {
        let mut cols = vec![Vec::new(); self.dim];
        for &(r, c, v) in &self.entries {
            cols[c].push((r, v));
        }
        cols
    }
}

/// Rates and couplings of the exact model, in units of ω0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactParams {
    pub omega0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    #[serde(default)]
    pub gamma_bar: f64,
    /// Hopping between the two modes; ignored for one mode.
    #[serde(default)]
    pub lambda: f64,
}

impl ExactParams {
    pub fn from_meanfield(p: &MeanFieldParams, gamma_bar: f64, lambda: f64) -> Self {
        Self {
            omega0: p.omega0,
            kappa1: p.kappa1,
            kappa2: p.kappa2,
            gamma_bar,
            lambda,
        }
    }

    fn validate(&self) -> Result<()> {
        let rates = [self.kappa1, self.kappa2, self.gamma_bar];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || !self.omega0.is_finite() || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("invalid exact-model parameters {self:?}")));
        }
        Ok(())
    }
}

/// `ρ̇ = −i(H_eff ρ − ρ H_eff†) + Σ γ_k L_k ρ L_k†` with `H_eff = H − (i/2) Σ γ_k L_k† L_k`.
#[derive(Debug, Clone)]
pub struct Lindbladian {
    pub hamiltonian: SparseOp,
    pub jumps: Vec<(f64, SparseOp)>,
    heff: SparseOp,
}

impl Lindbladian {
    pub fn new(hamiltonian: SparseOp, jumps: Vec<(f64, SparseOp)>) -> Result<Self> {
        let dim = hamiltonian.dim;
        if let Some((_, op)) = jumps.iter().find(|(_, op)| op.dim != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: op.dim });
        }
        let mut heff = hamiltonian.clone();
        for (rate, l) in &jumps {
            heff = heff.sum(&l.adjoint().product(l).scaled(Complex64::new(0.0, -0.5 * rate)));
        }
        Ok(Self { hamiltonian, jumps, heff })
    }

    /// Oscillator model: `ω0 Σ n_j + λ(a1†a2 + h.c.)` with `κ1 D[a†] + κ2 D[a²] + γ̄ D[a]` per mode.
    pub fn vdp(space: &FockSpace, params: &ExactParams) -> Result<Self> {
        params.validate()?;
        let dim = space.dim();
        let mut h = SparseOp::zero(dim);
        for m in 0..space.n_modes {
            h = h.sum(&space.number(m).scaled(params.omega0.into()));
        }
        if space.n_modes == 2 && params.lambda != 0.0 {
            let hop = space.annihilation(0).adjoint().product(&space.annihilation(1));
            h = h.sum(&hop.scaled(params.lambda.into()));
            h = h.sum(&hop.adjoint().scaled(params.lambda.into()));
        }
        let mut jumps = Vec::new();
        for m in 0..space.n_modes {
            let a = space.annihilation(m);
            if params.kappa1 > 0.0 {
                jumps.push((params.kappa1, a.adjoint()));
            }
            if params.kappa2 > 0.0 {
                jumps.push((params.kappa2, a.product(&a)));
            }
            if params.gamma_bar > 0.0 {
                jumps.push((params.gamma_bar, a.clone()));
            }
        }
        Self::new(h, jumps)
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim
    }

    /// Writes `L(ρ)` into `out` (overwritten). Both are column-major.
    pub fn apply(&self, rho: &[Complex64], out: &mut [Complex64]) {
        self.apply_with(&self.heff, rho, out);
    }

    fn apply_with(&self, heff: &SparseOp, rho: &[Complex64], out: &mut [Complex64]) {
        out.iter_mut().for_each(|v| *v = ZERO);
        heff.mul_left(-I, rho, out);
        heff.mul_right_adjoint(I, rho, out);
        let mut tmp = vec![ZERO; rho.len()];
        for (rate, l) in &self.jumps {
            tmp.iter_mut().for_each(|v| *v = ZERO);
            l.mul_left(Complex64::new(1.0, 0.0), rho, &mut tmp);
            l.mul_right_adjoint(Complex64::new(*rate, 0.0), &tmp, out);
        }
    }
}

/// Generator of the evolution, possibly time dependent.
pub trait Generator {
    fn dim(&self) -> usize;
    fn apply(&mut self, t: f64, rho: &[Complex64], out: &mut [Complex64]);
}

impl Generator for Lindbladian {
    fn dim(&self) -> usize {
        self.hamiltonian.dim
    }

    fn apply(&mut self, _t: f64, rho: &[Complex64], out: &mut [Complex64]) {
        Lindbladian::apply(self, rho, out);
    }
}

/// Static Lindbladian plus `f(t) O + conj(f(t)) O†` in the Hamiltonian.
pub struct Driven<F> {
    pub base: Lindbladian,
    pub drive: SparseOp,
    pub coefficient: F,
    drive_adj: SparseOp,
}

impl<F: FnMut(f64) -> Complex64> Driven<F> {
    pub fn new(base: Lindbladian, drive: SparseOp, coefficient: F) -> Result<Self> {
        if drive.dim != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                got: drive.dim,
            });
        }
        let drive_adj = drive.adjoint();
        Ok(Self {
            base,
            drive,
            coefficient,
            drive_adj,
        })
    }
}

impl<F: FnMut(f64) -> Complex64> Generator for Driven<F> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&mut self, t: f64, rho: &[Complex64], out: &mut [Complex64]) {
        self.base.apply(rho, out);
        let f = (self.coefficient)(t);
        for (op, c) in [(&self.drive, f), (&self.drive_adj, f.conj())] {
            op.mul_left(-I * c, rho, out);
            op.mul_right_adjoint(I * c.conj(), rho, out);
        }
    }
}

/// Density matrix on a [`FockSpace`] at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FockDensityMatrix {
    pub space: FockSpace,
    pub rho: DMatrix<Complex64>,
    pub t: f64,
}

pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-8;
pub const POSITIVITY_TOL: f64 = 1e-8;

impl FockDensityMatrix {
    pub fn from_matrix(space: FockSpace, rho: DMatrix<Complex64>, t: f64) -> Result<Self> {
        let dim = space.dim();
        if rho.nrows() != dim || rho.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: rho.nrows(),
            });
        }
        Ok(Self { space, rho, t })
    }

    pub fn fock(space: FockSpace, occupations: &[usize]) -> Result<Self> {
        let k = space.index(occupations)?;
        let mut rho = DMatrix::zeros(space.dim(), space.dim());
        rho[(k, k)] = Complex64::new(1.0, 0.0);
        Ok(Self { space, rho, t: 0.0 })
    }

    pub fn vacuum(space: FockSpace) -> Self {
        Self::fock(space, &vec![0; space.n_modes]).expect("vacuum is in every space")
    }

    /// Product of coherent states, truncated and renormalized.
    pub fn coherent(space: FockSpace, alphas: &[Complex64]) -> Result<Self> {
        if alphas.len() != space.n_modes {
            return Err(Error::DimensionMismatch {
                expected: space.n_modes,
                got: alphas.len(),
            });
        }
        let single = |alpha: Complex64| {
            let mut amp = vec![ZERO; space.d];
            amp[0] = Complex64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
            for n in 1..space.d {
                amp[n] = amp[n - 1] * alpha / (n as f64).sqrt();
            }
            amp
        };
        let amps: Vec<Vec<Complex64>> = alphas.iter().map(|&a| single(a)).collect();
        let psi = DVector::from_fn(space.dim(), |k, _| {
            (0..space.n_modes).map(|m| amps[m][space.occupation(k, m)]).product::<Complex64>()
        });
        let psi = &psi / Complex64::new(psi.norm(), 0.0);
        Ok(Self {
            space,
            rho: &psi * psi.adjoint(),
            t: 0.0,
        })
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let n = self.rho.nrows();
        let mut worst: f64 = 0.0;
        for c in 0..n {
            for r in 0..=c {
                worst = worst.max((self.rho[(r, c)] - self.rho[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.rho + self.rho.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Checks Hermiticity, unit trace and positivity within the module tolerances.
    pub fn validate(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        let tr = self.trace();
        let min_eig = self.min_eigenvalue();
        if herm > HERMITICITY_TOL || (tr - 1.0).norm() > TRACE_TOL || min_eig < -POSITIVITY_TOL {
            return Err(Error::Physicality {
                time: self.t,
                detail: format!(
                    "hermiticity error {herm:e}, trace {tr}, min eigenvalue {min_eig:e}"
                ),
            });
        }
        Ok(())
    }

    pub fn expect(&self, op: &SparseOp) -> Complex64 {
        op.entries.iter().map(|&(r, c, v)| v * self.rho[(c, r)]).sum()
    }

    pub fn mean_amplitude(&self, mode: usize) -> Complex64 {
        self.expect(&self.space.annihilation(mode))
    }

    pub fn occupation(&self, mode: usize) -> f64 {
        (0..self.space.dim())
            .map(|k| self.space.occupation(k, mode) as f64 * self.rho[(k, k)].re)
            .sum()
    }

    /// `⟨a_j† a_k⟩`.
    pub fn correlation(&self, j: usize, k: usize) -> Complex64 {
        let op = self.space.annihilation(j).adjoint().product(&self.space.annihilation(k));
        self.expect(&op)
    }

    /// Population of each Fock level of `mode`.
    pub fn fock_populations(&self, mode: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.space.d];
        for k in 0..self.space.dim() {
            p[self.space.occupation(k, mode)] += self.rho[(k, k)].re;
        }
        p
    }

    /// Largest population in the two highest Fock levels over all modes.
    pub fn leakage(&self) -> f64 {
        (0..self.space.n_modes)
            .map(|m| {
                let p = self.fock_populations(m);
                p[p.len() - 2..].iter().sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Reduced state of one mode.
    pub fn reduced(&self, mode: usize) -> Result<FockDensityMatrix> {
        let d = self.space.d;
        let single = FockSpace::new(1, d)?;
        if self.space.n_modes == 1 {
            return Ok(self.clone());
        }
        if mode >= 2 {
            return Err(Error::IndexOutOfRange { index: mode, len: 2 });
        }
        let mut rho = DMatrix::zeros(d, d);
        for c in 0..self.space.dim() {
            for r in 0..self.space.dim() {
                let other = 1 - mode;
                if self.space.occupation(r, other) == self.space.occupation(c, other) {
                    rho[(self.space.occupation(r, mode), self.space.occupation(c, mode))] += self.rho[(r, c)];
                }
            }
        }
        Ok(FockDensityMatrix { space: single, rho, t: self.t })
    }

    /// Half the trace norm of `self − other`.
    pub fn trace_distance(&self, other: &FockDensityMatrix) -> f64 {
        let diff = &self.rho - &other.rho;
        let h = (&diff + diff.adjoint()) * Complex64::new(0.5, 0.0);
        0.5 * h.symmetric_eigenvalues().iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// `L(ρ)` for the oscillator model.
pub fn lindblad_rhs(state: &FockDensityMatrix, params: &ExactParams) -> Result<DMatrix<Complex64>> {
    let l = Lindbladian::vdp(&state.space, params)?;
    let leak = state.leakage();
    if leak > LEAKAGE_TOL {
        warn!("truncation d = {} leaks {leak:.3e} into the top two levels", state.space.d);
    }
    let n = state.space.dim();
    let mut out = DMatrix::zeros(n, n);
    l.apply(state.rho.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Result of [`steady_state`].
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub state: FockDensityMatrix,
    /// `max |L(ρ)|`.
    pub residual: f64,
    /// Smallest over largest pivot magnitude of the bordered system.
    pub pivot_ratio: f64,
    pub leakage: f64,
    pub sector_dim: usize,
}

/// Pivot ratio below which the null space is reported as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-13;

/// Null vector of the Liouvillian with unit trace, from a dense LU solve of
/// the equal-excitation block with one row replaced by the trace condition.
pub fn steady_state(space: FockSpace, params: &ExactParams) -> Result<SteadyState> {
    let l = Lindbladian::vdp(&space, params)?;
    let dim = space.dim();
    let n_of: Vec<usize> = (0..dim).map(|k| space.total_number(k)).collect();
    let mut index = vec![usize::MAX; dim * dim];
    let mut pairs = Vec::new();
    for c in 0..dim {
        for r in 0..dim {
            if n_of[r] == n_of[c] {
                index[c * dim + r] = pairs.len();
                pairs.push((r, c));
            }
        }
    }
    let s = pairs.len();
    let heff_cols = l.heff.columns();
    let jump_cols: Vec<(f64, Vec<Vec<(usize, Complex64)>>)> =
        l.jumps.iter().map(|(g, op)| (*g, op.columns())).collect();

    let mut m = DMatrix::<Complex64>::zeros(s, s);
    for (col, &(a, b)) in pairs.iter().enumerate() {
        let mut put = |r: usize, c: usize, v: Complex64| {
            let row = index[c * dim + r];
            debug_assert!(row != usize::MAX, "generator leaves the excitation block");
            if row != usize::MAX {
                m[(row, col)] += v;
            }
        };
        for &(r, v) in &heff_cols[a] {
            put(r, b, -I * v);
        }
        for &(c, v) in &heff_cols[b] {
            put(a, c, I * v.conj());
        }
        for (g, cols) in &jump_cols {
            for &(r, u) in &cols[a] {
                for &(c, v) in &cols[b] {
                    put(r, c, *g * u * v.conj());
                }
            }
        }
    }
    let anchor = index[0];
    for col in 0..s {
        let (r, c) = pairs[col];
        m[(anchor, col)] = if r == c { Complex64::new(1.0, 0.0) } else { ZERO };
    }
    let mut rhs = DVector::<Complex64>::zeros(s);
    rhs[anchor] = Complex64::new(1.0, 0.0);

    let lu = m.lu();
    let diag = lu.u().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.norm()), hi.max(v.norm())));
    let pivot_ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    if !(pivot_ratio > DEGENERACY_RATIO) {
        return Err(Error::DegenerateSteadyState(format!(
            "pivot ratio {pivot_ratio:e} in a block of size {s}"
        )));
    }
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::DegenerateSteadyState("singular bordered system".into()))?;

    let mut rho = DMatrix::<Complex64>::zeros(dim, dim);
    for (k, &(r, c)) in pairs.iter().enumerate() {
        rho[(r, c)] = x[k];
    }
    let rho = (&rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
    let mut out = DMatrix::zeros(dim, dim);
    l.apply(rho.as_slice(), out.as_mut_slice());
    let residual = out.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let state = FockDensityMatrix { space, rho, t: f64::INFINITY };
    let leakage = state.leakage();
    if leakage > LEAKAGE_TOL {
        warn!("steady state at d = {} leaks {leakage:.3e} into the top two levels", space.d);
    }
    Ok(SteadyState {
        state,
        residual,
        pivot_ratio,
        leakage,
        sector_dim: s,
    })
}

struct PackedGenerator<'a, G> {
    generator: &'a mut G,
    dim: usize,
    rho: Vec<Complex64>,
    drho: Vec<Complex64>,
    worst_trace_drift: f64,
    worst_hermiticity: f64,
}

impl<G: Generator> OdeSystem for PackedGenerator<'_, G> {
    fn dim(&self) -> usize {
        2 * self.dim * self.dim
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        for (z, p) in self.rho.iter_mut().zip(y.chunks_exact(2)) {
            *z = Complex64::new(p[0], p[1]);
        }
        self.generator.apply(t, &self.rho, &mut self.drho);
        for (p, z) in dy.chunks_exact_mut(2).zip(&self.drho) {
            p[0] = z.re;
            p[1] = z.im;
        }
    }

    fn project(&mut self, _t: f64, y: &mut [f64]) -> bool {
        let n = self.dim;
        let mut herm: f64 = 0.0;
        for c in 0..n {
            for r in 0..c {
                let (u, v) = (2 * (c * n + r), 2 * (r * n + c));
                herm = herm.max((y[u] - y[v]).abs()).max((y[u + 1] + y[v + 1]).abs());
                let re = 0.5 * (y[u] + y[v]);
                let im = 0.5 * (y[u + 1] - y[v + 1]);
                y[u] = re;
                y[v] = re;
                y[u + 1] = im;
                y[v + 1] = -im;
            }
        }
        let mut tr = 0.0;
        for k in 0..n {
            let u = 2 * (k * n + k);
            herm = herm.max(y[u + 1].abs());
            y[u + 1] = 0.0;
            tr += y[u];
        }
        self.worst_trace_drift = self.worst_trace_drift.max((tr - 1.0).abs());
        self.worst_hermiticity = self.worst_hermiticity.max(herm);
        y.iter_mut().for_each(|v| *v /= tr);
        true
    }
}

/// Per-step drift allowed before projection; larger drift fails the run.
pub const PROJECTION_TOL: f64 = 1e-6;

/// Integrates `ρ̇ = G(t) ρ` from `rho0.t` to `t_end`, visiting the state on
/// the grid `rho0.t + k·dt_out`. Hermiticity and trace are restored after
/// every accepted step.
pub fn evolve_exact_streaming<G, F>(
    rho0: &FockDensityMatrix,
    generator: &mut G,
    t_end: f64,
    dt_out: f64,
    opts: &SolverOptions,
    mut visit: F,
) -> Result<SolverStats>
where
    G: Generator,
    F: FnMut(&FockDensityMatrix) -> Result<()>,
{
    let dim = rho0.space.dim();
    if generator.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: generator.dim(),
        });
    }
    if !(dt_out > 0.0) {
        return Err(Error::InvalidInput(format!("dt_out must be > 0, got {dt_out}")));
    }
    rho0.validate()?;
    let t0 = rho0.t;
    let n_out = ((t_end - t0) / dt_out + 1e-9).floor().max(0.0) as usize + 1;
    let grid = SampleGrid { t0, dt: dt_out, n: n_out };
    let mut y0 = Vec::with_capacity(2 * dim * dim);
    for z in rho0.rho.iter() {
        y0.push(z.re);
        y0.push(z.im);
    }
    let mut sys = PackedGenerator {
        generator,
        dim,
        rho: vec![ZERO; dim * dim],
        drho: vec![ZERO; dim * dim],
        worst_trace_drift: 0.0,
        worst_hermiticity: 0.0,
    };
    let space = rho0.space;
    let stats = ode::integrate(&mut sys, t0, &y0, t_end, grid, opts, |_, t, y| {
        let rho = DMatrix::from_iterator(dim, dim, y.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])));
        visit(&FockDensityMatrix { space, rho, t })
    })?;
    let (tr, herm) = (sys.worst_trace_drift, sys.worst_hermiticity);
    if tr > PROJECTION_TOL || herm > PROJECTION_TOL {
        return Err(Error::IntegrationFailure {
            last_good_time: t_end,
            reason: format!("projection corrected trace drift {tr:e} and hermiticity error {herm:e}"),
        });
    }
    Ok(stats)
}

/// Collecting form of [`evolve_exact_streaming`].
pub fn evolve_exact<G: Generator>(
    rho0: &FockDensityMatrix,
    generator: &mut G,
    t_end: f64,
    dt_out: f64,
    opts: &SolverOptions,
) -> Result<Vec<FockDensityMatrix>> {
    let mut out = Vec::new();
    evolve_exact_streaming(rho0, generator, t_end, dt_out, opts, |s| {
        out.push(s.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Recurrence for the Wigner function of `|m⟩⟨n|`, evaluated at one point.
/// `visit(m, n, w)` receives the weight multiplying `ρ_mn` for `m ≤ n`;
/// the `(n, m)` weight is its conjugate.
fn fock_wigner_weights<F: FnMut(usize, usize, Complex64)>(d: usize, x: f64, p: f64, mut visit: F) {
    let a = Complex64::new(x, p) / 2f64.sqrt();
    let mut w = vec![ZERO; d];
    w[0] = Complex64::new((-(x * x + p * p)).exp() / PI, 0.0);
    visit(0, 0, w[0]);
    for n in 1..d {
        w[n] = 2.0 * a * w[n - 1] / (n as f64).sqrt();
        visit(0, n, w[n]);
    }
    for m in 1..d {
        let sm = (m as f64).sqrt();
        let mut temp = w[m];
        w[m] = (2.0 * a.conj() * temp - sm * w[m - 1]) / sm;
        visit(m, m, w[m]);
        for n in m + 1..d {
            let next = (2.0 * a * w[n - 1] - sm * temp) / (n as f64).sqrt();
            temp = w[n];
            w[n] = next;
            visit(m, n, w[n]);
        }
    }
}

fn single_mode_wigner_at(rho: &DMatrix<Complex64>, x: f64, p: f64) -> f64 {
    let mut acc = 0.0;
    fock_wigner_weights(rho.nrows(), x, p, |m, n, w| {
        let v = rho[(m, n)] * w;
        acc += if m == n { v.re } else { 2.0 * v.re };
    });
    acc
}

/// Normalization deficit that triggers a warning in [`wigner_single`].
pub const WIGNER_DEFICIT_WARN: f64 = 0.05;

/// Wigner function of a single-mode state on a quadrature grid, with
/// vacuum variance 1/2 (`W(0, 0) = 1/π` for the vacuum).
pub fn wigner_single(state: &FockDensityMatrix, grid: &QuadratureGrid) -> Result<WignerField> {
    if state.space.n_modes != 1 {
        return Err(Error::InvalidInput("wigner_single needs a one-mode state".into()));
    }
    let axis = grid.axis();
    let mut values = Vec::with_capacity(axis.len() * axis.len());
    for &x in &axis {
        for &p in &axis {
            values.push(single_mode_wigner_at(&state.rho, x, p));
        }
    }
    let field = WignerField::quadrature(grid, values);
    let deficit = (1.0 - field.integral()).abs();
    if deficit > WIGNER_DEFICIT_WARN {
        warn!("Wigner grid of half width {} misses {deficit:.3} of the norm", grid.half_width);
    }
    Ok(field)
}

/// Radial quadrature settings for [`phase_difference_marginal`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginalOptions {
    pub n_bins: usize,
    /// Upper limit of the quadrature radius; `None` derives it from `d`.
    pub radial_cutoff: Option<f64>,
    /// Simpson intervals (rounded up to even).
    pub radial_intervals: usize,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_PHASE_BINS,
            radial_cutoff: None,
            radial_intervals: 4000,
        }
    }
}

/// `G_mn = ∫ F_mn(r) r dr`, where `F_mn(r) e^{i(n−m)φ}` is the Wigner
/// function of `|m⟩⟨n|` at radius `r`, angle `φ`.
fn radial_moments(d: usize, cutoff: f64, intervals: usize) -> DMatrix<f64> {
    let steps = intervals + intervals % 2;
    let h = cutoff / steps as f64;
    let mut g = DMatrix::zeros(d, d);
    for k in 0..=steps {
        let r = k as f64 * h;
        let weight = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        } * h
            / 3.0
            * r;
        fock_wigner_weights(d, r, 0.0, |m, n, w| {
            g[(m, n)] += weight * w.re;
        });
    }
    for m in 0..d {
        for n in 0..m {
            g[(m, n)] = g[(n, m)];
        }
    }
    g
}

/// Two-mode Wigner function integrated over both radii and the phase sum,
/// tabulated on `n_bins` centers of `Δφ = φ1 − φ2 ∈ [−π, π)`.
pub fn phase_difference_marginal(state: &FockDensityMatrix, opts: &MarginalOptions) -> Result<WignerField> {
    if state.space.n_modes != 2 {
        return Err(Error::InvalidInput("phase marginal needs a two-mode state".into()));
    }
    if opts.n_bins < 2 || opts.radial_intervals < 2 {
        return Err(Error::InvalidInput("phase marginal needs n_bins >= 2 and radial_intervals >= 2".into()));
    }
    let d = state.space.d;
    let cutoff = opts
        .radial_cutoff
        .unwrap_or_else(|| (2.0 * d as f64 - 1.0).sqrt() + 6.0);
    let g = radial_moments(d, cutoff, opts.radial_intervals);
    let space = state.space;
    // c[k + (d−1)] multiplies e^{ikΔφ}, k = n1 − m1 = m2 − n2.
    let mut coeff = vec![ZERO; 2 * d - 1];
    for c in 0..space.dim() {
        let (n1, n2) = (space.occupation(c, 0), space.occupation(c, 1));
        for r in 0..space.dim() {
            let (m1, m2) = (space.occupation(r, 0), space.occupation(r, 1));
            if m1 + m2 != n1 + n2 {
                continue;
            }
            let k = n1 as isize - m1 as isize;
            coeff[(k + d as isize - 1) as usize] += state.rho[(r, c)] * (TAU * g[(m1, n1)] * g[(m2, n2)]);
        }
    }
    let n_bins = opts.n_bins;
    let dphi: Vec<f64> = (0..n_bins)
        .map(|b| -PI + (b as f64 + 0.5) * TAU / n_bins as f64)
        .collect();
    let values = dphi
        .iter()
        .map(|&phi| {
            coeff
                .iter()
                .enumerate()
                .map(|(idx, c)| {
                    let k = idx as f64 - (d as f64 - 1.0);
                    (c * Complex64::from_polar(1.0, k * phi)).re
                })
                .sum()
        })
        .collect();
    Ok(WignerField {
        domain: WignerDomain::PhaseDifference { dphi },
        values,
    })
}

/// `1 / ⟨(x1 − x2)² + (p1 − p2)²⟩` from full second moments,
/// i.e. `1 / (2 + 2n1 + 2n2 − 4 Re⟨a1† a2⟩)`.
pub fn s_c_exact(state: &FockDensityMatrix) -> Result<f64> {
    if state.space.n_modes != 2 {
        return Err(Error::InvalidInput("S_c needs a two-mode state".into()));
    }
    let denom = 2.0 + 2.0 * state.occupation(0) + 2.0 * state.occupation(1) - 4.0 * state.correlation(0, 1).re;
    if !(denom > 0.0) {
        return Err(Error::Physicality {
            time: state.t,
            detail: format!("non-positive difference variance {denom:e}"),
        });
    }
    Ok(1.0 / denom)
}

/// Trapezoidal time average of [`s_c_exact`] over the states inside `window`.
pub fn s_c_exact_average(states: &[FockDensityMatrix], window: &TimeWindow) -> Result<f64> {
    let inside: Vec<&FockDensityMatrix> = states.iter().filter(|s| window.contains(s.t)).collect();
    if inside.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "window [{}, {}] holds {} states, need 2",
            window.t_i,
            window.t_f,
            inside.len()
        )));
    }
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for s in &inside {
        let v = s_c_exact(s)?;
        if let Some((tp, vp)) = prev {
            acc += 0.5 * (s.t - tp) * (v + vp);
        }
        prev = Some((s.t, v));
    }
    Ok(acc / (inside.last().unwrap().t - inside[0].t))
}

/// Time grid of the Gaussian two-mode comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveRun {
    pub t_end: f64,
    pub dt_out: f64,
    pub window: (f64, f64),
    pub covariance: CovarianceOptions,
}

impl Default for EffectiveRun {
    fn default() -> Self {
        let mut covariance = CovarianceOptions::default();
        covariance.check_stride = 1000;
        Self {
            t_end: 2.4e4,
            dt_out: 0.25,
            window: (2.0e4, 2.4e4),
            covariance,
        }
    }
}

/// Gaussian effective-model `⟨S_c⟩` of two coupled oscillators, averaged
/// over random mean-field initial conditions drawn from `seeds`.
pub fn effective_two_mode_s_c(params: &FluctuationParams, lambda: f64, seeds: &[u64], run: &EffectiveRun) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("need at least one seed".into()));
    }
    let coupling = build_custom(2, &[Bond { i: 0, j: 1, value: lambda }])?;
    let mf = params.effective_meanfield()?;
    let window = TimeWindow::new(run.window.0, run.window.1)?;
    let mut total = 0.0;
    for &seed in seeds {
        let init = random_initial(2, seed);
        let (traj, _) = integrate_window(&init, &mf, &coupling, run.t_end, run.dt_out, 0.0, &run.covariance.solver)?;
        let c0 = DMatrix::identity(4, 4) * 0.5;
        let mut acc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        let mut first = None;
        let (report, _) = fluctuations::evolve_covariance_streaming(
            &c0,
            &traj,
            params,
            &coupling,
            (0.0, run.window.1),
            &run.covariance,
            |_, t, c| {
                if window.contains(t) {
                    let v = s_c_instantaneous(c, 0, 1)?;
                    if let Some((tp, vp)) = prev {
                        acc += 0.5 * (t - tp) * (v + vp);
                    }
                    first.get_or_insert(t);
                    prev = Some((t, v));
                }
                Ok(())
            },
        )?;
        if !report.is_physical() {
            return Err(Error::Physicality {
                time: report.t_of_min,
                detail: format!("min symplectic eigenvalue {:e}", report.min_symplectic),
            });
        }
        let (t0, (t1, _)) = (first.unwrap_or(0.0), prev.unwrap_or((0.0, 0.0)));
        if !(t1 > t0) {
            return Err(Error::WindowOutsideData {
                t_i: window.t_i,
                t_f: window.t_f,
                data_start: traj.start(),
                data_end: traj.end(),
            });
        }
        total += acc / (t1 - t0);
    }
    Ok(total / seeds.len() as f64)
}

/// One coupling value of the exact-versus-effective comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPoint {
    pub lambda: f64,
    pub exact: f64,
    pub effective: f64,
    pub leakage: f64,
}

/// Exact steady-state and Gaussian `⟨S_c⟩` over a list of couplings.
pub fn compare_s_c(
    params: &FluctuationParams,
    lambdas: &[f64],
    d: usize,
    seeds: &[u64],
    run: &EffectiveRun,
) -> Result<Vec<ComparisonPoint>> {
    let space = FockSpace::new(2, d)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let exact_params = ExactParams {
                omega0: params.omega0,
                kappa1: params.kappa1,
                kappa2: params.kappa2,
                gamma_bar: params.gamma_bar,
                lambda,
            };
            let ss = steady_state(space, &exact_params)?;
            Ok(ComparisonPoint {
                lambda,
                exact: s_c_exact(&ss.state)?,
                effective: effective_two_mode_s_c(params, lambda, seeds, run)?,
                leakage: ss.leakage,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vdp() -> ExactParams {
        ExactParams {
            omega0: 1.0,
            kappa1: 5e-3,
            kappa2: 1e-2,
            gamma_bar: 0.0,
            lambda: 0.0,
        }
    }

    fn max_abs(m: &DMatrix<Complex64>) -> f64 {
        m.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn truncation_cap_rejects_large_two_mode_spaces() {
        assert!(matches!(FockSpace::new(2, 21), Err(Error::TruncationCap { .. })));
        assert!(FockSpace::new(1, 40).is_ok());
        assert!(FockSpace::new(3, 4).is_err());
    }

    #[test]
    fn basis_indexing_round_trips() {
        let s = FockSpace::new(2, 4).unwrap();
        let k = s.index(&[2, 3]).unwrap();
        assert_eq!((s.occupation(k, 0), s.occupation(k, 1)), (2, 3));
        assert_eq!(s.total_number(k), 5);
        let a1 = s.annihilation(0).to_dense();
        let a2 = s.annihilation(1).to_dense();
        let comm = &a1 * &a2 - &a2 * &a1;
        assert!(max_abs(&comm) < 1e-15);
    }

    #[test]
    fn vacuum_is_dark_under_two_phonon_loss() {
        let space = FockSpace::new(1, 8).unwrap();
        let p = ExactParams { omega0: 0.0, kappa1: 0.0, ..vdp() };
        let rhs = lindblad_rhs(&FockDensityMatrix::vacuum(space), &p).unwrap();
        assert_eq!(max_abs(&rhs), 0.0);
    }

    #[test]
    fn gain_populates_first_level() {
        let space = FockSpace::new(1, 8).unwrap();
        let p = ExactParams { kappa2: 0.0, ..vdp() };
        let rhs = lindblad_rhs(&FockDensityMatrix::vacuum(space), &p).unwrap();
        assert!((rhs[(1, 1)].re - p.kappa1).abs() < 1e-18);
        assert!((rhs[(0, 0)].re + p.kappa1).abs() < 1e-18);
        assert!(rhs.trace().norm() < 1e-18);
    }

    #[test]
    fn pure_loss_relaxes_to_vacuum() {
        let space = FockSpace::new(2, 6).unwrap();
        let p = ExactParams { kappa1: 0.0, gamma_bar: 1e-3, lambda: 0.3, ..vdp() };
        let ss = steady_state(space, &p).unwrap();
        let vac = FockDensityMatrix::vacuum(space);
        assert!(ss.state.trace_distance(&vac) < 1e-10);
    }

    #[test]
    fn two_phonon_loss_alone_has_a_degenerate_steady_state() {
        // |0⟩ and |1⟩ are both dark for a².
        let space = FockSpace::new(1, 6).unwrap();
        let p = ExactParams { kappa1: 0.0, ..vdp() };
        assert!(matches!(steady_state(space, &p), Err(Error::DegenerateSteadyState(_))));
    }

    /// Populations of a single oscillator obey a closed rate equation;
    /// integrate it to equilibrium with RK4 as an independent route.
    fn rate_equation_occupation(d: usize, k1: f64, k2: f64) -> f64 {
        let rhs = |p: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|n| {
                    let nf = n as f64;
                    let mut v = -k1 * (nf + 1.0) * p[n] * if n + 1 < d { 1.0 } else { 0.0 };
                    if n >= 1 {
                        v += k1 * nf * p[n - 1];
                    }
                    if n + 2 < d {
                        v += k2 * (nf + 2.0) * (nf + 1.0) * p[n + 2];
                    }
                    v -= k2 * nf * (nf - 1.0) * p[n];
                    v
                })
                .collect()
        };
        let mut p = vec![0.0; d];
        p[0] = 1.0;
        let h = 0.05;
        for _ in 0..120_000 {
            let a = rhs(&p);
            let b = rhs(&p.iter().zip(&a).map(|(x, y)| x + 0.5 * h * y).collect::<Vec<_>>());
            let c = rhs(&p.iter().zip(&b).map(|(x, y)| x + 0.5 * h * y).collect::<Vec<_>>());
            let e = rhs(&p.iter().zip(&c).map(|(x, y)| x + h * y).collect::<Vec<_>>());
            for n in 0..d {
                p[n] += h / 6.0 * (a[n] + 2.0 * b[n] + 2.0 * c[n] + e[n]);
            }
        }
        p.iter().enumerate().map(|(n, v)| n as f64 * v).sum()
    }

    #[test]
    fn single_vdp_occupation_matches_rate_equation_oracle() {
        let p = vdp();
        let oracle = rate_equation_occupation(ORACLE_TRUNCATION, p.kappa1, p.kappa2);
        let ss = steady_state(FockSpace::new(1, ORACLE_TRUNCATION).unwrap(), &p).unwrap();
        assert!((ss.state.occupation(0) - oracle).abs() < 1e-9, "{} vs {oracle}", ss.state.occupation(0));
        // Frozen from the rate-equation oracle.
        assert!((oracle - NBAR_VDP).abs() < 1e-9, "oracle {oracle}");
        let ss20 = steady_state(FockSpace::new(1, 20).unwrap(), &p).unwrap();
        assert!((ss20.state.occupation(0) - NBAR_VDP).abs() < 1e-6);
        assert!(ss20.leakage < LEAKAGE_TOL);
    }

    const NBAR_VDP: f64 = 0.700594417715;

    #[test]
    fn occupation_converges_in_truncation() {
        let p = vdp();
        let n: Vec<f64> = (12..=30)
            .step_by(6)
            .map(|d| steady_state(FockSpace::new(1, d).unwrap(), &p).unwrap().state.occupation(0))
            .collect();
        for w in n.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-6, "{n:?}");
        }
    }

    #[test]
    fn steady_state_is_a_valid_density_matrix() {
        let space = FockSpace::new(2, 8).unwrap();
        let ss = steady_state(space, &ExactParams { lambda: 0.25, ..vdp() }).unwrap();
        ss.state.validate().unwrap();
        assert!(ss.residual < 1e-12, "residual {}", ss.residual);
        assert!(ss.pivot_ratio > DEGENERACY_RATIO);
    }

    #[test]
    fn wigner_parity_values() {
        let space = FockSpace::new(1, 6).unwrap();
        let vac = FockDensityMatrix::vacuum(space);
        let one = FockDensityMatrix::fock(space, &[1]).unwrap();
        assert!((single_mode_wigner_at(&vac.rho, 0.0, 0.0) - 1.0 / PI).abs() < 1e-15);
        assert!((single_mode_wigner_at(&one.rho, 0.0, 0.0) + 1.0 / PI).abs() < 1e-15);
        let grid = QuadratureGrid::new(6.0, 121).unwrap();
        let w = wigner_single(&one, &grid).unwrap();
        assert!((w.integral() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coherent_state_peaks_at_scaled_amplitude() {
        let space = FockSpace::new(1, 25).unwrap();
        let alpha = Complex64::new(0.8, -1.1);
        let coh = FockDensityMatrix::coherent(space, &[alpha]).unwrap();
        let (x, p) = (2f64.sqrt() * alpha.re, 2f64.sqrt() * alpha.im);
        let peak = single_mode_wigner_at(&coh.rho, x, p);
        assert!((peak - 1.0 / PI).abs() < 1e-9);
        assert!(single_mode_wigner_at(&coh.rho, x, -p) < 1e-3);
        let grid = QuadratureGrid::new(6.0, 61).unwrap();
        assert!((wigner_single(&coh, &grid).unwrap().radius_of_maximum().unwrap() - 2f64.sqrt() * alpha.norm()).abs() < 0.15);
    }

    #[test]
    fn vdp_steady_state_is_a_donut_outside_the_limit_cycle() {
        let p = vdp();
        let ss = steady_state(FockSpace::new(1, 20).unwrap(), &p).unwrap();
        let grid = QuadratureGrid::new(4.0, 161).unwrap();
        let w = wigner_single(&ss.state, &grid).unwrap();
        let center = w.at(80, 80);
        let radius = w.radius_of_maximum().unwrap() / 2f64.sqrt();
        let a_bar = (p.kappa1 / (2.0 * p.kappa2)).sqrt();
        assert!(radius > a_bar, "peak |α| {radius}");
        assert!(w.values.iter().cloned().fold(f64::MIN, f64::max) > center);
        assert!((w.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn phase_marginal_normalizes_and_is_flat_without_coupling() {
        let space = FockSpace::new(2, 10).unwrap();
        let ss = steady_state(space, &vdp()).unwrap();
        let m = phase_difference_marginal(&ss.state, &MarginalOptions::default()).unwrap();
        assert!((m.integral() - 1.0).abs() < 1e-8);
        let mean = 1.0 / TAU;
        let dev = m.values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-8 * mean, "deviation {dev}");
    }

    #[test]
    fn phase_marginal_of_product_coherent_states_peaks_at_their_difference() {
        let space = FockSpace::new(2, 16).unwrap();
        let st = FockDensityMatrix::coherent(space, &[Complex64::from_polar(1.5, 0.7), Complex64::from_polar(1.5, -0.3)]).unwrap();
        let m = phase_difference_marginal(&st, &MarginalOptions::default()).unwrap();
        let WignerDomain::PhaseDifference { dphi } = &m.domain else { unreachable!() };
        let best = (0..dphi.len()).max_by(|&a, &b| m.values[a].total_cmp(&m.values[b])).unwrap();
        assert!((dphi[best] - 1.0).abs() < 2.0 * TAU / dphi.len() as f64, "peak at {}", dphi[best]);
        assert!((m.integral() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn marginal_is_stable_under_radial_refinement() {
        let space = FockSpace::new(2, 8).unwrap();
        let ss = steady_state(space, &ExactParams { lambda: 0.5, ..vdp() }).unwrap();
        let coarse = phase_difference_marginal(&ss.state, &MarginalOptions { radial_intervals: 2000, ..Default::default() }).unwrap();
        let fine = phase_difference_marginal(&ss.state, &MarginalOptions { radial_intervals: 8000, radial_cutoff: Some(16.0), ..Default::default() }).unwrap();
        let diff = coarse.values.iter().zip(&fine.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn s_c_of_vacua_is_one_half() {
        let space = FockSpace::new(2, 4).unwrap();
        assert!((s_c_exact(&FockDensityMatrix::vacuum(space)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_evolution_conserves_populations() {
        let space = FockSpace::new(1, 12).unwrap();
        let p = ExactParams { kappa1: 0.0, kappa2: 0.0, ..vdp() };
        let mut l = Lindbladian::vdp(&space, &p).unwrap();
        let rho0 = FockDensityMatrix::coherent(space, &[Complex64::new(0.7, 0.2)]).unwrap();
        let states = evolve_exact(&rho0, &mut l, 20.0, 5.0, &SolverOptions::default()).unwrap();
        assert_eq!(states.len(), 5);
        for s in &states {
            for k in 0..12 {
                assert!((s.rho[(k, k)].re - rho0.rho[(k, k)].re).abs() < 1e-8);
            }
        }
        let a = states.last().unwrap().mean_amplitude(0);
        let expected = rho0.mean_amplitude(0) * Complex64::from_polar(1.0, -20.0);
        assert!((a - expected).norm() < 1e-7);
    }

    #[test]
    fn resonant_drive_grows_amplitude_linearly() {
        let space = FockSpace::new(1, 15).unwrap();
        let base = Lindbladian::vdp(&space, &ExactParams { kappa1: 0.0, kappa2: 0.0, ..vdp() }).unwrap();
        let c = 0.05;
        let a_dag = space.annihilation(0).adjoint();
        let mut g = Driven::new(base, a_dag, move |t: f64| Complex64::from_polar(c, -t)).unwrap();
        let states = evolve_exact(&FockDensityMatrix::vacuum(space), &mut g, 6.0, 2.0, &SolverOptions::default()).unwrap();
        for s in &states {
            let expected = -I * c * s.t * Complex64::from_polar(1.0, -s.t);
            assert!((s.mean_amplitude(0) - expected).norm() < 1e-7, "t = {}", s.t);
        }
    }

    #[test]
    fn single_vdp_relaxes_to_the_null_space_solution() {
        let space = FockSpace::new(1, 10).unwrap();
        let p = vdp();
        let ss = steady_state(space, &p).unwrap();
        let mut l = Lindbladian::vdp(&space, &p).unwrap();
        let opts = SolverOptions { rtol: 1e-10, atol: 1e-13, ..Default::default() };
        let states = evolve_exact(&FockDensityMatrix::vacuum(space), &mut l, 6000.0, 6000.0, &opts).unwrap();
        let last = states.last().unwrap();
        last.validate().unwrap();
        assert!(last.trace_distance(&ss.state) < 1e-6, "{}", last.trace_distance(&ss.state));
    }

    #[test]
    fn early_exact_drift_follows_mean_field_sign() {
        let space = FockSpace::new(1, 20).unwrap();
        let p = vdp();
        for amp in [1.0, 1.5, 2.0] {
            let rho = FockDensityMatrix::coherent(space, &[Complex64::new(amp, 0.0)]).unwrap();
            let rhs = lindblad_rhs(&rho, &p).unwrap();
            let dn = rhs.diagonal().iter().enumerate().map(|(n, v)| n as f64 * v.re).sum::<f64>();
            let d_abs2 = 2.0 * amp * amp * (0.5 * p.kappa1 - p.kappa2 * amp * amp);
            assert_eq!(dn.signum(), d_abs2.signum(), "amplitude {amp}: {dn} vs {d_abs2}");
            assert!(dn / d_abs2 > 0.5 && dn / d_abs2 < 2.0, "amplitude {amp}: {dn} vs {d_abs2}");
        }
    }

    fn hermitian_state(dim: usize, seed: &[f64]) -> DMatrix<Complex64> {
        let a = DMatrix::from_fn(dim, dim, |r, c| {
            Complex64::new(seed[(r * dim + c) % seed.len()], seed[(r + 3 * c + 1) % seed.len()])
        });
        let m = &a * a.adjoint();
        let tr = m.trace();
        m / tr
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generator_preserves_trace_and_hermiticity(
            seed in proptest::collection::vec(-1.0f64..1.0, 7..20),
            lambda in -0.5f64..0.5,
            gamma in 0.0f64..1e-3,
        ) {
            let space = FockSpace::new(2, 4).unwrap();
            let p = ExactParams { lambda, gamma_bar: gamma, ..vdp() };
            let rho = FockDensityMatrix::from_matrix(space, hermitian_state(16, &seed), 0.0).unwrap();
            let rhs = lindblad_rhs(&rho, &p).unwrap();
            prop_assert!(rhs.trace().norm() < 1e-14);
            prop_assert!(max_abs(&(&rhs - rhs.adjoint())) < 1e-14);
        }
    }
}
