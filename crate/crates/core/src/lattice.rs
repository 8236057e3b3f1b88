//! Coupling matrices for oscillator lattices: SSH chains, breathing Kagome
//! flakes and custom bond lists, plus bond disorder and eigendecomposition
//! with zero-mode identification.
//!
//! Couplings are in units of the intrinsic frequency. The on-site frequency is
//! never stored here; it belongs to the dynamical parameters.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

/// A bond between two sites (0-based) with hopping strength `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Lattice description as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatticeSpec {
    /// Open SSH chain. `dimerization` is δλ in units of `lambda0`.
    Ssh {
        n_sites: usize,
        lambda0: f64,
        dimerization: f64,
    },
    /// Triangular breathing Kagome flake built from upward triangles.
    Kagome {
        triangles_per_edge: usize,
        lambda1: f64,
        lambda2: f64,
    },
    /// Arbitrary symmetric bond list over `n_sites` sites (0-based indices).
    Custom { n_sites: usize, bonds: Vec<Bond> },
}

impl LatticeSpec {
    pub fn build(&self) -> Result<CouplingMatrix> {
        match *self {
            LatticeSpec::Ssh {
                n_sites,
                lambda0,
                dimerization,
            } => build_ssh(n_sites, lambda0, dimerization),
            LatticeSpec::Kagome {
                triangles_per_edge,
                lambda1,
                lambda2,
            } => build_kagome(triangles_per_edge, lambda1, lambda2),
            LatticeSpec::Custom { n_sites, ref bonds } => build_custom(n_sites, bonds),
        }
    }

    pub fn n_sites(&self) -> usize {
        match *self {
            LatticeSpec::Ssh { n_sites, .. } | LatticeSpec::Custom { n_sites, .. } => n_sites,
            LatticeSpec::Kagome {
                triangles_per_edge, ..
            } => 3 * triangles_per_edge * (triangles_per_edge + 1) / 2,
        }
    }
}

/// Role of a site in boundary/bulk statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    /// Sites hosting the protected modes: SSH chain ends, Kagome corners.
    Boundary,
    /// Remaining sites on the edge of the sample.
    Edge,
    Bulk,
}

/// Real symmetric hopping matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    pub n: usize,
    pub entries: DMatrix<f64>,
    pub site_labels: Vec<String>,
    pub site_roles: Vec<SiteRole>,
    /// λ0 for SSH, λ2 for Kagome, max |λ| for custom lattices.
    pub coupling_scale: f64,
    /// Default tolerance for zero-mode identification.
    pub zero_mode_tol: f64,
}

impl CouplingMatrix {
    fn from_bonds(
        n: usize,
        bonds: &[Bond],
        site_labels: Vec<String>,
        site_roles: Vec<SiteRole>,
        coupling_scale: f64,
        zero_mode_tol: f64,
    ) -> Result<Self> {
        let mut entries = DMatrix::zeros(n, n);
        for b in bonds {
            if b.i >= n || b.j >= n {
                return Err(Error::InvalidSpec(format!(
                    "bond ({}, {}) outside {} sites",
                    b.i, b.j, n
                )));
            }
            if b.i == b.j {
                return Err(Error::InvalidSpec(format!("self-bond on site {}", b.i)));
            }
            if !b.value.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "non-finite bond ({}, {})",
                    b.i, b.j
                )));
            }
            if entries[(b.i, b.j)] != 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "duplicate bond ({}, {})",
                    b.i, b.j
                )));
            }
            entries[(b.i, b.j)] = b.value;
            entries[(b.j, b.i)] = b.value;
        }
        Ok(Self {
            n,
            entries,
            site_labels,
            site_roles,
            coupling_scale,
            zero_mode_tol,
        })
    }

    /// Nonzero bonds with `i < j`, in row-major order.
    pub fn bonds(&self) -> Vec<Bond> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let value = self.entries[(i, j)];
                if value != 0.0 {
                    out.push(Bond { i, j, value });
                }
            }
        }
        out
    }

    /// Adjacency lists `(neighbor, λ)` per site, for sparse products.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for b in self.bonds() {
            adj[b.i].push((b.j, b.value));
            adj[b.j].push((b.i, b.value));
        }
        for list in &mut adj {
            list.sort_by_key(|&(k, _)| k);
        }
        adj
    }

    pub fn sites_with_role(&self, role: SiteRole) -> Vec<usize> {
        (0..self.n).filter(|&j| self.site_roles[j] == role).collect()
    }

    /// Largest absolute eigenvalue bound (max absolute row sum).
    pub fn norm_bound(&self) -> f64 {
        (0..self.n)
            .map(|i| self.entries.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Dense CSV, header row of site labels, one matrix row per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.site_labels.join(","))?;
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|j| format!("{:e}", self.entries[(i, j)]))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Open SSH chain with alternating couplings λ0(1 − δ), λ0(1 + δ),
/// starting with the weak-in-topological-phase bond between sites 1 and 2.
pub fn build_ssh(n_sites: usize, lambda0: f64, dimerization: f64) -> Result<CouplingMatrix> {
    if n_sites < 2 || n_sites % 2 != 0 {
        return Err(Error::InvalidSpec(format!(
            "SSH chain needs an even number of sites >= 2, got {n_sites}"
        )));
    }
    if !lambda0.is_finite() || !dimerization.is_finite() {
        return Err(Error::InvalidSpec("non-finite SSH coupling".into()));
    }
    let intra = lambda0 * (1.0 - dimerization);
    let inter = lambda0 * (1.0 + dimerization);
    let bonds: Vec<Bond> = (0..n_sites - 1)
        .map(|i| Bond {
            i,
            j: i + 1,
            value: if i % 2 == 0 { intra } else { inter },
        })
        .filter(|b| b.value != 0.0)
        .collect();
    let labels = (1..=n_sites).map(|j| format!("s{j}")).collect();
    let roles = (0..n_sites)
        .map(|j| {
            let from_end = j.min(n_sites - 1 - j);
            match from_end {
                0 => SiteRole::Boundary,
                1 | 2 => SiteRole::Edge,
                _ => SiteRole::Bulk,
            }
        })
        .collect();
    let scale = lambda0.abs();
    CouplingMatrix::from_bonds(n_sites, &bonds, labels, roles, scale, 1e-3 * scale)
}

#[derive(Debug, Clone, Copy)]
struct KagomeSite {
    x: f64,
    y: f64,
}

/// Breathing Kagome flake made of `t(t+1)/2` upward triangles.
///
/// Sites are ordered: top, left and right corners; then the left edge and
/// right edge (each from the top down); then the bottom edge from left to
/// right; then the bulk row by row from the top, left to right within a row.
///
/// In a finite flake the three corner modes are split by roughly
/// λ2·|λ1/λ2|^t, so the default zero-mode tolerance is 1e-3·λ2.
pub fn build_kagome(triangles_per_edge: usize, lambda1: f64, lambda2: f64) -> Result<CouplingMatrix> {
    let t = triangles_per_edge;
    if t < 2 {
        return Err(Error::InvalidSpec(format!(
            "Kagome flake needs at least 2 triangles per edge, got {t}"
        )));
    }
    if !(lambda2 > 0.0) || !lambda2.is_finite() {
        return Err(Error::InvalidSpec(format!("Kagome λ2 must be > 0, got {lambda2}")));
    }
    if !(lambda1 <= 0.0) || !lambda1.is_finite() {
        return Err(Error::InvalidSpec(format!("Kagome λ1 must be <= 0, got {lambda1}")));
    }

    // Upward triangle (m, n): row n from the bottom, position m in 0..t-n.
    // Vertices A (left), B (right), C (apex) get provisional ids.
    let h = 3f64.sqrt();
    let mut sites = Vec::new();
    let mut tri_index = vec![vec![[0usize; 3]; t]; t];
    for n in 0..t {
        for m in 0..(t - n) {
            let x = (2 * m + n) as f64;
            let y = n as f64 * h;
            let base = sites.len();
            sites.push(KagomeSite { x, y });
            sites.push(KagomeSite { x: x + 1.0, y });
            sites.push(KagomeSite {
                x: x + 0.5,
                y: y + 0.5 * h,
            });
            tri_index[n][m] = [base, base + 1, base + 2];
        }
    }
    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;
    let v = |m: usize, n: usize, k: usize| tri_index[n][m][k];

    let mut raw_bonds: Vec<(usize, usize, f64)> = Vec::new();
    for n in 0..t {
        for m in 0..(t - n) {
            raw_bonds.push((v(m, n, A), v(m, n, B), lambda1));
            raw_bonds.push((v(m, n, B), v(m, n, C), lambda1));
            raw_bonds.push((v(m, n, A), v(m, n, C), lambda1));
        }
    }
    // Downward triangles between neighbouring upward triangles, including the
    // two-site remnants along the three outer edges.
    for n in 0..t {
        for m in 0..(t - n) {
            if m + 1 < t - n {
                raw_bonds.push((v(m, n, B), v(m + 1, n, A), lambda2));
                if n >= 1 {
                    raw_bonds.push((v(m, n, B), v(m + 1, n - 1, C), lambda2));
                    raw_bonds.push((v(m + 1, n, A), v(m + 1, n - 1, C), lambda2));
                }
            }
        }
        if n >= 1 {
            raw_bonds.push((v(0, n, A), v(0, n - 1, C), lambda2));
            let last = t - 1 - n;
            raw_bonds.push((v(last, n, B), v(last + 1, n - 1, C), lambda2));
        }
    }

    let top = v(0, t - 1, C);
    let left = v(0, 0, A);
    let right = v(t - 1, 0, B);
    let mut left_edge = Vec::new();
    let mut right_edge = Vec::new();
    for n in (0..t).rev() {
        let last = t - 1 - n;
        if n != t - 1 {
            left_edge.push(v(0, n, C));
            right_edge.push(v(last, n, C));
        }
        if n != 0 {
            left_edge.push(v(0, n, A));
            right_edge.push(v(last, n, B));
        }
    }
    let mut bottom_edge = Vec::new();
    for m in 0..t {
        if m != 0 {
            bottom_edge.push(v(m, 0, A));
        }
        if m != t - 1 {
            bottom_edge.push(v(m, 0, B));
        }
    }
    let mut boundary = vec![false; sites.len()];
    for &s in [top, left, right]
        .iter()
        .chain(&left_edge)
        .chain(&right_edge)
        .chain(&bottom_edge)
    {
        boundary[s] = true;
    }
    let mut bulk: Vec<usize> = (0..sites.len()).filter(|&s| !boundary[s]).collect();
    let row_key = |s: usize| (sites[s].y / (0.5 * h)).round() as i64;
    bulk.sort_by(|&a, &b| {
        row_key(b)
            .cmp(&row_key(a))
            .then(sites[a].x.partial_cmp(&sites[b].x).unwrap())
    });

    let mut order = vec![top, left, right];
    order.extend(&left_edge);
    order.extend(&right_edge);
    order.extend(&bottom_edge);
    order.extend(&bulk);
    let n_sites = sites.len();
    debug_assert_eq!(order.len(), n_sites);
    let mut new_index = vec![0usize; n_sites];
    for (k, &s) in order.iter().enumerate() {
        new_index[s] = k;
    }

    let bonds: Vec<Bond> = raw_bonds
        .into_iter()
        .filter(|&(_, _, value)| value != 0.0)
        .map(|(a, b, value)| {
            let (i, j) = (new_index[a].min(new_index[b]), new_index[a].max(new_index[b]));
            Bond { i, j, value }
        })
        .collect();

    let n_edge = left_edge.len();
    let mut labels = vec!["c1".to_string(), "c2".to_string(), "c3".to_string()];
    labels.extend((1..=n_edge).map(|k| format!("l{k}")));
    labels.extend((1..=n_edge).map(|k| format!("r{k}")));
    labels.extend((1..=bottom_edge.len()).map(|k| format!("b{k}")));
    labels.extend((1..=bulk.len()).map(|k| format!("k{k}")));
    let mut roles = vec![SiteRole::Boundary; 3];
    roles.extend(std::iter::repeat(SiteRole::Edge).take(2 * n_edge + bottom_edge.len()));
    roles.extend(std::iter::repeat(SiteRole::Bulk).take(bulk.len()));

    CouplingMatrix::from_bonds(n_sites, &bonds, labels, roles, lambda2, 1e-3 * lambda2)
}

/// Lattice from an explicit bond list.
pub fn build_custom(n_sites: usize, bonds: &[Bond]) -> Result<CouplingMatrix> {
    if n_sites == 0 {
        return Err(Error::InvalidSpec("custom lattice needs at least one site".into()));
    }
    let scale = bonds.iter().map(|b| b.value.abs()).fold(0.0, f64::max);
    let labels = (1..=n_sites).map(|j| format!("s{j}")).collect();
    let roles = vec![SiteRole::Bulk; n_sites];
    let tol = if scale > 0.0 { 1e-6 * scale } else { 1e-12 };
    CouplingMatrix::from_bonds(n_sites, bonds, labels, roles, scale, tol)
}

/// Static bond disorder: strength in units of the lattice coupling scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisorderSpec {
    pub strength: f64,
    pub seed: u64,
}

/// Adds one independent U(−r, r) draw to every nonzero bond.
pub fn apply_disorder(matrix: &CouplingMatrix, disorder: &DisorderSpec) -> Result<CouplingMatrix> {
    if !(disorder.strength >= 0.0) || !disorder.strength.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "disorder strength must be >= 0, got {}",
            disorder.strength
        )));
    }
    let mut out = matrix.clone();
    if disorder.strength == 0.0 {
        return Ok(out);
    }
    let amplitude = disorder.strength * matrix.coupling_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(disorder.seed);
    for b in matrix.bonds() {
        let value = b.value + rng.gen_range(-amplitude..=amplitude);
        out.entries[(b.i, b.j)] = value;
        out.entries[(b.j, b.i)] = value;
    }
    Ok(out)
}

/// Eigenpairs of a coupling matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub eigenvectors: DMatrix<f64>,
    pub zero_mode_indices: Vec<usize>,
}

impl EigenDecomposition {
    pub fn vector(&self, l: usize) -> DVector<f64> {
        self.eigenvectors.column(l).into_owned()
    }

    /// Site-localized orthonormal basis of the zero-mode subspace.
    ///
    /// Finite-size hybridization splits boundary modes into delocalized
    /// symmetric combinations; this recovers one vector per boundary. The
    /// columns span the same subspace as the zero modes but are not
    /// eigenvectors when the splitting is nonzero.
    pub fn localized_zero_modes(&self) -> DMatrix<f64> {
        if self.zero_mode_indices.is_empty() {
            return DMatrix::zeros(self.eigenvectors.nrows(), 0);
        }
        let cols: Vec<DVector<f64>> = self.zero_mode_indices.iter().map(|&l| self.vector(l)).collect();
        let mut out: Vec<DVector<f64>> = {
            let block = localize_cluster(&DMatrix::from_columns(&cols));
            (0..block.ncols()).map(|c| fix_sign(block.column(c).into_owned())).collect()
        };
        out.sort_by_key(leading_site);
        DMatrix::from_columns(&out)
    }

    /// Weight of eigenvector `l` on the given sites.
    pub fn weight_on(&self, l: usize, sites: &[usize]) -> f64 {
        sites
            .iter()
            .map(|&s| self.eigenvectors[(s, l)].powi(2))
            .sum()
    }
}

/// Symmetric eigendecomposition with deterministic degenerate subspaces.
///
/// Inside each exactly degenerate cluster the basis is rebuilt by repeatedly
/// projecting the site with the largest remaining weight, which yields
/// site-localized vectors (e.g. one per Kagome corner). Vectors are ordered by
/// the site of their largest entry and signed so that entry is positive.
pub fn eigendecompose(matrix: &CouplingMatrix) -> Result<EigenDecomposition> {
    eigendecompose_with_tol(matrix, matrix.zero_mode_tol)
}

pub fn eigendecompose_with_tol(matrix: &CouplingMatrix, zero_tol: f64) -> Result<EigenDecomposition> {
    let m = &matrix.entries;
    let n = matrix.n;
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 {
        return Err(Error::InvalidInput(format!("matrix asymmetric by {asym:.3e}")));
    }
    let (eigenvalues, mut vectors) = symmetric_eigen(m);
    let values: Vec<f64> = eigenvalues.iter().copied().collect();

    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let cluster_tol = 1e-11 * scale;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[end - 1] <= cluster_tol {
            end += 1;
        }
        let block = if end - start > 1 {
            localize_cluster(&vectors.columns(start, end - start).into_owned())
        } else {
            vectors.columns(start, 1).into_owned()
        };
        let mut cols: Vec<DVector<f64>> = (0..block.ncols())
            .map(|c| fix_sign(block.column(c).into_owned()))
            .collect();
        cols.sort_by_key(leading_site);
        for (k, col) in cols.into_iter().enumerate() {
            vectors.set_column(start + k, &col);
        }
        start = end;
    }

    let zero_mode_indices = (0..n).filter(|&l| values[l].abs() < zero_tol).collect();
    Ok(EigenDecomposition {
        eigenvalues: values,
        eigenvectors: vectors,
        zero_mode_indices,
    })
}

fn leading_site(v: &DVector<f64>) -> usize {
    let max = v.amax();
    v.iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-9))
        .unwrap_or(0)
}

fn fix_sign(v: DVector<f64>) -> DVector<f64> {
    let s = leading_site(&v);
    if v[s] < 0.0 {
        -v
    } else {
        v
    }
}

fn localize_cluster(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = basis.shape();
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = (0usize, -1.0f64);
        for s in 0..n {
            let w = basis.row(s).norm_squared() - chosen.iter().map(|u| u[s] * u[s]).sum::<f64>();
            if w > best.1 + 1e-12 {
                best = (s, w);
            }
        }
        let s = best.0;
        let mut u: DVector<f64> = basis * basis.row(s).transpose();
        for prev in &chosen {
            let overlap = prev[s];
            u.axpy(-overlap, prev, 1.0);
        }
        // One re-orthogonalization pass against earlier picks.
        for prev in &chosen {
            let overlap = prev.dot(&u);
            u.axpy(-overlap, prev, 1.0);
        }
        let norm = u.norm();
        chosen.push(u / norm);
    }
    DMatrix::from_columns(&chosen)
}

/// Number of eigenvalues with |μ| < tol.
pub fn count_zero_modes(decomposition: &EigenDecomposition, tol: f64) -> usize {
    decomposition
        .eigenvalues
        .iter()
        .filter(|mu| mu.abs() < tol)
        .count()
}
