//! Phase-space grids and sampled Wigner distributions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square quadrature grid with `n` points per axis on `[-half_width, half_width]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureGrid {
    pub half_width: f64,
    pub n: usize,
}

impl QuadratureGrid {
    pub fn new(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0) || n < 2 {
            return Err(Error::InvalidInput(format!(
                "grid needs half_width > 0 and n >= 2, got {half_width}, {n}"
            )));
        }
        Ok(Self { half_width, n })
    }

    pub fn axis(&self) -> Vec<f64> {
        let step = self.step();
        (0..self.n).map(|k| -self.half_width + k as f64 * step).collect()
    }

    pub fn step(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }
}

/// Domain of a sampled Wigner distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WignerDomain {
    /// Values stored row-major with `x` as the slow index.
    Quadrature { x: Vec<f64>, p: Vec<f64> },
    /// Bin centers in [−π, π).
    PhaseDifference { dphi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerField {
    pub domain: WignerDomain,
    pub values: Vec<f64>,
}

impl WignerField {
    pub fn quadrature(grid: &QuadratureGrid, values: Vec<f64>) -> Self {
        let axis = grid.axis();
        Self {
            domain: WignerDomain::Quadrature {
                x: axis.clone(),
                p: axis,
            },
            values,
        }
    }

    /// Riemann-sum integral of the field over its domain.
    pub fn integral(&self) -> f64 {
        match &self.domain {
            WignerDomain::Quadrature { x, p } => {
                let dx = if x.len() > 1 { x[1] - x[0] } else { 1.0 };
                let dp = if p.len() > 1 { p[1] - p[0] } else { 1.0 };
                self.values.iter().sum::<f64>() * dx * dp
            }
            WignerDomain::PhaseDifference { dphi } => {
                let step = 2.0 * std::f64::consts::PI / dphi.len().max(1) as f64;
                self.values.iter().sum::<f64>() * step
            }
        }
    }

    pub fn at(&self, ix: usize, ip: usize) -> f64 {
        match &self.domain {
            WignerDomain::Quadrature { p, .. } => self.values[ix * p.len() + ip],
            WignerDomain::PhaseDifference { .. } => self.values[ix],
        }
    }

    /// Maximum of the field as a function of the phase-space radius,
    /// estimated from the grid point with the largest value.
    pub fn radius_of_maximum(&self) -> Option<f64> {
        match &self.domain {
            WignerDomain::Quadrature { x, p } => {
                let (best, _) = self
                    .values
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                let (ix, ip) = (best / p.len(), best % p.len());
                Some(x[ix].hypot(p[ip]))
            }
            WignerDomain::PhaseDifference { .. } => None,
        }
    }

    /// CSV: `x,p,W` for quadrature fields, `dphi,W` for phase marginals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        match &self.domain {
            WignerDomain::Quadrature { x, p } => {
                writeln!(w, "x,p,W")?;
                for (ix, xv) in x.iter().enumerate() {
                    for (ip, pv) in p.iter().enumerate() {
                        writeln!(w, "{xv},{pv},{:e}", self.values[ix * p.len() + ip])?;
                    }
                }
            }
            WignerDomain::PhaseDifference { dphi } => {
                writeln!(w, "dphi,W")?;
                for (d, v) in dphi.iter().zip(&self.values) {
                    writeln!(w, "{d},{v:e}")?;
                }
            }
        }
        Ok(())
    }
}
