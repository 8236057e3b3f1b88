//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactquantum::{MarginalOptions, DEFAULT_TRUNCATION, ORACLE_TRUNCATION};
use crate::fluctuations::{CovarianceOptions, FluctuationParams};
use crate::lattice::LatticeSpec;
use crate::meanfield::{InitialCondition, MeanFieldParams};
use crate::measures::TimeWindow;
use crate::ode::SolverOptions;
use crate::phasespace::QuadratureGrid;
use crate::spectral::SpectrumOptions;

/// Paper-scale ensemble size for disorder averages.
pub const FULL_DISORDER_REALIZATIONS: usize = 100;
/// Default ensemble size for disorder averages.
pub const DESK_DISORDER_REALIZATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t_end: f64,
    pub dt_out: f64,
    /// Analysis window `[t_i, t_f]`.
    pub window: (f64, f64),
    /// First time written to trajectory files; defaults to `window.0`.
    #[serde(default)]
    pub record_from: Option<f64>,
    /// Keep every `output_stride`-th sample in trajectory files.
    #[serde(default = "one")]
    pub output_stride: usize,
}

fn one() -> usize {
    1
}

impl TimeGrid {
    pub fn window(&self) -> Result<TimeWindow> {
        let w = TimeWindow::new(self.window.0, self.window.1)?;
        if w.t_f > self.t_end + 1e-9 {
            return Err(Error::Config(format!(
                "window end {} exceeds t_end {}",
                w.t_f, self.t_end
            )));
        }
        Ok(w)
    }

    pub fn record_from(&self) -> f64 {
        self.record_from.unwrap_or(self.window.0)
    }
}

/// Quantity varied across the cells of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// SSH δλ in units of λ0.
    Dimerization,
    /// Kagome λ1 (absolute).
    Lambda1,
    /// Bond disorder strength in units of the lattice coupling scale.
    Disorder,
    /// Two-mode hopping of the exact comparison.
    Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub n_realizations: usize,
}

/// Settings of the exact-versus-effective comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactSettings {
    pub truncation: usize,
    pub oracle_truncation: usize,
    pub wigner_grid: QuadratureGrid,
    pub marginal: MarginalOptions,
    /// Random mean-field initial conditions averaged in the Gaussian model.
    pub effective_realizations: usize,
}

impl Default for ExactSettings {
    fn default() -> Self {
        Self {
            truncation: DEFAULT_TRUNCATION,
            oracle_truncation: ORACLE_TRUNCATION,
            wigner_grid: QuadratureGrid { half_width: 4.0, n: 161 },
            marginal: MarginalOptions::default(),
            effective_realizations: 4,
        }
    }
}

/// One experiment: lattice, rates, time grid and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub meanfield: MeanFieldParams,
    #[serde(default)]
    pub gamma_bar: f64,
    #[serde(default = "random_init")]
    pub initial: InitialCondition,
    /// Fixed bond disorder strength applied to every job (ignored when the
    /// sweep axis is `disorder`).
    #[serde(default)]
    pub disorder: f64,
    pub time: TimeGrid,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "covariance_defaults")]
    pub covariance: CovarianceOptions,
    #[serde(default)]
    pub spectrum: SpectrumOptions,
    #[serde(default)]
    pub exact: ExactSettings,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
}

fn random_init() -> InitialCondition {
    InitialCondition::Random { seed: None }
}

fn covariance_defaults() -> CovarianceOptions {
    CovarianceOptions {
        check_stride: 100,
        ..CovarianceOptions::default()
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl SimulationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(e.to_string()))?;
        Ok((Self::from_json(text)?, bytes))
    }

    pub fn fluctuation_params(&self) -> FluctuationParams {
        FluctuationParams::new(&self.meanfield, self.gamma_bar)
    }

    /// Number of independent jobs per sweep cell.
    pub fn realizations(&self) -> usize {
        self.sweep.as_ref().map_or(1, |s| s.n_realizations)
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        self.sweep.as_ref().map_or_else(Vec::new, |s| s.values.clone())
    }

    /// Hard checks on every section, returning soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = self.fluctuation_params().validate()?;
        self.lattice.build()?;
        self.time.window()?;
        if !(self.time.dt_out > 0.0) || !(self.time.t_end > 0.0) {
            return Err(Error::Config("t_end and dt_out must be > 0".into()));
        }
        if self.time.output_stride == 0 {
            return Err(Error::Config("output_stride must be >= 1".into()));
        }
        if !(self.disorder >= 0.0) {
            return Err(Error::Config(format!("disorder must be >= 0, got {}", self.disorder)));
        }
        if let Some(s) = &self.sweep {
            match (s.axis, &self.lattice) {
                (SweepAxis::Dimerization, LatticeSpec::Ssh { .. })
                | (SweepAxis::Lambda1, LatticeSpec::Kagome { .. })
                | (SweepAxis::Disorder, _)
                | (SweepAxis::Coupling, _) => {}
                (axis, _) => {
                    return Err(Error::Config(format!(
                        "sweep axis {axis:?} does not apply to this lattice"
                    )))
                }
            }
            if s.axis == SweepAxis::Disorder && s.values.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::Config("disorder strengths must be >= 0".into()));
            }
            for &v in &s.values {
                self.lattice_at(v)?.build()?;
            }
            if s.axis == SweepAxis::Disorder && s.n_realizations < DESK_DISORDER_REALIZATIONS {
                warnings.push(format!(
                    "{} disorder realizations per cell; desk-scale default is {DESK_DISORDER_REALIZATIONS}, paper scale {FULL_DISORDER_REALIZATIONS}",
                    s.n_realizations
                ));
            }
        }
        Ok(warnings)
    }

    /// Lattice of the sweep cell with control value `v`.
    pub fn lattice_at(&self, v: f64) -> Result<LatticeSpec> {
        let axis = self.sweep.as_ref().map(|s| s.axis);
        Ok(match (axis, &self.lattice) {
            (
                Some(SweepAxis::Dimerization),
                LatticeSpec::Ssh {
                    n_sites, lambda0, ..
                },
            ) => LatticeSpec::Ssh {
                n_sites: *n_sites,
                lambda0: *lambda0,
                dimerization: v,
            },
            (
                Some(SweepAxis::Lambda1),
                LatticeSpec::Kagome {
                    triangles_per_edge,
                    lambda2,
                    ..
                },
            ) => LatticeSpec::Kagome {
                triangles_per_edge: *triangles_per_edge,
                lambda1: v,
                lambda2: *lambda2,
            },
            _ => self.lattice.clone(),
        })
    }

    /// Disorder strength of the sweep cell with control value `v`.
    pub fn disorder_at(&self, v: f64) -> f64 {
        match self.sweep.as_ref().map(|s| s.axis) {
            Some(SweepAxis::Disorder) => v,
            _ => self.disorder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SSH: &str = r#"{
        "lattice": {"kind": "ssh", "n_sites": 20, "lambda0": 0.25, "dimerization": 0.6},
        "meanfield": {"omega0": 1.0, "kappa1": 0.005, "kappa2": 0.01},
        "time": {"t_end": 1000.0, "dt_out": 0.5, "window": [500.0, 1000.0]}
    }"#;

    #[test]
    fn paper_ssh_defaults_validate_cleanly() {
        let c = SimulationConfig::from_json(SSH).unwrap();
        assert!(c.validate().unwrap().is_empty());
        assert_eq!(c.covariance.check_stride, 100);
        assert_eq!(c.initial, InitialCondition::Random { seed: None });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SSH.replacen("\"time\"", "\"kapa1\": 1, \"time\"", 1);
        assert!(matches!(SimulationConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn strong_gain_warns() {
        let text = SSH.replace("\"kappa1\": 0.005", "\"kappa1\": 0.02");
        let w = SimulationConfig::from_json(&text).unwrap().validate().unwrap();
        assert!(w.iter().any(|s| s.contains("weakly nonlinear")), "{w:?}");
    }

    #[test]
    fn odd_ssh_chain_is_a_hard_error() {
        let text = SSH.replace("\"n_sites\": 20", "\"n_sites\": 21");
        assert!(SimulationConfig::from_json(&text).unwrap().validate().is_err());
    }

    #[test]
    fn sweep_axis_must_fit_the_lattice() {
        let text = SSH.replacen(
            "\"time\"",
            "\"sweep\": {\"axis\": \"lambda1\", \"values\": [-0.1]}, \"time\"",
            1,
        );
        assert!(SimulationConfig::from_json(&text).unwrap().validate().is_err());
    }

    #[test]
    fn sweep_cells_rewrite_the_control() {
        let text = SSH.replacen(
            "\"time\"",
            "\"sweep\": {\"axis\": \"dimerization\", \"values\": [-0.4, 0.4], \"n_realizations\": 3}, \"time\"",
            1,
        );
        let c = SimulationConfig::from_json(&text).unwrap();
        assert_eq!(c.realizations(), 3);
        match c.lattice_at(-0.4).unwrap() {
            LatticeSpec::Ssh { dimerization, .. } => assert_eq!(dimerization, -0.4),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.disorder_at(0.4), 0.0);
    }
}
