//! Windowed DFT spectra of amplitude trajectories, peak detection, and
//! ensemble sweeps over lattice parameters or disorder strength.
//!
//! The transform acts on `conj(α_j)` so that an oscillation `e^{−iωt}` shows
//! up at positive frequency `ω`. Spectra are Hann-windowed, normalized by the
//! window sum (a unit-amplitude tone gives a peak of 1) and restricted to a
//! frequency band.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{apply_disorder, CouplingMatrix, DisorderSpec};
use crate::measures::TimeWindow;
use crate::meanfield::{self, MeanFieldParams, Trajectory};
use crate::ode::SolverOptions;

/// Which per-site signal is transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Complex amplitude; resolves ω0 + μ from ω0 − μ.
    #[default]
    Complex,
    /// Real amplitude `A_j = |α_j|`.
    Amplitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumOptions {
    pub signal: SignalKind,
    /// Kept frequency band `[lo, hi]` in units of ω0. `None` keeps every bin.
    pub band: Option<(f64, f64)>,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            signal: SignalKind::Complex,
            band: Some((0.0, 2.0)),
        }
    }
}

/// Magnitude spectrum on ascending frequency bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub omega: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Bin spacing 2π/(M·dt).
    pub resolution: f64,
    pub window: TimeWindow,
}

/// Averaged magnitude spectrum of the sites in `sites` over `window`.
pub fn dft_spectrum(
    trajectory: &Trajectory,
    sites: &[usize],
    window: &TimeWindow,
    opts: &SpectrumOptions,
) -> Result<Spectrum> {
    if sites.is_empty() {
        return Err(Error::InvalidInput("site subset is empty".into()));
    }
    for &j in sites {
        trajectory.check_site(j)?;
    }
    let range = trajectory.window_indices(window.t_i, window.t_f)?;
    let m = range.len();
    if m < 4 {
        return Err(Error::InvalidInput(format!("window holds only {m} samples")));
    }
    let dt = trajectory.grid.dt;
    let hann: Vec<f64> = (0..m)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / (m - 1) as f64).cos()))
        .collect();
    let norm = hann.iter().sum::<f64>();
    let fft = FftPlanner::new().plan_fft_forward(m);
    let mut acc = vec![0.0; m];
    let mut buf = vec![Complex64::default(); m];
    for &j in sites {
        for (slot, (idx, w)) in buf.iter_mut().zip(range.clone().zip(&hann)) {
            let a = trajectory.state(idx)[j];
            let x = match opts.signal {
                SignalKind::Complex => a.conj(),
                SignalKind::Amplitude => Complex64::new(a.norm(), 0.0),
            };
            *slot = x * w;
        }
        fft.process(&mut buf);
        for (a, x) in acc.iter_mut().zip(&buf) {
            *a += x.norm() / norm;
        }
    }
    let scale = 1.0 / sites.len() as f64;
    let resolution = std::f64::consts::TAU / (m as f64 * dt);
    let mut bins: Vec<(f64, f64)> = (0..m)
        .map(|k| {
            let signed = if k <= (m - 1) / 2 { k as f64 } else { k as f64 - m as f64 };
            (signed * resolution, acc[k] * scale)
        })
        .collect();
    bins.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if let Some((lo, hi)) = opts.band {
        let slack = 1e-9 * resolution;
        bins.retain(|(w, _)| *w >= lo - slack && *w <= hi + slack);
    }
    Ok(Spectrum {
        omega: bins.iter().map(|b| b.0).collect(),
        amplitude: bins.iter().map(|b| b.1).collect(),
        resolution,
        window: *window,
    })
}

impl Spectrum {
    /// Median amplitude over all kept bins.
    pub fn median(&self) -> f64 {
        let mut v = self.amplitude.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    /// Index of the largest bin.
    pub fn argmax(&self) -> Option<usize> {
        self.amplitude
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (k, &a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((k, a)),
            })
            .map(|(k, _)| k)
    }

    /// Frequency of the largest bin refined by a parabola through the
    /// log-amplitudes of it and its neighbors.
    pub fn dominant_frequency(&self) -> Option<f64> {
        self.argmax().map(|k| self.refine(k))
    }

    /// Quadratic interpolation of log-amplitude around bin `k`.
    pub fn refine(&self, k: usize) -> f64 {
        if k == 0 || k + 1 >= self.amplitude.len() {
            return self.omega[k];
        }
        let (a, b, c) = (
            self.amplitude[k - 1].max(f64::MIN_POSITIVE).ln(),
            self.amplitude[k].max(f64::MIN_POSITIVE).ln(),
            self.amplitude[k + 1].max(f64::MIN_POSITIVE).ln(),
        );
        let denom = a - 2.0 * b + c;
        if denom >= 0.0 {
            return self.omega[k];
        }
        let shift = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        self.omega[k] + shift * (self.omega[k + 1] - self.omega[k])
    }

    /// Sum of squared amplitudes; with the full band this equals the
    /// windowed signal energy divided by `M·(Σw)²`.
    pub fn energy(&self) -> f64 {
        self.amplitude.iter().map(|a| a * a).sum()
    }
}

/// Default detection threshold in multiples of the median bin level.
pub const PEAK_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub target: f64,
    pub detected: bool,
    pub amplitude: f64,
    /// Refined frequency of the strongest bin in the search interval.
    pub frequency: f64,
    /// Distance of the strongest bin from the target in bins.
    pub bin_offset: i64,
    pub median: f64,
    pub threshold: f64,
}

/// Looks for a peak within ±2 bins of `target`.
pub fn detect_peak(spectrum: &Spectrum, target: f64, threshold: f64) -> PeakReport {
    let median = spectrum.median();
    let reach = 2.0 * spectrum.resolution * (1.0 + 1e-9);
    let best = spectrum
        .omega
        .iter()
        .enumerate()
        .filter(|(_, w)| (*w - target).abs() <= reach)
        .map(|(k, _)| k)
        .fold(None, |best: Option<usize>, k| match best {
            Some(b) if spectrum.amplitude[b] >= spectrum.amplitude[k] => best,
            _ => Some(k),
        });
    match best {
        None => PeakReport {
            target,
            detected: false,
            amplitude: 0.0,
            frequency: f64::NAN,
            bin_offset: 0,
            median,
            threshold,
        },
        Some(k) => {
            let amp = spectrum.amplitude[k];
            PeakReport {
                target,
                detected: amp > threshold * median,
                amplitude: amp,
                frequency: spectrum.refine(k),
                bin_offset: ((spectrum.omega[k] - target) / spectrum.resolution).round() as i64,
                median,
                threshold,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub bin: usize,
    pub omega: f64,
    pub amplitude: f64,
}

/// Local maxima above `threshold × median` and above `relative_floor × max`.
pub fn find_peaks(spectrum: &Spectrum, threshold: f64, relative_floor: f64) -> Vec<Peak> {
    let a = &spectrum.amplitude;
    let max = a.iter().cloned().fold(0.0, f64::max);
    let level = (threshold * spectrum.median()).max(relative_floor * max);
    (0..a.len())
        .filter(|&k| {
            let left = k == 0 || a[k] > a[k - 1];
            let right = k + 1 == a.len() || a[k] >= a[k + 1];
            left && right && a[k] > level
        })
        .map(|k| Peak {
            bin: k,
            omega: spectrum.refine(k),
            amplitude: a[k],
        })
        .collect()
}

/// One row of a [`SpectrumMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub control: f64,
    pub amplitude: Vec<f64>,
    pub realizations: usize,
    pub failures: Vec<String>,
}

/// Stacked spectra over a control axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMap {
    pub control_label: String,
    pub omega: Vec<f64>,
    pub resolution: f64,
    pub window: TimeWindow,
    pub options: SpectrumOptions,
    pub rows: Vec<SpectrumRow>,
}

/// JSON sidecar of a [`SpectrumMap`] CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMetadata {
    pub control_label: String,
    pub control_values: Vec<f64>,
    pub realizations: Vec<usize>,
    pub window: TimeWindow,
    pub resolution: f64,
    pub band: Option<(f64, f64)>,
    pub signal: SignalKind,
    pub taper: String,
    pub normalization: String,
    pub ensemble_average: String,
    pub seeds: Vec<Vec<JobSeeds>>,
}

impl SpectrumMap {
    /// Row spectrum for control index `i`.
    pub fn row(&self, i: usize) -> Spectrum {
        Spectrum {
            omega: self.omega.clone(),
            amplitude: self.rows[i].amplitude.clone(),
            resolution: self.resolution,
            window: self.window,
        }
    }

    /// Long-format CSV: `control,omega,amplitude`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "control,omega,amplitude")?;
        for row in &self.rows {
            for (om, a) in self.omega.iter().zip(&row.amplitude) {
                writeln!(w, "{},{om},{a:e}", row.control)?;
            }
        }
        Ok(())
    }

    pub fn metadata(&self, seeds: Vec<Vec<JobSeeds>>) -> SpectrumMetadata {
        SpectrumMetadata {
            control_label: self.control_label.clone(),
            control_values: self.rows.iter().map(|r| r.control).collect(),
            realizations: self.rows.iter().map(|r| r.realizations).collect(),
            window: self.window,
            resolution: self.resolution,
            band: self.options.band,
            signal: self.options.signal,
            taper: "hann".into(),
            normalization: "amplitude divided by window sum".into(),
            ensemble_average: "magnitude spectra, then sites, then realizations".into(),
            seeds,
        }
    }
}

/// Seeds used by one sweep job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSeeds {
    pub initial: u64,
    pub disorder: Option<u64>,
}

/// Shared settings of a sweep: every job integrates from t = 0 to
/// `window.t_f` with random initial conditions and records the window only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSetup {
    pub params: MeanFieldParams,
    pub solver: SolverOptions,
    pub dt_out: f64,
    pub window: TimeWindow,
    pub spectrum: SpectrumOptions,
}

/// Outcome of one job in a sweep.
#[derive(Debug)]
pub struct JobOutcome {
    pub cell: usize,
    pub realization: usize,
    pub seeds: JobSeeds,
    pub spectrum: Result<Spectrum>,
}

fn run_job(coupling: &CouplingMatrix, setup: &SweepSetup, seed: u64) -> Result<Spectrum> {
    let init = meanfield::random_initial(coupling.n, seed);
    let (traj, _) = meanfield::integrate_window(
        &init,
        &setup.params,
        coupling,
        setup.window.t_f,
        setup.dt_out,
        setup.window.t_i,
        &setup.solver,
    )?;
    let sites: Vec<usize> = (0..coupling.n).collect();
    dft_spectrum(&traj, &sites, &setup.window, &setup.spectrum)
}

fn assemble(
    label: &str,
    controls: &[f64],
    n_realizations: usize,
    setup: &SweepSetup,
    outcomes: &[JobOutcome],
) -> Result<SpectrumMap> {
    let reference = outcomes
        .iter()
        .find_map(|o| o.spectrum.as_ref().ok())
        .ok_or_else(|| Error::InvalidInput("every sweep job failed".into()))?;
    let bins = reference.omega.len();
    let rows = controls
        .iter()
        .enumerate()
        .map(|(cell, &control)| {
            let mut sum = vec![0.0; bins];
            let mut used = 0;
            let mut failures = Vec::new();
            for o in outcomes.iter().filter(|o| o.cell == cell) {
                match &o.spectrum {
                    Ok(s) => {
                        sum.iter_mut().zip(&s.amplitude).for_each(|(a, b)| *a += b);
                        used += 1;
                    }
                    Err(e) => failures.push(format!("realization {}: {e}", o.realization)),
                }
            }
            let scale = if used > 0 { 1.0 / used as f64 } else { f64::NAN };
            sum.iter_mut().for_each(|v| *v *= scale);
            debug_assert!(used + failures.len() == n_realizations);
            SpectrumRow {
                control,
                amplitude: sum,
                realizations: used,
                failures,
            }
        })
        .collect();
    Ok(SpectrumMap {
        control_label: label.into(),
        omega: reference.omega.clone(),
        resolution: reference.resolution,
        window: setup.window,
        options: setup.spectrum,
        rows,
    })
}

/// Ensemble-averaged all-site spectra for each `(control, lattice)` cell.
/// `initial_seed(cell, realization)` supplies the random initial condition.
/// Jobs run on the current rayon pool; results do not depend on its size.
pub fn reconstruct_spectrum_sweep<F>(
    label: &str,
    cells: &[(f64, CouplingMatrix)],
    setup: &SweepSetup,
    n_realizations: usize,
    initial_seed: F,
) -> Result<(SpectrumMap, Vec<JobOutcome>)>
where
    F: Fn(usize, usize) -> u64 + Sync,
{
    if n_realizations == 0 || cells.is_empty() {
        return Err(Error::InvalidInput("sweep needs cells and n_realizations >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..n_realizations).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<JobOutcome> = jobs
        .par_iter()
        .map(|&(cell, realization)| {
            let seed = initial_seed(cell, realization);
            JobOutcome {
                cell,
                realization,
                seeds: JobSeeds {
                    initial: seed,
                    disorder: None,
                },
                spectrum: run_job(&cells[cell].1, setup, seed),
            }
        })
        .collect();
    let controls: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let map = assemble(label, &controls, n_realizations, setup, &outcomes)?;
    Ok((map, outcomes))
}

/// Per-strength averaged spectra with fresh disorder and initial seeds per
/// realization, plus a peak report at `target` for every job.
pub fn disorder_sweep<F>(
    base: &CouplingMatrix,
    r_values: &[f64],
    setup: &SweepSetup,
    n_realizations: usize,
    target: f64,
    seeds: F,
) -> Result<(SpectrumMap, Vec<JobOutcome>, Vec<Vec<Option<PeakReport>>>)>
where
    F: Fn(usize, usize) -> JobSeeds + Sync,
{
    if n_realizations == 0 || r_values.is_empty() {
        return Err(Error::InvalidInput("sweep needs r values and n_realizations >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..r_values.len())
        .flat_map(|c| (0..n_realizations).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<JobOutcome> = jobs
        .par_iter()
        .map(|&(cell, realization)| {
            let s = seeds(cell, realization);
            let spectrum = apply_disorder(
                base,
                &DisorderSpec {
                    strength: r_values[cell],
                    seed: s.disorder.unwrap_or(0),
                },
            )
            .and_then(|lat| run_job(&lat, setup, s.initial));
            JobOutcome {
                cell,
                realization,
                seeds: s,
                spectrum,
            }
        })
        .collect();
    let map = assemble("r", r_values, n_realizations, setup, &outcomes)?;
    let mut peaks = vec![vec![None; n_realizations]; r_values.len()];
    for o in &outcomes {
        if let Ok(s) = &o.spectrum {
            peaks[o.cell][o.realization] = Some(detect_peak(s, target, PEAK_THRESHOLD));
        }
    }
    Ok((map, outcomes, peaks))
}
