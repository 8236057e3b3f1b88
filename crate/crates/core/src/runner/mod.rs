//! Experiment drivers behind the command-line subcommands.
//!
//! Each driver expands a [`SimulationConfig`] into independent jobs, runs
//! them on the current rayon pool, lets every job write its own files and
//! then records the results in a [`RunManifest`] from a single thread.

pub mod config;
pub mod manifest;
pub mod seeds;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exactquantum::{
    self, compare_s_c, phase_difference_marginal, steady_state, wigner_single, EffectiveRun, ExactParams, FockSpace,
};
use crate::fluctuations::{self, time_averaged_wigner, FluctuationParams, PhysicalityReport};
use crate::lattice::{apply_disorder, eigendecompose, CouplingMatrix, DisorderSpec, LatticeSpec, SiteRole};
use crate::meanfield::{self, integrate_window, InitialCondition, MeanFieldParams};
use crate::measures::{SyncAccumulator, SyncMatrix, SyncSummary};
use crate::ode::SolverOptions;
use crate::spectral::{
    disorder_sweep, find_peaks, reconstruct_spectrum_sweep, JobOutcome, JobSeeds, Peak, PeakReport, SweepSetup,
    PEAK_THRESHOLD,
};

pub use config::{SimulationConfig, Sweep, SweepAxis, TimeGrid};
pub use manifest::{JobRecord, JobStatus, ManifestWriter, RunManifest};
pub use seeds::{derive_seed, job_seeds, SeedStream};

/// Peaks below this fraction of the strongest line are not reported.
pub const PEAK_RELATIVE_FLOOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Meanfield,
    SpectrumSweep,
    DisorderSweep,
    SyncMatrix,
    ExactCompare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Meanfield => "meanfield",
            Command::SpectrumSweep => "spectrum-sweep",
            Command::DisorderSweep => "disorder-sweep",
            Command::SyncMatrix => "sync-matrix",
            Command::ExactCompare => "exact-compare",
        }
    }
}

/// Runs one subcommand and returns the finished manifest. Job failures are
/// recorded in the manifest; only setup and finalizer errors are returned.
pub fn run(command: Command, config: &SimulationConfig, config_bytes: &[u8], out: &Path) -> Result<RunManifest> {
    let warnings = config.validate()?;
    let mut manifest = RunManifest::new(command.name(), config_bytes, config.master_seed);
    manifest.warnings = warnings;
    let mut writer = ManifestWriter::create(out, manifest)?;
    match command {
        Command::Meanfield => run_meanfield(config, out, &mut writer)?,
        Command::SpectrumSweep => run_spectrum_sweep(config, out, &mut writer)?,
        Command::DisorderSweep => run_disorder_sweep(config, out, &mut writer)?,
        Command::SyncMatrix => run_sync_matrix(config, out, &mut writer)?,
        Command::ExactCompare => run_exact_compare(config, out, &mut writer)?,
    }
    Ok(writer.manifest)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn record(id: String, seeds: Option<JobSeeds>, result: std::result::Result<Vec<String>, String>, seconds: f64) -> JobRecord {
    let (status, artifacts) = match result {
        Ok(a) => (JobStatus::Completed, a),
        Err(error) => (JobStatus::Failed { error }, Vec::new()),
    };
    JobRecord {
        id,
        status,
        seeds,
        artifacts,
        seconds,
    }
}

/// Lattice of one job: the cell's lattice with its disorder realization.
pub fn job_lattice(config: &SimulationConfig, control: Option<f64>, seeds: &JobSeeds) -> Result<CouplingMatrix> {
    let (spec, r) = match control {
        Some(v) => (config.lattice_at(v)?, config.disorder_at(v)),
        None => (config.lattice.clone(), config.disorder),
    };
    let clean = spec.build()?;
    match seeds.disorder {
        Some(seed) if r > 0.0 => apply_disorder(&clean, &DisorderSpec { strength: r, seed }),
        _ => Ok(clean),
    }
}

/// `(cell, control)` pairs; a config without a sweep has one cell.
fn cells(config: &SimulationConfig) -> Vec<(usize, Option<f64>)> {
    match &config.sweep {
        Some(s) => s.values.iter().enumerate().map(|(c, &v)| (c, Some(v))).collect(),
        None => vec![(0, None)],
    }
}

fn disordered(config: &SimulationConfig, control: Option<f64>) -> bool {
    control.map_or(config.disorder, |v| config.disorder_at(v)) > 0.0
}

fn fmt_control(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v}"))
}

fn run_meanfield(config: &SimulationConfig, out: &Path, writer: &mut ManifestWriter) -> Result<()> {
    let params = config.fluctuation_params().effective_meanfield()?;
    let jobs: Vec<(usize, Option<f64>, usize)> = cells(config)
        .into_iter()
        .flat_map(|(c, v)| (0..config.realizations()).map(move |r| (c, v, r)))
        .collect();
    let records: Vec<JobRecord> = jobs
        .par_iter()
        .map(|&(cell, control, realization)| {
            let start = Instant::now();
            let seeds = job_seeds(config.master_seed, cell, realization, disordered(config, control));
            let id = format!("c{cell}_r{realization}");
            let result = meanfield_job(config, &params, control, &seeds, &id, out).map_err(|e| e.to_string());
            record(id, Some(seeds), result, start.elapsed().as_secs_f64())
        })
        .collect();
    for r in records {
        writer.push_job(r)?;
    }
    Ok(())
}

fn meanfield_job(
    config: &SimulationConfig,
    params: &MeanFieldParams,
    control: Option<f64>,
    seeds: &JobSeeds,
    id: &str,
    out: &Path,
) -> Result<Vec<String>> {
    let lattice = job_lattice(config, control, seeds)?;
    let decomposition = eigendecompose(&lattice)?;
    let init = config.initial.resolve(&decomposition, seeds.initial)?;
    let t = &config.time;
    let (traj, _) = integrate_window(&init, params, &lattice, t.t_end, t.dt_out, t.record_from(), &config.solver)?;
    let names = vec![format!("trajectory_{id}.csv"), format!("amplitude_{id}.csv"), format!("lattice_{id}.csv")];
    let mut w = create(out, &names[0])?;
    traj.write_csv(&mut w, t.output_stride)?;
    w.flush()?;
    let mut w = create(out, &names[1])?;
    traj.write_amplitude_csv(&mut w, t.output_stride)?;
    w.flush()?;
    let mut w = create(out, &names[2])?;
    writeln!(w, "l,mu,omega")?;
    for (l, mu) in decomposition.eigenvalues.iter().enumerate() {
        writeln!(w, "{},{mu:e},{:e}", l + 1, params.omega0 + mu)?;
    }
    w.flush()?;
    Ok(names)
}

fn sweep_setup(config: &SimulationConfig) -> Result<SweepSetup> {
    Ok(SweepSetup {
        params: config.fluctuation_params().effective_meanfield()?,
        solver: config.solver,
        dt_out: config.time.dt_out,
        window: config.time.window()?,
        spectrum: config.spectrum,
    })
}

/// Peaks of one averaged spectrum row next to the lattice lines `ω0 + μ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowPeaks {
    pub control: f64,
    pub realizations: usize,
    pub peaks: Vec<Peak>,
    pub lattice_lines: Vec<f64>,
}

fn outcome_records(outcomes: Vec<JobOutcome>, controls: &[f64]) -> Vec<JobRecord> {
    outcomes
        .into_iter()
        .map(|o| {
            let id = format!("c{}_r{}", o.cell, o.realization);
            let result = o
                .spectrum
                .map(|_| Vec::new())
                .map_err(|e| format!("control {}: {e}", controls[o.cell]));
            record(id, Some(o.seeds), result, 0.0)
        })
        .collect()
}

fn run_spectrum_sweep(config: &SimulationConfig, out: &Path, writer: &mut ManifestWriter) -> Result<()> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("spectrum-sweep needs a sweep section".into()))?;
    if sweep.axis == SweepAxis::Disorder {
        return run_disorder_sweep(config, out, writer);
    }
    if sweep.values.is_empty() || sweep.n_realizations == 0 {
        return Ok(());
    }
    let setup = sweep_setup(config)?;
    let mut lattices = Vec::with_capacity(sweep.values.len());
    for (cell, &v) in sweep.values.iter().enumerate() {
        let seeds = job_seeds(config.master_seed, cell, 0, config.disorder > 0.0);
        lattices.push((v, job_lattice(config, Some(v), &seeds)?));
    }
    let master = config.master_seed;
    let (map, outcomes) = reconstruct_spectrum_sweep(label(sweep.axis), &lattices, &setup, sweep.n_realizations, |c, r| {
        derive_seed(master, SeedStream::Initial, c, r)
    })?;
    let mut seeds = vec![Vec::new(); sweep.values.len()];
    for o in &outcomes {
        seeds[o.cell].push(o.seeds);
    }
    for r in outcome_records(outcomes, &sweep.values) {
        writer.push_job(r)?;
    }
    let peaks: Vec<RowPeaks> = lattices
        .iter()
        .enumerate()
        .map(|(i, (v, lat))| {
            let lines = eigendecompose(lat)
                .map(|d| d.eigenvalues.iter().map(|mu| setup.params.omega0 + mu).collect())
                .unwrap_or_default();
            RowPeaks {
                control: *v,
                realizations: map.rows[i].realizations,
                peaks: find_peaks(&map.row(i), PEAK_THRESHOLD, PEAK_RELATIVE_FLOOR),
                lattice_lines: lines,
            }
        })
        .collect();
    let mut w = create(out, "spectrum_map.csv")?;
    map.write_csv(&mut w)?;
    w.flush()?;
    write_json(out, "spectrum_meta.json", &map.metadata(seeds))?;
    write_json(out, "spectrum_peaks.json", &peaks)?;
    for name in ["spectrum_map.csv", "spectrum_meta.json", "spectrum_peaks.json"] {
        writer.push_artifact(name)?;
    }
    Ok(())
}

fn label(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Dimerization => "dimerization",
        SweepAxis::Lambda1 => "lambda1",
        SweepAxis::Disorder => "r",
        SweepAxis::Coupling => "lambda",
    }
}

/// Detection statistics of the `ω0` line at one disorder strength.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisorderCell {
    pub r: f64,
    pub detected: usize,
    pub realizations: usize,
    pub reports: Vec<Option<PeakReport>>,
}

fn run_disorder_sweep(config: &SimulationConfig, out: &Path, writer: &mut ManifestWriter) -> Result<()> {
    let sweep = config
        .sweep
        .as_ref()
        .filter(|s| s.axis == SweepAxis::Disorder)
        .ok_or_else(|| Error::Config("disorder-sweep needs a sweep over `disorder`".into()))?;
    if sweep.values.is_empty() || sweep.n_realizations == 0 {
        return Ok(());
    }
    let setup = sweep_setup(config)?;
    let base = config.lattice.build()?;
    let master = config.master_seed;
    let (map, outcomes, reports) = disorder_sweep(
        &base,
        &sweep.values,
        &setup,
        sweep.n_realizations,
        setup.params.omega0,
        |c, r| job_seeds(master, c, r, true),
    )?;
    let mut seeds = vec![Vec::new(); sweep.values.len()];
    for o in &outcomes {
        seeds[o.cell].push(o.seeds);
    }
    for r in outcome_records(outcomes, &sweep.values) {
        writer.push_job(r)?;
    }
    let summary: Vec<DisorderCell> = sweep
        .values
        .iter()
        .zip(reports)
        .map(|(&r, reports)| DisorderCell {
            r,
            detected: reports.iter().flatten().filter(|p| p.detected).count(),
            realizations: reports.len(),
            reports,
        })
        .collect();
    let mut w = create(out, "disorder_map.csv")?;
    map.write_csv(&mut w)?;
    w.flush()?;
    write_json(out, "disorder_meta.json", &map.metadata(seeds))?;
    write_json(out, "disorder_peaks.json", &summary)?;
    for name in ["disorder_map.csv", "disorder_meta.json", "disorder_peaks.json"] {
        writer.push_artifact(name)?;
    }
    Ok(())
}

/// Covariance diagnostics of one [`sync_job`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceDiagnostics {
    pub physicality: PhysicalityReport,
    /// `max |C − Cᵀ|` over the checked samples.
    pub max_asymmetry: f64,
    /// Whether the first visited sample equals `½ I` exactly.
    pub initial_is_vacuum: bool,
}

/// Result of one covariance run.
#[derive(Debug, Clone)]
pub struct SyncJob {
    pub matrix: SyncMatrix,
    pub diagnostics: CovarianceDiagnostics,
    pub roles: Vec<SiteRole>,
}

/// Mean field from `init`, then the covariance from `½ I` at t = 0, with
/// `S_c` time-averaged over the analysis window.
pub fn sync_job(
    lattice: &CouplingMatrix,
    init: &[Complex64],
    params: &FluctuationParams,
    time: &TimeGrid,
    solver: &SolverOptions,
    covariance: &fluctuations::CovarianceOptions,
) -> Result<SyncJob> {
    let window = time.window()?;
    let mf = params.effective_meanfield()?;
    let (traj, _) = integrate_window(init, &mf, lattice, window.t_f, time.dt_out, 0.0, solver)?;
    let n = lattice.n;
    let c0 = DMatrix::identity(2 * n, 2 * n) * 0.5;
    let mut acc = SyncAccumulator::new(n, window);
    let mut max_asymmetry: f64 = 0.0;
    let mut initial_is_vacuum = None;
    let stride = covariance.check_stride.max(1);
    let mut seen = 0usize;
    let (physicality, _) =
        fluctuations::evolve_covariance_streaming(&c0, &traj, params, lattice, (0.0, window.t_f), covariance, |_, t, c| {
            if initial_is_vacuum.is_none() {
                initial_is_vacuum = Some(c == &c0);
            }
            if seen % stride == 0 {
                max_asymmetry = max_asymmetry.max((c - c.transpose()).amax());
            }
            seen += 1;
            acc.push(t, c)
        })?;
    Ok(SyncJob {
        matrix: acc.finish()?,
        diagnostics: CovarianceDiagnostics {
            physicality,
            max_asymmetry,
            initial_is_vacuum: initial_is_vacuum.unwrap_or(false),
        },
        roles: lattice.site_roles.clone(),
    })
}

/// Pairs among the boundary sites (SSH ends, Kagome corners).
pub fn boundary_pairs(lattice: &CouplingMatrix) -> Vec<(usize, usize)> {
    let b = lattice.sites_with_role(SiteRole::Boundary);
    let mut out = Vec::new();
    for (i, &j) in b.iter().enumerate() {
        for &k in &b[i + 1..] {
            out.push((j, k));
        }
    }
    out
}

/// Per-cell output of `sync-matrix`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncCellSummary {
    pub control: Option<f64>,
    pub realizations: usize,
    pub summary: Option<SyncSummary>,
    pub diagnostics: Vec<CovarianceDiagnostics>,
}

fn run_sync_matrix(config: &SimulationConfig, out: &Path, writer: &mut ManifestWriter) -> Result<()> {
    let params = config.fluctuation_params();
    let jobs: Vec<(usize, Option<f64>, usize)> = cells(config)
        .into_iter()
        .flat_map(|(c, v)| (0..config.realizations()).map(move |r| (c, v, r)))
        .collect();
    let results: Vec<(usize, JobRecord, Option<SyncJob>)> = jobs
        .par_iter()
        .map(|&(cell, control, realization)| {
            let start = Instant::now();
            let seeds = job_seeds(config.master_seed, cell, realization, disordered(config, control));
            let id = format!("c{cell}_r{realization}");
            let job = (|| -> Result<(SyncJob, Vec<String>)> {
                let lattice = job_lattice(config, control, &seeds)?;
                let init = config.initial.resolve(&eigendecompose(&lattice)?, seeds.initial)?;
                let job = sync_job(&lattice, &init, &params, &config.time, &config.solver, &config.covariance)?;
                let name = format!("sync_{id}.csv");
                let mut w = create(out, &name)?;
                job.matrix.write_csv(&mut w, &lattice.site_labels)?;
                w.flush()?;
                Ok((job, vec![name]))
            })();
            let (job, result) = match job {
                Ok((j, names)) => (Some(j), Ok(names)),
                Err(e) => (None, Err(format!("control {}: {e}", fmt_control(control)))),
            };
            (cell, record(id, Some(seeds), result, start.elapsed().as_secs_f64()), job)
        })
        .collect();
    let cell_list = cells(config);
    let mut summaries = Vec::new();
    let mut per_cell: Vec<Vec<SyncJob>> = vec![Vec::new(); cell_list.len()];
    for (cell, rec, job) in results {
        writer.push_job(rec)?;
        if let Some(j) = job {
            per_cell[cell].push(j);
        }
    }
    for ((cell, control), jobs) in cell_list.into_iter().zip(per_cell) {
        if jobs.is_empty() {
            summaries.push(SyncCellSummary {
                control,
                realizations: 0,
                summary: None,
                diagnostics: Vec::new(),
            });
            continue;
        }
        let mats: Vec<SyncMatrix> = jobs.iter().map(|j| j.matrix.clone()).collect();
        let avg = SyncMatrix::average(&mats)?;
        let clean = match control {
            Some(v) => config.lattice_at(v)?.build()?,
            None => config.lattice.build()?,
        };
        let name = format!("sync_c{cell}.csv");
        let mut w = create(out, &name)?;
        avg.write_csv(&mut w, &clean.site_labels)?;
        w.flush()?;
        writer.push_artifact(name)?;
        let summary = match avg.summarize(&clean.site_roles, &boundary_pairs(&clean)) {
            Ok(s) => Some(s),
            Err(e) => {
                writer.manifest.warnings.push(format!("cell {cell}: no summary: {e}"));
                None
            }
        };
        summaries.push(SyncCellSummary {
            control,
            realizations: jobs.len(),
            summary,
            diagnostics: jobs.into_iter().map(|j| j.diagnostics).collect(),
        });
    }
    write_json(out, "sync_summary.json", &summaries)?;
    writer.push_artifact("sync_summary.json")?;
    Ok(())
}

/// Single-mode truncation used for the Wigner export.
pub const SINGLE_MODE_TRUNCATION: usize = 20;
/// Default coupling values of the two-mode comparison.
pub const DEFAULT_COMPARISON_COUPLINGS: [f64; 4] = [0.0, 0.1, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactSummary {
    pub points: Vec<exactquantum::ComparisonPoint>,
    pub single_mode_occupation: f64,
    pub oracle_occupation: f64,
    pub single_mode_peak_radius: Option<f64>,
    pub limit_cycle_radius: f64,
    pub effective_seeds: Vec<u64>,
}

fn run_exact_compare(config: &SimulationConfig, out: &Path, writer: &mut ManifestWriter) -> Result<()> {
    let params = config.fluctuation_params();
    let settings = &config.exact;
    let lambdas = match &config.sweep {
        Some(s) if s.axis == SweepAxis::Coupling => s.values.clone(),
        Some(_) => return Err(Error::Config("exact-compare sweeps the `coupling` axis".into())),
        None => DEFAULT_COMPARISON_COUPLINGS.to_vec(),
    };
    FockSpace::new(2, settings.truncation)?;
    let single = ExactParams::from_meanfield(&config.meanfield, config.gamma_bar, 0.0);
    let ss = steady_state(FockSpace::new(1, SINGLE_MODE_TRUNCATION)?, &single)?;
    let oracle = steady_state(FockSpace::new(1, settings.oracle_truncation)?, &single)?;
    let wigner = wigner_single(&ss.state, &settings.wigner_grid)?;
    let mut w = create(out, "wigner_exact_single.csv")?;
    wigner.write_csv(&mut w)?;
    w.flush()?;
    writer.push_artifact("wigner_exact_single.csv")?;

    let effective = effective_single_wigner(&params, config, &settings.wigner_grid)?;
    let mut w = create(out, "wigner_effective_single.csv")?;
    effective.write_csv(&mut w)?;
    w.flush()?;
    writer.push_artifact("wigner_effective_single.csv")?;

    let two = FockSpace::new(2, settings.truncation)?;
    let marginals: Vec<(f64, Result<crate::phasespace::WignerField>)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let p = ExactParams {
                lambda,
                ..single
            };
            let m = steady_state(two, &p).and_then(|s| phase_difference_marginal(&s.state, &settings.marginal));
            (lambda, m)
        })
        .collect();
    for (i, (lambda, m)) in marginals.into_iter().enumerate() {
        let name = format!("marginal_c{i}.csv");
        let result = m.and_then(|m| {
            let mut w = create(out, &name)?;
            m.write_csv(&mut w)?;
            w.flush()?;
            Ok(vec![name])
        });
        writer.push_job(record(format!("marginal_lambda_{lambda}"), None, result.map_err(|e| e.to_string()), 0.0))?;
    }

    let seeds: Vec<u64> = (0..settings.effective_realizations)
        .map(|r| derive_seed(config.master_seed, SeedStream::Initial, 0, r))
        .collect();
    let run = EffectiveRun {
        t_end: config.time.window.1,
        dt_out: config.time.dt_out,
        window: config.time.window,
        covariance: config.covariance,
    };
    let points = compare_s_c(&params, &lambdas, settings.truncation, &seeds, &run)?;
    let mut w = create(out, "s_c_compare.csv")?;
    writeln!(w, "lambda,exact,effective,leakage")?;
    for p in &points {
        writeln!(w, "{},{:e},{:e},{:e}", p.lambda, p.exact, p.effective, p.leakage)?;
    }
    w.flush()?;
    writer.push_artifact("s_c_compare.csv")?;
    let summary = ExactSummary {
        points,
        single_mode_occupation: ss.state.occupation(0),
        oracle_occupation: oracle.state.occupation(0),
        single_mode_peak_radius: wigner.radius_of_maximum().map(|r| r / 2f64.sqrt()),
        limit_cycle_radius: config.meanfield.limit_cycle_radius(),
        effective_seeds: seeds,
    };
    write_json(out, "exact_summary.json", &summary)?;
    writer.push_artifact("exact_summary.json")?;
    Ok(())
}

/// Time average over the analysis window of the displaced Gaussian of a
/// single oscillator started in the vacuum at `α = Ā`.
pub fn effective_single_wigner(
    params: &FluctuationParams,
    config: &SimulationConfig,
    grid: &crate::phasespace::QuadratureGrid,
) -> Result<crate::phasespace::WignerField> {
    let lattice = LatticeSpec::Custom {
        n_sites: 1,
        bonds: Vec::new(),
    }
    .build()?;
    let mf = params.effective_meanfield()?;
    let init = InitialCondition::Explicit {
        alpha: vec![[mf.limit_cycle_radius(), 0.0]],
    }
    .resolve(&eigendecompose(&lattice)?, 0)?;
    let window = config.time.window()?;
    let (traj, _) = meanfield::integrate_window(&init, &mf, &lattice, window.t_f, config.time.dt_out, 0.0, &config.solver)?;
    let target = 400usize;
    let mut samples = Vec::new();
    let in_window: Vec<usize> = (0..traj.len()).filter(|&k| window.contains(traj.time(k))).collect();
    let step = (in_window.len() / target).max(1);
    let keep: std::collections::HashSet<usize> = in_window.iter().step_by(step).cloned().collect();
    let c0 = DMatrix::identity(2, 2) * 0.5;
    fluctuations::evolve_covariance_streaming(&c0, &traj, params, &lattice, (0.0, window.t_f), &config.covariance, |k, _, c| {
        if keep.contains(&k) {
            samples.push((c.clone(), traj.state(k)[0]));
        }
        Ok(())
    })?;
    time_averaged_wigner(&samples, grid)
}

/// Dry-run report of `validate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub config_hash: String,
    pub warnings: Vec<String>,
    pub n_cells: usize,
    pub n_realizations: usize,
    pub n_jobs: usize,
    /// Rough peak memory of one mean-field plus covariance job.
    pub bytes_per_job: u64,
}

pub fn validate_config(config: &SimulationConfig, config_bytes: &[u8]) -> Result<ValidationReport> {
    let warnings = config.validate()?;
    let n_cells = config.sweep.as_ref().map_or(1, |s| s.values.len());
    let n_realizations = config.realizations();
    let n = config.lattice.n_sites() as u64;
    let samples = (config.time.t_end / config.time.dt_out).ceil() as u64 + 1;
    let trajectory = samples * n * 16;
    let covariance = 8 * (2 * n) * (2 * n) * 12;
    Ok(ValidationReport {
        config_hash: manifest::config_hash(config_bytes),
        warnings,
        n_cells,
        n_realizations,
        n_jobs: n_cells * n_realizations,
        bytes_per_job: trajectory + covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ssh_config(extra: &str) -> (SimulationConfig, String) {
        let text = format!(
            r#"{{
            "lattice": {{"kind": "ssh", "n_sites": 6, "lambda0": 0.25, "dimerization": 0.6}},
            "time": {{"t_end": 60.0, "dt_out": 0.5, "window": [20.0, 60.0], "output_stride": 4}},
            "master_seed": 11{extra}
        }}"#
        );
        (SimulationConfig::from_json(&text).unwrap(), text)
    }

    #[test]
    fn zero_length_sweep_writes_an_empty_manifest() {
        let (c, text) = ssh_config(r#", "sweep": {"axis": "dimerization", "values": [], "n_realizations": 2}"#);
        let dir = tempfile::tempdir().unwrap();
        let m = run(Command::Meanfield, &c, text.as_bytes(), dir.path()).unwrap();
        assert!(m.jobs.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn meanfield_runs_are_byte_reproducible() {
        let (c, text) = ssh_config(r#", "sweep": {"axis": "dimerization", "values": [0.4], "n_realizations": 2}"#);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run(Command::Meanfield, &c, text.as_bytes(), a.path()).unwrap();
        run(Command::Meanfield, &c, text.as_bytes(), b.path()).unwrap();
        assert_eq!(ma.jobs.len(), 2);
        assert_eq!(ma.failed_jobs(), 0);
        for name in &ma.jobs[1].artifacts {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn failed_jobs_are_isolated_in_the_manifest() {
        // Eigenstate 7 does not exist on a six-site chain.
        let (mut c, text) = ssh_config(r#", "sweep": {"axis": "dimerization", "values": [0.2, 0.4], "n_realizations": 1}"#);
        c.initial = InitialCondition::Eigenstate { index: 7, scale: 1.0 };
        let dir = tempfile::tempdir().unwrap();
        let m = run(Command::Meanfield, &c, text.as_bytes(), dir.path()).unwrap();
        assert_eq!(m.failed_jobs(), 2);
        c.initial = InitialCondition::Eigenstate { index: 3, scale: 1.0 };
        let m = run(Command::Meanfield, &c, text.as_bytes(), dir.path()).unwrap();
        assert_eq!(m.failed_jobs(), 0);
    }

    #[test]
    fn single_cell_sweep_matches_direct_spectral_call() {
        let (c, text) = ssh_config(r#", "sweep": {"axis": "dimerization", "values": [0.6], "n_realizations": 1}"#);
        let dir = tempfile::tempdir().unwrap();
        run(Command::SpectrumSweep, &c, text.as_bytes(), dir.path()).unwrap();
        let setup = sweep_setup(&c).unwrap();
        let lat = c.lattice_at(0.6).unwrap().build().unwrap();
        let seed = derive_seed(11, SeedStream::Initial, 0, 0);
        let init = meanfield::random_initial(lat.n, seed);
        let (traj, _) = integrate_window(&init, &setup.params, &lat, 60.0, 0.5, 20.0, &setup.solver).unwrap();
        let sites: Vec<usize> = (0..lat.n).collect();
        let direct = crate::spectral::dft_spectrum(&traj, &sites, &setup.window, &setup.spectrum).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("spectrum_map.csv")).unwrap();
        let amps: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(amps.len(), direct.amplitude.len());
        for (a, b) in amps.iter().zip(&direct.amplitude) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn sync_job_reports_symmetric_physical_covariance() {
        let (c, _) = ssh_config("");
        let lat = c.lattice.build().unwrap();
        let init = meanfield::random_initial(lat.n, 5);
        let job = sync_job(&lat, &init, &c.fluctuation_params(), &c.time, &c.solver, &c.covariance).unwrap();
        assert!(job.diagnostics.initial_is_vacuum);
        assert_eq!(job.diagnostics.max_asymmetry, 0.0);
        assert!(job.diagnostics.physicality.is_physical());
        assert!(job.matrix.get(0, 5).is_finite());
    }

    #[test]
    fn sync_matrix_averages_cells_and_tolerates_missing_bulk() {
        let (c, text) = ssh_config(r#", "sweep": {"axis": "disorder", "values": [0.0, 0.4], "n_realizations": 2}"#);
        let dir = tempfile::tempdir().unwrap();
        let m = run(Command::SyncMatrix, &c, text.as_bytes(), dir.path()).unwrap();
        assert_eq!(m.jobs.len(), 4);
        assert_eq!(m.failed_jobs(), 0);
        let missing = |m: &RunManifest| m.warnings.iter().filter(|w| w.contains("no summary")).count();
        assert_eq!(missing(&m), 2, "{:?}", m.warnings);
        let text = text.replace("\"n_sites\": 6", "\"n_sites\": 10");
        let c = SimulationConfig::from_json(&text).unwrap();
        let m = run(Command::SyncMatrix, &c, text.as_bytes(), dir.path()).unwrap();
        assert_eq!(missing(&m), 0);
        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("sync_summary.json")).unwrap()).unwrap();
        assert_eq!(summary[1]["realizations"], 2);
        assert_eq!(summary[0]["summary"]["pairs"][0]["pair"], serde_json::json!([0, 9]));
        assert!(dir.path().join("sync_c1.csv").is_file());
    }

    #[test]
    fn exact_compare_exports_curves_and_marginals() {
        let text = r#"{
            "lattice": {"kind": "custom", "n_sites": 2, "bonds": []},
            "time": {"t_end": 300.0, "dt_out": 0.25, "window": [200.0, 300.0]},
            "sweep": {"axis": "coupling", "values": [0.0, 0.5]},
            "exact": {"truncation": 6, "oracle_truncation": 12, "effective_realizations": 1,
                      "wigner_grid": {"half_width": 3.0, "n": 41}}
        }"#;
        let c = SimulationConfig::from_json(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = run(Command::ExactCompare, &c, text.as_bytes(), dir.path()).unwrap();
        assert_eq!(m.failed_jobs(), 0);
        let csv = std::fs::read_to_string(dir.path().join("s_c_compare.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        for name in ["marginal_c0.csv", "marginal_c1.csv", "wigner_exact_single.csv", "wigner_effective_single.csv"] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("exact_summary.json")).unwrap()).unwrap();
        assert!((v["oracle_occupation"].as_f64().unwrap() - 0.700594417715).abs() < 1e-9);
        assert!(v["single_mode_peak_radius"].as_f64().unwrap() > v["limit_cycle_radius"].as_f64().unwrap());
    }

    #[test]
    fn r_zero_disorder_reproduces_the_clean_lattice() {
        let (c, _) = ssh_config(r#", "sweep": {"axis": "disorder", "values": [0.0], "n_realizations": 1}"#);
        let seeds = job_seeds(11, 0, 0, true);
        let a = job_lattice(&c, Some(0.0), &seeds).unwrap();
        assert_eq!(a.entries, c.lattice.build().unwrap().entries);
    }

    #[test]
    fn validation_report_counts_jobs() {
        let (c, text) = ssh_config(r#", "sweep": {"axis": "disorder", "values": [0.0, 0.5], "n_realizations": 20}"#);
        let r = validate_config(&c, text.as_bytes()).unwrap();
        assert_eq!(r.n_jobs, 40);
        assert!(r.warnings.is_empty());
        assert!(r.bytes_per_job > 0);
    }
}
