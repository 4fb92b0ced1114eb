//! Configuration documents and the on-disk stages chained by the `modscan`
//! tool: simulate → reconstruct → positions → assemble → evaluate, plus
//! modulator calibration.
//!
//! Every stage reads its inputs from disk, writes its interface files and a
//! `report.json`, and produces byte-identical files (other than the report's
//! wall time) for identical inputs and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assemble::{self, EpieConfig, StitchedObject};
use crate::calibrate::{self, CalibrationConfig, CalibrationPlan, CalibrationReport};
use crate::engine::{self, DriftConfig, Engine, Priors, ReconConfig, ReconMode};
use crate::error::{Error, Result};
use crate::field::{ComplexField, Geometry};
use crate::io;
use crate::register::{self, EdgeStrategy, PositionGraph, RegisterConfig, RegisterOptions, ShiftMeasurement};
use crate::simulate::{self, DriftModel, ModulatorKind, ProbeKind, SampleKind, ScanDataset};

pub const CONFIG_VERSION: u32 = 1;

/// Final data residual below which a run counts as converged in sweep tables.
pub const CONVERGED_RESIDUAL: f64 = 0.05;

/// Blending weight above which stitched pixels count as scanned.
pub const SCANNED_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Drives shot noise, engine initialisation and ePIE frame order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub reconstruct: ReconStageConfig,
    #[serde(default)]
    pub positions: PositionsConfig,
    #[serde(default)]
    pub assemble: AssembleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSetup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub wavelength_m: f64,
    /// Sample → modulator distance.
    pub z_sm_m: f64,
    /// Modulator → detector distance (far-field leg).
    pub z_md_m: f64,
    pub detector_pitch_m: f64,
    pub frame_px: usize,
}

impl GeometryConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        if self.frame_px == 0 {
            return Err(Error::Config("frame_px must be positive".into()));
        }
        Geometry::far_field(
            self.wavelength_m,
            self.z_sm_m,
            self.z_md_m,
            self.detector_pitch_m,
            self.frame_px,
        )
    }

    fn shape(&self) -> (usize, usize) {
        (self.frame_px, self.frame_px)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeShape {
    #[default]
    Aperture,
    Divergent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub kind: ProbeShape,
    pub diameter_m: f64,
    /// Propagation from the aperture to the sample plane.
    #[serde(default)]
    pub defocus_m: f64,
    /// Lens focal length for the divergent probe (negative diverges).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_m: Option<f64>,
}

impl ProbeConfig {
    pub fn build(&self, geometry: &Geometry, shape: (usize, usize)) -> Result<ComplexField> {
        let kind = match (self.kind, self.focal_m) {
            (ProbeShape::Aperture, _) => ProbeKind::Aperture,
            (ProbeShape::Divergent, Some(focal)) if focal != 0.0 && focal.is_finite() => {
                ProbeKind::Divergent { focal }
            }
            (ProbeShape::Divergent, _) => {
                return Err(Error::Config("a divergent probe needs a nonzero focal_m".into()))
            }
        };
        simulate::generate_probe(geometry, shape, kind, self.diameter_m, self.defocus_m)
    }
}

fn default_amplitude_range() -> (f64, f64) {
    (0.6, 1.0)
}

fn default_phase_range() -> (f64, f64) {
    (0.0, 0.6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub size_px: usize,
    pub pattern: SampleKind,
    #[serde(default = "default_amplitude_range")]
    pub amplitude_range: (f64, f64),
    #[serde(default = "default_phase_range")]
    pub phase_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulatorConfig {
    pub pattern: ModulatorKind,
    pub phase_depth_rad: f64,
}

impl ModulatorConfig {
    pub fn build(&self, shape: (usize, usize), pitch: f64) -> Result<ComplexField> {
        simulate::generate_modulator(shape, pitch, self.pattern, self.phase_depth_rad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Raster `(rows, cols)`.
    pub grid: (usize, usize),
    /// Nearest-neighbour disc-lens overlap of the 90 %-power probe disc;
    /// exclusive with `step_px`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_px: Option<f64>,
    #[serde(default)]
    pub jitter_px: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep every n-th raster row and column of the simulated scan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub geometry: GeometryConfig,
    pub probe: ProbeConfig,
    pub sample: SampleConfig,
    pub modulator: ModulatorConfig,
    pub scan: ScanConfig,
    #[serde(default = "DriftModel::none")]
    pub drift: DriftModel,
    /// Incident photons per frame; absent for noiseless frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photons: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconStageConfig {
    pub engine: ReconConfig,
    /// Exit-wave mode: measure and compensate probe drift before separating.
    pub estimate_drift: bool,
    pub drift: DriftConfig,
}

impl Default for ReconStageConfig {
    fn default() -> Self {
        let mut engine = ReconConfig::for_mode(ReconMode::Exitwave);
        engine.support.margin_fraction = 0.1;
        Self {
            engine,
            estimate_drift: true,
            drift: DriftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionsConfig {
    /// Candidate edges; raster neighbours when the scan grid is known and
    /// this is absent, otherwise temporal neighbours.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<EdgeStrategy>,
    pub min_confidence: f64,
    pub min_peak_ratio: f64,
    pub estimator: RegisterOptions,
}

impl Default for PositionsConfig {
    fn default() -> Self {
        let r = RegisterConfig::default();
        Self {
            strategy: None,
            min_confidence: r.min_confidence,
            min_peak_ratio: r.min_peak_ratio,
            estimator: r.estimator,
        }
    }
}

impl PositionsConfig {
    pub fn register_config(&self, n_frames: usize, grid: Option<(usize, usize)>) -> RegisterConfig {
        let strategy = self.strategy.unwrap_or(match grid {
            Some((rows, cols)) if rows * cols == n_frames => EdgeStrategy::Raster {
                cols,
                diagonals: false,
            },
            _ => EdgeStrategy::default(),
        });
        RegisterConfig {
            strategy,
            min_confidence: self.min_confidence,
            min_peak_ratio: self.min_peak_ratio,
            estimator: self.estimator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssembleConfig {
    pub epie: EpieConfig,
    /// Re-divide the exit waves by the ePIE probe, re-register, re-stitch
    /// and refine once more.
    pub second_pass: bool,
    pub division_epsilon: f64,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            epie: EpieConfig::default(),
            second_pass: true,
            division_epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffuserConfig {
    pub size_px: usize,
    pub correlation_px: f64,
    pub phase_std_rad: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSetup {
    pub geometry: GeometryConfig,
    /// True probe of the simulation and the prior handed to the engine.
    pub probe: ProbeConfig,
    pub modulator: ModulatorConfig,
    pub diffuser: DiffuserConfig,
    /// Number of diffuser positions.
    pub translations: usize,
    /// Translations are whole pixels drawn uniformly from `±range_px`.
    pub range_px: f64,
    #[serde(default)]
    pub translation_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photons: Option<f64>,
    #[serde(default)]
    pub engine: CalibrationConfig,
    /// Scoring region: modulator pixels with mean incident intensity above
    /// this fraction of the peak.
    #[serde(default = "default_region_fraction")]
    pub region_fraction: f64,
}

fn default_region_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Overlap ratios, each replacing the scan's `overlap`.
    pub overlaps: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            simulation: None,
            reconstruct: ReconStageConfig::default(),
            positions: PositionsConfig::default(),
            assemble: AssembleConfig::default(),
            calibration: None,
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.reconstruct.engine.validate()?;
        self.assemble.epie.validate()?;
        if !(self.assemble.division_epsilon > 0.0) {
            return Err(Error::Config("assemble.division_epsilon must be > 0".into()));
        }
        if let Some(sim) = &self.simulation {
            let s = &sim.scan;
            match (s.overlap, s.step_px) {
                (Some(o), None) if o > 0.0 && o < 1.0 => {}
                (Some(o), None) => return Err(Error::Config(format!("scan.overlap {o} outside (0, 1)"))),
                (None, Some(st)) if st > 0.0 => {}
                (None, Some(st)) => return Err(Error::Config(format!("scan.step_px {st} must be > 0"))),
                _ => return Err(Error::Config("scan needs exactly one of overlap and step_px".into())),
            }
            if s.grid.0 * s.grid.1 < 2 {
                return Err(Error::Config("scan.grid needs at least 2 frames".into()));
            }
            if s.subsample_stride == Some(0) {
                return Err(Error::Config("scan.subsample_stride must be ≥ 1".into()));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.overlaps.is_empty() || sw.overlaps.iter().any(|o| !(*o > 0.0 && *o < 1.0)) {
                return Err(Error::Config("sweep.overlaps must be non-empty ratios in (0, 1)".into()));
            }
        }
        if let Some(c) = &self.calibration {
            if c.translations < 3 {
                return Err(Error::Config("calibration.translations must be ≥ 3".into()));
            }
            if !(c.range_px >= 0.0) {
                return Err(Error::Config("calibration.range_px must be ≥ 0".into()));
            }
        }
        Ok(())
    }

    fn simulation(&self) -> Result<&SimulationConfig> {
        self.simulation
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `simulation` section".into()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epie_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_edges: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_position_error_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_position_error_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_drift_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_rms_error_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nrmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_rms_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grating_period_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

/// One per stage invocation, written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub config: serde_json::Value,
    pub wall_time_s: f64,
    pub metrics: Metrics,
    /// Files written, relative to the stage directory.
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub i: usize,
    pub j: usize,
    pub dy: f64,
    pub dx: f64,
    pub confidence: f64,
    pub peak_ratio: f64,
    pub accepted: bool,
}

impl From<&ShiftMeasurement> for EdgeRow {
    fn from(m: &ShiftMeasurement) -> Self {
        Self {
            i: m.frame_i,
            j: m.frame_j,
            dy: m.delta.0,
            dx: m.delta.1,
            confidence: m.confidence,
            peak_ratio: m.peak_ratio,
            accepted: m.accepted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub overlap_ratio: f64,
    pub mean_err_px: f64,
    pub std_err_px: f64,
    pub n_frames: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub frame: usize,
    pub dy: f64,
    pub dx: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResidualRow {
    iteration: usize,
    residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PassResidualRow {
    pass: usize,
    sweep: usize,
    residual: f64,
}

/// `state.json` of a reconstruction directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconSummary {
    pub version: u32,
    pub mode: ReconMode,
    pub n_frames: usize,
    pub frame_shape: [usize; 2],
    pub sample_pitch_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_grid: Option<[usize; 2]>,
    pub iterations_run: usize,
    pub final_residual: f64,
    pub drift_confidences: Vec<f64>,
    pub drift_flagged: Vec<usize>,
}

/// Collects the files a stage writes.
struct StageDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl StageDir {
    fn create(dir: &Path, overwrite: bool) -> Result<Self> {
        io::prepare_output_dir(dir, overwrite)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn cfield(&mut self, name: &str, field: &ComplexField) -> Result<()> {
        let p = self.path(name);
        io::write_cfield(p, field)
    }

    fn array(&mut self, name: &str, data: &Array2<Complex64>, pitch: f64) -> Result<()> {
        self.cfield(name, &ComplexField::new(data.clone(), pitch)?)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name);
        io::write_csv(p, rows)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        io::write_json(p, value)
    }

    fn finish(self, stage: &str, cfg: &impl Serialize, start: Instant, metrics: Metrics, warnings: Vec<String>) -> Result<RunReport> {
        let report = RunReport {
            stage: stage.to_string(),
            config: serde_json::to_value(cfg)?,
            wall_time_s: start.elapsed().as_secs_f64(),
            metrics,
            outputs: self.written,
            warnings,
        };
        io::write_json(self.dir.join("report.json"), &report)?;
        Ok(report)
    }
}

fn numbered_name(stem: &str, k: usize) -> String {
    format!("{stem}_{k:04}.cfield")
}

/// Simulated dataset described by `sim`, noise drawn from `seed`.
pub fn build_dataset(sim: &SimulationConfig, seed: u64) -> Result<ScanDataset> {
    let g = sim.geometry.geometry()?;
    let shape = sim.geometry.shape();
    let pitch = g.sample_plane_pitch;
    let probe = sim.probe.build(&g, shape)?;
    let sample = simulate::generate_sample(
        &sim.sample.pattern,
        (sim.sample.size_px, sim.sample.size_px),
        pitch,
        sim.sample.amplitude_range,
        sim.sample.phase_range,
    )?;
    let modulator = sim.modulator.build(shape, pitch)?;
    let step = match (sim.scan.overlap, sim.scan.step_px) {
        (Some(o), _) => simulate::spacing_for_overlap(o, simulate::power_diameter(probe.data(), 0.9)),
        (None, Some(s)) => s,
        (None, None) => return Err(Error::Config("scan needs overlap or step_px".into())),
    };
    let plan = simulate::make_scan_plan(sim.scan.grid, step, sim.scan.jitter_px, sim.scan.seed)?;
    let mut ds =
        simulate::synthesize_dataset(&sample, &probe, &modulator, &plan, &sim.drift, &g, sim.photons, seed)?;
    ds.aperture_diameter = Some(sim.probe.diameter_m);
    if let Some(stride) = sim.scan.subsample_stride {
        ds = ds.subsample_grid(stride)?;
    }
    Ok(ds)
}

fn probe_d90(ds: &ScanDataset) -> Option<f64> {
    ds.truth
        .as_ref()
        .map(|t| simulate::power_diameter(t.probe.data(), 0.9))
}

fn overlap_of(ds: &ScanDataset) -> Result<Option<f64>> {
    match (&ds.truth, probe_d90(ds)) {
        (Some(t), Some(d)) => Ok(Some(simulate::overlap_ratio(&t.plan, d)?.mean)),
        _ => Ok(None),
    }
}

pub fn simulate_stage(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<RunReport> {
    let start = Instant::now();
    let sim = cfg.simulation()?;
    let ds = build_dataset(sim, cfg.seed)?;
    let mut dir = StageDir::create(out, overwrite)?;
    io::write_dataset(out, &ds)?;
    dir.written.extend(["manifest.json", "frames.bin"].map(String::from));
    if ds.truth.is_some() {
        dir.written.extend(
            ["sample", "probe", "modulator"]
                .map(|s| format!("truth/{s}.cfield"))
                .into_iter()
                .chain(["truth/positions.csv".into(), "truth/drift.csv".into()]),
        );
    }
    let metrics = Metrics {
        n_frames: Some(ds.n_frames()),
        overlap_mean: overlap_of(&ds)?,
        ..Metrics::default()
    };
    dir.finish("simulate", cfg, start, metrics, Vec::new())
}

fn modulator_for(ds: &ScanDataset, modulator: Option<&Path>) -> Result<ComplexField> {
    match modulator {
        Some(p) => io::read_cfield(p),
        None => ds
            .truth
            .as_ref()
            .map(|t| t.modulator.clone())
            .ok_or(Error::MissingModulator),
    }
}

/// Run the engine on a dataset directory; in exit-wave mode also measure
/// probe drift and split the waves into a probe and per-frame objects.
pub fn reconstruct_stage(
    cfg: &RunConfig,
    dataset_dir: &Path,
    modulator: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    let ds = io::read_dataset(dataset_dir)?;
    let stage = &cfg.reconstruct;
    let recon = ReconConfig {
        seed: cfg.seed,
        ..stage.engine
    };
    let priors = Priors {
        probe: None,
        modulator: Some(modulator_for(&ds, modulator)?),
    };
    let mut state = engine::init_state(&ds, &recon, &priors)?;
    Engine::new(&ds, recon)?.run(&mut state)?;
    let final_residual = state.last_residual().unwrap_or(f64::NAN);
    let best = state.residuals.iter().copied().fold(f64::INFINITY, f64::min);
    if !final_residual.is_finite() || final_residual > 10.0 * best.max(1e-12) {
        return Err(Error::Divergence(format!(
            "engine residual ended at {final_residual:.3e} after a minimum of {best:.3e}"
        )));
    }

    let n = ds.n_frames();
    let (probe, objects, drifts, confidences, flagged) = match recon.mode {
        ReconMode::Exitwave => {
            let est = if stage.estimate_drift {
                engine::estimate_probe_drift(&state.exit_waves, Some(final_residual), &stage.drift)?
            } else {
                engine::DriftEstimate {
                    drifts: vec![(0.0, 0.0); n],
                    confidences: vec![1.0; n],
                    flagged: Vec::new(),
                }
            };
            let sep = engine::separate_probe_object(
                &state.exit_waves,
                &est.drifts,
                &state.support,
                recon.division_epsilon,
            )?;
            (sep.probe, sep.objects, est.drifts, est.confidences, est.flagged)
        }
        ReconMode::Separated | ReconMode::Calibrate => (
            state.probe.data().clone(),
            engine::masked_objects(&state),
            vec![(0.0, 0.0); n],
            vec![1.0; n],
            Vec::new(),
        ),
    };

    let pitch = ds.geometry.sample_plane_pitch;
    let mut dir = StageDir::create(out, overwrite)?;
    let (h, w) = ds.frame_shape();
    dir.json(
        "state.json",
        &ReconSummary {
            version: CONFIG_VERSION,
            mode: recon.mode,
            n_frames: n,
            frame_shape: [h, w],
            sample_pitch_m: pitch,
            scan_grid: ds.scan_grid.map(|(r, c)| [r, c]),
            iterations_run: state.residuals.len(),
            final_residual,
            drift_confidences: confidences,
            drift_flagged: flagged,
        },
    )?;
    dir.array("probe.cfield", &probe, pitch)?;
    dir.cfield("modulator.cfield", &state.modulator)?;
    dir.array("support.cfield", &state.support.mapv(|s| Complex64::new(s, 0.0)), pitch)?;
    for (k, wave) in state.exit_waves.iter().enumerate() {
        dir.array(&numbered_name("exit_wave", k), wave, pitch)?;
    }
    for (k, o) in objects.iter().enumerate() {
        dir.array(&numbered_name("object", k), o, pitch)?;
    }
    let p = dir.path("drift.csv");
    io::write_positions(p, &drifts)?;
    let rows: Vec<ResidualRow> = state
        .residuals
        .iter()
        .enumerate()
        .map(|(iteration, &residual)| ResidualRow { iteration, residual })
        .collect();
    dir.csv("residuals.csv", &rows)?;

    let mut metrics = Metrics {
        n_frames: Some(n),
        residual: Some(final_residual),
        max_drift_px: Some(drifts.iter().map(|d| d.0.hypot(d.1)).fold(0.0, f64::max)),
        ..Metrics::default()
    };
    if let Some(t) = &ds.truth {
        metrics.drift_rms_error_px = Some(drift_rms_error(&drifts, &t.drift)?);
    }
    dir.finish("reconstruct", cfg, start, metrics, Vec::new())
}

/// RMS per-frame drift error after removing the mean offset.
pub fn drift_rms_error(estimated: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<f64> {
    Ok(register::score_positions(estimated, truth)?.rms)
}

/// Contents of a reconstruction directory.
pub struct ReconOutputs {
    pub summary: ReconSummary,
    pub probe: ComplexField,
    pub modulator: ComplexField,
    pub support: Array2<f64>,
    pub exit_waves: Vec<Array2<Complex64>>,
    pub objects: Vec<Array2<Complex64>>,
    pub drifts: Vec<(f64, f64)>,
}

pub fn read_recon(dir: &Path) -> Result<ReconOutputs> {
    let summary: ReconSummary = io::read_json(dir.join("state.json"))?;
    let n = summary.n_frames;
    let read_all = |stem: &str| -> Result<Vec<Array2<Complex64>>> {
        (0..n)
            .map(|k| io::read_cfield(dir.join(numbered_name(stem, k))).map(ComplexField::into_data))
            .collect()
    };
    let drifts = io::read_positions(dir.join("drift.csv"))?;
    if drifts.len() != n {
        return Err(Error::Format {
            path: dir.join("drift.csv"),
            msg: format!("{} rows for {n} frames", drifts.len()),
        });
    }
    Ok(ReconOutputs {
        probe: io::read_cfield(dir.join("probe.cfield"))?,
        modulator: io::read_cfield(dir.join("modulator.cfield"))?,
        support: io::read_cfield(dir.join("support.cfield"))?.data().mapv(|v| v.re),
        exit_waves: read_all("exit_wave")?,
        objects: read_all("object")?,
        drifts,
        summary,
    })
}

/// Register the objects over the configured edges and solve for positions.
/// A disconnected graph is reported with the reasons edges were rejected.
pub fn recover_positions(
    objects: &[Array2<Complex64>],
    config: &RegisterConfig,
) -> Result<(Vec<(f64, f64)>, Vec<ShiftMeasurement>)> {
    let candidates = register::build_edges(objects.len(), config.strategy)?;
    let edges = register::measure_edges(objects, &candidates, config)?;
    let comps = register::connected_components(objects.len(), &edges);
    if comps.len() > 1 {
        let featureless = edges.iter().filter(|e| !e.accepted && e.confidence == 0.0).count();
        let rejected = edges.iter().filter(|e| !e.accepted).count();
        return Err(Error::Graph {
            components: comps,
            detail: format!(
                "{rejected} of {} candidate edges rejected ({featureless} featureless field, {} below confidence/peak-ratio thresholds)",
                edges.len(),
                rejected - featureless
            ),
        });
    }
    let positions = register::solve_positions(&PositionGraph {
        n_nodes: objects.len(),
        edges: edges.clone(),
    })?;
    Ok((positions, edges))
}

pub fn positions_stage(
    cfg: &RunConfig,
    recon_dir: &Path,
    truth: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    let recon = read_recon(recon_dir)?;
    let n = recon.summary.n_frames;
    let grid = recon.summary.scan_grid.map(|g| (g[0], g[1]));
    let rc = cfg.positions.register_config(n, grid);
    let mut dir = StageDir::create(out, overwrite)?;
    let result = recover_positions(&recon.objects, &rc);
    let (positions, edges) = match result {
        Ok(v) => v,
        Err(e) => {
            // keep the edge table for diagnosis
            if let Ok(c) = register::build_edges(n, rc.strategy) {
                if let Ok(all) = register::measure_edges(&recon.objects, &c, &rc) {
                    let rows: Vec<EdgeRow> = all.iter().map(EdgeRow::from).collect();
                    dir.csv("edges.csv", &rows)?;
                }
            }
            return Err(e);
        }
    };
    let p = dir.path("positions.csv");
    io::write_positions(p, &positions)?;
    let rows: Vec<EdgeRow> = edges.iter().map(EdgeRow::from).collect();
    dir.csv("edges.csv", &rows)?;
    let mut metrics = Metrics {
        n_frames: Some(n),
        accepted_edges: Some(edges.iter().filter(|e| e.accepted).count()),
        ..Metrics::default()
    };
    if let Some(t) = truth {
        let ds = io::read_dataset(t)?;
        if let Some(truth) = &ds.truth {
            let s = register::score_positions(&positions, &truth.plan.positions)?;
            metrics.mean_position_error_px = Some(s.mean);
            metrics.max_position_error_px = Some(s.max);
        }
    }
    dir.finish("positions", cfg, start, metrics, Vec::new())
}

/// Stitch, refine with ePIE and optionally run the second pass.
pub fn assemble_stage(
    cfg: &RunConfig,
    dataset_dir: &Path,
    recon_dir: &Path,
    positions_file: &Path,
    out: &Path,
    overwrite: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    let ds = io::read_dataset(dataset_dir)?;
    let recon = read_recon(recon_dir)?;
    let positions = io::read_positions(positions_file)?;
    let n = ds.n_frames();
    if recon.summary.n_frames != n || positions.len() != n {
        return Err(Error::InvalidArgument(format!(
            "dataset has {n} frames, reconstruction {}, positions {}",
            recon.summary.n_frames,
            positions.len()
        )));
    }
    let pitch = ds.geometry.sample_plane_pitch;
    let ac = &cfg.assemble;
    let epie = EpieConfig {
        seed: cfg.seed,
        ..ac.epie
    };
    let mut warnings = Vec::new();

    let refine = |objects: &[Array2<Complex64>], pos: &[(f64, f64)], probe: &ComplexField| {
        let aligned = assemble::align_object_phases(objects, pos)?;
        let initial = assemble::stitch_initial(&aligned, pos, pitch)?;
        assemble::epie_refine(&ds, pos, Some(&recon.drifts), probe, &recon.modulator, &initial, &epie)
    };
    let probe = ComplexField::new(recon.probe.data().clone(), pitch)?;
    let first = refine(&recon.objects, &positions, &probe)?;
    let mut passes = vec![first.residuals.clone()];
    let mut final_positions = positions.clone();
    let mut final_edges = None;
    let mut result = first;
    if ac.second_pass {
        let objects = engine::objects_from_probe(
            &recon.exit_waves,
            &recon.drifts,
            result.probe.data(),
            &recon.support,
            ac.division_epsilon,
        )?;
        let grid = recon.summary.scan_grid.map(|g| (g[0], g[1]));
        match recover_positions(&objects, &cfg.positions.register_config(n, grid)) {
            Ok((pos2, edges2)) => {
                let second = refine(&objects, &pos2, &result.probe)?;
                passes.push(second.residuals.clone());
                final_positions = pos2;
                final_edges = Some(edges2);
                result = second;
            }
            Err(e @ (Error::Graph { .. } | Error::Disconnected(_))) => {
                warnings.push(format!("second pass skipped: {e}"));
            }
            Err(e) => return Err(e),
        }
    }

    let mut dir = StageDir::create(out, overwrite)?;
    let canvas = &result.object.canvas;
    dir.cfield("object_full.cfield", canvas)?;
    dir.cfield("probe.cfield", &result.probe)?;
    let p = dir.path("amplitude.pgm");
    io::write_pgm16(p, &io::amplitude_image(canvas.data()))?;
    let p = dir.path("phase.pgm");
    io::write_pgm16(p, &io::phase_image(canvas.data()))?;
    let p = dir.path("positions.csv");
    io::write_positions(p, &final_positions)?;
    if let Some(edges) = &final_edges {
        let rows: Vec<EdgeRow> = edges.iter().map(EdgeRow::from).collect();
        dir.csv("edges.csv", &rows)?;
    }
    let rows: Vec<PassResidualRow> = passes
        .iter()
        .enumerate()
        .flat_map(|(pass, r)| {
            r.iter().enumerate().map(move |(sweep, &residual)| PassResidualRow {
                pass,
                sweep,
                residual,
            })
        })
        .collect();
    dir.csv("residuals.csv", &rows)?;

    let mut metrics = Metrics {
        n_frames: Some(n),
        epie_residual: result.residuals.last().copied(),
        ..Metrics::default()
    };
    if let Some(t) = &ds.truth {
        let s = register::score_positions(&final_positions, &t.plan.positions)?;
        metrics.mean_position_error_px = Some(s.mean);
        metrics.max_position_error_px = Some(s.max);
        metrics.nrmse = Some(stitched_nrmse(&result.object, &final_positions, &t.plan.positions, t.sample.data())?);
    }
    dir.finish("assemble", cfg, start, metrics, warnings)
}

fn stitched_nrmse(
    object: &StitchedObject,
    positions: &[(f64, f64)],
    truth: &[(f64, f64)],
    sample: &Array2<Complex64>,
) -> Result<f64> {
    assemble::object_nrmse(object, positions, truth, sample, SCANNED_WEIGHT)
}

/// Where one run's artifacts live for evaluation.
#[derive(Debug, Clone)]
pub struct EvaluateInput {
    pub positions: PathBuf,
    /// Dataset directory carrying the ground truth.
    pub truth: PathBuf,
    /// Reports whose metrics (residual, NRMSE) are carried over.
    pub reports: Vec<PathBuf>,
}

impl EvaluateInput {
    /// Inputs of a `pipeline` output directory.
    pub fn from_run_dir(run: &Path) -> Self {
        let assembled = run.join("assemble").join("positions.csv");
        let positions = if assembled.exists() {
            assembled
        } else {
            run.join("positions").join("positions.csv")
        };
        Self {
            positions,
            truth: run.join("dataset"),
            reports: ["recon", "assemble"]
                .iter()
                .map(|s| run.join(s).join("report.json"))
                .filter(|p| p.exists())
                .collect(),
        }
    }
}

struct Evaluated {
    row: SweepRow,
    errors: Vec<ErrorRow>,
    metrics: Metrics,
}

fn evaluate_one(input: &EvaluateInput) -> Result<Evaluated> {
    let ds = io::read_dataset(&input.truth)?;
    let truth = ds.truth.as_ref().ok_or_else(|| {
        Error::Config(format!("{} has no ground truth to evaluate against", input.truth.display()))
    })?;
    let positions = io::read_positions(&input.positions)?;
    let score = register::score_positions(&positions, &truth.plan.positions)?;
    let errors: Vec<ErrorRow> = score
        .errors
        .iter()
        .enumerate()
        .map(|(frame, e)| ErrorRow {
            frame,
            dy: e.0,
            dx: e.1,
            magnitude: e.0.hypot(e.1),
        })
        .collect();
    let mut metrics = Metrics {
        n_frames: Some(positions.len()),
        overlap_mean: overlap_of(&ds)?,
        mean_position_error_px: Some(score.mean),
        max_position_error_px: Some(score.max),
        ..Metrics::default()
    };
    for r in &input.reports {
        let rep: RunReport = io::read_json(r)?;
        metrics.residual = metrics.residual.or(rep.metrics.residual);
        metrics.epie_residual = metrics.epie_residual.or(rep.metrics.epie_residual);
        metrics.nrmse = metrics.nrmse.or(rep.metrics.nrmse);
        metrics.drift_rms_error_px = metrics.drift_rms_error_px.or(rep.metrics.drift_rms_error_px);
    }
    let final_residual = metrics.epie_residual.or(metrics.residual);
    let row = SweepRow {
        overlap_ratio: metrics.overlap_mean.unwrap_or(f64::NAN),
        mean_err_px: score.mean,
        std_err_px: score.std,
        n_frames: positions.len(),
        converged: final_residual.is_some_and(|r| r.is_finite() && r < CONVERGED_RESIDUAL),
    };
    Ok(Evaluated { row, errors, metrics })
}

/// Position errors per frame (`errors.csv`, per run when several) and one
/// `sweep.csv` row per run, sorted by overlap.
pub fn evaluate_stage(inputs: &[EvaluateInput], out: &Path, overwrite: bool) -> Result<RunReport> {
    let start = Instant::now();
    if inputs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let evaluated: Vec<Evaluated> = inputs.iter().map(evaluate_one).collect::<Result<_>>()?;
    let mut dir = StageDir::create(out, overwrite)?;
    if evaluated.len() == 1 {
        dir.csv("errors.csv", &evaluated[0].errors)?;
    } else {
        for (k, e) in evaluated.iter().enumerate() {
            dir.csv(&format!("errors_{k:02}.csv"), &e.errors)?;
        }
    }
    let mut rows: Vec<SweepRow> = evaluated.iter().map(|e| e.row.clone()).collect();
    rows.sort_by(|a, b| a.overlap_ratio.total_cmp(&b.overlap_ratio));
    dir.csv("sweep.csv", &rows)?;
    let mut metrics = if evaluated.len() == 1 {
        evaluated[0].metrics.clone()
    } else {
        Metrics::default()
    };
    if rows.len() > 1 {
        let x: Vec<f64> = rows.iter().map(|r| r.overlap_ratio).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.mean_err_px).collect();
        metrics.spearman = Some(spearman(&x, &y));
    }
    let echo: Vec<String> = inputs
        .iter()
        .map(|i| i.positions.display().to_string())
        .collect();
    dir.finish("evaluate", &echo, start, metrics, Vec::new())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn run_single(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<RunReport> {
    let start = Instant::now();
    let top = StageDir::create(out, overwrite)?;
    let (dataset, recon, positions, assembled, evaluation) = (
        out.join("dataset"),
        out.join("recon"),
        out.join("positions"),
        out.join("assemble"),
        out.join("evaluate"),
    );
    simulate_stage(cfg, &dataset, overwrite)?;
    let r = reconstruct_stage(cfg, &dataset, None, &recon, overwrite)?;
    positions_stage(cfg, &recon, Some(&dataset), &positions, overwrite)?;
    let a = assemble_stage(cfg, &dataset, &recon, &positions.join("positions.csv"), &assembled, overwrite)?;
    let e = evaluate_stage(&[EvaluateInput::from_run_dir(out)], &evaluation, overwrite)?;
    let metrics = Metrics {
        residual: r.metrics.residual,
        drift_rms_error_px: r.metrics.drift_rms_error_px,
        max_drift_px: r.metrics.max_drift_px,
        ..e.metrics
    };
    let mut warnings = a.warnings;
    warnings.extend(r.warnings);
    top.finish("pipeline", cfg, start, metrics, warnings)
}

/// Chain every stage into `out`; with a `sweep` section, once per overlap
/// into `out/overlap_XX` plus a combined `sweep.csv`.
pub fn pipeline(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<RunReport> {
    let sim = cfg.simulation()?;
    let Some(sweep) = &cfg.sweep else {
        return run_single(cfg, out, overwrite);
    };
    let start = Instant::now();
    let mut top = StageDir::create(out, overwrite)?;
    let mut runs = Vec::new();
    for &ov in &sweep.overlaps {
        let mut c = cfg.clone();
        c.sweep = None;
        let mut s = sim.clone();
        s.scan.overlap = Some(ov);
        s.scan.step_px = None;
        c.simulation = Some(s);
        let name = format!("overlap_{:02}", (ov * 100.0).round() as u32);
        let run = out.join(&name);
        run_single(&c, &run, overwrite)?;
        runs.push(EvaluateInput::from_run_dir(&run));
        top.written.push(name);
    }
    let e = evaluate_stage(&runs, &out.join("evaluate"), overwrite)?;
    fs::copy(out.join("evaluate").join("sweep.csv"), top.path("sweep.csv"))
        .map_err(|err| Error::Io {
            path: out.join("sweep.csv"),
            source: err,
        })?;
    top.finish("pipeline", cfg, start, e.metrics, Vec::new())
}

/// Diffuser, translations and dataset described by a calibration setup.
pub fn build_calibration_dataset(setup: &CalibrationSetup, seed: u64) -> Result<ScanDataset> {
    let g = setup.geometry.geometry()?;
    let shape = setup.geometry.shape();
    let pitch = g.sample_plane_pitch;
    let probe = setup.probe.build(&g, shape)?;
    let d = &setup.diffuser;
    let diffuser = calibrate::generate_diffuser(
        (d.size_px, d.size_px),
        pitch,
        d.correlation_px,
        d.phase_std_rad,
        d.seed,
    )?;
    let modulator = setup.modulator.build(shape, pitch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.translation_seed);
    let r = setup.range_px;
    // whole pixels: the per-frame objects then factor exactly against the probe
    let translations: Vec<(f64, f64)> = (0..setup.translations)
        .map(|_| {
            (
                rng.gen_range(-r..=r).round(),
                rng.gen_range(-r..=r).round(),
            )
        })
        .collect();
    let plan = CalibrationPlan {
        translations,
        probe_prior: probe.clone(),
        grating_period_px: grating_period(&setup.modulator),
    };
    let mut ds = calibrate::synthesize_calibration_dataset(
        &probe,
        &diffuser,
        &modulator,
        &plan,
        &g,
        setup.photons,
        seed,
    )?;
    ds.aperture_diameter = Some(setup.probe.diameter_m);
    Ok(ds)
}

fn grating_period(m: &ModulatorConfig) -> Option<f64> {
    match m.pattern {
        ModulatorKind::Grating { period_px } => Some(period_px),
        _ => None,
    }
}

/// Calibrate a modulator from a diffuser-scan dataset, or from one simulated
/// per the config's `calibration` section when `dataset_dir` is absent (it
/// is then written to `out/dataset`).
pub fn calibrate_stage(
    cfg: &RunConfig,
    dataset_dir: Option<&Path>,
    probe_prior: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> Result<RunReport> {
    let start = Instant::now();
    let setup = cfg.calibration.as_ref();
    let mut dir = StageDir::create(out, overwrite)?;
    let ds = match dataset_dir {
        Some(d) => io::read_dataset(d)?,
        None => {
            let setup = setup.ok_or_else(|| {
                Error::Config("calibrate needs --dataset or a `calibration` section".into())
            })?;
            let ds = build_calibration_dataset(setup, cfg.seed)?;
            io::write_dataset(&out.join("dataset"), &ds)?;
            dir.written.push("dataset/".into());
            ds
        }
    };
    let probe = match probe_prior {
        Some(p) => io::read_cfield(p)?,
        None => ds
            .truth
            .as_ref()
            .map(|t| t.probe.clone())
            .ok_or_else(|| Error::Config("calibrate needs --probe (no probe in the dataset)".into()))?,
    };
    let engine_cfg = CalibrationConfig {
        seed: cfg.seed,
        ..setup.map(|s| s.engine).unwrap_or_default()
    };
    let result = calibrate::run_calibration(&ds, &probe, &engine_cfg)?;
    let pitch = ds.geometry.sample_plane_pitch;
    dir.cfield("modulator.cfield", &result.modulator)?;
    for (k, d) in result.diffusers.iter().enumerate() {
        dir.array(&numbered_name("diffuser", k), d, pitch)?;
    }
    let rows: Vec<ResidualRow> = result
        .residuals
        .iter()
        .enumerate()
        .map(|(iteration, &residual)| ResidualRow { iteration, residual })
        .collect();
    dir.csv("residuals.csv", &rows)?;

    let fraction = setup.map_or(default_region_fraction(), |s| s.region_fraction);
    let region = calibrate::illuminated_region(&result.state, &ds.geometry, fraction)?;
    let mut report = CalibrationReport {
        rho: None,
        phase_rms_rad: None,
        grating_period_px: None,
        grating_period_truth_px: None,
        residuals: result.residuals.clone(),
        warnings: result.warnings.clone(),
    };
    if let Some(t) = &ds.truth {
        let score = calibrate::score_modulator(result.modulator.data(), t.modulator.data(), &region)?;
        report.rho = Some(score.rho);
        report.phase_rms_rad = Some(score.phase_rms);
        report.grating_period_truth_px = match setup.and_then(|s| grating_period(&s.modulator)) {
            Some(p) => Some(p),
            None => calibrate::estimate_grating_period(t.modulator.data(), &region).ok(),
        };
    }
    if report.grating_period_truth_px.is_some() {
        report.grating_period_px = calibrate::estimate_grating_period(result.modulator.data(), &region).ok();
    }
    dir.json("calibration_report.json", &report)?;
    let metrics = Metrics {
        n_frames: Some(ds.n_frames()),
        residual: result.residuals.last().copied(),
        rho: report.rho,
        phase_rms_rad: report.phase_rms_rad,
        grating_period_px: report.grating_period_px,
        ..Metrics::default()
    };
    dir.finish("calibrate", cfg, start, metrics, result.warnings)
}
