//! Modulator calibration: a known coarse probe illuminates a diffuser that
//! is translated between exposures while the modulator stays put. The
//! changing illumination lets the engine learn the modulator with the
//! diffuser patches as free per-frame objects.


use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::engine::{init_state, Engine, Priors, ReconConfig, ReconMode, ReconState};
use crate::error::{Error, Result};
use crate::field::{embed_center_array, ComplexField, Geometry, NearPropagator};
use crate::simulate::{smooth_noise, synthesize_dataset, DriftModel, ScanDataset, ScanPlan};

/// Final residual above which a calibration is reported as doubtful.
pub const RESIDUAL_WARNING: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct CalibrationPlan {
    /// Lateral diffuser translations, pixels.
    pub translations: Vec<(f64, f64)>,
    /// Coarse probe, held fixed during calibration.
    pub probe_prior: ComplexField,
    /// Grating period of the true modulator, when known, for scoring.
    pub grating_period_px: Option<f64>,
}

impl CalibrationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.translations.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "calibration needs at least 3 diffuser positions, got {}",
                self.translations.len()
            )));
        }
        if self.probe_prior.power() <= 0.0 {
            return Err(Error::InvalidArgument("probe prior is zero".into()));
        }
        if let Some(p) = self.grating_period_px {
            if !(p >= 2.0 && p.is_finite()) {
                return Err(Error::InvalidArgument(format!("grating period {p} px")));
            }
        }
        Ok(())
    }
}

/// Phase-only random diffuser: Gaussian-correlated phase with standard
/// deviation `phase_std` radians.
pub fn generate_diffuser(
    shape: (usize, usize),
    pitch: f64,
    correlation_px: f64,
    phase_std: f64,
    seed: u64,
) -> Result<ComplexField> {
    if !(correlation_px > 0.0 && phase_std >= 0.0) {
        return Err(Error::InvalidArgument(
            "diffuser correlation must be > 0 and phase_std ≥ 0".into(),
        ));
    }
    let phase = smooth_noise(shape, correlation_px, seed);
    Ok(
        ComplexField::new(phase.mapv(|p| Complex64::from_polar(1.0, phase_std * p)), pitch)?
            .with_label("diffuser"),
    )
}

/// Frames `|far(M · near(P · D_k))|²` for each diffuser translation; the
/// diffuser takes the sample's place and no overlap is required.
pub fn synthesize_calibration_dataset(
    probe: &ComplexField,
    diffuser: &ComplexField,
    modulator: &ComplexField,
    plan: &CalibrationPlan,
    geometry: &Geometry,
    photons: Option<f64>,
    seed: u64,
) -> Result<ScanDataset> {
    plan.validate()?;
    let scan = ScanPlan::new(plan.translations.clone())?;
    synthesize_dataset(diffuser, probe, modulator, &scan, &DriftModel::none(), geometry, photons, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub iterations: usize,
    pub beta_object: f64,
    pub beta_modulator: f64,
    pub phase_only_modulator: bool,
    pub division_epsilon: f64,
    /// Sweeps at the end during which the probe is refined too (0 keeps it
    /// fixed throughout).
    pub probe_refine_sweeps: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let base = ReconConfig::for_mode(ReconMode::Calibrate);
        // The free per-frame objects otherwise soak up the modulator's
        // effect faster than the averaged update can build it; a slow object
        // step and the largest stable modulator step keep the two balanced.
        Self {
            iterations: 300,
            beta_object: 0.3,
            beta_modulator: 2.0,
            phase_only_modulator: true,
            division_epsilon: base.division_epsilon,
            probe_refine_sweeps: 0,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    fn recon(&self) -> ReconConfig {
        ReconConfig {
            iterations: self.iterations - self.probe_refine_sweeps.min(self.iterations),
            beta_object: self.beta_object,
            beta_modulator: self.beta_modulator,
            phase_only_modulator: self.phase_only_modulator,
            division_epsilon: self.division_epsilon,
            seed: self.seed,
            ..ReconConfig::for_mode(ReconMode::Calibrate)
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub modulator: ComplexField,
    /// Recovered diffuser patch per frame.
    pub diffusers: Vec<Array2<Complex64>>,
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
    /// Final engine state, for inspection.
    pub state: ReconState,
}

/// Learn the modulator from unity with the probe fixed to `probe_prior`.
pub fn run_calibration(
    dataset: &ScanDataset,
    probe_prior: &ComplexField,
    config: &CalibrationConfig,
) -> Result<CalibrationResult> {
    run_calibration_from(dataset, probe_prior, None, config)
}

/// As [`run_calibration`], optionally starting from a modulator estimate.
pub fn run_calibration_from(
    dataset: &ScanDataset,
    probe_prior: &ComplexField,
    modulator_start: Option<&ComplexField>,
    config: &CalibrationConfig,
) -> Result<CalibrationResult> {
    if config.iterations == 0 {
        return Err(Error::Config("iterations must be ≥ 1".into()));
    }
    if probe_prior.power() <= 0.0 {
        return Err(Error::InvalidArgument("probe prior is zero".into()));
    }
    let mut recon = config.recon();
    let priors = Priors {
        probe: Some(probe_prior.clone()),
        modulator: Some(match modulator_start {
            Some(m) => m.clone(),
            None => ComplexField::ones(dataset.frame_shape(), dataset.geometry.sample_plane_pitch)?,
        }),
    };
    // the support plays no role with per-frame objects; keep the wave whole
    recon.support.margin_fraction = 0.0;
    let mut state = init_state(dataset, &recon, &priors)?;
    if recon.iterations > 0 {
        Engine::new(dataset, recon)?.run(&mut state)?;
    }
    if config.probe_refine_sweeps > 0 {
        let late = ReconConfig {
            mode: ReconMode::Separated,
            iterations: config.probe_refine_sweeps.min(config.iterations),
            update_probe: true,
            update_modulator: true,
            ..recon
        };
        Engine::new(dataset, late)?.run(&mut state)?;
    }
    let mut warnings = Vec::new();
    if let Some(r) = state.last_residual() {
        if r > RESIDUAL_WARNING {
            warnings.push(format!(
                "calibration residual {r:.3e} exceeds {RESIDUAL_WARNING}; the modulator estimate is likely wrong"
            ));
        }
    }
    Ok(CalibrationResult {
        modulator: state.modulator.clone(),
        diffusers: state.objects.clone(),
        residuals: state.residuals.clone(),
        warnings,
        state,
    })
}

/// Pixels of the modulator plane reached by at least `fraction` of the peak
/// mean intensity of the modelled incident waves `near(P · D_k)`.
pub fn illuminated_region(
    state: &ReconState,
    geometry: &Geometry,
    fraction: f64,
) -> Result<Array2<bool>> {
    let shape = state.probe.shape();
    let near = NearPropagator::new(
        shape,
        geometry.sample_plane_pitch,
        geometry.z_sample_to_modulator,
        geometry.wavelength,
    )?;
    let mut mean = Array2::<f64>::zeros(shape);
    for o in &state.objects {
        let mut w = state.probe.data() * o;
        near.forward(&mut w);
        Zip::from(&mut mean).and(&w).for_each(|m, v| *m += v.norm_sqr());
    }
    let peak = mean.iter().copied().fold(0.0, f64::max);
    Ok(mean.mapv(|v| peak > 0.0 && v >= fraction * peak))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulatorScore {
    /// `|⟨truth, recovered⟩| / (‖truth‖‖recovered‖)` over the region.
    pub rho: f64,
    /// RMS phase difference after removing the phase of `ρ`, radians.
    pub phase_rms: f64,
}

pub fn score_modulator(
    recovered: &Array2<Complex64>,
    truth: &Array2<Complex64>,
    region: &Array2<bool>,
) -> Result<ModulatorScore> {
    if recovered.dim() != truth.dim() || truth.dim() != region.dim() {
        return Err(Error::Shape("score_modulator inputs differ in shape".into()));
    }
    let mut c = Complex64::new(0.0, 0.0);
    let (mut nt, mut nr, mut count) = (0.0, 0.0, 0usize);
    Zip::from(recovered).and(truth).and(region).for_each(|r, t, &m| {
        if m {
            c += t.conj() * r;
            nt += t.norm_sqr();
            nr += r.norm_sqr();
            count += 1;
        }
    });
    if count == 0 {
        return Err(Error::InvalidArgument("empty region".into()));
    }
    if nt == 0.0 || nr == 0.0 {
        return Err(Error::InvalidArgument("modulator is zero over the region".into()));
    }
    let rho = c.norm() / (nt * nr).sqrt();
    let gauge = Complex64::from_polar(1.0, -c.arg());
    let mut sq = 0.0;
    Zip::from(recovered).and(truth).and(region).for_each(|r, t, &m| {
        if m {
            sq += (r * gauge * t.conj()).arg().powi(2);
        }
    });
    Ok(ModulatorScore {
        rho,
        phase_rms: (sq / count as f64).sqrt(),
    })
}

/// Zero-padding factor of the period search; sets its frequency resolution.
const PERIOD_PAD: usize = 8;

/// Dominant period, pixels, of the modulator phase over `region`: location of
/// the strongest non-DC peak of the zero-padded phase spectrum.
pub fn estimate_grating_period(modulator: &Array2<Complex64>, region: &Array2<bool>) -> Result<f64> {
    if modulator.dim() != region.dim() {
        return Err(Error::Shape("modulator and region differ in shape".into()));
    }
    let count = region.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("empty region".into()));
    }
    // reference the phase to its circular mean so a global phase cannot wrap it
    let mean: Complex64 = Zip::from(modulator)
        .and(region)
        .fold(Complex64::new(0.0, 0.0), |acc, v, &m| if m { acc + v } else { acc });
    let gauge = if mean.norm() > 0.0 { mean.conj() / mean.norm() } else { Complex64::new(1.0, 0.0) };
    let mut phase = Zip::from(modulator)
        .and(region)
        .map_collect(|v, &m| if m { (v * gauge).arg() } else { 0.0 });
    let avg = phase.sum() / count as f64;
    Zip::from(&mut phase).and(region).for_each(|p, &m| {
        if m {
            *p -= avg
        }
    });
    let (h, w) = phase.dim();
    let big = (h * PERIOD_PAD, w * PERIOD_PAD);
    let mut spec = embed_center_array(&phase.mapv(|p| Complex64::new(p, 0.0)), big)?;
    crate::fft::fft2(&mut spec);
    let (bh, bw) = big;
    // skip the central lobe of the DC term (its width is set by the region)
    let guard = 2.0 * PERIOD_PAD as f64;
    let mut best = (0.0, 0.0, 0.0);
    for ((i, j), v) in spec.indexed_iter() {
        let fy = crate::fft::freq_index(i, bh);
        let fx = crate::fft::freq_index(j, bw);
        if fy.hypot(fx) < guard {
            continue;
        }
        let p = v.norm_sqr();
        if p > best.0 {
            best = (p, fy / bh as f64, fx / bw as f64);
        }
    }
    let f = best.1.hypot(best.2);
    if f == 0.0 {
        return Err(Error::Featureless);
    }
    Ok(1.0 / f)
}

/// Relative error of `estimate` against `truth`.
pub fn period_error(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth
}

/// Second-moment radius, pixels, of an intensity pattern about its centroid.
pub fn second_moment_radius(intensity: &Array2<f64>) -> f64 {
    let total = intensity.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (mut my, mut mx) = (0.0, 0.0);
    for ((i, j), &v) in intensity.indexed_iter() {
        my += v * i as f64;
        mx += v * j as f64;
    }
    let (my, mx) = (my / total, mx / total);
    let m2: f64 = intensity
        .indexed_iter()
        .map(|((i, j), &v)| v * ((i as f64 - my).powi(2) + (j as f64 - mx).powi(2)))
        .sum();
    (m2 / total).sqrt()
}

/// Largest Pearson correlation between any two distinct frames.
pub fn max_cross_frame_correlation(frames: &[Array2<f64>]) -> f64 {
    let normalized: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let n = f.len() as f64;
            let mean = f.sum() / n;
            let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt();
            f.iter()
                .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
                .collect()
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for a in 0..normalized.len() {
        for b in a + 1..normalized.len() {
            let c: f64 = normalized[a].iter().zip(&normalized[b]).map(|(x, y)| x * y).sum();
            worst = worst.max(c);
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rho: Option<f64>,
    pub phase_rms_rad: Option<f64>,
    pub grating_period_px: Option<f64>,
    pub grating_period_truth_px: Option<f64>,
    pub residuals: Vec<f64>,
    pub warnings: Vec<String>,
}
