//! Parallel per-frame phase retrieval through the modulator model.
//!
//! Every frame is reconstructed on its own; only the probe and modulator are
//! shared, and those are updated once per sweep from the arithmetic mean of
//! the per-frame ePIE-style increments. Three modes:
//!
//! * `separated`: exit wave = probe × object, objects free per frame.
//! * `exitwave`: the exit wave itself is the unknown, held to the support.
//!   Tolerates an unstable probe; drift is measured afterwards.
//! * `calibrate`: like `separated` with the probe frozen and the modulator
//!   learned (see [`crate::calibrate`]).

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    far_forward, far_inverse, fourier_shift_array, ComplexField, NearPropagator,
};
use crate::mask;
use crate::register::{self, RegisterOptions};
use crate::simulate::{generate_probe, power_diameter, ProbeKind, ScanDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    Separated,
    Exitwave,
    Calibrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupportConfig {
    /// Explicit radius; otherwise derived from the initial probe.
    pub radius_px: Option<f64>,
    pub margin_fraction: f64,
    /// Fraction of the wave kept outside the support, in `[0, 1)`.
    pub outside_feedback: f64,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self {
            radius_px: None,
            margin_fraction: 0.15,
            outside_feedback: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub mode: ReconMode,
    pub iterations: usize,
    pub beta_object: f64,
    pub beta_probe: f64,
    pub beta_modulator: f64,
    pub support: SupportConfig,
    /// Relative floor for divisions by `|M|²` and `|P|²`.
    pub division_epsilon: f64,
    pub update_modulator: bool,
    pub update_probe: bool,
    /// Project the modulator back to unit amplitude after each update.
    pub phase_only_modulator: bool,
    /// Stop once the residual improves by less than 1e-6 over 20 sweeps.
    pub early_stop: bool,
    /// Aperture diameter for the initial probe when the dataset lacks one.
    pub probe_diameter_m: Option<f64>,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self::for_mode(ReconMode::Exitwave)
    }
}

impl ReconConfig {
    pub fn for_mode(mode: ReconMode) -> Self {
        Self {
            mode,
            iterations: 300,
            beta_object: 0.9,
            beta_probe: 0.9,
            beta_modulator: 0.9,
            support: SupportConfig::default(),
            division_epsilon: 1e-3,
            update_modulator: mode == ReconMode::Calibrate,
            update_probe: mode == ReconMode::Separated,
            phase_only_modulator: true,
            early_stop: false,
            probe_diameter_m: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be ≥ 1".into());
        }
        for (name, b) in [
            ("beta_object", self.beta_object),
            ("beta_probe", self.beta_probe),
            ("beta_modulator", self.beta_modulator),
        ] {
            if !(b > 0.0 && b <= 2.0) {
                return bad(format!("{name} = {b} outside (0, 2]"));
            }
        }
        if !(0.0..1.0).contains(&self.support.outside_feedback) {
            return bad(format!(
                "outside_feedback = {} outside [0, 1)",
                self.support.outside_feedback
            ));
        }
        if !(self.support.margin_fraction >= 0.0) {
            return bad("margin_fraction must be ≥ 0".into());
        }
        if !(self.division_epsilon > 0.0) {
            return bad("division_epsilon must be > 0".into());
        }
        if self.mode == ReconMode::Calibrate && self.update_probe {
            return bad("calibrate mode requires update_probe = false".into());
        }
        Ok(())
    }
}

/// Externally supplied starting values.
#[derive(Debug, Clone, Default)]
pub struct Priors {
    pub probe: Option<ComplexField>,
    pub modulator: Option<ComplexField>,
}

#[derive(Debug, Clone)]
pub struct ReconState {
    /// Sample-plane exit waves (exitwave mode); `P·O_n` otherwise.
    pub exit_waves: Vec<Array2<Complex64>>,
    /// Per-frame objects (separated and calibrate modes).
    pub objects: Vec<Array2<Complex64>>,
    pub probe: ComplexField,
    pub modulator: ComplexField,
    /// 1 inside the support, 0 outside.
    pub support: Array2<f64>,
    pub residuals: Vec<f64>,
}

impl ReconState {
    pub fn n_frames(&self) -> usize {
        self.exit_waves.len()
    }

    pub fn last_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }
}

/// Radius of the uniform disc whose 90 %-power radius matches the probe's:
/// the geometric radius for a hard aperture.
pub fn probe_edge_radius(probe: &Array2<Complex64>) -> f64 {
    power_diameter(probe, 0.9) / 2.0 / 0.9_f64.sqrt()
}

pub fn support_mask(shape: (usize, usize), probe: &Array2<Complex64>, cfg: &SupportConfig) -> Array2<f64> {
    let radius = cfg
        .radius_px
        .unwrap_or_else(|| probe_edge_radius(probe) * (1.0 + cfg.margin_fraction));
    mask::centered_disk(shape, radius).mapv(|b| if b { 1.0 } else { 0.0 })
}

pub fn init_state(dataset: &ScanDataset, config: &ReconConfig, priors: &Priors) -> Result<ReconState> {
    dataset.validate()?;
    config.validate()?;
    let shape = dataset.frame_shape();
    let g = &dataset.geometry;

    let probe = match &priors.probe {
        Some(p) => {
            if p.shape() != shape {
                return Err(Error::Shape(format!(
                    "probe prior {:?} does not match frames {shape:?}",
                    p.shape()
                )));
            }
            p.clone()
        }
        None => {
            let d = config
                .probe_diameter_m
                .or(dataset.aperture_diameter)
                .ok_or_else(|| {
                    Error::Config(
                        "initial probe needs probe_diameter_m or an aperture diameter in the manifest"
                            .into(),
                    )
                })?;
            let mut p = generate_probe(g, shape, ProbeKind::Aperture, d, 0.0)?;
            let mean_power =
                dataset.frames.iter().map(|f| f.sum()).sum::<f64>() / dataset.n_frames() as f64;
            let s = mean_power.sqrt();
            p.data_mut().mapv_inplace(|v| v * s);
            p
        }
    };

    let modulator = match (&priors.modulator, config.mode) {
        (Some(m), _) => m.clone(),
        (None, ReconMode::Calibrate) => ComplexField::ones(shape, g.sample_plane_pitch)?,
        (None, _) => match &dataset.truth {
            Some(t) => t.modulator.clone(),
            None => return Err(Error::MissingModulator),
        },
    };
    if modulator.shape() != shape {
        return Err(Error::Shape("modulator shape differs from frames".into()));
    }

    let support = support_mask(shape, probe.data(), &config.support);
    let n = dataset.n_frames();
    let objects = vec![Array2::from_elem(shape, Complex64::new(1.0, 0.0)); n];
    let wave = probe.data() * &support.mapv(|s| Complex64::new(s, 0.0));
    Ok(ReconState {
        exit_waves: vec![wave; n],
        objects,
        probe,
        modulator,
        support,
        residuals: Vec::new(),
    })
}

/// Replace the modulus of `wave` by `sqrt(intensity)` on valid pixels.
/// Zero-amplitude pixels take `sqrt(I)` with zero phase.
pub fn modulus_project(
    wave: &Array2<Complex64>,
    intensity: &Array2<f64>,
    valid: Option<&Array2<bool>>,
) -> Result<Array2<Complex64>> {
    if wave.dim() != intensity.dim() || valid.is_some_and(|v| v.dim() != wave.dim()) {
        return Err(Error::Shape("modulus projection inputs differ in shape".into()));
    }
    if intensity.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative measured intensity".into()));
    }
    let mut out = wave.clone();
    project_inplace(&mut out, intensity, valid);
    Ok(out)
}

fn project_inplace(wave: &mut Array2<Complex64>, intensity: &Array2<f64>, valid: Option<&Array2<bool>>) {
    let apply = |w: &mut Complex64, i: f64| {
        let amp = w.norm();
        let target = i.sqrt();
        *w = if amp < 1e-15 {
            Complex64::new(target, 0.0)
        } else {
            *w * (target / amp)
        };
    };
    match valid {
        None => Zip::from(wave).and(intensity).for_each(|w, &i| apply(w, i)),
        Some(v) => Zip::from(wave).and(intensity).and(v).for_each(|w, &i, &ok| {
            if ok {
                apply(w, i)
            }
        }),
    }
}

fn max_norm_sqr(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max)
}

fn check_finite(a: &Array2<Complex64>, frame: usize, stage: &'static str) -> Result<()> {
    if a.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { frame, stage })
    }
}

struct FrameOutcome {
    wave: Array2<Complex64>,
    object: Option<Array2<Complex64>>,
    d_modulator: Option<Array2<Complex64>>,
    d_probe: Option<Array2<Complex64>>,
    misfit: f64,
    total: f64,
}

/// Reusable per-dataset engine: precomputed propagator and settings.
pub struct Engine<'a> {
    dataset: &'a ScanDataset,
    config: ReconConfig,
    near: NearPropagator,
}

impl<'a> Engine<'a> {
    pub fn new(dataset: &'a ScanDataset, config: ReconConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let g = &dataset.geometry;
        let near = NearPropagator::new(
            dataset.frame_shape(),
            g.sample_plane_pitch,
            g.z_sample_to_modulator,
            g.wavelength,
        )?;
        Ok(Self {
            dataset,
            config,
            near,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    fn frame(&self, n: usize, state: &ReconState, eps_m: f64) -> Result<FrameOutcome> {
        let cfg = &self.config;
        let m = state.modulator.data();
        let p = state.probe.data();
        let intensity = &self.dataset.frames[n];
        let valid = self.dataset.valid_mask.as_ref();

        // (a) forward
        let psi = match cfg.mode {
            ReconMode::Exitwave => state.exit_waves[n].clone(),
            _ => p * &state.objects[n],
        };
        let mut phi = psi.clone();
        self.near.forward(&mut phi);
        let mut chi = &phi * m;
        far_forward(&mut chi);
        check_finite(&chi, n, "forward propagation")?;

        let (mut misfit, mut total) = (0.0, 0.0);
        Zip::from(&chi).and(intensity).for_each(|w, &i| {
            misfit += (w.norm() - i.sqrt()).powi(2);
            total += i;
        });
        if let Some(v) = valid {
            misfit = 0.0;
            total = 0.0;
            Zip::from(&chi).and(intensity).and(v).for_each(|w, &i, &ok| {
                if ok {
                    misfit += (w.norm() - i.sqrt()).powi(2);
                    total += i;
                }
            });
        }

        // (b) modulus constraint and back to the modulator plane
        project_inplace(&mut chi, intensity, valid);
        far_inverse(&mut chi);

        // (c) modulator increment
        let d_modulator = if cfg.update_modulator {
            let norm = max_norm_sqr(&phi).max(f64::MIN_POSITIVE);
            let mut d = Array2::zeros(phi.dim());
            Zip::from(&mut d)
                .and(&phi)
                .and(&chi)
                .and(m)
                .for_each(|d, f, c, mm| *d = f.conj() * (c - mm * f) / norm);
            Some(d)
        } else {
            None
        };

        // (d) undo modulation, back to the sample plane
        Zip::from(&mut chi).and(m).for_each(|c, mm| {
            *c = mm.conj() * *c / mm.norm_sqr().max(eps_m);
        });
        self.near.backward(&mut chi);
        let psi_new = chi;
        check_finite(&psi_new, n, "back propagation")?;

        // (e) per-frame update
        match cfg.mode {
            ReconMode::Exitwave => {
                let alpha = cfg.support.outside_feedback;
                let mut wave = psi_new;
                Zip::from(&mut wave)
                    .and(&state.support)
                    .for_each(|w, &s| *w *= s + alpha * (1.0 - s));
                Ok(FrameOutcome {
                    wave,
                    object: None,
                    d_modulator,
                    d_probe: None,
                    misfit,
                    total,
                })
            }
            ReconMode::Separated | ReconMode::Calibrate => {
                let o = &state.objects[n];
                let diff = &psi_new - &psi;
                let p_norm = max_norm_sqr(p).max(f64::MIN_POSITIVE);
                let mut object = o.clone();
                Zip::from(&mut object)
                    .and(p)
                    .and(&diff)
                    .for_each(|ob, pp, d| *ob += cfg.beta_object * pp.conj() * d / p_norm);
                let d_probe = if cfg.update_probe {
                    let o_norm = max_norm_sqr(o).max(f64::MIN_POSITIVE);
                    let mut d = Array2::zeros(o.dim());
                    Zip::from(&mut d)
                        .and(o)
                        .and(&diff)
                        .for_each(|d, ob, df| *d = ob.conj() * df / o_norm);
                    Some(d)
                } else {
                    None
                };
                check_finite(&object, n, "object update")?;
                Ok(FrameOutcome {
                    wave: psi,
                    object: Some(object),
                    d_modulator,
                    d_probe,
                    misfit,
                    total,
                })
            }
        }
    }

    /// One full sweep over all frames followed by the averaged shared
    /// updates. Returns the data residual of the sweep's forward pass.
    pub fn iterate(&self, state: &mut ReconState) -> Result<f64> {
        let n = self.dataset.n_frames();
        if state.n_frames() != n {
            return Err(Error::Shape(format!(
                "state has {} frames, dataset {n}",
                state.n_frames()
            )));
        }
        let eps_m = self.config.division_epsilon * max_norm_sqr(state.modulator.data());
        let shared: &ReconState = state;
        let outcomes: Vec<FrameOutcome> = (0..n)
            .into_par_iter()
            .map(|k| self.frame(k, shared, eps_m))
            .collect::<Result<_>>()?;

        // ordered reduction: identical for any worker count
        let shape = self.dataset.frame_shape();
        let mut d_mod = self
            .config
            .update_modulator
            .then(|| Array2::<Complex64>::zeros(shape));
        let mut d_probe = (self.config.update_probe && self.config.mode != ReconMode::Exitwave)
            .then(|| Array2::<Complex64>::zeros(shape));
        let (mut misfit, mut total) = (0.0, 0.0);
        for (k, out) in outcomes.into_iter().enumerate() {
            misfit += out.misfit;
            total += out.total;
            if let (Some(acc), Some(d)) = (d_mod.as_mut(), out.d_modulator.as_ref()) {
                *acc += d;
            }
            if let (Some(acc), Some(d)) = (d_probe.as_mut(), out.d_probe.as_ref()) {
                *acc += d;
            }
            if let Some(o) = out.object {
                state.objects[k] = o;
            }
            state.exit_waves[k] = out.wave;
        }
        let inv_n = 1.0 / n as f64;
        if let Some(acc) = d_mod {
            let beta = self.config.beta_modulator * inv_n;
            let phase_only = self.config.phase_only_modulator;
            Zip::from(state.modulator.data_mut()).and(&acc).for_each(|m, d| {
                *m += beta * d;
                if phase_only {
                    let a = m.norm();
                    *m = if a > 0.0 { *m / a } else { Complex64::new(1.0, 0.0) };
                }
            });
        }
        if let Some(acc) = d_probe {
            let beta = self.config.beta_probe * inv_n;
            Zip::from(state.probe.data_mut())
                .and(&acc)
                .for_each(|p, d| *p += beta * d);
        }
        if self.config.mode != ReconMode::Exitwave {
            let p = state.probe.data();
            for (w, o) in state.exit_waves.iter_mut().zip(&state.objects) {
                *w = p * o;
            }
        }
        let r = if total > 0.0 { misfit / total } else { 0.0 };
        state.residuals.push(r);
        Ok(r)
    }

    /// Run `config.iterations` sweeps (fewer with early stopping).
    pub fn run(&self, state: &mut ReconState) -> Result<()> {
        self.run_with(state, |_, _| {})
    }

    pub fn run_with<F: FnMut(usize, f64)>(&self, state: &mut ReconState, mut progress: F) -> Result<()> {
        for it in 0..self.config.iterations {
            let r = self.iterate(state)?;
            progress(it, r);
            if self.config.early_stop && state.residuals.len() > 20 {
                let past = state.residuals[state.residuals.len() - 21];
                if past - r < 1e-6 {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// One sweep; convenience over [`Engine::iterate`].
pub fn run_iteration(state: &mut ReconState, dataset: &ScanDataset, config: &ReconConfig) -> Result<f64> {
    Engine::new(dataset, *config)?.iterate(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// Frames registering below this confidence are interpolated.
    pub min_confidence: f64,
    /// Refuse to run when the reconstruction residual is above this.
    pub max_residual: Option<f64>,
    pub upsample: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.5,
            max_residual: None,
            upsample: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftEstimate {
    /// Probe offset per frame, pixels, frame 0 at the origin.
    pub drifts: Vec<(f64, f64)>,
    pub confidences: Vec<f64>,
    /// Frames whose drift was interpolated from temporal neighbours.
    pub flagged: Vec<usize>,
}

fn as_complex(a: &Array2<f64>) -> Array2<Complex64> {
    a.mapv(|v| Complex64::new(v, 0.0))
}

/// Probe drift from the displacement of the exit-wave magnitudes: register
/// every frame to frame 0, then again to the mean of the aligned magnitudes.
pub fn estimate_probe_drift(
    exit_waves: &[Array2<Complex64>],
    residual: Option<f64>,
    config: &DriftConfig,
) -> Result<DriftEstimate> {
    if let (Some(limit), Some(r)) = (config.max_residual, residual) {
        if r > limit {
            return Err(Error::InvalidArgument(format!(
                "exit waves not converged (residual {r:.3e} > {limit:.3e})"
            )));
        }
    }
    if exit_waves.is_empty() {
        return Err(Error::InvalidArgument("no exit waves".into()));
    }
    let opts = RegisterOptions {
        precondition: false,
        remove_mean: false,
        upsample: config.upsample.max(1),
        ..RegisterOptions::default()
    };
    let mags: Vec<Array2<Complex64>> = exit_waves
        .iter()
        .map(|w| as_complex(&w.mapv(|v| v.norm())))
        .collect();

    let first: Vec<(f64, f64)> = mags
        .par_iter()
        .map(|g| register::subpixel_shift_estimate(&mags[0], g, &opts).map(|m| m.delta))
        .collect::<Result<_>>()?;

    let shape = mags[0].dim();
    let mut mean = Array2::<Complex64>::zeros(shape);
    for (g, s) in mags.iter().zip(&first) {
        mean += &fourier_shift_array(g, (-s.0, -s.1));
    }
    mean.mapv_inplace(|v| Complex64::new(v.re / mags.len() as f64, 0.0));

    let second: Vec<register::ShiftMeasurement> = mags
        .par_iter()
        .map(|g| register::subpixel_shift_estimate(&mean, g, &opts))
        .collect::<Result<_>>()?;

    let origin = second[0].delta;
    let mut drifts: Vec<(f64, f64)> = second
        .iter()
        .map(|m| (m.delta.0 - origin.0, m.delta.1 - origin.1))
        .collect();
    let confidences: Vec<f64> = second.iter().map(|m| m.confidence).collect();
    let flagged: Vec<usize> = (0..drifts.len())
        .filter(|&k| confidences[k] < config.min_confidence)
        .collect();
    let good: Vec<usize> = (0..drifts.len())
        .filter(|k| !flagged.contains(k))
        .collect();
    if !good.is_empty() {
        for &k in &flagged {
            let before = good.iter().rev().find(|&&g| g < k);
            let after = good.iter().find(|&&g| g > k);
            drifts[k] = match (before, after) {
                (Some(&a), Some(&b)) => {
                    let t = (k - a) as f64 / (b - a) as f64;
                    (
                        drifts[a].0 + t * (drifts[b].0 - drifts[a].0),
                        drifts[a].1 + t * (drifts[b].1 - drifts[a].1),
                    )
                }
                (Some(&a), None) => drifts[a],
                (None, Some(&b)) => drifts[b],
                (None, None) => unreachable!(),
            };
        }
    }
    if !flagged.contains(&0) {
        drifts[0] = (0.0, 0.0);
    }
    Ok(DriftEstimate {
        drifts,
        confidences,
        flagged,
    })
}

#[derive(Debug, Clone)]
pub struct Separation {
    /// Probe at the frame-0 position.
    pub probe: Array2<Complex64>,
    /// Objects in frame coordinates, zero outside their valid region.
    pub objects: Vec<Array2<Complex64>>,
}

/// Pixels where the (shifted) probe carries at least this fraction of its
/// peak intensity count as valid object pixels.
pub const OBJECT_VALID_FRACTION: f64 = 0.1;

/// Split drift-compensated exit waves into a shared probe (their phase-aligned
/// mean) and per-frame objects (regularised division by the probe placed at
/// each frame's drift). Objects carry one arbitrary shared complex scale.
pub fn separate_probe_object(
    exit_waves: &[Array2<Complex64>],
    drifts: &[(f64, f64)],
    support: &Array2<f64>,
    division_epsilon: f64,
) -> Result<Separation> {
    let n = exit_waves.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "probe/object separation needs at least 3 frames, got {n}"
        )));
    }
    if drifts.len() != n {
        return Err(Error::Shape("one drift per exit wave required".into()));
    }
    let aligned: Vec<Array2<Complex64>> = exit_waves
        .par_iter()
        .zip(drifts.par_iter())
        .map(|(w, d)| fourier_shift_array(w, (-d.0, -d.1)))
        .collect();

    // per-frame global phases are arbitrary; line them up before averaging
    let mut phases = vec![Complex64::new(1.0, 0.0); n];
    let mut reference = aligned[0].clone();
    for _ in 0..2 {
        for (k, a) in aligned.iter().enumerate() {
            let c: Complex64 = Zip::from(&reference)
                .and(a)
                .fold(Complex64::new(0.0, 0.0), |acc, r, v| acc + r.conj() * v);
            phases[k] = if c.norm() > 0.0 {
                (c / c.norm()).conj()
            } else {
                Complex64::new(1.0, 0.0)
            };
        }
        let mut mean = Array2::<Complex64>::zeros(aligned[0].dim());
        for (a, ph) in aligned.iter().zip(&phases) {
            Zip::from(&mut mean).and(a).for_each(|m, v| *m += v * ph);
        }
        mean.mapv_inplace(|v| v / n as f64);
        reference = mean;
    }
    let probe = reference;
    let objects = divide_by_probe(exit_waves, drifts, &phases, &probe, support, division_epsilon);
    Ok(Separation { probe, objects })
}

/// Objects from exit waves given a probe estimate: regularised division by
/// the probe placed at each frame's drift, zero where the probe is weak.
pub fn objects_from_probe(
    exit_waves: &[Array2<Complex64>],
    drifts: &[(f64, f64)],
    probe: &Array2<Complex64>,
    support: &Array2<f64>,
    division_epsilon: f64,
) -> Result<Vec<Array2<Complex64>>> {
    if drifts.len() != exit_waves.len() {
        return Err(Error::Shape("one drift per exit wave required".into()));
    }
    if exit_waves.iter().any(|w| w.dim() != probe.dim()) || support.dim() != probe.dim() {
        return Err(Error::Shape("exit waves, probe and support differ in shape".into()));
    }
    let phases = vec![Complex64::new(1.0, 0.0); exit_waves.len()];
    Ok(divide_by_probe(exit_waves, drifts, &phases, probe, support, division_epsilon))
}

fn divide_by_probe(
    exit_waves: &[Array2<Complex64>],
    drifts: &[(f64, f64)],
    phases: &[Complex64],
    probe: &Array2<Complex64>,
    support: &Array2<f64>,
    division_epsilon: f64,
) -> Vec<Array2<Complex64>> {
    let p_max = max_norm_sqr(probe);
    let floor = division_epsilon * p_max;
    exit_waves
        .par_iter()
        .zip(drifts.par_iter())
        .zip(phases.par_iter())
        .map(|((w, d), ph)| {
            let p = fourier_shift_array(probe, *d);
            let mut o = Array2::zeros(w.dim());
            Zip::from(&mut o)
                .and(w)
                .and(&p)
                .and(support)
                .for_each(|o, w, p, &s| {
                    let pp = p.norm_sqr();
                    *o = if s > 0.0 && pp >= OBJECT_VALID_FRACTION * p_max {
                        p.conj() * w * ph / pp.max(floor)
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                });
            o
        })
        .collect()
}

/// Objects from a separated-mode run, restricted to well-illuminated pixels.
pub fn masked_objects(state: &ReconState) -> Vec<Array2<Complex64>> {
    let p = state.probe.data();
    let p_max = max_norm_sqr(p);
    state
        .objects
        .iter()
        .map(|o| {
            let mut out = o.clone();
            Zip::from(&mut out)
                .and(p)
                .and(&state.support)
                .for_each(|v, pp, &s| {
                    if s == 0.0 || pp.norm_sqr() < OBJECT_VALID_FRACTION * p_max {
                        *v = Complex64::new(0.0, 0.0);
                    }
                });
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(n: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn modulus_projection_fixed_point_and_zero_convention() {
        let w = random_wave(16, 1);
        let i = w.mapv(|v| v.norm_sqr());
        let out = modulus_project(&w, &i, None).unwrap();
        for (a, b) in out.iter().zip(&w) {
            assert!((a - b).norm() < 1e-14);
        }
        let zero = Array2::<Complex64>::zeros((16, 16));
        let ones = Array2::from_elem((16, 16), 1.0);
        let out = modulus_project(&zero, &ones, None).unwrap();
        assert!(out.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn modulus_projection_sets_amplitude_and_is_idempotent() {
        let w = random_wave(32, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i = Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.0..4.0));
        let once = modulus_project(&w, &i, None).unwrap();
        for (v, &ii) in once.iter().zip(&i) {
            assert!((v.norm() - ii.sqrt()).abs() < 1e-12);
        }
        let twice = modulus_project(&once, &i, None).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).norm() < 1e-12);
        }
        let valid_sum: f64 = once.iter().map(|v| v.norm_sqr()).sum();
        assert!((valid_sum - i.sum()).abs() / i.sum() < 1e-12);
    }

    #[test]
    fn modulus_projection_respects_mask_and_rejects_negative() {
        let w = random_wave(16, 4);
        let i = Array2::from_elem((16, 16), 2.0);
        let mask = Array2::from_shape_fn((16, 16), |(r, _)| r < 8);
        let out = modulus_project(&w, &i, Some(&mask)).unwrap();
        assert!((out[[0, 0]].norm() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(out[[12, 3]], w[[12, 3]]);
        let mut neg = i.clone();
        neg[[1, 1]] = -1.0;
        assert!(modulus_project(&w, &neg, None).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ReconConfig::for_mode(ReconMode::Calibrate);
        assert!(c.validate().is_ok());
        c.update_probe = true;
        assert!(c.validate().is_err());
        let mut c = ReconConfig::default();
        c.beta_object = 0.0;
        assert!(c.validate().is_err());
        let mut c = ReconConfig::default();
        c.support.outside_feedback = 1.0;
        assert!(c.validate().is_err());
        let mut c = ReconConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn support_of_binary_disc_matches_its_radius() {
        let p = mask::centered_disk((128, 128), 20.0).mapv(|b| Complex64::new(b as u8 as f64, 0.0));
        let cfg = SupportConfig {
            radius_px: None,
            margin_fraction: 0.0,
            outside_feedback: 0.0,
        };
        let s = support_mask((128, 128), &p, &cfg);
        let expected = mask::centered_disk((128, 128), 20.0);
        let mismatched = s
            .iter()
            .zip(&expected)
            .filter(|(a, b)| (**a > 0.5) != **b)
            .count();
        // rim pixels may differ by the discreteness of the power radius
        assert!(mismatched <= 8, "{mismatched} pixels differ");
    }

    #[test]
    fn identical_exit_waves_have_zero_drift() {
        let p = mask::centered_disk((64, 64), 14.0).mapv(|b| Complex64::new(b as u8 as f64, 0.0));
        let waves = vec![p.clone(); 4];
        let est = estimate_probe_drift(&waves, None, &DriftConfig::default()).unwrap();
        for d in est.drifts {
            assert!(d.0.abs() < 1e-9 && d.1.abs() < 1e-9);
        }
        assert!(est.flagged.is_empty());
    }

    #[test]
    fn separation_needs_three_frames() {
        let w = vec![Array2::<Complex64>::zeros((16, 16)); 2];
        let s = Array2::from_elem((16, 16), 1.0);
        assert!(separate_probe_object(&w, &[(0.0, 0.0); 2], &s, 1e-3).is_err());
    }
}
