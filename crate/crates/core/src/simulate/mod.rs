//! Ground-truth scenes and modulated scanning-diffraction datasets.
//!
//! Frame `n` is `|F{ M · N_z{ P(r - d_n) · O(c + r_n + r) } }|²` where `N_z`
//! is near-field propagation over the sample→modulator gap, `F` the centred
//! far-field transform, `r_n` the scan position relative to the sample
//! centre `c`, and `d_n` the probe drift. All positions are in sample-plane
//! pixels, `(y, x)` order.

pub mod maze;
pub mod noise;

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    far_forward, fourier_shift_array, propagate_near, ComplexField, Geometry, NearPropagator,
};
use crate::io;

pub use maze::Maze;

/// Ordered per-frame scan positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub positions: Vec<(f64, f64)>,
    /// Raster shape `(rows, cols)` when the plan came from a grid, row-major.
    pub grid: Option<(usize, usize)>,
}

impl ScanPlan {
    pub fn new(positions: Vec<(f64, f64)>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a scan needs at least 2 frames, got {}",
                positions.len()
            )));
        }
        if positions.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
            return Err(Error::NonFinite("scan positions"));
        }
        Ok(Self {
            positions,
            grid: None,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Every frame window must lie inside the sample array.
    pub fn check_bounds(&self, sample: (usize, usize), frame: (usize, usize)) -> Result<()> {
        let lim_y = (sample.0 as f64 - frame.0 as f64) / 2.0 - 1.0;
        let lim_x = (sample.1 as f64 - frame.1 as f64) / 2.0 - 1.0;
        for (n, &(y, x)) in self.positions.iter().enumerate() {
            if y.abs() > lim_y || x.abs() > lim_x {
                return Err(Error::InvalidArgument(format!(
                    "frame {n} at ({y:.2}, {x:.2}) px leaves the {}x{} sample (limit ±{lim_y:.1}, ±{lim_x:.1})",
                    sample.0, sample.1
                )));
            }
        }
        Ok(())
    }
}

/// Raster of `grid = (rows, cols)` positions with spacing `step_px`,
/// centred on the sample, plus uniform jitter in `[-jitter_px, jitter_px]²`.
pub fn make_scan_plan(
    grid: (usize, usize),
    step_px: f64,
    jitter_px: f64,
    seed: u64,
) -> Result<ScanPlan> {
    if !(step_px > 0.0 && step_px.is_finite()) {
        return Err(Error::InvalidArgument(format!("step_px must be positive, got {step_px}")));
    }
    if !(jitter_px >= 0.0 && jitter_px.is_finite()) {
        return Err(Error::InvalidArgument(format!("jitter_px must be ≥ 0, got {jitter_px}")));
    }
    let (rows, cols) = grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut y = (r as f64 - (rows as f64 - 1.0) / 2.0) * step_px;
            let mut x = (c as f64 - (cols as f64 - 1.0) / 2.0) * step_px;
            if jitter_px > 0.0 {
                y += rng.gen_range(-jitter_px..=jitter_px);
                x += rng.gen_range(-jitter_px..=jitter_px);
            }
            positions.push((y, x));
        }
    }
    let mut plan = ScanPlan::new(positions)?;
    plan.grid = Some(grid);
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    None,
    Linear,
    RandomWalk,
}

/// Per-frame lateral probe offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub kind: DriftKind,
    /// Linear: total travel over the scan. Random walk: expected end-to-end RMS per axis.
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    /// Direction of linear drift, radians from the +x axis towards +y.
    #[serde(default)]
    pub direction_rad: f64,
}

impl DriftModel {
    pub fn none() -> Self {
        Self {
            kind: DriftKind::None,
            amplitude: 0.0,
            seed: 0,
            direction_rad: 0.0,
        }
    }

    pub fn linear(amplitude: f64, direction_rad: f64) -> Self {
        Self {
            kind: DriftKind::Linear,
            amplitude,
            seed: 0,
            direction_rad,
        }
    }

    /// Offsets for `n` frames; frame 0 is always `(0, 0)`.
    pub fn series(&self, n: usize) -> Result<Vec<(f64, f64)>> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "drift amplitude must be ≥ 0, got {}",
                self.amplitude
            )));
        }
        let out = match self.kind {
            DriftKind::None => vec![(0.0, 0.0); n],
            DriftKind::Linear => {
                let (sy, sx) = self.direction_rad.sin_cos();
                let denom = (n.max(2) - 1) as f64;
                (0..n)
                    .map(|k| {
                        let t = self.amplitude * k as f64 / denom;
                        (t * sy, t * sx)
                    })
                    .collect()
            }
            DriftKind::RandomWalk => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let sigma = self.amplitude / (n.max(2) as f64 - 1.0).sqrt();
                let mut p = (0.0, 0.0);
                let mut out = vec![p];
                for _ in 1..n {
                    p.0 += sigma * noise::standard_normal(&mut rng);
                    p.1 += sigma * noise::standard_normal(&mut rng);
                    out.push(p);
                }
                out
            }
        };
        Ok(out)
    }
}

/// Simulation ground truth carried alongside a dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub sample: ComplexField,
    pub probe: ComplexField,
    pub modulator: ComplexField,
    pub plan: ScanPlan,
    pub drift: Vec<(f64, f64)>,
}

/// Measured intensity stack plus geometry.
#[derive(Debug, Clone)]
pub struct ScanDataset {
    pub frames: Vec<Array2<f64>>,
    pub geometry: Geometry,
    /// Expected incident photons per frame; `None` for noiseless data.
    pub photons: Option<f64>,
    pub seed: u64,
    /// Acquisition raster `(rows, cols)` when known.
    pub scan_grid: Option<(usize, usize)>,
    /// Physical aperture diameter used to form the probe, when known.
    pub aperture_diameter: Option<f64>,
    /// Detector pixels to trust; `None` means all.
    pub valid_mask: Option<Array2<bool>>,
    pub truth: Option<GroundTruth>,
}

impl ScanDataset {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.dim()).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("dataset has no frames".into()));
        }
        let shape = self.frame_shape();
        for (n, f) in self.frames.iter().enumerate() {
            if f.dim() != shape {
                return Err(Error::Shape(format!(
                    "frame {n} has shape {:?}, expected {shape:?}",
                    f.dim()
                )));
            }
            if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "frame {n} has negative or non-finite intensities"
                )));
            }
        }
        if let Some(mask) = &self.valid_mask {
            if mask.dim() != shape {
                return Err(Error::Shape("valid mask shape differs from frames".into()));
            }
        }
        if shape.0 != shape.1 {
            return Err(Error::Shape(format!("frames must be square, got {shape:?}")));
        }
        self.geometry.validate(shape.0)
    }

    /// Keep every `stride`-th raster row and column: the sparse-grid way of
    /// turning a dense scan into a low-overlap one.
    pub fn subsample_grid(&self, stride: usize) -> Result<Self> {
        let (rows, cols) = self.scan_grid.ok_or_else(|| {
            Error::InvalidArgument("subsampling needs a dataset with a known scan grid".into())
        })?;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be ≥ 1".into()));
        }
        let keep: Vec<usize> = (0..rows)
            .step_by(stride)
            .flat_map(|r| (0..cols).step_by(stride).map(move |c| r * cols + c))
            .collect();
        let new_grid = (rows.div_ceil(stride), cols.div_ceil(stride));
        let truth = match &self.truth {
            Some(t) => {
                let mut plan =
                    ScanPlan::new(keep.iter().map(|&k| t.plan.positions[k]).collect())?;
                plan.grid = Some(new_grid);
                Some(GroundTruth {
                    plan,
                    drift: keep.iter().map(|&k| t.drift[k]).collect(),
                    ..t.clone()
                })
            }
            None => None,
        };
        Ok(Self {
            frames: keep.iter().map(|&k| self.frames[k].clone()).collect(),
            scan_grid: Some(new_grid),
            truth,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeKind {
    Aperture,
    /// Aperture followed by a thin lens of focal length `focal` (negative diverges).
    Divergent { focal: f64 },
}

/// Hard circular aperture of `diameter` metres (optionally with lens phase),
/// propagated by `defocus` metres and normalised to unit power.
pub fn generate_probe(
    geometry: &Geometry,
    shape: (usize, usize),
    kind: ProbeKind,
    diameter: f64,
    defocus: f64,
) -> Result<ComplexField> {
    let pitch = geometry.sample_plane_pitch;
    let diameter_px = diameter / pitch;
    if !(diameter_px > 0.0 && diameter_px.is_finite()) {
        return Err(Error::InvalidArgument(format!("probe diameter {diameter} m")));
    }
    if diameter_px > 0.8 * shape.0.min(shape.1) as f64 {
        return Err(Error::InvalidArgument(format!(
            "probe diameter {diameter_px:.1} px leaves less than 20% margin in a {}x{} grid",
            shape.0, shape.1
        )));
    }
    let radius2 = (diameter_px / 2.0).powi(2);
    let (cy, cx) = ((shape.0 / 2) as f64, (shape.1 / 2) as f64);
    let lambda = geometry.wavelength;
    let probe = ComplexField::from_fn(shape, pitch, |(i, j)| {
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        let rho2 = dy * dy + dx * dx;
        if rho2 > radius2 {
            return Complex64::new(0.0, 0.0);
        }
        match kind {
            ProbeKind::Aperture => Complex64::new(1.0, 0.0),
            ProbeKind::Divergent { focal } => {
                let r2 = rho2 * pitch * pitch;
                Complex64::from_polar(1.0, -PI * r2 / (lambda * focal))
            }
        }
    })?
    .with_label("probe");
    let mut probe = propagate_near(&probe, defocus, lambda)?;
    let norm = probe.power().sqrt();
    probe.data_mut().mapv_inplace(|v| v / norm);
    Ok(probe)
}

/// Diameter (pixels) of the disc about the intensity centroid that holds
/// `fraction` of the total power.
pub fn power_diameter(field: &Array2<Complex64>, fraction: f64) -> f64 {
    let total: f64 = field.iter().map(|v| v.norm_sqr()).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (mut my, mut mx) = (0.0, 0.0);
    for ((i, j), v) in field.indexed_iter() {
        let p = v.norm_sqr();
        my += p * i as f64;
        mx += p * j as f64;
    }
    let (my, mx) = (my / total, mx / total);
    let mut radial: Vec<(f64, f64)> = field
        .indexed_iter()
        .map(|((i, j), v)| {
            (((i as f64 - my).powi(2) + (j as f64 - mx).powi(2)).sqrt(), v.norm_sqr())
        })
        .collect();
    radial.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    for (r, p) in radial {
        acc += p;
        if acc >= fraction * total {
            return 2.0 * r;
        }
    }
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleKind {
    Maze {
        cells: usize,
        wall_px: usize,
        seed: u64,
        /// Smooth random texture over the maze: phase standard deviation in
        /// radians (amplitude varies by half as much, relatively). A bare
        /// lattice maze is nearly periodic and registers ambiguously.
        #[serde(default)]
        roughness: f64,
    },
    /// Grayscale PGM files mapped to amplitude and, optionally, phase.
    Import {
        amplitude: std::path::PathBuf,
        phase: Option<std::path::PathBuf>,
    },
}

fn check_range(name: &str, r: (f64, f64), lo: f64, hi: f64, open_lo: bool) -> Result<()> {
    let lower_ok = if open_lo { r.0 > lo } else { r.0 >= lo };
    if !(r.0 <= r.1 && lower_ok && r.1 <= hi && r.0.is_finite() && r.1.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} range [{}, {}] is empty or outside [{lo:.4}, {hi:.4}]",
            r.0, r.1
        )));
    }
    Ok(())
}

/// Maze (walls dark and phase-advanced) or imported sample transmission.
pub fn generate_sample(
    kind: &SampleKind,
    size: (usize, usize),
    pitch: f64,
    amplitude_range: (f64, f64),
    phase_range: (f64, f64),
) -> Result<ComplexField> {
    check_range("amplitude", amplitude_range, 0.0, 1.0, true)?;
    check_range("phase", phase_range, -PI, PI, false)?;
    let (a_lo, a_hi) = amplitude_range;
    let (p_lo, p_hi) = phase_range;
    match kind {
        SampleKind::Maze {
            cells,
            wall_px,
            seed,
            roughness,
        } => {
            if !(*roughness >= 0.0 && roughness.is_finite()) {
                return Err(Error::InvalidArgument(format!("roughness {roughness} must be ≥ 0")));
            }
            if *cells == 0 || size.0.min(size.1) / cells <= *wall_px {
                return Err(Error::InvalidArgument(format!(
                    "{cells} cells with {wall_px}-px walls do not fit a {}x{} grid",
                    size.0, size.1
                )));
            }
            let cell_px = size.0.min(size.1) / cells;
            let walls = Maze::generate(*cells, *cells, *seed).render(cell_px, *wall_px);
            let walls = crate::field::embed_center_array(&walls, size)?;
            let (tex_a, tex_p) = if *roughness > 0.0 {
                (
                    smooth_noise(size, TEXTURE_CORRELATION_PX, seed.wrapping_add(1)),
                    smooth_noise(size, TEXTURE_CORRELATION_PX, seed.wrapping_add(2)),
                )
            } else {
                (Array2::zeros(size), Array2::zeros(size))
            };
            ComplexField::from_fn(size, pitch, |idx| {
                let t = if walls[idx] { 1.0 } else { 0.0 };
                let amp = (a_hi - t * (a_hi - a_lo)) * (1.0 + 0.5 * roughness * tex_a[idx]);
                let phase = p_lo + t * (p_hi - p_lo) + roughness * tex_p[idx];
                Complex64::from_polar(amp.clamp(0.05, 1.0), phase)
            })
        }
        SampleKind::Import { amplitude, phase } => {
            let amp = io::read_pgm(amplitude)?;
            let ph = match phase {
                Some(p) => Some(io::read_pgm(p)?),
                None => None,
            };
            if let Some(ph) = &ph {
                if ph.dim() != amp.dim() {
                    return Err(Error::Shape("amplitude and phase images differ in shape".into()));
                }
            }
            ComplexField::from_fn(amp.dim(), pitch, |idx| {
                let a = a_lo + amp[idx] * (a_hi - a_lo);
                let p = ph.as_ref().map_or(p_lo, |ph| p_lo + ph[idx] * (p_hi - p_lo));
                Complex64::from_polar(a, p)
            })
        }
    }
}

/// Gaussian correlation length of the maze texture, pixels.
pub const TEXTURE_CORRELATION_PX: f64 = 2.0;

/// Zero-mean, unit-variance Gaussian random field with a Gaussian
/// correlation of `sigma_px` (spectral filtering of white noise).
pub fn smooth_noise(shape: (usize, usize), sigma_px: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field =
        Array2::from_shape_fn(shape, |_| Complex64::new(noise::standard_normal(&mut rng), 0.0));
    crate::fft::fft2(&mut field);
    let (h, w) = shape;
    for ((i, j), v) in field.indexed_iter_mut() {
        let fy = crate::fft::freq_index(i, h) / h as f64;
        let fx = crate::fft::freq_index(j, w) / w as f64;
        *v *= (-2.0 * PI * PI * sigma_px * sigma_px * (fy * fy + fx * fx)).exp();
    }
    crate::fft::ifft2(&mut field);
    let re = field.mapv(|v| v.re);
    let n = re.len() as f64;
    let mean = re.sum() / n;
    let sd = (re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        re.mapv(|v| (v - mean) / sd)
    } else {
        re
    }
}

pub fn import_sample(
    amplitude: &Path,
    phase: Option<&Path>,
    pitch: f64,
    amplitude_range: (f64, f64),
    phase_range: (f64, f64),
) -> Result<ComplexField> {
    let kind = SampleKind::Import {
        amplitude: amplitude.to_path_buf(),
        phase: phase.map(Path::to_path_buf),
    };
    generate_sample(&kind, (0, 0), pitch, amplitude_range, phase_range)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModulatorKind {
    /// Square blocks of `feature_px` whose phase is `phase_depth` with
    /// probability `density`, else 0.
    Random {
        feature_px: usize,
        #[serde(default = "default_density")]
        density: f64,
        seed: u64,
    },
    /// Binary square-wave phase along x.
    Grating { period_px: f64 },
}

fn default_density() -> f64 {
    0.5
}

/// Phase-type modulator: `|M| = 1` everywhere.
pub fn generate_modulator(
    shape: (usize, usize),
    pitch: f64,
    kind: ModulatorKind,
    phase_depth: f64,
) -> Result<ComplexField> {
    if !(0.0..=2.0 * PI).contains(&phase_depth) {
        return Err(Error::InvalidArgument(format!(
            "phase depth {phase_depth} outside [0, 2π]"
        )));
    }
    let phase = match kind {
        ModulatorKind::Random {
            feature_px,
            density,
            seed,
        } => {
            if feature_px == 0 {
                return Err(Error::InvalidArgument("feature_px must be ≥ 1".into()));
            }
            if !(0.0..=1.0).contains(&density) {
                return Err(Error::InvalidArgument(format!("density {density} outside [0, 1]")));
            }
            let by = shape.0.div_ceil(feature_px);
            let bx = shape.1.div_ceil(feature_px);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks = Array2::from_shape_fn((by, bx), |_| rng.gen::<f64>() < density);
            Array2::from_shape_fn(shape, |(i, j)| {
                if blocks[[i / feature_px, j / feature_px]] {
                    phase_depth
                } else {
                    0.0
                }
            })
        }
        ModulatorKind::Grating { period_px } => {
            if !(period_px >= 2.0 && period_px.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "grating period {period_px} px is below the 2-px sampling limit"
                )));
            }
            Array2::from_shape_fn(shape, |(_, j)| {
                if (j as f64 / period_px).fract() < 0.5 {
                    phase_depth
                } else {
                    0.0
                }
            })
        }
    };
    Ok(ComplexField::new(phase.mapv(|p| Complex64::from_polar(1.0, p)), pitch)?
        .with_label("modulator"))
}

/// The `shape` window of `sample` centred `position` pixels from the sample
/// centre; fractional positions are realised by Fourier-shifting the sample.
pub fn extract_patch(
    sample: &Array2<Complex64>,
    position: (f64, f64),
    shape: (usize, usize),
) -> Array2<Complex64> {
    let ip = (position.0.round(), position.1.round());
    let frac = (position.0 - ip.0, position.1 - ip.1);
    let shifted;
    let src = if frac == (0.0, 0.0) {
        sample
    } else {
        shifted = fourier_shift_array(sample, (-frac.0, -frac.1));
        &shifted
    };
    let (hs, ws) = src.dim();
    let top = (hs / 2) as isize + ip.0 as isize - (shape.0 / 2) as isize;
    let left = (ws / 2) as isize + ip.1 as isize - (shape.1 / 2) as isize;
    Array2::from_shape_fn(shape, |(i, j)| {
        let y = (top + i as isize).rem_euclid(hs as isize) as usize;
        let x = (left + j as isize).rem_euclid(ws as isize) as usize;
        src[[y, x]]
    })
}

/// Exit wave in the probe frame for the sample displaced by `position` and
/// the probe by `drift`. The integer part of the position picks the sample
/// window; the fractional part moves the compact probe instead, and the
/// product is shifted back, so the window edges never wrap into the wave.
pub fn lab_exit_wave(
    sample: &Array2<Complex64>,
    probe: &Array2<Complex64>,
    position: (f64, f64),
    drift: (f64, f64),
) -> Array2<Complex64> {
    let ip = (position.0.round(), position.1.round());
    let frac = (position.0 - ip.0, position.1 - ip.1);
    let patch = extract_patch(sample, ip, probe.dim());
    let shift = (frac.0 + drift.0, frac.1 + drift.1);
    let p = if shift == (0.0, 0.0) {
        probe.clone()
    } else {
        fourier_shift_array(probe, shift)
    };
    let psi = p * &patch;
    if frac == (0.0, 0.0) {
        psi
    } else {
        fourier_shift_array(&psi, (-frac.0, -frac.1))
    }
}

/// Forward model for one exit wave: detector-plane intensity.
pub fn exit_wave_intensity(
    exit_wave: &Array2<Complex64>,
    near: &NearPropagator,
    modulator: &Array2<Complex64>,
) -> Array2<f64> {
    let mut w = exit_wave.clone();
    near.forward(&mut w);
    Zip::from(&mut w).and(modulator).for_each(|v, m| *v *= m);
    far_forward(&mut w);
    w.mapv(|v| v.norm_sqr())
}

/// Simulate the full scan. `photons = None` gives exact intensities;
/// otherwise frames are scaled so the incident probe carries `photons`
/// and Poisson counts are drawn from per-frame streams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset(
    sample: &ComplexField,
    probe: &ComplexField,
    modulator: &ComplexField,
    plan: &ScanPlan,
    drift: &DriftModel,
    geometry: &Geometry,
    photons: Option<f64>,
    seed: u64,
) -> Result<ScanDataset> {
    let shape = probe.shape();
    geometry.validate(shape.0)?;
    if modulator.shape() != shape {
        return Err(Error::Shape(format!(
            "modulator {:?} and probe {:?} shapes differ",
            modulator.shape(),
            shape
        )));
    }
    if shape.0 != shape.1 {
        return Err(Error::Shape("frames must be square".into()));
    }
    let rel = |a: f64, b: f64| ((a - b) / b).abs() > 1e-9;
    if rel(probe.pitch(), geometry.sample_plane_pitch) || rel(sample.pitch(), probe.pitch()) {
        return Err(Error::Shape(
            "sample and probe pitch must equal the geometry's sample-plane pitch".into(),
        ));
    }
    plan.check_bounds(sample.shape(), shape)?;
    if let Some(p) = photons {
        if !(p > 0.0) {
            return Err(Error::InvalidArgument(format!("photons per frame must be > 0, got {p}")));
        }
    }
    let drifts = drift.series(plan.len())?;
    let near = NearPropagator::new(
        shape,
        geometry.sample_plane_pitch,
        geometry.z_sample_to_modulator,
        geometry.wavelength,
    )?;
    let scale = photons.map(|p| p / probe.power());

    let frames: Vec<Array2<f64>> = plan
        .positions
        .par_iter()
        .zip(drifts.par_iter())
        .enumerate()
        .map(|(n, (&pos, &d))| {
            let exit = lab_exit_wave(sample.data(), probe.data(), pos, d);
            let mut frame = exit_wave_intensity(&exit, &near, modulator.data());
            if let Some(scale) = scale {
                let mut rng = noise::frame_rng(seed, n as u64);
                frame.mapv_inplace(|v| noise::poisson(&mut rng, v * scale));
            }
            frame
        })
        .collect();

    Ok(ScanDataset {
        frames,
        geometry: *geometry,
        photons,
        seed,
        scan_grid: plan.grid,
        aperture_diameter: None,
        valid_mask: None,
        truth: Some(GroundTruth {
            sample: sample.clone(),
            probe: probe.clone(),
            modulator: modulator.clone(),
            plan: plan.clone(),
            drift: drifts,
        }),
    })
}

/// Area of the lens shared by two discs of diameter `d_disc` whose centres
/// are `dist` apart, as a fraction of one disc's area.
pub fn lens_overlap(dist: f64, d_disc: f64) -> f64 {
    if dist <= 0.0 {
        return 1.0;
    }
    if dist >= d_disc {
        return 0.0;
    }
    let r = d_disc / 2.0;
    let lens = 2.0 * r * r * (dist / (2.0 * r)).acos()
        - (dist / 2.0) * (4.0 * r * r - dist * dist).sqrt();
    (lens / (PI * r * r)).clamp(0.0, 1.0)
}

/// Centre spacing giving overlap `ratio` ∈ (0, 1) for discs of diameter `d_disc`.
pub fn spacing_for_overlap(ratio: f64, d_disc: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, d_disc);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if lens_overlap(mid, d_disc) > ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    /// `(i, j, ratio)` for each nearest-neighbour pair, `i < j`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
}

/// Disc-lens overlap of every frame with its nearest neighbour.
pub fn overlap_ratio(plan: &ScanPlan, probe_diameter_px: f64) -> Result<OverlapReport> {
    if !(probe_diameter_px > 0.0) {
        return Err(Error::InvalidArgument("probe diameter must be positive".into()));
    }
    let p = &plan.positions;
    let dist = |a: usize, b: usize| ((p[a].0 - p[b].0).powi(2) + (p[a].1 - p[b].1).powi(2)).sqrt();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..p.len() {
        let nn = (0..p.len())
            .filter(|&j| j != i)
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        if let Some(j) = nn {
            let pair = (i.min(j), i.max(j));
            if !pairs.contains(&pair) {
                pairs.push(pair);
            }
        }
    }
    pairs.sort_unstable();
    let pairs: Vec<_> = pairs
        .into_iter()
        .map(|(i, j)| (i, j, lens_overlap(dist(i, j), probe_diameter_px)))
        .collect();
    let mean = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len().max(1) as f64;
    Ok(OverlapReport { pairs, mean })
}
