//! Complex wavefields on a square pixel grid and the propagators of the
//! imaging model: angular-spectrum near-field propagation, centred unitary
//! Fraunhofer propagation and Fourier-domain sub-pixel translation.
//!
//! Pixel `(H/2, W/2)` is the optical axis for every transform, crop and embed.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

pub const MIN_FIELD_SIDE: usize = 16;

/// A sampled complex wavefield with its physical pixel pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    data: Array2<Complex64>,
    pitch: f64,
    label: String,
}

impl ComplexField {
    pub fn new(data: Array2<Complex64>, pitch: f64) -> Result<Self> {
        check_shape(data.dim())?;
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::InvalidField(format!(
                "pitch must be positive and finite, got {pitch}"
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self {
            data,
            pitch,
            label: String::new(),
        })
    }

    pub fn zeros(shape: (usize, usize), pitch: f64) -> Result<Self> {
        Self::new(Array2::zeros(shape), pitch)
    }

    pub fn ones(shape: (usize, usize), pitch: f64) -> Result<Self> {
        Self::new(Array2::from_elem(shape, Complex64::new(1.0, 0.0)), pitch)
    }

    pub fn from_fn<F>(shape: (usize, usize), pitch: f64, f: F) -> Result<Self>
    where
        F: FnMut((usize, usize)) -> Complex64,
    {
        Self::new(Array2::from_shape_fn(shape, f), pitch)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    /// Mutable access to the samples. The shape cannot change through this.
    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Sum of `|·|²` over all samples.
    pub fn power(&self) -> f64 {
        power(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub(crate) fn replace_data(&self, data: Array2<Complex64>) -> Self {
        debug_assert_eq!(data.dim(), self.data.dim());
        Self {
            data,
            pitch: self.pitch,
            label: self.label.clone(),
        }
    }

    fn require_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("input field"))
        }
    }
}

fn check_shape((h, w): (usize, usize)) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h < MIN_FIELD_SIDE || w < MIN_FIELD_SIDE {
        return Err(Error::InvalidField(format!(
            "shape must be even and at least {MIN_FIELD_SIDE} per side, got {h}x{w}"
        )));
    }
    Ok(())
}

pub fn power(data: &Array2<Complex64>) -> f64 {
    data.iter().map(|v| v.norm_sqr()).sum()
}

/// Optical geometry of the sample → modulator → detector train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub wavelength: f64,
    pub z_sample_to_modulator: f64,
    pub z_modulator_to_detector: f64,
    pub detector_pitch: f64,
    pub sample_plane_pitch: f64,
    pub far_field: bool,
}

impl Geometry {
    /// Far-field geometry with the sample-plane pitch implied by Fraunhofer
    /// scaling for an `n × n` detector.
    pub fn far_field(
        wavelength: f64,
        z_sample_to_modulator: f64,
        z_modulator_to_detector: f64,
        detector_pitch: f64,
        n: usize,
    ) -> Result<Self> {
        let g = Self {
            wavelength,
            z_sample_to_modulator,
            z_modulator_to_detector,
            detector_pitch,
            sample_plane_pitch: fraunhofer_pitch(
                wavelength,
                z_modulator_to_detector,
                n,
                detector_pitch,
            ),
            far_field: true,
        };
        g.validate(n)?;
        Ok(g)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let named = [
            ("wavelength", self.wavelength),
            ("z_sample_to_modulator", self.z_sample_to_modulator),
            ("z_modulator_to_detector", self.z_modulator_to_detector),
            ("detector_pitch", self.detector_pitch),
            ("sample_plane_pitch", self.sample_plane_pitch),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Physics(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.far_field {
            let expected = fraunhofer_pitch(
                self.wavelength,
                self.z_modulator_to_detector,
                n,
                self.detector_pitch,
            );
            if ((self.sample_plane_pitch - expected) / expected).abs() > 1e-9 {
                return Err(Error::Physics(format!(
                    "sample_plane_pitch {:.6e} m inconsistent with Fraunhofer scaling {:.6e} m for N = {n}",
                    self.sample_plane_pitch, expected
                )));
            }
        }
        Ok(())
    }
}

/// Conjugate-plane pitch `λ·z / (N·pitch)`.
pub fn fraunhofer_pitch(wavelength: f64, distance: f64, n: usize, pitch: f64) -> f64 {
    wavelength * distance / (n as f64 * pitch)
}

/// Largest |z| for which the angular-spectrum transfer function on this grid
/// satisfies the quadratic-phase sampling criterion (phase change per
/// frequency bin ≤ π at every sampled propagating frequency on either axis).
pub fn max_safe_distance(shape: (usize, usize), pitch: f64, wavelength: f64) -> f64 {
    let mut limit = f64::INFINITY;
    for n in [shape.0, shape.1] {
        let df = 1.0 / (n as f64 * pitch);
        for k in 1..=n / 2 {
            let f = k as f64 * df;
            let s = 1.0 - (wavelength * f).powi(2);
            if s <= 0.0 {
                break;
            }
            // |dφ/df| = 2π z λ f / sqrt(s); require |dφ/df|·df ≤ π.
            limit = limit.min(s.sqrt() / (2.0 * wavelength * f * df));
        }
    }
    limit
}

/// Precomputed band-limited angular-spectrum transfer function.
///
/// Evanescent components are set to zero; everything else is a pure phase,
/// so the operator is unitary on the propagating band.
#[derive(Debug, Clone)]
pub struct NearPropagator {
    transfer: Arc<Array2<Complex64>>,
    distance: f64,
}

impl NearPropagator {
    pub fn new(shape: (usize, usize), pitch: f64, distance: f64, wavelength: f64) -> Result<Self> {
        check_shape(shape)?;
        if !distance.is_finite() || !(wavelength.is_finite() && wavelength > 0.0) {
            return Err(Error::NonFinite("propagation parameters"));
        }
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::InvalidField(format!("pitch {pitch}")));
        }
        let max_safe = max_safe_distance(shape, pitch, wavelength);
        if distance.abs() > max_safe {
            return Err(Error::Aliased { distance, max_safe });
        }
        let (h, w) = shape;
        let inv_l2 = 1.0 / (wavelength * wavelength);
        let transfer = Array2::from_shape_fn(shape, |(i, j)| {
            let fy = fft::freq_index(i, h) / (h as f64 * pitch);
            let fx = fft::freq_index(j, w) / (w as f64 * pitch);
            let arg = inv_l2 - fy * fy - fx * fx;
            if arg <= 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(1.0, 2.0 * PI * distance * arg.sqrt())
            }
        });
        Ok(Self {
            transfer: Arc::new(transfer),
            distance,
        })
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.apply(data, false);
    }

    /// Propagation by `-distance`.
    pub fn backward(&self, data: &mut Array2<Complex64>) {
        self.apply(data, true);
    }

    fn apply(&self, data: &mut Array2<Complex64>, conjugate: bool) {
        if self.distance == 0.0 {
            return;
        }
        assert_eq!(data.dim(), self.transfer.dim(), "propagator shape mismatch");
        fft::fft2(data);
        if conjugate {
            Zip::from(&mut *data)
                .and(&*self.transfer)
                .for_each(|v, t| *v *= t.conj());
        } else {
            Zip::from(&mut *data)
                .and(&*self.transfer)
                .for_each(|v, t| *v *= t);
        }
        fft::ifft2(data);
    }
}

/// Angular-spectrum propagation by `distance` (negative = back-propagation).
pub fn propagate_near(field: &ComplexField, distance: f64, wavelength: f64) -> Result<ComplexField> {
    field.require_finite()?;
    let prop = NearPropagator::new(field.shape(), field.pitch(), distance, wavelength)?;
    let mut data = field.data().clone();
    prop.forward(&mut data);
    Ok(field.replace_data(data))
}

/// Centred unitary DFT: origin at `(H/2, W/2)` in both planes, Parseval exact.
pub fn far_forward(data: &mut Array2<Complex64>) {
    centered(data, true);
}

pub fn far_inverse(data: &mut Array2<Complex64>) {
    centered(data, false);
}

fn centered(data: &mut Array2<Complex64>, forward: bool) {
    let (h, w) = data.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    // fftshift∘F∘ifftshift == checkerboard·F·checkerboard·(-1)^((H+W)/2) for even sizes.
    let global = if ((h + w) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let sign = |i: usize, j: usize| if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
    data.indexed_iter_mut()
        .for_each(|((i, j), v)| *v *= sign(i, j));
    if forward {
        fft::fft2(data);
    } else {
        fft::ifft2_unnormalized(data);
    }
    let scale = global / ((h * w) as f64).sqrt();
    data.indexed_iter_mut()
        .for_each(|((i, j), v)| *v *= sign(i, j) * scale);
}

/// Fraunhofer propagation over `distance`; the output pitch is
/// `λ·distance/(N·pitch)`.
pub fn propagate_far(field: &ComplexField, distance: f64, wavelength: f64) -> Result<ComplexField> {
    field.require_finite()?;
    let mut data = field.data().clone();
    far_forward(&mut data);
    let pitch = fraunhofer_pitch(wavelength, distance, field.shape().1, field.pitch());
    Ok(ComplexField::new(data, pitch)?.with_label(field.label()))
}

/// Inverse of [`propagate_far`]: detector plane back to the modulator plane.
pub fn propagate_far_inverse(
    field: &ComplexField,
    distance: f64,
    wavelength: f64,
) -> Result<ComplexField> {
    field.require_finite()?;
    let mut data = field.data().clone();
    far_inverse(&mut data);
    let pitch = fraunhofer_pitch(wavelength, distance, field.shape().1, field.pitch());
    Ok(ComplexField::new(data, pitch)?.with_label(field.label()))
}

/// Linear phase ramp implementing a translation by `(dy, dx)` pixels.
#[derive(Debug, Clone)]
pub struct ShiftRamp {
    ry: Vec<Complex64>,
    rx: Vec<Complex64>,
}

impl ShiftRamp {
    pub fn new(shape: (usize, usize), shift: (f64, f64)) -> Self {
        let (h, w) = shape;
        let ry = (0..h)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * fft::freq_index(k, h) * shift.0 / h as f64))
            .collect();
        let rx = (0..w)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * fft::freq_index(k, w) * shift.1 / w as f64))
            .collect();
        Self { ry, rx }
    }

    /// Multiply a spectrum (unshifted DFT layout) by the ramp.
    pub fn apply_spectrum(&self, spectrum: &mut Array2<Complex64>) {
        for ((i, j), v) in spectrum.indexed_iter_mut() {
            *v *= self.ry[i] * self.rx[j];
        }
    }
}

/// Translate samples by `shift` pixels: `out(r) = data(r - shift)`, circularly.
pub fn fourier_shift_array(data: &Array2<Complex64>, shift: (f64, f64)) -> Array2<Complex64> {
    let mut out = data.clone();
    fourier_shift_inplace(&mut out, shift);
    out
}

pub fn fourier_shift_inplace(data: &mut Array2<Complex64>, shift: (f64, f64)) {
    if shift == (0.0, 0.0) {
        return;
    }
    fft::fft2(data);
    ShiftRamp::new(data.dim(), shift).apply_spectrum(data);
    fft::ifft2(data);
}

pub fn fourier_shift(field: &ComplexField, shift: (f64, f64)) -> Result<ComplexField> {
    field.require_finite()?;
    let (h, w) = field.shape();
    if !(shift.0.is_finite() && shift.1.is_finite())
        || shift.0.abs() >= h as f64 / 2.0
        || shift.1.abs() >= w as f64 / 2.0
    {
        return Err(Error::InvalidArgument(format!(
            "shift {shift:?} must be finite and smaller than half the field ({h}x{w})"
        )));
    }
    Ok(field.replace_data(fourier_shift_array(field.data(), shift)))
}

fn check_even(shape: (usize, usize)) -> Result<()> {
    if shape.0 % 2 != 0 || shape.1 % 2 != 0 || shape.0 == 0 || shape.1 == 0 {
        return Err(Error::Shape(format!("target shape {shape:?} must be even and non-empty")));
    }
    Ok(())
}

/// Zero-pad `data` into `target`, keeping pixel `(H/2, W/2)` on the centre.
pub fn embed_center_array<T: Clone + Default>(
    data: &Array2<T>,
    target: (usize, usize),
) -> Result<Array2<T>> {
    check_even(target)?;
    let (h, w) = data.dim();
    if target.0 < h || target.1 < w {
        return Err(Error::Shape(format!(
            "embed target {target:?} smaller than source {h}x{w}"
        )));
    }
    let (oy, ox) = (target.0 / 2 - h / 2, target.1 / 2 - w / 2);
    let mut out = Array2::from_elem(target, T::default());
    out.slice_mut(s![oy..oy + h, ox..ox + w]).assign(data);
    Ok(out)
}

/// Central `target` window of `data`; inverse of [`embed_center_array`].
pub fn crop_center_array<T: Clone>(data: &Array2<T>, target: (usize, usize)) -> Result<Array2<T>> {
    check_even(target)?;
    let (h, w) = data.dim();
    if target.0 > h || target.1 > w {
        return Err(Error::Shape(format!(
            "crop target {target:?} larger than source {h}x{w}"
        )));
    }
    let (oy, ox) = (h / 2 - target.0 / 2, w / 2 - target.1 / 2);
    Ok(data
        .slice(s![oy..oy + target.0, ox..ox + target.1])
        .to_owned())
}

pub fn embed_center(field: &ComplexField, target: (usize, usize)) -> Result<ComplexField> {
    Ok(ComplexField::new(embed_center_array(field.data(), target)?, field.pitch())?
        .with_label(field.label()))
}

pub fn crop_center(field: &ComplexField, target: (usize, usize)) -> Result<ComplexField> {
    Ok(ComplexField::new(crop_center_array(field.data(), target)?, field.pitch())?
        .with_label(field.label()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_fn((n, n), 1e-6, |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn max_dev(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn rejects_bad_shapes_and_pitch() {
        assert!(ComplexField::zeros((15, 16), 1.0).is_err());
        assert!(ComplexField::zeros((8, 8), 1.0).is_err());
        assert!(ComplexField::zeros((16, 16), 0.0).is_err());
        assert!(ComplexField::zeros((16, 16), f64::NAN).is_err());
        assert!(ComplexField::zeros((16, 32), 1.0).is_ok());
    }

    #[test]
    fn zero_distance_is_exact_identity() {
        let f = random_field(32, 1);
        let g = propagate_near(&f, 0.0, 500e-9).unwrap();
        assert_eq!(f.data(), g.data());
    }

    #[test]
    fn plane_wave_is_eigenfunction() {
        let f = ComplexField::ones((64, 64), 10e-6).unwrap();
        let (z, lambda) = (2.3e-3, 632.8e-9);
        let g = propagate_near(&f, z, lambda).unwrap();
        let expected = Complex64::from_polar(1.0, 2.0 * PI * z / lambda);
        for v in g.data() {
            assert!((v - expected).norm() < 1e-9, "{v} vs {expected}");
        }
    }

    #[test]
    fn aliased_distance_reports_safe_limit() {
        let f = ComplexField::ones((32, 32), 1e-6).unwrap();
        let safe = max_safe_distance((32, 32), 1e-6, 500e-9);
        match propagate_near(&f, 2.0 * safe, 500e-9) {
            Err(Error::Aliased { max_safe, .. }) => assert!((max_safe - safe).abs() < 1e-15),
            other => panic!("expected aliasing error, got {other:?}"),
        }
        assert!(propagate_near(&f, -0.99 * safe, 500e-9).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        let mut f = ComplexField::ones((16, 16), 1e-6).unwrap();
        assert!(propagate_near(&f, f64::NAN, 500e-9).is_err());
        f.data_mut()[[3, 3]] = Complex64::new(f64::INFINITY, 0.0);
        assert!(propagate_near(&f, 1e-6, 500e-9).is_err());
        assert!(propagate_far(&f, 1.0, 500e-9).is_err());
    }

    #[test]
    fn far_field_of_centered_delta_is_flat() {
        let n = 64;
        let mut f = ComplexField::zeros((n, n), 1e-6).unwrap();
        f.data_mut()[[n / 2, n / 2]] = Complex64::new(1.0, 0.0);
        let g = propagate_far(&f, 0.1, 500e-9).unwrap();
        for v in g.data() {
            assert!((v - Complex64::new(1.0 / n as f64, 0.0)).norm() < 1e-14);
        }
        let expected_pitch = 500e-9 * 0.1 / (n as f64 * 1e-6);
        assert!((g.pitch() - expected_pitch).abs() < 1e-20);
    }

    #[test]
    fn far_roundtrip_is_identity() {
        for n in [16, 18, 32, 34] {
            let f = random_field(n, n as u64);
            let g = propagate_far(&f, 0.05, 600e-9).unwrap();
            let back = propagate_far_inverse(&g, 0.05, 600e-9).unwrap();
            assert!(max_dev(f.data(), back.data()) < 1e-12);
            assert!((back.pitch() - f.pitch()).abs() < 1e-18);
            assert!((g.power() - f.power()).abs() / f.power() < 1e-12);
        }
    }

    #[test]
    fn far_matches_explicit_shifted_fft() {
        let f = random_field(18, 3);
        let mut a = f.data().clone();
        far_forward(&mut a);
        let mut b = fft::ifftshift(f.data());
        fft::fft2(&mut b);
        let b = fft::fftshift(&b).mapv(|v| v / 18.0);
        assert!(max_dev(&a, &b) < 1e-12);
    }

    #[test]
    fn integer_shift_is_circular_roll() {
        let f = random_field(32, 9);
        let g = fourier_shift(&f, (3.0, -2.0)).unwrap();
        let (h, w) = f.shape();
        for ((i, j), v) in g.data().indexed_iter() {
            let src = f.data()[[(i + h - 3) % h, (j + 2) % w]];
            assert!((v - src).norm() < 1e-10);
        }
    }

    #[test]
    fn half_shift_twice_equals_unit_shift() {
        let f = random_field(32, 11);
        let half = fourier_shift(&fourier_shift(&f, (0.5, 0.0)).unwrap(), (0.5, 0.0)).unwrap();
        let one = fourier_shift(&f, (1.0, 0.0)).unwrap();
        assert!(max_dev(half.data(), one.data()) < 1e-10);
        assert_eq!(fourier_shift(&f, (0.0, 0.0)).unwrap(), f);
        assert!(fourier_shift(&f, (16.0, 0.0)).is_err());
    }

    #[test]
    fn embed_crop_examples() {
        let small = Array2::from_shape_fn((4, 4), |(i, j)| Complex64::new(i as f64, j as f64));
        let big = embed_center_array(&small, (8, 8)).unwrap();
        assert_eq!(crop_center_array(&big, (4, 4)).unwrap(), small);
        assert_eq!(power(&big), power(&small));
        assert_eq!(big[[4, 4]], small[[2, 2]]);

        let ones = Array2::from_elem((8, 8), 1.0_f64);
        assert_eq!(crop_center_array(&ones, (4, 4)).unwrap(), Array2::from_elem((4, 4), 1.0));

        assert!(embed_center_array(&small, (7, 8)).is_err());
        assert!(embed_center_array(&small, (2, 8)).is_err());
        assert!(crop_center_array(&small, (6, 4)).is_err());
    }

    #[test]
    fn geometry_checks_fraunhofer_scaling() {
        let g = Geometry::far_field(632.8e-9, 11.5e-3, 30e-3, 6.5e-6, 128).unwrap();
        assert!((g.sample_plane_pitch - 632.8e-9 * 30e-3 / (128.0 * 6.5e-6)).abs() < 1e-18);
        let mut bad = g;
        bad.sample_plane_pitch *= 1.0 + 1e-6;
        assert!(bad.validate(128).is_err());
        bad.far_field = false;
        assert!(bad.validate(128).is_ok());
        bad.wavelength = -1.0;
        assert!(bad.validate(128).is_err());
    }
}
