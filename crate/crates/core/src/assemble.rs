//! Merge per-frame objects into one sample image and refine it with ePIE
//! through the full modulator forward model.

use ndarray::{s, Array2, Zip};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::modulus_project;
use crate::error::{Error, Result};
use crate::field::{far_forward, far_inverse, fourier_shift_array, ComplexField, NearPropagator};
use crate::mask;
use crate::simulate::ScanDataset;

/// Raised-cosine edge width of the stitching weights, pixels.
pub const FEATHER_PX: f64 = 8.0;
/// Largest canvas side accepted.
pub const MAX_CANVAS_PX: usize = 16_384;
/// Pixels whose accumulated weight is below this are treated as unvisited.
const MIN_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct StitchedObject {
    pub canvas: ComplexField,
    /// Accumulated blending weight per canvas pixel.
    pub weights: Array2<f64>,
    /// Canvas coordinate `(row, col)` of the centre of a frame at position
    /// `(0, 0)`.
    pub origin: (f64, f64),
}

impl StitchedObject {
    /// Canvas pixels covered by at least one frame with weight ≥ `min`.
    pub fn visited(&self, min: f64) -> Array2<bool> {
        self.weights.mapv(|w| w >= min)
    }
}

fn canvas_layout(positions: &[(f64, f64)], frame: (usize, usize)) -> Result<((usize, usize), (f64, f64))> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("no positions".into()));
    }
    if positions.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::InvalidArgument("non-finite position".into()));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, axis: usize| {
        positions
            .iter()
            .map(|p| if axis == 0 { p.0 } else { p.1 })
            .fold(init, f)
    };
    let (ymin, ymax) = (fold(f64::min, f64::INFINITY, 0), fold(f64::max, f64::NEG_INFINITY, 0));
    let (xmin, xmax) = (fold(f64::min, f64::INFINITY, 1), fold(f64::max, f64::NEG_INFINITY, 1));
    let pad = 2.0;
    let even = |v: f64| {
        let n = v.ceil() as usize;
        n + n % 2
    };
    let h = even(ymax - ymin + frame.0 as f64 + 2.0 * pad);
    let w = even(xmax - xmin + frame.1 as f64 + 2.0 * pad);
    if h > MAX_CANVAS_PX || w > MAX_CANVAS_PX {
        return Err(Error::InvalidArgument(format!(
            "positions span a {h}x{w} canvas, above the {MAX_CANVAS_PX} px limit"
        )));
    }
    let origin = (
        (pad + (frame.0 / 2) as f64 - ymin).round(),
        (pad + (frame.1 / 2) as f64 - xmin).round(),
    );
    Ok(((h, w), origin))
}

/// Integer top-left canvas corner and fractional remainder of a frame.
fn placement(origin: (f64, f64), position: (f64, f64), frame: (usize, usize)) -> ((isize, isize), (f64, f64)) {
    let cy = origin.0 + position.0;
    let cx = origin.1 + position.1;
    let (iy, ix) = (cy.round(), cx.round());
    (
        (iy as isize - (frame.0 / 2) as isize, ix as isize - (frame.1 / 2) as isize),
        (cy - iy, cx - ix),
    )
}

fn check_inside(corner: (isize, isize), frame: (usize, usize), canvas: (usize, usize)) -> Result<()> {
    if corner.0 < 0
        || corner.1 < 0
        || corner.0 as usize + frame.0 > canvas.0
        || corner.1 as usize + frame.1 > canvas.1
    {
        return Err(Error::InvalidArgument(format!(
            "frame at corner {corner:?} leaves the {}x{} canvas",
            canvas.0, canvas.1
        )));
    }
    Ok(())
}

/// Blending weight of one object: its non-zero region, feathered.
pub fn frame_weight(object: &Array2<Complex64>) -> Array2<f64> {
    let region = object.mapv(|v| v != Complex64::new(0.0, 0.0));
    mask::feather(&region, FEATHER_PX)
}

struct Placed {
    corner: (isize, isize),
    weighted: Array2<Complex64>,
    weight: Array2<f64>,
}

// The weight stays on the integer grid: shifting it too would let the
// ringing of both shifted arrays blow up their ratio where it is small.
fn place(object: &Array2<Complex64>, origin: (f64, f64), position: (f64, f64)) -> Placed {
    let frame = object.dim();
    let (corner, frac) = placement(origin, position, frame);
    let weight = frame_weight(object);
    let shifted = if frac == (0.0, 0.0) {
        object.clone()
    } else {
        fourier_shift_array(object, frac)
    };
    Placed {
        corner,
        weighted: shifted * &weight.mapv(|v| Complex64::new(v, 0.0)),
        weight,
    }
}

fn accumulate(
    shape: (usize, usize),
    placed: &[Placed],
    frame: (usize, usize),
) -> Result<(Array2<Complex64>, Array2<f64>)> {
    let mut num = Array2::<Complex64>::zeros(shape);
    let mut den = Array2::<f64>::zeros(shape);
    for p in placed {
        check_inside(p.corner, frame, shape)?;
        let (y, x) = (p.corner.0 as usize, p.corner.1 as usize);
        let mut n = num.slice_mut(s![y..y + frame.0, x..x + frame.1]);
        n += &p.weighted;
        let mut d = den.slice_mut(s![y..y + frame.0, x..x + frame.1]);
        d += &p.weight;
    }
    Ok((num, den))
}

fn finish(num: Array2<Complex64>, den: Array2<f64>) -> Array2<Complex64> {
    let mut out = num;
    Zip::from(&mut out).and(&den).for_each(|v, &d| {
        *v = if d >= MIN_WEIGHT { *v / d } else { Complex64::new(1.0, 0.0) };
    });
    out
}

/// Weighted mean of the objects placed at their positions (sub-pixel by
/// Fourier shift). Unvisited canvas pixels are 1.
pub fn stitch_initial(
    objects: &[Array2<Complex64>],
    positions: &[(f64, f64)],
    pitch: f64,
) -> Result<StitchedObject> {
    if objects.len() != positions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} objects but {} positions",
            objects.len(),
            positions.len()
        )));
    }
    let frame = objects
        .first()
        .ok_or_else(|| Error::InvalidArgument("no objects".into()))?
        .dim();
    if objects.iter().any(|o| o.dim() != frame) {
        return Err(Error::Shape("objects differ in shape".into()));
    }
    let (shape, origin) = canvas_layout(positions, frame)?;
    let placed: Vec<Placed> = objects
        .par_iter()
        .zip(positions.par_iter())
        .map(|(o, p)| place(o, origin, *p))
        .collect();
    let (num, den) = accumulate(shape, &placed, frame)?;
    let den_out = den.mapv(|d| if d >= MIN_WEIGHT { d } else { 0.0 });
    Ok(StitchedObject {
        canvas: ComplexField::new(finish(num, den), pitch)?.with_label("object"),
        weights: den_out,
        origin,
    })
}

/// Remove the arbitrary per-frame global phase: frames are visited in order
/// of distance from frame 0 and rotated onto the mosaic of those already
/// placed.
pub fn align_object_phases(
    objects: &[Array2<Complex64>],
    positions: &[(f64, f64)],
) -> Result<Vec<Array2<Complex64>>> {
    if objects.len() != positions.len() || objects.is_empty() {
        return Err(Error::InvalidArgument("objects and positions must be non-empty and equal in number".into()));
    }
    let frame = objects[0].dim();
    let (shape, origin) = canvas_layout(positions, frame)?;
    let placed: Vec<Placed> = objects
        .par_iter()
        .zip(positions.par_iter())
        .map(|(o, p)| place(o, origin, *p))
        .collect();
    let p0 = positions[0];
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (positions[a].0 - p0.0).hypot(positions[a].1 - p0.1);
        let db = (positions[b].0 - p0.0).hypot(positions[b].1 - p0.1);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut num = Array2::<Complex64>::zeros(shape);
    let mut den = Array2::<f64>::zeros(shape);
    let mut phases = vec![Complex64::new(1.0, 0.0); objects.len()];
    for &k in &order {
        let p = &placed[k];
        check_inside(p.corner, frame, shape)?;
        let (y, x) = (p.corner.0 as usize, p.corner.1 as usize);
        let win = s![y..y + frame.0, x..x + frame.1];
        // ⟨mosaic, frame⟩ weighted by both coverages
        let mut c = Complex64::new(0.0, 0.0);
        Zip::from(&num.slice(win))
            .and(&den.slice(win))
            .and(&p.weighted)
            .and(&p.weight)
            .for_each(|n, &d, v, &w| {
                if d >= MIN_WEIGHT && w >= MIN_WEIGHT {
                    c += v.conj() * (n / d) * w;
                }
            });
        let ph = if c.norm() > 0.0 { c / c.norm() } else { Complex64::new(1.0, 0.0) };
        phases[k] = ph;
        let mut n = num.slice_mut(win);
        Zip::from(&mut n).and(&p.weighted).for_each(|a, v| *a += v * ph);
        let mut d = den.slice_mut(win);
        d += &p.weight;
    }
    Ok(objects
        .iter()
        .zip(&phases)
        .map(|(o, ph)| o.mapv(|v| v * ph))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpieConfig {
    pub sweeps: usize,
    /// Object step size.
    pub alpha: f64,
    /// Probe step size.
    pub beta: f64,
    pub update_probe: bool,
    /// Abort when the sweep residual exceeds this multiple of its minimum.
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for EpieConfig {
    fn default() -> Self {
        Self {
            sweeps: 100,
            alpha: 1.0,
            beta: 1.0,
            update_probe: true,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

impl EpieConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 {
            return Err(Error::Config("ePIE sweeps must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0 && self.beta > 0.0 && self.beta <= 2.0) {
            return Err(Error::Config("ePIE step sizes must lie in (0, 2]".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpieResult {
    pub object: StitchedObject,
    pub probe: ComplexField,
    pub residuals: Vec<f64>,
}

/// Sequential ePIE over the whole canvas at fixed positions, modulator
/// fixed. `drifts` optionally displaces the probe per frame.
pub fn epie_refine(
    dataset: &ScanDataset,
    positions: &[(f64, f64)],
    drifts: Option<&[(f64, f64)]>,
    probe: &ComplexField,
    modulator: &ComplexField,
    initial: &StitchedObject,
    config: &EpieConfig,
) -> Result<EpieResult> {
    config.validate()?;
    dataset.validate()?;
    let n = dataset.n_frames();
    let frame = dataset.frame_shape();
    if positions.len() != n || drifts.is_some_and(|d| d.len() != n) {
        return Err(Error::InvalidArgument("one position (and drift) per frame required".into()));
    }
    if probe.shape() != frame || modulator.shape() != frame {
        return Err(Error::Shape("probe and modulator must match the frame shape".into()));
    }
    let g = &dataset.geometry;
    let near = NearPropagator::new(frame, g.sample_plane_pitch, g.z_sample_to_modulator, g.wavelength)?;
    let m = modulator.data();
    let valid = dataset.valid_mask.as_ref();

    let mut canvas = initial.canvas.data().clone();
    let mut p = probe.data().clone();
    let shape = canvas.dim();
    let layout: Vec<((isize, isize), (f64, f64))> = positions
        .iter()
        .map(|&pos| placement(initial.origin, pos, frame))
        .collect();
    for (corner, _) in &layout {
        check_inside(*corner, frame, shape)?;
    }
    let total: f64 = dataset.frames.iter().map(|f| match valid {
        None => f.sum(),
        Some(v) => f.iter().zip(v).filter(|(_, &ok)| ok).map(|(x, _)| x).sum(),
    }).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut residuals = Vec::with_capacity(config.sweeps);
    let mut best = f64::INFINITY;
    for _ in 0..config.sweeps {
        order.shuffle(&mut rng);
        let mut misfit = 0.0;
        for &k in &order {
            let (corner, frac) = layout[k];
            let d = drifts.map_or((0.0, 0.0), |d| d[k]);
            let probe_shift = (frac.0 + d.0, frac.1 + d.1);
            let (y, x) = (corner.0 as usize, corner.1 as usize);
            let win = s![y..y + frame.0, x..x + frame.1];
            let patch = canvas.slice(win).to_owned();
            let pk = if probe_shift == (0.0, 0.0) {
                p.clone()
            } else {
                fourier_shift_array(&p, probe_shift)
            };
            let psi_s = &pk * &patch;
            // the patch grid sits `frac` off the frame grid
            let mut wave = if frac == (0.0, 0.0) {
                psi_s.clone()
            } else {
                fourier_shift_array(&psi_s, (-frac.0, -frac.1))
            };
            near.forward(&mut wave);
            Zip::from(&mut wave).and(m).for_each(|w, mm| *w *= mm);
            far_forward(&mut wave);
            let intensity = &dataset.frames[k];
            match valid {
                None => Zip::from(&wave).and(intensity).for_each(|w, &i| {
                    misfit += (w.norm() - i.sqrt()).powi(2);
                }),
                Some(v) => Zip::from(&wave).and(intensity).and(v).for_each(|w, &i, &ok| {
                    if ok {
                        misfit += (w.norm() - i.sqrt()).powi(2);
                    }
                }),
            }
            let mut chi = modulus_project(&wave, intensity, valid)?;
            far_inverse(&mut chi);
            let eps = 1e-3 * m.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
            Zip::from(&mut chi).and(m).for_each(|c, mm| *c = mm.conj() * *c / mm.norm_sqr().max(eps));
            near.backward(&mut chi);
            let psi_new = if frac == (0.0, 0.0) {
                chi
            } else {
                fourier_shift_array(&chi, frac)
            };
            if psi_new.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
                return Err(Error::Diverged { frame: k, stage: "ePIE update" });
            }
            let diff = &psi_new - &psi_s;
            let pmax = pk.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let omax = patch.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            {
                let mut target = canvas.slice_mut(win);
                Zip::from(&mut target)
                    .and(&pk)
                    .and(&diff)
                    .for_each(|o, pp, df| *o += config.alpha * pp.conj() * df / pmax);
            }
            if config.update_probe {
                let mut new_pk = pk;
                Zip::from(&mut new_pk)
                    .and(&patch)
                    .and(&diff)
                    .for_each(|pp, o, df| *pp += config.beta * o.conj() * df / omax);
                p = if probe_shift == (0.0, 0.0) {
                    new_pk
                } else {
                    fourier_shift_array(&new_pk, (-probe_shift.0, -probe_shift.1))
                };
            }
        }
        let r = if total > 0.0 { misfit / total } else { 0.0 };
        residuals.push(r);
        if !r.is_finite() {
            return Err(Error::Divergence("ePIE residual became non-finite".into()));
        }
        best = best.min(r);
        if r > config.divergence_factor * best {
            return Err(Error::Divergence(format!(
                "ePIE residual {r:.3e} exceeds {}× its minimum {best:.3e}",
                config.divergence_factor
            )));
        }
    }
    Ok(EpieResult {
        object: StitchedObject {
            canvas: ComplexField::new(canvas, initial.canvas.pitch())?.with_label("object"),
            weights: initial.weights.clone(),
            origin: initial.origin,
        },
        probe: ComplexField::new(p, probe.pitch())?.with_label("probe"),
        residuals,
    })
}

/// Optimal complex scale `γ = ⟨a, b⟩/⟨a, a⟩` over `mask` and the residual
/// `‖γa − b‖/‖b‖`.
pub fn global_phase_align(
    a: &Array2<Complex64>,
    b: &Array2<Complex64>,
    mask: &Array2<bool>,
) -> Result<(Complex64, f64)> {
    if a.dim() != b.dim() || a.dim() != mask.dim() {
        return Err(Error::Shape("global_phase_align inputs differ in shape".into()));
    }
    let mut ab = Complex64::new(0.0, 0.0);
    let (mut aa, mut bb) = (0.0, 0.0);
    let mut any = false;
    Zip::from(a).and(b).and(mask).for_each(|x, y, &m| {
        if m {
            any = true;
            ab += x.conj() * y;
            aa += x.norm_sqr();
            bb += y.norm_sqr();
        }
    });
    if !any {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::InvalidArgument("field is zero over the mask".into()));
    }
    let gamma = ab / aa;
    let mut err = 0.0;
    Zip::from(a).and(b).and(mask).for_each(|x, y, &m| {
        if m {
            err += (gamma * x - y).norm_sqr();
        }
    });
    Ok((gamma, (err / bb).sqrt()))
}

/// NRMSE of a stitched canvas against the true sample over pixels with
/// blending weight ≥ `min_weight`. Recovered positions carry an arbitrary
/// common offset; it is taken as the mean difference to the true positions
/// before the true sample is cut out under the canvas.
pub fn object_nrmse(
    stitched: &StitchedObject,
    positions: &[(f64, f64)],
    truth_positions: &[(f64, f64)],
    sample: &Array2<Complex64>,
    min_weight: f64,
) -> Result<f64> {
    if positions.len() != truth_positions.len() || positions.is_empty() {
        return Err(Error::InvalidArgument("position lists differ in length".into()));
    }
    let n = positions.len() as f64;
    let dy = positions.iter().zip(truth_positions).map(|(p, t)| t.0 - p.0).sum::<f64>() / n;
    let dx = positions.iter().zip(truth_positions).map(|(p, t)| t.1 - p.1).sum::<f64>() / n;
    let (h, w) = stitched.canvas.shape();
    let at = (
        (h / 2) as f64 - stitched.origin.0 + dy,
        (w / 2) as f64 - stitched.origin.1 + dx,
    );
    let truth = crate::simulate::extract_patch(sample, at, (h, w));
    Ok(global_phase_align(stitched.canvas.data(), &truth, &stitched.visited(min_weight))?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn disc_object(seed: u64) -> Array2<Complex64> {
        let m = mask::centered_disk((32, 32), 12.0);
        let mut o = random((32, 32), seed);
        Zip::from(&mut o).and(&m).for_each(|v, &k| {
            if !k {
                *v = Complex64::new(0.0, 0.0)
            }
        });
        o
    }

    #[test]
    fn single_frame_is_reproduced_inside_its_region() {
        let o = disc_object(1);
        let st = stitch_initial(&[o.clone()], &[(0.0, 0.0)], 1.0).unwrap();
        let c = st.canvas.data();
        let (oy, ox) = (st.origin.0 as usize - 16, st.origin.1 as usize - 16);
        for ((i, j), v) in o.indexed_iter() {
            let cv = c[[oy + i, ox + j]];
            if v.norm() > 0.0 {
                assert!((cv - v).norm() < 1e-12);
            } else {
                assert_eq!(cv, Complex64::new(1.0, 0.0));
            }
        }
        assert_eq!(c[[0, 0]], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn identical_overlapping_frames_average_to_themselves() {
        let o = disc_object(2);
        let st = stitch_initial(&[o.clone(), o.clone()], &[(0.0, 0.0), (0.0, 0.0)], 1.0).unwrap();
        let (oy, ox) = (st.origin.0 as usize - 16, st.origin.1 as usize - 16);
        for ((i, j), v) in o.indexed_iter() {
            if v.norm() > 0.0 {
                assert!((st.canvas.data()[[oy + i, ox + j]] - v).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn stitching_is_permutation_invariant() {
        let objs: Vec<_> = (0..4).map(|k| disc_object(10 + k)).collect();
        let pos = vec![(0.0, 0.0), (3.3, 7.1), (-5.2, 2.0), (8.0, -4.4)];
        let a = stitch_initial(&objs, &pos, 1.0).unwrap();
        let perm = [2usize, 0, 3, 1];
        let objs2: Vec<_> = perm.iter().map(|&k| objs[k].clone()).collect();
        let pos2: Vec<_> = perm.iter().map(|&k| pos[k]).collect();
        let b = stitch_initial(&objs2, &pos2, 1.0).unwrap();
        for (x, y) in a.canvas.data().iter().zip(b.canvas.data()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn canvas_limit_is_enforced() {
        let o = disc_object(3);
        assert!(stitch_initial(&[o.clone(), o], &[(0.0, 0.0), (0.0, 20_000.0)], 1.0).is_err());
    }

    #[test]
    fn phase_alignment_removes_frame_phases() {
        let base = random((64, 64), 4);
        let frame = (32, 32);
        let region = mask::centered_disk(frame, 12.0);
        let pos = [(0.0, 0.0), (0.0, 8.0), (8.0, 0.0)];
        let objs: Vec<_> = pos
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut o = Array2::from_shape_fn(frame, |(i, j)| {
                    base[[(16 + i as isize + p.0 as isize) as usize, (16 + j as isize + p.1 as isize) as usize]]
                });
                Zip::from(&mut o).and(&region).for_each(|v, &m| {
                    if !m {
                        *v = Complex64::new(0.0, 0.0)
                    }
                });
                o.mapv(|v| v * Complex64::from_polar(1.0, 0.9 * k as f64))
            })
            .collect();
        let aligned = align_object_phases(&objs, &pos).unwrap();
        for (k, a) in aligned.iter().enumerate() {
            let c: Complex64 = a.iter().zip(objs[k].iter()).map(|(x, y)| y.conj() * x).sum();
            let expected = -0.9 * k as f64;
            assert!((c.arg() - expected).abs() < 1e-9, "frame {k}: {}", c.arg());
        }
    }

    #[test]
    fn global_phase_align_examples() {
        let a = random((16, 16), 5);
        let m = Array2::from_elem((16, 16), true);
        let b = a.mapv(|v| v * Complex64::from_polar(1.0, 0.7));
        let (g, e) = global_phase_align(&a, &b, &m).unwrap();
        assert!((g.norm() - 1.0).abs() < 1e-12 && e < 1e-12);
        let (g, e) = global_phase_align(&a, &a.mapv(|v| v * 2.0), &m).unwrap();
        assert!((g - Complex64::new(2.0, 0.0)).norm() < 1e-12 && e < 1e-12);
        let big_a = random((256, 256), 6);
        let big_b = random((256, 256), 7);
        let mm = Array2::from_elem((256, 256), true);
        assert!(global_phase_align(&big_a, &big_b, &mm).unwrap().1 >= 0.9);
        assert!(global_phase_align(&a, &b, &Array2::from_elem((16, 16), false)).is_err());
    }
}
