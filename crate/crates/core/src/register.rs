//! Sub-pixel registration of object patches and global position recovery.
//!
//! `subpixel_shift_estimate(f, g)` returns the shift `s` with
//! `g(r) ≈ f(r − s)`. Pairwise measurements between frames are combined by
//! weighted least squares over the frame graph, anchored at frame 0.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{crop_center_array, embed_center_array, far_forward, far_inverse};
use crate::mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterOptions {
    /// Replace both images by their scaling gradient before correlating.
    pub precondition: bool,
    /// Pixels trimmed per side of the spectrum for the scaling gradient.
    pub trim: usize,
    /// Upsampling density of the sub-pixel refinement.
    pub upsample: usize,
    /// Register `|f|`, `|g|` instead of the complex patches.
    pub magnitude_only: bool,
    /// Subtract the mean over the non-zero region first.
    pub remove_mean: bool,
    /// Raised-cosine taper applied inside the non-zero region, pixels.
    /// Suppresses the region's own boundary as a registration feature. In
    /// masked mode it weights the pixels of the normalised correlation
    /// instead, so pixels near a region's rim enter and leave the overlap
    /// gradually as the shift changes.
    pub taper_px: f64,
    /// Normalise the correlation by the statistics of the overlapping part
    /// of the two non-zero regions at every shift (masked NCC). Removes the
    /// bias towards shifts with a larger window overlap.
    pub masked: bool,
    /// Masked mode: shifts whose overlap is below this fraction of the
    /// smaller region are not considered.
    pub min_overlap: f64,
    /// Masked mode: re-estimate with both regions cut to their overlap at
    /// the first estimate, so the compared pixel set barely changes across
    /// the refinement window.
    pub restrict_overlap: bool,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            precondition: false,
            trim: 2,
            upsample: 50,
            magnitude_only: false,
            remove_mean: true,
            taper_px: 0.0,
            masked: false,
            min_overlap: 0.05,
            restrict_overlap: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftMeasurement {
    pub frame_i: usize,
    pub frame_j: usize,
    /// `position_j − position_i`, pixels `(dy, dx)`.
    pub delta: (f64, f64),
    pub confidence: f64,
    pub peak_ratio: f64,
    pub accepted: bool,
}

/// Scaling-gradient preconditioner: a copy magnified by `a = N/(N−2m)`
/// about the centre (by cropping the centred spectrum), amplitude-matched by
/// `1/a`, minus the original.
pub fn scaling_gradient(image: &Array2<Complex64>, m: usize) -> Result<Array2<Complex64>> {
    let (h, w) = image.dim();
    if m == 0 || 4 * m >= h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "scaling-gradient trim {m} must satisfy 1 ≤ m < N/4 for a {h}x{w} image"
        )));
    }
    scaling_gradient_unchecked(image, m)
}

pub(crate) fn scaling_gradient_unchecked(image: &Array2<Complex64>, m: usize) -> Result<Array2<Complex64>> {
    let (h, w) = image.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("scaling gradient needs even sizes, got {h}x{w}")));
    }
    let mut spec = image.clone();
    far_forward(&mut spec);
    let small = (h - 2 * m, w - 2 * m);
    let mut scaled = crop_center_array(&spec, small)?;
    far_inverse(&mut scaled);
    let inv_a = ((small.0 * small.1) as f64 / (h * w) as f64).sqrt();
    scaled.mapv_inplace(|v| v * inv_a);
    let mut out = embed_center_array(&scaled, (h, w))?;
    out -= image;
    Ok(out)
}

/// Mean removal over the non-zero region, then a feathered edge.
fn prepare(image: &Array2<Complex64>, opts: &RegisterOptions) -> Array2<Complex64> {
    let mut img = if opts.magnitude_only {
        image.mapv(|v| Complex64::new(v.norm(), 0.0))
    } else {
        image.clone()
    };
    let region = img.mapv(|v| v != Complex64::new(0.0, 0.0));
    let count = region.iter().filter(|&&b| b).count();
    if count == 0 {
        return img;
    }
    let mean = if opts.remove_mean {
        img.sum() / count as f64
    } else {
        Complex64::new(0.0, 0.0)
    };
    let weight = if opts.taper_px > 0.0 {
        mask::feather(&region, opts.taper_px)
    } else {
        region.mapv(|b| if b { 1.0 } else { 0.0 })
    };
    Zip::from(&mut img).and(&weight).for_each(|v, &wt| {
        *v = if wt > 0.0 { (*v - mean) * wt } else { Complex64::new(0.0, 0.0) };
    });
    img
}

fn norm(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Inverse DFT (with `1/(H·W)`) of `spectrum` at the shifts
/// `center + k·step`, `k ∈ [−half, half]` per axis, by matrix DFT.
fn lattice_dft(
    spectrum: &Array2<Complex64>,
    center: (f64, f64),
    half: usize,
    step: f64,
) -> Array2<Complex64> {
    let (h, w) = spectrum.dim();
    let n = 2 * half + 1;
    let off = |k: usize| (k as f64 - half as f64) * step;
    let ey = Array2::from_shape_fn((n, h), |(a, k)| {
        let s = center.0 + off(a);
        Complex64::from_polar(1.0, 2.0 * PI * fft::freq_index(k, h) * s / h as f64)
    });
    let ex = Array2::from_shape_fn((w, n), |(k, b)| {
        let s = center.1 + off(b);
        Complex64::from_polar(1.0, 2.0 * PI * fft::freq_index(k, w) * s / w as f64)
    });
    let scale = 1.0 / (h * w) as f64;
    let mut out = ey.dot(spectrum).dot(&ex);
    out.mapv_inplace(|v| v * scale);
    out
}

/// Maximise `score` over `peak ± 1` px at density `kappa`: a lattice of
/// step `1/min(κ, 10)` first, then step `1/κ` around its best point.
fn refine<F>(peak: (f64, f64), kappa: usize, score: F) -> ((f64, f64), f64)
where
    F: Fn((f64, f64), usize, f64) -> Array2<f64>,
{
    let best_of = |center: (f64, f64), half: usize, step: f64| {
        let vals = score(center, half, step);
        let (mut bi, mut bv) = ((half, half), f64::NEG_INFINITY);
        for ((i, j), &v) in vals.indexed_iter() {
            if v > bv {
                bv = v;
                bi = (i, j);
            }
        }
        (
            (
                center.0 + (bi.0 as f64 - half as f64) * step,
                center.1 + (bi.1 as f64 - half as f64) * step,
            ),
            bv,
        )
    };
    let k1 = kappa.min(10);
    let (coarse, v1) = best_of(peak, k1, 1.0 / k1 as f64);
    if kappa <= k1 {
        return (coarse, v1);
    }
    let half = kappa.div_ceil(k1);
    let (fine, v2) = best_of(coarse, half, 1.0 / kappa as f64);
    if v2 >= v1 {
        (fine, v2)
    } else {
        (coarse, v1)
    }
}

fn circular_distance_sq(a: (usize, usize), b: (usize, usize), shape: (usize, usize)) -> f64 {
    let circ = |d: f64, n: usize| {
        let d = d.rem_euclid(n as f64);
        d.min(n as f64 - d)
    };
    let dy = circ(a.0 as f64 - b.0 as f64, shape.0);
    let dx = circ(a.1 as f64 - b.1 as f64, shape.1);
    dy * dy + dx * dx
}

/// Index and value of the maximum of `vals` (ignoring NaN), and the largest
/// value at least 5 px (circularly) away from it.
fn primary_and_secondary(vals: &Array2<f64>) -> ((usize, usize), f64, f64) {
    let (mut best, mut best_val) = ((0usize, 0usize), f64::NEG_INFINITY);
    for ((i, j), &v) in vals.indexed_iter() {
        if v > best_val {
            best_val = v;
            best = (i, j);
        }
    }
    let secondary = vals
        .indexed_iter()
        .filter(|(idx, _)| circular_distance_sq(*idx, best, vals.dim()) >= 25.0)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    (best, best_val, secondary)
}

fn ratio(peak: f64, secondary: f64) -> f64 {
    if secondary > 0.0 {
        (peak / secondary).max(1.0).min(f64::MAX)
    } else {
        f64::MAX
    }
}

/// Shift `s` with `g(r) ≈ f(r − s)`, with normalised peak height and the
/// ratio of the peak to the strongest competing peak ≥ 5 px away.
/// `frame_i`/`frame_j` are left at 0; see [`measure_pairwise_shifts`].
pub fn subpixel_shift_estimate(
    f: &Array2<Complex64>,
    g: &Array2<Complex64>,
    opts: &RegisterOptions,
) -> Result<ShiftMeasurement> {
    if f.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "registration inputs differ: {:?} vs {:?}",
            f.dim(),
            g.dim()
        )));
    }
    if opts.upsample == 0 {
        return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
    }
    if opts.masked {
        let first = masked_estimate(f, g, opts)?;
        if !opts.restrict_overlap {
            return Ok(first);
        }
        let (fr, gr) = restrict_to_overlap(f, g, first.delta);
        return match masked_estimate(&fr, &gr, opts) {
            Ok(m) if (m.delta.0 - first.delta.0).abs() <= 1.0 && (m.delta.1 - first.delta.1).abs() <= 1.0 => {
                Ok(ShiftMeasurement { confidence: first.confidence, peak_ratio: first.peak_ratio, ..m })
            }
            _ => Ok(first),
        };
    }
    let mut a = prepare(f, opts);
    let mut b = prepare(g, opts);
    if opts.precondition {
        a = scaling_gradient(&a, opts.trim)?;
        b = scaling_gradient(&b, opts.trim)?;
    }
    let (na, nb) = check_norms(&a, &b, f, g)?;

    let (h, w) = a.dim();
    fft::fft2(&mut a);
    fft::fft2(&mut b);
    let mut cross = b;
    Zip::from(&mut cross).and(&a).for_each(|c, fa| *c *= fa.conj());
    let mut corr = cross.clone();
    fft::ifft2(&mut corr);

    let mags = corr.mapv(|v| v.norm());
    let (best, best_val, secondary) = primary_and_secondary(&mags);
    let peak0 = (fft::freq_index(best.0, h), fft::freq_index(best.1, w));
    let (delta, peak) = if opts.upsample > 1 {
        let (d, v) = refine(peak0, opts.upsample, |c, half, step| {
            lattice_dft(&cross, c, half, step).mapv(|v| v.norm())
        });
        (d, v.max(best_val))
    } else {
        (peak0, best_val)
    };
    Ok(ShiftMeasurement {
        frame_i: 0,
        frame_j: 0,
        delta,
        confidence: (peak / (na * nb)).min(1.0),
        peak_ratio: ratio(peak, secondary),
        accepted: true,
    })
}

fn check_norms(
    a: &Array2<Complex64>,
    b: &Array2<Complex64>,
    f: &Array2<Complex64>,
    g: &Array2<Complex64>,
) -> Result<(f64, f64)> {
    let (na, nb) = (norm(a), norm(b));
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("registration input"));
    }
    // a constant patch leaves only rounding noise after mean removal
    let tiny = 1e-12 * (norm(f) + norm(g));
    if !(na > tiny && nb > tiny) {
        return Err(Error::Featureless);
    }
    Ok((na, nb))
}

/// Masked normalised cross-correlation: at each shift, the correlation
/// coefficient of the two images over the overlap of their non-zero regions.
/// Cut both regions to their overlap at shift `delta` (rounded). The two
/// cut regions are translates of each other, so the overlap shrinks
/// symmetrically on either side of the estimate.
fn restrict_to_overlap(
    f: &Array2<Complex64>,
    g: &Array2<Complex64>,
    delta: (f64, f64),
) -> (Array2<Complex64>, Array2<Complex64>) {
    let (h, w) = f.dim();
    let (dy, dx) = (delta.0.round() as isize, delta.1.round() as isize);
    let zero = Complex64::new(0.0, 0.0);
    let nonzero_at = |x: &Array2<Complex64>, i: isize, j: isize| {
        (0..h as isize).contains(&i) && (0..w as isize).contains(&j) && x[[i as usize, j as usize]] != zero
    };
    // overlap at shift s pairs f(r) with g(r + s)
    let fr = Array2::from_shape_fn((h, w), |(i, j)| {
        let v = f[[i, j]];
        if v != zero && nonzero_at(g, i as isize + dy, j as isize + dx) { v } else { zero }
    });
    let gr = Array2::from_shape_fn((h, w), |(i, j)| {
        let v = g[[i, j]];
        if v != zero && nonzero_at(f, i as isize - dy, j as isize - dx) { v } else { zero }
    });
    (fr, gr)
}

fn masked_estimate(
    f: &Array2<Complex64>,
    g: &Array2<Complex64>,
    opts: &RegisterOptions,
) -> Result<ShiftMeasurement> {
    let prep = |x: &Array2<Complex64>| {
        if opts.magnitude_only {
            x.mapv(|v| Complex64::new(v.norm(), 0.0))
        } else {
            x.clone()
        }
    };
    let (a, b) = (prep(f), prep(g));
    let zero = Complex64::new(0.0, 0.0);
    // weights: the non-zero region, optionally feathered
    let weight_of = |x: &Array2<Complex64>| {
        let region = x.mapv(|v| v != zero);
        mask::feather(&region, opts.taper_px.max(0.0))
    };
    let (wa, wb) = (weight_of(&a), weight_of(&b));
    let (na, nb) = (wa.sum(), wb.sum());
    let variance = |x: &Array2<Complex64>, w: &Array2<f64>, n: f64| {
        if n == 0.0 {
            return 0.0;
        }
        let mean = Zip::from(x).and(w).fold(zero, |acc, v, &k| acc + v * k) / n;
        Zip::from(x).and(w).fold(0.0, |acc, v, &k| acc + k * (v - mean).norm_sqr())
    };
    let (va, vb) = (variance(&a, &wa, na), variance(&b, &wb, nb));
    let energy = |x: &Array2<Complex64>| x.iter().map(|v| v.norm_sqr()).sum::<f64>();
    if !(va.is_finite() && vb.is_finite()) {
        return Err(Error::NonFinite("registration input"));
    }
    if na == 0.0 || nb == 0.0 || !(va > 1e-24 * energy(&a) && vb > 1e-24 * energy(&b)) {
        return Err(Error::Featureless);
    }
    let cw = |w: &Array2<f64>| w.mapv(|v| Complex64::new(v, 0.0));
    let (ma, mb) = (cw(&wa), cw(&wb));
    let weighted = |x: &Array2<Complex64>, w: &Array2<f64>| Zip::from(x).and(w).map_collect(|v, &k| v * k);
    let (a, b) = (weighted(&a, &wa), weighted(&b, &wb));
    let sq_w = |x: &Array2<Complex64>, w: &Array2<f64>| {
        // x is already weighted once: |x|²/w = w·|original|²
        Zip::from(x).and(w).map_collect(|v, &k| {
            Complex64::new(if k > 0.0 { v.norm_sqr() / k } else { 0.0 }, 0.0)
        })
    };
    let (qa, qb) = (sq_w(&a, &wa), sq_w(&b, &wb));

    let spectrum = |x: &Array2<Complex64>| {
        let mut s = x.clone();
        fft::fft2(&mut s);
        s
    };
    let (fa, fma, fqa) = (spectrum(&a), spectrum(&ma), spectrum(&qa));
    let (fb, fmb, fqb) = (spectrum(&b), spectrum(&mb), spectrum(&qb));
    // corr(x, y)(s) = Σ conj(x(r)) y(r + s)  ⇔  spectrum Y·conj(X)
    let cs = |x: &Array2<Complex64>, y: &Array2<Complex64>| {
        let mut out = y.clone();
        Zip::from(&mut out).and(x).for_each(|o, xv| *o *= xv.conj());
        out
    };
    let spectra = [
        cs(&fma, &fmb), // overlap count
        cs(&fa, &fmb),  // conj of Σ a over overlap
        cs(&fma, &fb),  // Σ b over overlap
        cs(&fqa, &fmb), // Σ |a|² over overlap
        cs(&fma, &fqb), // Σ |b|² over overlap
        cs(&fa, &fb),   // Σ conj(a) b
    ];
    let min_count = opts.min_overlap.max(0.0) * na.min(nb);
    let ncc = |v: [Complex64; 6]| -> f64 {
        let o = v[0].re;
        if o < min_count.max(1.0) - 1e-6 {
            return 0.0;
        }
        let sa = v[1].conj();
        let sb = v[2];
        let var_a = v[3].re - sa.norm_sqr() / o;
        let var_b = v[4].re - sb.norm_sqr() / o;
        let floor = 1e-12 * (v[3].re + v[4].re);
        if !(var_a > floor && var_b > floor) {
            return 0.0;
        }
        let num = v[5] - sa.conj() * sb / o;
        (num.norm() / (var_a * var_b).sqrt()).min(1.0)
    };
    let eval_full = || -> Array2<f64> {
        let fields: Vec<Array2<Complex64>> = spectra
            .iter()
            .map(|s| {
                let mut x = s.clone();
                fft::ifft2(&mut x);
                x
            })
            .collect();
        Array2::from_shape_fn(a.dim(), |idx| {
            ncc(std::array::from_fn(|k| fields[k][idx]))
        })
    };
    let full = eval_full();
    let (best, best_val, secondary) = primary_and_secondary(&full);
    let (h, w) = a.dim();
    let peak0 = (fft::freq_index(best.0, h), fft::freq_index(best.1, w));
    let (delta, peak) = if opts.upsample > 1 {
        let (d, v) = refine(peak0, opts.upsample, |c, half, step| {
            let lat: Vec<Array2<Complex64>> =
                spectra.iter().map(|s| lattice_dft(s, c, half, step)).collect();
            Array2::from_shape_fn(lat[0].dim(), |idx| ncc(std::array::from_fn(|k| lat[k][idx])))
        });
        if v >= best_val {
            (d, v)
        } else {
            (peak0, best_val)
        }
    } else {
        (peak0, best_val)
    };
    Ok(ShiftMeasurement {
        frame_i: 0,
        frame_j: 0,
        delta,
        confidence: peak.clamp(0.0, 1.0),
        peak_ratio: ratio(peak, secondary),
        accepted: true,
    })
}

/// Which frame pairs to register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EdgeStrategy {
    /// All pairs at most `k` apart in acquisition order.
    Temporal { k: usize },
    AllPairs,
    /// Row-major raster with `cols` frames per row: horizontal and vertical
    /// neighbours, optionally diagonals.
    Raster { cols: usize, diagonals: bool },
}

impl Default for EdgeStrategy {
    fn default() -> Self {
        EdgeStrategy::Temporal { k: 2 }
    }
}

impl fmt::Display for EdgeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeStrategy::Temporal { k } => write!(f, "temporal:{k}"),
            EdgeStrategy::AllPairs => write!(f, "all_pairs"),
            EdgeStrategy::Raster { cols, diagonals: false } => write!(f, "raster:{cols}"),
            EdgeStrategy::Raster { cols, diagonals: true } => write!(f, "raster:{cols}:diag"),
        }
    }
}

impl FromStr for EdgeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown edge strategy '{s}' (temporal:K, all_pairs, raster:COLS[:diag])"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["all_pairs"] => Ok(EdgeStrategy::AllPairs),
            ["temporal", k] => {
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(EdgeStrategy::Temporal { k })
            }
            ["raster", c] | ["raster", c, "diag"] => {
                let cols: usize = c.parse().map_err(|_| bad())?;
                if cols == 0 {
                    return Err(bad());
                }
                Ok(EdgeStrategy::Raster {
                    cols,
                    diagonals: parts.len() == 3,
                })
            }
            _ => Err(bad()),
        }
    }
}

pub const MAX_ALL_PAIRS_FRAMES: usize = 200;

/// Candidate pairs `(i, j)` with `i < j`, in a fixed order.
pub fn build_edges(n_frames: usize, strategy: EdgeStrategy) -> Result<Vec<(usize, usize)>> {
    if n_frames < 2 {
        return Err(Error::InvalidArgument("at least two frames are needed".into()));
    }
    let mut edges = Vec::new();
    match strategy {
        EdgeStrategy::Temporal { k } => {
            for i in 0..n_frames {
                for j in i + 1..=(i + k).min(n_frames - 1) {
                    edges.push((i, j));
                }
            }
        }
        EdgeStrategy::AllPairs => {
            if n_frames > MAX_ALL_PAIRS_FRAMES {
                return Err(Error::InvalidArgument(format!(
                    "all_pairs is limited to {MAX_ALL_PAIRS_FRAMES} frames, got {n_frames}"
                )));
            }
            for i in 0..n_frames {
                for j in i + 1..n_frames {
                    edges.push((i, j));
                }
            }
        }
        EdgeStrategy::Raster { cols, diagonals } => {
            if cols == 0 {
                return Err(Error::InvalidArgument("raster needs cols ≥ 1".into()));
            }
            for i in 0..n_frames {
                let (r, c) = (i / cols, i % cols);
                let mut push = |rr: usize, cc: isize| {
                    if cc >= 0 && (cc as usize) < cols {
                        let j = rr * cols + cc as usize;
                        if j < n_frames && j != i {
                            edges.push((i, j));
                        }
                    }
                };
                push(r, c as isize + 1);
                push(r + 1, c as isize);
                if diagonals {
                    push(r + 1, c as isize - 1);
                    push(r + 1, c as isize + 1);
                }
            }
        }
    }
    Ok(edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub strategy: EdgeStrategy,
    pub min_confidence: f64,
    pub min_peak_ratio: f64,
    pub estimator: RegisterOptions,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            strategy: EdgeStrategy::default(),
            min_confidence: 0.05,
            min_peak_ratio: 1.2,
            estimator: RegisterOptions {
                masked: true,
                restrict_overlap: true,
                ..RegisterOptions::default()
            },
        }
    }
}

/// Register every candidate pair; rejected and featureless pairs are kept
/// with `accepted = false` so they can be reported.
pub fn measure_edges(
    objects: &[Array2<Complex64>],
    edges: &[(usize, usize)],
    config: &RegisterConfig,
) -> Result<Vec<ShiftMeasurement>> {
    if let Some(&(i, j)) = edges.iter().find(|(i, j)| i == j || *i >= objects.len() || *j >= objects.len()) {
        return Err(Error::InvalidArgument(format!("invalid edge ({i}, {j})")));
    }
    edges
        .par_iter()
        .map(|&(i, j)| {
            match subpixel_shift_estimate(&objects[j], &objects[i], &config.estimator) {
                Ok(mut m) => {
                    m.frame_i = i;
                    m.frame_j = j;
                    m.accepted =
                        m.confidence >= config.min_confidence && m.peak_ratio >= config.min_peak_ratio;
                    Ok(m)
                }
                Err(Error::Featureless) => Ok(ShiftMeasurement {
                    frame_i: i,
                    frame_j: j,
                    delta: (0.0, 0.0),
                    confidence: 0.0,
                    peak_ratio: 1.0,
                    accepted: false,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// [`measure_edges`] followed by the connectivity check; returns only the
/// accepted measurements.
pub fn measure_pairwise_shifts(
    objects: &[Array2<Complex64>],
    edges: &[(usize, usize)],
    config: &RegisterConfig,
) -> Result<Vec<ShiftMeasurement>> {
    let all = measure_edges(objects, edges, config)?;
    let accepted: Vec<ShiftMeasurement> = all.into_iter().filter(|m| m.accepted).collect();
    let comps = connected_components(objects.len(), &accepted);
    if comps.len() > 1 {
        return Err(Error::Disconnected(comps));
    }
    Ok(accepted)
}

/// Components of the graph over accepted edges, each sorted, ordered by
/// smallest member.
pub fn connected_components(n_nodes: usize, edges: &[ShiftMeasurement]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n_nodes).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges.iter().filter(|e| e.accepted) {
        let (a, b) = (find(&mut parent, e.frame_i), find(&mut parent, e.frame_j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for k in 0..n_nodes {
        let r = find(&mut parent, k);
        groups.entry(r).or_default().push(k);
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionGraph {
    pub n_nodes: usize,
    pub edges: Vec<ShiftMeasurement>,
}

/// Weighted least-squares positions from pairwise deltas, node 0 at the
/// origin, solved by conjugate gradients on the reduced graph Laplacian.
pub fn solve_positions(graph: &PositionGraph) -> Result<Vec<(f64, f64)>> {
    let n = graph.n_nodes;
    if n == 0 {
        return Err(Error::InvalidArgument("empty position graph".into()));
    }
    let edges: Vec<&ShiftMeasurement> = graph.edges.iter().filter(|e| e.accepted).collect();
    for e in &edges {
        if e.frame_i >= n || e.frame_j >= n || e.frame_i == e.frame_j {
            return Err(Error::InvalidArgument(format!(
                "edge ({}, {}) invalid for {n} nodes",
                e.frame_i, e.frame_j
            )));
        }
        if !(e.confidence > 0.0 && e.confidence.is_finite())
            || !(e.delta.0.is_finite() && e.delta.1.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "edge ({}, {}) has a non-positive weight or non-finite delta",
                e.frame_i, e.frame_j
            )));
        }
    }
    let comps = connected_components(n, &graph.edges);
    if comps.len() > 1 {
        return Err(Error::Disconnected(comps));
    }
    if n == 1 {
        return Ok(vec![(0.0, 0.0)]);
    }

    // unknowns are nodes 1..n (index k-1)
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for e in &edges {
            let w = e.confidence;
            let xi = if e.frame_i == 0 { 0.0 } else { x[e.frame_i - 1] };
            let xj = if e.frame_j == 0 { 0.0 } else { x[e.frame_j - 1] };
            let d = w * (xj - xi);
            if e.frame_j != 0 {
                out[e.frame_j - 1] += d;
            }
            if e.frame_i != 0 {
                out[e.frame_i - 1] -= d;
            }
        }
    };
    let solve_axis = |pick: &dyn Fn(&ShiftMeasurement) -> f64| -> Result<Vec<f64>> {
        let mut b = vec![0.0; n - 1];
        for e in &edges {
            let wd = e.confidence * pick(e);
            if e.frame_j != 0 {
                b[e.frame_j - 1] += wd;
            }
            if e.frame_i != 0 {
                b[e.frame_i - 1] -= wd;
            }
        }
        conjugate_gradient(&apply, &b, 1e-10, 20 * n + 1000)
    };
    let ys = solve_axis(&|e| e.delta.0)?;
    let xs = solve_axis(&|e| e.delta.1)?;
    Ok(std::iter::once((0.0, 0.0))
        .chain(ys.into_iter().zip(xs))
        .collect())
}

fn conjugate_gradient(
    apply: &dyn Fn(&[f64], &mut [f64]),
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() <= rel_tol * b_norm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    if rr.sqrt() <= rel_tol * b_norm * 10.0 {
        Ok(x)
    } else {
        Err(Error::Physics(format!(
            "position solve did not converge (relative residual {:.2e})",
            rr.sqrt() / b_norm
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    /// Per-frame error vectors after removing the mean offset.
    pub errors: Vec<(f64, f64)>,
    pub mean: f64,
    pub std: f64,
    pub rms: f64,
    pub max: f64,
}

pub fn score_positions(recovered: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<PositionScore> {
    if recovered.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "position count mismatch: {} recovered vs {} true",
            recovered.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let diffs: Vec<(f64, f64)> = recovered
        .iter()
        .zip(truth)
        .map(|(r, t)| (r.0 - t.0, r.1 - t.1))
        .collect();
    let my = diffs.iter().map(|d| d.0).sum::<f64>() / n;
    let mx = diffs.iter().map(|d| d.1).sum::<f64>() / n;
    let errors: Vec<(f64, f64)> = diffs.iter().map(|d| (d.0 - my, d.1 - mx)).collect();
    let norms: Vec<f64> = errors.iter().map(|e| e.0.hypot(e.1)).collect();
    let mean = norms.iter().sum::<f64>() / n;
    let std = if norms.len() > 1 {
        (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let rms = (norms.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    Ok(PositionScore {
        errors,
        mean,
        std,
        rms,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::fourier_shift_array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: (usize, usize), seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    /// Smooth random image: random spectrum restricted to low frequencies.
    fn smooth_image(n: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Array2::from_shape_fn((n, n), |(i, j)| {
            let (fy, fx) = (fft::freq_index(i, n), fft::freq_index(j, n));
            if fy * fy + fx * fx < (n as f64 / 6.0).powi(2) {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        fft::ifft2(&mut spec);
        spec
    }

    fn roll(a: &Array2<Complex64>, s: (isize, isize)) -> Array2<Complex64> {
        let (h, w) = a.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let si = (i as isize - s.0).rem_euclid(h as isize) as usize;
            let sj = (j as isize - s.1).rem_euclid(w as isize) as usize;
            a[[si, sj]]
        })
    }

    fn raw_options(upsample: usize) -> RegisterOptions {
        RegisterOptions {
            upsample,
            ..RegisterOptions::default()
        }
    }

    #[test]
    fn scaling_gradient_of_zero_and_identity_trim() {
        let z = Array2::<Complex64>::zeros((16, 16));
        assert!(scaling_gradient(&z, 2).unwrap().iter().all(|v| v.norm() == 0.0));
        let f = random_image((16, 16), 1);
        let g = scaling_gradient_unchecked(&f, 0).unwrap();
        assert!(g.iter().all(|v| v.norm() < 1e-12));
        assert!(scaling_gradient(&f, 0).is_err());
        assert!(scaling_gradient(&f, 4).is_err());
    }

    #[test]
    fn scaling_gradient_matches_dense_dft_oracle() {
        let n = 8usize;
        let m = 1usize;
        let k = n - 2 * m;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Array2::from_shape_fn((n, n), |_| Complex64::new(rng.gen_range(0.0..1.0), 0.0));
        // centred unitary DFT, origin at N/2 in both domains
        let c = |i: usize, len: usize| i as f64 - (len / 2) as f64;
        let mut spec = Array2::<Complex64>::zeros((n, n));
        for u in 0..n {
            for v in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ph = -2.0 * PI * (c(u, n) * c(y, n) + c(v, n) * c(x, n)) / n as f64;
                        acc += f[[y, x]] * Complex64::from_polar(1.0, ph);
                    }
                }
                spec[[u, v]] = acc / n as f64;
            }
        }
        let a = n as f64 / k as f64;
        let mut expected = f.mapv(|v| -v);
        for y in 0..k {
            for x in 0..k {
                let mut acc = Complex64::new(0.0, 0.0);
                for u in 0..k {
                    for v in 0..k {
                        let ph = 2.0 * PI * (c(u, k) * c(y, k) + c(v, k) * c(x, k)) / k as f64;
                        acc += spec[[u + m, v + m]] * Complex64::from_polar(1.0, ph);
                    }
                }
                expected[[y + m, x + m]] += acc / k as f64 / a;
            }
        }
        let got = scaling_gradient(&f, m).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).norm() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn self_registration_is_exact() {
        let f = random_image((32, 32), 2);
        let m = subpixel_shift_estimate(&f, &f, &raw_options(20)).unwrap();
        assert_eq!(m.delta, (0.0, 0.0));
        assert!((m.confidence - 1.0).abs() < 1e-12);
    }

    fn brute_force_argmax(f: &Array2<Complex64>, g: &Array2<Complex64>) -> (isize, isize) {
        let (h, w) = f.dim();
        let mut best = ((0, 0), -1.0);
        for sy in 0..h as isize {
            for sx in 0..w as isize {
                let mut acc = Complex64::new(0.0, 0.0);
                for ((i, j), v) in f.indexed_iter() {
                    let gi = (i as isize + sy).rem_euclid(h as isize) as usize;
                    let gj = (j as isize + sx).rem_euclid(w as isize) as usize;
                    acc += v.conj() * g[[gi, gj]];
                }
                if acc.norm() > best.1 {
                    best = ((sy, sx), acc.norm());
                }
            }
        }
        let wrap = |v: isize, n: usize| if v >= n as isize / 2 { v - n as isize } else { v };
        (wrap(best.0 .0, h), wrap(best.0 .1, w))
    }

    #[test]
    fn integer_roll_matches_brute_force_oracle() {
        let f = random_image((32, 32), 3);
        let g = roll(&f, (7, -3));
        let m = subpixel_shift_estimate(&f, &g, &raw_options(1)).unwrap();
        assert_eq!(m.delta, (7.0, -3.0));
        assert_eq!(brute_force_argmax(&f, &g), (7, -3));
        assert!(m.peak_ratio > 2.0);
    }

    #[test]
    fn fractional_shift_at_kappa_100() {
        let f = smooth_image(64, 4);
        let g = fourier_shift_array(&f, (0.25, -0.40));
        let m = subpixel_shift_estimate(&f, &g, &raw_options(100)).unwrap();
        assert!((m.delta.0 - 0.25).abs() < 0.05 && (m.delta.1 + 0.40).abs() < 0.05, "{:?}", m.delta);
    }

    #[test]
    fn upsampled_peak_matches_direct_correlation_oracle() {
        let f = smooth_image(32, 5);
        let g = fourier_shift_array(&f, (1.3, 2.6));
        let m = subpixel_shift_estimate(&f, &g, &raw_options(10)).unwrap();
        // direct evaluation of the band-limited correlation on the same lattice
        let mut fs = f.clone();
        let mut gs = g.clone();
        fft::fft2(&mut fs);
        fft::fft2(&mut gs);
        let mut best = ((0.0, 0.0), -1.0);
        // lattice of the refinement around the integer peak (1, 3)
        for a in 0..=20 {
            for b in 0..=20 {
                let s = (a as f64 / 10.0, 2.0 + b as f64 / 10.0);
                let mut acc = Complex64::new(0.0, 0.0);
                for ((i, j), gv) in gs.indexed_iter() {
                    let ph = 2.0 * PI * (fft::freq_index(i, 32) * s.0 + fft::freq_index(j, 32) * s.1) / 32.0;
                    acc += gv * fs[[i, j]].conj() * Complex64::from_polar(1.0, ph);
                }
                if acc.norm() > best.1 {
                    best = (s, acc.norm());
                }
            }
        }
        assert!((m.delta.0 - best.0 .0).abs() < 1e-9 && (m.delta.1 - best.0 .1).abs() < 1e-9);
        assert!((m.delta.0 - 1.3).abs() < 0.051 && (m.delta.1 - 2.6).abs() < 0.051);
    }

    #[test]
    fn featureless_input_is_rejected() {
        let z = Array2::<Complex64>::zeros((16, 16));
        let f = random_image((16, 16), 6);
        assert!(matches!(
            subpixel_shift_estimate(&z, &f, &raw_options(1)),
            Err(Error::Featureless)
        ));
        let flat = Array2::from_elem((16, 16), Complex64::new(0.7, 0.2));
        assert!(matches!(
            subpixel_shift_estimate(&flat, &flat, &raw_options(1)),
            Err(Error::Featureless)
        ));
    }

    #[test]
    fn preconditioning_keeps_integer_peak() {
        // the magnification is about the centre, so large shifts pick up a
        // bias of order s·(1 − 1/a)/2; keep it well under half a pixel
        let f = smooth_image(128, 7);
        let g = roll(&f, (4, 9));
        let plain = subpixel_shift_estimate(&f, &g, &raw_options(1)).unwrap();
        let pre = subpixel_shift_estimate(
            &f,
            &g,
            &RegisterOptions {
                precondition: true,
                upsample: 1,
                ..RegisterOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain.delta, pre.delta);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn estimate_is_antisymmetric(dy in -3.0f64..3.0, dx in -3.0f64..3.0, seed in 0u64..1000) {
            let f = smooth_image(48, seed);
            let g = fourier_shift_array(&f, (dy, dx));
            let o = raw_options(50);
            let a = subpixel_shift_estimate(&f, &g, &o).unwrap().delta;
            let b = subpixel_shift_estimate(&g, &f, &o).unwrap().delta;
            prop_assert!((a.0 + b.0).abs() <= 0.02 + 1e-9 && (a.1 + b.1).abs() <= 0.02 + 1e-9);
        }
    }

    #[test]
    fn edge_strategies() {
        assert_eq!(
            build_edges(4, EdgeStrategy::Temporal { k: 1 }).unwrap(),
            vec![(0, 1), (1, 2), (2, 3)]
        );
        assert_eq!(build_edges(4, EdgeStrategy::Temporal { k: 2 }).unwrap().len(), 5);
        assert_eq!(build_edges(10, EdgeStrategy::AllPairs).unwrap().len(), 45);
        assert!(build_edges(201, EdgeStrategy::AllPairs).is_err());
        let raster = build_edges(6, EdgeStrategy::Raster { cols: 3, diagonals: false }).unwrap();
        assert_eq!(raster, vec![(0, 1), (0, 3), (1, 2), (1, 4), (2, 5), (3, 4), (4, 5)]);
        let diag = build_edges(4, EdgeStrategy::Raster { cols: 2, diagonals: true }).unwrap();
        assert_eq!(diag, vec![(0, 1), (0, 2), (0, 3), (1, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn edge_strategy_parsing_round_trips() {
        for s in ["temporal:2", "all_pairs", "raster:9", "raster:9:diag"] {
            assert_eq!(s.parse::<EdgeStrategy>().unwrap().to_string(), s);
        }
        assert!("temporal:0".parse::<EdgeStrategy>().is_err());
        assert!("ring".parse::<EdgeStrategy>().is_err());
    }

    fn edge(i: usize, j: usize, d: (f64, f64), w: f64) -> ShiftMeasurement {
        ShiftMeasurement {
            frame_i: i,
            frame_j: j,
            delta: d,
            confidence: w,
            peak_ratio: 2.0,
            accepted: true,
        }
    }

    #[test]
    fn chain_and_triangle() {
        let g = PositionGraph {
            n_nodes: 3,
            edges: vec![edge(0, 1, (1.0, 0.0), 1.0), edge(1, 2, (1.0, 0.0), 1.0)],
        };
        let p = solve_positions(&g).unwrap();
        for (a, b) in p.iter().zip([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]) {
            assert!((a.0 - b.0).abs() < 1e-10 && (a.1 - b.1).abs() < 1e-10);
        }
        let g = PositionGraph {
            n_nodes: 3,
            edges: vec![
                edge(0, 1, (1.0, 2.0), 0.3),
                edge(1, 2, (-3.0, 0.5), 0.9),
                edge(0, 2, (-2.0, 2.5), 0.5),
            ],
        };
        let p = solve_positions(&g).unwrap();
        assert!((p[2].0 + 2.0).abs() < 1e-10 && (p[2].1 - 2.5).abs() < 1e-10);
    }

    #[test]
    fn disconnected_graph_lists_components() {
        let g = PositionGraph {
            n_nodes: 4,
            edges: vec![edge(0, 1, (1.0, 0.0), 1.0), edge(2, 3, (1.0, 0.0), 1.0)],
        };
        match solve_positions(&g) {
            Err(Error::Disconnected(c)) => assert_eq!(c, vec![vec![0, 1], vec![2, 3]]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn noisy_random_graph_matches_pseudo_inverse_oracle() {
        let n = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))).collect();
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            edges.push((i, i + 1));
        }
        for _ in 0..30 {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        let meas: Vec<ShiftMeasurement> = edges
            .iter()
            .map(|&(i, j)| {
                let noise = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                edge(
                    i,
                    j,
                    (truth[j].0 - truth[i].0 + noise.0, truth[j].1 - truth[i].1 + noise.1),
                    rng.gen_range(0.1..1.0),
                )
            })
            .collect();
        let got = solve_positions(&PositionGraph { n_nodes: n, edges: meas.clone() }).unwrap();

        // dense weighted least squares with p_0 fixed: rows sqrt(w)(p_j − p_i)
        let m = meas.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(m, n - 1);
        let mut by = nalgebra::DVector::<f64>::zeros(m);
        let mut bx = nalgebra::DVector::<f64>::zeros(m);
        for (r, e) in meas.iter().enumerate() {
            let sw = e.confidence.sqrt();
            if e.frame_j > 0 {
                a[(r, e.frame_j - 1)] += sw;
            }
            if e.frame_i > 0 {
                a[(r, e.frame_i - 1)] -= sw;
            }
            by[r] = sw * e.delta.0;
            bx[r] = sw * e.delta.1;
        }
        let pinv = a.pseudo_inverse(1e-12).unwrap();
        let (sy, sx) = (&pinv * by, &pinv * bx);
        for k in 1..n {
            assert!((got[k].0 - sy[k - 1]).abs() < 1e-8, "node {k}");
            assert!((got[k].1 - sx[k - 1]).abs() < 1e-8, "node {k}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn consistent_edges_are_reproduced_for_any_weights(
            pos in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..12),
            weights in proptest::collection::vec(0.01f64..1.0, 40),
            scale in 0.1f64..10.0,
        ) {
            let n = pos.len();
            let mut edges = Vec::new();
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n.min(i + 3) {
                    let d = (pos[j].0 - pos[i].0, pos[j].1 - pos[i].1);
                    edges.push(edge(i, j, d, weights[k % weights.len()]));
                    k += 1;
                }
            }
            let p = solve_positions(&PositionGraph { n_nodes: n, edges: edges.clone() }).unwrap();
            for (a, t) in p.iter().zip(&pos) {
                prop_assert!((a.0 - (t.0 - pos[0].0)).abs() < 1e-8);
                prop_assert!((a.1 - (t.1 - pos[0].1)).abs() < 1e-8);
            }
            for e in edges.iter_mut() {
                e.confidence *= scale;
            }
            let q = solve_positions(&PositionGraph { n_nodes: n, edges }).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a.0 - b.0).abs() < 1e-8 && (a.1 - b.1).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn score_removes_translation() {
        let truth = vec![(0.0, 0.0), (3.0, 1.0), (5.0, -2.0), (1.0, 1.0)];
        let off: Vec<_> = truth.iter().map(|t| (t.0 + 2.5, t.1 - 7.0)).collect();
        let s = score_positions(&off, &truth).unwrap();
        assert!(s.mean < 1e-12 && s.rms < 1e-12);
        let mut one = truth.clone();
        one[2].0 += 1.0;
        let s = score_positions(&one, &truth).unwrap();
        assert!((s.errors[2].0 - 0.75).abs() < 1e-12);
        assert!(score_positions(&one[..3], &truth).is_err());
    }
}
