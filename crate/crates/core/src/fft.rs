//! Thin 2-D wrappers over `rustfft`.
//!
//! Forward transforms are unnormalised; callers apply whatever scaling their
//! convention needs. Row-major `Array2` in standard layout is assumed.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

type Plan = Arc<dyn Fft<f64>>;

fn plan(len: usize, direction: FftDirection) -> Plan {
    static CACHE: OnceLock<Mutex<(FftPlanner<f64>, HashMap<(usize, bool), Plan>)>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    let key = (len, direction == FftDirection::Forward);
    if let Some(p) = guard.1.get(&key) {
        return Arc::clone(p);
    }
    let p = guard.0.plan_fft(len, direction);
    guard.1.insert(key, Arc::clone(&p));
    p
}

fn transform(data: &mut Array2<Complex64>, direction: FftDirection) {
    let (h, w) = data.dim();
    if !data.is_standard_layout() {
        *data = data.as_standard_layout().to_owned();
    }
    let rows = plan(w, direction);
    let cols = plan(h, direction);

    let buf = data.as_slice_mut().expect("standard layout");
    rows.process(buf);

    let mut t = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            t[j * h + i] = buf[i * w + j];
        }
    }
    cols.process(&mut t);
    for j in 0..w {
        for i in 0..h {
            buf[i * w + j] = t[j * h + i];
        }
    }
}

/// Unnormalised forward 2-D DFT, in place.
pub fn fft2(data: &mut Array2<Complex64>) {
    transform(data, FftDirection::Forward);
}

/// Inverse 2-D DFT including the `1/(H·W)` factor, in place.
pub fn ifft2(data: &mut Array2<Complex64>) {
    transform(data, FftDirection::Inverse);
    let scale = 1.0 / data.len() as f64;
    data.mapv_inplace(|v| v * scale);
}

/// Inverse 2-D DFT without normalisation.
pub fn ifft2_unnormalized(data: &mut Array2<Complex64>) {
    transform(data, FftDirection::Inverse);
}

/// Signed DFT frequency index of bin `k` for length `n` (numpy `fftfreq * n`).
#[inline]
pub fn freq_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Swap quadrants so that the zero frequency moves to `(H/2, W/2)`.
/// For even sizes this is its own inverse.
#[cfg(test)]
pub fn fftshift<T: Clone>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    let (sh, sw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(i, j)| data[[(i + h - sh) % h, (j + w - sw) % w]].clone())
}

#[cfg(test)]
pub fn ifftshift<T: Clone>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    let (sh, sw) = (h.div_ceil(2), w.div_ceil(2));
    Array2::from_shape_fn((h, w), |(i, j)| data[[(i + h - sh) % h, (j + w - sw) % w]].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_dft(x: &Array2<Complex64>) -> Array2<Complex64> {
        let (h, w) = x.dim();
        Array2::from_shape_fn((h, w), |(ky, kx)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ph = -2.0
                        * std::f64::consts::PI
                        * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                    acc += x[[y, xx]] * Complex64::from_polar(1.0, ph);
                }
            }
            acc
        })
    }

    #[test]
    fn matches_dense_dft_on_rectangular_input() {
        let x = Array2::from_shape_fn((6, 10), |(i, j)| {
            Complex64::new((i * 7 + j) as f64 % 5.0, (i as f64 - j as f64) * 0.3)
        });
        let mut y = x.clone();
        fft2(&mut y);
        let d = dense_dft(&x);
        for (a, b) in y.iter().zip(d.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
        ifft2(&mut y);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn shift_roundtrip() {
        let x = Array2::from_shape_fn((4, 6), |(i, j)| i * 6 + j);
        assert_eq!(ifftshift(&fftshift(&x)), x);
        assert_eq!(fftshift(&x)[[2, 3]], 0);
    }

    #[test]
    fn freq_index_convention() {
        let f: Vec<f64> = (0..4).map(|k| freq_index(k, 4)).collect();
        assert_eq!(f, vec![0.0, 1.0, -2.0, -1.0]);
    }
}
