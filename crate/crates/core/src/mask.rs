//! Binary region helpers: discs, distance to the region boundary, feathering.

use std::f64::consts::{PI, SQRT_2};

use ndarray::Array2;

/// `true` inside the disc of `radius` pixels about `center`.
pub fn disk(shape: (usize, usize), center: (f64, f64), radius: f64) -> Array2<bool> {
    let r2 = radius * radius;
    Array2::from_shape_fn(shape, |(i, j)| {
        (i as f64 - center.0).powi(2) + (j as f64 - center.1).powi(2) <= r2
    })
}

/// Disc about the grid centre `(H/2, W/2)`.
pub fn centered_disk(shape: (usize, usize), radius: f64) -> Array2<bool> {
    disk(shape, ((shape.0 / 2) as f64, (shape.1 / 2) as f64), radius)
}

/// Chamfer (1, √2) distance from each inside pixel to the nearest outside
/// pixel; the array border counts as outside. Zero outside.
pub fn distance_to_outside(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let big = (h + w) as f64 * 2.0;
    let mut d = mask.mapv(|m| if m { big } else { 0.0 });
    let at = |d: &Array2<f64>, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            d[[i as usize, j as usize]]
        }
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let cur = d[[i as usize, j as usize]];
            if cur == 0.0 {
                continue;
            }
            let v = cur
                .min(at(&d, i - 1, j) + 1.0)
                .min(at(&d, i, j - 1) + 1.0)
                .min(at(&d, i - 1, j - 1) + SQRT_2)
                .min(at(&d, i - 1, j + 1) + SQRT_2);
            d[[i as usize, j as usize]] = v;
        }
    }
    for i in (0..h as isize).rev() {
        for j in (0..w as isize).rev() {
            let cur = d[[i as usize, j as usize]];
            if cur == 0.0 {
                continue;
            }
            let v = cur
                .min(at(&d, i + 1, j) + 1.0)
                .min(at(&d, i, j + 1) + 1.0)
                .min(at(&d, i + 1, j + 1) + SQRT_2)
                .min(at(&d, i + 1, j - 1) + SQRT_2);
            d[[i as usize, j as usize]] = v;
        }
    }
    d
}

/// Weight rising from 0 at the region edge to 1 at `width` pixels inside,
/// along a raised cosine.
pub fn feather(mask: &Array2<bool>, width: f64) -> Array2<f64> {
    let d = distance_to_outside(mask);
    if width <= 0.0 {
        return mask.mapv(|m| if m { 1.0 } else { 0.0 });
    }
    d.mapv(|v| {
        if v <= 0.0 {
            0.0
        } else {
            let t = ((v - 0.5) / width).clamp(0.0, 1.0);
            0.5 * (1.0 - (PI * t).cos())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_radius_20_area() {
        let d = centered_disk((64, 64), 20.0);
        let n = d.iter().filter(|&&v| v).count() as f64;
        assert!((n - PI * 400.0).abs() / (PI * 400.0) < 0.02);
        assert!(d[[32, 52]] && !d[[32, 53]]);
    }

    #[test]
    fn distance_grows_inward() {
        let m = Array2::from_shape_fn((11, 11), |(i, j)| i > 0 && j > 0 && i < 10 && j < 10);
        let d = distance_to_outside(&m);
        assert_eq!(d[[0, 0]], 0.0);
        assert_eq!(d[[1, 5]], 1.0);
        assert_eq!(d[[5, 5]], 5.0);
    }

    #[test]
    fn feather_is_bounded_and_monotone() {
        let m = centered_disk((64, 64), 25.0);
        let f = feather(&m, 8.0);
        assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(f[[32, 32]], 1.0);
        assert!(f[[32, 56]] < f[[32, 52]]);
        assert_eq!(f[[0, 0]], 0.0);
    }
}
