//! Shot-noise sampling with per-frame random streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Means below this use exact inverse-transform sampling.
pub const GAUSSIAN_THRESHOLD: f64 = 30.0;

/// Independent stream for frame `index` of a run seeded with `seed`;
/// identical regardless of how frames are scheduled.
pub fn frame_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finaliser over the pair
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One Poisson draw: inverse transform below [`GAUSSIAN_THRESHOLD`],
/// rounded Gaussian approximation above it.
pub fn poisson<R: Rng>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < GAUSSIAN_THRESHOLD {
        let u: f64 = rng.gen();
        let mut k = 0u32;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        (mean + mean.sqrt() * standard_normal(rng)).round().max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(mean: f64, n: usize) -> (f64, f64) {
        let mut rng = frame_rng(3, mean.to_bits());
        let xs: Vec<f64> = (0..n).map(|_| poisson(&mut rng, mean)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    }

    #[test]
    fn poisson_moments_match_on_both_branches() {
        for mean in [0.3, 4.0, 29.0, 31.0, 500.0] {
            let n = 40_000;
            let (m, v) = moments(mean, n);
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 5.0 * se, "mean {mean}: got {m}");
            assert!((v / mean - 1.0).abs() < 0.05, "mean {mean}: var {v}");
        }
    }

    #[test]
    fn zero_mean_gives_zero() {
        let mut rng = frame_rng(0, 0);
        assert_eq!(poisson(&mut rng, 0.0), 0.0);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = frame_rng(1, 2).gen();
        let b: u64 = frame_rng(1, 2).gen();
        let c: u64 = frame_rng(1, 3).gen();
        let d: u64 = frame_rng(2, 2).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
