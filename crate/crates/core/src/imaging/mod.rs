//! Test phantoms, noise, quality metrics and grayscale image I/O.

mod io;

pub use io::{
    read_image, read_pgm, read_tvwf, write_image, write_pgm, write_tvwf, ImageBuffer, ImageError, PgmEncoding,
};

use crate::grid::{grad, Grid, ScalarField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Centered axis-aligned square at `inside` on an `outside` background, unit
/// spacing. The side is `n / 3`, shortened by one pixel when needed so the
/// square sits exactly in the middle (the field is then invariant under 90°
/// rotations).
pub fn gen_square(n: usize, inside: f64, outside: f64) -> ScalarField {
    assert!(n >= 8, "gen_square needs n >= 8");
    let mut side = n / 3;
    if (n - side) % 2 == 1 {
        side -= 1;
    }
    let start = (n - side) / 2;
    let range = start..start + side;
    let grid = Grid::square(n).expect("n >= 8");
    ScalarField::from_fn(grid, |i, j| {
        if range.contains(&i) && range.contains(&j) {
            inside
        } else {
            outside
        }
    })
}

/// Square-based pyramid `max(0, 1 - 2 max(|x - 1/2|, |y - 1/2|))` sampled on
/// `[0,1]^2` with `h = 1 / (n - 1)`.
pub fn gen_pyramid(n: usize) -> ScalarField {
    assert!(n >= 8, "gen_pyramid needs n >= 8");
    let h = 1.0 / (n - 1) as f64;
    let grid = Grid::new(n, n, h).expect("n >= 8");
    ScalarField::from_fn(grid, |i, j| {
        let (x, y) = (i as f64 * h, j as f64 * h);
        (1.0 - 2.0 * (x - 0.5).abs().max((y - 0.5).abs())).max(0.0)
    })
}

/// Synthetic 'cartoon + texture' test image with values in `[0.1, 0.9]`:
/// a bright disk and a dark bar over a mid-gray background, and a
/// sinusoidally textured band. Unit spacing.
pub fn gen_cartoon(n: usize) -> ScalarField {
    assert!(n >= 8, "gen_cartoon needs n >= 8");
    let grid = Grid::square(n).expect("n >= 8");
    let s = n as f64;
    ScalarField::from_fn(grid, |i, j| {
        let (x, y) = (i as f64 / s, j as f64 / s);
        let mut v = 0.5;
        if (x - 0.35).powi(2) + (y - 0.35).powi(2) < 0.2f64.powi(2) {
            v = 0.85;
        }
        if (0.6..0.85).contains(&x) && (0.15..0.6).contains(&y) {
            v = 0.15;
        }
        if (0.7..0.9).contains(&y) {
            v = 0.5 + 0.3 * (2.0 * std::f64::consts::PI * 8.0 * x).sin() * (2.0 * std::f64::consts::PI * 3.0 * y).cos();
        }
        v.clamp(0.1, 0.9)
    })
}

/// Adds i.i.d. zero-mean Gaussian noise of the given variance, drawn from a
/// ChaCha8 stream seeded with `seed`. No clamping.
pub fn add_gaussian_noise(u: &ScalarField, variance: f64, seed: u64) -> ScalarField {
    assert!(variance >= 0.0 && variance.is_finite(), "variance must be non-negative");
    if variance == 0.0 {
        return u.clone();
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = u.values().iter().map(|v| v + normal.sample(&mut rng)).collect();
    ScalarField::new(u.grid(), values).expect("same grid, finite values")
}

/// `h^2 * sum(u)`.
pub fn mass(u: &ScalarField) -> f64 {
    u.grid().h().powi(2) * u.sum()
}

/// Anisotropic discrete total variation `h * sum(|d1 u| + |d2 u|)`.
pub fn discrete_tv(u: &ScalarField) -> f64 {
    u.grid().h() * grad(u).components().map(f64::abs).sum::<f64>()
}

/// Peak signal-to-noise ratio in dB with peak `max(ref) - min(ref)`;
/// `f64::INFINITY` when the fields coincide.
pub fn psnr(u: &ScalarField, reference: &ScalarField) -> Result<f64, ImageError> {
    if u.grid().nx() != reference.grid().nx() || u.grid().ny() != reference.grid().ny() {
        return Err(ImageError::Shape(format!(
            "{}x{} vs {}x{}",
            u.grid().nx(),
            u.grid().ny(),
            reference.grid().nx(),
            reference.grid().ny()
        )));
    }
    let n = u.values().len() as f64;
    let mse = u
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let range = reference.max() - reference.min();
    Ok(10.0 * (range * range / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::normalize_mass;

    fn rotate(u: &ScalarField) -> ScalarField {
        let n = u.grid().nx();
        ScalarField::from_fn(u.grid(), |i, j| u.at(j, n - 1 - i))
    }

    #[test]
    fn square_n9() {
        let u = gen_square(9, 1.0, 0.0);
        assert_eq!(u.sum(), 9.0);
        assert_eq!(u.values().iter().filter(|&&v| v == 0.0).count(), 72);
        for j in 3..6 {
            for i in 3..6 {
                assert_eq!(u.at(i, j), 1.0);
            }
        }
        assert!((mass(&normalize_mass(&u).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn square_is_rotation_invariant() {
        for n in [9, 10, 64, 100] {
            let u = gen_square(n, 2.0, 0.5);
            assert_eq!(rotate(&u), u, "n = {n}");
        }
    }

    #[test]
    fn square_downsampling_matches_up_to_edges() {
        let n = 30;
        let fine = gen_square(2 * n, 1.0, 0.0);
        let coarse = gen_square(n, 1.0, 0.0);
        let mut mismatches = 0;
        for j in 0..n {
            for i in 0..n {
                let avg = (fine.at(2 * i, 2 * j)
                    + fine.at(2 * i + 1, 2 * j)
                    + fine.at(2 * i, 2 * j + 1)
                    + fine.at(2 * i + 1, 2 * j + 1))
                    / 4.0;
                if (avg - coarse.at(i, j)).abs() > 1e-12 {
                    mismatches += 1;
                    // Only pixels on the square's outline may differ.
                    let near_edge = (0..3).any(|d| {
                        let lo = i.saturating_sub(d);
                        let lo_j = j.saturating_sub(d);
                        coarse.at(lo, j) != coarse.at((i + d).min(n - 1), j)
                            || coarse.at(i, lo_j) != coarse.at(i, (j + d).min(n - 1))
                    });
                    assert!(near_edge, "interior mismatch at ({i}, {j})");
                }
            }
        }
        assert!(mismatches <= 4 * n);
    }

    #[test]
    fn pyramid_values() {
        let u = gen_pyramid(9);
        assert_eq!(u.at(4, 4), 1.0);
        for k in 0..9 {
            assert_eq!(u.at(k, 0), 0.0);
            assert_eq!(u.at(0, k), 0.0);
            assert_eq!(u.at(k, 8), 0.0);
            assert_eq!(u.at(8, k), 0.0);
        }
        // (x, y) = (1/4, 1/2)
        assert_eq!(u.at(2, 4), 0.5);
        assert_eq!(u.grid().h(), 0.125);
    }

    #[test]
    fn cartoon_is_in_range() {
        let u = gen_cartoon(200);
        assert!(u.min() >= 0.1 && u.max() <= 0.9);
        assert!(u.max() - u.min() > 0.5);
    }

    #[test]
    fn zero_variance_noise_is_identity() {
        let u = gen_pyramid(16);
        assert_eq!(add_gaussian_noise(&u, 0.0, 7), u);
    }

    #[test]
    fn noise_is_deterministic_and_has_requested_variance() {
        let g = Grid::square(256).unwrap();
        let u = ScalarField::constant(g, 0.5);
        let a = add_gaussian_noise(&u, 0.005, 42);
        assert_eq!(a, add_gaussian_noise(&u, 0.005, 42));
        assert_ne!(a, add_gaussian_noise(&u, 0.005, 43));
        let d: Vec<f64> = a.values().iter().map(|v| v - 0.5).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var - 0.005).abs() <= 0.05 * 0.005, "sample variance {var}");
    }

    #[test]
    fn metric_examples() {
        let g = Grid::square(10).unwrap();
        let c = ScalarField::constant(g, 0.3);
        assert_eq!(discrete_tv(&c), 0.0);
        let step = ScalarField::from_fn(g, |i, _| if i >= 4 { 1.0 } else { 0.0 });
        assert_eq!(discrete_tv(&step), 10.0);
        assert_eq!(psnr(&step, &step).unwrap(), f64::INFINITY);
        let g2 = Grid::new(5, 3, 0.5).unwrap();
        assert!((mass(&ScalarField::constant(g2, 2.0)) - 7.5).abs() < 1e-15);
    }

    #[test]
    fn psnr_known_value() {
        let g = Grid::square(4).unwrap();
        let reference = ScalarField::from_fn(g, |i, _| if i < 2 { 0.0 } else { 1.0 });
        let u = reference.map(|v| v + 0.1);
        // range 1, mse 0.01 -> 20 dB
        assert!((psnr(&u, &reference).unwrap() - 20.0).abs() < 1e-9);
        let other = ScalarField::zeros(Grid::square(5).unwrap());
        assert!(psnr(&other, &reference).is_err());
    }
}
