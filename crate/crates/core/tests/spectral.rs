use freqseg::numerics::Tensor;
use freqseg::oracle;
use freqseg::spectral::{dfft2, idfft2, radial_mask, split_bands, BandMode, ComplexTensor, Spectrum};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn<T: freqseg::numerics::Scalar>(shape: [usize; 3], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Centered indices with radius ≥ tau · nyquist, by direct enumeration.
fn brute_high(h: usize, w: usize, tau: f64) -> Vec<bool> {
    let (u0, v0) = ((h / 2) as f64, (w / 2) as f64);
    let ny = (u0 * u0 + v0 * v0).sqrt();
    let mut out = vec![];
    for u in 0..h {
        for v in 0..w {
            let r = ((u as f64 - u0).powi(2) + (v as f64 - v0).powi(2)).sqrt();
            out.push(r >= tau * ny);
        }
    }
    out
}

#[test]
fn naive_oracle_forward_and_inverse_4x4() {
    let x = randn::<f64>([4, 4, 3], 1);
    let s = dfft2(&x).unwrap();
    let (re, im) = oracle::interleave(&oracle::dft2_centered(&oracle::planes(x.data(), 4, 4, 3), false));
    let err = s
        .bands
        .re
        .data()
        .iter()
        .zip(&re)
        .chain(s.bands.im.data().iter().zip(&im))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");

    // Inverse of a random (non-Hermitian) spectrum, real part only.
    let z = ComplexTensor::new(randn::<f64>([4, 4, 2], 2), randn::<f64>([4, 4, 2], 3)).unwrap();
    let mut planes = oracle::planes(z.re.data(), 4, 4, 2);
    for (ch, p) in planes.iter_mut().enumerate() {
        for (y, row) in p.iter_mut().enumerate() {
            for (xx, v) in row.iter_mut().enumerate() {
                v.1 = z.im.data()[(y * 4 + xx) * 2 + ch];
            }
        }
    }
    let (want_re, want_im) = oracle::interleave(&oracle::dft2_centered(&planes, true));
    let (got_re, got_im) = freqseg::spectral::fft::inverse_centered(z.re.data(), z.im.data(), 4, 4, 2);
    for (a, b) in got_re.iter().zip(&want_re).chain(got_im.iter().zip(&want_im)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn non_power_of_two_matches_oracle() {
    let x = randn::<f64>([6, 5, 2], 4);
    let s = dfft2(&x).unwrap();
    let (re, _) = oracle::interleave(&oracle::dft2_centered(&oracle::planes(x.data(), 6, 5, 2), false));
    let err = s.bands.re.data().iter().zip(&re).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn radial_tau_one_on_4x4_is_the_nyquist_corner() {
    let hi = radial_mask(4, 4, 1.0);
    assert_eq!(hi, brute_high(4, 4, 1.0));
    // Only (0, 0) is at distance √8 from the DC bin (2, 2).
    assert_eq!(hi.iter().filter(|&&b| b).count(), 1);
    assert!(hi[0]);
}

#[test]
fn radial_half_on_8x8_matches_enumeration() {
    let hi = radial_mask(8, 8, 0.5);
    let brute = brute_high(8, 8, 0.5);
    assert_eq!(hi, brute);
    let s = dfft2(&randn::<f64>([8, 8, 2], 5)).unwrap();
    let b = split_bands(&s, 0.5, BandMode::Radial).unwrap();
    let nonzero_lo = (0..64).filter(|&p| b.lo.abs_at(p * 2) > 0.0).count();
    assert_eq!(nonzero_lo, brute.iter().filter(|&&x| !x).count());
}

#[test]
fn tau_above_one_rejected() {
    let s = dfft2(&randn::<f64>([4, 4, 1], 6)).unwrap();
    assert!(split_bands(&s, 1.0 + 1e-9, BandMode::Radial).is_err());
    assert!(split_bands(&s, -0.1, BandMode::Magnitude).is_err());
    assert!(split_bands(&s, f64::NAN, BandMode::Radial).is_err());
}

#[test]
fn magnitude_mode_tau_one_keeps_only_peaks() {
    let s = dfft2(&randn::<f64>([8, 8, 3], 7)).unwrap();
    let b = split_bands(&s, 1.0, BandMode::Magnitude).unwrap();
    for ch in 0..3 {
        let peak = (0..64).map(|p| s.bands.abs_at(p * 3 + ch)).fold(0.0, f64::max);
        let high: Vec<f64> = (0..64).map(|p| b.hi.abs_at(p * 3 + ch)).filter(|&m| m > 0.0).collect();
        // A real input has a conjugate-symmetric spectrum, so the peak may appear twice.
        assert!(matches!(high.len(), 1 | 2), "channel {ch}: {high:?}");
        assert!(high.iter().all(|&m| m == peak));
    }
}

#[test]
fn spectrum_grid_mismatch_rejected() {
    let mut s = dfft2(&randn::<f64>([4, 4, 1], 8)).unwrap();
    s.src_h = 8;
    assert!(idfft2(&s).is_err());
    let bad = Spectrum {
        bands: ComplexTensor::<f64>::zeros(&[4, 4]),
        src_h: 4,
        src_w: 4,
    };
    assert!(idfft2(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn roundtrip_f32_and_f64(h in 1usize..=64, w in 1usize..=64, c in 1usize..=16, seed in any::<u64>()) {
        prop_assume!(h * w * c <= 16384);
        let x32 = randn::<f32>([h, w, c], seed);
        prop_assert!(idfft2(&dfft2(&x32).unwrap()).unwrap().max_abs_diff(&x32) < 1e-5);
        let x64 = randn::<f64>([h, w, c], seed);
        prop_assert!(idfft2(&dfft2(&x64).unwrap()).unwrap().max_abs_diff(&x64) < 1e-10);
    }

    #[test]
    fn parseval(h in 1usize..=32, w in 1usize..=32, c in 1usize..=4, seed in any::<u64>()) {
        let x = randn::<f32>([h, w, c], seed);
        let e: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let f = dfft2(&x).unwrap().bands.energy();
        prop_assert!((e - f).abs() <= 1e-4 * e);
    }

    #[test]
    fn partition_is_exact(h in 1usize..=16, w in 1usize..=16, tau in 0.0f64..=1.0, magnitude in any::<bool>(), seed in any::<u64>()) {
        let s = dfft2(&randn::<f64>([h, w, 2], seed)).unwrap();
        let mode = if magnitude { BandMode::Magnitude } else { BandMode::Radial };
        let b = split_bands(&s, tau, mode).unwrap();
        let sum = b.hi.add(&b.lo).unwrap();
        prop_assert_eq!(&sum, &s.bands);
        for i in 0..h * w * 2 {
            // Every coefficient lands in exactly one band.
            let in_hi = b.hi.re.data()[i] != 0.0 || b.hi.im.data()[i] != 0.0;
            let in_lo = b.lo.re.data()[i] != 0.0 || b.lo.im.data()[i] != 0.0;
            prop_assert!(!(in_hi && in_lo));
        }
    }

    #[test]
    fn radial_mask_is_monotone(h in 1usize..=16, w in 1usize..=16, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m1 = radial_mask(h, w, lo);
        let m2 = radial_mask(h, w, hi);
        prop_assert!(m1.iter().zip(&m2).all(|(&x, &y)| !y || x));
    }

    #[test]
    fn transforms_are_linear(h in 1usize..=12, w in 1usize..=12, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let x = randn::<f64>([h, w, 2], seed);
        let y = randn::<f64>([h, w, 2], seed ^ 1);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (fx, fy, fm) = (dfft2(&x).unwrap(), dfft2(&y).unwrap(), dfft2(&mix).unwrap());
        for i in 0..h * w * 2 {
            prop_assert!((fm.bands.re.data()[i] - a * fx.bands.re.data()[i] - b * fy.bands.re.data()[i]).abs() < 1e-6);
            prop_assert!((fm.bands.im.data()[i] - a * fx.bands.im.data()[i] - b * fy.bands.im.data()[i]).abs() < 1e-6);
        }
        let back = idfft2(&fm).unwrap();
        prop_assert!(back.max_abs_diff(&mix) < 1e-10);
    }
}
