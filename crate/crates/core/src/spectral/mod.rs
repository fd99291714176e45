//! Per-channel 2D Fourier transforms and high/low band splitting.
//!
//! Spectra use orthonormal scaling in both directions and a centered
//! layout with DC at `(h/2, w/2)`.

pub mod fft;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{CVar, Graph, Scalar, Tensor, IMAG_RESIDUE_LIMIT};

/// Split-complex array; `re` and `im` share a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::dim(format!(
                "complex parts differ in shape: {:?} vs {:?}",
                re.shape(),
                im.shape()
            )));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ComplexTensor {
            re: Tensor::zeros(shape.to_vec()),
            im: Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn abs_at(&self, i: usize) -> f64 {
        self.re.data()[i].f64().hypot(self.im.data()[i].f64())
    }

    /// `Σ |z|²`
    pub fn energy(&self) -> f64 {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r.f64() * r.f64() + i.f64() * i.f64())
            .sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(ComplexTensor {
            re: self.re.zip_map(&other.re, |a, b| a + b)?,
            im: self.im.zip_map(&other.im, |a, b| a + b)?,
        })
    }

    fn masked(&self, keep: &[bool]) -> Self {
        let pick = |t: &Tensor<T>| {
            let mut t = t.clone();
            for (x, &k) in t.data_mut().iter_mut().zip(keep) {
                if !k {
                    *x = T::zero();
                }
            }
            t
        };
        ComplexTensor {
            re: pick(&self.re),
            im: pick(&self.im),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.re.max_abs_diff(&other.re).max(self.im.max_abs_diff(&other.im))
    }
}

/// Centered per-channel spectrum of an `[h, w, c]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub bands: ComplexTensor<T>,
    pub src_h: usize,
    pub src_w: usize,
}

impl<T: Scalar> Spectrum<T> {
    pub fn channels(&self) -> usize {
        self.bands.shape()[2]
    }
}

/// How coefficients are assigned to the high band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BandMode {
    /// Normalized distance from DC at or above the threshold.
    #[default]
    Radial,
    /// Magnitude relative to the per-channel maximum at or above the threshold.
    Magnitude,
}

impl fmt::Display for BandMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandMode::Radial => "radial",
            BandMode::Magnitude => "magnitude",
        })
    }
}

impl FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial" => Ok(BandMode::Radial),
            "magnitude" => Ok(BandMode::Magnitude),
            other => Err(Error::Config(format!(
                "band mode must be radial or magnitude, got `{other}`"
            ))),
        }
    }
}

/// Disjoint high/low partition of a spectrum.
#[derive(Clone, Debug)]
pub struct FrequencyBands<T> {
    pub hi: ComplexTensor<T>,
    pub lo: ComplexTensor<T>,
    pub tau: f64,
    pub mode: BandMode,
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::param(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(())
}

fn hwc(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!("{what} expects [h, w, c], got {s:?}"))),
    }
}

pub fn dfft2<T: Scalar>(x: &Tensor<T>) -> Result<Spectrum<T>> {
    let (h, w, c) = hwc(x.shape(), "dfft2")?;
    let (re, im) = fft::forward_centered(x.data(), None, h, w, c);
    Ok(Spectrum {
        bands: ComplexTensor {
            re: Tensor::new([h, w, c], re)?,
            im: Tensor::new([h, w, c], im)?,
        },
        src_h: h,
        src_w: w,
    })
}

/// Real spatial reconstruction plus the largest discarded imaginary magnitude.
pub fn idfft2_with_residue<T: Scalar>(s: &Spectrum<T>) -> Result<(Tensor<T>, f64)> {
    let (h, w, c) = hwc(s.bands.shape(), "idfft2")?;
    if (h, w) != (s.src_h, s.src_w) {
        return Err(Error::dim(format!(
            "spectrum grid {h}x{w} does not match source {}x{}",
            s.src_h, s.src_w
        )));
    }
    let (re, im) = fft::inverse_centered(s.bands.re.data(), s.bands.im.data(), h, w, c);
    let residue = im.iter().map(|x| x.f64().abs()).fold(0.0, f64::max);
    Ok((Tensor::new([h, w, c], re)?, residue))
}

pub fn idfft2<T: Scalar>(s: &Spectrum<T>) -> Result<Tensor<T>> {
    let (x, residue) = idfft2_with_residue(s)?;
    if residue > IMAG_RESIDUE_LIMIT {
        return Err(Error::Numerical(format!(
            "imaginary residue {residue:.3e} exceeds {IMAG_RESIDUE_LIMIT:e}"
        )));
    }
    Ok(x)
}

/// Normalized radius of centered index `(u, v)` on an `h × w` grid.
pub fn normalized_radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let (u0, v0) = ((h / 2) as f64, (w / 2) as f64);
    let nyquist = (u0 * u0 + v0 * v0).sqrt();
    if nyquist == 0.0 {
        return 0.0;
    }
    let (du, dv) = (u as f64 - u0, v as f64 - v0);
    (du * du + dv * dv).sqrt() / nyquist
}

/// High-band membership per spatial position for the radial rule.
pub fn radial_mask(h: usize, w: usize, tau: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            out.push(normalized_radius(u, v, h, w) >= tau);
        }
    }
    out
}

/// High-band membership per coefficient of a `[h, w, c]` spectrum.
pub fn high_mask<T: Scalar>(z: &ComplexTensor<T>, tau: f64, mode: BandMode) -> Result<Vec<bool>> {
    check_tau(tau)?;
    let (h, w, c) = hwc(z.shape(), "band split")?;
    Ok(match mode {
        BandMode::Radial => radial_mask(h, w, tau)
            .into_iter()
            .flat_map(|hi| std::iter::repeat_n(hi, c))
            .collect(),
        BandMode::Magnitude => {
            let mut peak = vec![0.0f64; c];
            for p in 0..h * w {
                for (ch, m) in peak.iter_mut().enumerate() {
                    *m = m.max(z.abs_at(p * c + ch));
                }
            }
            (0..h * w * c)
                .map(|i| {
                    let m = peak[i % c];
                    let ratio = if m > 0.0 { z.abs_at(i) / m } else { 0.0 };
                    ratio >= tau
                })
                .collect()
        }
    })
}

pub fn split_bands<T: Scalar>(s: &Spectrum<T>, tau: f64, mode: BandMode) -> Result<FrequencyBands<T>> {
    let keep_hi = high_mask(&s.bands, tau, mode)?;
    let keep_lo: Vec<bool> = keep_hi.iter().map(|&b| !b).collect();
    Ok(FrequencyBands {
        hi: s.bands.masked(&keep_hi),
        lo: s.bands.masked(&keep_lo),
        tau,
        mode,
    })
}

/// Graph form of [`split_bands`]; the mask is a constant for differentiation.
pub fn split_bands_var<T: Scalar>(g: &mut Graph<T>, z: CVar, tau: f64, mode: BandMode) -> Result<(CVar, CVar)> {
    let spec = ComplexTensor::new(g.value(z.re).clone(), g.value(z.im).clone())?;
    let hi = high_mask(&spec, tau, mode)?;
    let shape = spec.shape().to_vec();
    let hi_mask = Tensor::new(
        shape.clone(),
        hi.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
    )?;
    let lo_mask = Tensor::new(
        shape,
        hi.iter().map(|&b| if b { T::zero() } else { T::one() }).collect(),
    )?;
    let hi = CVar {
        re: g.mul_const(z.re, &hi_mask)?,
        im: g.mul_const(z.im, &hi_mask)?,
    };
    let lo = CVar {
        re: g.mul_const(z.re, &lo_mask)?,
        im: g.mul_const(z.im, &lo_mask)?,
    };
    Ok((hi, lo))
}

/// Write one 8-bit PGM per channel holding `ln(1 + |z|)`, min–max scaled
/// per channel. Files are named `<tag>_c<channel>.pgm`.
pub fn export_log_magnitude<T: Scalar>(dir: &Path, tag: &str, z: &ComplexTensor<T>) -> Result<Vec<PathBuf>> {
    let (h, w, c) = hwc(z.shape(), "spectrum export")?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(c);
    for ch in 0..c {
        let vals: Vec<f64> = (0..h * w).map(|p| z.abs_at(p * c + ch).ln_1p()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels: Vec<u8> = vals
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        let path = dir.join(format!("{tag}_c{ch}.pgm"));
        let mut f = fs::File::create(&path)?;
        write!(f, "P5\n{w} {h}\n255\n")?;
        f.write_all(&pixels)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w, v) = (4, 8, 0.75f64);
        let s = dfft2(&Tensor::full([h, w, 1], v)).unwrap();
        let dc = (h / 2) * w + w / 2;
        for i in 0..h * w {
            let expect = if i == dc { v * ((h * w) as f64).sqrt() } else { 0.0 };
            assert!((s.bands.re.data()[i] - expect).abs() < 1e-6);
            assert!(s.bands.im.data()[i].abs() < 1e-6);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_ones() {
        let (h, w) = (8, 4);
        let mut re = Tensor::<f64>::zeros([h, w, 1]);
        re.data_mut()[(h / 2) * w + w / 2] = ((h * w) as f64).sqrt();
        let s = Spectrum {
            bands: ComplexTensor::new(re, Tensor::zeros([h, w, 1])).unwrap(),
            src_h: h,
            src_w: w,
        };
        let x = idfft2(&s).unwrap();
        assert!(x.max_abs_diff(&Tensor::full([h, w, 1], 1.0)) < 1e-12);
    }

    #[test]
    fn tau_out_of_range_rejected() {
        let s = dfft2(&Tensor::<f64>::zeros([4, 4, 1])).unwrap();
        assert!(matches!(split_bands(&s, 1.0 + 1e-9, BandMode::Radial), Err(Error::Parameter(_))));
        assert!(matches!(split_bands(&s, -0.1, BandMode::Magnitude), Err(Error::Parameter(_))));
    }

    #[test]
    fn tau_zero_puts_everything_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = dfft2(&Tensor::<f64>::randn([4, 6, 2], 1.0, &mut rng)).unwrap();
        let b = split_bands(&s, 0.0, BandMode::Radial).unwrap();
        assert_eq!(b.hi, s.bands);
        assert_eq!(b.lo.energy(), 0.0);
    }

    #[test]
    fn asymmetric_imaginary_part_is_rejected() {
        let (h, w) = (4, 4);
        let mut im = Tensor::<f64>::zeros([h, w, 1]);
        im.data_mut()[1] = 1.0;
        let s = Spectrum {
            bands: ComplexTensor::new(Tensor::zeros([h, w, 1]), im).unwrap(),
            src_h: h,
            src_w: w,
        };
        assert!(matches!(idfft2(&s), Err(Error::Numerical(_))));
    }

    #[test]
    fn pgm_files_follow_naming() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = dfft2(&Tensor::<f32>::randn([8, 8, 3], 1.0, &mut rng)).unwrap();
        let paths = export_log_magnitude(dir.path(), "e2_hi", &s.bands).unwrap();
        assert_eq!(paths.len(), 3);
        let bytes = std::fs::read(dir.path().join("e2_hi_c1.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 64);
    }
}
