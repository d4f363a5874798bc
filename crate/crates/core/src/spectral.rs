//! 2-D discrete Fourier transforms and the magnitude/phase split.
//!
//! Forward transforms are unnormalized, inverse transforms carry the
//! `1/(H*W)` factor. Index (0,0) is the DC term; nothing is shifted.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

/// Relative bound on the imaginary part left over by [`ifft2`].
pub const IMAG_RESIDUE_TOL: f64 = 1e-6;

/// Magnitude and phase planes of a per-channel 2-D spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPair {
    pub magnitude: Tensor,
    pub phase: Tensor,
}

impl SpectrumPair {
    pub fn shape(&self) -> &[usize] {
        self.magnitude.shape()
    }
}

/// In-place unnormalized 2-D transform of `channels` planes of `h x w`.
pub(crate) fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    let mut scratch =
        vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
    for plane in buf.chunks_exact_mut(h * w) {
        for row in plane.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Forward transform of a real `[C,H,W]` buffer.
///
/// The result is projected onto exact conjugate symmetry,
/// `F(u,v) = conj(F(-u,-v))`, so polar recombination round-trips to a
/// real signal without floating-point drift between mirrored bins.
pub(crate) fn real_spectrum(data: &[f64], c: usize, h: usize, w: usize) -> Vec<Complex64> {
    debug_assert_eq!(data.len(), c * h * w);
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, FftDirection::Forward);
    for plane in buf.chunks_exact_mut(h * w) {
        let raw = plane.to_vec();
        for u in 0..h {
            for v in 0..w {
                let mirror = ((h - u) % h) * w + (w - v) % w;
                plane[u * w + v] = (raw[u * w + v] + raw[mirror].conj()) * 0.5;
            }
        }
    }
    buf
}

/// Principal phase in `(-pi, pi]`.
pub(crate) fn phase_of(z: Complex64) -> f64 {
    let p = z.im.atan2(z.re);
    if p <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Unnormalized 2-D DFT of each plane.
pub fn fft2(input: &Tensor) -> Result<SpectrumPair> {
    let (c, h, w) = input.chw()?;
    let spec = real_spectrum(input.data(), c, h, w);
    let magnitude = spec.iter().map(|z| z.norm()).collect();
    let phase = spec.iter().map(|&z| phase_of(z)).collect();
    Ok(SpectrumPair {
        magnitude: Tensor::from_parts(vec![c, h, w], magnitude),
        phase: Tensor::from_parts(vec![c, h, w], phase),
    })
}

/// `magnitude * e^{j*phase}` as complex values.
pub(crate) fn polar(magnitude: &[f64], phase: &[f64]) -> Vec<Complex64> {
    magnitude
        .iter()
        .zip(phase)
        .map(|(&m, &p)| Complex64::from_polar(m, p))
        .collect()
}

/// Inverse transform with `1/(H*W)` scaling; returns the complex result.
pub(crate) fn inverse_complex(mut buf: Vec<Complex64>, h: usize, w: usize) -> Vec<Complex64> {
    fft2_inplace(&mut buf, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    for z in &mut buf {
        *z *= scale;
    }
    buf
}

/// Real part of an inverse transform, failing when the imaginary part is
/// larger than [`IMAG_RESIDUE_TOL`] relative to the real output.
pub(crate) fn real_part_checked(buf: &[Complex64]) -> Result<Vec<f64>> {
    let max_re = buf.iter().fold(0.0f64, |m, z| m.max(z.re.abs()));
    let max_im = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    let bound = IMAG_RESIDUE_TOL * (1.0 + max_re);
    if max_im > bound {
        return Err(FusionError::ImaginaryResidue {
            residue: max_im,
            bound,
        });
    }
    Ok(buf.iter().map(|z| z.re).collect())
}

/// Inverse 2-D DFT of a magnitude/phase pair, real part only.
pub fn ifft2(spectrum: &SpectrumPair) -> Result<Tensor> {
    let (c, h, w) = spectrum.magnitude.chw()?;
    if spectrum.phase.shape() != spectrum.magnitude.shape() {
        return Err(FusionError::shape(format!(
            "magnitude {:?} and phase {:?} differ",
            spectrum.magnitude.shape(),
            spectrum.phase.shape()
        )));
    }
    let buf = polar(spectrum.magnitude.data(), spectrum.phase.data());
    let out = real_part_checked(&inverse_complex(buf, h, w))?;
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Pairs a refined magnitude with an untouched phase.
///
/// Negative magnitudes are clamped to zero; values below `-1e-6` are
/// reported through `log::warn!`.
pub fn recombine(magnitude_refined: &Tensor, phase: &Tensor) -> Result<SpectrumPair> {
    if magnitude_refined.shape() != phase.shape() {
        return Err(FusionError::shape(format!(
            "refined magnitude {:?} does not match phase {:?}",
            magnitude_refined.shape(),
            phase.shape()
        )));
    }
    let negatives = magnitude_refined.data().iter().filter(|&&m| m < -1e-6).count();
    if negatives > 0 {
        log::warn!("recombine: clamped {negatives} negative magnitude value(s) to zero");
    }
    let clamped = magnitude_refined.data().iter().map(|&m| m.max(0.0)).collect();
    Ok(SpectrumPair {
        magnitude: Tensor::from_parts(magnitude_refined.shape().to_vec(), clamped),
        phase: phase.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct O(N^4) summation, independent of the FFT path.
    fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for x in 0..h {
                    for y in 0..w {
                        let angle = -2.0 * PI * ((u * x) as f64 / h as f64 + (v * y) as f64 / w as f64);
                        acc += plane[x * w + y] * Complex64::from_polar(1.0, angle);
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn constant_plane_is_dc_only() {
        let x = Tensor::full(&[1, 5, 5], 0.7);
        let s = fft2(&x).unwrap();
        assert!((s.magnitude.data()[0] - 0.7 * 25.0).abs() < 1e-12);
        assert!(s.magnitude.data()[1..].iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::zeros(&[1, 6, 4]);
        x.data_mut()[0] = 1.0;
        let s = fft2(&x).unwrap();
        assert!(s.magnitude.data().iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert!(s.phase.data().iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn matches_direct_dft() {
        for (h, w) in [(8, 8), (5, 7), (1, 6)] {
            let x = random(&[1, h, w], 3);
            let s = fft2(&x).unwrap();
            let reference = naive_dft(x.data(), h, w);
            for (i, z) in reference.iter().enumerate() {
                let got = Complex64::from_polar(s.magnitude.data()[i], s.phase.data()[i]);
                assert!((got - z).norm() < 1e-9, "bin {i}: {got} vs {z}");
            }
        }
    }

    #[test]
    fn round_trip_odd_sizes() {
        let x = random(&[2, 9, 13], 11);
        let y = ifft2(&fft2(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn zero_magnitude_gives_zero() {
        let s = SpectrumPair {
            magnitude: Tensor::zeros(&[1, 4, 4]),
            phase: random(&[1, 4, 4], 2),
        };
        assert!(ifft2(&s).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn phase_in_principal_range() {
        let s = fft2(&random(&[3, 8, 6], 5)).unwrap();
        assert!(s.phase.data().iter().all(|&p| p > -PI && p <= PI));
    }

    #[test]
    fn asymmetric_phase_is_reported() {
        let mut s = fft2(&random(&[1, 8, 8], 7)).unwrap();
        s.phase.data_mut()[1] += 0.5;
        assert!(matches!(ifft2(&s), Err(FusionError::ImaginaryResidue { .. })));
    }

    #[test]
    fn recombine_identity_and_polar_definition() {
        let s = fft2(&random(&[1, 4, 4], 9)).unwrap();
        let r = recombine(&s.magnitude, &s.phase).unwrap();
        assert_eq!(r, s);

        let m = Tensor::full(&[1, 1, 1], 5.0);
        let p = Tensor::full(&[1, 1, 1], 4f64.atan2(3.0));
        let z = polar(m.data(), p.data())[0];
        assert!((z.re - 3.0).abs() < 1e-12 && (z.im - 4.0).abs() < 1e-12);
    }

    #[test]
    fn recombine_clamps_negative() {
        let m = Tensor::new(&[1, 1, 2], vec![-0.5, 1.0]).unwrap();
        let p = Tensor::zeros(&[1, 1, 2]);
        let r = recombine(&m, &p).unwrap();
        assert_eq!(r.magnitude.data(), &[0.0, 1.0]);
        assert_eq!(r.phase, p);
    }
}
