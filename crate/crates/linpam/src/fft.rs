//! Thin real-input wrapper around `rustfft` complex transforms.
//!
//! Forward transform is unnormalized; the inverse carries the `1/n` factor,
//! so `inverse(forward(x)) == x` for real input. Only even lengths are
//! supported, which is all the periodic-grid models need.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Planned forward/inverse real FFT of a fixed even length.
#[derive(Clone)]
pub struct RealFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for RealFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealFft").field("n", &self.n).finish()
    }
}

impl RealFft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "real FFT length must be even and positive, got {n}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    /// Number of retained spectral bins, `n/2 + 1`.
    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Unnormalized forward transform of a real signal; returns bins
    /// `0..=n/2`.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex<f64>> {
        assert_eq!(x.len(), self.n, "real FFT input length");
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.bins());
        buf
    }

    /// `1/n`-normalized inverse transform. The conjugate-symmetric half of
    /// the spectrum is reconstructed from the given bins; imaginary parts
    /// of the zero and Nyquist bins contribute nothing to the real output.
    pub fn inverse(&self, spectrum: &[Complex<f64>]) -> Vec<f64> {
        assert_eq!(spectrum.len(), self.bins(), "real FFT spectrum length");
        let n = self.n;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        buf[..self.bins()].copy_from_slice(spectrum);
        for k in 1..n / 2 {
            buf[n - k] = spectrum[k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn round_trip_recovers_real_signal() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for &n in &[4usize, 16, 128] {
            let fft = RealFft::new(n).unwrap();
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let spec = fft.forward(&x);
            let back = fft.inverse(&spec);
            for (a, b) in x.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-12, "round trip mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pure_sine_occupies_a_single_bin() {
        let n = 64;
        let fft = RealFft::new(n).unwrap();
        let x: Vec<f64> = (0..n)
            .map(|j| (2.0 * std::f64::consts::PI * j as f64 / n as f64).sin())
            .collect();
        let spec = fft.forward(&x);
        // sin(2*pi*s) lands in bin 1 with coefficient -i*n/2.
        assert!((spec[1].im + n as f64 / 2.0).abs() < 1e-9);
        assert!(spec[1].re.abs() < 1e-9);
        for (k, c) in spec.iter().enumerate() {
            if k != 1 {
                assert!(c.norm() < 1e-9, "unexpected energy in bin {k}");
            }
        }
    }

    #[test]
    fn odd_lengths_are_rejected() {
        assert!(RealFft::new(7).is_err());
        assert!(RealFft::new(0).is_err());
    }
}
