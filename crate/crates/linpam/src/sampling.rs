//! Seeded random number streams and the structured priors used by the
//! benchmark experiments.
//!
//! Every random quantity in an experiment (truth trajectory, each member's
//! process noise, observation noise, analysis perturbations) draws from its
//! own [`RngStream`], so runs are bitwise reproducible and independent
//! noise sources never alias regardless of evaluation order.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::RealFft;
use crate::invariant_subspace::{InvariantValue, SubUnitaryBasis};

/// A named, seekable random stream: `(seed, stream)` selects one of 2^64
/// disjoint ChaCha12 sequences per seed. ChaCha keeps 256 bits of key
/// state, so distinct seeds give statistically independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Instantiates the generator positioned at the start of the stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Draws `dim` independent `N(0, std^2)` entries.
pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Result<DVector<f64>> {
    if !std.is_finite() || std < 0.0 {
        return Err(Error::Config(format!(
            "gaussian_vector std must be finite and nonnegative, got {std}"
        )));
    }
    if std == 0.0 {
        // Consume no randomness: a zero-noise model must not shift the
        // stream position of callers that share the generator.
        return Ok(DVector::zeros(dim));
    }
    Ok(DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    }))
}

/// Gaussian random fields on a periodic grid with spectral decay
/// `exp(-k^alpha / 2)` and exactly prescribed invariant values.
///
/// Sampling pipeline: draw one complex standard normal per retained
/// frequency, damp it by the decay envelope, inverse-transform to a real
/// field, then replace the invariant components by the prescribed constant:
/// `x = u_perp c + (I - u_perp u_perp^T) field`.
#[derive(Debug, Clone)]
pub struct SmoothPeriodicPrior {
    n: usize,
    basis: SubUnitaryBasis,
    c: InvariantValue,
    alpha: f64,
    fft: RealFft,
}

impl SmoothPeriodicPrior {
    pub fn new(basis: SubUnitaryBasis, c: InvariantValue, alpha: f64) -> Result<Self> {
        let n = basis.state_dim();
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "smooth periodic prior needs an even grid size, got {n}"
            )));
        }
        if c.len() != basis.invariant_count() {
            return Err(Error::Dimension {
                context: "SmoothPeriodicPrior invariant values",
                expected: basis.invariant_count(),
                got: c.len(),
            });
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Config(format!(
                "spectral decay exponent must be positive, got {alpha}"
            )));
        }
        let fft = RealFft::new(n)?;
        Ok(Self { n, basis, c, alpha, fft })
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn invariant_values(&self) -> &InvariantValue {
        &self.c
    }

    /// Decay envelope of spectral bin `bin` (0-based); the zero mode is
    /// treated as frequency 1 so even it is damped.
    pub fn envelope(&self, bin: usize) -> f64 {
        let k = (bin + 1) as f64;
        (-0.5 * k.powf(self.alpha)).exp()
    }
}

/// Draws one field from the prior. Every sample satisfies
/// `u_perp^T x = c` to machine precision.
pub fn sample_smooth_periodic<R: Rng + ?Sized>(
    prior: &SmoothPeriodicPrior,
    rng: &mut R,
) -> DVector<f64> {
    let bins = prior.fft.bins();
    let z_re: Vec<f64> = (0..bins).map(|_| StandardNormal.sample(rng)).collect();
    let z_im: Vec<f64> = (0..bins).map(|_| StandardNormal.sample(rng)).collect();
    let spectrum: Vec<Complex<f64>> = (0..bins)
        .map(|k| Complex::new(z_re[k], z_im[k]) * prior.envelope(k))
        .collect();
    let field = DVector::from_vec(prior.fft.inverse(&spectrum));
    let fluctuation = prior
        .basis
        .project_complement(&field)
        .expect("prior basis matches its own grid size");
    prior.basis.u_perp() * &prior.c.0 + fluctuation
}
