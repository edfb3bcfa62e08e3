//! Benchmark dynamical models with known linear invariants, plus the
//! observation and process-noise machinery shared by all of them.
//!
//! Three systems are provided:
//! - a synthetic stable linear system whose propagator has `r` unit
//!   eigenvalues (the invariant directions) and otherwise decaying modes;
//! - linear advection of a periodic scalar field, discretized spectrally
//!   and stepped with the adaptive SSP integrator, which conserves the
//!   discrete mass of the field;
//! - the Lorenz-63 system embedded into four dimensions by a random
//!   rotation, so one rotated coordinate is exactly conserved.

pub mod integrators;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fft::RealFft;
use crate::invariant_subspace::SubUnitaryBasis;
use crate::sampling::gaussian_vector;

use integrators::{integrate_adaptive, rk4_step};

/// Linear observation operator `y = G x + eps`, `eps ~ N(0, noise_std^2 I)`.
///
/// `site_indices[j]` records which state index row `j` observes; taper
/// localization uses it to measure distances between observations and
/// state components.
#[derive(Debug, Clone)]
pub struct ObservationOperator {
    matrix: DMatrix<f64>,
    noise_std: f64,
    site_indices: Vec<usize>,
}

impl ObservationOperator {
    pub fn new(matrix: DMatrix<f64>, noise_std: f64, site_indices: Vec<usize>) -> Result<Self> {
        if !noise_std.is_finite() || noise_std < 0.0 {
            return Err(Error::Config(format!(
                "observation noise std must be finite and nonnegative, got {noise_std}"
            )));
        }
        if site_indices.len() != matrix.nrows() {
            return Err(Error::Dimension {
                context: "ObservationOperator site indices",
                expected: matrix.nrows(),
                got: site_indices.len(),
            });
        }
        if let Some(&bad) = site_indices.iter().find(|&&i| i >= matrix.ncols()) {
            return Err(Error::Config(format!(
                "observation site index {bad} outside state dimension {}",
                matrix.ncols()
            )));
        }
        Ok(Self { matrix, noise_std, site_indices })
    }

    /// Full-state observation `G = I`.
    pub fn identity(n: usize, noise_std: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), noise_std, (0..n).collect())
    }

    /// Observes the listed state components directly.
    pub fn selection(n: usize, indices: &[usize], noise_std: f64) -> Result<Self> {
        let mut g = DMatrix::zeros(indices.len(), n);
        for (row, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::Config(format!(
                    "observed index {i} outside state dimension {n}"
                )));
            }
            g[(row, i)] = 1.0;
        }
        Self::new(g, noise_std, indices.to_vec())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn site_indices(&self) -> &[usize] {
        &self.site_indices
    }

    pub fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// The scalar observation operator formed by row `j`.
    pub fn row(&self, j: usize) -> Self {
        let mut matrix = DMatrix::zeros(1, self.state_dim());
        matrix.row_mut(0).copy_from(&self.matrix.row(j));
        Self {
            matrix,
            noise_std: self.noise_std,
            site_indices: vec![self.site_indices[j]],
        }
    }

    /// Simulates `y = G x + eps`.
    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "observe state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        let noise = gaussian_vector(rng, self.obs_dim(), self.noise_std)?;
        Ok(&self.matrix * x + noise)
    }
}

/// Draws process noise `N(0, std^2 I)` projected onto the complement of
/// the invariant directions, so adding it never changes `u_perp^T x`.
pub fn invariant_preserving_process_noise<R: Rng + ?Sized>(
    rng: &mut R,
    basis: &SubUnitaryBasis,
    std: f64,
) -> Result<DVector<f64>> {
    let raw = gaussian_vector(rng, basis.state_dim(), std)?;
    basis.project_complement(&raw)
}

/// Stable linear dynamics `x_{t+1} = U exp(diag(lambda) dt) U^T x_t` with
/// `r` exactly conserved directions (`lambda = 0`).
#[derive(Debug, Clone)]
pub struct SyntheticLinearModel {
    modes: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    dt_obs: f64,
    cached_propagator: DMatrix<f64>,
}

impl SyntheticLinearModel {
    /// Draws a random orthogonal mode matrix (QR of a Gaussian matrix) and
    /// eigenvalues: `r` zeros followed by independent draws uniform on
    /// `[-5, 0)`.
    pub fn build<R: Rng + ?Sized>(rng: &mut R, n: usize, r: usize, dt_obs: f64) -> Result<Self> {
        if n == 0 || r >= n {
            return Err(Error::Config(format!(
                "synthetic model needs 0 <= r < n, got n = {n}, r = {r}"
            )));
        }
        if !(dt_obs.is_finite() && dt_obs > 0.0) {
            return Err(Error::Config(format!("dt_obs must be positive, got {dt_obs}")));
        }
        let gauss = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        let modes = gauss.qr().q();
        let eigenvalues = DVector::from_fn(n, |k, _| {
            if k < r {
                0.0
            } else {
                let u: f64 = rng.random();
                5.0 * u - 5.0
            }
        });
        let cached_propagator = propagator_from(&modes, &eigenvalues, dt_obs);
        Ok(Self { modes, eigenvalues, dt_obs, cached_propagator })
    }

    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn dt_obs(&self) -> f64 {
        self.dt_obs
    }

    /// Propagator over an arbitrary horizon; `propagator(a) * propagator(b)
    /// = propagator(a + b)` since all factors share the eigenbasis.
    pub fn propagator(&self, dt: f64) -> DMatrix<f64> {
        propagator_from(&self.modes, &self.eigenvalues, dt)
    }

    pub fn propagate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.cached_propagator * x
    }

    /// Invariant directions are the unit-eigenvalue modes; the rest of the
    /// eigenbasis is the exact orthonormal complement.
    pub fn basis(&self, r: usize) -> Result<SubUnitaryBasis> {
        let n = self.dim();
        let u_perp = self.modes.view((0, 0), (n, r)).into_owned();
        let u_para = self.modes.view((0, r), (n, n - r)).into_owned();
        SubUnitaryBasis::new(u_perp, u_para)
    }
}

fn propagator_from(modes: &DMatrix<f64>, eigenvalues: &DVector<f64>, dt: f64) -> DMatrix<f64> {
    let n = modes.nrows();
    let mut scaled = DMatrix::zeros(n, n);
    for k in 0..n {
        let factor = (eigenvalues[k] * dt).exp();
        for i in 0..n {
            scaled[(i, k)] = modes[(i, k)] * factor;
        }
    }
    scaled * modes.transpose()
}

/// Spectral right-hand side of `u_t = -c u_s` on the periodic unit
/// interval: mode `k` is multiplied by `-c * i * 2 pi k`. The zero mode is
/// untouched, so the discrete mass `mean(x)` is conserved exactly.
pub fn spectral_advection_rhs(fft: &RealFft, x: &DVector<f64>, velocity: f64) -> DVector<f64> {
    let mut spec = fft.forward(x.as_slice());
    for (k, c) in spec.iter_mut().enumerate() {
        let omega = 2.0 * std::f64::consts::PI * k as f64;
        // multiply by -c * (i * omega): (re + i im)(i w) = -im*w + i re*w
        let re = c.re;
        let im = c.im;
        c.re = velocity * omega * im;
        c.im = -velocity * omega * re;
    }
    DVector::from_vec(fft.inverse(&spec))
}

/// Linear advection of a periodic field, integrated with the adaptive SSP
/// stepper between observation times.
#[derive(Debug, Clone)]
pub struct LinearAdvectionModel {
    n: usize,
    velocity: f64,
    dt_obs: f64,
    abs_tol: f64,
    rel_tol: f64,
    fft: RealFft,
    dt_init: f64,
}

impl LinearAdvectionModel {
    pub fn new(n: usize, velocity: f64, dt_obs: f64, abs_tol: f64, rel_tol: f64) -> Result<Self> {
        if !(dt_obs.is_finite() && dt_obs > 0.0) {
            return Err(Error::Config(format!("dt_obs must be positive, got {dt_obs}")));
        }
        let fft = RealFft::new(n)?;
        // Start near the linear stability limit of the highest retained
        // mode; the controller adapts from there.
        let omega_max = 2.0 * std::f64::consts::PI * (n as f64 / 2.0) * velocity.abs().max(1e-12);
        let dt_init = (2.0 / omega_max).min(dt_obs);
        Ok(Self { n, velocity, dt_obs, abs_tol, rel_tol, fft, dt_init })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn dt_obs(&self) -> f64 {
        self.dt_obs
    }

    pub fn fft(&self) -> &RealFft {
        &self.fft
    }

    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        spectral_advection_rhs(&self.fft, x, self.velocity)
    }

    pub fn propagate(&self, x: &DVector<f64>, horizon: f64) -> Result<DVector<f64>> {
        integrate_adaptive(
            |v| self.rhs(v),
            x,
            horizon,
            self.abs_tol,
            self.rel_tol,
            self.dt_init,
        )
    }

    /// Normalized constant vector whose functional is proportional to the
    /// discrete mass of the field.
    pub fn mass_basis(&self) -> Result<SubUnitaryBasis> {
        let u_perp = DMatrix::from_element(self.n, 1, 1.0 / (self.n as f64).sqrt());
        SubUnitaryBasis::from_u_perp(u_perp)
    }
}

/// Lorenz-63 embedded into `R^4` by an orthogonal rotation `Q`: the first
/// three rotated coordinates follow Lorenz-63, the fourth is frozen, so
/// `(Q e_4)^T x` is conserved exactly.
#[derive(Debug, Clone)]
pub struct EmbeddedLorenz63Model {
    rotation: DMatrix<f64>,
    sigma: f64,
    beta: f64,
    rho: f64,
    dt_obs: f64,
    internal_dt: f64,
}

impl EmbeddedLorenz63Model {
    /// Standard chaotic parameters and a rotation drawn as the QR factor
    /// of a Gaussian 4x4 matrix.
    pub fn build<R: Rng + ?Sized>(rng: &mut R, dt_obs: f64) -> Result<Self> {
        let gauss = DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(rng));
        Self::with_rotation(gauss.qr().q(), dt_obs)
    }

    pub fn with_rotation(rotation: DMatrix<f64>, dt_obs: f64) -> Result<Self> {
        if rotation.nrows() != 4 || rotation.ncols() != 4 {
            return Err(Error::Dimension {
                context: "EmbeddedLorenz63Model rotation",
                expected: 4,
                got: rotation.nrows().max(rotation.ncols()),
            });
        }
        let orth_dev = (rotation.tr_mul(&rotation) - DMatrix::identity(4, 4)).norm();
        if orth_dev > 1e-10 {
            return Err(Error::Config(format!(
                "rotation is not orthogonal (deviation {orth_dev:e})"
            )));
        }
        if !(dt_obs.is_finite() && dt_obs > 0.0) {
            return Err(Error::Config(format!("dt_obs must be positive, got {dt_obs}")));
        }
        Ok(Self {
            rotation,
            sigma: 10.0,
            beta: 8.0 / 3.0,
            rho: 28.0,
            dt_obs,
            internal_dt: dt_obs / 10.0,
        })
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn dt_obs(&self) -> f64 {
        self.dt_obs
    }

    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.rotation.tr_mul(x);
        let dw = DVector::from_vec(vec![
            self.sigma * (w[1] - w[0]),
            w[0] * (self.rho - w[2]) - w[1],
            w[0] * w[1] - self.beta * w[2],
            0.0,
        ]);
        &self.rotation * dw
    }

    pub fn propagate(&self, x: &DVector<f64>, horizon: f64) -> Result<DVector<f64>> {
        let steps = ((horizon / self.internal_dt).round() as usize).max(1);
        let dt = horizon / steps as f64;
        let mut state = x.clone();
        for _ in 0..steps {
            state = rk4_step(|v| self.rhs(v), &state, dt)?;
        }
        Ok(state)
    }

    /// `u_perp = Q e_4`; the other three rotation columns are the exact
    /// complement.
    pub fn basis(&self) -> Result<SubUnitaryBasis> {
        let u_perp = self.rotation.view((0, 3), (4, 1)).into_owned();
        let u_para = self.rotation.view((0, 0), (4, 3)).into_owned();
        SubUnitaryBasis::new(u_perp, u_para)
    }
}

/// One of the three benchmark dynamics.
#[derive(Debug, Clone)]
pub enum Dynamics {
    SyntheticLinear(SyntheticLinearModel),
    Advection(LinearAdvectionModel),
    EmbeddedLorenz(EmbeddedLorenz63Model),
}

impl Dynamics {
    pub fn dim(&self) -> usize {
        match self {
            Dynamics::SyntheticLinear(m) => m.dim(),
            Dynamics::Advection(m) => m.dim(),
            Dynamics::EmbeddedLorenz(_) => 4,
        }
    }
}

/// A complete state-space model: dynamics, invariant basis, process noise
/// level, observation operator, and the time between observations.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub dynamics: Dynamics,
    pub obs: ObservationOperator,
    pub process_noise_std: f64,
    pub basis: SubUnitaryBasis,
    pub dt_obs: f64,
}

impl StateSpaceModel {
    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    /// Noiseless forecast over one observation interval.
    pub fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                context: "propagate state",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let next = match &self.dynamics {
            Dynamics::SyntheticLinear(m) => m.propagate(x),
            Dynamics::Advection(m) => m.propagate(x, self.dt_obs)?,
            Dynamics::EmbeddedLorenz(m) => m.propagate(x, self.dt_obs)?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup);
        }
        Ok(next)
    }

    /// Forecast plus invariant-preserving process noise.
    pub fn forward<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let mut next = self.propagate(x)?;
        if self.process_noise_std > 0.0 {
            next += invariant_preserving_process_noise(rng, &self.basis, self.process_noise_std)?;
        }
        Ok(next)
    }

    /// Simulates an observation of a state.
    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        self.obs.observe(x, rng)
    }
}
