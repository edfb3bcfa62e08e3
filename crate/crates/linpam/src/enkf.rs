//! Stochastic ensemble Kalman filter with perturbed observations.
//!
//! The analysis solves the representer system built from ensemble
//! anomalies rather than forming a covariance explicitly. Two
//! regularizers are provided — multiplicative inflation of state
//! anomalies and Gaspari-Cohn covariance tapering — together with an
//! invariant-preserving variant that projects the empirical gain onto
//! the orthogonal complement of the invariant directions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::invariant_subspace::SubUnitaryBasis;
use crate::models::ObservationOperator;
use crate::sampling::gaussian_vector;

/// Condition-number estimate above which the innovation covariance is
/// treated as numerically singular even if the factorization succeeds.
const CONDITION_LIMIT: f64 = 1e14;
/// Relative jitter ladder for the innovation-covariance factorization:
/// multiples of `trace/d` from `JITTER_MIN_REL` up to `JITTER_MAX_REL`,
/// growing tenfold per attempt.
const JITTER_MIN_REL: f64 = 1e-12;
const JITTER_MAX_REL: f64 = 1e-6;

/// An ensemble of state vectors (columns), optionally paired with
/// simulated observations of each member.
#[derive(Debug, Clone)]
pub struct Ensemble {
    states: DMatrix<f64>,
    obs: Option<DMatrix<f64>>,
}

impl Ensemble {
    pub fn new(states: DMatrix<f64>) -> Result<Self> {
        if states.ncols() < 2 {
            return Err(Error::EnsembleTooSmall(states.ncols()));
        }
        Ok(Self { states, obs: None })
    }

    pub fn from_members(members: &[DVector<f64>]) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::EnsembleTooSmall(members.len()));
        }
        let n = members[0].len();
        if let Some(bad) = members.iter().find(|v| v.len() != n) {
            return Err(Error::Dimension {
                context: "ensemble member length",
                expected: n,
                got: bad.len(),
            });
        }
        let mut states = DMatrix::zeros(n, members.len());
        for (i, v) in members.iter().enumerate() {
            states.set_column(i, v);
        }
        Ok(Self { states, obs: None })
    }

    pub fn size(&self) -> usize {
        self.states.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.states
    }

    pub fn obs(&self) -> Option<&DMatrix<f64>> {
        self.obs.as_ref()
    }

    /// Attaches simulated observations, one column per member.
    pub fn set_obs(&mut self, obs: Option<DMatrix<f64>>) -> Result<()> {
        if let Some(o) = &obs {
            if o.ncols() != self.size() {
                return Err(Error::Dimension {
                    context: "simulated observation columns",
                    expected: self.size(),
                    got: o.ncols(),
                });
            }
        }
        self.obs = obs;
        Ok(())
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.states.column(i).into_owned()
    }

    pub fn set_member(&mut self, i: usize, v: &DVector<f64>) {
        self.states.set_column(i, v);
    }

    pub fn mean(&self) -> DVector<f64> {
        self.states.column_mean()
    }

    /// Columns `(x^i - mean)/sqrt(M-1)`, so `A A^T` is the unbiased
    /// sample covariance.
    pub fn anomalies(&self) -> Result<DMatrix<f64>> {
        centered_scaled(&self.states)
    }

    pub fn sample_covariance(&self) -> Result<DMatrix<f64>> {
        let a = self.anomalies()?;
        Ok(&a * a.transpose())
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }

    /// Replaces every member by `f(member)`; used to push the ensemble
    /// through the forecast dynamics.
    pub fn map_members<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    {
        for i in 0..self.size() {
            let next = f(&self.member(i))?;
            if next.len() != self.state_dim() {
                return Err(Error::Dimension {
                    context: "mapped member length",
                    expected: self.state_dim(),
                    got: next.len(),
                });
            }
            self.states.set_column(i, &next);
        }
        Ok(())
    }
}

/// Centers columns by their mean and scales by `1/sqrt(M-1)`.
fn centered_scaled(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = samples.ncols();
    if m < 2 {
        return Err(Error::EnsembleTooSmall(m));
    }
    let mean = samples.column_mean();
    let scale = 1.0 / ((m - 1) as f64).sqrt();
    let mut a = samples.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
        col *= scale;
    }
    Ok(a)
}

/// Scales every member's deviation from the mean by `beta`, leaving the
/// mean fixed and multiplying the sample covariance by `beta^2`.
pub fn multiplicative_inflation(ensemble: &mut Ensemble, beta: f64) {
    let mean = ensemble.mean();
    for mut col in ensemble.states.column_iter_mut() {
        col -= &mean;
        col *= beta;
        col += &mean;
    }
}

/// Compactly supported fifth-order piecewise-rational correlation
/// function: 1 at distance 0, 0 at and beyond `2 * radius`.
pub fn gaspari_cohn(dist: f64, radius: f64) -> f64 {
    debug_assert!(radius > 0.0);
    let z = dist.abs() / radius;
    if z < 1.0 {
        1.0 + z * z * (-5.0 / 3.0 + z * (5.0 / 8.0 + z * (0.5 - 0.25 * z)))
    } else if z < 2.0 {
        let poly =
            4.0 + z * (-5.0 + z * (5.0 / 3.0 + z * (5.0 / 8.0 + z * (-0.5 + z / 12.0))));
        (poly - 2.0 / (3.0 * z)).max(0.0)
    } else {
        0.0
    }
}

/// How distances between state/observation site indices are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaperMetric {
    /// Absolute index difference `|i - j|`.
    Index,
    /// Alias of `Index` for one-dimensional site layouts.
    Euclidean,
    /// Shortest distance around a ring of the given length.
    Periodic(usize),
}

impl TaperMetric {
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match *self {
            TaperMetric::Index | TaperMetric::Euclidean => (i as f64 - j as f64).abs(),
            TaperMetric::Periodic(n) => {
                let d = i.abs_diff(j);
                d.min(n - d) as f64
            }
        }
    }
}

/// Precomputed taper weights: `rho_xy[(i, j)]` couples state component
/// `i` with observation `j`, `rho_yy` couples observation pairs.
#[derive(Debug, Clone)]
pub struct TaperPair {
    pub rho_xy: DMatrix<f64>,
    pub rho_yy: DMatrix<f64>,
}

impl TaperPair {
    pub fn build(
        state_dim: usize,
        obs_sites: &[usize],
        radius: f64,
        metric: TaperMetric,
    ) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Config(format!(
                "taper radius must be positive and finite, got {radius}"
            )));
        }
        let d = obs_sites.len();
        let rho_xy = DMatrix::from_fn(state_dim, d, |i, j| {
            gaspari_cohn(metric.distance(i, obs_sites[j]), radius)
        });
        let rho_yy = DMatrix::from_fn(d, d, |i, j| {
            gaspari_cohn(metric.distance(obs_sites[i], obs_sites[j]), radius)
        });
        Ok(Self { rho_xy, rho_yy })
    }

    /// The taper weights relevant to the single observation `j`, for use
    /// in sequential scalar updates.
    pub fn restrict_to_obs(&self, j: usize) -> Self {
        let mut rho_xy = DMatrix::zeros(self.rho_xy.nrows(), 1);
        rho_xy.set_column(0, &self.rho_xy.column(j));
        Self {
            rho_xy,
            rho_yy: DMatrix::from_element(1, 1, self.rho_yy[(j, j)]),
        }
    }
}

/// Factors a symmetric positive-definite matrix, escalating a diagonal
/// jitter when the plain factorization fails or is too ill-conditioned.
fn innovation_cholesky(c: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let d = c.nrows();
    let scale = c.trace() / d as f64;
    if !scale.is_finite() {
        return Err(Error::SingularInnovationCovariance);
    }
    let mut rel = 0.0;
    loop {
        let attempt = if rel == 0.0 {
            c.clone()
        } else {
            let mut jittered = c.clone();
            for k in 0..d {
                jittered[(k, k)] += rel * scale;
            }
            jittered
        };
        if let Some(chol) = Cholesky::new(attempt) {
            let l = chol.l_dirty();
            let mut dmin = f64::INFINITY;
            let mut dmax: f64 = 0.0;
            for k in 0..d {
                let v = l[(k, k)];
                dmin = dmin.min(v);
                dmax = dmax.max(v);
            }
            if dmin > 0.0 && (dmax / dmin).powi(2) <= CONDITION_LIMIT {
                return Ok(chol);
            }
        }
        rel = if rel == 0.0 { JITTER_MIN_REL } else { rel * 10.0 };
        if rel > JITTER_MAX_REL * 1.000001 {
            return Err(Error::SingularInnovationCovariance);
        }
    }
}

/// The empirical Kalman gain implied by state anomalies, observation
/// operator, and centered noise anomalies, with optional tapering.
/// Exposed for diagnostics; the analysis itself solves per-member
/// representer systems instead of forming the gain.
pub fn empirical_gain(
    a_x: &DMatrix<f64>,
    g: &DMatrix<f64>,
    a_e: &DMatrix<f64>,
    taper: Option<&TaperPair>,
) -> Result<DMatrix<f64>> {
    let s = g * a_x;
    let mut c = &s * s.transpose();
    if let Some(t) = taper {
        c.component_mul_assign(&t.rho_yy);
    }
    c += a_e * a_e.transpose();
    let chol = innovation_cholesky(&c)?;
    let mut cross = a_x * s.transpose();
    if let Some(t) = taper {
        cross.component_mul_assign(&t.rho_xy);
    }
    // K = cross * C^{-1}; with C symmetric, solve C K^T = cross^T.
    let kt = chol.solve(&cross.transpose());
    Ok(kt.transpose())
}

/// Perturbed-observation analysis with the noise draws supplied by the
/// caller (column `i` is member `i`'s observation perturbation).
///
/// When `projection` is given, the empirical gain is left-multiplied by
/// `I - u_perp u_perp^T`, so no member's invariant components move.
/// Tapering is applied to the empirical covariances before projection.
pub fn enkf_analysis_with_noise(
    ensemble: &mut Ensemble,
    obs: &ObservationOperator,
    y_star: &DVector<f64>,
    noise: &DMatrix<f64>,
    projection: Option<&SubUnitaryBasis>,
    taper: Option<&TaperPair>,
) -> Result<()> {
    let n = ensemble.state_dim();
    let m = ensemble.size();
    let d = obs.obs_dim();
    if obs.state_dim() != n {
        return Err(Error::Dimension {
            context: "analysis observation operator",
            expected: n,
            got: obs.state_dim(),
        });
    }
    if y_star.len() != d {
        return Err(Error::Dimension {
            context: "analysis observation vector",
            expected: d,
            got: y_star.len(),
        });
    }
    if noise.nrows() != d || noise.ncols() != m {
        return Err(Error::Dimension {
            context: "analysis noise matrix",
            expected: d * m,
            got: noise.nrows() * noise.ncols(),
        });
    }
    if let Some(t) = taper {
        if t.rho_xy.nrows() != n || t.rho_xy.ncols() != d || t.rho_yy.nrows() != d {
            return Err(Error::Dimension {
                context: "taper weight matrices",
                expected: n * d,
                got: t.rho_xy.nrows() * t.rho_xy.ncols(),
            });
        }
    }
    if let Some(b) = projection {
        if b.state_dim() != n {
            return Err(Error::Dimension {
                context: "projection basis",
                expected: n,
                got: b.state_dim(),
            });
        }
    }

    let a_x = ensemble.anomalies()?;
    let s = obs.matrix() * &a_x;
    let a_e = centered_scaled(noise)?;

    let mut c = &s * s.transpose();
    if let Some(t) = taper {
        c.component_mul_assign(&t.rho_yy);
    }
    c += &a_e * a_e.transpose();
    let chol = innovation_cholesky(&c)?;

    let mut cross = &a_x * s.transpose();
    if let Some(t) = taper {
        cross.component_mul_assign(&t.rho_xy);
    }

    // Innovations for all members at once: G x^i + eps^i - y*.
    let mut innovations = obs.matrix() * ensemble.states() + noise;
    for mut col in innovations.column_iter_mut() {
        col -= y_star;
    }
    let b = chol.solve(&innovations);
    let mut update = &cross * b;
    // The projector acts on the assembled update rather than on the
    // tapered cross term: algebraically identical, but when a
    // rank-deficient innovation covariance forces a heavily jittered
    // solve, the representer amplitudes grow large enough to amplify the
    // rounding residue a projected cross term leaves in the conserved
    // directions. Projecting last pins every member's conserved
    // components to rounding error per analysis regardless of the
    // solve's conditioning.
    if let Some(basis) = projection {
        if basis.invariant_count() > 0 {
            let coeffs = basis.u_perp().tr_mul(&update);
            update -= basis.u_perp() * coeffs;
        }
    }
    ensemble.states -= update;

    if !ensemble.is_finite() {
        return Err(Error::Diverged);
    }
    Ok(())
}

/// Perturbed-observation analysis: draws `eps^i ~ N(0, sigma_E^2 I)` per
/// member, then applies the representer update.
pub fn enkf_analysis<R: Rng + ?Sized>(
    ensemble: &mut Ensemble,
    obs: &ObservationOperator,
    y_star: &DVector<f64>,
    projection: Option<&SubUnitaryBasis>,
    taper: Option<&TaperPair>,
    rng: &mut R,
) -> Result<()> {
    let d = obs.obs_dim();
    let m = ensemble.size();
    let mut noise = DMatrix::zeros(d, m);
    for i in 0..m {
        let eps = gaussian_vector(rng, d, obs.noise_std())?;
        noise.set_column(i, &eps);
    }
    enkf_analysis_with_noise(ensemble, obs, y_star, &noise, projection, taper)
}

/// Assimilates the observation vector one scalar component at a time,
/// each sub-update acting on the output of the previous one with freshly
/// drawn observation perturbations.
pub fn enkf_analysis_sequential<R: Rng + ?Sized>(
    ensemble: &mut Ensemble,
    obs: &ObservationOperator,
    y_star: &DVector<f64>,
    projection: Option<&SubUnitaryBasis>,
    taper: Option<&TaperPair>,
    rng: &mut R,
) -> Result<()> {
    if y_star.len() != obs.obs_dim() {
        return Err(Error::Dimension {
            context: "sequential observation vector",
            expected: obs.obs_dim(),
            got: y_star.len(),
        });
    }
    let m = ensemble.size();
    for j in 0..obs.obs_dim() {
        let row = obs.row(j);
        let y_j = DVector::from_element(1, y_star[j]);
        let mut noise = DMatrix::zeros(1, m);
        for i in 0..m {
            let eps = gaussian_vector(rng, 1, obs.noise_std())?;
            noise[(0, i)] = eps[0];
        }
        let restricted = taper.map(|t| t.restrict_to_obs(j));
        enkf_analysis_with_noise(ensemble, &row, &y_j, &noise, projection, restricted.as_ref())?;
    }
    Ok(())
}
