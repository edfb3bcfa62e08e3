//! Monotone lower-triangular transport maps.
//!
//! Each map component `S^k(x_1, ..., x_k)` is a sum of per-input feature
//! functions: off-diagonal inputs contribute a linear term plus Gaussian
//! radial basis functions; the last (diagonal) input contributes either
//! an affine term or a combination of strictly increasing erf-based ramps
//! and sigmoids. Coefficients are chosen so the component pushes training
//! samples toward a standard normal reference, by minimizing
//! `J(c) = mean(S^2/2 - log dS/dx_k)` — in closed form when the diagonal
//! is affine, by a projected Newton iteration under nonnegativity
//! constraints otherwise. Conditional sampling reduces to univariate
//! root finds in the last input, which stay well-posed because every
//! diagonal family is affine outside the data range.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.5066282746310002;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// sqrt(2/pi)
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Relative ridge added to a Gram matrix whose factorization fails.
const RIDGE_REL: f64 = 1e-8;
/// Iteration cap for the constrained Newton fit.
const NEWTON_MAX_ITERS: usize = 200;
/// KKT tolerance is `KKT_REL * (1 + |J|)`.
const KKT_REL: f64 = 1e-8;
/// Inversion tolerance is `INVERT_REL * (1 + |target|)`.
const INVERT_REL: f64 = 1e-10;
/// Bracket expansion gives up beyond this multiple of the sample range.
const BRACKET_LIMIT: f64 = 1e6;

/// Feature family configuration shared by all map components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    /// Number of radial basis functions per off-diagonal input; the
    /// monotone diagonal family uses `p + 2` ramps/sigmoids. `p = 0`
    /// reduces every component to an affine function.
    pub p: usize,
    /// Width multiplier on the inter-quantile spacing of the centers.
    pub gamma: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { p: 2, gamma: 2.0 }
    }
}

/// Which family the last input of a component uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalKind {
    Affine,
    MonotonePsi,
}

/// Centers and widths of a basis-function family on one input.
#[derive(Debug, Clone, Default)]
pub struct FeatureSite {
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

impl FeatureSite {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Empirical quantile by linear interpolation of order statistics at
/// position `level * (m + 1)` (1-based), clamped to the data range.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    let m = sorted.len();
    assert!(m >= 1 && (0.0..=1.0).contains(&level));
    let pos = level * (m as f64 + 1.0);
    if pos <= 1.0 {
        return sorted[0];
    }
    if pos >= m as f64 {
        return sorted[m - 1];
    }
    let lo = pos.floor() as usize; // 1-based index of the lower order statistic
    let frac = pos - lo as f64;
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

/// Places basis centers at the empirical quantiles of one input's
/// samples and derives widths from neighboring center spacing.
///
/// `diagonal` selects the richer family (`p + 2` centers) used by
/// monotone diagonal features; otherwise `p` centers are produced
/// (an empty site when `p = 0`).
pub fn fit_sites(samples: &[f64], p: usize, gamma: f64, diagonal: bool) -> Result<FeatureSite> {
    if samples.len() < 2 {
        return Err(Error::EnsembleTooSmall(samples.len()));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!("feature width scale must be positive, got {gamma}")));
    }
    let q = if diagonal { p + 2 } else { p };
    if q == 0 {
        return Ok(FeatureSite::default());
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let spread = sorted[sorted.len() - 1] - sorted[0];
    if spread == 0.0 {
        return Err(Error::DegenerateMarginal);
    }
    let centers: Vec<f64> = (1..=q)
        .map(|l| quantile(&sorted, l as f64 / (q as f64 + 1.0)))
        .collect();
    let floor = 1e-8 * (spread + 1e-12);
    let widths: Vec<f64> = (0..q)
        .map(|l| {
            let left = if l == 0 { centers[0] } else { centers[l - 1] };
            let right = if l + 1 == q { centers[q - 1] } else { centers[l + 1] };
            (gamma * (right - left) / 2.0).max(floor)
        })
        .collect();
    Ok(FeatureSite { centers, widths })
}

fn gauss_pdf(x: f64, center: f64, width: f64) -> f64 {
    let t = (x - center) / width;
    (-0.5 * t * t).exp() / (width * SQRT_2PI)
}

/// Off-diagonal feature value: a linear term plus Gaussian-pdf bumps,
/// `coeffs = [linear, bump_1, ..., bump_p]`.
pub fn eval_offdiagonal(site: &FeatureSite, coeffs: &[f64], x: f64) -> f64 {
    debug_assert_eq!(coeffs.len(), site.len() + 1);
    let mut v = coeffs[0] * x;
    for l in 0..site.len() {
        v += coeffs[l + 1] * gauss_pdf(x, site.centers[l], site.widths[l]);
    }
    v
}

/// The three strictly increasing diagonal basis functions: a left ramp
/// that is linear as `x -> -inf` and flat as `x -> +inf`, erf sigmoids,
/// and the mirrored right ramp. Returns `(value, derivative)`.
fn psi_basis(kind: usize, last: usize, x: f64, center: f64, width: f64) -> (f64, f64) {
    let delta = (x - center) / (SQRT_2 * width);
    let erf = libm::erf(delta);
    let gauss = (-delta * delta).exp();
    if kind == 0 {
        let value = 0.5 * ((x - center) * (1.0 - erf) - width * SQRT_2_OVER_PI * gauss);
        (value, 0.5 * (1.0 - erf))
    } else if kind == last {
        let value = 0.5 * ((x - center) * (1.0 + erf) + width * SQRT_2_OVER_PI * gauss);
        (value, 0.5 * (1.0 + erf))
    } else {
        (0.5 * (1.0 + erf), gauss / (width * SQRT_2PI))
    }
}

/// Monotone diagonal feature: intercept plus nonnegative combinations of
/// the ramp/sigmoid family, `coeffs = [intercept, w_1, ..., w_{p+2}]`.
/// Returns `(value, derivative in x)`.
pub fn eval_diagonal_psi(site: &FeatureSite, coeffs: &[f64], x: f64) -> (f64, f64) {
    let q = site.len();
    debug_assert_eq!(coeffs.len(), q + 1);
    let mut value = coeffs[0];
    let mut deriv = 0.0;
    for l in 0..q {
        let (v, d) = psi_basis(l, q - 1, x, site.centers[l], site.widths[l]);
        value += coeffs[l + 1] * v;
        deriv += coeffs[l + 1] * d;
    }
    (value, deriv)
}

#[derive(Debug, Clone, Copy)]
struct Standardization {
    mean: f64,
    std: f64,
}

impl Standardization {
    fn fit(samples: &[f64]) -> (Self, bool) {
        let m = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / m;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        let std = var.sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            (Self { mean, std: 1.0 }, true)
        } else {
            (Self { mean, std }, false)
        }
    }

    fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

#[derive(Debug, Clone)]
struct OffdiagFeature {
    standardization: Standardization,
    site: FeatureSite,
}

#[derive(Debug, Clone)]
struct DiagonalFeature {
    standardization: Standardization,
    kind: DiagonalKind,
    /// Sites of the monotone family; unused for the affine kind.
    site: FeatureSite,
}

impl OffdiagFeature {
    fn coeff_count(&self) -> usize {
        1 + self.site.len()
    }

    /// Writes the feature values of raw input `x` into `out`.
    fn featurize(&self, x: f64, out: &mut [f64]) {
        let z = self.standardization.apply(x);
        out[0] = z;
        for l in 0..self.site.len() {
            out[l + 1] = gauss_pdf(z, self.site.centers[l], self.site.widths[l]);
        }
    }

    fn eval(&self, coeffs: &[f64], x: f64) -> f64 {
        eval_offdiagonal(&self.site, coeffs, self.standardization.apply(x))
    }
}

impl DiagonalFeature {
    fn coeff_count(&self) -> usize {
        match self.kind {
            DiagonalKind::Affine => 2,
            DiagonalKind::MonotonePsi => 1 + self.site.len(),
        }
    }

    /// Feature values and their derivatives in the raw input.
    fn featurize(&self, x: f64, out: &mut [f64], dout: &mut [f64]) {
        let z = self.standardization.apply(x);
        let dz = 1.0 / self.standardization.std;
        match self.kind {
            DiagonalKind::Affine => {
                out[0] = 1.0;
                out[1] = z;
                dout[0] = 0.0;
                dout[1] = dz;
            }
            DiagonalKind::MonotonePsi => {
                out[0] = 1.0;
                dout[0] = 0.0;
                let q = self.site.len();
                for l in 0..q {
                    let (v, d) =
                        psi_basis(l, q - 1, z, self.site.centers[l], self.site.widths[l]);
                    out[l + 1] = v;
                    dout[l + 1] = d * dz;
                }
            }
        }
    }

    fn eval(&self, coeffs: &[f64], x: f64) -> (f64, f64) {
        let z = self.standardization.apply(x);
        match self.kind {
            DiagonalKind::Affine => (coeffs[0] + coeffs[1] * z, coeffs[1] / self.standardization.std),
            DiagonalKind::MonotonePsi => {
                let (v, d) = eval_diagonal_psi(&self.site, coeffs, z);
                (v, d / self.standardization.std)
            }
        }
    }
}

/// One fitted component `S^k` of a triangular map.
#[derive(Debug, Clone)]
pub struct TriangularMapComponent {
    offdiag: Vec<OffdiagFeature>,
    diag: DiagonalFeature,
    coeffs: DVector<f64>,
    last_range: (f64, f64),
    converged: bool,
}

/// A component with its off-diagonal contribution at a fixed prefix
/// already summed, leaving a cheap univariate function of the last input.
#[derive(Debug, Clone)]
pub struct PrefixedComponent<'a> {
    diag: &'a DiagonalFeature,
    diag_coeffs: &'a [f64],
    offset: f64,
    last_range: (f64, f64),
}

impl TriangularMapComponent {
    pub fn arity(&self) -> usize {
        self.offdiag.len() + 1
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coeffs
    }

    /// The same featurization with different coefficients; used to probe
    /// the estimation objective.
    pub fn with_coefficients(&self, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != self.coeffs.len() {
            return Err(Error::Dimension {
                context: "component coefficient vector",
                expected: self.coeffs.len(),
                got: coeffs.len(),
            });
        }
        Ok(Self { coeffs, ..self.clone() })
    }

    #[cfg(test)]
    fn diag_coeff_offset(&self) -> usize {
        self.offdiag.iter().map(|f| f.coeff_count()).sum()
    }

    /// Fixes the first `k - 1` inputs, returning a univariate view of the
    /// component in its last input.
    pub fn prefix(&self, prefix: &[f64]) -> PrefixedComponent<'_> {
        assert_eq!(prefix.len(), self.offdiag.len(), "prefix length mismatch");
        let mut offset = 0.0;
        let mut at = 0;
        for (f, &x) in self.offdiag.iter().zip(prefix) {
            let c = f.coeff_count();
            offset += f.eval(&self.coeffs.as_slice()[at..at + c], x);
            at += c;
        }
        PrefixedComponent {
            diag: &self.diag,
            diag_coeffs: &self.coeffs.as_slice()[at..],
            offset,
            last_range: self.last_range,
        }
    }

    pub fn value(&self, input: &[f64]) -> f64 {
        self.value_and_derivative(input).0
    }

    /// `(S, dS/d x_k)` at a raw input vector of length `arity()`.
    pub fn value_and_derivative(&self, input: &[f64]) -> (f64, f64) {
        assert_eq!(input.len(), self.arity(), "input length mismatch");
        let (prefix, last) = input.split_at(input.len() - 1);
        self.prefix(prefix).value_and_derivative(last[0])
    }

    /// Solves `S(prefix, x_k) = target` for `x_k`.
    pub fn invert_last_input(&self, prefix: &[f64], target: f64) -> Result<f64> {
        self.prefix(prefix).invert(target)
    }

    /// The estimation objective `mean(S^2/2 - log dS/dx_k)` and its
    /// gradient in the coefficients, evaluated on `samples` (rows are
    /// the `k` inputs, columns are samples).
    pub fn objective(&self, samples: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        let problem = self.featurize_samples(samples)?;
        Ok(problem.objective_and_gradient(&self.coeffs))
    }

    fn featurize_samples(&self, samples: &DMatrix<f64>) -> Result<FeatureProblem> {
        if samples.nrows() != self.arity() {
            return Err(Error::Dimension {
                context: "component sample rows",
                expected: self.arity(),
                got: samples.nrows(),
            });
        }
        let m = samples.ncols();
        let q = self.coeffs.len();
        let mut phi = DMatrix::zeros(m, q);
        let mut dphi = DMatrix::zeros(m, q);
        let k = self.arity();
        let mut buf = vec![0.0; q];
        let mut dbuf = vec![0.0; q];
        for i in 0..m {
            let mut at = 0;
            for (j, f) in self.offdiag.iter().enumerate() {
                let c = f.coeff_count();
                f.featurize(samples[(j, i)], &mut buf[at..at + c]);
                at += c;
            }
            let c = self.diag.coeff_count();
            self.diag
                .featurize(samples[(k - 1, i)], &mut buf[at..at + c], &mut dbuf[at..at + c]);
            for l in 0..q {
                phi[(i, l)] = buf[l];
            }
            for l in at..at + c {
                dphi[(i, l)] = dbuf[l];
            }
        }
        Ok(FeatureProblem { phi, dphi })
    }
}

impl PrefixedComponent<'_> {
    pub fn value_and_derivative(&self, x: f64) -> (f64, f64) {
        let (v, d) = self.diag.eval(self.diag_coeffs, x);
        (self.offset + v, d)
    }

    /// Safeguarded Newton/bisection root find on the monotone last input.
    pub fn invert(&self, target: f64) -> Result<f64> {
        let (mut lo, mut hi) = self.last_range;
        if !(hi > lo) {
            let pad = 1e-8 * (1.0 + lo.abs());
            lo -= pad;
            hi += pad;
        }
        let range0 = hi - lo;
        let lo_limit = lo - BRACKET_LIMIT * range0;
        let hi_limit = hi + BRACKET_LIMIT * range0;

        let mut step = range0;
        while self.value_and_derivative(lo).0 > target {
            lo -= step;
            step *= 2.0;
            if lo < lo_limit {
                return Err(Error::InversionBracketFailure);
            }
        }
        step = range0;
        while self.value_and_derivative(hi).0 < target {
            hi += step;
            step *= 2.0;
            if hi > hi_limit {
                return Err(Error::InversionBracketFailure);
            }
        }

        let tol = INVERT_REL * (1.0 + target.abs());
        let mut x = 0.5 * (lo + hi);
        for _ in 0..500 {
            let (v, d) = self.value_and_derivative(x);
            if (v - target).abs() <= tol {
                // One polishing Newton step: the residual bound alone
                // leaves an input error of tol / slope, which for slopes
                // below one exceeds the residual tolerance itself.
                let newton = x - (v - target) / d;
                if d > 0.0 && newton.is_finite() && newton >= lo && newton <= hi {
                    return Ok(newton);
                }
                return Ok(x);
            }
            if v > target {
                hi = x;
            } else {
                lo = x;
            }
            // A near-deterministic component has a slope so large that no
            // representable x meets the residual tolerance; once the
            // bracket has collapsed to rounding width the midpoint is the
            // root to machine precision.
            if hi - lo <= f64::EPSILON * (lo.abs().max(hi.abs()) + 1.0) {
                return Ok(0.5 * (lo + hi));
            }
            let newton = x - (v - target) / d;
            x = if d > 0.0 && newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        let (v, _) = self.value_and_derivative(x);
        if (v - target).abs() <= 10.0 * tol {
            Ok(x)
        } else {
            Err(Error::InversionBracketFailure)
        }
    }
}

/// Featurized training data for one component: `S_i = phi_i . c` and
/// `dS_i/dx_k = dphi_i . c`, both linear in the coefficients.
struct FeatureProblem {
    phi: DMatrix<f64>,
    dphi: DMatrix<f64>,
}

impl FeatureProblem {
    fn objective(&self, c: &DVector<f64>) -> f64 {
        let m = self.phi.nrows();
        let s = &self.phi * c;
        let d = &self.dphi * c;
        let mut j = 0.0;
        for i in 0..m {
            if d[i] <= 0.0 {
                return f64::INFINITY;
            }
            j += 0.5 * s[i] * s[i] - d[i].ln();
        }
        j / m as f64
    }

    fn objective_and_gradient(&self, c: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = self.phi.nrows();
        let s = &self.phi * c;
        let d = &self.dphi * c;
        let mut j = 0.0;
        let mut weights = DVector::zeros(m);
        for i in 0..m {
            if d[i] <= 0.0 {
                return (f64::INFINITY, DVector::zeros(c.len()));
            }
            j += 0.5 * s[i] * s[i] - d[i].ln();
            weights[i] = 1.0 / d[i];
        }
        let grad = (self.phi.tr_mul(&s) - self.dphi.tr_mul(&weights)) / m as f64;
        (j / m as f64, grad)
    }

    fn hessian(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let m = self.phi.nrows();
        let d = &self.dphi * c;
        let mut h = self.phi.tr_mul(&self.phi);
        // Add dphi_i dphi_i^T / d_i^2 via a scaled copy of dphi.
        let mut scaled = self.dphi.clone();
        for i in 0..m {
            let w = 1.0 / d[i].max(1e-300);
            let mut row = scaled.row_mut(i);
            row *= w;
        }
        h += scaled.tr_mul(&scaled);
        h / m as f64
    }
}

/// Solves the symmetric positive-semidefinite system `a x = b`, adding a
/// relative ridge once if the factorization fails or is so ill-conditioned
/// that the plain solve would amplify rounding noise into the solution.
///
/// The system is first equilibrated to unit diagonal so both the rank
/// check and the ridge act on correlation scale; columns with a zero
/// diagonal (identically zero features) are left untouched and receive a
/// zero coefficient.
fn solve_spd_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let mut scale = DVector::from_element(n, 1.0);
    for i in 0..n {
        let d = a[(i, i)];
        if d > 0.0 {
            scale[i] = d.sqrt();
        }
    }
    let mut scaled = a.clone();
    let mut rhs = b.clone();
    for i in 0..n {
        rhs[i] /= scale[i];
        for j in 0..n {
            scaled[(i, j)] /= scale[i] * scale[j];
        }
    }
    if let Some(chol) = Cholesky::new(scaled.clone()) {
        let diag = chol.l_dirty().diagonal();
        let max_pivot = diag.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let min_pivot = diag.iter().fold(f64::INFINITY, |acc, &v| acc.min(v));
        if min_pivot > 1e-6 * max_pivot {
            let mut x = chol.solve(&rhs);
            for i in 0..n {
                x[i] /= scale[i];
            }
            return Ok(x);
        }
    }
    let ridge = RIDGE_REL * scaled.trace().max(1e-300);
    for i in 0..n {
        scaled[(i, i)] += ridge;
    }
    match Cholesky::new(scaled) {
        Some(chol) => {
            let mut x = chol.solve(&rhs);
            for i in 0..n {
                x[i] /= scale[i];
            }
            Ok(x)
        }
        None => Err(Error::DegenerateMarginal),
    }
}

fn build_offdiag_features(
    samples: &DMatrix<f64>,
    spec: &FeatureSpec,
) -> Result<Vec<OffdiagFeature>> {
    let k = samples.nrows();
    let mut feats = Vec::with_capacity(k - 1);
    for j in 0..k - 1 {
        let row: Vec<f64> = samples.row(j).iter().copied().collect();
        let (standardization, degenerate) = Standardization::fit(&row);
        let site = if degenerate || spec.p == 0 {
            FeatureSite::default()
        } else {
            let z: Vec<f64> = row.iter().map(|&x| standardization.apply(x)).collect();
            match fit_sites(&z, spec.p, spec.gamma, false) {
                Ok(site) => site,
                Err(Error::DegenerateMarginal) => FeatureSite::default(),
                Err(e) => return Err(e),
            }
        };
        feats.push(OffdiagFeature { standardization, site });
    }
    Ok(feats)
}

fn row_range(samples: &DMatrix<f64>, row: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in samples.row(row).iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Fits a component whose diagonal feature is affine. The estimation
/// objective then has a closed-form minimizer: regress the (standardized)
/// last input on the remaining features, scale the residual to unit
/// second moment, and read the coefficients off the regression.
pub fn fit_component_closed_form(
    samples: &DMatrix<f64>,
    spec: &FeatureSpec,
) -> Result<TriangularMapComponent> {
    let k = samples.nrows();
    let m = samples.ncols();
    if k == 0 {
        return Err(Error::Config("component needs at least one input".into()));
    }
    if m < 2 {
        return Err(Error::EnsembleTooSmall(m));
    }
    let offdiag = build_offdiag_features(samples, spec)?;
    let last: Vec<f64> = samples.row(k - 1).iter().copied().collect();
    let (diag_std, diag_degenerate) = Standardization::fit(&last);
    if diag_degenerate {
        return Err(Error::DegenerateMarginal);
    }
    let diag = DiagonalFeature {
        standardization: diag_std,
        kind: DiagonalKind::Affine,
        site: FeatureSite::default(),
    };

    // Regression features: intercept plus all off-diagonal features.
    let q_r: usize = 1 + offdiag.iter().map(|f| f.coeff_count()).sum::<usize>();
    let mut phi_r = DMatrix::zeros(m, q_r);
    let mut t = DVector::zeros(m);
    let mut buf = vec![0.0; q_r];
    for i in 0..m {
        phi_r[(i, 0)] = 1.0;
        let mut at = 1;
        for (j, f) in offdiag.iter().enumerate() {
            let c = f.coeff_count();
            f.featurize(samples[(j, i)], &mut buf[at..at + c]);
            at += c;
        }
        for l in 1..q_r {
            phi_r[(i, l)] = buf[l];
        }
        t[i] = diag_std.apply(samples[(k - 1, i)]);
    }

    let gram = phi_r.tr_mul(&phi_r);
    let rhs = phi_r.tr_mul(&t);
    let ls = solve_spd_with_ridge(&gram, &rhs)?;
    let residual = &t - &phi_r * &ls;
    // A floor on the residual keeps the slope finite when the last input
    // is an exact function of the preceding ones (for example a coordinate
    // pinned to an affine manifold that the dynamics preserve). The fit
    // then degenerates gracefully into near-deterministic transport
    // instead of failing: the inverse reproduces the regression surface
    // at the new prefix and the residual term becomes negligible.
    let rss = residual.norm_squared().max(1e-28 * m as f64);
    let c_diag = (m as f64 / rss).sqrt();

    // Coefficient layout: off-diagonal blocks, then [intercept, slope].
    let q = q_r + 1;
    let mut coeffs = DVector::zeros(q);
    for b in 0..q_r - 1 {
        coeffs[b] = -c_diag * ls[b + 1];
    }
    coeffs[q - 2] = -c_diag * ls[0]; // intercept
    coeffs[q - 1] = c_diag; // slope, positive by construction

    Ok(TriangularMapComponent {
        offdiag,
        diag,
        coeffs,
        last_range: row_range(samples, k - 1),
        converged: true,
    })
}

/// Fits a component with the monotone erf-family diagonal by projected
/// Newton under `w_l >= 0`, backtracking on the estimation objective.
/// Falls back to the affine closed form when the last input's marginal
/// cannot support quantile sites.
pub fn fit_component_projected_newton(
    samples: &DMatrix<f64>,
    spec: &FeatureSpec,
) -> Result<TriangularMapComponent> {
    newton_fit(samples, spec, None)
}

fn newton_fit(
    samples: &DMatrix<f64>,
    spec: &FeatureSpec,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<TriangularMapComponent> {
    let k = samples.nrows();
    let m = samples.ncols();
    if k == 0 {
        return Err(Error::Config("component needs at least one input".into()));
    }
    if m < 2 {
        return Err(Error::EnsembleTooSmall(m));
    }
    if spec.p == 0 {
        return fit_component_closed_form(samples, spec);
    }
    let offdiag = build_offdiag_features(samples, spec)?;
    let last: Vec<f64> = samples.row(k - 1).iter().copied().collect();
    let (diag_std, diag_degenerate) = Standardization::fit(&last);
    if diag_degenerate {
        return Err(Error::DegenerateMarginal);
    }
    let z: Vec<f64> = last.iter().map(|&x| diag_std.apply(x)).collect();
    let site = match fit_sites(&z, spec.p, spec.gamma, true) {
        Ok(site) => site,
        Err(Error::DegenerateMarginal) => return fit_component_closed_form(samples, spec),
        Err(e) => return Err(e),
    };
    let diag = DiagonalFeature {
        standardization: diag_std,
        kind: DiagonalKind::MonotonePsi,
        site,
    };
    let n_psi = diag.site.len();
    let diag_offset: usize = offdiag.iter().map(|f| f.coeff_count()).sum();
    let q = diag_offset + 1 + n_psi;

    // Assemble the template component to reuse its featurization.
    let mut component = TriangularMapComponent {
        offdiag,
        diag,
        coeffs: DVector::zeros(q),
        last_range: row_range(samples, k - 1),
        converged: false,
    };
    let problem = component.featurize_samples(samples)?;

    // Constrained coordinates: the psi weights (not the intercept).
    let constrained: Vec<bool> = (0..q).map(|l| l > diag_offset).collect();

    // Feasible start: unit weight on both ramps gives a strictly
    // increasing, asymptotically linear diagonal.
    let mut c = DVector::zeros(q);
    c[diag_offset + 1] = 1.0;
    c[q - 1] = 1.0;

    let (mut j, mut g) = problem.objective_and_gradient(&c);
    if let Some(t) = trace.as_deref_mut() {
        t.push(j);
    }
    let mut best = (j, c.clone());
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        // KKT residual: full gradient on free coordinates, only the
        // descent-feasible part at active bounds.
        let mut kkt: f64 = 0.0;
        for l in 0..q {
            let r = if constrained[l] && c[l] <= 1e-10 {
                g[l].min(0.0)
            } else {
                g[l]
            };
            kkt += r * r;
        }
        if kkt.sqrt() <= KKT_REL * (1.0 + j.abs()) {
            converged = true;
            break;
        }

        let active: Vec<bool> = (0..q)
            .map(|l| constrained[l] && c[l] <= 1e-10 && g[l] > 0.0)
            .collect();
        let free: Vec<usize> = (0..q).filter(|&l| !active[l]).collect();

        let mut direction = DVector::zeros(q);
        if !free.is_empty() {
            let h = problem.hessian(&c);
            let nf = free.len();
            let mut h_ff = DMatrix::zeros(nf, nf);
            let mut g_f = DVector::zeros(nf);
            for (a, &la) in free.iter().enumerate() {
                g_f[a] = g[la];
                for (b, &lb) in free.iter().enumerate() {
                    h_ff[(a, b)] = h[(la, lb)];
                }
            }
            let d_f = solve_spd_with_ridge(&h_ff, &g_f)
                .unwrap_or_else(|_| g_f.clone());
            for (a, &la) in free.iter().enumerate() {
                direction[la] = -d_f[a];
            }
        }
        for l in 0..q {
            if active[l] {
                direction[l] = -g[l];
            }
        }

        // Backtracking Armijo search along the projected arc.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = &c + alpha * &direction;
            for l in 0..q {
                if constrained[l] && cand[l] < 0.0 {
                    cand[l] = 0.0;
                }
            }
            let j_cand = problem.objective(&cand);
            let predicted: f64 = g.dot(&(&cand - &c));
            if j_cand.is_finite() && j_cand <= j + 1e-4 * predicted.min(0.0) && j_cand < j + 1e-16 * (1.0 + j.abs())
            {
                c = cand;
                let (jj, gg) = problem.objective_and_gradient(&c);
                j = jj;
                g = gg;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(j);
        }
        if j < best.0 {
            best = (j, c.clone());
        }
        if !accepted {
            // No progress possible at line-search resolution; treat the
            // iterate as converged to avoid spinning.
            converged = kkt.sqrt() <= 1e-5 * (1.0 + j.abs());
            break;
        }
    }
    if j > best.0 {
        c = best.1;
    }
    component.coeffs = c;
    component.converged = converged;
    Ok(component)
}

/// A full lower-triangular map over `dim` ordered inputs, with the first
/// `skip` components left unfitted (identity placeholders): conditional
/// updates only ever evaluate or invert the tail components.
#[derive(Debug, Clone)]
pub enum TriangularMap {
    General {
        dim: usize,
        skip: usize,
        components: Vec<TriangularMapComponent>,
    },
    Affine(AffineTriangularMap),
}

/// Affine special case `S(x) = L (x - mean)` with `L` the inverse of the
/// Cholesky factor of the (biased) sample covariance; identical to the
/// general fit at `p = 0` but computed with one factorization.
#[derive(Debug, Clone)]
pub struct AffineTriangularMap {
    skip: usize,
    mean: DVector<f64>,
    l: DMatrix<f64>,
}

impl AffineTriangularMap {
    pub fn fit(joint: &DMatrix<f64>, skip: usize) -> Result<Self> {
        let n = joint.nrows();
        let m = joint.ncols();
        if m < 2 {
            return Err(Error::EnsembleTooSmall(m));
        }
        if skip >= n {
            return Err(Error::Config(format!(
                "skip {skip} must be below the joint dimension {n}"
            )));
        }
        let mean = joint.column_mean();
        let mut centered = joint.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        // Standardize rows before factorizing, with the same degeneracy rule
        // as the feature fits: a row whose spread sits at rounding level
        // relative to its mean carries no usable signal, so it is zeroed
        // outright. Otherwise the factorization would treat the rounding
        // noise as an informative coordinate and condition later rows on it,
        // shifting their coefficients by order-one amounts.
        let mut scale = DVector::from_element(n, 1.0);
        for i in 0..n {
            let var =
                centered.row(i).iter().map(|v| v * v).sum::<f64>() / (m - 1) as f64;
            let std = var.sqrt();
            if std <= 1e-12 * (1.0 + mean[i].abs()) {
                centered.row_mut(i).fill(0.0);
            } else {
                scale[i] = std;
                let mut row = centered.row_mut(i);
                row /= std;
            }
        }
        let mut sigma = &centered * centered.transpose() / m as f64;
        let chol = match Cholesky::new(sigma.clone()) {
            Some(c) => c,
            None => {
                let ridge = RIDGE_REL * (sigma.trace() / n as f64).max(1e-300);
                for i in 0..n {
                    sigma[(i, i)] += ridge;
                }
                Cholesky::new(sigma).ok_or(Error::DegenerateMarginal)?
            }
        };
        let mut l = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::DegenerateMarginal)?;
        // Fold the row scales back in so the map acts on raw coordinates.
        for j in 0..n {
            let s = scale[j];
            if s != 1.0 {
                let mut col = l.column_mut(j);
                col /= s;
            }
        }
        Ok(Self { skip, mean, l })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// The lower-triangular matrix of the map.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    fn component_value(&self, row: usize, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for j in 0..=row {
            v += self.l[(row, j)] * (x[j] - self.mean[j]);
        }
        v
    }
}

impl TriangularMap {
    /// Fits the tail components on joint samples (rows are coordinates in
    /// triangle order, columns are samples). Dispatches to the affine
    /// fast path when the feature family is purely linear.
    pub fn fit(joint: &DMatrix<f64>, spec: &FeatureSpec, skip: usize) -> Result<Self> {
        if spec.p == 0 {
            Ok(TriangularMap::Affine(AffineTriangularMap::fit(joint, skip)?))
        } else {
            Self::fit_general(joint, spec, skip)
        }
    }

    /// Component-by-component fit regardless of `p`.
    pub fn fit_general(joint: &DMatrix<f64>, spec: &FeatureSpec, skip: usize) -> Result<Self> {
        let dim = joint.nrows();
        let m = joint.ncols();
        if m < 2 {
            return Err(Error::EnsembleTooSmall(m));
        }
        if skip >= dim {
            return Err(Error::Config(format!(
                "skip {skip} must be below the joint dimension {dim}"
            )));
        }
        let mut components = Vec::with_capacity(dim - skip);
        for k in skip..dim {
            let sub = joint.view((0, 0), (k + 1, m)).into_owned();
            let arity = k + 1;
            let comp = if arity <= 2 && spec.p > 0 {
                fit_component_projected_newton(&sub, spec)?
            } else {
                fit_component_closed_form(&sub, spec)?
            };
            components.push(comp);
        }
        Ok(TriangularMap::General { dim, skip, components })
    }

    pub fn dim(&self) -> usize {
        match self {
            TriangularMap::General { dim, .. } => *dim,
            TriangularMap::Affine(a) => a.l.nrows(),
        }
    }

    pub fn skip(&self) -> usize {
        match self {
            TriangularMap::General { skip, .. } => *skip,
            TriangularMap::Affine(a) => a.skip,
        }
    }

    pub fn components(&self) -> Option<&[TriangularMapComponent]> {
        match self {
            TriangularMap::General { components, .. } => Some(components),
            TriangularMap::Affine(_) => None,
        }
    }

    /// Evaluates the fitted components at a full joint sample, returning
    /// `(S^{skip+1}, ..., S^{dim})`.
    pub fn forward_tail(&self, sample: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = self.dim();
        let skip = self.skip();
        if sample.len() != dim {
            return Err(Error::Dimension {
                context: "triangular map input",
                expected: dim,
                got: sample.len(),
            });
        }
        let x = sample.as_slice();
        let mut out = DVector::zeros(dim - skip);
        match self {
            TriangularMap::General { components, .. } => {
                for (idx, comp) in components.iter().enumerate() {
                    out[idx] = comp.value(&x[..skip + idx + 1]);
                }
            }
            TriangularMap::Affine(a) => {
                for idx in 0..dim - skip {
                    out[idx] = a.component_value(skip + idx, x);
                }
            }
        }
        Ok(out)
    }

    /// Solves `S^{skip+j}(prefix, tail_{1..j}) = targets_j` sequentially
    /// down the triangle, returning the tail coordinates.
    pub fn invert_tail(&self, prefix: &DVector<f64>, targets: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = self.dim();
        let skip = self.skip();
        if prefix.len() != skip {
            return Err(Error::Dimension {
                context: "triangular map prefix",
                expected: skip,
                got: prefix.len(),
            });
        }
        if targets.len() != dim - skip {
            return Err(Error::Dimension {
                context: "triangular map targets",
                expected: dim - skip,
                got: targets.len(),
            });
        }
        let mut full = Vec::with_capacity(dim);
        full.extend_from_slice(prefix.as_slice());
        match self {
            TriangularMap::General { components, .. } => {
                for (idx, comp) in components.iter().enumerate() {
                    let x = comp.invert_last_input(&full[..skip + idx], targets[idx])?;
                    full.push(x);
                }
            }
            TriangularMap::Affine(a) => {
                for idx in 0..dim - skip {
                    let row = skip + idx;
                    let mut partial = 0.0;
                    for j in 0..row {
                        partial += a.l[(row, j)] * (full[j] - a.mean[j]);
                    }
                    let x = a.mean[row] + (targets[idx] - partial) / a.l[(row, row)];
                    full.push(x);
                }
            }
        }
        Ok(DVector::from_vec(full[skip..].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::RngStream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        Distribution::<f64>::sample(&StandardNormal, rng)
    }

    #[test]
    fn quantile_sites_match_hand_computed_values() {
        let samples: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let site = fit_sites(&samples, 2, 2.0, false).unwrap();
        assert!((site.centers[0] - 101.0 / 3.0).abs() < 5e-3, "{:?}", site.centers);
        assert!((site.centers[1] - 202.0 / 3.0).abs() < 5e-3);
        // Width uses the duplicated-endpoint convention.
        let spacing = site.centers[1] - site.centers[0];
        assert!((site.widths[0] - spacing).abs() < 1e-12); // gamma/2 * spacing with gamma=2

        // p = 0 off-diagonal: empty site.
        assert!(fit_sites(&samples, 0, 2.0, false).unwrap().is_empty());

        // Symmetric samples give centers symmetric about the median.
        let sym = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let s = fit_sites(&sym, 2, 2.0, false).unwrap();
        assert!((s.centers[0] + s.centers[1]).abs() < 1e-12);

        // Constant samples cannot carry quantile sites.
        assert!(matches!(
            fit_sites(&[3.0; 10], 2, 2.0, false),
            Err(Error::DegenerateMarginal)
        ));
    }

    #[test]
    fn diagonal_sites_use_the_enriched_count() {
        let samples: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let site = fit_sites(&samples, 2, 2.0, true).unwrap();
        assert_eq!(site.len(), 4);
        // Interior width spans the two neighbors.
        let expect = 2.0 * (site.centers[2] - site.centers[0]) / 2.0;
        assert!((site.widths[1] - expect).abs() < 1e-12);
        for w in &site.widths {
            assert!(*w > 0.0);
        }
    }

    #[test]
    fn offdiagonal_features_match_a_naive_sum() {
        let mut rng = RngStream::new(31, 0).rng();
        let samples: Vec<f64> = (0..200).map(|_| std_normal(&mut rng)).collect();
        let site = fit_sites(&samples, 3, 2.0, false).unwrap();
        let coeffs = [0.7, -0.3, 1.1, 0.4];
        for _ in 0..50 {
            let x = 3.0 * std_normal(&mut rng);
            let direct = {
                let mut v = coeffs[0] * x;
                for l in 0..3 {
                    let t = (x - site.centers[l]) / site.widths[l];
                    v += coeffs[l + 1] * (-0.5 * t * t).exp() / (site.widths[l] * SQRT_2PI);
                }
                v
            };
            assert!((eval_offdiagonal(&site, &coeffs, x) - direct).abs() <= 1e-14);
        }
        // Identity coefficients give the identity.
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(eval_offdiagonal(&site, &id, 0.37), 0.37);
        // Far from the data the slope is the linear coefficient.
        let f1 = eval_offdiagonal(&site, &coeffs, 1e3);
        let f2 = eval_offdiagonal(&site, &coeffs, 1e3 + 1.0);
        assert!((f2 - f1 - coeffs[0]).abs() < 1e-12);
    }

    #[test]
    fn diagonal_psi_family_has_correct_limits_and_derivatives() {
        let mut rng = RngStream::new(32, 0).rng();
        let samples: Vec<f64> = (0..500).map(|_| std_normal(&mut rng)).collect();
        let site = fit_sites(&samples, 2, 2.0, true).unwrap();

        // Intercept only: constant value, zero derivative.
        let c0 = [2.5, 0.0, 0.0, 0.0, 0.0];
        let (v, d) = eval_diagonal_psi(&site, &c0, 0.3);
        assert_eq!(v, 2.5);
        assert_eq!(d, 0.0);

        // Right ramp dominates at +infinity: slope -> last weight.
        let c = [0.1, 0.8, 0.5, 0.3, 1.7];
        let (v1, _) = eval_diagonal_psi(&site, &c, 50.0);
        let (v2, _) = eval_diagonal_psi(&site, &c, 51.0);
        assert!((v2 - v1 - 1.7).abs() < 1e-10);
        // Left ramp dominates at -infinity.
        let (w1, _) = eval_diagonal_psi(&site, &c, -51.0);
        let (w2, _) = eval_diagonal_psi(&site, &c, -50.0);
        assert!((w2 - w1 - 0.8).abs() < 1e-10);

        // Analytic derivative against central differences.
        let h = 1e-5;
        for i in 0..100 {
            let x = -4.0 + 8.0 * (i as f64) / 99.0;
            let (_, d) = eval_diagonal_psi(&site, &c, x);
            let (vp, _) = eval_diagonal_psi(&site, &c, x + h);
            let (vm, _) = eval_diagonal_psi(&site, &c, x - h);
            let fd = (vp - vm) / (2.0 * h);
            assert!(
                (d - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "x = {x}: analytic {d} vs fd {fd}"
            );
        }
    }

    fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, k: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, m, |_, _| std_normal(rng))
    }

    #[test]
    fn objective_of_the_identity_map_is_the_gaussian_energy() {
        let mut rng = RngStream::new(33, 0).rng();
        let samples = gaussian_matrix(&mut rng, 1, 5000);
        let comp = fit_component_closed_form(&samples, &FeatureSpec { p: 0, gamma: 2.0 }).unwrap();
        // Force S(x) = x: intercept mean, slope std (standardized units).
        let mean = samples.row(0).iter().sum::<f64>() / 5000.0;
        let var = samples.row(0).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4999.0;
        let forced = comp
            .with_coefficients(DVector::from_vec(vec![mean, var.sqrt()]))
            .unwrap();
        let (sv, sd) = forced.value_and_derivative(&[0.7]);
        assert!((sv - 0.7).abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);
        let (j, _) = forced.objective(&samples).unwrap();
        let energy = samples.row(0).iter().map(|x| 0.5 * x * x).sum::<f64>() / 5000.0;
        assert!((j - energy).abs() < 1e-12);
        assert!((j - 0.5).abs() < 0.05, "J = {j}");
    }

    #[test]
    fn scaling_samples_scales_the_fitted_slope_and_log_term() {
        let mut rng = RngStream::new(34, 0).rng();
        let base = gaussian_matrix(&mut rng, 1, 20_000);
        let scaled = 2.0 * &base;
        let spec = FeatureSpec { p: 0, gamma: 2.0 };
        let c1 = fit_component_closed_form(&base, &spec).unwrap();
        let c2 = fit_component_closed_form(&scaled, &spec).unwrap();
        let (_, d1) = c1.value_and_derivative(&[0.0]);
        let (_, d2) = c2.value_and_derivative(&[0.0]);
        assert!((d2 / d1 - 0.5).abs() < 1e-12, "slope ratio {}", d2 / d1);
        assert!((d2 - 0.5).abs() < 0.02, "raw slope {d2}");
        let (j1, _) = c1.objective(&base).unwrap();
        let (j2, _) = c2.objective(&scaled).unwrap();
        assert!((j2 - j1 - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(35, 0).rng();
        // Correlated 3-input samples.
        let mut samples = gaussian_matrix(&mut rng, 3, 400);
        for i in 0..400 {
            samples[(2, i)] += 0.6 * samples[(0, i)] - 0.4 * samples[(1, i)];
        }
        let spec = FeatureSpec { p: 2, gamma: 2.0 };
        for comp in [
            fit_component_closed_form(&samples, &spec).unwrap(),
            newton_fit(&samples.view((0, 0), (2, 400)).into_owned(), &spec, None).unwrap(),
        ] {
            let sub = if comp.arity() == 3 {
                samples.clone()
            } else {
                samples.view((0, 0), (2, 400)).into_owned()
            };
            // Random perturbation keeping the diagonal strictly monotone.
            let mut c = comp.coefficients().clone();
            for v in c.iter_mut() {
                *v += 0.05 * std_normal(&mut rng);
            }
            let q = c.len();
            let diag_at = comp.diag_coeff_offset();
            for l in diag_at + 1..q {
                if matches!(comp.diag.kind, DiagonalKind::MonotonePsi) && c[l] < 0.05 {
                    c[l] = 0.05;
                }
            }
            if matches!(comp.diag.kind, DiagonalKind::Affine) && c[q - 1] < 0.1 {
                c[q - 1] = 0.1;
            }
            let probe = comp.with_coefficients(c.clone()).unwrap();
            let (_, grad) = probe.objective(&sub).unwrap();
            let h = 1e-6;
            for l in 0..q {
                let mut cp = c.clone();
                cp[l] += h;
                let mut cm = c.clone();
                cm[l] -= h;
                let (jp, _) = comp.with_coefficients(cp).unwrap().objective(&sub).unwrap();
                let (jm, _) = comp.with_coefficients(cm).unwrap().objective(&sub).unwrap();
                let fd = (jp - jm) / (2.0 * h);
                assert!(
                    (grad[l] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "arity {} coeff {l}: analytic {} vs fd {fd}",
                    comp.arity(),
                    grad[l]
                );
            }
        }
    }

    #[test]
    fn closed_form_fit_handles_the_bivariate_gaussian() {
        let mut rng = RngStream::new(36, 0).rng();
        let m = 5000;
        let rho: f64 = 0.8;
        let mut samples = DMatrix::zeros(2, m);
        for i in 0..m {
            let u = std_normal(&mut rng);
            let v = std_normal(&mut rng);
            samples[(0, i)] = u;
            samples[(1, i)] = rho * u + (1.0 - rho * rho).sqrt() * v;
        }
        let comp =
            fit_component_closed_form(&samples, &FeatureSpec { p: 0, gamma: 2.0 }).unwrap();
        // Pushed-forward samples are approximately standard normal.
        let pushed: Vec<f64> = (0..m)
            .map(|i| comp.value(&[samples[(0, i)], samples[(1, i)]]))
            .collect();
        let mean = pushed.iter().sum::<f64>() / m as f64;
        let var = pushed.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / m as f64;
        assert!(mean.abs() <= 3.0 / (m as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        // The conditional-regression structure shows up as a negative
        // coupling on the first input proportional to rho.
        let slope_ratio = comp.coefficients()[0] / comp.coefficients()[comp.coefficients().len() - 1];
        assert!((slope_ratio + rho).abs() < 0.05, "ratio {slope_ratio}");
    }

    #[test]
    fn independent_inputs_produce_vanishing_couplings() {
        let mut rng = RngStream::new(37, 0).rng();
        let m = 500;
        let samples = gaussian_matrix(&mut rng, 2, m);
        let spec = FeatureSpec { p: 0, gamma: 2.0 };
        let comp = fit_component_closed_form(&samples, &spec).unwrap();
        let coupling = comp.coefficients()[0];
        // Bootstrap the coupling's standard error.
        let mut boots = Vec::new();
        for _ in 0..200 {
            let cols: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            let mut resampled = DMatrix::zeros(2, m);
            for (i, &c) in cols.iter().enumerate() {
                resampled.set_column(i, &samples.column(c));
            }
            if let Ok(b) = fit_component_closed_form(&resampled, &spec) {
                boots.push(b.coefficients()[0]);
            }
        }
        let bm = boots.iter().sum::<f64>() / boots.len() as f64;
        let se = (boots.iter().map(|b| (b - bm).powi(2)).sum::<f64>()
            / (boots.len() - 1) as f64)
            .sqrt();
        assert!(
            coupling.abs() <= 3.0 * se,
            "coupling {coupling} exceeds 3 x bootstrap SE {se}"
        );
    }

    #[test]
    fn duplicate_features_fall_back_to_ridge_without_crashing() {
        let mut rng = RngStream::new(38, 0).rng();
        let m = 300;
        let mut samples = DMatrix::zeros(3, m);
        for i in 0..m {
            let u = std_normal(&mut rng);
            samples[(0, i)] = u;
            samples[(1, i)] = u; // exact duplicate input
            samples[(2, i)] = 0.5 * u + std_normal(&mut rng);
        }
        let comp =
            fit_component_closed_form(&samples, &FeatureSpec { p: 2, gamma: 2.0 }).unwrap();
        let (_, d) = comp.value_and_derivative(&[0.1, 0.1, 0.2]);
        assert!(d > 0.0);
    }

    #[test]
    fn closed_form_beats_random_probe_coefficients() {
        let mut rng = RngStream::new(39, 0).rng();
        let m = 800;
        let mut samples = gaussian_matrix(&mut rng, 3, m);
        for i in 0..m {
            samples[(2, i)] = 0.7 * samples[(0, i)] - 0.2 * samples[(1, i)]
                + 0.9 * samples[(2, i)];
        }
        let spec = FeatureSpec { p: 2, gamma: 2.0 };
        let comp = fit_component_closed_form(&samples, &spec).unwrap();
        let (j_opt, _) = comp.objective(&samples).unwrap();
        let q = comp.coefficients().len();
        for _ in 0..100 {
            let mut c = comp.coefficients().clone();
            for l in 0..q {
                c[l] += 0.3 * std_normal(&mut rng);
            }
            if c[q - 1] <= 0.0 {
                c[q - 1] = 0.05;
            }
            let probe = comp.with_coefficients(c).unwrap();
            let (j_probe, _) = probe.objective(&samples).unwrap();
            assert!(j_opt <= j_probe + 1e-12, "{j_opt} > {j_probe}");
        }
    }

    fn ks_statistic_vs_standard_normal(values: &mut [f64]) -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = values.len() as f64;
        let mut d: f64 = 0.0;
        for (i, v) in values.iter().enumerate() {
            let cdf = 0.5 * (1.0 + libm::erf(v / SQRT_2));
            let hi = (i as f64 + 1.0) / m - cdf;
            let lo = cdf - i as f64 / m;
            d = d.max(hi.max(lo));
        }
        d
    }

    #[test]
    fn newton_fit_pushes_gaussian_samples_to_standard_normal() {
        let mut rng = RngStream::new(40, 0).rng();
        let m = 2000;
        let samples = DMatrix::from_fn(1, m, |_, _| 1.7 * std_normal(&mut rng) - 0.4);
        let comp =
            fit_component_projected_newton(&samples, &FeatureSpec { p: 2, gamma: 2.0 }).unwrap();
        assert!(comp.converged());
        let mut pushed: Vec<f64> = (0..m).map(|i| comp.value(&[samples[(0, i)]])).collect();
        let ks = ks_statistic_vs_standard_normal(&mut pushed);
        let critical_1pct = 1.628 / (m as f64).sqrt();
        assert!(ks < critical_1pct, "KS {ks} >= {critical_1pct}");
    }

    #[test]
    fn newton_fit_handles_a_bimodal_marginal_better_than_affine() {
        let m = 2000;
        let critical_5pct = 1.358 / (m as f64).sqrt();
        // Mixture of modes at +-2; the default family resolves unit-width
        // components, sharper modes need more sigmoids.
        for (mode_width, p) in [(1.0, 2), (0.5, 6)] {
            let mut rng = RngStream::new(41, 0).rng();
            let samples = DMatrix::from_fn(1, m, |_, _| {
                let sign = if rng.random::<bool>() { 2.0 } else { -2.0 };
                sign + mode_width * std_normal(&mut rng)
            });
            let spec = FeatureSpec { p, gamma: 2.0 };
            let comp = fit_component_projected_newton(&samples, &spec).unwrap();
            let mut pushed: Vec<f64> = (0..m).map(|i| comp.value(&[samples[(0, i)]])).collect();
            let ks = ks_statistic_vs_standard_normal(&mut pushed);
            assert!(ks < critical_5pct, "width {mode_width}: KS {ks} >= {critical_5pct}");

            let affine =
                fit_component_closed_form(&samples, &FeatureSpec { p: 0, gamma: 2.0 }).unwrap();
            let mut pushed_affine: Vec<f64> =
                (0..m).map(|i| affine.value(&[samples[(0, i)]])).collect();
            let ks_affine = ks_statistic_vs_standard_normal(&mut pushed_affine);
            assert!(ks < ks_affine, "psi {ks} not better than affine {ks_affine}");
        }
    }

    #[test]
    fn newton_objective_is_monotonically_nonincreasing() {
        let mut rng = RngStream::new(42, 0).rng();
        let samples = DMatrix::from_fn(1, 600, |_, _| {
            let sign = if rng.random::<bool>() { 1.5 } else { -1.5 };
            sign + 0.6 * std_normal(&mut rng)
        });
        let mut trace = Vec::new();
        let _ = newton_fit(&samples, &FeatureSpec { p: 2, gamma: 2.0 }, Some(&mut trace)).unwrap();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {w:?}");
        }
    }

    #[test]
    fn inversion_of_affine_components_is_exact() {
        let mut rng = RngStream::new(43, 0).rng();
        let samples = gaussian_matrix(&mut rng, 1, 200);
        let comp = fit_component_closed_form(&samples, &FeatureSpec { p: 0, gamma: 2.0 }).unwrap();
        for _ in 0..100 {
            let z = 3.0 * std_normal(&mut rng);
            let x = comp.invert_last_input(&[], z).unwrap();
            // Closed-form linear inverse for comparison.
            let (v0, d) = comp.value_and_derivative(&[0.0]);
            let direct = (z - v0) / d;
            assert!((x - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn inversion_round_trips_through_fitted_components() {
        let mut rng = RngStream::new(44, 0).rng();
        let m = 800;
        let mut samples = gaussian_matrix(&mut rng, 2, m);
        for i in 0..m {
            samples[(1, i)] = 0.5 * samples[(0, i)] + 0.8 * samples[(1, i)].tanh();
        }
        let spec = FeatureSpec { p: 2, gamma: 2.0 };
        let comp = fit_component_projected_newton(&samples, &spec).unwrap();
        for t in 0..1000 {
            let z = -6.0 + 12.0 * (t as f64) / 999.0;
            let prefix = [0.3];
            let x = comp.invert_last_input(&prefix, z).unwrap();
            let v = comp.value(&[prefix[0], x]);
            assert!((v - z).abs() <= 1e-10 * (1.0 + z.abs()), "z = {z}: got {v}");
        }
        // Far outside the training range the tails are linear and the
        // bracket expansion still succeeds.
        for z in [-50.0, 50.0] {
            let x = comp.invert_last_input(&[0.0], z).unwrap();
            let v = comp.value(&[0.0, x]);
            assert!((v - z).abs() <= 1e-10 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn fitted_components_are_strictly_monotone() {
        let mut rng = RngStream::new(45, 0).rng();
        let m = 700;
        let mut samples = gaussian_matrix(&mut rng, 3, m);
        for i in 0..m {
            samples[(2, i)] = (samples[(0, i)] + samples[(2, i)]).sin() + samples[(2, i)];
        }
        let spec = FeatureSpec { p: 2, gamma: 2.0 };
        for comp in [
            fit_component_closed_form(&samples, &spec).unwrap(),
            newton_fit(&samples.view((0, 0), (2, m)).into_owned(), &spec, None).unwrap(),
        ] {
            let k = comp.arity();
            for i in 0..m {
                let input: Vec<f64> = (0..k).map(|j| samples[(j, i)]).collect();
                let (_, d) = comp.value_and_derivative(&input);
                assert!(d > 0.0, "nonpositive derivative at sample {i}");
            }
            let (lo, hi) = comp.last_range;
            let mid = 0.5 * (lo + hi);
            let half = 1.5 * (hi - lo);
            for t in 0..1000 {
                let x = mid - half + 2.0 * half * (t as f64) / 999.0;
                let mut input = vec![0.2; k];
                input[k - 1] = x;
                let (_, d) = comp.value_and_derivative(&input);
                assert!(d > 0.0, "nonpositive derivative at probe {x}");
            }
        }
    }

    #[test]
    fn affine_fast_path_matches_the_general_fit_at_p_zero() {
        let mut rng = RngStream::new(46, 0).rng();
        let m = 400;
        let mut joint = gaussian_matrix(&mut rng, 4, m);
        for i in 0..m {
            joint[(2, i)] += 0.5 * joint[(0, i)];
            joint[(3, i)] -= 0.7 * joint[(1, i)];
        }
        let spec = FeatureSpec { p: 0, gamma: 2.0 };
        let fast = TriangularMap::fit(&joint, &spec, 1).unwrap();
        assert!(matches!(fast, TriangularMap::Affine(_)));
        let general = TriangularMap::fit_general(&joint, &spec, 1).unwrap();
        for i in 0..20 {
            let x = joint.column(i).into_owned();
            let a = fast.forward_tail(&x).unwrap();
            let b = general.forward_tail(&x).unwrap();
            assert!(
                (&a - &b).amax() < 1e-8 * (1.0 + a.amax()),
                "column {i}: {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn triangular_map_forward_inverse_round_trip() {
        let mut rng = RngStream::new(47, 0).rng();
        let m = 600;
        let mut joint = gaussian_matrix(&mut rng, 4, m);
        for i in 0..m {
            joint[(1, i)] += 0.6 * joint[(0, i)];
            joint[(2, i)] += 0.3 * (joint[(1, i)]).tanh();
            joint[(3, i)] -= 0.2 * joint[(0, i)] * 0.5;
        }
        for spec in [FeatureSpec { p: 0, gamma: 2.0 }, FeatureSpec { p: 2, gamma: 2.0 }] {
            let map = TriangularMap::fit(&joint, &spec, 1).unwrap();
            for i in 0..50 {
                let x = joint.column(i).into_owned();
                let z = map.forward_tail(&x).unwrap();
                let prefix = DVector::from_vec(vec![x[0]]);
                let back = map.invert_tail(&prefix, &z).unwrap();
                for j in 0..3 {
                    assert!(
                        (back[j] - x[j + 1]).abs() <= 1e-8 * (1.0 + x[j + 1].abs()),
                        "p = {}, column {i}, coord {j}: {} vs {}",
                        spec.p,
                        back[j],
                        x[j + 1]
                    );
                }
            }
        }
    }
}
