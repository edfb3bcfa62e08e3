//! Orthonormal bases splitting state space into invariant and complement
//! directions.
//!
//! A linear functional `a_raw^T x` of the state that the dynamics keep
//! constant is called a linear invariant. Stacking `r` such functionals into
//! the columns of `a_raw` and orthonormalizing yields `u_perp`; its
//! orthogonal complement `u_para` collects the directions a
//! constraint-respecting filter is allowed to update. All downstream
//! machinery (projected Kalman gains, constrained transport maps) works in
//! these coordinates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tolerance for the orthonormality checks of a fully constructed basis.
pub const BASIS_ORTHONORMALITY_TOL: f64 = 1e-12;

/// Relative tolerance deciding numerical rank of the raw constraint matrix.
pub const RANK_TOL_REL: f64 = 1e-10;

/// Fixed seed for the random columns used to complete a basis; keeps
/// repeated constructions of the same basis bitwise identical.
const COMPLEMENT_SEED: u64 = 0x5eed_ba5e_0c0a_57a1;

/// Value of the `r` invariant functionals at a state, `u_perp^T x`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantValue(pub DVector<f64>);

impl InvariantValue {
    /// Wraps a vector of invariant values, rejecting non-finite entries.
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "invariant values must be finite".to_string(),
            ));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

/// Orthonormal split of `R^n` into `r` invariant directions (`u_perp`) and
/// their complement (`u_para`).
///
/// Invariants maintained by every constructor, all to [`BASIS_ORTHONORMALITY_TOL`]:
/// `u_perp^T u_perp = I_r`, `u_para^T u_para = I_{n-r}`,
/// `u_perp^T u_para = 0`, and `u_perp u_perp^T + u_para u_para^T = I_n`.
#[derive(Debug, Clone)]
pub struct SubUnitaryBasis {
    n: usize,
    r: usize,
    u_perp: DMatrix<f64>,
    u_para: DMatrix<f64>,
}

impl SubUnitaryBasis {
    /// Builds a basis from explicitly given factors, validating the
    /// orthonormality invariants.
    pub fn new(u_perp: DMatrix<f64>, u_para: DMatrix<f64>) -> Result<Self> {
        let n = u_perp.nrows();
        let r = u_perp.ncols();
        if u_para.nrows() != n {
            return Err(Error::Dimension {
                context: "SubUnitaryBasis::new u_para rows",
                expected: n,
                got: u_para.nrows(),
            });
        }
        if u_para.ncols() != n - r {
            return Err(Error::Dimension {
                context: "SubUnitaryBasis::new u_para cols",
                expected: n - r,
                got: u_para.ncols(),
            });
        }
        let basis = Self { n, r, u_perp, u_para };
        basis.validate()?;
        Ok(basis)
    }

    /// Builds a basis whose invariant block is `u_perp` (which must already
    /// have orthonormal columns); the complement is completed internally.
    pub fn from_u_perp(u_perp: DMatrix<f64>) -> Result<Self> {
        let n = u_perp.nrows();
        let r = u_perp.ncols();
        if r > n {
            return Err(Error::Dimension {
                context: "SubUnitaryBasis::from_u_perp cols",
                expected: n,
                got: r,
            });
        }
        let u_para = complete_complement(&u_perp)?;
        Self::new(u_perp, u_para)
    }

    /// The trivial basis with no invariants: `u_para` is the identity, so
    /// constrained and unconstrained algorithms coincide exactly.
    pub fn unconstrained(n: usize) -> Self {
        Self {
            n,
            r: 0,
            u_perp: DMatrix::zeros(n, 0),
            u_para: DMatrix::identity(n, n),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn invariant_count(&self) -> usize {
        self.r
    }

    pub fn u_perp(&self) -> &DMatrix<f64> {
        &self.u_perp
    }

    pub fn u_para(&self) -> &DMatrix<f64> {
        &self.u_para
    }

    fn validate(&self) -> Result<()> {
        let gram_perp = self.u_perp.transpose() * &self.u_perp;
        let gram_para = self.u_para.transpose() * &self.u_para;
        let cross = self.u_perp.transpose() * &self.u_para;
        let completeness = &self.u_perp * self.u_perp.transpose()
            + &self.u_para * self.u_para.transpose();
        let max_dev = max_abs_dev(&gram_perp, true)
            .max(max_abs_dev(&gram_para, true))
            .max(max_abs_dev(&cross, false))
            .max(max_abs_dev(&completeness, true));
        if max_dev > BASIS_ORTHONORMALITY_TOL {
            return Err(Error::Config(format!(
                "basis orthonormality violated by {max_dev:e}"
            )));
        }
        Ok(())
    }

    /// Splits a state into invariant coordinates `u_perp^T x` and
    /// complement coordinates `u_para^T x`.
    pub fn decompose_state(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_dim(x.len())?;
        Ok((self.u_perp.tr_mul(x), self.u_para.tr_mul(x)))
    }

    /// Reassembles a state from its invariant and complement coordinates.
    pub fn reconstruct_state(
        &self,
        x_perp: &DVector<f64>,
        x_para: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if x_perp.len() != self.r {
            return Err(Error::Dimension {
                context: "reconstruct_state x_perp",
                expected: self.r,
                got: x_perp.len(),
            });
        }
        if x_para.len() != self.n - self.r {
            return Err(Error::Dimension {
                context: "reconstruct_state x_para",
                expected: self.n - self.r,
                got: x_para.len(),
            });
        }
        Ok(&self.u_perp * x_perp + &self.u_para * x_para)
    }

    /// Evaluates the invariant functionals at a state.
    pub fn evaluate_invariants(&self, x: &DVector<f64>) -> Result<InvariantValue> {
        self.check_dim(x.len())?;
        Ok(InvariantValue(self.u_perp.tr_mul(x)))
    }

    /// Applies the orthogonal projector `I - u_perp u_perp^T` onto the
    /// complement of the invariant directions.
    pub fn project_complement(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(v.len())?;
        if self.r == 0 {
            return Ok(v.clone());
        }
        Ok(v - &self.u_perp * self.u_perp.tr_mul(v))
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.n {
            return Err(Error::Dimension {
                context: "state dimension",
                expected: self.n,
                got,
            });
        }
        Ok(())
    }
}

fn max_abs_dev(m: &DMatrix<f64>, identity: bool) -> f64 {
    let mut max = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let target = if identity && i == j { 1.0 } else { 0.0 };
            max = max.max((m[(i, j)] - target).abs());
        }
    }
    max
}

/// Orthonormalizes a raw constraint matrix.
///
/// Returns the basis whose `u_perp` spans the columns of `a_raw`, together
/// with the lower-triangular factor `R` (nonnegative diagonal) satisfying
/// `a_raw = u_perp * R`. Fails with [`Error::RankDeficiency`] when the
/// numerical rank of `a_raw` falls below its column count at relative
/// tolerance [`RANK_TOL_REL`].
pub fn orthonormalize_constraints(
    a_raw: &DMatrix<f64>,
) -> Result<(SubUnitaryBasis, DMatrix<f64>)> {
    let n = a_raw.nrows();
    let r = a_raw.ncols();
    if r > n {
        return Err(Error::Dimension {
            context: "orthonormalize_constraints cols",
            expected: n,
            got: r,
        });
    }
    if r == 0 {
        return Ok((SubUnitaryBasis::unconstrained(n), DMatrix::zeros(0, 0)));
    }

    // a_raw = Q L with L lower triangular: run a thin QR on the
    // column-reversed matrix and flip the factors back.
    let mut reversed = DMatrix::zeros(n, r);
    for j in 0..r {
        reversed.set_column(j, &a_raw.column(r - 1 - j));
    }
    let qr = reversed.qr();
    let q_rev = qr.q();
    let r_rev = qr.r();

    let mut u_perp = DMatrix::zeros(n, r);
    for j in 0..r {
        u_perp.set_column(j, &q_rev.column(r - 1 - j));
    }
    let mut lower = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            lower[(i, j)] = r_rev[(r - 1 - i, r - 1 - j)];
        }
    }

    // Numerical rank check on the triangular diagonal.
    let norm = a_raw.norm();
    let tol = RANK_TOL_REL * norm;
    let rank = (0..r).filter(|&i| lower[(i, i)].abs() > tol).count();
    if rank < r {
        return Err(Error::RankDeficiency { rank, cols: r });
    }

    // Fix signs so the diagonal of L is nonnegative; negating a column of Q
    // together with the matching row of L leaves the product unchanged.
    for i in 0..r {
        if lower[(i, i)] < 0.0 {
            for k in 0..n {
                u_perp[(k, i)] = -u_perp[(k, i)];
            }
            for j in 0..r {
                lower[(i, j)] = -lower[(i, j)];
            }
        }
    }

    let basis = SubUnitaryBasis::from_u_perp(u_perp)?;
    Ok((basis, lower))
}

/// Completes `u_perp` to a full orthonormal basis and returns the
/// complement block. Random Gaussian fill columns avoid pathological
/// alignment with the existing columns; the internal fixed seed keeps the
/// result deterministic.
fn complete_complement(u_perp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = u_perp.nrows();
    let r = u_perp.ncols();
    if r == n {
        return Ok(DMatrix::zeros(n, 0));
    }
    if r == 0 {
        return Ok(DMatrix::identity(n, n));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(COMPLEMENT_SEED);
    let mut attempt_basis = |seed_perturb: u64| -> DMatrix<f64> {
        if seed_perturb > 0 {
            rng = ChaCha12Rng::seed_from_u64(COMPLEMENT_SEED.wrapping_add(seed_perturb));
        }
        let mut candidate = DMatrix::zeros(n, n);
        candidate.view_mut((0, 0), (n, r)).copy_from(u_perp);
        for j in r..n {
            for i in 0..n {
                candidate[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
        let q = candidate.qr().q();
        q.view((0, r), (n, n - r)).into_owned()
    };

    for attempt in 0..2u64 {
        let u_para = attempt_basis(attempt);
        let cross = u_perp.tr_mul(&u_para);
        let gram = u_para.tr_mul(&u_para);
        let dev = max_abs_dev(&cross, false).max(max_abs_dev(&gram, true));
        if dev <= BASIS_ORTHONORMALITY_TOL {
            return Ok(u_para);
        }
    }
    Err(Error::Config(
        "failed to complete an orthonormal complement".to_string(),
    ))
}
