//! Stochastic map filter analysis steps.
//!
//! Each scalar observation is assimilated by fitting a lower-triangular
//! transport map on the joint samples `(y^i, x^i)`, pushing every member
//! through the fitted block, and inverting it with the realized
//! observation in place of the simulated one. The constrained variant
//! rotates states into invariant and complement blocks, orders the
//! triangle `(y, x_perp, x_para)`, and only ever solves for the
//! complement block while carrying each member's own invariant
//! coordinates on both sides of the inversion — so the invariants are
//! preserved exactly no matter how well the map is estimated. The
//! reduced variant drops the invariant block entirely when it is
//! constant across members. Vector observations with independent noise
//! components are assimilated one scalar at a time, regenerating the
//! simulated observations from the current ensemble before each
//! sub-update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::enkf::Ensemble;
use crate::error::{Error, Result};
use crate::invariant_subspace::{InvariantValue, SubUnitaryBasis};
use crate::models::ObservationOperator;
use crate::transport::{FeatureSpec, TriangularMap};

/// Tolerance on the shared-invariant precondition of the reduced update.
pub const REDUCED_INVARIANT_TOL: f64 = 1e-8;

/// Configuration of a stochastic map filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmfConfig {
    pub features: FeatureSpec,
    /// Multiplicative anomaly inflation applied to forecast states.
    pub inflation: f64,
    /// Use the invariant-preserving constrained update.
    pub constrained: bool,
    /// Drop the invariant block entirely (requires members to share the
    /// invariant value).
    pub reduced: bool,
}

impl Default for SmfConfig {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            inflation: 1.0,
            constrained: false,
            reduced: false,
        }
    }
}

/// Which analysis update a vector assimilation applies per scalar
/// observation component.
#[derive(Debug, Clone, Copy)]
pub enum SmfVariant<'a> {
    Unconstrained,
    Constrained(&'a SubUnitaryBasis),
    Reduced(&'a SubUnitaryBasis, &'a InvariantValue),
}

fn paired_scalar_obs(ensemble: &Ensemble) -> Result<DVector<f64>> {
    let obs = ensemble
        .obs()
        .ok_or_else(|| Error::Config("analysis requires paired simulated observations".into()))?;
    if obs.nrows() != 1 {
        return Err(Error::Dimension {
            context: "scalar analysis observation rows",
            expected: 1,
            got: obs.nrows(),
        });
    }
    Ok(obs.row(0).transpose())
}

/// Replaces the ensemble states, failing without partial writes if any
/// member became non-finite.
fn commit_states(ensemble: &mut Ensemble, new_states: DMatrix<f64>) -> Result<()> {
    if new_states.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged);
    }
    ensemble.states_mut().copy_from(&new_states);
    Ok(())
}

/// Assimilates one scalar observation by map inversion over the full
/// state vector. The ensemble must carry one row of paired simulated
/// observations `y^i`.
pub fn smf_analysis_unconstrained(
    ensemble: &mut Ensemble,
    y_star: f64,
    spec: &FeatureSpec,
) -> Result<()> {
    let y = paired_scalar_obs(ensemble)?;
    let n = ensemble.state_dim();
    let m = ensemble.size();
    let mut joint = DMatrix::zeros(n + 1, m);
    joint.row_mut(0).copy_from(&y.transpose());
    joint.view_mut((1, 0), (n, m)).copy_from(ensemble.states());
    let map = TriangularMap::fit(&joint, spec, 1)?;

    let prefix = DVector::from_vec(vec![y_star]);
    let mut new_states = DMatrix::zeros(n, m);
    for i in 0..m {
        let col = joint.column(i).into_owned();
        let z = map.forward_tail(&col)?;
        let xa = map.invert_tail(&prefix, &z)?;
        new_states.column_mut(i).copy_from(&xa);
    }
    commit_states(ensemble, new_states)
}

/// Invariant-preserving scalar analysis: fits the map on rotated joint
/// samples and delegates to [`smf_analysis_constrained_with_map`].
pub fn smf_analysis_constrained(
    ensemble: &mut Ensemble,
    y_star: f64,
    spec: &FeatureSpec,
    basis: &SubUnitaryBasis,
) -> Result<()> {
    let joint = rotated_joint(ensemble, basis)?;
    let skip = 1 + basis.invariant_count();
    let map = TriangularMap::fit(&joint, spec, skip)?;
    constrained_update(ensemble, y_star, &map, basis, &joint)
}

/// The constrained update with a caller-supplied map fitted on joint
/// samples ordered `(y, x_perp, x_para)` with `skip = 1 + r`. Each
/// member's invariant coordinates enter both the forward evaluation and
/// the inversion prefix unchanged, so `u_perp^T x` is untouched by
/// construction regardless of the map's quality.
pub fn smf_analysis_constrained_with_map(
    ensemble: &mut Ensemble,
    y_star: f64,
    map: &TriangularMap,
    basis: &SubUnitaryBasis,
) -> Result<()> {
    let joint = rotated_joint(ensemble, basis)?;
    if map.dim() != joint.nrows() || map.skip() != 1 + basis.invariant_count() {
        return Err(Error::Dimension {
            context: "constrained map shape",
            expected: joint.nrows(),
            got: map.dim(),
        });
    }
    constrained_update(ensemble, y_star, map, basis, &joint)
}

fn rotated_joint(ensemble: &Ensemble, basis: &SubUnitaryBasis) -> Result<DMatrix<f64>> {
    let n = ensemble.state_dim();
    if basis.state_dim() != n {
        return Err(Error::Dimension {
            context: "basis state dimension",
            expected: n,
            got: basis.state_dim(),
        });
    }
    let y = paired_scalar_obs(ensemble)?;
    let m = ensemble.size();
    let r = basis.invariant_count();
    let x_perp = basis.u_perp().tr_mul(ensemble.states());
    let x_para = basis.u_para().tr_mul(ensemble.states());
    let mut joint = DMatrix::zeros(n + 1, m);
    joint.row_mut(0).copy_from(&y.transpose());
    joint.view_mut((1, 0), (r, m)).copy_from(&x_perp);
    joint.view_mut((1 + r, 0), (n - r, m)).copy_from(&x_para);
    Ok(joint)
}

fn constrained_update(
    ensemble: &mut Ensemble,
    y_star: f64,
    map: &TriangularMap,
    basis: &SubUnitaryBasis,
    joint: &DMatrix<f64>,
) -> Result<()> {
    let n = ensemble.state_dim();
    let m = ensemble.size();
    let r = basis.invariant_count();
    let mut new_states = DMatrix::zeros(n, m);
    let mut prefix = DVector::zeros(1 + r);
    prefix[0] = y_star;
    for i in 0..m {
        let col = joint.column(i).into_owned();
        let z = map.forward_tail(&col)?;
        for k in 0..r {
            prefix[1 + k] = col[1 + k];
        }
        let x_para = map.invert_tail(&prefix, &z)?;
        let x_perp = col.rows(1, r).into_owned();
        let xa = basis.reconstruct_state(&x_perp, &x_para)?;
        new_states.column_mut(i).copy_from(&xa);
    }
    commit_states(ensemble, new_states)
}

/// Constant-invariant shortcut: all members must share the invariant
/// value `c`, the invariant block is dropped from the triangle, and
/// outputs are lifted with the fixed `u_perp c`.
pub fn smf_analysis_reduced(
    ensemble: &mut Ensemble,
    y_star: f64,
    spec: &FeatureSpec,
    basis: &SubUnitaryBasis,
    c: &InvariantValue,
) -> Result<()> {
    let n = ensemble.state_dim();
    let m = ensemble.size();
    let r = basis.invariant_count();
    if c.0.len() != r {
        return Err(Error::Dimension {
            context: "invariant value length",
            expected: r,
            got: c.0.len(),
        });
    }
    let x_perp = basis.u_perp().tr_mul(ensemble.states());
    let mut max_dev: f64 = 0.0;
    for i in 0..m {
        for k in 0..r {
            max_dev = max_dev.max((x_perp[(k, i)] - c.0[k]).abs());
        }
    }
    if max_dev > REDUCED_INVARIANT_TOL {
        return Err(Error::ConstantInvariantViolated {
            max_dev,
            tol: REDUCED_INVARIANT_TOL,
        });
    }

    let y = paired_scalar_obs(ensemble)?;
    let x_para = basis.u_para().tr_mul(ensemble.states());
    let mut joint = DMatrix::zeros(n - r + 1, m);
    joint.row_mut(0).copy_from(&y.transpose());
    joint.view_mut((1, 0), (n - r, m)).copy_from(&x_para);
    let map = TriangularMap::fit(&joint, spec, 1)?;

    let lifted_invariant = basis.u_perp() * &c.0;
    let prefix = DVector::from_vec(vec![y_star]);
    let mut new_states = DMatrix::zeros(n, m);
    for i in 0..m {
        let col = joint.column(i).into_owned();
        let z = map.forward_tail(&col)?;
        let x_para_a = map.invert_tail(&prefix, &z)?;
        let xa = &lifted_invariant + basis.u_para() * &x_para_a;
        new_states.column_mut(i).copy_from(&xa);
    }
    commit_states(ensemble, new_states)
}

/// Assimilates a vector observation with independent noise components by
/// looping over its scalar components; before each sub-update the
/// simulated observations `y^i_j = G_j x^i + eps^i_j` are regenerated
/// from the current ensemble (one noise draw per member, in member
/// order).
pub fn assimilate_vector_observation<R: Rng + ?Sized>(
    ensemble: &mut Ensemble,
    y_star: &DVector<f64>,
    variant: &SmfVariant<'_>,
    obs: &ObservationOperator,
    spec: &FeatureSpec,
    rng: &mut R,
) -> Result<()> {
    let d = obs.obs_dim();
    if y_star.len() != d {
        return Err(Error::Dimension {
            context: "realized observation length",
            expected: d,
            got: y_star.len(),
        });
    }
    if obs.state_dim() != ensemble.state_dim() {
        return Err(Error::Dimension {
            context: "observation operator state dimension",
            expected: ensemble.state_dim(),
            got: obs.state_dim(),
        });
    }
    let m = ensemble.size();
    for j in 0..d {
        let row = obs.row(j);
        let mut sim = DMatrix::zeros(1, m);
        for i in 0..m {
            let y_i = row.observe(&ensemble.member(i), rng)?;
            sim[(0, i)] = y_i[0];
        }
        ensemble.set_obs(Some(sim))?;
        match variant {
            SmfVariant::Unconstrained => smf_analysis_unconstrained(ensemble, y_star[j], spec)?,
            SmfVariant::Constrained(basis) => {
                smf_analysis_constrained(ensemble, y_star[j], spec, basis)?
            }
            SmfVariant::Reduced(basis, c) => {
                smf_analysis_reduced(ensemble, y_star[j], spec, basis, c)?
            }
        }
    }
    ensemble.set_obs(None)?;
    Ok(())
}
