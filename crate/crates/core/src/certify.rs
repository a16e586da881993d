//! Closed-form objective and positive semidefinite exactness certificates.
//!
//! For a consistent elementary instance with truth `z₀`, the quadratic form
//! `u₂ᵀ Q u₂` built here vanishes exactly at `z₀` and nowhere else on the
//! constraint set.  `Q` is an arrowhead matrix: with `m = u₂(z₀)`,
//!
//! - `Q₁₁ = Σ_{r≥2} m_r²`,
//! - `Q_{1r} = Q_{r1} = −m_r` for `r ≥ 2`,
//! - `Q_{rr} = 1` for `r ≥ 2`, all other entries zero,
//!
//! so that `u₂ᵀ Q u₂ = Σ_{r≥2} ((u₂)_r − m_r)²`: a sum of squared shifted
//! monomials, positive semidefinite of rank `N − 1` with null vector `m`.
//!
//! The certificate expresses that same polynomial as a quadratic form in
//! the stacked vector `h ⊗ u₂`: a matrix `U ⪰ 0` with
//! `u₂ᵀ Q u₂ = (h ⊗ u₂)ᵀ U (h ⊗ u₂)` as an exact polynomial identity.
//! Each shifted monomial is itself a linear form in `h ⊗ u₂`:
//!
//! - a degree-1 shift `z_v − (z₀)_v` unwinds along the observation chain
//!   from `x₁` to `v` ([`chain_avec`]), two constraints at a time;
//! - a degree-2 shift `zᵢzⱼ − (z₀)ᵢ(z₀)ⱼ` splits as
//!   `(zᵢ − (z₀)ᵢ)·zⱼ + (z₀)ᵢ·(zⱼ − (z₀)ⱼ)`, which shifts one chain vector
//!   by a monomial and lifts the other ([`pair_bvec`]).
//!
//! Summing the outer products of those vectors gives `U` directly, with no
//! optimization ([`assemble_u`]).  When the observations are mixed by a
//! full-column-rank matrix `C` (`h̄ = C·h`), the certificate transports
//! along the pseudoinverse: `Ū = (C⁺ ⊗ I)ᵀ U (C⁺ ⊗ I)` ([`lift_mixing`]).

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use ndarray_linalg::Inverse;
use thiserror::Error;

use crate::model::{ChainTree, Instance, ModelError};
use crate::polybasis::{
    kron_quadform_to_poly, BasisError, Exponents, KronIndex, MonomialBasis, Polynomial,
    SparseSymMat,
};
use crate::Real;

/// Errors from certificate construction and verification.
#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("truth value for {var} is {value:.3e}, too close to zero to unwind chains")]
    DegenerateChain { var: String, value: f64 },
    #[error("constraint {constraint} has coefficient {value:.3e}, too close to zero")]
    DegenerateCoefficient { constraint: usize, value: f64 },
    #[error("basis must have degree 2 and match the instance (expected s = {expected}, got {got})")]
    BasisMismatch { expected: usize, got: usize },
    #[error("mixing matrix is {rows}x{cols} but the certificate covers {expected} constraints")]
    MixingShape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("mixing matrix is numerically rank deficient")]
    MixingSingular,
}

/// Pivot floor shared with truth propagation.
const DEGENERACY_TOL: f64 = 1e-12;

/// Arrowhead coefficient matrix of the objective `u₂ᵀ Q u₂`.
///
/// Stores only the corner `Q₁₁` and the first-row arm `Q_{1r}` (`r ≥ 2`);
/// the trailing diagonal is identically 1 and everything else is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrowheadQ<T> {
    /// Corner entry `Q₁₁ = Σ_{r≥2} m_r²`.
    pub corner: T,
    /// Arm entries `Q_{1r} = −m_r`, for basis positions `r = 2..=N`.
    pub arm: Vec<T>,
}

impl<T: Real> ArrowheadQ<T> {
    /// Matrix dimension `N`.
    pub fn dim(&self) -> usize {
        self.arm.len() + 1
    }

    /// The evaluated basis at the truth, recovered as `[1, −arm…]`.
    pub fn null_vector(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(T::one());
        v.extend(self.arm.iter().map(|&a| -a));
        v
    }

    /// Dense `N × N` form.
    pub fn to_dense(&self) -> Array2<T> {
        let n = self.dim();
        let mut q = Array2::from_elem((n, n), T::zero());
        q[(0, 0)] = self.corner;
        for (r, &a) in self.arm.iter().enumerate() {
            q[(0, r + 1)] = a;
            q[(r + 1, 0)] = a;
            q[(r + 1, r + 1)] = T::one();
        }
        q
    }

    /// Expands `u₂ᵀ Q u₂` over the given basis.
    pub fn quadform_poly(&self, basis: &MonomialBasis) -> Result<Polynomial<T>, CertifyError> {
        if basis.len() != self.dim() {
            return Err(CertifyError::BasisMismatch {
                expected: self.dim(),
                got: basis.len(),
            });
        }
        let two = T::from_f64_lossy(2.0);
        let mut p = Polynomial::zero(basis.s());
        p.add_term(Exponents::from_elem(0, basis.s()), self.corner);
        for (r, &a) in self.arm.iter().enumerate() {
            let e = basis.exponents(r + 1);
            p.add_term(e.clone(), two * a);
            let mut sq = e.clone();
            for (t, p2) in sq.iter_mut().enumerate() {
                *p2 += e[t];
            }
            p.add_term(sq, T::one());
        }
        p.canonicalize();
        Ok(p)
    }

    /// Evaluates `uᵀ Q u` for a numeric basis vector.
    pub fn eval_quadform(&self, u: &[T]) -> T {
        debug_assert_eq!(u.len(), self.dim());
        let mut acc = self.corner * u[0] * u[0];
        let two = T::from_f64_lossy(2.0);
        for (r, &a) in self.arm.iter().enumerate() {
            acc += two * a * u[0] * u[r + 1] + u[r + 1] * u[r + 1];
        }
        acc
    }
}

/// Builds the arrowhead objective matrix from the truth vector.
pub fn arrowhead_q<T: Real>(
    z0: &[T],
    basis: &MonomialBasis,
) -> Result<ArrowheadQ<T>, CertifyError> {
    let m = crate::polybasis::eval_basis(basis, z0)?;
    let arm: Vec<T> = m[1..].iter().map(|&v| -v).collect();
    let corner = m[1..].iter().fold(T::zero(), |acc, &v| acc + v * v);
    Ok(ArrowheadQ { corner, arm })
}

/// Verifies `u₂ᵀ Q u₂ = Σ_{r≥2} ((u₂)_r − m_r)²` as polynomials.
///
/// Returns the largest coefficient discrepancy between the two expansions;
/// 0 up to rounding for any correctly built arrowhead matrix.
pub fn shifted_identity_check<T: Real>(
    q: &ArrowheadQ<T>,
    z0: &[T],
    basis: &MonomialBasis,
) -> Result<T, CertifyError> {
    let lhs = crate::polybasis::quadform_to_poly(basis, q.to_dense().view())?;
    let m = crate::polybasis::eval_basis(basis, z0)?;
    let mut rhs = Polynomial::zero(basis.s());
    for r in 1..basis.len() {
        let shifted = basis
            .monomial_poly::<T>(r)
            .sub(&Polynomial::constant(basis.s(), m[r]));
        rhs.add_scaled(&shifted.mul(&shifted), T::one());
    }
    Ok(Polynomial::max_coeff_diff(&lhs, &rhs))
}

/// Sparse linear form over a stacked basis, keyed by `(constraint, position)`
/// 0-based offsets.
type StackedVec<T> = BTreeMap<(usize, usize), T>;

fn check_sigma<T: Real>(inst: &Instance<T>, var: usize, value: T) -> Result<(), CertifyError> {
    let v = value.to_f64().unwrap_or(0.0);
    if v.abs() <= DEGENERACY_TOL {
        return Err(CertifyError::DegenerateChain {
            var: inst.zvar_name(var),
            value: v,
        });
    }
    Ok(())
}

fn check_coeff<T: Real>(constraint: usize, value: T) -> Result<(), CertifyError> {
    let v = value.to_f64().unwrap_or(0.0);
    if v.abs() <= DEGENERACY_TOL {
        return Err(CertifyError::DegenerateCoefficient {
            constraint,
            value: v,
        });
    }
    Ok(())
}

fn chain_avec_map<T: Real>(
    inst: &Instance<T>,
    tree: &ChainTree,
    z0: &[T],
    var: usize,
) -> Result<StackedVec<T>, CertifyError> {
    let path = &tree.paths[var];
    // Virtual step 0 is the root x1: value 1, basis position 0 (constant).
    let mut a_prev2: StackedVec<T> = BTreeMap::new();
    let mut a_prev: StackedVec<T> = BTreeMap::new();
    let mut sigma_prev = T::one();
    let mut pos_prev2 = 0usize;
    let mut k_prev = usize::MAX;
    let mut sigma_prev2 = T::one();
    for (l, step) in path.iter().enumerate() {
        let k = step.constraint;
        let term = inst.constraints[k].terms[0];
        let c = term.c;
        check_coeff(k, c)?;
        let sigma = z0[step.var];
        let a_cur = if l == 0 {
            let mut a = BTreeMap::new();
            a.insert((k, 0usize), T::one() / c);
            a
        } else {
            // z_w − σ_w  =  (1/(D c_l)) h_{k_l} z_{w_{l−2}}
            //             − (1/(D c_{l−1})) h_{k_{l−1}} z_{w_l}
            //             + (σ_l σ_{l−1} / D) (z_{w_{l−2}} − σ_{l−2}),
            // with D = σ_{l−2} σ_{l−1} and the virtual σ_0 = 1.
            check_sigma(inst, path[l - 1].var, sigma_prev)?;
            let d = sigma_prev2 * sigma_prev;
            let c_prev = inst.constraints[k_prev].terms[0].c;
            let mut a: StackedVec<T> = BTreeMap::new();
            *a.entry((k, pos_prev2)).or_insert_with(T::zero) += T::one() / (d * c);
            *a.entry((k_prev, step.var + 1)).or_insert_with(T::zero) -=
                T::one() / (d * c_prev);
            let w = sigma * sigma_prev / d;
            for (&key, &val) in &a_prev2 {
                *a.entry(key).or_insert_with(T::zero) += w * val;
            }
            a
        };
        pos_prev2 = if l == 0 {
            0
        } else {
            // z_{w_{l−1}} sits at basis position (variable index + 1).
            path[l - 1].var + 1
        };
        sigma_prev2 = sigma_prev;
        sigma_prev = sigma;
        k_prev = k;
        a_prev2 = std::mem::replace(&mut a_prev, a_cur);
    }
    Ok(a_prev)
}

fn to_kron_entries<T: Real>(
    v: &StackedVec<T>,
    num_constraints: usize,
    basis_len: usize,
) -> Result<Vec<(KronIndex, T)>, CertifyError> {
    v.iter()
        .map(|(&(k, p), &w)| {
            Ok((KronIndex::new(k + 1, p + 1, num_constraints, basis_len)?, w))
        })
        .collect()
}

/// Linear form expressing `z_v − (z₀)_v` over the stacked basis `h ⊗ u₁`.
///
/// Entries are keyed by [`KronIndex`] over `(K, s+1)`.  Requires the truth
/// values along the chain (and the observation coefficients) to stay away
/// from zero, since the chain unwinding divides by them.
pub fn chain_avec<T: Real>(
    inst: &Instance<T>,
    tree: &ChainTree,
    z0: &[T],
    var: usize,
) -> Result<Vec<(KronIndex, T)>, CertifyError> {
    let a = chain_avec_map(inst, tree, z0, var)?;
    to_kron_entries(&a, inst.num_constraints(), inst.s() + 1)
}

fn shift_by_var<T: Real>(
    a: &StackedVec<T>,
    j: usize,
    basis2: &MonomialBasis,
) -> StackedVec<T> {
    let s = basis2.s();
    let mut out = BTreeMap::new();
    for (&(k, p), &w) in a {
        // Multiply the u1 monomial at position p (constant or a variable)
        // by z_j; the product is degree ≤ 2 so it has a u2 position.
        let mut e = Exponents::from_elem(0, s);
        if p > 0 {
            e[p - 1] += 1;
        }
        e[j] += 1;
        let pos = basis2
            .index_of(&e)
            .expect("degree <= 2 product stays inside the basis");
        *out.entry((k, pos)).or_insert_with(T::zero) += w;
    }
    out
}

fn lift_to_u2<T: Real>(a: &StackedVec<T>) -> StackedVec<T> {
    // u1 positions 0..=s coincide with the first u2 positions.
    a.clone()
}

fn pair_bvec_map<T: Real>(
    i: usize,
    j: usize,
    a_i: &StackedVec<T>,
    a_j: &StackedVec<T>,
    z0: &[T],
    basis2: &MonomialBasis,
) -> StackedVec<T> {
    // z_i z_j − σ_i σ_j = (z_i − σ_i) z_j + σ_i (z_j − σ_j).
    let mut b = shift_by_var(a_i, j, basis2);
    for (&key, &w) in &lift_to_u2(a_j) {
        *b.entry(key).or_insert_with(T::zero) += z0[i] * w;
    }
    b
}

/// Linear form expressing `zᵢzⱼ − (z₀)ᵢ(z₀)ⱼ` over the stacked basis
/// `h ⊗ u₂`, from the chain vectors of the two variables (`i ≤ j`,
/// 0-based).
pub fn pair_bvec<T: Real>(
    i: usize,
    j: usize,
    a_i: &[(KronIndex, T)],
    a_j: &[(KronIndex, T)],
    z0: &[T],
    basis2: &MonomialBasis,
    num_constraints: usize,
) -> Result<Vec<(KronIndex, T)>, CertifyError> {
    let unpack = |v: &[(KronIndex, T)]| -> StackedVec<T> {
        v.iter().map(|&(t, w)| ((t.k0(), t.r0()), w)).collect()
    };
    let b = pair_bvec_map(i, j, &unpack(a_i), &unpack(a_j), z0, basis2);
    to_kron_entries(&b, num_constraints, basis2.len())
}

/// Builds the certificate matrix `U ⪰ 0` from the spanning chains.
///
/// `U` is the sum of outer products of the lifted chain vectors (one per
/// variable) and the pair vectors (one per unordered variable pair,
/// squares included), so `(h ⊗ u₂)ᵀ U (h ⊗ u₂) = Σ_{r≥2} ((u₂)_r − m_r)²
/// = u₂ᵀ Q u₂` exactly.
pub fn assemble_u<T: Real>(
    inst: &Instance<T>,
    tree: &ChainTree,
    z0: &[T],
    basis: &MonomialBasis,
) -> Result<SparseSymMat<T>, CertifyError> {
    if basis.s() != inst.s() || basis.degree() != 2 {
        return Err(CertifyError::BasisMismatch {
            expected: inst.s(),
            got: basis.s(),
        });
    }
    let s = inst.s();
    let n_basis = basis.len();
    let kn = inst.num_constraints() * n_basis;
    let avecs: Vec<StackedVec<T>> = (0..s)
        .map(|v| chain_avec_map(inst, tree, z0, v))
        .collect::<Result<_, _>>()?;
    let mut u = SparseSymMat::zeros(kn);
    let flat = |k: usize, p: usize| k * n_basis + p;
    for a in &avecs {
        let lifted: Vec<(usize, T)> = lift_to_u2(a)
            .iter()
            .map(|(&(k, p), &w)| (flat(k, p), w))
            .collect();
        u.add_outer(&lifted, T::one());
    }
    for i in 0..s {
        for j in i..s {
            let b = pair_bvec_map(i, j, &avecs[i], &avecs[j], z0, basis);
            let entries: Vec<(usize, T)> =
                b.iter().map(|(&(k, p), &w)| (flat(k, p), w)).collect();
            u.add_outer(&entries, T::one());
        }
    }
    u.prune(T::from_f64_lossy(0.0));
    Ok(u)
}

/// A verified exactness certificate for one instance.
///
/// Encodes the polynomial identity
/// `u₂ᵀ Q u₂ − ρ = (h ⊗ u₂)ᵀ U (h ⊗ u₂)` with `U ⪰ 0`; `rho` is 0 for
/// certificates built from chains, and `residual` is the largest
/// coefficient discrepancy measured by [`verify_identity`].
#[derive(Clone, Debug)]
pub struct Certificate<T> {
    pub q: ArrowheadQ<T>,
    pub rho: T,
    pub u: SparseSymMat<T>,
    pub residual: f64,
}

/// Largest coefficient discrepancy in the certificate identity.
///
/// Expands both sides of `u₂ᵀ Q u₂ − ρ = (h ⊗ u₂)ᵀ U (h ⊗ u₂)` over the
/// instance's constraints and returns the worst absolute coefficient
/// difference.
pub fn verify_identity<T: Real>(
    cert: &Certificate<T>,
    inst: &Instance<T>,
    basis: &MonomialBasis,
) -> Result<T, CertifyError> {
    let mut lhs = cert.q.quadform_poly(basis)?;
    lhs.add_term(Exponents::from_elem(0, basis.s()), -cert.rho);
    lhs.canonicalize();
    let rhs = kron_quadform_to_poly(&inst.h_polys(), basis, &cert.u)?;
    Ok(Polynomial::max_coeff_diff(&lhs, &rhs))
}

/// Transports a certificate to a mixed instance.
///
/// If `mixed` was produced by [`crate::model::apply_mixing`] with matrix
/// `C` (so `h̄ = C·h`), then `h = C⁺·h̄` with `C⁺ = (CᵀC)⁻¹Cᵀ`, and
/// `Ū = (C⁺ ⊗ I)ᵀ U (C⁺ ⊗ I)` certifies the same objective over the mixed
/// constraints.  The returned certificate is re-verified against `mixed`
/// and carries the fresh residual.
pub fn lift_mixing<T: Real>(
    cert: &Certificate<T>,
    c: ArrayView2<'_, T>,
    mixed: &Instance<T>,
    basis: &MonomialBasis,
) -> Result<Certificate<T>, CertifyError> {
    let n_basis = basis.len();
    let kk = cert.u.dim() / n_basis;
    if c.ncols() != kk || c.nrows() < c.ncols() || mixed.num_constraints() != c.nrows() {
        return Err(CertifyError::MixingShape {
            rows: c.nrows(),
            cols: c.ncols(),
            expected: kk,
        });
    }
    // Pseudoinverse in f64; certificates of either precision go through the
    // same LAPACK path.
    let cf = c.map(|v| v.to_f64().expect("finite mixing entry"));
    let gram = cf.t().dot(&cf);
    let gram_inv = gram.inv().map_err(|_| CertifyError::MixingSingular)?;
    let pinv = gram_inv.dot(&cf.t());
    let kbar = c.nrows();
    let mut lifted = SparseSymMat::zeros(kbar * n_basis);
    // Every ordered original entry (k,r),(l,t) contributes
    // pinv[k,p]·v·pinv[l,q] to the lifted entry (p,r),(q,t).  Off-diagonal
    // targets are emitted once per orientation, so each emission carries
    // half the weight.
    let emit = |m: &mut SparseSymMat<T>, fi: usize, fj: usize, w: f64| {
        let w = if fi == fj { w } else { w * 0.5 };
        m.add(fi, fj, T::from_f64_lossy(w));
    };
    for (&(a, b), &v) in cert.u.iter_upper() {
        let (k, r) = (a / n_basis, a % n_basis);
        let (l, t) = (b / n_basis, b % n_basis);
        let vf = v.to_f64().expect("finite certificate entry");
        for p in 0..kbar {
            for q in 0..kbar {
                emit(
                    &mut lifted,
                    p * n_basis + r,
                    q * n_basis + t,
                    pinv[(k, p)] * vf * pinv[(l, q)],
                );
                if a != b {
                    // The stored triangle also stands for the transposed
                    // original entry (l,t),(k,r).
                    emit(
                        &mut lifted,
                        p * n_basis + t,
                        q * n_basis + r,
                        pinv[(l, p)] * vf * pinv[(k, q)],
                    );
                }
            }
        }
    }
    let scale = lifted.max_abs().to_f64().unwrap_or(1.0).max(1.0);
    lifted.prune(T::from_f64_lossy(1e-16 * scale));
    let mut out = Certificate {
        q: cert.q.clone(),
        rho: cert.rho,
        u: lifted,
        residual: f64::INFINITY,
    };
    out.residual = verify_identity(&out, mixed, basis)?
        .to_f64()
        .unwrap_or(f64::INFINITY);
    Ok(out)
}

/// Serializes a certificate to JSON.
///
/// `U` is exported as 1-based upper-triangle triplets over the flat stacked
/// index (see [`KronIndex`]); `Q` as its corner (`diag1`) and arm.
pub fn certificate_to_json(cert: &Certificate<f64>) -> String {
    let triplets: Vec<serde_json::Value> = cert
        .u
        .iter_upper()
        .map(|(&(i, j), &v)| serde_json::json!([i + 1, j + 1, v]))
        .collect();
    let value = serde_json::json!({
        "Q": {
            "diag1": cert.q.corner,
            "arm": cert.q.arm,
        },
        "rho": cert.rho,
        "U": { "triplets": triplets },
        "residual": cert.residual,
    });
    serde_json::to_string_pretty(&value).expect("certificate serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        apply_mixing, bipartite_graph, connectivity, propagate_truth, spanning_chains,
        Constraint, Term,
    };
    use crate::polybasis::{build_basis, eval_basis};
    use ndarray::array;
    use ndarray_linalg::Eigh;

    fn fixture_3x3() -> Instance<f64> {
        let term = |i, j, c| Term { i, j, c };
        Instance {
            n: 3,
            m: 3,
            constraints: vec![
                Constraint { terms: vec![term(1, 1, 1.0)], rhs: 7.0 },
                Constraint { terms: vec![term(1, 2, 1.0)], rhs: 3.0 },
                Constraint { terms: vec![term(2, 1, 1.0)], rhs: -35.0 },
                Constraint { terms: vec![term(2, 3, 1.0)], rhs: 10.0 },
                Constraint { terms: vec![term(3, 2, 1.0)], rhs: 9.0 },
            ],
            truth: Some(vec![-5.0, 3.0, 7.0, 3.0, -2.0]),
            label: None,
        }
    }

    /// 2x2 instance whose observations carry non-unit coefficients.
    fn fixture_scaled_2x2() -> Instance<f64> {
        let term = |i, j, c| Term { i, j, c };
        // Truth z = [x2, y1, y2] = [4, -1, 0.5].
        Instance {
            n: 2,
            m: 2,
            constraints: vec![
                Constraint { terms: vec![term(1, 1, 2.0)], rhs: -2.0 },
                Constraint { terms: vec![term(2, 1, -3.0)], rhs: 12.0 },
                Constraint { terms: vec![term(2, 2, 0.5)], rhs: 1.0 },
            ],
            truth: Some(vec![4.0, -1.0, 0.5]),
            label: None,
        }
    }

    fn eigvals(m: &Array2<f64>) -> Vec<f64> {
        let (vals, _) = m.eigh(ndarray_linalg::UPLO::Upper).unwrap();
        vals.to_vec()
    }

    #[test]
    fn arrowhead_matrix_annihilates_the_truth_basis() {
        let inst = fixture_3x3();
        let basis = inst.basis().unwrap();
        let z0 = inst.truth.clone().unwrap();
        let q = arrowhead_q(&z0, &basis).unwrap();
        assert_eq!(q.dim(), 21);
        let m = eval_basis(&basis, &z0).unwrap();
        assert_eq!(q.null_vector(), m);
        let dense = q.to_dense();
        let qm = dense.dot(&ndarray::Array1::from(m.clone()));
        let scale = q.corner.max(1.0);
        for v in qm.iter() {
            assert!(v.abs() <= 1e-10 * scale, "Q m = {v}");
        }
    }

    #[test]
    fn arrowhead_matrix_is_psd_with_one_null_direction() {
        let inst = fixture_3x3();
        let basis = inst.basis().unwrap();
        let z0 = inst.truth.clone().unwrap();
        let q = arrowhead_q(&z0, &basis).unwrap().to_dense();
        let vals = eigvals(&q);
        let top = vals.last().copied().unwrap();
        assert!(vals[0] >= -1e-10 * top, "lambda_min = {}", vals[0]);
        assert!(vals[0].abs() <= 1e-10 * top);
        assert!(vals[1] > 1e-8 * top, "rank must be N-1");
    }

    #[test]
    fn shifted_square_identity_is_exact() {
        let inst = fixture_3x3();
        let basis = inst.basis().unwrap();
        let z0 = inst.truth.clone().unwrap();
        let q = arrowhead_q(&z0, &basis).unwrap();
        let resid = shifted_identity_check(&q, &z0, &basis).unwrap();
        let scale = q.corner.max(1.0);
        assert!(resid <= 1e-12 * scale, "residual {resid}");
    }

    #[test]
    fn objective_is_positive_away_from_truth_on_the_variety() {
        let inst = fixture_scaled_2x2();
        let basis = inst.basis().unwrap();
        let z0 = inst.truth.clone().unwrap();
        let q = arrowhead_q(&z0, &basis).unwrap();
        let at_truth = q.eval_quadform(&eval_basis(&basis, &z0).unwrap());
        assert!(at_truth.abs() <= 1e-10 * q.corner.max(1.0));
        let off = [1.0, 2.0, 3.0];
        let val = q.eval_quadform(&eval_basis(&basis, &off).unwrap());
        assert!(val > 0.0);
    }

    fn avec_poly(
        inst: &Instance<f64>,
        a: &[(KronIndex, f64)],
        u1: &MonomialBasis,
    ) -> Polynomial<f64> {
        let h = inst.h_polys();
        let mut p = Polynomial::zero(inst.s());
        for &(t, w) in a {
            let contrib = h[t.k0()].mul(&u1.monomial_poly(t.r0()));
            p.add_scaled(&contrib, w);
        }
        p
    }

    #[test]
    fn chain_vectors_express_variable_shifts() {
        let inst = fixture_3x3();
        let tree = spanning_chains(&inst).unwrap();
        let z0 = propagate_truth(&inst).unwrap();
        let u1 = build_basis(inst.n, inst.m, 1).unwrap();
        for v in 0..inst.s() {
            let a = chain_avec(&inst, &tree, &z0, v).unwrap();
            let got = avec_poly(&inst, &a, &u1);
            let want = Polynomial::var(inst.s(), v)
                .sub(&Polynomial::constant(inst.s(), z0[v]));
            let err = Polynomial::max_coeff_diff(&got, &want);
            assert!(err <= 1e-12 * (1.0 + z0[v].abs()), "var {v}: err {err}");
        }
    }

    #[test]
    fn chain_vectors_handle_scaled_observations() {
        let inst = fixture_scaled_2x2();
        let tree = spanning_chains(&inst).unwrap();
        let z0 = propagate_truth(&inst).unwrap();
        let u1 = build_basis(inst.n, inst.m, 1).unwrap();
        for v in 0..inst.s() {
            let a = chain_avec(&inst, &tree, &z0, v).unwrap();
            let got = avec_poly(&inst, &a, &u1);
            let want = Polynomial::var(inst.s(), v)
                .sub(&Polynomial::constant(inst.s(), z0[v]));
            assert!(Polynomial::max_coeff_diff(&got, &want) <= 1e-12);
        }
    }

    #[test]
    fn chain_vector_depth_matches_tree_depth() {
        // A chain of depth l touches at most the l constraints on its path,
        // with at most two positions each from the two-term recursion.
        let inst = fixture_3x3();
        let tree = spanning_chains(&inst).unwrap();
        let z0 = propagate_truth(&inst).unwrap();
        let deep = inst.zvar_of_y(3);
        assert_eq!(tree.depth(deep), 3);
        let a = chain_avec(&inst, &tree, &z0, deep).unwrap();
        let used: std::collections::BTreeSet<usize> = a.iter().map(|(t, _)| t.k0()).collect();
        assert!(used.iter().all(|k| [0usize, 2, 3].contains(k)));
    }

    #[test]
    fn chain_vectors_reject_zero_truth_pivots() {
        let term = |i, j, c| Term { i, j, c };
        // y1 = 0 sits on the chain to x2.
        let inst = Instance {
            n: 2,
            m: 2,
            constraints: vec![
                Constraint { terms: vec![term(1, 1, 1.0)], rhs: 0.0 },
                Constraint { terms: vec![term(2, 1, 1.0)], rhs: 0.0 },
                Constraint { terms: vec![term(1, 2, 1.0)], rhs: 2.0 },
            ],
            truth: None,
            label: None,
        };
        let tree = spanning_chains(&inst).unwrap();
        let z0 = vec![3.0, 0.0, 2.0];
        let x2 = inst.zvar_of_x(2);
        assert!(matches!(
            chain_avec(&inst, &tree, &z0, x2),
            Err(CertifyError::DegenerateChain { .. })
        ));
    }

    #[test]
    fn pair_vectors_express_product_shifts() {
        let inst = fixture_3x3();
        let tree = spanning_chains(&inst).unwrap();
        let z0 = propagate_truth(&inst).unwrap();
        let basis = inst.basis().unwrap();
        let h = inst.h_polys();
        for i in 0..inst.s() {
            for j in i..inst.s() {
                let a_i = chain_avec(&inst, &tree, &z0, i).unwrap();
                let a_j = chain_avec(&inst, &tree, &z0, j).unwrap();
                let b = pair_bvec(i, j, &a_i, &a_j, &z0, &basis, inst.num_constraints()).unwrap();
                let mut got = Polynomial::zero(inst.s());
                for &(t, w) in &b {
                    got.add_scaled(&h[t.k0()].mul(&basis.monomial_poly(t.r0())), w);
                }
                let want = Polynomial::var(inst.s(), i)
                    .mul(&Polynomial::var(inst.s(), j))
                    .sub(&Polynomial::constant(inst.s(), z0[i] * z0[j]));
                let err = Polynomial::max_coeff_diff(&got, &want);
                let scale = 1.0 + (z0[i] * z0[j]).abs();
                assert!(err <= 1e-11 * scale, "pair ({i},{j}): err {err}");
            }
        }
    }

    fn build_certificate(inst: &Instance<f64>) -> (Certificate<f64>, MonomialBasis) {
        let tree = spanning_chains(inst).unwrap();
        let z0 = propagate_truth(inst).unwrap();
        let basis = inst.basis().unwrap();
        let q = arrowhead_q(&z0, &basis).unwrap();
        let u = assemble_u(inst, &tree, &z0, &basis).unwrap();
        let mut cert = Certificate { q, rho: 0.0, u, residual: f64::INFINITY };
        cert.residual = verify_identity(&cert, inst, &basis).unwrap();
        (cert, basis)
    }

    #[test]
    fn assembled_certificate_verifies_exactly() {
        let inst = fixture_3x3();
        let (cert, _) = build_certificate(&inst);
        let scale = cert.u.max_abs().max(cert.q.corner).max(1.0);
        assert!(
            cert.residual <= 1e-12 * scale,
            "identity residual {} at scale {scale}",
            cert.residual
        );
        assert_eq!(cert.u.dim(), 5 * 21);
    }

    #[test]
    fn assembled_certificate_verifies_for_scaled_observations() {
        let inst = fixture_scaled_2x2();
        let (cert, _) = build_certificate(&inst);
        let scale = cert.u.max_abs().max(cert.q.corner).max(1.0);
        assert!(cert.residual <= 1e-12 * scale);
    }

    #[test]
    fn certificate_matrix_is_positive_semidefinite() {
        let inst = fixture_scaled_2x2();
        let (cert, _) = build_certificate(&inst);
        let vals = eigvals(&cert.u.to_dense());
        let top = vals.last().copied().unwrap().max(1.0);
        assert!(vals[0] >= -1e-10 * top, "lambda_min = {}", vals[0]);
    }

    #[test]
    fn certificate_rank_is_bounded_by_the_generator_count() {
        // U sums s + s(s+1)/2 rank-1 terms.
        let inst = fixture_3x3();
        let (cert, _) = build_certificate(&inst);
        let s = inst.s();
        let max_rank = s + s * (s + 1) / 2;
        let vals = eigvals(&cert.u.to_dense());
        let top = vals.last().copied().unwrap();
        let rank = vals.iter().filter(|&&v| v > 1e-9 * top).count();
        assert!(rank <= max_rank, "rank {rank} > bound {max_rank}");
    }

    #[test]
    fn corrupting_the_certificate_breaks_verification() {
        let inst = fixture_3x3();
        let (mut cert, basis) = build_certificate(&inst);
        cert.u.add(3, 17, 0.25);
        let resid = verify_identity(&cert, &inst, &basis).unwrap();
        assert!(resid > 1e-6, "corruption must be visible, got {resid}");
    }

    #[test]
    fn lifted_certificate_verifies_on_the_mixed_instance() {
        let inst = fixture_3x3();
        let (cert, basis) = build_certificate(&inst);
        let c = array![
            [0.8, 0.6, 0.0, 0.0, 0.0],
            [-0.6, 0.8, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.5, 0.0],
            [0.0, 0.0, -0.5, 1.0, 0.0],
            [0.3, 0.0, 0.0, 0.0, 1.0],
        ];
        let mixed = apply_mixing(&inst, c.view()).unwrap();
        assert!(connectivity(&bipartite_graph(&mixed)).connected);
        let lifted = lift_mixing(&cert, c.view(), &mixed, &basis).unwrap();
        let scale = lifted.u.max_abs().max(lifted.q.corner).max(1.0);
        assert!(
            lifted.residual <= 1e-8 * scale,
            "lifted residual {} at scale {scale}",
            lifted.residual
        );
        let vals = eigvals(&lifted.u.to_dense());
        let top = vals.last().copied().unwrap().max(1.0);
        assert!(vals[0] >= -1e-8 * top);
    }

    #[test]
    fn lift_rejects_shape_mismatch_and_rank_deficiency() {
        let inst = fixture_3x3();
        let (cert, basis) = build_certificate(&inst);
        let wrong = Array2::<f64>::eye(4);
        let mixed = inst.clone();
        assert!(matches!(
            lift_mixing(&cert, wrong.view(), &mixed, &basis),
            Err(CertifyError::MixingShape { .. })
        ));
        let mut sing = Array2::<f64>::eye(5);
        sing[(4, 4)] = 0.0;
        // The inverse of CᵀC fails for an exactly singular matrix.
        assert!(lift_mixing(&cert, sing.view(), &inst, &basis).is_err());
    }

    #[test]
    fn certificate_json_uses_one_based_triplets() {
        let inst = fixture_scaled_2x2();
        let (cert, _) = build_certificate(&inst);
        let text = certificate_to_json(&cert);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["Q"]["diag1"].is_number());
        assert_eq!(v["Q"]["arm"].as_array().unwrap().len(), cert.q.dim() - 1);
        assert_eq!(v["rho"].as_f64().unwrap(), 0.0);
        let trips = v["U"]["triplets"].as_array().unwrap();
        assert_eq!(trips.len(), cert.u.nnz());
        let kn = cert.u.dim() as u64;
        for t in trips {
            let (i, j) = (t[0].as_u64().unwrap(), t[1].as_u64().unwrap());
            assert!(i >= 1 && i <= j && j <= kn);
            assert!(t[2].is_number());
        }
        assert!(v["residual"].as_f64().unwrap() <= 1e-10);
    }
}
