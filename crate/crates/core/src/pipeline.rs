//! Two-stage solve pipeline: certificate search, bound certification, and
//! null-space recovery.
//!
//! Stage 1 produces a pair `(Q, U)` with `U ⪰ 0` and `Q` in the arrowhead
//! pattern (free corner `Q₁₁` and arm `Q₁ᵣ`, unit diagonal, zeros elsewhere)
//! tied together by the polynomial identity
//!
//! ```text
//!   u₂ᵀ Q u₂ = (h ⊗ u₂)ᵀ U (h ⊗ u₂)   =: fsum
//! ```
//!
//! either by solving a feasibility SDP with a trace objective
//! ([`stage1_assemble`], or its compressed reduction used by default) or by
//! the closed-form chain construction ([`stage1_direct`]).  Stage 2 then
//! certifies the sharpest lower bound `ρ` with
//!
//! ```text
//!   fsum − ρ + Σ_k h_k² λ_k = u₂ᵀ W u₂,   W ⪰ 0,  λ_k bounded by μ,
//! ```
//!
//! ([`stage2_assemble`]), and the minimizer is read off the (near) null
//! space of the Gram matrix `W` ([`extract_gram`], [`recover`]): the
//! eigenvector of the smallest eigenvalue, rescaled so its leading entry is
//! 1, lists the recovered completion variables `z*` in positions `2..s+1`.
//! At exactness `ρ* = 0` and `W` has exactly one vanishing eigenvalue with
//! eigenvector `u₂(z₀)`.
//!
//! [`baseline_identity`] runs the plain trace-style relaxation that
//! certifies `min ‖u₂(z)‖²` with unstructured multipliers instead of the
//! two-stage split; it shares the extraction path and serves as the
//! reference method.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::{Eigh, SolveH, SVD, UPLO};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{
    arrowhead_q, assemble_u, verify_identity, ArrowheadQ, Certificate, CertifyError,
};
use crate::model::{
    bipartite_graph, connectivity, propagate_truth, spanning_chains, Constraint, Instance,
    ModelError, Term,
};
use crate::polybasis::{
    exponent_degree, kron_quadform_to_poly, quadform_to_poly, BasisError, Exponents,
    MonomialBasis, Polynomial, SparseSymMat,
};
use crate::sdpcore::{
    BlockSol, BlockSpec, SdpError, SdpOptions, SdpProblem, SdpSolution, SdpStatus,
};

/// Largest tolerated identity residual for an SDP-built Stage-1 pair.
const IDENTITY_TOL_SDP: f64 = 1e-6;
/// Largest tolerated identity residual for the chain-built pair.
const IDENTITY_TOL_DIRECT: f64 = 1e-8;
/// Relative singular-value cutoff for the high-degree coefficient span.
const KERNEL_TOL: f64 = 1e-10;
/// Relative mismatch allowed between `u₂*` entries and the monomials of `z*`.
const CONSISTENCY_REL: f64 = 1e-5;
/// Smallest leading-entry magnitude (relative) that still normalizes.
const ANCHOR_REL: f64 = 1e-6;
/// Eigenvalues of the extracted Gram matrix may undershoot zero by this much.
const GRAM_PSD_TOL: f64 = 1e-8;
/// Entries this small (relative) are dropped when sparsifying dense blocks.
const SPARSIFY_REL: f64 = 1e-14;

// ---- Errors -----------------------------------------------------------------

/// Failures across the two-stage pipeline, tagged by the failing step.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("instance: {0}")]
    Model(#[from] ModelError),
    #[error("certificate: {0}")]
    Certify(#[from] CertifyError),
    #[error("basis: {0}")]
    Basis(#[from] BasisError),
    #[error("basis shape: expected {expected} variables of degree {degree}, got {got}")]
    BasisShape {
        expected: usize,
        got: usize,
        degree: usize,
    },
    #[error("stage-1 SDP: {0}")]
    Stage1Sdp(#[source] SdpError),
    #[error("stage-1 solve ended with status {status:?}")]
    Stage1NotOptimal { status: SdpStatus },
    #[error("stage-2 SDP: {0}")]
    Stage2Sdp(#[source] SdpError),
    #[error("stage-2 solve ended with status {status:?}")]
    Stage2NotOptimal { status: SdpStatus },
    #[error("high-degree coefficients reach {residual:.3e}, above the cutoff {tol:.3e}")]
    FsumInconsistent { residual: f64, tol: f64 },
    #[error("certificate identity residual {residual:.3e} exceeds {tol:.3e}")]
    IdentityMismatch { residual: f64, tol: f64 },
    #[error("fsum has degree {degree}; the bound certification handles degree <= 4")]
    FsumDegree { degree: usize },
    #[error("every candidate certificate leaks degree-5..8 terms; no degree-4 support")]
    NoCertificateSupport,
    #[error("Gram block is indefinite: min eigenvalue {min:.3e} against max {max:.3e}")]
    GramIndefinite { min: f64, max: f64 },
    #[error("length mismatch: got {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("reference point has zero norm")]
    ZeroNorm,
    #[error("dense linear algebra failed: {0}")]
    Linalg(String),
}

fn linalg_err<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Linalg(e.to_string())
}

// ---- Options and reports ----------------------------------------------------

/// How Stage 1 obtains the certificate pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Method {
    /// Solve the trace-minimizing feasibility SDP.
    Sdp,
    /// Build the closed-form certificate along spanning chains.
    Direct,
}

/// Formulation used when Stage 1 runs as an SDP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Form {
    /// Eliminate the high-degree coefficient span first and solve over the
    /// remaining subspace; equivalent feasible set, far fewer rows.
    Compressed,
    /// Explicit blocks for `Q` and `U` with one equality row per monomial of
    /// degree <= 8 plus the arrowhead pattern rows.
    Full,
}

/// End-to-end solve options.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Stage-1 path.
    pub stage1: Stage1Method,
    /// SDP formulation when `stage1` is [`Stage1Method::Sdp`].
    pub stage1_form: Stage1Form,
    /// Multiplier bound in Stage 2.
    pub mu: f64,
    /// Interior-point settings shared by both stages.
    pub sdp: SdpOptions,
    /// Relative cutoff for degree-5..8 leakage in `fsum`.
    pub tol_fsum: f64,
    /// Eigenvalues below `null_tol · λmax` count as zero in the Gram matrix.
    pub null_tol: f64,
    /// The second-smallest eigenvalue must clear `rank_tol · λmax`.
    pub rank_tol: f64,
    /// Run a Gauss-Newton refinement of `z*` on the observation residuals.
    pub polish: bool,
    /// Drop Kronecker entries whose constraint-monomial product exceeds
    /// degree 4 from the certificate support.
    pub restrict_support: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            stage1: Stage1Method::Sdp,
            stage1_form: Stage1Form::Compressed,
            mu: 1e6,
            sdp: SdpOptions::default(),
            tol_fsum: 1e-6,
            null_tol: 1e-6,
            rank_tol: 1e-6,
            polish: false,
            restrict_support: false,
        }
    }
}

/// Certificate pair produced by Stage 1.
#[derive(Clone, Debug)]
pub struct Stage1Result {
    /// Arrowhead matrix matching `fsum` on degrees <= 2.
    pub q: ArrowheadQ<f64>,
    /// PSD certificate over the stacked constraint-basis index.
    pub u: SparseSymMat<f64>,
    /// Degree-<=4 expansion of `(h ⊗ u₂)ᵀ U (h ⊗ u₂)`.
    pub fsum: Polynomial<f64>,
    /// Which path produced the pair.
    pub source: Stage1Method,
    /// Largest coefficient gap between `fsum` and `u₂ᵀQu₂`.
    pub identity_residual: f64,
}

/// Wall-clock seconds spent in each stage.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Timings {
    pub stage1_s: f64,
    pub stage2_s: f64,
}

/// Recovery outcome classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryStatus {
    /// One vanishing eigenvalue, consistent lifted entries.
    Recovered,
    /// Several near-null directions or inconsistent degree-2 entries; `z*`
    /// is reported but not certified unique.
    RankAmbiguous,
    /// No usable null direction (or normalization impossible).
    Failed,
}

/// Recovery report for one instance.
#[derive(Clone, Debug)]
pub struct Recovery {
    /// Instance label, empty when the instance carries none.
    pub label: String,
    pub status: RecoveryStatus,
    /// Recovered completion variables; `None` when recovery failed.
    pub z_star: Option<Vec<f64>>,
    /// Certified bound from Stage 2 (0 at exactness).
    pub rho_star: Option<f64>,
    /// Raw Stage-2 objective value.
    pub objective_stage2: Option<f64>,
    /// Eigenvalues of the Gram matrix, ascending.
    pub gram_spectrum: Vec<f64>,
    /// Count of eigenvalues above `null_tol · λmax`.
    pub rank_estimate: usize,
    /// Relative error against the recorded truth, when both exist.
    pub error: Option<f64>,
    /// Gauss-Newton refinement of `z_star`, when requested.
    pub z_polished: Option<Vec<f64>>,
    /// Relative error of the polished point.
    pub error_polished: Option<f64>,
    pub timings: Option<Timings>,
}

impl Recovery {
    fn empty(status: RecoveryStatus, spectrum: Vec<f64>, rank_estimate: usize) -> Self {
        Self {
            label: String::new(),
            status,
            z_star: None,
            rho_star: None,
            objective_stage2: None,
            gram_spectrum: spectrum,
            rank_estimate,
            error: None,
            z_polished: None,
            error_polished: None,
            timings: None,
        }
    }

    /// Serializes the report; the spectrum is truncated to its three
    /// smallest eigenvalues.
    pub fn report_json(&self) -> String {
        let head: Vec<f64> = self.gram_spectrum.iter().take(3).copied().collect();
        let mut v = serde_json::json!({
            "label": self.label,
            "status": self.status,
            "z_star": self.z_star,
            "rho_star": self.rho_star,
            "objective_stage2": self.objective_stage2,
            "gram_spectrum_head": head,
            "rank_estimate": self.rank_estimate,
            "error": self.error,
            "timings": self.timings,
        });
        if let Some(zp) = &self.z_polished {
            v["z_polished"] = serde_json::json!(zp);
            v["error_polished"] = serde_json::json!(self.error_polished);
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

// ---- Shared helpers ----------------------------------------------------------

/// All exponent vectors over `s` variables with the exact total `degree`.
fn monomials_of_degree(s: usize, degree: usize) -> Vec<Exponents> {
    fn rec(e: &mut Exponents, var: usize, rem: usize, out: &mut Vec<Exponents>) {
        if var + 1 == e.len() {
            e[var] = rem as u8;
            out.push(e.clone());
            e[var] = 0;
            return;
        }
        for v in (0..=rem).rev() {
            e[var] = v as u8;
            rec(e, var + 1, rem - v, out);
        }
        e[var] = 0;
    }
    let mut out = Vec::new();
    let mut e = Exponents::from_elem(0, s);
    rec(&mut e, 0, degree, &mut out);
    out
}

/// All exponent vectors with total degree <= `degree`, graded.
fn monomials_up_to(s: usize, degree: usize) -> Vec<Exponents> {
    (0..=degree).flat_map(|d| monomials_of_degree(s, d)).collect()
}

fn check_basis(inst: &Instance<f64>, basis: &MonomialBasis) -> Result<(), PipelineError> {
    if basis.s() != inst.s() || basis.degree() != 2 {
        return Err(PipelineError::BasisShape {
            expected: inst.s(),
            got: basis.s(),
            degree: basis.degree(),
        });
    }
    Ok(())
}

fn check_connected(inst: &Instance<f64>) -> Result<(), PipelineError> {
    let conn = connectivity(&bipartite_graph(inst));
    if !conn.connected {
        let root = conn.component_of[0];
        let covered = conn.component_of.iter().filter(|&&c| c == root).count();
        return Err(ModelError::Disconnected {
            covered,
            total: conn.component_of.len(),
        }
        .into());
    }
    Ok(())
}

/// Kept Kronecker entries as `(flat index, entry polynomial h_k · mono_r)`.
///
/// The flat index ranges over `k·N + r`; with `restrict_support` entries
/// whose product degree exceeds 4 are dropped (for degree-<=2 constraints
/// every product has degree <= 4, so nothing is dropped).
fn kron_entry_polys(
    inst: &Instance<f64>,
    basis: &MonomialBasis,
    restrict_support: bool,
) -> Vec<(usize, Polynomial<f64>)> {
    let h = inst.h_polys();
    let n_basis = basis.len();
    let mut out = Vec::with_capacity(h.len() * n_basis);
    for (k, hk) in h.iter().enumerate() {
        for r in 0..n_basis {
            if restrict_support && hk.degree() + exponent_degree(basis.exponents(r)) > 4 {
                continue;
            }
            out.push((k * n_basis + r, hk.mul(&basis.monomial_poly(r))));
        }
    }
    out
}

/// Groups basis-pair products by their monomial: `β → [(r, t)] with r <= t`.
fn basis_product_pairs(basis: &MonomialBasis) -> BTreeMap<Exponents, Vec<(usize, usize)>> {
    let n = basis.len();
    let mut map: BTreeMap<Exponents, Vec<(usize, usize)>> = BTreeMap::new();
    for r in 0..n {
        for t in r..n {
            let mut e = basis.exponents(r).clone();
            for (a, b) in e.iter_mut().zip(basis.exponents(t).iter()) {
                *a += b;
            }
            map.entry(e).or_default().push((r, t));
        }
    }
    map
}

fn eval_monomial(e: &Exponents, z: &[f64]) -> f64 {
    e.iter()
        .zip(z.iter())
        .map(|(&p, &zv)| zv.powi(p as i32))
        .product()
}

// ---- Stage 1 -----------------------------------------------------------------

/// Builds the explicit Stage-1 feasibility SDP with a trace objective.
///
/// Decision blocks: `Q ⪰ 0` of size `N` (block 0) and `U ⪰ 0` over the
/// kept Kronecker support (block 1).  One equality row per monomial of
/// degree <= 8 matches the coefficients of `u₂ᵀQu₂ − (h⊗u₂)ᵀU(h⊗u₂) = 0`;
/// additional rows pin `Q` to the arrowhead pattern (unit diagonal past the
/// corner, zero off the arm) while `Q₁₁` and the arm stay free.  The
/// objective minimizes `trace(U)` to pick a bounded certificate.
pub fn stage1_assemble(
    inst: &Instance<f64>,
    basis: &MonomialBasis,
    opts: &SolveOptions,
) -> Result<SdpProblem, PipelineError> {
    inst.validate()?;
    check_basis(inst, basis)?;
    check_connected(inst)?;
    let s = inst.s();
    let n_basis = basis.len();
    let kept = kron_entry_polys(inst, basis, opts.restrict_support);

    let mut prob = SdpProblem::new();
    let bq = prob.add_block(BlockSpec::Psd(n_basis));
    let bu = prob.add_block(BlockSpec::Psd(kept.len()));

    // Coefficient-matching rows, one per monomial of degree <= 8.  Entry
    // weights follow the symmetric inner product, so a unit weight at (r, t)
    // contributes (2 − δ_rt)·X[r,t], exactly the coefficient multiplicity.
    let mut row_of: BTreeMap<Exponents, usize> = BTreeMap::new();
    for e in monomials_up_to(s, 8) {
        let row = prob.add_constraint(0.0);
        row_of.insert(e, row);
    }
    for (e, pairs) in basis_product_pairs(basis) {
        let row = row_of[&e];
        for (r, t) in pairs {
            prob.con_entry(row, bq, r, t, 1.0).map_err(PipelineError::Stage1Sdp)?;
        }
    }
    for (fi, (_, ef)) in kept.iter().enumerate() {
        for (gi, (_, eg)) in kept.iter().enumerate().skip(fi) {
            let prod = ef.mul(eg);
            for (e, &v) in prod.iter() {
                prob.con_entry(row_of[e], bu, fi, gi, -v)
                    .map_err(PipelineError::Stage1Sdp)?;
            }
        }
    }
    // Arrowhead pattern: unit diagonal past the corner, zeros off the arm.
    for t in 1..n_basis {
        let row = prob.add_constraint(1.0);
        prob.con_entry(row, bq, t, t, 1.0).map_err(PipelineError::Stage1Sdp)?;
    }
    for r in 1..n_basis {
        for t in (r + 1)..n_basis {
            let row = prob.add_constraint(0.0);
            prob.con_entry(row, bq, r, t, 1.0).map_err(PipelineError::Stage1Sdp)?;
        }
    }
    for f in 0..kept.len() {
        prob.obj_entry(bu, f, f, 1.0).map_err(PipelineError::Stage1Sdp)?;
    }
    Ok(prob)
}

/// Builds the Stage-1 certificate in closed form along spanning chains.
///
/// Propagates the unique point `z₀` determined by the observations, forms
/// the arrowhead `Q` at `z₀` and the chain certificate `U`, and verifies
/// the polynomial identity before packaging.
pub fn stage1_direct(inst: &Instance<f64>) -> Result<Stage1Result, PipelineError> {
    let basis = inst.basis()?;
    let tree = spanning_chains(inst)?;
    let z0 = propagate_truth(inst)?;
    let q = arrowhead_q(&z0, &basis)?;
    let u = assemble_u(inst, &tree, &z0, &basis)?;
    let cert = Certificate {
        q: q.clone(),
        rho: 0.0,
        u,
        residual: 0.0,
    };
    let residual = verify_identity(&cert, inst, &basis)?;
    let fsum = q.quadform_poly(&basis)?;
    let tol = IDENTITY_TOL_DIRECT * fsum.max_abs_coeff().max(1.0);
    if residual > tol {
        return Err(PipelineError::IdentityMismatch { residual, tol });
    }
    Ok(Stage1Result {
        q,
        u: cert.u,
        fsum,
        source: Stage1Method::Direct,
        identity_residual: residual,
    })
}

/// Expands `(h ⊗ u₂)ᵀ U (h ⊗ u₂)` and truncates it to degree 4.
///
/// Every degree-5..8 coefficient must stay below `tol_fsum` times the
/// largest degree-<=4 coefficient; larger leakage means `U` does not encode
/// a degree-4 objective and the pipeline stops rather than rounding it away.
pub fn fsum_from(
    u: &SparseSymMat<f64>,
    inst: &Instance<f64>,
    basis: &MonomialBasis,
    tol_fsum: f64,
) -> Result<Polynomial<f64>, PipelineError> {
    check_basis(inst, basis)?;
    let full = kron_quadform_to_poly(&inst.h_polys(), basis, u)?;
    let mut scale = 0.0f64;
    let mut leak = 0.0f64;
    for (e, &v) in full.iter() {
        if exponent_degree(e) <= 4 {
            scale = scale.max(v.abs());
        } else {
            leak = leak.max(v.abs());
        }
    }
    if leak > tol_fsum * scale {
        return Err(PipelineError::FsumInconsistent {
            residual: leak,
            tol: tol_fsum * scale,
        });
    }
    let mut fsum = Polynomial::zero(basis.s());
    for (e, &v) in full.iter() {
        if exponent_degree(e) <= 4 {
            fsum.add_term(e.clone(), v);
        }
    }
    fsum.canonicalize();
    Ok(fsum)
}

/// Reads the arrowhead matrix off the degree-<=2 coefficients of `fsum`.
///
/// `u₂ᵀQu₂ = Q₁₁ + 2Σ_r Q₁ᵣ·mono_r + Σ_{r≥2} mono_r²`, so the corner is the
/// constant coefficient and each arm entry halves its monomial coefficient,
/// with the unit diagonal's contribution removed from squares.
fn arrowhead_readoff(fsum: &Polynomial<f64>, basis: &MonomialBasis) -> ArrowheadQ<f64> {
    let corner = fsum.coeff(basis.exponents(0));
    let mut arm = Vec::with_capacity(basis.len() - 1);
    for t in 1..basis.len() {
        let e = basis.exponents(t);
        let raw = fsum.coeff(e);
        let is_square = exponent_degree(e) == 2 && e.iter().any(|&p| p == 2);
        arm.push(if is_square { (raw - 1.0) / 2.0 } else { raw / 2.0 });
    }
    ArrowheadQ { corner, arm }
}

/// Runs Stage 1 as an SDP and packages the certificate pair.
///
/// The compressed form parameterizes `U = P Û Pᵀ` where the columns of `P`
/// span the orthogonal complement of the degree-3/4 coefficient vectors of
/// the Kronecker entry polynomials: any such `U` expands with all degree-5..8
/// coefficients identically zero, and conversely every PSD matrix with a
/// degree-<=4 expansion lies in that subspace.  The remaining equalities pin
/// the degree-3/4 coefficients to the arrowhead target (0, except 1 on
/// squared degree-2 monomials), the degree-<=2 coefficients stay free and
/// define `Q` afterwards, and `trace(Û) = trace(U)`.
pub fn stage1_sdp(
    inst: &Instance<f64>,
    opts: &SolveOptions,
) -> Result<Stage1Result, PipelineError> {
    inst.validate()?;
    let basis = inst.basis()?;
    check_connected(inst)?;
    // Certificate noise lands on the degree-3/4 coefficients of fsum and is
    // later amplified by the Gram extraction, so chase a much tighter solve
    // than requested and fall back to the caller's tolerances if the solver
    // cannot reach it.
    let mut profiles = vec![opts.clone()];
    if opts.sdp.gap_tol > 1e-10 || opts.sdp.feas_tol > 1e-10 {
        let mut tight = opts.clone();
        tight.sdp.gap_tol = tight.sdp.gap_tol.min(1e-10);
        tight.sdp.feas_tol = tight.sdp.feas_tol.min(1e-10);
        profiles.insert(0, tight);
    }
    let mut u = None;
    let mut failure = None;
    for prof in &profiles {
        let attempt = match prof.stage1_form {
            Stage1Form::Full => {
                let prob = stage1_assemble(inst, &basis, prof)?;
                let sol = prob.solve(&prof.sdp).map_err(PipelineError::Stage1Sdp)?;
                if sol.status != SdpStatus::Optimal {
                    Err(PipelineError::Stage1NotOptimal { status: sol.status })
                } else {
                    let kept = kron_entry_polys(inst, &basis, prof.restrict_support);
                    Ok(embed_certificate(
                        sol.x[1].as_mat().view(),
                        &kept,
                        inst,
                        &basis,
                    ))
                }
            }
            Stage1Form::Compressed => stage1_compressed(inst, &basis, prof),
        };
        match attempt {
            Ok(got) => {
                u = Some(got);
                break;
            }
            Err(e) => failure = Some(e),
        }
    }
    let u = match u {
        Some(u) => u,
        None => return Err(failure.expect("at least one profile attempted")),
    };
    let fsum = fsum_from(&u, inst, &basis, opts.tol_fsum)?;
    let q = arrowhead_readoff(&fsum, &basis);
    let residual = Polynomial::max_coeff_diff(&q.quadform_poly(&basis)?, &fsum);
    let tol = IDENTITY_TOL_SDP * fsum.max_abs_coeff().max(1.0);
    if residual > tol {
        return Err(PipelineError::IdentityMismatch { residual, tol });
    }
    Ok(Stage1Result {
        q,
        u,
        fsum,
        source: Stage1Method::Sdp,
        identity_residual: residual,
    })
}

/// Scatters a solved certificate over kept entries back to the full
/// `KN × KN` index space.
fn embed_certificate(
    solved: ArrayView2<'_, f64>,
    kept: &[(usize, Polynomial<f64>)],
    inst: &Instance<f64>,
    basis: &MonomialBasis,
) -> SparseSymMat<f64> {
    let kn = inst.num_constraints() * basis.len();
    let drop = SPARSIFY_REL
        * solved
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut out = SparseSymMat::zeros(kn);
    for i in 0..kept.len() {
        for j in i..kept.len() {
            let v = 0.5 * (solved[(i, j)] + solved[(j, i)]);
            if v.abs() > drop {
                let (a, b) = (kept[i].0, kept[j].0);
                out.add(a.min(b), a.max(b), v);
            }
        }
    }
    out
}

fn stage1_compressed(
    inst: &Instance<f64>,
    basis: &MonomialBasis,
    opts: &SolveOptions,
) -> Result<SparseSymMat<f64>, PipelineError> {
    let s = inst.s();
    let kept = kron_entry_polys(inst, basis, opts.restrict_support);
    let dim = kept.len();
    let betas: Vec<Exponents> = monomials_of_degree(s, 3)
        .into_iter()
        .chain(monomials_of_degree(s, 4))
        .collect();
    let col_of: BTreeMap<&Exponents, usize> =
        betas.iter().enumerate().map(|(i, e)| (e, i)).collect();

    // Columns of `a` hold the degree-3/4 coefficient vectors t_β.
    let mut a = Array2::<f64>::zeros((dim, betas.len()));
    for (fi, (_, ef)) in kept.iter().enumerate() {
        for (e, &v) in ef.iter() {
            if let Some(&ci) = col_of.get(e) {
                a[(fi, ci)] = v;
            }
        }
    }
    let (uu, sv, _) = a.svd(true, false).map_err(linalg_err)?;
    let uu = uu.expect("left singular vectors requested");
    let smax = sv.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let rank = sv.iter().filter(|&&v| v > KERNEL_TOL * smax).count();
    let p = uu.slice(ndarray::s![.., rank..]).to_owned();
    let pcols = p.ncols();
    if pcols == 0 {
        return Err(PipelineError::NoCertificateSupport);
    }

    // Compressed coefficient matrices PᵀG_βP, G_β[f,g] = coeff_β(e_f·e_g).
    let mut scattered: BTreeMap<Exponents, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (fi, (_, ef)) in kept.iter().enumerate() {
        for (gi, (_, eg)) in kept.iter().enumerate().skip(fi) {
            let prod = ef.mul(eg);
            for (e, &v) in prod.iter() {
                let d = exponent_degree(e);
                if d == 3 || d == 4 {
                    scattered.entry(e.clone()).or_default().push((fi, gi, v));
                }
            }
        }
    }

    let mut prob = SdpProblem::new();
    let bu = prob.add_block(BlockSpec::Psd(pcols));
    for beta in &betas {
        let even = beta.iter().all(|&p| p % 2 == 0);
        let rhs = if exponent_degree(beta) == 4 && even { 1.0 } else { 0.0 };
        let row = prob.add_constraint(rhs);
        let Some(coo) = scattered.get(beta) else { continue };
        let mut m1 = Array2::<f64>::zeros((dim, pcols));
        for &(f, g, v) in coo {
            m1.row_mut(f).scaled_add(v, &p.row(g));
            if f != g {
                m1.row_mut(g).scaled_add(v, &p.row(f));
            }
        }
        let ghat = p.t().dot(&m1);
        let gmax = ghat.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        for i in 0..pcols {
            for j in i..pcols {
                let v = 0.5 * (ghat[(i, j)] + ghat[(j, i)]);
                if v.abs() > SPARSIFY_REL * gmax {
                    prob.con_entry(row, bu, i, j, v).map_err(PipelineError::Stage1Sdp)?;
                }
            }
        }
    }
    for i in 0..pcols {
        prob.obj_entry(bu, i, i, 1.0).map_err(PipelineError::Stage1Sdp)?;
    }
    let sol = prob.solve(&opts.sdp).map_err(PipelineError::Stage1Sdp)?;
    if sol.status != SdpStatus::Optimal {
        return Err(PipelineError::Stage1NotOptimal { status: sol.status });
    }
    let uhat = sol.x[0].as_mat();
    let u_dense = p.dot(uhat).dot(&p.t());
    Ok(embed_certificate(u_dense.view(), &kept, inst, basis))
}

// ---- Stage 2 -----------------------------------------------------------------

/// Builds the bound-certification SDP for a degree-<=4 objective `fsum`.
///
/// Maximizes `ρ` subject to `fsum − ρ + Σ_k h_k²·λ_k = u₂ᵀWu₂` with
/// `W ⪰ 0`.  Degree-1 constraints carry polynomial multipliers
/// `λ_k = u₁ᵀΔ_ku₁` with `0 ⪯ Δ_k ⪯ μI` (the cap enters through a PSD slack
/// `T_k = μI − Δ_k`); degree-2 constraints carry scalars `λ_k ∈ [0, μ]`
/// (nonnegative pairs `λ_k + σ_k = μ`).  One equality row per monomial of
/// degree <= 4 matches coefficients; the objective minimizes `−ρ`.
pub fn stage2_assemble(
    fsum: &Polynomial<f64>,
    inst: &Instance<f64>,
    basis: &MonomialBasis,
    mu: f64,
) -> Result<SdpProblem, PipelineError> {
    check_basis(inst, basis)?;
    if fsum.degree() > 4 {
        return Err(PipelineError::FsumDegree {
            degree: fsum.degree(),
        });
    }
    let s = inst.s();
    let h = inst.h_polys();
    let deg1: Vec<usize> = (0..h.len()).filter(|&k| h[k].degree() <= 1).collect();
    let deg2: Vec<usize> = (0..h.len()).filter(|&k| h[k].degree() == 2).collect();

    let mut prob = SdpProblem::new();
    let bw = prob.add_block(BlockSpec::Psd(basis.len()));
    let brho = prob.add_block(BlockSpec::Free(1));
    let bdelta: Vec<(usize, usize)> = deg1
        .iter()
        .map(|_| {
            (
                prob.add_block(BlockSpec::Psd(s + 1)),
                prob.add_block(BlockSpec::Psd(s + 1)),
            )
        })
        .collect();
    let bscalar = if deg2.is_empty() {
        None
    } else {
        Some(prob.add_block(BlockSpec::Nonneg(2 * deg2.len())))
    };

    let err = PipelineError::Stage2Sdp;
    let mut row_of: BTreeMap<Exponents, usize> = BTreeMap::new();
    for e in monomials_up_to(s, 4) {
        let row = prob.add_constraint(fsum.coeff(&e));
        row_of.insert(e, row);
    }
    // Gram side: unit weight per basis pair multiplying to β.
    for (e, pairs) in basis_product_pairs(basis) {
        let row = row_of[&e];
        for (r, t) in pairs {
            prob.con_entry(row, bw, r, t, 1.0).map_err(err)?;
        }
    }
    // ρ enters only the constant coefficient.
    prob.con_entry(row_of[&Exponents::from_elem(0, s)], brho, 0, 0, 1.0)
        .map_err(err)?;
    // Polynomial multipliers: coefficients of h_k²·u1_i·u1_j land on Δ_k.
    let u1_poly = |i: usize| -> Polynomial<f64> {
        if i == 0 {
            Polynomial::constant(s, 1.0)
        } else {
            Polynomial::var(s, i - 1)
        }
    };
    for (a, &k) in deg1.iter().enumerate() {
        let hk2 = h[k].mul(&h[k]);
        let (bd, _) = bdelta[a];
        for i in 0..=s {
            for j in i..=s {
                let prod = hk2.mul(&u1_poly(i)).mul(&u1_poly(j));
                for (e, &v) in prod.iter() {
                    prob.con_entry(row_of[e], bd, i, j, -v).map_err(err)?;
                }
            }
        }
    }
    // Scalar multipliers: coefficients of h_k² weigh λ_k directly.
    for (a, &k) in deg2.iter().enumerate() {
        let bs = bscalar.expect("scalar block exists");
        let hk2 = h[k].mul(&h[k]);
        for (e, &v) in hk2.iter() {
            prob.con_entry(row_of[e], bs, 2 * a, 2 * a, -v).map_err(err)?;
        }
    }
    // Multiplier caps: Δ_k + T_k = μI and λ_k + σ_k = μ.
    for &(bd, bt) in &bdelta {
        for i in 0..=s {
            for j in i..=s {
                let rhs = if i == j { mu } else { 0.0 };
                let row = prob.add_constraint(rhs);
                prob.con_entry(row, bd, i, j, 1.0).map_err(err)?;
                prob.con_entry(row, bt, i, j, 1.0).map_err(err)?;
            }
        }
    }
    if let Some(bs) = bscalar {
        for a in 0..deg2.len() {
            let row = prob.add_constraint(mu);
            prob.con_entry(row, bs, 2 * a, 2 * a, 1.0).map_err(err)?;
            prob.con_entry(row, bs, 2 * a + 1, 2 * a + 1, 1.0).map_err(err)?;
        }
    }
    prob.obj_entry(brho, 0, 0, -1.0).map_err(err)?;
    Ok(prob)
}

/// Variable rescaling for the Stage-2 solve: the coefficient rows pin the
/// multipliers `Δ_k`, `λ_k` at the objective's own scale, so only the cap
/// slacks `T_k = μI − Δ_k` and `σ_k = μ − λ_k` sit at the μ scale at an
/// optimum.  Bringing those blocks to unit size keeps the μ = 1e6 default
/// from stretching the Newton systems across twelve orders of magnitude.
fn stage2_scales(inst: &Instance<f64>, basis: &MonomialBasis, mu: f64) -> Vec<Vec<f64>> {
    let s = inst.s();
    let h = inst.h_polys();
    let root = mu.sqrt();
    let mut scales = vec![vec![1.0; basis.len()], vec![1.0]];
    for hk in &h {
        if hk.degree() <= 1 {
            scales.push(vec![1.0; s + 1]);
            scales.push(vec![root; s + 1]);
        }
    }
    let n2 = h.iter().filter(|hk| hk.degree() == 2).count();
    if n2 > 0 {
        let mut d = Vec::with_capacity(2 * n2);
        for _ in 0..n2 {
            d.push(1.0);
            d.push(root);
        }
        scales.push(d);
    }
    scales
}

/// Rescales the data so products and right-hand sides sit near unit size.
///
/// Divides every variable by `d_v` and every constraint by its peak
/// magnitude; a solution of the rescaled instance converts back as
/// `z = d ∘ z̃`.  The `d_v` solve a ridge least-squares problem in log₂
/// space where each term `c·x_i·y_j = rhs` asks its variable logs to sum to
/// `log₂|rhs/c|`; on elementary connected data the system is a tree walk
/// and the fit is exact, turning all right-hand sides into `±1`.  Balanced
/// data keeps the Stage-2 objective bulk at the scale of the decision
/// quantities, which is worth several digits of recovery accuracy.
fn balance_instance(inst: &Instance<f64>) -> (Instance<f64>, Vec<f64>) {
    let s = inst.s();
    let rhs_floor = 1e-9
        * (1.0
            + inst
                .constraints
                .iter()
                .fold(0.0f64, |acc, c| acc.max(c.rhs.abs())));
    let mut ata = Array2::<f64>::eye(s) * 1e-6;
    let mut atb = Array1::<f64>::zeros(s);
    for c in &inst.constraints {
        let target = c.rhs.abs().max(rhs_floor);
        for t in &c.terms {
            if t.c == 0.0 {
                continue;
            }
            let tau = (target / t.c.abs()).log2();
            let mut cols = [None, Some(inst.zvar_of_y(t.j))];
            if t.i > 1 {
                cols[0] = Some(inst.zvar_of_x(t.i));
            }
            for &a in cols.iter().flatten() {
                atb[a] += tau;
                for &b in cols.iter().flatten() {
                    ata[(a, b)] += 1.0;
                }
            }
        }
    }
    let logs = ata
        .solveh(&atb)
        .unwrap_or_else(|_| Array1::zeros(s));
    let d: Vec<f64> = logs.iter().map(|l| l.exp2()).collect();
    let dx = |i: usize| if i == 1 { 1.0 } else { d[inst.zvar_of_x(i)] };
    let constraints = inst
        .constraints
        .iter()
        .map(|c| {
            let mut terms: Vec<Term<f64>> = c
                .terms
                .iter()
                .map(|t| Term {
                    i: t.i,
                    j: t.j,
                    c: t.c * dx(t.i) * d[inst.zvar_of_y(t.j)],
                })
                .collect();
            let w = terms
                .iter()
                .fold(c.rhs.abs(), |acc, t| acc.max(t.c.abs()))
                .max(rhs_floor);
            for t in &mut terms {
                t.c /= w;
            }
            Constraint {
                terms,
                rhs: c.rhs / w,
            }
        })
        .collect();
    let truth = inst
        .truth
        .as_ref()
        .map(|z| z.iter().zip(&d).map(|(zv, dv)| zv / dv).collect());
    let scaled = Instance {
        n: inst.n,
        m: inst.m,
        constraints,
        truth,
        label: inst.label.clone(),
    };
    (scaled, d)
}

/// Cap schedule for the Stage-2 solve, ending at the requested `μ`.
///
/// The caps are a compactness device: a certificate optimal with slack caps
/// stays optimal under every larger cap, and a binding cap only lowers the
/// certified bound, never invalidates it.  Small caps keep all cone blocks
/// near unit scale, which is where the solver is most accurate, so the
/// pipeline starts small and escalates only while the certified bound stays
/// visibly below zero.
fn stage2_caps(mu: f64) -> Vec<f64> {
    if let Ok(v) = std::env::var("STAGE2_CAP") {
        return vec![v.parse().expect("STAGE2_CAP")];
    }
    let mut caps: Vec<f64> = [5.0, 30.0, 100.0]
        .iter()
        .copied()
        .filter(|&c| c < mu)
        .collect();
    caps.push(mu);
    caps
}

/// Extracts the Gram matrix `Γ` (the `W` block) from a Stage-2 solution.
///
/// Requires optimal status, symmetrizes the block, and rejects spectra that
/// dip below `−1e−8·λmax`.
pub fn extract_gram(sol: &SdpSolution) -> Result<Array2<f64>, PipelineError> {
    if sol.status != SdpStatus::Optimal {
        return Err(PipelineError::Stage2NotOptimal { status: sol.status });
    }
    let w = sol.x[0].as_mat();
    let gram = 0.5 * (&w.view() + &w.t());
    let (vals, _) = gram.eigh(UPLO::Lower).map_err(linalg_err)?;
    let lmax = vals.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let lmin = vals.iter().fold(f64::INFINITY, |acc, &v| acc.min(v));
    if lmin < -GRAM_PSD_TOL * lmax.max(1.0) {
        return Err(PipelineError::GramIndefinite {
            min: lmin,
            max: lmax,
        });
    }
    Ok(gram)
}

/// Reads the minimizer off the near-null space of the Gram matrix.
///
/// The eigenvector `u₂*` of the smallest eigenvalue is normalized by its
/// leading entry; positions `2..s+1` give `z*` and the remaining entries
/// must reproduce the degree-2 monomials of `z*` within `1e−5` relative.
/// One vanishing eigenvalue with a consistent eigenvector classifies as
/// recovered; extra near-null directions or inconsistent entries classify
/// as rank-ambiguous; a missing null direction or a vanishing leading entry
/// classifies as failed.
pub fn recover(
    gram: ArrayView2<'_, f64>,
    basis: &MonomialBasis,
    opts: &SolveOptions,
) -> Result<Recovery, PipelineError> {
    let n_basis = basis.len();
    if gram.nrows() != n_basis || gram.ncols() != n_basis {
        return Err(PipelineError::LengthMismatch {
            got: gram.nrows(),
            expected: n_basis,
        });
    }
    let s = basis.s();
    let (vals, vecs) = gram.eigh(UPLO::Lower).map_err(linalg_err)?;
    let spectrum = vals.to_vec();
    let lmax = *spectrum.last().expect("non-empty spectrum");
    if lmax <= 0.0 {
        return Ok(Recovery::empty(RecoveryStatus::Failed, spectrum, 0));
    }
    let rank_estimate = spectrum.iter().filter(|&&v| v > opts.null_tol * lmax).count();
    if spectrum[0] > opts.null_tol * lmax {
        return Ok(Recovery::empty(
            RecoveryStatus::Failed,
            spectrum,
            rank_estimate,
        ));
    }
    let multi_null = spectrum[1] < opts.rank_tol * lmax;
    let mut u = vecs.column(0).to_owned();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if u[0].abs() < ANCHOR_REL * norm {
        // No normalizable atom in this direction; several null directions
        // still witness ambiguity rather than a plain failure.
        let status = if multi_null {
            RecoveryStatus::RankAmbiguous
        } else {
            RecoveryStatus::Failed
        };
        return Ok(Recovery::empty(status, spectrum, rank_estimate));
    }
    if u[0] < 0.0 {
        u.mapv_inplace(|v| -v);
    }
    let z: Vec<f64> = (1..=s).map(|w| u[w] / u[0]).collect();
    let mut ambiguous = multi_null;
    let mut worst = 0.0f64;
    for r in (s + 1)..n_basis {
        let want = eval_monomial(basis.exponents(r), &z);
        let got = u[r] / u[0];
        let rel = (got - want).abs() / (1.0 + want.abs());
        worst = worst.max(rel);
        if (got - want).abs() > CONSISTENCY_REL * (1.0 + want.abs()) {
            ambiguous = true;
        }
    }
    if std::env::var("RECOVER_DEBUG").is_ok() {
        eprintln!(
            "recover: multi_null {multi_null}  worst consistency {worst:.3e}  u0 {:.3e}  l1/lmax {:.3e}  l2/lmax {:.3e}",
            u[0] / norm,
            spectrum[0] / lmax,
            spectrum[1] / lmax
        );
    }
    let status = if ambiguous {
        RecoveryStatus::RankAmbiguous
    } else {
        RecoveryStatus::Recovered
    };
    let mut rec = Recovery::empty(status, spectrum, rank_estimate);
    rec.z_star = Some(z);
    Ok(rec)
}

/// Relative recovery error `‖z − reference‖₂ / ‖reference‖₂`.
pub fn error_of(z: &[f64], reference: &[f64]) -> Result<f64, PipelineError> {
    if z.len() != reference.len() {
        return Err(PipelineError::LengthMismatch {
            got: z.len(),
            expected: reference.len(),
        });
    }
    let den = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(PipelineError::ZeroNorm);
    }
    let num = z
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Gauss-Newton refinement of `z` against the observation residuals.
fn polish_point(inst: &Instance<f64>, z: &[f64]) -> Vec<f64> {
    let s = inst.s();
    let kk = inst.num_constraints();
    let mut z = z.to_vec();
    let rhs_scale = inst
        .constraints
        .iter()
        .fold(1.0f64, |acc, c| acc.max(c.rhs.abs()));
    for _ in 0..20 {
        let mut jac = Array2::<f64>::zeros((kk, s));
        let mut res = Array1::<f64>::zeros(kk);
        for (k, c) in inst.constraints.iter().enumerate() {
            res[k] = c.residual_at(inst.n, &z);
            for t in &c.terms {
                let xv = if t.i == 1 { 1.0 } else { z[inst.zvar_of_x(t.i)] };
                let yv = z[inst.zvar_of_y(t.j)];
                if t.i > 1 {
                    jac[(k, inst.zvar_of_x(t.i))] += t.c * yv;
                }
                jac[(k, inst.zvar_of_y(t.j))] += t.c * xv;
            }
        }
        let worst = res.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if worst <= 1e-14 * rhs_scale {
            break;
        }
        let jtj = jac.t().dot(&jac);
        let jtr = jac.t().dot(&res);
        let damp = 1e-12
            * (0..s).fold(0.0f64, |acc, i| acc.max(jtj[(i, i)]));
        let mut lhs = jtj;
        for i in 0..s {
            lhs[(i, i)] += damp.max(f64::MIN_POSITIVE);
        }
        let Ok(step) = lhs.solveh(&jtr) else { break };
        for (zi, di) in z.iter_mut().zip(step.iter()) {
            *zi -= di;
        }
    }
    z
}

// ---- End-to-end composition ---------------------------------------------------

/// Runs Stage 1, Stage 2, Gram extraction, and recovery on one instance.
///
/// Attaches the relative error when the instance records its truth, and the
/// optional Gauss-Newton polish when requested.
pub fn solve_end_to_end(
    inst: &Instance<f64>,
    opts: &SolveOptions,
) -> Result<Recovery, PipelineError> {
    inst.validate()?;
    let (binst, dvar) = balance_instance(inst);
    let basis = binst.basis()?;
    let t1 = Instant::now();
    let stage1 = match opts.stage1 {
        Stage1Method::Direct => stage1_direct(&binst)?,
        Stage1Method::Sdp => stage1_sdp(&binst, opts)?,
    };
    let stage1_s = t1.elapsed().as_secs_f64();
    let t2 = Instant::now();
    // A bound within noise of zero certifies exactness, so there is no
    // point escalating the cap past the first rung that reaches it.
    let rho_accept = 1e-6
        * (1.0
            + stage1
                .fsum
                .coeff(&Exponents::from_elem(0, binst.s()))
                .abs());
    let mut best: Option<SdpSolution> = None;
    let mut sick: Option<SdpSolution> = None;
    let mut solve_err = None;
    for &cap in &stage2_caps(opts.mu) {
        let prob = stage2_assemble(&stage1.fsum, &binst, &basis, cap)?;
        match prob.solve_diag_scaled(&stage2_scales(&binst, &basis, cap), &opts.sdp) {
            Ok(sol) if sol.status == SdpStatus::Optimal => {
                let exact = -sol.pobj >= -rho_accept;
                if std::env::var("RECOVER_DEBUG").is_ok() {
                    let peak = sol.x[2..]
                        .iter()
                        .flat_map(|b| match b {
                            BlockSol::Mat(m) => {
                                m.diag().iter().copied().collect::<Vec<_>>()
                            }
                            BlockSol::Vec(v) => v.to_vec(),
                        })
                        .fold(0.0f64, f64::max);
                    eprintln!(
                        "stage2 cap {cap:.0e}: rho^ {:.3e}  multiplier peak {peak:.3e}  exact {exact}",
                        -sol.pobj
                    );
                }
                if best.as_ref().map_or(true, |b| sol.pobj < b.pobj) {
                    best = Some(sol);
                }
                if exact {
                    break;
                }
            }
            Ok(sol) => sick = Some(sol),
            Err(e) => solve_err = Some(e),
        }
    }
    let sol = match (best, sick) {
        (Some(sol), _) => sol,
        (None, Some(sol)) => sol,
        (None, None) => {
            return Err(PipelineError::Stage2Sdp(
                solve_err.expect("cap schedule is never empty"),
            ))
        }
    };
    let gram = extract_gram(&sol)?;
    let stage2_s = t2.elapsed().as_secs_f64();
    let mut rec = recover(gram.view(), &basis, opts)?;
    rec.label = inst.label.clone().unwrap_or_default();
    rec.rho_star = Some(-sol.pobj);
    rec.objective_stage2 = Some(sol.pobj);
    if let Some(z) = &mut rec.z_star {
        for (zv, dv) in z.iter_mut().zip(&dvar) {
            *zv *= dv;
        }
    }
    if let (Some(z), Some(truth)) = (&rec.z_star, &inst.truth) {
        rec.error = Some(error_of(z, truth)?);
    }
    if opts.polish {
        if let Some(z) = &rec.z_star {
            let zp = polish_point(inst, z);
            if let Some(truth) = &inst.truth {
                rec.error_polished = Some(error_of(&zp, truth)?);
            }
            rec.z_polished = Some(zp);
        }
    }
    rec.timings = Some(Timings { stage1_s, stage2_s });
    Ok(rec)
}

/// Certifies `min ‖u₂(z)‖²` directly with unstructured multipliers.
///
/// Maximizes `ρ` subject to `u₂ᵀu₂ − ρ + Σ_k h_k·λ_k = u₂ᵀWu₂` with
/// `W ⪰ 0` and each `λ_k` a free polynomial of degree `4 − deg(h_k)`
/// (pure coefficient variables).  Shares the Gram extraction and recovery
/// path; at exactness `ρ* = ‖u₂(z₀)‖²`.  Works on any instance with
/// single-product observations, connected or not.
pub fn baseline_identity(
    inst: &Instance<f64>,
    opts: &SolveOptions,
) -> Result<Recovery, PipelineError> {
    inst.validate()?;
    if let Some(k) = (0..inst.num_constraints()).find(|&k| inst.constraints[k].terms.len() != 1)
    {
        return Err(ModelError::NotElementary {
            constraint: k,
            terms: inst.constraints[k].terms.len(),
        }
        .into());
    }
    let (binst, dvar) = balance_instance(inst);
    let basis = binst.basis()?;
    let s = binst.s();
    let h = binst.h_polys();
    let target = quadform_to_poly(&basis, Array2::<f64>::eye(basis.len()).view())?;

    let t2 = Instant::now();
    let mut prob = SdpProblem::new();
    let bw = prob.add_block(BlockSpec::Psd(basis.len()));
    // Free block: ρ first, then the stacked multiplier coefficients.
    let mut lambda_monos: Vec<Vec<Exponents>> = Vec::with_capacity(h.len());
    let mut offsets = Vec::with_capacity(h.len());
    let mut free_len = 1usize;
    for hk in &h {
        let monos = monomials_up_to(s, 4 - hk.degree());
        offsets.push(free_len);
        free_len += monos.len();
        lambda_monos.push(monos);
    }
    let bfree = prob.add_block(BlockSpec::Free(free_len));

    let err = PipelineError::Stage2Sdp;
    let mut row_of: BTreeMap<Exponents, usize> = BTreeMap::new();
    for e in monomials_up_to(s, 4) {
        let row = prob.add_constraint(target.coeff(&e));
        row_of.insert(e, row);
    }
    for (e, pairs) in basis_product_pairs(&basis) {
        let row = row_of[&e];
        for (r, t) in pairs {
            prob.con_entry(row, bw, r, t, 1.0).map_err(err)?;
        }
    }
    prob.con_entry(row_of[&Exponents::from_elem(0, s)], bfree, 0, 0, 1.0)
        .map_err(err)?;
    for (k, hk) in h.iter().enumerate() {
        for (ci, gamma) in lambda_monos[k].iter().enumerate() {
            let idx = offsets[k] + ci;
            let prod = hk.mul(&Polynomial::from_term(s, gamma.clone(), 1.0));
            for (e, &v) in prod.iter() {
                prob.con_entry(row_of[e], bfree, idx, idx, -v).map_err(err)?;
            }
        }
    }
    prob.obj_entry(bfree, 0, 0, -1.0).map_err(err)?;

    let sol = prob.solve(&opts.sdp).map_err(PipelineError::Stage2Sdp)?;
    let gram = extract_gram(&sol)?;
    let stage2_s = t2.elapsed().as_secs_f64();
    let mut rec = recover(gram.view(), &basis, opts)?;
    rec.label = inst.label.clone().unwrap_or_default();
    rec.rho_star = Some(-sol.pobj);
    rec.objective_stage2 = Some(sol.pobj);
    if let Some(z) = &mut rec.z_star {
        for (zv, dv) in z.iter_mut().zip(&dvar) {
            *zv *= dv;
        }
    }
    if let (Some(z), Some(truth)) = (&rec.z_star, &inst.truth) {
        rec.error = Some(error_of(z, truth)?);
    }
    rec.timings = Some(Timings {
        stage1_s: 0.0,
        stage2_s,
    });
    Ok(rec)
}
