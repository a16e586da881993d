//! Primal-dual interior-point solver with Nesterov-Todd scaling.
//!
//! Mehrotra predictor-corrector iteration on the standard-form problem.
//! Each step:
//!
//! 1. computes the NT scaling point per block: factor `X = LLᵀ`,
//!    `S = RRᵀ`, take the SVD `RᵀL = U·D·Vᵀ` and set `G = L·V·D^{−1/2}`,
//!    so `G⁻¹XG⁻ᵀ = GᵀSG = D` and `W = GGᵀ`;
//! 2. eliminates `ΔS = R_d − AᵀΔy` and `ΔX = G·E⁻¹(R_c)·Gᵀ − W·ΔS·W`
//!    (`E` is the entrywise mean `(dᵢ+dⱼ)/2`), leaving the Schur system
//!    `M·Δy = r_p + A(G·E⁻¹(−R_c)·Gᵀ) + A(W·R_d·W)` with
//!    `M_ij = ⟨A_i, W·A_j·W⟩`, factored once per iteration by dense
//!    Cholesky with escalating diagonal regularization;
//! 3. takes an affine (predictor) step to measure `μ_aff`, sets
//!    `σ = (μ_aff/μ)³`, re-solves with the corrected right-hand side
//!    `R_c = σμI − D² − (ΔX̂ΔŜ + ΔŜΔX̂)/2`, and steps with a 0.98
//!    fraction-to-the-boundary rule per side.
//!
//! Nonnegative blocks run the same formulas elementwise (`d = √(xs)`,
//! Schur weight `x/s`).  Free blocks carry no cone constraint and no dual
//! slack: with `F` their constraint columns, each direction solves the
//! augmented system `[M F; Fᵀ 0]·[Δy; Δx_f] = [r̂; r_f]` by block
//! elimination through the Schur factor (`FᵀM⁻¹F` can be singular when
//! free columns are dependent, so it gets the same escalating
//! regularization plus a round of refinement on the augmented residual).
//! The data first passes through Ruiz equilibration (alternating row and
//! block-scalar balancing, right-hand side included); constraint rows are
//! additionally prescaled to unit Frobenius norm.  Solutions are unscaled
//! on the way out.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Cholesky, Eigh, LeastSquaresSvd, SolveTriangular, UPLO, SVD};

use super::{
    BlockSol, BlockSpec, CanonicalData, SdpError, SdpOptions, SdpSolution, SdpStatus,
};

/// Fraction-to-the-boundary damping.
const STEP_FRAC: f64 = 0.98;
/// Iterations without a merit improvement before declaring a stall.
const STALL_PATIENCE: usize = 6;
/// Ruiz equilibration sweep limit; sweeps stop early once scale factors
/// settle within 1%.
const RUIZ_PASSES: usize = 12;
/// Schur regularization ladder: `base·maxdiag`, escalating tenfold.
const SCHUR_REG_BASE: f64 = 1e-12;
const SCHUR_REG_MAX: f64 = 1e-6;
/// Sparse constraint matrices switch to dense scaling products above this
/// fill ratio, or when outer products would cost more than a GEMM.
const DENSE_FILL: f64 = 0.25;

/// Internal cone; free blocks live outside the cone list.
#[derive(Clone, Copy, Debug)]
enum Cone {
    Psd(usize),
    Diag(usize),
}

impl Cone {
    fn dim(&self) -> usize {
        match *self {
            Cone::Psd(n) | Cone::Diag(n) => n,
        }
    }
}

/// One constraint's data on one internal block.
#[derive(Clone, Debug)]
enum Rep {
    /// Upper-triangle triplets of a symmetric matrix.
    Sparse(Vec<(u32, u32, f64)>),
    /// Dense symmetric matrix.
    Dense(Array2<f64>),
    /// Diagonal entries (vector cones).
    Diag(Vec<(u32, f64)>),
}

impl Rep {
    fn fro_sq(&self) -> f64 {
        match self {
            Rep::Sparse(t) => t
                .iter()
                .map(|&(i, j, v)| if i == j { v * v } else { 2.0 * v * v })
                .sum(),
            Rep::Dense(m) => m.iter().map(|v| v * v).sum(),
            Rep::Diag(t) => t.iter().map(|&(_, v)| v * v).sum(),
        }
    }

    fn scale(&mut self, w: f64) {
        match self {
            Rep::Sparse(t) => t.iter_mut().for_each(|e| e.2 *= w),
            Rep::Dense(m) => *m *= w,
            Rep::Diag(t) => t.iter_mut().for_each(|e| e.1 *= w),
        }
    }

    /// `⟨A, Z⟩` against a dense symmetric matrix.
    fn inner_mat(&self, z: &Array2<f64>) -> f64 {
        match self {
            Rep::Sparse(t) => t
                .iter()
                .map(|&(i, j, v)| {
                    let (i, j) = (i as usize, j as usize);
                    if i == j {
                        v * z[(i, i)]
                    } else {
                        2.0 * v * z[(i, j)]
                    }
                })
                .sum(),
            Rep::Dense(m) => m.iter().zip(z.iter()).map(|(a, b)| a * b).sum(),
            Rep::Diag(_) => unreachable!("diagonal data on a matrix block"),
        }
    }

    /// `⟨A, diag(z)⟩` against a vector block.
    fn inner_diag(&self, z: &Array1<f64>) -> f64 {
        match self {
            Rep::Diag(t) => t.iter().map(|&(i, v)| v * z[i as usize]).sum(),
            _ => unreachable!("matrix data on a vector block"),
        }
    }

    /// Adds `w·A` into a dense accumulator.
    fn scatter_mat(&self, out: &mut Array2<f64>, w: f64) {
        match self {
            Rep::Sparse(t) => {
                for &(i, j, v) in t {
                    let (i, j) = (i as usize, j as usize);
                    out[(i, j)] += w * v;
                    if i != j {
                        out[(j, i)] += w * v;
                    }
                }
            }
            Rep::Dense(m) => out.scaled_add(w, m),
            Rep::Diag(_) => unreachable!("diagonal data on a matrix block"),
        }
    }

    fn scatter_diag(&self, out: &mut Array1<f64>, w: f64) {
        match self {
            Rep::Diag(t) => {
                for &(i, v) in t {
                    out[i as usize] += w * v;
                }
            }
            _ => unreachable!("matrix data on a vector block"),
        }
    }
}

/// Value of one internal block.
#[derive(Clone, Debug)]
enum Val {
    Mat(Array2<f64>),
    Diag(Array1<f64>),
}

impl Val {
    fn zeros(cone: Cone) -> Self {
        match cone {
            Cone::Psd(n) => Val::Mat(Array2::zeros((n, n))),
            Cone::Diag(n) => Val::Diag(Array1::zeros(n)),
        }
    }

    fn mat(&self) -> &Array2<f64> {
        match self {
            Val::Mat(m) => m,
            Val::Diag(_) => unreachable!("expected matrix block"),
        }
    }

    fn diag(&self) -> &Array1<f64> {
        match self {
            Val::Diag(d) => d,
            Val::Mat(_) => unreachable!("expected vector block"),
        }
    }

    fn fro_sq(&self) -> f64 {
        match self {
            Val::Mat(m) => m.iter().map(|v| v * v).sum(),
            Val::Diag(d) => d.iter().map(|v| v * v).sum(),
        }
    }

    fn inner(&self, other: &Val) -> f64 {
        match (self, other) {
            (Val::Mat(a), Val::Mat(b)) => a.iter().zip(b.iter()).map(|(x, y)| x * y).sum(),
            (Val::Diag(a), Val::Diag(b)) => a.iter().zip(b.iter()).map(|(x, y)| x * y).sum(),
            _ => unreachable!("mismatched block kinds"),
        }
    }

    fn axpy(&mut self, w: f64, other: &Val) {
        match (self, other) {
            (Val::Mat(a), Val::Mat(b)) => a.scaled_add(w, b),
            (Val::Diag(a), Val::Diag(b)) => a.scaled_add(w, b),
            _ => unreachable!("mismatched block kinds"),
        }
    }

    /// `tr(X·S)` without cancellation: `‖LₛᵀLₓ‖²` through Cholesky factors,
    /// which keeps tiny complementarity positive where the entrywise sum
    /// would drown in rounding.  Falls back to the clamped entrywise sum on
    /// boundary iterates whose factorization fails.
    fn compl_with(&self, other: &Val) -> f64 {
        match (self, other) {
            (Val::Mat(a), Val::Mat(b)) => {
                if let (Ok(la), Ok(lb)) =
                    (a.cholesky(UPLO::Lower), b.cholesky(UPLO::Lower))
                {
                    lb.t().dot(&la).iter().map(|v| v * v).sum()
                } else {
                    self.inner(other).max(0.0)
                }
            }
            (Val::Diag(a), Val::Diag(b)) => {
                a.iter().zip(b.iter()).map(|(x, y)| (x * y).max(0.0)).sum()
            }
            _ => unreachable!("mismatched block kinds"),
        }
    }
}

/// How an original block maps to internal state.
#[derive(Clone, Copy, Debug)]
enum MapEntry {
    Direct(usize),
    /// Free block: offset into the stacked free-variable vector.
    Free(usize),
}

/// Problem converted to cone form with prescaled rows; free variables are
/// stacked into one dense coefficient matrix.
struct Internal {
    cones: Vec<Cone>,
    c: Vec<Val>,
    rows: Vec<Vec<(usize, Rep)>>,
    rhs: Array1<f64>,
    row_scale: Vec<f64>,
    map: Vec<MapEntry>,
    /// Free-variable constraint columns, prescaled like `rows` (p × n_f).
    fcols: Array2<f64>,
    /// Free-variable objective coefficients (n_f).
    cfree: Array1<f64>,
    /// Total cone dimension ν (diag blocks count their length).
    nu: f64,
}

fn coo_to_rep_psd(coo: &[(u32, u32, f64)], n: usize) -> Rep {
    let fill = coo.len() as f64 / (0.5 * (n * (n + 1)) as f64);
    if n >= 8 && fill > DENSE_FILL {
        let mut m = Array2::zeros((n, n));
        for &(i, j, v) in coo {
            let (i, j) = (i as usize, j as usize);
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        Rep::Dense(m)
    } else {
        Rep::Sparse(coo.to_vec())
    }
}

fn build_internal(canon: &CanonicalData) -> Internal {
    let mut cones = Vec::new();
    let mut map = Vec::new();
    let mut nfree = 0usize;
    for spec in &canon.blocks {
        match *spec {
            BlockSpec::Psd(n) => {
                map.push(MapEntry::Direct(cones.len()));
                cones.push(Cone::Psd(n));
            }
            BlockSpec::Nonneg(n) => {
                map.push(MapEntry::Direct(cones.len()));
                cones.push(Cone::Diag(n));
            }
            BlockSpec::Free(n) => {
                map.push(MapEntry::Free(nfree));
                nfree += n;
            }
        }
    }
    // Objective per internal block and free coefficient vector.
    let mut c: Vec<Val> = cones.iter().map(|&k| Val::zeros(k)).collect();
    let mut cfree = Array1::<f64>::zeros(nfree);
    for (b, spec) in canon.blocks.iter().enumerate() {
        let coo = &canon.objective[b];
        match (map[b], spec) {
            (MapEntry::Direct(ib), BlockSpec::Psd(_)) => {
                if let Val::Mat(m) = &mut c[ib] {
                    for &(i, j, v) in coo {
                        let (i, j) = (i as usize, j as usize);
                        m[(i, j)] += v;
                        if i != j {
                            m[(j, i)] += v;
                        }
                    }
                }
            }
            (MapEntry::Direct(ib), _) => {
                if let Val::Diag(d) = &mut c[ib] {
                    for &(i, _, v) in coo {
                        d[i as usize] += v;
                    }
                }
            }
            (MapEntry::Free(off), _) => {
                for &(i, _, v) in coo {
                    cfree[off + i as usize] += v;
                }
            }
        }
    }
    // Constraints with prescaled rows; free coefficients land in `fcols`
    // and share the row scale.
    let mut rows = Vec::with_capacity(canon.rows.len());
    let mut rhs = Array1::zeros(canon.rhs.len());
    let mut row_scale = Vec::with_capacity(canon.rows.len());
    let mut fcols = Array2::<f64>::zeros((canon.rows.len(), nfree));
    for (i, row) in canon.rows.iter().enumerate() {
        let mut parts: Vec<(usize, Rep)> = Vec::new();
        let mut fpart: Vec<(usize, f64)> = Vec::new();
        for (b, coo) in row {
            let spec = canon.blocks[*b];
            match (map[*b], spec) {
                (MapEntry::Direct(ib), BlockSpec::Psd(n)) => {
                    parts.push((ib, coo_to_rep_psd(coo, n)));
                }
                (MapEntry::Direct(ib), _) => {
                    parts.push((ib, Rep::Diag(coo.iter().map(|&(p, _, v)| (p, v)).collect())));
                }
                (MapEntry::Free(off), _) => {
                    for &(p, _, v) in coo {
                        fpart.push((off + p as usize, v));
                    }
                }
            }
        }
        let norm = (parts.iter().map(|(_, r)| r.fro_sq()).sum::<f64>()
            + fpart.iter().map(|&(_, v)| v * v).sum::<f64>())
        .sqrt();
        let scale = norm.max(1.0);
        for (_, rep) in &mut parts {
            rep.scale(1.0 / scale);
        }
        for &(f, v) in &fpart {
            fcols[(i, f)] += v / scale;
        }
        rhs[i] = canon.rhs[i] / scale;
        row_scale.push(scale);
        rows.push(parts);
    }
    let nu = cones.iter().map(|k| k.dim()).sum::<usize>() as f64;
    Internal {
        cones,
        c,
        rows,
        rhs,
        row_scale,
        map,
        fcols,
        cfree,
        nu,
    }
}

/// Ruiz equilibration: alternating sweeps drive every row and every block's
/// coefficient column toward unit max-magnitude, then a global factor
/// normalizes the objective.  The scaled problem reads `Â_ib = A_ib/(r_i·g_b)`,
/// `b̂_i = b_i/r_i`, `Ĉ_b = κ·C_b/g_b`, so its solution maps back as
/// `X_b = X̂_b/g_b`, `y_i = ŷ_i/(κ·r_i)`, `S_b = g_b·Ŝ_b/κ`, and objective
/// values divide by `κ`.  Balancing the block scalars keeps wildly different
/// coefficient magnitudes (bound caps vs. moment data) from drowning each
/// other in the Newton systems.
fn equilibrate(canon: &mut CanonicalData) -> (Vec<f64>, Vec<f64>, f64) {
    let p = canon.rhs.len();
    let nblk = canon.blocks.len();
    let mut r = vec![1.0f64; p];
    let mut g = vec![1.0f64; nblk];
    for _ in 0..RUIZ_PASSES {
        let mut drift = 1.0f64;
        for i in 0..p {
            let mut m = 0.0f64;
            for (_, coo) in &canon.rows[i] {
                for &(_, _, v) in coo.iter() {
                    m = m.max(v.abs());
                }
            }
            if m > 0.0 {
                let d = m.sqrt();
                drift = drift.max(d).max(1.0 / d);
                canon.rhs[i] /= d;
                for (_, coo) in &mut canon.rows[i] {
                    for e in coo.iter_mut() {
                        e.2 /= d;
                    }
                }
                r[i] *= d;
            }
        }
        let mut bm = vec![0.0f64; nblk];
        for row in &canon.rows {
            for (b, coo) in row {
                for &(_, _, v) in coo.iter() {
                    bm[*b] = bm[*b].max(v.abs());
                }
            }
        }
        for (b, m) in bm.iter_mut().enumerate() {
            if *m > 0.0 {
                *m = m.sqrt();
                drift = drift.max(*m).max(1.0 / *m);
                g[b] *= *m;
            } else {
                *m = 1.0;
            }
        }
        for row in &mut canon.rows {
            for (b, coo) in row {
                for e in coo.iter_mut() {
                    e.2 /= bm[*b];
                }
            }
        }
        if drift <= 1.01 {
            break;
        }
    }
    let mut cmax = 0.0f64;
    for (b, coo) in canon.objective.iter().enumerate() {
        for &(_, _, v) in coo.iter() {
            cmax = cmax.max(v.abs() / g[b]);
        }
    }
    let kappa = 1.0 / cmax.max(1.0);
    for (b, coo) in canon.objective.iter_mut().enumerate() {
        let w = kappa / g[b];
        for e in coo.iter_mut() {
            e.2 *= w;
        }
    }
    (r, g, kappa)
}

/// A free variable eliminated before the iteration: it appeared in exactly
/// one row, so that row pins its value and both leave the reduced problem.
struct Elim {
    /// Original (pivot) row index.
    row: usize,
    /// Original block index and in-block position of the variable.
    block: usize,
    idx: usize,
    /// Pivot coefficient and original objective coefficient.
    a: f64,
    cf: f64,
}

/// Removes free column singletons.  Such a variable absorbs its pivot row:
/// the row always holds by choosing the variable, so the objective picks up
/// `−(c_f/a)·A_i` plus the constant `c_f·b_i/a`, and the row is dropped.
/// Elimination repeats because dropping a row can create new singletons.
/// The exact value and multiplier are reconstructed after the solve, which
/// keeps ill-conditioned free directions out of the Newton systems.
fn presolve(canon: &CanonicalData) -> (CanonicalData, Vec<Elim>, Vec<usize>, f64) {
    let is_free: Vec<bool> = canon
        .blocks
        .iter()
        .map(|b| matches!(b, BlockSpec::Free(_)))
        .collect();
    let mut objective = canon.objective.clone();
    let mut alive = vec![true; canon.rows.len()];
    let mut gone: Vec<Vec<bool>> = canon.blocks.iter().map(|b| vec![false; b.dim()]).collect();
    let mut elims = Vec::new();
    let mut offset = 0.0;
    loop {
        // Count appearances of each live free variable across live rows;
        // canonical rows hold at most one entry per variable.
        let mut occ: std::collections::BTreeMap<(usize, u32), (usize, usize, f64)> =
            std::collections::BTreeMap::new();
        for (r, row) in canon.rows.iter().enumerate() {
            if !alive[r] {
                continue;
            }
            for (b, coo) in row {
                if !is_free[*b] {
                    continue;
                }
                for &(i, _, v) in coo {
                    if v == 0.0 || gone[*b][i as usize] {
                        continue;
                    }
                    let e = occ.entry((*b, i)).or_insert((0, r, v));
                    e.0 += 1;
                    e.1 = r;
                    e.2 = v;
                }
            }
        }
        let Some((&(b, i), &(_, r, a))) =
            occ.iter().find(|(_, &(count, _, _))| count == 1)
        else {
            break;
        };
        let cf: f64 = objective[b]
            .iter()
            .filter(|e| e.0 == i)
            .map(|e| e.2)
            .sum();
        offset += cf * canon.rhs[r] / a;
        let w = cf / a;
        if w != 0.0 {
            for (bb, coo) in &canon.rows[r] {
                for &(p, q, v) in coo {
                    if *bb == b && p == i {
                        continue;
                    }
                    match objective[*bb].iter_mut().find(|e| e.0 == p && e.1 == q) {
                        Some(e) => e.2 -= w * v,
                        None => objective[*bb].push((p, q, -w * v)),
                    }
                }
            }
        }
        objective[b].retain(|e| e.0 != i);
        alive[r] = false;
        gone[b][i as usize] = true;
        elims.push(Elim { row: r, block: b, idx: i as usize, a, cf });
    }
    let kept: Vec<usize> = (0..canon.rows.len()).filter(|&r| alive[r]).collect();
    let reduced = CanonicalData {
        blocks: canon.blocks.clone(),
        objective,
        rhs: kept.iter().map(|&r| canon.rhs[r]).collect(),
        rows: kept.iter().map(|&r| canon.rows[r].clone()).collect(),
    };
    (reduced, elims, kept, offset)
}

/// NT scaling data for one block.
enum Nt {
    Psd {
        g: Array2<f64>,
        ginv: Array2<f64>,
        w: Array2<f64>,
        d: Array1<f64>,
        /// Cholesky factors of X and S for step-length computations.
        lx: Array2<f64>,
        ls: Array2<f64>,
    },
    Diag {
        d: Array1<f64>,
        /// W entries √(x/s).
        g2: Array1<f64>,
        /// Schur weight x/s (the entries of W²).
        w2: Array1<f64>,
    },
}

fn chol_with_jitter(m: &Array2<f64>) -> Option<Array2<f64>> {
    if let Ok(l) = m.cholesky(UPLO::Lower) {
        return Some(l);
    }
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-300);
    for jit in [1e-14, 1e-12, 1e-10] {
        let mut mj = m.clone();
        for i in 0..n {
            mj[(i, i)] += jit * scale;
        }
        if let Ok(l) = mj.cholesky(UPLO::Lower) {
            return Some(l);
        }
    }
    None
}

fn lower_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    l.solve_triangular(UPLO::Lower, ndarray_linalg::Diag::NonUnit, &Array2::eye(n))
        .expect("triangular solve with positive diagonal")
}

fn nt_scaling(cone: Cone, x: &Val, s: &Val) -> Option<Nt> {
    match cone {
        Cone::Psd(_) => {
            let lx = chol_with_jitter(x.mat())?;
            let ls = chol_with_jitter(s.mat())?;
            let m = ls.t().dot(&lx);
            let (_, sv, vt) = m.svd(false, true).ok()?;
            let vt = vt.expect("right singular vectors were requested");
            if sv.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return None;
            }
            // G = Lx · V · D^{-1/2}.
            let mut g = lx.dot(&vt.t());
            for (c, mut col) in g.columns_mut().into_iter().enumerate() {
                col *= 1.0 / sv[c].sqrt();
            }
            // G^{-1} = D^{1/2} · Vᵀ · Lx^{-1}.
            let lxinv = lower_inverse(&lx);
            let mut ginv = vt.dot(&lxinv);
            for (r, mut row) in ginv.rows_mut().into_iter().enumerate() {
                row *= sv[r].sqrt();
            }
            let w = g.dot(&g.t());
            Some(Nt::Psd {
                g,
                ginv,
                w,
                d: sv,
                lx,
                ls,
            })
        }
        Cone::Diag(_) => {
            let (x, s) = (x.diag(), s.diag());
            if x.iter().any(|&v| v <= 0.0) || s.iter().any(|&v| v <= 0.0) {
                return None;
            }
            let d = x.iter().zip(s.iter()).map(|(&a, &b)| (a * b).sqrt()).collect();
            let w2: Array1<f64> = x.iter().zip(s.iter()).map(|(&a, &b)| a / b).collect();
            let g2 = w2.mapv(f64::sqrt);
            Some(Nt::Diag { d, g2, w2 })
        }
    }
}

/// `W·A·W` for one constraint block.
fn waw(rep: &Rep, w: &Array2<f64>) -> Array2<f64> {
    let n = w.nrows();
    match rep {
        Rep::Dense(a) => w.dot(a).dot(w),
        Rep::Sparse(t) => {
            if t.len() <= 2 * n {
                // Σ v · (w_p w_qᵀ + w_q w_pᵀ) over stored entries.
                let mut out = Array2::zeros((n, n));
                for &(p, q, v) in t {
                    let (p, q) = (p as usize, q as usize);
                    let wp = w.column(p);
                    let wq = w.column(q);
                    for a in 0..n {
                        let (vpa, vqa) = (v * wp[a], v * wq[a]);
                        for b in 0..n {
                            out[(a, b)] += vpa * wq[b];
                            if p != q {
                                out[(a, b)] += vqa * wp[b];
                            }
                        }
                    }
                }
                out
            } else {
                let mut a = Array2::zeros((n, n));
                for &(p, q, v) in t {
                    let (p, q) = (p as usize, q as usize);
                    a[(p, q)] += v;
                    if p != q {
                        a[(q, p)] += v;
                    }
                }
                w.dot(&a).dot(w)
            }
        }
        Rep::Diag(_) => unreachable!("diagonal data on a matrix block"),
    }
}

struct Residuals {
    rp: Array1<f64>,
    rd: Vec<Val>,
    /// Free dual residual `c_f − Fᵀy` (the free variables carry no slack).
    rf: Array1<f64>,
    pobj: f64,
    dobj: f64,
    mu: f64,
    pinf: f64,
    dinf: f64,
    rel_gap: f64,
}

fn compute_residuals(
    prob: &Internal,
    x: &[Val],
    xf: &Array1<f64>,
    y: &Array1<f64>,
    s: &[Val],
) -> Residuals {
    let pobj: f64 = prob.c.iter().zip(x).map(|(c, xb)| c.inner(xb)).sum::<f64>()
        + prob.cfree.dot(xf);
    let dobj: f64 = prob.rhs.iter().zip(y.iter()).map(|(b, y)| b * y).sum();
    let mut rp = &prob.rhs - &prob.fcols.dot(xf);
    for (i, row) in prob.rows.iter().enumerate() {
        for (b, rep) in row {
            rp[i] -= match &x[*b] {
                Val::Mat(m) => rep.inner_mat(m),
                Val::Diag(d) => rep.inner_diag(d),
            };
        }
    }
    let mut rd: Vec<Val> = prob
        .c
        .iter()
        .zip(s)
        .map(|(c, sb)| {
            let mut r = c.clone();
            r.axpy(-1.0, sb);
            r
        })
        .collect();
    for (row, &yi) in prob.rows.iter().zip(y.iter()) {
        for (b, rep) in row {
            match &mut rd[*b] {
                Val::Mat(m) => rep.scatter_mat(m, -yi),
                Val::Diag(d) => rep.scatter_diag(d, -yi),
            }
        }
    }
    let rf = &prob.cfree - &prob.fcols.t().dot(y);
    let xs: f64 = x.iter().zip(s).map(|(xb, sb)| xb.compl_with(sb)).sum();
    let mu = xs / prob.nu.max(1.0);
    let bnorm = prob.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cnorm = (prob.c.iter().map(|c| c.fro_sq()).sum::<f64>()
        + prob.cfree.iter().map(|v| v * v).sum::<f64>())
    .sqrt();
    let pinf = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + bnorm);
    let rf_norm = rf.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dinf = rd
        .iter()
        .map(|r| r.fro_sq().sqrt())
        .fold(rf_norm, f64::max)
        / (1.0 + cnorm);
    let rel_gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
    Residuals {
        rp,
        rd,
        rf,
        pobj,
        dobj,
        mu,
        pinf,
        dinf,
        rel_gap,
    }
}

/// Entrywise `E⁻¹` application: `out_ij = 2·rc_ij/(dᵢ+dⱼ)`.
fn apply_einv(rc: &Array2<f64>, d: &Array1<f64>) -> Array2<f64> {
    let n = d.len();
    Array2::from_shape_fn((n, n), |(i, j)| 2.0 * rc[(i, j)] / (d[i] + d[j]))
}

/// Longest feasible step along `dx` from a PSD point with Cholesky `l`.
fn psd_step(l: &Array2<f64>, dx: &Array2<f64>) -> f64 {
    let linv = lower_inverse(l);
    let h = linv.dot(dx).dot(&linv.t());
    // Symmetrize against rounding before the eigensolve.
    let hs = (&h + &h.t()) * 0.5;
    let (vals, _) = hs.eigh(UPLO::Upper).expect("symmetric eigensolve");
    let lam_min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if lam_min >= -1e-13 {
        1.0
    } else {
        (STEP_FRAC / -lam_min).min(1.0)
    }
}

fn diag_step(x: &Array1<f64>, dx: &Array1<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for (&xv, &dv) in x.iter().zip(dx.iter()) {
        if dv < 0.0 {
            alpha = alpha.min(STEP_FRAC * xv / -dv);
        }
    }
    alpha
}

fn step_length(cones: &[Cone], nts: &[Nt], pts: &[Val], dirs: &[Val], primal: bool) -> f64 {
    let mut alpha = 1.0f64;
    for ((cone, nt), (pt, dir)) in cones.iter().zip(nts).zip(pts.iter().zip(dirs)) {
        match (cone, nt) {
            (Cone::Psd(_), Nt::Psd { lx, ls, .. }) => {
                let l = if primal { lx } else { ls };
                alpha = alpha.min(psd_step(l, dir.mat()));
            }
            (Cone::Diag(_), Nt::Diag { .. }) => {
                alpha = alpha.min(diag_step(pt.diag(), dir.diag()));
            }
            _ => unreachable!("cone kinds align with scaling data"),
        }
    }
    alpha
}

/// Solves the cone problem; `canon0` must already be validated.
pub(super) fn solve(canon0: &CanonicalData, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
    let mut canon_eq = canon0.clone();
    let (eq_row, eq_blk, kappa) = equilibrate(&mut canon_eq);
    let (canon_red, elims, kept, offset) = presolve(&canon_eq);
    let canon = &canon_red;
    let prob = build_internal(canon);
    let p = prob.rhs.len();
    let nb = prob.cones.len();

    // Big-identity initialization sized from the scaled data.
    let mut x: Vec<Val> = Vec::with_capacity(nb);
    let mut s: Vec<Val> = Vec::with_capacity(nb);
    for (bi, &cone) in prob.cones.iter().enumerate() {
        let n = cone.dim() as f64;
        let mut amax: f64 = 0.0;
        let mut bamax: f64 = 0.0;
        for (row, &bi_rhs) in prob.rows.iter().zip(prob.rhs.iter()) {
            for (b, rep) in row {
                if *b == bi {
                    let norm = rep.fro_sq().sqrt();
                    amax = amax.max(norm);
                    bamax = bamax.max(n * (1.0 + bi_rhs.abs()) / (1.0 + norm));
                }
            }
        }
        let cnorm = prob.c[bi].fro_sq().sqrt();
        let xi = 10.0f64.max(n.sqrt()).max(bamax);
        let eta = 10.0f64
            .max(n.sqrt())
            .max((1.0 + cnorm.max(amax)) / n.sqrt().max(1.0));
        match cone {
            Cone::Psd(nn) => {
                x.push(Val::Mat(Array2::eye(nn) * xi));
                s.push(Val::Mat(Array2::eye(nn) * eta));
            }
            Cone::Diag(nn) => {
                x.push(Val::Diag(Array1::from_elem(nn, xi)));
                s.push(Val::Diag(Array1::from_elem(nn, eta)));
            }
        }
    }
    let mut y = Array1::<f64>::zeros(p);
    let nf = prob.cfree.len();
    let mut xf = Array1::<f64>::zeros(nf);

    let mut status = SdpStatus::IterationLimit;
    let mut iterations = 0;
    // Without cones the problem is a pair of linear systems: any feasible
    // point is optimal when the objective is constant on the feasible set,
    // and the tail residual check below decides whether that holds.
    if nb == 0 {
        status = SdpStatus::NumericalFailure;
        if nf > 0 {
            if let Ok(r) = prob.fcols.least_squares(&prob.rhs) {
                xf = r.solution;
            }
            if let Ok(r) = prob.fcols.t().to_owned().least_squares(&prob.cfree) {
                y = r.solution;
            }
        }
    }
    // Best iterate by worst-violation merit; the ill-conditioned endgame can
    // degrade later iterates, and the best one is restored on exit. The gap
    // term of the merit lags while the path is still being chased, so μ
    // reduction also counts as progress for stall purposes.
    let mut best: Option<(f64, Vec<Val>, Array1<f64>, Array1<f64>, Vec<Val>)> = None;
    let mut best_mu = f64::INFINITY;
    let mut progress_at = 0usize;
    let mut prev_step = 1.0f64;
    for _ in 0..(if nb == 0 { 0 } else { opts.max_iter }) {
        let res = compute_residuals(&prob, &x, &xf, &y, &s);
        let mu_norm = res.mu.abs() / (1.0 + res.pobj.abs() + res.dobj.abs());
        if opts.verbose {
            let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let xfnorm = xf.iter().map(|v| v * v).sum::<f64>().sqrt();
            eprintln!(
                "iter {iterations:3}  mu {:9.2e}  gap {:9.2e}  pinf {:9.2e}  dinf {:9.2e}  pobj {:+.9e}  |y| {:8.1e}  |xf| {:8.1e}",
                res.mu, res.rel_gap, res.pinf, res.dinf, res.pobj, ynorm, xfnorm
            );
        }
        let merit = res.rel_gap.max(res.pinf).max(res.dinf).max(mu_norm);
        if best.as_ref().map_or(true, |b| merit < b.0) {
            best = Some((merit, x.clone(), xf.clone(), y.clone(), s.clone()));
            progress_at = iterations;
        }
        if res.mu < 0.5 * best_mu {
            best_mu = res.mu;
            progress_at = iterations;
        }
        if res.rel_gap <= opts.gap_tol
            && mu_norm <= opts.gap_tol
            && res.pinf <= opts.feas_tol
            && res.dinf <= opts.feas_tol
        {
            // The converged iterate wins regardless of merit bookkeeping.
            best = Some((merit, x.clone(), xf.clone(), y.clone(), s.clone()));
            status = SdpStatus::Optimal;
            break;
        }
        if res.mu <= 0.0 {
            status = SdpStatus::NumericalFailure;
            break;
        }
        if iterations >= progress_at + STALL_PATIENCE {
            status = SdpStatus::NumericalFailure;
            break;
        }

        // NT scaling per block.
        let mut nts = Vec::with_capacity(nb);
        let mut scaling_ok = true;
        for ((&cone, xb), sb) in prob.cones.iter().zip(&x).zip(&s) {
            match nt_scaling(cone, xb, sb) {
                Some(nt) => nts.push(nt),
                None => {
                    scaling_ok = false;
                    break;
                }
            }
        }
        if !scaling_ok {
            status = SdpStatus::NumericalFailure;
            break;
        }

        // Schur complement M_ij = Σ_b ⟨A_i, W A_j W⟩ (lower triangle).
        let mut schur = Array2::<f64>::zeros((p, p));
        for (bi, nt) in nts.iter().enumerate() {
            let touch: Vec<(usize, &Rep)> = prob
                .rows
                .iter()
                .enumerate()
                .filter_map(|(i, row)| {
                    row.iter().find(|(b, _)| *b == bi).map(|(_, rep)| (i, rep))
                })
                .collect();
            match nt {
                Nt::Psd { w, .. } => {
                    for (ti, &(i, rep_i)) in touch.iter().enumerate() {
                        let t = waw(rep_i, w);
                        for &(j, rep_j) in &touch[..=ti] {
                            schur[(i, j)] += rep_j.inner_mat(&t);
                        }
                    }
                }
                Nt::Diag { w2, .. } => {
                    for (ti, &(i, rep_i)) in touch.iter().enumerate() {
                        let mut u = Array1::<f64>::zeros(w2.len());
                        rep_i.scatter_diag(&mut u, 1.0);
                        let uw = &u * w2;
                        for &(j, rep_j) in &touch[..=ti] {
                            schur[(i, j)] += rep_j.inner_diag(&uw);
                        }
                    }
                }
            }
        }
        for i in 0..p {
            for j in (i + 1)..p {
                schur[(i, j)] = schur[(j, i)];
            }
        }
        // Factor once, reuse for predictor and corrector.
        let max_diag = (0..p).map(|i| schur[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
        let mut chol = None;
        let mut reg = SCHUR_REG_BASE;
        while reg <= SCHUR_REG_MAX {
            let mut m = schur.clone();
            for i in 0..p {
                m[(i, i)] += reg * max_diag;
            }
            if let Ok(l) = m.cholesky(UPLO::Lower) {
                chol = Some(l);
                break;
            }
            reg *= 10.0;
        }
        let Some(schur_l) = chol else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        // Back-substitution plus iterative refinement against the
        // unregularized matrix; the refinement caps the feasibility drift
        // the ill-conditioned endgame would otherwise inject.
        let backsolve = |rhs: &Array1<f64>| -> Array1<f64> {
            let t = schur_l
                .solve_triangular(UPLO::Lower, ndarray_linalg::Diag::NonUnit, rhs)
                .expect("forward solve");
            schur_l
                .t()
                .solve_triangular(UPLO::Upper, ndarray_linalg::Diag::NonUnit, &t)
                .expect("backward solve")
        };
        let solve_schur = |rhs: &Array1<f64>| -> Array1<f64> {
            let mut dy = backsolve(rhs);
            let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            for _ in 0..3 {
                let r = rhs - &schur.dot(&dy);
                let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if rnorm <= 1e-14 * rhs_norm {
                    break;
                }
                dy += &backsolve(&r);
            }
            dy
        };

        // Free-variable elimination data: Z = M⁻¹F and a factor of FᵀM⁻¹F.
        // Free columns may be linearly dependent, so the small factor gets
        // the same escalating regularization as the Schur matrix.
        let mut zcols = Array2::<f64>::zeros((p, nf));
        let mut fchol = None;
        if nf > 0 {
            for (fj, col) in prob.fcols.columns().into_iter().enumerate() {
                zcols.column_mut(fj).assign(&solve_schur(&col.to_owned()));
            }
            let sf = prob.fcols.t().dot(&zcols);
            let sf = (&sf + &sf.t()) * 0.5;
            let fdiag = (0..nf).map(|i| sf[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
            let mut reg = SCHUR_REG_BASE;
            while reg <= SCHUR_REG_MAX {
                let mut m = sf.clone();
                for i in 0..nf {
                    m[(i, i)] += reg * fdiag;
                }
                if let Ok(l) = m.cholesky(UPLO::Lower) {
                    fchol = Some(l);
                    break;
                }
                reg *= 10.0;
            }
            if fchol.is_none() {
                status = SdpStatus::NumericalFailure;
                break;
            }
        }
        // Augmented direction solve: [M F; Fᵀ 0]·[dy; dxf] = [rhs; rf],
        // with one refinement round against the augmented residual to mop
        // up the regularization of FᵀM⁻¹F.
        let solve_aug = |rhs: &Array1<f64>, rf: &Array1<f64>| -> (Array1<f64>, Array1<f64>) {
            if nf == 0 {
                return (solve_schur(rhs), Array1::zeros(0));
            }
            let fl = fchol.as_ref().expect("free factor present");
            let base = |rhs: &Array1<f64>, rf: &Array1<f64>| {
                let t = solve_schur(rhs);
                let w = prob.fcols.t().dot(&t) - rf;
                let u = fl
                    .solve_triangular(UPLO::Lower, ndarray_linalg::Diag::NonUnit, &w)
                    .expect("forward solve");
                let dxf = fl
                    .t()
                    .solve_triangular(UPLO::Upper, ndarray_linalg::Diag::NonUnit, &u)
                    .expect("backward solve");
                let dy = t - zcols.dot(&dxf);
                (dy, dxf)
            };
            let (mut dy, mut dxf) = base(rhs, rf);
            for _ in 0..2 {
                let r1 = rhs - &schur.dot(&dy) - &prob.fcols.dot(&dxf);
                let r2 = rf - &prob.fcols.t().dot(&dy);
                let (ddy, ddxf) = base(&r1, &r2);
                dy += &ddy;
                dxf += &ddxf;
            }
            (dy, dxf)
        };

        // W·R_d·W per block, shared by both solves.
        let wrdw: Vec<Val> = nts
            .iter()
            .zip(&res.rd)
            .map(|(nt, rdb)| match nt {
                Nt::Psd { w, .. } => Val::Mat(w.dot(rdb.mat()).dot(w)),
                Nt::Diag { w2, .. } => Val::Diag(rdb.diag() * w2),
            })
            .collect();

        // Direction solver for a given complementarity target R_c (scaled).
        type Direction = (Array1<f64>, Array1<f64>, Vec<Val>, Vec<Val>);
        let newton = |rc: &[Val], nts: &[Nt]| -> Direction {
            // First term F = G·E⁻¹(R_c)·Gᵀ per block.
            let first: Vec<Val> = nts
                .iter()
                .zip(rc)
                .map(|(nt, rcb)| match nt {
                    Nt::Psd { g, d, .. } => {
                        let e = apply_einv(rcb.mat(), d);
                        Val::Mat(g.dot(&e).dot(&g.t()))
                    }
                    Nt::Diag { d, g2, .. } => Val::Diag(rcb.diag() * g2 / d),
                })
                .collect();
            let mut rhs = res.rp.clone();
            for (i, row) in prob.rows.iter().enumerate() {
                for (b, rep) in row {
                    let z = match (&wrdw[*b], &first[*b]) {
                        (Val::Mat(a), Val::Mat(f)) => rep.inner_mat(&(a - f)),
                        (Val::Diag(a), Val::Diag(f)) => rep.inner_diag(&(a - f)),
                        _ => unreachable!("block kinds align"),
                    };
                    rhs[i] += z;
                }
            }
            let (dy, dxf) = solve_aug(&rhs, &res.rf);
            // ΔS = R_d − AᵀΔy;  ΔX = F − W·ΔS·W.
            let mut ds: Vec<Val> = res.rd.clone();
            for (row, &dyi) in prob.rows.iter().zip(dy.iter()) {
                for (b, rep) in row {
                    match &mut ds[*b] {
                        Val::Mat(m) => rep.scatter_mat(m, -dyi),
                        Val::Diag(d) => rep.scatter_diag(d, -dyi),
                    }
                }
            }
            let dx: Vec<Val> = nts
                .iter()
                .zip(&ds)
                .zip(&first)
                .map(|((nt, dsb), fb)| match nt {
                    Nt::Psd { w, .. } => {
                        let wdsw = w.dot(dsb.mat()).dot(w);
                        Val::Mat(fb.mat() - &wdsw)
                    }
                    Nt::Diag { w2, .. } => Val::Diag(fb.diag() - &(dsb.diag() * w2)),
                })
                .collect();
            (dy, dxf, dx, ds)
        };

        // Predictor: R_c = −D² (aim at zero complementarity).
        let rc_aff: Vec<Val> = nts
            .iter()
            .map(|nt| match nt {
                Nt::Psd { d, .. } => {
                    let n = d.len();
                    let mut m = Array2::zeros((n, n));
                    for i in 0..n {
                        m[(i, i)] = -d[i] * d[i];
                    }
                    Val::Mat(m)
                }
                Nt::Diag { d, .. } => Val::Diag(-(d * d)),
            })
            .collect();
        let (_dy_aff, _dxf_aff, dx_aff, ds_aff) = newton(&rc_aff, &nts);
        let ap_aff = step_length(&prob.cones, &nts, &x, &dx_aff, true);
        let ad_aff = step_length(&prob.cones, &nts, &s, &ds_aff, false);
        let mut xs_aff = 0.0;
        for ((xb, dxb), (sb, dsb)) in x.iter().zip(&dx_aff).zip(s.iter().zip(&ds_aff)) {
            let mut xn = xb.clone();
            xn.axpy(ap_aff, dxb);
            let mut sn = sb.clone();
            sn.axpy(ad_aff, dsb);
            xs_aff += xn.inner(&sn);
        }
        let mu_aff = xs_aff / prob.nu.max(1.0);
        let mut sigma = (mu_aff / res.mu).powi(3).clamp(1e-10, 1.0);
        // When the previous step collapsed the iterate has drifted from the
        // central path and the predictor direction is mostly noise; bias the
        // target back toward centering to restore a usable neighborhood.
        if prev_step < 0.05 {
            sigma = sigma.max(0.7);
        } else if prev_step < 0.2 {
            sigma = sigma.max(0.3);
        }

        // Corrector: R_c = σμI − D² − (ΔX̂ΔŜ + ΔŜΔX̂)/2.
        let rc_cor: Vec<Val> = nts
            .iter()
            .zip(&dx_aff)
            .zip(&ds_aff)
            .map(|((nt, dxb), dsb)| match nt {
                Nt::Psd { g, ginv, d, .. } => {
                    let dxh = ginv.dot(dxb.mat()).dot(&ginv.t());
                    let dsh = g.t().dot(dsb.mat()).dot(g);
                    let cross = dxh.dot(&dsh);
                    let n = d.len();
                    let mut m = Array2::from_shape_fn((n, n), |(i, j)| {
                        -0.5 * (cross[(i, j)] + cross[(j, i)])
                    });
                    for i in 0..n {
                        m[(i, i)] += sigma * res.mu - d[i] * d[i];
                    }
                    Val::Mat(m)
                }
                Nt::Diag { d, .. } => {
                    let cross = dxb.diag() * dsb.diag();
                    Val::Diag(
                        d.iter()
                            .zip(cross.iter())
                            .map(|(&dv, &cv)| sigma * res.mu - dv * dv - cv)
                            .collect(),
                    )
                }
            })
            .collect();
        let (dy, dxf, dx, ds) = newton(&rc_cor, &nts);
        let ap = step_length(&prob.cones, &nts, &x, &dx, true);
        let ad = step_length(&prob.cones, &nts, &s, &ds, false);

        for (xb, dxb) in x.iter_mut().zip(&dx) {
            xb.axpy(ap, dxb);
        }
        xf.scaled_add(ap, &dxf);
        y.scaled_add(ad, &dy);
        for (sb, dsb) in s.iter_mut().zip(&ds) {
            sb.axpy(ad, dsb);
        }
        prev_step = ap.min(ad);
        if opts.verbose {
            eprintln!(
                "          ap {ap:8.2e}  ad {ad:8.2e}  sigma {sigma:8.2e}  reg {reg:8.2e}"
            );
        }
        iterations += 1;
    }

    // Restore the best iterate; if it meets the tolerances (the loop may
    // have overshot past a converged point), the solve still succeeded.
    if let Some((_, bx, bxf, by, bs)) = best {
        x = bx;
        xf = bxf;
        y = by;
        s = bs;
    }
    let res = compute_residuals(&prob, &x, &xf, &y, &s);
    let mu_norm = res.mu.abs() / (1.0 + res.pobj.abs() + res.dobj.abs());
    if res.rel_gap <= opts.gap_tol
        && mu_norm <= opts.gap_tol
        && res.pinf <= opts.feas_tol
        && res.dinf <= opts.feas_tol
    {
        status = SdpStatus::Optimal;
    }
    // Multipliers on the original row set: reduced rows unscale into their
    // original slots, eliminated pivots get the exact value c_f/a; both then
    // leave equilibrated units.
    let mut y_out = vec![0.0; canon0.rhs.len()];
    for ((&yi, &sc), &orig) in y.iter().zip(&prob.row_scale).zip(&kept) {
        y_out[orig] = yi / sc;
    }
    for e in &elims {
        y_out[e.row] = e.cf / e.a;
    }
    for (yi, &ri) in y_out.iter_mut().zip(&eq_row) {
        *yi /= kappa * ri;
    }
    let mut x_out = Vec::with_capacity(canon0.blocks.len());
    let mut s_out = Vec::with_capacity(canon0.blocks.len());
    for (b, spec) in canon0.blocks.iter().enumerate() {
        let gb = eq_blk[b];
        match (prob.map[b], spec) {
            (MapEntry::Direct(ib), BlockSpec::Psd(_)) => {
                x_out.push(BlockSol::Mat(x[ib].mat() / gb));
                s_out.push(BlockSol::Mat(s[ib].mat() * (gb / kappa)));
            }
            (MapEntry::Direct(ib), _) => {
                x_out.push(BlockSol::Vec(x[ib].diag().iter().map(|v| v / gb).collect()));
                s_out.push(BlockSol::Vec(
                    s[ib].diag().iter().map(|v| v * gb / kappa).collect(),
                ));
            }
            (MapEntry::Free(off), spec) => {
                let n = spec.dim();
                let xv: Vec<f64> = xf.iter().skip(off).take(n).map(|v| v / gb).collect();
                // Free variables carry no slack; report the dual residual
                // c − Aᵀy, recomputed from the unscaled original data.
                let mut sv = vec![0.0; n];
                for &(i, _, v) in &canon0.objective[b] {
                    sv[i as usize] += v;
                }
                for (row, &yi) in canon0.rows.iter().zip(&y_out) {
                    for (blk, coo) in row {
                        if *blk == b {
                            for &(i, _, v) in coo {
                                sv[i as usize] -= yi * v;
                            }
                        }
                    }
                }
                x_out.push(BlockSol::Vec(xv));
                s_out.push(BlockSol::Vec(sv));
            }
        }
    }
    // Eliminated variables fill in from their pivot rows, newest first so
    // that cascaded eliminations see every value they depend on.
    for e in elims.iter().rev() {
        let mut ax = 0.0;
        for (blk, coo) in &canon0.rows[e.row] {
            ax += match &x_out[*blk] {
                BlockSol::Mat(m) => CanonicalData::inner_mat(coo, m),
                BlockSol::Vec(v) => CanonicalData::inner_vec(coo, v),
            };
        }
        if let BlockSol::Vec(v) = &mut x_out[e.block] {
            ax -= e.a * v[e.idx];
            v[e.idx] = (canon0.rhs[e.row] - ax) / e.a;
        }
    }
    Ok(SdpSolution {
        status,
        x: x_out,
        y: y_out,
        s: s_out,
        pobj: (res.pobj + offset) / kappa,
        dobj: (res.dobj + offset) / kappa,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{
        planted_problem, residuals, BlockSpec, SdpOptions, SdpProblem, SdpStatus,
    };
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn defaults() -> SdpOptions {
        SdpOptions {
            verbose: std::env::var("IPM_VERBOSE").is_ok(),
            ..SdpOptions::default()
        }
    }

    #[test]
    fn one_by_one_equality_is_exact() {
        // min x s.t. x = 1, x >= 0 (as a 1x1 PSD block).
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Psd(1));
        p.obj_entry(b, 0, 0, 1.0).unwrap();
        let r = p.add_constraint(1.0);
        p.con_entry(r, b, 0, 0, 1.0).unwrap();
        let sol = p.solve(&defaults()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.pobj - 1.0).abs() <= 1e-10, "pobj {}", sol.pobj);
        assert!((sol.x[0].as_mat()[(0, 0)] - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn trace_minimization_with_off_diagonal_coupling() {
        // min tr(X) s.t. X_12 + X_21 = 2, X PSD; optimum X = ones(2), value 2.
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Psd(2));
        p.obj_entry(b, 0, 0, 1.0).unwrap();
        p.obj_entry(b, 1, 1, 1.0).unwrap();
        let r = p.add_constraint(2.0);
        p.con_entry(r, b, 0, 1, 1.0).unwrap();
        let sol = p.solve(&defaults()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.pobj - 2.0).abs() <= 1e-7, "pobj {}", sol.pobj);
        let x = sol.x[0].as_mat();
        for (want, got) in [
            (1.0, x[(0, 0)]),
            (1.0, x[(0, 1)]),
            (1.0, x[(1, 1)]),
        ] {
            assert!((want - got).abs() <= 1e-6, "X entry {got} vs {want}");
        }
    }

    #[test]
    fn linear_program_block_solves_exactly() {
        // min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0: optimum (1, 0), value 1.
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Nonneg(2));
        p.obj_entry(b, 0, 0, 1.0).unwrap();
        p.obj_entry(b, 1, 1, 2.0).unwrap();
        let r = p.add_constraint(1.0);
        p.con_entry(r, b, 0, 0, 1.0).unwrap();
        p.con_entry(r, b, 1, 1, 1.0).unwrap();
        let sol = p.solve(&defaults()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.pobj - 1.0).abs() <= 1e-7, "pobj {}", sol.pobj);
        assert!((sol.x[0].as_vec()[0] - 1.0).abs() <= 1e-7);
        assert!(sol.x[0].as_vec()[1].abs() <= 1e-7);
        // Dual: y = 1 (binding on x1), slack s = c − y·a = (0, 1).
        assert!((sol.y[0] - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn free_variables_hit_equalities_exactly() {
        // Variables (f1, f2) free: f1 + f2 = 3, f1 − f2 = 1, objective 2f1.
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Free(2));
        p.obj_entry(b, 0, 0, 2.0).unwrap();
        let r1 = p.add_constraint(3.0);
        p.con_entry(r1, b, 0, 0, 1.0).unwrap();
        p.con_entry(r1, b, 1, 1, 1.0).unwrap();
        let r2 = p.add_constraint(1.0);
        p.con_entry(r2, b, 0, 0, 1.0).unwrap();
        p.con_entry(r2, b, 1, 1, -1.0).unwrap();
        let sol = p.solve(&defaults()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let f = sol.x[0].as_vec();
        assert!((f[0] - 2.0).abs() <= 1e-7, "f1 {}", f[0]);
        assert!((f[1] - 1.0).abs() <= 1e-7, "f2 {}", f[1]);
        assert!((sol.pobj - 4.0).abs() <= 1e-8);
        // Free slack must vanish at optimality.
        for &sv in sol.s[0].as_vec() {
            assert!(sv.abs() <= 1e-7, "free slack {sv}");
        }
    }

    #[test]
    fn psd_and_free_interact_through_shared_constraints() {
        // min tr(X) with X_11 + f = 2 and f = 0.5: X_11 = 1.5 at optimum
        // (X_22 free to be 0).
        let mut p = SdpProblem::new();
        let bx = p.add_block(BlockSpec::Psd(2));
        let bf = p.add_block(BlockSpec::Free(1));
        p.obj_entry(bx, 0, 0, 1.0).unwrap();
        p.obj_entry(bx, 1, 1, 1.0).unwrap();
        let r1 = p.add_constraint(2.0);
        p.con_entry(r1, bx, 0, 0, 1.0).unwrap();
        p.con_entry(r1, bf, 0, 0, 1.0).unwrap();
        let r2 = p.add_constraint(0.5);
        p.con_entry(r2, bf, 0, 0, 1.0).unwrap();
        let sol = p.solve(&defaults()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.pobj - 1.5).abs() <= 1e-7, "pobj {}", sol.pobj);
        assert!((sol.x[0].as_mat()[(0, 0)] - 1.5).abs() <= 1e-6);
        assert!((sol.x[1].as_vec()[0] - 0.5).abs() <= 1e-8);
    }

    #[test]
    fn planted_suite_reaches_certified_optima() {
        let mut rng = StdRng::seed_from_u64(42);
        let shapes: Vec<Vec<BlockSpec>> = vec![
            vec![BlockSpec::Psd(6)],
            vec![BlockSpec::Psd(4), BlockSpec::Nonneg(5)],
            vec![BlockSpec::Psd(5), BlockSpec::Free(2)],
            vec![BlockSpec::Psd(3), BlockSpec::Psd(4), BlockSpec::Nonneg(3)],
            vec![BlockSpec::Nonneg(8)],
        ];
        for (case, specs) in shapes.iter().enumerate() {
            for round in 0..2 {
                let planted = planted_problem(specs, 6, &mut rng);
                let sol = planted.problem.solve(&defaults()).unwrap();
                assert_eq!(
                    sol.status,
                    SdpStatus::Optimal,
                    "case {case} round {round} not optimal"
                );
                let rel = (sol.pobj - planted.objective).abs()
                    / (1.0 + planted.objective.abs());
                assert!(
                    rel <= 1e-7,
                    "case {case} round {round}: pobj {} vs planted {}",
                    sol.pobj,
                    planted.objective
                );
                let audit = residuals(&planted.problem, &sol);
                assert!(audit.pinf <= 1e-7, "pinf {}", audit.pinf);
                assert!(audit.dinf <= 1e-7, "dinf {}", audit.dinf);
                assert!(audit.rel_gap <= 1e-7, "gap {}", audit.rel_gap);
            }
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let mut rng = StdRng::seed_from_u64(3);
        let planted = planted_problem(&[BlockSpec::Psd(5), BlockSpec::Nonneg(3)], 5, &mut rng);
        let a = planted.problem.solve(&defaults()).unwrap();
        let b = planted.problem.solve(&defaults()).unwrap();
        assert_eq!(a.pobj.to_bits(), b.pobj.to_bits());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn iteration_cap_is_reported_honestly() {
        let mut rng = StdRng::seed_from_u64(9);
        let planted = planted_problem(&[BlockSpec::Psd(4)], 4, &mut rng);
        let opts = SdpOptions {
            max_iter: 2,
            ..SdpOptions::default()
        };
        let sol = planted.problem.solve(&opts).unwrap();
        assert_eq!(sol.status, SdpStatus::IterationLimit);
    }

    #[test]
    fn gap_brackets_the_true_optimum_at_convergence() {
        let mut rng = StdRng::seed_from_u64(17);
        let planted = planted_problem(&[BlockSpec::Psd(5)], 5, &mut rng);
        let sol = planted.problem.solve(&defaults()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let pad = 1e-6 * (1.0 + planted.objective.abs());
        assert!(sol.pobj >= planted.objective - pad);
        assert!(sol.dobj <= planted.objective + pad);
    }
}
