//! Block semidefinite programming: model, interior-point solver, files.
//!
//! Problems are stated in standard primal form over a product of cones:
//!
//! ```text
//! minimize    Σ_b ⟨C_b, X_b⟩
//! subject to  Σ_b ⟨A_{i,b}, X_b⟩ = b_i   (i = 1..p)
//!             X_b  PSD, entrywise nonnegative, or free, per block
//! ```
//!
//! with the Lagrangian dual `max bᵀy` s.t. `C_b − Σ_i y_i A_{i,b} = S_b`
//! in the dual cone.  Nonnegative blocks are diagonal semidefinite blocks;
//! free blocks carry no cone constraint (their dual slack must vanish).
//!
//! [`SdpProblem`] is an accumulating builder: declare blocks, declare
//! constraint rows, then scatter coefficient entries.  Entries to the same
//! position sum; only the upper triangle is stored.  [`solve`] runs the
//! primal-dual interior-point method in [`ipm`]; [`residuals`] recomputes
//! feasibility and gap measures from the original data so solver claims
//! can be audited.  [`planted_problem`] manufactures random problems with
//! a known primal-dual optimal pair for end-to-end solver validation.

mod ipm;
mod sdpa;

pub use sdpa::{export_sdpa, import_sdpa};

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

/// Errors from problem assembly, solving, and file handling.
#[derive(Debug, Error)]
pub enum SdpError {
    #[error("block index {block} out of range ({nblocks} blocks)")]
    InvalidBlock { block: usize, nblocks: usize },
    #[error("constraint index {row} out of range ({nrows} rows)")]
    InvalidRow { row: usize, nrows: usize },
    #[error("entry ({i}, {j}) out of range for block {block} of dimension {dim}")]
    EntryOutOfRange {
        block: usize,
        i: usize,
        j: usize,
        dim: usize,
    },
    #[error("block {block} holds a vector cone; entry ({i}, {j}) must be diagonal")]
    OffDiagonalEntry { block: usize, i: usize, j: usize },
    #[error("non-finite coefficient in {place}")]
    NonFinite { place: String },
    #[error("problem has no constraints")]
    NoConstraints,
    #[error("problem has no blocks")]
    NoBlocks,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cone of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    /// Symmetric positive semidefinite matrix block of the given order.
    Psd(usize),
    /// Entrywise nonnegative vector block (a diagonal PSD block).
    Nonneg(usize),
    /// Unconstrained vector block; its dual slack must be zero.
    Free(usize),
}

impl BlockSpec {
    /// Order of the block.
    pub fn dim(&self) -> usize {
        match *self {
            BlockSpec::Psd(n) | BlockSpec::Nonneg(n) | BlockSpec::Free(n) => n,
        }
    }

    /// True for matrix blocks (off-diagonal entries allowed).
    pub fn is_matrix(&self) -> bool {
        matches!(self, BlockSpec::Psd(_))
    }
}

/// Raw accumulated coefficient list for one (row, block) pair.
type Coo = Vec<(u32, u32, f64)>;

/// Block SDP in standard primal form, built by scattering entries.
#[derive(Clone, Debug, Default)]
pub struct SdpProblem {
    blocks: Vec<BlockSpec>,
    objective: Vec<Coo>,
    rhs: Vec<f64>,
    rows: Vec<Vec<Coo>>,
}

impl SdpProblem {
    /// Empty problem.
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its index.
    pub fn add_block(&mut self, spec: BlockSpec) -> usize {
        self.blocks.push(spec);
        self.objective.push(Vec::new());
        for row in &mut self.rows {
            row.push(Vec::new());
        }
        self.blocks.len() - 1
    }

    /// Appends a constraint row with right-hand side `rhs`, returns its index.
    pub fn add_constraint(&mut self, rhs: f64) -> usize {
        self.rhs.push(rhs);
        self.rows.push(vec![Vec::new(); self.blocks.len()]);
        self.rhs.len() - 1
    }

    /// Block specifications.
    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    /// Number of constraint rows.
    pub fn num_constraints(&self) -> usize {
        self.rhs.len()
    }

    /// Right-hand side vector.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn check_entry(
        &self,
        block: usize,
        i: usize,
        j: usize,
        v: f64,
        place: &str,
    ) -> Result<(), SdpError> {
        let spec = *self
            .blocks
            .get(block)
            .ok_or(SdpError::InvalidBlock {
                block,
                nblocks: self.blocks.len(),
            })?;
        let dim = spec.dim();
        if i >= dim || j >= dim {
            return Err(SdpError::EntryOutOfRange { block, i, j, dim });
        }
        if !spec.is_matrix() && i != j {
            return Err(SdpError::OffDiagonalEntry { block, i, j });
        }
        if !v.is_finite() {
            return Err(SdpError::NonFinite {
                place: place.to_string(),
            });
        }
        Ok(())
    }

    /// Adds `v` to objective entry `(i, j)` of `block` (0-based, symmetric).
    pub fn obj_entry(&mut self, block: usize, i: usize, j: usize, v: f64) -> Result<(), SdpError> {
        self.check_entry(block, i, j, v, "objective")?;
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.objective[block].push((i as u32, j as u32, v));
        Ok(())
    }

    /// Adds `v` to entry `(i, j)` of `block` in constraint `row`.
    pub fn con_entry(
        &mut self,
        row: usize,
        block: usize,
        i: usize,
        j: usize,
        v: f64,
    ) -> Result<(), SdpError> {
        if row >= self.rows.len() {
            return Err(SdpError::InvalidRow {
                row,
                nrows: self.rows.len(),
            });
        }
        self.check_entry(block, i, j, v, &format!("constraint {row}"))?;
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.rows[row][block].push((i as u32, j as u32, v));
        Ok(())
    }

    /// Checks shape invariants and finiteness of all data.
    pub fn validate(&self) -> Result<(), SdpError> {
        if self.blocks.is_empty() {
            return Err(SdpError::NoBlocks);
        }
        if self.rhs.is_empty() {
            return Err(SdpError::NoConstraints);
        }
        for (i, &v) in self.rhs.iter().enumerate() {
            if !v.is_finite() {
                return Err(SdpError::NonFinite {
                    place: format!("rhs {i}"),
                });
            }
        }
        Ok(())
    }

    /// Canonicalized data: per-block upper-triangle triplets, sorted with
    /// duplicates merged and exact zeros dropped.
    pub(crate) fn canonical(&self) -> CanonicalData {
        let canon_coo = |coo: &Coo| -> Coo {
            let mut v = coo.clone();
            v.sort_unstable_by_key(|&(i, j, _)| (i, j));
            let mut out: Coo = Vec::with_capacity(v.len());
            for (i, j, val) in v {
                match out.last_mut() {
                    Some(last) if last.0 == i && last.1 == j => last.2 += val,
                    _ => out.push((i, j, val)),
                }
            }
            out.retain(|&(_, _, v)| v != 0.0);
            out
        };
        CanonicalData {
            blocks: self.blocks.clone(),
            objective: self.objective.iter().map(canon_coo).collect(),
            rhs: self.rhs.clone(),
            rows: self
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(b, coo)| (b, canon_coo(coo)))
                        .filter(|(_, coo)| !coo.is_empty())
                        .collect()
                })
                .collect(),
        }
    }

    /// Solves the problem with the interior-point method.
    pub fn solve(&self, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
        self.validate()?;
        ipm::solve(&self.canonical(), opts)
    }

    /// Solves through a per-block diagonal congruence `Â = D·A·D`.
    ///
    /// A positive diagonal rescaling preserves the cones, the multipliers and
    /// the objective values; only the variables change units (`X = D·X̂·D`,
    /// `S = D⁻¹·Ŝ·D⁻¹`), and the returned solution is mapped back.  Callers
    /// that know a block's magnitude at the optimum (bound slacks pinned to a
    /// large cap, say) can rescale it to unit size, which keeps mixed-scale
    /// problems within the reach of floating-point Newton systems.
    pub(crate) fn solve_diag_scaled(
        &self,
        scales: &[Vec<f64>],
        opts: &SdpOptions,
    ) -> Result<SdpSolution, SdpError> {
        self.validate()?;
        assert_eq!(scales.len(), self.blocks.len(), "one scale vector per block");
        for (b, d) in scales.iter().enumerate() {
            assert_eq!(d.len(), self.blocks[b].dim(), "scale length matches block");
            assert!(
                d.iter().all(|v| v.is_finite() && *v > 0.0),
                "scales must be positive"
            );
        }
        let mut scaled = self.clone();
        for (b, d) in scales.iter().enumerate() {
            for e in scaled.objective[b].iter_mut() {
                e.2 *= d[e.0 as usize] * d[e.1 as usize];
            }
            for row in scaled.rows.iter_mut() {
                for e in row[b].iter_mut() {
                    e.2 *= d[e.0 as usize] * d[e.1 as usize];
                }
            }
        }
        let mut sol = ipm::solve(&scaled.canonical(), opts)?;
        for (b, d) in scales.iter().enumerate() {
            match &mut sol.x[b] {
                BlockSol::Mat(m) => {
                    for ((i, j), v) in m.indexed_iter_mut() {
                        *v *= d[i] * d[j];
                    }
                }
                BlockSol::Vec(v) => {
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi *= d[i] * d[i];
                    }
                }
            }
            match &mut sol.s[b] {
                BlockSol::Mat(m) => {
                    for ((i, j), v) in m.indexed_iter_mut() {
                        *v /= d[i] * d[j];
                    }
                }
                BlockSol::Vec(v) => {
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi /= d[i] * d[i];
                    }
                }
            }
        }
        Ok(sol)
    }
}

/// Canonicalized problem data shared by the solver, the residual audit and
/// the SDPA writer.
#[derive(Clone, Debug)]
pub(crate) struct CanonicalData {
    pub blocks: Vec<BlockSpec>,
    pub objective: Vec<Coo>,
    pub rhs: Vec<f64>,
    /// Per row: the blocks it touches, each with merged triplets.
    pub rows: Vec<Vec<(usize, Coo)>>,
}

impl CanonicalData {
    /// `⟨M, X⟩` for upper-triangle triplets against a dense symmetric block.
    pub fn inner_mat(coo: &Coo, x: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for &(i, j, v) in coo {
            let (i, j) = (i as usize, j as usize);
            acc += if i == j { v * x[(i, i)] } else { 2.0 * v * x[(i, j)] };
        }
        acc
    }

    /// `⟨M, diag(x)⟩` for diagonal triplets against a vector block.
    pub fn inner_vec(coo: &Coo, x: &[f64]) -> f64 {
        coo.iter().map(|&(i, _, v)| v * x[i as usize]).sum()
    }

    /// Frobenius norm of one triplet matrix.
    pub fn fro_norm(coo: &Coo) -> f64 {
        coo.iter()
            .map(|&(i, j, v)| if i == j { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }
}

/// Interior-point solver options.
#[derive(Clone, Debug)]
pub struct SdpOptions {
    /// Relative duality gap and normalized complementarity target.
    pub gap_tol: f64,
    /// Primal and dual feasibility target.
    pub feas_tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Print one line per iteration to stderr.
    pub verbose: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            feas_tol: 1e-8,
            max_iter: 200,
            verbose: false,
        }
    }
}

/// Termination status of a solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    /// All tolerances met.
    Optimal,
    /// Iteration cap reached before the tolerances were met.
    IterationLimit,
    /// A factorization failed beyond recovery; the iterate is best-effort.
    NumericalFailure,
}

/// Value of one block in a primal or dual point.
#[derive(Clone, Debug)]
pub enum BlockSol {
    /// Dense symmetric matrix (PSD blocks).
    Mat(Array2<f64>),
    /// Vector (nonnegative and free blocks).
    Vec(Vec<f64>),
}

impl BlockSol {
    /// Matrix content, panicking on vector blocks.
    pub fn as_mat(&self) -> &Array2<f64> {
        match self {
            BlockSol::Mat(m) => m,
            BlockSol::Vec(_) => panic!("expected a matrix block"),
        }
    }

    /// Vector content, panicking on matrix blocks.
    pub fn as_vec(&self) -> &[f64] {
        match self {
            BlockSol::Vec(v) => v,
            BlockSol::Mat(_) => panic!("expected a vector block"),
        }
    }
}

/// Primal-dual solution returned by [`SdpProblem::solve`].
#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Primal blocks, in problem block order.
    pub x: Vec<BlockSol>,
    /// Dual multipliers, one per constraint.
    pub y: Vec<f64>,
    /// Dual slack blocks, in problem block order.
    pub s: Vec<BlockSol>,
    /// Primal objective `⟨C, X⟩`.
    pub pobj: f64,
    /// Dual objective `bᵀy`.
    pub dobj: f64,
    /// Iterations spent.
    pub iterations: usize,
}

/// Feasibility and optimality measures recomputed from problem data.
#[derive(Clone, Copy, Debug)]
pub struct Residuals {
    /// `‖b − A(X)‖₂ / (1 + ‖b‖₂)`.
    pub pinf: f64,
    /// `max_b ‖C_b − S_b − Σᵢ yᵢ A_{i,b}‖_F / (1 + ‖C‖_F)`.
    pub dinf: f64,
    /// `|⟨C,X⟩ − bᵀy| / (1 + |⟨C,X⟩| + |bᵀy|)`.
    pub rel_gap: f64,
    /// `⟨X, S⟩ / max(1, ν)` with `ν` the total cone dimension.
    pub compl: f64,
}

/// Recomputes residuals of a claimed solution against the problem data.
///
/// Nothing here comes from the solver's internal bookkeeping: objectives,
/// constraint values and slacks are all re-evaluated from scratch.
pub fn residuals(problem: &SdpProblem, sol: &SdpSolution) -> Residuals {
    let canon = problem.canonical();
    let inner_block = |coo: &Coo, x: &BlockSol| -> f64 {
        match x {
            BlockSol::Mat(m) => CanonicalData::inner_mat(coo, m),
            BlockSol::Vec(v) => CanonicalData::inner_vec(coo, v),
        }
    };
    let pobj: f64 = canon
        .objective
        .iter()
        .zip(&sol.x)
        .map(|(coo, x)| inner_block(coo, x))
        .sum();
    let dobj: f64 = canon.rhs.iter().zip(&sol.y).map(|(b, y)| b * y).sum();
    let bnorm = canon.rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
    let mut pres = 0.0;
    for (row, &b) in canon.rows.iter().zip(&canon.rhs) {
        let ax: f64 = row.iter().map(|(blk, coo)| inner_block(coo, &sol.x[*blk])).sum();
        pres += (b - ax) * (b - ax);
    }
    let pinf = pres.sqrt() / (1.0 + bnorm);
    // Dual residual per block: C_b − S_b − Σ y_i A_{i,b}.
    let mut dinf_num: f64 = 0.0;
    let mut cnorm: f64 = 0.0;
    for (b, spec) in canon.blocks.iter().enumerate() {
        let n = spec.dim();
        let mut r = Array2::<f64>::zeros((n, n));
        let scatter = |r: &mut Array2<f64>, coo: &Coo, w: f64| {
            for &(i, j, v) in coo {
                let (i, j) = (i as usize, j as usize);
                r[(i, j)] += w * v;
                if i != j {
                    r[(j, i)] += w * v;
                }
            }
        };
        scatter(&mut r, &canon.objective[b], 1.0);
        cnorm += CanonicalData::fro_norm(&canon.objective[b]).powi(2);
        for (row, &y) in canon.rows.iter().zip(&sol.y) {
            for (blk, coo) in row {
                if *blk == b {
                    scatter(&mut r, coo, -y);
                }
            }
        }
        match &sol.s[b] {
            BlockSol::Mat(m) => r -= m,
            BlockSol::Vec(v) => {
                for (t, &s) in v.iter().enumerate() {
                    r[(t, t)] -= s;
                }
            }
        }
        dinf_num = dinf_num.max(r.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let dinf = dinf_num / (1.0 + cnorm.sqrt());
    let mut compl = 0.0;
    let mut nu = 0usize;
    for (b, spec) in canon.blocks.iter().enumerate() {
        match spec {
            BlockSpec::Psd(n) => {
                nu += n;
                let (x, s) = (sol.x[b].as_mat(), sol.s[b].as_mat());
                compl += (x * s).sum();
            }
            BlockSpec::Nonneg(n) => {
                nu += n;
                let (x, s) = (sol.x[b].as_vec(), sol.s[b].as_vec());
                compl += x.iter().zip(s).map(|(a, c)| a * c).sum::<f64>();
            }
            BlockSpec::Free(_) => {}
        }
    }
    Residuals {
        pinf,
        dinf,
        rel_gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
        compl: compl / (nu.max(1) as f64),
    }
}

/// A randomly generated problem with a known optimal primal-dual pair.
#[derive(Clone, Debug)]
pub struct PlantedSdp {
    pub problem: SdpProblem,
    /// Optimal primal blocks.
    pub x: Vec<BlockSol>,
    /// Optimal dual multipliers.
    pub y: Vec<f64>,
    /// Optimal objective value `⟨C, X*⟩ = bᵀy*`.
    pub objective: f64,
}

/// Manufactures a random feasible problem with known optimum.
///
/// For each PSD block an orthogonal matrix is split into complementary
/// column groups carrying `X*` and `S*` (so `X* S* = 0` and both are
/// singular); nonnegative blocks split indices the same way; free blocks
/// receive arbitrary values with zero slack.  Constraint matrices are
/// random sparse symmetric; the data is closed by `b := A(X*)` and
/// `C := S* + Σᵢ y*ᵢ Aᵢ`, making `(X*, y*, S*)` a complementary optimal
/// pair by construction.
pub fn planted_problem<R: Rng>(
    blocks: &[BlockSpec],
    num_constraints: usize,
    rng: &mut R,
) -> PlantedSdp {
    use ndarray_linalg::QR;

    let mut problem = SdpProblem::new();
    for &spec in blocks {
        problem.add_block(spec);
    }
    // Plant the primal-dual pair.
    let mut xs: Vec<BlockSol> = Vec::new();
    let mut ss: Vec<BlockSol> = Vec::new();
    for &spec in blocks {
        match spec {
            BlockSpec::Psd(n) => {
                let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
                let (q, _) = g.qr().expect("QR of a random matrix");
                let r = (n / 2).max(1).min(n.saturating_sub(1)).max(1);
                let mut x = Array2::<f64>::zeros((n, n));
                let mut s = Array2::<f64>::zeros((n, n));
                for c in 0..n {
                    let col = q.column(c);
                    let lam = rng.random_range(0.5..2.0);
                    let outer = Array2::from_shape_fn((n, n), |(a, b)| lam * col[a] * col[b]);
                    if c < r {
                        x += &outer;
                    } else {
                        s += &outer;
                    }
                }
                if n == 1 {
                    // Order-1 blocks cannot split; keep x positive, s zero.
                    s.fill(0.0);
                }
                xs.push(BlockSol::Mat(x));
                ss.push(BlockSol::Mat(s));
            }
            BlockSpec::Nonneg(n) => {
                let mut x = vec![0.0; n];
                let mut s = vec![0.0; n];
                for t in 0..n {
                    if rng.random_bool(0.5) {
                        x[t] = rng.random_range(0.5..2.0);
                    } else {
                        s[t] = rng.random_range(0.5..2.0);
                    }
                }
                xs.push(BlockSol::Vec(x));
                ss.push(BlockSol::Vec(s));
            }
            BlockSpec::Free(n) => {
                let x = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                xs.push(BlockSol::Vec(x));
                ss.push(BlockSol::Vec(vec![0.0; n]));
            }
        }
    }
    let y: Vec<f64> = (0..num_constraints)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    // Random sparse constraint data; then close b and C around the plant.
    for i in 0..num_constraints {
        let row = problem.add_constraint(0.0);
        debug_assert_eq!(row, i);
        for (b, &spec) in blocks.iter().enumerate() {
            let n = spec.dim();
            match spec {
                BlockSpec::Psd(_) => {
                    for p in 0..n {
                        for q in p..n {
                            if rng.random_bool(0.4) {
                                problem
                                    .con_entry(i, b, p, q, rng.random_range(-1.0..1.0))
                                    .unwrap();
                            }
                        }
                    }
                }
                BlockSpec::Nonneg(_) | BlockSpec::Free(_) => {
                    for p in 0..n {
                        if rng.random_bool(0.6) {
                            problem
                                .con_entry(i, b, p, p, rng.random_range(-1.0..1.0))
                                .unwrap();
                        }
                    }
                }
            }
        }
    }
    let canon = problem.canonical();
    let mut objective = 0.0;
    // b_i := ⟨A_i, X*⟩.
    for (i, row) in canon.rows.iter().enumerate() {
        let ax: f64 = row
            .iter()
            .map(|(blk, coo)| match &xs[*blk] {
                BlockSol::Mat(m) => CanonicalData::inner_mat(coo, m),
                BlockSol::Vec(v) => CanonicalData::inner_vec(coo, v),
            })
            .sum();
        problem.rhs[i] = ax;
        objective += ax * y[i];
    }
    // C_b := S*_b + Σ_i y_i A_{i,b}.
    for (b, &spec) in blocks.iter().enumerate() {
        let n = spec.dim();
        match (&ss[b], spec) {
            (BlockSol::Mat(s), BlockSpec::Psd(_)) => {
                for p in 0..n {
                    for q in p..n {
                        if s[(p, q)] != 0.0 {
                            problem.obj_entry(b, p, q, s[(p, q)]).unwrap();
                        }
                    }
                }
            }
            (BlockSol::Vec(s), _) => {
                for (p, &v) in s.iter().enumerate() {
                    if v != 0.0 {
                        problem.obj_entry(b, p, p, v).unwrap();
                    }
                }
            }
            _ => unreachable!("plant shapes match specs"),
        }
        for (i, row) in canon.rows.iter().enumerate() {
            for (blk, coo) in row {
                if *blk == b {
                    for &(p, q, v) in coo {
                        problem
                            .obj_entry(b, p as usize, q as usize, y[i] * v)
                            .unwrap();
                    }
                }
            }
        }
    }
    PlantedSdp {
        problem,
        x: xs,
        y,
        objective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn builder_rejects_bad_indices_and_data() {
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Psd(3));
        assert!(matches!(
            p.obj_entry(1, 0, 0, 1.0),
            Err(SdpError::InvalidBlock { block: 1, .. })
        ));
        assert!(matches!(
            p.obj_entry(b, 0, 3, 1.0),
            Err(SdpError::EntryOutOfRange { .. })
        ));
        assert!(matches!(
            p.obj_entry(b, 0, 0, f64::NAN),
            Err(SdpError::NonFinite { .. })
        ));
        let d = p.add_block(BlockSpec::Nonneg(2));
        assert!(matches!(
            p.obj_entry(d, 0, 1, 1.0),
            Err(SdpError::OffDiagonalEntry { .. })
        ));
        assert!(matches!(p.validate(), Err(SdpError::NoConstraints)));
        assert!(matches!(
            p.con_entry(0, b, 0, 0, 1.0),
            Err(SdpError::InvalidRow { .. })
        ));
    }

    #[test]
    fn canonicalization_merges_and_sorts_triplets() {
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Psd(3));
        let r = p.add_constraint(1.0);
        p.con_entry(r, b, 2, 1, 0.5).unwrap();
        p.con_entry(r, b, 1, 2, 0.5).unwrap();
        p.con_entry(r, b, 0, 0, 2.0).unwrap();
        p.con_entry(r, b, 0, 0, -2.0).unwrap();
        let canon = p.canonical();
        let coo = &canon.rows[0][0].1;
        assert_eq!(coo.as_slice(), &[(1, 2, 1.0)]);
    }

    #[test]
    fn inner_products_count_off_diagonals_twice() {
        let coo: Coo = vec![(0, 1, 3.0), (1, 1, 2.0)];
        let x = ndarray::array![[1.0, 4.0], [4.0, 5.0]];
        assert_eq!(CanonicalData::inner_mat(&coo, &x), 2.0 * 3.0 * 4.0 + 2.0 * 5.0);
        assert!((CanonicalData::fro_norm(&coo) - (2.0f64 * 9.0 + 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn planted_problems_satisfy_their_own_optimality_claims() {
        let mut rng = StdRng::seed_from_u64(7);
        for specs in [
            vec![BlockSpec::Psd(4)],
            vec![BlockSpec::Psd(3), BlockSpec::Nonneg(4)],
            vec![BlockSpec::Psd(2), BlockSpec::Free(2), BlockSpec::Nonneg(3)],
        ] {
            let planted = planted_problem(&specs, 5, &mut rng);
            // Claimed solution must be exactly feasible and gap-free; build
            // the dual slack from the data to audit it.
            let canon = planted.problem.canonical();
            let mut s_blocks = Vec::new();
            for (b, spec) in canon.blocks.iter().enumerate() {
                let n = spec.dim();
                let mut r = Array2::<f64>::zeros((n, n));
                for &(i, j, v) in &canon.objective[b] {
                    let (i, j) = (i as usize, j as usize);
                    r[(i, j)] += v;
                    if i != j {
                        r[(j, i)] += v;
                    }
                }
                for (row, &y) in canon.rows.iter().zip(&planted.y) {
                    for (blk, coo) in row {
                        if *blk == b {
                            for &(i, j, v) in coo {
                                let (i, j) = (i as usize, j as usize);
                                r[(i, j)] -= y * v;
                                if i != j {
                                    r[(j, i)] -= y * v;
                                }
                            }
                        }
                    }
                }
                match spec {
                    BlockSpec::Psd(_) => s_blocks.push(BlockSol::Mat(r)),
                    _ => s_blocks.push(BlockSol::Vec(
                        (0..n).map(|t| r[(t, t)]).collect(),
                    )),
                }
            }
            let claimed = SdpSolution {
                status: SdpStatus::Optimal,
                x: planted.x.clone(),
                y: planted.y.clone(),
                s: s_blocks,
                pobj: planted.objective,
                dobj: planted.objective,
                iterations: 0,
            };
            let res = residuals(&planted.problem, &claimed);
            assert!(res.pinf <= 1e-12, "pinf {}", res.pinf);
            assert!(res.dinf <= 1e-12, "dinf {}", res.dinf);
            assert!(res.compl <= 1e-12, "compl {}", res.compl);
            assert!(res.rel_gap <= 1e-12, "gap {}", res.rel_gap);
        }
    }
}
