//! Sparse multivariate polynomial algebra and ordered monomial bases.
//!
//! Polynomials live in the completion variables `z = [x₂, …, xₙ, y₁, …, y_m]`
//! (`s = n + m − 1` variables) and are stored as sorted maps from exponent
//! vectors to coefficients, so iteration order and therefore every derived
//! computation is deterministic.
//!
//! The basis `u_d` collects all monomials of degree at most `d` in a fixed
//! order: position 0 is the constant, positions `1..=s` are the degree-1
//! monomials in variable order, and (for `d = 2`) the remaining positions are
//! the products `zᵢ zⱼ` with `i ≤ j`, including squares, in lexicographic
//! `(i, j)` order.  With squares included the degree-2 basis has length
//! `N = (s+2)(s+1)/2`.
//!
//! [`KronIndex`] provides the index arithmetic for the stacked basis
//! `h ⊗ u₂` used by the certificate constructions: constraint `k` paired
//! with basis position `r` sits at flat position `(k−1)·N + r` (1-based).

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{Array2, ArrayView2};
use smallvec::SmallVec;
use thiserror::Error;

use crate::Real;

/// Exponent vector of a monomial; entry `t` is the power of `z_{t+1}`.
pub type Exponents = SmallVec<[u8; 12]>;

/// Errors from basis construction and polynomial expansion operations.
#[derive(Debug, Error)]
pub enum BasisError {
    #[error("matrix sizes must satisfy n >= 1 and m >= 1, got n={n}, m={m}")]
    InvalidSize { n: usize, m: usize },
    #[error("basis degree must be 1 or 2, got {0}")]
    InvalidDegree(usize),
    #[error("expected a vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("expected a {expected}x{expected} matrix, got {rows}x{cols}")]
    ShapeMismatch {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("index out of range: {what} = {got}, valid range 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        max: usize,
    },
}

/// Degree of an exponent vector.
pub fn exponent_degree(e: &Exponents) -> usize {
    e.iter().map(|&p| p as usize).sum()
}

fn exponent_mul(a: &Exponents, b: &Exponents) -> Exponents {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
}

/// Relative threshold below which coefficients are dropped after arithmetic.
///
/// Keeps the sparse maps free of floating-point dust without touching
/// anything a 1e-8 level identity check could see.
const CANONICAL_EPS: f64 = 1e-14;

/// Sparse multivariate polynomial over the completion variables.
///
/// Terms are kept in a sorted map keyed by exponent vector; coefficients
/// whose magnitude falls below `1e-14` times the largest coefficient are
/// dropped when the polynomial is canonicalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial<T> {
    nvars: usize,
    terms: BTreeMap<Exponents, T>,
}

impl<T: Real> Polynomial<T> {
    /// The zero polynomial in `nvars` variables.
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    /// The constant polynomial `c`.
    pub fn constant(nvars: usize, c: T) -> Self {
        let mut p = Self::zero(nvars);
        if c != T::zero() {
            p.terms.insert(Exponents::from_elem(0, nvars), c);
        }
        p
    }

    /// The single-variable polynomial `z_{var+1}` (0-based variable index).
    pub fn var(nvars: usize, var: usize) -> Self {
        assert!(var < nvars, "variable index {var} out of range 0..{nvars}");
        let mut e = Exponents::from_elem(0, nvars);
        e[var] = 1;
        Self::from_term(nvars, e, T::one())
    }

    /// Polynomial with the single term `c · z^e`.
    pub fn from_term(nvars: usize, e: Exponents, c: T) -> Self {
        assert_eq!(e.len(), nvars);
        let mut p = Self::zero(nvars);
        if c != T::zero() {
            p.terms.insert(e, c);
        }
        p
    }

    /// Number of variables.
    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Number of stored terms.
    pub fn nterms(&self) -> usize {
        self.terms.len()
    }

    /// True if no terms are stored.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree, 0 for the zero polynomial.
    pub fn degree(&self) -> usize {
        self.terms.keys().map(exponent_degree).max().unwrap_or(0)
    }

    /// Coefficient of the exponent vector `e` (0 if absent).
    pub fn coeff(&self, e: &Exponents) -> T {
        self.terms.get(e).copied().unwrap_or_else(T::zero)
    }

    /// Iterator over `(exponents, coefficient)` in sorted exponent order.
    pub fn iter(&self) -> impl Iterator<Item = (&Exponents, &T)> {
        self.terms.iter()
    }

    /// Largest coefficient magnitude, 0 for the zero polynomial.
    pub fn max_abs_coeff(&self) -> T {
        self.terms
            .values()
            .fold(T::zero(), |acc, &c| acc.max(c.abs()))
    }

    /// Adds `c · z^e` without canonicalizing; call [`Self::canonicalize`]
    /// after a batch of raw accumulations.
    pub fn add_term(&mut self, e: Exponents, c: T) {
        debug_assert_eq!(e.len(), self.nvars);
        let slot = self.terms.entry(e).or_insert_with(T::zero);
        *slot += c;
    }

    /// Drops terms below the relative canonicalization threshold.
    pub fn canonicalize(&mut self) {
        let max = self.max_abs_coeff();
        let cut = T::from_f64_lossy(CANONICAL_EPS) * max;
        self.terms.retain(|_, c| c.abs() > cut && *c != T::zero());
    }

    /// `self + other`.
    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars, "mismatched variable counts");
        let mut out = self.clone();
        for (e, &c) in other.terms.iter() {
            out.add_term(e.clone(), c);
        }
        out.canonicalize();
        out
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars, "mismatched variable counts");
        let mut out = self.clone();
        for (e, &c) in other.terms.iter() {
            out.add_term(e.clone(), -c);
        }
        out.canonicalize();
        out
    }

    /// Adds `w · other` into `self` without an intermediate allocation.
    pub fn add_scaled(&mut self, other: &Self, w: T) {
        assert_eq!(self.nvars, other.nvars, "mismatched variable counts");
        for (e, &c) in other.terms.iter() {
            self.add_term(e.clone(), w * c);
        }
        self.canonicalize();
    }

    /// `self * other`.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars, "mismatched variable counts");
        let mut out = Self::zero(self.nvars);
        for (ea, &ca) in self.terms.iter() {
            for (eb, &cb) in other.terms.iter() {
                out.add_term(exponent_mul(ea, eb), ca * cb);
            }
        }
        out.canonicalize();
        out
    }

    /// `w * self`.
    pub fn scale(&self, w: T) -> Self {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= w;
        }
        out.canonicalize();
        out
    }

    /// Evaluates the polynomial at the point `z`.
    pub fn eval(&self, z: &[T]) -> T {
        assert_eq!(z.len(), self.nvars, "mismatched point length");
        let mut acc = T::zero();
        for (e, &c) in self.terms.iter() {
            let mut term = c;
            for (t, &p) in e.iter().enumerate() {
                for _ in 0..p {
                    term *= z[t];
                }
            }
            acc += term;
        }
        acc
    }

    /// Terms of total degree exactly `d`, as a new polynomial.
    pub fn homogeneous_part(&self, d: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(e, _)| exponent_degree(e) == d)
            .map(|(e, &c)| (e.clone(), c))
            .collect();
        Self {
            nvars: self.nvars,
            terms,
        }
    }

    /// Largest absolute coefficient difference between two polynomials.
    pub fn max_coeff_diff(a: &Self, b: &Self) -> T {
        assert_eq!(a.nvars, b.nvars, "mismatched variable counts");
        let mut worst = T::zero();
        for (e, &c) in a.terms.iter() {
            worst = worst.max((c - b.coeff(e)).abs());
        }
        for (e, &c) in b.terms.iter() {
            if !a.terms.contains_key(e) {
                worst = worst.max(c.abs());
            }
        }
        worst
    }
}

impl<T: Real> fmt::Display for Polynomial<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in self.terms.iter() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (t, &p) in e.iter().enumerate() {
                match p {
                    0 => {}
                    1 => write!(f, "*z{}", t + 1)?,
                    _ => write!(f, "*z{}^{}", t + 1, p)?,
                }
            }
        }
        Ok(())
    }
}

/// Ordered monomial basis `u_d` with position lookups.
///
/// Positions are 0-based in this API: the constant sits at position 0 and
/// the degree-1 monomials occupy positions `1..=s`.
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    s: usize,
    degree: usize,
    ordering: Vec<Exponents>,
    index: HashMap<Exponents, usize>,
}

impl MonomialBasis {
    /// Number of variables `s = n + m − 1`.
    pub fn s(&self) -> usize {
        self.s
    }

    /// Maximum monomial degree (1 or 2).
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Basis length; `(s+2)(s+1)/2` for degree 2.
    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    /// True only for the degenerate zero-variable basis.
    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    /// Exponent vector at position `r` (0-based).
    pub fn exponents(&self, r: usize) -> &Exponents {
        &self.ordering[r]
    }

    /// Position of an exponent vector, if it belongs to the basis.
    pub fn index_of(&self, e: &Exponents) -> Option<usize> {
        self.index.get(e).copied()
    }

    /// The monomial at position `r` as a polynomial.
    pub fn monomial_poly<T: Real>(&self, r: usize) -> Polynomial<T> {
        Polynomial::from_term(self.s, self.ordering[r].clone(), T::one())
    }
}

/// Builds the ordered monomial basis for an `n × m` completion problem.
///
/// The variable order is `z = [x₂, …, xₙ, y₁, …, y_m]`; all products
/// `zᵢ zⱼ` with `i ≤ j` (squares included) appear for degree 2, which is
/// what makes the basis length come out as `(s+2)(s+1)/2`.
pub fn build_basis(n: usize, m: usize, d: usize) -> Result<MonomialBasis, BasisError> {
    if n < 1 || m < 1 {
        return Err(BasisError::InvalidSize { n, m });
    }
    if !(1..=2).contains(&d) {
        return Err(BasisError::InvalidDegree(d));
    }
    let s = n + m - 1;
    let mut ordering = Vec::new();
    ordering.push(Exponents::from_elem(0, s));
    for t in 0..s {
        let mut e = Exponents::from_elem(0, s);
        e[t] = 1;
        ordering.push(e);
    }
    if d == 2 {
        for i in 0..s {
            for j in i..s {
                let mut e = Exponents::from_elem(0, s);
                e[i] += 1;
                e[j] += 1;
                ordering.push(e);
            }
        }
    }
    let index = ordering
        .iter()
        .enumerate()
        .map(|(r, e)| (e.clone(), r))
        .collect();
    Ok(MonomialBasis {
        s,
        degree: d,
        ordering,
        index,
    })
}

/// Evaluates every basis monomial at the point `z`.
pub fn eval_basis<T: Real>(basis: &MonomialBasis, z: &[T]) -> Result<Vec<T>, BasisError> {
    if z.len() != basis.s {
        return Err(BasisError::LengthMismatch {
            expected: basis.s,
            got: z.len(),
        });
    }
    Ok(basis
        .ordering
        .iter()
        .map(|e| {
            let mut v = T::one();
            for (t, &p) in e.iter().enumerate() {
                for _ in 0..p {
                    v *= z[t];
                }
            }
            v
        })
        .collect())
}

/// Position in the stacked basis `h ⊗ u₂`.
///
/// All three fields are 1-based, matching the convention used by exported
/// certificates: constraint `k ∈ 1..=K` paired with basis position
/// `r ∈ 1..=N` sits at `flat = (k−1)·N + r ∈ 1..=K·N`.  The `*0` accessors
/// give the 0-based offsets used for array indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KronIndex {
    pub k: usize,
    pub r: usize,
    pub flat: usize,
}

impl KronIndex {
    /// Builds the index from 1-based `(k, r)`.
    pub fn new(
        k: usize,
        r: usize,
        num_constraints: usize,
        basis_len: usize,
    ) -> Result<Self, BasisError> {
        if k < 1 || k > num_constraints {
            return Err(BasisError::IndexOutOfRange {
                what: "constraint index k",
                got: k,
                max: num_constraints,
            });
        }
        if r < 1 || r > basis_len {
            return Err(BasisError::IndexOutOfRange {
                what: "basis position r",
                got: r,
                max: basis_len,
            });
        }
        Ok(Self {
            k,
            r,
            flat: (k - 1) * basis_len + r,
        })
    }

    /// Recovers `(k, r)` from a 1-based flat position.
    pub fn from_flat(
        flat: usize,
        num_constraints: usize,
        basis_len: usize,
    ) -> Result<Self, BasisError> {
        if flat < 1 || flat > num_constraints * basis_len {
            return Err(BasisError::IndexOutOfRange {
                what: "flat position",
                got: flat,
                max: num_constraints * basis_len,
            });
        }
        let k = (flat - 1) / basis_len + 1;
        let r = (flat - 1) % basis_len + 1;
        Ok(Self { k, r, flat })
    }

    /// 0-based constraint offset.
    pub fn k0(&self) -> usize {
        self.k - 1
    }

    /// 0-based basis offset.
    pub fn r0(&self) -> usize {
        self.r - 1
    }

    /// 0-based flat offset.
    pub fn flat0(&self) -> usize {
        self.flat - 1
    }
}

/// Sparse symmetric matrix stored as its upper triangle (0-based indices).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymMat<T> {
    dim: usize,
    upper: BTreeMap<(usize, usize), T>,
}

impl<T: Real> SparseSymMat<T> {
    /// The zero matrix of the given dimension.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            upper: BTreeMap::new(),
        }
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored upper-triangle entries.
    pub fn nnz(&self) -> usize {
        self.upper.len()
    }

    /// Entry `(i, j)`; indices may be given in either order.
    pub fn get(&self, i: usize, j: usize) -> T {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.upper.get(&key).copied().unwrap_or_else(T::zero)
    }

    /// Adds `v` to the symmetric entry `(i, j)`.
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(i < self.dim && j < self.dim, "entry out of range");
        let key = if i <= j { (i, j) } else { (j, i) };
        let slot = self.upper.entry(key).or_insert_with(T::zero);
        *slot += v;
    }

    /// Accumulates `w · v vᵀ` for a sparse vector `v` given as sorted
    /// `(index, value)` pairs.
    pub fn add_outer(&mut self, v: &[(usize, T)], w: T) {
        for (a, &(i, vi)) in v.iter().enumerate() {
            for &(j, vj) in &v[a..] {
                self.add(i, j, w * vi * vj);
            }
        }
    }

    /// Iterates over upper-triangle entries `((i, j), value)` with `i ≤ j`.
    pub fn iter_upper(&self) -> impl Iterator<Item = (&(usize, usize), &T)> {
        self.upper.iter()
    }

    /// Sum of diagonal entries.
    pub fn trace(&self) -> T {
        (0..self.dim).fold(T::zero(), |acc, i| acc + self.get(i, i))
    }

    /// Largest entry magnitude.
    pub fn max_abs(&self) -> T {
        self.upper
            .values()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Builds from a dense symmetric matrix, dropping entries with
    /// magnitude at most `drop_tol` (absolute).
    pub fn from_dense(m: ArrayView2<'_, T>, drop_tol: T) -> Self {
        let dim = m.nrows();
        assert_eq!(dim, m.ncols(), "matrix must be square");
        let mut out = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = if i == j {
                    m[(i, i)]
                } else {
                    (m[(i, j)] + m[(j, i)]) * T::from_f64_lossy(0.5)
                };
                if v.abs() > drop_tol {
                    out.upper.insert((i, j), v);
                }
            }
        }
        out
    }

    /// Expands to a dense symmetric matrix.
    pub fn to_dense(&self) -> Array2<T> {
        let mut m = Array2::from_elem((self.dim, self.dim), T::zero());
        for (&(i, j), &v) in self.upper.iter() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    /// Drops entries with magnitude below `tol` (absolute).
    pub fn prune(&mut self, tol: T) {
        self.upper.retain(|_, v| v.abs() > tol);
    }
}

/// Expands the quadratic form `u_dᵀ M u_d` into a polynomial.
///
/// The expansion uses `(M + Mᵀ)/2` implicitly, which is exact for the
/// symmetric matrices the callers supply.
pub fn quadform_to_poly<T: Real>(
    basis: &MonomialBasis,
    m: ArrayView2<'_, T>,
) -> Result<Polynomial<T>, BasisError> {
    let n = basis.len();
    if m.nrows() != n || m.ncols() != n {
        return Err(BasisError::ShapeMismatch {
            expected: n,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let mut out = Polynomial::zero(basis.s);
    for r in 0..n {
        for t in r..n {
            let c = if r == t {
                m[(r, r)]
            } else {
                m[(r, t)] + m[(t, r)]
            };
            if c != T::zero() {
                out.add_term(exponent_mul(&basis.ordering[r], &basis.ordering[t]), c);
            }
        }
    }
    out.canonicalize();
    Ok(out)
}

/// The polynomial `h_k(z) · (u₂)_r` at the stacked position `t`.
pub fn kron_entry_poly<T: Real>(
    h: &[Polynomial<T>],
    basis: &MonomialBasis,
    t: &KronIndex,
) -> Result<Polynomial<T>, BasisError> {
    // Re-validate against the actual sizes so stale indices are rejected.
    let t = KronIndex::new(t.k, t.r, h.len(), basis.len())?;
    Ok(h[t.k0()].mul(&basis.monomial_poly(t.r0())))
}

/// Expands `(h ⊗ u_d)ᵀ U (h ⊗ u_d)` into a polynomial.
pub fn kron_quadform_to_poly<T: Real>(
    h: &[Polynomial<T>],
    basis: &MonomialBasis,
    u: &SparseSymMat<T>,
) -> Result<Polynomial<T>, BasisError> {
    let kn = h.len() * basis.len();
    if u.dim() != kn {
        return Err(BasisError::ShapeMismatch {
            expected: kn,
            rows: u.dim(),
            cols: u.dim(),
        });
    }
    let n = basis.len();
    // Entry polynomials are computed on first use; U is usually much
    // sparser than the full stacked basis.
    let mut cache: Vec<Option<Polynomial<T>>> = vec![None; kn];
    let entry = |cache: &mut Vec<Option<Polynomial<T>>>, flat0: usize| -> Polynomial<T> {
        if cache[flat0].is_none() {
            let (k0, r0) = (flat0 / n, flat0 % n);
            cache[flat0] = Some(h[k0].mul(&basis.monomial_poly(r0)));
        }
        cache[flat0].clone().unwrap()
    };
    let two = T::from_f64_lossy(2.0);
    let mut out = Polynomial::zero(basis.s);
    for (&(a, b), &v) in u.iter_upper() {
        if v == T::zero() {
            continue;
        }
        let pa = entry(&mut cache, a);
        let pb = entry(&mut cache, b);
        let prod = pa.mul(&pb);
        let w = if a == b { v } else { two * v };
        for (e, &c) in prod.iter() {
            out.add_term(e.clone(), w * c);
        }
    }
    out.canonicalize();
    Ok(out)
}
