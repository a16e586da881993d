//! Problem data: instances, constraints, observation graphs and mixing.
//!
//! An instance describes a partially observed rank-1 matrix `X = x yᵀ`
//! (with the normalization `x₁ = 1`) through constraints of the form
//! `Σ c · xᵢ yⱼ = rhs`.  A constraint with a single term is an observed
//! entry; constraints with several terms arise when observations are mixed
//! by an invertible matrix.
//!
//! The bipartite graph on row and column vertices, with one edge per
//! observed product, controls recoverability: when the graph is connected,
//! every variable is reachable from `x₁` along a chain of observations,
//! and [`propagate_truth`] solves for the unique consistent completion one
//! edge at a time.  [`spanning_chains`] records those chains (a BFS tree
//! rooted at `x₁`, scanning constraints in input order), which is exactly
//! the data the closed-form certificate construction consumes.
//!
//! [`apply_mixing`] replaces the constraint list `h` by `C·h`, folding
//! constants and summing duplicate products, and refuses matrices that are
//! rank deficient (smallest singular value at most `1e-9` times the
//! largest) or that leave a constraint with no surviving terms.

use std::collections::VecDeque;

use ndarray::ArrayView2;
use ndarray_linalg::SVD;
use serde::Serialize;
use thiserror::Error;

use crate::polybasis::{build_basis, BasisError, Exponents, MonomialBasis, Polynomial};
use crate::Real;

/// Errors from instance parsing, graph analysis and mixing.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("constraint {constraint}: {what} = {got} out of range 1..={max}")]
    IndexOutOfRange {
        constraint: usize,
        what: &'static str,
        got: usize,
        max: usize,
    },
    #[error("constraint {constraint} has no terms")]
    EmptyConstraint { constraint: usize },
    #[error("observation graph is disconnected: {covered} of {total} vertices reachable from x1")]
    Disconnected { covered: usize, total: usize },
    #[error("constraint {constraint} has {terms} terms; chain extraction needs single-term constraints")]
    NotElementary { constraint: usize, terms: usize },
    #[error("truth propagation hits a degenerate product at constraint {constraint} (|pivot| = {pivot:.3e})")]
    DegenerateTruth { constraint: usize, pivot: f64 },
    #[error("constraint {constraint} is inconsistent with the propagated truth (residual {residual:.3e})")]
    InconsistentTruth { constraint: usize, residual: f64 },
    #[error("mixing matrix has {cols} columns but the instance has {expected} constraints")]
    MixingShape { cols: usize, expected: usize },
    #[error("mixing matrix is numerically rank deficient (sigma_min/sigma_max = {ratio:.3e})")]
    MixingSingular { ratio: f64 },
    #[error("mixing row {row} leaves no terms after folding")]
    MixingEmptyRow { row: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// One bilinear product `c · xᵢ yⱼ` (1-based `i`, `j`; `x₁ = 1`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Term<T> {
    pub i: usize,
    pub j: usize,
    pub c: T,
}

/// A constraint `Σ c · xᵢ yⱼ = rhs` on the entries of `X`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constraint<T> {
    pub terms: Vec<Term<T>>,
    pub rhs: T,
}

impl<T: Real> Constraint<T> {
    /// Polynomial degree in `z`: 1 when every term lies in the first row,
    /// otherwise 2.
    pub fn degree(&self) -> usize {
        if self.terms.iter().all(|t| t.i == 1) {
            1
        } else {
            2
        }
    }

    /// True if the constraint observes a single product.
    pub fn is_elementary(&self) -> bool {
        self.terms.len() == 1
    }

    /// The residual polynomial `h(z) = Σ c · xᵢ yⱼ − rhs`.
    pub fn poly(&self, n: usize, m: usize) -> Polynomial<T> {
        let s = n + m - 1;
        let mut p = Polynomial::zero(s);
        for t in &self.terms {
            let mut e = Exponents::from_elem(0, s);
            if t.i > 1 {
                e[t.i - 2] += 1;
            }
            e[n - 1 + t.j - 1] += 1;
            p.add_term(e, t.c);
        }
        p.add_term(Exponents::from_elem(0, s), -self.rhs);
        p.canonicalize();
        p
    }

    /// Evaluates `Σ c · xᵢ yⱼ − rhs` at a completion vector `z`.
    pub fn residual_at(&self, n: usize, z: &[T]) -> T {
        let mut acc = -self.rhs;
        for t in &self.terms {
            let x = if t.i == 1 { T::one() } else { z[t.i - 2] };
            let y = z[n - 1 + t.j - 1];
            acc += t.c * x * y;
        }
        acc
    }
}

/// A partially observed `n × m` rank-1 completion problem.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Instance<T> {
    pub n: usize,
    pub m: usize,
    pub constraints: Vec<Constraint<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl<T: Real> Instance<T> {
    /// Number of completion variables `s = n + m − 1`.
    pub fn s(&self) -> usize {
        self.n + self.m - 1
    }

    /// Number of constraints `K`.
    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Largest constraint degree (0 for an empty constraint list).
    pub fn max_degree(&self) -> usize {
        self.constraints.iter().map(|c| c.degree()).max().unwrap_or(0)
    }

    /// True if every constraint observes a single product.
    pub fn is_elementary(&self) -> bool {
        self.constraints.iter().all(|c| c.is_elementary())
    }

    /// 0-based completion-variable index of `xᵢ` (`i ≥ 2`).
    pub fn zvar_of_x(&self, i: usize) -> usize {
        debug_assert!((2..=self.n).contains(&i));
        i - 2
    }

    /// 0-based completion-variable index of `yⱼ`.
    pub fn zvar_of_y(&self, j: usize) -> usize {
        debug_assert!((1..=self.m).contains(&j));
        self.n - 1 + j - 1
    }

    /// Human-readable name of completion variable `v` (0-based).
    pub fn zvar_name(&self, v: usize) -> String {
        if v < self.n - 1 {
            format!("x{}", v + 2)
        } else {
            format!("y{}", v - (self.n - 1) + 1)
        }
    }

    /// The degree-2 monomial basis sized for this instance.
    pub fn basis(&self) -> Result<MonomialBasis, ModelError> {
        Ok(build_basis(self.n, self.m, 2)?)
    }

    /// All constraint residual polynomials, in input order.
    pub fn h_polys(&self) -> Vec<Polynomial<T>> {
        self.constraints
            .iter()
            .map(|c| c.poly(self.n, self.m))
            .collect()
    }

    /// Checks index ranges and non-emptiness of every constraint.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (k, c) in self.constraints.iter().enumerate() {
            if c.terms.is_empty() {
                return Err(ModelError::EmptyConstraint { constraint: k });
            }
            for t in &c.terms {
                if t.i < 1 || t.i > self.n {
                    return Err(ModelError::IndexOutOfRange {
                        constraint: k,
                        what: "row index i",
                        got: t.i,
                        max: self.n,
                    });
                }
                if t.j < 1 || t.j > self.m {
                    return Err(ModelError::IndexOutOfRange {
                        constraint: k,
                        what: "column index j",
                        got: t.j,
                        max: self.m,
                    });
                }
            }
        }
        Ok(())
    }
}

// ---- JSON layer ------------------------------------------------------------

fn json_path(parts: &[String]) -> String {
    parts.join(".")
}

fn get_field<'a>(
    v: &'a serde_json::Value,
    key: &str,
    path: &[String],
) -> Result<&'a serde_json::Value, ModelError> {
    v.get(key).ok_or_else(|| ModelError::Parse {
        path: json_path(path),
        msg: format!("missing field `{key}`"),
    })
}

fn as_usize(v: &serde_json::Value, path: &[String]) -> Result<usize, ModelError> {
    v.as_u64()
        .map(|u| u as usize)
        .filter(|&u| u >= 1)
        .ok_or_else(|| ModelError::Parse {
            path: json_path(path),
            msg: format!("expected a positive integer, got {v}"),
        })
}

fn as_finite(v: &serde_json::Value, path: &[String]) -> Result<f64, ModelError> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| ModelError::Parse {
        path: json_path(path),
        msg: format!("expected a finite number, got {v}"),
    })
}

/// Parses an instance from JSON bytes.
///
/// Accepted shape:
///
/// ```json
/// {
///   "n": 3, "m": 3,
///   "constraints": [
///     {"terms": [{"i": 1, "j": 1, "c": 1.0}], "rhs": 7.0}
///   ],
///   "truth": [-5.0, 3.0, 7.0, 3.0, -2.0],
///   "label": "example"
/// }
/// ```
///
/// `truth` (ordered `[x₂, …, xₙ, y₁, …, y_m]`) and `label` are optional.
/// Duplicate `(i, j)` pairs inside one constraint are summed.  Errors carry
/// the JSON path of the offending field.
pub fn parse_instance(bytes: &[u8]) -> Result<Instance<f64>, ModelError> {
    let root: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| ModelError::Parse {
            path: "$".into(),
            msg: e.to_string(),
        })?;
    let rp = vec!["$".to_string()];
    let n = as_usize(get_field(&root, "n", &rp)?, &[format!("$.n")])?;
    let m = as_usize(get_field(&root, "m", &rp)?, &[format!("$.m")])?;
    let raw_cons = get_field(&root, "constraints", &rp)?
        .as_array()
        .ok_or_else(|| ModelError::Parse {
            path: "$.constraints".into(),
            msg: "expected an array".into(),
        })?;
    let mut constraints = Vec::with_capacity(raw_cons.len());
    for (k, rc) in raw_cons.iter().enumerate() {
        let cp = vec![format!("$.constraints[{k}]")];
        let raw_terms = get_field(rc, "terms", &cp)?
            .as_array()
            .ok_or_else(|| ModelError::Parse {
                path: format!("$.constraints[{k}].terms"),
                msg: "expected an array".into(),
            })?;
        let mut terms: Vec<Term<f64>> = Vec::with_capacity(raw_terms.len());
        for (t, rt) in raw_terms.iter().enumerate() {
            let tp = vec![format!("$.constraints[{k}].terms[{t}]")];
            let i = as_usize(
                get_field(rt, "i", &tp)?,
                &[format!("$.constraints[{k}].terms[{t}].i")],
            )?;
            let j = as_usize(
                get_field(rt, "j", &tp)?,
                &[format!("$.constraints[{k}].terms[{t}].j")],
            )?;
            let c = as_finite(
                get_field(rt, "c", &tp)?,
                &[format!("$.constraints[{k}].terms[{t}].c")],
            )?;
            // Duplicate products inside one constraint fold into one term.
            if let Some(existing) = terms.iter_mut().find(|e| e.i == i && e.j == j) {
                existing.c += c;
            } else {
                terms.push(Term { i, j, c });
            }
        }
        let rhs = as_finite(get_field(rc, "rhs", &cp)?, &[format!("$.constraints[{k}].rhs")])?;
        constraints.push(Constraint { terms, rhs });
    }
    let truth = match root.get("truth") {
        None | Some(serde_json::Value::Null) => None,
        Some(tv) => {
            let arr = tv.as_array().ok_or_else(|| ModelError::Parse {
                path: "$.truth".into(),
                msg: "expected an array".into(),
            })?;
            let s = n + m - 1;
            if arr.len() != s {
                return Err(ModelError::Parse {
                    path: "$.truth".into(),
                    msg: format!("expected {s} entries, got {}", arr.len()),
                });
            }
            let mut z = Vec::with_capacity(s);
            for (t, v) in arr.iter().enumerate() {
                z.push(as_finite(v, &[format!("$.truth[{t}]")])?);
            }
            Some(z)
        }
    };
    let label = match root.get("label") {
        None | Some(serde_json::Value::Null) => None,
        Some(lv) => Some(
            lv.as_str()
                .ok_or_else(|| ModelError::Parse {
                    path: "$.label".into(),
                    msg: "expected a string".into(),
                })?
                .to_string(),
        ),
    };
    let inst = Instance {
        n,
        m,
        constraints,
        truth,
        label,
    };
    inst.validate()?;
    Ok(inst)
}

/// Serializes an instance to pretty-printed JSON.
///
/// Floating point values round-trip exactly through [`parse_instance`].
pub fn instance_to_json(inst: &Instance<f64>) -> String {
    serde_json::to_string_pretty(inst).expect("instance serializes")
}

// ---- observation graph -------------------------------------------------------

/// Bipartite observation graph: row vertices `x₁..xₙ`, column vertices
/// `y₁..y_m`, one edge per distinct observed product.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    pub n: usize,
    pub m: usize,
    /// Distinct `(i, j)` pairs, 1-based, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl BipartiteGraph {
    /// Total number of vertices `n + m`.
    pub fn num_vertices(&self) -> usize {
        self.n + self.m
    }

    /// Vertex id of row `i` (1-based) in `0..n`.
    fn xvert(&self, i: usize) -> usize {
        i - 1
    }

    /// Vertex id of column `j` (1-based) in `n..n+m`.
    fn yvert(&self, j: usize) -> usize {
        self.n + j - 1
    }
}

/// Builds the observation graph of an instance from all constraint terms.
pub fn bipartite_graph<T: Real>(inst: &Instance<T>) -> BipartiteGraph {
    let mut edges: Vec<(usize, usize)> = inst
        .constraints
        .iter()
        .flat_map(|c| c.terms.iter().map(|t| (t.i, t.j)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    BipartiteGraph {
        n: inst.n,
        m: inst.m,
        edges,
    }
}

/// Connectivity report for an observation graph.
#[derive(Clone, Debug)]
pub struct Connectivity {
    /// True when every vertex is reachable from `x₁`.
    pub connected: bool,
    /// Number of connected components (isolated vertices count).
    pub num_components: usize,
    /// Component id per vertex (`x₁..xₙ` then `y₁..y_m`).
    pub component_of: Vec<usize>,
}

/// Computes connected components of the observation graph.
///
/// Recovery of the completion requires a single component: every row and
/// column must be linked to the normalized row `x₁` through observations.
pub fn connectivity(graph: &BipartiteGraph) -> Connectivity {
    let nv = graph.num_vertices();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for &(i, j) in &graph.edges {
        let a = graph.xvert(i);
        let b = graph.yvert(j);
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut component_of = vec![usize::MAX; nv];
    let mut num_components = 0;
    for start in 0..nv {
        if component_of[start] != usize::MAX {
            continue;
        }
        let id = num_components;
        num_components += 1;
        let mut queue = VecDeque::from([start]);
        component_of[start] = id;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if component_of[w] == usize::MAX {
                    component_of[w] = id;
                    queue.push_back(w);
                }
            }
        }
    }
    Connectivity {
        connected: num_components == 1,
        num_components,
        component_of,
    }
}

/// One step of an observation chain: constraint `constraint` (0-based)
/// introduces completion variable `var` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainStep {
    pub constraint: usize,
    pub var: usize,
}

/// The chains that connect every completion variable to `x₁`.
///
/// Produced by a breadth-first search of the observation graph rooted at
/// `x₁`, scanning constraints in input order; `paths[v]` lists the steps
/// from the root to variable `v`, each step naming the constraint crossed
/// and the variable it introduces (the last step introduces `v` itself).
#[derive(Clone, Debug)]
pub struct ChainTree {
    /// Root-to-variable constraint paths, indexed by completion variable.
    pub paths: Vec<Vec<ChainStep>>,
    /// Constraint indices used by the tree, in BFS discovery order.
    pub tree_constraints: Vec<usize>,
    /// Completion variables in BFS discovery order.
    pub discovery_order: Vec<usize>,
}

impl ChainTree {
    /// Depth of variable `v` (number of constraints on its chain).
    pub fn depth(&self, v: usize) -> usize {
        self.paths[v].len()
    }
}

/// Extracts spanning chains from an elementary instance.
///
/// Requires every constraint to observe a single product and the
/// observation graph to be connected; otherwise recovery along chains is
/// impossible and an error describes which precondition failed.
pub fn spanning_chains<T: Real>(inst: &Instance<T>) -> Result<ChainTree, ModelError> {
    inst.validate()?;
    for (k, c) in inst.constraints.iter().enumerate() {
        if !c.is_elementary() {
            return Err(ModelError::NotElementary {
                constraint: k,
                terms: c.terms.len(),
            });
        }
    }
    let s = inst.s();
    let nv = inst.n + inst.m;
    // Vertex ids: 0..n are x1..xn, n..n+m are y1..ym.  Incidence lists keep
    // constraint input order so the BFS tie-break is reproducible.
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for (k, c) in inst.constraints.iter().enumerate() {
        let t = c.terms[0];
        incident[t.i - 1].push(k);
        incident[inst.n + t.j - 1].push(k);
    }
    // Completion-variable index of a vertex; x1 (vertex 0) has none.
    let zvar = |vert: usize| -> Option<usize> {
        if vert == 0 {
            None
        } else if vert < inst.n {
            Some(vert - 1)
        } else {
            Some(vert - 1)
        }
    };
    let mut visited = vec![false; nv];
    let mut paths: Vec<Option<Vec<ChainStep>>> = vec![None; s];
    let mut tree_constraints = Vec::new();
    let mut discovery_order = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(v) = queue.pop_front() {
        let path_here: Vec<ChainStep> = match zvar(v) {
            None => Vec::new(),
            Some(zv) => paths[zv].clone().expect("visited vertices have paths"),
        };
        for &k in &incident[v] {
            let t = inst.constraints[k].terms[0];
            let (a, b) = (t.i - 1, inst.n + t.j - 1);
            let other = if a == v { b } else { a };
            if visited[other] {
                continue;
            }
            visited[other] = true;
            let zv = zvar(other).expect("non-root vertex has a variable");
            let mut path = path_here.clone();
            path.push(ChainStep {
                constraint: k,
                var: zv,
            });
            paths[zv] = Some(path);
            tree_constraints.push(k);
            discovery_order.push(zv);
            queue.push_back(other);
        }
    }
    let covered = visited.iter().filter(|&&b| b).count();
    if covered != nv {
        return Err(ModelError::Disconnected {
            covered,
            total: nv,
        });
    }
    let paths = paths
        .into_iter()
        .map(|p| p.expect("connected graph assigns every variable a path"))
        .collect();
    Ok(ChainTree {
        paths,
        tree_constraints,
        discovery_order,
    })
}

/// Relative tolerance for declaring a non-tree constraint inconsistent.
const CONSISTENCY_TOL: f64 = 1e-9;
/// Absolute pivot floor below which propagation is declared degenerate.
const DEGENERACY_TOL: f64 = 1e-12;

/// Solves for the unique completion consistent with the observations.
///
/// Walks the spanning chains from `x₁`, solving `c · xᵢ yⱼ = rhs` for the
/// newly introduced variable at each step, then checks every remaining
/// constraint against the propagated values.  Fails if a pivot product is
/// smaller than `1e-12` in magnitude (degenerate data) or if any constraint
/// residual exceeds `1e-9 · (1 + |rhs|)` (inconsistent data).
pub fn propagate_truth<T: Real>(inst: &Instance<T>) -> Result<Vec<T>, ModelError> {
    let tree = spanning_chains(inst)?;
    let s = inst.s();
    let mut z = vec![T::zero(); s];
    let mut known = vec![false; s];
    // Value of the x or y factor tied to completion variable v, where x1 is
    // the implicit root with value 1.
    for &v in &tree.discovery_order {
        let step = *tree.paths[v].last().expect("non-root variable has a step");
        let term = inst.constraints[step.constraint].terms[0];
        let rhs = inst.constraints[step.constraint].rhs;
        let xv = if term.i == 1 {
            None
        } else {
            Some(inst.zvar_of_x(term.i))
        };
        let yv = inst.zvar_of_y(term.j);
        // Exactly one endpoint of the edge is the new variable.
        let (pivot, out) = if Some(v) == xv {
            (z[yv], v)
        } else {
            debug_assert_eq!(v, yv);
            let x = match xv {
                None => T::one(),
                Some(w) => z[w],
            };
            (x, v)
        };
        let denom = term.c * pivot;
        let denom_f = denom.to_f64().unwrap_or(0.0);
        if denom_f.abs() <= DEGENERACY_TOL {
            return Err(ModelError::DegenerateTruth {
                constraint: step.constraint,
                pivot: denom_f,
            });
        }
        z[out] = rhs / denom;
        known[out] = true;
    }
    debug_assert!(known.iter().all(|&k| k));
    for (k, c) in inst.constraints.iter().enumerate() {
        let r = c.residual_at(inst.n, &z).to_f64().unwrap_or(f64::INFINITY);
        let tol = CONSISTENCY_TOL * (1.0 + c.rhs.to_f64().unwrap_or(0.0).abs());
        if r.abs() > tol {
            return Err(ModelError::InconsistentTruth {
                constraint: k,
                residual: r,
            });
        }
    }
    Ok(z)
}

/// Relative singular-value floor for accepting a mixing matrix.
const MIXING_RANK_TOL: f64 = 1e-9;
/// Relative coefficient floor when folding mixed terms.
const MIXING_FOLD_TOL: f64 = 1e-14;

/// Replaces the constraints `h` by the mixed constraints `C·h`.
///
/// Row `a` of the result is `Σ_k C[a,k] · h_k`, with products collected,
/// constants folded into the new right-hand side, and coefficients below
/// `1e-14` times the row maximum dropped.  `C` may have more rows than
/// columns but must have full column rank.
pub fn apply_mixing<T: Real>(
    inst: &Instance<T>,
    c: ArrayView2<'_, T>,
) -> Result<Instance<T>, ModelError> {
    inst.validate()?;
    let kk = inst.num_constraints();
    if c.ncols() != kk {
        return Err(ModelError::MixingShape {
            cols: c.ncols(),
            expected: kk,
        });
    }
    // Rank check runs in f64; the tolerance is calibrated there.
    let cf = c.map(|v| v.to_f64().expect("finite coefficient"));
    let (_, sv, _) = cf.svd(false, false).expect("SVD of a finite matrix");
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > MIXING_RANK_TOL * smax) || c.nrows() < c.ncols() {
        return Err(ModelError::MixingSingular {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }
    let mut constraints = Vec::with_capacity(c.nrows());
    for a in 0..c.nrows() {
        let mut terms: Vec<Term<T>> = Vec::new();
        let mut rhs = T::zero();
        for (k, con) in inst.constraints.iter().enumerate() {
            let w = c[(a, k)];
            if w == T::zero() {
                continue;
            }
            rhs += w * con.rhs;
            for t in &con.terms {
                if let Some(e) = terms.iter_mut().find(|e| e.i == t.i && e.j == t.j) {
                    e.c += w * t.c;
                } else {
                    terms.push(Term {
                        i: t.i,
                        j: t.j,
                        c: w * t.c,
                    });
                }
            }
        }
        let cmax = terms
            .iter()
            .fold(T::zero(), |acc, t| acc.max(t.c.abs()));
        let cut = T::from_f64_lossy(MIXING_FOLD_TOL) * cmax;
        terms.retain(|t| t.c.abs() > cut);
        if terms.is_empty() {
            return Err(ModelError::MixingEmptyRow { row: a });
        }
        terms.sort_by_key(|t| (t.i, t.j));
        constraints.push(Constraint { terms, rhs });
    }
    Ok(Instance {
        n: inst.n,
        m: inst.m,
        constraints,
        truth: inst.truth.clone(),
        label: inst.label.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// 3x3 fixture with five observed entries and truth
    /// z = [x2, x3, y1, y2, y3] = [-5, 3, 7, 3, -2].
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
            label: Some("fixture-3x3".into()),
        }
    }

    #[test]
    fn constraint_polys_have_expected_terms() {
        let inst = fixture_3x3();
        let h = inst.h_polys();
        assert_eq!(h.len(), 5);
        // h3 = x2*y1 + 35 in z = [x2, x3, y1, y2, y3].
        let e = Exponents::from_slice(&[1, 0, 1, 0, 0]);
        assert_eq!(h[2].coeff(&e), 1.0);
        assert_eq!(h[2].coeff(&Exponents::from_slice(&[0; 5])), 35.0);
        assert_eq!(h[2].degree(), 2);
        // h1 = y1 - 7 has degree 1.
        assert_eq!(h[0].degree(), 1);
        assert_eq!(
            inst.constraints.iter().map(|c| c.degree()).collect::<Vec<_>>(),
            vec![1, 1, 2, 2, 2]
        );
    }

    #[test]
    fn constraints_vanish_at_the_truth() {
        let inst = fixture_3x3();
        let z0 = inst.truth.clone().unwrap();
        for (h, c) in inst.h_polys().iter().zip(&inst.constraints) {
            assert_eq!(h.eval(&z0), 0.0);
            assert_eq!(c.residual_at(inst.n, &z0), 0.0);
        }
    }

    #[test]
    fn variable_naming_follows_the_fixed_order() {
        let inst = fixture_3x3();
        let names: Vec<String> = (0..inst.s()).map(|v| inst.zvar_name(v)).collect();
        assert_eq!(names, vec!["x2", "x3", "y1", "y2", "y3"]);
        assert_eq!(inst.zvar_of_x(2), 0);
        assert_eq!(inst.zvar_of_y(1), 2);
        assert_eq!(inst.zvar_of_y(3), 4);
    }

    #[test]
    fn json_round_trip_preserves_instances() {
        let inst = fixture_3x3();
        let text = instance_to_json(&inst);
        let back = parse_instance(text.as_bytes()).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn json_round_trip_is_bit_exact_for_awkward_floats() {
        let mut inst = fixture_3x3();
        inst.constraints[0].rhs = 0.1 + 0.2;
        inst.constraints[1].terms[0].c = f64::MIN_POSITIVE;
        inst.truth = Some(vec![1.0 / 3.0, -1e300, 2.0f64.powi(-40), 0.3, 7.0]);
        let back = parse_instance(instance_to_json(&inst).as_bytes()).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn parse_reports_paths_for_missing_and_bad_fields() {
        let missing = parse_instance(br#"{"n": 2, "constraints": []}"#).unwrap_err();
        assert!(missing.to_string().contains("missing field `m`"), "{missing}");
        let bad = parse_instance(
            br#"{"n": 2, "m": 2, "constraints": [{"terms": [{"i": 1, "j": "x", "c": 1.0}], "rhs": 1.0}]}"#,
        )
        .unwrap_err();
        assert!(
            bad.to_string().contains("$.constraints[0].terms[0].j"),
            "{bad}"
        );
        let nan = parse_instance(
            br#"{"n": 2, "m": 2, "constraints": [{"terms": [{"i": 1, "j": 1, "c": null}], "rhs": 1.0}]}"#,
        )
        .unwrap_err();
        assert!(nan.to_string().contains("finite number"), "{nan}");
    }

    #[test]
    fn parse_rejects_out_of_range_indices() {
        let err = parse_instance(
            br#"{"n": 2, "m": 2, "constraints": [{"terms": [{"i": 3, "j": 1, "c": 1.0}], "rhs": 1.0}]}"#,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ModelError::IndexOutOfRange { constraint: 0, got: 3, .. }
        ));
    }

    #[test]
    fn parse_rejects_wrong_truth_length() {
        let err = parse_instance(
            br#"{"n": 2, "m": 2, "constraints": [{"terms": [{"i": 1, "j": 1, "c": 1.0}], "rhs": 1.0}], "truth": [1.0, 2.0]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("$.truth"), "{err}");
    }

    #[test]
    fn parse_sums_duplicate_terms() {
        let inst = parse_instance(
            br#"{"n": 2, "m": 2, "constraints": [{"terms": [
                {"i": 2, "j": 1, "c": 1.5}, {"i": 2, "j": 1, "c": 0.5}
            ], "rhs": 4.0}]}"#,
        )
        .unwrap();
        assert_eq!(inst.constraints[0].terms.len(), 1);
        assert_eq!(inst.constraints[0].terms[0].c, 2.0);
    }

    #[test]
    fn graph_has_one_edge_per_distinct_product() {
        let inst = fixture_3x3();
        let g = bipartite_graph(&inst);
        assert_eq!(g.edges, vec![(1, 1), (1, 2), (2, 1), (2, 3), (3, 2)]);
        let c = connectivity(&g);
        assert!(c.connected);
        assert_eq!(c.num_components, 1);
    }

    #[test]
    fn dropping_a_bridge_disconnects_the_graph() {
        let mut inst = fixture_3x3();
        // Constraint 4 (x3*y2) is the only edge at x3.
        inst.constraints.remove(4);
        let c = connectivity(&bipartite_graph(&inst));
        assert!(!c.connected);
        assert_eq!(c.num_components, 2);
        assert!(matches!(
            spanning_chains(&inst),
            Err(ModelError::Disconnected { covered: 5, total: 6 })
        ));
    }

    #[test]
    fn chains_follow_breadth_first_discovery() {
        let inst = fixture_3x3();
        let tree = spanning_chains(&inst).unwrap();
        let cons = |v: usize| -> Vec<usize> {
            tree.paths[v].iter().map(|s| s.constraint).collect()
        };
        // z order: [x2, x3, y1, y2, y3].
        assert_eq!(cons(inst.zvar_of_y(1)), vec![0]);
        assert_eq!(cons(inst.zvar_of_y(2)), vec![1]);
        assert_eq!(cons(inst.zvar_of_x(2)), vec![0, 2]);
        assert_eq!(cons(inst.zvar_of_x(3)), vec![1, 4]);
        assert_eq!(cons(inst.zvar_of_y(3)), vec![0, 2, 3]);
        assert_eq!(tree.tree_constraints, vec![0, 1, 2, 4, 3]);
        // Every step introduces the variable recorded for it.
        for v in 0..inst.s() {
            assert_eq!(tree.paths[v].last().unwrap().var, v);
        }
    }

    #[test]
    fn chains_reject_multi_term_constraints() {
        let mut inst = fixture_3x3();
        inst.constraints[0].terms.push(Term { i: 2, j: 2, c: 1.0 });
        assert!(matches!(
            spanning_chains(&inst),
            Err(ModelError::NotElementary { constraint: 0, terms: 2 })
        ));
    }

    #[test]
    fn propagation_recovers_the_recorded_truth() {
        let inst = fixture_3x3();
        let z = propagate_truth(&inst).unwrap();
        let z0 = inst.truth.clone().unwrap();
        for (a, b) in z.iter().zip(&z0) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn propagation_handles_scaled_observations() {
        let mut inst = fixture_3x3();
        // Scale each observation by a different nonzero factor; the
        // completion is unchanged.
        for (k, c) in inst.constraints.iter_mut().enumerate() {
            let f = 0.5 + k as f64;
            c.terms[0].c *= f;
            c.rhs *= f;
        }
        let z = propagate_truth(&inst).unwrap();
        let z0 = inst.truth.clone().unwrap();
        for (a, b) in z.iter().zip(&z0) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn propagation_rejects_an_added_conflicting_observation() {
        let mut inst = fixture_3x3();
        // x3*y3 = 3 * (-2) = -6; claim 5 instead.
        inst.constraints.push(Constraint {
            terms: vec![Term { i: 3, j: 3, c: 1.0 }],
            rhs: 5.0,
        });
        match propagate_truth(&inst) {
            Err(ModelError::InconsistentTruth { constraint: 5, residual }) => {
                assert!((residual - (-11.0)).abs() < 1e-9);
            }
            other => panic!("expected inconsistency, got {other:?}"),
        }
    }

    #[test]
    fn propagation_rejects_a_degenerate_pivot() {
        // y1 = 0, then x2 must come from x2*y1 = 0: pivot vanishes.
        let term = |i, j, c| Term { i, j, c };
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
        assert!(matches!(
            propagate_truth(&inst),
            Err(ModelError::DegenerateTruth { constraint: 1, .. })
        ));
    }

    #[test]
    fn identity_mixing_is_a_no_op() {
        let inst = fixture_3x3();
        let c = Array2::<f64>::eye(5);
        let mixed = apply_mixing(&inst, c.view()).unwrap();
        assert_eq!(mixed, inst);
    }

    #[test]
    fn mixing_preserves_the_solution_set_witness() {
        let inst = fixture_3x3();
        let c = array![
            [1.0, 2.0, 0.0, 0.0, -1.0],
            [0.0, 1.0, 3.0, 0.0, 0.5],
            [2.0, 0.0, 1.0, 1.0, 0.0],
            [0.0, -1.0, 0.0, 2.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 1.0],
        ];
        let mixed = apply_mixing(&inst, c.view()).unwrap();
        assert_eq!(mixed.num_constraints(), 5);
        let z0 = inst.truth.clone().unwrap();
        for h in mixed.h_polys() {
            assert!(h.eval(&z0).abs() <= 1e-12 * (1.0 + h.max_abs_coeff()));
        }
        // Mixed rows touch several products, so they are not elementary.
        assert!(!mixed.is_elementary());
        assert_eq!(mixed.max_degree(), 2);
    }

    #[test]
    fn mixing_folds_constants_into_the_rhs() {
        let inst = fixture_3x3();
        let mut c = Array2::<f64>::eye(5);
        c[(0, 1)] = 2.0;
        let mixed = apply_mixing(&inst, c.view()).unwrap();
        // Row 0 becomes h1 + 2 h2 = y1 + 2 y2 - 13: rhs folds to 13.
        assert_eq!(mixed.constraints[0].rhs, 13.0);
        assert_eq!(mixed.constraints[0].terms.len(), 2);
    }

    #[test]
    fn mixing_rejects_rank_deficiency_and_empty_rows() {
        let inst = fixture_3x3();
        let mut c = Array2::<f64>::eye(5);
        let dup = c.row(2).to_owned();
        c.row_mut(3).assign(&dup);
        assert!(matches!(
            apply_mixing(&inst, c.view()),
            Err(ModelError::MixingSingular { .. })
        ));
        let wide = Array2::<f64>::eye(4);
        assert!(matches!(
            apply_mixing(&inst, wide.view()),
            Err(ModelError::MixingShape { cols: 4, expected: 5 })
        ));
    }

    #[test]
    fn validation_catches_bad_indices_and_empty_constraints() {
        let mut inst = fixture_3x3();
        inst.constraints[0].terms[0].j = 9;
        assert!(matches!(
            inst.validate(),
            Err(ModelError::IndexOutOfRange { what: "column index j", .. })
        ));
        let mut inst = fixture_3x3();
        inst.constraints[2].terms.clear();
        assert!(matches!(
            inst.validate(),
            Err(ModelError::EmptyConstraint { constraint: 2 })
        ));
    }
}
