//! SDPA sparse ("dat-s") text format import and export.
//!
//! The file format states
//!
//! ```text
//! (P)  min Σᵢ cᵢ·xᵢ   s.t.  X = Σᵢ xᵢFᵢ − F₀,  X ⪰ 0
//! (D)  max ⟨F₀, Y⟩    s.t.  ⟨Fᵢ, Y⟩ = cᵢ,       Y ⪰ 0
//! ```
//!
//! Our standard primal form is the file's (D) with `Fᵢ = Aᵢ`, the c line
//! holding `b`, and `F₀ = −C`; our optimal value is the negation of the
//! file's optimum.  Nonnegative blocks map to the format's negative
//! (diagonal) block sizes.  Free blocks have no counterpart, so they are
//! exported as a diagonal block of twice the width carrying the classic
//! `x = x⁺ − x⁻` split (mirrored, negated data on the second half); a
//! structured comment `* mcsos: {...}` records the split so import can
//! reconstruct the free block exactly, while foreign solvers still read a
//! well-formed ordinary file.  Coefficients are printed with 17
//! significant digits, which round-trips every finite `f64` bit-exactly.

use std::fmt::Write as _;

use serde::Deserialize;

use super::{BlockSpec, SdpError, SdpProblem};

/// Marker prefix of the structured comment.
const ANNOTATION: &str = "* mcsos:";

#[derive(Debug, Deserialize, serde::Serialize)]
struct Annotation {
    /// Free blocks as (1-based file block index, original free dimension).
    free: Vec<(usize, usize)>,
}

fn fmt_coeff(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes a problem to SDPA sparse text.
///
/// Data is canonicalized first (duplicates merged, zeros dropped, entries
/// sorted), so re-importing yields the canonical form of `p`.
pub fn export_sdpa(p: &SdpProblem) -> Result<Vec<u8>, SdpError> {
    p.validate()?;
    let canon = p.canonical();
    let mut out = String::new();
    let mut annotation = Annotation { free: Vec::new() };
    for (b, spec) in canon.blocks.iter().enumerate() {
        if let BlockSpec::Free(n) = spec {
            annotation.free.push((b + 1, *n));
        }
    }
    out.push_str("* SDPA sparse export\n");
    if !annotation.free.is_empty() {
        let json = serde_json::to_string(&annotation).expect("annotation serializes");
        let _ = writeln!(out, "{ANNOTATION} {json}");
    }
    let _ = writeln!(out, "{} = mDIM", canon.rhs.len());
    let _ = writeln!(out, "{} = nBLOCK", canon.blocks.len());
    let struct_line: Vec<String> = canon
        .blocks
        .iter()
        .map(|spec| match *spec {
            BlockSpec::Psd(n) => format!("{n}"),
            BlockSpec::Nonneg(n) => format!("-{n}"),
            BlockSpec::Free(n) => format!("-{}", 2 * n),
        })
        .collect();
    let _ = writeln!(out, "{} = bLOCKsTRUCT", struct_line.join(" "));
    let rhs_line: Vec<String> = canon.rhs.iter().map(|&v| fmt_coeff(v)).collect();
    out.push_str(&rhs_line.join(" "));
    out.push('\n');
    // Entry lines: <matno> <block> <i> <j> <value>, 1-based, i <= j.
    // matno 0 holds F0 = -C.
    let mut emit = |mat: usize, block: usize, spec: BlockSpec, i: u32, j: u32, v: f64| {
        match spec {
            BlockSpec::Free(n) => {
                let _ = writeln!(
                    out,
                    "{mat} {} {} {} {}",
                    block + 1,
                    i + 1,
                    i + 1,
                    fmt_coeff(v)
                );
                let _ = writeln!(
                    out,
                    "{mat} {} {} {} {}",
                    block + 1,
                    n as u32 + i + 1,
                    n as u32 + i + 1,
                    fmt_coeff(-v)
                );
            }
            _ => {
                let _ = writeln!(
                    out,
                    "{mat} {} {} {} {}",
                    block + 1,
                    i + 1,
                    j + 1,
                    fmt_coeff(v)
                );
            }
        }
    };
    for (b, coo) in canon.objective.iter().enumerate() {
        for &(i, j, v) in coo {
            emit(0, b, canon.blocks[b], i, j, -v);
        }
    }
    for (row, parts) in canon.rows.iter().enumerate() {
        for (b, coo) in parts {
            for &(i, j, v) in coo {
                emit(row + 1, *b, canon.blocks[*b], i, j, v);
            }
        }
    }
    Ok(out.into_bytes())
}

/// One parse position for error reporting.
struct Cursor<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    annotation: Option<Annotation>,
    seen: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            annotation: None,
            seen: 0,
        }
    }

    fn err(line: usize, msg: impl Into<String>) -> SdpError {
        SdpError::Format {
            path: "sdpa".to_string(),
            line: line + 1,
            msg: msg.into(),
        }
    }

    /// Next structural line: skips blanks and comments, collecting the
    /// annotation if present.
    fn next_data(&mut self) -> Result<Option<(usize, &'a str)>, SdpError> {
        for (idx, raw) in self.lines.by_ref() {
            self.seen = idx;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('"') || line.starts_with('*') {
                if let Some(json) = line.strip_prefix(ANNOTATION) {
                    let parsed: Annotation = serde_json::from_str(json.trim()).map_err(|e| {
                        Cursor::err(idx, format!("malformed structured comment: {e}"))
                    })?;
                    self.annotation = Some(parsed);
                }
                continue;
            }
            return Ok(Some((idx, line)));
        }
        Ok(None)
    }

    fn require_data(&mut self, what: &str) -> Result<(usize, &'a str), SdpError> {
        let at_eof = self.seen;
        self.next_data()?
            .ok_or_else(|| Cursor::err(at_eof, format!("missing {what}")))
    }
}

/// Splits on whitespace and the separator characters SDPA files allow.
fn tokens(line: &str) -> Vec<&str> {
    line.split(|c: char| c.is_whitespace() || matches!(c, ',' | '(' | ')' | '{' | '}'))
        .filter(|t| !t.is_empty())
        .collect()
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize, SdpError> {
    tok.parse()
        .map_err(|_| Cursor::err(line, format!("{what}: expected an integer, got {tok:?}")))
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, SdpError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Cursor::err(line, format!("{what}: expected a number, got {tok:?}")))?;
    if !v.is_finite() {
        return Err(Cursor::err(line, format!("{what}: non-finite value {tok:?}")));
    }
    Ok(v)
}

/// How one file block maps back into the problem.
#[derive(Clone, Copy)]
enum FileBlock {
    Direct(usize),
    /// Annotated split pair: problem block index and free dimension.
    FreeSplit(usize, usize),
}

/// Parses SDPA sparse text into a problem.
///
/// Accepts the common separator variations (commas, braces, parentheses)
/// and leading comment lines.  A structured `* mcsos:` comment written by
/// [`export_sdpa`] turns the corresponding split diagonal blocks back into
/// free blocks, with the mirrored half checked for consistency.
pub fn import_sdpa(bytes: &[u8]) -> Result<SdpProblem, SdpError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SdpError::Format {
        path: "sdpa".to_string(),
        line: e.valid_up_to(),
        msg: "file is not valid UTF-8".to_string(),
    })?;
    let mut cur = Cursor::new(text);

    let (lno, line) = cur.require_data("mDIM line")?;
    let m = parse_usize(tokens(line)[0], lno, "mDIM")?;
    let (lno, line) = cur.require_data("nBLOCK line")?;
    let nblock = parse_usize(tokens(line)[0], lno, "nBLOCK")?;
    let (lno, line) = cur.require_data("bLOCKsTRUCT line")?;
    let toks = tokens(line);
    if toks.len() < nblock {
        return Err(Cursor::err(
            lno,
            format!("bLOCKsTRUCT lists {} sizes, expected {nblock}", toks.len()),
        ));
    }
    let mut sizes = Vec::with_capacity(nblock);
    for tok in &toks[..nblock] {
        let v: i64 = tok.parse().map_err(|_| {
            Cursor::err(lno, format!("bLOCKsTRUCT: expected an integer, got {tok:?}"))
        })?;
        if v == 0 {
            return Err(Cursor::err(lno, "bLOCKsTRUCT: zero block size"));
        }
        sizes.push(v);
    }
    let (lno, line) = cur.require_data("c vector line")?;
    let toks = tokens(line);
    if toks.len() != m {
        return Err(Cursor::err(
            lno,
            format!("c vector has {} entries, expected {m}", toks.len()),
        ));
    }
    let mut rhs = Vec::with_capacity(m);
    for tok in toks {
        rhs.push(parse_f64(tok, lno, "c vector")?);
    }

    // The annotation comment must appear before the end of the header
    // (our exporter puts it first); later comments are plain comments.
    let free_of: std::collections::HashMap<usize, usize> = cur
        .annotation
        .as_ref()
        .map(|a| a.free.iter().copied().collect())
        .unwrap_or_default();

    let mut problem = SdpProblem::new();
    let mut file_blocks = Vec::with_capacity(nblock);
    for (fb, &sz) in sizes.iter().enumerate() {
        if let Some(&dim) = free_of.get(&(fb + 1)) {
            if sz >= 0 || (-sz) as usize != 2 * dim {
                return Err(Cursor::err(
                    0,
                    format!(
                        "structured comment marks block {} as free of dimension {dim}, \
                         but bLOCKsTRUCT gives {sz}",
                        fb + 1
                    ),
                ));
            }
            let b = problem.add_block(BlockSpec::Free(dim));
            file_blocks.push(FileBlock::FreeSplit(b, dim));
        } else if sz > 0 {
            let b = problem.add_block(BlockSpec::Psd(sz as usize));
            file_blocks.push(FileBlock::Direct(b));
        } else {
            let b = problem.add_block(BlockSpec::Nonneg((-sz) as usize));
            file_blocks.push(FileBlock::Direct(b));
        }
    }
    for &b in &rhs {
        problem.add_constraint(b);
    }

    // Split halves are collected and reconciled after the scan.
    let mut split_pos: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); 1 + m];
    let mut split_neg: Vec<Vec<(usize, usize, usize, f64)>> = vec![Vec::new(); 1 + m];
    while let Some((lno, line)) = cur.next_data()? {
        let toks = tokens(line);
        if toks.len() != 5 {
            return Err(Cursor::err(
                lno,
                format!("entry line has {} fields, expected 5", toks.len()),
            ));
        }
        let mat = parse_usize(toks[0], lno, "matrix number")?;
        let blk = parse_usize(toks[1], lno, "block number")?;
        let i = parse_usize(toks[2], lno, "row index")?;
        let j = parse_usize(toks[3], lno, "column index")?;
        let v = parse_f64(toks[4], lno, "value")?;
        if mat > m {
            return Err(Cursor::err(lno, format!("matrix number {mat} exceeds mDIM {m}")));
        }
        if blk == 0 || blk > nblock {
            return Err(Cursor::err(lno, format!("block number {blk} out of range")));
        }
        if i == 0 || j == 0 {
            return Err(Cursor::err(lno, "entry indices are 1-based"));
        }
        let (i, j) = (i - 1, j - 1);
        let map_err = |e: SdpError| Cursor::err(lno, e.to_string());
        match file_blocks[blk - 1] {
            FileBlock::Direct(b) => {
                if mat == 0 {
                    problem.obj_entry(b, i, j, -v).map_err(map_err)?;
                } else {
                    problem.con_entry(mat - 1, b, i, j, v).map_err(map_err)?;
                }
            }
            FileBlock::FreeSplit(b, dim) => {
                if i != j {
                    return Err(Cursor::err(lno, "split free block entry must be diagonal"));
                }
                if i < dim {
                    split_pos[mat].push((b, i, lno, v));
                } else if i < 2 * dim {
                    split_neg[mat].push((b, i - dim, lno, v));
                } else {
                    return Err(Cursor::err(
                        lno,
                        format!("index {} out of range for split block {blk}", i + 1),
                    ));
                }
            }
        }
    }
    // Reconcile split halves: every positive-half entry needs an exactly
    // mirrored negative-half entry, and vice versa.
    for mat in 0..=m {
        let mut neg: std::collections::HashMap<(usize, usize), (usize, f64)> = split_neg[mat]
            .iter()
            .map(|&(b, t, lno, v)| ((b, t), (lno, v)))
            .collect();
        for &(b, t, lno, v) in &split_pos[mat] {
            match neg.remove(&(b, t)) {
                Some((_, nv)) if nv == -v => {
                    let val = if mat == 0 { -v } else { v };
                    if mat == 0 {
                        problem.obj_entry(b, t, t, val).map_err(|e| Cursor::err(lno, e.to_string()))?;
                    } else {
                        problem
                            .con_entry(mat - 1, b, t, t, val)
                            .map_err(|e| Cursor::err(lno, e.to_string()))?;
                    }
                }
                Some((nlno, nv)) => {
                    return Err(Cursor::err(
                        nlno,
                        format!("split free block halves disagree: {v} vs {nv}"),
                    ));
                }
                None => {
                    return Err(Cursor::err(
                        lno,
                        "split free block entry lacks its mirrored negative half",
                    ));
                }
            }
        }
        if let Some(((_, _), (nlno, _))) = neg.into_iter().next() {
            return Err(Cursor::err(
                nlno,
                "split free block entry lacks its mirrored positive half",
            ));
        }
    }
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::super::{planted_problem, BlockSpec, SdpOptions, SdpProblem, SdpStatus};
    use super::{export_sdpa, import_sdpa};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn mixed_problem() -> SdpProblem {
        let mut p = SdpProblem::new();
        let bp = p.add_block(BlockSpec::Psd(3));
        let bn = p.add_block(BlockSpec::Nonneg(2));
        let bf = p.add_block(BlockSpec::Free(2));
        p.obj_entry(bp, 0, 0, 1.0 / 3.0).unwrap();
        p.obj_entry(bp, 0, 2, -std::f64::consts::SQRT_2).unwrap();
        p.obj_entry(bn, 1, 1, 0.125).unwrap();
        p.obj_entry(bf, 0, 0, -7.25e-3).unwrap();
        let r0 = p.add_constraint(std::f64::consts::PI);
        p.con_entry(r0, bp, 1, 2, 2.5).unwrap();
        p.con_entry(r0, bn, 0, 0, -1.0).unwrap();
        p.con_entry(r0, bf, 1, 1, 1e-11).unwrap();
        let r1 = p.add_constraint(-0.625);
        p.con_entry(r1, bp, 0, 0, 4.0).unwrap();
        p.con_entry(r1, bf, 0, 0, 9.0).unwrap();
        p
    }

    fn assert_canonically_equal(a: &SdpProblem, b: &SdpProblem) {
        let (ca, cb) = (a.canonical(), b.canonical());
        assert_eq!(ca.blocks, cb.blocks);
        assert_eq!(ca.rhs.len(), cb.rhs.len());
        for (x, y) in ca.rhs.iter().zip(&cb.rhs) {
            assert_eq!(x.to_bits(), y.to_bits(), "rhs {x} vs {y}");
        }
        for (oa, ob) in ca.objective.iter().zip(&cb.objective) {
            assert_eq!(oa.len(), ob.len());
            for (&(i, j, u), &(k, l, v)) in oa.iter().zip(ob) {
                assert_eq!((i, j), (k, l));
                assert_eq!(u.to_bits(), v.to_bits(), "objective {u} vs {v}");
            }
        }
        for (ra, rb) in ca.rows.iter().zip(&cb.rows) {
            assert_eq!(ra.len(), rb.len());
            for ((ba, ta), (bb, tb)) in ra.iter().zip(rb) {
                assert_eq!(ba, bb);
                assert_eq!(ta.len(), tb.len());
                for (&(i, j, u), &(k, l, v)) in ta.iter().zip(tb) {
                    assert_eq!((i, j), (k, l));
                    assert_eq!(u.to_bits(), v.to_bits(), "row coeff {u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn round_trip_is_bit_exact_on_all_block_kinds() {
        let p = mixed_problem();
        let bytes = export_sdpa(&p).unwrap();
        let q = import_sdpa(&bytes).unwrap();
        assert_canonically_equal(&p, &q);
        // A second trip through text is idempotent.
        let bytes2 = export_sdpa(&q).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn export_emits_standard_layout() {
        let text = String::from_utf8(export_sdpa(&mixed_problem()).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('*'));
        assert!(lines[1].starts_with("* mcsos:"), "annotation line: {}", lines[1]);
        assert!(text.contains("2 = mDIM"));
        assert!(text.contains("3 = nBLOCK"));
        assert!(text.contains("3 -2 -4 = bLOCKsTRUCT"));
        // Free-block entries appear with mirrored negated halves.
        assert!(text.contains("2 3 1 1 9.0000000000000000e0"));
        assert!(text.contains("2 3 3 3 -9.0000000000000000e0"));
    }

    #[test]
    fn imported_problems_solve_to_the_same_optimum() {
        let mut rng = StdRng::seed_from_u64(11);
        let planted = planted_problem(
            &[BlockSpec::Psd(4), BlockSpec::Nonneg(3), BlockSpec::Free(2)],
            5,
            &mut rng,
        );
        let bytes = export_sdpa(&planted.problem).unwrap();
        let round = import_sdpa(&bytes).unwrap();
        let opts = SdpOptions::default();
        let a = planted.problem.solve(&opts).unwrap();
        let b = round.solve(&opts).unwrap();
        assert_eq!(a.status, SdpStatus::Optimal);
        // Canonical data is identical, so the solve path is bit-for-bit.
        assert_eq!(a.pobj.to_bits(), b.pobj.to_bits());
    }

    #[test]
    fn accepts_foreign_separator_styles_and_swapped_indices() {
        let text = r#"* hand-written test file
2 = mDIM
2 = nBLOCK
{2, -1} = bLOCKsTRUCT
1.0, 2.0
0 1 1 1 -1.0
1 1 1 2 0.5
1 2 1 1 1.0
2 1 2 1 1.5
"#;
        let p = import_sdpa(text.as_bytes()).unwrap();
        assert_eq!(p.blocks(), &[BlockSpec::Psd(2), BlockSpec::Nonneg(1)]);
        assert_eq!(p.rhs(), &[1.0, 2.0]);
        let canon = p.canonical();
        // Objective picked up F0 = -C negation.
        assert_eq!(canon.objective[0].as_slice(), &[(0u32, 0u32, 1.0)]);
        // The (2,1) entry landed in the upper triangle.
        assert_eq!(canon.rows[1][0].1.as_slice(), &[(0u32, 1u32, 1.5)]);
    }

    #[test]
    fn negative_blocks_without_annotation_stay_nonnegative() {
        let text = "1 = mDIM\n1 = nBLOCK\n-4 = bLOCKsTRUCT\n1.0\n1 1 2 2 1.0\n";
        let p = import_sdpa(text.as_bytes()).unwrap();
        assert_eq!(p.blocks(), &[BlockSpec::Nonneg(4)]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases: &[(&str, &str)] = &[
            ("", "missing mDIM"),
            ("1 = mDIM\n", "missing nBLOCK"),
            ("1 = mDIM\n1 = nBLOCK\nx = bLOCKsTRUCT\n", "expected an integer"),
            (
                "1 = mDIM\n1 = nBLOCK\n2 = bLOCKsTRUCT\n1.0 2.0\n",
                "c vector has 2 entries",
            ),
            (
                "1 = mDIM\n1 = nBLOCK\n2 = bLOCKsTRUCT\n1.0\n1 1 1\n",
                "entry line has 3 fields",
            ),
            (
                "1 = mDIM\n1 = nBLOCK\n2 = bLOCKsTRUCT\n1.0\n2 1 1 1 1.0\n",
                "matrix number 2 exceeds",
            ),
            (
                "1 = mDIM\n1 = nBLOCK\n2 = bLOCKsTRUCT\n1.0\n1 1 0 1 1.0\n",
                "1-based",
            ),
            (
                "1 = mDIM\n1 = nBLOCK\n-2 = bLOCKsTRUCT\n1.0\n1 1 1 2 1.0\n",
                "must be diagonal",
            ),
            (
                "1 = mDIM\n1 = nBLOCK\n2 = bLOCKsTRUCT\n1.0\n1 1 1 3 1.0\n",
                "out of range",
            ),
        ];
        for (text, needle) in cases {
            let err = import_sdpa(text.as_bytes()).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains(needle),
                "expected {needle:?} in error {msg:?} for input {text:?}"
            );
        }
    }

    #[test]
    fn split_free_blocks_must_mirror_exactly() {
        let good = "* mcsos: {\"free\":[[1,1]]}\n1 = mDIM\n1 = nBLOCK\n-2 = bLOCKsTRUCT\n1.0\n\
                    1 1 1 1 2.0\n1 1 2 2 -2.0\n";
        let p = import_sdpa(good.as_bytes()).unwrap();
        assert_eq!(p.blocks(), &[BlockSpec::Free(1)]);

        let missing = "* mcsos: {\"free\":[[1,1]]}\n1 = mDIM\n1 = nBLOCK\n-2 = bLOCKsTRUCT\n1.0\n\
                       1 1 1 1 2.0\n";
        assert!(import_sdpa(missing.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("mirrored negative half"));

        let skewed = "* mcsos: {\"free\":[[1,1]]}\n1 = mDIM\n1 = nBLOCK\n-2 = bLOCKsTRUCT\n1.0\n\
                      1 1 1 1 2.0\n1 1 2 2 -2.5\n";
        assert!(import_sdpa(skewed.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("halves disagree"));

        let orphan = "* mcsos: {\"free\":[[1,1]]}\n1 = mDIM\n1 = nBLOCK\n-2 = bLOCKsTRUCT\n1.0\n\
                      1 1 2 2 -2.0\n";
        assert!(import_sdpa(orphan.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("mirrored positive half"));
    }

    #[test]
    fn annotation_must_match_block_structure() {
        let text = "* mcsos: {\"free\":[[1,2]]}\n1 = mDIM\n1 = nBLOCK\n-2 = bLOCKsTRUCT\n1.0\n";
        let err = import_sdpa(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("bLOCKsTRUCT gives -2"));
    }

    #[test]
    fn extreme_magnitudes_survive_the_round_trip() {
        let mut p = SdpProblem::new();
        let b = p.add_block(BlockSpec::Psd(2));
        p.obj_entry(b, 0, 0, 4.9e-324_f64.max(2.2250738585072014e-308)).unwrap();
        p.obj_entry(b, 1, 1, 1.7976931348623157e308).unwrap();
        let r = p.add_constraint(-1.2345678901234567e-89);
        p.con_entry(r, b, 0, 1, 9.876543210987654e123).unwrap();
        let q = import_sdpa(&export_sdpa(&p).unwrap()).unwrap();
        assert_canonically_equal(&p, &q);
    }
}
