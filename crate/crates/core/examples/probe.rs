//! Throwaway debugging probe for the stage-2 solves. Not part of the crate.

use mcsos_core::model::{Constraint, Instance, Term};
use mcsos_core::pipeline::{
    baseline_identity, solve_end_to_end, stage1_direct, stage2_assemble, SolveOptions,
    Stage1Method,
};
use mcsos_core::sdpcore::SdpOptions;

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

fn fixture_single() -> Instance<f64> {
    Instance {
        n: 1,
        m: 1,
        constraints: vec![Constraint {
            terms: vec![Term { i: 1, j: 1, c: 1.0 }],
            rhs: 4.0,
        }],
        truth: Some(vec![4.0]),
        label: None,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let case = args.get(1).map(String::as_str).unwrap_or("stage2");
    match case {
        "single" => {
            let inst = fixture_single();
            let mut opts = SolveOptions::default();
            opts.sdp.verbose = true;
            match baseline_identity(&inst, &opts) {
                Ok(rec) => println!("baseline single: {rec:?}"),
                Err(e) => println!("baseline single error: {e:?}"),
            }
        }
        "stage2" => {
            let mu: f64 = args
                .get(2)
                .map(|s| s.parse().expect("mu"))
                .unwrap_or(1e6);
            let inst = fixture_3x3();
            let basis = inst.basis().unwrap();
            let s1 = stage1_direct(&inst).unwrap();
            let prob = stage2_assemble(&s1.fsum, &inst, &basis, mu).unwrap();
            let opts = SdpOptions { verbose: true, ..SdpOptions::default() };
            match prob.solve(&opts) {
                Ok(sol) => println!(
                    "status {:?}  pobj {:.6e}  dobj {:.6e}  iters {}",
                    sol.status, sol.pobj, sol.dobj, sol.iterations
                ),
                Err(e) => println!("solve error: {e:?}"),
            }
        }
        "e2e" => {
            let mu: f64 = args
                .get(2)
                .map(|s| s.parse().expect("mu"))
                .unwrap_or(1e6);
            let inst = fixture_3x3();
            let mut opts = SolveOptions::default();
            opts.mu = mu;
            opts.stage1 = if std::env::var("PROBE_STAGE1").as_deref() == Ok("sdp") {
                Stage1Method::Sdp
            } else {
                Stage1Method::Direct
            };
            opts.sdp.verbose = std::env::var("IPM_VERBOSE").is_ok();
            if let Some(g) = args.get(3) {
                opts.sdp.gap_tol = g.parse().expect("gap_tol");
            }
            if let Some(f) = args.get(4) {
                opts.sdp.feas_tol = f.parse().expect("feas_tol");
            }
            match solve_end_to_end(&inst, &opts) {
                Ok(rec) => println!(
                    "mu {mu:.0e}  status {:?}  rho* {:?}  Er {:?}  spectrum head {:?}",
                    rec.status,
                    rec.rho_star,
                    rec.error,
                    &rec.gram_spectrum[..3.min(rec.gram_spectrum.len())]
                ),
                Err(e) => println!("mu {mu:.0e}  e2e error: {e:?}"),
            }
        }
        "scaled" => {
            // Hand-balanced fixture: variables rescaled so every product is 1
            // in magnitude (x2 /= 5, x3 /= 3, y1 /= 7, y2 /= 3, y3 /= 2).
            let term = |i, j, c| Term { i, j, c };
            let inst = Instance {
                n: 3,
                m: 3,
                constraints: vec![
                    Constraint { terms: vec![term(1, 1, 1.0)], rhs: 1.0 },
                    Constraint { terms: vec![term(1, 2, 1.0)], rhs: 1.0 },
                    Constraint { terms: vec![term(2, 1, 1.0)], rhs: -1.0 },
                    Constraint { terms: vec![term(2, 3, 1.0)], rhs: 1.0 },
                    Constraint { terms: vec![term(3, 2, 1.0)], rhs: 1.0 },
                ],
                truth: Some(vec![-1.0, 1.0, 1.0, 1.0, -1.0]),
                label: Some("fixture-3x3-balanced".into()),
            };
            let mu: f64 = args
                .get(2)
                .map(|s| s.parse().expect("mu"))
                .unwrap_or(1e6);
            let mut opts = SolveOptions::default();
            opts.mu = mu;
            opts.stage1 = Stage1Method::Direct;
            opts.sdp.verbose = std::env::var("IPM_VERBOSE").is_ok();
            if let Some(g) = args.get(3) {
                opts.sdp.gap_tol = g.parse().expect("gap_tol");
            }
            if let Some(f) = args.get(4) {
                opts.sdp.feas_tol = f.parse().expect("feas_tol");
            }
            match solve_end_to_end(&inst, &opts) {
                Ok(rec) => println!(
                    "mu {mu:.0e}  status {:?}  rho* {:?}  Er {:?}  spectrum head {:?}",
                    rec.status,
                    rec.rho_star,
                    rec.error,
                    &rec.gram_spectrum[..3.min(rec.gram_spectrum.len())]
                ),
                Err(e) => println!("mu {mu:.0e}  e2e error: {e:?}"),
            }
        }
        other => panic!("unknown case {other}"),
    }
}
