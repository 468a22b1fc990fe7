//! Acceptance battery: one test per headline guarantee, so the harness's
//! per-test line doubles as the pass/fail record for each. The batteries
//! deliberately re-derive every expected answer with an independent oracle
//! (polynomial expansion, truth tables, BFS) rather than trusting any
//! intermediate representation.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twcircuit::gen::{self, GenConfig, Shape};
use twcircuit::poly::{self, equiv_exact, equiv_random, expand, ExpandOptions};
use twcircuit::reach::{bfs_oracle, solve_reach_telemetry, ReachInstance};
use twcircuit::td::{balance_td, ceil_log_5_4, root_with_output};
use twcircuit::term::{self, Term, TermCtx};
use twcircuit::traceback::{
    brent_balance, standard_form, traceback, traceback_instrumented, TracebackConfig,
    TracebackMode,
};
use twcircuit::transforms::{
    arithmetize, check_preprocessed, dearithmetize, md_transform, preprocess, reduce_fanout,
    PreprocessedPair,
};
use twcircuit::width_sim::width_simulate;
use twcircuit::{Circuit, CircuitKind, FieldSpec, Graph, Monomial, TreeDecomposition};

const RANDOM_P: u64 = (1 << 31) - 1;
const RANDOM_TRIALS: u32 = 20;

fn exact() -> FieldSpec {
    FieldSpec::ExactInteger
}

fn opts() -> ExpandOptions {
    ExpandOptions::default()
}

fn prepare(c: &Circuit, td: &TreeDecomposition) -> PreprocessedPair {
    preprocess(c, &root_with_output(td, c)).expect("generated pair preprocesses")
}

/// Exact equivalence, cross-checked against the randomized tester on the same
/// pair so the two verdicts can never drift apart silently.
fn checked_equiv(a: &Circuit, b: &Circuit, seed: u64) -> bool {
    let e = equiv_exact(a, b, &exact(), opts()).expect("pair fits the expansion budget");
    let r = equiv_random(a, b, RANDOM_P, RANDOM_TRIALS, seed)
        .expect("randomized equivalence runs");
    assert_eq!(
        e, r,
        "randomized equivalence disagrees with exact expansion (seed {seed})"
    );
    e
}

fn bool_points(vars: &[String], bits: u32) -> BTreeMap<String, BigInt> {
    vars.iter()
        .enumerate()
        .map(|(i, v)| (v.clone(), BigInt::from((bits >> i) & 1)))
        .collect()
}

#[test]
fn crit_01_md_flatten_is_exactly_equivalent() {
    let start = Instant::now();
    let cfg = TracebackConfig::new(TracebackMode::MdExact);
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 200 {
        seed += 1;
        assert!(seed < 2000, "generator starved the battery");
        let k = 1 + (seed % 4) as usize;
        let gates = 8 + (seed % 13) as usize;
        let (c, td) = gen::gen_instance(&GenConfig::new(gates, k, Shape::Md, 0xACC0 + seed));
        if c.size_total() > 40 {
            continue;
        }
        assert!(c.is_multiplicatively_disjoint(), "seed {seed}: bad shape");
        assert!(td.width() <= 4, "seed {seed}: width {}", td.width());
        let p = prepare(&c, &td);
        let f = traceback(&p, &cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            checked_equiv(&c, f.circuit(), seed),
            "seed {seed}: flatten changed the polynomial"
        );
        done += 1;
    }
    assert!(
        start.elapsed() < Duration::from_secs(300),
        "battery took {:?}, budget is five minutes",
        start.elapsed()
    );
}

#[test]
fn crit_02_sm_flatten_preserves_syntactic_multilinearity() {
    let cfg = TracebackConfig::new(TracebackMode::SynMultilinear);
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 100 {
        seed += 1;
        assert!(seed < 1000, "generator starved the battery");
        let k = 1 + (seed % 3) as usize;
        let gates = 8 + (seed % 13) as usize;
        let (c, td) = gen::gen_instance(&GenConfig::new(gates, k, Shape::Sm, 0x5300 + seed));
        assert!(c.is_syntactically_multilinear(), "seed {seed}: bad shape");
        let p = prepare(&c, &td);
        let f = traceback(&p, &cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            f.circuit().is_syntactically_multilinear(),
            "seed {seed}: output formula repeats a variable under a product"
        );
        assert!(
            checked_equiv(&c, f.circuit(), seed),
            "seed {seed}: flatten changed the polynomial"
        );
        done += 1;
    }
}

#[test]
fn crit_03_finite_field_flatten_agrees_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1E1D);
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 100 {
        seed += 1;
        assert!(seed < 6000, "could not collect enough non-md instances");
        let k = 1 + (seed % 3) as usize;
        let gates = 10 + (seed % 13) as usize;
        let mut cfg = GenConfig::new(gates, k, Shape::Arith, 0xFF00 + seed);
        cfg.vars = 6;
        let (c, td) = gen::gen_instance(&cfg);
        // The battery is about circuits the exact modes reject.
        if c.is_multiplicatively_disjoint() {
            continue;
        }
        let vars: Vec<String> = c.variables().into_iter().collect();
        assert!(vars.len() <= 10, "seed {seed}: too many inputs");
        let p = prepare(&c, &td);

        // GF(2): exhaustive agreement on every 0/1 point. The flatten's
        // per-gate occurrence caps (2^(k+1) here, q^(k+1) below) are enforced
        // by assertions inside the instrumented run, so completing it is the
        // witness that no intermediate ever broke the cap.
        let (f2, stats) =
            traceback_instrumented(&p, &TracebackConfig::new(TracebackMode::FiniteField(2)))
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(stats.calls > 0, "seed {seed}: instrumentation lost the run");
        let gf2 = FieldSpec::Gf2;
        for bits in 0u32..(1 << vars.len()) {
            let asn = bool_points(&vars, bits);
            let want = c.evaluate(&asn, &gf2).unwrap();
            let got = f2.evaluate(&asn, &gf2).unwrap();
            assert_eq!(want, got, "seed {seed}: disagrees at point {bits:b}");
        }

        for q in [3u64, 5] {
            let (fq, _) = traceback_instrumented(
                &p,
                &TracebackConfig::new(TracebackMode::FiniteField(q)),
            )
            .unwrap_or_else(|e| panic!("seed {seed} q={q}: {e}"));
            let fs = FieldSpec::gfp(q).unwrap();
            for round in 0..12 {
                let asn: BTreeMap<String, BigInt> = vars
                    .iter()
                    .map(|v| (v.clone(), BigInt::from(rng.gen_range(0..q))))
                    .collect();
                assert_eq!(
                    c.evaluate(&asn, &fs).unwrap(),
                    fq.evaluate(&asn, &fs).unwrap(),
                    "seed {seed} q={q} round {round}: values differ"
                );
            }
        }
        done += 1;
    }
}

#[test]
fn crit_04_balanced_decompositions_meet_width_and_depth_bounds() {
    for seed in 0..200u64 {
        // Alternate graph-grown and circuit-grown decompositions.
        let (g, td, n) = if seed % 2 == 0 {
            let n = 2 + (seed % 39) as u32;
            let k = 1 + (seed % 4) as usize;
            let bias = [0.2, 0.5, 0.8][(seed % 3) as usize];
            let (g, td) = gen::gen_graph_with_td(n, k, bias, false, 0x7D00 + seed);
            (g, td, n as u64)
        } else {
            let k = 1 + (seed % 4) as usize;
            let gates = 8 + (seed % 23) as usize;
            let (c, td) =
                gen::gen_instance(&GenConfig::new(gates, k, Shape::Arith, 0x7E00 + seed));
            let n = c.size_total() as u64;
            (Graph::of_circuit(&c), td, n)
        };
        assert!(td.validate(&g).is_empty(), "seed {seed}: generator emitted a bad pair");
        let kw = td.width();
        let bal = balance_td(&g, &td).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            bal.validate(&g).is_empty(),
            "seed {seed}: balanced decomposition is invalid"
        );
        assert!(
            bal.width() <= 3 * kw + 2,
            "seed {seed}: width {} exceeds 3*{kw}+2",
            bal.width()
        );
        let bound = 2 * ceil_log_5_4(n) as usize;
        assert!(
            bal.depth() <= bound,
            "seed {seed}: depth {} exceeds {bound} (n={n})",
            bal.depth()
        );
    }
}

#[test]
fn crit_05_preprocessing_bounds_and_idempotence() {
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 200 {
        seed += 1;
        let k = 1 + (seed % 4) as usize;
        let gates = 8 + (seed % 17) as usize;
        let shape = [Shape::Arith, Shape::Md, Shape::Sm][(seed % 3) as usize];
        let (c, td) = gen::gen_instance(&GenConfig::new(gates, k, shape, 0x9E00 + seed));
        let kw = td.width();
        let bal = balance_td(&Graph::of_circuit(&c), &td)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let rooted = root_with_output(&bal, &c);
        let pre = preprocess(&c, &rooted).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            pre.circuit.size_total() <= 2 * c.size_total(),
            "seed {seed}: grew from {} to {}",
            c.size_total(),
            pre.circuit.size_total()
        );
        assert!(
            pre.td.width() <= 3 * kw + 2,
            "seed {seed}: width {} exceeds 3*{kw}+2",
            pre.td.width()
        );
        assert!(check_preprocessed(&pre), "seed {seed}: output fails its own contract");
        assert!(
            checked_equiv(&c, &pre.circuit, seed),
            "seed {seed}: preprocessing changed the polynomial"
        );
        let again =
            preprocess(&pre.circuit, &pre.td).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(
            again.circuit.size_total(),
            pre.circuit.size_total(),
            "seed {seed}: preprocessing is not idempotent (size changed)"
        );
        assert!(check_preprocessed(&again), "seed {seed}: second pass broke the contract");
        done += 1;
    }
}

#[test]
fn crit_06_md_transform_bounds_and_equivalence() {
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 100 {
        seed += 1;
        let width = 1 + (seed % 3) as usize;
        let height = 1 + (seed % 2) as u32;
        let bias = 0.3 + 0.1 * (seed % 5) as f64;
        let c0 = gen::gen_leveled(width, height, bias, 0x3D00 + seed);
        let c = reduce_fanout(&c0).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            checked_equiv(&c0, &c, seed),
            "seed {seed}: fan-out reduction changed the polynomial"
        );
        let w = c.circuit_width().expect("fan-out reduction keeps levels");
        let s = c.size_total() as u128;
        let d = c.mult_chain_length() as u32;
        let (out, mtd) = md_transform(&c).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            out.is_multiplicatively_disjoint(),
            "seed {seed}: output is not multiplicatively disjoint"
        );
        assert!(
            checked_equiv(&c, &out, seed),
            "seed {seed}: transform changed the polynomial"
        );
        if s > 1 {
            let bound = (s.pow(d + 2) - 1) / (s - 1) - 1;
            assert!(
                (out.size_total() as u128) <= bound,
                "seed {seed}: size {} exceeds {bound} (s={s}, d={d})",
                out.size_total()
            );
        }
        assert!(
            mtd.validate(&Graph::of_circuit(&out)).is_empty(),
            "seed {seed}: emitted decomposition is invalid"
        );
        assert!(
            mtd.width() <= 2 * w - 1,
            "seed {seed}: decomposition width {} exceeds 2*{w}-1",
            mtd.width()
        );
        done += 1;
    }
}

#[test]
fn crit_07_boolean_round_trip_and_depth_bound() {
    let cfg2 = TracebackConfig::new(TracebackMode::FiniteField(2));
    let gf2 = FieldSpec::Gf2;
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 100 {
        seed += 1;
        let k = 1 + (seed % 3) as usize;
        let gates = 8 + (seed % 9) as usize;
        let mut cfg = GenConfig::new(gates, k, Shape::Bool, 0xB001 + seed);
        cfg.vars = 4 + (seed % 5) as usize;
        let (c, td) = gen::gen_instance(&cfg);
        let vars: Vec<String> = c.variables().into_iter().collect();
        assert!(vars.len() <= 8, "seed {seed}: too many inputs");
        let (ac, atd) = arithmetize(&c, &td).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let p = prepare(&ac, &atd);
        let f = traceback(&p, &cfg2).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let bf = dearithmetize(&f).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let pre_size = bf.size_total();
        let bal = brent_balance(&bf);
        let bound = 10.0 * (pre_size as f64).log2() + 10.0;
        assert!(
            (bal.depth() as f64) <= bound,
            "seed {seed}: depth {} exceeds {bound} (pre-balance size {pre_size})",
            bal.depth()
        );
        for bits in 0u32..(1 << vars.len()) {
            let asn = bool_points(&vars, bits);
            assert_eq!(
                c.evaluate(&asn, &gf2).unwrap(),
                bal.evaluate(&asn, &gf2).unwrap(),
                "seed {seed}: truth tables differ at point {bits:b}"
            );
        }
        done += 1;
    }
}

#[test]
fn crit_08_width_simulation_equivalence_and_growth() {
    let mut done = 0u32;
    let mut seed = 0u64;
    while done < 100 {
        seed += 1;
        let k = 1 + (seed % 3) as usize;
        let gates = 8 + (seed % 13) as usize;
        let (c, td) = gen::gen_instance(&GenConfig::new(gates, k, Shape::Arith, 0x51A0 + seed));
        let p = prepare(&c, &td);
        let kp = p.td.width();
        let rep = width_simulate(&p).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            checked_equiv(&c, &rep.output, seed),
            "seed {seed}: simulation changed the polynomial"
        );
        // Final running width per node; growth over the children's maximum
        // stays within k+2.
        let mut node_w: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &rep.per_level_trace {
            node_w.insert(r.node, r.width_so_far);
        }
        for t in 0..p.td.num_nodes() {
            let cm = p.td.children(t).iter().map(|ch| node_w[ch]).max().unwrap_or(0);
            assert!(
                node_w[&t] <= cm + kp + 2,
                "seed {seed}: node {t} grew from {cm} to {} (k={kp})",
                node_w[&t]
            );
        }
        done += 1;
    }
}

#[test]
fn crit_09_reachability_matches_bfs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9EAC);
    let mut reachable = 0u32;
    let mut unreachable = 0u32;
    for seed in 0..500u64 {
        let n = 2 + (seed % 29) as u32;
        let k = 1 + (seed % 3) as usize;
        let bias = [0.08, 0.3, 0.6, 0.9][(seed % 4) as usize];
        let (g, td) = gen::gen_graph_with_td(n, k, bias, true, 0xD16 + seed);
        let (s, t) = if seed % 10 == 0 {
            let v = rng.gen_range(1..=n);
            (v, v)
        } else {
            (rng.gen_range(1..=n), rng.gen_range(1..=n))
        };
        let want = bfs_oracle(&g, s, t);
        let inst = ReachInstance::new(g, s, t, td).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let (got, tele) =
            solve_reach_telemetry(&inst).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(got, want, "seed {seed}: s={s} t={t} n={n}");
        let e = &tele.eval;
        assert!(
            (e.max_frame_coefficient_bits as u64) <= e.budget.max_monomials,
            "seed {seed}: a frame held {} coefficients, budget {}",
            e.max_frame_coefficient_bits,
            e.budget.max_monomials
        );
        assert!(
            e.max_frame_z_vars <= e.budget.max_z_vars,
            "seed {seed}: a frame held {} z-variables, budget {}",
            e.max_frame_z_vars,
            e.budget.max_z_vars
        );
        if want {
            reachable += 1;
        } else {
            unreachable += 1;
        }
    }
    // The battery must actually exercise both answers, including the
    // disconnected graphs the low edge bias produces.
    assert!(
        reachable >= 50 && unreachable >= 50,
        "battery lost its mix: {reachable} reachable, {unreachable} unreachable"
    );
}

#[test]
fn crit_10_randomized_equivalence_agrees_with_exact() {
    // checked_equiv asserts agreement on every pair it sees; this battery
    // feeds it both equivalent pairs (an instance against its width-bounded
    // resimulation) and almost-surely-inequivalent pairs (two independent
    // draws), on top of the cross-checks the other batteries run inline.
    let mut pairs = 0u32;
    let mut seed = 0u64;
    while pairs < 120 {
        seed += 1;
        let k = 1 + (seed % 3) as usize;
        let shape = [Shape::Arith, Shape::Md, Shape::Sm][(seed % 3) as usize];
        let gates = 8 + (seed % 11) as usize;
        let (a, td) = gen::gen_instance(&GenConfig::new(gates, k, shape, 0xE0_0000 + seed));
        let p = prepare(&a, &td);
        let sim = width_simulate(&p).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(
            checked_equiv(&a, &sim.output, seed),
            "seed {seed}: resimulation must be equivalent"
        );
        let (b, _) = gen::gen_instance(&GenConfig::new(
            8 + ((seed + 3) % 11) as usize,
            k,
            Shape::Arith,
            0xE1_0000 + seed,
        ));
        let _ = checked_equiv(&a, &b, seed ^ 0x55);
        pairs += 2;
    }
}

#[test]
fn crit_11_standard_form_matches_coefficient_oracle() {
    // Exhaustive three-variable battery: every inclusion pattern over the
    // eight z-monomials (the all-variables monomial is pinned so each
    // instance carries all three z-variables and the subset bitmasks line up
    // with form.vars), under three coefficient schemes. Coefficient
    // extraction works by inclusion-exclusion over super-monomials with sign
    // (-1)^(|a| - |a'|); the mixed-sign schemes would catch a slipped sign on
    // any stratum.
    let ctx = TermCtx::new(exact());
    for scheme in 0..3u32 {
        for subset in 0u32..128 {
            let present: Vec<u64> = (0..7u64)
                .filter(|i| subset >> i & 1 == 1)
                .chain([7])
                .collect();
            let mut acc: Option<Term> = None;
            for &mask in &present {
                let mut t = match scheme {
                    0 => ctx.constant(BigInt::from(1)),
                    1 => ctx.constant(BigInt::from(if mask % 2 == 0 { -1 } else { 2 })),
                    _ => ctx.mul(
                        ctx.constant(BigInt::from(if mask % 3 == 0 { -2 } else { 1 })),
                        ctx.var("x0"),
                    ),
                };
                for i in 0..3 {
                    if mask >> i & 1 == 1 {
                        t = ctx.mul(t, ctx.z(&format!("g{i}")));
                    }
                }
                acc = Some(match acc {
                    None => t,
                    Some(a) => ctx.add(a, t),
                });
            }
            let f = term::materialize(&acc.unwrap(), CircuitKind::Arithmetic);
            let form = standard_form(&f)
                .unwrap_or_else(|e| panic!("scheme {scheme} subset {subset:07b}: {e}"));
            assert_eq!(
                form.vars,
                vec!["g0".to_string(), "g1".to_string(), "g2".to_string()],
                "scheme {scheme} subset {subset:07b}: variable order drifted"
            );
            let full = expand(f.circuit(), &exact(), opts()).unwrap();
            for mask in 0u64..8 {
                let part = Monomial::from_map(
                    (0..3)
                        .filter(|i| mask >> i & 1 == 1)
                        .map(|i| (poly::z_var_name(&format!("g{i}")), 1))
                        .collect(),
                );
                let want = full.coefficient_poly(&part, |v| v.starts_with("z_"));
                match form.coeffs.get(&mask) {
                    Some(cf) => {
                        let got = expand(cf.circuit(), &exact(), opts()).unwrap();
                        assert_eq!(
                            got, want,
                            "scheme {scheme} subset {subset:07b} mask {mask:03b}"
                        );
                    }
                    None => assert!(
                        want.is_zero(),
                        "scheme {scheme} subset {subset:07b} mask {mask:03b}: dropped a nonzero coefficient"
                    ),
                }
            }
            let rec = form.reconstruct();
            assert!(
                equiv_exact(f.circuit(), rec.circuit(), &exact(), opts()).unwrap(),
                "scheme {scheme} subset {subset:07b}: reconstruction is not the identity"
            );
        }
    }
}
